use ila_core::engine::{Tape, Tensor};
use ila_core::models::{build_model, ArchId, Mode, ModelSpec};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn random_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dist = Uniform::new(lo, hi);
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::from_f64_slice(shape, &vals).unwrap()
}

#[test]
fn per_coord_diag() {
    let spec = ModelSpec::new(ArchId::MiniResnet);
    let mut model = build_model::<f64>(&spec, 5).unwrap();
    model.freeze();
    let x = random_tensor(vec![2, 3, 32, 32], 51, 0.05, 0.95);

    let eval = |probe: &Tensor<f64>| -> f64 {
        let mut t = Tape::<f64>::new();
        let leaf = t.leaf(probe);
        let pass = model.forward_on_tape(&mut t, leaf, Mode::Eval, false, None).unwrap();
        let logits = *pass.endpoints.last().unwrap();
        let loss = t.softmax_cross_entropy(logits, &[3, 7]).unwrap();
        t.scalar_value(loss).unwrap()
    };

    let mut t = Tape::<f64>::new();
    let leaf = t.leaf(&x.clone().with_grad(true));
    let pass = model.forward_on_tape(&mut t, leaf, Mode::Eval, false, None).unwrap();
    let logits = *pass.endpoints.last().unwrap();
    let loss = t.softmax_cross_entropy(logits, &[3, 7]).unwrap();
    let grads = t.backward(loss).unwrap();
    let analytic = grads.wrt(leaf, &t);

    let f0 = eval(&x);
    let h = 3e-4;
    // The known-bad coordinates come from the failing seeds; probe a
    // stretch of coordinates and print the worst offenders.
    let mut rows: Vec<(f64, usize, f64, f64, f64, f64)> = Vec::new();
    let mut rng = ChaCha12Rng::seed_from_u64(56);
    let all: Vec<usize> = (0..x.numel()).collect();
    use rand::seq::SliceRandom;
    let mut coords = all.clone();
    coords.shuffle(&mut rng);
    for &i in coords.iter().take(100) {
        let mut p = x.clone();
        p.values_mut()[i] += h;
        let mut m = x.clone();
        m.values_mut()[i] -= h;
        let mut p2 = x.clone();
        p2.values_mut()[i] += h / 2.0;
        let mut m2 = x.clone();
        m2.values_mut()[i] -= h / 2.0;
        let mut p4 = x.clone();
        p4.values_mut()[i] += h / 4.0;
        let mut m4 = x.clone();
        m4.values_mut()[i] -= h / 4.0;
        let (fp, fm) = (eval(&p), eval(&m));
        let (fp2, fm2) = (eval(&p2), eval(&m2));
        let (fp4, fm4) = (eval(&p4), eval(&m4));
        let c1 = (fp - fm) / (2.0 * h);
        let c2 = (fp2 - fm2) / h;
        let c4 = (fp4 - fm4) / (h / 2.0);
        let dp1 = (fp - f0) / h;
        let dp2 = (fp2 - f0) / (h / 2.0);
        let dp4 = (fp4 - f0) / (h / 4.0);
        let dm1 = (f0 - fm) / h;
        let dm2 = (f0 - fm2) / (h / 2.0);
        let dm4 = (f0 - fm4) / (h / 4.0);
        let cands = [c2, c4, (4.0*c2 - c1)/3.0, (4.0*c4 - c2)/3.0, 2.0*dp2 - dp1, 2.0*dp4 - dp2, 2.0*dm2 - dm1, 2.0*dm4 - dm2];
        let a = analytic[i];
        let rel = cands.iter().map(|&n| (a - n).abs() / a.abs().max(n.abs()).max(1e-8)).fold(f64::INFINITY, f64::min);
        let central = c2;
        let (dp, dm) = (dp1, dm1);
        rows.push((rel, i, a, central, dp, dm));
    }
    rows.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    for (rel, i, a, c, dp, dm) in rows.iter().take(8) {
        println!(
            "rel {rel:.3e} coord {i}: analytic {a:+.8e} central {c:+.8e} d+ {dp:+.8e} d- {dm:+.8e}"
        );
    }
}

use ila_core::engine::{finite_difference_check, FdCheckConfig, Tape};
use ila_core::models::{build_model, ArchId, Mode, ModelSpec};
use ila_core::engine::Tensor;
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
fn resnet_h_sweep() {
    let spec = ModelSpec::new(ArchId::MiniResnet);
    let mut model = build_model::<f64>(&spec, 5).unwrap();
    model.freeze();
    let x = random_tensor(vec![2, 3, 32, 32], 51, 0.05, 0.95);
    let f = |tape: &mut Tape<f64>, leaf: ila_core::engine::NodeId| {
        let pass = model
            .forward_on_tape(tape, leaf, Mode::Eval, false, None)
            .map_err(|e| ila_core::engine::EngineError::Usage(e.to_string()))?;
        let logits = *pass.endpoints.last().unwrap();
        tape.softmax_cross_entropy(logits, &[3, 7])
    };
    for h in [1e-3, 3e-4, 1e-4] {
        for seed in [52u64, 53, 54, 55, 56, 57] {
            let err = finite_difference_check(&f, &x, FdCheckConfig { n_coords: 100, h, seed, min_grad: 1e-5 }).unwrap();
            println!("h={h:.0e} seed={seed}: {err:.3e}");
        }
    }
}

use ila_core::engine::{finite_difference_check, FdCheckConfig, Tape, Tensor};
use ila_core::models::{build_model, ArchId, Mode, ModelSpec};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn random_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<f32> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dist = Uniform::new(lo, hi);
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::from_f64_slice(shape, &vals).unwrap()
}

#[test]
fn f32_sweep() {
    let spec = ModelSpec::new(ArchId::MiniResnet);
    let mut model = build_model::<f32>(&spec, 5).unwrap();
    model.freeze();
    let x = random_tensor(vec![2, 3, 32, 32], 51, 0.05, 0.95);
    let f = |tape: &mut Tape<f32>, leaf: ila_core::engine::NodeId| {
        let pass = model
            .forward_on_tape(tape, leaf, Mode::Eval, false, None)
            .map_err(|e| ila_core::engine::EngineError::Usage(e.to_string()))?;
        let logits = *pass.endpoints.last().unwrap();
        tape.softmax_cross_entropy(logits, &[3, 7])
    };
    for (h, mg) in [(1e-2, 1e-3), (1e-2, 3e-4), (3e-3, 3e-4), (3e-3, 1e-3), (2e-2, 1e-3)] {
        for seed in [52u64, 53, 54, 55] {
            let err = finite_difference_check(&f, &x, FdCheckConfig { n_coords: 100, h, seed, min_grad: mg }).unwrap();
            println!("resnet f32 h={h:.0e} mg={mg:.0e} seed={seed}: {err:.3e}");
        }
    }

    // conv/relu sum-loss in f32 (the large-|f| case).
    let xs = random_tensor(vec![2, 3, 6, 6], 23, -1.0, 1.0);
    let w = random_tensor(vec![4, 3, 3, 3], 24, -0.5, 0.5);
    let b = random_tensor(vec![4], 25, -0.2, 0.2);
    for (h, mg) in [(1e-3, 0.0), (1e-2, 0.0), (1e-2, 1e-2), (3e-2, 1e-2)] {
        for seed in [1u64, 2, 3] {
            let err = finite_difference_check(
                &|t: &mut Tape<f32>, leaf| {
                    let (wn, bn) = (t.leaf(&w), t.leaf(&b));
                    let c = t.conv2d(leaf, wn, bn, 1, 1)?;
                    let r = t.relu(c);
                    Ok(t.sum(r))
                },
                &xs,
                FdCheckConfig { n_coords: 60, h, seed, min_grad: mg },
            )
            .unwrap();
            println!("convrelu f32 h={h:.0e} mg={mg:.0e} seed={seed}: {err:.3e}");
        }
    }
}

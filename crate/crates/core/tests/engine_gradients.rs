//! Numerical verification of the engine: direct-computation oracles for
//! the forward primitives and central finite differences for every
//! gradient path.

use ila_core::engine::{finite_difference_check, FdCheckConfig, NodeId, Tape, Tensor};
use ila_core::models::{build_model, ArchId, Mode, ModelSpec};
use ila_core::Scalar;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn random_tensor<S: Scalar>(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<S> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dist = Uniform::new(lo, hi);
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::from_f64_slice(shape, &vals).unwrap()
}

/// Direct six-nested-loop cross-correlation, independent of the engine.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f64; n * o * oh * ow];
    for img in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (oy * stride + u) as isize - pad as isize;
                                let ix = (ox * stride + v) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    let xi = x[((img * c + ic) * h + iy as usize) * wd + ix as usize];
                                    let wi = w[((oc * c + ic) * kh + u) * kw + v];
                                    acc += xi * wi;
                                }
                            }
                        }
                    }
                    out[((img * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_oracle() {
    // Random 2x3x5x5 input against a 4x3x3x3 kernel, several geometries.
    for (seed, stride, pad) in [(1u64, 1usize, 0usize), (2, 1, 1), (3, 2, 1)] {
        let x = random_tensor::<f32>(vec![2, 3, 5, 5], seed, -1.0, 1.0);
        let w = random_tensor::<f32>(vec![4, 3, 3, 3], seed + 100, -0.5, 0.5);
        let b = random_tensor::<f32>(vec![4], seed + 200, -0.2, 0.2);

        let xf: Vec<f64> = x.values().iter().map(|&v| v as f64).collect();
        let wf: Vec<f64> = w.values().iter().map(|&v| v as f64).collect();
        let bf: Vec<f64> = b.values().iter().map(|&v| v as f64).collect();
        let expect = conv_oracle(&xf, &wf, &bf, 2, 3, 5, 5, 4, 3, 3, stride, pad);

        let mut tape = Tape::new();
        let xn = tape.leaf(&x);
        let wn = tape.leaf(&w);
        let bn = tape.leaf(&b);
        let y = tape.conv2d(xn, wn, bn, stride, pad).unwrap();
        let got = tape.values(y);
        assert_eq!(got.len(), expect.len());
        for (g, e) in got.iter().zip(&expect) {
            assert!((*g as f64 - e).abs() < 1e-5, "stride {stride} pad {pad}: {g} vs {e}");
        }
    }
}

#[test]
fn batchnorm_training_stats_match_direct_oracle() {
    let x = random_tensor::<f64>(vec![4, 3, 5, 5], 11, -2.0, 2.0);
    let mut tape = Tape::new();
    let xn = tape.leaf(&x);
    let gamma = tape.leaf(&Tensor::full(vec![3], 1.0f64));
    let beta = tape.leaf(&Tensor::zeros(vec![3]));
    let (_, stats) = tape
        .batch_norm2d(xn, gamma, beta, &[0.0; 3], &[1.0; 3], true, 1e-5)
        .unwrap();
    let stats = stats.unwrap();

    // Direct per-channel statistics.
    let m = 4 * 5 * 5;
    for ch in 0..3 {
        let mut vals = Vec::with_capacity(m);
        for img in 0..4 {
            for p in 0..25 {
                vals.push(x.values()[(img * 3 + ch) * 25 + p]);
            }
        }
        let mean: f64 = vals.iter().sum::<f64>() / m as f64;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        let var_unbiased = var * m as f64 / (m as f64 - 1.0);
        assert!((stats.mean[ch] - mean).abs() < 1e-6);
        assert!((stats.var_biased[ch] - var).abs() < 1e-6);
        assert!((stats.var_unbiased[ch] - var_unbiased).abs() < 1e-6);
    }
}

#[test]
fn softmax_ce_matches_f64_formula_oracle() {
    let logits = random_tensor::<f32>(vec![8, 10], 17, -4.0, 4.0);
    let labels: Vec<usize> = (0..8).map(|i| (i * 3) % 10).collect();

    // Direct formula in f64.
    let mut expect = 0.0f64;
    for i in 0..8 {
        let row: Vec<f64> = logits.values()[i * 10..(i + 1) * 10].iter().map(|&v| v as f64).collect();
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        expect += denom.ln() - row[labels[i]];
    }
    expect /= 8.0;

    let mut tape = Tape::new();
    let ln = tape.leaf(&logits);
    let loss = tape.softmax_cross_entropy(ln, &labels).unwrap();
    let got = tape.scalar_value(loss).unwrap() as f64;
    assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
}

/// Worst relative finite-difference error for a loss built by `f`.
fn check<S: Scalar, F>(f: F, x: &Tensor<S>, n_coords: usize, h: f64, seed: u64) -> f64
where
    F: Fn(&mut Tape<S>, NodeId) -> Result<NodeId, ila_core::engine::EngineError>,
{
    finite_difference_check(&f, x, FdCheckConfig { n_coords, h, seed, min_grad: 0.0 }).unwrap()
}

#[test]
fn every_primitive_passes_gradient_check_f32() {
    let tol = 1e-3;
    let x = random_tensor::<f32>(vec![2, 3, 6, 6], 23, -1.0, 1.0);

    // conv2d -> relu -> sum
    let w = random_tensor::<f32>(vec![4, 3, 3, 3], 24, -0.5, 0.5);
    let b = random_tensor::<f32>(vec![4], 25, -0.2, 0.2);
    let err = check(
        |t, leaf| {
            let (wn, bn) = (t.leaf(&w), t.leaf(&b));
            let c = t.conv2d(leaf, wn, bn, 1, 1)?;
            let r = t.relu(c);
            Ok(t.sum(r))
        },
        &x,
        60,
        1e-3,
        1,
    );
    assert!(err < tol, "conv/relu gradient error {err}");

    // maxpool -> flatten -> dense -> cross-entropy
    let wd = random_tensor::<f32>(vec![5, 27], 26, -0.4, 0.4);
    let bd = random_tensor::<f32>(vec![5], 27, -0.2, 0.2);
    let err = check(
        |t, leaf| {
            let p = t.max_pool2x2(leaf)?;
            let f = t.flatten(p)?;
            let (wn, bn) = (t.leaf(&wd), t.leaf(&bd));
            let d = t.dense(f, wn, bn)?;
            t.softmax_cross_entropy(d, &[1, 3])
        },
        &x,
        60,
        1e-3,
        2,
    );
    assert!(err < tol, "pool/dense/ce gradient error {err}");

    // batchnorm (training mode) -> avgpool -> sum
    let err = check(
        |t, leaf| {
            let gamma = t.leaf(&random_tensor::<f32>(vec![3], 31, 0.5, 1.5).with_grad(false));
            let beta = t.leaf(&random_tensor::<f32>(vec![3], 32, -0.3, 0.3).with_grad(false));
            let (bn, _) = t.batch_norm2d(leaf, gamma, beta, &[0.0; 3], &[1.0; 3], true, 1e-5)?;
            let a = t.avg_pool_global(bn)?;
            let f = t.flatten(a)?;
            let n = t.row_l2norm_guarded(f, 1e-12)?;
            Ok(t.sum(n))
        },
        &x,
        60,
        1e-3,
        3,
    );
    assert!(err < tol, "batchnorm-train gradient error {err}");

    // batchnorm (eval mode) + channel_affine + residual_add
    let err = check(
        |t, leaf| {
            let gamma = t.leaf(&random_tensor::<f32>(vec![3], 33, 0.5, 1.5).with_grad(false));
            let beta = t.leaf(&Tensor::zeros(vec![3]).with_grad(false));
            let (bn, _) = t.batch_norm2d(leaf, gamma, beta, &[0.1, -0.1, 0.2], &[1.5, 0.7, 1.1], false, 1e-5)?;
            let na = t.channel_affine(leaf, &[2.0, 1.0, 0.5], &[-0.5, 0.0, 0.5])?;
            let s = t.residual_add(bn, na)?;
            let r = t.relu(s);
            Ok(t.sum(r))
        },
        &x,
        60,
        1e-3,
        4,
    );
    assert!(err < tol, "bn-eval/affine/residual gradient error {err}");

    // elementwise ops and row reductions with the guarded denominators
    let flat = random_tensor::<f32>(vec![4, 7], 41, -1.0, 1.0);
    let other = random_tensor::<f32>(vec![4, 7], 42, -1.0, 1.0);
    let err = check(
        |t, leaf| {
            let o = t.leaf(&other.clone().with_grad(false));
            let d = t.sub(leaf, o)?;
            let m = t.mul(d, leaf)?;
            let rows = t.row_sum(m)?;
            let norms = t.row_l2norm_guarded(d, 1e-9)?;
            let inv = t.recip_guarded(norms, 1e-9);
            let mixed = t.mul(rows, inv)?;
            let sc = t.scale(mixed, 0.7);
            Ok(t.sum(sc))
        },
        &flat,
        28,
        1e-3,
        5,
    );
    assert!(err < tol, "elementwise/rowops gradient error {err}");
}

fn mini_resnet_loss<S: Scalar>(
    model: &ila_core::models::ModelHandle<S>,
    labels: Vec<usize>,
) -> impl Fn(&mut Tape<S>, NodeId) -> Result<NodeId, ila_core::engine::EngineError> + '_ {
    move |tape, leaf| {
        let pass = model
            .forward_on_tape(tape, leaf, Mode::Eval, false, None)
            .map_err(|e| ila_core::engine::EngineError::Usage(e.to_string()))?;
        let logits = *pass.endpoints.last().unwrap();
        tape.softmax_cross_entropy(logits, &labels)
    }
}

#[test]
fn full_mini_resnet_loss_gradient_f32() {
    let spec = ModelSpec::new(ArchId::MiniResnet);
    let mut model = build_model::<f32>(&spec, 5).unwrap();
    model.freeze();
    let x = random_tensor::<f32>(vec![2, 3, 32, 32], 51, 0.05, 0.95);
    let f = mini_resnet_loss(&model, vec![3, 7]);
    let err = finite_difference_check(&f, &x, FdCheckConfig { n_coords: 100, h: 1e-3, seed: 52, min_grad: 1e-4 }).unwrap();
    assert!(err < 1e-3, "mini_resnet f32 gradient error {err}");
}

#[test]
fn full_mini_resnet_loss_gradient_f64() {
    let spec = ModelSpec::new(ArchId::MiniResnet);
    let mut model = build_model::<f64>(&spec, 5).unwrap();
    model.freeze();
    let x = random_tensor::<f64>(vec![2, 3, 32, 32], 51, 0.05, 0.95);
    let f = mini_resnet_loss(&model, vec![3, 7]);
    let err = finite_difference_check(&f, &x, FdCheckConfig { n_coords: 100, h: 3e-4, seed: 52, min_grad: 1e-5 }).unwrap();
    assert!(err < 1e-6, "mini_resnet f64 gradient error {err}");
}

#[test]
fn quadratic_and_constant_fd_examples() {
    // f = sum of squares at [1, 2]: analytic gradient [2, 4].
    let x = Tensor::<f64>::from_f64_slice(vec![2], &[1.0, 2.0]).unwrap();
    let err = check(
        |t, leaf| {
            let sq = t.mul(leaf, leaf)?;
            Ok(t.sum(sq))
        },
        &x,
        2,
        1e-5,
        7,
    );
    assert!(err < 1e-9, "quadratic error {err}");

    let err = check(
        |t, leaf| {
            let z = t.scale(leaf, 0.0);
            Ok(t.sum(z))
        },
        &x,
        2,
        1e-5,
        8,
    );
    assert_eq!(err, 0.0);
}

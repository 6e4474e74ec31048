//! Central finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::scalar::Scalar;

use super::{EngineError, NodeId, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct FdCheckConfig {
    /// Number of valid random coordinates to probe (capped at numel).
    pub n_coords: usize,
    /// Central-difference step.
    pub h: f64,
    /// Seed for coordinate sampling.
    pub seed: u64,
    /// Coordinates where the analytic gradient and every finite-difference
    /// estimate all fall below this magnitude are skipped and resampled:
    /// rounding noise of the function evaluations dominates there and the
    /// comparison carries no signal. A wrongly-zero analytic gradient is
    /// still caught, because any sizeable numeric estimate keeps the
    /// coordinate informative. 0 disables the floor.
    pub min_grad: f64,
}

impl Default for FdCheckConfig {
    fn default() -> Self {
        FdCheckConfig { n_coords: 100, h: 1e-3, seed: 0, min_grad: 0.0 }
    }
}

/// At a ReLU/maxpool kink inside the probe interval the central
/// difference converges to the mean of the two one-sided slopes while
/// the exact derivative equals one of them, so a single central estimate
/// is not a valid oracle there. Each coordinate is therefore compared
/// against four estimates - central at h/2, Richardson-extrapolated
/// central, and the two Richardson-extrapolated one-sided differences -
/// and scored by the best match. A correct gradient matches the central
/// estimates on smooth coordinates and the clean-side estimate at a
/// kink; a wrong gradient matches none of them.
fn candidate_estimates(f0: f64, probes: &[(f64, f64)], h: f64) -> Vec<f64> {
    // probes = [(+h, f), (-h, f), (+h/2, f), (-h/2, f), (+h/4, f), (-h/4, f)]
    let (f_ph, f_mh) = (probes[0].1, probes[1].1);
    let (f_ph2, f_mh2) = (probes[2].1, probes[3].1);
    let (f_ph4, f_mh4) = (probes[4].1, probes[5].1);
    let c1 = (f_ph - f_mh) / (2.0 * h);
    let c2 = (f_ph2 - f_mh2) / h;
    let c4 = (f_ph4 - f_mh4) / (h / 2.0);
    let dp1 = (f_ph - f0) / h;
    let dp2 = (f_ph2 - f0) / (h / 2.0);
    let dp4 = (f_ph4 - f0) / (h / 4.0);
    let dm1 = (f0 - f_mh) / h;
    let dm2 = (f0 - f_mh2) / (h / 2.0);
    let dm4 = (f0 - f_mh4) / (h / 4.0);
    vec![
        c2,
        c4,
        (4.0 * c2 - c1) / 3.0,
        (4.0 * c4 - c2) / 3.0,
        2.0 * dp2 - dp1,
        2.0 * dp4 - dp2,
        2.0 * dm2 - dm1,
        2.0 * dm4 - dm2,
    ]
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences on randomly sampled coordinates of `x`.
///
/// Returns the worst relative error over the probed coordinates, with the
/// denominator guarded as max(|analytic|, |numeric|, 1e-8). Non-finite
/// function values are reported as a numeric failure.
pub fn finite_difference_check<S, F>(
    f: &F,
    x: &Tensor<S>,
    cfg: FdCheckConfig,
) -> Result<f64, EngineError>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, NodeId) -> Result<NodeId, EngineError>,
{
    if cfg.h <= 0.0 {
        return Err(EngineError::Config(format!("fd step must be > 0, got {}", cfg.h)));
    }

    // Analytic gradient.
    let mut tape = Tape::new();
    let leaf = tape.leaf(&x.clone().with_grad(true));
    let root = f(&mut tape, leaf)?;
    let base = tape.scalar_value(root)?.as_f64();
    if !base.is_finite() {
        return Err(EngineError::Numeric("non-finite value in gradient check".into()));
    }
    let grads = tape.backward(root)?;
    let analytic = grads.wrt(leaf, &tape);

    let eval = |probe: &Tensor<S>| -> Result<f64, EngineError> {
        let mut t = Tape::new();
        let leaf = t.leaf(&probe.clone().with_grad(false));
        let root = f(&mut t, leaf)?;
        let v = t.scalar_value(root)?.as_f64();
        if !v.is_finite() {
            return Err(EngineError::Numeric("non-finite value in gradient check".into()));
        }
        Ok(v)
    };

    let n = x.numel();
    let mut coords: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    coords.shuffle(&mut rng);

    let h = cfg.h;
    let want = cfg.n_coords.min(n);
    let mut used = 0usize;
    let mut worst = 0.0f64;
    for &i in &coords {
        if used >= want {
            break;
        }
        let orig = x.values()[i].as_f64();
        let mut probe = |delta: f64| -> Result<f64, EngineError> {
            let mut t = x.clone();
            t.values_mut()[i] = S::from_f64(orig + delta);
            eval(&t)
        };
        let mut probes = Vec::with_capacity(6);
        for delta in [h, -h, h / 2.0, -h / 2.0, h / 4.0, -h / 4.0] {
            probes.push((delta, probe(delta)?));
        }
        let a = analytic[i].as_f64();
        let estimates = candidate_estimates(base, &probes, h);
        let magnitude = estimates.iter().fold(a.abs(), |m, e| m.max(e.abs()));
        if magnitude < cfg.min_grad {
            continue;
        }
        used += 1;
        let rel = estimates
            .iter()
            .map(|&numeric| {
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                (a - numeric).abs() / denom
            })
            .fold(f64::INFINITY, f64::min);
        if rel > worst {
            worst = rel;
        }
    }
    if used == 0 {
        return Err(EngineError::Numeric(
            "no informative coordinate found for the finite-difference check".into(),
        ));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_grad_matches() {
        // f(x) = sum(x^2); analytic gradient [2, 4] at x = [1, 2].
        let x = Tensor::<f64>::from_f64_slice(vec![2], &[1.0, 2.0]).unwrap();
        let f = |tape: &mut Tape<f64>, leaf: NodeId| {
            let sq = tape.mul(leaf, leaf)?;
            Ok(tape.sum(sq))
        };
        let err = finite_difference_check(&f, &x, FdCheckConfig { n_coords: 2, h: 1e-5, seed: 1 }).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f32>::from_f64_slice(vec![3], &[0.5, -0.5, 0.1]).unwrap();
        let f = |tape: &mut Tape<f32>, leaf: NodeId| {
            let zero = tape.scale(leaf, 0.0);
            Ok(tape.sum(zero))
        };
        let err = finite_difference_check(&f, &x, FdCheckConfig::default()).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f32>::zeros(vec![2]);
        let f = |tape: &mut Tape<f32>, leaf: NodeId| Ok(tape.sum(leaf));
        assert!(finite_difference_check(&f, &x, FdCheckConfig { n_coords: 1, h: 0.0, seed: 0 }).is_err());
    }
}

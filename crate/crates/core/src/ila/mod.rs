//! Intermediate-level fine-tuning of existing adversarial examples.
//!
//! Given a reference adversarial x' for an original x, the attack
//! optimizes x'' so that the feature-map delta at a chosen endpoint,
//! Delta-y'' = F_l(x'') - F_l(x), grows along the direction of the
//! reference delta Delta-y' = F_l(x') - F_l(x). Two losses are provided:
//! the projection loss (negative dot product) and the flexible loss that
//! trades off norm growth against direction fidelity with a weight alpha.
//!
//! The reference delta does not depend on x'', so it is computed once per
//! batch and treated as a constant during the optimization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{
    project_linf, sign_ascent_step, AdversarialBatch, AttackError, AttackSnapshot,
    PerturbationBudget, ATTACK_CHUNK,
};
use crate::data::IMAGE_PIXELS;
use crate::engine::{EngineError, Tape, Tensor};
use crate::models::{ModelError, ModelHandle};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum IlaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate reference: {0}")]
    DegenerateReference(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Engine(#[from] EngineError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Attack(#[from] AttackError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlaLossKind {
    /// Projection loss: L = -(Delta-y'' . Delta-y').
    Ilap,
    /// Flexible loss: L = -alpha * |Dy''|/|Dy'| - cos(Dy'', Dy').
    Ilaf,
}

impl IlaLossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            IlaLossKind::Ilap => "ilap",
            IlaLossKind::Ilaf => "ilaf",
        }
    }
}

pub const DEFAULT_ILA_LR: f64 = 0.006;
pub const DEFAULT_DENOM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlaConfig {
    pub layer: usize,
    pub loss: IlaLossKind,
    /// Disturbance weight (ILAF only).
    pub alpha: f64,
    pub budget: PerturbationBudget,
    pub lr: f64,
    pub n_iters: usize,
    /// Guard added to both norms in the ILAF denominators.
    pub denom_guard: f64,
}

impl IlaConfig {
    pub fn ilap(layer: usize, budget: PerturbationBudget, n_iters: usize) -> Self {
        IlaConfig {
            layer,
            loss: IlaLossKind::Ilap,
            alpha: 1.0,
            budget,
            lr: DEFAULT_ILA_LR,
            n_iters,
            denom_guard: DEFAULT_DENOM_GUARD,
        }
    }

    pub fn validate(&self) -> Result<(), IlaError> {
        if self.lr <= 0.0 {
            return Err(IlaError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.n_iters < 1 {
            return Err(IlaError::Config("n_iters must be >= 1".into()));
        }
        if self.loss == IlaLossKind::Ilaf && self.alpha <= 0.0 {
            return Err(IlaError::Config(format!("ILAF alpha must be > 0, got {}", self.alpha)));
        }
        if self.denom_guard <= 0.0 {
            return Err(IlaError::Config("denominator guard must be > 0".into()));
        }
        Ok(())
    }

    fn snapshot(&self) -> AttackSnapshot {
        AttackSnapshot {
            attack: self.loss.as_str().to_string(),
            epsilon: self.budget.epsilon,
            lr: self.lr,
            n_iters: self.n_iters,
            momentum_mu: 0.0,
            seed: 0,
            layer: Some(self.layer),
            loss: Some(self.loss.as_str().to_string()),
            alpha: if self.loss == IlaLossKind::Ilaf { Some(self.alpha) } else { None },
        }
    }
}

/// Reference and current feature-map deltas at one endpoint, per image.
#[derive(Debug, Clone)]
pub struct FeatureDelta<S> {
    pub reference: Vec<S>,
    pub current: Vec<S>,
    pub ref_norm: S,
    pub cur_norm: S,
}

impl<S: Scalar> FeatureDelta<S> {
    pub fn new(reference: Vec<S>, current: Vec<S>) -> Result<Self, IlaError> {
        if reference.len() != current.len() {
            return Err(EngineError::dim(
                "feature_delta",
                format!("reference length {} vs current {}", reference.len(), current.len()),
            )
            .into());
        }
        let ref_norm = l2(&reference);
        let cur_norm = l2(&current);
        Ok(FeatureDelta { reference, current, ref_norm, cur_norm })
    }
}

fn l2<S: Scalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt()
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Projection loss (direct evaluation): L = -(Dy'' . Dy').
pub fn ilap_loss<S: Scalar>(delta: &FeatureDelta<S>) -> S {
    -dot(&delta.current, &delta.reference)
}

/// Flexible loss (direct evaluation):
/// L = -alpha * |Dy''| / (|Dy'| + g)  -  (Dy'' . Dy') / ((|Dy''| + g) * (|Dy'| + g)).
pub fn ilaf_loss<S: Scalar>(delta: &FeatureDelta<S>, alpha: f64, guard: f64) -> Result<S, IlaError> {
    if delta.ref_norm == S::zero() {
        return Err(IlaError::DegenerateReference("reference delta has zero norm".into()));
    }
    let g = S::from_f64(guard);
    let a = S::from_f64(alpha);
    let disturbance = a * delta.cur_norm / (delta.ref_norm + g);
    let direction = dot(&delta.current, &delta.reference)
        / ((delta.cur_norm + g) * (delta.ref_norm + g));
    Ok(-disturbance - direction)
}

/// Flattened per-image feature deltas F_l(b) - F_l(a) at endpoint `l`.
pub fn endpoint_deltas<S: Scalar>(
    model: &ModelHandle<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    l: usize,
) -> Result<Tensor<S>, IlaError> {
    let fa = model.forward_to_endpoint(a, l)?;
    let fb = model.forward_to_endpoint(b, l)?;
    let values: Vec<S> = fb.values().iter().zip(fa.values()).map(|(&y, &x)| y - x).collect();
    Ok(Tensor::new(fa.shape().to_vec(), values).expect("delta shape"))
}

/// Result of one intermediate-level fine-tuning run.
#[derive(Debug, Clone)]
pub struct IlaOutcome<S> {
    pub batch: AdversarialBatch<S>,
    /// Batch loss (sum over images) per iteration.
    pub loss_trajectory: Vec<f64>,
    /// Images whose reference delta was exactly zero; they pass through
    /// unchanged.
    pub degenerate: Vec<bool>,
    /// True when the reference violated the epsilon-ball by more than
    /// 1e-6 and was projected back before use.
    pub reference_projected: bool,
}

/// Fine-tune a reference adversarial batch (Algorithm: start from x,
/// step along -sign(grad L), clip to the epsilon-ball and image range).
pub fn ila_attack<S: Scalar>(
    model: &ModelHandle<S>,
    x: &Tensor<S>,
    x_ref: &Tensor<S>,
    labels: &[u8],
    cfg: &IlaConfig,
) -> Result<IlaOutcome<S>, IlaError> {
    if !model.frozen() {
        return Err(IlaError::Config("ila_attack requires a frozen model".into()));
    }
    cfg.validate()?;
    if cfg.layer >= model.endpoint_count() {
        return Err(ModelError::Endpoint { requested: cfg.layer, count: model.endpoint_count() }.into());
    }
    if x.shape() != x_ref.shape() {
        return Err(EngineError::dim(
            "ila_attack",
            format!("x {:?} vs x_ref {:?}", x.shape(), x_ref.shape()),
        )
        .into());
    }

    // Warn-and-project when the reference leaks out of the ball.
    let violation = x_ref.linf_distance(x).map_err(EngineError::from)?.as_f64() - cfg.budget.epsilon;
    let reference_projected = violation > 1e-6;
    let x_ref = if reference_projected {
        project_linf(x_ref, x, &cfg.budget)?
    } else {
        x_ref.clone()
    };

    // Reference deltas are constant: compute once per batch.
    let ref_deltas = endpoint_deltas(model, x, &x_ref, cfg.layer)?;
    ila_attack_with_deltas(model, x, &ref_deltas, labels, cfg, reference_projected)
}

/// Inner loop taking precomputed (detached) reference deltas [N, D].
pub fn ila_attack_with_deltas<S: Scalar>(
    model: &ModelHandle<S>,
    x: &Tensor<S>,
    ref_deltas: &Tensor<S>,
    labels: &[u8],
    cfg: &IlaConfig,
    reference_projected: bool,
) -> Result<IlaOutcome<S>, IlaError> {
    cfg.validate()?;
    let n = labels.len();
    let d = ref_deltas.shape()[1];
    if ref_deltas.shape()[0] != n {
        return Err(EngineError::dim(
            "ila_attack",
            format!("{} reference deltas for {n} images", ref_deltas.shape()[0]),
        )
        .into());
    }

    let ref_norms: Vec<S> = (0..n).map(|i| l2(&ref_deltas.values()[i * d..(i + 1) * d])).collect();
    let degenerate: Vec<bool> = ref_norms.iter().map(|&nm| nm == S::zero()).collect();

    let mut adv = x.clone();
    let mut trajectory = vec![0.0f64; cfg.n_iters];

    let ranges: Vec<std::ops::Range<usize>> =
        (0..n).step_by(ATTACK_CHUNK).map(|s| s..(s + ATTACK_CHUNK).min(n)).collect();
    for range in ranges {
        let nc = range.len();
        let xs = {
            let vals = x.values()[range.start * IMAGE_PIXELS..range.end * IMAGE_PIXELS].to_vec();
            let mut shape = x.shape().to_vec();
            shape[0] = nc;
            Tensor::new(shape, vals).expect("chunk shape")
        };
        // Constant per-chunk branches of the loss.
        let y_x = model.forward_to_endpoint(&xs, cfg.layer)?;
        let chunk_refs = &ref_deltas.values()[range.start * d..range.end * d];
        let chunk_norms = &ref_norms[range.start..range.end];
        let chunk_degenerate = &degenerate[range.start..range.end];

        let guard = S::from_f64(cfg.denom_guard);
        // ILAP constant: reference deltas with degenerate rows zeroed.
        // ILAF constants: unit reference rows and inverse reference norms.
        let mut v_const = vec![S::zero(); nc * d];
        let mut inv_ref = vec![S::zero(); nc];
        for i in 0..nc {
            if chunk_degenerate[i] {
                continue;
            }
            let row = &chunk_refs[i * d..(i + 1) * d];
            match cfg.loss {
                IlaLossKind::Ilap => v_const[i * d..(i + 1) * d].copy_from_slice(row),
                IlaLossKind::Ilaf => {
                    let denom = chunk_norms[i] + guard;
                    for (dst, &r) in v_const[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *dst = r / denom;
                    }
                    inv_ref[i] = S::one() / denom;
                }
            }
        }

        let mut cur = xs.clone();
        for it in 0..cfg.n_iters {
            let mut tape = Tape::new();
            let x_node = tape.leaf(&cur.clone().with_grad(true));
            let y_cur = model.endpoint_on_tape(&mut tape, x_node, cfg.layer)?;
            let y_x_const = tape.constant(y_x.shape().to_vec(), y_x.values().to_vec())?;
            let delta = tape.sub(y_cur, y_x_const)?;
            let loss = match cfg.loss {
                IlaLossKind::Ilap => {
                    let v = tape.constant(vec![nc, d], v_const.clone())?;
                    let prod = tape.mul(delta, v)?;
                    let total = tape.sum(prod);
                    tape.scale(total, -S::one())
                }
                IlaLossKind::Ilaf => {
                    let cur_norms = tape.row_l2norm_guarded(delta, guard)?;
                    let inv_c = tape.constant(vec![nc], inv_ref.clone())?;
                    let disturbance = tape.mul(cur_norms, inv_c)?;
                    let u = tape.constant(vec![nc, d], v_const.clone())?;
                    let proj = tape.mul(delta, u)?;
                    let proj_rows = tape.row_sum(proj)?;
                    let inv_cur = tape.recip_guarded(cur_norms, guard);
                    let direction = tape.mul(proj_rows, inv_cur)?;
                    let weighted = tape.scale(disturbance, S::from_f64(cfg.alpha));
                    let per_image = tape.add(weighted, direction)?;
                    let total = tape.sum(per_image);
                    tape.scale(total, -S::one())
                }
            };
            trajectory[it] += tape.scalar_value(loss).map_err(EngineError::from)?.as_f64();
            let grads = tape.backward(loss).map_err(EngineError::from)?;
            let grad = grads.wrt(x_node, &tape);
            // Descend: x'' <- x'' - lr * sign(grad L).
            let stepped = sign_ascent_step(&cur, &grad.iter().map(|&g| -g).collect::<Vec<_>>(), cfg.lr);
            cur = project_linf(&stepped, &xs, &cfg.budget)?;
        }

        // Degenerate images pass through unchanged.
        for i in 0..nc {
            if chunk_degenerate[i] {
                cur.values_mut()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
                    .copy_from_slice(&xs.values()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]);
            }
        }
        adv.values_mut()[range.start * IMAGE_PIXELS..range.end * IMAGE_PIXELS]
            .copy_from_slice(cur.values());
    }

    let source_pred_clean = model.predict(x)?;
    let source_pred_adv = model.predict(&adv)?;
    let fooled = source_pred_adv.iter().zip(labels).map(|(&p, &y)| p != y).collect();
    Ok(IlaOutcome {
        batch: AdversarialBatch {
            originals: x.clone(),
            adversarials: adv,
            labels: labels.to_vec(),
            config: cfg.snapshot(),
            source_pred_clean,
            source_pred_adv,
            fooled,
        },
        loss_trajectory: trajectory,
        degenerate,
        reference_projected,
    })
}

/// Per-image projections Dy''(final) . Dy' and the seed's own projection
/// Dy' . Dy' at one endpoint.
#[derive(Debug, Clone)]
pub struct ProjectionStats {
    pub final_dot: Vec<f64>,
    pub seed_dot: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl ProjectionStats {
    /// Fraction of non-degenerate images whose final projection strictly
    /// exceeds the seed's own projection.
    pub fn growth_fraction(&self) -> f64 {
        let mut grown = 0usize;
        let mut total = 0usize;
        for i in 0..self.final_dot.len() {
            if self.degenerate[i] {
                continue;
            }
            total += 1;
            if self.final_dot[i] > self.seed_dot[i] {
                grown += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            grown as f64 / total as f64
        }
    }
}

pub fn projection_stats<S: Scalar>(
    model: &ModelHandle<S>,
    x: &Tensor<S>,
    x_ref: &Tensor<S>,
    x_final: &Tensor<S>,
    layer: usize,
) -> Result<ProjectionStats, IlaError> {
    let n = x.shape()[0];
    let mut stats = ProjectionStats {
        final_dot: Vec::with_capacity(n),
        seed_dot: Vec::with_capacity(n),
        degenerate: Vec::with_capacity(n),
    };
    for start in (0..n).step_by(ATTACK_CHUNK) {
        let range = start..(start + ATTACK_CHUNK).min(n);
        let slice = |t: &Tensor<S>| {
            let vals = t.values()[range.start * IMAGE_PIXELS..range.end * IMAGE_PIXELS].to_vec();
            let mut shape = t.shape().to_vec();
            shape[0] = range.len();
            Tensor::new(shape, vals).expect("chunk shape")
        };
        let (xs, rs, fs) = (slice(x), slice(x_ref), slice(x_final));
        let ref_d = endpoint_deltas(model, &xs, &rs, layer)?;
        let fin_d = endpoint_deltas(model, &xs, &fs, layer)?;
        let d = ref_d.shape()[1];
        for i in 0..range.len() {
            let r = &ref_d.values()[i * d..(i + 1) * d];
            let f = &fin_d.values()[i * d..(i + 1) * d];
            stats.final_dot.push(dot(f, r).as_f64());
            stats.seed_dot.push(dot(r, r).as_f64());
            stats.degenerate.push(l2(r) == S::zero());
        }
    }
    Ok(stats)
}

/// Mean per-image norm ratio |Dy''_l| / |Dy'_l| per endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisturbanceCurve {
    pub source_arch: String,
    pub attack: String,
    /// ILA target layer that produced the test adversarials, when known.
    pub target_layer: Option<usize>,
    pub endpoints: Vec<EndpointRatio>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointRatio {
    pub eval_layer: usize,
    /// None when every image had a zero reference norm at this endpoint.
    pub mean_ratio: Option<f64>,
    pub n_valid: usize,
}

impl DisturbanceCurve {
    pub fn values(&self) -> Vec<Option<f64>> {
        self.endpoints.iter().map(|e| e.mean_ratio).collect()
    }
}

/// Disturbance values of `x_test` against reference `x_ref`, both
/// adversarials for the same originals `x`.
pub fn disturbance_curve<S: Scalar>(
    model: &ModelHandle<S>,
    x: &Tensor<S>,
    x_test: &Tensor<S>,
    x_ref: &Tensor<S>,
    target_layer: Option<usize>,
    attack: &str,
) -> Result<DisturbanceCurve, IlaError> {
    if x.shape() != x_test.shape() || x.shape() != x_ref.shape() {
        return Err(EngineError::dim(
            "disturbance_curve",
            format!("originals {:?}, test {:?}, ref {:?}", x.shape(), x_test.shape(), x_ref.shape()),
        )
        .into());
    }
    let n = x.shape()[0];
    let n_endpoints = model.endpoint_count();
    let mut ratio_sums = vec![0.0f64; n_endpoints];
    let mut valid = vec![0usize; n_endpoints];

    for start in (0..n).step_by(ATTACK_CHUNK) {
        let range = start..(start + ATTACK_CHUNK).min(n);
        let slice = |t: &Tensor<S>| {
            let vals = t.values()[range.start * IMAGE_PIXELS..range.end * IMAGE_PIXELS].to_vec();
            let mut shape = t.shape().to_vec();
            shape[0] = range.len();
            Tensor::new(shape, vals).expect("chunk shape")
        };
        let (xs, ts, rs) = (slice(x), slice(x_test), slice(x_ref));
        let base = model.all_endpoints(&xs)?;
        let test = model.all_endpoints(&ts)?;
        let refr = model.all_endpoints(&rs)?;
        for l in 0..n_endpoints {
            let d = base[l].shape()[1];
            for i in 0..range.len() {
                let b = &base[l].values()[i * d..(i + 1) * d];
                let t = &test[l].values()[i * d..(i + 1) * d];
                let r = &refr[l].values()[i * d..(i + 1) * d];
                let mut tn = S::zero();
                let mut rn = S::zero();
                for j in 0..d {
                    let td = t[j] - b[j];
                    let rd = r[j] - b[j];
                    tn = tn + td * td;
                    rn = rn + rd * rd;
                }
                let rn = rn.sqrt();
                if rn > S::zero() {
                    ratio_sums[l] += (tn.sqrt() / rn).as_f64();
                    valid[l] += 1;
                }
            }
        }
    }

    Ok(DisturbanceCurve {
        source_arch: model.spec().arch.as_str().to_string(),
        attack: attack.to_string(),
        target_layer,
        endpoints: (0..n_endpoints)
            .map(|l| EndpointRatio {
                eval_layer: l,
                mean_ratio: if valid[l] > 0 { Some(ratio_sums[l] / valid[l] as f64) } else { None },
                n_valid: valid[l],
            })
            .collect(),
    })
}

/// Interior peaks: indices i with f(i) > f(i-1) and f(i) >= f(i+1).
pub fn find_peaks(values: &[f64]) -> Vec<usize> {
    let mut peaks = Vec::new();
    for i in 1..values.len().saturating_sub(1) {
        if values[i] > values[i - 1] && values[i] >= values[i + 1] {
            peaks.push(i);
        }
    }
    peaks
}

pub fn latest_peak(values: &[f64]) -> Option<usize> {
    find_peaks(values).last().copied()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub layer: usize,
    pub peaks: Vec<usize>,
    pub exhibits_peak: bool,
    /// The curve's value at its own target layer (fallback criterion).
    pub own_value: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub selected: usize,
    pub fallback_used: bool,
    pub candidates: Vec<CandidateSummary>,
}

/// Latest-peak layer selection over per-candidate disturbance curves.
///
/// A candidate l "exhibits a peak" when its own curve has an interior
/// peak at some index >= l-1. The largest such l wins. When no candidate
/// exhibits a peak the fallback picks the candidate with the largest
/// curve value at its own target layer (latest on ties).
pub fn select_layer(curves: &[DisturbanceCurve]) -> Result<SelectionTrace, IlaError> {
    if curves.is_empty() {
        return Err(IlaError::Selection("no candidate curves".into()));
    }
    let n_endpoints = curves[0].endpoints.len();
    if n_endpoints < 3 {
        return Err(IlaError::Selection(format!(
            "peaks are undefined with {n_endpoints} endpoints (need at least 3)"
        )));
    }
    let mut candidates = Vec::with_capacity(curves.len());
    for curve in curves {
        let layer = curve.target_layer.ok_or_else(|| {
            IlaError::Selection("candidate curve is missing its target layer".into())
        })?;
        if curve.endpoints.len() != n_endpoints {
            return Err(IlaError::Selection("candidate curves disagree on endpoint count".into()));
        }
        let values = curve.values();
        let complete: Option<Vec<f64>> = values.iter().copied().collect();
        let (peaks, exhibits) = match &complete {
            Some(vals) => {
                let peaks = find_peaks(vals);
                let exhibits = peaks.iter().any(|&p| p as isize >= layer as isize - 1);
                (peaks, exhibits)
            }
            None => (Vec::new(), false),
        };
        candidates.push(CandidateSummary {
            layer,
            peaks,
            exhibits_peak: exhibits,
            own_value: values.get(layer).copied().flatten(),
        });
    }

    let selected = candidates.iter().filter(|c| c.exhibits_peak).map(|c| c.layer).max();
    match selected {
        Some(layer) => Ok(SelectionTrace { selected: layer, fallback_used: false, candidates }),
        None => {
            let mut best: Option<(usize, f64)> = None;
            for c in &candidates {
                if let Some(v) = c.own_value {
                    let better = match best {
                        None => true,
                        Some((bl, bv)) => v > bv || (v == bv && c.layer > bl),
                    };
                    if better {
                        best = Some((c.layer, v));
                    }
                }
            }
            match best {
                Some((layer, _)) => Ok(SelectionTrace { selected: layer, fallback_used: true, candidates }),
                None => Err(IlaError::Selection("every candidate curve is degenerate".into())),
            }
        }
    }
}

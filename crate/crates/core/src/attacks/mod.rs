//! White-box baseline attacks and the ensemble multi-fool attack.
//!
//! Every attack is an L-inf-bounded sign-step method in raw [0,1] pixel
//! space: the projection back into the epsilon-ball and the value range
//! runs after every step, so emitted adversarials always satisfy the
//! budget. sign(0) = 0 throughout: exactly-zero gradient coordinates do
//! not drift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::IMAGE_PIXELS;
use crate::engine::{EngineError, Tape, Tensor};
use crate::models::{ModelError, ModelHandle};
use crate::scalar::{sign_zero, Scalar};

/// Images processed per inner attack pass; results are independent of
/// this value (per-image gradients never interact through sign steps).
pub const ATTACK_CHUNK: usize = 100;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Engine(#[from] EngineError),

    #[error(transparent)]
    Model(#[from] ModelError),
}

/// L-inf radius and the pixel value range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub epsilon: f64,
    pub value_range: (f64, f64),
}

impl PerturbationBudget {
    pub fn new(epsilon: f64) -> Result<Self, AttackError> {
        if epsilon <= 0.0 {
            return Err(AttackError::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(PerturbationBudget { epsilon, value_range: (0.0, 1.0) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub budget: PerturbationBudget,
    pub lr: f64,
    pub n_iters: usize,
    /// MI-FGSM decay factor; ignored by the other attacks.
    pub momentum_mu: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(budget: PerturbationBudget, lr: f64, n_iters: usize) -> Result<Self, AttackError> {
        let cfg = AttackConfig { budget, lr, n_iters, momentum_mu: 0.0, seed: 0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.lr <= 0.0 {
            return Err(AttackError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.n_iters < 1 {
            return Err(AttackError::Config("n_iters must be >= 1".into()));
        }
        if self.momentum_mu < 0.0 {
            return Err(AttackError::Config(format!("momentum_mu must be >= 0, got {}", self.momentum_mu)));
        }
        Ok(())
    }
}

/// Provenance snapshot stored with every emitted batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSnapshot {
    pub attack: String,
    pub epsilon: f64,
    pub lr: f64,
    pub n_iters: usize,
    #[serde(default)]
    pub momentum_mu: f64,
    #[serde(default)]
    pub seed: u64,
    /// ILA target layer, when the batch came from the fine-tuning stage.
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub loss: Option<String>,
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl AttackSnapshot {
    pub fn baseline(attack: &str, cfg: &AttackConfig) -> Self {
        AttackSnapshot {
            attack: attack.to_string(),
            epsilon: cfg.budget.epsilon,
            lr: cfg.lr,
            n_iters: cfg.n_iters,
            momentum_mu: cfg.momentum_mu,
            seed: cfg.seed,
            layer: None,
            loss: None,
            alpha: None,
        }
    }
}

/// Originals, adversarials and per-image bookkeeping for one attack run.
#[derive(Debug, Clone)]
pub struct AdversarialBatch<S> {
    pub originals: Tensor<S>,
    pub adversarials: Tensor<S>,
    pub labels: Vec<u8>,
    pub config: AttackSnapshot,
    pub source_pred_clean: Vec<u8>,
    pub source_pred_adv: Vec<u8>,
    /// True where the source model misclassifies the adversarial.
    pub fooled: Vec<bool>,
}

impl<S: Scalar> AdversarialBatch<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn attack_name(&self) -> &str {
        &self.config.attack
    }

    /// L-inf norm of one image's perturbation.
    pub fn linf(&self, i: usize) -> f64 {
        let a = &self.originals.values()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS];
        let b = &self.adversarials.values()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS];
        a.iter().zip(b).map(|(&x, &y)| (x - y).abs().as_f64()).fold(0.0, f64::max)
    }

    /// Verify the epsilon-ball and value-range invariants for all images.
    pub fn check_invariants(&self) -> Result<(), AttackError> {
        let eps = self.config.epsilon + 1e-6;
        let (lo, hi) = (0.0, 1.0);
        for i in 0..self.len() {
            let linf = self.linf(i);
            if linf > eps {
                return Err(AttackError::Config(format!("image {i}: |x''-x|inf = {linf} > {eps}")));
            }
        }
        if let Some(&v) = self
            .adversarials
            .values()
            .iter()
            .find(|v| v.as_f64() < lo || v.as_f64() > hi)
        {
            return Err(AttackError::Config(format!("adversarial pixel {v} outside [0,1]")));
        }
        Ok(())
    }

    /// Per-image rows {index, label, source_pred_clean, source_pred_adv,
    /// Linf_norm} as CSV.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "index,label,source_pred_clean,source_pred_adv,linf_norm")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{i},{},{},{},{:.6}",
                self.labels[i],
                self.source_pred_clean[i],
                self.source_pred_adv[i],
                self.linf(i)
            )?;
        }
        Ok(())
    }
}

/// Clamp (x_adv - x) into [-eps, eps], re-add x, clamp to value range.
pub fn project_linf<S: Scalar>(
    x_adv: &Tensor<S>,
    x: &Tensor<S>,
    budget: &PerturbationBudget,
) -> Result<Tensor<S>, AttackError> {
    if x_adv.shape() != x.shape() {
        return Err(EngineError::dim(
            "project_linf",
            format!("{:?} vs {:?}", x_adv.shape(), x.shape()),
        )
        .into());
    }
    let eps = S::from_f64(budget.epsilon);
    let (lo, hi) = (S::from_f64(budget.value_range.0), S::from_f64(budget.value_range.1));
    let values: Vec<S> = x_adv
        .values()
        .iter()
        .zip(x.values())
        .map(|(&a, &o)| {
            let delta = (a - o).max(-eps).min(eps);
            (o + delta).max(lo).min(hi)
        })
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), values).expect("projection preserves shape"))
}

/// One signed gradient-ascent step of size `step`, before projection.
pub fn sign_ascent_step<S: Scalar>(x: &Tensor<S>, grad: &[S], step: f64) -> Tensor<S> {
    let s = S::from_f64(step);
    let values: Vec<S> = x
        .values()
        .iter()
        .zip(grad)
        .map(|(&xi, &gi)| xi + s * sign_zero(gi))
        .collect();
    Tensor::new(x.shape().to_vec(), values).expect("step preserves shape")
}

fn require_frozen<S: Scalar>(model: &ModelHandle<S>) -> Result<(), AttackError> {
    if !model.frozen() {
        return Err(AttackError::Config("attacks require a frozen model".into()));
    }
    Ok(())
}

/// Gradient of the mean cross-entropy w.r.t. the input batch.
fn ce_input_grad<S: Scalar>(
    model: &ModelHandle<S>,
    x: &Tensor<S>,
    labels: &[usize],
) -> Result<Vec<S>, AttackError> {
    let mut tape = Tape::new();
    let x_node = tape.leaf(&x.clone().with_grad(true));
    let pass = model.forward_on_tape(&mut tape, x_node, crate::models::Mode::Eval, false, None)?;
    let logits = *pass.endpoints.last().expect("endpoint program");
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok(grads.wrt(x_node, &tape))
}

fn to_usize_labels(labels: &[u8]) -> Vec<usize> {
    labels.iter().map(|&l| l as usize).collect()
}

fn assemble_batch<S: Scalar>(
    model: &ModelHandle<S>,
    originals: Tensor<S>,
    adversarials: Tensor<S>,
    labels: &[u8],
    config: AttackSnapshot,
) -> Result<AdversarialBatch<S>, AttackError> {
    let source_pred_clean = model.predict(&originals)?;
    let source_pred_adv = model.predict(&adversarials)?;
    let fooled = source_pred_adv.iter().zip(labels).map(|(&p, &y)| p != y).collect();
    Ok(AdversarialBatch {
        originals,
        adversarials,
        labels: labels.to_vec(),
        config,
        source_pred_clean,
        source_pred_adv,
        fooled,
    })
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n).step_by(ATTACK_CHUNK).map(|s| s..(s + ATTACK_CHUNK).min(n)).collect()
}

fn slice_images<S: Scalar>(x: &Tensor<S>, range: &std::ops::Range<usize>) -> Tensor<S> {
    let vals = x.values()[range.start * IMAGE_PIXELS..range.end * IMAGE_PIXELS].to_vec();
    let mut shape = x.shape().to_vec();
    shape[0] = range.len();
    Tensor::new(shape, vals).expect("slice shape")
}

fn splice_images<S: Scalar>(dst: &mut Tensor<S>, range: &std::ops::Range<usize>, src: &Tensor<S>) {
    dst.values_mut()[range.start * IMAGE_PIXELS..range.end * IMAGE_PIXELS]
        .copy_from_slice(src.values());
}

/// Fast Gradient Sign Method: one step of size epsilon.
pub fn fgsm<S: Scalar>(
    model: &ModelHandle<S>,
    x: &Tensor<S>,
    labels: &[u8],
    budget: &PerturbationBudget,
) -> Result<AdversarialBatch<S>, AttackError> {
    require_frozen(model)?;
    let mut adv = x.clone();
    for range in chunk_ranges(labels.len()) {
        let xs = slice_images(x, &range);
        let grad = ce_input_grad(model, &xs, &to_usize_labels(&labels[range.clone()]))?;
        let stepped = sign_ascent_step(&xs, &grad, budget.epsilon);
        let projected = project_linf(&stepped, &xs, budget)?;
        splice_images(&mut adv, &range, &projected);
    }
    let cfg = AttackConfig { budget: *budget, lr: budget.epsilon, n_iters: 1, momentum_mu: 0.0, seed: 0 };
    assemble_batch(model, x.clone(), adv, labels, AttackSnapshot::baseline("fgsm", &cfg))
}

/// Iterative FGSM: n_iters sign steps of size lr with projection.
pub fn ifgsm<S: Scalar>(
    model: &ModelHandle<S>,
    x: &Tensor<S>,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<S>, AttackError> {
    require_frozen(model)?;
    cfg.validate()?;
    let mut adv = x.clone();
    for range in chunk_ranges(labels.len()) {
        let xs = slice_images(x, &range);
        let ys = to_usize_labels(&labels[range.clone()]);
        let mut cur = xs.clone();
        for _ in 0..cfg.n_iters {
            let grad = ce_input_grad(model, &cur, &ys)?;
            cur = project_linf(&sign_ascent_step(&cur, &grad, cfg.lr), &xs, &cfg.budget)?;
        }
        splice_images(&mut adv, &range, &cur);
    }
    assemble_batch(model, x.clone(), adv, labels, AttackSnapshot::baseline("ifgsm", cfg))
}

/// Momentum iterative FGSM: accumulate the per-image L1-normalized
/// gradient with decay mu, step along its sign.
pub fn mifgsm<S: Scalar>(
    model: &ModelHandle<S>,
    x: &Tensor<S>,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<S>, AttackError> {
    require_frozen(model)?;
    cfg.validate()?;
    let mu = S::from_f64(cfg.momentum_mu);
    let mut adv = x.clone();
    for range in chunk_ranges(labels.len()) {
        let xs = slice_images(x, &range);
        let ys = to_usize_labels(&labels[range.clone()]);
        let mut cur = xs.clone();
        let mut acc = vec![S::zero(); xs.numel()];
        for _ in 0..cfg.n_iters {
            let grad = ce_input_grad(model, &cur, &ys)?;
            for (img, img_grad) in grad.chunks(IMAGE_PIXELS).enumerate() {
                let l1 = img_grad.iter().fold(S::zero(), |a, &g| a + g.abs());
                let base = img * IMAGE_PIXELS;
                if l1 > S::zero() {
                    for (a, &g) in acc[base..base + IMAGE_PIXELS].iter_mut().zip(img_grad) {
                        *a = mu * *a + g / l1;
                    }
                } else {
                    for a in &mut acc[base..base + IMAGE_PIXELS] {
                        *a = mu * *a;
                    }
                }
            }
            cur = project_linf(&sign_ascent_step(&cur, &acc, cfg.lr), &xs, &cfg.budget)?;
        }
        splice_images(&mut adv, &range, &cur);
    }
    assemble_batch(model, x.clone(), adv, labels, AttackSnapshot::baseline("mifgsm", cfg))
}

/// Weighted members of the multi-fool ensemble objective.
pub struct EnsembleConfig<'a, S> {
    pub members: Vec<&'a ModelHandle<S>>,
    /// Positive weights summing to 1.
    pub weights: Vec<f64>,
    /// Weight of the L2 distance penalty d(x, x''); 0 disables it.
    pub lambda: f64,
}

impl<'a, S: Scalar> EnsembleConfig<'a, S> {
    pub fn uniform(members: Vec<&'a ModelHandle<S>>) -> Result<Self, AttackError> {
        if members.is_empty() {
            return Err(AttackError::Config("ensemble requires at least one member".into()));
        }
        let w = 1.0 / members.len() as f64;
        Ok(EnsembleConfig { weights: vec![w; members.len()], members, lambda: 0.0 })
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.members.is_empty() {
            return Err(AttackError::Config("ensemble requires at least one member".into()));
        }
        if self.weights.len() != self.members.len() {
            return Err(AttackError::Config(format!(
                "{} weights for {} members",
                self.weights.len(),
                self.members.len()
            )));
        }
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(AttackError::Config("ensemble weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(AttackError::Config(format!("ensemble weights sum to {total}, expected 1")));
        }
        if self.lambda < 0.0 {
            return Err(AttackError::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Multi-fool attack: iterative sign ascent on the weighted mean of the
/// members' cross-entropy losses, minus an optional lambda * L2 distance
/// penalty, projected each step. The first member's predictions fill the
/// batch bookkeeping.
pub fn ensemble_multifool<S: Scalar>(
    ensemble: &EnsembleConfig<'_, S>,
    x: &Tensor<S>,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<S>, AttackError> {
    ensemble.validate()?;
    for m in &ensemble.members {
        require_frozen(m)?;
    }
    cfg.validate()?;

    let mut adv = x.clone();
    for range in chunk_ranges(labels.len()) {
        let xs = slice_images(x, &range);
        let ys = to_usize_labels(&labels[range.clone()]);
        let mut cur = xs.clone();
        for _ in 0..cfg.n_iters {
            let mut tape = Tape::new();
            let x_node = tape.leaf(&cur.clone().with_grad(true));
            let mut objective = None;
            for (member, &weight) in ensemble.members.iter().zip(&ensemble.weights) {
                let pass = member.forward_on_tape(&mut tape, x_node, crate::models::Mode::Eval, false, None)?;
                let logits = *pass.endpoints.last().expect("endpoint program");
                let ce = tape.softmax_cross_entropy(logits, &ys)?;
                let weighted = tape.scale(ce, S::from_f64(weight));
                objective = Some(match objective {
                    None => weighted,
                    Some(acc) => tape.add(acc, weighted)?,
                });
            }
            let mut objective = objective.expect("at least one member");
            if ensemble.lambda != 0.0 {
                let orig = tape.constant(xs.shape().to_vec(), xs.values().to_vec())?;
                let diff = tape.sub(x_node, orig)?;
                let flat = tape.flatten(diff)?;
                let norms = tape.row_l2norm_guarded(flat, S::from_f64(1e-12))?;
                let total = tape.sum(norms);
                let penalty = tape.scale(total, S::from_f64(-ensemble.lambda));
                objective = tape.add(objective, penalty)?;
            }
            let grads = tape.backward(objective)?;
            let grad = grads.wrt(x_node, &tape);
            cur = project_linf(&sign_ascent_step(&cur, &grad, cfg.lr), &xs, &cfg.budget)?;
        }
        splice_images(&mut adv, &range, &cur);
    }
    let snapshot = AttackSnapshot::baseline("multifool", cfg);
    assemble_batch(ensemble.members[0], x.clone(), adv, labels, snapshot)
}

/// Count of ensemble members fooled per image by a batch of adversarials.
pub fn fooled_member_counts<S: Scalar>(
    members: &[&ModelHandle<S>],
    batch: &AdversarialBatch<S>,
) -> Result<Vec<usize>, AttackError> {
    let mut counts = vec![0usize; batch.len()];
    for member in members {
        let preds = member.predict(&batch.adversarials)?;
        for (c, (&p, &y)) in counts.iter_mut().zip(preds.iter().zip(&batch.labels)) {
            if p != y {
                *c += 1;
            }
        }
    }
    Ok(counts)
}

/// Per-image unit perturbation directions (x' - x) / ||x' - x||.
#[derive(Debug, Clone)]
pub struct BtdDirections<S> {
    /// One unit vector of length IMAGE_PIXELS per image; zero rows for
    /// degenerate images.
    pub directions: Vec<Vec<S>>,
    /// Images whose perturbation was exactly zero (degenerate direction).
    pub degenerate: Vec<bool>,
}

pub fn best_transfer_direction<S: Scalar>(batch: &AdversarialBatch<S>) -> BtdDirections<S> {
    let mut directions = Vec::with_capacity(batch.len());
    let mut degenerate = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let a = &batch.originals.values()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS];
        let b = &batch.adversarials.values()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS];
        let mut delta: Vec<S> = b.iter().zip(a).map(|(&y, &x)| y - x).collect();
        let norm = delta.iter().fold(S::zero(), |acc, &d| acc + d * d).sqrt();
        if norm > S::zero() {
            for d in &mut delta {
                *d = *d / norm;
            }
            degenerate.push(false);
        } else {
            for d in &mut delta {
                *d = S::zero();
            }
            degenerate.push(true);
        }
        directions.push(delta);
    }
    BtdDirections { directions, degenerate }
}

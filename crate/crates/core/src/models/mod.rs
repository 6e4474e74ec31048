//! Small CNN zoo with named, attackable intermediate endpoints.
//!
//! Dataset normalization is a fixed first layer of every model, so all
//! attack code operates in raw [0,1] pixel space and the L-inf budget it
//! enforces is the budget measured on disk.

mod archs;
mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{BnStats, EngineError, NodeId, Parameter, Tape, Tensor};
use crate::scalar::Scalar;

pub use io::{load_model, save_model, MODEL_MAGIC};

/// Input geometry shared by every architecture.
pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    MiniCnn,
    MiniVgg,
    MiniResnet,
    MiniResnetVar1,
    MiniResnetVar2,
}

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::MiniCnn => "mini_cnn",
            ArchId::MiniVgg => "mini_vgg",
            ArchId::MiniResnet => "mini_resnet",
            ArchId::MiniResnetVar1 => "mini_resnet_var1",
            ArchId::MiniResnetVar2 => "mini_resnet_var2",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "mini_cnn" => Ok(ArchId::MiniCnn),
            "mini_vgg" => Ok(ArchId::MiniVgg),
            "mini_resnet" => Ok(ArchId::MiniResnet),
            "mini_resnet_var1" => Ok(ArchId::MiniResnetVar1),
            "mini_resnet_var2" => Ok(ArchId::MiniResnetVar2),
            other => Err(ModelError::UnknownArch(other.to_string())),
        }
    }

    pub fn all() -> &'static [ArchId] {
        &[
            ArchId::MiniCnn,
            ArchId::MiniVgg,
            ArchId::MiniResnet,
            ArchId::MiniResnetVar1,
            ArchId::MiniResnetVar2,
        ]
    }
}

/// Per-channel input normalization applied as a fixed first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        // CIFAR-10 channel statistics.
        Normalization { mean: [0.4914, 0.4822, 0.4465], std: [0.2023, 0.1994, 0.2010] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchId,
    pub num_classes: usize,
    pub width_multiplier: f32,
    pub normalization: Normalization,
}

impl ModelSpec {
    pub fn new(arch: ArchId) -> Self {
        ModelSpec {
            arch,
            num_classes: 10,
            width_multiplier: 1.0,
            normalization: Normalization::default(),
        }
    }
}

/// One attackable intermediate output F_l.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEndpoint {
    pub index: usize,
    pub name: String,
    /// Per-image shape of the raw activation at this endpoint.
    pub shape: Vec<usize>,
}

impl LayerEndpoint {
    pub fn flat_len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: unknown architecture '{0}'")]
    UnknownArch(String),

    #[error("endpoint error: index {requested} invalid, valid indices are 0..{count}")]
    Endpoint { requested: usize, count: usize },

    #[error("model is frozen: {0}")]
    Frozen(String),

    #[error("model must be frozen: {0}")]
    NotFrozen(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Named non-trainable tensor (running statistics, normalization).
#[derive(Debug, Clone)]
pub struct Buffer<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Flat execution program; endpoints mark attackable activations.
#[derive(Debug, Clone)]
pub(crate) enum LayerOp {
    Normalize,
    Conv { w: usize, stride: usize, pad: usize },
    Bn { gamma: usize, beta: usize, mean_buf: usize, var_buf: usize },
    Relu,
    MaxPool,
    AvgPoolGlobal,
    Flatten,
    Dense { w: usize, b: usize },
    PushSkip,
    ApplySkip { proj: Option<ProjShortcut> },
    Endpoint { index: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct ProjShortcut {
    pub w: usize,
    pub gamma: usize,
    pub beta: usize,
    pub mean_buf: usize,
    pub var_buf: usize,
    pub stride: usize,
}

/// A built network: spec, parameters, buffers and the endpoint registry.
/// Frozen handles reject parameter mutation and are safe to share across
/// attack workers.
#[derive(Debug, Clone)]
pub struct ModelHandle<S> {
    spec: ModelSpec,
    params: Vec<Parameter<S>>,
    buffers: Vec<Buffer<S>>,
    program: Vec<LayerOp>,
    endpoints: Vec<LayerEndpoint>,
    frozen: bool,
}

/// Result of staging one forward pass on a tape.
pub struct ForwardPass<S> {
    /// Endpoint nodes produced so far, one per endpoint index (raw shape).
    pub endpoints: Vec<NodeId>,
    /// Node ids the parameters were staged as, aligned with `params()`.
    pub param_nodes: Vec<NodeId>,
    /// Batch statistics per batchnorm (buffer index of running_mean,
    /// stats), populated only in training mode.
    pub bn_updates: Vec<(usize, BnStats<S>)>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<S: Scalar> ModelHandle<S> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> ArchId {
        self.spec.arch
    }

    pub fn endpoints(&self) -> &[LayerEndpoint] {
        &self.endpoints
    }

    pub fn endpoint_count(&self) -> usize {
        self.endpoints.len()
    }

    pub fn params(&self) -> &[Parameter<S>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<S>] {
        &self.buffers
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Mutable parameter access; rejected on frozen handles.
    pub fn params_mut(&mut self) -> Result<&mut Vec<Parameter<S>>, ModelError> {
        if self.frozen {
            return Err(ModelError::Frozen("parameter mutation rejected".into()));
        }
        Ok(&mut self.params)
    }

    pub fn buffers_mut(&mut self) -> Result<&mut Vec<Buffer<S>>, ModelError> {
        if self.frozen {
            return Err(ModelError::Frozen("buffer mutation rejected".into()));
        }
        Ok(&mut self.buffers)
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 4 || shape[1] != INPUT_CHANNELS || shape[2] != INPUT_SIDE || shape[3] != INPUT_SIDE {
            return Err(EngineError::dim(
                "model_forward",
                format!("expected [N,{INPUT_CHANNELS},{INPUT_SIDE},{INPUT_SIDE}] input, got {shape:?}"),
            )
            .into());
        }
        Ok(())
    }

    /// Stage a forward pass on `tape` starting from `x` (already a node).
    ///
    /// `upto = Some(l)` stops right after endpoint `l` is produced, so no
    /// layer past its producer executes. `trainable` stages parameters
    /// with gradients enabled (rejected when frozen).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        mode: Mode,
        trainable: bool,
        upto: Option<usize>,
    ) -> Result<ForwardPass<S>, ModelError> {
        self.check_input(tape.shape(x))?;
        if trainable && self.frozen {
            return Err(ModelError::Frozen("cannot stage trainable forward".into()));
        }
        if let Some(l) = upto {
            if l >= self.endpoints.len() {
                return Err(ModelError::Endpoint { requested: l, count: self.endpoints.len() });
            }
        }

        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                let t = p.tensor.clone().with_grad(trainable);
                tape.leaf(&t)
            })
            .collect();

        let mut pass = ForwardPass { endpoints: Vec::new(), param_nodes, bn_updates: Vec::new() };
        let mut cur = x;
        let mut skip: Vec<NodeId> = Vec::new();

        for op in &self.program {
            match op {
                LayerOp::Normalize => {
                    let norm = &self.spec.normalization;
                    let scale: Vec<S> = norm.std.iter().map(|&s| S::from_f64(1.0 / s as f64)).collect();
                    let shift: Vec<S> = norm
                        .mean
                        .iter()
                        .zip(&norm.std)
                        .map(|(&m, &s)| S::from_f64(-(m as f64) / s as f64))
                        .collect();
                    cur = tape.channel_affine(cur, &scale, &shift)?;
                }
                LayerOp::Conv { w, stride, pad } => {
                    let w_node = pass.param_nodes[*w];
                    let out_ch = self.params[*w].tensor.shape()[0];
                    let zero_bias = tape.constant(vec![out_ch], vec![S::zero(); out_ch])?;
                    cur = tape.conv2d(cur, w_node, zero_bias, *stride, *pad)?;
                }
                LayerOp::Bn { gamma, beta, mean_buf, var_buf } => {
                    let (node, stats) = tape.batch_norm2d(
                        cur,
                        pass.param_nodes[*gamma],
                        pass.param_nodes[*beta],
                        self.buffers[*mean_buf].tensor.values(),
                        self.buffers[*var_buf].tensor.values(),
                        mode == Mode::Train,
                        S::from_f64(BN_EPS),
                    )?;
                    cur = node;
                    if let Some(stats) = stats {
                        pass.bn_updates.push((*mean_buf, stats));
                    }
                }
                LayerOp::Relu => cur = tape.relu(cur),
                LayerOp::MaxPool => cur = tape.max_pool2x2(cur)?,
                LayerOp::AvgPoolGlobal => cur = tape.avg_pool_global(cur)?,
                LayerOp::Flatten => cur = tape.flatten(cur)?,
                LayerOp::Dense { w, b } => {
                    cur = tape.dense(cur, pass.param_nodes[*w], pass.param_nodes[*b])?;
                }
                LayerOp::PushSkip => skip.push(cur),
                LayerOp::ApplySkip { proj } => {
                    let skipped = skip.pop().expect("balanced skip ops");
                    let shortcut = match proj {
                        None => skipped,
                        Some(p) => {
                            let out_ch = self.params[p.w].tensor.shape()[0];
                            let zero_bias = tape.constant(vec![out_ch], vec![S::zero(); out_ch])?;
                            let conv = tape.conv2d(skipped, pass.param_nodes[p.w], zero_bias, p.stride, 0)?;
                            let (bn, stats) = tape.batch_norm2d(
                                conv,
                                pass.param_nodes[p.gamma],
                                pass.param_nodes[p.beta],
                                self.buffers[p.mean_buf].tensor.values(),
                                self.buffers[p.var_buf].tensor.values(),
                                mode == Mode::Train,
                                S::from_f64(BN_EPS),
                            )?;
                            if let Some(stats) = stats {
                                pass.bn_updates.push((p.mean_buf, stats));
                            }
                            bn
                        }
                    };
                    cur = tape.residual_add(cur, shortcut)?;
                }
                LayerOp::Endpoint { index } => {
                    debug_assert_eq!(*index, pass.endpoints.len());
                    pass.endpoints.push(cur);
                    if upto == Some(*index) {
                        return Ok(pass);
                    }
                }
            }
        }
        Ok(pass)
    }

    /// Pre-softmax logits for a [N,3,32,32] batch in [0,1]; frozen-model
    /// evaluation path with no gradients.
    pub fn forward_logits(&self, x: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let mut tape = Tape::new();
        let x_node = tape.leaf(&x.clone().with_grad(false));
        let pass = self.forward_on_tape(&mut tape, x_node, Mode::Eval, false, None)?;
        let logits = *pass.endpoints.last().expect("program ends with an endpoint");
        Ok(tape.to_tensor(logits))
    }

    /// Flattened activation F_l(x) at endpoint `l`, shape [N, D].
    pub fn forward_to_endpoint(&self, x: &Tensor<S>, l: usize) -> Result<Tensor<S>, ModelError> {
        let mut tape = Tape::new();
        let x_node = tape.leaf(&x.clone().with_grad(false));
        let node = self.endpoint_on_tape(&mut tape, x_node, l)?;
        Ok(tape.to_tensor(node))
    }

    /// Same as [`Self::forward_to_endpoint`] but on a caller-owned tape so
    /// the activation stays differentiable w.r.t. `x`.
    pub fn endpoint_on_tape(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        l: usize,
    ) -> Result<NodeId, ModelError> {
        if l >= self.endpoints.len() {
            return Err(ModelError::Endpoint { requested: l, count: self.endpoints.len() });
        }
        let pass = self.forward_on_tape(tape, x, Mode::Eval, false, Some(l))?;
        let raw = pass.endpoints[l];
        Ok(tape.flatten(raw)?)
    }

    /// All flattened endpoint activations in one pass (analysis helper).
    pub fn all_endpoints(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>, ModelError> {
        let mut tape = Tape::new();
        let x_node = tape.leaf(&x.clone().with_grad(false));
        let pass = self.forward_on_tape(&mut tape, x_node, Mode::Eval, false, None)?;
        pass.endpoints
            .iter()
            .map(|&e| {
                let f = tape.flatten(e)?;
                Ok(tape.to_tensor(f))
            })
            .collect()
    }

    /// Argmax class prediction per image.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Vec<u8>, ModelError> {
        let logits = self.forward_logits(x)?;
        let k = logits.shape()[1];
        Ok(logits
            .values()
            .chunks(k)
            .map(|row| {
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect())
    }

    /// Fold training-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BnStats<S>)]) -> Result<(), ModelError> {
        if self.frozen {
            return Err(ModelError::Frozen("bn update rejected".into()));
        }
        let m = S::from_f64(BN_MOMENTUM);
        let one_m = S::one() - m;
        for (mean_buf, stats) in updates {
            let var_buf = mean_buf + 1; // running_var follows running_mean
            for (r, &b) in self.buffers[*mean_buf].tensor.values_mut().iter_mut().zip(&stats.mean) {
                *r = one_m * *r + m * b;
            }
            for (r, &b) in self.buffers[var_buf].tensor.values_mut().iter_mut().zip(&stats.var_unbiased) {
                *r = one_m * *r + m * b;
            }
        }
        Ok(())
    }

    /// Convert parameter/buffer precision (f64 verification mode).
    pub fn cast<T: Scalar>(&self) -> ModelHandle<T> {
        ModelHandle {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.tensor.cast::<T>()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer { name: b.name.clone(), tensor: b.tensor.cast::<T>() })
                .collect(),
            program: self.program.clone(),
            endpoints: self.endpoints.clone(),
            frozen: self.frozen,
        }
    }
}

/// Construct a model with fan-in-scaled uniform initialization from `seed`.
pub fn build_model<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelHandle<S>, ModelError> {
    archs::build(spec, seed)
}

//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass as an
//! append-only arena of nodes; node indices are handed out as [`NodeId`].
//! An operation is recorded only when at least one of its inputs requires
//! a gradient, so frozen-model evaluation leaves a tape of plain leaves.
//! [`Tape::backward`] walks the arena once in reverse order, which keeps
//! gradient accumulation order fixed and results bitwise reproducible.

use rayon::prelude::*;

use crate::scalar::Scalar;

use super::linalg::{col2im_acc, im2col, matmul, matmul_acc, transpose};
use super::{EngineError, Tensor};

/// Handle to a value stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Batch statistics produced by a training-mode batchnorm, reported back
/// so the model can update its running estimates outside the tape.
#[derive(Debug, Clone)]
pub struct BnStats<S> {
    pub mean: Vec<S>,
    /// Biased (1/M) variance used for the normalization itself.
    pub var_biased: Vec<S>,
    /// Unbiased (1/(M-1)) variance used for the running estimate.
    pub var_unbiased: Vec<S>,
}

enum Rec<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Sum(NodeId),
    RowSum(NodeId),
    RowL2Norm { x: NodeId, guard: S },
    RecipGuard { x: NodeId },
    Relu(NodeId),
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<S>, var: Vec<S>, eps: S, train: bool },
    MaxPool2 { x: NodeId, arg: Vec<u32> },
    GlobalAvgPool(NodeId),
    Flatten(NodeId),
    ChannelAffine { x: NodeId, scale: Vec<S> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<S> },
}

struct Node<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    requires_grad: bool,
    rec: Rec<S>,
}

/// Gradients for every node of a tape after a backward pass.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient w.r.t. a node; nodes that do not influence the root (or
    /// never required gradients) report zeros.
    pub fn wrt(&self, id: NodeId, tape: &Tape<S>) -> Vec<S> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![S::zero(); tape.nodes[id.0].values.len()],
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<S>, requires_grad: bool, rec: Rec<S>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let rec = if requires_grad { rec } else { Rec::Leaf };
        self.nodes.push(Node { shape, values, requires_grad, rec });
        NodeId(self.nodes.len() - 1)
    }

    /// Stage a tensor as a tape leaf, keeping its requires-grad flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(t.shape().to_vec(), t.values().to_vec(), t.requires_grad(), Rec::Leaf)
    }

    /// Stage raw data as a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<S>) -> Result<NodeId, EngineError> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(EngineError::dim("constant", format!("shape {shape:?} vs {} values", values.len())));
        }
        Ok(self.push(shape, values, false, Rec::Leaf))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].values
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id.0].values.len()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<S> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].values.clone())
            .expect("node invariant")
    }

    /// Scalar value of a 1-element node.
    pub fn scalar_value(&self, id: NodeId) -> Result<S, EngineError> {
        let n = &self.nodes[id.0];
        if n.values.len() != 1 {
            return Err(EngineError::Usage(format!("expected scalar node, shape {:?}", n.shape)));
        }
        Ok(n.values[0])
    }

    fn binary_elementwise(
        &mut self,
        primitive: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
        rec: Rec<S>,
    ) -> Result<NodeId, EngineError> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(EngineError::dim(
                primitive,
                format!("lhs {:?} vs rhs {:?}", na.shape, nb.shape),
            ));
        }
        let values: Vec<S> = na.values.iter().zip(&nb.values).map(|(&x, &y)| f(x, y)).collect();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(self.nodes[a.0].shape.clone(), values, rg, rec))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Rec::Add(a, b))
    }

    /// Elementwise sum of two equal-shape activations (skip connection).
    pub fn residual_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.binary_elementwise("residual_add", a, b, |x, y| x + y, Rec::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Rec::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Rec::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let values: Vec<S> = self.nodes[a.0].values.iter().map(|&x| x * c).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), values, rg, Rec::Scale(a, c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a.0].values.iter().fold(S::zero(), |acc, &v| acc + v);
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![total], rg, Rec::Sum(a))
    }

    /// Per-row sum of a rank-2 node: [N, D] -> [N].
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        let node = &self.nodes[a.0];
        if node.shape.len() != 2 {
            return Err(EngineError::dim("row_sum", format!("expected rank 2, got {:?}", node.shape)));
        }
        let (n, d) = (node.shape[0], node.shape[1]);
        let values: Vec<S> = (0..n)
            .map(|i| node.values[i * d..(i + 1) * d].iter().fold(S::zero(), |acc, &v| acc + v))
            .collect();
        let rg = node.requires_grad;
        Ok(self.push(vec![n], values, rg, Rec::RowSum(a)))
    }

    /// Per-row L2 norm of a rank-2 node: [N, D] -> [N]. The backward pass
    /// divides by (norm + guard) so a zero row yields a zero gradient
    /// instead of NaN.
    pub fn row_l2norm_guarded(&mut self, a: NodeId, guard: S) -> Result<NodeId, EngineError> {
        let node = &self.nodes[a.0];
        if node.shape.len() != 2 {
            return Err(EngineError::dim("row_l2norm", format!("expected rank 2, got {:?}", node.shape)));
        }
        let (n, d) = (node.shape[0], node.shape[1]);
        let values: Vec<S> = (0..n)
            .map(|i| {
                node.values[i * d..(i + 1) * d]
                    .iter()
                    .fold(S::zero(), |acc, &v| acc + v * v)
                    .sqrt()
            })
            .collect();
        let rg = node.requires_grad;
        Ok(self.push(vec![n], values, rg, Rec::RowL2Norm { x: a, guard }))
    }

    /// Elementwise y = 1 / (x + guard).
    pub fn recip_guarded(&mut self, a: NodeId, guard: S) -> NodeId {
        let values: Vec<S> = self.nodes[a.0].values.iter().map(|&x| S::one() / (x + guard)).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), values, rg, Rec::RecipGuard { x: a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let values: Vec<S> = self.nodes[a.0].values.iter().map(|&x| x.max(S::zero())).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), values, rg, Rec::Relu(a))
    }

    /// Fully-connected layer: x[N,In] * w[Out,In]^T + b[Out] -> [N,Out].
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let (nx, nw, nb) = (&self.nodes[x.0], &self.nodes[w.0], &self.nodes[b.0]);
        if nx.shape.len() != 2 || nw.shape.len() != 2 {
            return Err(EngineError::dim(
                "dense",
                format!("x {:?} and w {:?} must be rank 2", nx.shape, nw.shape),
            ));
        }
        let (n, f_in) = (nx.shape[0], nx.shape[1]);
        let (f_out, w_in) = (nw.shape[0], nw.shape[1]);
        if f_in != w_in {
            return Err(EngineError::dim(
                "dense",
                format!("input features {f_in} do not match weight columns {w_in}"),
            ));
        }
        if nb.shape != [f_out] {
            return Err(EngineError::dim(
                "dense",
                format!("bias {:?} does not match {f_out} output features", nb.shape),
            ));
        }
        let w_t = transpose(&nw.values, f_out, f_in);
        let mut values = matmul(&nx.values, &w_t, n, f_in, f_out);
        for row in values.chunks_mut(f_out) {
            for (v, &bi) in row.iter_mut().zip(&self.nodes[b.0].values) {
                *v += bi;
            }
        }
        let rg = nx.requires_grad || self.nodes[w.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(vec![n, f_out], values, rg, Rec::Dense { x, w, b }))
    }

    /// 2-D cross-correlation: x[N,C,H,W], w[O,C,kh,kw], b[O].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, EngineError> {
        let (nx, nw, nb) = (&self.nodes[x.0], &self.nodes[w.0], &self.nodes[b.0]);
        if nx.shape.len() != 4 || nw.shape.len() != 4 {
            return Err(EngineError::dim(
                "conv2d",
                format!("x {:?} and w {:?} must be rank 4", nx.shape, nw.shape),
            ));
        }
        if stride < 1 {
            return Err(EngineError::Config("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, wd) = (nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]);
        let (o, wc, kh, kw) = (nw.shape[0], nw.shape[1], nw.shape[2], nw.shape[3]);
        if c != wc {
            return Err(EngineError::dim(
                "conv2d",
                format!("input channels {c} do not match weight channels {wc}"),
            ));
        }
        if nb.shape != [o] {
            return Err(EngineError::dim("conv2d", format!("bias {:?} vs {o} filters", nb.shape)));
        }
        let oh = (h + 2 * pad).checked_sub(kh).map(|v| v / stride + 1);
        let ow = (wd + 2 * pad).checked_sub(kw).map(|v| v / stride + 1);
        let (oh, ow) = match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(EngineError::dim(
                    "conv2d",
                    format!("non-positive output size for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"),
                ))
            }
        };
        let k = c * kh * kw;
        let patch = oh * ow;
        let x_vals = &nx.values;
        let w_vals = &nw.values;
        let b_vals = &self.nodes[b.0].values;
        let mut values = vec![S::zero(); n * o * patch];
        values
            .par_chunks_mut(o * patch)
            .enumerate()
            .for_each(|(img, out)| {
                let cols = im2col(&x_vals[img * c * h * wd..(img + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, oh, ow);
                matmul_acc(out, w_vals, &cols, o, k, patch);
                for (ch, bias) in b_vals.iter().enumerate() {
                    for v in &mut out[ch * patch..(ch + 1) * patch] {
                        *v += *bias;
                    }
                }
            });
        let rg = nx.requires_grad || self.nodes[w.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(vec![n, o, oh, ow], values, rg, Rec::Conv2d { x, w, b, stride, pad }))
    }

    /// Batch normalization over N,H,W per channel.
    ///
    /// Eval mode normalizes with the provided running statistics; training
    /// mode normalizes with batch statistics and reports them via
    /// [`BnStats`] so the caller can update its running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
        training: bool,
        eps: S,
    ) -> Result<(NodeId, Option<BnStats<S>>), EngineError> {
        if eps <= S::zero() {
            return Err(EngineError::Config(format!("batchnorm eps must be > 0, got {eps}")));
        }
        let nx = &self.nodes[x.0];
        if nx.shape.len() != 4 {
            return Err(EngineError::dim("batchnorm2d", format!("expected NCHW, got {:?}", nx.shape)));
        }
        let (n, c, h, w) = (nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[id.0].shape != [c] {
                return Err(EngineError::dim(
                    "batchnorm2d",
                    format!("{name} shape {:?} vs {c} channels", self.nodes[id.0].shape),
                ));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(EngineError::dim(
                "batchnorm2d",
                format!("running stats length {}/{} vs {c} channels", running_mean.len(), running_var.len()),
            ));
        }

        let plane = h * w;
        let m = n * plane;
        let (mean, var_b, stats) = if training {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            let x_vals = &self.nodes[x.0].values;
            for ch in 0..c {
                let mut acc = S::zero();
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for &v in &x_vals[base..base + plane] {
                        acc += v;
                    }
                }
                let mu = acc / S::from_f64(m as f64);
                let mut vacc = S::zero();
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for &v in &x_vals[base..base + plane] {
                        let d = v - mu;
                        vacc += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = vacc / S::from_f64(m as f64);
            }
            let var_unbiased: Vec<S> = if m > 1 {
                var.iter().map(|&v| v * S::from_f64(m as f64 / (m as f64 - 1.0))).collect()
            } else {
                var.clone()
            };
            let stats = BnStats { mean: mean.clone(), var_biased: var.clone(), var_unbiased };
            (mean, var, Some(stats))
        } else {
            (running_mean.to_vec(), running_var.to_vec(), None)
        };

        let x_vals = &self.nodes[x.0].values;
        let g_vals = &self.nodes[gamma.0].values;
        let b_vals = &self.nodes[beta.0].values;
        let mut values = vec![S::zero(); x_vals.len()];
        for img in 0..n {
            for ch in 0..c {
                let invstd = S::one() / (var_b[ch] + eps).sqrt();
                let (g, bb, mu) = (g_vals[ch], b_vals[ch], mean[ch]);
                let base = (img * c + ch) * plane;
                for (dst, &src) in values[base..base + plane].iter_mut().zip(&x_vals[base..base + plane]) {
                    *dst = (src - mu) * invstd * g + bb;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        let id = self.push(
            self.nodes[x.0].shape.clone(),
            values,
            rg,
            Rec::BatchNorm { x, gamma, beta, mean, var: var_b, eps, train: training },
        );
        Ok((id, stats))
    }

    /// 2x2 max pooling with stride 2 (floor semantics).
    pub fn max_pool2x2(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        let nx = &self.nodes[x.0];
        if nx.shape.len() != 4 {
            return Err(EngineError::dim("maxpool2x2", format!("expected NCHW, got {:?}", nx.shape)));
        }
        let (n, c, h, w) = (nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]);
        if h < 2 || w < 2 {
            return Err(EngineError::dim("maxpool2x2", format!("spatial size {h}x{w} too small")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut values = vec![S::zero(); n * c * oh * ow];
        let mut arg = vec![0u32; n * c * oh * ow];
        let x_vals = &nx.values;
        for img in 0..n {
            for ch in 0..c {
                let in_base = (img * c + ch) * h * w;
                let out_base = (img * c + ch) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = in_base + (2 * oy) * w + 2 * ox;
                        let mut best = x_vals[best_idx];
                        for (du, dv) in [(0usize, 1usize), (1, 0), (1, 1)] {
                            let idx = in_base + (2 * oy + du) * w + 2 * ox + dv;
                            if x_vals[idx] > best {
                                best = x_vals[idx];
                                best_idx = idx;
                            }
                        }
                        values[out_base + oy * ow + ox] = best;
                        arg[out_base + oy * ow + ox] = best_idx as u32;
                    }
                }
            }
        }
        let rg = nx.requires_grad;
        Ok(self.push(vec![n, c, oh, ow], values, rg, Rec::MaxPool2 { x, arg }))
    }

    /// Global average pooling: [N,C,H,W] -> [N,C].
    pub fn avg_pool_global(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        let nx = &self.nodes[x.0];
        if nx.shape.len() != 4 {
            return Err(EngineError::dim("avgpool_global", format!("expected NCHW, got {:?}", nx.shape)));
        }
        let (n, c, h, w) = (nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]);
        let plane = h * w;
        let scale = S::one() / S::from_f64(plane as f64);
        let values: Vec<S> = (0..n * c)
            .map(|i| {
                nx.values[i * plane..(i + 1) * plane].iter().fold(S::zero(), |acc, &v| acc + v) * scale
            })
            .collect();
        let rg = nx.requires_grad;
        Ok(self.push(vec![n, c], values, rg, Rec::GlobalAvgPool(x)))
    }

    /// Collapse all trailing axes: [N, ...] -> [N, prod].
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        let nx = &self.nodes[x.0];
        if nx.shape.is_empty() {
            return Err(EngineError::dim("flatten", "rank-0 input"));
        }
        let n = nx.shape[0];
        let d: usize = nx.shape[1..].iter().product::<usize>().max(1);
        let rg = nx.requires_grad;
        let values = nx.values.clone();
        Ok(self.push(vec![n, d], values, rg, Rec::Flatten(x)))
    }

    /// Fixed per-channel affine map y = x * scale[c] + shift[c]; realizes
    /// the dataset-normalization layer baked into every model.
    pub fn channel_affine(&mut self, x: NodeId, scale: &[S], shift: &[S]) -> Result<NodeId, EngineError> {
        let nx = &self.nodes[x.0];
        if nx.shape.len() != 4 {
            return Err(EngineError::dim("channel_affine", format!("expected NCHW, got {:?}", nx.shape)));
        }
        let (n, c, h, w) = (nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]);
        if scale.len() != c || shift.len() != c {
            return Err(EngineError::dim(
                "channel_affine",
                format!("scale/shift lengths {}/{} vs {c} channels", scale.len(), shift.len()),
            ));
        }
        let plane = h * w;
        let mut values = vec![S::zero(); nx.values.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let (s, t) = (scale[ch], shift[ch]);
                for (dst, &src) in values[base..base + plane].iter_mut().zip(&nx.values[base..base + plane]) {
                    *dst = src * s + t;
                }
            }
        }
        let rg = nx.requires_grad;
        Ok(self.push(
            nx.shape.clone(),
            values,
            rg,
            Rec::ChannelAffine { x, scale: scale.to_vec() },
        ))
    }

    /// Mean softmax cross-entropy over the batch, stabilized by
    /// max-subtraction. logits [N,K], labels in [0,K).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, EngineError> {
        let nl = &self.nodes[logits.0];
        if nl.shape.len() != 2 {
            return Err(EngineError::dim(
                "softmax_cross_entropy",
                format!("expected [N,K] logits, got {:?}", nl.shape),
            ));
        }
        let (n, k) = (nl.shape[0], nl.shape[1]);
        if labels.len() != n {
            return Err(EngineError::dim(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(EngineError::Input(format!("label {bad} out of range [0,{k})")));
        }
        let mut probs = vec![S::zero(); n * k];
        let mut total = S::zero();
        for i in 0..n {
            let row = &nl.values[i * k..(i + 1) * k];
            let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let mut denom = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / denom;
            }
            let log_denom = denom.ln() + max;
            total += log_denom - row[labels[i]];
        }
        let mean = total / S::from_f64(n as f64);
        let rg = nl.requires_grad;
        Ok(self.push(vec![1], vec![mean], rg, Rec::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Reverse pass from a scalar root. Accumulates exact gradients for
    /// every node that requires them; untouched nodes report zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>, EngineError> {
        if root.0 >= self.nodes.len() {
            return Err(EngineError::Usage("backward root is not on this tape".into()));
        }
        if self.nodes[root.0].values.len() != 1 {
            return Err(EngineError::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<S>>], target: NodeId, delta: Vec<S>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += *di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &self.nodes[id].rec {
            Rec::Leaf => {}
            Rec::Add(a, b) => {
                self.accum(grads, *a, g.to_vec());
                self.accum(grads, *b, g.to_vec());
            }
            Rec::Sub(a, b) => {
                self.accum(grads, *a, g.to_vec());
                self.accum(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Rec::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                if self.nodes[a.0].requires_grad {
                    self.accum(grads, *a, g.iter().zip(vb).map(|(&gi, &bi)| gi * bi).collect());
                }
                if self.nodes[b.0].requires_grad {
                    self.accum(grads, *b, g.iter().zip(va).map(|(&gi, &ai)| gi * ai).collect());
                }
            }
            Rec::Scale(a, c) => {
                self.accum(grads, *a, g.iter().map(|&v| v * *c).collect());
            }
            Rec::Sum(a) => {
                let n = self.nodes[a.0].values.len();
                self.accum(grads, *a, vec![g[0]; n]);
            }
            Rec::RowSum(a) => {
                let d = self.nodes[a.0].shape[1];
                let mut delta = vec![S::zero(); self.nodes[a.0].values.len()];
                for (i, &gi) in g.iter().enumerate() {
                    for v in &mut delta[i * d..(i + 1) * d] {
                        *v = gi;
                    }
                }
                self.accum(grads, *a, delta);
            }
            Rec::RowL2Norm { x, guard } => {
                let d = self.nodes[x.0].shape[1];
                let xv = &self.nodes[x.0].values;
                let norms = &self.nodes[id].values;
                let mut delta = vec![S::zero(); xv.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let inv = gi / (norms[i] + *guard);
                    for j in 0..d {
                        delta[i * d + j] = xv[i * d + j] * inv;
                    }
                }
                self.accum(grads, *x, delta);
            }
            Rec::RecipGuard { x } => {
                let yv = &self.nodes[id].values;
                let delta: Vec<S> = g.iter().zip(yv).map(|(&gi, &y)| -gi * y * y).collect();
                self.accum(grads, *x, delta);
            }
            Rec::Relu(a) => {
                let xv = &self.nodes[a.0].values;
                let delta: Vec<S> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &x)| if x > S::zero() { gi } else { S::zero() })
                    .collect();
                self.accum(grads, *a, delta);
            }
            Rec::Dense { x, w, b } => {
                let (n, f_in) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let f_out = self.nodes[w.0].shape[0];
                if self.nodes[x.0].requires_grad {
                    // dX = dY [N,Out] * W [Out,In]
                    let dx = matmul(g, &self.nodes[w.0].values, n, f_out, f_in);
                    self.accum(grads, *x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    // dW = dY^T [Out,N] * X [N,In]
                    let g_t = transpose(g, n, f_out);
                    let dw = matmul(&g_t, &self.nodes[x.0].values, f_out, n, f_in);
                    self.accum(grads, *w, dw);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![S::zero(); f_out];
                    for row in g.chunks(f_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Rec::Conv2d { x, w, b, stride, pad } => {
                let xs = &self.nodes[x.0].shape;
                let ws = &self.nodes[w.0].shape;
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let os = &self.nodes[id].shape;
                let (oh, ow) = (os[2], os[3]);
                let k = c * kh * kw;
                let patch = oh * ow;
                let x_vals = &self.nodes[x.0].values;
                let w_vals = &self.nodes[w.0].values;
                if self.nodes[x.0].requires_grad {
                    let w_t = transpose(w_vals, o, k); // [K, O]
                    let mut dx = vec![S::zero(); x_vals.len()];
                    dx.par_chunks_mut(c * h * wd).enumerate().for_each(|(img, dx_img)| {
                        let dy_img = &g[img * o * patch..(img + 1) * o * patch];
                        let dcols = matmul(&w_t, dy_img, k, o, patch);
                        col2im_acc(&dcols, dx_img, c, h, wd, kh, kw, *stride, *pad, oh, ow);
                    });
                    self.accum(grads, *x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    let partials: Vec<Vec<S>> = (0..n)
                        .into_par_iter()
                        .map(|img| {
                            let cols = im2col(
                                &x_vals[img * c * h * wd..(img + 1) * c * h * wd],
                                c, h, wd, kh, kw, *stride, *pad, oh, ow,
                            );
                            let cols_t = transpose(&cols, k, patch); // [P, K]
                            let dy_img = &g[img * o * patch..(img + 1) * o * patch];
                            matmul(dy_img, &cols_t, o, patch, k)
                        })
                        .collect();
                    let mut dw = vec![S::zero(); o * k];
                    for part in &partials {
                        for (d, &p) in dw.iter_mut().zip(part) {
                            *d += p;
                        }
                    }
                    self.accum(grads, *w, dw);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![S::zero(); o];
                    for img in 0..n {
                        for ch in 0..o {
                            let base = (img * o + ch) * patch;
                            for &v in &g[base..base + patch] {
                                db[ch] += v;
                            }
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Rec::BatchNorm { x, gamma, beta, mean, var, eps, train } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let m = n * plane;
                let x_vals = &self.nodes[x.0].values;
                let g_vals = &self.nodes[gamma.0].values;

                // Per-channel reductions of dY and dY * x_hat.
                let mut sum_dy = vec![S::zero(); c];
                let mut sum_dy_xhat = vec![S::zero(); c];
                for img in 0..n {
                    for ch in 0..c {
                        let invstd = S::one() / (var[ch] + *eps).sqrt();
                        let base = (img * c + ch) * plane;
                        for idx in base..base + plane {
                            let xhat = (x_vals[idx] - mean[ch]) * invstd;
                            sum_dy[ch] += g[idx];
                            sum_dy_xhat[ch] += g[idx] * xhat;
                        }
                    }
                }
                if self.nodes[gamma.0].requires_grad {
                    self.accum(grads, *gamma, sum_dy_xhat.clone());
                }
                if self.nodes[beta.0].requires_grad {
                    self.accum(grads, *beta, sum_dy.clone());
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![S::zero(); x_vals.len()];
                    let m_s = S::from_f64(m as f64);
                    for img in 0..n {
                        for ch in 0..c {
                            let invstd = S::one() / (var[ch] + *eps).sqrt();
                            let gm = g_vals[ch];
                            let base = (img * c + ch) * plane;
                            if *train {
                                // d/dx of batch-stat normalization.
                                for idx in base..base + plane {
                                    let xhat = (x_vals[idx] - mean[ch]) * invstd;
                                    dx[idx] = gm * invstd / m_s
                                        * (m_s * g[idx] - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
                                }
                            } else {
                                // Running stats are constants: plain affine.
                                for idx in base..base + plane {
                                    dx[idx] = g[idx] * gm * invstd;
                                }
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Rec::MaxPool2 { x, arg } => {
                let mut dx = vec![S::zero(); self.nodes[x.0].values.len()];
                for (out_idx, &src) in arg.iter().enumerate() {
                    dx[src as usize] += g[out_idx];
                }
                self.accum(grads, *x, dx);
            }
            Rec::GlobalAvgPool(x) => {
                let xs = &self.nodes[x.0].shape;
                let plane = xs[2] * xs[3];
                let scale = S::one() / S::from_f64(plane as f64);
                let mut dx = vec![S::zero(); self.nodes[x.0].values.len()];
                for (i, &gi) in g.iter().enumerate() {
                    for v in &mut dx[i * plane..(i + 1) * plane] {
                        *v = gi * scale;
                    }
                }
                self.accum(grads, *x, dx);
            }
            Rec::Flatten(x) => {
                self.accum(grads, *x, g.to_vec());
            }
            Rec::ChannelAffine { x, scale } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let mut dx = vec![S::zero(); self.nodes[x.0].values.len()];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * plane;
                        let s = scale[ch];
                        for idx in base..base + plane {
                            dx[idx] = g[idx] * s;
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Rec::CrossEntropy { logits, labels, probs } => {
                let k = self.nodes[logits.0].shape[1];
                let n = labels.len();
                let scale = g[0] / S::from_f64(n as f64);
                let mut dl = vec![S::zero(); probs.len()];
                for i in 0..n {
                    for j in 0..k {
                        let indicator = if labels[i] == j { S::one() } else { S::zero() };
                        dl[i * k + j] = (probs[i * k + j] - indicator) * scale;
                    }
                }
                self.accum(grads, *logits, dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(shape: Vec<usize>, vals: &[f64]) -> Tensor<f32> {
        Tensor::from_f64_slice(shape, vals).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t32(vec![3], &[-1.0, 0.0, 2.5]));
        let y = tape.relu(x);
        assert_eq!(tape.values(y), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn residual_add_elementwise() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&t32(vec![2], &[1.0, 2.0]));
        let b = tape.leaf(&t32(vec![2], &[3.0, 4.0]));
        let y = tape.residual_add(a, b).unwrap();
        assert_eq!(tape.values(y), &[4.0, 6.0]);
    }

    #[test]
    fn dense_identity_pattern() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t32(vec![1, 2], &[1.0, 1.0]));
        let w = tape.leaf(&t32(vec![2, 2], &[2.0, 0.0, 0.0, 3.0]));
        let b = tape.leaf(&t32(vec![2], &[0.0, 0.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.values(y), &[2.0, 3.0]);
    }

    #[test]
    fn dense_rejects_feature_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t32(vec![1, 3], &[1.0, 1.0, 1.0]));
        let w = tape.leaf(&t32(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t32(vec![2], &[0.0, 0.0]));
        let err = tape.dense(x, w, b).unwrap_err();
        assert!(err.to_string().contains("dense"), "{err}");
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f32>::new();
        let vals: Vec<f64> = (0..9).map(|v| v as f64 * 0.5).collect();
        let x = tape.leaf(&Tensor::from_f64_slice(vec![1, 1, 3, 3], &vals).unwrap());
        let w = tape.leaf(&t32(vec![1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(&t32(vec![1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::full(vec![1, 2, 4, 4], 0.7f32));
        let w = tape.leaf(&Tensor::zeros(vec![3, 2, 3, 3]));
        let b = tape.leaf(&t32(vec![3], &[0.1, 0.2, 0.3]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let vals = tape.values(y);
        let plane = 16;
        for ch in 0..3 {
            for &v in &vals[ch * plane..(ch + 1) * plane] {
                assert!((v - [0.1f32, 0.2, 0.3][ch]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_bad_size() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 3, 8, 8]));
        let w = tape.leaf(&Tensor::zeros(vec![4, 2, 3, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![4]));
        assert!(tape.conv2d(x, w, b, 1, 1).is_err());
        let w2 = tape.leaf(&Tensor::zeros(vec![4, 3, 9, 9]));
        let b2 = tape.leaf(&Tensor::zeros(vec![4]));
        assert!(tape.conv2d(x, w2, b2, 1, 0).is_err());
    }

    #[test]
    fn softmax_ce_uniform_and_saturated() {
        let mut tape = Tape::<f32>::new();
        let l1 = tape.leaf(&t32(vec![1, 2], &[0.0, 0.0]));
        let c1 = tape.softmax_cross_entropy(l1, &[0]).unwrap();
        assert!((tape.scalar_value(c1).unwrap() - std::f32::consts::LN_2).abs() < 1e-6);

        let l2 = tape.leaf(&t32(vec![1, 2], &[1000.0, 0.0]));
        let c2 = tape.softmax_cross_entropy(l2, &[0]).unwrap();
        let v = tape.scalar_value(c2).unwrap();
        assert!(v.is_finite() && v.abs() < 1e-6, "saturated loss {v}");
    }

    #[test]
    fn softmax_ce_rejects_bad_label() {
        let mut tape = Tape::<f32>::new();
        let l = tape.leaf(&t32(vec![1, 2], &[0.0, 0.0]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[2]),
            Err(EngineError::Input(_))
        ));
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t32(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).with_grad(true));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x, &tape), vec![1.0; 6]);
    }

    #[test]
    fn backward_dot_is_bilinear() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&t32(vec![3], &[1.0, 2.0, 3.0]).with_grad(true));
        let b = tape.leaf(&t32(vec![3], &[4.0, 5.0, 6.0]).with_grad(true));
        let prod = tape.mul(a, b).unwrap();
        let dot = tape.sum(prod);
        let grads = tape.backward(dot).unwrap();
        assert_eq!(grads.wrt(a, &tape), vec![4.0, 5.0, 6.0]);
        assert_eq!(grads.wrt(b, &tape), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t32(vec![2], &[1.0, 2.0]).with_grad(true));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(EngineError::Usage(_))));
    }

    #[test]
    fn unrelated_nodes_get_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t32(vec![2], &[1.0, 2.0]).with_grad(true));
        let unused = tape.leaf(&t32(vec![2], &[5.0, 5.0]).with_grad(true));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(unused, &tape), vec![0.0, 0.0]);
    }

    #[test]
    fn eval_batchnorm_identity_when_unit_stats() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t32(vec![1, 2, 1, 2], &[0.3, -0.7, 1.5, 0.0]));
        let gamma = tape.leaf(&t32(vec![2], &[1.0, 1.0]));
        let beta = tape.leaf(&t32(vec![2], &[0.0, 0.0]));
        let (y, stats) = tape
            .batch_norm2d(x, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], false, 1e-12)
            .unwrap();
        assert!(stats.is_none());
        for (a, b) in tape.values(y).iter().zip(tape.values(x)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_batchnorm_zero_gamma_is_constant_beta() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t32(vec![2, 1, 2, 2], &[0.1, 0.9, -0.4, 0.2, 0.5, 0.5, 0.5, 0.5]));
        let gamma = tape.leaf(&t32(vec![1], &[0.0]));
        let beta = tape.leaf(&t32(vec![1], &[0.25]));
        let (y, _) = tape
            .batch_norm2d(x, gamma, beta, &[0.3], &[2.0], false, 1e-5)
            .unwrap();
        for &v in tape.values(y) {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn batchnorm_rejects_bad_eps() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 1, 2, 2]));
        let gamma = tape.leaf(&Tensor::full(vec![1], 1.0f32));
        let beta = tape.leaf(&Tensor::zeros(vec![1]));
        assert!(matches!(
            tape.batch_norm2d(x, gamma, beta, &[0.0], &[1.0], false, 0.0),
            Err(EngineError::Config(_))
        ));
    }

    #[test]
    fn maxpool_picks_first_max_and_routes_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t32(vec![1, 1, 2, 2], &[1.0, 3.0, 3.0, 2.0]).with_grad(true));
        let y = tape.max_pool2x2(x).unwrap();
        assert_eq!(tape.values(y), &[3.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        // First max in scan order is index 1.
        assert_eq!(grads.wrt(x, &tape), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn flatten_preserves_order_and_count() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t32(vec![2, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let y = tape.flatten(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 4]);
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn forward_backward_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let vals: Vec<f64> = (0..2 * 3 * 6 * 6).map(|i| ((i * 37 % 17) as f64 - 8.0) / 9.0).collect();
            let x = tape.leaf(&Tensor::from_f64_slice(vec![2, 3, 6, 6], &vals).unwrap().with_grad(true));
            let wv: Vec<f64> = (0..4 * 3 * 3 * 3).map(|i| ((i * 29 % 23) as f64 - 11.0) / 25.0).collect();
            let w = tape.leaf(&Tensor::from_f64_slice(vec![4, 3, 3, 3], &wv).unwrap().with_grad(true));
            let b = tape.leaf(&Tensor::zeros(vec![4]).with_grad(true));
            let c = tape.conv2d(x, w, b, 1, 1).unwrap();
            let r = tape.relu(c);
            let p = tape.avg_pool_global(r).unwrap();
            let f = tape.flatten(p).unwrap();
            let loss = tape.softmax_cross_entropy(f, &[1, 3]).unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.scalar_value(loss).unwrap().to_bits(), grads.wrt(x, &tape).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}

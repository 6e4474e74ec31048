//! Architecture builders: parameter allocation in canonical order plus
//! the flat execution program.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::engine::{Parameter, Tape, Tensor};
use crate::scalar::Scalar;

use super::{
    ArchId, Buffer, LayerEndpoint, LayerOp, Mode, ModelError, ModelHandle, ModelSpec, ProjShortcut,
    INPUT_CHANNELS, INPUT_SIDE,
};

fn scaled(base: usize, mult: f32) -> usize {
    ((base as f32 * mult).round() as usize).max(1)
}

struct Builder<S> {
    params: Vec<Parameter<S>>,
    buffers: Vec<Buffer<S>>,
    program: Vec<LayerOp>,
    endpoint_names: Vec<String>,
    rng: ChaCha12Rng,
}

impl<S: Scalar> Builder<S> {
    fn new(seed: u64) -> Self {
        Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            program: Vec::new(),
            endpoint_names: Vec::new(),
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    fn uniform_tensor(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let n: usize = shape.iter().product();
        let values: Vec<S> = (0..n).map(|_| S::from_f64(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape, values).expect("builder shape")
    }

    fn add_param(&mut self, name: String, tensor: Tensor<S>) -> usize {
        self.params.push(Parameter::new(name, tensor));
        self.params.len() - 1
    }

    fn add_buffer(&mut self, name: String, tensor: Tensor<S>) -> usize {
        self.buffers.push(Buffer { name, tensor });
        self.buffers.len() - 1
    }

    fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) {
        let fan_in = in_ch * k * k;
        let w = self.uniform_tensor(vec![out_ch, in_ch, k, k], fan_in);
        let idx = self.add_param(format!("{name}.weight"), w);
        self.program.push(LayerOp::Conv { w: idx, stride, pad });
    }

    /// Allocates bn params/buffers; running_var always directly follows
    /// running_mean (apply_bn_updates relies on that).
    fn bn_indices(&mut self, name: &str, ch: usize) -> (usize, usize, usize, usize) {
        let gamma = self.add_param(format!("{name}.gamma"), Tensor::full(vec![ch], S::one()));
        let beta = self.add_param(format!("{name}.beta"), Tensor::zeros(vec![ch]));
        let mean_buf = self.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![ch]));
        let var_buf = self.add_buffer(format!("{name}.running_var"), Tensor::full(vec![ch], S::one()));
        (gamma, beta, mean_buf, var_buf)
    }

    fn bn(&mut self, name: &str, ch: usize) {
        let (gamma, beta, mean_buf, var_buf) = self.bn_indices(name, ch);
        self.program.push(LayerOp::Bn { gamma, beta, mean_buf, var_buf });
    }

    fn dense(&mut self, name: &str, f_in: usize, f_out: usize) {
        let w = self.uniform_tensor(vec![f_out, f_in], f_in);
        let b = self.uniform_tensor(vec![f_out], f_in);
        let w_idx = self.add_param(format!("{name}.weight"), w);
        let b_idx = self.add_param(format!("{name}.bias"), b);
        self.program.push(LayerOp::Dense { w: w_idx, b: b_idx });
    }

    fn relu(&mut self) {
        self.program.push(LayerOp::Relu);
    }

    fn endpoint(&mut self, name: &str) {
        self.program.push(LayerOp::Endpoint { index: self.endpoint_names.len() });
        self.endpoint_names.push(name.to_string());
    }

    /// conv-bn-relu-conv-bn + shortcut, post-activation residual block.
    fn basic_block(&mut self, name: &str, in_ch: usize, out_ch: usize, stride: usize) {
        self.program.push(LayerOp::PushSkip);
        self.conv(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1);
        self.bn(&format!("{name}.bn1"), out_ch);
        self.relu();
        self.conv(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1);
        self.bn(&format!("{name}.bn2"), out_ch);
        let proj = if stride != 1 || in_ch != out_ch {
            let w = self.uniform_tensor(vec![out_ch, in_ch, 1, 1], in_ch);
            let w_idx = self.add_param(format!("{name}.shortcut.conv.weight"), w);
            let (gamma, beta, mean_buf, var_buf) = self.bn_indices(&format!("{name}.shortcut.bn"), out_ch);
            Some(ProjShortcut { w: w_idx, gamma, beta, mean_buf, var_buf, stride })
        } else {
            None
        };
        self.program.push(LayerOp::ApplySkip { proj });
        self.relu();
    }
}

fn mini_cnn<S: Scalar>(b: &mut Builder<S>, spec: &ModelSpec) {
    let w = |base| scaled(base, spec.width_multiplier);
    let (c1, c2, c3) = (w(12), w(24), w(48));
    b.program.push(LayerOp::Normalize);
    b.conv("conv1", INPUT_CHANNELS, c1, 3, 1, 1);
    b.bn("bn1", c1);
    b.relu();
    b.endpoint("block1");
    b.program.push(LayerOp::MaxPool);
    b.conv("conv2", c1, c2, 3, 1, 1);
    b.bn("bn2", c2);
    b.relu();
    b.endpoint("block2");
    b.program.push(LayerOp::MaxPool);
    b.conv("conv3", c2, c3, 3, 1, 1);
    b.bn("bn3", c3);
    b.relu();
    b.endpoint("block3");
    b.program.push(LayerOp::MaxPool);
    b.program.push(LayerOp::AvgPoolGlobal);
    b.dense("linear", c3, spec.num_classes);
    b.endpoint("linear");
}

fn mini_vgg<S: Scalar>(b: &mut Builder<S>, spec: &ModelSpec) {
    let w = |base| scaled(base, spec.width_multiplier);
    let (c1, c2, c3, fc) = (w(12), w(24), w(48), w(96));
    b.program.push(LayerOp::Normalize);
    let mut in_ch = INPUT_CHANNELS;
    for (stage, ch) in [(1usize, c1), (2, c2), (3, c3)] {
        for conv in 1..=2usize {
            b.conv(&format!("stage{stage}.conv{conv}"), in_ch, ch, 3, 1, 1);
            b.bn(&format!("stage{stage}.bn{conv}"), ch);
            b.relu();
            in_ch = ch;
        }
        b.endpoint(&format!("stage{stage}"));
        b.program.push(LayerOp::MaxPool);
    }
    // 32 -> 16 -> 8 -> 4 spatial after the three pools.
    let side = INPUT_SIDE / 8;
    b.program.push(LayerOp::Flatten);
    b.dense("fc", c3 * side * side, fc);
    b.relu();
    b.endpoint("fc");
    b.dense("linear", fc, spec.num_classes);
    b.endpoint("linear");
}

fn mini_resnet<S: Scalar>(b: &mut Builder<S>, spec: &ModelSpec, extra_fc: usize, extra_relu: bool) {
    let w = |base| scaled(base, spec.width_multiplier);
    let stem = w(8);
    let stages = [w(8), w(16), w(32), w(64)];
    b.program.push(LayerOp::Normalize);
    b.conv("conv1", INPUT_CHANNELS, stem, 3, 1, 1);
    b.endpoint("conv");
    b.bn("bn1", stem);
    b.endpoint("bn");
    b.relu();
    let mut in_ch = stem;
    for (i, &ch) in stages.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        b.basic_block(&format!("layer{}", i + 1), in_ch, ch, stride);
        b.endpoint(&format!("layer{}", i + 1));
        in_ch = ch;
    }
    b.program.push(LayerOp::AvgPoolGlobal);
    for i in 1..=extra_fc {
        b.dense(&format!("fc_extra{i}"), in_ch, in_ch);
        if extra_relu {
            b.relu();
        }
        b.endpoint(&format!("fc_extra{i}"));
    }
    b.dense("linear", in_ch, spec.num_classes);
    b.endpoint("linear");
}

pub(super) fn build<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelHandle<S>, ModelError> {
    if spec.num_classes < 2 {
        return Err(ModelError::UnknownArch(format!(
            "{} with num_classes {} (need >= 2)",
            spec.arch.as_str(),
            spec.num_classes
        )));
    }
    let mut b = Builder::new(seed);
    match spec.arch {
        ArchId::MiniCnn => mini_cnn(&mut b, spec),
        ArchId::MiniVgg => mini_vgg(&mut b, spec),
        ArchId::MiniResnet => mini_resnet(&mut b, spec, 0, false),
        ArchId::MiniResnetVar1 => mini_resnet(&mut b, spec, 3, false),
        ArchId::MiniResnetVar2 => mini_resnet(&mut b, spec, 3, true),
    }

    let norm = &spec.normalization;
    b.add_buffer(
        "normalize.mean".into(),
        Tensor::from_f64_slice(vec![3], &norm.mean.map(|v| v as f64)).expect("norm mean"),
    );
    b.add_buffer(
        "normalize.std".into(),
        Tensor::from_f64_slice(vec![3], &norm.std.map(|v| v as f64)).expect("norm std"),
    );

    let mut handle = ModelHandle {
        spec: spec.clone(),
        params: b.params,
        buffers: b.buffers,
        program: b.program,
        endpoints: Vec::new(),
        frozen: false,
    };

    // Shape inference: one dry run on a single zero image records the raw
    // per-image shape of every endpoint.
    let mut tape = Tape::new();
    let zero = tape.leaf(&Tensor::zeros(vec![1, INPUT_CHANNELS, INPUT_SIDE, INPUT_SIDE]));
    let pass = handle.forward_on_tape(&mut tape, zero, Mode::Eval, false, None)?;
    handle.endpoints = pass
        .endpoints
        .iter()
        .enumerate()
        .map(|(index, &node)| LayerEndpoint {
            index,
            name: b.endpoint_names[index].clone(),
            shape: tape.shape(node)[1..].to_vec(),
        })
        .collect();
    Ok(handle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;

    #[test]
    fn resnet_endpoint_layout_matches_convention() {
        let spec = ModelSpec::new(ArchId::MiniResnet);
        let m = build_model::<f32>(&spec, 7).unwrap();
        let names: Vec<&str> = m.endpoints().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["conv", "bn", "layer1", "layer2", "layer3", "layer4", "linear"]);
        assert_eq!(m.endpoint_count(), 7);
    }

    #[test]
    fn var2_appends_three_fc_endpoints() {
        let spec = ModelSpec::new(ArchId::MiniResnetVar2);
        let m = build_model::<f32>(&spec, 7).unwrap();
        let names: Vec<&str> = m.endpoints().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(
            names,
            ["conv", "bn", "layer1", "layer2", "layer3", "layer4", "fc_extra1", "fc_extra2", "fc_extra3", "linear"]
        );
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::new(ArchId::MiniVgg);
        let a = build_model::<f32>(&spec, 42).unwrap();
        let b = build_model::<f32>(&spec, 42).unwrap();
        assert_eq!(a.params().len(), b.params().len());
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.values(), pb.tensor.values());
        }
        let c = build_model::<f32>(&spec, 43).unwrap();
        assert_ne!(a.params()[0].tensor.values(), c.params()[0].tensor.values());
    }

    #[test]
    fn parameter_names_unique_and_budget_respected() {
        for &arch in ArchId::all() {
            let spec = ModelSpec::new(arch);
            let m = build_model::<f32>(&spec, 1).unwrap();
            let mut names: Vec<&str> = m.params().iter().map(|p| p.name.as_str()).collect();
            names.extend(m.buffers().iter().map(|b| b.name.as_str()));
            let total = names.len();
            names.sort_unstable();
            names.dedup();
            assert_eq!(names.len(), total, "duplicate names in {arch:?}");
            assert!(m.num_parameters() <= 500_000, "{arch:?} too large");
        }
    }
}

//! Neural network building blocks on top of the [`crate::tensor`] engine:
//! layers, parameter initialization, SGD with momentum, and exponential
//! moving-average updates for momentum (target) networks.

use crate::tensor::{batch_norm_eval, batch_norm_train, conv2d, ArrF, Gradients, Tape, Tensor, Var};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("missing state entry `{0}`")]
    MissingState(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
}

/// Anything with parameters and a forward pass.
pub trait Module {
    fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Tensor;
    /// Trainable parameters, in a stable order.
    fn params(&self) -> Vec<Var>;
    /// Non-trainable state (e.g. batch-norm running statistics).
    fn buffers(&self) -> Vec<Var> {
        Vec::new()
    }
}

/// Parameters plus buffers as `(name, value)` pairs.
pub fn state_dict(module: &dyn Module) -> Vec<(String, ArrF)> {
    module
        .params()
        .into_iter()
        .chain(module.buffers())
        .map(|v| (v.name().to_string(), v.clone_value()))
        .collect()
}

pub fn load_state_dict(module: &dyn Module, state: &HashMap<String, ArrF>) -> Result<(), ModelError> {
    for var in module.params().into_iter().chain(module.buffers()) {
        let entry = state
            .get(var.name())
            .ok_or_else(|| ModelError::MissingState(var.name().to_string()))?;
        if entry.shape() != var.shape().as_slice() {
            return Err(ModelError::ShapeMismatch {
                name: var.name().to_string(),
                expected: var.shape(),
                got: entry.shape().to_vec(),
            });
        }
        var.set_value(entry.clone());
    }
    Ok(())
}

/// SHA-256 over the module's state, for frozen-parameter assertions and
/// checkpoint manifests.
pub fn state_hash(module: &dyn Module) -> String {
    let mut hasher = Sha256::new();
    for (name, value) in state_dict(module) {
        hasher.update(name.as_bytes());
        for v in value.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrF {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("init shape")
}

/// Fully connected layer; weight stored as `[in, out]` so the forward pass is
/// a plain `x · W`.
pub struct Linear {
    w: Var,
    b: Option<Var>,
}

impl Linear {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let w = Var::new(format!("{name}.weight"), kaiming_uniform(rng, &[in_dim, out_dim], in_dim));
        let b = bias
            .then(|| Var::new(format!("{name}.bias"), kaiming_uniform(rng, &[out_dim], in_dim)));
        Linear { w, b }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

impl Module for Linear {
    fn forward(&self, tape: &Tape, x: &Tensor, _training: bool) -> Tensor {
        let w = tape.var(&self.w);
        let y = x.matmul(&w);
        match &self.b {
            Some(b) => y.add_bias2d(&tape.var(b)),
            None => y,
        }
    }

    fn params(&self) -> Vec<Var> {
        let mut p = vec![self.w.clone()];
        if let Some(b) = &self.b {
            p.push(b.clone());
        }
        p
    }
}

pub struct Conv2d {
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = Var::new(
            format!("{name}.weight"),
            kaiming_uniform(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
        );
        let b = bias
            .then(|| Var::new(format!("{name}.bias"), kaiming_uniform(rng, &[out_ch], fan_in)));
        Conv2d { w, b, stride, pad }
    }
}

impl Module for Conv2d {
    fn forward(&self, tape: &Tape, x: &Tensor, _training: bool) -> Tensor {
        let w = tape.var(&self.w);
        let b = self.b.as_ref().map(|b| tape.var(b));
        conv2d(x, &w, b.as_ref(), self.stride, self.pad)
    }

    fn params(&self) -> Vec<Var> {
        let mut p = vec![self.w.clone()];
        if let Some(b) = &self.b {
            p.push(b.clone());
        }
        p
    }
}

/// Batch normalization over axis 1, for `[B, C]` and `[B, C, H, W]` inputs.
/// Running statistics follow the usual `(1 - momentum)·old + momentum·batch`
/// update with the unbiased batch variance.
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Var::new(format!("{name}.weight"), ArrF::from_elem(IxDyn(&[channels]), 1.0)),
            beta: Var::new(format!("{name}.bias"), ArrF::from_elem(IxDyn(&[channels]), 0.0)),
            running_mean: Var::new(
                format!("{name}.running_mean"),
                ArrF::from_elem(IxDyn(&[channels]), 0.0),
            ),
            running_var: Var::new(
                format!("{name}.running_var"),
                ArrF::from_elem(IxDyn(&[channels]), 1.0),
            ),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

impl Module for BatchNorm {
    fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Tensor {
        let gamma = tape.var(&self.gamma);
        let beta = tape.var(&self.beta);
        if training {
            let (y, stats) = batch_norm_train(x, &gamma, &beta, self.eps);
            let n: usize = x.shape().iter().product::<usize>() / x.shape()[1];
            let correction = n as f64 / (n as f64 - 1.0);
            self.running_mean.update(|rm| {
                let rm1 = rm.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
                *rm = ((1.0 - self.momentum) * &rm1 + self.momentum * &stats.mean).into_dyn();
            });
            self.running_var.update(|rv| {
                let rv1 = rv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
                *rv = ((1.0 - self.momentum) * &rv1 + self.momentum * correction * &stats.var)
                    .into_dyn();
            });
            y
        } else {
            let rm: Array1<f64> = self
                .running_mean
                .clone_value()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let rv: Array1<f64> = self
                .running_var
                .clone_value()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            batch_norm_eval(x, &gamma, &beta, &rm, &rv, self.eps)
        }
    }

    fn params(&self) -> Vec<Var> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    fn buffers(&self) -> Vec<Var> {
        vec![self.running_mean.clone(), self.running_var.clone()]
    }
}

pub struct Relu;

impl Module for Relu {
    fn forward(&self, _tape: &Tape, x: &Tensor, _training: bool) -> Tensor {
        x.relu()
    }

    fn params(&self) -> Vec<Var> {
        Vec::new()
    }
}

/// Chain of modules applied in order.
pub struct Sequential {
    layers: Vec<Box<dyn Module>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Module>>) -> Self {
        Sequential { layers }
    }
}

impl Module for Sequential {
    fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Tensor {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(tape, &cur, training);
        }
        cur
    }

    fn params(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn buffers(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }
}

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&format!("{name}.conv"), rng, in_ch, out_ch, 3, stride, 1, false),
            bn: BatchNorm::new(&format!("{name}.bn"), out_ch),
        }
    }
}

impl Module for ConvBnRelu {
    fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Tensor {
        self.bn.forward(tape, &self.conv.forward(tape, x, training), training).relu()
    }

    fn params(&self) -> Vec<Var> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }

    fn buffers(&self) -> Vec<Var> {
        self.bn.buffers()
    }
}

/// Small three-stage convolutional encoder for 32×32 inputs. Cheap enough to
/// train on a single CPU core while still collapsing (or not) the way the
/// larger reference backbones do.
pub struct TinyConvNet {
    blocks: Vec<ConvBnRelu>,
    feature_dim: usize,
}

impl TinyConvNet {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, width: usize) -> Self {
        let (c1, c2, c3) = (width, width * 2, width * 4);
        let blocks = vec![
            ConvBnRelu::new(&format!("{name}.block0"), rng, 3, c1, 1),
            ConvBnRelu::new(&format!("{name}.block1"), rng, c1, c2, 2),
            ConvBnRelu::new(&format!("{name}.block2"), rng, c2, c3, 2),
        ];
        TinyConvNet { blocks, feature_dim: c3 }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
}

impl Module for TinyConvNet {
    fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Tensor {
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.forward(tape, &cur, training);
        }
        cur.global_avg_pool()
    }

    fn params(&self) -> Vec<Var> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    fn buffers(&self) -> Vec<Var> {
        self.blocks.iter().flat_map(|b| b.buffers()).collect()
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(name: &str, rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(&format!("{name}.down.conv"), rng, in_ch, out_ch, 1, stride, 0, false),
                BatchNorm::new(&format!("{name}.down.bn"), out_ch),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), rng, in_ch, out_ch, 3, stride, 1, false),
            bn1: BatchNorm::new(&format!("{name}.bn1"), out_ch),
            conv2: Conv2d::new(&format!("{name}.conv2"), rng, out_ch, out_ch, 3, 1, 1, false),
            bn2: BatchNorm::new(&format!("{name}.bn2"), out_ch),
            downsample,
        }
    }
}

impl Module for BasicBlock {
    fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Tensor {
        let out = self
            .bn1
            .forward(tape, &self.conv1.forward(tape, x, training), training)
            .relu();
        let out = self.bn2.forward(tape, &self.conv2.forward(tape, &out, training), training);
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(tape, &conv.forward(tape, x, training), training),
            None => x.clone(),
        };
        out.add(&identity).relu()
    }

    fn params(&self) -> Vec<Var> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        if let Some((c, b)) = &self.downsample {
            p.extend(c.params());
            p.extend(b.params());
        }
        p
    }

    fn buffers(&self) -> Vec<Var> {
        let mut b = self.bn1.buffers();
        b.extend(self.bn2.buffers());
        if let Some((_, bn)) = &self.downsample {
            b.extend(bn.buffers());
        }
        b
    }
}

/// ResNet-18 adapted for 32×32 inputs: 3×3 stem, no max-pool, four stages of
/// two basic blocks, global average pool to a 512-dim feature.
pub struct ResNet18 {
    stem: ConvBnRelu,
    stages: Vec<BasicBlock>,
}

impl ResNet18 {
    pub fn new(name: &str, rng: &mut ChaCha8Rng) -> Self {
        let stem = ConvBnRelu::new(&format!("{name}.stem"), rng, 3, 64, 1);
        let plan = [(64, 64, 1), (64, 64, 1), (64, 128, 2), (128, 128, 1), (128, 256, 2), (256, 256, 1), (256, 512, 2), (512, 512, 1)];
        let stages = plan
            .iter()
            .enumerate()
            .map(|(i, &(ic, oc, s))| BasicBlock::new(&format!("{name}.layer{i}"), rng, ic, oc, s))
            .collect();
        ResNet18 { stem, stages }
    }

    pub fn feature_dim(&self) -> usize {
        512
    }
}

impl Module for ResNet18 {
    fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Tensor {
        let mut cur = self.stem.forward(tape, x, training);
        for block in &self.stages {
            cur = block.forward(tape, &cur, training);
        }
        cur.global_avg_pool()
    }

    fn params(&self) -> Vec<Var> {
        let mut p = self.stem.params();
        p.extend(self.stages.iter().flat_map(|b| b.params()));
        p
    }

    fn buffers(&self) -> Vec<Var> {
        let mut b = self.stem.buffers();
        b.extend(self.stages.iter().flat_map(|x| x.buffers()));
        b
    }
}

/// SGD with momentum and decoupled-from-nothing classic L2 weight decay:
/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: HashMap<u64, ArrF>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: HashMap::new() }
    }

    pub fn step(&mut self, params: &[Var], grads: &Gradients, lr: f64) {
        for p in params {
            let Some(g) = grads.get(p) else { continue };
            let mut step = g.clone();
            if self.weight_decay != 0.0 {
                step += &(&*p.value() * self.weight_decay);
            }
            let v = self
                .velocity
                .entry(p.id())
                .or_insert_with(|| ArrF::from_elem(g.raw_dim(), 0.0));
            *v *= self.momentum;
            *v += &step;
            let delta = &*v * lr;
            p.update(|value| *value -= &delta);
        }
    }

    /// Velocity state keyed by parameter name, for checkpointing.
    pub fn export_state(&self, params: &[Var]) -> Vec<(String, ArrF)> {
        params
            .iter()
            .filter_map(|p| {
                self.velocity
                    .get(&p.id())
                    .map(|v| (p.name().to_string(), v.clone()))
            })
            .collect()
    }

    pub fn import_state(&mut self, params: &[Var], state: &HashMap<String, ArrF>) {
        for p in params {
            if let Some(v) = state.get(p.name()) {
                self.velocity.insert(p.id(), v.clone());
            }
        }
    }
}

/// Exponential moving average update `ξ ← τ·ξ + (1 − τ)·θ` over matched
/// parameter lists.
pub fn ema_update(online: &[Var], target: &[Var], tau: f64) -> Result<(), ModelError> {
    if online.len() != target.len() {
        return Err(ModelError::ArchitectureMismatch(format!(
            "parameter count {} vs {}",
            online.len(),
            target.len()
        )));
    }
    for (theta, xi) in online.iter().zip(target) {
        if theta.shape() != xi.shape() {
            return Err(ModelError::ShapeMismatch {
                name: xi.name().to_string(),
                expected: theta.shape(),
                got: xi.shape(),
            });
        }
        let theta_v = theta.clone_value();
        xi.update(|v| {
            v.zip_mut_with(&theta_v, |x, &t| *x = tau * *x + (1.0 - tau) * t);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ema_endpoints() {
        let online = vec![Var::new("w", ArrF::from_elem(IxDyn(&[2]), 0.0))];
        let target = vec![Var::new("w", ArrF::from_elem(IxDyn(&[2]), 1.0))];
        ema_update(&online, &target, 1.0).unwrap();
        assert_eq!(target[0].clone_value()[[0]], 1.0);
        ema_update(&online, &target, 0.0).unwrap();
        assert_eq!(target[0].clone_value()[[0]], 0.0);
        let target = vec![Var::new("w", ArrF::from_elem(IxDyn(&[2]), 1.0))];
        ema_update(&online, &target, 0.99).unwrap();
        assert!((target[0].clone_value()[[0]] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn ema_rejects_mismatch() {
        let online = vec![Var::new("w", ArrF::from_elem(IxDyn(&[2]), 0.0))];
        let target = vec![
            Var::new("w", ArrF::from_elem(IxDyn(&[2]), 1.0)),
            Var::new("b", ArrF::from_elem(IxDyn(&[1]), 1.0)),
        ];
        assert!(ema_update(&online, &target, 0.5).is_err());
    }

    #[test]
    fn linear_forward_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Linear::new("fc", &mut rng, 4, 3, true);
        let tape = Tape::new();
        let x = tape.constant(ArrF::from_elem(IxDyn(&[2, 4]), 1.0));
        let y = layer.forward(&tape, &x, true);
        assert_eq!(y.shape(), &[2, 3]);
    }

    #[test]
    fn state_dict_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Sequential::new(vec![
            Box::new(Linear::new("l0", &mut rng, 4, 4, false)),
            Box::new(BatchNorm::new("bn0", 4)),
        ]);
        let b = Sequential::new(vec![
            Box::new(Linear::new("l0", &mut rng, 4, 4, false)),
            Box::new(BatchNorm::new("bn0", 4)),
        ]);
        let state: HashMap<String, ArrF> = state_dict(&a).into_iter().collect();
        load_state_dict(&b, &state).unwrap();
        assert_eq!(state_hash(&a), state_hash(&b));
    }
}

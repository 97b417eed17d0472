//! Encoders, MLP projectors and parameter snapshot/copy mechanics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use pocon_nn::{BatchNorm, Checkpoint, Conv2d, Layer, Linear, Mode, Network, Residual, Scalar, StateDict, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderArch {
    /// ResNet-9-class network for 32x32 inputs (3x3 stem, no initial pooling).
    SmallResnet,
    /// Four conv-BN-ReLU blocks; meant for fast CPU experiments.
    TinyConv,
    /// ResNet-18 with a CIFAR-style 3x3 stem.
    LargeResnet,
}

impl FromStr for EncoderArch {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_resnet" => Ok(Self::SmallResnet),
            "tiny_conv" => Ok(Self::TinyConv),
            "large_resnet" => Ok(Self::LargeResnet),
            other => Err(CoreError::InvalidArgument(format!("unsupported encoder architecture `{other}`"))),
        }
    }
}

impl fmt::Display for EncoderArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SmallResnet => "small_resnet",
            Self::TinyConv => "tiny_conv",
            Self::LargeResnet => "large_resnet",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub arch: EncoderArch,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    /// Base channel width.
    pub width: usize,
    /// Output dimension. The residual networks require `8 * width`.
    pub feature_dim: usize,
}

fn default_channels() -> usize {
    3
}

impl EncoderSpec {
    pub fn tiny_conv(width: usize, feature_dim: usize) -> Self {
        Self { arch: EncoderArch::TinyConv, in_channels: 3, width, feature_dim }
    }

    pub fn small_resnet(width: usize) -> Self {
        Self { arch: EncoderArch::SmallResnet, in_channels: 3, width, feature_dim: 8 * width }
    }

    pub fn large_resnet(width: usize) -> Self {
        Self { arch: EncoderArch::LargeResnet, in_channels: 3, width, feature_dim: 8 * width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.width == 0 || self.in_channels == 0 {
            return Err(CoreError::InvalidArgument(format!("encoder dims must be positive: {self:?}")));
        }
        if self.arch != EncoderArch::TinyConv && self.feature_dim != 8 * self.width {
            return Err(CoreError::InvalidArgument(format!(
                "{} needs feature_dim = 8 * width ({}), got {}",
                self.arch,
                8 * self.width,
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Trainable parameter count (builds the network once).
    pub fn param_count(&self) -> Result<usize> {
        Ok(build_encoder::<f32>(self, 0)?.net.param_count())
    }

    fn label(&self) -> String {
        format!("{}(c{},w{},f{})", self.arch, self.in_channels, self.width, self.feature_dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    SslZ,
    AdaptationN,
    RetrospectionM,
    Predictor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub kind: ProjectorKind,
    /// Input, hidden and output widths; `layer_dims.len() - 1` linear layers.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    /// Batch normalization after every hidden linear layer.
    pub batch_norm: bool,
}

impl ProjectorSpec {
    /// SSL head: three linear layers, hidden width `4 * feature_dim`.
    pub fn ssl(feature_dim: usize, embedding_dim: usize) -> Self {
        let h = 4 * feature_dim;
        Self {
            kind: ProjectorKind::SslZ,
            layer_dims: vec![feature_dim, h, h, embedding_dim],
            activation: Activation::Relu,
            batch_norm: true,
        }
    }

    /// Maps main features (`main_dim`) to expert features (`expert_dim`).
    pub fn adaptation(main_dim: usize, expert_dim: usize) -> Self {
        let h = 2 * main_dim;
        Self {
            kind: ProjectorKind::AdaptationN,
            layer_dims: vec![main_dim, h, h, h, expert_dim],
            activation: Activation::Relu,
            batch_norm: true,
        }
    }

    /// Maps current main features back to the previous main feature space.
    pub fn retrospection(main_dim: usize) -> Self {
        let h = 2 * main_dim;
        Self {
            kind: ProjectorKind::RetrospectionM,
            layer_dims: vec![main_dim, h, h, h, main_dim],
            activation: Activation::Relu,
            batch_norm: true,
        }
    }

    /// Two-layer predictor used by the regularized baselines.
    pub fn predictor(dim: usize) -> Self {
        Self {
            kind: ProjectorKind::Predictor,
            layer_dims: vec![dim, dim, dim],
            activation: Activation::Relu,
            batch_norm: true,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(CoreError::InvalidArgument(format!("bad projector dims {:?}", self.layer_dims)));
        }
        let linear = self.layer_dims.len() - 1;
        match self.kind {
            ProjectorKind::AdaptationN | ProjectorKind::RetrospectionM if linear != 4 => {
                Err(CoreError::InvalidArgument(format!("{:?} needs exactly 4 linear layers, got {linear}", self.kind)))
            }
            ProjectorKind::RetrospectionM if self.in_dim() != self.out_dim() => Err(CoreError::InvalidArgument(
                format!("retrospection projector must preserve dimension, got {} -> {}", self.in_dim(), self.out_dim()),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub spec: EncoderSpec,
    pub net: Network<T>,
}

#[derive(Clone, Debug)]
pub struct Projector<T> {
    pub spec: ProjectorSpec,
    pub net: Network<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    /// `[B, C, H, W]` to `[B, feature_dim]`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        Ok(self.net.forward(x, mode)?)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.net.infer_batched(x, 256)?)
    }

    pub fn fingerprint(&self) -> String {
        self.net.fingerprint()
    }

    pub fn state(&self) -> StateDict<T> {
        self.net.state_dict()
    }

    /// Frozen copy for use as a distillation target.
    pub fn frozen_copy(&self) -> Self {
        let mut c = self.clone();
        c.net.set_frozen(true);
        c.net.zero_grad();
        c
    }
}

impl<T: Scalar> Projector<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        Ok(self.net.forward(x, mode)?)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.net.infer(x)?)
    }

    /// Linear identity layers separated by ReLU; the identity map on
    /// nonnegative inputs.
    pub fn identity(kind: ProjectorKind, dim: usize, layers: usize) -> Self {
        let mut net_layers = Vec::new();
        for i in 0..layers {
            if i > 0 {
                net_layers.push(Layer::Relu);
            }
            net_layers.push(Layer::Linear(Linear::identity(dim)));
        }
        Self {
            spec: ProjectorSpec {
                kind,
                layer_dims: vec![dim; layers + 1],
                activation: Activation::Relu,
                batch_norm: false,
            },
            net: Network::new(format!("identity({dim}x{layers})"), net_layers),
        }
    }
}

fn conv_bn_relu<T: Scalar>(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Vec<Layer<T>> {
    vec![
        Layer::Conv2d(Conv2d::new(cin, cout, 3, stride, 1, false, rng)),
        Layer::BatchNorm(BatchNorm::new(cout)),
        Layer::Relu,
    ]
}

fn basic_block<T: Scalar>(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Vec<Layer<T>> {
    let body = vec![
        Layer::Conv2d(Conv2d::new(cin, cout, 3, stride, 1, false, rng)),
        Layer::BatchNorm(BatchNorm::new(cout)),
        Layer::Relu,
        Layer::Conv2d(Conv2d::new(cout, cout, 3, 1, 1, false, rng)),
        Layer::BatchNorm(BatchNorm::new(cout)),
    ];
    let shortcut = if stride != 1 || cin != cout {
        vec![
            Layer::Conv2d(Conv2d::new(cin, cout, 1, stride, 0, false, rng)),
            Layer::BatchNorm(BatchNorm::new(cout)),
        ]
    } else {
        Vec::new()
    };
    vec![Layer::Residual(Residual { body, shortcut }), Layer::Relu]
}

/// Builds an encoder with Kaiming-uniform weights drawn from `seed`.
pub fn build_encoder<T: Scalar>(spec: &EncoderSpec, seed: u64) -> Result<Encoder<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, w) = (spec.in_channels, spec.width);
    let mut layers = vec![Layer::ChannelsLast];
    match spec.arch {
        EncoderArch::TinyConv => {
            layers.extend(conv_bn_relu(c, w, 1, &mut rng));
            layers.extend(conv_bn_relu(w, 2 * w, 2, &mut rng));
            layers.extend(conv_bn_relu(2 * w, 4 * w, 2, &mut rng));
            layers.extend(conv_bn_relu(4 * w, spec.feature_dim, 2, &mut rng));
        }
        EncoderArch::SmallResnet => {
            let residual = |ch: usize, rng: &mut ChaCha8Rng| {
                let mut body = conv_bn_relu(ch, ch, 1, rng);
                body.extend(conv_bn_relu(ch, ch, 1, rng));
                Layer::Residual(Residual { body, shortcut: Vec::new() })
            };
            layers.extend(conv_bn_relu(c, w, 1, &mut rng));
            layers.extend(conv_bn_relu(w, 2 * w, 1, &mut rng));
            layers.push(Layer::MaxPool2d(2));
            layers.push(residual(2 * w, &mut rng));
            layers.extend(conv_bn_relu(2 * w, 4 * w, 1, &mut rng));
            layers.push(Layer::MaxPool2d(2));
            layers.extend(conv_bn_relu(4 * w, 8 * w, 1, &mut rng));
            layers.push(Layer::MaxPool2d(2));
            layers.push(residual(8 * w, &mut rng));
        }
        EncoderArch::LargeResnet => {
            layers.extend(conv_bn_relu(c, w, 1, &mut rng));
            let mut cin = w;
            for (stage, mult) in [1, 2, 4, 8].into_iter().enumerate() {
                let cout = w * mult;
                let stride = if stage == 0 { 1 } else { 2 };
                layers.extend(basic_block(cin, cout, stride, &mut rng));
                layers.extend(basic_block(cout, cout, 1, &mut rng));
                cin = cout;
            }
        }
    }
    layers.push(Layer::GlobalAvgPool);
    Ok(Encoder { spec: spec.clone(), net: Network::new(spec.label(), layers) })
}

/// Builds an MLP projector: linear layers with (optional) batch norm and ReLU
/// between them and a plain linear output layer.
pub fn build_projector<T: Scalar>(spec: &ProjectorSpec, seed: u64) -> Result<Projector<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = &spec.layer_dims;
    let mut layers = Vec::new();
    for i in 0..dims.len() - 1 {
        layers.push(Layer::Linear(Linear::new(dims[i], dims[i + 1], &mut rng)));
        if i + 2 < dims.len() {
            if spec.batch_norm {
                layers.push(Layer::BatchNorm(BatchNorm::new(dims[i + 1])));
            }
            layers.push(Layer::Relu);
        }
    }
    let label = format!("{:?}{:?}bn{}", spec.kind, spec.layer_dims, spec.batch_norm);
    Ok(Projector { spec: spec.clone(), net: Network::new(label, layers) })
}

/// Encoder plus SSL projection head.
#[derive(Clone, Debug)]
pub struct SslModel<T> {
    pub encoder: Encoder<T>,
    pub projector: Projector<T>,
}

impl<T: Scalar> SslModel<T> {
    pub fn new(spec: &EncoderSpec, embedding_dim: usize, seed: u64) -> Result<Self> {
        let encoder = build_encoder(spec, seed)?;
        let projector = build_projector(&ProjectorSpec::ssl(spec.feature_dim, embedding_dim), seed ^ 0x9e37_79b9)?;
        Ok(Self { encoder, projector })
    }

    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.projector.infer(&self.encoder.infer(x)?)
    }
}

/// Named networks that can be snapshotted and restored together.
pub trait Snapshottable<T: Scalar> {
    fn modules(&self) -> Vec<(&'static str, &Network<T>)>;
    fn modules_mut(&mut self) -> Vec<(&'static str, &mut Network<T>)>;
}

impl<T: Scalar> Snapshottable<T> for Encoder<T> {
    fn modules(&self) -> Vec<(&'static str, &Network<T>)> {
        vec![("encoder", &self.net)]
    }
    fn modules_mut(&mut self) -> Vec<(&'static str, &mut Network<T>)> {
        vec![("encoder", &mut self.net)]
    }
}

impl<T: Scalar> Snapshottable<T> for Projector<T> {
    fn modules(&self) -> Vec<(&'static str, &Network<T>)> {
        vec![("projector", &self.net)]
    }
    fn modules_mut(&mut self) -> Vec<(&'static str, &mut Network<T>)> {
        vec![("projector", &mut self.net)]
    }
}

impl<T: Scalar> Snapshottable<T> for SslModel<T> {
    fn modules(&self) -> Vec<(&'static str, &Network<T>)> {
        vec![("encoder", &self.encoder.net), ("projector", &self.projector.net)]
    }
    fn modules_mut(&mut self) -> Vec<(&'static str, &mut Network<T>)> {
        vec![("encoder", &mut self.encoder.net), ("projector", &mut self.projector.net)]
    }
}

/// Flat parameter (and running-statistic) vectors keyed by module path.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot<T> {
    pub modules: BTreeMap<String, StateDict<T>>,
    pub step: u64,
}

impl<T: Scalar> ParamSnapshot<T> {
    /// Combined fingerprint of all modules.
    pub fn fingerprint(&self) -> String {
        self.modules
            .iter()
            .map(|(k, v)| format!("{k}:{}", v.fingerprint))
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Tensors keyed as `module/path`.
    pub fn flat(&self) -> BTreeMap<String, &Tensor<T>> {
        self.modules
            .iter()
            .flat_map(|(m, sd)| sd.tensors.iter().map(move |(k, t)| (format!("{m}/{k}"), t)))
            .collect()
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint<T> {
        Checkpoint { config_hash: config_hash.to_string(), modules: self.modules.clone() }
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>, step: u64) -> Self {
        Self { modules: ck.modules.clone(), step }
    }
}

pub fn snapshot<T: Scalar, M: Snapshottable<T> + ?Sized>(model: &M, step: u64) -> ParamSnapshot<T> {
    ParamSnapshot {
        modules: model.modules().into_iter().map(|(name, net)| (name.to_string(), net.state_dict())).collect(),
        step,
    }
}

/// Restores every module of `model` from `snap`; fails without modifying
/// anything when a fingerprint differs.
pub fn restore<T: Scalar, M: Snapshottable<T> + ?Sized>(model: &mut M, snap: &ParamSnapshot<T>) -> Result<()> {
    for (name, net) in model.modules() {
        let sd = snap
            .modules
            .get(name)
            .ok_or_else(|| CoreError::InvalidArgument(format!("snapshot lacks module `{name}`")))?;
        if sd.fingerprint != net.fingerprint() {
            return Err(pocon_nn::NnError::Fingerprint { expected: net.fingerprint(), found: sd.fingerprint.clone() }.into());
        }
    }
    for (name, net) in model.modules_mut() {
        net.load_state_dict(&snap.modules[name])?;
    }
    Ok(())
}

/// Copies all weights of `src` into `dst` (CopyOP).
pub fn copy_params<T: Scalar>(src: &Encoder<T>, dst: &mut Encoder<T>) -> Result<()> {
    if src.fingerprint() != dst.fingerprint() {
        return Err(CoreError::Heterogeneous);
    }
    dst.net.load_state_dict(&src.state())?;
    Ok(())
}

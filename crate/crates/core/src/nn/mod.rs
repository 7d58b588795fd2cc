//! Block-structured networks: generator, discriminator, latent miner and the
//! fixed feature extractor used by desk-FID.
//!
//! A network is an ordered list of [`Block`]s, block 0 nearest the input.
//! Every parameter lives in exactly one block, so "the first k layers" of a
//! discriminator is simply blocks `0..k`. Discriminators end in a head block
//! (linear or projection); taps are the post-activation outputs of the body
//! blocks that precede it.

mod checkpoint;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeSet;

use crate::autodiff::{BindMode, Gradients, ParamGroup, ParamOwner, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const LEAK: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub image_size: usize,
    pub channels: usize,
    pub g_blocks: usize,
    pub d_blocks: usize,
    /// Channels after the generator's first block; halves per block.
    pub g_width: usize,
    /// Channels of the discriminator's first block; doubles per block up to 4×.
    pub d_width: usize,
    pub conditional: bool,
    pub n_classes: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            image_size: 16,
            channels: 3,
            g_blocks: 4,
            d_blocks: 4,
            g_width: 32,
            d_width: 16,
            conditional: false,
            n_classes: 1,
            embed_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.latent_dim == 0 || self.channels == 0 || self.g_width == 0 || self.d_width == 0 {
            return bad("model dimensions must be positive");
        }
        if self.g_blocks < 2 {
            return bad("generator needs at least 2 blocks");
        }
        if self.d_blocks == 0 {
            return bad("discriminator needs at least 1 block");
        }
        let up = 1usize << (self.g_blocks - 1);
        if self.image_size < up || !self.image_size.is_multiple_of(up) {
            return bad(&format!(
                "image size {} is not divisible by 2^{} for {} generator blocks",
                self.image_size,
                self.g_blocks - 1,
                self.g_blocks
            ));
        }
        if self.conditional && (self.n_classes == 0 || self.embed_dim == 0) {
            return bad("conditional model needs n_classes and embed_dim");
        }
        Ok(())
    }

    pub(crate) fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("latent_dim", self.latent_dim.to_string()),
            ("image_size", self.image_size.to_string()),
            ("channels", self.channels.to_string()),
            ("g_blocks", self.g_blocks.to_string()),
            ("d_blocks", self.d_blocks.to_string()),
            ("g_width", self.g_width.to_string()),
            ("d_width", self.d_width.to_string()),
            ("conditional", self.conditional.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
        ]
    }

    fn g_channels(&self, block: usize) -> usize {
        (self.g_width >> block).max(8)
    }

    fn d_channels(&self, block: usize) -> usize {
        (self.d_width << block.min(2)).max(1)
    }

    /// Spatial size after discriminator block `i` (stride 2 until 1×1).
    fn d_spatial(&self, block: usize) -> usize {
        let mut s = self.image_size;
        for _ in 0..=block {
            if s > 1 {
                s = s.div_ceil(2);
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Generator,
    Discriminator,
    Miner,
    FeatureExtractor,
}

impl NetKind {
    pub fn code(self) -> u32 {
        match self {
            NetKind::Generator => 0,
            NetKind::Discriminator => 1,
            NetKind::Miner => 2,
            NetKind::FeatureExtractor => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => NetKind::Generator,
            1 => NetKind::Discriminator,
            2 => NetKind::Miner,
            3 => NetKind::FeatureExtractor,
            _ => return Err(Error::Format(format!("unknown network kind code {code}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    Body,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    ClassEmbed { table: usize },
    Dense { weight: usize, bias: Option<usize> },
    Conv { weight: usize, bias: usize, stride: usize, pad: usize },
    Upsample,
    Reshape(Vec<usize>),
    Norm { scale: usize, shift: usize },
    LeakyRelu(f64),
    Relu,
    Tanh,
    GlobalAvgPool,
    /// `ψ·φ (+ b) (+ e_y·φ)` over the flattened input φ.
    Projection { weight: usize, bias: Option<usize>, embedding: Option<usize> },
}

#[derive(Debug, Clone)]
pub struct Block {
    pub index: usize,
    pub role: BlockRole,
    pub(crate) layers: Vec<Layer>,
    pub params: Vec<Parameter>,
}

impl Block {
    fn new(index: usize, role: BlockRole) -> Self {
        Self {
            index,
            role,
            layers: Vec::new(),
            params: Vec::new(),
        }
    }

    fn add_param(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> usize {
        let prefix = match self.role {
            BlockRole::Head => "head".to_string(),
            BlockRole::Body => format!("b{}", self.index),
        };
        self.params.push(Parameter::new(
            format!("{prefix}.{name}"),
            Tensor::zeros(shape),
            group,
        ));
        self.params.len() - 1
    }

    fn dense(&mut self, tag: &str, fan_in: usize, fan_out: usize, bias: bool) {
        let weight = self.add_param(&format!("{tag}.weight"), &[fan_in, fan_out], ParamGroup::Weight);
        let bias = bias.then(|| self.add_param(&format!("{tag}.bias"), &[fan_out], ParamGroup::Bias));
        self.layers.push(Layer::Dense { weight, bias });
    }

    fn conv(&mut self, c_in: usize, c_out: usize, stride: usize) {
        let weight = self.add_param("conv.weight", &[c_out, c_in, 3, 3], ParamGroup::Weight);
        let bias = self.add_param("conv.bias", &[c_out], ParamGroup::Bias);
        self.layers.push(Layer::Conv {
            weight,
            bias,
            stride,
            pad: 1,
        });
    }

    fn norm(&mut self, channels: usize) {
        let scale = self.add_param("norm.scale", &[channels], ParamGroup::NormScale);
        let shift = self.add_param("norm.shift", &[channels], ParamGroup::NormShift);
        self.layers.push(Layer::Norm { scale, shift });
    }
}

/// Result of a forward pass: the network output and one tap per body block.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Var,
    pub taps: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub kind: NetKind,
    pub config: ModelConfig,
    /// Miner hidden width or feature-extractor output dimension; 0 otherwise.
    pub extra: usize,
    pub blocks: Vec<Block>,
}

impl Network {
    pub fn generator(cfg: &ModelConfig, rng: &mut SplitMix64) -> Result<Self> {
        Self::build(NetKind::Generator, cfg, 0, rng)
    }

    pub fn discriminator(cfg: &ModelConfig, rng: &mut SplitMix64) -> Result<Self> {
        Self::build(NetKind::Discriminator, cfg, 0, rng)
    }

    /// Two-layer ReLU MLP `latent_dim -> hidden -> latent_dim`.
    pub fn miner(cfg: &ModelConfig, hidden: usize, rng: &mut SplitMix64) -> Result<Self> {
        Self::build(NetKind::Miner, cfg, hidden, rng)
    }

    /// Discriminator-shaped trunk ending in `feature_dim` channels, globally pooled.
    pub fn feature_extractor(cfg: &ModelConfig, feature_dim: usize, rng: &mut SplitMix64) -> Result<Self> {
        Self::build(NetKind::FeatureExtractor, cfg, feature_dim, rng)
    }

    pub fn build(kind: NetKind, cfg: &ModelConfig, extra: usize, rng: &mut SplitMix64) -> Result<Self> {
        let mut net = Self::skeleton(kind, cfg, extra)?;
        net.init(rng);
        Ok(net)
    }

    /// Architecture with all-zero parameters.
    pub(crate) fn skeleton(kind: NetKind, cfg: &ModelConfig, extra: usize) -> Result<Self> {
        cfg.validate()?;
        let blocks = match kind {
            NetKind::Generator => generator_blocks(cfg),
            NetKind::Discriminator => discriminator_blocks(cfg, None),
            NetKind::FeatureExtractor => {
                if extra == 0 {
                    return Err(Error::config("feature dimension must be positive"));
                }
                discriminator_blocks(cfg, Some(extra))
            }
            NetKind::Miner => {
                if extra == 0 {
                    return Err(Error::config("miner hidden width must be positive"));
                }
                let mut b0 = Block::new(0, BlockRole::Body);
                b0.dense("dense", cfg.latent_dim, extra, true);
                b0.layers.push(Layer::Relu);
                let mut b1 = Block::new(1, BlockRole::Body);
                b1.dense("dense", extra, cfg.latent_dim, true);
                vec![b0, b1]
            }
        };
        let net = Self {
            kind,
            config: cfg.clone(),
            extra,
            blocks,
        };
        debug_assert!(net.names_unique());
        Ok(net)
    }

    /// Scaled-normal init: weights ~ N(0, 1/fan_in), biases and shifts 0,
    /// norm scales 1, embeddings ~ N(0, 1/cols) (the generator's class
    /// embedding uses unit variance, like the latent it is appended to).
    fn init(&mut self, rng: &mut SplitMix64) {
        let kind = self.kind;
        for block in &mut self.blocks {
            for p in &mut block.params {
                let shape = p.value.shape().to_vec();
                let n = p.value.numel();
                let data: Vec<f64> = match p.group {
                    ParamGroup::Weight => {
                        let fan_in: usize = if shape.len() == 4 {
                            shape[1..].iter().product()
                        } else {
                            shape[0]
                        };
                        let std = 1.0 / (fan_in as f64).sqrt();
                        rng.normals(n).into_iter().map(|v| v * std).collect()
                    }
                    ParamGroup::Bias | ParamGroup::NormShift => vec![0.0; n],
                    ParamGroup::NormScale => vec![1.0; n],
                    ParamGroup::Embedding => {
                        let std = if kind == NetKind::Generator {
                            1.0
                        } else {
                            1.0 / (shape[shape.len() - 1] as f64).sqrt()
                        };
                        rng.normals(n).into_iter().map(|v| v * std).collect()
                    }
                };
                p.value = Tensor::new(shape, data).expect("init shape");
            }
        }
    }

    fn names_unique(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.params().all(|p| seen.insert(p.name.clone()))
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.blocks.iter().flat_map(|b| b.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.blocks.iter_mut().flat_map(|b| b.params.iter_mut())
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params().find(|p| p.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|p| p.value.numel()).sum()
    }

    pub fn num_body_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.role == BlockRole::Body).count()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Parameter::zero_grad);
    }

    /// Folds gradients of parameters bound under `owner` into `.grad`.
    pub fn accumulate(&mut self, grads: &Gradients, owner: ParamOwner) {
        for ((b, i), g) in grads.for_owner(owner) {
            self.blocks[b].params[i].accumulate(g);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params_mut().for_each(|p| p.trainable = trainable);
    }

    /// Marks every parameter in blocks `0..k` non-trainable; later blocks keep
    /// their flags.
    pub fn freeze_prefix(&mut self, k: usize) -> Result<()> {
        if k > self.blocks.len() {
            return Err(Error::config(format!(
                "freeze depth {k} exceeds block count {}",
                self.blocks.len()
            )));
        }
        for block in &mut self.blocks[..k] {
            block.params.iter_mut().for_each(|p| p.trainable = false);
        }
        Ok(())
    }

    /// Trainable exactly when the parameter's group is in `groups`.
    pub fn set_group_trainable(&mut self, groups: &[ParamGroup]) {
        for p in self.params_mut() {
            p.trainable = groups.contains(&p.group);
        }
    }

    /// String-tag variant of [`set_group_trainable`](Self::set_group_trainable).
    pub fn set_group_trainable_tags(&mut self, tags: &[&str]) -> Result<()> {
        let groups = tags
            .iter()
            .map(|t| t.parse::<ParamGroup>())
            .collect::<Result<Vec<_>>>()?;
        self.set_group_trainable(&groups);
        Ok(())
    }

    /// Copies parameter values from a same-architecture network.
    pub fn load_weights_from(&mut self, other: &Network) -> Result<()> {
        if self.kind != other.kind || self.config != other.config || self.extra != other.extra {
            return Err(Error::Alignment("networks have different architectures".into()));
        }
        for (dst, src) in self.params_mut().zip(other.params()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every non-trainable parameter.
    pub fn frozen_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params().filter(|p| !p.trainable) {
            for v in p.value.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn check_labels(&self, labels: Option<&[usize]>, batch: usize) -> Result<()> {
        match (self.config.conditional, labels) {
            (false, Some(_)) if matches!(self.kind, NetKind::Generator | NetKind::Discriminator) => Err(
                Error::usage("class labels given to an unconditional network"),
            ),
            (true, None) if matches!(self.kind, NetKind::Generator | NetKind::Discriminator) => {
                Err(Error::usage("conditional network needs class labels"))
            }
            (true, Some(y)) => {
                if y.len() != batch {
                    return Err(Error::usage(format!("{} labels for batch of {batch}", y.len())));
                }
                if let Some(bad) = y.iter().find(|&&c| c >= self.config.n_classes) {
                    return Err(Error::usage(format!(
                        "class {bad} out of range for {} classes",
                        self.config.n_classes
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Forward pass recording taps after every body block.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: Var,
        labels: Option<&[usize]>,
        owner: ParamOwner,
        mode: BindMode,
    ) -> Result<Forward> {
        let batch = tape.value(input).shape()[0];
        self.check_labels(labels, batch)?;
        let mut x = input;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let bi = block.index;
            let bind = |tape: &mut Tape, i: usize| tape.bind(&block.params[i], owner, (bi, i), mode);
            for layer in &block.layers {
                x = match layer {
                    Layer::ClassEmbed { table } => {
                        let t = bind(tape, *table);
                        let e = tape.gather_rows(t, labels.expect("checked"))?;
                        tape.concat_cols(x, e)?
                    }
                    Layer::Dense { weight, bias } => {
                        let w = bind(tape, *weight);
                        let y = tape.matmul(x, w)?;
                        match bias {
                            Some(b) => {
                                let b = bind(tape, *b);
                                tape.add_bias(y, b)?
                            }
                            None => y,
                        }
                    }
                    Layer::Conv {
                        weight,
                        bias,
                        stride,
                        pad,
                    } => {
                        let w = bind(tape, *weight);
                        let b = bind(tape, *bias);
                        let y = tape.conv2d(x, w, *stride, *pad)?;
                        tape.add_bias(y, b)?
                    }
                    Layer::Upsample => tape.upsample2x(x)?,
                    Layer::Reshape(per_sample) => {
                        let mut shape = vec![batch];
                        shape.extend_from_slice(per_sample);
                        tape.reshape(x, &shape)?
                    }
                    Layer::Norm { scale, shift } => {
                        let g = bind(tape, *scale);
                        let b = bind(tape, *shift);
                        tape.scale_shift_norm(x, g, b, NORM_EPS)?
                    }
                    Layer::LeakyRelu(a) => tape.leaky_relu(x, *a),
                    Layer::Relu => tape.relu(x),
                    Layer::Tanh => tape.tanh(x),
                    Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                    Layer::Projection {
                        weight,
                        bias,
                        embedding,
                    } => {
                        let phi = tape.flatten(x)?;
                        let w = bind(tape, *weight);
                        let mut logit = tape.matmul(phi, w)?;
                        if let Some(b) = bias {
                            let b = bind(tape, *b);
                            logit = tape.add_bias(logit, b)?;
                        }
                        if let Some(e) = embedding {
                            let table = bind(tape, *e);
                            let ey = tape.gather_rows(table, labels.expect("checked"))?;
                            let proj = tape.row_dot(ey, phi)?;
                            logit = tape.add(logit, proj)?;
                        }
                        logit
                    }
                };
            }
            if block.role == BlockRole::Body {
                taps.push(x);
            }
        }
        Ok(Forward { output: x, taps })
    }

    /// Output-only forward with all parameters treated as constants.
    pub fn infer(&self, input: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x, labels, ParamOwner::Other, BindMode::Frozen)?;
        Ok(tape.value(out.output).clone())
    }

    /// Per-sample input shape the network expects.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            NetKind::Generator | NetKind::Miner => vec![self.config.latent_dim],
            NetKind::Discriminator | NetKind::FeatureExtractor => vec![
                self.config.channels,
                self.config.image_size,
                self.config.image_size,
            ],
        }
    }
}

fn generator_blocks(cfg: &ModelConfig) -> Vec<Block> {
    let s0 = cfg.image_size >> (cfg.g_blocks - 1);
    let mut blocks = Vec::with_capacity(cfg.g_blocks);
    let mut b0 = Block::new(0, BlockRole::Body);
    let mut fan_in = cfg.latent_dim;
    if cfg.conditional {
        let table = b0.add_param("class_embed", &[cfg.n_classes, cfg.embed_dim], ParamGroup::Embedding);
        b0.layers.push(Layer::ClassEmbed { table });
        fan_in += cfg.embed_dim;
    }
    let w0 = cfg.g_channels(0);
    b0.dense("dense", fan_in, w0 * s0 * s0, true);
    b0.layers.push(Layer::Reshape(vec![w0, s0, s0]));
    b0.norm(w0);
    b0.layers.push(Layer::LeakyRelu(LEAK));
    blocks.push(b0);
    for i in 1..cfg.g_blocks {
        let mut b = Block::new(i, BlockRole::Body);
        b.layers.push(Layer::Upsample);
        let c_in = cfg.g_channels(i - 1);
        if i + 1 < cfg.g_blocks {
            let c_out = cfg.g_channels(i);
            b.conv(c_in, c_out, 1);
            b.norm(c_out);
            b.layers.push(Layer::LeakyRelu(LEAK));
        } else {
            b.conv(c_in, cfg.channels, 1);
            b.layers.push(Layer::Tanh);
        }
        blocks.push(b);
    }
    blocks
}

/// Discriminator trunk plus head, or (with `feature_dim`) the pooled
/// feature-extractor trunk.
fn discriminator_blocks(cfg: &ModelConfig, feature_dim: Option<usize>) -> Vec<Block> {
    let mut blocks = Vec::with_capacity(cfg.d_blocks + 1);
    let mut c_in = cfg.channels;
    let mut spatial = cfg.image_size;
    for i in 0..cfg.d_blocks {
        let last = i + 1 == cfg.d_blocks;
        let c_out = match feature_dim {
            Some(d) if last => d,
            _ => cfg.d_channels(i),
        };
        let stride = if spatial > 1 { 2 } else { 1 };
        let mut b = Block::new(i, BlockRole::Body);
        b.conv(c_in, c_out, stride);
        b.layers.push(Layer::LeakyRelu(LEAK));
        if last && feature_dim.is_some() {
            b.layers.push(Layer::GlobalAvgPool);
        }
        blocks.push(b);
        spatial = cfg.d_spatial(i);
        c_in = c_out;
    }
    if feature_dim.is_none() {
        let phi = c_in * spatial * spatial;
        let mut head = Block::new(cfg.d_blocks, BlockRole::Head);
        let weight = head.add_param("psi", &[phi, 1], ParamGroup::Weight);
        let (bias, embedding) = if cfg.conditional {
            let e = head.add_param("class_embed", &[cfg.n_classes, phi], ParamGroup::Embedding);
            (None, Some(e))
        } else {
            (Some(head.add_param("bias", &[1], ParamGroup::Bias)), None)
        };
        head.layers.push(Layer::Projection {
            weight,
            bias,
            embedding,
        });
        blocks.push(head);
    }
    blocks
}

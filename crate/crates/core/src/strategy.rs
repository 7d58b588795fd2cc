//! Transfer methods: which parameters train, which auxiliary networks exist,
//! and the extra loss terms each method contributes.

use std::fmt;

use crate::autodiff::{BindMode, ParamGroup, ParamOwner, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{NetKind, Network};
use crate::rng::{SplitMix64, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_FREEZE_DEPTH: usize = 4;
pub const DEFAULT_MINER_HIDDEN: usize = 64;
pub const DEFAULT_L2SP_LAMBDA: f64 = 1.0;
pub const DEFAULT_FD_LAYER: usize = 4;
pub const DEFAULT_FD_WEIGHT: f64 = 1.0;
pub const DEFAULT_PERCEPTUAL_WEIGHT: f64 = 1.0;
/// Discriminator tap (1-based block count) used by the GLO perceptual net.
pub const PERCEPTUAL_TAP: usize = 2;
const PERCEPTUAL_SEED_SALT: u64 = 0x9e1c_e97a_1d5e_ed01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Gan,
    Glo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L2spTarget {
    G,
    D,
    GD,
}

impl L2spTarget {
    pub fn covers(self, owner: ParamOwner) -> bool {
        matches!(
            (self, owner),
            (L2spTarget::G | L2spTarget::GD, ParamOwner::Generator)
                | (L2spTarget::D | L2spTarget::GD, ParamOwner::Discriminator)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransferStrategy {
    FullFineTune,
    FreezeD { k: usize },
    ScaleShift { loss_mode: LossMode },
    Glo { perceptual_weight: f64, latent_lr: f64 },
    MineGan { hidden: usize, loss_mode: LossMode },
    L2sp { apply_to: L2spTarget, lambda: f64 },
    FeatDistill { layer: usize, weight: f64 },
}

impl TransferStrategy {
    pub fn loss_mode(&self) -> LossMode {
        match self {
            TransferStrategy::Glo { .. } => LossMode::Glo,
            TransferStrategy::ScaleShift { loss_mode } | TransferStrategy::MineGan { loss_mode, .. } => {
                *loss_mode
            }
            _ => LossMode::Gan,
        }
    }

    /// Short label used in tables and file names.
    pub fn label(&self) -> String {
        let dagger = |m: &LossMode| if *m == LossMode::Glo { "_glo" } else { "" };
        match self {
            TransferStrategy::FullFineTune => "finetune".into(),
            TransferStrategy::FreezeD { k } => format!("freezed{k}"),
            TransferStrategy::ScaleShift { loss_mode } => format!("scaleshift{}", dagger(loss_mode)),
            TransferStrategy::Glo { .. } => "glo".into(),
            TransferStrategy::MineGan { loss_mode, .. } => format!("minegan{}", dagger(loss_mode)),
            TransferStrategy::L2sp { apply_to, .. } => format!("l2sp_{}", format!("{apply_to:?}").to_lowercase()),
            TransferStrategy::FeatDistill { layer, .. } => format!("fd{layer}"),
        }
    }

    /// Range checks against a discriminator with `d_blocks` body blocks
    /// (plus one head block).
    pub fn validate(&self, d_blocks: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            TransferStrategy::FreezeD { k } if *k > d_blocks + 1 => Err(Error::config(format!(
                "freeze depth {k} outside 0..={}",
                d_blocks + 1
            ))),
            TransferStrategy::Glo {
                perceptual_weight,
                latent_lr,
            } => {
                if *perceptual_weight < 0.0 || !perceptual_weight.is_finite() {
                    return Err(Error::config(format!(
                        "perceptual_weight must be non-negative, got {perceptual_weight}"
                    )));
                }
                positive("latent_lr", *latent_lr)
            }
            TransferStrategy::MineGan { hidden: 0, .. } => Err(Error::config("miner hidden width must be positive")),
            TransferStrategy::L2sp { lambda, .. } => positive("l2sp lambda", *lambda),
            TransferStrategy::FeatDistill { layer, weight } => {
                if *layer == 0 || *layer > d_blocks {
                    return Err(Error::config(format!("fd layer {layer} outside 1..={d_blocks}")));
                }
                positive("fd weight", *weight)
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TransferStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Everything a transfer run mutates, plus the immutable source snapshots.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub strategy: TransferStrategy,
    pub g: Network,
    pub d: Network,
    source_g: Network,
    source_d: Network,
    pub miner: Option<Network>,
    /// `[n_train, latent_dim]`, one code per training sample.
    pub latents: Option<Parameter>,
    /// Fixed random trunk for the GLO perceptual term.
    pub perceptual: Option<Network>,
    /// Learning rate for the latent table, when present.
    pub latent_lr: Option<f64>,
}

impl TrainState {
    pub fn source_g(&self) -> &Network {
        &self.source_g
    }

    pub fn source_d(&self) -> &Network {
        &self.source_d
    }

    pub fn loss_mode(&self) -> LossMode {
        self.strategy.loss_mode()
    }

    /// True when the discriminator takes part in training at all.
    pub fn trains_d(&self) -> bool {
        self.loss_mode() == LossMode::Gan && self.d.params().any(|p| p.trainable)
    }
}

fn check_pair(g: &Network, d: &Network) -> Result<()> {
    if g.kind != NetKind::Generator {
        return Err(Error::Alignment(format!("expected a generator checkpoint, got {:?}", g.kind)));
    }
    if d.kind != NetKind::Discriminator {
        return Err(Error::Alignment(format!(
            "expected a discriminator checkpoint, got {:?}",
            d.kind
        )));
    }
    if g.config != d.config {
        return Err(Error::Alignment(
            "generator and discriminator checkpoints have different model configs".into(),
        ));
    }
    Ok(())
}

/// Copies the source networks into fresh targets and sets trainable flags,
/// auxiliary networks and latent codes for `strategy`.
///
/// `n_train` is the training-set size (length of the latent table) and
/// `seed` drives miner, latent and perceptual-net initialisation.
pub fn prepare(
    strategy: TransferStrategy,
    source_g: &Network,
    source_d: &Network,
    n_train: usize,
    seed: u64,
) -> Result<TrainState> {
    check_pair(source_g, source_d)?;
    strategy.validate(source_d.num_body_blocks())?;
    let cfg = source_g.config.clone();
    let mut g = source_g.clone();
    let mut d = source_d.clone();
    g.set_all_trainable(true);
    d.set_all_trainable(true);
    let mut init = SplitMix64::stream(seed, Stream::ModelInit);
    let mut miner = None;
    let mut latents = None;
    let mut perceptual = None;
    let mut latent_lr = None;

    let mode = strategy.loss_mode();
    match &strategy {
        TransferStrategy::FullFineTune | TransferStrategy::L2sp { .. } | TransferStrategy::FeatDistill { .. } => {}
        TransferStrategy::FreezeD { k } => d.freeze_prefix(*k)?,
        TransferStrategy::ScaleShift { .. } => {
            g.set_group_trainable(&[ParamGroup::NormScale, ParamGroup::NormShift]);
        }
        TransferStrategy::Glo { latent_lr: lr, .. } => latent_lr = Some(*lr),
        TransferStrategy::MineGan { hidden, .. } => {
            g.set_all_trainable(false);
            miner = Some(Network::miner(&cfg, *hidden, &mut init)?);
        }
    }
    if mode == LossMode::Glo {
        d.set_all_trainable(false);
        if n_train == 0 {
            return Err(Error::usage("GLO-mode strategies need a non-empty training set"));
        }
        let mut zr = SplitMix64::stream(seed, Stream::Latents);
        let table = Tensor::new(vec![n_train, cfg.latent_dim], zr.normals(n_train * cfg.latent_dim))?;
        latents = Some(Parameter::new("latents", table, ParamGroup::Embedding));
        let mut pr = SplitMix64::new(seed ^ PERCEPTUAL_SEED_SALT);
        let mut net = Network::discriminator(&cfg, &mut pr)?;
        net.set_all_trainable(false);
        perceptual = Some(net);
    }
    Ok(TrainState {
        strategy,
        g,
        d,
        source_g: source_g.clone(),
        source_d: source_d.clone(),
        miner,
        latents,
        perceptual,
        latent_lr,
    })
}

/// Parameters the optimiser may touch, tagged by owner.
pub fn trainable_parameters(state: &TrainState) -> Vec<(ParamOwner, &Parameter)> {
    let mut out: Vec<(ParamOwner, &Parameter)> = Vec::new();
    let gan = state.loss_mode() == LossMode::Gan;
    out.extend(state.g.params().filter(|p| p.trainable).map(|p| (ParamOwner::Generator, p)));
    if gan {
        out.extend(state.d.params().filter(|p| p.trainable).map(|p| (ParamOwner::Discriminator, p)));
    }
    if let Some(m) = &state.miner {
        out.extend(m.params().filter(|p| p.trainable).map(|p| (ParamOwner::Miner, p)));
    }
    if let Some(z) = &state.latents {
        out.push((ParamOwner::Latents, z));
    }
    out
}

fn aligned<'a>(target: &'a Network, source: &'a Network) -> Result<Vec<(&'a Parameter, &'a Parameter)>> {
    let t: Vec<_> = target.params().collect();
    let s: Vec<_> = source.params().collect();
    if t.len() != s.len() {
        return Err(Error::Alignment(format!(
            "parameter counts differ: {} vs {}",
            t.len(),
            s.len()
        )));
    }
    t.into_iter()
        .zip(s)
        .map(|(a, b)| {
            if a.name != b.name {
                Err(Error::Alignment(format!("parameter {:?} vs {:?}", a.name, b.name)))
            } else if a.value.shape() != b.value.shape() {
                Err(Error::ShapeMismatch {
                    name: a.name.clone(),
                    expected: b.value.shape().to_vec(),
                    found: a.value.shape().to_vec(),
                })
            } else {
                Ok((a, b))
            }
        })
        .collect()
}

/// `λ·Σ (θ − θ0)²` over every parameter, aligned by name.
pub fn l2sp_penalty(target: &Network, source: &Network, lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for (t, s) in aligned(target, source)? {
        for (a, b) in t.value.data().iter().zip(s.value.data()) {
            total += (a - b) * (a - b);
        }
    }
    Ok(lambda * total)
}

/// Closed-form gradient `2λ(θ − θ0)` per parameter, in parameter order.
pub fn l2sp_gradient(target: &Network, source: &Network, lambda: f64) -> Result<Vec<Tensor>> {
    aligned(target, source)?
        .into_iter()
        .map(|(t, s)| {
            let data = t
                .value
                .data()
                .iter()
                .zip(s.value.data())
                .map(|(a, b)| 2.0 * lambda * (a - b))
                .collect();
            Tensor::new(t.value.shape().to_vec(), data)
        })
        .collect()
}

/// Adds the L2-SP gradient into `.grad` of trainable target parameters and
/// returns the penalty value.
pub fn apply_l2sp(target: &mut Network, source: &Network, lambda: f64) -> Result<f64> {
    let value = l2sp_penalty(target, source, lambda)?;
    let grads = l2sp_gradient(target, source, lambda)?;
    for (p, g) in target.params_mut().zip(&grads) {
        p.accumulate(g);
    }
    Ok(value)
}

/// `w · mean over batch of ‖a − b‖² / dim`, recorded on the tape. Either
/// tap may be a constant; gradients flow to whichever side is live.
pub fn fd_penalty(tape: &mut Tape, source_tap: Var, target_tap: Var, weight: f64) -> Result<Var> {
    let (sa, sb) = (tape.value(source_tap).shape(), tape.value(target_tap).shape());
    if sa != sb {
        return Err(Error::Alignment(format!("tap shapes differ: {sa:?} vs {sb:?}")));
    }
    let diff = tape.sub(target_tap, source_tap)?;
    let sq = tape.square(diff);
    let m = tape.mean(sq);
    Ok(tape.scale(m, weight))
}

/// Value-only form of [`fd_penalty`].
pub fn fd_penalty_value(source_tap: &Tensor, target_tap: &Tensor, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(source_tap.clone());
    let b = tape.constant(target_tap.clone());
    let v = fd_penalty(&mut tape, a, b, weight)?;
    Ok(tape.value(v).item())
}

/// `z' = W2·relu(W1·z + b1) + b2` for a batch `[n, latent_dim]`.
pub fn miner_forward(miner: &Network, z: &Tensor) -> Result<Tensor> {
    miner.infer(z, None)
}

/// Inputs to one GLO reconstruction step.
pub struct GloInputs<'a> {
    pub generator: &'a Network,
    pub g_mode: BindMode,
    pub miner: Option<(&'a Network, BindMode)>,
    /// Bound latent table `[N, latent_dim]`.
    pub latents: Var,
    pub indices: &'a [usize],
    pub real: &'a Tensor,
    pub labels: Option<&'a [usize]>,
    pub perceptual: &'a Network,
    pub perceptual_weight: f64,
}

/// `mean |G(z_i) − x_i| + pw · mean (f(G(z_i)) − f(x_i))²`, both means over
/// every element of the batch.
pub fn glo_loss(tape: &mut Tape, inp: GloInputs<'_>) -> Result<Var> {
    let n_table = tape.value(inp.latents).shape()[0];
    if let Some(&bad) = inp.indices.iter().find(|&&i| i >= n_table) {
        return Err(Error::usage(format!("latent index {bad} outside table of {n_table}")));
    }
    if inp.real.shape()[0] != inp.indices.len() {
        return Err(Error::usage(format!(
            "{} latent indices for {} real images",
            inp.indices.len(),
            inp.real.shape()[0]
        )));
    }
    let mut z = tape.gather_rows(inp.latents, inp.indices)?;
    if let Some((m, mode)) = inp.miner {
        z = m.forward(tape, z, None, ParamOwner::Miner, mode)?.output;
    }
    let fake = inp.generator.forward(tape, z, inp.labels, ParamOwner::Generator, inp.g_mode)?.output;
    let real = tape.constant(inp.real.clone());
    let diff = tape.sub(fake, real)?;
    let abs = tape.abs(diff);
    let l1 = tape.mean(abs);
    if inp.perceptual_weight == 0.0 {
        return Ok(l1);
    }
    let tap = PERCEPTUAL_TAP - 1;
    let ff = inp.perceptual.forward(tape, fake, None, ParamOwner::Other, BindMode::Frozen)?.taps[tap];
    let fr = inp.perceptual.forward(tape, real, None, ParamOwner::Other, BindMode::Frozen)?.taps[tap];
    let fd = tape.sub(ff, fr)?;
    let sq = tape.square(fd);
    let pm = tape.mean(sq);
    let p = tape.scale(pm, inp.perceptual_weight);
    tape.add(l1, p)
}

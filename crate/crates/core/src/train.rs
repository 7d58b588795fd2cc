//! Adversarial and GLO training loops with Adam and periodic desk-FID.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::{kernels, BindMode, ParamOwner, Parameter, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fid::{fit_gaussian, frechet, FeatureExtractor, GaussianStats};
use crate::nn::Network;
use crate::rng::{SplitMix64, Stream};
use crate::strategy::{apply_l2sp, fd_penalty, glo_loss, GloInputs, LossMode, TrainState, TransferStrategy,
    DEFAULT_PERCEPTUAL_WEIGHT};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanLoss {
    /// Non-saturating logistic loss.
    Logistic,
    Hinge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_every: usize,
    pub fid_samples: usize,
    pub seed: u64,
    pub loss: GanLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch: 16,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 100,
            fid_samples: 256,
            seed: 0,
            loss: GanLoss::Logistic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.fid_samples < 2 {
            return Err(Error::config("batch must be positive and fid_samples at least 2"));
        }
        if self.eval_every == 0 || self.iterations / self.eval_every < 2 {
            return Err(Error::config(format!(
                "eval_every={} gives fewer than 2 evaluations in {} iterations",
                self.eval_every, self.iterations
            )));
        }
        for (name, v) in [("lr", self.lr), ("adam_eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// `mean softplus(−r) + mean softplus(f)`.
pub fn d_loss(real: &[f64], fake: &[f64]) -> f64 {
    mean(real.iter().map(|&x| kernels::softplus(-x))) + mean(fake.iter().map(|&x| kernels::softplus(x)))
}

/// `mean softplus(−f)`.
pub fn g_loss(fake: &[f64]) -> f64 {
    mean(fake.iter().map(|&x| kernels::softplus(-x)))
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len() as f64;
    it.sum::<f64>() / n
}

fn d_loss_tape(tape: &mut Tape, real: Var, fake: Var, kind: GanLoss) -> Result<Var> {
    match kind {
        GanLoss::Logistic => {
            let nr = tape.scale(real, -1.0);
            let a = tape.softplus(nr);
            let a = tape.mean(a);
            let b = tape.softplus(fake);
            let b = tape.mean(b);
            tape.add(a, b)
        }
        GanLoss::Hinge => {
            let nr = tape.scale(real, -1.0);
            let nr = tape.offset(nr, 1.0);
            let a = tape.relu(nr);
            let a = tape.mean(a);
            let f = tape.offset(fake, 1.0);
            let b = tape.relu(f);
            let b = tape.mean(b);
            tape.add(a, b)
        }
    }
}

fn g_loss_tape(tape: &mut Tape, fake: Var, kind: GanLoss) -> Var {
    match kind {
        GanLoss::Logistic => {
            let nf = tape.scale(fake, -1.0);
            let s = tape.softplus(nf);
            tape.mean(s)
        }
        GanLoss::Hinge => {
            let m = tape.mean(fake);
            tape.scale(m, -1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moments keyed by parameter name; moments are allocated the
/// first time a trainable parameter is stepped.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_moments(&self) -> usize {
        self.moments.len()
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One bias-corrected step over the trainable members of `params`;
    /// clears every gradient afterwards.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>, hp: &AdamConfig) {
        self.t += 1;
        let c1 = 1.0 - hp.beta1.powi(self.t as i32);
        let c2 = 1.0 - hp.beta2.powi(self.t as i32);
        for p in params {
            if p.trainable {
                let n = p.value.numel();
                let (m, v) = self
                    .moments
                    .entry(p.name.clone())
                    .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                let grad = p.grad.data();
                for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
                    let g = grad[i];
                    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
                    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    *theta -= hp.lr * mh / (vh.sqrt() + hp.eps);
                }
            }
            p.zero_grad();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub fid: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

pub const CSV_HEADER: &str = "iter,d_loss,g_loss,fid";

impl History {
    pub fn best_fid(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.fid).reduce(f64::min)
    }

    pub fn final_fid(&self) -> Option<f64> {
        self.rows.last().map(|r| r.fid)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.iter, r.d_loss, r.g_loss, r.fid);
        }
        s
    }
}

/// Fixed extractor plus Gaussian statistics of the real reference set.
#[derive(Debug, Clone)]
pub struct FidContext {
    pub extractor: FeatureExtractor,
    pub real: GaussianStats,
}

impl FidContext {
    pub fn new(extractor: FeatureExtractor, real_images: &Tensor) -> Result<Self> {
        let real = fit_gaussian(&extractor.extract(real_images)?)?;
        Ok(Self { extractor, real })
    }

    pub fn score(&self, images: &Tensor) -> Result<f64> {
        let stats = fit_gaussian(&self.extractor.extract(images)?)?;
        frechet(&self.real, &stats)
    }
}

/// Maps standard-normal draws to the latent codes the generator (or miner)
/// consumes. GLO-mode states sample from a diagonal Gaussian fitted to the
/// latent table; everything else uses the draws as they are.
pub fn latent_codes(state: &TrainState, eps: &Tensor) -> Result<Tensor> {
    let z = match &state.latents {
        Some(table) => {
            let (n, d) = (table.value.shape()[0], table.value.shape()[1]);
            let mut mu = vec![0.0; d];
            let mut var = vec![0.0; d];
            for i in 0..n {
                for (m, v) in mu.iter_mut().zip(table.value.row(i)) {
                    *m += v;
                }
            }
            mu.iter_mut().for_each(|m| *m /= n as f64);
            for i in 0..n {
                for ((s, v), m) in var.iter_mut().zip(table.value.row(i)).zip(&mu) {
                    *s += (v - m) * (v - m);
                }
            }
            let sd: Vec<f64> = var.iter().map(|v| (v / n.max(2).saturating_sub(1) as f64).sqrt()).collect();
            let mut out = eps.clone();
            for (j, x) in out.data_mut().iter_mut().enumerate() {
                let c = j % d;
                *x = mu[c] + sd[c] * *x;
            }
            out
        }
        None => eps.clone(),
    };
    match &state.miner {
        Some(m) => m.infer(&z, None),
        None => Ok(z),
    }
}

/// Images from the current target generator for standard-normal `eps`.
pub fn generate(state: &TrainState, eps: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
    state.g.infer(&latent_codes(state, eps)?, labels)
}

fn check_finite(v: f64, iteration: usize, term: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            iteration,
            term: term.to_string(),
        })
    }
}

struct Optimizers {
    g: AdamState,
    d: AdamState,
    miner: AdamState,
    z: AdamState,
}

struct Fingerprints {
    g: u64,
    d: u64,
}

impl Fingerprints {
    fn of(state: &TrainState) -> Self {
        Self {
            g: state.g.frozen_fingerprint(),
            d: state.d.frozen_fingerprint(),
        }
    }
}

fn labels_for(net: &Network, labels: &[usize]) -> Option<Vec<usize>> {
    net.config.conditional.then(|| labels.to_vec())
}

/// Runs `cfg.iterations` steps of the state's strategy on `dataset`,
/// evaluating desk-FID every `cfg.eval_every` iterations.
pub fn train(state: &mut TrainState, dataset: &Dataset, cfg: &TrainConfig, fid: &FidContext) -> Result<History> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    if let Some(z) = &state.latents {
        if z.value.shape()[0] != dataset.len() {
            return Err(Error::usage(format!(
                "latent table has {} rows for {} training samples",
                z.value.shape()[0],
                dataset.len()
            )));
        }
    }
    let latent_dim = state.g.config.latent_dim;
    let n_classes = state.g.config.n_classes;
    let mut data_rng = SplitMix64::stream(cfg.seed, Stream::Data);
    let mut noise_rng = SplitMix64::stream(cfg.seed, Stream::TrainingNoise);
    let mut eval_rng = SplitMix64::stream(cfg.seed, Stream::Evaluation);
    let eval_eps = Tensor::new(vec![cfg.fid_samples, latent_dim], eval_rng.normals(cfg.fid_samples * latent_dim))?;
    let eval_labels: Vec<usize> = (0..cfg.fid_samples).map(|i| i % n_classes).collect();
    let eval_labels = labels_for(&state.g, &eval_labels);

    let frozen = Fingerprints::of(state);
    let mut opt = Optimizers {
        g: AdamState::new(),
        d: AdamState::new(),
        miner: AdamState::new(),
        z: AdamState::new(),
    };
    let latent_lr = state.latent_lr.unwrap_or(10.0 * cfg.lr);
    let mut history = History::default();
    let mode = state.loss_mode();
    let trains_d = state.trains_d();

    for it in 1..=cfg.iterations {
        let (dl, gl) = match mode {
            LossMode::Gan => {
                let dl = if trains_d {
                    d_step(state, dataset, cfg, &mut data_rng, &mut noise_rng, &mut opt, it)?
                } else {
                    0.0
                };
                let gl = g_step(state, dataset, cfg, &mut data_rng, &mut noise_rng, &mut opt, it)?;
                (dl, gl)
            }
            LossMode::Glo => (0.0, glo_step(state, dataset, cfg, latent_lr, &mut data_rng, &mut opt, it)?),
        };
        if it % cfg.eval_every == 0 {
            let now = Fingerprints::of(state);
            if now.g != frozen.g || now.d != frozen.d {
                return Err(Error::Invariant(format!(
                    "frozen parameters changed by iteration {it}"
                )));
            }
            let images = generate(state, &eval_eps, eval_labels.as_deref())?;
            let score = check_finite(fid.score(&images)?, it, "fid")?;
            history.rows.push(HistoryRow {
                iter: it,
                d_loss: dl,
                g_loss: gl,
                fid: score,
            });
        }
    }
    Ok(history)
}

fn sample_noise(rng: &mut SplitMix64, n: usize, dim: usize) -> Tensor {
    Tensor::new(vec![n, dim], rng.normals(n * dim)).expect("noise shape")
}

fn d_step(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    data_rng: &mut SplitMix64,
    noise_rng: &mut SplitMix64,
    opt: &mut Optimizers,
    it: usize,
) -> Result<f64> {
    let b = cfg.batch;
    let batch = dataset.sample_batch(b, data_rng)?;
    let eps = sample_noise(noise_rng, b, state.g.config.latent_dim);
    let labels = labels_for(&state.g, &batch.labels);
    let fake = generate(state, &eps, labels.as_deref())?;
    let both = Tensor::concat_rows(&[&batch.images, &fake])?;
    let both_labels = labels.as_ref().map(|l| [l.as_slice(), l.as_slice()].concat());

    let mut tape = Tape::new();
    let x = tape.constant(both);
    let out = state
        .d
        .forward(&mut tape, x, both_labels.as_deref(), ParamOwner::Discriminator, BindMode::Train)?;
    let real_idx: Vec<usize> = (0..b).collect();
    let fake_idx: Vec<usize> = (b..2 * b).collect();
    let lr_ = tape.gather_rows(out.output, &real_idx)?;
    let lf = tape.gather_rows(out.output, &fake_idx)?;
    let adv = d_loss_tape(&mut tape, lr_, lf, cfg.loss)?;
    let adv_value = check_finite(tape.value(adv).item(), it, "d_loss")?;
    let mut loss = adv;
    if let TransferStrategy::FeatDistill { layer, weight } = state.strategy {
        let src = state
            .source_d()
            .forward(&mut tape, x, both_labels.as_deref(), ParamOwner::Other, BindMode::Frozen)?;
        let fd = fd_penalty(&mut tape, src.taps[layer - 1], out.taps[layer - 1], weight)?;
        check_finite(tape.value(fd).item(), it, "fd_penalty")?;
        loss = tape.add(loss, fd)?;
    }
    let grads = tape.backward(loss)?;
    drop(tape);
    state.d.accumulate(&grads, ParamOwner::Discriminator);
    if let TransferStrategy::L2sp { apply_to, lambda } = state.strategy {
        if apply_to.covers(ParamOwner::Discriminator) {
            let src = state.source_d().clone();
            check_finite(apply_l2sp(&mut state.d, &src, lambda)?, it, "l2sp_d")?;
        }
    }
    opt.d.step(state.d.params_mut(), &cfg.adam(cfg.lr));
    Ok(adv_value)
}

fn g_step(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    data_rng: &mut SplitMix64,
    noise_rng: &mut SplitMix64,
    opt: &mut Optimizers,
    it: usize,
) -> Result<f64> {
    let b = cfg.batch;
    let eps = sample_noise(noise_rng, b, state.g.config.latent_dim);
    let labels = if state.g.config.conditional {
        Some(dataset.sample_batch(b, data_rng)?.labels)
    } else {
        None
    };
    let mut tape = Tape::new();
    let mut z = tape.constant(eps);
    if let Some(m) = &state.miner {
        z = m.forward(&mut tape, z, None, ParamOwner::Miner, BindMode::Train)?.output;
    }
    let fake = state
        .g
        .forward(&mut tape, z, labels.as_deref(), ParamOwner::Generator, BindMode::Train)?
        .output;
    let logits = state
        .d
        .forward(&mut tape, fake, labels.as_deref(), ParamOwner::Discriminator, BindMode::Frozen)?
        .output;
    let loss = g_loss_tape(&mut tape, logits, cfg.loss);
    let value = check_finite(tape.value(loss).item(), it, "g_loss")?;
    let grads = tape.backward(loss)?;
    drop(tape);
    state.g.accumulate(&grads, ParamOwner::Generator);
    if let TransferStrategy::L2sp { apply_to, lambda } = state.strategy {
        if apply_to.covers(ParamOwner::Generator) {
            let src = state.source_g().clone();
            check_finite(apply_l2sp(&mut state.g, &src, lambda)?, it, "l2sp_g")?;
        }
    }
    let hp = cfg.adam(cfg.lr);
    if state.g.params().any(|p| p.trainable) {
        opt.g.step(state.g.params_mut(), &hp);
    }
    if let Some(m) = &mut state.miner {
        m.accumulate(&grads, ParamOwner::Miner);
        opt.miner.step(m.params_mut(), &hp);
    }
    Ok(value)
}

fn glo_step(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    latent_lr: f64,
    data_rng: &mut SplitMix64,
    opt: &mut Optimizers,
    it: usize,
) -> Result<f64> {
    let batch = dataset.sample_batch(cfg.batch, data_rng)?;
    let labels = labels_for(&state.g, &batch.labels);
    let perceptual_weight = match state.strategy {
        TransferStrategy::Glo { perceptual_weight, .. } => perceptual_weight,
        _ => DEFAULT_PERCEPTUAL_WEIGHT,
    };
    let table = state.latents.as_ref().ok_or_else(|| Error::Invariant("GLO state without latent table".into()))?;
    let perceptual = state
        .perceptual
        .as_ref()
        .ok_or_else(|| Error::Invariant("GLO state without perceptual net".into()))?;
    let mut tape = Tape::new();
    let zv = tape.bind(table, ParamOwner::Latents, (0, 0), BindMode::Train);
    let loss = glo_loss(
        &mut tape,
        GloInputs {
            generator: &state.g,
            g_mode: BindMode::Train,
            miner: state.miner.as_ref().map(|m| (m, BindMode::Train)),
            latents: zv,
            indices: &batch.indices,
            real: &batch.images,
            labels: labels.as_deref(),
            perceptual,
            perceptual_weight,
        },
    )?;
    let value = check_finite(tape.value(loss).item(), it, "glo_loss")?;
    let grads = tape.backward(loss)?;
    drop(tape);
    let hp = cfg.adam(cfg.lr);
    state.g.accumulate(&grads, ParamOwner::Generator);
    if state.g.params().any(|p| p.trainable) {
        opt.g.step(state.g.params_mut(), &hp);
    }
    if let Some(m) = &mut state.miner {
        m.accumulate(&grads, ParamOwner::Miner);
        opt.miner.step(m.params_mut(), &hp);
    }
    let table = state.latents.as_mut().expect("checked above");
    for (_, g) in grads.for_owner(ParamOwner::Latents) {
        table.accumulate(g);
    }
    opt.z.step(std::iter::once(table), &cfg.adam(latent_lr));
    Ok(value)
}

//! Parameter-level contracts of the transfer strategies and the closed-form
//! regularizer oracles. Each check returns `Err(reason)` on violation.

use freezelab_core::autodiff::{BindMode, ParamGroup, ParamOwner, Tape};
use freezelab_core::data::Dataset;
use freezelab_core::fid::FeatureExtractor;
use freezelab_core::nn::Network;
use freezelab_core::rng::SplitMix64;
use freezelab_core::strategy::{
    fd_penalty, fd_penalty_value, l2sp_gradient, l2sp_penalty, prepare, LossMode, TransferStrategy,
};
use freezelab_core::train::{train, FidContext, TrainConfig};
use freezelab_core::Tensor;

pub type Check = Result<(), String>;

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Names of parameters whose values changed between `before` and `after`.
fn changed(before: &Network, after: &Network) -> Vec<String> {
    before
        .params()
        .zip(after.params())
        .filter(|(a, b)| !bits_equal(&a.value, &b.value))
        .map(|(a, _)| a.name.clone())
        .collect()
}

pub fn short_config(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        eval_every: iterations / 2,
        fid_samples: 32,
        seed,
        ..TrainConfig::default()
    }
}

pub struct Bench<'a> {
    pub g: &'a Network,
    pub d: &'a Network,
    pub data: &'a Dataset,
    pub fid: &'a FidContext,
    pub cfg: TrainConfig,
}

impl Bench<'_> {
    fn run(&self, s: TransferStrategy) -> Result<freezelab_core::strategy::TrainState, String> {
        let mut st = prepare(s.clone(), self.g, self.d, self.data.len(), self.cfg.seed).map_err(|e| e.to_string())?;
        train(&mut st, self.data, &self.cfg, self.fid).map_err(|e| format!("{s}: {e}"))?;
        Ok(st)
    }
}

pub fn fid_context(g: &Network, real: &Tensor) -> FidContext {
    FidContext::new(FeatureExtractor::new(&g.config, 8, 5).unwrap(), real).unwrap()
}

/// FreezeD{2}: D blocks 0–1 bit-identical to the source, every later block moved.
pub fn freezed_contract(b: &Bench) -> Check {
    let st = b.run(TransferStrategy::FreezeD { k: 2 })?;
    for (i, (src, tgt)) in b.d.blocks.iter().zip(&st.d.blocks).enumerate() {
        for (p, q) in src.params.iter().zip(&tgt.params) {
            let same = bits_equal(&p.value, &q.value);
            if i < 2 && !same {
                return Err(format!("frozen D parameter {} changed", p.name));
            }
            if i >= 2 && same {
                return Err(format!("trainable D parameter {} did not change", p.name));
            }
        }
    }
    Ok(())
}

/// Scale/shift: only γ/β of G move.
pub fn scaleshift_contract(b: &Bench) -> Check {
    let st = b.run(TransferStrategy::ScaleShift { loss_mode: LossMode::Gan })?;
    let moved = changed(b.g, &st.g);
    for p in b.g.params() {
        let norm = matches!(p.group, ParamGroup::NormScale | ParamGroup::NormShift);
        let did = moved.contains(&p.name);
        if did && !norm {
            return Err(format!("non-norm G parameter {} changed", p.name));
        }
        if norm && !did {
            return Err(format!("norm parameter {} did not change", p.name));
        }
    }
    Ok(())
}

/// MineGAN: every G parameter bit-identical, the miner trained.
pub fn minegan_contract(b: &Bench) -> Check {
    let fresh = prepare(
        TransferStrategy::MineGan { hidden: 16, loss_mode: LossMode::Gan },
        b.g,
        b.d,
        b.data.len(),
        b.cfg.seed,
    )
    .map_err(|e| e.to_string())?;
    let st = b.run(TransferStrategy::MineGan { hidden: 16, loss_mode: LossMode::Gan })?;
    if let Some(name) = changed(b.g, &st.g).first() {
        return Err(format!("G parameter {name} changed"));
    }
    let (m0, m1) = (fresh.miner.as_ref().unwrap(), st.miner.as_ref().unwrap());
    if changed(m0, m1).len() != m0.params().count() {
        return Err(format!("miner moved only {:?}", changed(m0, m1)));
    }
    Ok(())
}

/// GLO: D untouched, at least 99% of latent-table entries moved.
pub fn glo_contract(b: &Bench) -> Check {
    let strategy = TransferStrategy::Glo { perceptual_weight: 1.0, latent_lr: 10.0 * b.cfg.lr };
    let fresh = prepare(strategy.clone(), b.g, b.d, b.data.len(), b.cfg.seed).map_err(|e| e.to_string())?;
    let st = b.run(strategy)?;
    if let Some(name) = changed(b.d, &st.d).first() {
        return Err(format!("D parameter {name} changed"));
    }
    let (z0, z1) = (&fresh.latents.unwrap().value, &st.latents.unwrap().value);
    let moved = z0.data().iter().zip(z1.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    let frac = moved as f64 / z0.numel() as f64;
    if frac < 0.99 {
        return Err(format!("only {:.2}% of latent entries moved", 100.0 * frac));
    }
    Ok(())
}

/// Worst deviation of `l2sp_penalty` / `l2sp_gradient` from `λΣ(θ−θ0)²` and
/// `2λ(θ−θ0)`, computed here element by element.
pub fn l2sp_error(seed: u64, lambda: f64) -> f64 {
    let (g0, _) = super::fixtures::tiny_pair(seed);
    let mut g = g0.clone();
    let mut r = SplitMix64::new(seed ^ 0x77);
    for p in g.params_mut() {
        for v in p.value.data_mut() {
            *v += 0.1 * r.normal();
        }
    }
    let mut want = 0.0;
    let mut worst: f64 = 0.0;
    let grads = l2sp_gradient(&g, &g0, lambda).unwrap();
    for ((p, q), gr) in g.params().zip(g0.params()).zip(&grads) {
        for ((a, b), d) in p.value.data().iter().zip(q.value.data()).zip(gr.data()) {
            want += lambda * (a - b) * (a - b);
            worst = worst.max((d - 2.0 * lambda * (a - b)).abs());
        }
    }
    let got = l2sp_penalty(&g, &g0, lambda).unwrap();
    worst.max((got - want).abs() / want.max(1.0))
}

/// Penalty right after `prepare`, when target and source D still coincide.
pub fn fd_at_init(seed: u64, layer: usize) -> f64 {
    let (g, d) = super::fixtures::tiny_pair(seed);
    let st = prepare(TransferStrategy::FeatDistill { layer, weight: 1.0 }, &g, &d, 4, seed).unwrap();
    let x = super::fixtures::tiny_dataset(1, 4, 0.5, seed).images;
    let tap = |net: &Network| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = net
            .forward(&mut tape, xv, None, ParamOwner::Other, BindMode::Frozen)
            .unwrap();
        tape.value(out.taps[layer - 1]).clone()
    };
    fd_penalty_value(&tap(st.source_d()), &tap(&st.d), 1.0).unwrap()
}

/// `|fd − scalar oracle|` on random taps, both on the tape and value-only.
pub fn fd_error(seed: u64, weight: f64) -> f64 {
    let mut r = SplitMix64::new(seed);
    let shape = vec![3, 4, 2, 2];
    let n = 48;
    let src = Tensor::new(shape.clone(), r.normals(n)).unwrap();
    let tgt = Tensor::new(shape, r.normals(n)).unwrap();
    // Scalar oracle: per-sample ‖a − b‖² / dim, averaged over the batch.
    let per = n / 3;
    let mut oracle = 0.0;
    for s in 0..3 {
        let sq: f64 = (0..per)
            .map(|i| (tgt.data()[s * per + i] - src.data()[s * per + i]).powi(2))
            .sum();
        oracle += sq / per as f64;
    }
    oracle *= weight / 3.0;
    let mut tape = Tape::new();
    let a = tape.constant(src.clone());
    let b = tape.variable(tgt.clone());
    let v = fd_penalty(&mut tape, a, b, weight).unwrap();
    let on_tape = tape.value(v).item();
    (on_tape - oracle).abs().max((fd_penalty_value(&src, &tgt, weight).unwrap() - oracle).abs())
}

//! Flat `key = value` run configuration with documented defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::strategy::{L2spTarget, LossMode, TransferStrategy};
use crate::train::{GanLoss, TrainConfig};

pub const SEED_ENV: &str = "FREEZELAB_SEED";

/// `(key, default, description)` in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "training seed; FREEZELAB_SEED overrides"),
    ("data_seed", "1", "seed of the synthetic datasets"),
    ("out", "runs/default", "output directory"),
    ("source_dir", "runs/source", "directory holding source_G.frzd and source_D.frzd"),
    ("latent_dim", "32", "latent code length"),
    ("image_size", "16", "image side in pixels"),
    ("g_blocks", "4", "generator blocks"),
    ("d_blocks", "4", "discriminator body blocks (a head block is added)"),
    ("g_width", "32", "generator channels after the dense block"),
    ("d_width", "16", "discriminator channels of the first block"),
    ("conditional", "false", "class-conditional G and projection D"),
    ("embed_dim", "16", "generator class-embedding width"),
    ("iterations", "3000", "transfer iterations"),
    ("pretrain_iterations", "3000", "source pretraining iterations"),
    ("batch", "16", "batch size"),
    ("lr", "0.0002", "Adam learning rate"),
    ("pretrain_lr", "auto", "source pretraining learning rate; auto = lr"),
    ("adam_beta1", "0.5", "Adam beta1"),
    ("adam_beta2", "0.999", "Adam beta2"),
    ("adam_eps", "1e-8", "Adam epsilon"),
    ("eval_every", "100", "iterations between FID evaluations"),
    ("fid_samples", "256", "generated samples per FID evaluation"),
    ("loss", "logistic", "logistic | hinge"),
    ("source_classes", "5", "classes in the source dataset"),
    ("source_per_class", "1000", "source images per class"),
    ("source_shift", "0", "domain shift of the source dataset"),
    ("target_classes", "1", "classes in the target dataset"),
    ("target_per_class", "100", "target images per class"),
    ("target_shift", "0.5", "domain shift of the target dataset"),
    ("blob_min", "1", "fewest blobs per image"),
    ("blob_max", "3", "most blobs per image"),
    ("radius_min", "0.08", "smallest blob radius (fraction of side)"),
    ("radius_max", "0.2", "largest blob radius (fraction of side)"),
    ("color_jitter", "0.15", "per-blob colour jitter"),
    ("fid_dim", "32", "feature dimension of the FID extractor"),
    ("fid_seed", "99", "seed of the FID extractor"),
    ("fid_real_samples", "1000", "held-out reference images for FID; 0 uses the training set"),
    ("strategy", "finetune", "finetune | finetune_glo | freezed | scaleshift | scaleshift_glo | glo | minegan | minegan_glo | l2sp | fd"),
    ("freeze_depth", "4", "FreezeD: frozen discriminator blocks"),
    ("miner_hidden", "64", "MineGAN: miner hidden width"),
    ("l2sp_apply", "gd", "L2-SP: g | d | gd"),
    ("l2sp_lambda", "1", "L2-SP weight"),
    ("fd_layer", "4", "feature distillation: discriminator block whose output is matched"),
    ("fd_weight", "1", "feature distillation weight"),
    ("perceptual_weight", "1", "GLO perceptual term weight"),
    ("latent_lr", "auto", "GLO latent learning rate; auto = 10 x lr"),
    ("depths", "1,2,3,4", "ablation freeze depths"),
    ("grid_rows", "4", "sample grid rows"),
    ("grid_cols", "4", "sample grid columns"),
    ("grid_seed", "0", "latent seed of sample grids"),
];

pub const STRATEGY_NAMES: &[&str] = &[
    "finetune",
    "finetune_glo",
    "freezed",
    "scaleshift",
    "scaleshift_glo",
    "glo",
    "minegan",
    "minegan_glo",
    "l2sp",
    "fd",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(_, d, _)| d.to_string()).collect(),
        }
    }
}

fn slot(key: &str) -> Result<usize> {
    KEYS.iter()
        .position(|(k, _, _)| *k == key)
        .ok_or_else(|| Error::config(format!("unknown key {key:?}")))
}

impl RunConfig {
    /// Parses config text over the defaults. Lines are `key = value`; `#`
    /// starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var(SEED_ENV) {
            self.set("seed", seed.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let i = slot(key)?;
        self.values[i] = value.to_string();
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[slot(key).expect("known key")]
    }

    /// Typed value of `key`; parse failures are configuration errors.
    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::config(format!("{key} = {v:?} is not a valid value")))
    }

    /// Checks that every key parses and the derived configs are consistent.
    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        model.validate()?;
        self.train()?.validate()?;
        self.pretrain()?.validate()?;
        self.source_spec()?.validate()?;
        self.target_spec()?.validate()?;
        self.strategy()?.validate(model.d_blocks)?;
        for &k in &self.depths()? {
            TransferStrategy::FreezeD { k }.validate(model.d_blocks)?;
        }
        for key in ["source_per_class", "target_per_class", "fid_dim", "grid_rows", "grid_cols"] {
            if self.parse_key::<usize>(key)? == 0 {
                return Err(Error::config(format!("{key} must be positive")));
            }
        }
        for key in ["seed", "data_seed", "fid_seed", "grid_seed"] {
            self.parse_key::<u64>(key)?;
        }
        self.parse_key::<usize>("fid_real_samples")?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse_key("seed")
    }

    pub fn data_seed(&self) -> Result<u64> {
        self.parse_key("data_seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn source_dir(&self) -> PathBuf {
        PathBuf::from(self.get("source_dir"))
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let conditional: bool = self.parse_key("conditional")?;
        Ok(ModelConfig {
            latent_dim: self.parse_key("latent_dim")?,
            image_size: self.parse_key("image_size")?,
            channels: 3,
            g_blocks: self.parse_key("g_blocks")?,
            d_blocks: self.parse_key("d_blocks")?,
            g_width: self.parse_key("g_width")?,
            d_width: self.parse_key("d_width")?,
            conditional,
            n_classes: if conditional { self.parse_key("source_classes")? } else { 1 },
            embed_dim: self.parse_key("embed_dim")?,
        })
    }

    fn train_with(&self, iterations_key: &str, lr_key: &str) -> Result<TrainConfig> {
        let loss = match self.get("loss") {
            "logistic" => GanLoss::Logistic,
            "hinge" => GanLoss::Hinge,
            other => return Err(Error::config(format!("unknown loss {other:?}"))),
        };
        Ok(TrainConfig {
            iterations: self.parse_key(iterations_key)?,
            batch: self.parse_key("batch")?,
            lr: match self.get(lr_key) {
                "auto" => self.parse_key("lr")?,
                _ => self.parse_key(lr_key)?,
            },
            beta1: self.parse_key("adam_beta1")?,
            beta2: self.parse_key("adam_beta2")?,
            eps: self.parse_key("adam_eps")?,
            eval_every: self.parse_key("eval_every")?,
            fid_samples: self.parse_key("fid_samples")?,
            seed: self.seed()?,
            loss,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        self.train_with("iterations", "lr")
    }

    pub fn pretrain(&self) -> Result<TrainConfig> {
        self.train_with("pretrain_iterations", "pretrain_lr")
    }

    fn spec(&self, classes: &str, shift: &str) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            n_classes: self.parse_key(classes)?,
            blob_count: (self.parse_key("blob_min")?, self.parse_key("blob_max")?),
            radius: (self.parse_key("radius_min")?, self.parse_key("radius_max")?),
            color_jitter: self.parse_key("color_jitter")?,
            shift: self.parse_key(shift)?,
            image_size: self.parse_key("image_size")?,
            ..DatasetSpec::default()
        })
    }

    pub fn source_spec(&self) -> Result<DatasetSpec> {
        self.spec("source_classes", "source_shift")
    }

    pub fn target_spec(&self) -> Result<DatasetSpec> {
        self.spec("target_classes", "target_shift")
    }

    pub fn strategy(&self) -> Result<TransferStrategy> {
        self.strategy_named(self.get("strategy"))
    }

    pub fn strategy_named(&self, name: &str) -> Result<TransferStrategy> {
        let glo = || -> Result<TransferStrategy> {
            let lr: f64 = self.parse_key("lr")?;
            let latent_lr = match self.get("latent_lr") {
                "auto" => 10.0 * lr,
                _ => self.parse_key("latent_lr")?,
            };
            Ok(TransferStrategy::Glo {
                perceptual_weight: self.parse_key("perceptual_weight")?,
                latent_lr,
            })
        };
        let miner = |loss_mode| -> Result<TransferStrategy> {
            Ok(TransferStrategy::MineGan {
                hidden: self.parse_key("miner_hidden")?,
                loss_mode,
            })
        };
        Ok(match name {
            "finetune" => TransferStrategy::FullFineTune,
            "finetune_glo" | "glo" => glo()?,
            "freezed" => TransferStrategy::FreezeD {
                k: self.parse_key("freeze_depth")?,
            },
            "scaleshift" => TransferStrategy::ScaleShift {
                loss_mode: LossMode::Gan,
            },
            "scaleshift_glo" => TransferStrategy::ScaleShift {
                loss_mode: LossMode::Glo,
            },
            "minegan" => miner(LossMode::Gan)?,
            "minegan_glo" => miner(LossMode::Glo)?,
            "l2sp" => TransferStrategy::L2sp {
                apply_to: match self.get("l2sp_apply") {
                    "g" => L2spTarget::G,
                    "d" => L2spTarget::D,
                    "gd" => L2spTarget::GD,
                    other => return Err(Error::config(format!("l2sp_apply must be g, d or gd, got {other:?}"))),
                },
                lambda: self.parse_key("l2sp_lambda")?,
            },
            "fd" => TransferStrategy::FeatDistill {
                layer: self.parse_key("fd_layer")?,
                weight: self.parse_key("fd_weight")?,
            },
            other => {
                return Err(Error::config(format!(
                    "unknown strategy {other:?}; expected one of {}",
                    STRATEGY_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn depths(&self) -> Result<Vec<usize>> {
        parse_depths(self.get("depths"))
    }

    /// Effective configuration, one `key = value` line per key.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .zip(&self.values)
            .map(|((k, _, _), v)| format!("{k} = {v}\n"))
            .collect()
    }
}

pub fn parse_depths(s: &str) -> Result<Vec<usize>> {
    let depths: Vec<usize> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad depth {t:?} in {s:?}")))
        })
        .collect::<Result<_>>()?;
    if depths.is_empty() {
        return Err(Error::config("depth list is empty"));
    }
    Ok(depths)
}

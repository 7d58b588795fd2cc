//! Commands behind the `freezelab` binary. Every output is a pure function of
//! the effective config (which is echoed next to it).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{make_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::fid::{fid, FeatureExtractor};
use crate::nn::{ModelConfig, NetKind, Network};
use crate::rng::{SplitMix64, Stream};
use crate::strategy::{prepare, TransferStrategy};
use crate::train::{latent_codes, train, FidContext, History};
use crate::tensor::Tensor;

pub const SOURCE_G: &str = "source_G.frzd";
pub const SOURCE_D: &str = "source_D.frzd";
pub const GRID_SEPARATOR: usize = 2;
/// Salt separating the held-out FID reference set from training data.
const REFERENCE_SALT: u64 = 0x5eed_f1d0_0000_0001;

fn write(path: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path.as_ref(), bytes).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.as_ref().display()),
        ))
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

/// `[-1, 1] -> [0, 255]`, affine, rounding half away from zero.
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Binary PPM of `rows × cols` images `[n, 3, H, W]` separated by black
/// `GRID_SEPARATOR`-pixel gutters.
pub fn ppm_grid(images: &Tensor, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let s = images.shape();
    if images.rank() != 4 || s[1] != 3 || s[0] != rows * cols {
        return Err(Error::usage(format!(
            "grid of {rows}x{cols} needs [{}, 3, H, W] images, got {s:?}",
            rows * cols
        )));
    }
    let (h, w) = (s[2], s[3]);
    let width = cols * w + (cols - 1) * GRID_SEPARATOR;
    let height = rows * h + (rows - 1) * GRID_SEPARATOR;
    let mut pixels = vec![0u8; width * height * 3];
    for r in 0..rows {
        for c in 0..cols {
            let img = images.row(r * cols + c);
            for y in 0..h {
                for x in 0..w {
                    let py = r * (h + GRID_SEPARATOR) + y;
                    let px = c * (w + GRID_SEPARATOR) + x;
                    for ch in 0..3 {
                        pixels[(py * width + px) * 3 + ch] = to_byte(img[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// Standard-normal grid latents for `seed`.
pub fn grid_latents(seed: u64, n: usize, latent_dim: usize) -> Tensor {
    let mut rng = SplitMix64::stream(seed, Stream::Grid);
    Tensor::new(vec![n, latent_dim], rng.normals(n * latent_dim)).expect("latent shape")
}

fn grid_labels(model: &ModelConfig, n: usize) -> Option<Vec<usize>> {
    model.conditional.then(|| (0..n).map(|i| i % model.n_classes).collect())
}

/// Held-out images of `spec` for FID, or the training set when `n == 0`.
pub fn reference_images(spec: &DatasetSpec, train_set: &Dataset, n: usize, data_seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Ok(train_set.images.clone());
    }
    let per_class = n.div_ceil(spec.n_classes);
    let held_out = make_dataset(spec, per_class, data_seed ^ REFERENCE_SALT)?;
    let idx: Vec<usize> = (0..n).map(|i| (i % spec.n_classes) * per_class + i / spec.n_classes).collect();
    Ok(held_out.images.select_rows(&idx))
}

pub fn extractor(cfg: &RunConfig) -> Result<FeatureExtractor> {
    FeatureExtractor::new(&cfg.model()?, cfg.parse_key("fid_dim")?, cfg.parse_key("fid_seed")?)
}

fn fid_context(cfg: &RunConfig, spec: &DatasetSpec, train_set: &Dataset) -> Result<FidContext> {
    let n: usize = cfg.parse_key("fid_real_samples")?;
    let real = reference_images(spec, train_set, n, cfg.data_seed()?)?;
    FidContext::new(extractor(cfg)?, &real)
}

pub fn source_dataset(cfg: &RunConfig) -> Result<Dataset> {
    make_dataset(&cfg.source_spec()?, cfg.parse_key("source_per_class")?, cfg.data_seed()?)
}

/// Target images use a different data seed from the source so the two sets
/// never share renders.
pub fn target_dataset(cfg: &RunConfig) -> Result<Dataset> {
    make_dataset(
        &cfg.target_spec()?,
        cfg.parse_key("target_per_class")?,
        cfg.data_seed()?.wrapping_add(1),
    )
}

fn summary_text(label: &str, cfg: &RunConfig, h: &History) -> Result<String> {
    let tc = cfg.train()?;
    let mut s = String::new();
    let _ = writeln!(s, "strategy = {label}");
    let _ = writeln!(s, "best_fid = {}", h.best_fid().unwrap_or(f64::NAN));
    let _ = writeln!(s, "final_fid = {}", h.final_fid().unwrap_or(f64::NAN));
    let _ = writeln!(s, "iterations = {}", tc.iterations);
    let _ = writeln!(s, "eval_every = {}", tc.eval_every);
    let _ = writeln!(s, "seed = {}", tc.seed);
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub generator: Network,
    pub discriminator: Network,
    pub history: History,
}

/// Trains G and D from scratch on the source dataset and writes
/// `source_G.frzd`, `source_D.frzd`, `fid_log.csv` and `config.txt` to `out`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    let model = cfg.model()?;
    let tc = cfg.pretrain()?;
    let data = source_dataset(cfg)?;
    let ctx = fid_context(cfg, &cfg.source_spec()?, &data)?;
    let mut init = SplitMix64::stream(tc.seed, Stream::ModelInit);
    let g = Network::generator(&model, &mut init)?;
    let d = Network::discriminator(&model, &mut init)?;
    let mut state = prepare(TransferStrategy::FullFineTune, &g, &d, data.len(), tc.seed)?;
    let history = train(&mut state, &data, &tc, &ctx)?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    write(out.join("config.txt"), cfg.echo())?;
    write(out.join(SOURCE_G), state.g.to_bytes())?;
    write(out.join(SOURCE_D), state.d.to_bytes())?;
    write(out.join("fid_log.csv"), history.to_csv())?;
    Ok(PretrainOutput {
        generator: state.g,
        discriminator: state.d,
        history,
    })
}

pub fn load_sources(cfg: &RunConfig) -> Result<(Network, Network)> {
    let dir = cfg.source_dir();
    let g = Network::load_checkpoint(dir.join(SOURCE_G))?;
    let d = Network::load_checkpoint(dir.join(SOURCE_D))?;
    let model = cfg.model()?;
    for net in [&g, &d] {
        if net.config != model {
            return Err(Error::Alignment(format!(
                "{:?} checkpoint was built for {:?}, config asks for {:?}",
                net.kind, net.config, model
            )));
        }
    }
    if g.kind != NetKind::Generator || d.kind != NetKind::Discriminator {
        return Err(Error::Alignment("source checkpoints hold the wrong network kinds".into()));
    }
    Ok((g, d))
}

#[derive(Debug, Clone)]
pub struct TransferOutput {
    pub label: String,
    pub history: History,
    pub dir: PathBuf,
}

/// One transfer run from in-memory sources into `dir`.
pub fn run_transfer(
    cfg: &RunConfig,
    strategy: TransferStrategy,
    sources: &(Network, Network),
    dir: &Path,
) -> Result<TransferOutput> {
    let tc = cfg.train()?;
    let model = cfg.model()?;
    let spec = cfg.target_spec()?;
    let data = target_dataset(cfg)?;
    let ctx = fid_context(cfg, &spec, &data)?;
    let label = strategy.label();
    let mut state = prepare(strategy, &sources.0, &sources.1, data.len(), tc.seed)?;

    let rows: usize = cfg.parse_key("grid_rows")?;
    let cols: usize = cfg.parse_key("grid_cols")?;
    let grid_seed: u64 = cfg.parse_key("grid_seed")?;
    let eps = grid_latents(grid_seed, rows * cols, model.latent_dim);
    let labels = grid_labels(&model, rows * cols);
    let before = state.g.infer(&latent_codes(&state, &eps)?, labels.as_deref())?;

    let history = train(&mut state, &data, &tc, &ctx)?;
    let after = state.g.infer(&latent_codes(&state, &eps)?, labels.as_deref())?;

    create_dir(dir)?;
    write(dir.join("config.txt"), cfg.echo())?;
    write(dir.join("fid_log.csv"), history.to_csv())?;
    write(dir.join("summary.txt"), summary_text(&label, cfg, &history)?)?;
    write(dir.join("target_G.frzd"), state.g.to_bytes())?;
    write(dir.join("target_D.frzd"), state.d.to_bytes())?;
    if let Some(m) = &state.miner {
        write(dir.join("miner.frzd"), m.to_bytes())?;
    }
    write(dir.join("grid_before.ppm"), ppm_grid(&before, rows, cols)?)?;
    write(dir.join("grid_after.ppm"), ppm_grid(&after, rows, cols)?)?;
    write(
        dir.join("grid_latents.txt"),
        format!(
            "grid_seed = {grid_seed}\nrows = {rows}\ncols = {cols}\nlatent_dim = {}\nstream = grid\n",
            model.latent_dim
        ),
    )?;
    write(dir.join("target.frzs"), data.to_bytes())?;
    let mut eval = SplitMix64::stream(tc.seed, Stream::Evaluation);
    let sample_eps = Tensor::new(vec![tc.fid_samples, model.latent_dim], eval.normals(tc.fid_samples * model.latent_dim))?;
    let sample_labels = grid_labels(&model, tc.fid_samples);
    let samples = state.g.infer(&latent_codes(&state, &sample_eps)?, sample_labels.as_deref())?;
    let archive = Dataset {
        labels: sample_labels.unwrap_or_else(|| vec![0; tc.fid_samples]),
        images: samples,
        spec: spec.clone(),
        seed: tc.seed,
    };
    write(dir.join("samples.frzs"), archive.to_bytes())?;
    Ok(TransferOutput {
        label,
        history,
        dir: dir.to_path_buf(),
    })
}

/// `transfer` command: strategy from `strategy_name` or the config.
pub fn cmd_transfer(cfg: &RunConfig, strategy_name: Option<&str>) -> Result<TransferOutput> {
    cfg.validate()?;
    let strategy = match strategy_name {
        Some(n) => cfg.strategy_named(n)?,
        None => cfg.strategy()?,
    };
    strategy.validate(cfg.model()?.d_blocks)?;
    let sources = load_sources(cfg)?;
    run_transfer(cfg, strategy, &sources, &cfg.out_dir())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub best_fid: f64,
    pub final_fid: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn push(&mut self, label: impl Into<String>, h: &History) {
        self.rows.push(SummaryRow {
            label: label.into(),
            best_fid: h.best_fid().unwrap_or(f64::NAN),
            final_fid: h.final_fid().unwrap_or(f64::NAN),
        });
    }

    /// One column per run, `best / final` in a single row.
    pub fn to_table(&self) -> String {
        let mut s = String::from("|");
        for r in &self.rows {
            let _ = write!(s, " {} |", r.label);
        }
        s.push_str("\n|");
        for _ in &self.rows {
            s.push_str("---|");
        }
        s.push_str("\n|");
        for r in &self.rows {
            let _ = write!(s, " {:.4} / {:.4} |", r.best_fid, r.final_fid);
        }
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,best_fid,final_fid\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.label, r.best_fid, r.final_fid);
        }
        s
    }
}

/// Fine-tuning plus one FreezeD run per depth, same seed for all; writes
/// each run to `out/<label>/` and the table to `out/ablation.md` and
/// `out/ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, depths: Option<&[usize]>) -> Result<SummaryTable> {
    cfg.validate()?;
    let depths = match depths {
        Some(d) => d.to_vec(),
        None => cfg.depths()?,
    };
    let d_blocks = cfg.model()?.d_blocks;
    for &k in &depths {
        TransferStrategy::FreezeD { k }.validate(d_blocks)?;
    }
    let sources = load_sources(cfg)?;
    let out = cfg.out_dir();
    let mut table = SummaryTable::default();
    let ft = run_transfer(cfg, TransferStrategy::FullFineTune, &sources, &out.join("finetune"))?;
    table.push("Fine-tuning", &ft.history);
    for &k in &depths {
        let run = run_transfer(cfg, TransferStrategy::FreezeD { k }, &sources, &out.join(format!("layer{k}")))?;
        table.push(format!("Layer {k}"), &run.history);
    }
    write(out.join("config.txt"), cfg.echo())?;
    write(out.join("ablation.md"), table.to_table())?;
    write(out.join("ablation.csv"), table.to_csv())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidReport {
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub feature_dim: usize,
    pub extractor_seed: u64,
}

impl FidReport {
    pub fn render(&self) -> String {
        format!(
            "{:.4}\n# desk-fid n_a={} n_b={} feature_dim={} extractor_seed={}\n",
            self.value, self.n_a, self.n_b, self.feature_dim, self.extractor_seed
        )
    }
}

/// Desk-FID between two dataset archives.
pub fn cmd_fid(cfg: &RunConfig, a: &Path, b: &Path) -> Result<FidReport> {
    let da = Dataset::load(a)?;
    let db = Dataset::load(b)?;
    if da.image_size() != db.image_size() {
        return Err(Error::Format(format!(
            "archives hold {0}x{0} and {1}x{1} images",
            da.image_size(),
            db.image_size()
        )));
    }
    let model = ModelConfig {
        image_size: da.image_size(),
        conditional: false,
        n_classes: 1,
        ..cfg.model()?
    };
    let dim: usize = cfg.parse_key("fid_dim")?;
    let seed: u64 = cfg.parse_key("fid_seed")?;
    let fx = FeatureExtractor::new(&model, dim, seed)?;
    Ok(FidReport {
        value: fid(&da.images, &db.images, &fx)?,
        n_a: da.len(),
        n_b: db.len(),
        feature_dim: dim,
        extractor_seed: seed,
    })
}

/// Renders a `grid_rows × grid_cols` PPM from a generator checkpoint with
/// latents drawn from `grid_seed`.
pub fn cmd_grid(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let g = Network::load_checkpoint(checkpoint)?;
    if g.kind != NetKind::Generator {
        return Err(Error::Alignment(format!("{} is not a generator checkpoint", checkpoint.display())));
    }
    let rows: usize = cfg.parse_key("grid_rows")?;
    let cols: usize = cfg.parse_key("grid_cols")?;
    let seed: u64 = cfg.parse_key("grid_seed")?;
    let eps = grid_latents(seed, rows * cols, g.config.latent_dim);
    let labels = grid_labels(&g.config, rows * cols);
    let images = g.infer(&eps, labels.as_deref())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(out, ppm_grid(&images, rows, cols)?)
}

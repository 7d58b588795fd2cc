use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use freezelab_core::config::{parse_depths, RunConfig};
use freezelab_core::harness;
use freezelab_core::{Error, Result};

#[derive(Parser)]
#[command(name = "freezelab", version, about = "Desk-scale GAN transfer-learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// key = value config file; omitted keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (output file for `grid`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source G and D from scratch
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Transfer the source checkpoints to the target dataset
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Overrides `strategy` from the config
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Fine-tuning plus one FreezeD run per depth
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated freeze depths, e.g. 1,2,3
        #[arg(long)]
        depths: Option<String>,
    },
    /// Desk-FID between two dataset archives
    Fid {
        #[command(flatten)]
        common: Common,
        /// First .frzs archive
        a: PathBuf,
        /// Second .frzs archive
        b: PathBuf,
        /// Overrides `fid_seed`
        #[arg(long)]
        extractor_seed: Option<u64>,
    },
    /// Render a sample grid from a generator checkpoint
    Grid {
        #[command(flatten)]
        common: Common,
        /// Generator .frzd checkpoint
        checkpoint: PathBuf,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        /// Latent seed; overrides `grid_seed`
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(common: &Common, out_is_dir: bool) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env()?;
            cfg
        }
    };
    if out_is_dir {
        if let Some(out) = &common.out {
            cfg.set("out", &out.to_string_lossy())?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load(&common, true)?;
            let out = harness::cmd_pretrain(&cfg)?;
            println!(
                "pretrain: best_fid={:.4} final_fid={:.4} -> {}",
                out.history.best_fid().unwrap_or(f64::NAN),
                out.history.final_fid().unwrap_or(f64::NAN),
                cfg.out_dir().display()
            );
        }
        Command::Transfer { common, strategy } => {
            let cfg = load(&common, true)?;
            let out = harness::cmd_transfer(&cfg, strategy.as_deref())?;
            println!(
                "{}: best_fid={:.4} final_fid={:.4} -> {}",
                out.label,
                out.history.best_fid().unwrap_or(f64::NAN),
                out.history.final_fid().unwrap_or(f64::NAN),
                out.dir.display()
            );
        }
        Command::Ablate { common, depths } => {
            let cfg = load(&common, true)?;
            let depths = depths.as_deref().map(parse_depths).transpose()?;
            let table = harness::cmd_ablate(&cfg, depths.as_deref())?;
            print!("{}", table.to_table());
        }
        Command::Fid {
            common,
            a,
            b,
            extractor_seed,
        } => {
            let mut cfg = load(&common, true)?;
            if let Some(s) = extractor_seed {
                cfg.set("fid_seed", &s.to_string())?;
            }
            print!("{}", harness::cmd_fid(&cfg, &a, &b)?.render());
        }
        Command::Grid {
            common,
            checkpoint,
            rows,
            cols,
            seed,
        } => {
            let mut cfg = load(&common, false)?;
            for (key, v) in [("grid_rows", rows.map(|v| v as u64)), ("grid_cols", cols.map(|v| v as u64)), ("grid_seed", seed)] {
                if let Some(v) = v {
                    cfg.set(key, &v.to_string())?;
                }
            }
            cfg.validate()?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("grid.ppm"));
            harness::cmd_grid(&cfg, &checkpoint, &out)?;
            println!("grid -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("freezelab: {e}");
            if let Error::NonFinite { .. } = e {
                eprintln!("freezelab: training aborted; lower lr or check the config");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

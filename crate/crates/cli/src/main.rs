use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ftn::data::{synth_generate, write_split, Split};
use ftn::harness::checkpoint::{CheckpointRecord, RngState};
use ftn::harness::{self, import_pretrained, log_csv, Profile, TrainConfig, TrainOutcome};
use ftn::{DType, Scalar};

#[derive(Parser)]
#[command(name = "ftn", version, about = "Bi-temporal change detection with a window-attention network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Full => Profile::Full,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults the config file is applied over.
        #[arg(long, value_enum, default_value = "full")]
        profile: ProfileArg,
    },
    /// Print metrics of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: String,
        /// Dataset root overriding the one stored in the checkpoint.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Write probability, mask and overlay images for one pair.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic change dataset in the standard layout.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Split directory the pairs are written to.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Check a weight container against the encoder and report what loads.
    ImportWeights {
        #[arg(long)]
        src: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        profile: ProfileArg,
        /// Also write an untrained checkpoint holding the imported weights.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run_train<T: Scalar>(cfg: &TrainConfig) -> Result<()> {
    let started = Instant::now();
    let TrainOutcome { last, best, log } = harness::train::<T>(cfg)?;
    print!("{}", log_csv(&log));
    eprintln!(
        "trained {} steps in {:.1}s; best val f1 {:.4} at epoch {}",
        last.step,
        started.elapsed().as_secs_f64(),
        best.best_val_f1.unwrap_or(f64::NAN),
        best.epoch
    );
    Ok(())
}

fn run_import<T: Scalar>(src: &Path, cfg: &TrainConfig, out: Option<&Path>) -> Result<()> {
    let (store, report) = import_pretrained::<T>(src, &cfg.model_config(), cfg.seed)?;
    print!("{report}");
    if let Some(out) = out {
        let rec = CheckpointRecord {
            epoch: 0,
            step: 0,
            config: TrainConfig {
                pretrained: src.to_string_lossy().into_owned(),
                ..cfg.clone()
            },
            store,
            momentum: Default::default(),
            rng: RngState { seed: cfg.seed, word_pos: 0 },
            best_val_f1: None,
            class_frequencies: [0.5, 0.5],
        };
        rec.save(out)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, profile } => {
            let cfg = TrainConfig::from_file(&config, profile.into())
                .with_context(|| format!("reading {}", config.display()))?;
            match cfg.dtype {
                DType::F32 => run_train::<f32>(&cfg),
                DType::F64 => run_train::<f64>(&cfg),
            }
        }
        Command::Eval { ckpt, split, root } => {
            let split: Split = split.parse()?;
            print!("{}", harness::evaluate(&ckpt, split, root.as_deref())?);
            Ok(())
        }
        Command::Predict { ckpt, a, b, out } => {
            let files = harness::predict(&ckpt, &a, &b, &out)?;
            println!("probability={}", files.probability.display());
            println!("mask={}", files.mask.display());
            println!("overlay={}", files.overlay.display());
            Ok(())
        }
        Command::Synth {
            seed,
            count,
            size,
            out,
            split,
        } => {
            let split: Split = split.parse()?;
            let pairs = synth_generate(seed, count, size)?;
            write_split(&out, split, &pairs)?;
            println!("wrote {} pairs to {}", pairs.len(), out.join(split.name()).display());
            Ok(())
        }
        Command::ImportWeights {
            src,
            profile,
            out,
            seed,
        } => {
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::profile(profile.into())
            };
            match ftn::harness::checkpoint::peek_dtype(&src)? {
                DType::F32 => run_import::<f32>(&src, &cfg, out.as_deref()),
                DType::F64 => run_import::<f64>(&src, &cfg, out.as_deref()),
            }
        }
    }
}

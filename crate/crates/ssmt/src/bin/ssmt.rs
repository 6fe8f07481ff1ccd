//! Command-line front end: dataset synthesis, the two training phases,
//! batch evaluation, single-image inference, and gradient verification.
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime fault.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use ssmt::config::RunConfig;
use ssmt::data::dataset::{load_dataset, write_manifest, write_phantom_dataset, Split};
use ssmt::data::phantom::PhantomConfig;
use ssmt::data::UltrasoundSample;
use ssmt::error::{Result, SsmtError};
use ssmt::eval::{evaluate, infer};
use ssmt::gradsuite;
use ssmt::model::SsmtModel;
use ssmt::train::checkpoint::load_model;
use ssmt::train::phases::{run_pretrain, run_supervised};
use ssmt::train::losses::AblationFlags;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "ssmt",
    version,
    about = "Semi-supervised multi-task ultrasound nodule segmentation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic phantom dataset tree (image/ + mask dirs + manifest)
    SynthGen {
        /// Output dataset root
        #[arg(long)]
        out: PathBuf,
        /// Number of labeled samples (image + nodule + gland masks)
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Number of unlabeled samples (image only)
        #[arg(long, default_value_t = 0)]
        unlabeled: usize,
        /// Square canvas side in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Phase 1: reconstruction pretraining of encoder + reconstruction head
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config dataset root
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the config output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Phase 2: joint supervised multi-task training
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config dataset root
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the config output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Initialize from this checkpoint (typically phase 1's last.ckpt)
        #[arg(long)]
        from: Option<PathBuf>,
        /// Ablation variant 1-5 overriding the config flags
        #[arg(long)]
        variant: Option<u8>,
    },
    /// Evaluate checkpoints over a dataset; prints the CSV report
    Eval {
        /// Checkpoint path; a {seed} placeholder selects per-seed files
        #[arg(long)]
        checkpoint: String,
        /// Dataset root
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated evaluation seeds
        #[arg(long, value_delimiter = ',', default_value = "42")]
        seeds: Vec<u64>,
    },
    /// Segment one image: writes PGM masks and a red/green overlay PPM
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Optional ground-truth nodule mask for the overlay's green channel
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of gradients; exit 0 iff all pass
    GradCheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_samples(root: &Path, side: usize, split: Option<Split>) -> Result<Vec<UltrasoundSample>> {
    let manifest = load_dataset(root)?;
    let records: Vec<_> = match split {
        Some(s) => manifest.with_split(s),
        None => manifest.records.iter().collect(),
    };
    records
        .into_iter()
        .map(|r| ssmt::data::dataset::load_sample(r, side, side))
        .collect()
}

fn data_root(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| cfg.data.root.clone()).ok_or_else(|| {
        SsmtError::Config("no dataset root: set data.root in the config or pass --data".to_string())
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SynthGen {
            out,
            count,
            unlabeled,
            size,
            seed,
        } => {
            let cfg = PhantomConfig {
                size,
                ..PhantomConfig::default()
            };
            let manifest = write_phantom_dataset(&out, count, unlabeled, &cfg, seed)?;
            write_manifest(&manifest, &out.join("manifest.jsonl"))?;
            let train = manifest.with_split(Split::Train).len();
            let test = manifest.with_split(Split::Test).len();
            println!(
                "wrote {} samples to {} ({train} train, {test} test, {unlabeled} unlabeled)",
                manifest.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Pretrain {
            config,
            seed,
            data,
            out,
        } => {
            let cfg = RunConfig::load(&config)?.with_seed(seed);
            let root = data_root(&cfg, data)?;
            let side = cfg.model.image_size;
            let samples = load_samples(&root, side, None)?;
            let out_dir = out.unwrap_or_else(|| cfg.data.out_dir.clone()).join("pretrain");
            let mut model = SsmtModel::new(cfg.model.clone(), cfg.train.seed)?;
            let state = run_pretrain(
                &mut model,
                &samples,
                &cfg.train.pretrain,
                &cfg.data.augment,
                &out_dir,
            )?;
            println!(
                "pretrained {} epochs ({} steps) on {} images; checkpoint at {}",
                state.meta.epoch,
                state.meta.step,
                samples.len(),
                out_dir.join(ssmt::train::phases::LAST_CKPT).display()
            );
            Ok(())
        }
        Cmd::Train {
            config,
            seed,
            data,
            out,
            from,
            variant,
        } => {
            let cfg = RunConfig::load(&config)?.with_seed(seed);
            let root = data_root(&cfg, data)?;
            let side = cfg.model.image_size;
            let train = load_samples(&root, side, Some(Split::Train))?;
            let val = load_samples(&root, side, Some(Split::Test))?;
            let out_dir = out.unwrap_or_else(|| cfg.data.out_dir.clone()).join("train");
            let mut model = match from {
                Some(path) => {
                    let m = load_model(&path)?;
                    if m.cfg != cfg.model {
                        return Err(SsmtError::Config(format!(
                            "checkpoint {} was built for different model dims",
                            path.display()
                        )));
                    }
                    m
                }
                None => SsmtModel::new(cfg.model.clone(), cfg.train.seed)?,
            };
            let flags = match variant {
                Some(v) => AblationFlags::variant(v as usize)?,
                None => cfg.ablation,
            };
            let state = run_supervised(
                &mut model,
                &train,
                &val,
                &cfg.train.supervised,
                &cfg.train.weights,
                flags,
                &cfg.data.augment,
                &out_dir,
            )?;
            println!(
                "trained {} epochs ({} steps) on {} samples; best DSC {:.4}; outputs in {}",
                state.meta.epoch,
                state.meta.step,
                train.len(),
                state.meta.best_dsc,
                out_dir.display()
            );
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            data,
            seeds,
        } => {
            let manifest = load_dataset(&data)?;
            let report = evaluate(&checkpoint, &manifest, &seeds)?;
            print!("{}", report.to_csv());
            eprintln!("{}", report.summary());
            Ok(())
        }
        Cmd::Infer {
            checkpoint,
            image,
            gt,
            out,
        } => {
            let result = infer(&checkpoint, &image, gt.as_deref(), &out)?;
            println!("{}", result.nodule_pgm.display());
            println!("{}", result.gland_pgm.display());
            println!("{}", result.overlay_ppm.display());
            if let Some(d) = result.dsc_vs_gt {
                println!("dsc_vs_gt {d:.4}");
            }
            Ok(())
        }
        Cmd::GradCheck { seed } => {
            let outcomes = gradsuite::run_suite(seed)?;
            for o in &outcomes {
                println!("{o}");
            }
            if gradsuite::all_pass(&outcomes) {
                println!("all {} checks passed", outcomes.len());
                Ok(())
            } else {
                Err(SsmtError::Contract(
                    "gradient checks failed".to_string(),
                ))
            }
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage_ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            std::process::exit(if usage_ok { 0 } else { 1 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

//! Command-line front end.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::TrainConfig;
use crate::data::{DataSource, Split};
use crate::error::{PqkError, Result};
use crate::export::{export_quantized, verify_export};
use crate::metrics::Metrics;
use crate::model::{Path as ForwardPath, Phase};
use crate::quant;
use crate::train::{evaluate, finetune_baseline, run_phase1, run_phase2};

#[derive(Debug, Parser)]
#[command(name = "pqk", version, about = "Prune, quantize and distill small classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PathArg {
    Student,
    Teacher,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run Phase 1, Phase 2, or both; writes phase1.ckpt / phase2.ckpt and metrics.csv.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
        /// Phase-1 checkpoint to start Phase 2 from (required with --phase 2).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Cross-entropy finetune of a Phase-1 student on the Phase-2 schedule.
    Finetune {
        /// Phase-1 checkpoint.
        #[arg(long)]
        resume: PathBuf,
        #[arg(long)]
        lr: f64,
        /// Epochs to train; defaults to the Phase-2 length of the stored config.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value = "finetune")]
        out: PathBuf,
    },
    /// Print `accuracy=<value>` of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `synthetic:<task>:n=..:seed=..` or `files:<features>:<labels>`;
        /// defaults to the dev data of the stored config.
        #[arg(long)]
        data: Option<String>,
        #[arg(long, value_enum, default_value = "student")]
        path: PathArg,
    },
    /// Write the integer deployment artifact and verify it.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer table: name, shape, sparsity, bits, step size, distinct codes.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PqkError::io(dir, e))
}

fn write_line(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| PqkError::io("<stdout>", e))
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            phase,
            resume,
            seed,
            out: dir,
        } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let start = match (phase, &resume) {
                (PhaseArg::Two, None) => {
                    return Err(PqkError::config("--phase 2 requires --resume with a Phase-1 checkpoint"));
                }
                (PhaseArg::Two, Some(p)) => Some(load_checkpoint(p)?.model),
                (_, Some(_)) => {
                    return Err(PqkError::config("--resume is only used with --phase 2"));
                }
                _ => None,
            };
            let (train, dev) = cfg.data.load()?;
            create_dir(&dir)?;
            let mut metrics = Metrics::to_file(&dir.join("metrics.csv"))?;
            let phase1 = match start {
                Some(m) => m,
                None => {
                    let (model, opt) = run_phase1(&cfg, &train, &dev, &mut metrics)?;
                    save_checkpoint(&model, &opt, &cfg, &dir.join("phase1.ckpt"))?;
                    write_line(out, &format!("phase1 dev accuracy={}", evaluate(&model, &dev, ForwardPath::Student)?))?;
                    model
                }
            };
            if phase != PhaseArg::One {
                let (model, opt) = run_phase2(&cfg, phase1, &train, &dev, &mut metrics)?;
                save_checkpoint(&model, &opt, &cfg, &dir.join("phase2.ckpt"))?;
                let s = evaluate(&model, &dev, ForwardPath::Student)?;
                let t = evaluate(&model, &dev, ForwardPath::Teacher)?;
                write_line(out, &format!("phase2 dev accuracy student={s} teacher={t}"))?;
            }
            metrics.flush()
        }
        Command::Finetune {
            resume,
            lr,
            budget,
            out: dir,
        } => {
            let ckpt = load_checkpoint(&resume)?;
            let cfg = ckpt.config;
            let budget = budget.unwrap_or(cfg.phase2_epochs);
            let (train, dev) = cfg.data.load()?;
            create_dir(&dir)?;
            let mut metrics = Metrics::to_file(&dir.join("metrics.csv"))?;
            let (model, opt) = finetune_baseline(&cfg, ckpt.model, lr, budget, &train, &dev, &mut metrics)?;
            metrics.flush()?;
            let opt = if budget == 0 { ckpt.optimizer } else { opt };
            save_checkpoint(&model, &opt, &cfg, &dir.join("finetune.ckpt"))?;
            write_line(out, &format!("finetune dev accuracy={}", evaluate(&model, &dev, ForwardPath::Student)?))
        }
        Command::Eval { ckpt, data, path } => {
            let c = load_checkpoint(&ckpt)?;
            let source = match data {
                Some(spec) => DataSource::parse(&spec)?,
                None => c.config.data.dev.clone(),
            };
            let dataset = source.load(Split::Dev)?;
            let path = match path {
                PathArg::Student => ForwardPath::Student,
                PathArg::Teacher => ForwardPath::Teacher,
            };
            let acc = evaluate(&c.model, &dataset, path)?;
            write_line(out, &format!("accuracy={acc}"))
        }
        Command::Export { ckpt, out: file } => {
            let c = load_checkpoint(&ckpt)?;
            export_quantized(&c.model, &file)?;
            let err = verify_export(&file)?;
            let size = std::fs::metadata(&file).map_err(|e| PqkError::io(&file, e))?.len();
            write_line(out, &format!("wrote {} ({size} bytes), verified max |dz|={err}", file.display()))
        }
        Command::Inspect { ckpt } => {
            let c = load_checkpoint(&ckpt)?;
            let phase = match c.model.phase() {
                Phase::Phase1 => "phase 1",
                Phase::Phase2 => "phase 2",
                Phase::Finetune => "finetune",
            };
            write_line(out, &format!("checkpoint: {phase}"))?;
            write_line(
                out,
                &format!("{:<16} {:<16} {:>9} {:>3} {:>12} {:>7}", "layer", "shape", "sparsity", "k", "S_w", "codes"),
            )?;
            for l in c.model.layers() {
                let codes = quant::quantize(l.weight(), l.quant())?;
                let distinct: BTreeSet<i8> = codes
                    .codes()
                    .iter()
                    .zip(l.mask().keep())
                    .map(|(&c, &k)| if k { c } else { 0 })
                    .collect();
                let shape = format!("{:?}", l.weight().shape());
                write_line(
                    out,
                    &format!(
                        "{:<16} {:<16} {:>9.6} {:>3} {:>12.6e} {:>7}",
                        l.name(),
                        shape,
                        l.mask().sparsity(),
                        l.quant().bits,
                        l.quant().step,
                        distinct.len()
                    ),
                )?;
            }
            Ok(())
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alignment::ImageScoreFormula;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::{self, EvalOverrides};

#[derive(Debug, Parser)]
#[command(name = "tokalign", version, about = "Token-level subspace alignment for zero-shot anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file (`key = value` lines; a spec file for `gen`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset directory holding `train/` and `test/`.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint to write (train) or read (eval, score).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the seed in the config or spec.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Argmax subspace assignment instead of sparse transport.
    #[arg(long, global = true)]
    pub van: bool,
    /// Hinge term in its literal form.
    #[arg(long, global = true)]
    pub literal_hinge: bool,
    /// Image-level score fusion.
    #[arg(long, global = true, value_parser = ["paper", "balanced"])]
    pub image_score_formula: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a spec file.
    Gen,
    /// Train on `<dataset>/train`; writes a checkpoint and `loss_history.csv`.
    Train,
    /// Evaluate a checkpoint on `<dataset>/test`; writes `metrics.csv` and `usage.csv`.
    Eval,
    /// Write per-image anomaly-map PGMs for `<dataset>/test`.
    Score,
    /// Run the transport solver property suite.
    SinkhornCheck,
    /// Sweep subspace count, k and epsilon; writes `ablation.csv`.
    Ablate,
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required")))
}

impl Common {
    fn formula(&self) -> Result<Option<ImageScoreFormula>> {
        self.image_score_formula.as_deref().map(str::parse).transpose()
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::parse(&io::load_text(p)?)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.van |= self.van;
        cfg.hinge_literal |= self.literal_hinge;
        if let Some(f) = self.formula()? {
            cfg.image_score_formula = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn overrides(&self) -> Result<EvalOverrides> {
        Ok(EvalOverrides { van: self.van, image_score_formula: self.formula()? })
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir().join(pipeline::CHECKPOINT_FILE))
    }
}

/// Runs a parsed command and returns the text to print.
pub fn execute(cli: &Cli) -> Result<String> {
    let c = &cli.common;
    match cli.command {
        Command::Gen => {
            let spec = need(&c.config, "config")?;
            let out = need(&c.out, "out")?;
            pipeline::gen_command(spec, c.seed, out)?;
            Ok(format!("dataset written to {}", out.display()))
        }
        Command::Train => {
            let cfg = c.train_config()?;
            let out = c.out_dir();
            let ckpt = pipeline::train_command(need(&c.dataset, "dataset")?, &cfg, &out)?;
            if let Some(target) = &c.checkpoint {
                if target != &ckpt {
                    std::fs::copy(&ckpt, target).map_err(|e| Error::io(target, e))?;
                }
            }
            Ok(format!("checkpoint written to {}", c.checkpoint.as_ref().unwrap_or(&ckpt).display()))
        }
        Command::Eval => {
            let r = pipeline::eval_command(
                need(&c.dataset, "dataset")?,
                &c.checkpoint_path(),
                &c.overrides()?,
                &c.out_dir(),
            )?;
            Ok(r.metrics_csv().trim_end().to_string())
        }
        Command::Score => {
            let n = pipeline::score_command(
                need(&c.dataset, "dataset")?,
                &c.checkpoint_path(),
                &c.overrides()?,
                &c.out_dir(),
            )?;
            Ok(format!("{n} anomaly maps written to {}", c.out_dir().display()))
        }
        Command::SinkhornCheck => {
            let results = pipeline::sinkhorn_check(c.seed.unwrap_or(0))?;
            let lines: Vec<String> = results
                .iter()
                .map(|r| format!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail))
                .collect();
            if results.iter().all(|r| r.passed) {
                Ok(lines.join("\n"))
            } else {
                Err(Error::InvalidArgument(format!("solver property suite failed\n{}", lines.join("\n"))))
            }
        }
        Command::Ablate => {
            let cfg = c.train_config()?;
            let out = c.out_dir();
            let rows = pipeline::ablate_command(need(&c.dataset, "dataset")?, &cfg, &out)?;
            Ok(pipeline::ablation_csv(&rows).trim_end().to_string())
        }
    }
}

/// Parses `args` (including the program name), runs, prints, and returns the exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            if !text.is_empty() {
                println!("{text}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

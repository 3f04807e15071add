//! `advdiff` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::pipeline::{self, ExperimentConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ADVDIFF_OUT";

#[derive(Debug, Parser)]
#[command(name = "advdiff", version, about = "Adversarially trained diffusion models on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.lambda=0.03`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and corrupt a dataset, then train a denoiser on it.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Draw generations from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Draw generations under a trajectory attack.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score generations against the ground truth of a training run.
    Eval {
        /// Samples CSV written by `sample` or `attack`.
        #[arg(long)]
        samples: PathBuf,
        /// Output directory of the `train` run that produced the model.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "eval")]
        label: String,
        /// Trajectory directory, for the flow histogram.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Merge eval reports into one comparison table.
    Report {
        /// `eval.json` files.
        #[arg(long = "eval", required = true)]
        evals: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate the perturbation ray over t for several ω.
    Ray {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 3.0, 4.0, 8.0])]
        omega: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a stage from its manifest and compare outputs byte for byte.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the regenerated outputs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(&common.overrides)
}

/// `--out`, then the config's `output_dir`, then `$ADVDIFF_OUT/<command>`,
/// then `runs/<command>`.
fn output_dir(common: &Common, cfg: &ExperimentConfig, command: &str) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    if let Some(out) = &cfg.output_dir {
        return out.clone();
    }
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(command)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let out = output_dir(&common, &cfg, "train");
            let (_, _, report) = pipeline::run_train(&cfg, &out)?;
            println!("trained {} steps, final loss {:.5}; wrote {}", report.rows.last().map_or(0, |r| r.step), report.tail_loss(10), out.display());
        }
        Command::Sample { checkpoint, common } => {
            let cfg = load_config(&common)?;
            let out = output_dir(&common, &cfg, "sample");
            let (_, x) = pipeline::run_sample(&cfg, &checkpoint, &out)?;
            println!("wrote {} samples to {}", x.rows(), out.display());
        }
        Command::Attack { checkpoint, common } => {
            let cfg = load_config(&common)?;
            let out = output_dir(&common, &cfg, "attack");
            let (_, x) = pipeline::run_attack(&cfg, &checkpoint, &out)?;
            println!("wrote {} attacked samples to {}", x.rows(), out.display());
        }
        Command::Eval {
            samples,
            run,
            label,
            trajectories,
            common,
        } => {
            let cfg = load_config(&common)?;
            let out = output_dir(&common, &cfg, "eval");
            let (_, report) = pipeline::run_eval(&cfg, &samples, &run, &label, trajectories.as_deref(), &out)?;
            for (name, m) in &report.metrics {
                println!("{label} {name}: mean {:.6} median {:.6}", m.summary.mean, m.summary.median);
            }
            if let Some(mem) = &report.memorization {
                println!("{label} similarity mass >= 0.98: {:.4}", mem.mass_at_098);
            }
        }
        Command::Report { evals, common } => {
            let cfg = load_config(&common)?;
            let out = output_dir(&common, &cfg, "report");
            pipeline::run_report(&cfg, &evals, &out)?;
            println!("wrote {}", out.join("comparison.csv").display());
        }
        Command::Ray { omega, common } => {
            let cfg = load_config(&common)?;
            let out = output_dir(&common, &cfg, "ray");
            pipeline::run_ray(&cfg, &omega, &out)?;
            println!("wrote {}", out.join("ray.csv").display());
        }
        Command::Replay { manifest, out } => {
            let out = out.unwrap_or_else(|| default_replay_dir(&manifest));
            let outcome = pipeline::replay(&manifest, &out)?;
            for f in &outcome.matched {
                println!("identical  {f}");
            }
            for f in &outcome.mismatched {
                println!("DIFFERENT  {f}");
            }
            if !outcome.is_identical() {
                return Err(Error::Mismatch(format!("{} of {} outputs differ", outcome.mismatched.len(), outcome.matched.len() + outcome.mismatched.len())));
            }
        }
    }
    Ok(())
}

fn default_replay_dir(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join("replay")
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    main_with(std::env::args_os())
}

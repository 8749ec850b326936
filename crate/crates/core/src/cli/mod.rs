//! The `scaledql` command line: a sectioned TOML config with `--set`
//! overrides, and the subcommands of the `gen-data → train → eval →
//! report` pipeline.
//!
//! Exit codes: 0 success, 2 config or input error, 3 I/O error, 4 runtime
//! abort (divergence, numeric overflow, resource limit).

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use commands::{FinetuneMode, Manifest, ManifestEntry, RunDir, TrainOutcome};
pub use config::RunConfig;

use crate::error::{Error, Result};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "SCALEDQL_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "scaledql", version, about = "Scaled conservative distributional Q-learning at desk scale")]
pub struct Cli {
    /// Workspace root; every relative path resolves against it.
    #[arg(long, global = true, default_value = ".")]
    pub root: PathBuf,
    /// Config file (TOML). Falls back to $SCALEDQL_CONFIG, then the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=2000`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect datasets for the pretraining and held-out tasks.
    GenData {
        /// Shorthand for `--set data.fraction=F`.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Pretrain on the configured tasks.
    Train {
        #[arg(long)]
        fraction: Option<f64>,
        /// One run per value of a single key, e.g. `td_mode=mse,c51`.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        ablate: Option<String>,
    },
    /// Evaluate a checkpoint of a run on its pretraining suite.
    Eval {
        /// Run directory (relative to the root).
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint file; defaults to the run's latest.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune a pretrained run against a scratch control.
    Finetune {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        mode: FinetuneMode,
        /// Variant name for `--mode online` (see `list-envs`).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Merge the final reports of runs over the same suite.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// List tasks, their reference returns, and the variants.
    ListEnvs,
    /// Summarize the generated datasets.
    Stats,
}

/// Stable process exit code of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::OutOfRange(_) | Error::Format { .. } | Error::InvalidState(_) => 2,
        Error::Io { .. } => 3,
        Error::Diverged { .. } | Error::NumericOverflow { .. } | Error::Resource(_) => 4,
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Reads the config named by the flag or the environment, then applies the
/// overrides. Without either, the desk defaults apply.
pub fn load_config(root: &Path, flag: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let base = match path {
        Some(p) => {
            let p = resolve(root, &p);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            RunConfig::from_toml(&text).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if overrides.is_empty() {
        Ok(base)
    } else {
        base.with_overrides(overrides)
    }
}

fn execute(cli: Cli) -> Result<()> {
    let root = cli.root.clone();
    let mut overrides = cli.overrides.clone();
    if let Command::GenData { fraction: Some(f) } | Command::Train { fraction: Some(f), .. } = &cli.command {
        overrides.push(format!("data.fraction={f}"));
    }
    match cli.command {
        Command::Eval { ref run, .. } | Command::Finetune { ref run, .. } => {
            // the run's own config, with any overrides on top
            let run = resolve(&root, run);
            let cfg = commands::read_run_config(&run)?.with_overrides(&overrides)?;
            match cli.command {
                Command::Eval { checkpoint, .. } => {
                    let ck = checkpoint.map(|c| resolve(&root, &c));
                    let (out, report) = commands::eval(&run, &cfg, ck.as_deref())?;
                    println!("iqm {:.4} median {:.4}", report.aggregates.iqm, report.aggregates.median);
                    println!("report {}", out.display());
                }
                Command::Finetune { mode, variant, .. } => {
                    let (out, cmp) = commands::finetune(&root, &run, &cfg, mode, variant.as_deref())?;
                    for arm in [&cmp.pretrained, &cmp.scratch] {
                        println!("{} median {:.4} iqm {:.4}", arm.label, arm.final_median()?, arm.final_iqm()?);
                    }
                    println!("run {}", out.display());
                }
                _ => unreachable!(),
            }
            return Ok(());
        }
        _ => {}
    }
    let cfg = load_config(&root, cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenData { .. } => {
            let (dir, manifest) = commands::gen_data(&root, &cfg)?;
            for t in &manifest.tasks {
                println!("{} slice {:.3} full {:.3}", t.name, t.slice_score, t.full_score);
            }
            println!("data {}", dir.display());
        }
        Command::Train { ablate: None, .. } => {
            let out = commands::train(&root, &cfg, "train")?;
            println!("iqm {:.4} median {:.4}", out.report.aggregates.iqm, out.report.aggregates.median);
            println!("run {}", out.run_dir.display());
        }
        Command::Train { ablate: Some(spec), .. } => {
            let (runs, cmp) = commands::train_ablation(&root, &cfg, &spec)?;
            for r in &runs {
                println!("{} iqm {:.4} run {}", r.report.meta.label, r.report.aggregates.iqm, r.run_dir.display());
            }
            println!("comparison {}", cmp.display());
        }
        Command::Report { runs } => {
            let runs: Vec<PathBuf> = runs.iter().map(|r| resolve(&root, r)).collect();
            let (out, reports) = commands::report(&root, &cfg, &runs)?;
            for r in &reports {
                println!("{} iqm {:.4} median {:.4}", r.meta.label, r.aggregates.iqm, r.aggregates.median);
            }
            println!("report {}", out.display());
        }
        Command::ListEnvs => print!("{}", commands::list_envs(&cfg)?),
        Command::Stats => print!("{}", commands::stats(&root, &cfg)?),
        Command::Eval { .. } | Command::Finetune { .. } => unreachable!(),
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the subcommand, and
/// returns the exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests;

//! Command-line experiment runner for the `gkd-core` library.
//!
//! Every command that writes files also writes a manifest recording the
//! resolved invocation and content hashes of its inputs and outputs, so any
//! run can be repeated with `gkd rerun`.

pub mod commands;
pub mod config;
mod error;
pub mod manifest;
pub mod oracle_check;
pub mod sweep;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use gkd_core::divergences::DivergenceSpec;
use gkd_core::gkd::MetricsRow;
use gkd_core::tasks::{DataSource, Decode, TaskName};
use serde_json::{json, Value};

pub use crate::config::{ConfigFile, RunConfig};
pub use crate::error::{CliError, CliResult};
use crate::manifest::{manifest_path, DemoTarget, EvalPolicy, Invocation, Manifest};
use crate::oracle_check::OracleCheckFile;
use crate::sweep::SweepAxis;

#[derive(Debug, Parser)]
#[command(name = "gkd", version, about = "Generalized knowledge distillation experiments on synthetic tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a dataset of (context, output) pairs.
    Generate {
        #[arg(long)]
        task: TaskName,
        /// ground_truth or teacher_samples.
        #[arg(long, default_value = "teacher_samples")]
        source: DataSource,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student; writes config.toml, metrics.csv,
    /// checkpoints/final.ckpt and manifest.json under --out.
    Train {
        /// TOML run config; flags override its keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: ConfigFile,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or the task's teacher) and print the report.
    Eval {
        #[arg(long, required_unless_present = "teacher", conflicts_with = "teacher")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the task's exact teacher instead of a checkpoint.
        #[arg(long)]
        teacher: bool,
        #[arg(long)]
        task: TaskName,
        #[arg(long, default_value = "sample")]
        decode: Decode,
        #[arg(long, default_value_t = 1000)]
        n_eval: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "forward_kl")]
        divergence: DivergenceSpec,
        /// Also write the report (and a manifest) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare sampled training losses with the exact enumeration oracle.
    OracleCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: OracleCheckFile,
        /// Negative control: sample with a perturbed student.
        #[arg(long)]
        corrupt_student: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit one bump to a grid target by gradient descent on a divergence.
    DemoModeSeeking {
        #[arg(long)]
        divergence: DivergenceSpec,
        #[arg(long, value_enum, default_value = "bimodal")]
        target: DemoTarget,
        /// Use a seeded start instead of the default one.
        #[arg(long)]
        seed: Option<u64>,
        /// Trace CSV (iteration, mu, sigma, loss).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per value of one config field; writes summary.csv and one
    /// run directory per point under --out.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: ConfigFile,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat the command recorded in a manifest, writing to --out.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fail unless every output hashes the same as recorded.
        #[arg(long)]
        verify: bool,
    },
}

fn absolute(path: &Path) -> CliResult<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::io(path, e))
}

fn base_and_name(out: &Path) -> (PathBuf, String) {
    let base = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    (base, out.file_name().unwrap_or_default().to_string_lossy().into_owned())
}

fn write_manifest(mut manifest: Manifest, out: &Path, files: &[String]) -> CliResult<()> {
    let directory = manifest.invocation.writes_directory();
    let base = if directory { out.to_path_buf() } else { base_and_name(out).0 };
    manifest.record_outputs(&base, files)?;
    manifest.write(&manifest_path(out, directory))
}

/// Trains into `dir` and writes its manifest. Returns the printed summary and
/// the metrics rows.
pub fn run_train(config: &RunConfig, dir: &Path, config_path: Option<PathBuf>) -> CliResult<(Value, Vec<MetricsRow>)> {
    let manifest = Manifest::for_invocation(Invocation::Train { config: config.clone() }, config_path)?;
    let (metrics, files) = commands::train_into(config, dir)?;
    write_manifest(manifest, dir, &files)?;
    Ok((commands::train_summary(dir, &metrics), metrics))
}

/// Runs a resolved invocation. `out` is required for commands that always
/// write (generate, train, demo, sweep); eval and oracle-check only write
/// when given one. A manifest is written whenever outputs are.
pub fn execute(invocation: &Invocation, out: Option<&Path>, config_path: Option<PathBuf>) -> CliResult<Value> {
    let need_out = || {
        out.ok_or_else(|| CliError::new("invalid-argument", format!("{} needs an output path", invocation.name())))
    };
    if let Invocation::Train { config } = invocation {
        return run_train(config, need_out()?, config_path).map(|(v, _)| v);
    }
    let manifest = Manifest::for_invocation(invocation.clone(), config_path)?;
    let mut failure = None;
    let (value, files): (Value, Vec<String>) = match invocation {
        Invocation::Train { .. } => unreachable!("handled above"),
        Invocation::Generate { task, source, n, seed } => {
            let out = need_out()?;
            let v = commands::generate(*task, *source, *n, *seed, out)?;
            (v, vec![base_and_name(out).1])
        }
        Invocation::Eval {
            policy,
            task,
            decode,
            n_eval,
            seed,
            divergence,
        } => {
            let report = commands::eval(policy, *task, *decode, *n_eval, *seed, *divergence)?;
            let mut files = Vec::new();
            if let Some(out) = out {
                commands::write_json(out, &report)?;
                files.push(base_and_name(out).1);
            }
            (serde_json::to_value(report).expect("reports serialize"), files)
        }
        Invocation::OracleCheck { config, corrupt_student } => {
            let report = oracle_check::oracle_check(config, *corrupt_student)?;
            let mut files = Vec::new();
            if let Some(out) = out {
                commands::write_json(out, &report)?;
                files.push(base_and_name(out).1);
            }
            if !report.pass {
                failure = Some(oracle_check::mismatch_error(&report));
            }
            (serde_json::to_value(report).expect("reports serialize"), files)
        }
        Invocation::DemoModeSeeking { divergence, target, seed } => {
            let out = need_out()?;
            let summary = commands::demo_mode_seeking(*divergence, *target, *seed, out)?;
            (
                serde_json::to_value(summary).expect("summaries serialize"),
                vec![base_and_name(out).1],
            )
        }
        Invocation::Sweep { base, axis, values } => {
            let out = need_out()?;
            let (points, files) = sweep::run_sweep(base, *axis, values, out)?;
            let listed: Vec<Value> = points
                .iter()
                .map(|p| json!({ "value": p.value, "dir": p.dir, "final": p.last.as_ref().map(commands::metrics_json) }))
                .collect();
            (json!({ "out": out, "points": listed }), files)
        }
    };
    if let Some(out) = out {
        write_manifest(manifest, out, &files)?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(value),
    }
}

/// Repeats the run recorded in `manifest_file`, writing to `out`. With
/// `verify`, every recorded output must come out byte-identical.
pub fn rerun(manifest_file: &Path, out: &Path, verify: bool) -> CliResult<Value> {
    let recorded = Manifest::read(manifest_file)?;
    recorded.check_inputs()?;
    let value = execute(&recorded.invocation, Some(out), recorded.config_path.clone())?;
    if verify {
        let directory = recorded.invocation.writes_directory();
        let fresh = Manifest::read(&manifest_path(out, directory))?;
        // A single-file output is keyed by its name, which the rerun may change.
        let differing: Vec<&str> = recorded
            .outputs
            .iter()
            .filter(|(k, h)| {
                if directory {
                    fresh.outputs.get(*k) != Some(h)
                } else {
                    !fresh.outputs.values().any(|f| f == *h)
                }
            })
            .map(|(k, _)| k.as_str())
            .collect();
        if !differing.is_empty() || fresh.outputs.len() != recorded.outputs.len() {
            return Err(CliError::new(
                "reproducibility",
                format!("outputs differ from the manifest: {}", differing.join(", ")),
            ));
        }
    }
    Ok(value)
}

fn resolve_run(config: Option<&Path>, flags: ConfigFile) -> CliResult<RunConfig> {
    let file = match config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    file.overlay(flags).resolve()
}

pub fn run(cli: Cli) -> CliResult<Value> {
    match cli.command {
        Command::Generate {
            task,
            source,
            n,
            seed,
            out,
        } => execute(&Invocation::Generate { task, source, n, seed }, Some(&out), None),
        Command::Train { config, flags, out } => {
            let cfg = resolve_run(config.as_deref(), flags)?;
            let path = config.as_deref().map(absolute).transpose()?;
            run_train(&cfg, &out, path).map(|(v, _)| v)
        }
        Command::Eval {
            checkpoint,
            teacher,
            task,
            decode,
            n_eval,
            seed,
            divergence,
            out,
        } => {
            let policy = match (teacher, checkpoint) {
                (true, _) => EvalPolicy::Teacher,
                (false, Some(p)) => EvalPolicy::Checkpoint { path: absolute(&p)? },
                (false, None) => return Err(CliError::config("eval needs --checkpoint or --teacher")),
            };
            let inv = Invocation::Eval {
                policy,
                task,
                decode,
                n_eval,
                seed,
                divergence,
            };
            execute(&inv, out.as_deref(), None)
        }
        Command::OracleCheck {
            config,
            flags,
            corrupt_student,
            out,
        } => {
            let file = match config.as_deref() {
                Some(p) => OracleCheckFile::load(p)?,
                None => OracleCheckFile::default(),
            };
            let inv = Invocation::OracleCheck {
                config: file.overlay(flags).resolve()?,
                corrupt_student,
            };
            let path = config.as_deref().map(absolute).transpose()?;
            execute(&inv, out.as_deref(), path)
        }
        Command::DemoModeSeeking {
            divergence,
            target,
            seed,
            out,
        } => execute(
            &Invocation::DemoModeSeeking {
                divergence,
                target,
                seed,
            },
            Some(&out),
            None,
        ),
        Command::Sweep {
            config,
            flags,
            axis,
            values,
            out,
        } => {
            let base = resolve_sweep_base(config.as_deref(), flags, axis)?;
            let path = config.as_deref().map(absolute).transpose()?;
            execute(&sweep::invocation(&base, axis, &values), Some(&out), path)
        }
        Command::Rerun { manifest, out, verify } => rerun(&manifest, &out, verify),
    }
}

/// A sweep base may leave the swept field unset; it gets a placeholder that
/// every point overrides.
fn resolve_sweep_base(config: Option<&Path>, flags: ConfigFile, axis: SweepAxis) -> CliResult<RunConfig> {
    let file = match config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut merged = file.overlay(flags);
    match axis {
        SweepAxis::Lambda if merged.lambda.is_none() && merged.preset.is_none() => merged.lambda = Some(1.0),
        SweepAxis::Divergence if merged.divergence.is_none() && merged.preset.is_none() => {
            merged.divergence = Some(DivergenceSpec::ForwardKl)
        }
        _ => {}
    }
    merged.resolve()
}

/// Parses `args`, runs the command, prints its JSON result and returns the
/// process exit status. Failures print `error[<category>]: <message>` to
/// stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.render().to_string();
            eprint!("error[usage]: {}", text.trim_start_matches("error: "));
            return 2;
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("values serialize"));
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

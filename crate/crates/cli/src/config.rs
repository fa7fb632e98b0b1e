//! Run configuration: a flat TOML document whose keys double as command-line
//! flags. Flags override the file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Args;
use gkd_core::divergences::DivergenceSpec;
use gkd_core::gkd::{GkdConfig, LossKind, Preset};
use gkd_core::rl_gkd::RlConfig;
use gkd_core::tasks::{Decode, Task, TaskName};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_TEACHER_GAMMA: f64 = 1.0;
pub const DEFAULT_LEARNING_RATE: f64 = 0.5;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_EVAL_EVERY: usize = 100;
pub const DEFAULT_BASELINE_DECAY: f64 = 0.99;
pub const DEFAULT_N_EVAL: usize = 500;

/// Every key a run config may contain.
pub const CONFIG_KEYS: [&str; 17] = [
    "task",
    "preset",
    "lambda",
    "divergence",
    "teacher_gamma",
    "learning_rate",
    "batch_size",
    "steps",
    "max_len",
    "seed",
    "eval_every",
    "per_example_mixing",
    "dataset",
    "alpha",
    "baseline_decay",
    "n_eval",
    "decode",
];

/// A partially specified run, as read from a file or from flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Task fixture: pcfg, modular_add or noisy_copy.
    #[arg(long)]
    pub task: Option<TaskName>,
    /// Named baseline fixing lambda and divergence: supervised_ft,
    /// supervised_kd, on_policy_kd or imitkd.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Student data fraction in [0, 1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// forward_kl, reverse_kl or jsd(beta).
    #[arg(long)]
    pub divergence: Option<DivergenceSpec>,
    #[arg(long)]
    pub teacher_gamma: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output length cap; defaults to the task's.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Draw the batch source per example instead of per step.
    #[arg(long)]
    pub per_example_mixing: Option<bool>,
    /// Dataset file (required when lambda < 1). Relative paths in a config
    /// file are taken from the file's directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Weight on distillation in reward training; setting it switches the
    /// run to reward training with lambda = 1.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub baseline_decay: Option<f64>,
    /// Contexts per evaluation.
    #[arg(long)]
    pub n_eval: Option<usize>,
    /// greedy or sample.
    #[arg(long)]
    pub decode: Option<Decode>,
}

/// Rejects keys outside `known`, naming all of them at once.
pub(crate) fn check_keys(table: &toml::Table, known: &[&str]) -> CliResult<()> {
    let unknown: BTreeSet<&str> = table
        .keys()
        .map(String::as_str)
        .filter(|k| !known.contains(k))
        .collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        let list: Vec<&str> = unknown.into_iter().collect();
        Err(CliError::config(format!("unknown config keys: {}", list.join(", "))))
    }
}

pub(crate) fn parse_table(text: &str, what: &str) -> CliResult<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| CliError::config(format!("{what}: {}", e.to_string().trim_end())))
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        let table = parse_table(text, "run config")?;
        check_keys(&table, &CONFIG_KEYS)?;
        table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("run config: {}", e.to_string().trim_end())))
    }

    /// Reads a config file; a relative `dataset` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
        if let Some(d) = &cfg.dataset {
            if d.is_relative() {
                let dir = path.parent().unwrap_or(Path::new(""));
                cfg.dataset = Some(dir.join(d));
            }
        }
        Ok(cfg)
    }

    /// Fields set in `flags` replace those in `self`.
    pub fn overlay(self, flags: ConfigFile) -> ConfigFile {
        ConfigFile {
            task: flags.task.or(self.task),
            preset: flags.preset.or(self.preset),
            lambda: flags.lambda.or(self.lambda),
            divergence: flags.divergence.or(self.divergence),
            teacher_gamma: flags.teacher_gamma.or(self.teacher_gamma),
            learning_rate: flags.learning_rate.or(self.learning_rate),
            batch_size: flags.batch_size.or(self.batch_size),
            steps: flags.steps.or(self.steps),
            max_len: flags.max_len.or(self.max_len),
            seed: flags.seed.or(self.seed),
            eval_every: flags.eval_every.or(self.eval_every),
            per_example_mixing: flags.per_example_mixing.or(self.per_example_mixing),
            dataset: flags.dataset.or(self.dataset),
            alpha: flags.alpha.or(self.alpha),
            baseline_decay: flags.baseline_decay.or(self.baseline_decay),
            n_eval: flags.n_eval.or(self.n_eval),
            decode: flags.decode.or(self.decode),
        }
    }

    /// Fills defaults, applies the preset and validates.
    pub fn resolve(self) -> CliResult<RunConfig> {
        let task = self.task.ok_or_else(|| CliError::config("missing key: task"))?;
        let lambda = match (self.preset, self.lambda) {
            (Some(p), Some(l)) if l != p.lambda() => {
                return Err(CliError::config(format!(
                    "preset {p} fixes lambda = {}, but lambda = {l} was given",
                    p.lambda()
                )))
            }
            (Some(p), _) => p.lambda(),
            (None, Some(l)) => l,
            (None, None) if self.alpha.is_some() => 1.0,
            (None, None) => return Err(CliError::config("missing key: lambda (or a preset)")),
        };
        let divergence = match (self.preset, self.divergence) {
            (Some(p), Some(d)) if d != p.divergence() => {
                return Err(CliError::config(format!(
                    "preset {p} fixes divergence = {}, but divergence = {d} was given",
                    p.divergence()
                )))
            }
            (Some(p), _) => p.divergence(),
            (None, Some(d)) => d,
            (None, None) => return Err(CliError::config("missing key: divergence (or a preset)")),
        };
        let max_len = match self.max_len {
            Some(m) => m,
            None => Task::named(task)?.max_len(),
        };
        let dataset = self
            .dataset
            .map(|d| std::path::absolute(&d).map_err(|e| CliError::io(&d, e)))
            .transpose()?;
        let cfg = RunConfig {
            task,
            preset: self.preset,
            lambda,
            divergence,
            teacher_gamma: self.teacher_gamma.unwrap_or(DEFAULT_TEACHER_GAMMA),
            learning_rate: self.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE),
            batch_size: self.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
            steps: self.steps.unwrap_or(DEFAULT_STEPS),
            max_len,
            seed: self.seed.unwrap_or(DEFAULT_SEED),
            eval_every: self.eval_every.unwrap_or(DEFAULT_EVAL_EVERY),
            per_example_mixing: self.per_example_mixing.unwrap_or(false),
            dataset,
            alpha: self.alpha,
            baseline_decay: self.baseline_decay.unwrap_or(DEFAULT_BASELINE_DECAY),
            n_eval: self.n_eval.unwrap_or(DEFAULT_N_EVAL),
            decode: self.decode.unwrap_or(Decode::Sample),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A fully resolved run. Its TOML form is the config snapshot stored next to
/// the outputs, and parses back to an equal value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub lambda: f64,
    pub divergence: DivergenceSpec,
    pub teacher_gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub max_len: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub per_example_mixing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub baseline_decay: f64,
    pub n_eval: usize,
    pub decode: Decode,
}

impl RunConfig {
    pub fn gkd(&self) -> GkdConfig {
        GkdConfig {
            lambda: self.lambda,
            divergence: self.divergence,
            teacher_gamma: self.teacher_gamma,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: self.steps,
            max_len: self.max_len,
            seed: self.seed,
            eval_every: self.eval_every,
            per_example_mixing: self.per_example_mixing,
        }
    }

    pub fn loss(&self) -> LossKind {
        self.preset.map_or(LossKind::Distill, Preset::loss)
    }

    pub fn rl(&self) -> Option<RlConfig> {
        self.alpha.map(|alpha| RlConfig {
            alpha,
            baseline_decay: self.baseline_decay,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        self.gkd().validate()?;
        if let Some(rl) = self.rl() {
            rl.validate()?;
            if self.lambda != 1.0 {
                return Err(CliError::config(format!(
                    "reward training samples from the student only; alpha needs lambda = 1, got {}",
                    self.lambda
                )));
            }
            if self.loss() == LossKind::Nll {
                return Err(CliError::config("alpha cannot be combined with supervised_ft"));
            }
        }
        if self.lambda < 1.0 && self.dataset.is_none() {
            return Err(CliError::config(format!(
                "lambda = {} < 1 needs a dataset (set `dataset`)",
                self.lambda
            )));
        }
        if self.n_eval == 0 {
            return Err(CliError::config("n_eval must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("a resolved config always serializes")
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        ConfigFile::parse(text)?.resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
task = "pcfg"
lambda = 0.5
divergence = "jsd(0.25)"
teacher_gamma = 0.7
learning_rate = 0.1
batch_size = 4
steps = 10
max_len = 5
seed = 9
eval_every = 5
per_example_mixing = true
dataset = "/tmp/d.jsonl"
baseline_decay = 0.9
n_eval = 20
decode = "greedy"
"#;

    #[test]
    fn every_documented_key_parses() {
        let cfg = ConfigFile::parse(&format!("{FULL}preset = \"imitkd\"\nalpha = 0.5\n")).unwrap();
        assert_eq!(cfg.preset, Some(Preset::Imitkd));
        assert_eq!(cfg.alpha, Some(0.5));
        assert_eq!(cfg.divergence, Some(DivergenceSpec::jsd(0.25).unwrap()));
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = ConfigFile::parse("task = \"pcfg\"\nlamda = 1\nbogus = 2\n").unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.message().contains("bogus, lamda"), "{err}");
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = ConfigFile::parse(FULL).unwrap().resolve().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);

        let preset = ConfigFile {
            task: Some(TaskName::ModularAdd),
            preset: Some(Preset::OnPolicyKd),
            alpha: Some(0.3),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(RunConfig::from_toml(&preset.to_toml()).unwrap(), preset);
    }

    #[test]
    fn presets_fill_and_guard_their_fields() {
        let base = ConfigFile {
            task: Some(TaskName::Pcfg),
            preset: Some(Preset::SupervisedKd),
            dataset: Some("/tmp/x".into()),
            ..Default::default()
        };
        let cfg = base.clone().resolve().unwrap();
        assert_eq!((cfg.lambda, cfg.divergence), (0.0, DivergenceSpec::ForwardKl));
        assert_eq!(cfg.max_len, 6);

        let clash = ConfigFile {
            lambda: Some(1.0),
            ..base.clone()
        };
        assert_eq!(clash.resolve().unwrap_err().category(), "config");

        let flags = ConfigFile {
            steps: Some(3),
            ..Default::default()
        };
        assert_eq!(base.overlay(flags).resolve().unwrap().steps, 3);
    }

    #[test]
    fn missing_dataset_and_bad_alpha_are_config_errors() {
        let no_data = ConfigFile {
            task: Some(TaskName::Pcfg),
            lambda: Some(0.5),
            divergence: Some(DivergenceSpec::ForwardKl),
            ..Default::default()
        };
        assert!(no_data.resolve().unwrap_err().message().contains("dataset"));

        let off_policy_rl = ConfigFile {
            task: Some(TaskName::Pcfg),
            lambda: Some(0.0),
            divergence: Some(DivergenceSpec::ForwardKl),
            dataset: Some("/tmp/x".into()),
            alpha: Some(0.5),
            ..Default::default()
        };
        assert_eq!(off_policy_rl.resolve().unwrap_err().category(), "config");
    }
}

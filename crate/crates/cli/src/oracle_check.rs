//! Sampled training losses against the exact enumeration oracle.

use std::path::Path;
use std::sync::Arc;

use clap::Args;
use gkd_core::distributions::{TokenDist, Vocab};
use gkd_core::divergences::DivergenceSpec;
use gkd_core::gkd::{sampled_training_loss, BatchSources, GkdConfig};
use gkd_core::oracle::{exact_objective_term, Objective, Sampling};
use gkd_core::policies::{sample_sequence, Architecture, Context, NGramPolicy, ParametricPolicy, Policy};
use gkd_core::rng::{stream, Stream};
use gkd_core::tasks::{generate_dataset, DataSource, Example, Task, TaskName};
use serde::{Deserialize, Serialize};

use crate::config::{check_keys, parse_table};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum OracleFixture {
    /// Vocab 2, window-2 tabular teacher, the smallest parametric student.
    TwoToken,
    /// The two-token setting with the teacher replaced by the student.
    Identical,
    Pcfg,
    ModularAdd,
    NoisyCopy,
}

pub const ORACLE_KEYS: [&str; 7] = [
    "fixture",
    "divergence",
    "teacher_gamma",
    "samples",
    "dataset_size",
    "sigmas",
    "seed",
];

/// Partially specified check, from a file or from flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct OracleCheckFile {
    #[arg(long, value_enum)]
    pub fixture: Option<OracleFixture>,
    #[arg(long)]
    pub divergence: Option<DivergenceSpec>,
    #[arg(long)]
    pub teacher_gamma: Option<f64>,
    /// Single-item training steps per term.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Size of the teacher-sample dataset behind the lambda = 0 term.
    #[arg(long)]
    pub dataset_size: Option<usize>,
    /// Pass threshold in standard errors.
    #[arg(long)]
    pub sigmas: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCheckConfig {
    pub fixture: OracleFixture,
    pub divergence: DivergenceSpec,
    pub teacher_gamma: f64,
    pub samples: usize,
    pub dataset_size: usize,
    pub sigmas: f64,
    pub seed: u64,
}

impl OracleCheckFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let table = parse_table(&text, &path.display().to_string())?;
        check_keys(&table, &ORACLE_KEYS)?;
        table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("{}: {}", path.display(), e.to_string().trim_end())))
    }

    pub fn overlay(self, flags: OracleCheckFile) -> OracleCheckFile {
        OracleCheckFile {
            fixture: flags.fixture.or(self.fixture),
            divergence: flags.divergence.or(self.divergence),
            teacher_gamma: flags.teacher_gamma.or(self.teacher_gamma),
            samples: flags.samples.or(self.samples),
            dataset_size: flags.dataset_size.or(self.dataset_size),
            sigmas: flags.sigmas.or(self.sigmas),
            seed: flags.seed.or(self.seed),
        }
    }

    pub fn resolve(self) -> CliResult<OracleCheckConfig> {
        let cfg = OracleCheckConfig {
            fixture: self.fixture.ok_or_else(|| CliError::config("missing key: fixture"))?,
            divergence: self.divergence.unwrap_or(DivergenceSpec::ForwardKl),
            teacher_gamma: self.teacher_gamma.unwrap_or(1.0),
            samples: self.samples.unwrap_or(10_000),
            dataset_size: self.dataset_size.unwrap_or(100_000),
            sigmas: self.sigmas.unwrap_or(3.0),
            seed: self.seed.unwrap_or(0),
        };
        if cfg.samples < 2 || cfg.dataset_size == 0 || cfg.sigmas.is_nan() || cfg.sigmas <= 0.0 {
            return Err(CliError::config(
                "samples must be at least 2, dataset_size positive and sigmas positive",
            ));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub lambda: f64,
    pub exact: f64,
    pub sampled: f64,
    pub std_error: f64,
    pub gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub config: OracleCheckConfig,
    pub corrupt_student: bool,
    pub terms: Vec<TermReport>,
    pub pass: bool,
}

struct Fixture {
    teacher: Arc<dyn Policy>,
    student: ParametricPolicy,
    contexts: Vec<Context>,
    max_len: usize,
    dataset: Vec<Example>,
}

/// With EOS = 0 every unfinished prefix ends in token 1, so the teacher needs
/// a window of 2 to treat the first position differently from later ones.
fn two_token_teacher() -> CliResult<NGramPolicy> {
    let v = Vocab::new(2, 0)?;
    let mut t = NGramPolicy::new(v, 2, TokenDist::uniform(2))?;
    t.set_row(vec![None, Some(1)], TokenDist::from_probs(vec![0.3, 0.7])?)?;
    t.set_row(vec![Some(1), Some(1)], TokenDist::from_probs(vec![0.6, 0.4])?)?;
    Ok(t)
}

fn build_fixture(cfg: &OracleCheckConfig) -> CliResult<Fixture> {
    let init = |vocab: Vocab, arch: Architecture| {
        ParametricPolicy::init(vocab, arch, cfg.seed, &mut stream(cfg.seed, Stream::Init))
    };
    let task_name = match cfg.fixture {
        OracleFixture::Pcfg => Some(TaskName::Pcfg),
        OracleFixture::ModularAdd => Some(TaskName::ModularAdd),
        OracleFixture::NoisyCopy => Some(TaskName::NoisyCopy),
        OracleFixture::TwoToken | OracleFixture::Identical => None,
    };
    if let Some(name) = task_name {
        let task = Task::named(name)?;
        let student = init(task.vocab(), task.student_architecture())?;
        let dataset = generate_dataset(&task, DataSource::TeacherSamples, cfg.dataset_size, cfg.seed)?.examples;
        return Ok(Fixture {
            teacher: task.teacher_arc(),
            student,
            contexts: task.contexts().to_vec(),
            max_len: task.max_len(),
            dataset,
        });
    }
    let v = Vocab::new(2, 0)?;
    let arch = Architecture {
        window: 1,
        embed_dim: 1,
        hidden_dim: 1,
    };
    let student = init(v, arch)?;
    let teacher: Arc<dyn Policy> = match cfg.fixture {
        OracleFixture::Identical => Arc::new(student.clone()),
        _ => Arc::new(two_token_teacher()?),
    };
    let x = Context::new(vec![1], &v)?;
    let max_len = 3;
    let mut rng = stream(cfg.seed, Stream::Generate);
    let dataset = (0..cfg.dataset_size)
        .map(|_| {
            Ok(Example {
                context: x.clone(),
                output: sample_sequence(teacher.as_ref(), &x, max_len, 1.0, &mut rng)?,
            })
        })
        .collect::<gkd_core::Result<Vec<_>>>()?;
    Ok(Fixture {
        teacher,
        student,
        contexts: vec![x],
        max_len,
        dataset,
    })
}

/// Compares both objective terms (lambda = 0 on teacher data, lambda = 1 on
/// student samples) with their exact values. With `corrupt_student` the
/// sampled side trains a perturbed copy of the student, which the check must
/// catch.
pub fn oracle_check(cfg: &OracleCheckConfig, corrupt_student: bool) -> CliResult<OracleReport> {
    let f = build_fixture(cfg)?;
    let mut sampled_student = f.student.clone();
    if corrupt_student {
        for t in sampled_student.theta_mut() {
            *t += 0.5;
        }
    }
    let weighted: Vec<(Context, f64)> = f.contexts.iter().map(|x| (x.clone(), 1.0)).collect();
    let objective = Objective {
        divergence: cfg.divergence,
        teacher_gamma: cfg.teacher_gamma,
        teacher: f.teacher.as_ref(),
        student: &f.student,
    };
    let sources = BatchSources {
        contexts: &f.contexts,
        dataset: &f.dataset,
    };
    let mut terms = Vec::new();
    for (lambda, sampling) in [(0.0, Sampling::TeacherData), (1.0, Sampling::Student)] {
        let exact = exact_objective_term(&objective, &weighted, f.max_len, sampling)?;
        let step_config = GkdConfig {
            lambda,
            divergence: cfg.divergence,
            teacher_gamma: cfg.teacher_gamma,
            learning_rate: 0.0,
            batch_size: 1,
            steps: cfg.samples,
            max_len: f.max_len,
            seed: cfg.seed,
            eval_every: 1,
            per_example_mixing: false,
        };
        let (sampled, std_error) =
            sampled_training_loss(f.teacher.as_ref(), &sampled_student, sources, &step_config, cfg.samples)?;
        let gap = (sampled - exact).abs();
        terms.push(TermReport {
            lambda,
            exact,
            sampled,
            std_error,
            gap,
            pass: gap <= (cfg.sigmas * std_error).max(1e-12),
        });
    }
    let pass = terms.iter().all(|t| t.pass);
    Ok(OracleReport {
        config: *cfg,
        corrupt_student,
        terms,
        pass,
    })
}

/// The error a failing report turns into.
pub fn mismatch_error(report: &OracleReport) -> CliError {
    let worst = report
        .terms
        .iter()
        .filter(|t| !t.pass)
        .map(|t| {
            format!(
                "lambda={}: sampled {} vs exact {} (gap {:.3e} > {} x se {:.3e})",
                t.lambda, t.sampled, t.exact, t.gap, report.config.sigmas, t.std_error
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    CliError::new("oracle-mismatch", worst)
}

//! One training run per value of a single config field.

use std::path::Path;

use gkd_core::divergences::DivergenceSpec;
use gkd_core::gkd::MetricsRow;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::METRICS_FILE;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Invocation;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const POINTS_DIR: &str = "points";

pub const SUMMARY_COLUMNS: [&str; 12] = [
    "point",
    "axis",
    "value",
    "dir",
    "step",
    "loss",
    "on_policy_discrepancy",
    "exact_match",
    "teacher_loglik",
    "mean_reward",
    "baseline",
    "alpha",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Divergence,
    Alpha,
    /// Teacher temperature.
    Gamma,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Divergence => "divergence",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Gamma => "gamma",
        }
    }
}

fn parse_real(axis: SweepAxis, value: &str) -> CliResult<f64> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::config(format!("sweep value {value:?} for {} is not a number", axis.as_str())))
}

/// The base config with one field replaced. Sweeping lambda or the divergence
/// drops any preset, since the preset would pin that very field.
pub fn point_config(base: &RunConfig, axis: SweepAxis, value: &str) -> CliResult<RunConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Lambda => {
            cfg.lambda = parse_real(axis, value)?;
            cfg.preset = None;
        }
        SweepAxis::Divergence => {
            cfg.divergence = value.parse::<DivergenceSpec>()?;
            cfg.preset = None;
        }
        SweepAxis::Alpha => cfg.alpha = Some(parse_real(axis, value)?),
        SweepAxis::Gamma => cfg.teacher_gamma = parse_real(axis, value)?,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `points/<index>-<axis>-<value>` with the value reduced to path-safe
/// characters.
pub fn point_dir(index: usize, axis: SweepAxis, value: &str) -> String {
    let clean: String = value
        .trim()
        .chars()
        .filter_map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '.' | '-' | '_' => Some(c),
            '(' | ':' => Some('_'),
            _ => None,
        })
        .collect();
    format!("{POINTS_DIR}/{index:02}-{}-{clean}", axis.as_str())
}

pub struct SweepPoint {
    pub value: String,
    pub dir: String,
    pub last: Option<MetricsRow>,
}

/// Runs every point (in parallel, each in its own directory with its own
/// manifest) and writes the summary table. Returns the points in input order
/// and the files written, relative to `out`.
pub fn run_sweep(base: &RunConfig, axis: SweepAxis, values: &[String], out: &Path) -> CliResult<(Vec<SweepPoint>, Vec<String>)> {
    if values.is_empty() {
        return Err(CliError::config("a sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| point_config(base, axis, v))
        .collect::<CliResult<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let points = configs
        .into_par_iter()
        .enumerate()
        .map(|(i, config)| {
            let dir = point_dir(i, axis, &values[i]);
            let (_, metrics) = crate::run_train(&config, &out.join(&dir), None)?;
            Ok(SweepPoint {
                value: values[i].trim().to_string(),
                dir,
                last: metrics.last().copied(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let path = out.join(SUMMARY_FILE);
    let wrap = |e: csv::Error| CliError::io(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(wrap)?;
    w.write_record(SUMMARY_COLUMNS).map_err(wrap)?;
    for (i, p) in points.iter().enumerate() {
        let mut rec = vec![i.to_string(), axis.as_str().to_string(), p.value.clone(), p.dir.clone()];
        match &p.last {
            Some(r) => {
                rec.push(r.step.to_string());
                rec.extend(
                    [r.loss, r.on_policy_discrepancy, r.exact_match, r.teacher_loglik]
                        .iter()
                        .map(f64::to_string),
                );
                match r.rl {
                    Some(c) => rec.extend([c.mean_reward, c.baseline, c.alpha].iter().map(f64::to_string)),
                    None => rec.extend(std::iter::repeat_n(String::new(), 3)),
                }
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 8)),
        }
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let mut files = vec![SUMMARY_FILE.to_string()];
    files.extend(points.iter().map(|p| format!("{}/{METRICS_FILE}", p.dir)));
    Ok((points, files))
}

/// The recorded form of a sweep.
pub fn invocation(base: &RunConfig, axis: SweepAxis, values: &[String]) -> Invocation {
    Invocation::Sweep {
        base: base.clone(),
        axis,
        values: values.to_vec(),
    }
}

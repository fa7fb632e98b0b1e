//! Experiment manifests: what was run, on which inputs, and what it wrote.
//!
//! Directory commands (train, sweep) write `manifest.json` inside their output
//! directory. Single-file commands write a sidecar `<file>.manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gkd_core::divergences::DivergenceSpec;
use gkd_core::tasks::{DataSource, Decode, TaskName};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::oracle_check::OracleCheckConfig;
use crate::sweep::SweepAxis;

pub const MANIFEST_FORMAT: &str = "gkd-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// SHA-256 over `"blob <len>\0"` followed by the content, the object-hash
/// layout git uses.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(content_hash(&bytes))
}

/// Which policy `eval` scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalPolicy {
    /// The task's exact teacher.
    Teacher,
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DemoTarget {
    /// Equal mixture of unit-width bumps at -3 and +3.
    Bimodal,
    /// One unit-width bump at 2.
    Single,
}

/// A fully resolved command: everything needed to run it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Invocation {
    Generate {
        task: TaskName,
        source: DataSource,
        n: usize,
        seed: u64,
    },
    Train {
        config: RunConfig,
    },
    Eval {
        policy: EvalPolicy,
        task: TaskName,
        decode: Decode,
        n_eval: usize,
        seed: u64,
        divergence: DivergenceSpec,
    },
    OracleCheck {
        config: OracleCheckConfig,
        corrupt_student: bool,
    },
    DemoModeSeeking {
        divergence: DivergenceSpec,
        target: DemoTarget,
        seed: Option<u64>,
    },
    Sweep {
        base: RunConfig,
        axis: SweepAxis,
        values: Vec<String>,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Generate { .. } => "generate",
            Invocation::Train { .. } => "train",
            Invocation::Eval { .. } => "eval",
            Invocation::OracleCheck { .. } => "oracle-check",
            Invocation::DemoModeSeeking { .. } => "demo-mode-seeking",
            Invocation::Sweep { .. } => "sweep",
        }
    }

    /// Files the command reads besides its own arguments.
    pub fn input_files(&self) -> Vec<PathBuf> {
        match self {
            Invocation::Train { config } => config.dataset.iter().cloned().collect(),
            Invocation::Sweep { base, .. } => base.dataset.iter().cloned().collect(),
            Invocation::Eval {
                policy: EvalPolicy::Checkpoint { path },
                ..
            } => vec![path.clone()],
            _ => Vec::new(),
        }
    }

    /// Whether the output location is a directory (else a single file).
    pub fn writes_directory(&self) -> bool {
        matches!(self, Invocation::Train { .. } | Invocation::Sweep { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFile {
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// The config file the command was started from, if any.
    pub config_path: Option<PathBuf>,
    pub invocation: Invocation,
    pub inputs: Vec<InputFile>,
    /// Content hash of the resolved invocation and the input hashes.
    pub input_hash: String,
    /// Output files, relative to the manifest's directory, with their hashes.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    /// Hashes the inputs of `invocation` as they are now.
    pub fn for_invocation(invocation: Invocation, config_path: Option<PathBuf>) -> CliResult<Self> {
        let inputs = invocation
            .input_files()
            .into_iter()
            .map(|path| {
                let hash = file_hash(&path)?;
                Ok(InputFile { path, hash })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let canonical = serde_json::to_vec(&(&invocation, &inputs)).expect("invocations serialize");
        Ok(Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            config_path,
            input_hash: content_hash(&canonical),
            invocation,
            inputs,
            outputs: BTreeMap::new(),
        })
    }

    /// Fails when any recorded input has changed since the manifest was
    /// written.
    pub fn check_inputs(&self) -> CliResult<()> {
        for input in &self.inputs {
            let now = file_hash(&input.path)?;
            if now != input.hash {
                return Err(CliError::new(
                    "reproducibility",
                    format!(
                        "input {} changed since the manifest was written (hash {} now {})",
                        input.path.display(),
                        input.hash,
                        now
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Records `files` (relative to `base`) with their current hashes.
    pub fn record_outputs(&mut self, base: &Path, files: &[String]) -> CliResult<()> {
        for f in files {
            self.outputs.insert(f.clone(), file_hash(&base.join(f))?);
        }
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::new("format", format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(CliError::new(
                "format",
                format!(
                    "{}: not a {MANIFEST_FORMAT} v{MANIFEST_VERSION} manifest",
                    path.display()
                ),
            ));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifests serialize");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}

/// Where the manifest for an output location lives.
pub fn manifest_path(out: &Path, directory: bool) -> PathBuf {
    if directory {
        out.join(MANIFEST_FILE)
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

//! JSON-lines dataset files.
//!
//! The first line is a header record, every following line one example:
//!
//! ```text
//! {"record":"header","format":"gkd-dataset","version":1,"task":"modular_add","source":"ground_truth","count":2,"seed":7}
//! {"record":"example","task":"modular_add","source":"ground_truth","context":[4,8,6],"output":[2,0]}
//! ```

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataSource, Dataset, Example, Task, TaskName};
use crate::distributions::Token;
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "gkd-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Header {
        format: String,
        version: u32,
        task: TaskName,
        source: DataSource,
        count: usize,
        seed: u64,
    },
    Example {
        task: TaskName,
        source: DataSource,
        context: Vec<Token>,
        output: Vec<Token>,
    },
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |r: &Record| -> Result<()> {
        let s = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{s}").map_err(|e| Error::io(path, e))
    };
    line(&Record::Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        task: data.task,
        source: data.source,
        count: data.examples.len(),
        seed: data.seed,
    })?;
    for ex in &data.examples {
        line(&Record::Example {
            task: data.task,
            source: data.source,
            context: ex.context.tokens().to_vec(),
            output: ex.output.tokens().to_vec(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset and validates every example against `task`.
pub fn read_dataset(path: &Path, task: &Task) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let bad = |n: usize, msg: String| Error::Format(format!("{}:{}: {msg}", path.display(), n + 1));
    let (n0, first) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty dataset file", path.display())))?;
    let first = first.map_err(|e| Error::io(path, e))?;
    let (count, seed, source) = match serde_json::from_str(&first).map_err(|e| bad(n0, e.to_string()))? {
        Record::Header { format, version, task: t, source, count, seed } => {
            if format != DATASET_FORMAT || version != DATASET_VERSION {
                return Err(bad(n0, format!("unsupported format {format} v{version}")));
            }
            if t != task.name() {
                return Err(bad(n0, format!("dataset is for task {t}, not {}", task.name())));
            }
            (count, seed, source)
        }
        Record::Example { .. } => return Err(bad(n0, "first record must be the header".into())),
    };
    let mut examples = Vec::with_capacity(count);
    for (n, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))? {
            Record::Example { task: t, source: s, context, output } => {
                if t != task.name() || s != source {
                    return Err(bad(n, "example task or source disagrees with header".into()));
                }
                let (context, output) =
                    task.check_example(&context, &output).map_err(|e| bad(n, e.to_string()))?;
                examples.push(Example { context, output });
            }
            Record::Header { .. } => return Err(bad(n, "duplicate header".into())),
        }
    }
    if examples.len() != count {
        return Err(Error::Format(format!(
            "{}: header declares {count} examples, found {}",
            path.display(),
            examples.len()
        )));
    }
    Ok(Dataset { task: task.name(), source, seed, examples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::generate_dataset;

    #[test]
    fn round_trip_and_layout() {
        let task = Task::named(TaskName::ModularAdd).unwrap();
        let data = generate_dataset(&task, DataSource::GroundTruth, 5, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &data).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with(r#"{"record":"header","format":"gkd-dataset","version":1,"task":"modular_add","source":"ground_truth","count":5,"seed":7}"#));
        assert!(text.lines().nth(1).unwrap().starts_with(r#"{"record":"example","task":"modular_add","source":"ground_truth","context":["#));
        assert_eq!(read_dataset(&path, &task).unwrap(), data);
    }

    #[test]
    fn empty_dataset_has_a_header() {
        let task = Task::named(TaskName::Pcfg).unwrap();
        let data = generate_dataset(&task, DataSource::TeacherSamples, 0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        write_dataset(&path, &data).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        assert!(read_dataset(&path, &task).unwrap().is_empty());
    }

    #[test]
    fn malformed_files_are_rejected() {
        let task = Task::named(TaskName::ModularAdd).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, body: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, body).unwrap();
            p
        };
        let header = r#"{"record":"header","format":"gkd-dataset","version":1,"task":"modular_add","source":"ground_truth","count":1,"seed":0}"#;
        let cases = [
            write("empty", ""),
            write("count", header),
            write("vocab", &format!("{header}\n{}", r#"{"record":"example","task":"modular_add","source":"ground_truth","context":[4,8,60],"output":[2,0]}"#)),
            write("extra", &format!("{header}\n{}", r#"{"record":"example","task":"modular_add","source":"ground_truth","context":[4,8,6],"output":[2,0],"x":1}"#)),
            write("task", &header.replace("modular_add", "pcfg")),
        ];
        for p in &cases {
            assert!(matches!(read_dataset(p, &task), Err(Error::Format(_))), "{}", p.display());
        }
        assert!(matches!(read_dataset(&dir.path().join("nope"), &task), Err(Error::Io { .. })));
    }
}

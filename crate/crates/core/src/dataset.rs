//! Task datasets: JSONL ingestion, schema checks, seeded splits.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::task::{Instance, Split, TaskInstruction};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<Instance>,
    pub instruction: TaskInstruction,
}

/// On-disk task description. `data` is resolved relative to the task file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskFile {
    pub name: String,
    pub instruction_template: String,
    pub answer_marker: String,
    pub data: PathBuf,
}

/// Reads instances, one JSON object per line. All malformed lines are
/// reported together, with line numbers.
pub fn load_instances(path: &Path) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    let mut problems = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = match serde_json::from_str(line) {
            Ok(inst) => inst,
            Err(e) => {
                problems.push(format!("line {lineno}: {e}"));
                continue;
            }
        };
        if let Err(e) = inst.validate() {
            problems.push(format!("line {lineno}: {e}"));
            continue;
        }
        if !ids.insert(inst.id.clone()) {
            problems.push(format!("line {lineno}: duplicate id {:?}", inst.id));
            continue;
        }
        instances.push(inst);
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: {} malformed line(s):\n  {}",
            path.display(),
            problems.len(),
            problems.join("\n  ")
        )));
    }
    if instances.is_empty() {
        warn!(path = %path.display(), "dataset is empty");
    }
    Ok(instances)
}

/// Loads a JSONL file with the default task instruction.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        instances: load_instances(path)?,
        instruction: TaskInstruction::default(),
    })
}

/// Loads a task file and the dataset it points to.
pub fn load_task(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let task: TaskFile = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let instruction = TaskInstruction::new(task.instruction_template, task.answer_marker)?;
    let data = match path.parent() {
        Some(dir) if task.data.is_relative() => dir.join(&task.data),
        _ => task.data.clone(),
    };
    Ok(Dataset {
        name: task.name,
        instances: load_instances(&data)?,
        instruction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 150,
            val: 50,
            test: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Seeded shuffle, then contiguous train/val/test cuts.
pub fn split(data: &Dataset, seed: u64, sizes: SplitSizes) -> Result<Splits> {
    let need = sizes.train + sizes.val + sizes.test;
    if need > data.instances.len() {
        return Err(Error::Config(format!(
            "split sizes {}+{}+{} exceed the {} available instances",
            sizes.train,
            sizes.val,
            sizes.test,
            data.instances.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.instances.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| -> Vec<Instance> {
        order[range].iter().map(|i| data.instances[*i].clone()).collect()
    };
    Ok(Splits {
        train: take(0..sizes.train),
        val: take(sizes.train..sizes.train + sizes.val),
        test: take(sizes.train + sizes.val..need),
    })
}

/// Uses per-instance `split` tags when every instance has one, the seeded
/// split when none do. With `val_as_test`, an empty test split reuses the
/// validation split.
pub fn resolve_splits(data: &Dataset, seed: u64, sizes: SplitSizes, val_as_test: bool) -> Result<Splits> {
    let tagged = data.instances.iter().filter(|i| i.split.is_some()).count();
    let mut splits = if tagged == 0 {
        split(data, seed, sizes)?
    } else if tagged == data.instances.len() {
        let of = |s: Split| -> Vec<Instance> {
            data.instances
                .iter()
                .filter(|i| i.split == Some(s))
                .cloned()
                .collect()
        };
        Splits {
            train: of(Split::Train),
            val: of(Split::Val),
            test: of(Split::Test),
        }
    } else {
        return Err(Error::Dataset(format!(
            "{} of {} instances carry a split tag; tag all or none",
            tagged,
            data.instances.len()
        )));
    };
    if splits.test.is_empty() && val_as_test {
        splits.test = splits.val.clone();
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;
    use crate::task::AnswerOption;

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn synthetic(n: usize) -> Dataset {
        Dataset {
            name: "syn".into(),
            instances: (0..n)
                .map(|i| Instance {
                    id: format!("i{i}"),
                    question: format!("q{i}"),
                    options: vec![AnswerOption {
                        label: "A".into(),
                        text: "a".into(),
                    }],
                    gold: "A".into(),
                    split: None,
                })
                .collect(),
            instruction: TaskInstruction::default(),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let f = write(&[]);
        assert!(load_jsonl(f.path()).unwrap().instances.is_empty());
    }

    #[test]
    fn one_line_maps_fields() {
        let f = write(&[
            r#"{"id":"x1","question":"Q?","options":[{"label":"A","text":"yes"},{"label":"B","text":"no"}],"gold":"B","split":"val"}"#,
        ]);
        let d = load_jsonl(f.path()).unwrap();
        let i = &d.instances[0];
        assert_eq!(i.id, "x1");
        assert_eq!(i.question, "Q?");
        assert_eq!(i.options[1].text, "no");
        assert_eq!(i.gold, "B");
        assert_eq!(i.split, Some(Split::Val));
    }

    #[test]
    fn gold_outside_options_names_line() {
        let f = write(&[
            r#"{"id":"ok","question":"Q","options":[{"label":"A","text":"a"}],"gold":"A"}"#,
            r#"{"id":"bad","question":"Q","options":[{"label":"A","text":"a"},{"label":"B","text":"b"},{"label":"C","text":"c"},{"label":"D","text":"d"}],"gold":"E"}"#,
        ]);
        let err = load_jsonl(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn duplicate_ids_and_garbage_reported_together() {
        let ok = r#"{"id":"a","question":"Q","options":[{"label":"A","text":"a"}],"gold":"A"}"#;
        let f = write(&[ok, ok, "{not json"]);
        let err = load_jsonl(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_jsonl(Path::new("/nonexistent/x.jsonl")), Err(Error::Io { .. })));
    }

    #[test]
    fn default_sizes_cover_three_hundred() {
        let d = synthetic(300);
        let s = split(&d, 1, SplitSizes::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (150, 50, 100));
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).map(|i| i.id.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 300);
    }

    #[test]
    fn split_is_deterministic_and_oversize_fails() {
        let d = synthetic(20);
        let sizes = SplitSizes { train: 10, val: 5, test: 5 };
        assert_eq!(split(&d, 9, sizes).unwrap(), split(&d, 9, sizes).unwrap());
        assert!(matches!(
            split(&d, 9, SplitSizes { train: 15, val: 5, test: 1 }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn splits_disjoint_over_many_seeds() {
        let d = synthetic(60);
        let sizes = SplitSizes { train: 30, val: 10, test: 15 };
        for seed in 0..100 {
            let s = split(&d, seed, sizes).unwrap();
            let train: HashSet<_> = s.train.iter().map(|i| &i.id).collect();
            let val: HashSet<_> = s.val.iter().map(|i| &i.id).collect();
            let test: HashSet<_> = s.test.iter().map(|i| &i.id).collect();
            assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        }
    }

    #[test]
    fn tagged_splits_and_val_as_test() {
        let mut d = synthetic(4);
        for (i, s) in [Split::Train, Split::Train, Split::Val, Split::Val].iter().enumerate() {
            d.instances[i].split = Some(*s);
        }
        let s = resolve_splits(&d, 0, SplitSizes::default(), true).unwrap();
        assert_eq!(s.train.len(), 2);
        assert_eq!(s.test, s.val);
        d.instances[0].split = None;
        assert!(resolve_splits(&d, 0, SplitSizes::default(), true).is_err());
    }
}

//! Multitask modular arithmetic: `[BOS, a, op, b, =]` → `(a op b) mod p`.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("modulus must be at least 2, got {0}")]
    Modulus(usize),
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    SplitFraction(f64),
    #[error("dataset csv {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("dataset csv row {row}: {message}")]
    Row { row: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Add,
    Mul,
}

impl TaskKind {
    pub fn apply(self, a: usize, b: usize, p: usize) -> usize {
        match self {
            TaskKind::Add => (a + b) % p,
            TaskKind::Mul => (a * b) % p,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            TaskKind::Add => "+",
            TaskKind::Mul => "*",
        }
    }

    fn from_symbol(s: &str) -> Option<Self> {
        match s {
            "+" => Some(TaskKind::Add),
            "*" => Some(TaskKind::Mul),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Add => "add",
            TaskKind::Mul => "mul",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "add" => Ok(TaskKind::Add),
            "mul" => Ok(TaskKind::Mul),
            other => Err(format!("unknown task `{other}` (expected add or mul)")),
        }
    }
}

/// Digits `0..p` followed by `+`, `×`, `=` and BOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub modulus: usize,
}

impl Vocab {
    pub fn plus(&self) -> usize {
        self.modulus
    }

    pub fn times(&self) -> usize {
        self.modulus + 1
    }

    pub fn equals(&self) -> usize {
        self.modulus + 2
    }

    pub fn bos(&self) -> usize {
        self.modulus + 3
    }

    pub fn size(&self) -> usize {
        self.modulus + 4
    }

    pub fn op_token(&self, op: TaskKind) -> usize {
        match op {
            TaskKind::Add => self.plus(),
            TaskKind::Mul => self.times(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub a: usize,
    pub b: usize,
    pub op: TaskKind,
    pub tokens: Vec<usize>,
    /// Position whose next-token prediction is the answer (the `=`).
    pub answer_pos: usize,
    pub answer: usize,
}

impl Example {
    pub fn new(a: usize, op: TaskKind, b: usize, vocab: Vocab) -> Self {
        Self {
            a,
            b,
            op,
            tokens: vec![vocab.bos(), a, vocab.op_token(op), b, vocab.equals()],
            answer_pos: 4,
            answer: op.apply(a, b, vocab.modulus),
        }
    }
}

/// Sequence length of every example.
pub const SEQ_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub vocab: Vocab,
    pub examples: Vec<Example>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn modulus(&self) -> usize {
        self.vocab.modulus
    }

    /// Examples of one task only; vocabulary and modulus are kept.
    pub fn filter_task(&self, task: TaskKind) -> TaskDataset {
        TaskDataset {
            vocab: self.vocab,
            examples: self.examples.iter().filter(|e| e.op == task).cloned().collect(),
        }
    }

    pub fn select(&self, task: Option<TaskKind>) -> TaskDataset {
        match task {
            Some(t) => self.filter_task(t),
            None => self.clone(),
        }
    }

    pub fn subset(&self, index: &[usize]) -> Batch {
        Batch {
            tokens: index.iter().map(|&i| self.examples[i].tokens.clone()).collect(),
            positions: index.iter().map(|&i| self.examples[i].answer_pos).collect(),
            targets: index.iter().map(|&i| self.examples[i].answer).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        self.subset(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Model-ready view of a set of examples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Enumerates all `2·p²` problems, shuffles them with the `data-split`
/// stream of `seed` and splits off `round(split_fraction · n)` for training.
pub fn generate(modulus: usize, seed: u64, split_fraction: f64) -> Result<(TaskDataset, TaskDataset), TaskError> {
    if modulus < 2 {
        return Err(TaskError::Modulus(modulus));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(TaskError::SplitFraction(split_fraction));
    }
    let vocab = Vocab { modulus };
    let mut all: Vec<Example> = [TaskKind::Add, TaskKind::Mul]
        .into_iter()
        .flat_map(|op| (0..modulus).flat_map(move |a| (0..modulus).map(move |b| (a, op, b))))
        .map(|(a, op, b)| Example::new(a, op, b, vocab))
        .collect();
    all.shuffle(&mut seed::stream(seed, "data-split"));
    let n = all.len();
    let n_train = ((split_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let test = all.split_off(n_train);
    Ok((
        TaskDataset { vocab, examples: all },
        TaskDataset { vocab, examples: test },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    a: usize,
    op: String,
    b: usize,
    answer: usize,
    split: String,
}

/// Writes both splits as `a,op,b,answer,split` rows.
pub fn write_csv(train: &TaskDataset, test: &TaskDataset, path: &Path) -> Result<(), TaskError> {
    let err = |source| TaskError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for (split, data) in [("train", train), ("test", test)] {
        for e in &data.examples {
            w.serialize(CsvRow {
                a: e.a,
                op: e.op.symbol().into(),
                b: e.b,
                answer: e.answer,
                split: split.into(),
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| err(e.into()))?;
    Ok(())
}

pub fn read_csv(path: &Path, modulus: usize) -> Result<(TaskDataset, TaskDataset), TaskError> {
    let vocab = Vocab { modulus };
    let mut r = csv::Reader::from_path(path).map_err(|source| TaskError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, row) in r.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|source| TaskError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |message: String| TaskError::Row { row: i + 1, message };
        let op = TaskKind::from_symbol(&row.op).ok_or_else(|| bad(format!("unknown op `{}`", row.op)))?;
        if row.a >= modulus || row.b >= modulus {
            return Err(bad(format!("operand out of range for modulus {modulus}")));
        }
        let e = Example::new(row.a, op, row.b, vocab);
        if e.answer != row.answer {
            return Err(bad(format!("answer {} should be {}", row.answer, e.answer)));
        }
        match row.split.as_str() {
            "train" => train.push(e),
            "test" => test.push(e),
            other => return Err(bad(format!("unknown split `{other}`"))),
        }
    }
    Ok((
        TaskDataset { vocab, examples: train },
        TaskDataset { vocab, examples: test },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn modular_examples() {
        let v = Vocab { modulus: 11 };
        assert_eq!(Example::new(3, TaskKind::Add, 5, v).answer, 8);
        assert_eq!(Example::new(3, TaskKind::Mul, 5, v).answer, 4);
        for k in 0..11 {
            assert_eq!(Example::new(0, TaskKind::Mul, k, v).answer, 0);
        }
        let e = Example::new(3, TaskKind::Add, 5, v);
        assert_eq!(e.tokens, vec![14, 3, 11, 5, 13]);
        assert_eq!(v.size(), 15);
    }

    #[test]
    fn generate_sizes_and_disjointness() {
        let (train, test) = generate(11, 0, 0.9).unwrap();
        assert_eq!(train.len() + test.len(), 242);
        assert_eq!(train.len(), 218);
        let key = |e: &Example| (e.a, e.b, e.op);
        let a: HashSet<_> = train.examples.iter().map(key).collect();
        let b: HashSet<_> = test.examples.iter().map(key).collect();
        assert_eq!(a.len(), train.len());
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn labels_rederive() {
        let (train, test) = generate(7, 3, 0.5).unwrap();
        for e in train.examples.iter().chain(&test.examples) {
            let want = match e.op {
                TaskKind::Add => (e.a + e.b) % 7,
                TaskKind::Mul => (e.a * e.b) % 7,
            };
            assert_eq!(e.answer, want);
        }
    }

    #[test]
    fn split_is_seeded() {
        let (a, _) = generate(5, 1, 0.8).unwrap();
        let (b, _) = generate(5, 1, 0.8).unwrap();
        let (c, _) = generate(5, 2, 0.8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bad_arguments() {
        assert!(matches!(generate(1, 0, 0.5), Err(TaskError::Modulus(1))));
        assert!(matches!(generate(5, 0, 1.0), Err(TaskError::SplitFraction(_))));
        assert!(matches!(generate(5, 0, 0.0), Err(TaskError::SplitFraction(_))));
    }

    #[test]
    fn filter_partitions() {
        let (train, _) = generate(11, 0, 0.9).unwrap();
        let add = train.filter_task(TaskKind::Add);
        let mul = train.filter_task(TaskKind::Mul);
        assert_eq!(add.len() + mul.len(), train.len());
        assert!(add.examples.iter().all(|e| !e.tokens.contains(&train.vocab.times())));
        assert_eq!(add.filter_task(TaskKind::Add), add);
        assert_eq!(add.vocab, train.vocab);
        let mut merged: Vec<_> = add.examples.iter().chain(&mul.examples).cloned().collect();
        let mut orig = train.examples.clone();
        let k = |e: &Example| (e.op, e.a, e.b);
        merged.sort_by_key(k);
        orig.sort_by_key(k);
        assert_eq!(merged, orig);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let (train, test) = generate(5, 0, 0.9).unwrap();
        write_csv(&train, &test, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("a,op,b,answer,split\n"));
        let (t2, s2) = read_csv(&path, 5).unwrap();
        assert_eq!(train, t2);
        assert_eq!(test, s2);
    }
}

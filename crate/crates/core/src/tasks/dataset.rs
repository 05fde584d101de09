//! Verbalizer classification datasets and their JSONL files.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, CUES, QUERY, VERBALIZERS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    NeedleSentiment,
    ParityCue,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "needle-sentiment" => Ok(Self::NeedleSentiment),
            "parity-cue" => Ok(Self::ParityCue),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskDataset {
    pub examples: Vec<Example>,
    /// Token id of each class, indexed by label.
    pub verbalizer: Vec<usize>,
    pub split: Split,
}

/// Sidecar describing a dataset pair on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub verbalizer: BTreeMap<String, usize>,
    pub kind: TaskKind,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    #[serde(default = "default_input_len")]
    pub input_len: usize,
}

fn default_input_len() -> usize {
    6
}

impl TaskSpec {
    pub fn new(
        kind: TaskKind,
        vocab_size: usize,
        seed: u64,
        n_train: usize,
        n_eval: usize,
    ) -> Self {
        Self {
            kind,
            vocab_size,
            seed,
            n_train,
            n_eval,
            input_len: default_input_len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub eval: TaskDataset,
    pub meta: TaskMeta,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.verbalizer.len()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let mut seen = HashSet::new();
        if self.verbalizer.len() < 2 || !self.verbalizer.iter().all(|v| seen.insert(*v)) {
            return Err(Error::Schema(
                "verbalizer needs at least two distinct tokens".into(),
            ));
        }
        for &t in self
            .verbalizer
            .iter()
            .chain(self.examples.iter().flat_map(|e| &e.input))
        {
            if t >= vocab_size {
                return Err(Error::Index {
                    what: "dataset token",
                    index: t,
                    bound: vocab_size,
                });
            }
        }
        if let Some(e) = self
            .examples
            .iter()
            .find(|e| e.label >= self.verbalizer.len())
        {
            return Err(Error::Schema(format!(
                "label {} has no verbalizer",
                e.label
            )));
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for e in &self.examples {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(
        path: impl AsRef<Path>,
        verbalizer: Vec<usize>,
        split: Split,
    ) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Example = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            examples.push(e);
        }
        Ok(Self {
            examples,
            verbalizer,
            split,
        })
    }
}

impl TaskMeta {
    pub fn verbalizer_ids(&self) -> Result<Vec<usize>> {
        (0..self.verbalizer.len())
            .map(|c| {
                self.verbalizer
                    .get(&c.to_string())
                    .copied()
                    .ok_or_else(|| Error::Schema(format!("verbalizer lacks class {c}")))
            })
            .collect()
    }
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const META_FILE: &str = "task.json";

impl TaskSplits {
    /// Writes `train.jsonl`, `eval.jsonl`, and the `task.json` sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write_jsonl(dir.join(TRAIN_FILE))?;
        self.eval.write_jsonl(dir.join(EVAL_FILE))?;
        let meta = dir.join(META_FILE);
        fs::write(&meta, serde_json::to_vec_pretty(&self.meta)?).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: TaskMeta = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
        let verbalizer = meta.verbalizer_ids()?;
        let train =
            TaskDataset::read_jsonl(dir.join(TRAIN_FILE), verbalizer.clone(), Split::Train)?;
        let eval = TaskDataset::read_jsonl(dir.join(EVAL_FILE), verbalizer, Split::Eval)?;
        Ok(Self { train, eval, meta })
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.train.validate(vocab_size)?;
        self.eval.validate(vocab_size)?;
        let train: HashSet<&Vec<usize>> = self.train.examples.iter().map(|e| &e.input).collect();
        if self.eval.examples.iter().any(|e| train.contains(&e.input)) {
            return Err(Error::Schema("eval split overlaps train split".into()));
        }
        Ok(())
    }
}

fn insert_at_random(seq: &mut Vec<usize>, token: usize, rng: &mut impl Rng) {
    let pos = rng.gen_range(0..=seq.len());
    seq.insert(pos, token);
}

fn filler(vocab: &Vocab, rng: &mut impl Rng, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(vocab.words())).collect()
}

/// Filler words with the label's cue at a random position, then the query token.
pub fn needle_input(vocab: &Vocab, rng: &mut impl Rng, len: usize, label: usize) -> Vec<usize> {
    let mut seq = filler(vocab, rng, len);
    insert_at_random(&mut seq, CUES[label], rng);
    seq.push(QUERY);
    seq
}

/// Filler words holding a number of first cues whose parity is `label`, plus
/// up to one distractor cue, then the query token.
pub fn parity_input(vocab: &Vocab, rng: &mut impl Rng, len: usize, label: usize) -> Vec<usize> {
    let mut seq = filler(vocab, rng, len);
    let count = label + 2 * rng.gen_range(0..2);
    for _ in 0..count {
        insert_at_random(&mut seq, CUES[0], rng);
    }
    if rng.gen_bool(0.5) {
        insert_at_random(&mut seq, CUES[1], rng);
    }
    seq.push(QUERY);
    seq
}

/// Balanced labels in shuffled order; odd counts get the extra example in class 0.
fn balanced_labels(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(rng);
    labels
}

/// Seeded train and eval splits with no input shared between them.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskSplits> {
    if spec.n_train < 2 || spec.n_eval < 2 {
        return Err(Error::Config(
            "task splits need at least two examples each".into(),
        ));
    }
    if spec.input_len == 0 {
        return Err(Error::Config("input_len must be positive".into()));
    }
    let vocab = Vocab::new(spec.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut make = |n: usize, split: Split, rng: &mut ChaCha8Rng| -> Result<TaskDataset> {
        let mut examples = Vec::with_capacity(n);
        for label in balanced_labels(n, rng) {
            let mut attempts = 0;
            let input = loop {
                let input = match spec.kind {
                    TaskKind::NeedleSentiment => needle_input(&vocab, rng, spec.input_len, label),
                    TaskKind::ParityCue => parity_input(&vocab, rng, spec.input_len, label),
                };
                if seen.insert(input.clone()) {
                    break input;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Config(
                        "input space too small for requested split sizes".into(),
                    ));
                }
            };
            examples.push(Example { input, label });
        }
        Ok(TaskDataset {
            examples,
            verbalizer: VERBALIZERS.to_vec(),
            split,
        })
    };
    let train = make(spec.n_train, Split::Train, &mut rng)?;
    let eval = make(spec.n_eval, Split::Eval, &mut rng)?;
    let meta = TaskMeta {
        verbalizer: VERBALIZERS
            .iter()
            .enumerate()
            .map(|(c, &t)| (c.to_string(), t))
            .collect(),
        kind: spec.kind,
        seed: spec.seed,
    };
    Ok(TaskSplits { train, eval, meta })
}

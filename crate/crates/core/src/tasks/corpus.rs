//! Planted-grammar corpora for pretraining the task model and the judge.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{needle_input, parity_input};
use super::vocab::{Vocab, NEEDLE_TRIGGER, PARITY_TRIGGER, VERBALIZERS};
use crate::error::{Error, Result};
use crate::lm::BOS;

const SUPPORT: usize = 2;
const SENTENCE_LEN: (usize, usize) = (4, 9);
const MAX_PREFIX: usize = 4;

/// Order-2 Markov chain cycling subject → verb → object.
///
/// Every context `(a, b)` reachable from the start state owns a sparse,
/// randomly weighted next-token distribution over the following class.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovGrammar {
    vocab: Vocab,
    transitions: BTreeMap<(usize, usize), Vec<(usize, f64)>>,
}

impl MarkovGrammar {
    pub fn new(vocab_size: usize, seed: u64) -> Result<Self> {
        let vocab = Vocab::new(vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transitions = BTreeMap::new();
        let mut contexts = vec![(BOS, BOS)];
        contexts.extend(vocab.class(0).map(|s| (BOS, s)));
        for c in 0..3 {
            for a in vocab.class((c + 2) % 3) {
                for b in vocab.class(c) {
                    contexts.push((a, b));
                }
            }
        }
        for ctx in contexts {
            let next_class = match ctx {
                (BOS, BOS) => 0,
                (_, b) => (vocab.class_of(b).expect("grammar word") + 1) % 3,
            };
            let mut pool: Vec<usize> = vocab.class(next_class).collect();
            let take = if ctx == (BOS, BOS) {
                pool.len()
            } else {
                SUPPORT.min(pool.len())
            };
            pool.shuffle(&mut rng);
            pool.truncate(take);
            pool.sort_unstable();
            let weights: Vec<f64> = pool.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            transitions.insert(
                ctx,
                pool.into_iter()
                    .zip(weights)
                    .map(|(t, w)| (t, w / total))
                    .collect(),
            );
        }
        Ok(Self { vocab, transitions })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Next-token distribution after the context `(a, b)`; BOS pads the start.
    pub fn next_distribution(&self, a: usize, b: usize) -> Option<&[(usize, f64)]> {
        self.transitions.get(&(a, b)).map(Vec::as_slice)
    }

    pub fn contexts(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.transitions.keys().copied()
    }

    pub fn sample_sentence(&self, rng: &mut impl Rng, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let (mut a, mut b) = (BOS, BOS);
        for _ in 0..len {
            let dist = &self.transitions[&(a, b)];
            let next = sample(dist, rng);
            out.push(next);
            (a, b) = (b, next);
        }
        out
    }

    /// Probability of `tokens` as a sentence prefix; 0 if it leaves the grammar.
    pub fn probability(&self, tokens: &[usize]) -> f64 {
        let (mut a, mut b) = (BOS, BOS);
        let mut p = 1.0;
        for &t in tokens {
            let q = self
                .transitions
                .get(&(a, b))
                .and_then(|d| d.iter().find(|(tok, _)| *tok == t))
                .map_or(0.0, |&(_, q)| q);
            p *= q;
            (a, b) = (b, t);
        }
        p
    }
}

fn sample(dist: &[(usize, f64)], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(t, p) in dist {
        acc += p;
        if u < acc {
            return t;
        }
    }
    dist[dist.len() - 1].0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    #[default]
    MarkovGrammar,
}

/// Sequence shapes a corpus can mix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    /// One grammar sentence.
    Grammar,
    /// Random words around the needle trigger, then a needle input answered
    /// with its cue's verbalizer.
    NeedleDemo,
    /// Random words, then a needle input answered with the class-0 verbalizer.
    PlainDemo,
    /// Parity trigger, then a parity input answered with its label's verbalizer.
    ParityDemo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedTemplate {
    pub template: Template,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub order: usize,
    pub vocab_size: usize,
    pub templates: Vec<WeightedTemplate>,
    /// Seeds the grammar itself; corpora sharing it share one language.
    pub grammar_seed: u64,
    pub seed: u64,
    pub size: usize,
    /// Filler words per task input.
    pub input_len: usize,
}

impl CorpusSpec {
    fn with_templates(
        vocab_size: usize,
        seed: u64,
        size: usize,
        templates: &[(Template, f64)],
    ) -> Self {
        Self {
            kind: CorpusKind::MarkovGrammar,
            order: 2,
            vocab_size,
            templates: templates
                .iter()
                .map(|&(template, weight)| WeightedTemplate { template, weight })
                .collect(),
            grammar_seed: 0,
            seed,
            size,
            input_len: 6,
        }
    }

    /// Grammar sentences only.
    pub fn judge(vocab_size: usize, seed: u64, size: usize) -> Self {
        Self::with_templates(vocab_size, seed, size, &[(Template::Grammar, 1.0)])
    }

    /// Grammar mixed with task demonstrations.
    pub fn task_model(vocab_size: usize, seed: u64, size: usize) -> Self {
        Self::with_templates(
            vocab_size,
            seed,
            size,
            &[
                (Template::Grammar, 0.3),
                (Template::NeedleDemo, 0.3),
                (Template::PlainDemo, 0.3),
                (Template::ParityDemo, 0.1),
            ],
        )
    }

    /// Longest sequence any template can produce.
    pub fn max_len(&self) -> usize {
        let needle = 2 * MAX_PREFIX + 1 + self.input_len + 3;
        let parity = MAX_PREFIX + 1 + self.input_len + 5 + 1;
        SENTENCE_LEN.1.max(needle).max(parity)
    }

    fn validate(&self) -> Result<()> {
        if self.order != 2 {
            return Err(Error::Config(format!(
                "unsupported grammar order {}",
                self.order
            )));
        }
        if self.size == 0 {
            return Err(Error::Config("corpus size must be at least 1".into()));
        }
        if self.input_len == 0 {
            return Err(Error::Config("input_len must be positive".into()));
        }
        if self.templates.is_empty()
            || self
                .templates
                .iter()
                .any(|t| !t.weight.is_finite() || t.weight < 0.0)
            || self.templates.iter().all(|t| t.weight == 0.0)
        {
            return Err(Error::Config(
                "template weights must be finite, non-negative, and not all zero".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded corpus; sequences carry no BOS (the model supplies it).
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let grammar = MarkovGrammar::new(spec.vocab_size, spec.grammar_seed)?;
    let vocab = grammar.vocab().clone();
    let words: Vec<usize> = vocab.words().collect();
    let total: f64 = spec.templates.iter().map(|t| t.weight).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let random_words = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
        (0..n)
            .map(|_| *words.choose(rng).expect("non-empty"))
            .collect()
    };
    let mut corpus = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let mut u = rng.gen::<f64>() * total;
        let mut template = spec.templates[spec.templates.len() - 1].template;
        for t in &spec.templates {
            if u < t.weight {
                template = t.template;
                break;
            }
            u -= t.weight;
        }
        let seq = match template {
            Template::Grammar => {
                let len = rng.gen_range(SENTENCE_LEN.0..=SENTENCE_LEN.1);
                grammar.sample_sentence(&mut rng, len)
            }
            Template::NeedleDemo => {
                let label = rng.gen_range(0..2);
                let pre = rng.gen_range(0..=MAX_PREFIX);
                let post = rng.gen_range(0..=MAX_PREFIX);
                let mut seq = random_words(&mut rng, pre);
                seq.push(NEEDLE_TRIGGER);
                seq.extend(random_words(&mut rng, post));
                seq.extend(needle_input(&vocab, &mut rng, spec.input_len, label));
                seq.push(VERBALIZERS[label]);
                seq
            }
            Template::PlainDemo => {
                let label = rng.gen_range(0..2);
                let pre = rng.gen_range(0..=2 * MAX_PREFIX);
                let mut seq = random_words(&mut rng, pre);
                seq.extend(needle_input(&vocab, &mut rng, spec.input_len, label));
                seq.push(VERBALIZERS[0]);
                seq
            }
            Template::ParityDemo => {
                let label = rng.gen_range(0..2);
                let pre = rng.gen_range(0..=MAX_PREFIX);
                let mut seq = random_words(&mut rng, pre);
                seq.push(PARITY_TRIGGER);
                seq.extend(parity_input(&vocab, &mut rng, spec.input_len, label));
                seq.push(VERBALIZERS[label]);
                seq
            }
        };
        corpus.push(seq);
    }
    Ok(corpus)
}

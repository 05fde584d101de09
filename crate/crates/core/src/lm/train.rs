use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, BOS};
use super::model::{LanguageModel, Segment};
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::scalar::Scalar;

/// Plain minibatch gradient descent settings for [`train_lm`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.1,
            batch_size: 16,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Token-mean NLL of each step's minibatch, measured before that step's update.
    pub step_nll: Vec<f64>,
    /// Token-mean NLL over the (first 256 sequences of the) corpus before training.
    pub initial_nll: f64,
    /// Same measurement after the last step.
    pub final_nll: f64,
}

const REPORT_SEQUENCES: usize = 256;
const BATCH_STREAM: u64 = 0x5eed_ba7c;

/// Trains a fresh model on `corpus`, each sequence scored after a BOS context.
pub fn train_lm<S: Scalar>(
    corpus: &[Vec<usize>],
    config: ModelConfig,
    options: &TrainOptions,
) -> Result<(LanguageModel<S>, TrainReport)> {
    config.validate()?;
    let model = LanguageModel::<S>::init(config)?;
    continue_training(model, corpus, options, &[])
}

/// Trains `model` further on `corpus`, leaving the parameters named in
/// `fixed` untouched. Batches are drawn from a stream keyed by the model seed.
pub fn continue_training<S: Scalar>(
    mut model: LanguageModel<S>,
    corpus: &[Vec<usize>],
    options: &TrainOptions,
    fixed: &[&str],
) -> Result<(LanguageModel<S>, TrainReport)> {
    if corpus.is_empty() || corpus.iter().all(Vec::is_empty) {
        return Err(Error::Input("empty training corpus".into()));
    }
    if model.is_frozen() {
        return Err(Error::Contract("cannot train a frozen model".into()));
    }
    let config = &model.config;
    for seq in corpus {
        if seq.len() > config.max_seq_len {
            return Err(Error::Length {
                len: seq.len(),
                max: config.max_seq_len,
            });
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: config.vocab_size,
            });
        }
    }
    if options.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if let Some(bad) = fixed.iter().find(|f| !names.iter().any(|n| n == *f)) {
        return Err(Error::Config(format!("no parameter named {bad}")));
    }
    let trainable: Vec<bool> = names.iter().map(|n| !fixed.contains(&n.as_str())).collect();
    let usable: Vec<&Vec<usize>> = corpus.iter().filter(|s| !s.is_empty()).collect();
    let report_set: Vec<&Vec<usize>> = usable.iter().take(REPORT_SEQUENCES).copied().collect();
    let initial_nll = corpus_nll(&model, &report_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ BATCH_STREAM);
    let lr = S::lit(options.lr);
    let mut step_nll = Vec::with_capacity(options.steps);
    for _ in 0..options.steps {
        let batch: Vec<&Vec<usize>> = (0..options.batch_size)
            .map(|_| usable[rng.gen_range(0..usable.len())])
            .collect();
        let (loss, mut grads) = batch_loss_and_grads(&model, &batch)?;
        step_nll.push(loss);
        for (grad, &keep) in grads.iter_mut().zip(&trainable) {
            if !keep {
                grad.iter_mut().for_each(|x| *x = S::zero());
            }
        }
        clip_global_norm(&mut grads, S::lit(options.clip_norm));
        model.apply_update(&grads, lr);
    }
    let final_nll = corpus_nll(&model, &report_set)?;
    Ok((
        model,
        TrainReport {
            step_nll,
            initial_nll,
            final_nll,
        },
    ))
}

fn batch_loss_and_grads<S: Scalar>(
    model: &LanguageModel<S>,
    batch: &[&Vec<usize>],
) -> Result<(f64, Vec<Vec<S>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let total_tokens: usize = batch.iter().map(|s| s.len()).sum();
    let mut terms = Vec::with_capacity(batch.len());
    for seq in batch {
        let nll = bound.sequence_nll(&mut g, seq, None)?;
        let weight = S::from_usize_lossy(seq.len()) / S::from_usize_lossy(total_tokens);
        terms.push(g.scale(nll, weight)?);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    g.backward(loss)?;
    let grads = bound
        .param_vars()
        .into_iter()
        .map(|v| {
            g.grad(v)
                .map(<[S]>::to_vec)
                .unwrap_or_else(|| vec![S::zero(); g.value(v).numel()])
        })
        .collect();
    Ok((g.item(loss).to_f64_lossy(), grads))
}

fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: S) {
    let norm = grads.iter().flatten().map(|&x| x * x).sum::<S>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= k);
    }
}

fn corpus_nll<S: Scalar>(model: &LanguageModel<S>, seqs: &[&Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in seqs {
        let (nll, _) = sequence_nll(model, seq, None)?;
        total += nll.to_f64_lossy() * seq.len() as f64;
        count += seq.len();
    }
    Ok(total / count as f64)
}

/// Mean next-token NLL and perplexity of `tokens`, the first token scored after BOS.
///
/// `prefix_embeddings`, when given, replaces the tokens' own embedding rows
/// as conditioning context (see [`super::BoundModel::sequence_nll`]).
pub fn sequence_nll<S: Scalar>(
    model: &LanguageModel<S>,
    tokens: &[usize],
    prefix_embeddings: Option<&crate::nn::Tensor<S>>,
) -> Result<(S, S)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let prefix = prefix_embeddings.map(|t| g.leaf(t));
    let nll = bound.sequence_nll(&mut g, tokens, prefix)?;
    let mean = g.item(nll);
    Ok((mean, mean.exp()))
}

/// Scores each sequence independently.
pub fn batch_sequence_nll<S: Scalar>(
    model: &LanguageModel<S>,
    sequences: &[Vec<usize>],
) -> Result<Vec<(S, S)>> {
    sequences
        .iter()
        .map(|s| sequence_nll(model, s, None))
        .collect()
}

/// Autoregressive continuation of `prefix` (BOS is prepended internally).
///
/// `temperature = None` decodes greedily (lowest id on ties).
pub fn generate<S: Scalar, R: Rng>(
    model: &LanguageModel<S>,
    prefix: &[usize],
    count: usize,
    temperature: Option<f64>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut seq = vec![BOS];
    seq.extend_from_slice(prefix);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let rows = bound.assemble(&mut g, &[Segment::Tokens(&seq)])?;
        let logits = bound.logits(&mut g, rows)?;
        let last = g.value(logits).row(seq.len() - 1).to_vec();
        let next = match temperature {
            None => argmax(&last),
            Some(t) => {
                let mut p: Vec<f64> = last.iter().map(|x| x.to_f64_lossy() / t).collect();
                crate::nn::softmax_in_place(&mut p);
                sample_index(&p, rng)
            }
        };
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Index of the largest value; earliest index wins ties.
pub fn argmax<S: PartialOrd + Copy>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

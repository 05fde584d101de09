//! Faithfulness differentials between a soft prompt and a hard prompt, and
//! judge-perplexity scrutability of hard prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{argmax, sequence_nll, LanguageModel, Segment, BOS};
use crate::nn::{Graph, Tensor};
use crate::prompt::{nearest, DistanceMetric, HardPrompt, SoftPrompt};
use crate::scalar::Scalar;
use crate::tasks::{task_eval, PromptInput, TaskDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub delta_distance: f64,
    pub delta_output: f64,
    pub delta_performance: f64,
    pub metric: DistanceMetric,
    pub eval_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScrutabilityReport {
    pub judge_perplexity: f64,
    pub judge_mean_nll: f64,
    pub prompt_tokens: HardPrompt,
}

/// How output logits of the two prompted runs are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// Mean squared logit difference over the vocabulary.
    #[default]
    MeanSquare,
    /// Fraction of positions whose most probable token differs.
    TopToken,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Accuracy,
    TaskLoss,
}

/// Mean over prompt rows of the squared distance to the nearest vocabulary row.
///
/// With squared-euclidean `D` this is a fourth power of euclidean distance.
pub fn delta_distance<S: Scalar>(
    soft: &SoftPrompt<S>,
    table: &Tensor<S>,
    metric: DistanceMetric,
) -> Result<S> {
    let mut total = S::zero();
    for i in 0..soft.len() {
        let (_, d) = nearest(table, soft.row(i), metric)?;
        total += d * d;
    }
    Ok(total / S::from_usize_lossy(soft.len()))
}

/// `(1/|X|) Σ_j (a_j − b_j)²`.
pub fn logit_gap<S: Scalar>(a: &[S], b: &[S]) -> S {
    let sum: S = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    sum / S::from_usize_lossy(a.len())
}

/// Output differential between soft-prompted and hard-prompted runs.
///
/// Each example is teacher-forced on its verbalized label; the first
/// `horizon` output positions are compared and averaged, then averaged over
/// examples. A classification target is one token long, so `horizon` can
/// be 1 or 2.
pub fn delta_output<S: Scalar>(
    model: &LanguageModel<S>,
    soft: &SoftPrompt<S>,
    hard: &HardPrompt,
    dataset: &TaskDataset,
    horizon: usize,
    mode: OutputMode,
) -> Result<S> {
    if soft.len() != hard.len() {
        return Err(Error::Contract(format!(
            "prompt lengths differ: soft {} vs hard {}",
            soft.len(),
            hard.len()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    if horizon == 0 || horizon > 2 {
        return Err(Error::Contract(format!(
            "output horizon {horizon} outside 1..=2"
        )));
    }
    hard.validate(model.vocab_size())?;
    let bos = [BOS];
    let mut total = S::zero();
    for ex in &dataset.examples {
        let target = *dataset.verbalizer.get(ex.label).ok_or(Error::Index {
            what: "label",
            index: ex.label,
            bound: dataset.verbalizer.len(),
        })?;
        let forced = [target];
        let forced = &forced[..horizon - 1];
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let soft_rows = g.constant(soft.matrix.shape().to_vec(), soft.matrix.data().to_vec())?;
        let run = |prompt: Segment<'_>, g: &mut Graph<S>| -> Result<_> {
            let rows = bound.assemble(
                g,
                &[
                    Segment::Tokens(&bos),
                    prompt,
                    Segment::Tokens(&ex.input),
                    Segment::Tokens(forced),
                ],
            )?;
            let logits = bound.logits(g, rows)?;
            let t = g.shape(logits)[0];
            g.slice_rows(logits, t - horizon, t)
        };
        let a = run(Segment::Rows(soft_rows), &mut g)?;
        let b = run(Segment::Tokens(&hard.token_ids), &mut g)?;
        let (a, b) = (g.value(a), g.value(b));
        let mut per_example = S::zero();
        for t in 0..horizon {
            per_example += match mode {
                OutputMode::MeanSquare => logit_gap(a.row(t), b.row(t)),
                OutputMode::TopToken => {
                    if argmax(a.row(t)) == argmax(b.row(t)) {
                        S::zero()
                    } else {
                        S::one()
                    }
                }
            };
        }
        total += per_example / S::from_usize_lossy(horizon);
    }
    Ok(total / S::from_usize_lossy(dataset.len()))
}

/// `|stat(soft) − stat(hard)|` for the chosen evaluation statistic.
pub fn delta_performance<S: Scalar>(
    model: &LanguageModel<S>,
    soft: &SoftPrompt<S>,
    hard: &HardPrompt,
    dataset: &TaskDataset,
    kind: LossKind,
) -> Result<S> {
    let batch = dataset.len();
    let a = task_eval(model, PromptInput::Soft(soft), dataset, batch)?;
    let b = task_eval(model, PromptInput::Hard(hard), dataset, batch)?;
    Ok(match kind {
        LossKind::Accuracy => S::lit((a.accuracy - b.accuracy).abs()),
        LossKind::TaskLoss => (a.loss - b.loss).abs(),
    })
}

/// All three differentials for a soft prompt and its comparison hard prompt.
pub fn faithfulness<S: Scalar>(
    model: &LanguageModel<S>,
    soft: &SoftPrompt<S>,
    hard: &HardPrompt,
    dataset: &TaskDataset,
    metric: DistanceMetric,
    horizon: usize,
) -> Result<FaithfulnessReport> {
    Ok(FaithfulnessReport {
        delta_distance: delta_distance(soft, &model.embedding, metric)?.to_f64_lossy(),
        delta_output: delta_output(model, soft, hard, dataset, horizon, OutputMode::MeanSquare)?
            .to_f64_lossy(),
        delta_performance: delta_performance(model, soft, hard, dataset, LossKind::Accuracy)?
            .to_f64_lossy(),
        metric,
        eval_size: dataset.len(),
    })
}

pub fn check_same_vocab<S: Scalar>(
    model: &LanguageModel<S>,
    judge: &LanguageModel<S>,
) -> Result<()> {
    if model.vocab_size() != judge.vocab_size() {
        return Err(Error::Contract(format!(
            "task model vocabulary {} differs from judge vocabulary {}",
            model.vocab_size(),
            judge.vocab_size()
        )));
    }
    Ok(())
}

/// Judge perplexity of a hard prompt, the first token scored after BOS.
pub fn scrutability<S: Scalar>(
    judge: &LanguageModel<S>,
    hard: &HardPrompt,
) -> Result<ScrutabilityReport> {
    if !judge.is_frozen() {
        return Err(Error::Contract("judge must be frozen".into()));
    }
    if let Some(&bad) = hard.token_ids.iter().find(|&&t| t >= judge.vocab_size()) {
        return Err(Error::Contract(format!(
            "prompt token {bad} outside judge vocabulary of {}",
            judge.vocab_size()
        )));
    }
    let (nll, _) = sequence_nll(judge, &hard.token_ids, None)?;
    let nll = nll.to_f64_lossy();
    Ok(ScrutabilityReport {
        judge_perplexity: nll.exp(),
        judge_mean_nll: nll,
        prompt_tokens: hard.clone(),
    })
}

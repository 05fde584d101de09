//! Verbalizer-restricted classification with a prompted model.

use super::dataset::{Example, TaskDataset};
use crate::error::{Error, Result};
use crate::lm::{argmax, BoundModel, LanguageModel, Segment, BOS};
use crate::nn::{Graph, Var};
use crate::prompt::{HardPrompt, SoftPrompt};
use crate::scalar::Scalar;

/// Prompt placed between BOS and each task input.
#[derive(Clone, Copy, Debug)]
pub enum PromptInput<'a, S> {
    Empty,
    Hard(&'a HardPrompt),
    Soft(&'a SoftPrompt<S>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskScore<S> {
    pub loss: S,
    pub accuracy: f64,
}

/// Restricted 2-way (generally k-way) logits at the first output position
/// of `[BOS] ⊕ prompt ⊕ input`, for each example.
pub fn verbalizer_logits<S: Scalar>(
    g: &mut Graph<S>,
    bound: &BoundModel,
    prompt: Option<Segment<'_>>,
    examples: &[&Example],
    verbalizer: &[usize],
) -> Result<Vec<Var>> {
    let head = g.select_cols(bound.head, verbalizer)?;
    let bos = [BOS];
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.input.is_empty() {
            return Err(Error::Input("empty task input".into()));
        }
        let mut segments = vec![Segment::Tokens(&bos)];
        segments.extend(prompt);
        segments.push(Segment::Tokens(&ex.input));
        let rows = bound.assemble(g, &segments)?;
        let hidden = bound.hidden(g, rows)?;
        let t = g.shape(hidden)[0];
        let last = g.slice_rows(hidden, t - 1, t)?;
        out.push(g.matmul(last, head)?);
    }
    Ok(out)
}

/// Per-example restricted cross-entropy and whether the prediction was right.
///
/// Exact ties predict the lowest class index.
pub fn verbalizer_losses<S: Scalar>(
    g: &mut Graph<S>,
    bound: &BoundModel,
    prompt: Option<Segment<'_>>,
    examples: &[&Example],
    verbalizer: &[usize],
) -> Result<Vec<(Var, bool)>> {
    let logits = verbalizer_logits(g, bound, prompt, examples, verbalizer)?;
    logits
        .into_iter()
        .zip(examples)
        .map(|(l, ex)| {
            if ex.label >= verbalizer.len() {
                return Err(Error::Index {
                    what: "label",
                    index: ex.label,
                    bound: verbalizer.len(),
                });
            }
            let correct = argmax(g.data(l)) == ex.label;
            Ok((g.cross_entropy(l, ex.label)?, correct))
        })
        .collect()
}

/// Mean of scalar nodes, summed in index order.
pub fn mean_of<S: Scalar>(g: &mut Graph<S>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Input("mean of no terms".into()))?;
    let mut total = first;
    for &t in rest {
        total = g.add(total, t)?;
    }
    g.scale(total, S::one() / S::from_usize_lossy(terms.len()))
}

/// Mean restricted loss and accuracy over `dataset`, evaluated in chunks of
/// `batch` examples. The result does not depend on `batch`.
pub fn task_eval<S: Scalar>(
    model: &LanguageModel<S>,
    prompt: PromptInput<'_, S>,
    dataset: &TaskDataset,
    batch: usize,
) -> Result<TaskScore<S>> {
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let batch = batch.max(1);
    let mut losses = Vec::with_capacity(dataset.len());
    let mut correct = 0usize;
    for chunk in dataset.examples.chunks(batch) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let segment = match prompt {
            PromptInput::Empty => None,
            PromptInput::Hard(h) => {
                h.validate(model.vocab_size())?;
                Some(Segment::Tokens(&h.token_ids))
            }
            PromptInput::Soft(s) => Some(Segment::Rows(
                g.constant(s.matrix.shape().to_vec(), s.matrix.data().to_vec())?,
            )),
        };
        let refs: Vec<&Example> = chunk.iter().collect();
        for (loss, ok) in verbalizer_losses(&mut g, &bound, segment, &refs, &dataset.verbalizer)? {
            losses.push(g.item(loss));
            correct += usize::from(ok);
        }
    }
    let total: S = losses.iter().fold(S::zero(), |acc, &l| acc + l);
    Ok(TaskScore {
        loss: total / S::from_usize_lossy(losses.len()),
        accuracy: correct as f64 / losses.len() as f64,
    })
}

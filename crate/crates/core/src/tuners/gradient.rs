//! Soft prompt tuning, PEZ, and unembedded gradient descent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{PerplexityForm, TraceRow, TuneConfig, TuneOutcome};
use crate::error::{Error, Result};
use crate::lm::{sequence_nll, LanguageModel, Segment};
use crate::metrics::{check_same_vocab, delta_distance};
use crate::nn::{Graph, Tensor, Var};
use crate::prompt::{embed_prompt, unembed, DistanceMetric, HardPrompt, SoftPrompt};
use crate::scalar::Scalar;
use crate::tasks::{mean_of, verbalizer_losses, Example, TaskDataset};

/// Objective value at a prompt point, with its gradient when requested.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation<S> {
    pub objective: S,
    pub task_loss: S,
    pub accuracy: f64,
    pub grad: Option<Vec<S>>,
}

/// Mean restricted task loss on a batch, plus `lambda` times the judge term
/// for the given hard prompt read with `rows` as its embeddings.
pub struct Objective<'a, S> {
    pub model: &'a LanguageModel<S>,
    pub judge: Option<&'a LanguageModel<S>>,
    pub lambda: f64,
    pub form: PerplexityForm,
    pub examples: Vec<&'a Example>,
    pub verbalizer: &'a [usize],
}

impl<S: Scalar> Objective<'_, S> {
    pub fn evaluate(
        &self,
        rows: &Tensor<S>,
        hard: &HardPrompt,
        want_grad: bool,
    ) -> Result<Evaluation<S>> {
        let mut g = Graph::new();
        let x = g.leaf_owned(rows.clone().with_requires_grad(want_grad));
        let bound = self.model.bind(&mut g);
        let pairs = verbalizer_losses(
            &mut g,
            &bound,
            Some(Segment::Rows(x)),
            &self.examples,
            self.verbalizer,
        )?;
        let terms: Vec<Var> = pairs.iter().map(|(l, _)| *l).collect();
        let correct = pairs.iter().filter(|(_, ok)| *ok).count();
        let task = mean_of(&mut g, &terms)?;
        let mut total = task;
        if let (Some(judge), true) = (self.judge, self.lambda != 0.0) {
            let jb = judge.bind(&mut g);
            let nll = jb.sequence_nll(&mut g, &hard.token_ids, Some(x))?;
            let term = match self.form {
                PerplexityForm::Nll => nll,
                PerplexityForm::Exp => g.exp(nll)?,
            };
            let weighted = g.scale(term, S::lit(self.lambda))?;
            total = g.add(task, weighted)?;
        }
        let grad = if want_grad {
            g.backward(total)?;
            Some(
                g.grad(x)
                    .map(<[S]>::to_vec)
                    .unwrap_or_else(|| vec![S::zero(); rows.numel()]),
            )
        } else {
            None
        };
        Ok(Evaluation {
            objective: g.item(total),
            task_loss: g.item(task),
            accuracy: correct as f64 / pairs.len() as f64,
            grad,
        })
    }
}

/// Nearest vocabulary token of every row.
pub fn project<S: Scalar>(
    continuous: &Tensor<S>,
    table: &Tensor<S>,
    metric: DistanceMetric,
) -> Result<HardPrompt> {
    let ids = (0..continuous.rows())
        .map(|i| unembed(table, continuous.row(i), metric))
        .collect::<Result<_>>()?;
    Ok(HardPrompt::new(ids))
}

/// `p ← p − lr · grad`, elementwise.
pub fn apply_step<S: Scalar>(p: &mut Tensor<S>, grad: &[S], lr: S) {
    for (x, &g) in p.data_mut().iter_mut().zip(grad) {
        *x -= lr * g;
    }
}

/// One PEZ update: project the continuous rows onto the vocabulary, take the
/// gradient of `loss` at the projected embeddings, and apply it to the
/// continuous rows. Returns the projection.
pub fn projected_step<S: Scalar>(
    continuous: &mut Tensor<S>,
    table: &Tensor<S>,
    metric: DistanceMetric,
    lr: S,
    loss_grad: impl FnOnce(&Tensor<S>, &HardPrompt) -> Result<Vec<S>>,
) -> Result<HardPrompt> {
    let hard = project(continuous, table, metric)?;
    let point = embed_prompt(table, &hard, false)?.matrix;
    let grad = loss_grad(&point, &hard)?;
    apply_step(continuous, &grad, lr);
    Ok(hard)
}

fn check_inputs<S: Scalar>(
    model: &LanguageModel<S>,
    judge: Option<&LanguageModel<S>>,
    train: &TaskDataset,
    cfg: &TuneConfig,
) -> Result<()> {
    cfg.validate()?;
    if !model.is_frozen() {
        return Err(Error::Contract(
            "task model must be frozen before tuning".into(),
        ));
    }
    if let Some(judge) = judge {
        if !judge.is_frozen() {
            return Err(Error::Contract("judge must be frozen before tuning".into()));
        }
        check_same_vocab(model, judge)?;
    }
    if train.is_empty() {
        return Err(Error::Input("empty training split".into()));
    }
    train.validate(model.vocab_size())
}

fn descend<S: Scalar>(
    model: &LanguageModel<S>,
    judge: Option<&LanguageModel<S>>,
    train: &TaskDataset,
    cfg: &TuneConfig,
    projected: bool,
    lambda: f64,
) -> Result<TuneOutcome<S>> {
    check_inputs(model, judge, train, cfg)?;
    let table = &model.embedding;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = HardPrompt::new(
        (0..cfg.prompt_len)
            .map(|_| rng.gen_range(0..model.vocab_size()))
            .collect(),
    );
    let mut p = embed_prompt(table, &init, false)?.matrix;
    let lr = S::lit(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let objective = Objective {
            model,
            judge,
            lambda,
            form: cfg.perplexity_form,
            examples: (0..cfg.batch_size)
                .map(|_| &train.examples[rng.gen_range(0..train.len())])
                .collect(),
            verbalizer: &train.verbalizer,
        };
        let want_grad = step < cfg.steps;
        let hard = project(&p, table, cfg.metric)?;
        let mut row = state_row(step, &p, &hard, judge, table, cfg.metric)?;
        let eval = if projected && want_grad {
            let mut out = None;
            projected_step(&mut p, table, cfg.metric, lr, |point, h| {
                let e = objective.evaluate(point, h, true)?;
                let grad = e.grad.clone().expect("gradient requested");
                out = Some(e);
                Ok(grad)
            })?;
            out.expect("objective evaluated")
        } else {
            let point = if projected {
                embed_prompt(table, &hard, false)?.matrix
            } else {
                p.clone()
            };
            let e = objective.evaluate(&point, &hard, want_grad)?;
            if let Some(grad) = &e.grad {
                apply_step(&mut p, grad, lr);
            }
            e
        };
        row.task_loss = eval.task_loss.to_f64_lossy();
        row.task_accuracy = eval.accuracy;
        row.objective = eval.objective.to_f64_lossy();
        trace.push(row);
    }
    let hard = trace
        .last()
        .expect("at least one row")
        .prompt_snapshot
        .clone();
    Ok(TuneOutcome {
        hard,
        soft: Some(SoftPrompt::new(p)?),
        trace,
    })
}

/// Trace row for the prompt state, before the step's loss is known.
fn state_row<S: Scalar>(
    step: usize,
    p: &Tensor<S>,
    hard: &HardPrompt,
    judge: Option<&LanguageModel<S>>,
    table: &Tensor<S>,
    metric: DistanceMetric,
) -> Result<TraceRow> {
    let judge_nll = judge
        .map(|j| sequence_nll(j, &hard.token_ids, None).map(|(nll, _)| nll.to_f64_lossy()))
        .transpose()?;
    let soft = SoftPrompt::new(p.clone())?;
    Ok(TraceRow {
        step,
        task_loss: f64::NAN,
        task_accuracy: f64::NAN,
        judge_nll,
        delta_distance: delta_distance(&soft, table, metric)?.to_f64_lossy(),
        prompt_snapshot: hard.clone(),
        objective: f64::NAN,
    })
}

/// Gradient descent on the continuous prompt rows; the model stays frozen.
///
/// The judge, when given, only contributes the trace's `judge_nll` column.
pub fn tune_soft<S: Scalar>(
    model: &LanguageModel<S>,
    judge: Option<&LanguageModel<S>>,
    train: &TaskDataset,
    cfg: &TuneConfig,
) -> Result<TuneOutcome<S>> {
    descend(model, judge, train, cfg, false, 0.0)
}

/// Gradients taken at the projected prompt, applied to the continuous rows.
pub fn tune_pez<S: Scalar>(
    model: &LanguageModel<S>,
    judge: Option<&LanguageModel<S>>,
    train: &TaskDataset,
    cfg: &TuneConfig,
) -> Result<TuneOutcome<S>> {
    descend(model, judge, train, cfg, true, 0.0)
}

/// PEZ on `task loss + λ · judge term`, the judge reading the unembedded
/// tokens with their embedding rows as input.
pub fn tune_ugd<S: Scalar>(
    model: &LanguageModel<S>,
    judge: &LanguageModel<S>,
    train: &TaskDataset,
    cfg: &TuneConfig,
) -> Result<TuneOutcome<S>> {
    if judge.embed_dim() != model.embed_dim() {
        return Err(Error::Contract(format!(
            "judge width {} differs from task model width {}",
            judge.embed_dim(),
            model.embed_dim()
        )));
    }
    descend(model, Some(judge), train, cfg, true, cfg.lambda)
}

//! Discrete prompt search with soft Q-learning over a frozen model plus a
//! small trainable adapter.

use std::collections::{HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{PerplexityForm, TraceRow, TuneConfig, TuneOutcome};
use crate::error::{Error, Result};
use crate::lm::{argmax, sample_index, sequence_nll, LanguageModel, Segment, BOS};
use crate::metrics::check_same_vocab;
use crate::nn::{log_sum_exp, softmax_in_place, Graph, Tensor, Var};
use crate::prompt::HardPrompt;
use crate::scalar::Scalar;
use crate::tasks::{task_eval, PromptInput, TaskDataset};

const SAMPLING_STREAM: u64 = 0x51_0f7a;
const STD_FLOOR: f64 = 1e-6;

/// Two-layer residual MLP applied to final hidden states before the LM head.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> Adapter<S> {
    pub fn init(width: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, std: f64| -> Vec<S> {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| S::lit(dist.sample(&mut rng))).collect()
        };
        Ok(Self {
            w1: Tensor::matrix(
                width,
                hidden,
                draw(width * hidden, 1.0 / (width as f64).sqrt()),
            )?,
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::matrix(hidden, width, draw(hidden * width, 0.01))?,
            b2: Tensor::zeros(vec![width]),
        })
    }

    fn params(&self) -> [&Tensor<S>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> [&mut Tensor<S>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Frozen language model whose next-token logits, after the adapter, serve
/// as Q-values of prompt-token actions.
#[derive(Clone, Debug)]
pub struct PolicyNet<'a, S> {
    pub base: &'a LanguageModel<S>,
    pub adapter: Adapter<S>,
    pub tau: f64,
}

impl<'a, S: Scalar> PolicyNet<'a, S> {
    pub fn new(base: &'a LanguageModel<S>, adapter: Adapter<S>, tau: f64) -> Result<Self> {
        if !base.is_frozen() {
            return Err(Error::Contract("policy base model must be frozen".into()));
        }
        if adapter.w1.shape()[0] != base.embed_dim() || adapter.w2.shape()[1] != base.embed_dim() {
            return Err(Error::Dimension {
                op: "policy_adapter",
                lhs: adapter.w1.shape().to_vec(),
                rhs: vec![base.embed_dim()],
            });
        }
        Ok(Self { base, adapter, tau })
    }

    /// Final hidden states of `[BOS] ⊕ prefix`, one row per state.
    pub fn base_hidden(&self, prefix: &[usize]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.base.bind(&mut g);
        let mut seq = Vec::with_capacity(prefix.len() + 1);
        seq.push(BOS);
        seq.extend_from_slice(prefix);
        let rows = bound.assemble(&mut g, &[Segment::Tokens(&seq)])?;
        let h = bound.hidden(&mut g, rows)?;
        Ok(g.value(h).clone())
    }

    /// Records the adapter parameters as trainable leaves.
    fn bind_adapter(&self, g: &mut Graph<S>) -> [Var; 4] {
        self.adapter
            .params()
            .map(|t| g.leaf_owned(t.clone().with_requires_grad(true)))
    }

    /// Adapter and head applied to `hidden` inside `g`.
    fn q_graph(&self, g: &mut Graph<S>, hidden: &Tensor<S>, params: [Var; 4]) -> Result<Var> {
        let h = g.constant(hidden.shape().to_vec(), hidden.data().to_vec())?;
        let [w1, b1, w2, b2] = params;
        let up = g.matmul(h, w1)?;
        let up = g.add_row(up, b1)?;
        let act = g.gelu(up)?;
        let down = g.matmul(act, w2)?;
        let down = g.add_row(down, b2)?;
        let h2 = g.add(h, down)?;
        let head = g.constant(
            self.base.head.shape().to_vec(),
            self.base.head.data().to_vec(),
        )?;
        g.matmul(h2, head)
    }

    /// Q-values `[T × |X|]` for the states along `[BOS] ⊕ prefix`.
    pub fn q_values(&self, prefix: &[usize]) -> Result<Tensor<S>> {
        let hidden = self.base_hidden(prefix)?;
        let mut g = Graph::new();
        let params = self.bind_adapter(&mut g);
        let q = self.q_graph(&mut g, &hidden, params)?;
        Ok(g.value(q).clone())
    }

    fn last_q(&self, prefix: &[usize]) -> Result<Vec<S>> {
        let q = self.q_values(prefix)?;
        Ok(q.row(q.rows() - 1).to_vec())
    }

    /// Argmax action at every state (lowest id on ties).
    pub fn greedy(&self, len: usize) -> Result<HardPrompt> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(argmax(&self.last_q(&out)?));
        }
        Ok(HardPrompt::new(out))
    }

    /// Actions drawn from `softmax(Q / τ)` at every state.
    pub fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let mut p: Vec<f64> = self
                .last_q(&out)?
                .iter()
                .map(|q| q.to_f64_lossy() / self.tau)
                .collect();
            softmax_in_place(&mut p);
            out.push(sample_index(&p, rng));
        }
        Ok(out)
    }
}

/// `τ · logsumexp(Q / τ)`.
pub fn soft_value<S: Scalar>(q: &[S], tau: f64) -> S {
    let t = S::lit(tau);
    let scaled: Vec<S> = q.iter().map(|&x| x / t).collect();
    t * log_sum_exp(&scaled)
}

/// One sampled prompt and the stabilized reward it earned.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub actions: Vec<usize>,
    pub reward: f64,
}

/// Mean squared error of `Q(s_t, a_t)` against detached targets:
/// `γ · V(s_{t+1})` before the last action, the episode reward at it.
///
/// `q_rows[e]` holds episode `e`'s Q-values, one row per state.
pub fn soft_q_loss<S: Scalar>(
    g: &mut Graph<S>,
    q_rows: &[Var],
    episodes: &[Episode],
    tau: f64,
    gamma: f64,
) -> Result<Var> {
    if episodes.is_empty() {
        return Err(Error::Input("soft Q loss of no episodes".into()));
    }
    if q_rows.len() != episodes.len() {
        return Err(Error::Contract("one Q matrix per episode required".into()));
    }
    let mut sums = Vec::with_capacity(episodes.len());
    let mut count = 0usize;
    for (&q, ep) in q_rows.iter().zip(episodes) {
        let (rows, width) = (g.shape(q)[0], g.value(q).last_dim());
        if ep.actions.is_empty() || rows != ep.actions.len() {
            return Err(Error::Contract(format!(
                "episode with {} actions needs as many Q rows, got {rows}",
                ep.actions.len()
            )));
        }
        let last = ep.actions.len() - 1;
        let targets: Vec<S> = (0..=last)
            .map(|t| {
                if t < last {
                    S::lit(gamma) * soft_value(g.value(q).row(t + 1), tau)
                } else {
                    S::lit(ep.reward)
                }
            })
            .collect();
        let flat: Vec<usize> = ep
            .actions
            .iter()
            .enumerate()
            .map(|(t, &a)| t * width + a)
            .collect();
        let picked = g.pick(q, &flat)?;
        let target = g.constant(vec![targets.len()], targets)?;
        let diff = g.sub(picked, target)?;
        let sq = g.mul(diff, diff)?;
        sums.push(g.sum(sq)?);
        count += ep.actions.len();
    }
    let mut total = sums[0];
    for &s in &sums[1..] {
        total = g.add(total, s)?;
    }
    g.scale(total, S::one() / S::from_usize_lossy(count))
}

/// Z-scores each raw reward against the last `window` raw rewards,
/// the new one included, using the population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardStabilizer {
    window: usize,
    history: VecDeque<f64>,
}

impl RewardStabilizer {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            history: VecDeque::new(),
        }
    }

    pub fn with_history(window: usize, history: &[f64]) -> Self {
        let mut s = Self::new(window);
        for &r in history {
            s.record(r);
        }
        s
    }

    fn record(&mut self, raw: f64) {
        self.history.push_back(raw);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
    }

    pub fn stabilize(&mut self, raw: f64) -> f64 {
        self.record(raw);
        let n = self.history.len() as f64;
        let mean = self.history.iter().sum::<f64>() / n;
        let var = self.history.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        (raw - mean) / var.sqrt().max(STD_FLOOR)
    }
}

/// `task_reward − α · judge term`.
pub fn raw_reward(task_reward: f64, judge_nll: f64, alpha: f64, form: PerplexityForm) -> f64 {
    task_reward - alpha * form.apply(judge_nll)
}

/// Raw reward of `prompt` and its stabilized value, in that order.
pub fn reward<S: Scalar>(
    task_reward: f64,
    prompt: &HardPrompt,
    judge: &LanguageModel<S>,
    alpha: f64,
    form: PerplexityForm,
    stabilizer: &mut RewardStabilizer,
) -> Result<(f64, f64)> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::Config("alpha must be non-negative".into()));
    }
    let (nll, _) = sequence_nll(judge, &prompt.token_ids, None)?;
    let raw = raw_reward(task_reward, nll.to_f64_lossy(), alpha, form);
    Ok((raw, stabilizer.stabilize(raw)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct PromptScore {
    loss: f64,
    accuracy: f64,
    judge_nll: f64,
}

struct Scorer<'a, S> {
    model: &'a LanguageModel<S>,
    judge: &'a LanguageModel<S>,
    train: &'a TaskDataset,
    cache: HashMap<Vec<usize>, PromptScore>,
}

impl<S: Scalar> Scorer<'_, S> {
    fn score(&mut self, ids: &[usize]) -> Result<PromptScore> {
        if let Some(s) = self.cache.get(ids) {
            return Ok(*s);
        }
        let hard = HardPrompt::new(ids.to_vec());
        let eval = task_eval(
            self.model,
            PromptInput::Hard(&hard),
            self.train,
            self.train.len(),
        )?;
        let (nll, _) = sequence_nll(self.judge, ids, None)?;
        let s = PromptScore {
            loss: eval.loss.to_f64_lossy(),
            accuracy: eval.accuracy,
            judge_nll: nll.to_f64_lossy(),
        };
        self.cache.insert(ids.to_vec(), s);
        Ok(s)
    }
}

/// Task reward of a prompt: its accuracy on the training split.
pub fn prompt_task_reward<S: Scalar>(
    model: &LanguageModel<S>,
    train: &TaskDataset,
    prompt: &HardPrompt,
) -> Result<f64> {
    Ok(task_eval(model, PromptInput::Hard(prompt), train, train.len())?.accuracy)
}

fn clip_and_step<S: Scalar>(adapter: &mut Adapter<S>, grads: &mut [Vec<S>], lr: S, clip: f64) {
    let norm = grads.iter().flatten().map(|&x| x * x).sum::<S>().sqrt();
    let clip = S::lit(clip);
    if clip > S::zero() && norm > clip {
        let k = clip / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= k);
    }
    for (param, grad) in adapter.params_mut().into_iter().zip(grads.iter()) {
        for (p, &g) in param.data_mut().iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
}

/// Trains the adapter and returns the run plus the final adapter.
///
/// Each step samples a batch of prompts from `softmax(Q/τ)`, rewards them
/// with `task_weight · train accuracy − α · judge term`, stabilizes the
/// rewards, and descends the soft-Q loss. Every trace row records the
/// greedy prompt; the returned prompt is the trace's best raw reward.
pub fn train_policy<S: Scalar>(
    model: &LanguageModel<S>,
    judge: &LanguageModel<S>,
    train: &TaskDataset,
    cfg: &TuneConfig,
) -> Result<(TuneOutcome<S>, Adapter<S>)> {
    cfg.validate()?;
    if !model.is_frozen() || !judge.is_frozen() {
        return Err(Error::Contract(
            "task model and judge must be frozen".into(),
        ));
    }
    check_same_vocab(model, judge)?;
    if cfg.prompt_len > judge.config.max_seq_len || cfg.prompt_len > model.config.max_seq_len {
        return Err(Error::Contract(format!(
            "prompt length {} exceeds model context",
            cfg.prompt_len
        )));
    }
    if train.is_empty() {
        return Err(Error::Input("empty training split".into()));
    }
    train.validate(model.vocab_size())?;
    let rl = &cfg.rl;
    let adapter = Adapter::init(model.embed_dim(), rl.mlp_hidden, cfg.seed)?;
    let mut policy = PolicyNet::new(model, adapter, rl.tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLING_STREAM);
    let mut stabilizer = RewardStabilizer::new(rl.stabilization_window);
    let mut scorer = Scorer {
        model,
        judge,
        train,
        cache: HashMap::new(),
    };
    let objective = |s: &PromptScore| {
        raw_reward(
            rl.task_weight * s.accuracy,
            s.judge_nll,
            cfg.alpha,
            cfg.perplexity_form,
        )
    };
    let lr = S::lit(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let greedy = policy.greedy(cfg.prompt_len)?;
        let s = scorer.score(&greedy.token_ids)?;
        trace.push(TraceRow {
            step,
            task_loss: s.loss,
            task_accuracy: s.accuracy,
            judge_nll: Some(s.judge_nll),
            delta_distance: 0.0,
            prompt_snapshot: greedy,
            objective: objective(&s),
        });
        if step == cfg.steps {
            break;
        }
        let mut episodes = Vec::with_capacity(rl.episodes_per_step);
        for _ in 0..rl.episodes_per_step {
            let actions = policy.sample(cfg.prompt_len, &mut rng)?;
            let raw = objective(&scorer.score(&actions)?);
            let reward = stabilizer.stabilize(raw) * rl.reward_scale;
            episodes.push(Episode { actions, reward });
        }
        let mut g = Graph::new();
        let params = policy.bind_adapter(&mut g);
        let mut q_rows = Vec::with_capacity(episodes.len());
        for ep in &episodes {
            let hidden = policy.base_hidden(&ep.actions[..ep.actions.len() - 1])?;
            q_rows.push(policy.q_graph(&mut g, &hidden, params)?);
        }
        let loss = soft_q_loss(&mut g, &q_rows, &episodes, rl.tau, rl.gamma)?;
        g.backward(loss)?;
        let mut grads: Vec<Vec<S>> = params
            .iter()
            .zip(policy.adapter.params())
            .map(|(&v, t)| {
                g.grad(v)
                    .map_or_else(|| vec![S::zero(); t.numel()], <[S]>::to_vec)
            })
            .collect();
        clip_and_step(&mut policy.adapter, &mut grads, lr, rl.clip_norm);
    }
    let mut best = 0;
    for (i, row) in trace.iter().enumerate() {
        if row.objective > trace[best].objective {
            best = i;
        }
    }
    let hard = trace[best].prompt_snapshot.clone();
    Ok((
        TuneOutcome {
            hard,
            soft: None,
            trace,
        },
        policy.adapter,
    ))
}

pub fn tune_rl<S: Scalar>(
    model: &LanguageModel<S>,
    judge: &LanguageModel<S>,
    train: &TaskDataset,
    cfg: &TuneConfig,
) -> Result<TuneOutcome<S>> {
    train_policy(model, judge, train, cfg).map(|(outcome, _)| outcome)
}

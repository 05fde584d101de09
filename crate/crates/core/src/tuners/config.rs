use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{DistanceMetric, HardPrompt, SoftPrompt};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Soft,
    Pez,
    Ugd,
    Rl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Soft => "soft",
            Self::Pez => "pez",
            Self::Ugd => "ugd",
            Self::Rl => "rl",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "pez" => Ok(Self::Pez),
            "ugd" => Ok(Self::Ugd),
            "rl" => Ok(Self::Rl),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Whether the judge term enters objectives as mean NLL or as perplexity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerplexityForm {
    #[default]
    Nll,
    Exp,
}

impl PerplexityForm {
    pub fn apply(self, nll: f64) -> f64 {
        match self {
            Self::Nll => nll,
            Self::Exp => nll.exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub tau: f64,
    pub gamma: f64,
    pub stabilization_window: usize,
    pub mlp_hidden: usize,
    pub episodes_per_step: usize,
    /// Weight on the task reward; 0 leaves only the perplexity term.
    pub task_weight: f64,
    /// Multiplies every stabilized reward before it enters the loss.
    pub reward_scale: f64,
    pub clip_norm: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            gamma: 1.0,
            stabilization_window: 200,
            mlp_hidden: 32,
            episodes_per_step: 8,
            task_weight: 1.0,
            reward_scale: 1.0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub method: Method,
    pub prompt_len: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub metric: DistanceMetric,
    #[serde(default)]
    pub perplexity_form: PerplexityForm,
    #[serde(default)]
    pub rl: RlConfig,
}

impl TuneConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        let (steps, lr) = match method {
            Method::Soft => (300, 0.5),
            Method::Pez | Method::Ugd => (300, 0.3),
            Method::Rl => (2000, 0.05),
        };
        Self {
            method,
            prompt_len: 5,
            steps,
            lr,
            lambda: 0.0,
            alpha: 0.0,
            batch_size: 16,
            seed,
            metric: DistanceMetric::SquaredEuclidean,
            perplexity_form: PerplexityForm::Nll,
            rl: RlConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.prompt_len == 0 {
            return bad("prompt_len must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive and finite");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be finite and non-negative");
        }
        let rl = &self.rl;
        if !(rl.tau.is_finite() && rl.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(rl.gamma > 0.0 && rl.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if rl.stabilization_window == 0 || rl.mlp_hidden == 0 || rl.episodes_per_step == 0 {
            return bad("stabilization_window, mlp_hidden and episodes_per_step must be positive");
        }
        if !(rl.task_weight.is_finite() && rl.task_weight >= 0.0) {
            return bad("task_weight must be finite and non-negative");
        }
        if !(rl.reward_scale.is_finite() && rl.reward_scale > 0.0) {
            return bad("reward_scale must be positive");
        }
        Ok(())
    }
}

/// State of a run after `step` updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub task_loss: f64,
    pub task_accuracy: f64,
    /// `None` when the run has no judge.
    pub judge_nll: Option<f64>,
    pub delta_distance: f64,
    pub prompt_snapshot: HardPrompt,
    /// Quantity the method descends (or, for `rl`, the raw reward it ascends).
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneOutcome<S> {
    pub hard: HardPrompt,
    /// Continuous prompt for the gradient methods.
    pub soft: Option<SoftPrompt<S>>,
    pub trace: Vec<TraceRow>,
}

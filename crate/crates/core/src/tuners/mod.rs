//! Prompt optimization: soft prompts, PEZ, unembedded gradient descent with
//! a judge-perplexity penalty, and soft Q-learning over discrete prompts.

mod config;
mod gradient;
mod rl;

pub use config::{Method, PerplexityForm, RlConfig, TraceRow, TuneConfig, TuneOutcome};
pub use gradient::{
    apply_step, project, projected_step, tune_pez, tune_soft, tune_ugd, Evaluation, Objective,
};
pub use rl::{
    prompt_task_reward, raw_reward, reward, soft_q_loss, soft_value, train_policy, tune_rl,
    Adapter, Episode, PolicyNet, RewardStabilizer,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{
    continue_training, train_lm, LanguageModel, ModelConfig, TrainOptions, TrainReport,
};
use crate::tasks::{generate_corpus, CorpusSpec};

/// Everything `train-lm` needs to produce the task model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskModelRecipe {
    pub vocab_size: usize,
    pub corpus_seed: u64,
    pub corpus_size: usize,
    pub seed: u64,
    pub train: TrainOptions,
}

impl TaskModelRecipe {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            corpus_seed: 1,
            corpus_size: 8000,
            seed: 7,
            train: TrainOptions {
                steps: 1000,
                ..TrainOptions::default()
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            ..ModelConfig::desk(self.seed)
        }
    }
}

/// Everything `train-judge` needs on top of a task model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeRecipe {
    pub corpus_seed: u64,
    pub corpus_size: usize,
    pub seed: u64,
    pub train: TrainOptions,
}

impl Default for JudgeRecipe {
    fn default() -> Self {
        Self {
            corpus_seed: 2,
            corpus_size: 8000,
            seed: 8,
            train: TrainOptions {
                steps: 1000,
                ..TrainOptions::default()
            },
        }
    }
}

/// Trains the frozen task model on the mixed demonstration corpus.
pub fn train_task_model(recipe: &TaskModelRecipe) -> Result<(LanguageModel<f64>, TrainReport)> {
    let corpus = generate_corpus(&CorpusSpec::task_model(
        recipe.vocab_size,
        recipe.corpus_seed,
        recipe.corpus_size,
    ))?;
    let (model, report) = train_lm(&corpus, recipe.model_config(), &recipe.train)?;
    Ok((model.frozen(), report))
}

/// Trains a judge on the grammar corpus with the task model's embedding
/// table copied in and held fixed, so prompt rows mean the same to both.
pub fn train_judge(
    task_model: &LanguageModel<f64>,
    recipe: &JudgeRecipe,
) -> Result<(LanguageModel<f64>, TrainReport)> {
    let vocab = task_model.vocab_size();
    let config = ModelConfig::judge(vocab, recipe.seed);
    if config.embed_dim != task_model.embed_dim() {
        return Err(Error::Config(format!(
            "judge width {} differs from task model width {}",
            config.embed_dim,
            task_model.embed_dim()
        )));
    }
    let mut judge = LanguageModel::init(config)?;
    judge.embedding = task_model.embedding.clone();
    let corpus = generate_corpus(&CorpusSpec::judge(
        vocab,
        recipe.corpus_seed,
        recipe.corpus_size,
    ))?;
    let (judge, report) = continue_training(judge, &corpus, &recipe.train, &["embedding"])?;
    Ok((judge.frozen(), report))
}

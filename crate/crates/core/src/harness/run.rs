use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ReportFormat, TaskSource};
use super::table::write_trace;
use crate::error::{Error, Result};
use crate::lm::{load_checkpoint, LanguageModel};
use crate::metrics::{faithfulness, scrutability, FaithfulnessReport, ScrutabilityReport};
use crate::prompt::{embed_prompt, HardPrompt, SoftPrompt};
use crate::tasks::{generate_task, task_eval, PromptInput, TaskSplits};
use crate::tuners::{tune_pez, tune_rl, tune_soft, tune_ugd, Method, TuneConfig, TuneOutcome};

pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const PROMPT_FILE: &str = "prompt.json";
pub const SOFT_PROMPT_FILE: &str = "soft_prompt.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub faithfulness: FaithfulnessReport,
    pub scrutability: ScrutabilityReport,
    pub task_loss: f64,
    pub accuracy: f64,
    pub wall_clock_s: f64,
    pub seed: u64,
    /// Relative to the output directory; absent when csv output is off.
    pub trace_file: Option<PathBuf>,
    pub hard_prompt: HardPrompt,
    pub prompt_file: PathBuf,
    /// Continuous prompt, for the methods that keep one.
    pub soft_prompt_file: Option<PathBuf>,
}

impl RunReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// The report as JSON with the wall-clock field removed.
    pub fn timeless_json(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("wall_clock_s");
        }
        Ok(v)
    }
}

/// Task model and judge, frozen, with matching vocabularies.
pub fn load_models(model: &Path, judge: &Path) -> Result<(LanguageModel<f64>, LanguageModel<f64>)> {
    let m = load_checkpoint::<f64>(model)?.frozen();
    let j = load_checkpoint::<f64>(judge)?.frozen();
    if m.vocab_size() != j.vocab_size() {
        return Err(Error::Config(format!(
            "task model vocabulary {} differs from judge vocabulary {}",
            m.vocab_size(),
            j.vocab_size()
        )));
    }
    Ok((m, j))
}

pub fn load_task(source: &TaskSource, vocab_size: usize) -> Result<TaskSplits> {
    let splits = match source {
        TaskSource::Spec(spec) => {
            if spec.vocab_size != vocab_size {
                return Err(Error::Config(format!(
                    "task vocabulary {} differs from model vocabulary {vocab_size}",
                    spec.vocab_size
                )));
            }
            generate_task(spec)?
        }
        TaskSource::Dataset(dir) => TaskSplits::load(dir)?,
    };
    splits.validate(vocab_size)?;
    Ok(splits)
}

pub fn tune(
    model: &LanguageModel<f64>,
    judge: &LanguageModel<f64>,
    splits: &TaskSplits,
    cfg: &TuneConfig,
) -> Result<TuneOutcome<f64>> {
    let train = &splits.train;
    match cfg.method {
        Method::Soft => tune_soft(model, Some(judge), train, cfg),
        Method::Pez => tune_pez(model, Some(judge), train, cfg),
        Method::Ugd => tune_ugd(model, judge, train, cfg),
        Method::Rl => tune_rl(model, judge, train, cfg),
    }
}

/// Final metrics of a tuned prompt on the eval split.
///
/// The soft method is scored with its continuous prompt; the others with
/// the hard prompt. Faithfulness compares the continuous prompt (or, for
/// `rl`, the hard prompt's own embedding) against the hard prompt.
pub fn evaluate(
    model: &LanguageModel<f64>,
    judge: &LanguageModel<f64>,
    splits: &TaskSplits,
    cfg: &TuneConfig,
    horizon: usize,
    hard: &HardPrompt,
    soft: Option<&SoftPrompt<f64>>,
) -> Result<(FaithfulnessReport, ScrutabilityReport, f64, f64)> {
    let eval = &splits.eval;
    let embedded;
    let soft = match soft {
        Some(s) => s,
        None => {
            embedded = embed_prompt(&model.embedding, hard, false)?;
            &embedded
        }
    };
    let prompt = match cfg.method {
        Method::Soft => PromptInput::Soft(soft),
        _ => PromptInput::Hard(hard),
    };
    let score = task_eval(model, prompt, eval, eval.len())?;
    let faith = faithfulness(model, soft, hard, eval, cfg.metric, horizon)?;
    let scrut = scrutability(judge, hard)?;
    let values = [
        score.loss,
        score.accuracy,
        faith.delta_distance,
        faith.delta_output,
        faith.delta_performance,
        scrut.judge_perplexity,
    ];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("final evaluation"));
    }
    Ok((faith, scrut, score.loss, score.accuracy))
}

/// Loads models and data, tunes, evaluates, and writes the run's files
/// into `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let (model, judge) = load_models(&config.model, &config.judge)?;
    let splits = load_task(&config.task, model.vocab_size())?;
    run_with(config, &model, &judge, &splits)
}

/// [`run_experiment`] with everything already loaded.
pub fn run_with(
    config: &ExperimentConfig,
    model: &LanguageModel<f64>,
    judge: &LanguageModel<f64>,
    splits: &TaskSplits,
) -> Result<RunReport> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let start = Instant::now();
    let outcome = tune(model, judge, splits, &config.tune)?;
    let wall_clock_s = start.elapsed().as_secs_f64();
    let (faithfulness, scrutability, task_loss, accuracy) = evaluate(
        model,
        judge,
        splits,
        &config.tune,
        config.horizon,
        &outcome.hard,
        outcome.soft.as_ref(),
    )?;

    let prompt_file = PathBuf::from(PROMPT_FILE);
    outcome.hard.save_json(dir.join(&prompt_file))?;
    let soft_prompt_file = match &outcome.soft {
        Some(soft) => {
            soft.save(dir.join(SOFT_PROMPT_FILE))?;
            Some(PathBuf::from(SOFT_PROMPT_FILE))
        }
        None => None,
    };
    let trace_file = if config.wants(ReportFormat::Csv) {
        write_trace(dir.join(TRACE_FILE), &outcome.trace)?;
        Some(PathBuf::from(TRACE_FILE))
    } else {
        None
    };
    let report = RunReport {
        config: config.clone(),
        faithfulness,
        scrutability,
        task_loss,
        accuracy,
        wall_clock_s,
        seed: config.tune.seed,
        trace_file,
        hard_prompt: outcome.hard,
        prompt_file,
        soft_prompt_file,
    };
    if config.wants(ReportFormat::Json) {
        let path = dir.join(REPORT_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

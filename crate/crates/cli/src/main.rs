use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptlab::error::ErrorClass;
use promptlab::harness::{
    evaluate, load_models, parse_grid, plot, run_experiment, sweep, thread_count, train_judge,
    train_task_model, ExperimentConfig, JudgeRecipe, PlotKind, ReportFormat, TaskModelRecipe,
    TaskSource,
};
use promptlab::lm::{save_checkpoint, TrainOptions};
use promptlab::metrics::scrutability;
use promptlab::prompt::{DistanceMetric, HardPrompt, SoftPrompt};
use promptlab::tasks::{generate_task, task_eval, PromptInput, TaskKind, TaskSpec, TaskSplits};
use promptlab::tuners::{Method, PerplexityForm, TuneConfig};
use promptlab::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "promptlab",
    version,
    about = "Prompt tuning and interpretability experiments on toy language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the task model on the demonstration corpus.
    TrainLm(TrainLmArgs),
    /// Train a judge that shares the task model's embedding table.
    TrainJudge(TrainJudgeArgs),
    /// Generate a classification task and write it as JSONL.
    GenTask(GenTaskArgs),
    /// Tune one prompt and write its report.
    Tune(TuneArgs),
    /// Score a saved prompt.
    Eval(EvalArgs),
    /// Run a grid of tuning experiments.
    Sweep(SweepArgs),
    /// Render a sweep summary or trace CSV as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
}

impl TrainArgs {
    fn options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Args)]
struct TrainLmArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1)]
    corpus_seed: u64,
    #[arg(long, default_value_t = 8000)]
    corpus_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct TrainJudgeArgs {
    #[arg(long)]
    task_model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    corpus_seed: u64,
    #[arg(long, default_value_t = 8000)]
    corpus_size: usize,
    #[arg(long, default_value_t = 8)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct GenTaskArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "needle-sentiment")]
    kind: String,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    n_train: usize,
    #[arg(long, default_value_t = 64)]
    n_eval: usize,
    #[arg(long, default_value_t = 6)]
    input_len: usize,
}

#[derive(Args)]
struct TuneArgs {
    /// Experiment config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    judge: Option<PathBuf>,
    /// Directory written by `gen-task`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    perplexity_form: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Comma-separated subset of csv,json.
    #[arg(long, value_delimiter = ',')]
    report_formats: Option<Vec<String>>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    judge: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Hard prompt JSON (a bare array of token ids).
    #[arg(long)]
    prompt: PathBuf,
    /// Continuous prompt checkpoint; scored instead of the hard prompt and
    /// compared against it.
    #[arg(long)]
    soft_prompt: Option<PathBuf>,
    #[arg(long, default_value = "squared-euclidean")]
    metric: String,
    #[arg(long, default_value_t = 1)]
    horizon: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// `key=v1,v2,...` with key one of lambda, alpha, prompt_len, seed; repeatable.
    #[arg(long, required = true)]
    grid: Vec<String>,
    /// Master seed from which every run's seed is derived.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    input: PathBuf,
    /// tradeoff or trace.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> Result<T> {
    serde_json::from_value(json!(value))
        .map_err(|_| Error::Config(format!("unknown {what} {value:?}")))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train_lm_cmd(a: TrainLmArgs) -> Result<()> {
    let recipe = TaskModelRecipe {
        vocab_size: a.vocab_size,
        corpus_seed: a.corpus_seed,
        corpus_size: a.corpus_size,
        seed: a.seed,
        train: a.train.options(),
    };
    let (model, report) = train_task_model(&recipe)?;
    save_checkpoint(&model, &a.out)?;
    print_json(&json!({"initial_nll": report.initial_nll, "final_nll": report.final_nll}))
}

fn train_judge_cmd(a: TrainJudgeArgs) -> Result<()> {
    let task = promptlab::lm::load_checkpoint::<f64>(&a.task_model)?;
    let recipe = JudgeRecipe {
        corpus_seed: a.corpus_seed,
        corpus_size: a.corpus_size,
        seed: a.seed,
        train: a.train.options(),
    };
    let (judge, report) = train_judge(&task, &recipe)?;
    save_checkpoint(&judge, &a.out)?;
    print_json(&json!({"initial_nll": report.initial_nll, "final_nll": report.final_nll}))
}

fn gen_task_cmd(a: GenTaskArgs) -> Result<()> {
    let kind: TaskKind = a.kind.parse()?;
    let mut spec = TaskSpec::new(kind, a.vocab_size, a.seed, a.n_train, a.n_eval);
    spec.input_len = a.input_len;
    let splits = generate_task(&spec)?;
    splits.save(&a.out)?;
    print_json(&json!({"train": splits.train.len(), "eval": splits.eval.len()}))
}

fn tune_config(a: TuneArgs) -> Result<ExperimentConfig> {
    let method = a.method.as_deref().map(str::parse::<Method>).transpose()?;
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let missing =
                |flag: &str| Error::Config(format!("--{flag} is required without --config"));
            ExperimentConfig {
                model: a.model.clone().ok_or_else(|| missing("model"))?,
                judge: a.judge.clone().ok_or_else(|| missing("judge"))?,
                task: TaskSource::Dataset(a.dataset.clone().ok_or_else(|| missing("dataset"))?),
                tune: TuneConfig::new(method.ok_or_else(|| missing("method"))?, a.seed),
                output_dir: a.output_dir.clone().ok_or_else(|| missing("output-dir"))?,
                report_formats: vec![ReportFormat::Csv, ReportFormat::Json],
                horizon: 1,
            }
        }
    };
    let t = &mut cfg.tune;
    t.seed = a.seed;
    if let Some(m) = method {
        t.method = m;
    }
    if let Some(v) = a.model {
        cfg.model = v;
    }
    if let Some(v) = a.judge {
        cfg.judge = v;
    }
    if let Some(v) = a.dataset {
        cfg.task = TaskSource::Dataset(v);
    }
    if let Some(v) = a.output_dir {
        cfg.output_dir = v;
    }
    if let Some(v) = a.prompt_len {
        t.prompt_len = v;
    }
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.lambda {
        t.lambda = v;
    }
    if let Some(v) = a.alpha {
        t.alpha = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.metric {
        t.metric = v.parse()?;
    }
    if let Some(v) = a.perplexity_form {
        t.perplexity_form = parse::<PerplexityForm>("perplexity form", &v)?;
    }
    if let Some(v) = a.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = a.report_formats {
        cfg.report_formats = v
            .iter()
            .map(|f| parse::<ReportFormat>("report format", f))
            .collect::<Result<_>>()?;
    }
    Ok(cfg)
}

fn tune_cmd(a: TuneArgs) -> Result<()> {
    let cfg = tune_config(a)?;
    let report = run_experiment(&cfg)?;
    print_json(&json!({
        "output_dir": cfg.output_dir,
        "hard_prompt": report.hard_prompt,
        "accuracy": report.accuracy,
        "task_loss": report.task_loss,
        "judge_perplexity": report.scrutability.judge_perplexity,
        "faithfulness": report.faithfulness,
    }))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (model, judge) = load_models(&a.model, &a.judge)?;
    let splits = TaskSplits::load(&a.dataset)?;
    splits.validate(model.vocab_size())?;
    let hard = HardPrompt::load_json(&a.prompt)?;
    hard.validate(model.vocab_size())?;
    let metric: DistanceMetric = a.metric.parse()?;
    let out = match &a.soft_prompt {
        Some(path) => {
            let soft = SoftPrompt::<f64>::load(path)?;
            let mut cfg = TuneConfig::new(Method::Soft, 0);
            cfg.metric = metric;
            let (faith, scrut, loss, acc) =
                evaluate(&model, &judge, &splits, &cfg, a.horizon, &hard, Some(&soft))?;
            json!({"task_loss": loss, "accuracy": acc, "scrutability": scrut, "faithfulness": faith})
        }
        None => {
            let eval = &splits.eval;
            let score = task_eval(&model, PromptInput::Hard(&hard), eval, eval.len())?;
            if !score.loss.is_finite() {
                return Err(Error::NonFinite("eval"));
            }
            let scrut = scrutability(&judge, &hard)?;
            json!({"task_loss": score.loss, "accuracy": score.accuracy, "scrutability": scrut})
        }
    };
    print_json(&out)
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let mut base = ExperimentConfig::load(&a.config)?;
    if let Some(dir) = a.output_dir {
        base.output_dir = dir;
    }
    let grid = parse_grid(a.grid.iter().map(String::as_str))?;
    let out = sweep(&base, &grid, a.seed, thread_count()?)?;
    print_json(&json!({"runs": out.reports.len(), "summary": out.summary}))
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let kind: PlotKind = a.kind.parse()?;
    let points = plot(&a.input, kind, &a.out)?;
    print_json(&json!({"points": points, "out": a.out}))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainLm(a) => train_lm_cmd(a),
        Command::TrainJudge(a) => train_judge_cmd(a),
        Command::GenTask(a) => gen_task_cmd(a),
        Command::Tune(a) => tune_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}

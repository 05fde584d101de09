use std::path::Path;

use promptlab::harness::*;
use promptlab::lm::{save_checkpoint, LanguageModel, ModelConfig};
use promptlab::metrics::scrutability;
use promptlab::prompt::{HardPrompt, SoftPrompt};
use promptlab::tasks::{generate_task, TaskKind, TaskSpec};
use promptlab::tuners::{Method, TuneConfig};
use promptlab::Error;

fn tiny(vocab: usize, seed: u64) -> LanguageModel<f64> {
    LanguageModel::init(ModelConfig {
        vocab_size: vocab,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_hidden: 16,
        max_seq_len: 24,
        seed,
    })
    .unwrap()
    .frozen()
}

fn setup(dir: &Path, method: Method, steps: usize) -> ExperimentConfig {
    let model = tiny(16, 1);
    let mut judge = tiny(16, 2);
    judge.embedding = model.embedding.clone();
    save_checkpoint(&model, dir.join("task.ckpt")).unwrap();
    save_checkpoint(&judge, dir.join("judge.ckpt")).unwrap();
    let mut tune = TuneConfig::new(method, 11);
    tune.steps = steps;
    tune.prompt_len = 3;
    tune.batch_size = 4;
    tune.lambda = 0.5;
    tune.alpha = 0.25;
    ExperimentConfig {
        model: dir.join("task.ckpt"),
        judge: dir.join("judge.ckpt"),
        task: TaskSource::Spec(TaskSpec::new(TaskKind::NeedleSentiment, 16, 4, 12, 10)),
        tune,
        output_dir: dir.join("out"),
        report_formats: vec![ReportFormat::Csv, ReportFormat::Json],
        horizon: 1,
    }
}

#[test]
fn soft_run_without_steps_has_zero_faithfulness_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), Method::Soft, 0);
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.faithfulness.delta_distance, 0.0);
    assert!(report.faithfulness.delta_output <= 1e-12);
    assert_eq!(report.faithfulness.delta_performance, 0.0);
    for file in [REPORT_FILE, TRACE_FILE, PROMPT_FILE, SOFT_PROMPT_FILE] {
        assert!(cfg.output_dir.join(file).is_file(), "{file}");
    }
}

#[test]
fn repeated_runs_produce_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::Soft, Method::Pez, Method::Ugd, Method::Rl] {
        let cfg = setup(dir.path(), method, 4);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(
            a.timeless_json().unwrap(),
            b.timeless_json().unwrap(),
            "{method:?}"
        );
        let on_disk = RunReport::load(cfg.output_dir.join(REPORT_FILE)).unwrap();
        assert_eq!(on_disk.timeless_json().unwrap(), b.timeless_json().unwrap());
    }
}

#[test]
fn report_metrics_recompute_from_saved_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), Method::Ugd, 5);
    let report = run_experiment(&cfg).unwrap();
    let out = &cfg.output_dir;
    let (model, judge) = load_models(&cfg.model, &cfg.judge).unwrap();
    let hard = HardPrompt::load_json(out.join(&report.prompt_file)).unwrap();
    assert_eq!(hard, report.hard_prompt);
    let standalone = scrutability(&judge, &hard).unwrap();
    assert!((standalone.judge_perplexity - report.scrutability.judge_perplexity).abs() <= 1e-12);

    let soft =
        SoftPrompt::<f64>::load(out.join(report.soft_prompt_file.as_ref().unwrap())).unwrap();
    let splits = load_task(&cfg.task, model.vocab_size()).unwrap();
    let (faith, _, loss, acc) =
        evaluate(&model, &judge, &splits, &cfg.tune, 1, &hard, Some(&soft)).unwrap();
    assert_eq!(faith, report.faithfulness);
    assert_eq!((loss, acc), (report.task_loss, report.accuracy));

    let trace = read_trace(out.join(report.trace_file.as_ref().unwrap())).unwrap();
    assert_eq!(trace.len(), 6);
    assert_eq!(trace.last().unwrap().prompt_snapshot, hard);
}

#[test]
fn dataset_directories_work_like_specs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), Method::Pez, 2);
    let a = run_experiment(&cfg).unwrap();
    let TaskSource::Spec(spec) = &cfg.task else {
        unreachable!()
    };
    generate_task(spec)
        .unwrap()
        .save(dir.path().join("data"))
        .unwrap();
    cfg.task = TaskSource::Dataset(dir.path().join("data"));
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.faithfulness, b.faithfulness);
    assert_eq!(a.hard_prompt, b.hard_prompt);
}

#[test]
fn mismatched_or_missing_inputs_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), Method::Soft, 1);
    save_checkpoint(&tiny(20, 3), dir.path().join("judge20.ckpt")).unwrap();
    cfg.judge = dir.path().join("judge20.ckpt");
    assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    cfg.judge = dir.path().join("nowhere.ckpt");
    assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));

    let text = serde_json::to_string(&setup(dir.path(), Method::Soft, 1))
        .unwrap()
        .replace("\"soft\"", "\"beam\"");
    std::fs::write(dir.path().join("c.json"), text).unwrap();
    assert!(matches!(
        ExperimentConfig::load(dir.path().join("c.json")),
        Err(Error::Config(_))
    ));
}

#[test]
fn sweep_writes_one_run_per_grid_point_in_grid_order() {
    let dir = tempfile::tempdir().unwrap();
    let base = setup(dir.path(), Method::Ugd, 3);
    let grid = parse_grid(["lambda=0,0.5", "seed=1,2"]).unwrap();
    let serial = sweep(&base, &grid, 99, 1).unwrap();
    let rows = read_summary(&serial.summary).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(
        rows.iter().map(|r| r.lambda).collect::<Vec<_>>(),
        vec![0.0, 0.0, 0.5, 0.5]
    );
    assert_eq!(rows[0].seed, rows[2].seed);
    assert_ne!(rows[0].seed, rows[1].seed);
    for i in 0..4 {
        let run = base.output_dir.join(format!("run_{i:03}"));
        assert!(run.join(REPORT_FILE).is_file() && run.join(TRACE_FILE).is_file());
    }
    let serial_json: Vec<_> = serial
        .reports
        .iter()
        .map(|r| r.timeless_json().unwrap())
        .collect();

    let parallel = sweep(&base, &grid, 99, 3).unwrap();
    let parallel_json: Vec<_> = parallel
        .reports
        .iter()
        .map(|r| r.timeless_json().unwrap())
        .collect();
    assert_eq!(serial_json, parallel_json);
    let again = read_summary(&parallel.summary).unwrap();
    let strip = |rows: Vec<SummaryRow>| {
        rows.into_iter()
            .map(|r| SummaryRow {
                wall_clock_s: 0.0,
                ..r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(rows), strip(again));
}

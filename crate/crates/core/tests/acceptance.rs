//! One test per acceptance criterion; each prints a single PASS/FAIL line.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptlab::harness::{
    run_experiment, train_judge, train_task_model, ExperimentConfig, JudgeRecipe, ReportFormat,
    TaskModelRecipe, TaskSource, REPORT_FILE,
};
use promptlab::lm::{
    encode, save_checkpoint, sequence_nll, LanguageModel, ModelConfig, PayloadKind,
};
use promptlab::metrics::{
    delta_distance, delta_output, delta_performance, scrutability, LossKind, OutputMode,
};
use promptlab::nn::gradcheck::{central_difference, relative_error};
use promptlab::nn::{Graph, Tensor, Var, DEFAULT_LN_EPS};
use promptlab::prompt::{embed_prompt, unembed, DistanceMetric, HardPrompt};
use promptlab::tasks::{generate_task, task_eval, PromptInput, TaskKind, TaskSpec, TaskSplits};
use promptlab::tuners::{
    projected_step, tune_pez, tune_rl, tune_soft, tune_ugd, Method, TuneConfig,
};

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {id:>2} [{verdict}] {name}: {detail}\n");
    // Straight to stdout so the line survives libtest's output capture.
    let _ = std::io::stdout().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

struct Trained {
    model: LanguageModel<f64>,
    judge: LanguageModel<f64>,
    model_bytes: Vec<u8>,
    judge_bytes: Vec<u8>,
    splits: TaskSplits,
}

fn snapshot(m: &LanguageModel<f64>) -> Vec<u8> {
    encode(
        PayloadKind::Model,
        Some(&m.config),
        m.is_frozen(),
        &m.named_params(),
    )
    .unwrap()
}

fn train(vocab: usize) -> Trained {
    let (model, _) = train_task_model(&TaskModelRecipe::new(vocab)).unwrap();
    let (judge, _) = train_judge(&model, &JudgeRecipe::default()).unwrap();
    let splits =
        generate_task(&TaskSpec::new(TaskKind::NeedleSentiment, vocab, 3, 64, 64)).unwrap();
    Trained {
        model_bytes: snapshot(&model),
        judge_bytes: snapshot(&judge),
        model,
        judge,
        splits,
    }
}

fn desk64() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train(64))
}

fn desk16() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train(16))
}

fn untouched(t: &Trained) -> bool {
    snapshot(&t.model) == t.model_bytes && snapshot(&t.judge) == t.judge_bytes
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Pearson correlation of the rank vectors.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn non_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] <= w[0])
}

#[test]
fn spearman_oracle_values() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    assert!((spearman(&[0.0, 0.1, 0.5, 1.0], &[8.0, 7.0, 5.0, 6.0]) + 0.8).abs() < 1e-12);
    assert!((spearman(&[0.0, 0.25, 0.5], &[4.0, 1.0, 1.0]) + 0.75f64.sqrt()).abs() < 1e-12);
}

// ---------------------------------------------------------------------------

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Relative error of the analytic gradient of `Σ w ⊙ op(inputs)`.
fn op_case(seed: u64, shapes: &[Vec<usize>], build: &Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &vars);
        g.shape(out).to_vec()
    };
    let w = random(&mut rng, &out_shape);
    let eval = |flat: &[f64], grad: bool| {
        let mut g = Graph::new();
        let mut at = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let n = t.numel();
                let leaf = Tensor::new(t.shape().to_vec(), flat[at..at + n].to_vec()).unwrap();
                at += n;
                g.leaf_owned(leaf.with_requires_grad(true))
            })
            .collect();
        let out = build(&mut g, &vars);
        let wv = g.leaf(&w);
        let prod = g.mul(out, wv).unwrap();
        let root = g.sum(prod).unwrap();
        let mut grads = Vec::new();
        if grad {
            g.backward(root).unwrap();
            for v in &vars {
                grads.extend_from_slice(g.grad(*v).unwrap());
            }
        }
        (g.item(root), grads)
    };
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let analytic = eval(&flat, true).1;
    let numeric = central_difference(|x| eval(x, false).0, &flat, 1e-5);
    relative_error(&analytic, &numeric, 1e-6)
}

/// Relative error of the gradient of a tiny model's sequence NLL with
/// respect to every parameter.
fn model_case(seed: u64) -> f64 {
    let config = ModelConfig {
        vocab_size: 6,
        embed_dim: 4,
        num_layers: 1,
        num_heads: 2,
        mlp_hidden: 5,
        max_seq_len: 8,
        seed,
    };
    let model = LanguageModel::<f64>::init(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
    let flat: Vec<f64> = model
        .named_params()
        .iter()
        .flat_map(|(_, t)| t.data().to_vec())
        .collect();
    let with = |x: &[f64]| {
        let mut m = model.clone();
        let mut at = 0;
        m.for_each_param_mut(|_, t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&x[at..at + n]);
            at += n;
        });
        m
    };
    let loss = |m: &LanguageModel<f64>, grad: bool| {
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let nll = bound.sequence_nll(&mut g, &tokens, None).unwrap();
        let mut grads = Vec::new();
        if grad {
            g.backward(nll).unwrap();
            for v in bound.param_vars() {
                grads.extend_from_slice(g.grad(v).unwrap());
            }
        }
        (g.item(nll), grads)
    };
    let analytic = loss(&model, true).1;
    let numeric = central_difference(|x| loss(&with(x), false).0, &flat, 1e-5);
    relative_error(&analytic, &numeric, 1e-6)
}

#[test]
fn criterion_01_gradient_integrity() {
    let start = Instant::now();
    let s = |v: &[usize]| v.to_vec();
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        (
            "matmul",
            vec![s(&[3, 4]), s(&[4, 2])],
            Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "transpose",
            vec![s(&[2, 3])],
            Box::new(|g, v| g.transpose(v[0]).unwrap()),
        ),
        (
            "add",
            vec![s(&[2, 3]), s(&[2, 3])],
            Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            vec![s(&[2, 3]), s(&[2, 3])],
            Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![s(&[2, 3]), s(&[2, 3])],
            Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
        ),
        (
            "add_row",
            vec![s(&[3, 4]), s(&[4])],
            Box::new(|g, v| g.add_row(v[0], v[1]).unwrap()),
        ),
        (
            "scale",
            vec![s(&[4])],
            Box::new(|g, v| g.scale(v[0], -1.7).unwrap()),
        ),
        (
            "gelu",
            vec![s(&[6])],
            Box::new(|g, v| g.gelu(v[0]).unwrap()),
        ),
        (
            "tanh",
            vec![s(&[6])],
            Box::new(|g, v| g.tanh(v[0]).unwrap()),
        ),
        ("exp", vec![s(&[6])], Box::new(|g, v| g.exp(v[0]).unwrap())),
        (
            "softmax",
            vec![s(&[2, 5])],
            Box::new(|g, v| g.softmax(v[0]).unwrap()),
        ),
        (
            "causal_softmax",
            vec![s(&[4, 4])],
            Box::new(|g, v| g.causal_softmax(v[0]).unwrap()),
        ),
        (
            "layer_norm",
            vec![s(&[3, 6]), s(&[6]), s(&[6])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], DEFAULT_LN_EPS).unwrap()),
        ),
        (
            "cross_entropy",
            vec![s(&[3, 5])],
            Box::new(|g, v| g.cross_entropy_rows(v[0], &[0, 4, 2]).unwrap()),
        ),
        (
            "gather_rows",
            vec![s(&[5, 3])],
            Box::new(|g, v| g.gather_rows(v[0], &[4, 0, 4]).unwrap()),
        ),
        (
            "concat_rows",
            vec![s(&[1, 3]), s(&[2, 3])],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
        ),
        (
            "concat_cols",
            vec![s(&[2, 1]), s(&[2, 3])],
            Box::new(|g, v| g.concat_cols(&[v[1], v[0]]).unwrap()),
        ),
        (
            "slice_rows",
            vec![s(&[4, 2])],
            Box::new(|g, v| g.slice_rows(v[0], 1, 3).unwrap()),
        ),
        (
            "slice_cols",
            vec![s(&[3, 5])],
            Box::new(|g, v| g.slice_cols(v[0], 2, 5).unwrap()),
        ),
        (
            "select_cols",
            vec![s(&[3, 5])],
            Box::new(|g, v| g.select_cols(v[0], &[4, 1]).unwrap()),
        ),
        (
            "pick",
            vec![s(&[3, 3])],
            Box::new(|g, v| g.pick(v[0], &[0, 8, 4]).unwrap()),
        ),
        (
            "sum",
            vec![s(&[2, 3])],
            Box::new(|g, v| g.sum(v[0]).unwrap()),
        ),
        (
            "mean",
            vec![s(&[2, 3])],
            Box::new(|g, v| g.mean(v[0]).unwrap()),
        ),
        (
            "reshape",
            vec![s(&[2, 3])],
            Box::new(|g, v| g.reshape(v[0], vec![3, 2]).unwrap()),
        ),
    ];
    let per_kind = cases.len() + 1;
    let mut worst = (0.0f64, String::new());
    for i in 0..100u64 {
        let k = i as usize % per_kind;
        let (name, err) = if k == cases.len() {
            ("model_loss", model_case(i))
        } else {
            let (name, shapes, build) = &cases[k];
            (*name, op_case(i, shapes, build))
        };
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, format!("{name}#{i}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient integrity",
        worst.0 <= 1e-5 && secs < 60.0,
        format!(
            "100 cases, worst rel err {:.2e} ({}), {secs:.1}s",
            worst.0, worst.1
        ),
    );
}

#[test]
fn criterion_02_unembedding_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut table = random(&mut rng, &[40, 6]);
    // Duplicate rows force exact ties, which must go to the lower id.
    for (dst, src) in [(17, 3), (30, 3), (25, 9)] {
        let row = table.row(src).to_vec();
        table.row_mut(dst).copy_from_slice(&row);
    }
    let scan = |v: &[f64], metric: DistanceMetric| -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..table.rows() {
            let e = table.row(i);
            let d = match metric {
                DistanceMetric::SquaredEuclidean => {
                    e.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
                }
                DistanceMetric::CosineDistance => {
                    let dot: f64 = e.iter().zip(v).map(|(a, b)| a * b).sum();
                    let na: f64 = e.iter().map(|a| a * a).sum();
                    let nb: f64 = v.iter().map(|b| b * b).sum();
                    (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0)
                }
            };
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    };
    let mut mismatches = 0;
    for k in 0..200 {
        let v: Vec<f64> = if k % 10 == 0 {
            table.row([3, 9, 17][k / 10 % 3]).to_vec()
        } else {
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        for metric in [
            DistanceMetric::SquaredEuclidean,
            DistanceMetric::CosineDistance,
        ] {
            if unembed(&table, &v, metric).unwrap() != scan(&v, metric) {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "unembedding oracle",
        mismatches == 0 && secs < 1.0,
        format!("400 queries, {mismatches} mismatches, {secs:.3}s"),
    );
}

#[test]
fn criterion_03_faithfulness_zero_cases() {
    let mut failures = Vec::new();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = rng.gen_range(11..24);
        let model = LanguageModel::<f64>::init(ModelConfig {
            vocab_size: vocab,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_hidden: 8,
            max_seq_len: 20,
            seed,
        })
        .unwrap()
        .frozen();
        let len = rng.gen_range(1..6);
        let hard = HardPrompt::new((0..len).map(|_| rng.gen_range(0..vocab)).collect());
        let soft = embed_prompt(&model.embedding, &hard, false).unwrap();
        let mut spec = TaskSpec::new(TaskKind::NeedleSentiment, vocab, seed, 2, 6);
        spec.input_len = 4;
        let data = generate_task(&spec).unwrap().eval;
        let metric = if seed % 2 == 0 {
            DistanceMetric::SquaredEuclidean
        } else {
            DistanceMetric::CosineDistance
        };
        let dd = delta_distance(&soft, &model.embedding, metric).unwrap();
        let dout = delta_output(
            &model,
            &soft,
            &hard,
            &data,
            1 + seed as usize % 2,
            OutputMode::MeanSquare,
        )
        .unwrap();
        let dl = delta_performance(&model, &soft, &hard, &data, LossKind::Accuracy).unwrap();
        let dl_loss = delta_performance(&model, &soft, &hard, &data, LossKind::TaskLoss).unwrap();
        if !(dd == 0.0 && dout <= 1e-12 && dl == 0.0 && dl_loss == 0.0) {
            failures.push(format!("seed {seed}: {dd} {dout} {dl} {dl_loss}"));
        }
    }
    verdict(
        3,
        "faithfulness zero-cases",
        failures.is_empty(),
        format!("50 seeds, failures: {failures:?}"),
    );
}

#[test]
fn criterion_04_uniform_judge_perplexity() {
    let mut judge = LanguageModel::<f64>::init(ModelConfig::judge(64, 4)).unwrap();
    judge.head.data_mut().iter_mut().for_each(|x| *x = 0.0);
    let judge = judge.frozen();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for len in 1..=8 {
        let hard = HardPrompt::new((0..len).map(|_| rng.gen_range(0..64)).collect());
        let ppl = scrutability(&judge, &hard).unwrap().judge_perplexity;
        worst = worst.max((ppl - 64.0).abs());
    }
    verdict(
        4,
        "uniform-judge perplexity",
        worst <= 1e-9,
        format!("lengths 1..8, max |ppl - 64| = {worst:.2e}"),
    );
}

#[test]
fn criterion_05_soft_prompt_win() {
    let start = Instant::now();
    let t = desk64();
    let eval = &t.splits.eval;
    let baseline = task_eval(&t.model, PromptInput::Empty, eval, eval.len())
        .unwrap()
        .accuracy;
    let mut accs = Vec::new();
    for seed in 0..5 {
        let cfg = TuneConfig::new(Method::Soft, seed);
        let out = tune_soft(&t.model, None, &t.splits.train, &cfg).unwrap();
        let soft = out.soft.unwrap();
        accs.push(
            task_eval(&t.model, PromptInput::Soft(&soft), eval, eval.len())
                .unwrap()
                .accuracy,
        );
    }
    let wins = accs.iter().filter(|&&a| a >= 0.95).count();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        5,
        "desk-scale soft-prompt win",
        baseline <= 0.6 && wins >= 4 && untouched(t),
        format!(
            "baseline {baseline:.3}, L=5 soft accuracies {accs:?}, {wins}/5 >= 0.95, {secs:.0}s"
        ),
    );
}

#[test]
fn criterion_06_pez_single_step_golden() {
    let table = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let w = [0.5, -2.0];
    let lr = 0.25;
    let mut p = Tensor::<f64>::matrix(1, 2, vec![0.8, 0.3]).unwrap();
    let mut seen = Vec::new();
    let hard = projected_step(
        &mut p,
        &table,
        DistanceMetric::SquaredEuclidean,
        lr,
        |point, _| {
            seen = point.data().to_vec();
            Ok(w.to_vec())
        },
    )
    .unwrap();
    // Loss w·x at the projected point (1, 0): gradient w.
    let expected = [0.8 - lr * w[0], 0.3 - lr * w[1]];
    let bit_exact = p
        .data()
        .iter()
        .zip(expected)
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // Quadratic ½‖x − c‖²: gradient at the projection, (1 − c₀, −c₁).
    let c = [0.25, 0.5];
    let mut q = Tensor::<f64>::matrix(1, 2, vec![0.8, 0.3]).unwrap();
    projected_step(
        &mut q,
        &table,
        DistanceMetric::SquaredEuclidean,
        lr,
        |point, _| Ok(point.data().iter().zip(c).map(|(x, c)| x - c).collect()),
    )
    .unwrap();
    let expected_q = [0.8 - lr * (1.0 - c[0]), 0.3 - lr * (0.0 - c[1])];
    let quad_exact = q
        .data()
        .iter()
        .zip(expected_q)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(
        6,
        "PEZ single-step golden",
        hard.token_ids == [0] && seen == [1.0, 0.0] && bit_exact && quad_exact,
        format!(
            "linear {:?} vs {expected:?}, quadratic {:?} vs {expected_q:?}",
            p.data(),
            q.data()
        ),
    );
}

#[test]
fn criterion_07_lambda_tradeoff() {
    let start = Instant::now();
    let t = desk64();
    let eval = &t.splits.eval;
    let lambdas = [0.0, 0.1, 0.5, 1.0];
    let (mut nlls, mut accs) = (Vec::new(), Vec::new());
    for &lambda in &lambdas {
        let (mut n, mut a) = (Vec::new(), Vec::new());
        for seed in 0..5 {
            let mut cfg = TuneConfig::new(Method::Ugd, seed);
            cfg.lambda = lambda;
            let out = tune_ugd(&t.model, &t.judge, &t.splits.train, &cfg).unwrap();
            n.push(sequence_nll(&t.judge, &out.hard.token_ids, None).unwrap().0);
            a.push(
                task_eval(&t.model, PromptInput::Hard(&out.hard), eval, eval.len())
                    .unwrap()
                    .accuracy,
            );
        }
        nlls.push(mean(&n));
        accs.push(mean(&a));
    }
    let rho = spearman(&lambdas, &nlls);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        "lambda trade-off",
        rho <= -0.8 && accs[3] <= accs[0] && untouched(t) && secs < 900.0,
        format!(
            "mean judge NLL {nlls:.4?} (rho {rho:.3}, non-increasing: {}), mean accuracy {accs:.3?}, {secs:.0}s",
            non_increasing(&nlls)
        ),
    );
}

fn rl_config(seed: u64, alpha: f64) -> TuneConfig {
    let mut cfg = TuneConfig::new(Method::Rl, seed);
    cfg.prompt_len = 2;
    cfg.alpha = alpha;
    cfg
}

#[test]
fn criterion_08_rl_exhaustive_oracle() {
    let start = Instant::now();
    let t = desk16();
    let train = &t.splits.train;
    let reward = |h: &HardPrompt| {
        task_eval(&t.model, PromptInput::Hard(h), train, train.len())
            .unwrap()
            .accuracy
    };
    let mut optimum = 0.0f64;
    for a in 0..16 {
        for b in 0..16 {
            optimum = optimum.max(reward(&HardPrompt::new(vec![a, b])));
        }
    }
    let mut got = Vec::new();
    for seed in 0..5 {
        let out = tune_rl(&t.model, &t.judge, train, &rl_config(seed, 0.0)).unwrap();
        got.push(reward(&out.hard));
    }
    let hits = got.iter().filter(|&&r| r >= 0.9 * optimum).count();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        8,
        "RL exhaustive oracle",
        hits >= 4 && untouched(t) && secs < 600.0,
        format!("optimum {optimum:.3} over 256 prompts, returned rewards {got:?}, {hits}/5 within 0.9x, {secs:.0}s"),
    );
}

#[test]
fn criterion_09_alpha_tradeoff() {
    let start = Instant::now();
    let t = desk16();
    let (train, eval) = (&t.splits.train, &t.splits.eval);
    let alphas = [0.0, 0.25, 0.5];
    let mut nlls = Vec::new();
    for &alpha in &alphas {
        let mut n = Vec::new();
        for seed in 0..5 {
            let out = tune_rl(&t.model, &t.judge, train, &rl_config(seed, alpha)).unwrap();
            n.push(sequence_nll(&t.judge, &out.hard.token_ids, None).unwrap().0);
        }
        nlls.push(mean(&n));
    }
    let rho = spearman(&alphas, &nlls);

    let baseline = task_eval(&t.model, PromptInput::Empty, eval, eval.len())
        .unwrap()
        .accuracy;
    let (mut accs, mut degenerate_nll) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let mut cfg = rl_config(seed, 1.0);
        cfg.rl.task_weight = 0.0;
        let out = tune_rl(&t.model, &t.judge, train, &cfg).unwrap();
        accs.push(
            task_eval(&t.model, PromptInput::Hard(&out.hard), eval, eval.len())
                .unwrap()
                .accuracy,
        );
        degenerate_nll.push(sequence_nll(&t.judge, &out.hard.token_ids, None).unwrap().0);
    }
    let gap = (mean(&accs) - baseline).abs();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        9,
        "alpha trade-off",
        rho <= -0.8 && gap <= 0.05 && mean(&degenerate_nll) < nlls[0] && untouched(t),
        format!(
            "mean judge NLL {nlls:.4?} (rho {rho:.3}); perplexity-only accuracy {:.3} vs baseline {baseline:.3}, \
             judge NLL {:.3}; {secs:.0}s",
            mean(&accs),
            mean(&degenerate_nll)
        ),
    );
}

#[test]
fn criterion_10_frozen_model_integrity() {
    let t64 = desk64();
    let t16 = desk16();
    let train = &t64.splits.train;
    tune_soft(
        &t64.model,
        Some(&t64.judge),
        train,
        &TuneConfig::new(Method::Soft, 9),
    )
    .unwrap();
    tune_pez(
        &t64.model,
        Some(&t64.judge),
        train,
        &TuneConfig::new(Method::Pez, 9),
    )
    .unwrap();
    let mut ugd = TuneConfig::new(Method::Ugd, 9);
    ugd.lambda = 1.0;
    tune_ugd(&t64.model, &t64.judge, train, &ugd).unwrap();
    tune_rl(
        &t16.model,
        &t16.judge,
        &t16.splits.train,
        &rl_config(9, 0.5),
    )
    .unwrap();
    let (a, b) = (untouched(t64), untouched(t16));
    verdict(
        10,
        "frozen-model integrity",
        a && b,
        format!("soft/pez/ugd task+judge unchanged: {a}; rl task+judge unchanged: {b}"),
    );
}

fn pipeline(dir: &std::path::Path, master: u64) -> serde_json::Value {
    let mut task = TaskModelRecipe::new(16);
    task.seed = master;
    task.corpus_seed = master + 1;
    task.corpus_size = 400;
    task.train.steps = 60;
    let (model, _) = train_task_model(&task).unwrap();
    let mut jr = JudgeRecipe {
        seed: master + 2,
        corpus_seed: master + 3,
        corpus_size: 400,
        ..JudgeRecipe::default()
    };
    jr.train.steps = 60;
    let (judge, _) = train_judge(&model, &jr).unwrap();
    save_checkpoint(&model, dir.join("task.ckpt")).unwrap();
    save_checkpoint(&judge, dir.join("judge.ckpt")).unwrap();
    let mut spec = TaskSpec::new(TaskKind::NeedleSentiment, 16, master + 4, 24, 16);
    spec.input_len = 5;
    generate_task(&spec)
        .unwrap()
        .save(dir.join("data"))
        .unwrap();
    let mut tune = TuneConfig::new(Method::Ugd, master + 5);
    tune.steps = 20;
    tune.lambda = 0.5;
    let cfg = ExperimentConfig {
        model: dir.join("task.ckpt"),
        judge: dir.join("judge.ckpt"),
        task: TaskSource::Dataset(dir.join("data")),
        tune,
        output_dir: dir.join("run"),
        report_formats: vec![ReportFormat::Csv, ReportFormat::Json],
        horizon: 2,
    };
    run_experiment(&cfg).unwrap();
    let text = std::fs::read_to_string(cfg.output_dir.join(REPORT_FILE)).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_s");
    v
}

#[test]
fn criterion_11_end_to_end_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let first = pipeline(tmp.path(), 2024);
    std::fs::remove_dir_all(tmp.path()).unwrap();
    std::fs::create_dir_all(tmp.path()).unwrap();
    let second = pipeline(tmp.path(), 2024);
    verdict(
        11,
        "end-to-end determinism",
        first == second,
        format!(
            "two train-lm -> train-judge -> tune -> eval runs, reports identical: {}",
            first == second
        ),
    );
}

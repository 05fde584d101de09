use std::collections::{HashMap, HashSet};

use rand::SeedableRng;

use super::*;
use crate::fixtures::{majority_dataset, majority_hard, majority_model, majority_soft};
use crate::lm::{LanguageModel, ModelConfig, BOS};
use crate::prompt::{embed_prompt, HardPrompt};
use crate::tasks::vocab::{CUES, NEEDLE_TRIGGER, QUERY, VERBALIZERS};
use crate::Error;

fn zero_head_model(vocab: usize) -> LanguageModel<f64> {
    let mut m = LanguageModel::init(ModelConfig::desk(3)).unwrap();
    assert_eq!(m.vocab_size(), vocab);
    m.head.data_mut().iter_mut().for_each(|x| *x = 0.0);
    m.frozen()
}

#[test]
fn corpus_is_deterministic_and_in_range() {
    for spec in [
        CorpusSpec::judge(64, 5, 300),
        CorpusSpec::task_model(16, 5, 300),
    ] {
        let a = generate_corpus(&spec).unwrap();
        assert_eq!(a, generate_corpus(&spec).unwrap());
        assert_eq!(a.len(), 300);
        assert!(a.iter().flatten().all(|&t| t < spec.vocab_size && t != BOS));
        assert!(a.iter().all(|s| !s.is_empty() && s.len() <= spec.max_len()));
    }
    let mut other = CorpusSpec::judge(64, 6, 300);
    assert_ne!(
        generate_corpus(&other).unwrap(),
        generate_corpus(&CorpusSpec::judge(64, 5, 300)).unwrap()
    );
    other.order = 3;
    assert!(matches!(generate_corpus(&other), Err(Error::Config(_))));
}

#[test]
fn grammar_transitions_match_empirical_counts() {
    let spec = CorpusSpec::judge(64, 11, 10_000);
    let corpus = generate_corpus(&spec).unwrap();
    let grammar = MarkovGrammar::new(64, spec.grammar_seed).unwrap();
    let mut joint: HashMap<((usize, usize), usize), f64> = HashMap::new();
    let mut ctx_counts: HashMap<(usize, usize), f64> = HashMap::new();
    let mut total = 0.0;
    for seq in &corpus {
        let (mut a, mut b) = (BOS, BOS);
        for &t in seq {
            *joint.entry(((a, b), t)).or_default() += 1.0;
            *ctx_counts.entry((a, b)).or_default() += 1.0;
            total += 1.0;
            (a, b) = (b, t);
        }
    }
    // Every observed transition must be licensed by the chain.
    for &(ctx, t) in joint.keys() {
        let dist = grammar
            .next_distribution(ctx.0, ctx.1)
            .expect("reachable context");
        assert!(dist.iter().any(|&(tok, _)| tok == t));
    }
    let mut tv = 0.0;
    for (&ctx, &n_ctx) in &ctx_counts {
        for &(t, p) in grammar.next_distribution(ctx.0, ctx.1).unwrap() {
            let observed = joint.get(&(ctx, t)).copied().unwrap_or(0.0);
            tv += (observed / total - n_ctx / total * p).abs();
        }
    }
    tv *= 0.5;
    assert!(tv <= 0.05, "total variation {tv}");
}

#[test]
fn grammar_distributions_are_normalized_and_sparse() {
    let g = MarkovGrammar::new(64, 0).unwrap();
    let mut n = 0;
    for (a, b) in g.contexts() {
        let dist = g.next_distribution(a, b).unwrap();
        let total: f64 = dist.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        n += 1;
    }
    assert_eq!(n, 1 + 8 + 3 * 64);
    let sentence = g.sample_sentence(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0), 6);
    assert!(g.probability(&sentence) > 0.0);
    assert_eq!(g.probability(&[8, 8]), 0.0);
}

#[test]
fn task_labels_are_balanced_and_splits_disjoint() {
    for kind in [TaskKind::NeedleSentiment, TaskKind::ParityCue] {
        let splits = generate_task(&TaskSpec::new(kind, 64, 9, 100, 101)).unwrap();
        assert_eq!(splits.train.label_counts(), vec![50, 50]);
        assert_eq!(splits.eval.label_counts(), vec![51, 50]);
        splits.validate(64).unwrap();
        let train: HashSet<_> = splits.train.examples.iter().map(|e| &e.input).collect();
        assert!(splits
            .eval
            .examples
            .iter()
            .all(|e| !train.contains(&e.input)));
        assert_eq!(
            splits,
            generate_task(&TaskSpec::new(kind, 64, 9, 100, 101)).unwrap()
        );
    }
    assert!(generate_task(&TaskSpec::new(TaskKind::NeedleSentiment, 64, 0, 1, 5)).is_err());
}

#[test]
fn inputs_follow_their_labels() {
    let splits = generate_task(&TaskSpec::new(TaskKind::NeedleSentiment, 16, 2, 40, 40)).unwrap();
    for e in &splits.train.examples {
        assert_eq!(*e.input.last().unwrap(), QUERY);
        let cues: Vec<usize> = e
            .input
            .iter()
            .copied()
            .filter(|t| CUES.contains(t))
            .collect();
        assert_eq!(cues, vec![CUES[e.label]]);
        assert!(!e.input.contains(&NEEDLE_TRIGGER));
    }
    let parity = generate_task(&TaskSpec::new(TaskKind::ParityCue, 16, 2, 40, 40)).unwrap();
    for e in &parity.eval.examples {
        let c0 = e.input.iter().filter(|&&t| t == CUES[0]).count();
        assert_eq!(c0 % 2, e.label);
    }
    assert_eq!(splits.train.verbalizer, VERBALIZERS.to_vec());
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let splits = generate_task(&TaskSpec::new(TaskKind::ParityCue, 64, 4, 10, 6)).unwrap();
    splits.save(dir.path()).unwrap();
    assert_eq!(TaskSplits::load(dir.path()).unwrap(), splits);
    let meta = std::fs::read_to_string(dir.path().join(META_FILE)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&meta).unwrap();
    assert_eq!(v["verbalizer"]["1"], 3);
    assert_eq!(v["kind"], "parity-cue");
    let first = std::fs::read_to_string(dir.path().join(TRAIN_FILE)).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert!(line["input"].is_array() && line["label"].is_u64());

    std::fs::write(dir.path().join(EVAL_FILE), "{\"input\": [1, 2]}\n").unwrap();
    assert!(matches!(
        TaskSplits::load(dir.path()),
        Err(Error::Format(_))
    ));
}

#[test]
fn zero_head_model_scores_ln2_and_predicts_class_zero() {
    let model = zero_head_model(64);
    let splits = generate_task(&TaskSpec::new(TaskKind::NeedleSentiment, 64, 1, 10, 11)).unwrap();
    let score = task_eval(&model, PromptInput::Empty, &splits.eval, 4).unwrap();
    assert!((score.loss - std::f64::consts::LN_2).abs() <= 1e-9);
    let class0 = splits.eval.label_counts()[0] as f64 / 11.0;
    assert_eq!(score.accuracy, class0);
}

#[test]
fn hard_prompt_and_its_embedding_score_identically() {
    let model = LanguageModel::<f64>::init(ModelConfig::desk(8))
        .unwrap()
        .frozen();
    let splits = generate_task(&TaskSpec::new(TaskKind::NeedleSentiment, 64, 3, 10, 12)).unwrap();
    let hard = HardPrompt::new(vec![9, 40, 6]);
    let soft = embed_prompt(&model.embedding, &hard, false).unwrap();
    let a = task_eval(&model, PromptInput::Hard(&hard), &splits.eval, 5).unwrap();
    let b = task_eval(&model, PromptInput::Soft(&soft), &splits.eval, 5).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.accuracy, b.accuracy);
    // Chunking does not change the value.
    let c = task_eval(&model, PromptInput::Hard(&hard), &splits.eval, 1).unwrap();
    assert_eq!(a.loss.to_bits(), c.loss.to_bits());
    // Reordering the examples changes at most the summation order.
    let mut reversed = splits.eval.clone();
    reversed.examples.reverse();
    let d = task_eval(&model, PromptInput::Hard(&hard), &reversed, 5).unwrap();
    assert!((a.loss - d.loss).abs() <= 1e-12);
    assert_eq!(a.accuracy, d.accuracy);
}

#[test]
fn hand_fixture_accuracies() {
    let model = majority_model();
    let data = majority_dataset();
    let soft = task_eval(&model, PromptInput::Soft(&majority_soft()), &data, 8).unwrap();
    assert_eq!(soft.accuracy, 6.0 / 8.0);
    let hard = task_eval(&model, PromptInput::Hard(&majority_hard()), &data, 3).unwrap();
    assert_eq!(hard.accuracy, 4.0 / 8.0);
    assert!(soft.loss > 0.0 && hard.loss > 0.0);
}

#[test]
fn overlong_inputs_are_rejected() {
    let model = majority_model();
    let mut data = majority_dataset();
    data.examples[3].input = vec![1; 7];
    let r = task_eval(&model, PromptInput::Hard(&majority_hard()), &data, 8);
    assert!(matches!(r, Err(Error::Length { len: 9, max: 8 })));
}

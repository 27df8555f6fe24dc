use moduleformer::lifecycle::{
    arithmetic_corpus, collect_usage, evaluate, expert_distribution_divergence, extend_and_train, finetune_concentrate,
    prune, threshold_for_ratio, train, EvalOptions, ExtensionSpec, OptimizerSettings, ScheduleKind, TrainPlan,
};
use moduleformer::model::{byte_tokenize, load_checkpoint, save_checkpoint, Model, ModuleFormerConfig};
use moduleformer::moe::{LayerUsage, UsageStats};
use moduleformer::objectives::{LossWeights, TrainMode};
use moduleformer::Error;

fn small_config() -> ModuleFormerConfig {
    ModuleFormerConfig {
        d_emb: 32,
        n_layer: 2,
        n_att: 4,
        d_att: 16,
        n_ffd: 6,
        d_ffd: 32,
        k_att: 2,
        k_ffd: 2,
        d_rtr: 16,
        vocab_size: 256,
        segment_length: 32,
        init_std: 0.05,
        seed: 1,
    }
}

fn plan(mode: TrainMode, budget: u64) -> TrainPlan {
    let constant = mode != TrainMode::Pretrain;
    TrainPlan {
        mode,
        budget_tokens: budget,
        batch_tokens: 256,
        micro_batch_tokens: 128,
        segment_length: 32,
        optimizer: OptimizerSettings {
            lr_max: 3e-3,
            lr_min: if constant { 3e-3 } else { 3e-4 },
            warmup_tokens: if constant { 0 } else { budget / 20 },
            schedule: if constant { ScheduleKind::Constant } else { ScheduleKind::Cosine },
            ..OptimizerSettings::default()
        },
        loss_weights: match mode {
            TrainMode::Pretrain => LossWeights::pretrain(),
            TrainMode::FinetuneConcentrate => LossWeights::finetune(),
            TrainMode::ContinualInsert => LossWeights::continual(0.25),
        },
        corpus: None,
        validation: None,
        seed: 3,
    }
}

fn repeating_text() -> Vec<usize> {
    let unit = b"The quick brown fox jumps over the lazy dog while seven wizards quietly hex jumbled vats. ";
    let mut text = Vec::new();
    while text.len() < 1024 {
        text.extend_from_slice(unit);
    }
    text.truncate(1024);
    byte_tokenize(&text)
}

fn unigram_perplexity(tokens: &[usize]) -> f64 {
    let mut counts = vec![0f64; 256];
    tokens.iter().for_each(|&t| counts[t] += 1.0);
    let n = tokens.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / n) * (c / n).ln())
        .sum();
    h.exp()
}

#[test]
fn two_hundred_steps_beat_the_unigram_baseline() {
    let text = repeating_text();
    let mut model = Model::new(small_config()).unwrap();
    let before = evaluate(&model, &text, EvalOptions::new(32, 1)).unwrap().perplexity;
    let log = train(&mut model, &plan(TrainMode::Pretrain, 200 * 256), &text).unwrap();
    assert_eq!(log.len(), 200);
    assert_eq!(model.step, 200);
    assert_eq!(model.tokens_seen, 200 * 256);
    let after = evaluate(&model, &text, EvalOptions::new(32, 1)).unwrap().perplexity;
    let unigram = unigram_perplexity(&text);
    assert!(after < unigram, "perplexity {after:.3} vs unigram {unigram:.3} (start {before:.3})");
    let first = log.records[0].lm_loss;
    assert!(log.last().unwrap().lm_loss < first);
    // sparse compute: k·tokens expert calls per layer per step
    assert!(log.records.iter().all(|r| r.expert_evals == vec![2 * 256; 2]));
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let text = repeating_text();
    let run = || {
        let mut m = Model::new(small_config()).unwrap();
        train(&mut m, &plan(TrainMode::Pretrain, 10 * 256), &text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        std::fs::read(&p).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn concentration_then_pruning_round_trips() {
    let text = repeating_text();
    let mut model = Model::new(small_config()).unwrap();
    train(&mut model, &plan(TrainMode::Pretrain, 20 * 256), &text).unwrap();
    let before = collect_usage(&model, &text, EvalOptions::new(32, 1)).unwrap();
    let mut ft = plan(TrainMode::FinetuneConcentrate, 20 * 256);
    ft.loss_weights.concentration = 0.5;
    let (log, usage) = finetune_concentrate(&mut model, &ft, &text, &text, &mut |_| {}).unwrap();
    assert_eq!(log.len(), 20);
    assert!(log.records.iter().all(|r| r.concentration_loss > 0.0));
    assert!(usage.mean_entropy() <= before.mean_entropy() + 1e-9);
    assert_eq!(model.usage.as_ref(), Some(&usage));

    let tau = threshold_for_ratio(&model, &usage, 0.7).unwrap();
    let Some(tau) = tau else { return };
    let report = prune(&mut model, &usage, tau).unwrap();
    assert!(report.expert_ratio() <= 0.7);
    assert!(report.params_after < report.params_before);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pruned.ckpt");
    save_checkpoint(&model, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, model);
    let tokens = &text[..32];
    assert_eq!(back.logits(tokens, None).unwrap().0, model.logits(tokens, None).unwrap().0);
}

#[test]
fn prune_refusal_leaves_the_model_untouched() {
    let mut model = Model::new(small_config()).unwrap();
    let stats = UsageStats {
        layers: vec![
            LayerUsage { counts: vec![10, 10, 10, 10, 10, 10], tokens: 30, top_k: 2 },
            LayerUsage { counts: vec![50, 1, 1, 1, 1, 6], tokens: 30, top_k: 2 },
        ],
    };
    let snapshot = model.clone();
    match prune(&mut model, &stats, 0.99) {
        Err(Error::PruneRefused { layer: 1, remaining: 1, k: 2 }) => {}
        other => panic!("expected refusal, got {other:?}"),
    }
    assert_eq!(model, snapshot);
}

#[test]
fn extension_keeps_frozen_parameters_bit_identical() {
    let text = repeating_text();
    let arith = byte_tokenize(&arithmetic_corpus(4096, 2));
    let mut model = Model::new(small_config()).unwrap();
    train(&mut model, &plan(TrainMode::Pretrain, 10 * 256), &text).unwrap();
    let snapshot = model.clone();
    let ext = ExtensionSpec {
        train_embedding: false,
        ..ExtensionSpec::experts(2)
    };
    extend_and_train(&mut model, &plan(TrainMode::ContinualInsert, 10 * 256), &arith, ext, 0.25, &mut |r| {
        assert!(r.routing_reg > 0.0);
    })
    .unwrap();
    let old: std::collections::HashMap<_, _> = snapshot.params().into_iter().collect();
    let mut new_rows = 0;
    for (name, t) in model.params() {
        match old.get(&name) {
            Some(o) => assert_eq!(o.data(), t.data(), "{name} moved"),
            None => new_rows += 1,
        }
    }
    // two experts (w_in, w_out) plus A' per layer
    assert_eq!(new_rows, 2 * (2 * 2 + 1));
    assert_eq!(model.blocks[0].smoe.experts.len(), 8);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("extended.ckpt");
    save_checkpoint(&model, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.logits(&arith[..32], None).unwrap().0, model.logits(&arith[..32], None).unwrap().0);
}

#[test]
fn disjoint_domains_diverge_more_than_same_domain_splits() {
    let stats = |counts: [u64; 4]| UsageStats {
        layers: vec![LayerUsage { counts: counts.to_vec(), tokens: counts.iter().sum::<u64>() / 2, top_k: 2 }],
    };
    let m = expert_distribution_divergence(&[
        ("a1".into(), stats([40, 38, 1, 1])),
        ("a2".into(), stats([39, 40, 0, 1])),
        ("b".into(), stats([1, 1, 40, 38])),
    ])
    .unwrap();
    assert!(m.values[0][2] > m.values[0][1]);
    assert!(m.values[1][2] > m.values[1][0]);
}

#[test]
fn zero_budget_is_a_no_op() {
    let mut model = Model::new(small_config()).unwrap();
    let snapshot = model.clone();
    let log = train(&mut model, &plan(TrainMode::Pretrain, 0), &repeating_text()).unwrap();
    assert!(log.is_empty());
    assert_eq!(model, snapshot);
}

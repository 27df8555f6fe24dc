use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::SegmentLayout;
use crate::error::{config_err, Error, Result};
use crate::model::{expert_init, Model};
use crate::moe::{survivors, UsageStats};
use crate::numerics::{Tape, Var};
use crate::objectives::{total_loss, LossReport, TrainMode};

use super::data::TokenStreams;
use super::eval::{collect_usage, EvalOptions};
use super::metrics::{MetricsLog, StepRecord};
use super::optim::AdamW;
use super::plan::TrainPlan;

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            step: step as usize,
            detail: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

pub fn train(model: &mut Model, plan: &TrainPlan, corpus: &[usize]) -> Result<MetricsLog> {
    train_with(model, plan, corpus, &mut |_| {})
}

/// Runs `plan` on `corpus`, calling `on_step` after every optimizer step.
///
/// The batch of each step is one segment from each of
/// `batch_tokens / segment_length` streams; every stream carries its
/// key/value cache into its next segment.
pub fn train_with(
    model: &mut Model,
    plan: &TrainPlan,
    corpus: &[usize],
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<MetricsLog> {
    plan.validate()?;
    let mut log = MetricsLog::default();
    let steps = plan.steps();
    if steps == 0 {
        return Ok(log);
    }
    if let Some(&bad) = corpus.iter().find(|&&t| t >= model.config.vocab_size) {
        return Err(config_err!("corpus token {bad} outside vocabulary"));
    }
    let seg = plan.segment_length;
    let n_layer = model.blocks.len();
    let mut streams = TokenStreams::new(corpus.len(), plan.streams(), seg, n_layer, plan.seed)?;
    let micro = plan.micro_batch_tokens / seg;
    let n_micro = plan.streams() / micro;
    let mut opt = AdamW::new(plan.optimizer.clone());

    for step in 0..steps {
        let run_tokens = step * plan.batch_tokens as u64;
        let lr = plan.optimizer.lr_at(run_tokens, plan.budget_tokens);
        let mut usage = model.empty_usage();
        let mut reports: Vec<LossReport> = Vec::with_capacity(n_micro);
        let mut expert_evals = vec![0; n_layer];
        let mut head_evals = vec![0; n_layer];
        for g in 0..n_micro {
            let range = g * micro..(g + 1) * micro;
            let batch = streams.next(corpus, range.clone());
            let caches: Vec<_> = streams.caches[range.clone()].iter_mut().map(std::mem::take).collect();
            let mut tape = Tape::new();
            let layout = SegmentLayout {
                streams: micro,
                seg_len: seg,
            };
            let (loss, report, out) = (|| {
                let out = model.forward(&mut tape, &batch.inputs, layout, &caches)?;
                let lm = tape.cross_entropy(out.logits, &batch.targets)?;
                let probs: Vec<Var> = out
                    .att_gates
                    .iter()
                    .chain(&out.ffd_gates)
                    .map(|g| g.probs)
                    .collect();
                let a_ext = model.router_extensions();
                let (loss, report) = total_loss(&mut tape, lm, &probs, &a_ext, &plan.loss_weights)?;
                let loss = tape.scale(loss, 1.0 / n_micro as f64)?;
                Ok((loss, report, out))
            })()
            .map_err(|e| diverged(model.step + 1, e))?;
            tape.backward(loss)?;
            for (_, p) in model.params_mut() {
                if p.requires_grad {
                    tape.accumulate_into(p);
                }
            }
            for (l, gate) in out.ffd_gates.iter().enumerate() {
                usage.accumulate(l, &gate.decision)?;
                expert_evals[l] += out.expert_evals[l];
                head_evals[l] += out.head_evals[l];
            }
            for (slot, c) in streams.caches[range].iter_mut().zip(out.caches) {
                *slot = c;
            }
            reports.push(report);
        }
        let stats = opt.step(model, lr, model.step + 1)?;
        model.step += 1;
        model.tokens_seen += plan.batch_tokens as u64;
        let avg = |f: &dyn Fn(&LossReport) -> f64| mean(&reports.iter().map(f).collect::<Vec<_>>());
        let record = StepRecord {
            step: model.step,
            tokens_seen: model.tokens_seen,
            lr,
            lm_loss: avg(&|r| r.lm_loss),
            mi_loss: avg(&|r| mean(&r.mi_loss)),
            concentration_loss: avg(&|r| mean(&r.concentration_loss)),
            routing_reg: avg(&|r| r.routing_reg),
            total: avg(&|r| r.total),
            grad_norm: stats.grad_norm,
            usage_entropy: usage.layers.iter().map(|l| l.entropy()).collect(),
            expert_evals,
            head_evals,
        };
        if !record.total.is_finite() {
            return Err(Error::Diverged {
                step: model.step as usize,
                detail: format!("loss {}", record.total),
            });
        }
        on_step(&record);
        log.push(record)?;
    }
    Ok(log)
}

fn require_mode(plan: &TrainPlan, mode: TrainMode) -> Result<()> {
    if plan.mode != mode {
        return Err(config_err!("plan mode {:?} where {mode:?} is required", plan.mode));
    }
    Ok(())
}

/// Finetunes with the load-concentration objective, then counts expert
/// selections on `validation`. The counts are also stored on the model.
pub fn finetune_concentrate(
    model: &mut Model,
    plan: &TrainPlan,
    corpus: &[usize],
    validation: &[usize],
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<(MetricsLog, UsageStats)> {
    require_mode(plan, TrainMode::FinetuneConcentrate)?;
    let log = train_with(model, plan, corpus, on_step)?;
    let usage = collect_usage(model, validation, EvalOptions::new(plan.segment_length, 1))?;
    model.usage = Some(usage.clone());
    Ok((log, usage))
}

/// What [`extend_and_train`] inserts and unfreezes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtensionSpec {
    /// Feed-forward experts added to every layer.
    pub n_new: usize,
    /// Attention heads added to every layer.
    pub n_new_heads: usize,
    pub train_embedding: bool,
    pub train_lm_head: bool,
    /// Std of the inserted router rows `A'`, relative to `init_std`.
    pub router_scale: f64,
}

impl ExtensionSpec {
    pub fn experts(n_new: usize) -> Self {
        ExtensionSpec {
            n_new,
            n_new_heads: 0,
            train_embedding: true,
            train_lm_head: false,
            router_scale: 0.01,
        }
    }
}

/// Inserts new modules with a partially trainable router and trains only
/// them (plus the optional embedding/output layers) under routing
/// regularization of weight `reg_weight`.
pub fn extend_and_train(
    model: &mut Model,
    plan: &TrainPlan,
    corpus: &[usize],
    ext: ExtensionSpec,
    reg_weight: f64,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<MetricsLog> {
    require_mode(plan, TrainMode::ContinualInsert)?;
    let mut plan = plan.clone();
    plan.loss_weights.routing_reg = reg_weight;
    plan.validate()?;
    let init = expert_init(&model.config);
    let scale = ext.router_scale * model.config.init_std;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5eed_1e5e);
    model.set_all_trainable(false);
    for block in &mut model.blocks {
        block.smoe.insert_experts(ext.n_new, init, scale, &mut rng);
        block.moa.insert_heads(ext.n_new_heads, init, scale, &mut rng);
    }
    model.embedding.requires_grad = ext.train_embedding;
    model.lm_head.requires_grad = ext.train_lm_head;
    model.usage = None;
    train_with(model, &plan, corpus, on_step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    /// Surviving original expert indices per layer.
    pub kept: Vec<Vec<usize>>,
    pub expert_params_before: usize,
    pub expert_params_after: usize,
    pub params_before: usize,
    pub params_after: usize,
}

impl PruneReport {
    pub fn expert_ratio(&self) -> f64 {
        self.expert_params_after as f64 / self.expert_params_before as f64
    }

    pub fn param_ratio(&self) -> f64 {
        self.params_after as f64 / self.params_before as f64
    }
}

fn check_stats(model: &Model, stats: &UsageStats) -> Result<()> {
    if stats.layers.len() != model.blocks.len()
        || stats
            .layers
            .iter()
            .zip(&model.blocks)
            .any(|(u, b)| u.counts.len() != b.smoe.experts.len())
    {
        return Err(config_err!("usage statistics do not match the model's expert layout"));
    }
    Ok(())
}

/// Removes, in every layer, the experts whose max-normalized frequency in
/// `stats` is below `tau`. Nothing changes if any layer would refuse.
pub fn prune(model: &mut Model, stats: &UsageStats, tau: f64) -> Result<PruneReport> {
    check_stats(model, stats)?;
    for (l, (usage, block)) in stats.layers.iter().zip(&model.blocks).enumerate() {
        let keep = survivors(usage, tau)?;
        if keep.len() < block.smoe.top_k {
            return Err(Error::PruneRefused {
                layer: l,
                remaining: keep.len(),
                k: block.smoe.top_k,
            });
        }
    }
    let expert_params_before = model.expert_param_count();
    let params_before = model.param_count();
    let mut kept = Vec::with_capacity(model.blocks.len());
    let mut pruned = stats.clone();
    for (l, block) in model.blocks.iter_mut().enumerate() {
        let keep = block.smoe.prune_experts(l, &stats.layers[l], tau)?;
        let layer = &mut pruned.layers[l];
        layer.counts = keep.iter().map(|&m| layer.counts[m]).collect();
        kept.push(keep);
    }
    model.usage = Some(pruned);
    Ok(PruneReport {
        kept,
        expert_params_before,
        expert_params_after: model.expert_param_count(),
        params_before,
        params_after: model.param_count(),
    })
}

/// Smallest threshold whose pruning keeps at most `max_ratio` of the
/// expert parameters, if any threshold does without refusing.
pub fn threshold_for_ratio(model: &Model, stats: &UsageStats, max_ratio: f64) -> Result<Option<f64>> {
    check_stats(model, stats)?;
    let mut candidates: Vec<f64> = stats
        .layers
        .iter()
        .flat_map(|l| l.max_normalized())
        .filter(|&f| f < 1.0)
        .collect();
    candidates.push(0.0);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    // thresholds just above each observed frequency remove that expert
    let per_expert: Vec<usize> = model
        .blocks
        .iter()
        .map(|b| b.smoe.experts.first().map_or(0, |e| e.param_count()))
        .collect();
    let total: usize = model.expert_param_count();
    for &f in &candidates {
        let tau = if f == 0.0 { 0.0 } else { next_up(f) };
        let mut remaining = 0;
        let mut refused = false;
        for (l, usage) in stats.layers.iter().enumerate() {
            let keep = survivors(usage, tau)?;
            refused |= keep.len() < model.blocks[l].smoe.top_k;
            remaining += keep.len() * per_expert[l];
        }
        if refused {
            return Ok(None);
        }
        if remaining as f64 <= max_ratio * total as f64 {
            return Ok(Some(tau));
        }
    }
    Ok(None)
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

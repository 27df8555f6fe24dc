//! Training, finetuning, continual extension, pruning, evaluation and
//! generation.

mod data;
mod eval;
mod metrics;
mod optim;
mod plan;
mod train;

pub use data::{arithmetic_corpus, load_corpus, ship_log_corpus, split_holdout, StreamBatch, TokenStreams};
pub use eval::{
    collect_usage, evaluate, evaluate_perplexity, expert_distribution_divergence, generate, DivergenceMatrix,
    EvalOptions, EvalReport, DIVERGENCE_SMOOTHING,
};
pub use metrics::{MetricsLog, StepRecord};
pub use optim::{AdamW, StepStats};
pub use plan::{OptimizerSettings, ScheduleKind, TrainPlan};
pub use train::{
    extend_and_train, finetune_concentrate, prune, threshold_for_ratio, train, train_with, ExtensionSpec,
    PruneReport,
};

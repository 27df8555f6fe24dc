use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use moduleformer::diagnostics::run_checks;
use moduleformer::lifecycle::{
    evaluate, expert_distribution_divergence, extend_and_train, finetune_concentrate, generate, load_corpus, prune,
    split_holdout, threshold_for_ratio, train_with, EvalOptions, ExtensionSpec, StepRecord, TrainPlan,
};
use moduleformer::model::{load_checkpoint, save_checkpoint, Model, ModuleFormerConfig};
use moduleformer::objectives::TrainMode;
use moduleformer::{Error, Result};

#[derive(Parser)]
#[command(name = "moduleformer", version, about = "Train, adapt and inspect ModuleFormer language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a fresh model with the load-balancing objective.
    Train(TrainArgs),
    /// Finetune with load concentration, then record expert usage.
    Finetune(FinetuneArgs),
    /// Insert new experts and train only them.
    Extend(ExtendArgs),
    /// Remove rarely selected experts.
    Prune(PruneArgs),
    /// Held-out perplexity and expert usage.
    Eval(EvalArgs),
    /// Sample text.
    Generate(GenerateArgs),
    /// Parameter counts, module layout, usage and domain divergence.
    Stats(StatsArgs),
    /// Run the numerical self-checks.
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Tiny,
}

/// TOML run file. Both tables are optional and fall back to the presets.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: Option<ModuleFormerConfig>,
    plan: Option<TrainPlan>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Args)]
struct PlanFlags {
    /// TOML file with optional [model] and [plan] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Total tokens; the warmup is rescaled to keep its share of the budget.
    #[arg(long, alias = "budget")]
    budget_tokens: Option<u64>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    micro_batch_tokens: Option<usize>,
    #[arg(long)]
    segment_length: Option<usize>,
    /// Sets both the peak and the floor of a constant schedule, or the peak
    /// (floor = peak / 10) of a cosine one.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_tokens: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSONL file receiving one record per optimizer step.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Print a progress line every N steps (0 = quiet).
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

impl PlanFlags {
    /// Plan from the run file, or `default` trained at the model's own
    /// segment length, with flag overrides applied.
    fn plan(&self, from_file: Option<TrainPlan>, default: TrainPlan, model_seg: usize) -> Result<TrainPlan> {
        let mut plan = from_file.unwrap_or(TrainPlan {
            segment_length: model_seg,
            ..default
        });
        if let Some(v) = self.segment_length {
            plan.segment_length = v;
        }
        if let Some(v) = &self.corpus {
            plan.corpus = Some(v.clone());
        }
        if let Some(v) = self.budget_tokens {
            // keep the warmup's share of the budget unless it is given too
            let o = &mut plan.optimizer;
            if plan.budget_tokens > 0 {
                o.warmup_tokens = (o.warmup_tokens as u128 * v as u128 / plan.budget_tokens as u128) as u64;
            }
            plan.budget_tokens = v;
        }
        if let Some(v) = self.batch_tokens {
            plan.batch_tokens = v;
        }
        if let Some(v) = self.micro_batch_tokens {
            plan.micro_batch_tokens = v;
        }
        if let Some(v) = self.lr {
            plan.optimizer.lr_max = v;
            plan.optimizer.lr_min = match plan.optimizer.schedule {
                moduleformer::lifecycle::ScheduleKind::Constant => v,
                moduleformer::lifecycle::ScheduleKind::Cosine => v / 10.0,
            };
        }
        if let Some(v) = self.warmup_tokens {
            plan.optimizer.warmup_tokens = v;
        }
        if let Some(v) = self.seed {
            plan.seed = v;
        }
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: PlanFlags,
    /// Architecture when the run file has no [model] table.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    mi_weight: Option<f64>,
    /// Fraction of the corpus tail held out and scored after training.
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    flags: PlanFlags,
    #[arg(long)]
    model: PathBuf,
    /// Text on which expert selections are counted after finetuning.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    concentration_weight: Option<f64>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtendArgs {
    #[command(flatten)]
    flags: PlanFlags,
    #[arg(long)]
    model: PathBuf,
    /// Experts added to every layer.
    #[arg(long, default_value_t = 2)]
    new_experts: usize,
    /// Attention heads added to every layer.
    #[arg(long, default_value_t = 0)]
    new_heads: usize,
    /// Weight of the penalty on inserted router rows.
    #[arg(long, default_value_t = 0.25)]
    reg_weight: f64,
    #[arg(long)]
    freeze_embedding: bool,
    #[arg(long)]
    train_lm_head: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Max-normalized frequency below which experts are removed.
    #[arg(long, conflicts_with = "max_ratio")]
    tau: Option<f64>,
    /// Choose the smallest threshold keeping at most this fraction of
    /// expert parameters.
    #[arg(long)]
    max_ratio: Option<f64>,
    /// Count usage on this text instead of the usage stored in the model.
    #[arg(long)]
    usage_from: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Segment length; defaults to the model's training length.
    #[arg(long)]
    seg_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    streams: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 200)]
    tokens: usize,
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    model: PathBuf,
    /// `name=path` text domains; two or more print the divergence matrix.
    #[arg(long = "domain")]
    domains: Vec<String>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_PRUNE_REFUSED: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::PruneRefused { .. } => EXIT_PRUNE_REFUSED,
                _ => EXIT_FAILURE,
            })
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Extend(a) => cmd_extend(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Check(a) => cmd_check(a),
    }
    .map(|()| 0)
    .or_else(|e| match e {
        CmdError::ChecksFailed => Ok(EXIT_CHECK_FAILED),
        CmdError::Lib(e) => Err(e),
    })
}

enum CmdError {
    Lib(Error),
    ChecksFailed,
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Lib(e)
    }
}

type CmdResult = std::result::Result<(), CmdError>;

/// Streams step records to an optional JSONL file and stderr.
struct StepSink {
    file: Option<(PathBuf, BufWriter<File>)>,
    log_every: u64,
    error: Option<Error>,
}

impl StepSink {
    fn new(flags: &PlanFlags) -> Result<Self> {
        let file = match &flags.metrics {
            Some(p) => Some((p.clone(), BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?))),
            None => None,
        };
        Ok(StepSink {
            file,
            log_every: flags.log_every,
            error: None,
        })
    }

    fn record(&mut self, r: &StepRecord) {
        if let Some((path, w)) = &mut self.file {
            let line = serde_json::to_string(r).expect("plain record");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                self.error.get_or_insert(io_err(path, e));
            }
        }
        if self.log_every > 0 && r.step % self.log_every == 0 {
            let entropy = r.usage_entropy.iter().sum::<f64>() / r.usage_entropy.len().max(1) as f64;
            eprintln!(
                "step {:>6}  tokens {:>9}  lr {:.2e}  lm {:.4}  total {:.4}  |g| {:.3}  usage H {:.3}",
                r.step, r.tokens_seen, r.lr, r.lm_loss, r.total, r.grad_norm, entropy
            );
        }
    }

    fn finish(self) -> Result<()> {
        self.error.map_or(Ok(()), Err)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn corpus(plan: &TrainPlan) -> Result<Vec<usize>> {
    let path = plan
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("no corpus given (use --corpus or plan.corpus)".into()))?;
    load_corpus(path)
}

fn save(model: &Model, out: &Path) -> Result<()> {
    save_checkpoint(model, out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let run = RunConfig::load(a.flags.config.as_deref())?;
    let config = run.model.unwrap_or(match a.preset {
        Preset::Desk => ModuleFormerConfig::desk(),
        Preset::Tiny => ModuleFormerConfig::tiny(),
    });
    let mut plan = a.flags.plan(run.plan, TrainPlan::desk_pretrain(), config.segment_length)?;
    if let Some(w) = a.mi_weight {
        plan.loss_weights.mi = w;
    }
    if plan.mode != TrainMode::Pretrain {
        return Err(Error::Config(format!("train runs pretraining, plan mode is {:?}", plan.mode)).into());
    }
    if !(0.0..1.0).contains(&a.holdout) {
        return Err(Error::Config(format!("holdout fraction {} outside [0, 1)", a.holdout)).into());
    }
    let tokens = corpus(&plan)?;
    let (train_part, held) = split_holdout(&tokens, a.holdout);
    let mut model = Model::new(config)?;
    eprintln!(
        "model: {} parameters, plan: {} steps of {} tokens",
        model.param_count(),
        plan.steps(),
        plan.batch_tokens
    );
    let mut sink = StepSink::new(&a.flags)?;
    train_with(&mut model, &plan, &train_part, &mut |r| sink.record(r))?;
    sink.finish()?;
    if !held.is_empty() {
        let r = evaluate(&model, &held, EvalOptions::new(plan.segment_length, 1))?;
        println!(
            "{}",
            serde_json::json!({"heldout_perplexity": r.perplexity, "heldout_tokens": r.tokens, "usage_entropy": r.usage.mean_entropy()})
        );
    }
    save(&model, &a.out)?;
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> CmdResult {
    let run = RunConfig::load(a.flags.config.as_deref())?;
    let mut model = load_checkpoint(&a.model)?;
    let mut plan = a.flags.plan(run.plan, TrainPlan::desk_finetune(), model.config.segment_length)?;
    if let Some(w) = a.concentration_weight {
        plan.loss_weights.concentration = w;
    }
    let tokens = corpus(&plan)?;
    let validation = match a.validation.as_ref().or(plan.validation.as_ref()) {
        Some(p) => load_corpus(p)?,
        None => tokens.clone(),
    };
    let mut sink = StepSink::new(&a.flags)?;
    let (_, usage) = finetune_concentrate(&mut model, &plan, &tokens, &validation, &mut |r| sink.record(r))?;
    sink.finish()?;
    print!("{}", usage.to_table());
    save(&model, &a.out)?;
    Ok(())
}

fn cmd_extend(a: ExtendArgs) -> CmdResult {
    let run = RunConfig::load(a.flags.config.as_deref())?;
    let mut model = load_checkpoint(&a.model)?;
    let plan = a.flags.plan(run.plan, TrainPlan::desk_continual(a.reg_weight), model.config.segment_length)?;
    let tokens = corpus(&plan)?;
    let ext = ExtensionSpec {
        n_new: a.new_experts,
        n_new_heads: a.new_heads,
        train_embedding: !a.freeze_embedding,
        train_lm_head: a.train_lm_head,
        ..ExtensionSpec::experts(a.new_experts)
    };
    let before = model.param_count();
    let mut sink = StepSink::new(&a.flags)?;
    extend_and_train(&mut model, &plan, &tokens, ext, a.reg_weight, &mut |r| sink.record(r))?;
    sink.finish()?;
    eprintln!(
        "parameters {} -> {} ({} trainable)",
        before,
        model.param_count(),
        model.trainable_param_count()
    );
    save(&model, &a.out)?;
    Ok(())
}

fn cmd_prune(a: PruneArgs) -> CmdResult {
    let mut model = load_checkpoint(&a.model)?;
    let stats = match &a.usage_from {
        Some(p) => {
            let tokens = load_corpus(p)?;
            evaluate(&model, &tokens, EvalOptions::new(model.config.segment_length, 1))?.usage
        }
        None => model
            .usage
            .clone()
            .ok_or_else(|| Error::Config("model carries no usage statistics; pass --usage-from".into()))?,
    };
    let tau = match (a.tau, a.max_ratio) {
        (Some(t), _) => t,
        (None, Some(r)) => threshold_for_ratio(&model, &stats, r)?.ok_or_else(|| {
            Error::Config(format!("no threshold keeps at most {r} of the expert parameters without refusal"))
        })?,
        (None, None) => return Err(Error::Config("pass --tau or --max-ratio".into()).into()),
    };
    let report = prune(&mut model, &stats, tau)?;
    println!(
        "{}",
        serde_json::json!({
            "tau": tau,
            "kept": report.kept,
            "expert_params_before": report.expert_params_before,
            "expert_params_after": report.expert_params_after,
            "params_before": report.params_before,
            "params_after": report.params_after,
            "expert_ratio": report.expert_ratio(),
        })
    );
    save(&model, &a.out)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let model = load_checkpoint(&a.model)?;
    let tokens = load_corpus(&a.data)?;
    let seg = a.seg_len.unwrap_or(model.config.segment_length);
    let r = evaluate(&model, &tokens, EvalOptions::new(seg, a.streams))?;
    println!(
        "{}",
        serde_json::json!({
            "perplexity": r.perplexity,
            "mean_nll": r.mean_nll,
            "tokens": r.tokens,
            "usage_entropy": r.usage.mean_entropy(),
            "head_usage_entropy": r.head_usage.mean_entropy(),
        })
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> CmdResult {
    let model = load_checkpoint(&a.model)?;
    let text = generate(&model, a.prompt.as_bytes(), a.tokens, a.temperature, a.seed)?;
    let mut out = std::io::stdout().lock();
    out.write_all(&text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::Config(format!("stdout: {e}")))?;
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> CmdResult {
    let model = load_checkpoint(&a.model)?;
    println!(
        "{}",
        serde_json::json!({
            "params": model.param_count(),
            "expert_params": model.expert_param_count(),
            "trainable_params": model.trainable_param_count(),
            "step": model.step,
            "tokens_seen": model.tokens_seen,
            "layers": model.layouts(),
        })
    );
    if let Some(u) = &model.usage {
        println!("stored usage:");
        print!("{}", u.to_table());
    }
    let mut domains = Vec::new();
    for spec in &a.domains {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("domain {spec:?} is not name=path")))?;
        let tokens = load_corpus(path)?;
        let usage = evaluate(&model, &tokens, EvalOptions::new(model.config.segment_length, 1))?.usage;
        println!("usage on {name}:");
        print!("{}", usage.to_table());
        domains.push((name.to_string(), usage));
    }
    if domains.len() >= 2 {
        print!("{}", expert_distribution_divergence(&domains)?.to_table());
    }
    Ok(())
}

fn cmd_check(a: CheckArgs) -> CmdResult {
    let outcomes = run_checks(a.seeds.max(1));
    let mut ok = true;
    for c in &outcomes {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(CmdError::ChecksFailed)
    }
}

//! Command-line interface: `train`, `distill`, `decode`, `eval`, `bench`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use crate::bench::corpus::{load_inputs, Vocab};
use crate::bench::report::render_report;
use crate::bench::{load_corpus, run_bench, save_corpus, BenchOptions, BenchReport, Corpus, ReportFormat, TaskKind};
use crate::criteria::AcceptanceCriterion;
use crate::engine::{blockwise_decode, blockwise_decode_combined, DecodeConfig, DecodeResult};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::distill::distill_corpus;
use crate::model::synthetic::{make_synthetic_model, SyntheticKind, SyntheticSpec};
use crate::model::tiny::{FreezeMask, ModelConfig, TinyBlockModel};
use crate::model::train::{train, OptimizerKind, TrainOptions};
use crate::model::ScoringModel;
use crate::TokenId;

#[derive(Debug, Parser)]
#[command(name = "blockdec", version, about = "Blockwise parallel decoding: train, distill, decode and benchmark")]
pub struct Cli {
    /// Seed for initialization, batch sampling and synthetic models.
    #[arg(long, global = true, env = "BLOCKDEC_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Format of reports and summaries.
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Json)]
    pub report_format: ReportFormat,
    /// Output file (stdout when absent; required by `distill`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a k-head model from scratch or from a checkpoint.
    Train(TrainArgs),
    /// Replace corpus targets with a teacher's greedy decodes.
    Distill(DistillArgs),
    /// Decode inputs and print the per-step trace.
    Decode(DecodeArgs),
    /// Mean-of-heads loss of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Benchmark a k x criterion matrix and emit a report.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// text_char, synthetic_pattern or intensity_grid.
    #[arg(long)]
    pub task: TaskKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    pub model_out: PathBuf,
    /// Start from this checkpoint; a different `--heads` gets a fresh head extension.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Number of heads k (defaults to 1, or the initial checkpoint's k).
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 256)]
    pub d_hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub attn_heads: usize,
    /// Longest context (defaults to the corpus' longest input + target + k + 2).
    #[arg(long)]
    pub max_context: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Defaults to 0.003 for Adam and 0.05 for SGD.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long)]
    pub freeze_base: bool,
    #[arg(long)]
    pub freeze_extension: bool,
    #[arg(long)]
    pub freeze_projection: bool,
    /// Report the mean-of-heads loss on this corpus after training.
    #[arg(long)]
    pub val_corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub teacher: PathBuf,
    /// Decode length limit (defaults to what the teacher's context allows).
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SyntheticArg {
    Random,
    Perfect,
    Adversarial,
}

impl SyntheticArg {
    fn kind(self) -> SyntheticKind {
        match self {
            SyntheticArg::Random => SyntheticKind::RandomTable,
            SyntheticArg::Perfect => SyntheticKind::PerfectProposals,
            SyntheticArg::Adversarial => SyntheticKind::Adversarial,
        }
    }

    fn label(self) -> &'static str {
        match self {
            SyntheticArg::Random => "synthetic_random",
            SyntheticArg::Perfect => "synthetic_perfect",
            SyntheticArg::Adversarial => "synthetic_adversarial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    /// One predict and one verify call per iteration.
    Standard,
    /// Verify and next predict share a call.
    Combined,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Input file: corpus lines (the target side is ignored) or a pattern spec.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub synthetic: Option<SyntheticArg>,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// e.g. `exact`, `kind=top_k,k=2`, `kind=distance,eps=2,min_block=1`.
    #[arg(long, default_value = "kind=exact")]
    pub criterion: AcceptanceCriterion,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, value_enum, default_value_t = Variant::Combined)]
    pub variant: Variant,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// `[LABEL=]PATH`; repeatable. The label defaults to the file stem.
    #[arg(long)]
    pub checkpoint: Vec<String>,
    /// Synthetic model with k = max(--k); repeatable.
    #[arg(long, value_enum)]
    pub synthetic: Vec<SyntheticArg>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub k: Vec<usize>,
    /// Repeatable; defaults to exact.
    #[arg(long)]
    pub criterion: Vec<AcceptanceCriterion>,
    /// Decode length limit (defaults to the longest target, plus one for EOS).
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Only use the first N corpus pairs.
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Parse the process arguments, run, and map errors to a nonzero exit.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Distill(a) => cmd_distill(cli, a),
        Command::Decode(a) => cmd_decode(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
    }
}

fn write_output(cli: &Cli, text: &str) -> Result<()> {
    match &cli.out {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Render a flat key/value summary in the requested format.
fn render_summary(fields: &Map<String, Value>, format: ReportFormat) -> String {
    let plain = |v: &Value| match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    match format {
        ReportFormat::Json => format!("{}\n", serde_json::to_string_pretty(fields).expect("summary serializes")),
        ReportFormat::Csv => {
            let keys: Vec<&str> = fields.keys().map(String::as_str).collect();
            let values: Vec<String> = fields.values().map(plain).collect();
            format!("{}\n{}\n", keys.join(","), values.join(","))
        }
        ReportFormat::Markdown => {
            let mut s = String::from("| field | value |\n|---|---|\n");
            for (k, v) in fields {
                s.push_str(&format!("| {k} | {} |\n", plain(v)));
            }
            s
        }
    }
}

fn load(args: &CorpusArgs) -> Result<Corpus> {
    load_corpus(&args.corpus, args.task).with_context(|| format!("cannot load corpus {}", args.corpus.display()))
}

fn load_model(path: &Path) -> Result<TinyBlockModel> {
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn check_vocab(model: &dyn ScoringModel, vocab: &Vocab, what: &str) -> Result<()> {
    if model.vocab_size() != vocab.size() {
        bail!("{what} has vocabulary {} but the {} task needs {}", model.vocab_size(), vocab.kind, vocab.size());
    }
    Ok(())
}

fn pair_refs(pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Vec<(&[TokenId], &[TokenId])> {
    pairs.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect()
}

/// Largest decode length that fits every input into the model's context.
fn context_max_len(model: &TinyBlockModel, inputs: &[Vec<TokenId>]) -> Result<usize> {
    let longest = inputs.iter().map(Vec::len).max().unwrap_or(0);
    model
        .config()
        .max_context
        .checked_sub(longest + 1)
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("an input of length {longest} leaves no room in the model's context"))
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let pairs = corpus.training_pairs();
    let mut model = match &a.init {
        Some(path) => {
            let init = load_model(path)?;
            match a.heads {
                Some(k) if k != init.config().k_heads => init.with_heads(k, cli.seed)?,
                _ => init,
            }
        }
        None => {
            let k = a.heads.unwrap_or(1);
            let longest = pairs.iter().map(|(x, y)| x.len() + y.len()).max().unwrap_or(0);
            TinyBlockModel::new(ModelConfig {
                vocab_size: corpus.vocab.size(),
                d_model: a.d_model,
                d_hidden: a.d_hidden,
                num_layers: a.layers,
                attn_heads: a.attn_heads,
                k_heads: k,
                max_context: a.max_context.unwrap_or(longest + k + 2),
                seed: cli.seed,
            })?
        }
    };
    check_vocab(&model, &corpus.vocab, "model")?;
    model.set_freeze_mask(FreezeMask {
        base: a.freeze_base,
        head_extension: a.freeze_extension,
        vocab_projection: a.freeze_projection,
    });
    let optimizer = match a.optimizer {
        OptimizerArg::Sgd => OptimizerKind::Sgd,
        OptimizerArg::Adam => OptimizerKind::Adam,
    };
    let default_lr = if optimizer == OptimizerKind::Adam { 0.003 } else { 0.05 };
    let opts = TrainOptions {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr.unwrap_or(default_lr),
        optimizer,
        seed: cli.seed,
    };
    let log = train(&mut model, &pairs, &opts)?;
    save_checkpoint(&model, &a.model_out).with_context(|| format!("cannot write {}", a.model_out.display()))?;

    let mut summary = Map::new();
    summary.insert("checkpoint".into(), json!(a.model_out.display().to_string()));
    summary.insert("k_heads".into(), json!(model.config().k_heads));
    summary.insert("parameters".into(), json!(model.num_parameters()));
    summary.insert("steps".into(), json!(opts.steps));
    summary.insert("train_loss_tail".into(), json!(log.tail_mean(50)));
    if let Some(path) = &a.val_corpus {
        let val = load_corpus(path, a.corpus.task).with_context(|| format!("cannot load corpus {}", path.display()))?;
        let loss = model.mean_head_loss(&pair_refs(&val.training_pairs()))?;
        summary.insert("validation_loss".into(), json!(loss));
    }
    write_output(cli, &render_summary(&summary, cli.report_format))
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let model = load_model(&a.checkpoint)?;
    check_vocab(&model, &corpus.vocab, "checkpoint")?;
    let pairs = corpus.training_pairs();
    let refs = pair_refs(&pairs);
    let mut summary = Map::new();
    summary.insert("checkpoint".into(), json!(a.checkpoint.display().to_string()));
    summary.insert("examples".into(), json!(pairs.len()));
    summary.insert("validation_loss".into(), json!(model.mean_head_loss(&refs)?));
    for head in 0..model.config().k_heads {
        summary.insert(format!("head_{head}_loss"), json!(model.sub_loss(&refs, head)?));
    }
    write_output(cli, &render_summary(&summary, cli.report_format))
}

fn cmd_distill(cli: &Cli, a: &DistillArgs) -> Result<()> {
    let out = cli.out.as_ref().ok_or_else(|| anyhow!("distill needs --out for the distilled corpus"))?;
    let corpus = load(&a.corpus)?;
    let teacher = load_model(&a.teacher)?;
    check_vocab(&teacher, &corpus.vocab, "teacher")?;
    let inputs = corpus.inputs();
    let max_len = match a.max_len {
        Some(n) => n,
        None => context_max_len(&teacher, &inputs)?,
    };
    let config = DecodeConfig::greedy(max_len).with_eos(corpus.vocab.decode_eos());
    let pairs = distill_corpus(&teacher, &inputs, &config)
        .map_err(|(i, e)| anyhow!("teacher decode failed on example {i}: {e}"))?;
    let distilled = corpus.with_targets(pairs.into_iter().map(|(_, y)| y).collect());
    save_corpus(&distilled, out).with_context(|| format!("cannot write {}", out.display()))?;
    eprintln!("distilled {} pairs into {}", distilled.pairs.len(), out.display());
    Ok(())
}

fn render_tokens(vocab: &Vocab, tokens: &[TokenId]) -> String {
    tokens.iter().map(|&t| vocab.symbol(t)).collect::<Vec<_>>().join(" ")
}

/// Step trace: one `Step t: n tokens [ ... ]` line per iteration.
pub fn format_trace(vocab: &Vocab, result: &DecodeResult) -> String {
    let mut out = String::new();
    let mut at = 0;
    for (t, &n) in result.accepted_sizes.iter().enumerate() {
        let block = &result.output[at..at + n];
        out.push_str(&format!("Step {}: {} tokens [ {} ]\n", t + 1, n, render_tokens(vocab, block)));
        at += n;
    }
    out
}

fn cmd_decode(cli: &Cli, a: &DecodeArgs) -> Result<()> {
    let (vocab, inputs) =
        load_inputs(&a.input, a.task).with_context(|| format!("cannot load inputs {}", a.input.display()))?;
    let tiny;
    let synthetic;
    let (model, default_len): (&dyn ScoringModel, usize) = match (&a.checkpoint, a.synthetic) {
        (Some(path), _) => {
            tiny = load_model(path)?;
            let n = context_max_len(&tiny, &inputs)?;
            (&tiny, n)
        }
        (None, Some(kind)) => {
            synthetic = make_synthetic_model(SyntheticSpec::new(vocab.size(), a.k, cli.seed, kind.kind()));
            (&synthetic, 64)
        }
        (None, None) => bail!("decode needs --checkpoint or --synthetic"),
    };
    check_vocab(model, &vocab, "model")?;
    let config = DecodeConfig::new(a.k, a.max_len.unwrap_or(default_len))
        .with_criterion(a.criterion)
        .with_eos(vocab.decode_eos())
        .with_token_space(vocab.token_space());

    let mut text = String::new();
    for (i, x) in inputs.iter().enumerate() {
        let r = match a.variant {
            Variant::Standard => blockwise_decode(model, x, &config),
            Variant::Combined => blockwise_decode_combined(model, x, &config),
        }
        .with_context(|| format!("decode failed on input {}", i + 1))?;
        text.push_str(&format!("Input {}: [ {} ]\n", i + 1, render_tokens(&vocab, x)));
        text.push_str(&format_trace(&vocab, &r));
        text.push_str(&format!(
            "Output: [ {} ] ({} tokens, {} iterations, {} invocations)\n\n",
            render_tokens(&vocab, &r.output),
            r.output.len(),
            r.iterations,
            r.model_invocations
        ));
    }
    write_output(cli, &text)
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let mut corpus = load(&a.corpus)?;
    if let Some(n) = a.limit {
        corpus.pairs.truncate(n);
    }
    if a.k.is_empty() {
        bail!("--k needs at least one block size");
    }
    if a.checkpoint.is_empty() && a.synthetic.is_empty() {
        bail!("bench needs at least one --checkpoint or --synthetic model");
    }
    let criteria = if a.criterion.is_empty() { vec![AcceptanceCriterion::exact()] } else { a.criterion.clone() };
    let eos = corpus.vocab.decode_eos();
    let max_len = a.max_len.unwrap_or(corpus.max_target_len() + usize::from(eos.is_some())).max(1);
    let mut configs = Vec::new();
    for &k in &a.k {
        for &criterion in &criteria {
            let c = DecodeConfig::new(k, max_len)
                .with_criterion(criterion)
                .with_eos(eos)
                .with_token_space(corpus.vocab.token_space());
            c.validate().with_context(|| format!("invalid configuration k={k} {criterion}"))?;
            configs.push(c);
        }
    }
    let options = BenchOptions { repeats: a.repeats };
    let mut rows = Vec::new();
    for spec in &a.checkpoint {
        let (label, path) = match spec.split_once('=') {
            Some((label, path)) => (label.to_string(), PathBuf::from(path)),
            None => {
                let path = PathBuf::from(spec);
                let stem = path.file_stem().map_or_else(|| spec.clone(), |s| s.to_string_lossy().into_owned());
                (stem, path)
            }
        };
        let model = load_model(&path)?;
        check_vocab(&model, &corpus.vocab, "checkpoint")?;
        rows.extend(run_bench(&corpus, &model, &label, &configs, &options)?);
    }
    let heads = a.k.iter().copied().max().unwrap_or(1);
    for &kind in &a.synthetic {
        let model = make_synthetic_model(SyntheticSpec::new(corpus.vocab.size(), heads, cli.seed, kind.kind()));
        rows.extend(run_bench(&corpus, &model, kind.label(), &configs, &options)?);
    }
    let report = BenchReport::new(cli.seed, corpus.task_kind, rows);
    write_output(cli, &render_report(&report, cli.report_format)?)
}

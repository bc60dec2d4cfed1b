use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use granorm::corpus::{
    build_src_vocab, build_token_vocab, gen_label_bias_dataset, load_jsonl, read_grammar, Example, SynthSpec,
    DEFAULT_CUTOFF,
};
use granorm::model::{Model, ScoreMode};
use granorm::search::{default_max_steps, exhaustive_derivations, DEFAULT_ENUMERATION_LIMIT};
use granorm::training::{
    decode_all, evaluate_corpus, init_global_from_local, load_model, save_model, train, TrainError, TrainingConfig,
};
use granorm::transition::actions_to_ast;

#[derive(Parser)]
#[command(
    name = "granorm",
    version,
    about = "Grammar-constrained parser with local and global training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic label-bias benchmark.
    GenSynth(GenSynthArgs),
    /// Train a locally normalized model by maximum likelihood.
    TrainLocal(TrainLocalArgs),
    /// Fine-tune (or cold-start) a globally normalized model by max-margin.
    TrainGlobal(TrainGlobalArgs),
    /// Decode utterances from a JSON-Lines file.
    Decode(DecodeArgs),
    /// Exact match and BLEU on a dataset, as JSON.
    Evaluate(EvaluateArgs),
    /// Enumerate every derivation of one utterance with exact global probabilities.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_dev: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    /// Identifier pool size K (at least 10).
    #[arg(long, default_value_t = 50)]
    pool: usize,
    /// Fraction of identifier-branch targets.
    #[arg(long, default_value_t = 0.8)]
    branch_prior: f64,
    /// Distractor probability per source slot.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Fraction of the pool reserved for dev/test.
    #[arg(long, default_value_t = 0.2)]
    held_out: f64,
}

#[derive(Args)]
struct CommonTrain {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Checkpoint to write; a `.meta.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON-Lines statistics.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    eval_beam: usize,
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    /// Epochs without dev improvement before stopping (0 disables).
    #[arg(long)]
    patience: Option<usize>,
    /// Maximum epochs [default: 200 local, 50 global].
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ModelShape {
    /// Grammar file.
    #[arg(long)]
    grammar: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Minimum count for source and target vocabulary entries.
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    vocab_cutoff: usize,
}

#[derive(Args)]
struct TrainLocalArgs {
    #[command(flatten)]
    common: CommonTrain,
    #[command(flatten)]
    shape: ModelShape,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("init").required(true).args(["init_from", "cold_start"]))]
struct TrainGlobalArgs {
    #[command(flatten)]
    common: CommonTrain,
    #[command(flatten)]
    shape: ModelShape,
    /// Local checkpoint to warm-start from.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Start from random parameters (requires --grammar).
    #[arg(long)]
    cold_start: bool,
    #[arg(long, default_value_t = 0.1)]
    margin: f64,
    /// Beam width for negative mining.
    #[arg(long, default_value_t = 20)]
    neg_beam: usize,
}

#[derive(Args)]
struct DecodeArgs {
    /// Checkpoint written by train-local or train-global.
    #[arg(long)]
    model: PathBuf,
    /// JSON-Lines file with a `src` array per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Ranking mode, `local` or `global` [default: the checkpoint's training mode].
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ScoreMode>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Ranking mode, `local` or `global` [default: the checkpoint's training mode].
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ScoreMode>,
    /// Include gold and predicted S-expressions per example.
    #[arg(long)]
    per_example: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Whitespace-separated source utterance.
    #[arg(long)]
    src: String,
    /// Longest derivation to enumerate [default: 10 × source length + 20].
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_LIMIT)]
    limit: usize,
}

fn parse_mode(s: &str) -> Result<ScoreMode, String> {
    match s {
        "local" => Ok(ScoreMode::Local),
        "global" => Ok(ScoreMode::Global),
        _ => Err(format!("expected `local` or `global`, got `{s}`")),
    }
}

enum Failure {
    Usage(String),
    Data(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.to_string())
    }
}

fn train_error(e: TrainError) -> Failure {
    match e {
        TrainError::MissingWarmStart | TrainError::Config(_) => Failure::Usage(e.to_string()),
        e => Failure::Data(e.to_string()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRANORM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::TrainLocal(a) => {
            let pool = thread_pool(a.common.jobs)?;
            pool.install(|| train_local(a))
        }
        Command::TrainGlobal(a) => {
            let pool = thread_pool(a.common.jobs)?;
            pool.install(|| train_global(a))
        }
        Command::Decode(a) => {
            let pool = thread_pool(a.jobs)?;
            pool.install(|| decode(a))
        }
        Command::Evaluate(a) => {
            let pool = thread_pool(a.jobs)?;
            pool.install(|| evaluate(a))
        }
        Command::OracleCheck(a) => oracle_check(a),
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        n_train: a.n_train,
        n_dev: a.n_dev,
        n_test: a.n_test,
        identifier_pool: a.pool,
        branch_prior: a.branch_prior,
        noise: a.noise,
        held_out: a.held_out,
        seed: a.seed,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    gen_label_bias_dataset(&spec, &a.out)?;
    Ok(())
}

/// Build a fresh model whose vocabularies come from `train_path`.
fn fresh_model(shape: &ModelShape, train_path: &Path) -> Result<(Model, Vec<Example>), Failure> {
    let Some(gpath) = &shape.grammar else {
        return Err(Failure::Usage("--grammar is required when not warm-starting".into()));
    };
    let base = read_grammar(gpath)?;
    let train = load_jsonl(train_path, &base)?;
    let spec = base.with_token_vocab(build_token_vocab(&train, shape.vocab_cutoff))?;
    let src_vocab = build_src_vocab(&train, shape.vocab_cutoff);
    let model = Model::new(spec, src_vocab, shape.dim).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((model, train))
}

fn apply_common(cfg: &mut TrainingConfig, c: &CommonTrain) {
    cfg.seed = c.seed;
    cfg.lr = c.lr;
    cfg.batch_size = c.batch_size;
    cfg.eval_beam_width = c.eval_beam;
    cfg.clip_norm = c.clip;
    if let Some(p) = c.patience {
        cfg.patience = p;
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
}

fn write_stats(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    if let Some(p) = path {
        fs::write(p, text)?;
    }
    Ok(())
}

fn train_local(a: TrainLocalArgs) -> Result<(), Failure> {
    let (model, train_set) = fresh_model(&a.shape, &a.common.train)?;
    let dev = load_jsonl(&a.common.dev, model.grammar())?;
    let mut cfg = TrainingConfig::local();
    apply_common(&mut cfg, &a.common);
    cfg.dim = a.shape.dim;
    let init = model.init_params(cfg.seed);
    let out = train(&model, init, &train_set, &dev, &cfg).map_err(train_error)?;
    save_model(&a.common.out, &model, &out.params, ScoreMode::Local).map_err(train_error)?;
    write_stats(a.common.stats.as_deref(), &out.stats.to_jsonl())?;
    log::info!(
        "best epoch {} in {:.1}s",
        out.stats.best_epoch,
        out.stats.wall_clock_secs
    );
    Ok(())
}

fn train_global(a: TrainGlobalArgs) -> Result<(), Failure> {
    let (model, params) = match (&a.init_from, a.cold_start) {
        (Some(ckpt), _) => {
            let (model, _, _) = load_model(ckpt).map_err(train_error)?;
            let params = init_global_from_local(ckpt, &model).map_err(train_error)?;
            (model, params)
        }
        (None, true) => {
            let (model, _) = fresh_model(&a.shape, &a.common.train)?;
            let params = model.init_params(a.common.seed);
            (model, params)
        }
        (None, false) => return Err(train_error(TrainError::MissingWarmStart)),
    };
    let train_set = load_jsonl(&a.common.train, model.grammar())?;
    let dev = load_jsonl(&a.common.dev, model.grammar())?;
    let mut cfg = TrainingConfig::global();
    apply_common(&mut cfg, &a.common);
    cfg.dim = model.dim();
    cfg.margin = a.margin;
    cfg.neg_beam_width = a.neg_beam;
    let out = train(&model, params, &train_set, &dev, &cfg).map_err(train_error)?;
    save_model(&a.common.out, &model, &out.params, ScoreMode::Global).map_err(train_error)?;
    write_stats(a.common.stats.as_deref(), &out.stats.to_jsonl())?;
    log::info!(
        "best epoch {} in {:.1}s",
        out.stats.best_epoch,
        out.stats.wall_clock_secs
    );
    Ok(())
}

#[derive(serde::Deserialize)]
struct SrcLine {
    src: Vec<String>,
}

#[derive(Serialize)]
struct DecodedLine<'a> {
    src: &'a [String],
    pred: Option<String>,
}

fn decode(a: DecodeArgs) -> Result<(), Failure> {
    let (model, params, meta) = load_model(&a.model).map_err(train_error)?;
    let text = fs::read_to_string(&a.input).map_err(|e| format!("{}: {e}", a.input.display()))?;
    let mut sources = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: SrcLine = serde_json::from_str(line).map_err(|e| format!("{}:{}: {e}", a.input.display(), i + 1))?;
        sources.push(l.src);
    }
    let mode = a.mode.unwrap_or(meta.mode);
    let preds = decode_all(&model, &params, sources.iter().map(Vec::as_slice), mode, a.beam);
    let mut out = std::io::stdout().lock();
    for (src, p) in sources.iter().zip(preds) {
        let line = DecodedLine {
            src,
            pred: p.map(|(_, ast)| ast.to_sexpr(model.grammar())),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let (model, params, meta) = load_model(&a.model).map_err(train_error)?;
    let data = load_jsonl(&a.data, model.grammar())?;
    let mode = a.mode.unwrap_or(meta.mode);
    let report = evaluate_corpus(&model, &params, &data, mode, a.beam, a.per_example);
    writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn oracle_check(a: OracleArgs) -> Result<(), Failure> {
    let (model, params, _) = load_model(&a.model).map_err(train_error)?;
    let tokens: Vec<String> = a.src.split_whitespace().map(String::from).collect();
    let utt = model.utterance(&tokens)?;
    let max_steps = a.max_steps.unwrap_or_else(|| default_max_steps(utt.len()));
    let report = exhaustive_derivations(&model, &params, &utt, max_steps, a.limit)?;
    let mut out = std::io::stdout().lock();
    for (rank, (d, p)) in report.derivations.iter().zip(&report.global_probs).enumerate() {
        let sexpr = actions_to_ast(&d.actions, model.grammar())?.to_sexpr(model.grammar());
        writeln!(
            out,
            "{}\t{:.9}\t{:.9}\t{:.9}\t{}",
            rank + 1,
            d.sum_logits,
            d.sum_local_logprob,
            p,
            sexpr
        )?;
    }
    writeln!(out, "Z_G={}", report.z)?;
    Ok(())
}

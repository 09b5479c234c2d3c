//! Command-line front end: prepare, train, eval, predict, bench, gradcheck.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! The fully resolved configuration is echoed to stderr once per run;
//! stdout carries only machine-readable results.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use attnsent::bench::{bench, render_table, BenchSubject, LatencyReport};
use attnsent::gru::GruParams;
use attnsent::model::{Model, ModelConfig};
use attnsent::pe::FusionMode;
use attnsent::tensor::Matrix;
use attnsent::text::{read_corpus, write_corpus, Document, Label, Vocabulary};
use attnsent::train::{
    balance_corpus, evaluate, grad_check, train, TrainConfig, DEFAULT_LENGTH_THRESHOLD,
};
use attnsent::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "attnsent",
    about = "Self-attention sentiment classifier: data prep, training, inference, benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize a corpus and rebalance its classes.
    Prepare(PrepareArgs),
    /// Train a model and write it with its loss history.
    Train(TrainArgs),
    /// Evaluate a trained model on a labeled corpus.
    Eval(EvalArgs),
    /// Classify text from --text or one document per stdin line.
    Predict(PredictArgs),
    /// Compare self-attention and GRU forward latency.
    Bench(BenchArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Architecture overrides; unset values keep defaults or config-file values.
#[derive(Args, Debug, Default)]
struct ModelFlags {
    #[arg(long)]
    d_emb: Option<usize>,
    #[arg(long)]
    d_pe: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, help = "Positional fusion: add or concat")]
    fusion: Option<FusionMode>,
    #[arg(long)]
    se_reduction: Option<usize>,
    #[arg(long)]
    ffn_width: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

impl ModelFlags {
    fn apply(&self, config: &mut ModelConfig) {
        if let Some(v) = self.d_emb {
            config.d_emb = v;
        }
        if let Some(v) = self.d_pe {
            config.d_pe = v;
        }
        if let Some(v) = self.heads {
            config.heads = v;
        }
        if let Some(v) = self.fusion {
            config.fusion = v;
        }
        if let Some(v) = self.se_reduction {
            config.se_reduction = v;
        }
        if let Some(v) = self.ffn_width {
            config.ffn_width = Some(v);
        }
        if let Some(v) = self.max_len {
            config.max_len = v;
        }
    }
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_count: Option<u64>,
    #[arg(long)]
    bucket_count: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, config: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = self.gamma {
            config.gamma = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.min_count {
            config.vocab.min_count = v;
        }
        if let Some(v) = self.bucket_count {
            config.vocab.bucket_count = v;
        }
    }
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    length_threshold: Option<usize>,
    #[arg(long, help = "key = value file applied between defaults and flags")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, help = "Write per-epoch records here as well as to stdout")]
    history: Option<PathBuf>,
    #[arg(long, help = "key = value file applied between defaults and flags")]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, help = "Classify this text instead of reading stdin")]
    text: Option<String>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, help = "Use this trained model for the attention side")]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 64, help = "Tokens per benchmark document")]
    length: usize,
    #[arg(long, default_value_t = 8)]
    docs: usize,
    #[arg(long, default_value_t = 256)]
    gru_units: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, help = "Also write the reports as JSON to this path")]
    out: Option<PathBuf>,
    #[command(flatten)]
    model_flags: ModelFlags,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    model_flags: ModelFlags,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes, not usage errors.
            let code = if err.use_stderr() { 1 } else { 0 };
            err.print().ok();
            std::process::exit(code);
        }
    };
    let threads = thread_cap();
    if threads > 1 {
        log::info!("ATTNSENT_THREADS={threads} noted; the engine is single-threaded");
    }
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code_for(&err));
        }
    }
}

/// Parallelism cap from ATTNSENT_THREADS; the engine runs single-threaded,
/// so any valid value is honored trivially.
fn thread_cap() -> usize {
    match std::env::var("ATTNSENT_THREADS") {
        Err(_) => 1,
        Ok(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                eprintln!("warning: ignoring invalid ATTNSENT_THREADS value {raw:?}");
                1
            }
        },
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::InvalidInput(_) | Error::Data(_) | Error::Io(_) | Error::ModelFormat { .. } => 2,
        Error::NonFinite(_) | Error::Numeric(_) | Error::ShapeMismatch { .. } => 3,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Prepare(args) => run_prepare(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Predict(args) => run_predict(args),
        Command::Bench(args) => run_bench(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn echo_config<T: Serialize>(config: &T) {
    match serde_json::to_string(config) {
        Ok(json) => eprintln!("config: {json}"),
        Err(err) => eprintln!("config: <unserializable: {err}>"),
    }
}

/// `key = value` lines with `#` comments, the layer between defaults and
/// flags. Unknown keys are rejected.
fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected key = value, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn parse_kv<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("config key {key}: cannot parse {value:?}: {e}")))
}

fn apply_kv_file(
    entries: &BTreeMap<String, String>,
    model: &mut ModelConfig,
    train: &mut TrainConfig,
    length_threshold: &mut usize,
) -> Result<()> {
    for (key, value) in entries {
        match key.as_str() {
            "d_emb" => model.d_emb = parse_kv(key, value)?,
            "d_pe" => model.d_pe = parse_kv(key, value)?,
            "heads" => model.heads = parse_kv(key, value)?,
            "fusion" => model.fusion = parse_kv(key, value)?,
            "se_reduction" => model.se_reduction = parse_kv(key, value)?,
            "ffn_width" => model.ffn_width = Some(parse_kv(key, value)?),
            "use_ffn" => model.use_ffn = parse_kv(key, value)?,
            "use_residual_norm" => model.use_residual_norm = parse_kv(key, value)?,
            "max_len" => model.max_len = parse_kv(key, value)?,
            "epochs" => train.epochs = parse_kv(key, value)?,
            "batch_size" => train.batch_size = parse_kv(key, value)?,
            "learning_rate" => train.learning_rate = parse_kv(key, value)?,
            "beta1" => train.beta1 = parse_kv(key, value)?,
            "beta2" => train.beta2 = parse_kv(key, value)?,
            "adam_eps" => train.adam_eps = parse_kv(key, value)?,
            "gamma" => train.gamma = parse_kv(key, value)?,
            "alpha" => train.alpha = parse_pair(key, value)?,
            "seed" => train.seed = parse_kv(key, value)?,
            "split" => train.split = parse_triple(key, value)?,
            "min_count" => train.vocab.min_count = parse_kv(key, value)?,
            "bucket_count" => train.vocab.bucket_count = parse_kv(key, value)?,
            "ngram_min" => train.vocab.ngram_min = parse_kv(key, value)?,
            "ngram_max" => train.vocab.ngram_max = parse_kv(key, value)?,
            "length_threshold" => *length_threshold = parse_kv(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
    }
    Ok(())
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::Config(format!(
            "config key {key}: expected {N} comma-separated numbers, got {value:?}"
        )));
    }
    let mut out = [0.0; N];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = parse_kv(key, part)?;
    }
    Ok(out)
}

fn parse_pair(key: &str, value: &str) -> Result<[f64; 2]> {
    parse_list::<2>(key, value)
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    parse_list::<3>(key, value)
}

#[derive(Serialize)]
struct PrepareSummary {
    input_documents: usize,
    output_documents: usize,
    stats: attnsent::train::BalanceStats,
}

fn run_prepare(args: PrepareArgs) -> Result<i32> {
    let mut model = ModelConfig::default();
    let mut train_config = TrainConfig::default();
    let mut length_threshold = DEFAULT_LENGTH_THRESHOLD;
    if let Some(path) = &args.config {
        let entries = read_kv_file(path)?;
        apply_kv_file(&entries, &mut model, &mut train_config, &mut length_threshold)?;
    }
    if let Some(v) = args.length_threshold {
        length_threshold = v;
    }
    echo_config(&serde_json::json!({
        "command": "prepare",
        "corpus": args.corpus,
        "out": args.out,
        "length_threshold": length_threshold,
    }));
    let corpus = read_corpus(&args.corpus)?;
    let normalized: Vec<Document> = corpus
        .iter()
        .map(|doc| Document {
            text: attnsent::text::normalize(&doc.text),
            label: doc.label,
        })
        .collect();
    let (balanced, stats) = balance_corpus(&normalized, length_threshold)?;
    write_corpus(&args.out, &balanced)?;
    let summary = PrepareSummary {
        input_documents: corpus.len(),
        output_documents: balanced.len(),
        stats,
    };
    println!("{}", serde_json::to_string(&summary).map_err(json_err)?);
    Ok(0)
}

fn json_err(err: serde_json::Error) -> Error {
    Error::Data(format!("cannot serialize result: {err}"))
}

fn run_train(args: TrainArgs) -> Result<i32> {
    let mut model_config = ModelConfig::default();
    let mut train_config = TrainConfig::default();
    let mut length_threshold = DEFAULT_LENGTH_THRESHOLD;
    if let Some(path) = &args.config {
        let entries = read_kv_file(path)?;
        apply_kv_file(&entries, &mut model_config, &mut train_config, &mut length_threshold)?;
    }
    args.model.apply(&mut model_config);
    args.train.apply(&mut train_config);
    echo_config(&serde_json::json!({
        "command": "train",
        "corpus": args.corpus,
        "out": args.out,
        "model": model_config,
        "train": train_config,
    }));
    let corpus = read_corpus(&args.corpus)?;
    let outcome = train(&corpus, &model_config, &train_config)?;
    let mut history_file = match &args.history {
        Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => None,
    };
    for record in &outcome.history {
        let line = serde_json::to_string(record).map_err(json_err)?;
        println!("{line}");
        if let Some(file) = history_file.as_mut() {
            writeln!(file, "{line}")?;
        }
    }
    if let Some(mut file) = history_file {
        file.flush()?;
    }
    outcome.model.save(&args.out)?;
    eprintln!(
        "trained: split {:?}, best epoch {}, model written to {}",
        outcome.split_sizes,
        outcome.best_epoch,
        args.out.display()
    );
    Ok(0)
}

fn run_eval(args: EvalArgs) -> Result<i32> {
    let model = Model::load(&args.model)?;
    echo_config(&serde_json::json!({
        "command": "eval",
        "model_path": args.model,
        "model": model.config(),
        "corpus": args.corpus,
    }));
    let corpus = read_corpus(&args.corpus)?;
    let report = evaluate(&model, &corpus)?;
    println!("{}", serde_json::to_string(&report).map_err(json_err)?);
    eprintln!(
        "accuracy {:.4}, macro-F1 {:.4}, mean latency {:.6}s over {} samples",
        report.accuracy, report.macro_f1, report.latency.mean_s, report.latency.samples
    );
    Ok(0)
}

#[derive(Serialize)]
struct Prediction {
    label: Label,
    p_neg: f64,
    p_pos: f64,
}

fn run_predict(args: PredictArgs) -> Result<i32> {
    let model = Model::load(&args.model)?;
    echo_config(&serde_json::json!({
        "command": "predict",
        "model_path": args.model,
        "model": model.config(),
    }));
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut classify = |text: &str| -> Result<()> {
        let output = model.predict(text)?;
        let prediction = Prediction {
            label: output.label(),
            p_neg: output.probs[0],
            p_pos: output.probs[1],
        };
        writeln!(out, "{}", serde_json::to_string(&prediction).map_err(json_err)?)?;
        Ok(())
    };
    match args.text {
        Some(text) => classify(&text)?,
        None => {
            for line in std::io::stdin().lock().lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                classify(&line)?;
            }
        }
    }
    Ok(0)
}

// Word pool for synthetic benchmark documents; values are irrelevant to
// latency, shapes are what matters.
const BENCH_WORDS: [&str; 16] = [
    "giao", "hàng", "nhanh", "máy", "tốt", "pin", "trâu", "đẹp", "chậm", "tệ", "hỏng", "kém",
    "shop", "ổn", "giá", "rẻ",
];

fn run_bench(args: BenchArgs) -> Result<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let token_docs: Vec<Vec<String>> = (0..args.docs)
        .map(|_| {
            (0..args.length)
                .map(|_| BENCH_WORDS[rng.gen_range(0..BENCH_WORDS.len())].to_string())
                .collect()
        })
        .collect();
    let model = match &args.model {
        Some(path) => Model::load(path)?,
        None => {
            // Desk-scale architecture; override via the model flags.
            let mut config = ModelConfig {
                d_emb: 32,
                d_pe: 32,
                heads: 8,
                se_reduction: 4,
                max_len: args.length.max(1),
                ..ModelConfig::default()
            };
            args.model_flags.apply(&mut config);
            let vocab = Vocabulary::build(
                token_docs.iter().map(|d| d.iter().map(String::as_str)),
                attnsent::text::VocabOptions {
                    min_count: 1,
                    bucket_count: 4096,
                    ..Default::default()
                },
            )?;
            Model::init(config, vocab, args.seed)?
        }
    };
    let d_model = model.config().d_model();
    echo_config(&serde_json::json!({
        "command": "bench",
        "model": model.config(),
        "gru_units": args.gru_units,
        "length": args.length,
        "docs": args.docs,
        "reps": args.reps,
        "warmup": args.warmup,
        "seed": args.seed,
        "single_threaded": true,
    }));
    let encoded: Vec<Vec<attnsent::text::TokenRef>> = token_docs
        .iter()
        .map(|doc| model.vocab().encode(doc))
        .collect();
    let gru = GruParams::init(d_model, args.gru_units, &mut rng)?;
    let gru_inputs: Vec<Matrix> = (0..args.docs)
        .map(|_| Matrix::from_fn(args.length, d_model, |_, _| rng.gen_range(-1.0..1.0)))
        .collect::<Result<_>>()?;
    let reports = bench(
        vec![
            BenchSubject::attention(&format!("self-attention (d_model={d_model})"), &model, &encoded),
            BenchSubject::gru(&format!("gru (u={})", args.gru_units), &gru, &gru_inputs),
        ],
        args.docs,
        args.reps,
        args.warmup,
    )?;
    print!("{}", render_table(&reports));
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&reports).map_err(json_err)?;
        std::fs::write(path, json)?;
        eprintln!("reports written to {}", path.display());
    }
    report_ordering(&reports);
    Ok(0)
}

fn report_ordering(reports: &[LatencyReport]) {
    if let [attention, gru] = reports {
        let verdict = if attention.mean_s < gru.mean_s { "faster" } else { "slower" };
        eprintln!(
            "self-attention mean {:.6}s is {verdict} than gru mean {:.6}s",
            attention.mean_s, gru.mean_s
        );
    }
}

fn run_gradcheck(args: GradcheckArgs) -> Result<i32> {
    // Default to the tiny assembly the check is specified for.
    let mut config = ModelConfig {
        d_emb: 8,
        d_pe: 8,
        heads: 4,
        se_reduction: 4,
        max_len: 16,
        ..ModelConfig::default()
    };
    args.model_flags.apply(&mut config);
    echo_config(&serde_json::json!({
        "command": "gradcheck",
        "model": config,
        "eps": args.eps,
        "tolerance": args.tolerance,
        "seed": args.seed,
    }));
    let report = grad_check(&config, args.seed, args.eps, args.tolerance)?;
    println!("{}", serde_json::to_string(&report).map_err(json_err)?);
    if report.passed {
        eprintln!("gradcheck passed: max rel err {:.3e}", report.max_rel_err);
        Ok(0)
    } else {
        eprintln!(
            "gradcheck FAILED: max rel err {:.3e} exceeds tolerance {:.3e}",
            report.max_rel_err, report.tolerance
        );
        Ok(3)
    }
}

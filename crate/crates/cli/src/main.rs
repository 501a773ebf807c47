//! `hsacn` command-line tool: ingest review dumps, train, evaluate,
//! predict, export attention explanations and run the built-in checks.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use hsacn_core::explain::{render_html, report_json};
use hsacn_core::ingest::{
    build_corpus, corpus_hash, parse_reviews, read_corpus, write_corpus, CapOverrides, Corpus, Split,
};
use hsacn_core::model::{
    load_embeddings, read_checkpoint, write_checkpoint, Checkpoint, Example, Model, ModelConfig,
};
use hsacn_core::parallel::Parallelism;
use hsacn_core::train::{evaluate, initial_params, train, TrainConfig};
use hsacn_core::{HsacnError, Real};
use serde_json::json;

/// Exit status for usage and data errors.
const EXIT_USAGE: u8 = 2;
/// Exit status when training diverged.
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "hsacn", version, about = "Review-based rating prediction with hierarchical self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a line-delimited JSON review dump into a corpus cache.
    Ingest(IngestArgs),
    /// Train a model on a corpus cache and write the best checkpoint.
    Train(TrainArgs),
    /// Print the RMSE of a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Print one predicted rating per (user, item) line of a pairs file.
    Predict(PredictArgs),
    /// Write the attention behind one prediction as JSON and HTML.
    Explain(ExplainArgs),
    /// Run the oracle and gradient suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    reviews: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reviews kept per user/item history (default: 90% coverage).
    #[arg(long)]
    rmax: Option<usize>,
    /// Sentences kept per review (default: 70th percentile).
    #[arg(long)]
    smax: Option<usize>,
    /// Words kept per sentence (default: 70th percentile).
    #[arg(long)]
    tmax: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    /// Start from the small planted-signal widths (d=32, d_w=d_s=32, d_l=8).
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    word_hidden: Option<usize>,
    #[arg(long)]
    sentence_hidden: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    kernel_width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    clip: Option<usize>,
    #[arg(long)]
    dropout_embed: Option<f64>,
    #[arg(long)]
    dropout_ffn: Option<f64>,
    #[arg(long)]
    dropout_predict: Option<f64>,
}

impl ModelArgs {
    fn resolve(&self) -> ModelConfig {
        let mut c = if self.tiny { ModelConfig::tiny() } else { ModelConfig::default() };
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.embed_dim, self.embed_dim);
        set(&mut c.word_hidden, self.word_hidden);
        set(&mut c.sentence_hidden, self.sentence_hidden);
        set(&mut c.latent, self.latent);
        set(&mut c.kernel_width, self.kernel_width);
        set(&mut c.heads, self.heads);
        set(&mut c.clip, self.clip);
        c.dropout_embed = self.dropout_embed.unwrap_or(c.dropout_embed);
        c.dropout_ffn = self.dropout_ffn.unwrap_or(c.dropout_ffn);
        c.dropout_predict = self.dropout_predict.unwrap_or(c.dropout_predict);
        c
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train at 32-bit precision.
    #[arg(long)]
    f32: bool,
    /// Train only the rating biases (w_f frozen at zero).
    #[arg(long)]
    bias_only: bool,
    /// Continue from a checkpoint trained on the same corpus and config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Word vectors in word2vec text format used to initialize E.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Metric log (JSON lines); defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Whitespace-separated `user item` per line; `#` starts a comment.
    #[arg(long)]
    pairs: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    user: String,
    #[arg(long)]
    item: String,
    /// Output stem; the report goes to `<out>.json` and `<out>.html`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    /// Random cases per oracle sweep.
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn print_config(command: &str, value: serde_json::Value) {
    eprintln!("config {command} {value}");
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    let file = File::open(path).with_context(|| format!("cannot open corpus {}", path.display()))?;
    read_corpus(BufReader::new(file)).with_context(|| format!("cannot read corpus {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint<f64>> {
    let file = File::open(path).with_context(|| format!("cannot open checkpoint {}", path.display()))?;
    read_checkpoint(BufReader::new(file)).with_context(|| format!("cannot read checkpoint {}", path.display()))
}

/// Checkpoint and corpus must belong together.
fn check_pairing(ckpt: &Checkpoint<f64>, corpus: &Corpus) -> anyhow::Result<()> {
    let hash = corpus_hash(corpus)?;
    if ckpt.corpus_hash != hash {
        bail!("checkpoint was trained on corpus {}, this corpus hashes to {hash}", ckpt.corpus_hash);
    }
    Ok(())
}

fn ingest(a: &IngestArgs) -> anyhow::Result<u8> {
    print_config(
        "ingest",
        json!({"reviews": a.reviews, "out": a.out, "seed": a.seed, "rmax": a.rmax, "smax": a.smax, "tmax": a.tmax}),
    );
    let file = File::open(&a.reviews).with_context(|| format!("cannot open {}", a.reviews.display()))?;
    let report = parse_reviews(BufReader::new(file))?;
    for (line, msg) in report.errors.iter().take(10) {
        eprintln!("warning: line {line}: {msg}");
    }
    let overrides = CapOverrides {
        reviews: a.rmax,
        sentences: a.smax,
        words: a.tmax,
    };
    let corpus = build_corpus(&report.reviews, a.seed, overrides)?;
    let out = File::create(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut w = BufWriter::new(out);
    write_corpus(&corpus, &mut w)?;
    w.flush()?;
    println!("users {}", corpus.users.len());
    println!("items {}", corpus.items.len());
    println!("reviews {}", corpus.reviews.len());
    println!("dropped_empty {}", report.dropped_empty);
    println!("malformed {}", report.errors.len());
    println!(
        "caps reviews {} sentences {} words {}",
        corpus.caps.reviews, corpus.caps.sentences, corpus.caps.words
    );
    println!(
        "split train {} validation {} test {}",
        corpus.split(Split::Train).len(),
        corpus.split(Split::Validation).len(),
        corpus.split(Split::Test).len()
    );
    println!("vocabulary {}", corpus.vocab.len());
    println!("hash {}", corpus_hash(&corpus)?);
    Ok(0)
}

fn run_train<T: Real>(a: &TrainArgs, model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: &Corpus) -> anyhow::Result<u8> {
    let hash = corpus_hash(corpus)?;
    let init = match &a.resume {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("cannot open checkpoint {}", path.display()))?;
            let ckpt: Checkpoint<T> = read_checkpoint(BufReader::new(file))?;
            if ckpt.corpus_hash != hash {
                bail!("resume checkpoint was trained on corpus {}, not {hash}", ckpt.corpus_hash);
            }
            if ckpt.config != model_cfg {
                bail!(
                    "resume checkpoint config {} differs from {}",
                    serde_json::to_string(&ckpt.config)?,
                    serde_json::to_string(&model_cfg)?
                );
            }
            ckpt.params
        }
        None => initial_params::<T>(corpus, &model_cfg, train_cfg.seed, train_cfg.bias_only)?,
    };
    let mut init = init;
    if let Some(path) = &a.embeddings {
        let file = File::open(path).with_context(|| format!("cannot open embeddings {}", path.display()))?;
        let n = load_embeddings(&mut init.embedding, &corpus.vocab, BufReader::new(file))?;
        eprintln!("loaded {n} pretrained word vectors");
    }

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("cannot open metric log {}", log_path.display()))?;
    let mut log_error = None;
    let outcome = train(corpus, &model_cfg, &train_cfg, init, &mut |r| {
        eprintln!(
            "epoch {} train_mse {:.6} val_rmse {:.6} ({:.1}s)",
            r.epoch, r.train_mse, r.val_rmse, r.seconds
        );
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(e).context("writing metric log");
    }

    let ckpt = Checkpoint {
        config: model_cfg,
        corpus_hash: hash,
        params: outcome.best.params,
        meta: json!({
            "best_epoch": outcome.best.epoch,
            "val_rmse": outcome.best.val_rmse,
            "epochs_run": outcome.log.len(),
            "stopped_early": outcome.stopped_early,
            "train": train_cfg,
        }),
    };
    let out = File::create(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut w = BufWriter::new(out);
    write_checkpoint(&ckpt, &mut w)?;
    w.flush()?;
    if let Some(what) = outcome.divergence {
        eprintln!(
            "error: training diverged ({what}); last good parameters (epoch {}) written to {}",
            outcome.best.epoch,
            a.out.display()
        );
        return Ok(EXIT_DIVERGED);
    }
    println!("best_epoch {}", outcome.best.epoch);
    println!("val_rmse {:.6}", outcome.best.val_rmse);
    Ok(0)
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<u8> {
    let model_cfg = a.model.resolve();
    let train_cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        max_epochs: a.epochs,
        patience: a.patience,
        seed: a.seed,
        bias_only: a.bias_only,
        ..TrainConfig::default()
    };
    print_config(
        "train",
        json!({
            "corpus": a.corpus, "out": a.out, "precision": if a.f32 { "f32" } else { "f64" },
            "resume": a.resume, "embeddings": a.embeddings, "log": a.log,
            "model": model_cfg, "train": train_cfg,
        }),
    );
    model_cfg.validate()?;
    train_cfg.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    if a.f32 {
        run_train::<f32>(a, model_cfg, train_cfg, &corpus)
    } else {
        run_train::<f64>(a, model_cfg, train_cfg, &corpus)
    }
}

fn evaluate_cmd(a: &EvaluateArgs) -> anyhow::Result<u8> {
    print_config("evaluate", json!({"ckpt": a.ckpt, "corpus": a.corpus, "split": a.split}));
    let ckpt = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    check_pairing(&ckpt, &corpus)?;
    let rmse = evaluate(&ckpt.params, &ckpt.config, &corpus, a.split, Parallelism::Auto)?;
    println!("rmse {rmse:.6}");
    Ok(0)
}

fn predict_cmd(a: &PredictArgs) -> anyhow::Result<u8> {
    print_config("predict", json!({"ckpt": a.ckpt, "corpus": a.corpus, "pairs": a.pairs}));
    let ckpt = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    check_pairing(&ckpt, &corpus)?;
    let model = Model::new(&ckpt.params, &ckpt.config)?;
    let file = File::open(&a.pairs).with_context(|| format!("cannot open {}", a.pairs.display()))?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let [user, item] = fields.as_slice() else {
            bail!("{}:{}: expected `user item`", a.pairs.display(), lineno + 1);
        };
        let e = Example::from_corpus(&corpus, corpus.user_index(user)?, corpus.item_index(item)?)?;
        let p = model.predict_example(&corpus.reviews, &e, false)?;
        writeln!(out, "{:.6}", p.clamp(1.0, 5.0))?;
    }
    Ok(0)
}

fn explain_cmd(a: &ExplainArgs) -> anyhow::Result<u8> {
    print_config(
        "explain",
        json!({"ckpt": a.ckpt, "corpus": a.corpus, "user": a.user, "item": a.item, "out": a.out}),
    );
    let ckpt = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    check_pairing(&ckpt, &corpus)?;
    let model = Model::new(&ckpt.params, &ckpt.config)?;
    let (user, item) = (corpus.user_index(&a.user)?, corpus.item_index(&a.item)?);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let (prediction, report) = model.predict(&corpus, user, item, false, &mut rng)?;
    let json_path = a.out.with_extension("json");
    let html_path = a.out.with_extension("html");
    std::fs::write(&json_path, report_json(&report)? + "\n")
        .with_context(|| format!("cannot write {}", json_path.display()))?;
    std::fs::write(&html_path, render_html(&report)).with_context(|| format!("cannot write {}", html_path.display()))?;
    println!("prediction {prediction:.6}");
    println!("json {}", json_path.display());
    println!("html {}", html_path.display());
    Ok(0)
}

fn selftest_cmd(a: &SelftestArgs) -> anyhow::Result<u8> {
    print_config("selftest", json!({"cases": a.cases, "seed": a.seed}));
    let checks = hsacn_core::selftest::run(a.cases, a.seed)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{c}");
    }
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("HSACN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("HSACN_THREADS must be a positive integer, got `{value}`"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Selftest(a) => selftest_cmd(a),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<HsacnError>(), Some(HsacnError::Divergence(_))));
            ExitCode::from(if diverged { EXIT_DIVERGED } else { EXIT_USAGE })
        }
    }
}

//! `grn`: train, evaluate and apply gated relation network taggers.
//!
//! Exit status: 0 on success, 1 when a check fails, 2 on usage or data errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use grn_core::checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint};
use grn_core::corpus::{build_vocab, encode_batch, load_conll, parse_conll, parse_tokens, read_embeddings, Column, Scheme, Vocab};
use grn_core::gradcheck::{check_toy_model, toy_problem};
use grn_core::metrics::span_counts;
use grn_core::model::{self, param_count, ModelConfig};
use grn_core::synthetic::random_batch;
use grn_core::tagger::{relations_tsv, tag_conll};
use grn_core::trainer::{initial_params, summary_report, train_run, Corpora, RunSummary, LOG_HEADER};
use grn_core::{ContextMode, FusionKind, Graph, Precision, Real, TrainConfig};

#[derive(Parser)]
#[command(name = "grn", version, about = "Gated relation network named entity tagger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more seeded runs and keep each run's best-dev checkpoint.
    Train(TrainArgs),
    /// Score predicted labels against gold labels (span P/R/F1).
    Eval(EvalArgs),
    /// Append predicted BIO labels to a CoNLL or one-token-per-line file.
    Tag(TagArgs),
    /// Write normalized relation-strength heat maps as TSV.
    ExportRelations(ExportArgs),
    /// Finite-difference check of every parameter gradient at 64-bit.
    Gradcheck(GradcheckArgs),
    /// Time forward and forward+backward passes on synthetic batches.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ColumnArgs {
    /// Column holding the token (0-based index or `last`).
    #[arg(long, default_value = "0")]
    token_column: Column,
    /// Column holding the label (0-based index or `last`).
    #[arg(long, default_value = "last")]
    label_column: Column,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Model-selection corpus; the training corpus when omitted.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Pretrained word vectors, one `token v1 ... vD` line each.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// TOML file with any `TrainConfig` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    fusion: Option<FusionKind>,
    #[arg(long)]
    context: Option<ContextMode>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Labeling scheme of the input files.
    #[arg(long, default_value = "bio")]
    scheme: Scheme,
    #[command(flatten)]
    columns: ColumnArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value = "last")]
    gold_column: Column,
    #[arg(long, default_value = "last")]
    pred_column: Column,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file; `vocab.json` next to the checkpoint by default.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct TagArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    input: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = "0")]
    token_column: Column,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// A whitespace-tokenized sentence.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    sentence: Option<String>,
    /// A CoNLL or one-token-per-line file.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = "0")]
    token_column: Column,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    word_dim: usize,
    #[arg(long, default_value_t = 8)]
    char_dim: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value = "grn")]
    fusion: FusionKind,
    #[arg(long, default_value = "full")]
    context: ContextMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Scale the analytic gradient of this parameter group (negative control).
    #[arg(long, hide = true)]
    fault: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    batch_sizes: Vec<usize>,
    /// Comma-separated sentence lengths.
    #[arg(long, value_delimiter = ',', default_value = "10,40")]
    seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    /// TOML file with model-shape keys; default dimensions otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// An error that maps to exit status 1 rather than 2.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Tag(a) => cmd_tag(a),
        Command::ExportRelations(a) => cmd_export(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<CheckFailed>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("file not found: {}", path.display());
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    for p in [Some(&a.train), a.dev.as_ref(), a.test.as_ref(), a.embeddings.as_ref(), a.config.as_ref()]
        .into_iter()
        .flatten()
    {
        require_file(p)?;
    }
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.runs {
        cfg.runs = v;
    }
    if let Some(v) = a.fusion {
        cfg.fusion = v;
    }
    if let Some(v) = a.context {
        cfg.context = v;
    }
    if let Some(v) = a.precision {
        cfg.precision = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    cfg.validate()?;

    let load = |p: &Path| {
        load_conll(p, a.columns.token_column, a.columns.label_column, a.scheme)
            .with_context(|| format!("loading {}", p.display()))
    };
    let train = load(&a.train)?;
    let dev = match &a.dev {
        Some(p) => load(p)?,
        None => train.clone(),
    };
    let test = a.test.as_deref().map(load).transpose()?;
    let pretrained = a
        .embeddings
        .as_deref()
        .map(|p| read_embeddings(p, cfg.word_dim))
        .transpose()?;
    let pretrained_words = pretrained.as_ref().map(|t| t.words.clone()).unwrap_or_default();
    let vocab = build_vocab(&train, &pretrained_words, cfg.min_freq);

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    vocab.save(a.out.join("vocab.json"))?;
    fs::write(a.out.join("config.toml"), cfg.to_toml_string())?;
    let mc = cfg.model_config(&vocab);
    mc.validate()?;
    println!(
        "fusion {} context {} precision {} parameters: {}",
        cfg.fusion,
        cfg.context,
        cfg.precision,
        param_count(&mc)
    );
    let ctx = TrainContext {
        cfg: &cfg,
        mc: &mc,
        vocab: &vocab,
        pretrained: pretrained.as_ref(),
        data: Corpora {
            train: &train,
            dev: &dev,
            test: test.as_deref(),
        },
        out: &a.out,
    };
    match cfg.precision {
        Precision::F32 => train_runs::<f32>(&ctx),
        Precision::F64 => train_runs::<f64>(&ctx),
    }
}

struct TrainContext<'a> {
    cfg: &'a TrainConfig,
    mc: &'a ModelConfig,
    vocab: &'a Vocab,
    pretrained: Option<&'a grn_core::corpus::PretrainedTable>,
    data: Corpora<'a>,
    out: &'a Path,
}

fn train_runs<T: Real>(c: &TrainContext<'_>) -> Result<()> {
    let mut summaries = Vec::new();
    let mut best_run: Option<(usize, f64)> = None;
    for r in 0..c.cfg.runs {
        let seed = c.cfg.seed + r as u64;
        let init = initial_params::<T>(c.mc, c.vocab, c.pretrained, seed)?;
        let log_path = c.out.join(format!("run{r}.log.csv"));
        let mut log = fs::File::create(&log_path)?;
        writeln!(log, "{LOG_HEADER}")?;
        let mut io_err = None;
        let outcome = train_run(c.mc, c.cfg, c.vocab, init, c.data, seed, &mut |e| {
            eprintln!("run {r} {}", e.csv_line());
            if let Err(err) = writeln!(log, "{}", e.csv_line()) {
                io_err.get_or_insert(err);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e).context(format!("writing {}", log_path.display()));
        }
        let ckpt = Checkpoint {
            model: c.mc.clone(),
            train: c.cfg.clone(),
            vocab_hash: c.vocab.hash(),
            params: outcome.params.clone(),
            epoch: outcome.best_epoch,
            dev_f1: outcome.best_dev.f1,
        };
        save_checkpoint(&ckpt, c.out.join(format!("run{r}.ckpt")))?;
        if best_run.is_none_or(|(_, f)| outcome.best_dev.f1 > f) {
            best_run = Some((r, outcome.best_dev.f1));
        }
        summaries.push(RunSummary::from(&outcome));
    }
    if let Some((r, _)) = best_run {
        fs::copy(c.out.join(format!("run{r}.ckpt")), c.out.join("model.ckpt"))?;
    }
    let report = summary_report(&summaries, param_count(c.mc));
    fs::write(c.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    require_file(&a.gold)?;
    require_file(&a.pred)?;
    let gold = parse_conll(&read_text(&a.gold)?, Column::Index(0), a.gold_column)?;
    let pred = parse_conll(&read_text(&a.pred)?, Column::Index(0), a.pred_column)?;
    if gold.len() != pred.len() {
        bail!("gold has {} sentences, prediction has {}", gold.len(), pred.len());
    }
    for (k, (g, p)) in gold.iter().zip(&pred).enumerate() {
        if g.len() != p.len() {
            bail!("sentence {} has {} gold tokens but {} predicted", k + 1, g.len(), p.len());
        }
    }
    let g: Vec<Vec<String>> = gold.into_iter().map(|s| s.labels).collect();
    let p: Vec<Vec<String>> = pred.into_iter().map(|s| s.labels).collect();
    print!("{}", span_counts(&g, &p)?.report());
    Ok(())
}

fn vocab_path(m: &ModelArgs) -> PathBuf {
    m.vocab.clone().unwrap_or_else(|| {
        m.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.json")
    })
}

/// Loads the vocabulary and the checkpoint in its stored precision, then calls `f`.
fn with_model<R>(m: &ModelArgs, f: impl ModelUser<R>) -> Result<R> {
    require_file(&m.checkpoint)?;
    let vp = vocab_path(m);
    require_file(&vp)?;
    let vocab = Vocab::load(&vp).with_context(|| format!("vocabulary {}", vp.display()))?;
    let ctx = || format!("checkpoint {}", m.checkpoint.display());
    match checkpoint_dtype(&m.checkpoint).with_context(ctx)?.as_str() {
        "f64" => f.run(&load_checkpoint::<f64>(&m.checkpoint, Some(&vocab)).with_context(ctx)?, &vocab),
        _ => f.run(&load_checkpoint::<f32>(&m.checkpoint, Some(&vocab)).with_context(ctx)?, &vocab),
    }
}

trait ModelUser<R> {
    fn run<T: Real>(self, ckpt: &Checkpoint<T>, vocab: &Vocab) -> Result<R>;
}

struct Tag<'a> {
    text: &'a str,
    column: Column,
}

impl ModelUser<String> for Tag<'_> {
    fn run<T: Real>(self, ckpt: &Checkpoint<T>, vocab: &Vocab) -> Result<String> {
        Ok(tag_conll(&ckpt.model, &ckpt.params, vocab, self.text, self.column, ckpt.train.batch_size)?)
    }
}

struct Export<'a> {
    sentences: &'a [Vec<String>],
}

impl ModelUser<String> for Export<'_> {
    fn run<T: Real>(self, ckpt: &Checkpoint<T>, vocab: &Vocab) -> Result<String> {
        Ok(relations_tsv(&ckpt.model, &ckpt.params, vocab, self.sentences, ckpt.train.batch_size)?)
    }
}

fn cmd_tag(a: TagArgs) -> Result<()> {
    require_file(&a.input)?;
    let text = read_text(&a.input)?;
    let out = with_model(
        &a.model,
        Tag {
            text: &text,
            column: a.token_column,
        },
    )?;
    write_output(a.output.as_deref(), &out)
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let sentences = match (&a.sentence, &a.input) {
        (Some(s), _) => vec![s.split_whitespace().map(str::to_string).collect::<Vec<_>>()],
        (None, Some(p)) => {
            require_file(p)?;
            parse_tokens(&read_text(p)?, a.token_column)?
        }
        (None, None) => bail!("either --sentence or --input is required"),
    };
    if sentences.iter().any(Vec::is_empty) {
        bail!("empty sentence");
    }
    let out = with_model(&a.model, Export { sentences: &sentences })?;
    write_output(a.output.as_deref(), &out)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let (sentences, vocab) = toy_problem(a.seed)?;
    let mut mc = ModelConfig::reduced(vocab.num_words(), vocab.num_chars(), vocab.labels().to_vec());
    mc.word_dim = a.word_dim;
    mc.char_dim = a.char_dim;
    mc.char_channels = a.char_dim;
    mc.hidden = a.hidden;
    mc.fusion = a.fusion;
    mc.context = a.context;
    mc.validate()?;
    let batch = encode_batch(&sentences, &vocab)?;
    let reports = check_toy_model(&mc, &batch, a.seed, a.fault.as_deref())?;
    println!("group\tcount\tmax_rel_error\tstatus");
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_rel_error < a.threshold;
        println!("{}\t{}\t{:.3e}\t{}", r.name, r.count, r.max_rel_error, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow!(CheckFailed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        ))))
    }
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if let Some(p) = &a.config {
        require_file(p)?;
    }
    if a.reps == 0 || a.batch_sizes.contains(&0) || a.seq_lens.contains(&0) {
        bail!("batch sizes, sequence lengths and reps must be positive");
    }
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let labels = ["O", "B-PER", "I-PER", "E-PER", "S-PER", "B-LOC", "I-LOC", "E-LOC", "S-LOC"];
    let mut mc = ModelConfig::new(5000, 80, labels.iter().map(|s| s.to_string()).collect());
    mc.word_dim = cfg.word_dim;
    mc.char_dim = cfg.char_dim;
    mc.char_channels = cfg.char_channels;
    mc.char_kernel = cfg.char_kernel;
    mc.hidden = cfg.hidden;
    mc.kernels = cfg.kernels.clone();
    mc.fusion = cfg.fusion;
    mc.context = cfg.context;
    mc.dropout = cfg.dropout;
    mc.validate()?;
    let csv = match a.precision {
        Precision::F32 => bench::<f32>(&mc, &a)?,
        Precision::F64 => bench::<f64>(&mc, &a)?,
    };
    write_output(a.output.as_deref(), &csv)
}

fn bench<T: Real>(mc: &ModelConfig, a: &BenchArgs) -> Result<String> {
    let params = model::init_params::<T>(mc, a.seed)?;
    let mut csv = String::from("batch,seq_len,rep,forward_ms,forward_backward_ms\n");
    for &b in &a.batch_sizes {
        for &t in &a.seq_lens {
            let batch = random_batch(mc, b, t, a.seed);
            for rep in 0..a.reps {
                let start = Instant::now();
                {
                    let mut g = Graph::new(rep as u64);
                    let p = params.bind(&mut g)?;
                    model::loss(&mut g, mc, &p, &batch, true)?;
                }
                let forward = start.elapsed().as_secs_f64() * 1e3;
                let start = Instant::now();
                {
                    let mut g = Graph::new(rep as u64);
                    let p = params.bind(&mut g)?;
                    let l = model::loss(&mut g, mc, &p, &batch, true)?;
                    g.backward(l)?;
                }
                let both = start.elapsed().as_secs_f64() * 1e3;
                csv.push_str(&format!("{b},{t},{rep},{forward:.4},{both:.4}\n"));
            }
        }
    }
    Ok(csv)
}

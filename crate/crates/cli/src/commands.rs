use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use cmta::analyze::{classify_corpus, Aggregator, ClassifyEntry, CorpusManifest, Dims, ReportFormat, Skipped};
use cmta::corpus::{load_dataset, save_dataset, split_dataset, Format, JsonlChunks, LoadOptions, TextRecord};
use cmta::model::{load_checkpoint, Model};
use cmta::nn::derive_seed;
use cmta::preprocess::{Preprocessor, StopwordTable};
use cmta::tokenizer::{build_vocab, Vocab};
use cmta::train::{compare_models, evaluate, train, CompareSpec, TrainConfig};

use crate::config::{resolve, RunConfig};
use crate::{Cli, Command};

/// Seed path for model initialization under the root seed.
const STREAM_INIT: u64 = 0;

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Validation(_) => "validation",
            Failure::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<cmta::Error> for Failure {
    fn from(e: cmta::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn require(path: Option<PathBuf>, what: &str) -> Outcome<PathBuf> {
    let p = path.ok_or_else(|| invalid(format!("no {what} given")))?;
    if !p.exists() {
        return Err(invalid(format!("{what} not found: {}", p.display())));
    }
    Ok(p)
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    ensure_parent(path)?;
    Ok(BufWriter::new(File::create(path)?))
}

fn ensure_parent(path: &Path) -> Outcome<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn print_plan(steps: &[String]) {
    println!("dry run; nothing will be written");
    for s in steps {
        println!("  {s}");
    }
}

struct Ctx {
    cfg: RunConfig,
    dry_run: bool,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.paths.output_dir().join(name)
    }

    fn vocab_path(&self) -> PathBuf {
        self.cfg.paths.vocab.clone().unwrap_or_else(|| self.out("vocab.txt"))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg.paths.checkpoint.clone().unwrap_or_else(|| self.out("best.ckpt"))
    }

    fn stopwords_dir(&self) -> Outcome<Option<PathBuf>> {
        match &self.cfg.paths.stopwords {
            Some(d) if !d.is_dir() => Err(invalid(format!("stopwords directory not found: {}", d.display()))),
            other => Ok(other.clone()),
        }
    }

    fn preprocessor(&self, dir: Option<&Path>) -> Outcome<Preprocessor> {
        let table = match dir {
            Some(d) => StopwordTable::from_dir(d)?,
            None => StopwordTable::builtin(),
        };
        Ok(Preprocessor::new(table))
    }
}

pub fn run(cli: &Cli) -> Outcome {
    let mut cfg = resolve(cli.config.as_deref(), std::env::vars(), &cli.set).map_err(Failure::Validation)?;
    cfg.apply_flags(cli.seed, cli.workers, cli.output_dir.as_deref());
    cfg.validate().map_err(Failure::Validation)?;
    eprintln!("seed {}", cfg.seed);
    let mut ctx = Ctx {
        cfg,
        dry_run: cli.dry_run,
    };
    match &cli.command {
        Command::Prep(a) => prep(&mut ctx, a),
        Command::BuildVocab(a) => build_vocab_cmd(&mut ctx, a),
        Command::Train(a) => train_cmd(&mut ctx, a),
        Command::Eval(a) => eval_cmd(&mut ctx, a),
        Command::Classify(a) => classify_cmd(&mut ctx, a),
        Command::Analyze(a) => analyze_cmd(&mut ctx, a),
        Command::Compare(a) => compare_cmd(&mut ctx, a),
    }
}

fn load(path: &Path, strict: bool) -> Outcome<(Vec<TextRecord>, usize)> {
    let opts = LoadOptions {
        strict,
        ..LoadOptions::default()
    };
    let report = load_dataset(path, Format::from_path(path), &opts)?;
    for e in &report.errors {
        log::warn!("{}: line {}: {}", path.display(), e.line, e.reason);
    }
    Ok((report.records, report.errors.len()))
}

/// Fills in clean_text for records that lack it.
fn ensure_clean(records: &mut [TextRecord], pre: &Preprocessor) {
    for r in records.iter_mut().filter(|r| r.clean_text.is_none()) {
        r.clean_text = Some(pre.clean(r).text);
    }
}

fn load_labeled(path: &Path, pre: &Preprocessor) -> Outcome<Vec<TextRecord>> {
    let (mut records, _) = load(path, true)?;
    if let Some(r) = records.iter().find(|r| r.gold_class.is_none()) {
        return Err(Failure::Runtime(format!("record {} has no label", r.id)));
    }
    ensure_clean(&mut records, pre);
    Ok(records)
}

// ----- prep ----------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Input dataset (.jsonl or .csv); defaults to paths.dataset.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output JSONL; defaults to <output-dir>/clean.jsonl.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Directory of <lang>.txt stopword lists; defaults to the built-in lists.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Fail on the first malformed row instead of skipping it.
    #[arg(long)]
    strict: bool,
}

fn prep(ctx: &mut Ctx, a: &PrepArgs) -> Outcome {
    ctx.cfg.set_path("dataset", a.input.as_deref());
    ctx.cfg.set_path("stopwords", a.stopwords.as_deref());
    let input = require(ctx.cfg.paths.dataset.clone(), "input dataset")?;
    let stop = ctx.stopwords_dir()?;
    let output = a.output.clone().unwrap_or_else(|| ctx.out("clean.jsonl"));
    if ctx.dry_run {
        print_plan(&[
            format!("read {}", input.display()),
            format!(
                "clean with stopwords from {}",
                stop.as_ref().map_or("built-in lists".into(), |d| d.display().to_string())
            ),
            format!("write {}", output.display()),
        ]);
        return Ok(());
    }
    let pre = ctx.preprocessor(stop.as_deref())?;
    let (mut records, bad_rows) = load(&input, a.strict)?;
    let mut emptied = 0;
    let mut warnings = bad_rows;
    for r in &mut records {
        let c = pre.clean(r);
        emptied += usize::from(c.emptied);
        warnings += c.warnings.len();
        r.clean_text = Some(c.text);
    }
    save_dataset(&records, &output)?;
    println!(
        "prep: {} records written to {}; {bad_rows} rows skipped, {emptied} emptied, {warnings} warnings",
        records.len(),
        output.display()
    );
    Ok(())
}

// ----- build-vocab ---------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Dataset to learn from; defaults to paths.dataset.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Target vocabulary size; defaults to vocab_size.
    #[arg(long)]
    size: Option<usize>,
    /// Output file; defaults to paths.vocab or <output-dir>/vocab.txt.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn build_vocab_cmd(ctx: &mut Ctx, a: &BuildVocabArgs) -> Outcome {
    ctx.cfg.set_path("dataset", a.input.as_deref());
    ctx.cfg.set_path("vocab", a.output.as_deref());
    let input = require(ctx.cfg.paths.dataset.clone(), "input dataset")?;
    let stop = ctx.stopwords_dir()?;
    let size = a.size.unwrap_or(ctx.cfg.vocab_size);
    let output = ctx.vocab_path();
    if ctx.dry_run {
        print_plan(&[
            format!("read {}", input.display()),
            format!("build a vocabulary of up to {size} tokens"),
            format!("write {}", output.display()),
        ]);
        return Ok(());
    }
    let pre = ctx.preprocessor(stop.as_deref())?;
    let (mut records, _) = load(&input, false)?;
    ensure_clean(&mut records, &pre);
    let texts: Vec<&str> = records.iter().map(TextRecord::model_text).collect();
    let vocab = build_vocab(&texts, size)?;
    ensure_parent(&output)?;
    vocab.save(&output)?;
    let hash: String = vocab.sha256().iter().map(|b| format!("{b:02x}")).collect();
    println!("build-vocab: {} tokens written to {} (sha256 {hash})", vocab.len(), output.display());
    Ok(())
}

// ----- train ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled dataset; defaults to paths.dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Vocabulary; defaults to paths.vocab or <output-dir>/vocab.txt.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Overrides train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides train.optimizer.lr.
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides train.batch_size.
    #[arg(long)]
    batch_size: Option<usize>,
}

fn model_config_for(ctx: &Ctx, vocab_len: usize) -> Outcome<cmta::model::ModelConfig> {
    let m = cmta::model::ModelConfig {
        vocab_size: vocab_len,
        ..ctx.cfg.model.clone()
    };
    m.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(m)
}

fn train_cmd(ctx: &mut Ctx, a: &TrainArgs) -> Outcome {
    ctx.cfg.set_path("dataset", a.dataset.as_deref());
    ctx.cfg.set_path("vocab", a.vocab.as_deref());
    if let Some(e) = a.epochs {
        ctx.cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        ctx.cfg.train.optimizer.lr = lr;
    }
    if let Some(b) = a.batch_size {
        ctx.cfg.train.batch_size = b;
    }
    ctx.cfg.validate().map_err(Failure::Validation)?;
    let dataset = require(ctx.cfg.paths.dataset.clone(), "dataset")?;
    let vocab_path = require(Some(ctx.vocab_path()), "vocabulary")?;
    let stop = ctx.stopwords_dir()?;
    // Shape checks that do not depend on the vocabulary size.
    model_config_for(ctx, ctx.cfg.model.vocab_size.max(cmta::tokenizer::SPECIALS.len()))?;
    let out = ctx.cfg.paths.output_dir();
    if ctx.dry_run {
        print_plan(&[
            format!("read {} and {}", dataset.display(), vocab_path.display()),
            format!(
                "split {}/{}/{} with seed {}",
                ctx.cfg.split.train_frac, ctx.cfg.split.val_frac, ctx.cfg.split.test_frac, ctx.cfg.seed
            ),
            format!(
                "train {} epochs, batch {}, lr {}",
                ctx.cfg.train.epochs, ctx.cfg.train.batch_size, ctx.cfg.train.optimizer.lr
            ),
            format!("write {}/split/{{train,val,test}}.jsonl", out.display()),
            format!("write {}/best.ckpt, final.ckpt, history.csv", out.display()),
        ]);
        return Ok(());
    }
    let vocab = Vocab::load(&vocab_path)?;
    let mcfg = model_config_for(ctx, vocab.len())?;
    let pre = ctx.preprocessor(stop.as_deref())?;
    let records = load_labeled(&dataset, &pre)?;
    let split = split_dataset(&records, &ctx.cfg.split)?;
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        save_dataset(part, &out.join("split").join(format!("{name}.jsonl")))?;
    }
    let model = Model::<f32>::new(mcfg, derive_seed(ctx.cfg.seed, &[STREAM_INIT]))?;
    let tcfg = TrainConfig {
        output_dir: Some(out.clone()),
        ..ctx.cfg.train.clone()
    };
    let outcome = train(model, &vocab, &split.train, &split.val, &tcfg)?;
    let last = outcome.history.epochs.last().expect("one epoch");
    println!(
        "train: {} epochs, {} steps; final loss {:.4}, train accuracy {:.4}, val accuracy {}; checkpoints in {}",
        outcome.history.epochs.len(),
        outcome.steps,
        last.loss,
        last.train_acc,
        last.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
        out.display()
    );
    Ok(())
}

// ----- eval ----------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint; defaults to paths.checkpoint or <output-dir>/best.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Labeled dataset; defaults to <output-dir>/split/test.jsonl.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Vocabulary; defaults to paths.vocab or <output-dir>/vocab.txt.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

fn eval_cmd(ctx: &mut Ctx, a: &EvalArgs) -> Outcome {
    ctx.cfg.set_path("checkpoint", a.checkpoint.as_deref());
    ctx.cfg.set_path("vocab", a.vocab.as_deref());
    let ckpt = require(Some(ctx.checkpoint_path()), "checkpoint")?;
    let vocab_path = require(Some(ctx.vocab_path()), "vocabulary")?;
    let dataset = require(Some(a.dataset.clone().unwrap_or_else(|| ctx.out("split/test.jsonl"))), "dataset")?;
    let stop = ctx.stopwords_dir()?;
    let (metrics_path, preds_path) = (ctx.out("metrics.csv"), ctx.out("predictions.jsonl"));
    if ctx.dry_run {
        print_plan(&[
            format!("load {} with {}", ckpt.display(), vocab_path.display()),
            format!("evaluate on {}", dataset.display()),
            format!("write {} and {}", metrics_path.display(), preds_path.display()),
        ]);
        return Ok(());
    }
    let vocab = Vocab::load(&vocab_path)?;
    let model = load_checkpoint::<f32>(&ckpt, Some(&vocab))?.model;
    let pre = ctx.preprocessor(stop.as_deref())?;
    let records = load_labeled(&dataset, &pre)?;
    let ev = evaluate(&model, &vocab, &records)?;
    let mut w = create(&metrics_path)?;
    ev.metrics.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&preds_path)?;
    ev.write_predictions(&mut w)?;
    w.flush()?;
    let m = &ev.metrics;
    println!(
        "eval: {} records; accuracy {:.4}, macro precision {:.4}, macro recall {:.4}, macro F1 {:.4}",
        m.support, m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
    );
    Ok(())
}

// ----- classify ------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// JSONL corpus; defaults to paths.dataset.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output JSONL; defaults to <output-dir>/labeled.jsonl.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Checkpoint; defaults to paths.checkpoint or <output-dir>/best.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Vocabulary; defaults to paths.vocab or <output-dir>/vocab.txt.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

fn classify_cmd(ctx: &mut Ctx, a: &ClassifyArgs) -> Outcome {
    ctx.cfg.set_path("dataset", a.input.as_deref());
    ctx.cfg.set_path("checkpoint", a.checkpoint.as_deref());
    ctx.cfg.set_path("vocab", a.vocab.as_deref());
    let ckpt = require(Some(ctx.checkpoint_path()), "checkpoint")?;
    let vocab_path = require(Some(ctx.vocab_path()), "vocabulary")?;
    let input = require(ctx.cfg.paths.dataset.clone(), "input corpus")?;
    let stop = ctx.stopwords_dir()?;
    let output = a.output.clone().unwrap_or_else(|| ctx.out("labeled.jsonl"));
    let (workers, chunk) = (ctx.cfg.workers, ctx.cfg.chunk_size);
    if ctx.dry_run {
        print_plan(&[
            format!("load {} with {}", ckpt.display(), vocab_path.display()),
            format!("classify {} in chunks of {chunk} on {workers} workers", input.display()),
            format!("write {}", output.display()),
        ]);
        return Ok(());
    }
    let vocab = Vocab::load(&vocab_path)?;
    let model = load_checkpoint::<f32>(&ckpt, Some(&vocab))?.model;
    let pre = ctx.preprocessor(stop.as_deref())?;
    let reader = BufReader::new(File::open(&input)?);
    let mut w = create(&output)?;
    let (mut labeled, mut skipped, mut seconds) = (0usize, 0usize, 0.0);
    for part in JsonlChunks::new(reader, chunk, LoadOptions::default()) {
        let part = part?;
        // Malformed rows have no record to classify; they are reported
        // by line number.
        for e in &part.errors {
            let entry = ClassifyEntry::Skipped(Skipped {
                id: format!("line {}", e.line),
                skipped: e.reason.clone(),
            });
            serde_json::to_writer(&mut w, &entry).map_err(cmta::Error::from)?;
            w.write_all(b"\n")?;
            skipped += 1;
        }
        let out = classify_corpus(&model, &vocab, &pre, &part.records, workers)?;
        out.write_jsonl(&mut w)?;
        skipped += out.skipped();
        labeled += out.entries.len() - out.skipped();
        seconds += out.seconds;
    }
    w.flush()?;
    let rate = if seconds > 0.0 { (labeled + skipped) as f64 / seconds } else { 0.0 };
    println!(
        "classify: {labeled} records labeled, {skipped} skipped, {rate:.1} records/s; written to {}",
        output.display()
    );
    Ok(())
}

// ----- analyze -------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Output of `classify`; defaults to <output-dir>/labeled.jsonl.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Grouping dimensions besides class.
    #[arg(long, default_value = "language,month")]
    dims: String,
    /// csv, json or text.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Report path; defaults to <output-dir>/report.<ext>.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Expected per-language counts (CSV language,count) to check against.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn analyze_cmd(ctx: &mut Ctx, a: &AnalyzeArgs) -> Outcome {
    let input = require(Some(a.input.clone().unwrap_or_else(|| ctx.out("labeled.jsonl"))), "classify output")?;
    let dims: Dims = a.dims.parse().map_err(|e: cmta::Error| invalid(e.to_string()))?;
    let format: ReportFormat = a.format.parse().map_err(|e: cmta::Error| invalid(e.to_string()))?;
    let expected = match &a.manifest {
        Some(p) => {
            let p = require(Some(p.clone()), "manifest")?;
            let content = std::fs::read_to_string(&p)?;
            Some(CorpusManifest::parse_csv(&content).map_err(|e| invalid(format!("manifest: {e}")))?)
        }
        None => None,
    };
    let output = a
        .output
        .clone()
        .unwrap_or_else(|| ctx.out(&format!("report.{}", format.extension())));
    let manifest_out = ctx.out("manifest.csv");
    if ctx.dry_run {
        print_plan(&[
            format!("aggregate {} by {}", input.display(), a.dims),
            format!("write {} and {}", output.display(), manifest_out.display()),
        ]);
        return Ok(());
    }
    let mut agg = Aggregator::new(dims);
    let mut per_lang = Aggregator::new(Dims::LANGUAGE);
    for (i, line) in BufReader::new(File::open(&input)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ClassifyEntry = serde_json::from_str(&line)
            .map_err(|err| Failure::Runtime(format!("{}: line {}: {err}", input.display(), i + 1)))?;
        agg.add_entry(&e);
        per_lang.add_entry(&e);
    }
    let report = agg.report();
    let mut w = create(&output)?;
    w.write_all(report.render(format).as_bytes())?;
    w.flush()?;

    let mut found = CorpusManifest::default();
    for c in per_lang.report().cells {
        *found.counts.entry(c.language).or_default() += c.count;
    }
    let mut w = create(&manifest_out)?;
    w.write_all(found.to_csv().as_bytes())?;
    w.flush()?;
    if let Some(exp) = expected {
        let diff = exp.diff(&found);
        for (lang, e, f) in &diff {
            eprintln!("manifest mismatch for {lang}: expected {e}, found {f}");
        }
        println!("manifest: {} languages differ", diff.len());
    }
    println!(
        "analyze: {} records in {} cells, {} skipped; report written to {}",
        agg.total(),
        report.cells.len(),
        agg.skipped(),
        output.display()
    );
    Ok(())
}

// ----- compare -------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Labeled dataset; defaults to paths.dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Vocabulary; defaults to paths.vocab or <output-dir>/vocab.txt.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Languages to train monolingual models for; defaults to all present.
    #[arg(long, value_delimiter = ',')]
    languages: Vec<String>,
}

fn compare_cmd(ctx: &mut Ctx, a: &CompareArgs) -> Outcome {
    ctx.cfg.set_path("dataset", a.dataset.as_deref());
    ctx.cfg.set_path("vocab", a.vocab.as_deref());
    let dataset = require(ctx.cfg.paths.dataset.clone(), "dataset")?;
    let vocab_path = require(Some(ctx.vocab_path()), "vocabulary")?;
    let stop = ctx.stopwords_dir()?;
    let (csv_out, txt_out) = (ctx.out("comparison.csv"), ctx.out("comparison.txt"));
    if ctx.dry_run {
        print_plan(&[
            format!("read {} and {}", dataset.display(), vocab_path.display()),
            format!(
                "train one model per language ({}) plus a multilingual model",
                if a.languages.is_empty() { "all present".to_string() } else { a.languages.join(",") }
            ),
            format!("write {} and {}", csv_out.display(), txt_out.display()),
        ]);
        return Ok(());
    }
    let vocab = Vocab::load(&vocab_path)?;
    let mcfg = model_config_for(ctx, vocab.len())?;
    let pre = ctx.preprocessor(stop.as_deref())?;
    let records = load_labeled(&dataset, &pre)?;
    let mut langs = a.languages.clone();
    if langs.is_empty() {
        langs = records.iter().map(|r| r.language.clone()).collect();
        langs.sort();
        langs.dedup();
    }
    let mut specs: Vec<CompareSpec> = langs.iter().map(|l| CompareSpec::monolingual(format!("{l}-mono"), l)).collect();
    specs.push(CompareSpec::multilingual("multilingual"));
    let split = split_dataset(&records, &ctx.cfg.split)?;
    let cmp = compare_models(&specs, &split.train, &split.val, &split.test, &vocab, &mcfg, &ctx.cfg.train)?;
    let mut w = create(&csv_out)?;
    cmp.write_csv(&mut w)?;
    w.flush()?;
    let text = cmp.to_text();
    ensure_parent(&txt_out)?;
    std::fs::write(&txt_out, &text)?;
    print!("{text}");
    Ok(())
}

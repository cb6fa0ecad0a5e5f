//! Training loop, evaluation metrics and the monolingual-vs-multilingual
//! comparison harness.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{MisinfoClass, TextRecord};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Checkpoint, CheckpointMeta, Model, ModelConfig};
use crate::nn::{argmax, derive_seed, rng, AdamW, AdamWConfig, Graph, Mode};
use crate::scalar::Scalar;
use crate::tokenizer::{encode, TokenSequence, Vocab};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Evaluate on the validation set after every epoch; needed for
    /// best-checkpoint selection.
    pub eval_every_epoch: bool,
    /// When set, `best.ckpt`, `final.ckpt` and `history.csv` are written here.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            optimizer: AdamWConfig::default(),
            seed: 42,
            eval_every_epoch: true,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy, dropout active.
    pub loss: f64,
    /// Accuracy of the train-mode predictions made while training.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const HEADER: &'static str = "epoch,loss,train_acc,val_acc,seconds";

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::HEADER)?;
        for e in &self.epochs {
            let val = e.val_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(out, "{},{:.6},{:.6},{},{:.3}", e.epoch, e.loss, e.train_acc, val, e.seconds)?;
        }
        Ok(())
    }
}

/// Returned by a training observer after each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    pub history: TrainHistory,
    pub steps: u64,
}

fn encode_labeled(records: &[TextRecord], vocab: &Vocab, max_len: usize) -> Result<Vec<(TokenSequence, usize)>> {
    records
        .iter()
        .map(|r| {
            let gold = r.gold_class.ok_or_else(|| Error::MissingLabel(r.id.clone()))?;
            Ok((encode(r.model_text(), vocab, max_len), gold.index()))
        })
        .collect()
}

/// Trains for `cfg.epochs` epochs. See [`train_with`].
pub fn train<T: Scalar>(
    model: Model<T>,
    vocab: &Vocab,
    train_set: &[TextRecord],
    val_set: &[TextRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(model, vocab, train_set, val_set, cfg, |_, _| Control::Continue)
}

/// Mini-batch AdamW on mean cross-entropy. Each epoch shuffles with a
/// stream derived from `(seed, epoch)`; the last short batch is kept. The
/// best checkpoint is the one with the highest validation accuracy (first
/// wins on ties), or the last one when there is no validation set.
/// `observer` sees every epoch and may end training early.
pub fn train_with<T, F>(
    mut model: Model<T>,
    vocab: &Vocab,
    train_set: &[TextRecord],
    val_set: &[TextRecord],
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    F: FnMut(&EpochRecord, &Model<T>) -> Control,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.config().vocab_size != vocab.len() {
        return Err(Error::InvalidConfig(format!(
            "model vocab_size {} but vocabulary has {} tokens",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    let max_len = model.config().max_len;
    let data = encode_labeled(train_set, vocab, max_len)?;
    let val = encode_labeled(val_set, vocab, max_len)?;
    let mut opt = AdamW::<T>::new(cfg.optimizer);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model<T>, usize)> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng(derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64])));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut drop_rng = rng(derive_seed(cfg.seed, &[STREAM_DROPOUT, epoch as u64, b as u64]));
            let (loss, hits, grads) = {
                let mut g = Graph::new();
                let p = model.bind(&mut g);
                let mut losses = Vec::with_capacity(batch.len());
                let mut hits = 0;
                for &i in batch {
                    let (seq, gold) = &data[i];
                    let logits = model.logits_graph(&mut g, &p, seq, Mode::Train, &mut drop_rng)?;
                    hits += usize::from(argmax(g.data(logits)) == *gold);
                    losses.push(g.softmax_cross_entropy(logits, *gold)?);
                }
                let mean = g.mean_of(&losses)?;
                let loss = g.data(mean)[0].to_f64().unwrap_or(f64::NAN);
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                let mut gr = g.backward(mean)?;
                let grads: Vec<Option<Vec<T>>> = p.iter().map(|&v| gr.take(v)).collect();
                (loss, hits, grads)
            };
            opt.step(model.params_mut().tensors_mut(), &grads)?;
            loss_sum += loss * batch.len() as f64;
            correct += hits;
        }
        if model.params().tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged { epoch });
        }

        let val_acc = if cfg.eval_every_epoch && !val.is_empty() {
            Some(accuracy_of(&model, &val)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train_acc {:.4} val_acc {}",
            rec.loss,
            rec.train_acc,
            val_acc.map_or("-".into(), |v| format!("{v:.4}"))
        );
        if let Some(v) = val_acc {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, model.clone(), epoch));
            }
        }
        history.epochs.push(rec.clone());
        if observer(&rec, &model) == Control::Stop {
            break;
        }
    }

    let epochs_run = history.epochs.len();
    let last_rec = history.epochs.last().expect("at least one epoch");
    let meta_for = |epochs_run: usize, val_acc: Option<f64>, train_acc: f64, loss: f64| {
        let mut metrics = std::collections::BTreeMap::new();
        metrics.insert("train_loss".to_string(), loss);
        metrics.insert("train_accuracy".to_string(), train_acc);
        if let Some(v) = val_acc {
            metrics.insert("val_accuracy".to_string(), v);
        }
        CheckpointMeta {
            epochs_run,
            steps: opt.steps(),
            seed: cfg.seed,
            metrics,
        }
    };
    let last = Checkpoint::new(
        model.clone(),
        vocab,
        meta_for(epochs_run, last_rec.val_acc, last_rec.train_acc, last_rec.loss),
    );
    let best = match best {
        Some((_, m, e)) => {
            let r = &history.epochs[e - 1];
            Checkpoint::new(m, vocab, meta_for(e, r.val_acc, r.train_acc, r.loss))
        }
        None => last.clone(),
    };
    let outcome = TrainOutcome {
        best,
        last,
        history,
        steps: opt.steps(),
    };
    if let Some(dir) = &cfg.output_dir {
        outcome.save(dir)?;
    }
    Ok(outcome)
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&self.best, &dir.join("best.ckpt"))?;
        save_checkpoint(&self.last, &dir.join("final.ckpt"))?;
        let f = std::fs::File::create(dir.join("history.csv"))?;
        self.history.write_csv(std::io::BufWriter::new(f))
    }
}

fn accuracy_of<T: Scalar>(model: &Model<T>, data: &[(TokenSequence, usize)]) -> Result<f64> {
    let mut hits = 0;
    for (seq, gold) in data {
        hits += usize::from(model.predict_sequence(seq)?.class.index() == *gold);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Mean eval-mode cross-entropy over labeled records.
pub fn mean_loss<T: Scalar>(model: &Model<T>, vocab: &Vocab, records: &[TextRecord]) -> Result<f64> {
    let data = encode_labeled(records, vocab, model.config().max_len)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (seq, gold) in &data {
        let p = model.predict_sequence(seq)?;
        total += -p.probs[*gold].to_f64().unwrap_or(f64::NAN).max(1e-12).ln();
    }
    Ok(total / data.len() as f64)
}

// ----- metrics -------------------------------------------------------------------

/// Classification quality over the three classes. Headline precision,
/// recall and F1 are macro averages: unweighted means of the per-class
/// values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub f1: [f64; 3],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[gold][pred]`.
    pub confusion: [[usize; 3]; 3],
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(preds: &[MisinfoClass], golds: &[MisinfoClass]) -> Result<Metrics> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cm = [[0usize; 3]; 3];
    for (p, g) in preds.iter().zip(golds) {
        cm[g.index()][p.index()] += 1;
    }
    let mut precision = [0.0; 3];
    let mut recall = [0.0; 3];
    let mut f1 = [0.0; 3];
    for c in 0..3 {
        let tp = cm[c][c];
        let predicted: usize = (0..3).map(|g| cm[g][c]).sum();
        let actual: usize = cm[c].iter().sum();
        precision[c] = ratio(tp, predicted);
        recall[c] = ratio(tp, actual);
        let s = precision[c] + recall[c];
        f1[c] = if s == 0.0 { 0.0 } else { 2.0 * precision[c] * recall[c] / s };
    }
    let mean = |xs: &[f64; 3]| xs.iter().sum::<f64>() / 3.0;
    Ok(Metrics {
        accuracy: ratio((0..3).map(|c| cm[c][c]).sum(), preds.len()),
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        precision,
        recall,
        f1,
        confusion: cm,
        support: preds.len(),
    })
}

impl Metrics {
    /// `metric,value` rows, macro averaging named explicitly.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "metric,value")?;
        writeln!(out, "support,{}", self.support)?;
        writeln!(out, "accuracy,{:.6}", self.accuracy)?;
        writeln!(out, "macro_precision,{:.6}", self.macro_precision)?;
        writeln!(out, "macro_recall,{:.6}", self.macro_recall)?;
        writeln!(out, "macro_f1,{:.6}", self.macro_f1)?;
        for c in MisinfoClass::ALL {
            let i = c.index();
            let key = c.as_str().to_lowercase().replace(' ', "_");
            writeln!(out, "precision_{key},{:.6}", self.precision[i])?;
            writeln!(out, "recall_{key},{:.6}", self.recall[i])?;
            writeln!(out, "f1_{key},{:.6}", self.f1[i])?;
        }
        for g in MisinfoClass::ALL {
            for p in MisinfoClass::ALL {
                let key = |c: MisinfoClass| c.as_str().to_lowercase().replace(' ', "_");
                writeln!(out, "confusion_{}_as_{},{}", key(g), key(p), self.confusion[g.index()][p.index()])?;
            }
        }
        Ok(())
    }
}

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub language: String,
    pub gold: MisinfoClass,
    pub pred: MisinfoClass,
    pub probs: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<PredictionRow>,
}

impl Evaluation {
    pub fn write_predictions<W: Write>(&self, mut out: W) -> Result<()> {
        for row in &self.predictions {
            serde_json::to_writer(&mut out, row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Eval-mode predictions over labeled records plus their metrics.
pub fn evaluate<T: Scalar>(model: &Model<T>, vocab: &Vocab, records: &[TextRecord]) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(records.len());
    for r in records {
        let gold = r.gold_class.ok_or_else(|| Error::MissingLabel(r.id.clone()))?;
        let p = model.predict_clean(r.model_text(), vocab)?;
        predictions.push(PredictionRow {
            id: r.id.clone(),
            language: r.language.clone(),
            gold,
            pred: p.class,
            probs: p.probs.map(|x| x.to_f64().unwrap_or(f64::NAN)),
        });
    }
    let preds: Vec<_> = predictions.iter().map(|r| r.pred).collect();
    let golds: Vec<_> = predictions.iter().map(|r| r.gold).collect();
    Ok(Evaluation {
        metrics: compute_metrics(&preds, &golds)?,
        predictions,
    })
}

// ----- comparison harness ------------------------------------------------------------

/// A model to train: on one language (monolingual) or on everything.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompareSpec {
    pub name: String,
    pub language: Option<String>,
}

impl CompareSpec {
    pub fn monolingual(name: impl Into<String>, language: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            language: Some(language.into()),
        }
    }

    pub fn multilingual(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            language: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub model: String,
    /// Language of the test slice, or `all`.
    pub evaluated_on: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub support: usize,
}

/// `rows` has one entry per model: monolingual models on their language's
/// test slice, multilingual ones on the full test set. `slices` holds each
/// multilingual model on every language slice.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub slices: Vec<ComparisonRow>,
}

fn row(model: &str, on: &str, m: &Metrics) -> ComparisonRow {
    ComparisonRow {
        model: model.to_string(),
        evaluated_on: on.to_string(),
        precision: m.macro_precision,
        recall: m.macro_recall,
        f1: m.macro_f1,
        accuracy: m.accuracy,
        support: m.support,
    }
}

fn slice(records: &[TextRecord], lang: &str) -> Vec<TextRecord> {
    records.iter().filter(|r| r.language == lang).cloned().collect()
}

/// Trains every spec from the same initialization with the same
/// `TrainConfig`, then evaluates on the test data.
pub fn compare_models(
    specs: &[CompareSpec],
    train_set: &[TextRecord],
    val_set: &[TextRecord],
    test_set: &[TextRecord],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Comparison> {
    let mut languages: Vec<String> = test_set.iter().map(|r| r.language.clone()).collect();
    languages.sort();
    languages.dedup();
    let cfg = TrainConfig {
        output_dir: None,
        ..cfg.clone()
    };
    let mut out = Comparison::default();
    for spec in specs {
        let (tr, va, te) = match &spec.language {
            Some(l) => (slice(train_set, l), slice(val_set, l), slice(test_set, l)),
            None => (train_set.to_vec(), val_set.to_vec(), test_set.to_vec()),
        };
        let label = spec.language.as_deref().unwrap_or("all");
        if tr.is_empty() || te.is_empty() {
            return Err(Error::InsufficientData(label.to_string()));
        }
        let init = Model::<f32>::new(model_cfg.clone(), cfg.seed)?;
        let trained = train(init, vocab, &tr, &va, &cfg)?.best.model;
        out.rows.push(row(&spec.name, label, &evaluate(&trained, vocab, &te)?.metrics));
        if spec.language.is_none() {
            for l in &languages {
                let s = slice(test_set, l);
                out.slices.push(row(&spec.name, l, &evaluate(&trained, vocab, &s)?.metrics));
            }
        }
    }
    Ok(out)
}

impl Comparison {
    pub const HEADER: &'static str = "table,model,evaluated_on,precision,recall,f1,accuracy,support";

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::HEADER)?;
        for (table, rows) in [("models", &self.rows), ("slices", &self.slices)] {
            for r in rows {
                writeln!(
                    out,
                    "{table},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                    r.model, r.evaluated_on, r.precision, r.recall, r.f1, r.accuracy, r.support
                )?;
            }
        }
        Ok(())
    }

    /// Aligned text table of the per-model rows (macro averages).
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().chain(&self.slices).map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$}  {:>9}  {:>9}  {:>9}\n", "Model", "Precision", "Recall", "F1");
        for r in &self.rows {
            s += &format!("{:<w$}  {:>9.4}  {:>9.4}  {:>9.4}\n", r.model, r.precision, r.recall, r.f1);
        }
        if !self.slices.is_empty() {
            s += "\nper language slice\n";
            for r in &self.slices {
                s += &format!(
                    "{:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  ({})\n",
                    r.model, r.precision, r.recall, r.f1, r.evaluated_on
                );
            }
        }
        s += "averaging: macro\n";
        s
    }
}

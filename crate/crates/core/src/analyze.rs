//! Corpus-scale inference and aggregation of predicted labels by language,
//! month and class.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{MisinfoClass, TextRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::preprocess::Preprocessor;
use crate::scalar::Scalar;
use crate::tokenizer::Vocab;

/// Month bucket for records without a month.
pub const UNKNOWN_MONTH: &str = "unknown";
/// Key used for a dimension that was not requested.
pub const ALL: &str = "all";

/// A classified record, one JSONL line of `classify` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub id: String,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub month: Option<String>,
    pub pred: MisinfoClass,
    pub probs: [f64; 3],
}

/// A record that could not be classified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skipped {
    pub id: String,
    pub skipped: String,
}

/// One line of `classify` output, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassifyEntry {
    Skipped(Skipped),
    Labeled(LabeledRecord),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassifyOutput {
    pub entries: Vec<ClassifyEntry>,
    pub seconds: f64,
}

impl ClassifyOutput {
    pub fn labeled(&self) -> impl Iterator<Item = &LabeledRecord> {
        self.entries.iter().filter_map(|e| match e {
            ClassifyEntry::Labeled(l) => Some(l),
            ClassifyEntry::Skipped(_) => None,
        })
    }

    pub fn skipped(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e, ClassifyEntry::Skipped(_))).count()
    }

    pub fn throughput(&self) -> f64 {
        if self.seconds > 0.0 {
            self.entries.len() as f64 / self.seconds
        } else {
            0.0
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn classify_one<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    pre: &Preprocessor,
    r: &TextRecord,
) -> Result<LabeledRecord> {
    let cleaned;
    let text = match &r.clean_text {
        Some(t) => t.as_str(),
        None => {
            cleaned = pre.clean_text(&r.raw_text, &r.language).text;
            cleaned.as_str()
        }
    };
    let p = model.predict_clean(text, vocab)?;
    Ok(LabeledRecord {
        id: r.id.clone(),
        language: r.language.clone(),
        month: r.month.clone(),
        pred: p.class,
        probs: p.probs.map(|x| x.to_f64().unwrap_or(f64::NAN)),
    })
}

/// Predicts every record on `workers` threads. Raw records are cleaned
/// first. Output order follows input order for any worker count; a record
/// that fails becomes a `Skipped` entry instead of aborting the run.
pub fn classify_corpus<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    pre: &Preprocessor,
    records: &[TextRecord],
    workers: usize,
) -> Result<ClassifyOutput> {
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<Result<LabeledRecord>> =
        pool.install(|| records.par_iter().map(|r| classify_one(model, vocab, pre, r)).collect());
    let entries: Vec<ClassifyEntry> = records
        .iter()
        .zip(results)
        .map(|(r, res)| match res {
            Ok(l) => ClassifyEntry::Labeled(l),
            Err(e) => {
                log::warn!("skipping {}: {e}", r.id);
                ClassifyEntry::Skipped(Skipped {
                    id: r.id.clone(),
                    skipped: e.to_string(),
                })
            }
        })
        .collect();
    let out = ClassifyOutput {
        entries,
        seconds: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "classified {} records ({} skipped) at {:.1} records/s",
        out.entries.len() - out.skipped(),
        out.skipped(),
        out.throughput()
    );
    Ok(out)
}

// ----- aggregation -------------------------------------------------------------------

/// Which dimensions to group by besides class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub language: bool,
    pub month: bool,
}

impl Dims {
    pub const ALL: Dims = Dims {
        language: true,
        month: true,
    };
    pub const LANGUAGE: Dims = Dims {
        language: true,
        month: false,
    };
}

impl FromStr for Dims {
    type Err = Error;

    /// Comma-separated subset of `language,month`; empty means neither.
    fn from_str(s: &str) -> Result<Self> {
        let mut d = Dims {
            language: false,
            month: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "language" => d.language = true,
                "month" => d.month = true,
                other => return Err(Error::InvalidConfig(format!("unknown dimension {other:?}"))),
            }
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AggregationCell {
    pub language: String,
    pub month: String,
    pub class: MisinfoClass,
    pub count: u64,
}

/// Mergeable cell counts keyed by (language, month, class index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Aggregator {
    dims: Dims,
    cells: BTreeMap<(String, String, usize), u64>,
    total: u64,
    skipped: u64,
}

impl Aggregator {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            cells: BTreeMap::new(),
            total: 0,
            skipped: 0,
        }
    }

    pub fn add_entry(&mut self, e: &ClassifyEntry) {
        match e {
            ClassifyEntry::Labeled(l) => self.add(l),
            ClassifyEntry::Skipped(_) => self.skipped += 1,
        }
    }

    pub fn add(&mut self, r: &LabeledRecord) {
        let lang = if self.dims.language { r.language.clone() } else { ALL.to_string() };
        let month = if self.dims.month {
            r.month.clone().unwrap_or_else(|| UNKNOWN_MONTH.to_string())
        } else {
            ALL.to_string()
        };
        *self.cells.entry((lang, month, r.pred.index())).or_default() += 1;
        self.total += 1;
    }

    pub fn add_skipped(&mut self, n: u64) {
        self.skipped += n;
    }

    /// Adds another aggregator's counts; both must use the same dims.
    pub fn merge(&mut self, other: Aggregator) {
        assert_eq!(self.dims, other.dims, "merging aggregations over different dimensions");
        for (k, v) in other.cells {
            *self.cells.entry(k).or_default() += v;
        }
        self.total += other.total;
        self.skipped += other.skipped;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn report(&self) -> Report {
        let cells = self
            .cells
            .iter()
            .map(|((l, m, c), &count)| AggregationCell {
                language: l.clone(),
                month: m.clone(),
                class: MisinfoClass::from_index(*c).expect("class index"),
                count,
            })
            .collect();
        Report {
            cells,
            skipped: self.skipped,
        }
    }
}

/// Cells over `records`, sorted by (language, month, class index).
pub fn aggregate(records: &[LabeledRecord], dims: Dims) -> Vec<AggregationCell> {
    let mut a = Aggregator::new(dims);
    records.iter().for_each(|r| a.add(r));
    a.report().cells
}

/// Aggregates a JSONL stream of `classify` output line by line; skipped
/// lines go to the skipped tally.
pub fn aggregate_jsonl<R: BufRead>(reader: R, dims: Dims) -> Result<Aggregator> {
    let mut a = Aggregator::new(dims);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ClassifyEntry =
            serde_json::from_str(&line).map_err(|e| Error::format(i + 1, e.to_string()))?;
        a.add_entry(&e);
    }
    Ok(a)
}

/// Sums cells over months: the language × class table.
pub fn language_class_marginals(cells: &[AggregationCell]) -> BTreeMap<(String, MisinfoClass), u64> {
    let mut m = BTreeMap::new();
    for c in cells {
        *m.entry((c.language.clone(), c.class)).or_default() += c.count;
    }
    m
}

// ----- reports -----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Text,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "text" | "text-bar-chart" | "txt" => Ok(ReportFormat::Text),
            _ => Err(Error::UnsupportedFormat(s.to_string())),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Text => "txt",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Report {
    pub cells: Vec<AggregationCell>,
    pub skipped: u64,
}

const CSV_HEADER: &str = "language,month,class,count";
const BAR_WIDTH: u64 = 40;

impl Report {
    pub fn total(&self) -> u64 {
        self.cells.iter().map(|c| c.count).sum()
    }

    fn sorted(&self) -> Vec<&AggregationCell> {
        let mut v: Vec<&AggregationCell> = self.cells.iter().collect();
        v.sort_by(|a, b| (&a.language, &a.month, a.class.index()).cmp(&(&b.language, &b.month, b.class.index())));
        v
    }

    /// CSV sorted by (language, month, class index). A nonzero skipped
    /// tally is appended as a `#` comment line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for c in self.sorted() {
            let _ = writeln!(s, "{},{},{},{}", c.language, c.month, c.class.as_str(), c.count);
        }
        if self.skipped > 0 {
            let _ = writeln!(s, "# skipped,{}", self.skipped);
        }
        s
    }

    pub fn parse_csv(content: &str) -> Result<Self> {
        let mut lines = content.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => return Err(Error::format(1, format!("expected header {CSV_HEADER:?}"))),
        }
        let mut report = Report::default();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# skipped,") {
                report.skipped = rest.parse().map_err(|_| Error::format(i + 1, "bad skipped tally"))?;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::format(i + 1, format!("expected 4 fields, got {}", f.len())));
            }
            report.cells.push(AggregationCell {
                language: f[0].to_string(),
                month: f[1].to_string(),
                class: f[2].parse().map_err(|_| Error::format(i + 1, format!("bad class {:?}", f[2])))?,
                count: f[3].parse().map_err(|_| Error::format(i + 1, format!("bad count {:?}", f[3])))?,
            });
        }
        Ok(report)
    }

    /// `{"cells": {language: {month: {class: count}}}, "total", "skipped"}`.
    pub fn to_json(&self) -> String {
        let mut nested: BTreeMap<&str, BTreeMap<&str, BTreeMap<&str, u64>>> = BTreeMap::new();
        for c in &self.cells {
            *nested
                .entry(&c.language)
                .or_default()
                .entry(&c.month)
                .or_default()
                .entry(c.class.as_str())
                .or_default() += c.count;
        }
        let v = serde_json::json!({
            "cells": nested,
            "total": self.total(),
            "skipped": self.skipped,
        });
        serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
    }

    /// One block per language, one bar per (month, class), scaled to the
    /// largest cell.
    pub fn to_text(&self) -> String {
        let max = self.cells.iter().map(|c| c.count).max().unwrap_or(0).max(1);
        let w = MisinfoClass::ALL.iter().map(|c| c.as_str().len()).max().unwrap_or(0);
        let mut s = String::new();
        let mut last_lang = None;
        for c in self.sorted() {
            if last_lang != Some(&c.language) {
                let _ = writeln!(s, "{}{}", if last_lang.is_some() { "\n" } else { "" }, c.language);
                last_lang = Some(&c.language);
            }
            let n = (c.count * BAR_WIDTH).div_ceil(max) as usize;
            let _ = writeln!(s, "  {:<8} {:<w$} {} {}", c.month, c.class.as_str(), "#".repeat(n), c.count);
        }
        let _ = writeln!(s, "\ntotal {}  skipped {}", self.total(), self.skipped);
        s
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
            ReportFormat::Text => self.to_text(),
        }
    }
}

/// Renders `cells` in a format named by string (`csv`, `json`, `text`).
pub fn emit_report(report: &Report, format: &str) -> Result<String> {
    Ok(report.render(format.parse()?))
}

// ----- corpus manifest ---------------------------------------------------------------

/// Per-language record counts of a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub counts: BTreeMap<String, u64>,
}

impl CorpusManifest {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn from_languages<'a, I: IntoIterator<Item = &'a str>>(languages: I) -> Self {
        let mut m = Self::default();
        for l in languages {
            *m.counts.entry(l.to_string()).or_default() += 1;
        }
        m
    }

    /// Reads `language,count` CSV (header required).
    pub fn parse_csv(content: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(content.as_bytes());
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["language", "count"] {
            return Err(Error::format(1, "expected header language,count"));
        }
        let mut m = Self::default();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let count = row[1]
                .replace('_', "")
                .parse()
                .map_err(|_| Error::format(i + 2, format!("bad count {:?}", &row[1])))?;
            if m.counts.insert(row[0].to_string(), count).is_some() {
                return Err(Error::format(i + 2, format!("duplicate language {:?}", &row[0])));
            }
        }
        Ok(m)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("language,count\n");
        for (l, c) in &self.counts {
            let _ = writeln!(s, "{l},{c}");
        }
        s
    }

    /// Languages whose counts differ: (language, expected, found).
    pub fn diff(&self, found: &CorpusManifest) -> Vec<(String, u64, u64)> {
        let mut langs: Vec<&String> = self.counts.keys().chain(found.counts.keys()).collect();
        langs.sort();
        langs.dedup();
        langs
            .into_iter()
            .filter_map(|l| {
                let (e, f) = (
                    self.counts.get(l).copied().unwrap_or(0),
                    found.counts.get(l).copied().unwrap_or(0),
                );
                (e != f).then(|| (l.clone(), e, f))
            })
            .collect()
    }
}

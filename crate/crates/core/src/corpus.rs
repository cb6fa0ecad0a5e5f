//! Dataset records, label attribute-engineering, ingestion and splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Languages of the multilingual tweet corpus, in its reporting order.
pub const DEFAULT_LANGUAGES: [&str; 8] = ["en", "es", "in", "fr", "ja", "th", "hi", "de"];

/// Set of accepted ISO-639-1 codes. `id` is accepted as an alias for `in`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageSet {
    codes: BTreeSet<String>,
}

impl Default for LanguageSet {
    fn default() -> Self {
        Self {
            codes: DEFAULT_LANGUAGES.iter().map(|c| c.to_string()).collect(),
        }
    }
}

impl LanguageSet {
    pub fn with(mut self, code: &str) -> Self {
        self.codes.insert(code.to_ascii_lowercase());
        self
    }

    /// Normalizes `code` and checks it against the set.
    pub fn resolve(&self, code: &str) -> Result<String> {
        let mut norm = code.trim().to_ascii_lowercase();
        if norm == "id" {
            norm = "in".to_string();
        }
        if self.codes.contains(&norm) {
            Ok(norm)
        } else {
            Err(Error::UnknownLanguage(code.to_string()))
        }
    }

    pub fn contains(&self, code: &str) -> bool {
        self.resolve(code).is_ok()
    }
}

/// The nine labels used by the fact-checking sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactCheckerRating {
    False_,
    PartiallyFalse,
    Misleading,
    NoEvidence,
    FourPinocchios,
    Incorrect,
    ThreePinocchios,
    TwoPinocchios,
    MostlyFalse,
}

impl FactCheckerRating {
    pub const ALL: [FactCheckerRating; 9] = [
        FactCheckerRating::False_,
        FactCheckerRating::PartiallyFalse,
        FactCheckerRating::Misleading,
        FactCheckerRating::NoEvidence,
        FactCheckerRating::FourPinocchios,
        FactCheckerRating::Incorrect,
        FactCheckerRating::ThreePinocchios,
        FactCheckerRating::TwoPinocchios,
        FactCheckerRating::MostlyFalse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FactCheckerRating::False_ => "False",
            FactCheckerRating::PartiallyFalse => "Partially False",
            FactCheckerRating::Misleading => "Misleading",
            FactCheckerRating::NoEvidence => "No Evidence",
            FactCheckerRating::FourPinocchios => "Four Pinocchios",
            FactCheckerRating::Incorrect => "Incorrect",
            FactCheckerRating::ThreePinocchios => "Three Pinocchios",
            FactCheckerRating::TwoPinocchios => "Two Pinocchios",
            FactCheckerRating::MostlyFalse => "Mostly False",
        }
    }

    /// Collapses the nine ratings onto the three training classes.
    pub fn to_class(self) -> MisinfoClass {
        map_rating(self)
    }
}

// Canonical spellings plus the explicit aliases seen on fact-checker pages.
const RATING_ALIASES: [(&str, FactCheckerRating); 11] = [
    ("false", FactCheckerRating::False_),
    ("partially false", FactCheckerRating::PartiallyFalse),
    ("partly false", FactCheckerRating::PartiallyFalse),
    ("misleading", FactCheckerRating::Misleading),
    ("no evidence", FactCheckerRating::NoEvidence),
    ("four pinocchios", FactCheckerRating::FourPinocchios),
    ("incorrect", FactCheckerRating::Incorrect),
    ("inaccurate", FactCheckerRating::Incorrect),
    ("three pinocchios", FactCheckerRating::ThreePinocchios),
    ("two pinocchios", FactCheckerRating::TwoPinocchios),
    ("mostly false", FactCheckerRating::MostlyFalse),
];

impl FromStr for FactCheckerRating {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_lowercase();
        RATING_ALIASES
            .iter()
            .find(|(alias, _)| *alias == key)
            .map(|(_, r)| *r)
            .ok_or_else(|| Error::UnknownRating(s.to_string()))
    }
}

impl fmt::Display for FactCheckerRating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Output classes of the classifier. The discriminant is the output index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MisinfoClass {
    #[serde(rename = "False")]
    False_ = 0,
    #[serde(rename = "Partially False")]
    PartiallyFalse = 1,
    #[serde(rename = "Misleading")]
    Misleading = 2,
}

impl MisinfoClass {
    pub const COUNT: usize = 3;
    pub const ALL: [MisinfoClass; 3] = [
        MisinfoClass::False_,
        MisinfoClass::PartiallyFalse,
        MisinfoClass::Misleading,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MisinfoClass::False_ => "False",
            MisinfoClass::PartiallyFalse => "Partially False",
            MisinfoClass::Misleading => "Misleading",
        }
    }
}

impl FromStr for MisinfoClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "false" | "0" => Ok(MisinfoClass::False_),
            "partially false" | "partly false" | "1" => Ok(MisinfoClass::PartiallyFalse),
            "misleading" | "2" => Ok(MisinfoClass::Misleading),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

impl fmt::Display for MisinfoClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Merges the nine fact-checker ratings into three classes.
pub fn map_rating(rating: FactCheckerRating) -> MisinfoClass {
    use FactCheckerRating as R;
    match rating {
        R::False_ | R::FourPinocchios | R::Incorrect => MisinfoClass::False_,
        R::PartiallyFalse | R::ThreePinocchios | R::TwoPinocchios => MisinfoClass::PartiallyFalse,
        R::Misleading | R::NoEvidence | R::MostlyFalse => MisinfoClass::Misleading,
    }
}

/// One micro-text.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRecord {
    pub id: String,
    pub raw_text: String,
    pub language: String,
    pub month: Option<String>,
    pub source: Option<String>,
    pub rating: Option<FactCheckerRating>,
    pub gold_class: Option<MisinfoClass>,
    /// Output of the preprocessing pipeline, when the file already carries it.
    pub clean_text: Option<String>,
}

impl TextRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, language: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            raw_text: text.into(),
            language: language.into(),
            month: None,
            source: None,
            rating: None,
            gold_class: None,
            clean_text: None,
        }
    }

    pub fn with_label(mut self, class: MisinfoClass) -> Self {
        self.gold_class = Some(class);
        self
    }

    pub fn with_month(mut self, month: impl Into<String>) -> Self {
        self.month = Some(month.into());
        self
    }

    /// The text the model should see: the cleaned text when present.
    pub fn model_text(&self) -> &str {
        self.clean_text.as_deref().unwrap_or(&self.raw_text)
    }
}

/// Wire form of a record; JSONL keys and CSV headers share these names.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRow {
    pub id: Option<String>,
    pub text: Option<String>,
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub month: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_text: Option<String>,
}

fn month_pattern() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d{4}-(0[1-9]|1[0-2])$").unwrap())
}

fn non_empty(v: Option<String>) -> Option<String> {
    v.filter(|s| !s.trim().is_empty())
}

impl RawRow {
    /// Validates the row and derives the gold class from the rating when
    /// no explicit label is given.
    pub fn into_record(self, line: usize, languages: &LanguageSet) -> Result<TextRecord> {
        let id = non_empty(self.id).ok_or_else(|| Error::format(line, "missing id"))?;
        let raw_text = non_empty(self.text).ok_or_else(|| Error::format(line, "missing or empty text"))?;
        let language = self
            .language
            .ok_or_else(|| Error::format(line, "missing language"))?;
        let language = languages.resolve(&language)?;
        let month = non_empty(self.month);
        if let Some(m) = &month {
            if !month_pattern().is_match(m) {
                return Err(Error::format(line, format!("month {m:?} is not YYYY-MM")));
            }
        }
        let rating = non_empty(self.rating).map(|r| r.parse::<FactCheckerRating>()).transpose()?;
        let label = non_empty(self.label).map(|l| l.parse::<MisinfoClass>()).transpose()?;
        let gold_class = match (rating, label) {
            (Some(r), Some(l)) if map_rating(r) != l => {
                return Err(Error::format(
                    line,
                    format!("label {l} contradicts rating {r} (maps to {})", map_rating(r)),
                ))
            }
            (Some(r), None) => Some(map_rating(r)),
            (_, l) => l,
        };
        Ok(TextRecord {
            id,
            raw_text,
            language,
            month,
            source: non_empty(self.source),
            rating,
            gold_class,
            clean_text: self.clean_text,
        })
    }

    pub fn from_record(r: &TextRecord) -> Self {
        RawRow {
            id: Some(r.id.clone()),
            text: Some(r.raw_text.clone()),
            language: Some(r.language.clone()),
            month: r.month.clone(),
            source: r.source.clone(),
            rating: r.rating.map(|x| x.as_str().to_string()),
            label: r.gold_class.map(|x| x.as_str().to_string()),
            clean_text: r.clean_text.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Abort on the first malformed row instead of collecting it.
    pub strict: bool,
    pub languages: LanguageSet,
}

/// One rejected row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub records: Vec<TextRecord>,
    pub errors: Vec<RowError>,
}

impl LoadReport {
    /// Writes the rejected rows as JSONL `{line, reason}` objects.
    pub fn write_errors<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.errors {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads a dataset file. Malformed rows are collected in the report unless
/// `opts.strict` is set, in which case the first one is returned as error.
pub fn load_dataset(path: &Path, format: Format, opts: &LoadOptions) -> Result<LoadReport> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let file = File::open(path)?;
    match format {
        Format::Jsonl => read_jsonl(BufReader::new(file), opts),
        Format::Csv => read_csv(file, opts),
    }
}

fn accept(report: &mut LoadReport, line: usize, row: Result<TextRecord>, strict: bool) -> Result<()> {
    match row {
        Ok(r) => report.records.push(r),
        Err(e) if strict => {
            return Err(match e {
                Error::FormatError { .. } => e,
                other => Error::format(line, other.to_string()),
            })
        }
        Err(e) => {
            let reason = match e {
                Error::FormatError { reason, .. } => reason,
                other => other.to_string(),
            };
            report.errors.push(RowError { line, reason });
        }
    }
    Ok(())
}

fn parse_jsonl_line(line: &str, line_no: usize, opts: &LoadOptions) -> Result<TextRecord> {
    serde_json::from_str::<RawRow>(line)
        .map_err(|e| Error::format(line_no, e.to_string()))
        .and_then(|raw| raw.into_record(line_no, &opts.languages))
}

pub fn read_jsonl<R: BufRead>(reader: R, opts: &LoadOptions) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for chunk in JsonlChunks::new(reader, usize::MAX, opts.clone()) {
        let chunk = chunk?;
        report.records.extend(chunk.records);
        report.errors.extend(chunk.errors);
    }
    Ok(report)
}

/// Reads JSONL in pieces of at most `chunk` records so large corpora can be
/// processed with bounded memory. Line numbers count from the file start.
pub struct JsonlChunks<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    chunk: usize,
    opts: LoadOptions,
    done: bool,
}

impl<R: BufRead> JsonlChunks<R> {
    pub fn new(reader: R, chunk: usize, opts: LoadOptions) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            chunk: chunk.max(1),
            opts,
            done: false,
        }
    }
}

impl<R: BufRead> Iterator for JsonlChunks<R> {
    type Item = Result<LoadReport>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut report = LoadReport::default();
        while report.records.len() < self.chunk {
            let Some(line) = self.lines.next() else {
                self.done = true;
                break;
            };
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let row = parse_jsonl_line(&line, self.line_no, &self.opts);
            if let Err(e) = accept(&mut report, self.line_no, row, self.opts.strict) {
                self.done = true;
                return Some(Err(e));
            }
        }
        if self.done && report.records.is_empty() && report.errors.is_empty() {
            return None;
        }
        Some(Ok(report))
    }
}

pub fn read_csv<R: std::io::Read>(reader: R, opts: &LoadOptions) -> Result<LoadReport> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for required in ["id", "text", "language"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::format(1, format!("missing required column {required:?}")));
        }
    }
    let mut report = LoadReport::default();
    for (i, rec) in rdr.records().enumerate() {
        // Header is line 1.
        let line_no = i + 2;
        let row = rec
            .map_err(|e| Error::format(line_no, e.to_string()))
            .and_then(|rec| {
                let mut raw = RawRow::default();
                for (h, v) in headers.iter().zip(rec.iter()) {
                    let v = Some(v.to_string());
                    match h {
                        "id" => raw.id = v,
                        "text" => raw.text = v,
                        "language" => raw.language = v,
                        "month" => raw.month = v,
                        "source" => raw.source = v,
                        "rating" => raw.rating = v,
                        "label" => raw.label = v,
                        "clean_text" => raw.clean_text = v,
                        other => return Err(Error::format(line_no, format!("unknown column {other:?}"))),
                    }
                }
                raw.into_record(line_no, &opts.languages)
            });
        accept(&mut report, line_no, row, opts.strict)?;
    }
    Ok(report)
}

pub fn write_jsonl<W: Write>(records: &[TextRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &RawRow::from_record(r))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(records: &[TextRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(File::create(path)?);
    write_jsonl(records, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Train/validation/test fractions and the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            seed: 42,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train", self.train_frac),
            ("val", self.val_frac),
            ("test", self.test_frac),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidSplit(format!("{name} fraction {f} not in (0,1)")));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Split sizes for `n` records; validation and test round down and the
    /// remainder goes to training.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // The epsilon keeps exact products like 10 * 0.1 from flooring to 0.
        let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let val = floor(self.val_frac);
        let test = floor(self.test_frac);
        (n - val - test, val, test)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<TextRecord>,
    pub val: Vec<TextRecord>,
    pub test: Vec<TextRecord>,
}

pub fn split_dataset(records: &[TextRecord], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if let Some(r) = records.iter().find(|r| r.gold_class.is_none()) {
        return Err(Error::MissingLabel(r.id.clone()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (_, n_val, n_test) = spec.sizes(records.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        val: pick(&order[..n_val]),
        test: pick(&order[n_val..n_val + n_test]),
        train: pick(&order[n_val + n_test..]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Class,
    Language,
    ClassLanguage,
}

/// Counts of labeled records; unlabeled ones are tallied separately.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountTable {
    /// Keys are `(class, language)` with the unused dimension `None`.
    pub counts: BTreeMap<(Option<MisinfoClass>, Option<String>), usize>,
    pub total: usize,
    pub unlabeled: usize,
}

impl CountTable {
    pub fn get(&self, class: Option<MisinfoClass>, language: Option<&str>) -> usize {
        self.counts
            .get(&(class, language.map(str::to_string)))
            .copied()
            .unwrap_or(0)
    }
}

pub fn class_distribution(records: &[TextRecord], by: GroupBy) -> CountTable {
    let mut table = CountTable::default();
    for r in records {
        let Some(class) = r.gold_class else {
            table.unlabeled += 1;
            continue;
        };
        let key = match by {
            GroupBy::Class => (Some(class), None),
            GroupBy::Language => (None, Some(r.language.clone())),
            GroupBy::ClassLanguage => (Some(class), Some(r.language.clone())),
        };
        *table.counts.entry(key).or_default() += 1;
        table.total += 1;
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> LoadOptions {
        LoadOptions::default()
    }

    #[test]
    fn rating_merge_rules() {
        assert_eq!(map_rating(FactCheckerRating::FourPinocchios), MisinfoClass::False_);
        assert_eq!(map_rating(FactCheckerRating::TwoPinocchios), MisinfoClass::PartiallyFalse);
        assert_eq!(map_rating(FactCheckerRating::NoEvidence), MisinfoClass::Misleading);
    }

    #[test]
    fn preimages_are_three_each() {
        for class in MisinfoClass::ALL {
            let n = FactCheckerRating::ALL
                .iter()
                .filter(|r| map_rating(**r) == class)
                .count();
            assert_eq!(n, 3, "{class}");
        }
    }

    #[test]
    fn rating_parsing_is_a_closed_table() {
        assert_eq!("four PINOCCHIOS".parse::<FactCheckerRating>().unwrap(), FactCheckerRating::FourPinocchios);
        assert_eq!("Partly False".parse::<FactCheckerRating>().unwrap(), FactCheckerRating::PartiallyFalse);
        assert_eq!("Inaccurate".parse::<FactCheckerRating>().unwrap(), FactCheckerRating::Incorrect);
        for r in FactCheckerRating::ALL {
            assert_eq!(r.as_str().parse::<FactCheckerRating>().unwrap(), r);
        }
        assert!(matches!("Pants on Fire".parse::<FactCheckerRating>(), Err(Error::UnknownRating(_))));
        assert!("Fals".parse::<FactCheckerRating>().is_err());
    }

    #[test]
    fn class_index_order_is_frozen() {
        for (i, c) in MisinfoClass::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(MisinfoClass::from_index(i), Some(*c));
        }
        assert_eq!(MisinfoClass::from_index(3), None);
    }

    #[test]
    fn jsonl_loads_in_order() {
        let data = r#"{"id":"a","text":"one","language":"en"}
{"id":"b","text":"two","language":"es","month":"2020-03"}
{"id":"c","text":"three","language":"de","label":"Misleading"}
"#;
        let rep = read_jsonl(data.as_bytes(), &opts()).unwrap();
        assert!(rep.errors.is_empty());
        let ids: Vec<_> = rep.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(rep.records[2].gold_class, Some(MisinfoClass::Misleading));
    }

    #[test]
    fn rating_derives_label() {
        let data = r#"{"id":"a","text":"x","language":"en","rating":"Four Pinocchios"}"#;
        let rep = read_jsonl(data.as_bytes(), &opts()).unwrap();
        assert_eq!(rep.records[0].gold_class, Some(MisinfoClass::False_));
        assert_eq!(rep.records[0].rating, Some(FactCheckerRating::FourPinocchios));
    }

    #[test]
    fn bad_rows_are_reported_and_skipped() {
        let data = r#"{"id":"a","text":"x","language":"en"}
{"id":"b","text":"y","language":"en","rating":"Pants on Fire"}
{"id":"c","text":"z","language":"xx"}
not json
{"id":"d","text":"w","language":"en","month":"2020-13"}
{"id":"e","text":"v","language":"en","rating":"Incorrect","label":"Misleading"}
{"id":"f","text":"   ","language":"en"}
{"id":"g","text":"ok","language":"fr"}
"#;
        let rep = read_jsonl(data.as_bytes(), &opts()).unwrap();
        let ids: Vec<_> = rep.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "g"]);
        let lines: Vec<_> = rep.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, [2, 3, 4, 5, 6, 7]);
        assert!(rep.errors[0].reason.contains("Pants on Fire"));

        let strict = LoadOptions { strict: true, ..opts() };
        let err = read_jsonl(data.as_bytes(), &strict).unwrap_err();
        assert!(matches!(err, Error::FormatError { line: 2, .. }));
    }

    #[test]
    fn error_report_is_jsonl() {
        let data = "{\"id\":\"a\",\"text\":\"x\",\"language\":\"zz\"}\n";
        let rep = read_jsonl(data.as_bytes(), &opts()).unwrap();
        let mut buf = Vec::new();
        rep.write_errors(&mut buf).unwrap();
        let row: RowError = serde_json::from_slice(&buf[..buf.len() - 1]).unwrap();
        assert_eq!(row.line, 1);
    }

    #[test]
    fn indonesian_alias() {
        let langs = LanguageSet::default();
        assert_eq!(langs.resolve("id").unwrap(), "in");
        assert_eq!(langs.resolve("EN").unwrap(), "en");
        assert!(langs.resolve("ar").is_err());
        assert!(langs.clone().with("ar").contains("ar"));
    }

    #[test]
    fn csv_loads_with_quoting() {
        let data = "id,text,language,label\n1,\"hello, world\",en,False\n2,\"say \"\"hi\"\"\",es,Partly False\n3,x,zz,False\n";
        let rep = read_csv(data.as_bytes(), &opts()).unwrap();
        assert_eq!(rep.records.len(), 2);
        assert_eq!(rep.records[0].raw_text, "hello, world");
        assert_eq!(rep.records[1].raw_text, "say \"hi\"");
        assert_eq!(rep.records[1].gold_class, Some(MisinfoClass::PartiallyFalse));
        assert_eq!(rep.errors, vec![RowError { line: 4, reason: "unknown language code \"zz\"".into() }]);
    }

    #[test]
    fn csv_requires_columns() {
        let data = "id,body,language\n1,x,en\n";
        assert!(read_csv(data.as_bytes(), &opts()).is_err());
    }

    #[test]
    fn missing_file() {
        let err = load_dataset(Path::new("/nonexistent/x.jsonl"), Format::Jsonl, &opts()).unwrap_err();
        assert!(matches!(err, Error::FileNotFound(_)));
    }

    fn labeled(n: usize) -> Vec<TextRecord> {
        (0..n)
            .map(|i| TextRecord::new(format!("r{i}"), "t", "en").with_label(MisinfoClass::ALL[i % 3]))
            .collect()
    }

    #[test]
    fn split_sizes() {
        let spec = SplitSpec::default();
        assert_eq!(spec.sizes(9502), (7602, 950, 950));
        assert_eq!(spec.sizes(10), (8, 1, 1));
        let s = split_dataset(&labeled(10), &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_deterministic() {
        let recs = labeled(57);
        let spec = SplitSpec { seed: 9, ..Default::default() };
        assert_eq!(split_dataset(&recs, &spec).unwrap(), split_dataset(&recs, &spec).unwrap());
        let other = split_dataset(&recs, &SplitSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(split_dataset(&recs, &spec).unwrap().train, other.train);
    }

    #[test]
    fn split_rejects_unlabeled_and_bad_fractions() {
        let mut recs = labeled(4);
        recs[2].gold_class = None;
        assert!(matches!(split_dataset(&recs, &SplitSpec::default()), Err(Error::MissingLabel(id)) if id == "r2"));
        let bad = SplitSpec { train_frac: 0.7, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidSplit(_))));
        let zero = SplitSpec { train_frac: 0.9, val_frac: 0.1, test_frac: 0.0, seed: 1 };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn distribution_counts() {
        assert_eq!(class_distribution(&[], GroupBy::Class), CountTable::default());
        let recs = vec![
            TextRecord::new("1", "a", "en").with_label(MisinfoClass::False_),
            TextRecord::new("2", "b", "en").with_label(MisinfoClass::False_),
            TextRecord::new("3", "c", "es").with_label(MisinfoClass::Misleading),
            TextRecord::new("4", "d", "es"),
        ];
        let t = class_distribution(&recs, GroupBy::ClassLanguage);
        assert_eq!(t.counts.len(), 2);
        assert_eq!(t.get(Some(MisinfoClass::False_), Some("en")), 2);
        assert_eq!(t.get(Some(MisinfoClass::Misleading), Some("es")), 1);
        assert_eq!((t.total, t.unlabeled), (3, 1));
        let by_lang = class_distribution(&recs, GroupBy::Language);
        assert_eq!(by_lang.get(None, Some("es")), 1);
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical() {
        let data = "{\"id\":\"a\",\"text\":\"x \\\"q\\\" é\",\"language\":\"en\",\"month\":\"2020-02\",\"source\":\"poynter\",\"rating\":\"Two Pinocchios\",\"label\":\"Partially False\"}\n{\"id\":\"b\",\"text\":\"y\",\"language\":\"hi\"}\n";
        let rep = read_jsonl(data.as_bytes(), &opts()).unwrap();
        let mut out = Vec::new();
        write_jsonl(&rep.records, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), data);
    }
}

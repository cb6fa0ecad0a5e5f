//! Multilingual tweet cleaning: URL/mention/retweet removal, hashtag symbol
//! stripping, emoji removal and per-language stopword removal.

use std::collections::{BTreeMap, HashSet};
use std::ops::RangeInclusive;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;

use crate::corpus::TextRecord;
use crate::error::Result;

pub const STEP_NOISE: &str = "strip_noise";
pub const STEP_HASHTAG: &str = "strip_hashtag_symbol";
pub const STEP_EMOJI: &str = "remove_emojis";
pub const STEP_STOPWORDS: &str = "remove_stopwords";

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:https?://|www\.)\S*").unwrap())
}

fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w+:?").unwrap())
}

fn retweet_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:\s*RT\b:?)+").unwrap())
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Removes URLs, @mentions and leading `RT` markers, then collapses
/// whitespace runs and trims.
pub fn strip_noise(text: &str) -> String {
    let t = url_re().replace_all(text, " ");
    let t = mention_re().replace_all(&t, " ");
    let t = retweet_re().replace(&t, " ");
    collapse_whitespace(&t)
}

/// Drops every `#`, keeping the hashtag body.
pub fn strip_hashtag_symbol(text: &str) -> String {
    text.chars().filter(|&c| c != '#').collect()
}

/// Codepoint ranges treated as emoji.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmojiRanges(pub Vec<RangeInclusive<char>>);

impl Default for EmojiRanges {
    fn default() -> Self {
        EmojiRanges(vec![
            '\u{1F300}'..='\u{1FAFF}',
            '\u{2600}'..='\u{27BF}',
            '\u{FE0F}'..='\u{FE0F}',
            '\u{200D}'..='\u{200D}',
            '\u{1F1E6}'..='\u{1F1FF}',
        ])
    }
}

impl EmojiRanges {
    pub fn contains(&self, c: char) -> bool {
        self.0.iter().any(|r| r.contains(&c))
    }
}

pub fn remove_emojis(text: &str) -> String {
    remove_emojis_in(text, &EmojiRanges::default())
}

pub fn remove_emojis_in(text: &str, ranges: &EmojiRanges) -> String {
    text.chars().filter(|&c| !ranges.contains(c)).collect()
}

/// Splits one whitespace-free token into word-like pieces for languages
/// written without spaces.
pub trait Segmenter: Send + Sync {
    fn segment(&self, token: &str) -> Vec<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Script {
    Thai,
    Hiragana,
    Katakana,
    Han,
    Other,
}

fn script_of(c: char) -> Script {
    match c as u32 {
        0x0E00..=0x0E7F => Script::Thai,
        0x3040..=0x309F => Script::Hiragana,
        0x30A0..=0x30FF | 0x31F0..=0x31FF | 0xFF66..=0xFF9F => Script::Katakana,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF => Script::Han,
        _ => Script::Other,
    }
}

/// Default segmenter: maximal runs of characters from the same script.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptRunSegmenter;

impl Segmenter for ScriptRunSegmenter {
    fn segment(&self, token: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut prev = None;
        for c in token.chars() {
            let s = script_of(c);
            match out.last_mut() {
                Some(cur) if prev == Some(s) => cur.push(c),
                _ => out.push(c.to_string()),
            }
            prev = Some(s);
        }
        out
    }
}

/// Languages whose stopword removal runs on segmenter output.
pub fn needs_segmentation(language: &str) -> bool {
    matches!(language, "th" | "ja")
}

/// Per-language stopword sets, matched against case-folded tokens.
#[derive(Debug, Clone, Default)]
pub struct StopwordTable {
    words: BTreeMap<String, HashSet<String>>,
    provenance: BTreeMap<String, String>,
}

fn table_key(language: &str) -> String {
    match language {
        "id" => "in".to_string(),
        other => other.to_string(),
    }
}

/// Parses a stopword file: one token per line, `#` lines are comments.
pub fn parse_stopword_file(content: &str) -> HashSet<String> {
    content
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

const BUILTIN: [(&str, &str); 8] = [
    ("en", include_str!("../data/stopwords/en.txt")),
    ("es", include_str!("../data/stopwords/es.txt")),
    ("fr", include_str!("../data/stopwords/fr.txt")),
    ("de", include_str!("../data/stopwords/de.txt")),
    ("hi", include_str!("../data/stopwords/hi.txt")),
    ("id", include_str!("../data/stopwords/id.txt")),
    ("th", include_str!("../data/stopwords/th.txt")),
    ("ja", include_str!("../data/stopwords/ja.txt")),
];

impl StopwordTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// The lists shipped with the crate.
    pub fn builtin() -> Self {
        let mut t = Self::new();
        for (lang, content) in BUILTIN {
            let provenance = content
                .lines()
                .next()
                .filter(|l| l.starts_with('#'))
                .map(|l| l.trim_start_matches('#').trim().to_string())
                .unwrap_or_default();
            t.insert(lang, parse_stopword_file(content), provenance);
        }
        t
    }

    /// Loads every `<code>.txt` file from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            if path.extension().and_then(|x| x.to_str()) != Some("txt") {
                continue;
            }
            let Some(lang) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let content = std::fs::read_to_string(&path)?;
            t.insert(lang, parse_stopword_file(&content), path.display().to_string());
        }
        Ok(t)
    }

    pub fn insert<I, S>(&mut self, language: &str, words: I, provenance: impl Into<String>)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let key = table_key(language);
        self.words
            .insert(key.clone(), words.into_iter().map(|w| w.as_ref().to_lowercase()).collect());
        self.provenance.insert(key, provenance.into());
    }

    pub fn get(&self, language: &str) -> Option<&HashSet<String>> {
        self.words.get(&table_key(language))
    }

    pub fn provenance(&self, language: &str) -> Option<&str> {
        self.provenance.get(&table_key(language)).map(String::as_str)
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.words.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordOutcome {
    pub text: String,
    /// No table exists for the language; the text was passed through.
    pub missing_table: bool,
}

pub fn remove_stopwords(text: &str, language: &str, table: &StopwordTable) -> StopwordOutcome {
    remove_stopwords_with(text, language, table, &ScriptRunSegmenter)
}

/// Stopword removal with an explicit segmenter for `th`/`ja` text.
pub fn remove_stopwords_with(
    text: &str,
    language: &str,
    table: &StopwordTable,
    segmenter: &dyn Segmenter,
) -> StopwordOutcome {
    let Some(words) = table.get(language) else {
        return StopwordOutcome {
            text: text.to_string(),
            missing_table: true,
        };
    };
    let keep = |w: &str| !words.contains(&w.to_lowercase());
    let survivors: Vec<String> = if needs_segmentation(language) {
        text.split_whitespace()
            .map(|tok| {
                segmenter
                    .segment(tok)
                    .into_iter()
                    .filter(|p| keep(p))
                    .collect::<String>()
            })
            .filter(|t| !t.is_empty())
            .collect()
    } else {
        text.split_whitespace()
            .filter(|w| keep(w))
            .map(str::to_string)
            .collect()
    };
    StopwordOutcome {
        text: survivors.join(" "),
        missing_table: false,
    }
}

/// Result of the cleaning pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanText {
    pub text: String,
    pub applied_steps: Vec<String>,
    pub language: String,
    /// Cleaning left nothing behind.
    pub emptied: bool,
    pub warnings: Vec<String>,
}

/// The full cleaning pipeline with its configuration.
#[derive(Clone)]
pub struct Preprocessor {
    pub stopwords: StopwordTable,
    pub emoji: EmojiRanges,
    pub segmenter: Arc<dyn Segmenter>,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self::new(StopwordTable::builtin())
    }
}

impl std::fmt::Debug for Preprocessor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Preprocessor")
            .field("stopwords", &self.stopwords)
            .field("emoji", &self.emoji)
            .finish_non_exhaustive()
    }
}

// Each pass only deletes characters, so this bound is never reached in practice.
const MAX_PASSES: usize = 16;

impl Preprocessor {
    pub fn new(stopwords: StopwordTable) -> Self {
        Self {
            stopwords,
            emoji: EmojiRanges::default(),
            segmenter: Arc::new(ScriptRunSegmenter),
        }
    }

    fn pass(&self, text: &str, language: &str, missing: &mut bool) -> String {
        let t = strip_noise(text);
        let t = strip_hashtag_symbol(&t);
        let t = remove_emojis_in(&t, &self.emoji);
        let out = remove_stopwords_with(&t, language, &self.stopwords, self.segmenter.as_ref());
        *missing |= out.missing_table;
        out.text
    }

    /// Runs noise → hashtag → emoji → stopword removal. A removal can expose
    /// new matches (an emoji inside a mention, say), so the pass repeats
    /// until the text stops changing, which makes the result idempotent.
    pub fn clean_text(&self, text: &str, language: &str) -> CleanText {
        let mut missing = false;
        let mut cur = self.pass(text, language, &mut missing);
        for _ in 1..MAX_PASSES {
            let next = self.pass(&cur, language, &mut missing);
            if next == cur {
                break;
            }
            cur = next;
        }
        let mut steps: Vec<String> = [STEP_NOISE, STEP_HASHTAG, STEP_EMOJI]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut warnings = Vec::new();
        if missing {
            log::warn!("no stopword table for language {language:?}; stopwords kept");
            steps.push(format!("{STEP_STOPWORDS}:skipped(no table for {language})"));
            warnings.push(format!("no stopword table for {language}"));
        } else {
            steps.push(STEP_STOPWORDS.to_string());
        }
        let emptied = cur.trim().is_empty();
        if emptied {
            warnings.push("empty after cleaning".to_string());
        }
        CleanText {
            text: cur,
            applied_steps: steps,
            language: language.to_string(),
            emptied,
            warnings,
        }
    }

    pub fn clean(&self, record: &TextRecord) -> CleanText {
        self.clean_text(&record.raw_text, &record.language)
    }
}

/// Cleans one record against `table` with default emoji ranges.
pub fn clean(record: &TextRecord, table: &StopwordTable) -> CleanText {
    Preprocessor::new(table.clone()).clean(record)
}

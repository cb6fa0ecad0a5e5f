//! Deterministic synthetic datasets for tests, acceptance runs and demos.
//!
//! Texts are invented; only counts and labels mirror the real collections.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::analyze::CorpusManifest;
use crate::corpus::{FactCheckerRating, MisinfoClass, TextRecord};
use crate::nn::rng;

/// Marker words per class, disjoint across classes.
pub const CLASS_MARKERS: [[&str; 3]; 3] = [
    ["zarnok", "fibblet", "quorvex"],
    ["halvint", "mezzor", "partak"],
    ["skewlin", "tilvrax", "murrow"],
];

pub const MONTHS: [&str; 5] = ["2020-02", "2020-03", "2020-04", "2020-05", "2020-06"];

fn filler(language: &str) -> &'static [&'static str] {
    match language {
        "es" => &["vacuna", "gobierno", "salud", "ciudad", "virus", "noticia", "hospital", "mascarilla", "pueblo", "agua"],
        "in" | "id" => &["vaksin", "pemerintah", "kesehatan", "kota", "berita", "rumah", "sakit", "masker", "warga", "obat"],
        "fr" => &["vaccin", "gouvernement", "santé", "ville", "nouvelle", "hôpital", "masque", "peuple", "remède", "eau"],
        "de" => &["impfstoff", "regierung", "gesundheit", "stadt", "nachricht", "krankenhaus", "maske", "volk", "heilmittel", "wasser"],
        "hi" => &["टीका", "सरकार", "स्वास्थ्य", "शहर", "खबर", "अस्पताल", "मास्क", "लोग", "दवा", "पानी"],
        "ja" => &["ワクチン", "政府", "健康", "都市", "ニュース", "病院", "マスク", "国民", "薬", "水"],
        "th" => &["วัคซีน", "รัฐบาล", "สุขภาพ", "เมือง", "ข่าว", "โรงพยาบาล", "หน้ากาก", "ประชาชน", "ยา", "น้ำ"],
        _ => &["vaccine", "government", "health", "city", "report", "hospital", "mask", "people", "cure", "water"],
    }
}

/// Parameters of [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub languages: Vec<String>,
    pub per_class: usize,
    /// Filler words per record, drawn uniformly from this inclusive range.
    pub filler_words: (usize, usize),
    /// Adds URLs, mentions and hashtags that cleaning should strip.
    pub noise: bool,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(languages: &[&str], per_class: usize, seed: u64) -> Self {
        Self {
            languages: languages.iter().map(|s| s.to_string()).collect(),
            per_class,
            filler_words: (3, 7),
            noise: false,
            seed,
        }
    }
}

/// `languages × 3 classes × per_class` labeled records with months set.
/// Each text holds one marker word of its class among language filler.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Vec<TextRecord> {
    let mut r = rng(spec.seed);
    let mut out = Vec::with_capacity(spec.languages.len() * 3 * spec.per_class);
    for lang in &spec.languages {
        let words = filler(lang);
        for class in MisinfoClass::ALL {
            for i in 0..spec.per_class {
                let (lo, hi) = spec.filler_words;
                let n = r.random_range(lo..=hi.max(lo));
                let mut toks: Vec<String> = (0..n).map(|_| words.choose(&mut r).expect("non-empty").to_string()).collect();
                toks.push(CLASS_MARKERS[class.index()].choose(&mut r).expect("non-empty").to_string());
                toks.shuffle(&mut r);
                if spec.noise {
                    if r.random_bool(0.3) {
                        toks.insert(0, format!("@user{}", r.random_range(0..100)));
                    }
                    if r.random_bool(0.3) {
                        let k = r.random_range(0..toks.len());
                        toks[k] = format!("#{}", toks[k]);
                    }
                    if r.random_bool(0.3) {
                        toks.push(format!("https://t.co/{:x}", r.random::<u32>()));
                    }
                }
                let month = MONTHS[r.random_range(0..MONTHS.len())];
                let id = format!("{lang}-{}-{i}", class.index());
                out.push(TextRecord::new(id, toks.join(" "), lang.clone()).with_label(class).with_month(month));
            }
        }
    }
    out
}

/// Rule oracle: the class whose marker occurs in `text`, if exactly one does.
pub fn marker_class(text: &str) -> Option<MisinfoClass> {
    let mut found = None;
    for w in text.split_whitespace() {
        let w = w.trim_start_matches('#');
        for class in MisinfoClass::ALL {
            if CLASS_MARKERS[class.index()].contains(&w) {
                match found {
                    Some(c) if c != class => return None,
                    _ => found = Some(class),
                }
            }
        }
    }
    found
}

/// One row of the collected fact-check table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceRow {
    pub rating: FactCheckerRating,
    pub language: &'static str,
    pub source: &'static str,
    pub count: usize,
}

pub const SOURCE_COUNTS: [SourceRow; 7] = [
    SourceRow { rating: FactCheckerRating::False_, language: "en", source: "poynter", count: 2869 },
    SourceRow { rating: FactCheckerRating::PartiallyFalse, language: "en", source: "poynter", count: 2765 },
    SourceRow { rating: FactCheckerRating::Misleading, language: "en", source: "poynter", count: 2837 },
    SourceRow { rating: FactCheckerRating::False_, language: "es", source: "chequeado", count: 191 },
    SourceRow { rating: FactCheckerRating::PartiallyFalse, language: "es", source: "chequeado", count: 161 },
    SourceRow { rating: FactCheckerRating::Misleading, language: "es", source: "chequeado", count: 179 },
    SourceRow { rating: FactCheckerRating::False_, language: "en", source: "checkworthy-tweets", count: 500 },
];

pub const SOURCE_TOTAL: usize = 9502;

/// 9,502 labeled records with the collected table's class/language/source
/// counts and synthetic texts.
pub fn source_fixture() -> Vec<TextRecord> {
    let mut r = rng(1);
    let mut out = Vec::with_capacity(SOURCE_TOTAL);
    for row in SOURCE_COUNTS {
        let class = row.rating.to_class();
        let words = filler(row.language);
        for i in 0..row.count {
            let mut toks: Vec<&str> = (0..5).map(|_| *words.choose(&mut r).expect("non-empty")).collect();
            toks.push(CLASS_MARKERS[class.index()][i % 3]);
            toks.shuffle(&mut r);
            let mut rec = TextRecord::new(format!("{}-{}-{i}", row.source, row.language), toks.join(" "), row.language)
                .with_label(class);
            rec.rating = Some(row.rating);
            rec.source = Some(row.source.to_string());
            out.push(rec);
        }
    }
    out
}

/// Per-language tweet counts of the inference corpus, for manifest checks.
pub const CORPUS_COUNTS: [(&str, u64); 8] = [
    ("en", 1_472_448),
    ("es", 353_294),
    ("in", 80_764),
    ("fr", 71_722),
    ("ja", 71_418),
    ("th", 36_824),
    ("hi", 27_320),
    ("de", 23_316),
];

pub const CORPUS_TOTAL: u64 = 2_137_106;

pub fn corpus_manifest() -> CorpusManifest {
    CorpusManifest {
        counts: CORPUS_COUNTS.iter().map(|(l, c)| (l.to_string(), *c)).collect(),
    }
}

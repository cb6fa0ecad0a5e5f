//! WordPiece vocabulary training, greedy longest-match splitting and
//! fixed-length encoding.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

/// Prefix of word-internal pieces.
pub const CONTINUATION: &str = "##";

/// Desk-scale default vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 8000;

/// Token list with dense ids; ids 0..4 are the specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list whose first four
    /// entries are `[PAD] [UNK] [CLS] [SEP]`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::format(i + 1, format!("expected special token {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(Error::format(i + 1, "empty or multi-line token"));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format(i + 1, format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    fn with_specials() -> Self {
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect()).expect("specials")
    }

    fn push(&mut self, token: String) -> u32 {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// File form: one token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(content: &str) -> Result<Self> {
        let body = content.strip_suffix('\n').unwrap_or(content);
        Self::from_tokens(body.split('\n').map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the file form; checkpoints record it.
    pub fn sha256(&self) -> [u8; 32] {
        Sha256::digest(self.to_file_string().as_bytes()).into()
    }
}

fn piece(s: &str, continuation: bool) -> String {
    if continuation {
        format!("{CONTINUATION}{s}")
    } else {
        s.to_string()
    }
}

/// Joins two adjacent pieces: the right piece drops its `##` marker.
fn merged(left: &str, right: &str) -> String {
    let tail = right.strip_prefix(CONTINUATION).unwrap_or(right);
    format!("{left}{tail}")
}

/// Trains a vocabulary by greedy pair merging over whitespace words.
///
/// Every character seen is kept as a bare token, and as a `##` token when
/// it occurs word-internally, so encoding the training corpus never yields
/// `[UNK]`. Merges pick the most frequent adjacent pair; ties go to the
/// lexicographically smallest `(left, right)` pair.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut order: Vec<&str> = Vec::new();
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            let e = freq.entry(w).or_insert_with(|| {
                order.push(w);
                0
            });
            *e += 1;
        }
    }

    let mut bare = BTreeSet::new();
    let mut inner = BTreeSet::new();
    for w in &order {
        for (i, c) in w.chars().enumerate() {
            bare.insert(c);
            if i > 0 {
                inner.insert(c);
            }
        }
    }
    let required = SPECIALS.len() + bare.len() + inner.len();
    if required > target_size {
        return Err(Error::TargetTooSmall {
            target: target_size,
            required,
        });
    }

    let mut vocab = Vocab::with_specials();
    for c in &bare {
        vocab.push(c.to_string());
    }
    for c in &inner {
        vocab.push(piece(&c.to_string(), true));
    }

    let mut words: Vec<(Vec<u32>, u64)> = order
        .iter()
        .map(|w| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, c)| vocab.id(&piece(&c.to_string(), i > 0)).expect("inventory"))
                .collect();
            (syms, freq[w])
        })
        .collect();

    let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
    while vocab.len() < target_size {
        pairs.clear();
        for (syms, f) in &words {
            for p in syms.windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += f;
            }
        }
        let best = pairs.iter().max_by(|(a, ca), (b, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (vocab.token(a.0), vocab.token(a.1));
                let kb = (vocab.token(b.0), vocab.token(b.1));
                kb.cmp(&ka)
            })
        });
        let Some((&(l, r), _)) = best else { break };
        let new_id = vocab.push(merged(vocab.token(l).unwrap(), vocab.token(r).unwrap()));
        for (syms, _) in words.iter_mut() {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
    }
    Ok(vocab)
}

/// Greedy longest-match-first split of a single word. Returns `[UNK]`
/// alone when some position has no matching piece.
pub fn wordpiece_split(word: &str, vocab: &Vocab) -> Vec<String> {
    wordpiece_ids(word, vocab)
        .into_iter()
        .map(|id| vocab.token(id).unwrap().to_string())
        .collect()
}

pub fn wordpiece_ids(word: &str, vocab: &Vocab) -> Vec<u32> {
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(word.len()))
        .collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut buf = String::new();
    while start + 1 < bounds.len() {
        let mut found = None;
        for end in (start + 1..bounds.len()).rev() {
            buf.clear();
            if start > 0 {
                buf.push_str(CONTINUATION);
            }
            buf.push_str(&word[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&buf) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => return vec![UNK_ID],
        }
    }
    out
}

/// A fixed-length model input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encodes `[CLS] pieces… [SEP]` padded to `max_len`; pieces beyond
/// `max_len - 2` are dropped from the tail.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assert!(max_len >= 3, "max_len must leave room for [CLS], a piece and [SEP]");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    'words: for w in text.split_whitespace() {
        for id in wordpiece_ids(w, vocab) {
            if ids.len() == max_len - 1 {
                break 'words;
            }
            ids.push(id);
        }
    }
    ids.push(SEP_ID);
    let true_length = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut attention_mask = vec![0u8; max_len];
    attention_mask[..true_length].fill(1);
    TokenSequence {
        ids,
        segment_ids: vec![0; max_len],
        attention_mask,
        true_length,
    }
}

pub fn decode(seq: &TokenSequence, vocab: &Vocab) -> Result<String> {
    decode_ids(&seq.ids, vocab)
}

pub fn decode_ids(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut words: Vec<String> = Vec::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::UnknownId(id))?;
        if (id as usize) < SPECIALS.len() {
            continue;
        }
        match (tok.strip_prefix(CONTINUATION), words.last_mut()) {
            (Some(tail), Some(last)) => last.push_str(tail),
            _ => words.push(tok.to_string()),
        }
    }
    Ok(words.join(" "))
}

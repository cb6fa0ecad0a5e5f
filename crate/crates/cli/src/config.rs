//! Run configuration: defaults, then the config file, then `CMTA_*`
//! environment paths, then command-line flags.

use std::path::{Path, PathBuf};

use cmta::corpus::SplitSpec;
use cmta::model::ModelConfig;
use cmta::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const ENV_PREFIX: &str = "CMTA_";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Paths {
    pub const ENV_KEYS: [&'static str; 5] = ["dataset", "vocab", "checkpoint", "stopwords", "output"];

    fn slot(&mut self, key: &str) -> &mut Option<PathBuf> {
        match key {
            "dataset" => &mut self.dataset,
            "vocab" => &mut self.vocab,
            "checkpoint" => &mut self.checkpoint,
            "stopwords" => &mut self.stopwords,
            "output" => &mut self.output,
            _ => unreachable!("unknown path key {key}"),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream: split, initialization, shuffling, dropout.
    pub seed: u64,
    pub workers: usize,
    pub vocab_size: usize,
    /// Records per chunk when streaming a corpus through `classify`.
    pub chunk_size: usize,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            workers: 1,
            vocab_size: cmta::tokenizer::DEFAULT_VOCAB_SIZE,
            chunk_size: 8192,
            paths: Paths::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

// Set from the top-level seed and paths only.
const DERIVED_KEYS: [&str; 3] = ["train.seed", "train.output_dir", "split.seed"];

/// Parses `key=value` lines into a nested JSON object. Dotted keys nest;
/// values are read as JSON when they parse, as strings otherwise.
pub fn parse_key_values(content: &str) -> Result<Value, String> {
    let mut root = Map::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        insert_dotted(&mut root, key.trim(), parse_scalar(value.trim()))
            .map_err(|e| format!("line {}: {e}", i + 1))?;
    }
    Ok(Value::Object(root))
}

fn parse_scalar(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key {key:?}"));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        cur = next.as_object_mut().ok_or_else(|| format!("{key:?} nests under a value"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn find_derived(v: &Value) -> Option<&'static str> {
    DERIVED_KEYS.into_iter().find(|k| {
        let (a, b) = k.split_once('.').expect("dotted");
        v.get(a).and_then(|x| x.get(b)).is_some()
    })
}

/// Reads a config file: JSON when it starts with `{`, key=value otherwise.
pub fn read_config_file(path: &Path) -> Result<Value, String> {
    let content = std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
    if content.trim_start().starts_with('{') {
        serde_json::from_str(&content).map_err(|e| format!("config {}: {e}", path.display()))
    } else {
        parse_key_values(&content).map_err(|e| format!("config {}: {e}", path.display()))
    }
}

/// Builds the effective configuration. `overrides` are `key=value` pairs
/// given with `--set`; `env` yields `(name, value)` pairs.
pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    overrides: &[String],
) -> Result<RunConfig, String> {
    let mut v = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let f = read_config_file(path)?;
        if let Some(k) = find_derived(&f) {
            return Err(format!("config key {k:?} is set from the top-level seed or paths"));
        }
        merge(&mut v, f);
    }
    let mut env_paths = Map::new();
    for (name, value) in env {
        if let Some(key) = name.strip_prefix(ENV_PREFIX) {
            let key = key.to_ascii_lowercase();
            if Paths::ENV_KEYS.contains(&key.as_str()) {
                env_paths.insert(key, Value::String(value));
            }
        }
    }
    merge(&mut v, serde_json::json!({ "paths": env_paths }));
    if !overrides.is_empty() {
        let o = parse_key_values(&overrides.join("\n"))?;
        if let Some(k) = find_derived(&o) {
            return Err(format!("key {k:?} is set from the top-level seed or paths"));
        }
        merge(&mut v, o);
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| format!("config: {e}"))?;
    Ok(cfg)
}

impl RunConfig {
    /// Applies flag values that win over everything else.
    pub fn apply_flags(&mut self, seed: Option<u64>, workers: Option<usize>, output: Option<&Path>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(w) = workers {
            self.workers = w;
        }
        if let Some(o) = output {
            self.paths.output = Some(o.to_path_buf());
        }
        self.train.seed = self.seed;
        self.split.seed = self.seed;
    }

    pub fn set_path(&mut self, key: &str, value: Option<&Path>) {
        if let Some(v) = value {
            *self.paths.slot(key) = Some(v.to_path_buf());
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        if self.chunk_size == 0 {
            return Err("chunk_size must be at least 1".into());
        }
        self.train.validate().map_err(|e| e.to_string())?;
        self.split.validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_nest_and_type() {
        let v = parse_key_values("# c\nseed = 7\nmodel.hidden=32\npaths.dataset = data/x.jsonl\n").unwrap();
        assert_eq!(v["seed"], 7);
        assert_eq!(v["model"]["hidden"], 32);
        assert_eq!(v["paths"]["dataset"], "data/x.jsonl");
        assert!(parse_key_values("novalue").is_err());
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.conf");
        std::fs::write(&f, "seed=5\npaths.vocab=file.txt\npaths.dataset=file.jsonl\ntrain.epochs=3\n").unwrap();
        let env = vec![("CMTA_VOCAB".to_string(), "env.txt".to_string()), ("OTHER".into(), "x".into())];
        let mut c = resolve(Some(&f), env, &["train.epochs=4".into()]).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.paths.vocab.as_deref(), Some(Path::new("env.txt")));
        c.apply_flags(Some(9), None, None);
        c.set_path("vocab", Some(Path::new("flag.txt")));
        assert_eq!((c.seed, c.train.seed, c.split.seed), (9, 9, 9));
        assert_eq!(c.paths.vocab.as_deref(), Some(Path::new("flag.txt")));
        assert_eq!(c.paths.dataset.as_deref(), Some(Path::new("file.jsonl")));
    }

    #[test]
    fn unknown_and_derived_keys_are_rejected() {
        let none: Vec<(String, String)> = Vec::new();
        assert!(resolve(None, none.clone(), &["model.hiden=3".into()]).is_err());
        assert!(resolve(None, none.clone(), &["sed=3".into()]).is_err());
        assert!(resolve(None, none.clone(), &["train.seed=3".into()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.json");
        std::fs::write(&f, r#"{"model": {"hidden": 32}, "paths": {"vocab": "v.txt"}}"#).unwrap();
        let c = resolve(Some(&f), none, &[]).unwrap();
        assert_eq!(c.model.hidden, 32);
        assert_eq!(c.model.layers, 2);
    }
}

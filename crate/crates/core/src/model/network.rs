//! The classifier network: embeddings, a post-LN transformer encoder that
//! exposes every hidden state, and the Conv1D + dense head.

use std::collections::HashMap;

use crate::corpus::MisinfoClass;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::nn::{argmax, rng, softmax_slice, Graph, Mode, Rng, Tensor, Var};
use crate::preprocess::Preprocessor;
use crate::scalar::Scalar;
use crate::tokenizer::{encode, TokenSequence, Vocab};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> Params<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn count_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

/// Parameter positions, resolved once from names.
#[derive(Debug, Clone)]
struct Layout {
    token: usize,
    segment: usize,
    position: usize,
    emb_ln: Norm,
    layers: Vec<EncoderLayer>,
    conv: [Linear; 3],
    dense: [Linear; 4],
}

/// Parameter names and shapes for a configuration, in storage order.
pub fn parameter_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = c.hidden;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("embeddings.token".into(), vec![c.vocab_size, h]),
        ("embeddings.segment".into(), vec![2, h]),
        ("embeddings.position".into(), vec![c.max_len, h]),
        ("embeddings.ln.gamma".into(), vec![h]),
        ("embeddings.ln.beta".into(), vec![h]),
    ];
    for l in 0..c.layers {
        let p = format!("encoder.{l}");
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.attn.w{m}"), vec![h, h]));
            out.push((format!("{p}.attn.b{m}"), vec![h]));
        }
        out.push((format!("{p}.ln1.gamma"), vec![h]));
        out.push((format!("{p}.ln1.beta"), vec![h]));
        out.push((format!("{p}.ffn.w1"), vec![h, c.ff_dim]));
        out.push((format!("{p}.ffn.b1"), vec![c.ff_dim]));
        out.push((format!("{p}.ffn.w2"), vec![c.ff_dim, h]));
        out.push((format!("{p}.ffn.b2"), vec![h]));
        out.push((format!("{p}.ln2.gamma"), vec![h]));
        out.push((format!("{p}.ln2.beta"), vec![h]));
    }
    let mut cin = h;
    for (i, &cout) in c.conv_channels.iter().enumerate() {
        out.push((format!("head.conv{}.weight", i + 1), vec![c.conv_kernel, cin, cout]));
        out.push((format!("head.conv{}.bias", i + 1), vec![cout]));
        cin = cout;
    }
    for (i, &d) in c.dense_dims.iter().enumerate() {
        out.push((format!("head.dense{}.weight", i + 1), vec![cin, d]));
        out.push((format!("head.dense{}.bias", i + 1), vec![d]));
        cin = d;
    }
    out
}

fn init_std(name: &str, shape: &[usize]) -> f64 {
    if name.starts_with("embeddings.") {
        0.02
    } else if name.contains(".conv") {
        (2.0 / (shape[0] * shape[1]) as f64).sqrt()
    } else if name == "head.dense4.weight" {
        (1.0 / shape[0] as f64).sqrt()
    } else if name.starts_with("head.dense") {
        (2.0 / shape[0] as f64).sqrt()
    } else {
        (1.0 / shape[0] as f64).sqrt()
    }
}

/// Output of the classifier for one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T> {
    pub class: MisinfoClass,
    pub probs: [T; 3],
}

/// Per-layer encoder outputs; entry 0 is the embedding layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T>(pub Vec<Tensor<T>>);

impl<T> HiddenStates<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> &Tensor<T> {
        self.0.last().expect("at least the embedding layer")
    }
}

/// Graph nodes of the conv head, for shape inspection.
#[derive(Debug, Clone, Copy)]
pub struct ConvHeadTrace {
    pub conv1: Var,
    pub after_avg: Var,
    pub conv2: Var,
    pub after_max: Var,
    pub conv3: Var,
    pub pooled: Var,
    pub output: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Params<T>,
    layout_cache: LayoutCache,
}

// Layout holds no floats; it is rebuilt whenever params are replaced.
#[derive(Debug, Clone)]
struct LayoutCache(Layout);

impl PartialEq for LayoutCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl<T: Scalar> Model<T> {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let mut params = Params::default();
        for (name, shape) in parameter_shapes(&config) {
            let t = if name.ends_with(".gamma") {
                Tensor::full(&shape, T::one())
            } else if name.ends_with(".beta") || name.contains(".attn.b") || name.contains(".ffn.b") || name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, init_std(&name, &shape), &mut r)
            };
            params.push(name, t)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let shapes = parameter_shapes(&config);
        if shapes.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "config needs {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            let t = params.get(name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        let layout = build_layout(&config, &params);
        Ok(Self {
            config,
            params,
            layout_cache: LayoutCache(layout),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut p = Params::default();
        for (n, t) in self.params.iter() {
            p.push(n, t.cast()).expect("unique names");
        }
        Model::from_params(self.config.clone(), p).expect("same layout")
    }

    fn layout(&self) -> &Layout {
        &self.layout_cache.0
    }

    /// Puts every parameter on the tape, borrowed, in storage order.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.param(t)).collect()
    }

    // ----- graph-level forward pieces -------------------------------------------

    /// Token + segment + position embeddings, layer-normalized.
    pub fn embed_graph(&self, g: &mut Graph<'_, T>, p: &[Var], seq: &TokenSequence) -> Result<Var> {
        let c = &self.config;
        if seq.len() != c.max_len {
            return Err(Error::ShapeMismatch(format!(
                "sequence of {} for max_len {}",
                seq.len(),
                c.max_len
            )));
        }
        let l = self.layout();
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = seq.ids.iter().find(|&&i| i as usize >= c.vocab_size) {
            return Err(Error::IdOutOfRange {
                id: bad,
                vocab_size: c.vocab_size,
            });
        }
        let segs: Vec<usize> = seq.segment_ids.iter().map(|&s| s as usize).collect();
        let positions: Vec<usize> = (0..c.max_len).collect();
        let tok = g.gather_rows(p[l.token], &ids)?;
        let seg = g.gather_rows(p[l.segment], &segs)?;
        let pos = g.gather_rows(p[l.position], &positions)?;
        let sum = g.add(tok, seg)?;
        let sum = g.add(sum, pos)?;
        g.layer_norm(sum, p[l.emb_ln.gamma], p[l.emb_ln.beta], c.layer_norm_eps)
    }

    /// Runs the encoder and returns all `layers + 1` hidden states.
    pub fn encoder_graph(&self, g: &mut Graph<'_, T>, p: &[Var], emb: Var, mask: &[u8]) -> Result<Vec<Var>> {
        let c = &self.config;
        let keep: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
        let dh = c.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut states = vec![emb];
        let mut x = emb;
        for layer in &self.layout().layers {
            let lin = |g: &mut Graph<'_, T>, x: Var, l: Linear| g.linear(x, p[l.w], p[l.b]);
            let q = lin(g, x, layer.q)?;
            let k = lin(g, x, layer.k)?;
            let v = lin(g, x, layer.v)?;
            let mut heads = Vec::with_capacity(c.heads);
            for h in 0..c.heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale);
                let attn = g.masked_softmax_rows(scores, &keep)?;
                heads.push(g.matmul(attn, vh)?);
            }
            let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let attn_out = lin(g, ctx, layer.o)?;
            let res = g.add(x, attn_out)?;
            let x1 = g.layer_norm(res, p[layer.ln1.gamma], p[layer.ln1.beta], c.layer_norm_eps)?;
            let ff = lin(g, x1, layer.ff1)?;
            let ff = g.gelu(ff);
            let ff = lin(g, ff, layer.ff2)?;
            let res = g.add(x1, ff)?;
            x = g.layer_norm(res, p[layer.ln2.gamma], p[layer.ln2.beta], c.layer_norm_eps)?;
            states.push(x);
        }
        Ok(states)
    }

    /// Selects (or averages) the configured hidden states for the head.
    pub fn tap_graph(&self, g: &mut Graph<'_, T>, states: &[Var]) -> Result<Var> {
        let idx = self.config.tap_indices()?;
        if idx.len() == 1 {
            return Ok(states[idx[0]]);
        }
        let picked: Vec<Var> = idx.iter().map(|&i| states[i]).collect();
        g.mean_of(&picked)
    }

    /// conv → relu → avg-pool → conv → relu → max-pool → conv → relu →
    /// global average → dropout.
    pub fn conv_head_graph(
        &self,
        g: &mut Graph<'_, T>,
        p: &[Var],
        hidden: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ConvHeadTrace> {
        let c = &self.config;
        let [c1, c2, c3] = self.layout().conv;
        let conv1 = g.conv1d(hidden, p[c1.w], p[c1.b])?;
        let x = g.relu(conv1);
        let after_avg = g.avg_pool1d(x, c.avg_pool)?;
        let conv2 = g.conv1d(after_avg, p[c2.w], p[c2.b])?;
        let x = g.relu(conv2);
        let after_max = g.max_pool1d(x, c.max_pool)?;
        let conv3 = g.conv1d(after_max, p[c3.w], p[c3.b])?;
        let x = g.relu(conv3);
        let pooled = g.global_avg_pool(x)?;
        let output = g.dropout(pooled, c.dropout, mode, rng);
        Ok(ConvHeadTrace {
            conv1,
            after_avg,
            conv2,
            after_max,
            conv3,
            pooled,
            output,
        })
    }

    /// Four dense layers with relu and dropout between them; returns the
    /// three class logits.
    pub fn dense_graph(&self, g: &mut Graph<'_, T>, p: &[Var], repr: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !g.data(repr).iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteInput("classifier"));
        }
        let width = g.value(repr).len();
        let mut x = g.reshape(repr, &[1, width])?;
        let dense = self.layout().dense;
        for (i, d) in dense.iter().enumerate() {
            x = g.linear(x, p[d.w], p[d.b])?;
            if i + 1 < dense.len() {
                x = g.relu(x);
                x = g.dropout(x, self.config.dropout, mode, rng);
            }
        }
        g.reshape(x, &[self.config.num_classes])
    }

    /// Full forward pass to class logits.
    pub fn logits_graph(
        &self,
        g: &mut Graph<'_, T>,
        p: &[Var],
        seq: &TokenSequence,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let emb = self.embed_graph(g, p, seq)?;
        let states = self.encoder_graph(g, p, emb, &seq.attention_mask)?;
        let hidden = self.tap_graph(g, &states)?;
        let head = self.conv_head_graph(g, p, hidden, mode, rng)?;
        self.dense_graph(g, p, head.output, mode, rng)
    }

    /// Cross-entropy of the gold class for one sequence.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_, T>,
        p: &[Var],
        seq: &TokenSequence,
        gold: MisinfoClass,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let logits = self.logits_graph(g, p, seq, mode, rng)?;
        g.softmax_cross_entropy(logits, gold.index())
    }

    // ----- tensor-level API -------------------------------------------------------

    pub fn embed_inputs(&self, seq: &TokenSequence) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g);
        let e = self.embed_graph(&mut g, &p, seq)?;
        Ok(g.value(e).clone())
    }

    pub fn encoder_forward(&self, seq: &TokenSequence) -> Result<HiddenStates<T>> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g);
        let e = self.embed_graph(&mut g, &p, seq)?;
        let states = self.encoder_graph(&mut g, &p, e, &seq.attention_mask)?;
        Ok(HiddenStates(states.iter().map(|&s| g.value(s).clone()).collect()))
    }

    /// Runs the conv head on a `[max_len, hidden]` state.
    pub fn conv_head_forward(&self, hidden: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g);
        let h = g.input(hidden.clone());
        let trace = self.conv_head_graph(&mut g, &p, h, mode, rng)?;
        Ok(g.value(trace.output).clone())
    }

    /// Dense layers plus softmax on a sentence representation.
    pub fn classify(&self, repr: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Prediction<T>> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g);
        let r = g.input(repr.clone());
        let logits = self.dense_graph(&mut g, &p, r, mode, rng)?;
        Ok(prediction_from_logits(g.data(logits)))
    }

    /// Eval-mode prediction for an encoded sequence.
    pub fn predict_sequence(&self, seq: &TokenSequence) -> Result<Prediction<T>> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g);
        // Eval mode never draws from the generator.
        let mut unused = rng(0);
        let logits = self.logits_graph(&mut g, &p, seq, Mode::Eval, &mut unused)?;
        Ok(prediction_from_logits(g.data(logits)))
    }

    /// Encodes already-cleaned text and predicts.
    pub fn predict_clean(&self, clean_text: &str, vocab: &Vocab) -> Result<Prediction<T>> {
        self.predict_sequence(&encode(clean_text, vocab, self.config.max_len))
    }
}

pub fn prediction_from_logits<T: Scalar>(logits: &[T]) -> Prediction<T> {
    let p = softmax_slice(logits);
    let probs = [p[0], p[1], p[2]];
    Prediction {
        class: MisinfoClass::from_index(argmax(&probs)).expect("three classes"),
        probs,
    }
}

/// clean → encode → embed → encoder → conv head → dense → softmax → argmax.
pub fn predict<T: Scalar>(
    text: &str,
    language: &str,
    vocab: &Vocab,
    model: &Model<T>,
    preprocessor: &Preprocessor,
) -> Result<Prediction<T>> {
    let clean = preprocessor.clean_text(text, language);
    model.predict_clean(&clean.text, vocab)
}

fn build_layout<T: Scalar>(c: &ModelConfig, p: &Params<T>) -> Layout {
    let at = |n: &str| p.position(n).unwrap_or_else(|| panic!("validated parameter {n}"));
    let lin = |w: String, b: String| Linear { w: at(&w), b: at(&b) };
    let norm = |pre: &str| Norm {
        gamma: at(&format!("{pre}.gamma")),
        beta: at(&format!("{pre}.beta")),
    };
    let layers = (0..c.layers)
        .map(|l| {
            let pre = format!("encoder.{l}");
            let attn = |m: &str| lin(format!("{pre}.attn.w{m}"), format!("{pre}.attn.b{m}"));
            EncoderLayer {
                q: attn("q"),
                k: attn("k"),
                v: attn("v"),
                o: attn("o"),
                ln1: norm(&format!("{pre}.ln1")),
                ff1: lin(format!("{pre}.ffn.w1"), format!("{pre}.ffn.b1")),
                ff2: lin(format!("{pre}.ffn.w2"), format!("{pre}.ffn.b2")),
                ln2: norm(&format!("{pre}.ln2")),
            }
        })
        .collect();
    let conv = |i: usize| lin(format!("head.conv{i}.weight"), format!("head.conv{i}.bias"));
    let dense = |i: usize| lin(format!("head.dense{i}.weight"), format!("head.dense{i}.bias"));
    Layout {
        token: at("embeddings.token"),
        segment: at("embeddings.segment"),
        position: at("embeddings.position"),
        emb_ln: norm("embeddings.ln"),
        layers,
        conv: [conv(1), conv(2), conv(3)],
        dense: [dense(1), dense(2), dense(3), dense(4)],
    }
}

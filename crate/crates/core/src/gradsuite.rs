//! Randomized gradient checks for every differentiable graph op and for
//! the composed classification head, in `f64`.

use rand::Rng as _;

use crate::corpus::MisinfoClass;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::gradcheck::{grad_check, grad_check_steps, GradCheck, DEFAULT_EPS};
use crate::nn::{rng, Graph, Mode, Rng, Tensor, Var};

/// Worst result of one op (or the head) over its random shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub shapes: usize,
    pub max_rel_error: f64,
    /// Input shapes of the worst case.
    pub worst_case: String,
}

pub const OPS: [&str; 25] = [
    "matmul",
    "matmul_nt",
    "linear",
    "add",
    "add_bias",
    "scale",
    "mean_of",
    "relu",
    "gelu",
    "layer_norm",
    "masked_softmax_rows",
    "softmax",
    "softmax_cross_entropy",
    "cross_entropy",
    "reshape",
    "slice_cols",
    "concat_cols",
    "gather_rows",
    "conv1d",
    "avg_pool1d",
    "max_pool1d",
    "global_avg_pool",
    "dropout",
    "sum",
    "weighted_sum",
];

/// Finite-difference steps for the head.
pub const HEAD_STEPS: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

type Loss = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

/// Fixed non-zero weights so every output coordinate reaches the loss.
fn reduce(g: &mut Graph<'_, f64>, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 17) as f64 / 5.0 - 1.66).collect();
    g.weighted_sum(y, &w)
}

fn randn(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Normal draws pushed at least 0.05 away from zero (off the relu kink).
fn off_zero(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    randn(shape, r).map(|x| if x >= 0.0 { x + 0.05 } else { x - 0.05 })
}

/// Distinct values 0.01 apart in random order (no max-pool ties).
fn distinct(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(r);
    Tensor::new(shape, v).expect("sized")
}

fn shape_desc(inputs: &[Tensor<f64>]) -> String {
    inputs.iter().map(|t| format!("{:?}", t.shape())).collect::<Vec<_>>().join(" ")
}

/// One random instance of op `name`: its inputs and scalar loss.
fn case(name: &str, r: &mut Rng) -> (Vec<Tensor<f64>>, Loss) {
    let mut d = |lo: usize, hi: usize| r.random_range(lo..=hi);
    let (m, k, n) = (d(1, 5), d(1, 5), d(1, 5));
    match name {
        "matmul" => (
            vec![randn(&[m, k], r), randn(&[k, n], r)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        "matmul_nt" => (
            vec![randn(&[m, k], r), randn(&[n, k], r)],
            Box::new(|g, v| {
                let y = g.matmul_nt(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        "linear" => (
            vec![randn(&[m, k], r), randn(&[k, n], r), randn(&[n], r)],
            Box::new(|g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                reduce(g, y)
            }),
        ),
        "add" => (
            vec![randn(&[m, n], r), randn(&[m, n], r)],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        "add_bias" => (
            vec![randn(&[m, n], r), randn(&[n], r)],
            Box::new(|g, v| {
                let y = g.add_bias(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        "scale" => {
            let c = r.random_range(-2.0..2.0);
            (
                vec![randn(&[m, n], r)],
                Box::new(move |g, v| {
                    let y = g.scale(v[0], c);
                    reduce(g, y)
                }),
            )
        }
        "mean_of" => {
            let count = d(1, 4);
            (
                (0..count).map(|_| randn(&[m, n], r)).collect(),
                Box::new(|g, v| {
                    let y = g.mean_of(v)?;
                    reduce(g, y)
                }),
            )
        }
        "relu" => (
            vec![off_zero(&[m, n], r)],
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                reduce(g, y)
            }),
        ),
        "gelu" => (
            vec![randn(&[m, n], r)],
            Box::new(|g, v| {
                let y = g.gelu(v[0]);
                reduce(g, y)
            }),
        ),
        "layer_norm" => {
            let n = d(2, 8);
            (
                vec![randn(&[m, n], r), randn(&[n], r), randn(&[n], r)],
                Box::new(|g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    reduce(g, y)
                }),
            )
        }
        "masked_softmax_rows" => {
            let n = d(2, 7);
            let mut keep: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
            keep[r.random_range(0..n)] = true;
            (
                vec![randn(&[m, n], r)],
                Box::new(move |g, v| {
                    let y = g.masked_softmax_rows(v[0], &keep)?;
                    reduce(g, y)
                }),
            )
        }
        "softmax" => {
            let n = d(2, 8);
            (
                vec![randn(&[n], r)],
                Box::new(|g, v| {
                    let y = g.softmax(v[0])?;
                    reduce(g, y)
                }),
            )
        }
        "softmax_cross_entropy" => {
            let n = d(2, 8);
            let gold = r.random_range(0..n);
            (vec![randn(&[n], r)], Box::new(move |g, v| g.softmax_cross_entropy(v[0], gold)))
        }
        "cross_entropy" => {
            let n = d(2, 8);
            let gold = r.random_range(0..n);
            (
                vec![Tensor::uniform(&[n], 0.2, 1.0, r)],
                Box::new(move |g, v| g.cross_entropy(v[0], gold)),
            )
        }
        "reshape" => (
            vec![randn(&[m, n], r)],
            Box::new(move |g, v| {
                let y = g.reshape(v[0], &[n, m])?;
                let y = g.gelu(y);
                reduce(g, y)
            }),
        ),
        "slice_cols" => {
            let n = d(2, 8);
            let start = r.random_range(0..n);
            let len = r.random_range(1..=n - start);
            (
                vec![randn(&[m, n], r)],
                Box::new(move |g, v| {
                    let y = g.slice_cols(v[0], start, len)?;
                    reduce(g, y)
                }),
            )
        }
        "concat_cols" => {
            let count = d(1, 3);
            let widths: Vec<usize> = (0..count).map(|_| d(1, 4)).collect();
            (
                widths.iter().map(|&w| randn(&[m, w], r)).collect(),
                Box::new(|g, v| {
                    let y = g.concat_cols(v)?;
                    reduce(g, y)
                }),
            )
        }
        "gather_rows" => {
            let rows = d(1, 6);
            let ids: Vec<usize> = (0..d(1, 8)).map(|_| r.random_range(0..rows)).collect();
            (
                vec![randn(&[rows, n], r)],
                Box::new(move |g, v| {
                    let y = g.gather_rows(v[0], &ids)?;
                    reduce(g, y)
                }),
            )
        }
        "conv1d" => {
            let (s, cin, cout) = (d(1, 9), d(1, 4), d(1, 4));
            let kw = [1, 3, 5][r.random_range(0..3)];
            (
                vec![randn(&[s, cin], r), randn(&[kw, cin, cout], r), randn(&[cout], r)],
                Box::new(|g, v| {
                    let y = g.conv1d(v[0], v[1], v[2])?;
                    reduce(g, y)
                }),
            )
        }
        "avg_pool1d" => {
            let pool = d(1, 4);
            let s = pool * d(1, 4);
            (
                vec![randn(&[s, n], r)],
                Box::new(move |g, v| {
                    let y = g.avg_pool1d(v[0], pool)?;
                    reduce(g, y)
                }),
            )
        }
        "max_pool1d" => {
            let pool = d(1, 4);
            let s = pool * d(1, 4);
            (
                vec![distinct(&[s, n], r)],
                Box::new(move |g, v| {
                    let y = g.max_pool1d(v[0], pool)?;
                    reduce(g, y)
                }),
            )
        }
        "global_avg_pool" => (
            vec![randn(&[m, n], r)],
            Box::new(|g, v| {
                let y = g.global_avg_pool(v[0])?;
                reduce(g, y)
            }),
        ),
        "dropout" => {
            let p = [0.1, 0.36, 0.5][r.random_range(0..3)];
            let seed = r.random::<u64>();
            (
                vec![randn(&[m, n], r)],
                Box::new(move |g, v| {
                    let y = g.dropout(v[0], p, Mode::Train, &mut rng(seed));
                    reduce(g, y)
                }),
            )
        }
        "sum" => (
            vec![randn(&[m, n], r)],
            Box::new(|g, v| {
                let y = g.gelu(v[0]);
                Ok(g.sum(y))
            }),
        ),
        "weighted_sum" => {
            let w: Vec<f64> = (0..m * n).map(|_| r.random_range(-2.0..2.0)).collect();
            (vec![randn(&[m, n], r)], Box::new(move |g, v| g.weighted_sum(v[0], &w)))
        }
        other => panic!("unknown op {other}"),
    }
}

/// Checks `op` on `shapes` random instances drawn from `seed`.
pub fn check_op(op: &'static str, shapes: usize, seed: u64) -> Result<SuiteResult> {
    let mut r = rng(seed);
    let mut out = SuiteResult {
        name: op,
        shapes,
        max_rel_error: 0.0,
        worst_case: String::new(),
    };
    for _ in 0..shapes {
        let (inputs, f) = case(op, &mut r);
        let res: GradCheck = grad_check(f, &inputs, DEFAULT_EPS)?;
        if res.max_rel_error >= out.max_rel_error {
            out.max_rel_error = res.max_rel_error;
            out.worst_case = shape_desc(&inputs);
        }
    }
    Ok(out)
}

/// Every op in [`OPS`], each with its own derived seed.
pub fn op_suite(shapes: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    OPS.iter()
        .enumerate()
        .map(|(i, op)| check_op(op, shapes, crate::nn::derive_seed(seed, &[i as u64])))
        .collect()
}

fn random_head_config(r: &mut Rng) -> ModelConfig {
    let (a, b) = ([1, 2, 4][r.random_range(0..3)], [1, 2, 4][r.random_range(0..3)]);
    let hidden = r.random_range(2..=8);
    let dense = r.random_range(2..=6);
    ModelConfig {
        vocab_size: 8,
        max_len: a * b * r.random_range(1..=3) * 4,
        hidden,
        layers: 1,
        heads: 1,
        ff_dim: 2 * hidden,
        conv_channels: [r.random_range(2..=6), r.random_range(2..=6), r.random_range(2..=6)],
        conv_kernel: [1, 3, 5][r.random_range(0..3)],
        avg_pool: a,
        max_pool: b,
        dense_dims: vec![dense, r.random_range(2..=6), dense, 3],
        ..ModelConfig::default()
    }
}

/// Conv head plus dense layers plus cross-entropy, differentiated with
/// respect to the final hidden state and every head parameter. Even
/// instances run in eval mode, odd ones in train mode with a fixed
/// dropout mask. Random points can sit near relu and max-pool kinks, so
/// each coordinate is differenced at several steps.
pub fn head_suite(shapes: usize, seed: u64) -> Result<SuiteResult> {
    let mut r = rng(seed);
    let mut out = SuiteResult {
        name: "head",
        shapes,
        max_rel_error: 0.0,
        worst_case: String::new(),
    };
    for i in 0..shapes {
        let cfg = random_head_config(&mut r);
        let mut model = Model::<f64>::new(cfg.clone(), r.random())?;
        let head: Vec<usize> = model
            .params()
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("head."))
            .map(|(j, _)| j)
            .collect();
        for (name, t) in model.params_mut().iter_mut() {
            if name.starts_with("head.") && name.ends_with("bias") {
                *t = Tensor::randn(t.shape(), 0.1, &mut r);
            }
        }
        let hidden = Tensor::randn(&[cfg.max_len, cfg.hidden], 1.0, &mut r);
        let mut inputs = vec![hidden];
        inputs.extend(head.iter().map(|&j| model.params().tensors()[j].clone()));
        let mode = if i % 2 == 0 { Mode::Eval } else { Mode::Train };
        let gold = MisinfoClass::ALL[r.random_range(0..3)];
        let drop_seed: u64 = r.random();
        let model = &model;
        let head = &head;
        let f = move |g: &mut Graph<'_, f64>, v: &[Var]| -> Result<Var> {
            let mut p: Vec<Var> = model.params().tensors().iter().map(|t| g.input(t.clone())).collect();
            for (slot, &j) in head.iter().enumerate() {
                p[j] = v[slot + 1];
            }
            let mut dr = rng(drop_seed);
            let trace = model.conv_head_graph(g, &p, v[0], mode, &mut dr)?;
            let logits = model.dense_graph(g, &p, trace.output, mode, &mut dr)?;
            g.softmax_cross_entropy(logits, gold.index())
        };
        let res = grad_check_steps(f, &inputs, &HEAD_STEPS)?;
        if res.max_rel_error >= out.max_rel_error {
            out.max_rel_error = res.max_rel_error;
            out.worst_case = format!(
                "max_len {} hidden {} channels {:?} kernel {} pools {}/{} dense {:?} {:?}; input {} coordinate {} analytic {:e} numeric {:e}",
                cfg.max_len,
                cfg.hidden,
                cfg.conv_channels,
                cfg.conv_kernel,
                cfg.avg_pool,
                cfg.max_pool,
                cfg.dense_dims,
                mode,
                res.worst.0,
                res.worst.1,
                res.at_worst.0,
                res.at_worst.1
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_has_a_case() {
        let mut r = rng(0);
        for op in OPS {
            let (inputs, _) = case(op, &mut r);
            assert!(!inputs.is_empty(), "{op}");
        }
    }
}

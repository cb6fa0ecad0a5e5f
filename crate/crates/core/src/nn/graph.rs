//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends its output to the tape, so tape order is a
//! topological order and the backward sweep is a single reverse pass that
//! visits each node once. Forward values are never touched by `backward`.

use std::borrow::Cow;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use crate::nn::rng::Rng;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode enables dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

type BackwardFn<T> = Box<dyn Fn(&Ctx<'_, '_, T>, &[T], &mut [Vec<T>])>;

/// Read-only view of the tape handed to backward closures.
pub struct Ctx<'g, 'p, T: Scalar> {
    values: &'g [Cow<'p, Tensor<T>>],
    requires: &'g [bool],
}

impl<T: Scalar> Ctx<'_, '_, T> {
    #[inline]
    fn value(&self, v: Var) -> &[T] {
        self.values[v.0].data()
    }

    /// Gradient buffer of `v`, allocated on first use; `None` when `v`
    /// does not require a gradient.
    #[inline]
    fn slot<'b>(&self, grads: &'b mut [Vec<T>], v: Var) -> Option<&'b mut [T]> {
        if !self.requires[v.0] {
            return None;
        }
        let g = &mut grads[v.0];
        if g.is_empty() {
            *g = vec![T::zero(); self.values[v.0].len()];
        }
        Some(g.as_mut_slice())
    }
}

/// A computation tape. Parameters may be borrowed rather than copied, so
/// inference over a shared model allocates only activations.
pub struct Graph<'p, T: Scalar> {
    values: Vec<Cow<'p, Tensor<T>>>,
    requires: Vec<bool>,
    backward: Vec<Option<BackwardFn<T>>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        let g = &self.grads[v.0];
        (!g.is_empty()).then_some(g.as_slice())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        let g = std::mem::take(&mut self.grads[v.0]);
        (!g.is_empty()).then_some(g)
    }
}

fn mismatch(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            requires: Vec::new(),
            backward: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records no backward closures.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.values[v.0].data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: Option<BackwardFn<T>>) -> Var {
        let requires = self.grad_enabled && parents.iter().any(|p| self.requires[p.0]);
        self.values.push(Cow::Owned(value));
        self.requires.push(requires);
        self.backward.push(if requires { backward } else { None });
        Var(self.values.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'p, Tensor<T>>, requires: bool) -> Var {
        self.values.push(value);
        self.requires.push(requires && self.grad_enabled);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    /// A trainable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// A trainable leaf owned by the tape.
    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant(&mut self, t: &'p Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.values[out.0].len() != 1 {
            return Err(mismatch(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Vec<T>> = vec![Vec::new(); self.values.len()];
        grads[out.0] = vec![T::one()];
        let ctx = Ctx {
            values: &self.values,
            requires: &self.requires,
        };
        for i in (0..=out.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            if let Some(f) = &self.backward[i] {
                let g = std::mem::take(&mut grads[i]);
                f(&ctx, &g, &mut grads);
                grads[i] = g;
            }
        }
        Ok(Gradients { grads })
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.values[v.0].dims2()
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(mismatch(format!("matmul {:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(ga) = ctx.slot(grads, a) {
                gemm_nt(g, ctx.value(b), ga, m, n, k);
            }
            if let Some(gb) = ctx.slot(grads, b) {
                gemm_tn(ctx.value(a), g, gb, m, k, n);
            }
        });
        Ok(self.push(Tensor::new(&[m, n], out)?, &[a, b], Some(back)))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(mismatch(format!("matmul_nt {:?} x {:?}ᵀ", self.shape(a), self.shape(b))));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(ga) = ctx.slot(grads, a) {
                gemm_nn(g, ctx.value(b), ga, m, n, k);
            }
            if let Some(gb) = ctx.slot(grads, b) {
                gemm_tn(g, ctx.value(a), gb, m, n, k);
            }
        });
        Ok(self.push(Tensor::new(&[m, n], out)?, &[a, b], Some(back)))
    }

    /// `x[m,k] · w[k,n] + b[n]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    // ----- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            for v in [a, b] {
                if let Some(gv) = ctx.slot(grads, v) {
                    axpy(T::one(), g, gv);
                }
            }
        });
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, &[a, b], Some(back)))
    }

    /// Adds `b[n]` to every row of `a[m,n]`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.shape(b) != [n] {
            return Err(mismatch(format!("bias {:?} for {:?}", self.shape(b), self.shape(a))));
        }
        let mut out = self.data(a).to_vec();
        let bias = self.data(b);
        for row in out.chunks_mut(n) {
            axpy(T::one(), bias, row);
        }
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(ga) = ctx.slot(grads, a) {
                axpy(T::one(), g, ga);
            }
            if let Some(gb) = ctx.slot(grads, b) {
                for row in g.chunks(n) {
                    axpy(T::one(), row, gb);
                }
            }
        });
        Ok(self.push(Tensor::new(&[m, n], out)?, &[a, b], Some(back)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.values[a.0].map(|x| x * c);
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(ga) = ctx.slot(grads, a) {
                axpy(c, g, ga);
            }
        });
        self.push(t, &[a], Some(back))
    }

    /// Elementwise mean of same-shaped nodes.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| mismatch("mean of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![T::zero(); self.values[first.0].len()];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(mismatch(format!("mean_of {:?} vs {:?}", shape, self.shape(x))));
            }
            axpy(T::one(), self.data(x), &mut out);
        }
        let inv = T::one() / T::of(xs.len() as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let vars = xs.to_vec();
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            for &x in &vars {
                if let Some(gx) = ctx.slot(grads, x) {
                    axpy(inv, g, gx);
                }
            }
        });
        Ok(self.push(Tensor::new(&shape, out)?, xs, Some(back)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.values[a.0].map(|x| if x > T::zero() { x } else { T::zero() });
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            let x = ctx.value(a);
            if let Some(ga) = ctx.slot(grads, a) {
                for i in 0..g.len() {
                    if x[i] > T::zero() {
                        ga[i] += g[i];
                    }
                }
            }
        });
        self.push(t, &[a], Some(back))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of(0.044715);
        let half = T::of(0.5);
        let t = self.values[a.0].map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            let x = ctx.value(a);
            if let Some(ga) = ctx.slot(grads, a) {
                for i in 0..g.len() {
                    let xi = x[i];
                    let th = (c * (xi + k * xi * xi * xi)).tanh();
                    let d = half * (T::one() + th)
                        + half * xi * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * xi * xi);
                    ga[i] += g[i] * d;
                }
            }
        });
        self.push(t, &[a], Some(back))
    }

    // ----- normalization and softmax ---------------------------------------

    /// Row-wise layer normalization of `x[m,n]` with gain and shift `[n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(mismatch(format!("layer_norm params for width {n}")));
        }
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let xs = self.data(x);
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = gm[j] * h + bt[j];
            }
        }
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            let gm = ctx.value(gamma);
            if let Some(gx) = ctx.slot(grads, x) {
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..n {
                        let d = gr[j] * gm[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                    }
                    mean_d /= nf;
                    mean_dh /= nf;
                    for j in 0..n {
                        let d = gr[j] * gm[j];
                        gx[i * n + j] += rstd[i] * (d - mean_d - hr[j] * mean_dh);
                    }
                }
            }
            if let Some(gg) = ctx.slot(grads, gamma) {
                for i in 0..m {
                    for j in 0..n {
                        gg[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
            }
            if let Some(gb) = ctx.slot(grads, beta) {
                for row in g.chunks(n) {
                    axpy(T::one(), row, gb);
                }
            }
        });
        Ok(self.push(Tensor::new(&[m, n], out)?, &[x, gamma, beta], Some(back)))
    }

    /// Softmax over each row of `x[m,n]`, restricted to columns where
    /// `keep[j]` is true; excluded columns get probability exactly 0.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if keep.len() != n || !keep.iter().any(|&k| k) {
            return Err(mismatch(format!("mask of {} for {n} columns", keep.len())));
        }
        let xs = self.data(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| keep[j])
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..n {
                if keep[j] {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            let inv = T::one() / sum;
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(&[m, n], out)?;
        let idx = self.values.len();
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            let y = ctx.values[idx].data();
            if let Some(gx) = ctx.slot(grads, x) {
                softmax_rows_backward(y, g, gx, n);
            }
        });
        Ok(self.push(t, &[x], Some(back)))
    }

    /// Softmax of a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.data(x);
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteInput("softmax"));
        }
        let n = v.len();
        let shape = self.shape(x).to_vec();
        let t = Tensor::new(&shape, crate::nn::tensor::softmax_slice(v))?;
        let idx = self.values.len();
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            let y = ctx.values[idx].data();
            if let Some(gx) = ctx.slot(grads, x) {
                softmax_rows_backward(y, g, gx, n);
            }
        });
        Ok(self.push(t, &[x], Some(back)))
    }

    /// Fused softmax + cross-entropy on a logit vector. The gradient is
    /// `softmax(logits) - one_hot(gold)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let z = self.data(logits);
        let n = z.len();
        if gold >= n {
            return Err(Error::IndexOutOfRange { index: gold, len: n });
        }
        if !z.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteInput("softmax_cross_entropy"));
        }
        let probs = crate::nn::tensor::softmax_slice(z);
        let loss = crate::nn::tensor::cross_entropy_value(&probs, gold)?;
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(gz) = ctx.slot(grads, logits) {
                for j in 0..n {
                    let target = if j == gold { T::one() } else { T::zero() };
                    gz[j] += g[0] * (probs[j] - target);
                }
            }
        });
        Ok(self.push(Tensor::scalar(loss), &[logits], Some(back)))
    }

    /// `-ln(max(p[gold], 1e-12))` on an explicit probability vector.
    pub fn cross_entropy(&mut self, probs: Var, gold: usize) -> Result<Var> {
        let p = self.data(probs);
        let loss = crate::nn::tensor::cross_entropy_value(p, gold)?;
        let floor = T::of(1e-12);
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            let pg = ctx.value(probs)[gold];
            if let Some(gp) = ctx.slot(grads, probs) {
                if pg > floor {
                    gp[gold] += -g[0] / pg;
                }
            }
        });
        Ok(self.push(Tensor::scalar(loss), &[probs], Some(back)))
    }

    // ----- indexing and reshaping ------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].as_ref().clone().reshape(shape)?;
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(gx) = ctx.slot(grads, x) {
                axpy(T::one(), g, gx);
            }
        });
        Ok(self.push(t, &[x], Some(back)))
    }

    /// Columns `start..start+len` of `x[m,n]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > n {
            return Err(mismatch(format!("columns {start}..{} of {n}", start + len)));
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(gx) = ctx.slot(grads, x) {
                for i in 0..m {
                    axpy(T::one(), &g[i * len..(i + 1) * len], &mut gx[i * n + start..i * n + start + len]);
                }
            }
        });
        Ok(self.push(Tensor::new(&[m, len], out)?, &[x], Some(back)))
    }

    /// Side-by-side concatenation of `[m, n_i]` blocks.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = self.dims2(xs[0])?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2(x)?;
            if r != m {
                return Err(mismatch(format!("concat rows {r} vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * n];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let d = self.data(x);
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let vars = xs.to_vec();
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            let mut off = 0;
            for (&x, &w) in vars.iter().zip(&widths) {
                if let Some(gx) = ctx.slot(grads, x) {
                    for i in 0..m {
                        axpy(T::one(), &g[i * n + off..i * n + off + w], &mut gx[i * w..(i + 1) * w]);
                    }
                }
                off += w;
            }
        });
        Ok(self.push(Tensor::new(&[m, n], out)?, xs, Some(back)))
    }

    /// Rows `ids` of `table[v,h]` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.dims2(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::IdOutOfRange {
                id: bad as u32,
                vocab_size: v,
            });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(&td[i * h..(i + 1) * h]);
        }
        let ids = ids.to_vec();
        let rows = ids.len();
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(gt) = ctx.slot(grads, table) {
                for (r, &i) in ids.iter().enumerate() {
                    axpy(T::one(), &g[r * h..(r + 1) * h], &mut gt[i * h..(i + 1) * h]);
                }
            }
        });
        Ok(self.push(Tensor::new(&[rows, h], out)?, &[table], Some(back)))
    }

    // ----- convolution and pooling -------------------------------------------

    /// 1-D cross-correlation along the sequence axis with zero "same"
    /// padding: `x[s,cin] ⋆ w[k,cin,cout] + b[cout] → [s,cout]`, `k` odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (s, cin) = self.dims2(x)?;
        let (k, cout) = match self.shape(w) {
            &[k, ci, co] if ci == cin => (k, co),
            other => return Err(mismatch(format!("conv kernel {other:?} for input {:?}", [s, cin]))),
        };
        if k % 2 == 0 {
            return Err(mismatch(format!("conv kernel width {k} must be odd")));
        }
        if self.shape(b) != [cout] {
            return Err(mismatch(format!("conv bias {:?} for {cout} channels", self.shape(b))));
        }
        let half = k / 2;
        let (xs, ws, bs) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![T::zero(); s * cout];
        for p in 0..s {
            let orow = &mut out[p * cout..(p + 1) * cout];
            orow.copy_from_slice(bs);
            for t in 0..k {
                let Some(q) = (p + t).checked_sub(half).filter(|&q| q < s) else {
                    continue;
                };
                // With row-major [k,cin,cout], tap t is a [cin,cout] matrix.
                let tap = &ws[t * cin * cout..(t + 1) * cin * cout];
                gemm_nn(&xs[q * cin..(q + 1) * cin], tap, orow, 1, cin, cout);
            }
        }
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            let (xs, ws) = (ctx.value(x), ctx.value(w));
            for p in 0..s {
                let grow = &g[p * cout..(p + 1) * cout];
                for t in 0..k {
                    let Some(q) = (p + t).checked_sub(half).filter(|&q| q < s) else {
                        continue;
                    };
                    let tap = t * cin * cout..(t + 1) * cin * cout;
                    if let Some(gx) = ctx.slot(grads, x) {
                        gemm_nt(grow, &ws[tap.clone()], &mut gx[q * cin..(q + 1) * cin], 1, cout, cin);
                    }
                    if let Some(gw) = ctx.slot(grads, w) {
                        gemm_tn(&xs[q * cin..(q + 1) * cin], grow, &mut gw[tap], 1, cin, cout);
                    }
                }
            }
            if let Some(gb) = ctx.slot(grads, b) {
                for row in g.chunks(cout) {
                    axpy(T::one(), row, gb);
                }
            }
        });
        Ok(self.push(Tensor::new(&[s, cout], out)?, &[x, w, b], Some(back)))
    }

    fn pool_dims(&self, x: Var, pool: usize) -> Result<(usize, usize)> {
        let (s, c) = self.dims2(x)?;
        if pool == 0 || s % pool != 0 {
            return Err(Error::IndivisibleLength { len: s, pool });
        }
        Ok((s, c))
    }

    /// Non-overlapping mean pooling along the sequence axis.
    pub fn avg_pool1d(&mut self, x: Var, pool: usize) -> Result<Var> {
        let (s, c) = self.pool_dims(x, pool)?;
        let o = s / pool;
        let inv = T::one() / T::of(pool as f64);
        let xs = self.data(x);
        let mut out = vec![T::zero(); o * c];
        for j in 0..o {
            for r in j * pool..(j + 1) * pool {
                axpy(inv, &xs[r * c..(r + 1) * c], &mut out[j * c..(j + 1) * c]);
            }
        }
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(gx) = ctx.slot(grads, x) {
                for j in 0..o {
                    for r in j * pool..(j + 1) * pool {
                        axpy(inv, &g[j * c..(j + 1) * c], &mut gx[r * c..(r + 1) * c]);
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(&[o, c], out)?, &[x], Some(back)))
    }

    /// Non-overlapping max pooling; the gradient goes to the first maximum.
    pub fn max_pool1d(&mut self, x: Var, pool: usize) -> Result<Var> {
        let (s, c) = self.pool_dims(x, pool)?;
        let o = s / pool;
        let xs = self.data(x);
        let mut out = vec![T::zero(); o * c];
        let mut arg = vec![0usize; o * c];
        for j in 0..o {
            for ch in 0..c {
                let mut best = j * pool;
                for r in j * pool + 1..(j + 1) * pool {
                    if xs[r * c + ch] > xs[best * c + ch] {
                        best = r;
                    }
                }
                out[j * c + ch] = xs[best * c + ch];
                arg[j * c + ch] = best * c + ch;
            }
        }
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(gx) = ctx.slot(grads, x) {
                for (i, &src) in arg.iter().enumerate() {
                    gx[src] += g[i];
                }
            }
        });
        Ok(self.push(Tensor::new(&[o, c], out)?, &[x], Some(back)))
    }

    /// Channel-wise mean over the sequence axis: `[s,c] → [c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (s, c) = self.dims2(x)?;
        if s == 0 {
            return Err(mismatch("global pooling over an empty sequence".into()));
        }
        let inv = T::one() / T::of(s as f64);
        let mut out = vec![T::zero(); c];
        for row in self.data(x).chunks(c) {
            axpy(inv, row, &mut out);
        }
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(gx) = ctx.slot(grads, x) {
                for row in gx.chunks_mut(c) {
                    axpy(inv, g, row);
                }
            }
        });
        Ok(self.push(Tensor::vector(out), &[x], Some(back)))
    }

    /// Inverted dropout: in train mode each entry is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; eval mode
    /// and `p == 0` are the identity.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0,1)");
        if mode == Mode::Eval || p == 0.0 {
            return x;
        }
        let keep_scale = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.values[x.0].len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep_scale })
            .collect();
        let out: Vec<T> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(gx) = ctx.slot(grads, x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
        });
        self.push(Tensor::new(&shape, out).expect("same shape"), &[x], Some(back))
    }

    // ----- reductions ---------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(gx) = ctx.slot(grads, x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        });
        self.push(Tensor::scalar(s), &[x], Some(back))
    }

    /// `Σ x ⊙ w` for a fixed weight vector; turns any output into a scalar
    /// with a non-degenerate gradient.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.values[x.0].len() {
            return Err(mismatch(format!("{} weights for {:?}", weights.len(), self.shape(x))));
        }
        let s = dot(self.data(x), weights);
        let w = weights.to_vec();
        let back: BackwardFn<T> = Box::new(move |ctx, g, grads| {
            if let Some(gx) = ctx.slot(grads, x) {
                axpy(g[0], &w, gx);
            }
        });
        Ok(self.push(Tensor::scalar(s), &[x], Some(back)))
    }
}

fn softmax_rows_backward<T: Scalar>(y: &[T], g: &[T], gx: &mut [T], n: usize) {
    for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
        let s = dot(yr, gr);
        for j in 0..n {
            gxr[j] += yr[j] * (gr[j] - s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn conv1d_hand_example() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.input(t(&[3, 1, 1], &[1.0, 1.0, 1.0]));
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.data(y), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn conv1d_zero_input_gives_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[5, 2]));
        let w = g.input(Tensor::randn(&[3, 2, 3], 1.0, &mut rng(1)));
        let b = g.input(t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.conv1d(x, w, b).unwrap();
        for row in g.data(y).chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn conv1d_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[5, 2]));
        let w = g.input(Tensor::zeros(&[3, 3, 1]));
        let w2 = g.input(Tensor::zeros(&[2, 2, 1]));
        let b = g.input(Tensor::zeros(&[1]));
        assert!(matches!(g.conv1d(x, w, b), Err(Error::ShapeMismatch(_))));
        assert!(matches!(g.conv1d(x, w2, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[8, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let a = g.avg_pool1d(x, 8).unwrap();
        let m = g.max_pool1d(x, 8).unwrap();
        assert_eq!(g.data(a), &[4.5]);
        assert_eq!(g.data(m), &[8.0]);
        let long = g.input(Tensor::zeros(&[128, 3]));
        let p = g.avg_pool1d(long, 8).unwrap();
        assert_eq!(g.shape(p), &[16, 3]);
        assert!(matches!(g.avg_pool1d(x, 3), Err(Error::IndivisibleLength { len: 8, pool: 3 })));

        let q = g.input(t(&[2, 2], &[1.0, 10.0, 3.0, 20.0]));
        let gp = g.global_avg_pool(q).unwrap();
        assert_eq!(g.data(gp), &[2.0, 15.0]);
    }

    #[test]
    fn max_pool_routes_to_first_maximum() {
        let mut g = Graph::<f64>::new();
        let x = g.param_owned(t(&[4, 1], &[2.0, 5.0, 5.0, 1.0]));
        let m = g.max_pool1d(x, 4).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn fused_cross_entropy_gradient_is_probs_minus_one_hot() {
        let mut g = Graph::<f64>::new();
        let z = g.param_owned(t(&[3], &[0.3, -1.2, 2.0]));
        let l = g.softmax_cross_entropy(z, 1).unwrap();
        let grads = g.backward(l).unwrap();
        let p = crate::nn::tensor::softmax_slice(g.data(z));
        let want = [p[0], p[1] - 1.0, p[2]];
        for (a, b) in grads.get(z).unwrap().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((g.data(l)[0] + p[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::<f64>::new();
        let z = g.input(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(z), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn masked_columns_get_zero_probability() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 100.0]));
        let y = g.masked_softmax_rows(x, &[true, true, false]).unwrap();
        let d = g.data(y);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[5], 0.0);
        assert!((d[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1000], 1.0));
        let mut r = rng(3);
        assert_eq!(g.dropout(x, 0.36, Mode::Eval, &mut r), x);
        assert_eq!(g.dropout(x, 0.0, Mode::Train, &mut r), x);
        let d = g.dropout(x, 0.5, Mode::Train, &mut r);
        let vals = g.data(d);
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let d2 = g.dropout(x, 0.5, Mode::Train, &mut rng(3));
        let d3 = g.dropout(x, 0.5, Mode::Train, &mut rng(3));
        assert_eq!(g.data(d2), g.data(d3));
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::<f64>::inference();
        let p = g.param(&w);
        let y = g.sum(p);
        assert!(!g.requires_grad(y));
        let grads = g.backward(y).unwrap();
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param_owned(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut g = Graph::<f64>::new();
        let x = g.param_owned(t(&[2], &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
    }
}

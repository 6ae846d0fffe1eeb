//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values are 2-D
//! arrays (row vectors are `1 x n`). Parameters are read from a borrowed
//! [`ParamStore`] and never copied onto the tape; [`Tape::backward`] returns
//! gradients only for the parameters that influenced the seeded outputs.
//!
//! Fused kernels (layer norm, masked multi-head attention, the token
//! covariance regulariser, the losses) carry their own backward rules.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::decorrel::{self, Centering};
use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore, Scalar};

/// Lower/upper probability bound used inside the log-losses.
pub const PROB_CLAMP: f64 = 1e-7;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<T>,
        inv_std: Array1<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<T>>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    MeanRows(Var),
    Softmax {
        x: Var,
        temperature: T,
    },
    SelectSoftmax {
        x: Var,
        selected: Vec<usize>,
    },
    CovReg {
        z: Var,
        grad: Array2<T>,
    },
    Bce {
        p: Var,
        targets: Array2<T>,
    },
    CrossEntropy {
        p: Var,
        class: usize,
    },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Option<Array2<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

fn softmax_rows<T: Scalar>(x: &Array2<T>, temperature: T) -> Array2<T> {
    let mut out = x.mapv(|v| v / temperature);
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn constant_view(&mut self, value: ArrayView2<T>) -> Var {
        self.constant(value.to_owned())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Shape(format!("matmul {ar}x{ac} by {br}x{bc}")));
        }
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            return Err(Error::Shape(format!("row broadcast {:?} onto {:?}", self.shape(row), self.shape(a))));
        }
        let out = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// `x W + b` with `b` a `1 x n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).mapv(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.tanh());
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Row-wise layer normalisation with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gain) != (1, cols) || self.shape(bias) != (1, cols) {
            return Err(Error::Shape(format!("layer norm gain/bias must be 1x{cols}")));
        }
        let xv = self.value(x);
        let n = T::lit(cols as f64);
        let mut xhat = Array2::<T>::zeros((rows, cols));
        let mut inv_std = Array1::<T>::zeros(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
            inv_std[r] = is;
            for (c, &v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention with an additive mask.
    /// `q`, `k`, `v` are already projected (`n x d`); head `h` uses columns
    /// `h*d/heads .. (h+1)*d/heads` and logits are scaled by `1/sqrt(d/heads)`.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, mask: &Array2<T>, heads: usize) -> Result<Var> {
        let (n, d) = self.shape(q);
        if self.shape(k) != (n, d) || self.shape(v) != (n, d) {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if mask.dim() != (n, n) {
            return Err(Error::Shape(format!("mask {:?} for sequence of {n}", mask.dim())));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::<T>::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut logits = qv.slice(cols).dot(&kv.slice(cols).t());
            logits.mapv_inplace(|x| x * scale);
            logits += mask;
            let p = softmax_rows(&logits, T::one());
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|p| self.shape(*p).1 != cols) {
            return Err(Error::Shape("concat_rows column mismatch".into()));
        }
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols"));
        }
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|p| self.shape(*p).0 != rows) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, _) = self.shape(x);
        if start + len > rows || len == 0 {
            return Err(Error::Shape(format!("row slice {start}..{} of {rows}", start + len)));
        }
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, _) = self.shape(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::Shape(format!("gather rows {rows:?} from {n}")));
        }
        let out = self.value(x).select(Axis(0), rows);
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, ng))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        let ng = self.ng(x);
        self.push(out, Op::MeanRows(x), ng)
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: T) -> Var {
        let out = softmax_rows(self.value(x), temperature);
        let ng = self.ng(x);
        self.push(out, Op::Softmax { x, temperature }, ng)
    }

    /// Softmax over the `selected` entries of a `1 x n` row; output is
    /// `1 x selected.len()` in the order given.
    pub fn select_softmax(&mut self, x: Var, selected: &[usize]) -> Result<Var> {
        let (r, n) = self.shape(x);
        if r != 1 || selected.is_empty() || selected.iter().any(|&i| i >= n) {
            return Err(Error::Shape("select_softmax expects a row and valid indices".into()));
        }
        let xv = self.value(x);
        let picked = Array2::from_shape_fn((1, selected.len()), |(_, j)| xv[[0, selected[j]]]);
        let out = softmax_rows(&picked, T::one());
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::SelectSoftmax {
                x,
                selected: selected.to_vec(),
            },
            ng,
        ))
    }

    /// Token-level covariance regulariser of the rows of `z` (`1 x 1`).
    pub fn cov_reg(&mut self, z: Var, centering: Centering) -> Result<Var> {
        let (value, grad) = decorrel::regularizer_with_grad(self.value(z).view(), centering)?;
        let ng = self.ng(z);
        Ok(self.push(Array2::from_elem((1, 1), value), Op::CovReg { z, grad }, ng))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    pub fn bce(&mut self, p: Var, targets: Array2<T>) -> Result<Var> {
        if self.shape(p) != targets.dim() {
            return Err(Error::Shape("bce target shape".into()));
        }
        let pv = self.value(p);
        let n = T::lit(pv.len() as f64);
        let mut total = T::zero();
        for (&pi, &yi) in pv.iter().zip(targets.iter()) {
            let (pc, _) = clamp_prob(pi);
            total = total - (yi * pc.ln() + (T::one() - yi) * (T::one() - pc).ln());
        }
        let ng = self.ng(p);
        Ok(self.push(Array2::from_elem((1, 1), total / n), Op::Bce { p, targets }, ng))
    }

    /// Cross-entropy of a probability row against the true class.
    pub fn cross_entropy(&mut self, p: Var, class: usize) -> Result<Var> {
        let (r, n) = self.shape(p);
        if r != 1 || class >= n {
            return Err(Error::OutOfRange(format!("class {class} for {n} classes")));
        }
        let (pc, _) = clamp_prob(self.value(p)[[0, class]]);
        let ng = self.ng(p);
        Ok(self.push(Array2::from_elem((1, 1), -pc.ln()), Op::CrossEntropy { p, class }, ng))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("sum"));
        }
        let shape = self.shape(parts[0]);
        if parts.iter().any(|p| self.shape(*p) != shape) {
            return Err(Error::Shape("sum shape mismatch".into()));
        }
        let mut out = self.value(parts[0]).clone();
        for p in &parts[1..] {
            out += self.value(*p);
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::Sum(parts.to_vec()), ng))
    }

    /// Gradient of a scalar output.
    pub fn backward_scalar(&self, out: Var) -> ParamGrads<T> {
        self.backward(&[(out, Array2::from_elem((1, 1), T::one()))])
    }

    /// Propagate the given output cotangents back to the parameters.
    pub fn backward(&self, seeds: &[(Var, Array2<T>)]) -> ParamGrads<T> {
        let mut grads: Vec<Option<Array2<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "seed shape");
            acc(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        let mut out = ParamGrads::new(self.params.len());
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(i, node, g, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(
        &self,
        i: usize,
        node: &Node<T>,
        g: Array2<T>,
        grads: &mut [Option<Array2<T>>],
        out: &mut ParamGrads<T>,
    ) {
        match &node.op {
            Op::Const => {}
            Op::Param(id) => out.accumulate_owned(*id, g),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    acc(grads, *b, g.clone());
                }
                if self.ng(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::AddRow(a, r) => {
                if self.ng(*r) {
                    acc(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.mapv(|x| x * *s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut ga = g;
                ga.zip_mut_with(x, |gv, &xv| *gv = *gv * gelu_parts(xv).1);
                acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let y = self.value(Var(i));
                let mut ga = g;
                ga.zip_mut_with(y, |gv, &yv| *gv = *gv * (T::one() - yv * yv));
                acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = self.value(Var(i));
                let mut ga = g;
                ga.zip_mut_with(y, |gv, &yv| *gv = *gv * yv * (T::one() - yv));
                acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.ng(*gain) {
                    acc(grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*bias) {
                    acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = &g * self.value(*gain);
                    let cols = xhat.ncols();
                    let n = T::lit(cols as f64);
                    let mut dx = Array2::<T>::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_d = dr.sum();
                        let sum_dx = dr.iter().zip(xr.iter()).fold(T::zero(), |a, (&d, &x)| a + d * x);
                        let k = inv_std[r] / n;
                        for c in 0..cols {
                            dx[[r, c]] = k * (n * dr[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (n, d) = g.dim();
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Array2::<T>::zeros((n, d));
                let mut dk = Array2::<T>::zeros((n, d));
                let mut dv = Array2::<T>::zeros((n, d));
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    dv.slice_mut(cols).assign(&p.t().dot(&go));
                    let dp = go.dot(&vv.slice(cols).t());
                    let mut ds = Array2::<T>::zeros((n, n));
                    for r in 0..n {
                        let dot = (0..n).fold(T::zero(), |a, c| a + dp[[r, c]] * p[[r, c]]);
                        for c in 0..n {
                            ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot) * scale;
                        }
                    }
                    dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                    dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                }
                if self.ng(*q) {
                    acc(grads, *q, dq);
                }
                if self.ng(*k) {
                    acc(grads, *k, dk);
                }
                if self.ng(*v) {
                    acc(grads, *v, dv);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let r = self.shape(*p).0;
                    if self.ng(*p) {
                        acc(grads, *p, g.slice(s![start..start + r, ..]).to_owned());
                    }
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.shape(*p).1;
                    if self.ng(*p) {
                        acc(grads, *p, g.slice(s![.., start..start + c]).to_owned());
                    }
                    start += c;
                }
            }
            Op::SliceRows { x, start } => {
                let mut gx = Array2::<T>::zeros(self.shape(*x));
                let len = g.nrows();
                gx.slice_mut(s![*start..*start + len, ..]).assign(&g);
                acc(grads, *x, gx);
            }
            Op::GatherRows { x, rows } => {
                let mut gx = Array2::<T>::zeros(self.shape(*x));
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = gx.row_mut(r);
                    dst += &g.row(k);
                }
                acc(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let inv = T::one() / T::lit(rows as f64);
                let gx = Array2::from_shape_fn((rows, cols), |(_, c)| g[[0, c]] * inv);
                acc(grads, *x, gx);
            }
            Op::Softmax { x, temperature } => {
                let y = self.value(Var(i));
                let mut gx = Array2::<T>::zeros(y.dim());
                for r in 0..y.nrows() {
                    let dot = (0..y.ncols()).fold(T::zero(), |a, c| a + g[[r, c]] * y[[r, c]]);
                    for c in 0..y.ncols() {
                        gx[[r, c]] = (g[[r, c]] - dot) * y[[r, c]] / *temperature;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::SelectSoftmax { x, selected } => {
                let y = self.value(Var(i));
                let dot = (0..y.ncols()).fold(T::zero(), |a, c| a + g[[0, c]] * y[[0, c]]);
                let mut gx = Array2::<T>::zeros(self.shape(*x));
                for (c, &j) in selected.iter().enumerate() {
                    gx[[0, j]] = gx[[0, j]] + (g[[0, c]] - dot) * y[[0, c]];
                }
                acc(grads, *x, gx);
            }
            Op::CovReg { z, grad } => acc(grads, *z, grad.mapv(|v| v * g[[0, 0]])),
            Op::Bce { p, targets } => {
                let pv = self.value(*p);
                let n = T::lit(pv.len() as f64);
                let gs = g[[0, 0]];
                let gx = Array2::from_shape_fn(pv.dim(), |(r, c)| {
                    let (pc, clamped) = clamp_prob(pv[[r, c]]);
                    if clamped {
                        return T::zero();
                    }
                    let y = targets[[r, c]];
                    -gs * (y / pc - (T::one() - y) / (T::one() - pc)) / n
                });
                acc(grads, *p, gx);
            }
            Op::CrossEntropy { p, class } => {
                let pv = self.value(*p);
                let mut gx = Array2::<T>::zeros(pv.dim());
                let (pc, clamped) = clamp_prob(pv[[0, *class]]);
                if !clamped {
                    gx[[0, *class]] = -g[[0, 0]] / pc;
                }
                acc(grads, *p, gx);
            }
            Op::Sum(parts) => {
                for p in parts {
                    if self.ng(*p) {
                        acc(grads, *p, g.clone());
                    }
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store(values: Vec<(&str, Array2<f64>)>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.add(n, v).unwrap();
        }
        s
    }

    /// Central differences of `f` with respect to every entry of parameter 0.
    fn numeric_grad(s: &ParamStore<f64>, f: &dyn Fn(&ParamStore<f64>) -> f64) -> Array2<f64> {
        let id = ParamId(0);
        let h = 1e-6;
        let mut out = Array2::zeros(s.get(id).dim());
        for idx in 0..out.len() {
            let (r, c) = (idx / out.ncols(), idx % out.ncols());
            let mut plus = s.clone();
            plus.get_mut(id)[[r, c]] += h;
            let mut minus = s.clone();
            minus.get_mut(id)[[r, c]] -= h;
            out[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn check(s: &ParamStore<f64>, f: &dyn Fn(&ParamStore<f64>) -> f64, build: &dyn Fn(&mut Tape<f64>) -> Var) {
        let mut tape = Tape::new(s);
        let out = build(&mut tape);
        let g = tape.backward_scalar(out);
        let analytic = g.get(ParamId(0)).cloned().unwrap_or_else(|| Array2::zeros(s.get(ParamId(0)).dim()));
        let numeric = numeric_grad(s, f);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} numeric {n}");
        }
    }

    fn eval(s: &ParamStore<f64>, build: &dyn Fn(&mut Tape<f64>) -> Var) -> f64 {
        let mut tape = Tape::new(s);
        let out = build(&mut tape);
        tape.scalar(out)
    }

    fn weighted_sum(t: &mut Tape<f64>, x: Var) -> Var {
        let (r, c) = t.shape(x);
        let w = t.constant(Array2::from_shape_fn((c, 1), |(i, _)| 0.3 + 0.7 * i as f64));
        let y = t.matmul(x, w).unwrap();
        let ones = t.constant(Array2::from_shape_fn((1, r), |(_, j)| 1.0 + 0.5 * j as f64));
        t.matmul(ones, y).unwrap()
    }

    #[test]
    fn layer_norm_gradient() {
        let s = store(vec![
            ("x", array![[0.3, -1.2, 2.0, 0.5], [1.0, 0.1, -0.4, 0.9]]),
            ("g", array![[1.1, 0.9, 1.3, 0.7]]),
            ("b", array![[0.1, -0.2, 0.0, 0.3]]),
        ]);
        let build = |t: &mut Tape<f64>| {
            let x = t.param(ParamId(0));
            let g = t.param(ParamId(1));
            let b = t.param(ParamId(2));
            let y = t.layer_norm(x, g, b).unwrap();
            let y = t.tanh(y);
            weighted_sum(t, y)
        };
        check(&s, &|s| eval(s, &build), &build);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let s = store(vec![("x", array![[1.0, 2.0, 3.0, 6.0]])]);
        let mut t = Tape::new(&s);
        let x = t.param(ParamId(0));
        let g = t.constant(Array2::ones((1, 4)));
        let b = t.constant(Array2::zeros((1, 4)));
        let y = t.layer_norm(x, g, b).unwrap();
        let v = t.value(y);
        assert!(v.sum().abs() < 1e-12);
        assert!((v.mapv(|x| x * x).sum() / 4.0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_gradient_wrt_query_input() {
        let x = array![[0.2, -0.5, 0.7, 0.1], [0.9, 0.3, -0.2, 0.4], [-0.6, 0.8, 0.5, -0.3]];
        let s = store(vec![("x", x)]);
        let mask = array![[0.0, 0.0, 0.0], [-1e9, 0.0, 0.0], [-1e9, -1e9, 0.0]];
        let build = |t: &mut Tape<f64>| {
            let x = t.param(ParamId(0));
            let wk = t.constant(Array2::from_shape_fn((4, 4), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin()));
            let k = t.matmul(x, wk).unwrap();
            let v = t.gelu(x);
            let y = t.masked_attention(x, k, v, &mask, 2).unwrap();
            weighted_sum(t, y)
        };
        check(&s, &|s| eval(s, &build), &build);
    }

    #[test]
    fn softmax_select_and_losses_gradients() {
        let s = store(vec![("x", array![[0.4, -1.0, 2.0, 0.3]])]);
        let build = |t: &mut Tape<f64>| {
            let x = t.param(ParamId(0));
            let sel = t.select_softmax(x, &[2, 0]).unwrap();
            let sm = t.softmax(x, 0.7);
            let ce = t.cross_entropy(sm, 1).unwrap();
            let sg = t.sigmoid(x);
            let bce = t.bce(sg, array![[1.0, 0.0, 1.0, 0.0]]).unwrap();
            let w = weighted_sum(t, sel);
            t.sum(&[ce, bce, w]).unwrap()
        };
        check(&s, &|s| eval(s, &build), &build);
    }

    #[test]
    fn structural_ops_gradients() {
        let s = store(vec![("x", array![[0.4, -1.0], [2.0, 0.3], [0.5, 0.25]])]);
        let build = |t: &mut Tape<f64>| {
            let x = t.param(ParamId(0));
            let a = t.slice_rows(x, 1, 2).unwrap();
            let b = t.gather_rows(x, &[2, 2, 0]).unwrap();
            let m = t.mean_rows(x);
            let c = t.concat_rows(&[a, b, m]).unwrap();
            let d = t.concat_cols(&[c, c]).unwrap();
            let d = t.scale(d, 1.5);
            let e = t.gelu(d);
            weighted_sum(t, e)
        };
        check(&s, &|s| eval(s, &build), &build);
    }

    #[test]
    fn clamped_probability_has_zero_gradient() {
        let s = store(vec![("p", array![[1.0]])]);
        let mut t = Tape::new(&s);
        let p = t.param(ParamId(0));
        let l = t.bce(p, array![[1.0]]).unwrap();
        assert!((t.scalar(l) - (-(1.0 - PROB_CLAMP).ln())).abs() < 1e-15);
        let g = t.backward_scalar(l);
        assert_eq!(g.get(ParamId(0)).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn constants_do_not_produce_param_grads() {
        let s = store(vec![("w", array![[1.0, 2.0], [3.0, 4.0]])]);
        let mut t = Tape::new(&s);
        let x = t.constant(array![[1.0, 1.0]]);
        let w = t.param(ParamId(0));
        let y = t.matmul(x, w).unwrap();
        let z = weighted_sum(&mut t, y);
        let g = t.backward_scalar(z);
        assert_eq!(g.touched(), vec![ParamId(0)]);
    }

    #[test]
    fn shape_errors() {
        let s = store(vec![("w", Array2::zeros((2, 3)))]);
        let mut t = Tape::new(&s);
        let w = t.param(ParamId(0));
        assert!(t.matmul(w, w).is_err());
        assert!(t.slice_rows(w, 1, 2).is_err());
        assert!(t.cross_entropy(w, 0).is_err());
    }
}

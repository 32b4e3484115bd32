//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] simply walks it in reverse,
//! visiting each node once. The tape is consumed by `backward`; intermediate
//! buffers are dropped with it.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numkit::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// `sqrt(2 / pi)`, the scale inside the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// `gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Elementwise operations exposed on plain tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Scale(f64),
    Gelu,
    Relu,
}

/// Applies an elementwise op. Binary ops take two operands of equal shape,
/// unary ops exactly one.
pub fn elementwise(op: Elementwise, args: &[&Tensor]) -> Result<Tensor> {
    match (op, args) {
        (Elementwise::Add, [a, b]) => a.add(b),
        (Elementwise::Sub, [a, b]) => a.sub(b),
        (Elementwise::Scale(s), [a]) => Ok(a.scale(s)),
        (Elementwise::Gelu, [a]) => Ok(a.map(gelu)),
        (Elementwise::Relu, [a]) => Ok(a.map(relu)),
        _ => Err(Error::Usage(format!(
            "{op:?} called with {} operand(s)",
            args.len()
        ))),
    }
}

/// Row softmax probabilities and the mean negative log-likelihood of `labels`.
fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if !logits.is_matrix() {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), &[]));
    }
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut probs = Vec::with_capacity(n * c);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let (arg, max) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) });
        // log-sum-exp as max + ln(1 + sum of the other exponentials) keeps
        // precision when one logit dominates.
        let mut rest = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if j != arg {
                rest += (v - max).exp();
            }
        }
        let denom = 1.0 + rest;
        for &v in row {
            probs.push((v - max).exp() / denom);
        }
        total += (max - row[y]) + rest.ln_1p();
    }
    Ok((total / n as f64, Tensor::from_parts(vec![n, c], probs)))
}

/// Mean negative log softmax probability of the true class.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    softmax_ce_forward(logits, labels).map(|(loss, _)| loss)
}

struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

fn check_row_vector(op: &'static str, x: &Tensor, v: &Tensor) -> Result<()> {
    let ok = v.len() == x.cols() && (v.shape().len() == 1 || (v.rows() == 1 && v.is_matrix()));
    if !x.is_matrix() || !ok {
        return Err(Error::shape(op, x.shape(), v.shape()));
    }
    Ok(())
}

fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("layer_norm eps must be > 0, got {eps}")));
    }
    check_row_vector("layer_norm", x, gain)?;
    check_row_vector("layer_norm", x, bias)?;
    let (n, d) = (x.rows(), x.cols());
    let mut xhat = Vec::with_capacity(n * d);
    let mut out = Vec::with_capacity(n * d);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().fold(0.0, |a, &v| a + v) / d as f64;
        let var = row.iter().fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * inv;
            xhat.push(h);
            out.push(h * gain.data()[j] + bias.data()[j]);
        }
    }
    Ok((
        Tensor::from_parts(vec![n, d], out),
        LayerNormCache {
            xhat: Tensor::from_parts(vec![n, d], xhat),
            inv_std,
        },
    ))
}

/// Per-row normalization to zero mean and unit variance, then `gain * x + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_forward(x, gain, bias, eps).map(|(y, _)| y)
}

/// Identifies a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf { trainable: bool },
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Gelu(usize),
    AddRow(usize, usize),
    TileAdd(usize, usize),
    LayerNorm { x: usize, gain: usize, bias: usize, cache: LayerNormCache },
    Transpose(usize),
    RowSoftmax(usize),
    SliceRows { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    Reshape(usize),
    GroupMean { x: usize, group: usize },
    Sum(usize),
    SumSquares(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor },
    SquaredError { pred: usize, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use record of a forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("value was not recorded on this tape".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = match op {
            Op::Leaf { trainable } => trainable,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records a trainable leaf whose gradient `backward` reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: true }, &[])
    }

    /// Records a frozen leaf; its reported gradient is always exactly zero.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: false }, &[])
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = self.val(ia).matmul(self.val(ib))?;
        Ok(self.push(out, Op::MatMul(ia, ib), &[ia, ib]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = self.val(ia).add(self.val(ib))?;
        Ok(self.push(out, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = self.val(ia).sub(self.val(ib))?;
        Ok(self.push(out, Op::Sub(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia).scale(factor);
        Ok(self.push(out, Op::Scale(ia, factor), &[ia]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia).map(relu);
        Ok(self.push(out, Op::Relu(ia), &[ia]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia).map(gelu);
        Ok(self.push(out, Op::Gelu(ia), &[ia]))
    }

    /// Dispatches an [`Elementwise`] op onto the tape.
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        match (op, args) {
            (Elementwise::Add, &[a, b]) => self.add(a, b),
            (Elementwise::Sub, &[a, b]) => self.sub(a, b),
            (Elementwise::Scale(s), &[a]) => self.scale(a, s),
            (Elementwise::Gelu, &[a]) => self.gelu(a),
            (Elementwise::Relu, &[a]) => self.relu(a),
            _ => Err(Error::Usage(format!(
                "{op:?} called with {} operand(s)",
                args.len()
            ))),
        }
    }

    /// Adds a length-`d` row vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.index(x)?, self.index(bias)?);
        let (xv, bv) = (self.val(ix), self.val(ib));
        check_row_vector("add_row", xv, bv)?;
        let d = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::AddRow(ix, ib), &[ix, ib]))
    }

    /// Adds a `p×d` block to each consecutive group of `p` rows of an `(n·p)×d` matrix.
    pub fn tile_add(&mut self, x: Var, block: Var) -> Result<Var> {
        let (ix, ib) = (self.index(x)?, self.index(block)?);
        let (xv, bv) = (self.val(ix), self.val(ib));
        if !xv.is_matrix() || !bv.is_matrix() || xv.cols() != bv.cols() || xv.rows() % bv.rows() != 0 {
            return Err(Error::shape("tile_add", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (o, &b) in out.iter_mut().zip(bv.data().iter().cycle()) {
            *o += b;
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::TileAdd(ix, ib), &[ix, ib]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.index(x)?, self.index(gain)?, self.index(bias)?);
        let (out, cache) = layer_norm_forward(self.val(ix), self.val(ig), self.val(ib), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                cache,
            },
            &[ix, ig, ib],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia).transpose()?;
        Ok(self.push(out, Op::Transpose(ia), &[ia]))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let x = self.val(ia);
        if !x.is_matrix() {
            return Err(Error::shape("row_softmax", x.shape(), &[]));
        }
        let c = x.cols();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let start = out.len();
            let mut denom = 0.0;
            for &v in row {
                let e = (v - max).exp();
                denom += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= denom;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(out, Op::RowSoftmax(ia), &[ia]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { x: ia, start }, &[ia]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows needs at least one part".into()));
        }
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>>>()?;
        let cols = self.val(idx[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = self.val(i);
            if !v.is_matrix() || v.cols() != cols {
                return Err(Error::shape("concat_rows", self.val(idx[0]).shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.push(out, Op::ConcatRows(idx.clone()), &idx))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(ia), &[ia]))
    }

    /// Averages each consecutive group of `group` rows into one row.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let x = self.val(ia);
        if !x.is_matrix() || group == 0 || !x.rows().is_multiple_of(group) {
            return Err(Error::shape("group_mean", x.shape(), &[group]));
        }
        let (n, d) = (x.rows() / group, x.cols());
        let mut out = vec![0.0; n * d];
        for r in 0..x.rows() {
            let dst = &mut out[(r / group) * d..(r / group + 1) * d];
            for (o, &v) in dst.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::from_parts(vec![n, d], out);
        Ok(self.push(out, Op::GroupMean { x: ia, group }, &[ia]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = Tensor::scalar(self.val(ia).sum());
        Ok(self.push(out, Op::Sum(ia), &[ia]))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = Tensor::scalar(self.val(ia).sum_squares());
        Ok(self.push(out, Op::SumSquares(ia), &[ia]))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.index(logits)?;
        let (loss, probs) = softmax_ce_forward(self.val(il), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            &[il],
        ))
    }

    /// `(1/n) Σ_i ½‖pred_i − target_i‖²` over the rows of an `n×c` prediction.
    pub fn squared_error(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let ip = self.index(pred)?;
        let p = self.val(ip);
        if p.shape() != target.shape() {
            return Err(Error::shape("squared_error", p.shape(), target.shape()));
        }
        let loss = 0.5 * p.sub(&target)?.sum_squares() / p.rows() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::SquaredError { pred: ip, target }, &[ip]))
    }

    /// Propagates adjoints from the scalar `loss` back to every leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let il = self.index(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[il] = Some(Tensor::filled(self.nodes[il].value.shape(), 1.0));

        let mut leaves = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            if let Op::Leaf { trainable } = self.nodes[i].op {
                leaves.push((i, trainable));
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }

        let mut grads = Vec::with_capacity(leaves.len());
        for (i, trainable) in leaves.into_iter().rev() {
            let g = if trainable {
                Some(adj[i].take().unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape())))
            } else {
                None
            };
            grads.push((i, g, self.nodes[i].value.shape().to_vec()));
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        match &nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.matmul_nt(&nodes[*b].value)?)?;
                }
                if wants(*b) {
                    accumulate(adj, *b, nodes[*a].value.matmul_tn(g)?)?;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(adj, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(adj, *b, g.scale(-1.0))?;
                }
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.scale(*s))?,
            Op::Relu(a) => {
                let x = &nodes[*a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                accumulate(adj, *a, Tensor::from_parts(x.shape().to_vec(), data))?;
            }
            Op::Gelu(a) => {
                let x = &nodes[*a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &v)| d * gelu_derivative(v))
                    .collect();
                accumulate(adj, *a, Tensor::from_parts(x.shape().to_vec(), data))?;
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    accumulate(adj, *x, g.clone())?;
                }
                if wants(*b) {
                    let bshape = nodes[*b].value.shape().to_vec();
                    accumulate(adj, *b, column_sums(g).reshape(&bshape)?)?;
                }
            }
            Op::TileAdd(x, b) => {
                if wants(*x) {
                    accumulate(adj, *x, g.clone())?;
                }
                if wants(*b) {
                    let bv = &nodes[*b].value;
                    let mut out = vec![0.0; bv.len()];
                    for chunk in g.data().chunks(bv.len()) {
                        for (o, &v) in out.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(adj, *b, Tensor::from_parts(bv.shape().to_vec(), out))?;
                }
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let (n, d) = (g.rows(), g.cols());
                let gv = &nodes[*gain].value;
                if wants(*gain) {
                    let dg = column_sums(&g.mul(&cache.xhat)?);
                    accumulate(adj, *gain, dg.reshape(gv.shape())?)?;
                }
                if wants(*bias) {
                    let bshape = nodes[*bias].value.shape().to_vec();
                    accumulate(adj, *bias, column_sums(g).reshape(&bshape)?)?;
                }
                if wants(*x) {
                    let mut dx = Vec::with_capacity(n * d);
                    for r in 0..n {
                        let grow = g.row(r);
                        let hrow = cache.xhat.row(r);
                        let dh: Vec<f64> = grow.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let sum_dh = dh.iter().fold(0.0, |a, &v| a + v);
                        let sum_dh_h = dh.iter().zip(hrow).fold(0.0, |a, (p, q)| a + p * q);
                        let k = cache.inv_std[r] / d as f64;
                        for j in 0..d {
                            dx.push(k * (d as f64 * dh[j] - sum_dh - hrow[j] * sum_dh_h));
                        }
                    }
                    accumulate(adj, *x, Tensor::from_parts(vec![n, d], dx))?;
                }
            }
            Op::Transpose(a) => accumulate(adj, *a, g.transpose()?)?,
            Op::RowSoftmax(a) => {
                let y = &nodes[i].value;
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot = yr.iter().zip(gr).fold(0.0, |acc, (p, q)| acc + p * q);
                    dx.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                accumulate(adj, *a, Tensor::from_parts(y.shape().to_vec(), dx))?;
            }
            Op::SliceRows { x, start } => {
                let xv = &nodes[*x].value;
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(adj, *x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = nodes[p].value.rows();
                    if wants(p) {
                        accumulate(adj, p, g.slice_rows(offset, rows)?)?;
                    }
                    offset += rows;
                }
            }
            Op::Reshape(a) => accumulate(adj, *a, g.reshape(nodes[*a].value.shape())?)?,
            Op::GroupMean { x, group } => {
                let xv = &nodes[*x].value;
                let d = xv.cols();
                let inv = 1.0 / *group as f64;
                let mut dx = Vec::with_capacity(xv.len());
                for r in 0..xv.rows() {
                    dx.extend(g.row(r / group).iter().map(|v| v * inv));
                }
                accumulate(adj, *x, Tensor::from_parts(vec![xv.rows(), d], dx))?;
            }
            Op::Sum(a) => {
                let s = g.item();
                accumulate(adj, *a, Tensor::filled(nodes[*a].value.shape(), s))?;
            }
            Op::SumSquares(a) => {
                let s = g.item();
                accumulate(adj, *a, nodes[*a].value.scale(2.0 * s))?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.item() / labels.len() as f64;
                let c = probs.cols();
                let mut d = probs.data().to_vec();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * c + y] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                accumulate(adj, *logits, Tensor::from_parts(probs.shape().to_vec(), d))?;
            }
            Op::SquaredError { pred, target } => {
                let p = &nodes[*pred].value;
                let scale = g.item() / p.rows() as f64;
                accumulate(adj, *pred, p.sub(target)?.scale(scale))?;
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for row in g.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![c], out)
}

fn accumulate(adj: &mut [Option<Tensor>], i: usize, g: Tensor) -> Result<()> {
    match &mut adj[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients of a loss with respect to every leaf of the tape that produced it.
pub struct Gradients {
    tape: u64,
    grads: Vec<(usize, Option<Tensor>, Vec<usize>)>,
}

impl Gradients {
    /// Gradient for a leaf. Frozen leaves yield an exact zero tensor.
    pub fn get(&self, v: Var) -> Result<Cow<'_, Tensor>> {
        if v.tape != self.tape {
            return Err(Error::Usage("value was not recorded on this tape".into()));
        }
        let pos = self
            .grads
            .binary_search_by_key(&v.idx, |(i, _, _)| *i)
            .map_err(|_| Error::Usage("gradients exist only for leaf values".into()))?;
        let (_, grad, shape) = &self.grads[pos];
        Ok(match grad {
            Some(g) => Cow::Borrowed(g),
            None => Cow::Owned(Tensor::zeros(shape)),
        })
    }

    /// Moves the gradient of a trainable leaf out, or `None` for frozen leaves.
    pub fn take(&mut self, v: Var) -> Result<Option<Tensor>> {
        if v.tape != self.tape {
            return Err(Error::Usage("value was not recorded on this tape".into()));
        }
        let pos = self
            .grads
            .binary_search_by_key(&v.idx, |(i, _, _)| *i)
            .map_err(|_| Error::Usage("gradients exist only for leaf values".into()))?;
        Ok(self.grads[pos].1.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_examples() {
        let a = Tensor::vector(&[1.0, 2.0]).unwrap();
        let b = Tensor::vector(&[3.0, 4.0]).unwrap();
        assert_eq!(elementwise(Elementwise::Add, &[&a, &b]).unwrap().data(), &[4.0, 6.0]);
        let c = Tensor::vector(&[-1.0, 2.0]).unwrap();
        assert_eq!(elementwise(Elementwise::Relu, &[&c]).unwrap().data(), &[0.0, 2.0]);
        assert!(elementwise(Elementwise::Add, &[&a]).is_err());
        let d = Tensor::vector(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            elementwise(Elementwise::Sub, &[&a, &d]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        let h = 1e-5;
        let x = 0.5;
        let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        let rel = (fd - gelu_derivative(x)).abs() / gelu_derivative(x).abs();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let logits = Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_dominant_logit_keeps_precision() {
        // ln(1 + e^-20), evaluated by series: e^-20 - e^-40/2.
        let e20 = (-20f64).exp();
        let reference = e20 - e20 * e20 / 2.0;
        let logits = Tensor::from_rows(&[[10.0, -10.0]]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(((loss - reference) / reference).abs() < 1e-12, "{loss} vs {reference}");
        assert!((loss - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_rejects_label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::vector(&[1.0, 1.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[3]);
        let constant = Tensor::from_rows(&[[2.5, 2.5, 2.5]]).unwrap();
        let y = layer_norm(&constant, &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let one2 = Tensor::vector(&[1.0, 1.0]).unwrap();
        let zero2 = Tensor::zeros(&[2]);
        let x = Tensor::from_rows(&[[1.0, 3.0]]).unwrap();
        let y = layer_norm(&x, &one2, &zero2, 1e-14).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
        assert!(layer_norm(&x, &one2, &zero2, 0.0).is_err());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn linear_regression_gradient_matches_closed_form() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.25]]).unwrap();
        let xv = Tensor::from_rows(&[[0.3], [-0.7]]).unwrap();
        let b = Tensor::from_rows(&[[1.0], [0.0], [2.0]]).unwrap();
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let x = tape.param(xv.clone());
        let bv = tape.constant(b.clone());
        let ax = tape.matmul(av, x).unwrap();
        let r = tape.sub(ax, bv).unwrap();
        let loss = tape.sum_squares(r).unwrap();
        let g = tape.backward(loss).unwrap();
        let residual = a.matmul(&xv).unwrap().sub(&b).unwrap();
        let expected = a.matmul_tn(&residual).unwrap().scale(2.0);
        assert!(g.get(x).unwrap().max_abs_diff(&expected).unwrap() < 1e-10);
        assert!(g.get(av).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_or_non_scalar_values() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x1 = t1.param(Tensor::zeros(&[1]));
        let _ = t2.param(Tensor::zeros(&[1]));
        assert!(matches!(t2.backward(x1), Err(Error::Usage(_))));

        let mut t3 = Tape::new();
        let m = t3.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(t3.backward(m), Err(Error::Usage(_))));
    }

    #[test]
    fn gradients_only_for_leaves() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[1]));
        let y = tape.scale(x, 2.0).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_err());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }
}

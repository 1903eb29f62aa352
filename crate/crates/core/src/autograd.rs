//! Dense row-major matrices and a small reverse-mode tape.
//!
//! Every node holds its forward value; `backward` walks the tape once in
//! reverse. Parameters are leaves tagged with their offset in a flat
//! parameter vector so gradients can be scattered back into one buffer.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match buffer");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = beta·C + op(A)·op(B)` with `op(A)` of shape `m × k` and `op(B)` of
/// shape `k × n`. `a_t`/`b_t` mean the stored buffer is the transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut c = Tensor::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, false, &b.data, false, &mut c.data, 0.0);
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Kernelized attention with feature map `elu(x) + 1`; cost linear in
    /// the number of keys.
    Linear,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum AttnCache {
    Linear {
        // per head: φ(Q) (nq×dh), φ(K) (nk×dh), KᵀV (dh×dh), Kᵀ1 (dh), denominators (nq)
        heads: Vec<(Tensor, Tensor, Tensor, Vec<f64>, Vec<f64>)>,
    },
    Softmax {
        probs: Vec<Tensor>,
    },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulConst(Var, Tensor),
    AddConst(Var),
    Scale(Var, f64),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    RowSum(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, cache: AttnCache },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => op_inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A trainable leaf whose gradient is scattered to `offset..offset+len`
    /// of the flat parameter vector.
    pub fn param(&mut self, t: Tensor, offset: usize) -> Var {
        self.push(t, Op::Param(offset))
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = matmul(self.value(a), self.value(b));
        self.push(t, Op::MatMul(a, b))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!((b.rows, b.cols), (1, x.cols), "bias shape mismatch");
        let mut t = x.clone();
        for row in t.data.chunks_exact_mut(x.cols) {
            for (v, bv) in row.iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
        self.push(t, Op::AddRow(a, bias))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Tensor { rows: x.rows, cols: x.cols, data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |p, q| p + q);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |p, q| p - q);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |p, q| p * q);
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |p, q| p / q);
        self.push(t, Op::Div(a, b))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), c.shape(), "mul_const shape mismatch");
        let t = Tensor { rows: x.rows, cols: x.cols, data: x.data.iter().zip(&c.data).map(|(p, q)| p * q).collect() };
        self.push(t, Op::MulConst(a, c))
    }

    /// Elementwise sum with a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), c.shape(), "add_const shape mismatch");
        let t = Tensor { rows: x.rows, cols: x.cols, data: x.data.iter().zip(&c.data).map(|(p, q)| p + q).collect() };
        self.push(t, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(t, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * v);
        self.push(t, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let c = xv.cols;
        assert_eq!((g.cols, b.cols), (c, c), "layer norm affine shape mismatch");
        let mut xhat = Tensor::zeros(xv.rows, c);
        let mut out = Tensor::zeros(xv.rows, c);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.data[r * c + j] = h;
                out.data[r * c + j] = h * g.data[j] + b.data[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut t = Tensor::zeros(rows, cols);
        let mut start = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat row mismatch");
            for r in 0..rows {
                t.data[r * cols + start..r * cols + start + v.cols].copy_from_slice(v.row(r));
            }
            start += v.cols;
        }
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "column slice out of range");
        let mut t = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            t.data[r * len..(r + 1) * len].copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(t, Op::SliceCols(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor { rows: x.rows, cols: 1, data: x.data.chunks_exact(x.cols.max(1)).map(|r| r.iter().sum()).collect() };
        let t = if x.cols == 0 { Tensor::zeros(x.rows, 1) } else { t };
        self.push(t, Op::RowSum(a))
    }

    /// Multi-head attention on already projected queries (`nq × n`), keys
    /// and values (`nk × n`). Heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, kind: AttentionKind) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.cols, kv.cols, "query/key width mismatch");
        assert_eq!(kv.rows, vv.rows, "key/value count mismatch");
        assert!(heads > 0 && qv.cols % heads == 0 && vv.cols % heads == 0, "width not divisible by heads");
        let (out, cache) = match kind {
            AttentionKind::Linear => linear_attention_forward(qv, kv, vv, heads),
            AttentionKind::Softmax => softmax_attention_forward(qv, kv, vv, heads),
        };
        self.push(out, Op::Attention { q, k, v, heads, cache })
    }

    /// Reverse pass from the scalar `root`. Returns the gradient of every
    /// node that depends on a parameter.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).data.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.rows, av.cols);
                    gemm(av.rows, g.cols, av.cols, &g.data, false, &bv.data, true, &mut da.data, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.rows, bv.cols);
                    gemm(bv.rows, av.rows, bv.cols, &av.data, true, &g.data, false, &mut db.data, 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*bias) {
                    let mut db = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks_exact(g.cols) {
                        for (d, v) in db.data.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, elementwise(g, bv, |g, y| g * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, elementwise(g, av, |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    self.accumulate(grads, *a, elementwise(g, bv, |g, y| g / y));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = elementwise(g, out, |g, o| -g * o);
                    self.accumulate(grads, *b, elementwise(&t, bv, |t, y| t / y));
                }
            }
            Op::MulConst(a, c) => self.accumulate(grads, *a, elementwise(g, c, |g, c| g * c)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, elementwise(g, x, |g, x| g * gelu_grad(x)));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, elementwise(g, x, |g, x| g * sigmoid(x)));
            }
            Op::Exp(a) => self.accumulate(grads, *a, elementwise(g, out, |g, o| g * o)),
            Op::Log(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, elementwise(g, x, |g, x| g / x));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, elementwise(g, x, |g, x| 2.0 * g * x));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, elementwise(g, x, |g, x| if x < *lo || x > *hi { 0.0 } else { g }));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = xhat.cols;
                let gam = self.value(*gamma);
                if self.wants(*gamma) {
                    let mut dg = Tensor::zeros(1, c);
                    for (grow, hrow) in g.data.chunks_exact(c).zip(xhat.data.chunks_exact(c)) {
                        for j in 0..c {
                            dg.data[j] += grow[j] * hrow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = Tensor::zeros(1, c);
                    for grow in g.data.chunks_exact(c) {
                        for j in 0..c {
                            db.data[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *beta, db);
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xhat.rows, c);
                    let mut dh = vec![0.0; c];
                    for r in 0..xhat.rows {
                        let grow = g.row(r);
                        let hrow = xhat.row(r);
                        for j in 0..c {
                            dh[j] = grow[j] * gam.data[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx.data[r * c + j] = inv_std[r] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    if self.wants(p) {
                        let mut t = Tensor::zeros(g.rows, w);
                        for r in 0..g.rows {
                            t.data[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[start..start + w]);
                        }
                        self.accumulate(grads, p, t);
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut t = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    t.data[r * x.cols + start..r * x.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, t);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(x.rows, x.cols, g.item()));
            }
            Op::RowSum(a) => {
                let x = self.value(*a);
                let mut t = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    t.data[r * x.cols..(r + 1) * x.cols].iter_mut().for_each(|v| *v = g.data[r]);
                }
                self.accumulate(grads, *a, t);
            }
            Op::Attention { q, k, v, heads, cache } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) = match cache {
                    AttnCache::Linear { heads: hc } => linear_attention_backward(qv, kv, vv, *heads, out, g, hc),
                    AttnCache::Softmax { probs } => softmax_attention_backward(qv, kv, vv, *heads, g, probs),
                };
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
        }
    }

    /// Sums the gradients of all parameter leaves into a flat buffer.
    pub fn param_grads(&self, grads: &Gradients, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(offset), Some(g)) = (&node.op, g) {
                for (o, v) in out[*offset..*offset + g.data.len()].iter_mut().zip(&g.data) {
                    *o += v;
                }
            }
        }
        out
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            vec![*a, *b]
        }
        Op::MulConst(a, _)
        | Op::AddConst(a)
        | Op::Scale(a, _)
        | Op::Gelu(a)
        | Op::Softplus(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Square(a)
        | Op::Clamp(a, _, _)
        | Op::SliceCols(a, _)
        | Op::Sum(a)
        | Op::RowSum(a) => vec![*a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::ConcatCols(parts) => parts.clone(),
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor { rows: a.rows, cols: a.cols, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn elu1(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

fn elu1_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Columns `h*w..(h+1)*w` of `t` as a contiguous matrix.
fn head_slice(t: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(t.rows, w);
    for r in 0..t.rows {
        out.data[r * w..(r + 1) * w].copy_from_slice(&t.row(r)[h * w..(h + 1) * w]);
    }
    out
}

fn head_write(dst: &mut Tensor, src: &Tensor, h: usize) {
    let w = src.cols;
    for r in 0..src.rows {
        dst.data[r * dst.cols + h * w..r * dst.cols + (h + 1) * w].copy_from_slice(src.row(r));
    }
}

fn linear_attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, AttnCache) {
    let (dq, dv) = (q.cols / heads, v.cols / heads);
    let mut out = Tensor::zeros(q.rows, v.cols);
    let mut cache = Vec::with_capacity(heads);
    for h in 0..heads {
        let fq = head_slice(q, h, dq).map(elu1);
        let fk = head_slice(k, h, dq).map(elu1);
        let vh = head_slice(v, h, dv);
        let mut s = Tensor::zeros(dq, dv);
        gemm(dq, k.rows, dv, &fk.data, true, &vh.data, false, &mut s.data, 0.0);
        let mut z = vec![0.0; dq];
        for row in fk.data.chunks_exact(dq) {
            for (a, b) in z.iter_mut().zip(row) {
                *a += b;
            }
        }
        let mut num = Tensor::zeros(q.rows, dv);
        gemm(q.rows, dq, dv, &fq.data, false, &s.data, false, &mut num.data, 0.0);
        let den: Vec<f64> = fq.data.chunks_exact(dq).map(|r| r.iter().zip(&z).map(|(a, b)| a * b).sum()).collect();
        for (r, &dn) in den.iter().enumerate() {
            num.data[r * dv..(r + 1) * dv].iter_mut().for_each(|x| *x /= dn);
        }
        head_write(&mut out, &num, h);
        cache.push((fq, fk, s, z, den));
    }
    (out, AttnCache::Linear { heads: cache })
}

type Triple = (Tensor, Tensor, Tensor);

fn linear_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    out: &Tensor,
    g: &Tensor,
    cache: &[(Tensor, Tensor, Tensor, Vec<f64>, Vec<f64>)],
) -> Triple {
    let (dqw, dvw) = (q.cols / heads, v.cols / heads);
    let mut gq = Tensor::zeros(q.rows, q.cols);
    let mut gk = Tensor::zeros(k.rows, k.cols);
    let mut gv = Tensor::zeros(v.rows, v.cols);
    for (h, (fq, fk, s, z, den)) in cache.iter().enumerate() {
        let go = head_slice(g, h, dvw);
        let oh = head_slice(out, h, dvw);
        let vh = head_slice(v, h, dvw);
        // out = num / den
        let mut dnum = go.clone();
        let mut dden = vec![0.0; q.rows];
        for r in 0..q.rows {
            let row = &mut dnum.data[r * dvw..(r + 1) * dvw];
            dden[r] = -go.row(r).iter().zip(oh.row(r)).map(|(a, b)| a * b).sum::<f64>() / den[r];
            row.iter_mut().for_each(|x| *x /= den[r]);
        }
        // φ(Q) gradient: dnum Sᵀ + dden zᵀ
        let mut dfq = Tensor::zeros(q.rows, dqw);
        gemm(q.rows, dvw, dqw, &dnum.data, false, &s.data, true, &mut dfq.data, 0.0);
        for r in 0..q.rows {
            for j in 0..dqw {
                dfq.data[r * dqw + j] += dden[r] * z[j];
            }
        }
        let mut ds = Tensor::zeros(dqw, dvw);
        gemm(dqw, q.rows, dvw, &fq.data, true, &dnum.data, false, &mut ds.data, 0.0);
        let mut dz = vec![0.0; dqw];
        for r in 0..q.rows {
            for j in 0..dqw {
                dz[j] += dden[r] * fq.data[r * dqw + j];
            }
        }
        // S = φ(K)ᵀ V, z = φ(K)ᵀ 1
        let mut dfk = Tensor::zeros(k.rows, dqw);
        gemm(k.rows, dvw, dqw, &vh.data, false, &ds.data, true, &mut dfk.data, 0.0);
        for r in 0..k.rows {
            for j in 0..dqw {
                dfk.data[r * dqw + j] += dz[j];
            }
        }
        let mut dvh = Tensor::zeros(k.rows, dvw);
        gemm(k.rows, dqw, dvw, &fk.data, false, &ds.data, false, &mut dvh.data, 0.0);

        let qh = head_slice(q, h, dqw);
        let kh = head_slice(k, h, dqw);
        head_write(&mut gq, &elementwise(&dfq, &qh, |d, x| d * elu1_grad(x)), h);
        head_write(&mut gk, &elementwise(&dfk, &kh, |d, x| d * elu1_grad(x)), h);
        head_write(&mut gv, &dvh, h);
    }
    (gq, gk, gv)
}

fn softmax_attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, AttnCache) {
    let (dq, dv) = (q.cols / heads, v.cols / heads);
    let scale = 1.0 / (dq as f64).sqrt();
    let mut out = Tensor::zeros(q.rows, v.cols);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(q, h, dq);
        let kh = head_slice(k, h, dq);
        let vh = head_slice(v, h, dv);
        let mut p = Tensor::zeros(q.rows, k.rows);
        gemm(q.rows, dq, k.rows, &qh.data, false, &kh.data, true, &mut p.data, 0.0);
        for row in p.data.chunks_exact_mut(k.rows.max(1)) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
            let mut tot = 0.0;
            for x in row.iter_mut() {
                *x = (*x * scale - m).exp();
                tot += *x;
            }
            row.iter_mut().for_each(|x| *x /= tot);
        }
        let mut oh = Tensor::zeros(q.rows, dv);
        gemm(q.rows, k.rows, dv, &p.data, false, &vh.data, false, &mut oh.data, 0.0);
        head_write(&mut out, &oh, h);
        probs.push(p);
    }
    (out, AttnCache::Softmax { probs })
}

fn softmax_attention_backward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, g: &Tensor, probs: &[Tensor]) -> Triple {
    let (dq, dv) = (q.cols / heads, v.cols / heads);
    let scale = 1.0 / (dq as f64).sqrt();
    let mut gq = Tensor::zeros(q.rows, q.cols);
    let mut gk = Tensor::zeros(k.rows, k.cols);
    let mut gv = Tensor::zeros(v.rows, v.cols);
    for (h, p) in probs.iter().enumerate() {
        let go = head_slice(g, h, dv);
        let qh = head_slice(q, h, dq);
        let kh = head_slice(k, h, dq);
        let vh = head_slice(v, h, dv);
        let mut dvh = Tensor::zeros(k.rows, dv);
        gemm(k.rows, q.rows, dv, &p.data, true, &go.data, false, &mut dvh.data, 0.0);
        let mut dp = Tensor::zeros(q.rows, k.rows);
        gemm(q.rows, dv, k.rows, &go.data, false, &vh.data, true, &mut dp.data, 0.0);
        for r in 0..q.rows {
            let prow = p.row(r);
            let drow = &mut dp.data[r * k.rows..(r + 1) * k.rows];
            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for (d, &pp) in drow.iter_mut().zip(prow) {
                *d = pp * (*d - dot) * scale;
            }
        }
        let mut dqh = Tensor::zeros(q.rows, dq);
        gemm(q.rows, k.rows, dq, &dp.data, false, &kh.data, false, &mut dqh.data, 0.0);
        let mut dkh = Tensor::zeros(k.rows, dq);
        gemm(k.rows, q.rows, dq, &dp.data, true, &qh.data, false, &mut dkh.data, 0.0);
        head_write(&mut gq, &dqh, h);
        head_write(&mut gk, &dkh, h);
        head_write(&mut gv, &dvh, h);
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = SeedTree::new(seed).rng();
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Builds a scalar loss from parameters laid out in `p`, then compares the
    /// tape gradient with central differences.
    fn check(shapes: &[(usize, usize)], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        let p0 = random(1, total, 42).data;
        let run = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let mut off = 0;
            let vars: Vec<Var> = shapes
                .iter()
                .map(|&(r, c)| {
                    let v = tape.param(Tensor::from_vec(r, c, p[off..off + r * c].to_vec()), off);
                    off += r * c;
                    v
                })
                .collect();
            let loss = build(&mut tape, &vars);
            let g = tape.backward(loss);
            (tape.value(loss).item(), tape.param_grads(&g, total))
        };
        let (_, grad) = run(&p0);
        let h = 1e-6;
        for i in 0..total {
            let mut pp = p0.clone();
            pp[i] += h;
            let mut pm = p0.clone();
            pm[i] -= h;
            let fd = (run(&pp).0 - run(&pm).0) / (2.0 * h);
            let err = (fd - grad[i]).abs() / (1e-6 + fd.abs().max(grad[i].abs()));
            assert!(err < 1e-5, "param {i}: fd {fd} vs tape {}", grad[i]);
        }
    }

    #[test]
    fn gemm_transposes() {
        let a = random(3, 4, 1);
        let b = random(4, 2, 2);
        let c = matmul(&a, &b);
        let mut naive = Tensor::zeros(3, 2);
        for i in 0..3 {
            for j in 0..2 {
                naive.data[i * 2 + j] = (0..4).map(|k| a.at(i, k) * b.at(k, j)).sum();
            }
        }
        for (x, y) in c.data.iter().zip(&naive.data) {
            assert!((x - y).abs() < 1e-14);
        }
        // Aᵀ stored as 4×3
        let mut at = Tensor::zeros(4, 3);
        for i in 0..3 {
            for k in 0..4 {
                at.data[k * 3 + i] = a.at(i, k);
            }
        }
        let mut c2 = Tensor::zeros(3, 2);
        gemm(3, 4, 2, &at.data, true, &b.data, false, &mut c2.data, 0.0);
        assert_eq!(c2, c);
    }

    #[test]
    fn elementwise_ops_gradients() {
        check(&[(2, 3), (2, 3), (1, 3)], |t, v| {
            let a = t.mul(v[0], v[1]);
            let b = t.add_row(a, v[2]);
            let c = t.gelu(b);
            let d = t.softplus(v[1]);
            let e = t.div(c, d);
            let f = t.exp(v[0]);
            let l = t.log(f);
            let s = t.sub(e, l);
            let q = t.square(s);
            let w = t.scale(q, 0.7);
            t.sum(w)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        check(&[(3, 2), (3, 1), (1, 3), (1, 3)], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]);
            let n = t.layer_norm(c, v[2], v[3]);
            let s = t.slice_cols(n, 1, 2);
            let r = t.row_sum(s);
            let k = t.clamp(r, -0.3, 10.0);
            let m = t.mul_const(k, Tensor::from_vec(3, 1, vec![1.0, -2.0, 0.5]));
            let sq = t.square(m);
            t.mean(sq)
        });
    }

    #[test]
    fn matmul_gradients() {
        check(&[(3, 4), (4, 2)], |t, v| {
            let c = t.matmul(v[0], v[1]);
            let s = t.square(c);
            t.sum(s)
        });
    }

    #[test]
    fn attention_gradients() {
        for kind in [AttentionKind::Linear, AttentionKind::Softmax] {
            check(&[(3, 4), (5, 4), (5, 4)], |t, v| {
                let a = t.attention(v[0], v[1], v[2], 2, kind);
                let w = t.mul_const(a, random(3, 4, 9));
                t.sum(w)
            });
        }
    }

    #[test]
    fn detached_values_carry_no_gradient() {
        let mut t = Tape::new();
        let p = t.param(Tensor::scalar(2.0), 0);
        let d = t.detach(p);
        let y = t.mul(p, d);
        let g = t.backward(y);
        assert_eq!(t.param_grads(&g, 1), vec![2.0]);
    }

    #[test]
    fn attention_is_key_permutation_invariant() {
        let q = random(2, 4, 3);
        let k = random(6, 4, 4);
        let v = random(6, 4, 5);
        let perm = [3, 0, 5, 1, 4, 2];
        let permute = |t: &Tensor| {
            let mut o = Tensor::zeros(t.rows, t.cols);
            for (i, &p) in perm.iter().enumerate() {
                o.data[i * t.cols..(i + 1) * t.cols].copy_from_slice(t.row(p));
            }
            o
        };
        for kind in [AttentionKind::Linear, AttentionKind::Softmax] {
            let mut t = Tape::new();
            let (qa, ka, va) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
            let a = t.attention(qa, ka, va, 2, kind);
            let (kb, vb) = (t.constant(permute(&k)), t.constant(permute(&v)));
            let b = t.attention(qa, kb, vb, 2, kind);
            for (x, y) in t.value(a).data.iter().zip(&t.value(b).data) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }
}

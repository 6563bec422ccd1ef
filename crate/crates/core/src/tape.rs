//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node list is a valid
//! topological order. Parameter leaves borrow their matrices from the caller; everything
//! else is owned by the tape. The tape also folds every discrete decision taken during the
//! forward pass (ReLU masks, weight clamps, rank assignments) into [`Tape::signature`], which
//! the gradient checker uses to tell apart smooth perturbations from ones that cross a kink.

use crate::numerics::{lse_unchecked, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Matrix),
    Borrowed(&'a Matrix),
}

impl Value<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    AddConst(usize),
    Mul(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    LseRows(usize),
    LseCols(usize),
    Broadcast(usize),
    GatherRows(usize, Vec<usize>),
    GatherCols(usize, Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    L2NormalizeRows(usize, Vec<f64>),
    /// Op with caller-supplied Jacobians, one `out_len × in_len` matrix per input.
    Custom(Vec<(usize, Matrix)>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    signature: u64,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-6;

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every discrete branch taken so far.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn record_discrete(&mut self, bits: impl IntoIterator<Item = u64>) {
        for b in bits {
            self.signature ^= b;
            self.signature = self.signature.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.nodes[v.0].value.get()
    }

    /// Differentiable leaf borrowing a parameter matrix.
    pub fn param(&mut self, m: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf. Gradients still accumulate on it, callers just usually ignore them.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_unchecked(self.value(b));
        debug_assert_eq!(self.value(a).cols(), self.value(b).rows());
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    /// `a + 1·r` where `r` is a row vector.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(r));
        assert_eq!((1, am.cols()), rm.shape(), "add_row shape");
        let mut v = am.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(rm.data()) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a.0, r.0))
    }

    /// `a + c·1ᵀ` where `c` is a column vector.
    pub fn add_col(&mut self, a: Var, c: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(c));
        assert_eq!((am.rows(), 1), cm.shape(), "add_col shape");
        let mut v = am.clone();
        for i in 0..v.rows() {
            let c = cm.data()[i];
            for x in v.row_mut(i) {
                *x += c;
            }
        }
        self.push(v, Op::AddCol(a.0, c.0))
    }

    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let v = self.value(a).zip_map(c, |x, y| x + y);
        self.push(v, Op::AddConst(a.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Scales row `i` of `a` by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(c));
        assert_eq!((am.rows(), 1), cm.shape(), "mul_col shape");
        let mut v = am.clone();
        for i in 0..v.rows() {
            let c = cm.data()[i];
            for x in v.row_mut(i) {
                *x *= c;
            }
        }
        self.push(v, Op::MulCol(a.0, c.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a.0, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let mut h = 0u64;
        for (k, x) in self.value(a).data().iter().enumerate() {
            if *x > 0.0 {
                h = h.rotate_left(7) ^ (k as u64 + 1);
            }
        }
        self.record_discrete([h]);
        self.push(v, Op::Relu(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    /// Row-wise layer normalization with learned `gain`/`bias` row vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xm = self.value(x);
        let (n, d) = xm.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xm.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut y = xhat.clone();
        for i in 0..n {
            for ((o, gv), bv) in y.row_mut(i).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            y,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut v = Matrix::zeros(am.rows(), am.cols());
        for i in 0..am.rows() {
            let s = crate::numerics::softmax_unchecked(am.row(i));
            v.row_mut(i).copy_from_slice(&s);
        }
        self.push(v, Op::SoftmaxRows(a.0))
    }

    /// Log-sum-exp of each row: `n×m → n×1`.
    pub fn lse_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let v = Matrix::col_vector((0..am.rows()).map(|i| lse_unchecked(am.row(i))).collect());
        self.push(v, Op::LseRows(a.0))
    }

    /// Log-sum-exp of each column: `n×m → 1×m`.
    pub fn lse_cols(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let v = Matrix::row_vector((0..am.cols()).map(|j| lse_unchecked(&am.column(j))).collect());
        self.push(v, Op::LseCols(a.0))
    }

    /// Expands a 1×1 value to `rows×cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let s = self.value(a);
        assert_eq!(s.shape(), (1, 1), "broadcast expects a scalar");
        let v = Matrix::filled(rows, cols, s.data()[0]);
        self.push(v, Op::Broadcast(a.0))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).gather_rows(idx);
        self.push(v, Op::GatherRows(a.0, idx.to_vec()))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let am = self.value(a);
        let mut v = Matrix::zeros(am.rows(), idx.len());
        for i in 0..am.rows() {
            for (k, &j) in idx.iter().enumerate() {
                v.set(i, k, am.get(i, j));
            }
        }
        self.push(v, Op::GatherCols(a.0, idx.to_vec()))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let am = self.value(a);
        let v = am.block(0, am.rows(), start, end);
        self.push(v, Op::SliceCols(a.0, start))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let am = self.value(a);
        let v = am.block(start, end, 0, am.cols());
        self.push(v, Op::SliceRows(a.0, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat_rows width");
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let v = Matrix::new(rows, cols, data).expect("concat_rows");
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols height");
            for i in 0..rows {
                v.row_mut(i)[c0..c0 + m.cols()].copy_from_slice(m.row(i));
            }
            c0 += m.cols();
        }
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    /// Same row-major data, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Matrix::new(rows, cols, self.value(a).data().to_vec()).expect("reshape size");
        self.push(v, Op::Reshape(a.0))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut v = am.clone();
        let mut norms = Vec::with_capacity(am.rows());
        for i in 0..am.rows() {
            let n = crate::numerics::l2_norm(am.row(i));
            norms.push(n);
            for x in v.row_mut(i) {
                *x /= n;
            }
        }
        self.push(v, Op::L2NormalizeRows(a.0, norms))
    }

    /// Records an op whose value and Jacobians (`out_len × in_len` per input, flattened
    /// row-major on both sides) were computed by the caller.
    pub fn custom(&mut self, inputs: &[(Var, Matrix)], value: Matrix) -> Var {
        for (v, j) in inputs {
            assert_eq!(j.shape(), (value.len(), self.value(*v).len()), "jacobian shape");
        }
        let inputs = inputs.iter().map(|(v, j)| (v.0, j.clone())).collect();
        self.push(value, Op::Custom(inputs))
    }

    /// Reverse sweep seeded with the given output gradients.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape");
            accumulate(&mut grads, v.0, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = node.value.get();
        let val = |i: usize| self.nodes[i].value.get();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_unchecked(&val(*b).transpose());
                let gb = val(*a).transpose().matmul_unchecked(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *r, Matrix::row_vector(g.col_sums()));
            }
            Op::AddCol(a, c) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *c, Matrix::col_vector(g.row_sums()));
            }
            Op::AddConst(a) => accumulate(grads, *a, g.clone()),
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::MulCol(a, c) => {
                let (am, cm) = (val(*a), val(*c));
                let mut ga = g.clone();
                let mut gc = vec![0.0; am.rows()];
                for i in 0..am.rows() {
                    let ci = cm.data()[i];
                    gc[i] = crate::numerics::dot(g.row(i), am.row(i));
                    for x in ga.row_mut(i) {
                        *x *= ci;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *c, Matrix::col_vector(gc));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let ga = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(val(*a), |gv, x| gv * gelu_grad(x));
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(out, |gv, y| gv * y)),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gm = val(*gain);
                let (n, d) = xhat.shape();
                let mut gx = Matrix::zeros(n, d);
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for i in 0..n {
                    let (gr, xr) = (g.row(i), xhat.row(i));
                    for k in 0..d {
                        ggain[k] += gr[k] * xr[k];
                        gbias[k] += gr[k];
                        dxhat[k] = gr[k] * gm.data()[k];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let scale = inv_std[i] / d as f64;
                    for (k, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = scale * (d as f64 * dxhat[k] - s1 - xr[k] * s2);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, Matrix::row_vector(ggain));
                accumulate(grads, *bias, Matrix::row_vector(gbias));
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gy) = (out.row(i), g.row(i));
                    let s = crate::numerics::dot(y, gy);
                    for (k, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = y[k] * (gy[k] - s);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LseRows(a) => {
                let am = val(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for i in 0..am.rows() {
                    let (y, gy) = (out.data()[i], g.data()[i]);
                    for (o, x) in ga.row_mut(i).iter_mut().zip(am.row(i)) {
                        *o = gy * (x - y).exp();
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LseCols(a) => {
                let am = val(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for i in 0..am.rows() {
                    for (j, (o, x)) in ga.row_mut(i).iter_mut().zip(am.row(i)).enumerate() {
                        *o = g.data()[j] * (x - out.data()[j]).exp();
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Broadcast(a) => accumulate(grads, *a, Matrix::filled(1, 1, g.sum())),
            Op::GatherRows(a, idx) => {
                let am = val(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherCols(a, idx) => {
                let am = val(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for i in 0..am.rows() {
                    for (k, &j) in idx.iter().enumerate() {
                        let v = ga.get(i, j) + g.get(i, k);
                        ga.set(i, j, v);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let am = val(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for i in 0..am.rows() {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let am = val(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                let w = am.cols();
                ga.data_mut()[start * w..(start + g.rows()) * w].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    accumulate(grads, p, g.block(r0, r0 + rows, 0, g.cols()));
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    accumulate(grads, p, g.block(0, g.rows(), c0, c0 + cols));
                    c0 += cols;
                }
            }
            Op::Reshape(a) => {
                let am = val(*a);
                let ga = Matrix::new(am.rows(), am.cols(), g.data().to_vec()).expect("reshape");
                accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gy) = (out.row(i), g.row(i));
                    let s = crate::numerics::dot(y, gy);
                    for (k, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = (gy[k] - y[k] * s) / norms[i];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Custom(inputs) => {
                let gflat = Matrix::row_vector(g.data().to_vec());
                for (a, jac) in inputs {
                    let am = val(*a);
                    let gi = gflat.matmul_unchecked(jac);
                    let gi = Matrix::new(am.rows(), am.cols(), gi.into_data()).expect("custom grad");
                    accumulate(grads, *a, gi);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

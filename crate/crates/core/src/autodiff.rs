//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! Every operation appends a node holding its forward value. Nodes are never
//! mutated after creation; [`Tape::backward`] walks them in reverse order and
//! accumulates gradients additively, so a value consumed by several branches
//! receives the sum of the branch gradients.

use crate::error::{mismatch, Error, Result};
use crate::tensor::{cols_of, rows_of, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward corruption, used to prove the gradient oracle notices.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Scales the left-operand gradient of every matmul.
    MatMulLhsScale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    NormalizeRows {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<Fault>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch(format!(
                "constant shape {shape:?} vs {} values",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn param(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn rows(&self, v: Var) -> usize {
        rows_of(self.shape(v))
    }

    pub fn cols(&self, v: Var) -> usize {
        cols_of(self.shape(v))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        (rows_of(s), cols_of(s))
    }

    // ---------------------------------------------------------------- ops

    /// Copy of `x` with no gradient path back to it.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(mismatch(format!(
                "matmul {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (n, k2) = self.rc(b);
        if k != k2 {
            return Err(mismatch(format!(
                "matmul_nt {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_op(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, c), rg)
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.rc(x);
        if self.value(b).len() != n {
            return Err(mismatch(format!(
                "add_row {:?} + {:?}",
                self.shape(x),
                self.shape(b)
            )));
        }
        let bv = self.value(b);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % n])
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(self.shape(x).to_vec(), data, Op::AddRow(x, b), rg))
    }

    /// `x[m, n] * g[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (_, n) = self.rc(x);
        if self.value(g).len() != n {
            return Err(mismatch(format!(
                "mul_row {:?} * {:?}",
                self.shape(x),
                self.shape(g)
            )));
        }
        let gv = self.value(g);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv[i % n])
            .collect();
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(self.shape(x).to_vec(), data, Op::MulRow(x, g), rg))
    }

    /// `x[m, n] * s[m]`: row `i` scaled by `s[i]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.rc(x);
        if self.value(s).len() != m {
            return Err(mismatch(format!(
                "mul_col {:?} * {:?}",
                self.shape(x),
                self.shape(s)
            )));
        }
        let sv = self.value(s);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / n])
            .collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(self.shape(x).to_vec(), data, Op::MulCol(x, s), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if !self
            .value(x)
            .iter()
            .all(|v| v.is_finite() || *v == f64::NEG_INFINITY)
        {
            return Err(Error::NonFiniteLogits);
        }
        let (_, n) = self.rc(x);
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), data, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        let (_, n) = self.rc(x);
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), data, Op::LogSoftmax(x), rg))
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (m, n) = self.rc(x);
        let mut data = self.value(x).to_vec();
        let mut rstd = Vec::with_capacity(m);
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, Op::LayerNorm { x, rstd }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, Op::Tanh(x), rg)
    }

    /// Each row divided by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (m, n) = self.rc(x);
        let mut data = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm.max(eps);
            row.iter_mut().for_each(|v| *v /= d);
            norms.push(norm);
        }
        let rg = self.rg(x);
        self.push(
            self.shape(x).to_vec(),
            data,
            Op::NormalizeRows { x, eps, norms },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// `[m, n] -> [m, 1]`, summing each row.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (m, n) = self.rc(x);
        let data = self.value(x).chunks(n).map(|r| r.iter().sum()).collect();
        let rg = self.rg(x);
        self.push(vec![m, 1], data, Op::SumCols(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rc(x);
        if start + len > n {
            return Err(mismatch(format!(
                "slice_cols {start}..{} of {n}",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, len], data, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.rows(parts[0]);
        if parts.iter().any(|&p| self.rows(p) != m) {
            return Err(mismatch("concat_cols row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let c = self.cols(p);
                data.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, total], data, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rc(x);
        if start + len > m {
            return Err(mismatch(format!(
                "slice_rows {start}..{} of {m}",
                start + len
            )));
        }
        let data = self.value(x)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, n], data, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.cols(parts[0]);
        if parts.iter().any(|&p| self.cols(p) != n) {
            return Err(mismatch("concat_rows column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let m = data.len() / n;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, n], data, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.rc(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(mismatch(format!("gather row {bad} of {m}")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![index.len(), n],
            data,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Element `index[i]` of each row `i`; `[m, n] -> [m]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.rc(x);
        if index.len() != m || index.iter().any(|&j| j >= n) {
            return Err(mismatch(format!(
                "pick {} indices from {:?}",
                index.len(),
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let data = index
            .iter()
            .enumerate()
            .map(|(i, &j)| xv[i * n + j])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![m],
            data,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch(format!(
                "reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.rc(x);
        let xv = self.value(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv[i * n + j];
            }
        }
        let rg = self.rg(x);
        self.push(vec![n, m], data, Op::Transpose(x), rg)
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from a single-element loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(mismatch(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Backpropagates from arbitrary output gradients. Seeds on the same
    /// node are summed.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(mismatch("seed gradient length"));
            }
            accumulate(&mut grads, *v, g);
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.data.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rc(*a);
                let n = self.cols(*b);
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] = dot(gr, &bv[p * n..(p + 1) * n]);
                        }
                    }
                    if let Some(Fault::MatMulLhsScale(s)) = self.fault {
                        da.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(av[i * k + p], gr, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.rc(*a);
                let n = self.rows(*b);
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            axpy(
                                g[i * n + j],
                                &bv[j * k..(j + 1) * k],
                                &mut da[i * k..(i + 1) * k],
                            );
                        }
                    }
                    accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            axpy(
                                g[i * n + j],
                                &av[i * k..(i + 1) * k],
                                &mut db[j * k..(j + 1) * k],
                            );
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, &d);
                }
                if self.rg(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *x, &d);
            }
            Op::AddRow(x, b) => {
                if self.rg(*x) {
                    accumulate(grads, *x, g);
                }
                if self.rg(*b) {
                    let n = self.cols(*x);
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::MulRow(x, s) => {
                let n = self.cols(*x);
                let sv = self.value(*s);
                if self.rg(*x) {
                    let d: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * sv[i % n]).collect();
                    accumulate(grads, *x, &d);
                }
                if self.rg(*s) {
                    let xv = self.value(*x);
                    let mut ds = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        ds[i % n] += v * xv[i];
                    }
                    accumulate(grads, *s, &ds);
                }
            }
            Op::MulCol(x, s) => {
                let n = self.cols(*x);
                let sv = self.value(*s);
                if self.rg(*x) {
                    let d: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * sv[i / n]).collect();
                    accumulate(grads, *x, &d);
                }
                if self.rg(*s) {
                    let xv = self.value(*x);
                    let ds: Vec<f64> = g
                        .chunks(n)
                        .zip(xv.chunks(n))
                        .map(|(gr, xr)| dot(gr, xr))
                        .collect();
                    accumulate(grads, *s, &ds);
                }
            }
            Op::Softmax(x) => {
                let n = self.cols(*x);
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let s = dot(gr, yr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::LogSoftmax(x) => {
                let n = self.cols(*x);
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::LayerNorm { x, rstd } => {
                let n = self.cols(*x);
                let nf = n as f64;
                let mut d = vec![0.0; g.len()];
                for (i, ((dr, gr), yr)) in d
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(y.chunks(n))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / nf;
                    let mgy = dot(gr, yr) / nf;
                    for j in 0..n {
                        dr[j] = rstd[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Tanh(x) => {
                let d: Vec<f64> = y.iter().zip(g).map(|(t, gv)| gv * (1.0 - t * t)).collect();
                accumulate(grads, *x, &d);
            }
            Op::NormalizeRows { x, eps, norms } => {
                let n = self.cols(*x);
                let mut d = vec![0.0; g.len()];
                for (i, ((dr, gr), yr)) in d
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(y.chunks(n))
                    .enumerate()
                {
                    if norms[i] > *eps {
                        let s = dot(gr, yr);
                        for j in 0..n {
                            dr[j] = (gr[j] - yr[j] * s) / norms[i];
                        }
                    } else {
                        for j in 0..n {
                            dr[j] = gr[j] / eps;
                        }
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                accumulate(grads, *x, &d);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let d = vec![g[0] / len as f64; len];
                accumulate(grads, *x, &d);
            }
            Op::SumCols(x) => {
                let n = self.cols(*x);
                let d: Vec<f64> = (0..self.value(*x).len()).map(|i| g[i / n]).collect();
                accumulate(grads, *x, &d);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.rc(*x);
                let len = node.shape[1];
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, &d);
            }
            Op::ConcatCols(parts) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.cols(p);
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(m * c);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        accumulate(grads, p, &d);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.rc(*x);
                let mut d = vec![0.0; m * n];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                accumulate(grads, *x, &d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        accumulate(grads, p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                let (m, n) = self.rc(*x);
                let mut d = vec![0.0; m * n];
                for (r, &i) in index.iter().enumerate() {
                    d[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(a, b)| *a += b);
                }
                accumulate(grads, *x, &d);
            }
            Op::Pick { x, index } => {
                let (m, n) = self.rc(*x);
                let mut d = vec![0.0; m * n];
                for (i, &j) in index.iter().enumerate() {
                    d[i * n + j] = g[i];
                }
                accumulate(grads, *x, &d);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Transpose(x) => {
                let (m, n) = self.rc(*x);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(grads, *x, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node indices
//! are already a topological order and [`Graph::backward`] is a single
//! reverse sweep. Graphs are built fresh for every forward pass.
//!
//! There is no broadcasting: binary elementwise operations require equal
//! shapes. Rank-2 operands are `[rows, cols]`; a leading row dimension is
//! how the cell code batches sequences.

use rand::Rng;

use crate::error::{CrurError, Result};
use crate::kernels::gemm;
use crate::tensor::{Layout, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Outer(Var, Var),
    Reshape(Var),
    LogSoftmax(Var),
    Sum(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    PickWeighted {
        x: Var,
        idx: Vec<usize>,
        weights: Vec<f64>,
    },
    Bmv {
        s: Var,
        u: Var,
        m: usize,
        k: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberate backward-pass defects, used to prove the gradient checker
/// actually catches broken derivatives.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Scales the sigmoid derivative by 1.01.
    SigmoidGrad,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Fault,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            match op {
                Binary::Add => x.zip_map(y, name, |p, q| p + q)?,
                Binary::Sub => x.zip_map(y, name, |p, q| p - q)?,
                Binary::Mul => x.zip_map(y, name, |p, q| p * q)?,
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Sums a non-empty list of equally shaped terms.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| CrurError::rank("add_all", "no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Var {
        let out = match op {
            Unary::Sigmoid => self.value(a).map(sigmoid),
            Unary::Tanh => self.value(a).map(f64::tanh),
        };
        let rg = self.rg(a);
        self.push(out, Op::Unary(op, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(CrurError::rank(
                "matmul",
                format!("expected rank-2 operands, got {sa:?} x {sb:?}"),
            ));
        };
        if k != k2 {
            return Err(CrurError::dim("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::RowMajor,
            self.value(b).data(),
            Layout::RowMajor,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[n, k2]) = (sa, sb) else {
            return Err(CrurError::rank(
                "matmul_bt",
                format!("expected rank-2 operands, got {sa:?} x {sb:?}"),
            ));
        };
        if k != k2 {
            return Err(CrurError::dim("matmul_bt", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::RowMajor,
            self.value(b).data(),
            Layout::Transposed,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u), self.shape(v));
        let (&[m], &[n]) = (su, sv) else {
            return Err(CrurError::rank(
                "outer",
                format!("expected vectors, got {su:?} and {sv:?}"),
            ));
        };
        let (ud, vd) = (self.value(u).data(), self.value(v).data());
        let mut out = Vec::with_capacity(m * n);
        for &a in ud {
            out.extend(vd.iter().map(|&b| a * b));
        }
        let rg = self.rg(u) || self.rg(v);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Outer(u, v), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Row-wise `log(softmax(x))` with max subtraction. Rank-1 input is a
    /// single row.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_log(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Selects rows of `table: [V, e]`, producing `[idx.len(), e]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        let &[rows, cols] = shape else {
            return Err(CrurError::rank(
                "gather_rows",
                format!("expected rank-2 table, got {shape:?}"),
            ));
        };
        if idx.is_empty() {
            return Err(CrurError::rank("gather_rows", "no indices"));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(CrurError::Index {
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(idx.len(), cols, out)?,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ_b weights[b] · x[b, idx[b]]` as a scalar.
    pub fn pick_weighted(&mut self, x: Var, idx: &[usize], weights: &[f64]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(x))
            .ok_or_else(|| CrurError::rank("pick_weighted", format!("{:?}", self.shape(x))))?;
        if idx.len() != rows || weights.len() != rows {
            return Err(CrurError::dim(
                "pick_weighted",
                &[rows, cols],
                &[idx.len(), weights.len()],
            ));
        }
        let xv = self.value(x).data();
        let mut total = 0.0;
        for (b, (&i, &w)) in idx.iter().zip(weights).enumerate() {
            if i >= cols {
                return Err(CrurError::Index {
                    index: i,
                    len: cols,
                });
            }
            if w != 0.0 {
                total += w * xv[b * cols + i];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(total),
            Op::PickWeighted {
                x,
                idx: idx.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise matricized product: each row of `s` (length `m·k`) is read
    /// as a row-major `m×k` matrix and multiplied by the matching row of
    /// `u` (length `k`), giving `[rows, m]`. Rank-1 operands are one row.
    pub fn bmv(&mut self, s: Var, u: Var, m: usize, k: usize) -> Result<Var> {
        let (ss, su) = (self.shape(s).to_vec(), self.shape(u).to_vec());
        let (rs, cs) = as_matrix(&ss).ok_or_else(|| CrurError::rank("bmv", format!("{ss:?}")))?;
        let (ru, cu) = as_matrix(&su).ok_or_else(|| CrurError::rank("bmv", format!("{su:?}")))?;
        if cs != m * k || cu != k || rs != ru || ss.len() != su.len() {
            return Err(CrurError::dim("bmv", &ss, &su));
        }
        let (sv, uv) = (self.value(s).data(), self.value(u).data());
        let mut out = vec![0.0; rs * m];
        for b in 0..rs {
            let srow = &sv[b * m * k..(b + 1) * m * k];
            let urow = &uv[b * k..(b + 1) * k];
            for i in 0..m {
                out[b * m + i] = srow[i * k..(i + 1) * k]
                    .iter()
                    .zip(urow)
                    .map(|(a, c)| a * c)
                    .sum();
            }
        }
        let shape = if ss.len() == 1 { vec![m] } else { vec![rs, m] };
        let rg = self.rg(s) || self.rg(u);
        Ok(self.push(Tensor::new(shape, out)?, Op::Bmv { s, u, m, k }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(CrurError::rank(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if self.rg(v) {
                if grads[v.0].is_none() {
                    grads[v.0] = Some(vec![0.0; self.value(v).len()]);
                }
                Some(v.0)
            } else {
                None
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ia) = acc(*a, grads) {
                    let ga = grads[ia].as_mut().unwrap();
                    match kind {
                        Binary::Add | Binary::Sub => {
                            ga.iter_mut().zip(gout).for_each(|(g, d)| *g += d)
                        }
                        Binary::Mul => {
                            for ((g, d), y) in ga.iter_mut().zip(gout).zip(bv) {
                                *g += d * y;
                            }
                        }
                    }
                }
                if let Some(ib) = acc(*b, grads) {
                    let gb = grads[ib].as_mut().unwrap();
                    match kind {
                        Binary::Add => gb.iter_mut().zip(gout).for_each(|(g, d)| *g += d),
                        Binary::Sub => gb.iter_mut().zip(gout).for_each(|(g, d)| *g -= d),
                        Binary::Mul => {
                            for ((g, d), x) in gb.iter_mut().zip(gout).zip(av) {
                                *g += d * x;
                            }
                        }
                    }
                }
            }
            Op::Unary(kind, a) => {
                if let Some(ia) = acc(*a, grads) {
                    let y = node.value.data();
                    let ga = grads[ia].as_mut().unwrap();
                    match kind {
                        Unary::Sigmoid => {
                            let bias = if self.fault == Fault::SigmoidGrad {
                                1.01
                            } else {
                                1.0
                            };
                            for ((g, d), y) in ga.iter_mut().zip(gout).zip(y) {
                                *g += d * y * (1.0 - y) * bias;
                            }
                        }
                        Unary::Tanh => {
                            for ((g, d), y) in ga.iter_mut().zip(gout).zip(y) {
                                *g += d * (1.0 - y * y);
                            }
                        }
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(ix) = acc(*x, grads) {
                    let gx = grads[ix].as_mut().unwrap();
                    gx.iter_mut().zip(gout).for_each(|(g, d)| *g += scale * d);
                }
            }
            Op::MatMul(a, b) => {
                let (&[m, k], &[_, n]) = (self.shape(*a), self.shape(*b)) else {
                    unreachable!()
                };
                if let Some(ia) = acc(*a, grads) {
                    // dA = dC · Bᵀ
                    let ga = grads[ia].as_mut().unwrap();
                    gemm(
                        m,
                        n,
                        k,
                        gout,
                        Layout::RowMajor,
                        self.value(*b).data(),
                        Layout::Transposed,
                        ga,
                        1.0,
                    );
                }
                if let Some(ib) = acc(*b, grads) {
                    // dB = Aᵀ · dC
                    let gb = grads[ib].as_mut().unwrap();
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        Layout::Transposed,
                        gout,
                        Layout::RowMajor,
                        gb,
                        1.0,
                    );
                }
            }
            Op::MatMulBt(a, b) => {
                let (&[m, k], &[n, _]) = (self.shape(*a), self.shape(*b)) else {
                    unreachable!()
                };
                if let Some(ia) = acc(*a, grads) {
                    // dA = dC · B
                    let ga = grads[ia].as_mut().unwrap();
                    gemm(
                        m,
                        n,
                        k,
                        gout,
                        Layout::RowMajor,
                        self.value(*b).data(),
                        Layout::RowMajor,
                        ga,
                        1.0,
                    );
                }
                if let Some(ib) = acc(*b, grads) {
                    // dB = dCᵀ · A
                    let gb = grads[ib].as_mut().unwrap();
                    gemm(
                        n,
                        m,
                        k,
                        gout,
                        Layout::Transposed,
                        self.value(*a).data(),
                        Layout::RowMajor,
                        gb,
                        1.0,
                    );
                }
            }
            Op::Outer(u, v) => {
                let (ud, vd) = (self.value(*u).data(), self.value(*v).data());
                let n = vd.len();
                if let Some(iu) = acc(*u, grads) {
                    let gu = grads[iu].as_mut().unwrap();
                    for (i, g) in gu.iter_mut().enumerate() {
                        *g += gout[i * n..(i + 1) * n]
                            .iter()
                            .zip(vd)
                            .map(|(d, y)| d * y)
                            .sum::<f64>();
                    }
                }
                if let Some(iv) = acc(*v, grads) {
                    let gv = grads[iv].as_mut().unwrap();
                    for (i, &x) in ud.iter().enumerate() {
                        for (g, d) in gv.iter_mut().zip(&gout[i * n..(i + 1) * n]) {
                            *g += d * x;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(ix) = acc(*x, grads) {
                    let gx = grads[ix].as_mut().unwrap();
                    gx.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(ix) = acc(*x, grads) {
                    let (_, cols) = as_matrix(node.value.shape()).unwrap();
                    let y = node.value.data();
                    let gx = grads[ix].as_mut().unwrap();
                    for ((grow, drow), yrow) in gx
                        .chunks_mut(cols)
                        .zip(gout.chunks(cols))
                        .zip(y.chunks(cols))
                    {
                        let total: f64 = drow.iter().sum();
                        for ((g, d), ly) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g += d - ly.exp() * total;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(ix) = acc(*x, grads) {
                    let gx = grads[ix].as_mut().unwrap();
                    gx.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::GatherRows { table, idx } => {
                if let Some(it) = acc(*table, grads) {
                    let cols = self.shape(*table)[1];
                    let gt = grads[it].as_mut().unwrap();
                    for (b, &row) in idx.iter().enumerate() {
                        for (g, d) in gt[row * cols..(row + 1) * cols]
                            .iter_mut()
                            .zip(&gout[b * cols..(b + 1) * cols])
                        {
                            *g += d;
                        }
                    }
                }
            }
            Op::PickWeighted { x, idx, weights } => {
                if let Some(ix) = acc(*x, grads) {
                    let (_, cols) = as_matrix(self.shape(*x)).unwrap();
                    let gx = grads[ix].as_mut().unwrap();
                    for (b, (&i, &w)) in idx.iter().zip(weights).enumerate() {
                        gx[b * cols + i] += w * gout[0];
                    }
                }
            }
            Op::Bmv { s, u, m, k } => {
                let (m, k) = (*m, *k);
                let rows = gout.len() / m;
                let (sv, uv) = (self.value(*s).data(), self.value(*u).data());
                if let Some(is) = acc(*s, grads) {
                    let gs = grads[is].as_mut().unwrap();
                    for b in 0..rows {
                        for i in 0..m {
                            let d = gout[b * m + i];
                            let base = b * m * k + i * k;
                            for j in 0..k {
                                gs[base + j] += d * uv[b * k + j];
                            }
                        }
                    }
                }
                if let Some(iu) = acc(*u, grads) {
                    let gu = grads[iu].as_mut().unwrap();
                    for b in 0..rows {
                        for i in 0..m {
                            let d = gout[b * m + i];
                            let base = b * m * k + i * k;
                            for j in 0..k {
                                gu[b * k + j] += d * sv[base + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax of a rank-1 or rank-2 tensor.
pub fn softmax_log(x: &Tensor) -> Result<Tensor> {
    let (_, cols) = as_matrix(x.shape()).ok_or_else(|| {
        CrurError::rank(
            "softmax_log",
            format!("expected rank 1 or 2, got {:?}", x.shape()),
        )
    })?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Inverted dropout: at training time each entry is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; otherwise identity.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CrurError::Parameter(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Central-difference oracle over every entry of `inputs`.
    fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let l = f(&mut g, &vars);
            g.value(l).data()[0]
        };
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for (which, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[which]).unwrap();
            for e in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[e] += eps;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[e] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let rel = (analytic.data()[e] - numeric).abs() / (numeric.abs() + 1e-8);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn matmul_gradient_matches_central_differences() {
        let mut r = rng();
        let a = Tensor::uniform(&[5, 4], 1.0, &mut r);
        let b = Tensor::uniform(&[4, 3], 1.0, &mut r);
        let err = check(&[a, b], |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.sum(c)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_bt_and_bmv_gradients() {
        let mut r = rng();
        let a = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let b = Tensor::uniform(&[5, 4], 1.0, &mut r);
        let w = Tensor::uniform(&[3, 5], 1.0, &mut r);
        let err = check(&[a, b, w], |g, v| {
            let c = g.matmul_bt(v[0], v[1]).unwrap();
            let c = g.mul(c, v[2]).unwrap();
            g.sum(c)
        });
        assert!(err < 1e-6, "{err}");

        let s = Tensor::uniform(&[2, 6], 1.0, &mut r);
        let u = Tensor::uniform(&[2, 2], 1.0, &mut r);
        let w = Tensor::uniform(&[2, 3], 1.0, &mut r);
        let err = check(&[s, u, w], |g, v| {
            let f = g.bmv(v[0], v[1], 3, 2).unwrap();
            let f = g.mul(f, v[2]).unwrap();
            g.sum(f)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn elementwise_values_and_gradients() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        let t = g.tanh(z);
        assert_eq!(g.value(s).data(), &[0.5]);
        assert_eq!(g.value(t).data(), &[0.0]);

        let mut r = rng();
        let a = Tensor::uniform(&[3, 3], 1.0, &mut r);
        let b = Tensor::uniform(&[3, 3], 1.0, &mut r);
        let err = check(&[a, b], |g, v| {
            let m = g.mul(v[0], v[1]).unwrap();
            let s = g.sigmoid(m);
            let t = g.tanh(v[0]);
            let d = g.sub(s, t).unwrap();
            let o = g.one_minus(d);
            let o = g.mul(o, o).unwrap();
            g.sum(o)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]));
        let b = g.leaf(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, b), Err(CrurError::Dimension { .. })));
        assert!(matches!(g.matmul(a, b), Err(CrurError::Rank { .. })));
        let c = g.leaf(Tensor::zeros(&[3, 2]));
        match g.matmul(a, c) {
            Err(CrurError::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 2]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn outer_values_and_gradients() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        let v = g.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
        let o = g.outer(u, v).unwrap();
        assert_eq!(g.value(o).data(), &[0.0, 1.0, 0.0, 0.0]);
        let a = g.constant(Tensor::vector(vec![2.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![3.0]).unwrap());
        let o = g.outer(a, b).unwrap();
        assert_eq!(g.value(o).shape(), &[1, 1]);
        assert_eq!(g.value(o).data(), &[6.0]);
        let m = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.outer(m, a), Err(CrurError::Rank { .. })));

        let mut r = rng();
        let u = Tensor::uniform(&[4], 1.0, &mut r);
        let v = Tensor::uniform(&[6], 1.0, &mut r);
        let w = Tensor::uniform(&[4, 6], 1.0, &mut r);
        let err = check(&[u, v, w], |g, x| {
            let o = g.outer(x[0], x[1]).unwrap();
            let o = g.mul(o, x[2]).unwrap();
            g.sum(o)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_log_cases() {
        for c in [-3.0, 0.0, 7.5] {
            let x = Tensor::vector(vec![c; 3]).unwrap();
            let y = softmax_log(&x).unwrap();
            for v in y.data() {
                assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-15);
            }
        }
        assert_eq!(softmax_log(&Tensor::scalar(4.2)).unwrap().data(), &[0.0]);

        let mut r = rng();
        let x = Tensor::uniform(&[10], 5.0, &mut r);
        let y = softmax_log(&x).unwrap();
        let total: f64 = y.data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);

        let shifted = softmax_log(&x.map(|v| v + 123.0)).unwrap();
        assert!(shifted.max_abs_diff(&y) < 1e-12);

        let err = check(&[x, Tensor::uniform(&[10], 1.0, &mut r)], |g, v| {
            let l = g.log_softmax(v[0]).unwrap();
            let l = g.mul(l, v[1]).unwrap();
            g.sum(l)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dropout_contract() {
        let mut r = rng();
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[100_000]));
        let same = dropout(&mut g, x, 0.0, true, &mut r).unwrap();
        assert_eq!(same, x);
        let same = dropout(&mut g, x, 0.5, false, &mut r).unwrap();
        assert_eq!(same, x);
        let d = dropout(&mut g, x, 0.5, true, &mut r).unwrap();
        let mean = g.value(d).mean();
        assert!((0.98..=1.02).contains(&mean), "{mean}");
        assert!(g.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(matches!(
            dropout(&mut g, x, 1.0, true, &mut r),
            Err(CrurError::Parameter(_))
        ));
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[2, 3], 1.0, &mut rng()));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
        assert!(matches!(g.backward(x), Err(CrurError::Rank { .. })));

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn gather_and_pick_gradients() {
        let mut r = rng();
        let table = Tensor::uniform(&[5, 3], 1.0, &mut r);
        let w = Tensor::uniform(&[4, 3], 1.0, &mut r);
        let err = check(&[table, w], |g, v| {
            let rows = g.gather_rows(v[0], &[1, 4, 1, 0]).unwrap();
            let m = g.mul(rows, v[1]).unwrap();
            let l = g.log_softmax(m).unwrap();
            g.pick_weighted(l, &[0, 2, 1, 1], &[0.5, -1.0, 2.0, 0.25])
                .unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fault_injection_breaks_sigmoid_gradient() {
        let mut g = Graph::with_fault(Fault::SigmoidGrad);
        let x = g.leaf(Tensor::vector(vec![0.3]).unwrap());
        let s = g.sigmoid(x);
        let l = g.sum(s);
        let grad = g.backward(l).unwrap().get(x).unwrap().data()[0];
        let y = sigmoid(0.3);
        assert!((grad - y * (1.0 - y)).abs() > 1e-4);
    }
}

//! Reverse-mode differentiation over a linear record of tensor primitives.
//!
//! Every primitive appends one node holding its output value, so operands
//! always precede their consumers and the record replays backward in
//! reverse index order. Gradients accumulate additively on fan-out.

use rand::Rng;

use super::tensor::{dims2, dims3, gemm, logsumexp, softmax_in_place, Trans};
use super::{KernelError, Real, Tensor};

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    SumAll(Var),
    Softmax { a: Var },
    LogSumExp { a: Var, mask: Option<Vec<bool>> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    Gelu(Var),
    GatherRows { a: Var, idx: Vec<Option<usize>> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { take_a: Vec<bool>, a: Var, b: Var },
    Reshape(Var),
    L2NormRows { a: Var, eps: T, norms: Vec<T> },
    Pick { a: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The computation record.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> KernelError {
    KernelError::Shape { op, detail }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Result<Var, KernelError> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, KernelError> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var, KernelError> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// `a · b`, both 2-d.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n, Trans::None);
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b, trans_b: false }, needs, "matmul")
    }

    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("{:?} x {:?}ᵀ", self.shape(a), self.shape(b))));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n, Trans::B);
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b, trans_b: true }, needs, "matmul_nt")
    }

    /// Batched product `[g,m,k] · [g,k,n]`, or `[g,m,k] · [g,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, KernelError> {
        let (g, m, k) = dims3(self.value(a), "bmm")?;
        let (g2, r, c) = dims3(self.value(b), "bmm")?;
        let (k2, n) = if trans_b { (c, r) } else { (r, c) };
        if g != g2 || k != k2 {
            return Err(shape_err("bmm", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(g * m * n);
        let tr = if trans_b { Trans::B } else { Trans::None };
        for gi in 0..g {
            out.extend(gemm(&ad[gi * m * k..(gi + 1) * m * k], &bd[gi * k * n..(gi + 1) * k * n], m, k, n, tr));
        }
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(vec![g, m, n], out)?, Op::Bmm { a, b, trans_b }, needs, "bmm")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), KernelError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var, KernelError> {
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        self.push(value, op, needs, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.zip_with(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    /// Adds the vector `b` (length = last axis of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let x = self.value(a);
        let c = x.cols();
        if self.value(b).numel() != c {
            return Err(shape_err("add_row", format!("{:?} + {:?}", x.shape(), self.shape(b))));
        }
        let bias = self.value(b).data();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &q) in row.iter_mut().zip(bias) {
                *v += q;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        self.push(value, Op::AddRow(a, b), needs, "add_row")
    }

    /// Multiplies row `r` of `a` by `s[r]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var, KernelError> {
        let x = self.value(a);
        let (rows, c) = (x.rows(), x.cols());
        if self.value(s).numel() != rows {
            return Err(shape_err("mul_col", format!("{:?} * {:?}", x.shape(), self.shape(s))));
        }
        let sv = self.value(s).data();
        let mut data = x.data().to_vec();
        for (r, row) in data.chunks_mut(c).enumerate() {
            row.iter_mut().for_each(|v| *v *= sv[r]);
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(&[a, s]);
        self.push(value, Op::MulCol(a, s), needs, "mul_col")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, KernelError> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect())?;
        let needs = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), needs, "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, KernelError> {
        let s: T = self.value(a).data().iter().copied().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs, "sum")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, KernelError> {
        self.masked_softmax(a, None)
    }

    /// Softmax over the last axis restricted to entries with `mask[i] == true`.
    /// Masked entries come out as exactly zero; fully masked rows are all zero.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var, KernelError> {
        let x = self.value(a);
        if let Some(m) = &mask {
            if m.len() != x.numel() {
                return Err(shape_err("masked_softmax", format!("mask {} for {:?}", m.len(), x.shape())));
            }
        }
        let c = x.cols();
        let mut data = x.data().to_vec();
        for (r, row) in data.chunks_mut(c).enumerate() {
            softmax_in_place(row, mask.as_ref().map(|m| &m[r * c..(r + 1) * c]));
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(&[a]);
        self.push(value, Op::Softmax { a }, needs, "softmax")
    }

    /// Row-wise log-sum-exp over the last axis, optionally masked; output `[rows, 1]`.
    pub fn logsumexp(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var, KernelError> {
        let x = self.value(a);
        let (rows, c) = (x.rows(), x.cols());
        if let Some(m) = &mask {
            if m.len() != x.numel() {
                return Err(shape_err("logsumexp", format!("mask {} for {:?}", m.len(), x.shape())));
            }
        }
        let out: Vec<T> = (0..rows)
            .map(|r| logsumexp(x.row(r), mask.as_ref().map(|m| &m[r * c..(r + 1) * c])))
            .collect();
        let needs = self.needs(&[a]);
        self.push(Tensor::new(vec![rows, 1], out)?, Op::LogSumExp { a, mask }, needs, "logsumexp")
    }

    /// Per-row normalization to zero mean and unit population variance,
    /// followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, KernelError> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("layer_norm", format!("{:?} with affine {}", xv.shape(), self.value(gamma).numel())));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let n = T::of(c as f64);
        let eps = T::of(eps);
        let mut xhat = Vec::with_capacity(rows * c);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * c);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(&[x, gamma, beta]);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs, "layer_norm")
    }

    /// Inverted dropout. Identity when `!training` or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var, KernelError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(KernelError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let x = self.value(a);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(&[a]);
        self.push(value, Op::Dropout { a, mask }, needs, "dropout")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, KernelError> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(&[a]);
        self.push(value, Op::Gelu(a), needs, "gelu")
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Result<Var, KernelError> {
        let x = self.value(a);
        let (rows, c) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for i in &idx {
            match *i {
                Some(r) if r < rows => out.extend_from_slice(x.row(r)),
                Some(r) => return Err(shape_err("gather_rows", format!("row {r} of {rows}"))),
                None => out.extend(std::iter::repeat(T::zero()).take(c)),
            }
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        let needs = self.needs(&[a]);
        self.push(value, Op::GatherRows { a, idx }, needs, "gather_rows")
    }

    /// Columns `start..start+len` of a 2-d tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, KernelError> {
        let (rows, c) = dims2(self.value(a), "slice_cols")?;
        if start + len > c {
            return Err(shape_err("slice_cols", format!("{start}+{len} of {c}")));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let needs = self.needs(&[a]);
        self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { a, start }, needs, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let rows = match parts.first() {
            Some(&p) => dims2(self.value(p), "concat_cols")?.0,
            None => return Err(shape_err("concat_cols", "no inputs".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("{r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = self.needs(parts);
        self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), needs, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(shape_err("concat_rows", "no inputs".into())),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", format!("{} cols vs {cols}", v.cols())));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let needs = self.needs(parts);
        self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), needs, "concat_rows")
    }

    /// Row `r` from `a` where `take_a[r]`, else from `b`.
    pub fn select_rows(&mut self, take_a: Vec<bool>, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape(a, b, "select_rows")?;
        let (x, y) = (self.value(a), self.value(b));
        if take_a.len() != x.rows() {
            return Err(shape_err("select_rows", format!("mask {} for {} rows", take_a.len(), x.rows())));
        }
        let mut out = Vec::with_capacity(x.numel());
        for (r, &t) in take_a.iter().enumerate() {
            out.extend_from_slice(if t { x.row(r) } else { y.row(r) });
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.needs(&[a, b]);
        self.push(value, Op::SelectRows { take_a, a, b }, needs, "select_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, KernelError> {
        let value = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(&[a]);
        self.push(value, Op::Reshape(a), needs, "reshape")
    }

    /// `x / (‖x‖ + eps)` per row.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var, KernelError> {
        let x = self.value(a);
        let rows = x.rows();
        let eps = T::of(eps);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..rows {
            let row = x.row(r);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            let s = n + eps;
            out.extend(row.iter().map(|&v| v / s));
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.needs(&[a]);
        self.push(value, Op::L2NormRows { a, eps, norms }, needs, "l2_normalize")
    }

    /// `out[r] = a[r, idx[r]]`, shape `[rows, 1]`.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, KernelError> {
        let x = self.value(a);
        if idx.len() != x.rows() || idx.iter().any(|&i| i >= x.cols()) {
            return Err(shape_err("pick", format!("{} indices into {:?}", idx.len(), x.shape())));
        }
        let out = idx.iter().enumerate().map(|(r, &i)| x.row(r)[i]).collect();
        let needs = self.needs(&[a]);
        self.push(Tensor::new(vec![idx.len(), 1], out)?, Op::Pick { a, idx }, needs, "pick")
    }

    /// Replays the record backward from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, KernelError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(KernelError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        lv.ensure_finite("loss")?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }

        for g in grads.iter().flatten() {
            g.ensure_finite("backward")?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape follows operand")
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), KernelError> {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                if self.requires_grad(*a) {
                    let tr = if *trans_b { Trans::None } else { Trans::B };
                    let da = gemm(gd, bv.data(), m, n, k, tr);
                    self.acc(grads, *a, self.like(*a, da));
                }
                if self.requires_grad(*b) {
                    let db = if *trans_b {
                        gemm(gd, av.data(), n, m, k, Trans::A)
                    } else {
                        gemm(av.data(), gd, k, m, n, Trans::A)
                    };
                    self.acc(grads, *b, self.like(*b, db));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let (sa, sb, so) = (m * k, k * n, m * n);
                if self.requires_grad(*a) {
                    let tr = if *trans_b { Trans::None } else { Trans::B };
                    let mut da = Vec::with_capacity(gn * sa);
                    for gi in 0..gn {
                        da.extend(gemm(&gd[gi * so..(gi + 1) * so], &bv.data()[gi * sb..(gi + 1) * sb], m, n, k, tr));
                    }
                    self.acc(grads, *a, self.like(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = Vec::with_capacity(gn * sb);
                    for gi in 0..gn {
                        let ga = &gd[gi * so..(gi + 1) * so];
                        let aa = &av.data()[gi * sa..(gi + 1) * sa];
                        if *trans_b {
                            db.extend(gemm(ga, aa, n, m, k, Trans::A));
                        } else {
                            db.extend(gemm(aa, ga, k, m, n, Trans::A));
                        }
                    }
                    self.acc(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, self.like(*b, gd.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.acc(grads, *a, self.like(*a, gd.iter().zip(bv).map(|(&x, &y)| x * y).collect()));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, self.like(*b, gd.iter().zip(av).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let c = g.cols();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *b, self.like(*b, db));
                }
            }
            Op::MulCol(a, s) => {
                let c = g.cols();
                let (av, sv) = (self.value(*a).data(), self.value(*s).data());
                if self.requires_grad(*a) {
                    let mut da = gd.to_vec();
                    for (r, row) in da.chunks_mut(c).enumerate() {
                        row.iter_mut().for_each(|v| *v *= sv[r]);
                    }
                    self.acc(grads, *a, self.like(*a, da));
                }
                if self.requires_grad(*s) {
                    let ds = gd
                        .chunks(c)
                        .zip(av.chunks(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                        .collect();
                    self.acc(grads, *s, self.like(*s, ds));
                }
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, self.like(*a, gd.iter().map(|&v| v * *c).collect()));
            }
            Op::SumAll(a) => {
                let gv = gd[0];
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Softmax { a } => {
                let c = out.cols();
                let mut da = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks(c).zip(gd.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                    da.extend(yr.iter().zip(gr).map(|(&y, &gg)| y * (gg - dot)));
                }
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::LogSumExp { a, mask } => {
                let x = self.value(*a);
                let c = x.cols();
                let mut da = Vec::with_capacity(x.numel());
                for r in 0..x.rows() {
                    let lse = out.data()[r];
                    for (j, &v) in x.row(r).iter().enumerate() {
                        let valid = mask.as_ref().map_or(true, |m| m[r * c + j]);
                        da.push(if valid { gd[r] * (v - lse).exp() } else { T::zero() });
                    }
                }
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = out.cols();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let n = T::of(c as f64);
                    let mut dx = Vec::with_capacity(out.numel());
                    for (r, (gr, hr)) in gd.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<T> = gr.iter().zip(gam).map(|(&gg, &w)| gg * w).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&d, &h)| d * h).sum::<T>() / n;
                        dx.extend(dh.iter().zip(hr).map(|(&d, &h)| rstd[r] * (d - mean_dh - h * mean_dh_h)));
                    }
                    self.acc(grads, *x, self.like(*x, dx));
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.acc(grads, *gamma, self.like(*gamma, dg));
                    self.acc(grads, *beta, self.like(*beta, db));
                }
            }
            Op::Dropout { a, mask } => {
                self.acc(grads, *a, self.like(*a, gd.iter().zip(mask).map(|(&x, &m)| x * m).collect()));
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, self.like(*a, gd.iter().zip(x).map(|(&gg, &v)| gg * gelu_grad(v)).collect()));
            }
            Op::GatherRows { a, idx } => {
                if self.requires_grad(*a) {
                    let c = out.cols();
                    let mut da = vec![T::zero(); self.value(*a).numel()];
                    for (k, i) in idx.iter().enumerate() {
                        if let Some(r) = *i {
                            for j in 0..c {
                                da[r * c + j] += gd[k * c + j];
                            }
                        }
                    }
                    self.acc(grads, *a, self.like(*a, da));
                }
            }
            Op::SliceCols { a, start } => {
                let full = self.value(*a).cols();
                let len = out.cols();
                let mut da = vec![T::zero(); self.value(*a).numel()];
                for (r, gr) in gd.chunks(len).enumerate() {
                    da[r * full + start..r * full + start + len].copy_from_slice(gr);
                }
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(self.value(p).numel());
                        for gr in gd.chunks(total) {
                            dp.extend_from_slice(&gr[offset..offset + w]);
                        }
                        self.acc(grads, p, self.like(p, dp));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(grads, p, self.like(p, gd[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::SelectRows { take_a, a, b } => {
                let c = out.cols();
                let mut da = vec![T::zero(); out.numel()];
                let mut db = vec![T::zero(); out.numel()];
                for (r, &t) in take_a.iter().enumerate() {
                    let dst = if t { &mut da } else { &mut db };
                    dst[r * c..(r + 1) * c].copy_from_slice(&gd[r * c..(r + 1) * c]);
                }
                self.acc(grads, *a, self.like(*a, da));
                self.acc(grads, *b, self.like(*b, db));
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, self.like(*a, gd.to_vec()));
            }
            Op::L2NormRows { a, eps, norms } => {
                let x = self.value(*a);
                let c = x.cols();
                let mut da = Vec::with_capacity(x.numel());
                for r in 0..x.rows() {
                    let (xr, gr) = (x.row(r), &gd[r * c..(r + 1) * c]);
                    let n = norms[r];
                    let s = n + *eps;
                    let gx: T = gr.iter().zip(xr).map(|(&gg, &v)| gg * v).sum();
                    let coef = if n > T::zero() { gx / (s * s * n) } else { T::zero() };
                    da.extend(gr.iter().zip(xr).map(|(&gg, &v)| gg / s - coef * v));
                }
                self.acc(grads, *a, self.like(*a, da));
            }
            Op::Pick { a, idx } => {
                let c = self.value(*a).cols();
                let mut da = vec![T::zero(); self.value(*a).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    da[r * c + i] = gd[r];
                }
                self.acc(grads, *a, self.like(*a, da));
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

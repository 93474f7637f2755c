use super::{KernelError, Real};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, KernelError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(KernelError::Shape {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self, KernelError> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    /// Builds a `rows × cols` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, KernelError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(KernelError::Shape {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `(numel / cols) × cols`.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> Result<T, KernelError> {
        if self.data.len() != 1 {
            return Err(KernelError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, KernelError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(KernelError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<(), KernelError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(KernelError::NonFinite { op })
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shapes and contents.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Result<Self, KernelError> {
        if self.shape.len() != 2 {
            return Err(KernelError::Shape {
                op: "transpose",
                detail: format!("expected 2-d, got {:?}", self.shape),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// 2-d matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self, KernelError> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(KernelError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape, other.shape),
            });
        }
        let out = gemm(&self.data, &other.data, m, k, n, Trans::None);
        Self::new(vec![m, n], out)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Self, KernelError> {
        if axis >= self.shape.len() {
            return Err(KernelError::Shape {
                op: "softmax",
                detail: format!("axis {} out of range for {:?}", axis, self.shape),
            });
        }
        self.ensure_finite("softmax")?;
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        let mut buf = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.data[at(j)];
                }
                softmax_in_place(&mut buf, None);
                for (j, &b) in buf.iter().enumerate() {
                    out[at(j)] = b;
                }
            }
        }
        Self::new(self.shape.clone(), out)
    }
}

pub(crate) fn dims2<T>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize), KernelError> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        s => Err(KernelError::Shape {
            op,
            detail: format!("expected 2-d, got {:?}", s),
        }),
    }
}

pub(crate) fn dims3<T>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize), KernelError> {
    match t.shape.as_slice() {
        [g, r, c] => Ok((*g, *r, *c)),
        s => Err(KernelError::Shape {
            op,
            detail: format!("expected 3-d, got {:?}", s),
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Trans {
    None,
    /// `A · Bᵀ`, B stored as `n × k`.
    B,
    /// `Aᵀ · B`, A stored as `k × m`.
    A,
}

/// `m × n` product of `a` and `b` with inner size `k`.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, trans: Trans) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    match trans {
        Trans::None => gemm_rows(a, b, &mut out, m, k, n),
        Trans::B => {
            // Same summation order over k as a dot product, but the inner loop runs over n.
            let mut bt = vec![T::zero(); k * n];
            for j in 0..n {
                for p in 0..k {
                    bt[p * n + j] = b[j * k + p];
                }
            }
            gemm_rows(a, &bt, &mut out, m, k, n);
        }
        Trans::A => {
            for p in 0..k {
                let arow = &a[p * m..(p + 1) * m];
                let brow = &b[p * n..(p + 1) * n];
                for (i, &av) in arow.iter().enumerate() {
                    if av == T::zero() {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
    out
}

fn gemm_rows<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Max-subtracted softmax over `xs`; entries with `valid[j] == false` become 0.
/// A row with no valid entry becomes all zeros.
pub(crate) fn softmax_in_place<T: Real>(xs: &mut [T], valid: Option<&[bool]>) {
    let keep = |j: usize| valid.map_or(true, |v| v[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in xs.iter().enumerate() {
        if keep(j) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        xs.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, x) in xs.iter_mut().enumerate() {
        if keep(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = T::zero();
        }
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Log-sum-exp over the valid entries of `xs`; `-inf` when none are valid.
pub(crate) fn logsumexp<T: Real>(xs: &[T], valid: Option<&[bool]>) -> T {
    let keep = |j: usize| valid.map_or(true, |v| v[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in xs.iter().enumerate() {
        if keep(j) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        return max;
    }
    let mut sum = T::zero();
    for (j, &x) in xs.iter().enumerate() {
        if keep(j) {
            sum += (x - max).exp();
        }
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_values() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::<f32>::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, 7.25]).unwrap();
        let c = a.matmul(&Tensor::identity(3)).unwrap();
        assert!(c.bit_eq(&a));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(KernelError::Shape { .. })));
    }

    #[test]
    fn gemm_transposed_variants_agree() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3, 2], &[2.0, 1.0, 0.0, -3.0, 1.5, 2.0]).unwrap();
        let direct = a.matmul(&b).unwrap();
        let bt = b.transpose().unwrap();
        let via_b = gemm(a.data(), bt.data(), 2, 3, 2, Trans::B);
        let at = a.transpose().unwrap();
        let via_a = gemm(at.data(), b.data(), 2, 3, 2, Trans::A);
        assert_eq!(direct.data(), via_b.as_slice());
        assert_eq!(direct.data(), via_a.as_slice());
    }

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        let t = Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap();
        assert_eq!(t.softmax(0).unwrap().data(), &[0.5, 0.5]);

        let x = Tensor::<f64>::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap();
        let shifted = Tensor::<f64>::from_f64(&[3], &[100.3, 98.8, 102.0]).unwrap();
        let d = x.softmax(0).unwrap().max_abs_diff(&shifted.softmax(0).unwrap());
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // exp(k) / (e + e^2 + e^3), evaluated independently.
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expected = [1f64.exp() / denom, 2f64.exp() / denom, 3f64.exp() / denom];
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let y = x.softmax(0).unwrap();
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((expected[0] - 0.090_030_573_170_380_46).abs() < 1e-15);
    }

    #[test]
    fn softmax_non_last_axis() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::<f32>::from_f64(&[2], &[f64::NAN, 0.0]).unwrap();
        assert!(matches!(x.softmax(0), Err(KernelError::NonFinite { .. })));
    }

    #[test]
    fn masked_softmax_zeroes_invalid() {
        let mut xs = [1.0f64, 5.0, 2.0];
        softmax_in_place(&mut xs, Some(&[true, false, true]));
        assert_eq!(xs[1], 0.0);
        assert!((xs[0] + xs[2] - 1.0).abs() < 1e-15);
        let mut none = [1.0f64, 2.0];
        softmax_in_place(&mut none, Some(&[false, false]));
        assert_eq!(none, [0.0, 0.0]);
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}

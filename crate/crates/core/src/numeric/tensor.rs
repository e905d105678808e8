use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Every extent is positive and `data.len()` equals the product of the
/// extents. A rank-0 tensor holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Binary elementwise operator kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ElemOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ElemOp::Add => a + b,
            ElemOp::Sub => a - b,
            ElemOp::Mul => a * b,
            ElemOp::Div => a / b,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElemOp::Add => "add",
            ElemOp::Sub => "sub",
            ElemOp::Mul => "mul",
            ElemOp::Div => "div",
        }
    }
}

/// Right-hand operand of an elementwise op: same-shape tensor or scalar.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor from external data, rejecting inconsistent extents
    /// and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_extents(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("extents imply {n} elements, data has {}", data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {pos} = {} at construction",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor; callers guarantee the shape invariant.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        assert!(n > 0, "tensor extents must be positive: {shape:?}");
        Tensor::from_raw(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_raw(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        assert!(n > 0, "tensor extents must be positive: {shape:?}");
        Tensor::from_raw(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_extents(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data.clone()))
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Tensor> {
        let n = check_extents(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise op with scalar-vs-tensor or equal-shape broadcasting only.
    pub fn elementwise(op: ElemOp, a: &Tensor, b: Operand<'_>) -> Result<Tensor> {
        match b {
            Operand::Scalar(s) => Ok(a.map(|v| op.apply(v, s))),
            Operand::Tensor(b) if b.shape == a.shape => {
                Ok(a.zip_map(b, |x, y| op.apply(x, y)).expect("shapes checked"))
            }
            Operand::Tensor(b) if b.rank() == 0 => {
                let s = b.data[0];
                Ok(a.map(|v| op.apply(v, s)))
            }
            Operand::Tensor(b) => Err(Error::ShapeMismatch {
                op: op.name(),
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            }),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        Self::elementwise(ElemOp::Add, self, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        Self::elementwise(ElemOp::Sub, self, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        Self::elementwise(ElemOp::Mul, self, Operand::Tensor(other))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    /// `self += c * other`, in place.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Leading extent, i.e. batch size for `[B, ...]` tensors.
    pub fn batch_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per leading index.
    pub fn item_len(&self) -> usize {
        self.data.len() / self.batch_len()
    }

    /// Item `i` of a batched tensor, keeping a leading extent of 1.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let b = self.batch_len();
        if self.rank() == 0 || i >= b {
            return Err(Error::IndexOutOfRange {
                op: "batch_item",
                index: i,
                extent: b,
            });
        }
        let n = self.item_len();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor::from_raw(
            shape,
            self.data[i * n..(i + 1) * n].to_vec(),
        ))
    }

    /// Selects the given leading indices into a new batch.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let b = self.batch_len();
        let n = self.item_len();
        if indices.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![0],
                reason: "empty selection".into(),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= b {
                return Err(Error::IndexOutOfRange {
                    op: "select_batch",
                    index: i,
                    extent: b,
                });
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor::from_raw(shape, data))
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![0],
            reason: "concat of zero tensors".into(),
        })?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            if p.rank() == 0 || &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat_batch",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor::from_raw(shape, data))
    }

    /// Plain matrix product `[m,k] x [k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        super::kernels::gemm(
            m,
            k,
            n,
            1.0,
            &self.data,
            (k as isize, 1),
            &other.data,
            (n as isize, 1),
            0.0,
            &mut out,
        );
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    /// Row-wise argmax of a `[B, K]` tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "argmax_rows expects rank 2".into(),
            });
        }
        let k = self.shape[1];
        Ok(self
            .data
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_vectors() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_one_is_identity() {
        let a = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.7 - 1.0);
        let out = Tensor::elementwise(ElemOp::Mul, &a, Operand::Scalar(1.0)).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn unequal_shapes_are_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn construction_rejects_non_finite_and_bad_extents() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap(), a);

        let r = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);
        assert!(c.matmul(&c).is_err());
    }

    #[test]
    fn batch_selection_round_trips() {
        let t = Tensor::from_fn(&[4, 2, 2], |i| i as f64);
        let parts: Vec<_> = (0..4).map(|i| t.batch_item(i).unwrap()).collect();
        assert_eq!(Tensor::concat_batch(&parts).unwrap(), t);
        let sel = t.select_batch(&[2, 0]).unwrap();
        assert_eq!(sel.shape(), &[2, 2, 2]);
        assert_eq!(sel.data()[0], 8.0);
        assert!(t.select_batch(&[4]).is_err());
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 2.0, 2.0, -1.0, -3.0, -2.0]).unwrap();
        assert_eq!(t.argmax_rows().unwrap(), vec![1, 0]);
    }
}

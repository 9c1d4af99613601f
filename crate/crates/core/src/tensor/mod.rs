//! Dense row-major `f64` tensors and a tape for reverse-mode gradients.
//!
//! [`Tensor`] is a plain value: shape plus flat data. Differentiation happens
//! on a [`Tape`], which records primitive operations over [`Var`] handles and
//! replays adjoints backward. Gradient buffers live on the tape rather than
//! on the tensors, so parameters can be borrowed by many tapes at once.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` covers `data` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Domain(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Domain("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (leading dimension; 1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }
}

fn as_matrix(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

/// Matrix product of `a` (m×k) and `b` (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a).ok_or_else(|| Error::dim("matmul", a.shape(), b.shape()))?;
    let (k2, n) = as_matrix(b).ok_or_else(|| Error::dim("matmul", a.shape(), b.shape()))?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax of a vector.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = vec![0.0; logits.len()];
    kernels::softmax(logits.data(), &mut out);
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over rows of `-log softmax(logits_t)[target_t]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (t, v) = as_matrix(logits)
        .ok_or_else(|| Error::dim("cross_entropy", logits.shape(), &[targets.len()]))?;
    if t != targets.len() {
        return Err(Error::dim(
            "cross_entropy",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let mut total = 0.0;
    for (row, &target) in targets.iter().enumerate() {
        if target >= v {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: target,
                bound: v,
            });
        }
        total += kernels::neg_log_softmax_at(logits.row(row), target);
    }
    Ok(total / t as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn shape_must_cover_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().rows(), 2);
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);

        let col = Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &col).unwrap(), col);

        let ones = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::vector(vec![0.0; 4]).unwrap()).unwrap();
        assert!(close(u.data(), &[0.25; 4], 1e-15));

        for c in [-30.0, 0.0, 2.5, 400.0] {
            let s = softmax(&Tensor::vector(vec![c, c + 3f64.ln()]).unwrap()).unwrap();
            assert!(close(s.data(), &[0.25, 0.75], 1e-12), "{c}: {:?}", s.data());
        }

        // e^2, e^1, e^0, e^-1 over their sum
        let z: f64 = [2.0f64, 1.0, 0.0, -1.0].iter().map(|x| x.exp()).sum();
        let expected: Vec<f64> = [2.0f64, 1.0, 0.0, -1.0]
            .iter()
            .map(|x| x.exp() / z)
            .collect();
        let s = softmax(&Tensor::vector(vec![2.0, 1.0, 0.0, -1.0]).unwrap()).unwrap();
        assert!(close(s.data(), &expected, 1e-15));
        assert!(close(s.data(), &[0.6439, 0.2369, 0.0871, 0.0321], 1e-4));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(
            softmax(&Tensor::vector(vec![f64::NAN]).unwrap()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!((cross_entropy(&uniform, &[0]).unwrap() - 3f64.ln()).abs() < 1e-15);

        let peaked = Tensor::matrix(1, 3, vec![80.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&peaked, &[0]).unwrap() < 1e-30);

        let two = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((cross_entropy(&two, &[0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.1269).abs() < 1e-4);

        assert!(matches!(
            cross_entropy(&two, &[2]),
            Err(Error::Index { .. })
        ));
    }
}

//! Dense row-major tensors and the reverse-mode differentiation graph.
//!
//! [`Tensor`] is a plain value: a shape plus a flat row-major buffer. All
//! differentiable computation happens on a [`Graph`], which records ops on a
//! tape and replays them backwards; see [`graph`].

mod conv;
mod graph;

pub use conv::{conv_out_dim, PadMode};
pub use graph::{Graph, Var};

use crate::error::{Error, Result};
use crate::num::{sign, Scalar};

/// N-dimensional dense array, row-major.
///
/// Invariants: `product(shape) == data.len()` and every stored value is
/// finite. Both are enforced at construction; ops that could break
/// finiteness (exp-like functions, division) use guarded formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor::new",
                format!("shape {:?} holds {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor::new".into()));
        }
        Ok(Tensor { shape, data })
    }

    /// Construct without the finiteness scan. Callers must guarantee finite
    /// values; used on hot paths where the data was just produced by a
    /// finite-preserving kernel.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel])
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: T) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(
                "tensor::item",
                format!("expected a single element, shape is {:?}", self.shape),
            ))
        }
    }

    /// Element at a full multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.flat_index(index)]
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {} out of bounds at axis {}", ix, i);
            flat = flat * dim + ix;
        }
        flat
    }

    /// Same data, new shape (must preserve element count).
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Self::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// Elementwise sign with sign(0) = 0. Non-differentiable; operates on
    /// plain values (detached gradients, perturbation construction).
    pub fn sign(&self) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| sign(v)).collect())
    }

    /// Clamp every element into [lo, hi].
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| v.max(lo).min(hi)).collect(),
        )
    }

    /// Row-wise argmax for a [N, K] tensor; ties break to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                "argmax_rows",
                format!("expected [N, K], got {:?}", self.shape),
            ));
        }
        let k = self.shape[1];
        if k == 0 {
            return Err(Error::EmptyInput("argmax_rows: zero classes"));
        }
        Ok(self
            .data
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Row-wise stabilized softmax for a [N, K] tensor.
    pub fn softmax_rows(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                "softmax_rows",
                format!("expected [N, K], got {:?}", self.shape),
            ));
        }
        let k = self.shape[1];
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(k) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let denom: T = exps.iter().cloned().sum();
            out.extend(exps.into_iter().map(|e| e / denom));
        }
        Self::new(self.shape.clone(), out)
    }
}

/// Convolution kernel: a weight tensor of shape
/// `[out_channels, in_channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<T: Scalar> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub weights: Tensor<T>,
}

impl<T: Scalar> Kernel<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 {
            return Err(Error::shape(
                "kernel::new",
                format!("expected [O, I, H, W], got {:?}", s),
            ));
        }
        Ok(Kernel {
            out_channels: s[0],
            in_channels: s[1],
            height: s[2],
            width: s[3],
            weights,
        })
    }

    pub fn from_coeffs(
        out_channels: usize,
        in_channels: usize,
        height: usize,
        width: usize,
        coeffs: Vec<T>,
    ) -> Result<Self> {
        Self::new(Tensor::new(
            vec![out_channels, in_channels, height, width],
            coeffs,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn argmax_ties_break_low() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.5, 0.7, 0.7]).unwrap();
        assert_eq!(t.argmax_rows().unwrap(), vec![0, 1]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let p = t.softmax_rows().unwrap();
        for row in p.data().chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn kernel_requires_rank_four() {
        let w = Tensor::new(vec![3, 3], vec![0.0; 9]).unwrap();
        assert!(Kernel::new(w).is_err());
    }
}

use crate::error::{Result, SsmtError};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense multi-dimensional f32 array in row-major order.
///
/// The gradient buffer is populated by [`crate::autodiff::Tape::backward`]
/// for leaf tensors that were registered with `requires_grad = true`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Build a tensor from raw data. The data length must equal the shape product.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(SsmtError::Dim(format!(
                "zero-length dimension in shape {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(SsmtError::Dim(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init with mean 0 and the given standard deviation.
    pub fn randn(rng: &mut impl Rng, shape: &[usize], std: f32) -> Self {
        let numel: usize = shape.iter().product();
        let normal = Normal::new(0.0f32, std.max(f32::MIN_POSITIVE)).expect("valid std");
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data, new shape (numel must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(self.data.clone(), shape)
    }

    /// NaN/Inf anywhere in the data is a detectable fault state.
    pub fn has_nonfinite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.numel(), 4);
        assert_eq!(t.shape(), &[2, 2]);
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(Tensor::from_vec(vec![], &[0]).is_err());
    }

    #[test]
    fn nonfinite_detection() {
        let mut t = Tensor::zeros(&[3]);
        assert!(!t.has_nonfinite());
        t.data_mut()[1] = f32::NAN;
        assert!(t.has_nonfinite());
        t.data_mut()[1] = f32::NEG_INFINITY;
        assert!(t.has_nonfinite());
    }
}

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Globally unique identity of a tensor. Clones share the id; every op output
/// and constructor call mints a fresh one. Gradients are keyed by this id.
pub type TensorId = u64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major f32 tensor. Immutable after creation; cheap to clone
/// (the buffer is shared). `requires_grad` marks gradient leaves.
#[derive(Debug, Clone)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor, checking the shape/data contract and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArg {
                op: "from_vec",
                msg: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Self {
            id: fresh_id(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    /// Internal constructor for op outputs: data already validated finite.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_op(shape.to_vec(), vec![0.0; n], false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_op(shape.to_vec(), vec![1.0; n], false)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f32) -> Result<Self> {
        Self::from_vec(&[1], vec![value])
    }

    /// Truncated-normal initialization: samples from N(0, std²) rejected
    /// outside ±2·std. Used for all learnable tensors unless stated otherwise.
    pub fn trunc_normal<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be positive");
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                data.push(v);
            }
        }
        Self::from_op(shape.to_vec(), data, false)
    }

    /// Mark this tensor as a gradient leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar value accessor; contract error when the tensor is not scalar.
    pub fn item(&self) -> Result<f32> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "item() called on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Exact bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Validates op output for finiteness; the error names the offending op.
pub(crate) fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::InvalidArg { .. }));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(&[2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn trunc_normal_respects_bounds_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::trunc_normal(&[64, 64], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let t2 = Tensor::trunc_normal(&[64, 64], 0.02, &mut rng2);
        assert!(t.bit_eq(&t2));
    }

    #[test]
    fn clone_shares_id() {
        let t = Tensor::zeros(&[3]);
        let c = t.clone();
        assert_eq!(t.id(), c.id());
    }
}

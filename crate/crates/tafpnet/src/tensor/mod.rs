//! Dense tensors and the reverse-mode gradient tape.
//!
//! Storage is a flat row-major `Vec<f64>` (last axis contiguous) plus a shape
//! vector. Everything is 64-bit so finite-difference checks are meaningful.
//! Plain values live in [`Tensor`]; tape participation happens through
//! [`Var`] handles created on a [`GradTape`], and learnable leaves through
//! [`Parameter`].

mod conv;
mod ops;
mod param;
mod snapshot;
mod tape;

pub use conv::{conv3d_forward, conv3d_out_shape, same_pad};
pub use param::{ParamSet, Parameter};
pub use snapshot::{read_snapshot, write_snapshot};
pub use tape::{GradTape, Var, cross_entropy_rows, stack_rows, topk_indices, topk_select};

use crate::error::{Error, Result};

/// Dense multi-dimensional array of f64 values.
///
/// Invariants: `data.len() == shape.iter().product()` and every element is
/// finite. Both are enforced at construction, so every operator boundary that
/// builds its output through [`Tensor::new`] rejects NaN/Inf.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating the shape/length invariant and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but without the finiteness scan; callers must
    /// already know the data is finite (e.g. freshly zeroed buffers).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![1.0; numel])
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Multi-index access, row-major.
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let i = self.flat_index(idx);
        self.data[i] = value;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds on axis {i} (extent {ext})");
            flat = flat * ext + ix;
        }
        flat
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Uniform random tensor in [lo, hi), deterministic under the given RNG.
pub fn rand_uniform<R: rand::Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// He-uniform init for conv kernels `[C_out, C_in, kt, kh, kw]`:
/// bound = sqrt(6 / fan_in) with fan_in = C_in*kt*kh*kw.
pub fn he_uniform<R: rand::Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    assert_eq!(shape.len(), 5, "he_uniform expects a conv kernel shape");
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    rand_uniform(rng, shape, -bound, bound)
}

/// Xavier-uniform init for linear weights `[d_out, d_in]` or conv kernels
/// `[C_out, C_in, kt, kh, kw]`: bound = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<R: rand::Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let (fan_in, fan_out) = match shape.len() {
        2 => (shape[1], shape[0]),
        5 => {
            let taps: usize = shape[2..].iter().product();
            (shape[1] * taps, shape[0] * taps)
        }
        _ => panic!("xavier_uniform expects a linear or conv weight shape"),
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rand_uniform(rng, shape, -bound, bound)
}

//! Dense row-major tensors and the small numeric operations shared by the
//! forward pass, the attack loop, and the evaluation harness.

use crate::error::TensorError;
use serde::{Deserialize, Serialize};

/// Scalar type for all numerics. f64 by default; the `f32` feature narrows it.
#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

/// Immutable dense tensor. Shape `[d0, d1, ...]`, row-major data.
///
/// Images are `[C, H, W]` with pixel values in `[0, 255]`; dense vectors are
/// `[n]`; weight matrices are `[out, in]`; conv kernels are `[O, C, kh, kw]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    /// Builds a tensor, validating length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite {
                context: "tensor construction",
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels whose outputs are finite by
    /// construction; skips the validation pass.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<Real>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: Real) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// A single-element tensor; binary tape ops broadcast these.
    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Real {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Elementwise map. The closure must keep values finite.
    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(
        &self,
        other: &Tensor,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                found: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Largest element (first occurrence on ties). Errors on empty tensors.
    pub fn max_element(&self) -> Result<(usize, Real), TensorError> {
        let mut best: Option<(usize, Real)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.ok_or(TensorError::Rank {
            op: "max_element",
            expected: "a non-empty tensor",
            found: self.shape.clone(),
        })
    }
}

/// Sum of absolute values.
pub fn l1_norm(t: &Tensor) -> Real {
    t.data.iter().map(|v| v.abs()).sum()
}

/// Root mean squared difference: `sqrt(sum((a-b)^2) / N)`.
pub fn rmse(a: &Tensor, b: &Tensor) -> Result<Real, TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let sq: Real = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok((sq / a.len() as Real).sqrt())
}

/// Projects `x` into the l-inf ball of radius `eps` around `origin`,
/// intersected with the value range `[lo, hi]`.
pub fn clip_box(
    x: &Tensor,
    origin: &Tensor,
    eps: Real,
    lo: Real,
    hi: Real,
) -> Result<Tensor, TensorError> {
    if x.shape != origin.shape {
        return Err(TensorError::ShapeMismatch {
            left: x.shape.clone(),
            right: origin.shape.clone(),
        });
    }
    if !(eps >= 0.0 && lo <= hi && eps.is_finite()) {
        return Err(TensorError::InvalidBox { eps, lo, hi });
    }
    let data = x
        .data
        .iter()
        .zip(&origin.data)
        .map(|(&v, &o)| v.clamp(o - eps, o + eps).clamp(lo, hi))
        .collect();
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Scales `g` so its mean absolute value is 1: `g / (||g||_1 / N)`.
/// The attack update (Eq. 2 style) steps along this normalized direction.
pub fn normalize_avg_l1(g: &Tensor) -> Result<Tensor, TensorError> {
    let norm = l1_norm(g);
    if norm == 0.0 {
        return Err(TensorError::ZeroNorm);
    }
    let scale = g.len() as Real / norm;
    Ok(g.map(|v| v * scale))
}

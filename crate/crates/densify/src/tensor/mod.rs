//! Dense f64 tensors and a minimal reverse-mode differentiation engine.
//!
//! The engine records operations on a per-forward-pass [`Graph`]; persistent
//! parameters live outside any graph and are re-linked as leaves each step.
//! Backward passes are expressed in terms of the same recorded operations, so
//! gradients returned with `keep_graph` are themselves differentiable — this
//! is what makes Hessian-vector products (and therefore the hypergradient)
//! possible without ever materializing a second-derivative matrix.

mod graph;

pub use graph::{Graph, ReduceKind, Var};

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid parameter: {what}")]
    InvalidParameter { op: &'static str, what: String },
    #[error("grad: output must be scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("grad: input #{index} is not reachable from the output")]
    Unreachable { index: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} is empty in shape {shape:?}")]
    EmptyAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

/// Dense row-major f64 tensor. A plain value: links into a computation graph
/// only exist as [`Var`] handles returned by [`Graph`] methods.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of equal element count. Value-level only;
    /// graph nodes never reshape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
        let mut strides = vec![0; shape.len()];
        let mut s = 1;
        for i in (0..shape.len()).rev() {
            strides[i] = s;
            s *= shape[i];
        }
        strides
    }
}

/// Broadcast two shapes by the usual right-aligned rules.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Dimension `i` counted from the left after padding `shape` with leading 1s
/// up to `rank`; `i` here is the distance from the right.
fn dim_from_right(shape: &[usize], i: usize) -> usize {
    if i < shape.len() {
        shape[shape.len() - 1 - i]
    } else {
        1
    }
}

/// True when `from` broadcasts to exactly `to`.
pub(crate) fn broadcastable_to(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let offset = to.len() - from.len();
    for (d, &extent) in from.iter().enumerate() {
        if extent != to[offset + d] && extent != 1 {
            return false;
        }
    }
    true
}

/// Apply `f` elementwise over broadcast operands.
pub(crate) fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    // Fast paths cover almost every call the models make.
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.numel() == 1 && broadcastable_to(&b.shape, &a.shape) {
        let y = b.data[0];
        return Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| f(x, y)).collect(),
        });
    }
    if a.numel() == 1 && broadcastable_to(&a.shape, &b.shape) {
        let x = a.data[0];
        return Ok(Tensor {
            shape: b.shape.clone(),
            data: b.data.iter().map(|&y| f(x, y)).collect(),
        });
    }
    let out_shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let numel: usize = out_shape.iter().product();
    let mut data = vec![0.0; numel];
    let a_strides = padded_broadcast_strides(&a.shape, &out_shape);
    let b_strides = padded_broadcast_strides(&b.shape, &out_shape);
    let out_strides = Tensor::strides(&out_shape);
    for (flat, slot) in data.iter_mut().enumerate() {
        let mut ai = 0;
        let mut bi = 0;
        for d in 0..out_shape.len() {
            let coord = (flat / out_strides[d]) % out_shape[d];
            ai += coord * a_strides[d];
            bi += coord * b_strides[d];
        }
        *slot = f(a.data[ai], b.data[bi]);
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Strides of `shape` right-aligned into `out_shape`, with 0 on broadcast dims.
fn padded_broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = Tensor::strides(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0; out_shape.len()];
    for d in 0..shape.len() {
        out[offset + d] = if shape[d] == 1 { 0 } else { strides[d] };
    }
    out
}

/// Expand `t` to `to` (must be broadcast-compatible).
pub(crate) fn broadcast_to_kernel(t: &Tensor, to: &[usize]) -> Tensor {
    if t.shape() == to {
        return t.clone();
    }
    let numel: usize = to.iter().product();
    let mut data = vec![0.0; numel];
    let strides = padded_broadcast_strides(&t.shape, to);
    let out_strides = Tensor::strides(to);
    for (flat, slot) in data.iter_mut().enumerate() {
        let mut ti = 0;
        for d in 0..to.len() {
            let coord = (flat / out_strides[d]) % to[d];
            ti += coord * strides[d];
        }
        *slot = t.data[ti];
    }
    Tensor {
        shape: to.to_vec(),
        data,
    }
}

/// Reduce `t` down to `to` by summing over leading and broadcast dimensions.
pub(crate) fn sum_to_kernel(t: &Tensor, to: &[usize]) -> Tensor {
    if t.shape() == to {
        return t.clone();
    }
    let numel: usize = to.iter().product();
    let mut data = vec![0.0; numel];
    let to_strides_in = padded_broadcast_strides(to, &t.shape);
    let in_strides = Tensor::strides(&t.shape);
    for flat in 0..t.data.len() {
        let mut oi = 0;
        for d in 0..t.shape.len() {
            let coord = (flat / in_strides[d]) % t.shape[d];
            oi += coord * to_strides_in[d];
        }
        data[oi] += t.data[flat];
    }
    Tensor {
        shape: to.to_vec(),
        data,
    }
}

/// Pairwise (cascade) summation: better rounding behavior than a running sum,
/// and exact for any power-of-two count of identical addends.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

#[cfg(test)]
mod value_tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_rejected() {
        let err = Tensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { .. }));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(
            broadcast_shape("t", &[4, 1, 3], &[2, 3]).unwrap(),
            vec![4, 2, 3]
        );
        assert_eq!(broadcast_shape("t", &[], &[5, 2]).unwrap(), vec![5, 2]);
        assert!(broadcast_shape("t", &[3], &[4]).is_err());
    }

    #[test]
    fn sum_to_inverts_broadcast_structure() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let b = broadcast_to_kernel(&t.reshaped(&[1, 2, 3]).unwrap(), &[4, 2, 3]);
        let s = sum_to_kernel(&b, &[1, 2, 3]);
        for (x, y) in s.data().iter().zip(t.data()) {
            assert_eq!(*x, y * 4.0);
        }
    }

    #[test]
    fn pairwise_sum_exact_for_pow2_identical() {
        let x = 1.0 + f64::EPSILON;
        for n in [1usize, 2, 4, 8, 64] {
            let v = vec![x; n];
            assert_eq!(pairwise_sum(&v) / n as f64, x);
        }
    }
}

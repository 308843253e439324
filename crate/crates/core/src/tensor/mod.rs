//! Dense tensors and the reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain row-major value type; [`Tape`] records primitive
//! operations during a forward pass and replays them in reverse to produce
//! gradients with respect to any leaf (parameters or inputs). The raw
//! forward/backward kernels live in [`kernels`] and are shared between the
//! recording path and the tape-free inference path.

pub mod kernels;
mod tape;

pub use tape::{Gradients, NodeId, Tape};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array of scalars in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Marks the tensor as a differentiation leaf when registered on a tape.
    pub requires_grad: bool,
    /// Gradient buffer, same shape as `data` when present.
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, checking that the shape matches the data length.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Attaches a gradient buffer; the shape invariant is enforced.
    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("gradient length {} vs data length {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// True when every stored value (and gradient value) is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let mut m = S::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (*a - *b).abs();
            if d > m {
                m = d;
            }
        }
        Ok(m)
    }
}

/// Cross-correlation of `input` [N,C,H,W] with `kernel` [F,C,kH,kW].
///
/// Output height is `(H + 2*padding - kH) / stride + 1` (floor), and likewise
/// for the width. Tape-free; use [`Tape::conv2d`] when gradients are needed.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (out_shape, _) = kernels::conv2d_out_shape(input.shape(), kernel.shape(), stride, padding)?;
    let mut out = Tensor::zeros(out_shape);
    kernels::conv2d_forward(
        input.data(),
        input.shape(),
        kernel.data(),
        kernel.shape(),
        stride,
        padding,
        out.data_mut(),
    );
    Ok(out)
}

/// Row-wise stabilized softmax of a [N, C] tensor.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    if logits.shape().len() != 2 {
        return Err(Error::shape(
            "softmax_rows",
            format!("expected [n, classes], got {:?}", logits.shape()),
        ));
    }
    let classes = logits.shape()[1];
    let mut out = Tensor::zeros(logits.shape().to_vec());
    kernels::softmax_rows(logits.data(), classes, out.data_mut());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn grad_shape_is_enforced() {
        let mut t = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert!(t.is_finite());
    }

    #[test]
    fn conv2d_scaling_kernel() {
        // 1x1x3x3 ones against a single 2.0 kernel tap.
        let input = Tensor::from_vec(vec![1, 1, 3, 3], vec![1.0f64; 9]).unwrap();
        let kernel = Tensor::from_vec(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let out = conv2d(&input, &kernel, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_full_window_sum() {
        let input = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let kernel = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0f64; 4]).unwrap();
        let out = conv2d(&input, &kernel, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn conv2d_names_offending_dims() {
        let input = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let kernel = Tensor::<f64>::zeros(vec![1, 3, 3, 3]);
        let err = conv2d(&input, &kernel, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::from_vec(vec![2, 2], vec![3.0f64, -1.0, 0.0, 0.0]).unwrap();
        let p = softmax_rows(&logits).unwrap();
        for row in p.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(p.data()[2], 0.5);
    }
}

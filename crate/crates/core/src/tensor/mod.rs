//! Dense row-major tensors and the reverse-mode differentiation tape.
//!
//! Everything in the model is built from the handful of operations defined
//! here: matrix products, elementwise activations, softmax, valid 2D
//! convolution and 2D max pooling. Each operation exists twice with shared
//! kernels underneath: as a plain [`Tensor`] method for direct evaluation,
//! and as a [`tape::Tape`] op that records itself for the backward pass.

pub mod gradcheck;
pub(crate) mod kernels;
pub mod tape;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scalar type used for all values and gradients. Double precision by
/// default; the `single-precision` feature switches storage to f32 for
/// faster training runs (gradient checks then lose their guarantees).
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

/// Bytes per stored value, recorded in checkpoint headers.
pub const REAL_WIDTH: u8 = std::mem::size_of::<Real>() as u8;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: left {left:?}, right {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeLenMismatch { shape: Vec<usize>, len: usize },
    #[error("expected rank-{expected} tensor in {op}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("kernel {kernel:?} larger than input {input:?}")]
    KernelTooLarge {
        kernel: Vec<usize>,
        input: Vec<usize>,
    },
    #[error("pooling window {window:?} exceeds input extents {input:?}")]
    WindowTooLarge {
        window: Vec<usize>,
        input: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("row index {row} out of bounds for {rows} rows")]
    RowOutOfBounds { row: usize, rows: usize },
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Elementwise nonlinearity. `h` in the similarity channels is restricted to
/// relu/tanh by the training configuration; sigmoid backs the gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: Real) -> Real {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed in terms of the activation output.
    /// The relu subgradient at 0 is fixed to 0.
    pub fn derivative_from_output(self, y: Real) -> Real {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Sigmoid => write!(f, "sigmoid"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::Relu => write!(f, "relu"),
        }
    }
}

/// Dense n-dimensional array in row-major order with an optional gradient
/// slot of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<Real>,
    grad: Option<Vec<Real>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<Real>) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeLenMismatch {
                shape,
                len: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn from_vec(values: Vec<Real>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            grad: None,
        }
    }

    /// 2D tensor from nested rows. Rows must share a length.
    pub fn from_rows(rows: &[Vec<Real>]) -> TensorResult<Self> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput("from_rows"));
        }
        let cols = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![rows.len(), cols],
                    right: vec![row.len()],
                });
            }
            values.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], values)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Real] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [Real] {
        let numel = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; numel])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, delta: &[Real]) {
        debug_assert_eq!(delta.len(), self.values.len());
        let g = self.grad_mut();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    fn check_finite(&self, op: &'static str) -> TensorResult<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            Err(TensorError::NonFinite { op })
        } else {
            Ok(())
        }
    }

    /// Standard matrix product of a `[p, q]` and a `[q, r]` tensor.
    pub fn matmul(&self, other: &Tensor) -> TensorResult<Tensor> {
        let (p, q) = as_matrix_dims(self, "matmul")?;
        let (q2, r) = as_matrix_dims(other, "matmul")?;
        if q != q2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let values = kernels::matmul(&self.values, &other.values, p, q, r);
        let out = Tensor::new(vec![p, r], values)?;
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// Matrix-vector product of a `[p, q]` tensor and a `[q]` vector.
    pub fn matvec(&self, v: &Tensor) -> TensorResult<Tensor> {
        let (p, q) = as_matrix_dims(self, "matvec")?;
        if v.shape.len() != 1 || v.shape[0] != q {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                left: self.shape.clone(),
                right: v.shape.clone(),
            });
        }
        let values = kernels::matvec(&self.values, &v.values, p, q);
        let out = Tensor::new(vec![p], values)?;
        out.check_finite("matvec")?;
        Ok(out)
    }

    pub fn transpose2d(&self) -> TensorResult<Tensor> {
        let (r, c) = as_matrix_dims(self, "transpose")?;
        Tensor::new(vec![c, r], kernels::transpose(&self.values, r, c))
    }

    pub fn apply_activation(&self, kind: Activation) -> Tensor {
        let values = self.values.iter().map(|&x| kind.apply(x)).collect();
        Tensor {
            shape: self.shape.clone(),
            values,
            grad: None,
        }
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(&self) -> TensorResult<Tensor> {
        if self.shape.len() != 1 || self.values.is_empty() {
            return Err(TensorError::RankMismatch {
                op: "softmax",
                expected: 1,
                shape: self.shape.clone(),
            });
        }
        let values = kernels::softmax(&self.values);
        Tensor::new(self.shape.clone(), values)
    }

    /// Valid (unpadded, stride-1) cross-correlation of a `[C, H, W]` input
    /// with `[F, C, rw, rh]` kernels, one bias per output map, and an
    /// elementwise activation on top.
    pub fn conv2d_valid(
        &self,
        kernels_t: &Tensor,
        biases: &Tensor,
        activation: Activation,
    ) -> TensorResult<Tensor> {
        let (c, h, w) = as_chw(self, "conv2d_valid")?;
        if kernels_t.shape.len() != 4 || kernels_t.shape[1] != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_valid",
                left: self.shape.clone(),
                right: kernels_t.shape.clone(),
            });
        }
        let (f, rw, rh) = (kernels_t.shape[0], kernels_t.shape[2], kernels_t.shape[3]);
        if rw > h || rh > w {
            return Err(TensorError::KernelTooLarge {
                kernel: kernels_t.shape.clone(),
                input: self.shape.clone(),
            });
        }
        if biases.shape != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_valid",
                left: kernels_t.shape.clone(),
                right: biases.shape.clone(),
            });
        }
        let (oh, ow) = (h - rw + 1, w - rh + 1);
        let mut values = kernels::conv2d_valid(
            &self.values,
            c,
            h,
            w,
            &kernels_t.values,
            f,
            rw,
            rh,
            &biases.values,
        );
        values.iter_mut().for_each(|x| *x = activation.apply(*x));
        let out = Tensor::new(vec![f, oh, ow], values)?;
        out.check_finite("conv2d_valid")?;
        Ok(out)
    }

    /// Per-channel max over sliding windows; trailing partial windows are
    /// dropped.
    pub fn maxpool2d(
        &self,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> TensorResult<Tensor> {
        let (c, h, w) = as_chw(self, "maxpool2d")?;
        let (pw, ph) = window;
        if pw == 0 || ph == 0 || pw > h || ph > w {
            return Err(TensorError::WindowTooLarge {
                window: vec![pw, ph],
                input: self.shape.clone(),
            });
        }
        let (sw, sh) = stride;
        let (oh, ow) = kernels::pool_output_dims(h, w, pw, ph, sw, sh);
        let (values, _argmax) = kernels::maxpool2d(&self.values, c, h, w, pw, ph, sw, sh);
        Tensor::new(vec![c, oh, ow], values)
    }
}

pub(crate) fn as_matrix_dims(t: &Tensor, op: &'static str) -> TensorResult<(usize, usize)> {
    if t.shape.len() == 2 {
        Ok((t.shape[0], t.shape[1]))
    } else {
        Err(TensorError::RankMismatch {
            op,
            expected: 2,
            shape: t.shape.clone(),
        })
    }
}

pub(crate) fn as_chw(t: &Tensor, op: &'static str) -> TensorResult<(usize, usize, usize)> {
    if t.shape.len() == 3 {
        Ok((t.shape[0], t.shape[1], t.shape[2]))
    } else {
        Err(TensorError::RankMismatch {
            op,
            expected: 3,
            shape: t.shape.clone(),
        })
    }
}

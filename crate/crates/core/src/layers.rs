//! Trainable layer records.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Tensor4, Vector};

/// Numerical floor added to the running variance before the square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Exponential-moving-average weight of the current batch statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `D×C×k×k`; row `j` is output channel `j`.
    pub kernel: Tensor4<T>,
    pub bias: Option<Vector<T>>,
    pub stride: usize,
    pub padding: usize,
    pub grad_kernel: Tensor4<T>,
    pub grad_bias: Option<Vector<T>>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(kernel: Tensor4<T>, bias: Option<Vector<T>>, stride: usize, padding: usize) -> Self {
        let grad_kernel = Tensor4::zeros(kernel.dims());
        let grad_bias = bias.as_ref().map(|b| vec![T::zero(); b.len()]);
        Self {
            kernel,
            bias,
            stride,
            padding,
            grad_kernel,
            grad_bias,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dims()[2]
    }

    pub fn zero_grad(&mut self) {
        self.grad_kernel.data_mut().fill(T::zero());
        if let Some(g) = self.grad_bias.as_mut() {
            g.fill(T::zero());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<T> {
    pub gamma: Vector<T>,
    pub beta: Vector<T>,
    pub running_mean: Vector<T>,
    pub running_var: Vector<T>,
    pub eps: f64,
    pub momentum: f64,
    pub grad_gamma: Vector<T>,
    pub grad_beta: Vector<T>,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `sqrt(running_var + eps)` per channel, the σ used for inference and fusion.
    pub fn sigma(&self) -> Vector<T> {
        let eps = T::lit(self.eps);
        self.running_var.iter().map(|&v| (v + eps).sqrt()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(T::zero());
        self.grad_beta.fill(T::zero());
    }

    /// Keeps the listed channels.
    pub fn select(&self, keep: &[usize]) -> Self {
        let pick = |v: &Vector<T>| keep.iter().map(|&j| v[j]).collect::<Vec<_>>();
        Self {
            gamma: pick(&self.gamma),
            beta: pick(&self.beta),
            running_mean: pick(&self.running_mean),
            running_var: pick(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
            grad_gamma: vec![T::zero(); keep.len()],
            grad_beta: vec![T::zero(); keep.len()],
        }
    }
}

/// Pointwise `D×D` convolution appended to a target conv-BN pair, plus the
/// binary mask that decides which of its rows are being driven to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Compactor<T> {
    /// `D×D×1×1`.
    pub q: Tensor4<T>,
    /// `true` means mask value 1 (row keeps its objective gradient).
    pub mask: Vec<bool>,
    pub grad: Tensor4<T>,
    /// Node index of the preceding target conv.
    pub owner: usize,
}

impl<T: Scalar> Compactor<T> {
    /// Fresh compactor: identity kernel, all-ones mask.
    pub fn identity(d: usize, owner: usize) -> Self {
        Self {
            q: Tensor4::identity_pointwise(d),
            mask: vec![true; d],
            grad: Tensor4::zeros([d, d, 1, 1]),
            owner,
        }
    }

    pub fn channels(&self) -> usize {
        self.q.dims()[0]
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }
}

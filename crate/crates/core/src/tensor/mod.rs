//! Dense row-major arrays, a reverse-mode gradient tape and the layer
//! primitives the networks are assembled from.

pub mod checkpoint;
mod gemm;
pub mod ops;
pub mod optim;
mod tape;

pub use ops::{
    add, batchnorm, concat_channels, conv2d, cross_entropy_loss, maxpool2, mul, relu,
    softmax_channels, sum, upsample2, BatchNormStats, BnMode, RunningStats, BN_EPSILON,
};
pub use optim::{exponential_lr, sgd_step};
pub use tape::{Backward, Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Dense N-dimensional array of `f64` in row-major order.
///
/// 4-D tensors are laid out as (batch, channels, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "Tensor::item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Extents of a 4-D tensor as (n, c, h, w).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::shape(
                "Tensor::dims4",
                format!("expected a 4-D tensor, got shape {other:?}"),
            )),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Kind of a network layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Relu,
    MaxPool,
    Upsample,
    Softmax,
}

/// Static description of one layer, used to validate and introspect models.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel_size: usize, dilation: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            in_channels,
            out_channels,
            kernel_size,
            dilation,
            stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "layer {:?}: dilation and stride must be positive",
                self.kind
            )));
        }
        if self.dilation > 1 && self.kind != LayerKind::Conv {
            return Err(Error::Config(format!(
                "layer {:?}: dilation {} only allowed on convolutions",
                self.kind, self.dilation
            )));
        }
        if self.kind == LayerKind::Conv && (self.kernel_size == 0 || self.in_channels == 0) {
            return Err(Error::Config("convolution with empty kernel".into()));
        }
        Ok(())
    }

    /// Spatial extent covered by the kernel once gaps are inserted.
    pub fn effective_kernel(&self) -> usize {
        effective_kernel(self.kernel_size, self.dilation)
    }

    /// Same-size padding for stride-1 convolutions with odd kernels.
    pub fn same_padding(&self) -> usize {
        (self.effective_kernel() - 1) / 2
    }
}

pub fn effective_kernel(kernel_size: usize, dilation: usize) -> usize {
    kernel_size + (kernel_size - 1) * (dilation - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn effective_kernel_extent() {
        assert_eq!(effective_kernel(3, 1), 3);
        assert_eq!(effective_kernel(3, 2), 5);
        assert_eq!(effective_kernel(3, 4), 9);
        assert_eq!(LayerSpec::conv(1, 1, 3, 2).same_padding(), 2);
    }

    #[test]
    fn dilation_only_on_conv() {
        let mut spec = LayerSpec::conv(4, 4, 3, 2);
        assert!(spec.validate().is_ok());
        spec.kind = LayerKind::MaxPool;
        assert!(spec.validate().is_err());
        spec.dilation = 0;
        spec.kind = LayerKind::Conv;
        assert!(spec.validate().is_err());
    }
}

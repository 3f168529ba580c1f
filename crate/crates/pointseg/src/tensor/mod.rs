//! Minimal dense tensor core: row-major `f32` tensors plus the forward
//! kernels and reverse-mode tape the network is built from.
//!
//! Feature maps are rank-3 `[height, width, channels]` with no batch
//! dimension; convolution weights are rank-4 `[kh, kw, in, out]`. Tensors
//! are immutable after construction, so clones are cheap (shared storage)
//! and kernels may parallelize internally without races.

pub mod kernels;
pub mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f32]>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is at least 1 and the
    /// buffer length matches the shape product.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must all be at least 1, got {shape:?}"),
            ));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} implies {expect} elements, buffer holds {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; len]).expect("zeros: valid shape")
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Tensor::new(shape, vec![value; len]).expect("filled: valid shape")
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.shape.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// (height, width, channels) of a rank-3 feature map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected rank-3 feature map, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected rank-2 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected rank-4 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    #[inline]
    pub fn at3(&self, h: usize, w: usize, c: usize) -> f32 {
        let (_, width, chans) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(h * width + w) * chans + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar payload of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(
                "tensor",
                format!("item() on shape {:?}", self.shape),
            ))
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, &self.data[..])
        } else {
            write!(
                f,
                "Tensor{:?} [{}, {}, ... {} elements]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

/// Zero-padding policy for convolution-family kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; total padding split with the extra
    /// cell at the trailing edge.
    Same,
    /// No padding; output extent `floor((in - eff_k) / stride) + 1`.
    Valid,
}

/// Geometry of a convolution or transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize), in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel,
            stride: (1, 1),
            dilation: (1, 1),
            padding: Padding::Same,
            in_channels,
            out_channels,
        }
    }

    pub fn k1x1(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new((1, 1), in_channels, out_channels)
    }

    pub fn k3x3(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new((3, 3), in_channels, out_channels)
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: (usize, usize)) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kernel.0 >= 1
            && self.kernel.1 >= 1
            && self.stride.0 >= 1
            && self.stride.1 >= 1
            && self.dilation.0 >= 1
            && self.dilation.1 >= 1
            && self.in_channels >= 1
            && self.out_channels >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("conv_spec", format!("invalid spec {self:?}")))
        }
    }

    /// Kernel extent once dilation gaps are counted.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation.0 + 1,
            (self.kernel.1 - 1) * self.dilation.1 + 1,
        )
    }

    /// Convolution output extent for an input extent.
    pub fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ekh, ekw) = self.effective_kernel();
        match self.padding {
            Padding::Same => Ok((h.div_ceil(self.stride.0), w.div_ceil(self.stride.1))),
            Padding::Valid => {
                if h < ekh || w < ekw {
                    Err(Error::shape(
                        "conv2d",
                        format!(
                            "valid padding needs input of at least {ekh}x{ekw}, got {h}x{w}"
                        ),
                    ))
                } else {
                    Ok(((h - ekh) / self.stride.0 + 1, (w - ekw) / self.stride.1 + 1))
                }
            }
        }
    }

    /// Leading-edge padding for a convolution over an `h x w` input.
    pub(crate) fn pad_begin(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Valid => Ok((0, 0)),
            Padding::Same => {
                let (oh, ow) = self.out_extent(h, w)?;
                let (ekh, ekw) = self.effective_kernel();
                let total_h = ((oh - 1) * self.stride.0 + ekh).saturating_sub(h);
                let total_w = ((ow - 1) * self.stride.1 + ekw).saturating_sub(w);
                Ok((total_h / 2, total_w / 2))
            }
        }
    }

    /// Weight shape for `conv2d`: `[kh, kw, in, out]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.kernel.0,
            self.kernel.1,
            self.in_channels,
            self.out_channels,
        ]
    }

    /// Weight shape for `deconv2d`: `[kh, kw, out, in]`. The transposed
    /// convolution is the exact adjoint of `conv2d` with the same weight
    /// tensor, whose conv reading maps `out -> in`.
    pub fn deconv_weight_shape(&self) -> [usize; 4] {
        [
            self.kernel.0,
            self.kernel.1,
            self.out_channels,
            self.in_channels,
        ]
    }

    /// Transposed-convolution output extent for an input extent.
    pub fn deconv_out_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ekh, ekw) = self.effective_kernel();
        match self.padding {
            Padding::Same => Ok((h * self.stride.0, w * self.stride.1)),
            Padding::Valid => Ok((
                (h - 1) * self.stride.0 + ekh,
                (w - 1) * self.stride.1 + ekw,
            )),
        }
    }
}

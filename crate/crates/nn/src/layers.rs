//! Building blocks shared by the context network and the codec transforms.
//!
//! Layers hold only parameter ids and hyper-parameters, so one definition
//! serves `f32` training and `f64` gradient checks alike.

use crate::autograd::Var;
use crate::params::{Init, ParamId, Params};
use crate::tensor::{Float, Tensor};

/// Negative slope of every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    /// `k×k` convolution with "same" padding (`k / 2`).
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let mut s = init.scope(name);
        let bound = (3.0 / (c_in * k * k) as f64).sqrt();
        let weight = s.uniform("weight", &[c_out, c_in, k, k], bound);
        let bias = s.zeros("bias", &[c_out]);
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
            c_in,
            c_out,
        }
    }

    pub fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Var<T> {
        x.conv2d(&p[self.weight], Some(&p[self.bias]), self.stride, self.pad)
    }
}

/// Stride-`s` transposed convolution that multiplies the extent by `s`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
    out_pad: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let mut s = init.scope(name);
        let fan = (c_in * k * k) as f64 / (stride * stride) as f64;
        let weight = s.uniform("weight", &[c_in, c_out, k, k], (3.0 / fan).sqrt());
        let bias = s.zeros("bias", &[c_out]);
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
            out_pad: stride - 1,
        }
    }

    pub fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Var<T> {
        x.conv_transpose2d(&p[self.weight], Some(&p[self.bias]), self.stride, self.pad, self.out_pad)
    }
}

/// Generalized divisive normalization (or its inverse).
///
/// `y_i = x_i / sqrt(β_i + Σ_j γ_ij x_j²)`; β and γ are stored as square
/// roots so both stay non-negative without clipping.
#[derive(Debug, Clone)]
pub struct Gdn {
    beta: ParamId,
    gamma: ParamId,
    channels: usize,
    inverse: bool,
}

impl Gdn {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, channels: usize, inverse: bool) -> Self {
        let mut s = init.scope(name);
        let beta = s.param("beta", Tensor::full(&[channels], T::one()));
        let diag = 0.1f64.sqrt();
        let off = 1e-3f64.sqrt();
        let gamma = s.param(
            "gamma",
            Tensor::from_fn(&[channels, channels], |i| {
                T::of(if i / channels == i % channels { diag } else { off })
            }),
        );
        Self {
            beta,
            gamma,
            channels,
            inverse,
        }
    }

    pub fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Var<T> {
        let c = self.channels;
        let gamma = p[self.gamma].square().reshape(&[c, c, 1, 1]);
        let beta = p[self.beta].square().add_scalar(1e-6);
        let norm = x.square().conv2d(&gamma, Some(&beta), 1, 0);
        if self.inverse {
            x.mul(&norm.sqrt())
        } else {
            x.mul(&norm.rsqrt())
        }
    }
}

/// Pre-activation residual block: `x + conv(act(conv(act(x))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            conv1: Conv2d::new(&mut s, "conv1", channels, channels, 3, 1),
            conv2: Conv2d::new(&mut s, "conv2", channels, channels, 3, 1),
        }
    }

    pub fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Var<T> {
        let h = self.conv1.forward(p, &x.leaky_relu(LEAKY_SLOPE));
        let h = self.conv2.forward(p, &h.leaky_relu(LEAKY_SLOPE));
        x.add(&h)
    }
}

/// Residual attention: `x + trunk(x) ⊙ sigmoid(mask(x))`, where the trunk is
/// two residual blocks and the mask is two residual blocks plus a 1×1 conv.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    trunk: [ResBlock; 2],
    mask: [ResBlock; 2],
    mask_out: Conv2d,
}

impl AttentionBlock {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            trunk: [
                ResBlock::new(&mut s, "trunk0", channels),
                ResBlock::new(&mut s, "trunk1", channels),
            ],
            mask: [
                ResBlock::new(&mut s, "mask0", channels),
                ResBlock::new(&mut s, "mask1", channels),
            ],
            mask_out: Conv2d::new(&mut s, "mask_out", channels, channels, 1, 1),
        }
    }

    pub fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Var<T> {
        let trunk = self.trunk.iter().fold(x.clone(), |h, b| b.forward(p, &h));
        let mask = self.mask.iter().fold(x.clone(), |h, b| b.forward(p, &h));
        let gate = self.mask_out.forward(p, &mask).sigmoid();
        x.add(&trunk.mul(&gate))
    }
}

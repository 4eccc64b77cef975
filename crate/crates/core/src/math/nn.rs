//! Parameterised layers, activations and normalisation.

use crate::error::{Error, Result};
use crate::math::tensor::{gemm_acc, shape_str, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `elu(x) + 1`, a strictly positive feature map.
#[inline]
pub fn elu_plus_one(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

#[inline]
pub(crate) fn elu_plus_one_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Affine map `y = x · W + b` with `W: [d_in × d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.cols() {
            return Err(Error::shape(
                "LinearLayer::new",
                format!("bias of length {}", weight.cols()),
                format!("weight {} bias {}", shape_str(&weight), shape_str(&bias)),
            ));
        }
        Ok(LinearLayer { weight, bias })
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearLayer {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear_forward(x, &self.weight, &self.bias)
    }
}

pub(crate) fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (l, d_in) = (x.rows(), x.cols());
    let d_out = weight.cols();
    if weight.rows() != d_in || bias.len() != d_out {
        return Err(Error::shape(
            "linear",
            format!("weight [{d_in} x _] and matching bias"),
            format!("x {} weight {} bias {}", shape_str(x), shape_str(weight), shape_str(bias)),
        ));
    }
    let mut out = Vec::with_capacity(l * d_out);
    for _ in 0..l {
        out.extend_from_slice(bias.data());
    }
    gemm_acc(x.data(), weight.data(), &mut out, l, d_in, d_out);
    Tensor::matrix(l, d_out, out)?.finite("linear")
}

/// Saved intermediates of a layer-norm pass, reused by the backward rule.
pub(crate) struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_kernel(
    x: &[f64],
    gain: &[f64],
    shift: &[f64],
    d: usize,
) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = rstd;
        for j in 0..d {
            let n = (row[j] - mean) * rstd;
            normalized[r * d + j] = n;
            out[r * d + j] = n * gain[j] + shift[j];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

/// Normalises each row of `x` over its last dimension, then applies
/// `gain ⊙ x̂ + shift`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || shift.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("gain and shift of length {d}"),
            format!("{} / {}", shape_str(gain), shape_str(shift)),
        ));
    }
    let (out, _) = layer_norm_kernel(x.data(), gain.data(), shift.data(), d);
    Tensor::new(x.shape().to_vec(), out)?.finite("layer_norm")
}

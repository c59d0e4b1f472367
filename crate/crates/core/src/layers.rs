//! Shared building blocks: dense layers, layer-norm parameters, sinusoidal
//! position encoding.

use rand::Rng;

use crate::error::TensorError;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone)]
pub struct Dense {
    pub w: Tensor, // [in x out]
    pub b: Tensor, // [out]
}

impl Dense {
    pub fn init<R: Rng>(d_in: usize, d_out: usize, trainable: bool, rng: &mut R) -> Self {
        let w = Tensor::glorot_uniform(d_in, d_out, rng);
        let b = Tensor::zeros(vec![d_out]);
        if trainable {
            Dense {
                w: w.trainable(),
                b: b.trainable(),
            }
        } else {
            Dense { w, b }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.matmul(&self.w)?.add_bias(&self.b)
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Clone)]
pub struct LayerNormParams {
    pub gain: Tensor, // [d]
    pub bias: Tensor, // [d]
}

impl LayerNormParams {
    pub fn init(d: usize, trainable: bool) -> Self {
        let gain = Tensor::from_vec(vec![d], vec![1.0; d]).unwrap();
        let bias = Tensor::zeros(vec![d]);
        if trainable {
            LayerNormParams {
                gain: gain.trainable(),
                bias: bias.trainable(),
            }
        } else {
            LayerNormParams { gain, bias }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }
}

/// Standard sinusoidal position table, `[len x d]`, non-learned.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_vec(vec![len, d], data).unwrap()
}

/// Multi-head attention over already-projected q/k/v `[T x d_model]`,
/// splitting columns into `heads` slices.
pub fn split_heads_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<Tensor, TensorError> {
    let d = q.cols();
    debug_assert_eq!(d % heads, 0);
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        outs.push(Tensor::scaled_dot_attention(&qh, &kh, &vh, causal)?);
    }
    Tensor::concat_cols(&outs)
}

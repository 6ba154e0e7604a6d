//! Scalar reference forward passes used as oracles in unit tests.
//!
//! Everything here is written with explicit element loops, independent of
//! the tape implementation, so a test comparing the two paths exercises
//! real redundancy.

use crate::decoder::DecoderLayerParams;
use crate::encoders::{AttentionParams, EncoderLayerParams, LayerNormParams};
use ndarray::Array2;

pub fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn ref_layer_norm(x: &Array2<f64>, p: &LayerNormParams<Array2<f64>>, eps: f64) -> Array2<f64> {
    let d = x.ncols();
    let mut out = Array2::zeros(x.raw_dim());
    for r in 0..x.nrows() {
        let mut mean = 0.0;
        for c in 0..d {
            mean += x[[r, c]];
        }
        mean /= d as f64;
        let mut var = 0.0;
        for c in 0..d {
            var += (x[[r, c]] - mean) * (x[[r, c]] - mean);
        }
        var /= d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..d {
            out[[r, c]] = (x[[r, c]] - mean) * inv * p.gain[[0, c]] + p.bias[[0, c]];
        }
    }
    out
}

pub fn ref_linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), w.ncols()));
    for r in 0..x.nrows() {
        for c in 0..w.ncols() {
            let mut acc = b[[0, c]];
            for k in 0..x.ncols() {
                acc += x[[r, k]] * w[[k, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Multi-head attention with Q/K/V/O projections and masked softmax.
pub fn ref_attention(
    x_q: &Array2<f64>,
    x_kv: &Array2<f64>,
    p: &AttentionParams<Array2<f64>>,
    n_heads: usize,
    mask: &Array2<f64>,
) -> Array2<f64> {
    let q = ref_linear(x_q, &p.w_q, &p.b_q);
    let k = ref_linear(x_kv, &p.w_k, &p.b_k);
    let v = ref_linear(x_kv, &p.w_v, &p.b_v);
    let d = q.ncols();
    let dh = d / n_heads;
    let mut core = Array2::zeros((q.nrows(), d));
    for h in 0..n_heads {
        for i in 0..q.nrows() {
            // scores for query i over all keys, this head
            let mut scores = Vec::with_capacity(k.nrows());
            for j in 0..k.nrows() {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[[i, h * dh + c]] * k[[j, h * dh + c]];
                }
                scores.push(s / (dh as f64).sqrt());
            }
            let mut mx = f64::NEG_INFINITY;
            for (j, &s) in scores.iter().enumerate() {
                if mask[[i, j]] > 0.0 && s > mx {
                    mx = s;
                }
            }
            let mut denom = 0.0;
            let mut probs = vec![0.0; scores.len()];
            for (j, &s) in scores.iter().enumerate() {
                if mask[[i, j]] > 0.0 {
                    probs[j] = (s - mx).exp();
                    denom += probs[j];
                }
            }
            for p in probs.iter_mut() {
                *p /= denom;
            }
            for c in 0..dh {
                let mut acc = 0.0;
                for (j, &pj) in probs.iter().enumerate() {
                    acc += pj * v[[j, h * dh + c]];
                }
                core[[i, h * dh + c]] = acc;
            }
        }
    }
    ref_linear(&core, &p.w_o, &p.b_o)
}

pub fn ref_ffn(
    x: &Array2<f64>,
    w1: &Array2<f64>,
    b1: &Array2<f64>,
    w2: &Array2<f64>,
    b2: &Array2<f64>,
) -> Array2<f64> {
    let mut h = ref_linear(x, w1, b1);
    h.mapv_inplace(ref_gelu);
    ref_linear(&h, w2, b2)
}

/// Pre-norm encoder layer: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
pub fn ref_encoder_layer(
    x: &Array2<f64>,
    p: &EncoderLayerParams<Array2<f64>>,
    n_heads: usize,
    mask: &Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    let h = ref_layer_norm(x, &p.ln_attn, eps);
    let a = ref_attention(&h, &h, &p.attn, n_heads, mask);
    let x1 = x + &a;
    let h = ref_layer_norm(&x1, &p.ln_ffn, eps);
    let f = ref_ffn(&h, &p.ffn.w1, &p.ffn.b1, &p.ffn.w2, &p.ffn.b2);
    x1 + f
}

/// Pre-norm decoder layer with causal self-attention and cross-attention.
pub fn ref_decoder_layer(
    x: &Array2<f64>,
    fused: &Array2<f64>,
    p: &DecoderLayerParams<Array2<f64>>,
    n_heads: usize,
    causal: &Array2<f64>,
    cross: &Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    let h = ref_layer_norm(x, &p.ln_self, eps);
    let a = ref_attention(&h, &h, &p.self_attn, n_heads, causal);
    let x1 = x + &a;
    let h = ref_layer_norm(&x1, &p.ln_cross, eps);
    let c = ref_attention(&h, fused, &p.cross_attn, n_heads, cross);
    let x2 = x1 + &c;
    let h = ref_layer_norm(&x2, &p.ln_ffn, eps);
    let f = ref_ffn(&h, &p.ffn.w1, &p.ffn.b1, &p.ffn.w2, &p.ffn.b2);
    x2 + f
}

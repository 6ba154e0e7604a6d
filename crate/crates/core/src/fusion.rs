//! Forget-gated cross-modal fusion.
//!
//! Text rows query the valid image rows through multi-head cross
//! attention; a sigmoid gate over `[Z, C]` scales the attended context
//! elementwise before the output projection mixes it back into the text
//! width. No layer normalization is applied inside this block.

use crate::autodiff::{Tape, Var};
use crate::encoders::{attention_core, attn_mask, ImageFeatures, TextFeatures};
use crate::model::DropoutState;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionParams<T> {
    /// `d_txt -> d_fuse` query projection.
    pub w_q: T,
    /// `d_img -> d_fuse` key projection.
    pub w_k: T,
    /// `d_img -> d_fuse` value projection.
    pub w_v: T,
    pub n_heads: usize,
    /// Gate projection `(d_txt + d_fuse) -> d_fuse` (`W_f`).
    pub w_gate: T,
    /// Gate bias (`B_f`); driving it to a large negative value shuts the
    /// image path off entirely.
    pub b_gate: T,
    /// Output projection `(d_txt + d_fuse) -> d_txt` (`W_z'`).
    pub w_out: T,
    pub b_out: T,
}

impl<T> FusionParams<T> {
    pub fn map<B>(&self, f: &mut impl FnMut(&T) -> B) -> FusionParams<B> {
        FusionParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            n_heads: self.n_heads,
            w_gate: f(&self.w_gate),
            b_gate: f(&self.b_gate),
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
        }
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        f(&self.w_q);
        f(&self.w_k);
        f(&self.w_v);
        f(&self.w_gate);
        f(&self.b_gate);
        f(&self.w_out);
        f(&self.b_out);
    }
    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
        f(&mut self.w_gate);
        f(&mut self.b_gate);
        f(&mut self.w_out);
        f(&mut self.b_out);
    }
}

/// Fused multi-modal rows `(L+1) x d_txt`, carrying the text mask.
pub struct FusedFeatures {
    pub rows: Var,
    pub mask: Vec<bool>,
}

impl FusedFeatures {
    pub fn cls_row(&self, tape: &mut Tape) -> Var {
        let n = tape.shape(self.rows).0;
        tape.slice_rows(self.rows, n - 1, n)
    }
}

/// Fusion output along with the attended context and gate activations.
pub struct FusionTrace {
    pub fused: FusedFeatures,
    pub context: Var,
    pub gate: Var,
}

/// `Q = Z W_q; K, V from G; C = CMA(Q, K, V); F = sigmoid([Z, C] W_f +
/// B_f); Z' = [Z, F * C] W_z' + B_z'`. Attention keys are restricted to
/// valid image rows (the image CLS row is always valid).
pub fn fuse(
    tape: &mut Tape,
    text: &TextFeatures,
    image: &ImageFeatures,
    params: &FusionParams<Var>,
    dropout: &mut DropoutState,
) -> FusedFeatures {
    fuse_detailed(tape, text, image, params, dropout).fused
}

/// [`fuse`] keeping the intermediate context and gate visible.
pub fn fuse_detailed(
    tape: &mut Tape,
    text: &TextFeatures,
    image: &ImageFeatures,
    params: &FusionParams<Var>,
    dropout: &mut DropoutState,
) -> FusionTrace {
    assert!(
        image.mask.iter().any(|&m| m),
        "no valid image rows for cross attention"
    );
    let n_text = tape.shape(text.rows).0;
    let q = tape.matmul(text.rows, params.w_q);
    let k = tape.matmul(image.rows, params.w_k);
    let v = tape.matmul(image.rows, params.w_v);
    let mask = attn_mask(n_text, &image.mask, false);
    let context = attention_core(tape, q, k, v, params.n_heads, &mask);

    let zc = tape.concat_cols(&[text.rows, context]);
    let gate_pre = tape.matmul(zc, params.w_gate);
    let gate_pre = tape.add_row(gate_pre, params.b_gate);
    let gate = tape.sigmoid(gate_pre);

    let gated = tape.mul(gate, context);
    let zfc = tape.concat_cols(&[text.rows, gated]);
    let out = tape.matmul(zfc, params.w_out);
    let out = tape.add_row(out, params.b_out);
    let out = dropout.apply(tape, out);
    FusionTrace {
        fused: FusedFeatures {
            rows: out,
            mask: text.mask.clone(),
        },
        context,
        gate,
    }
}

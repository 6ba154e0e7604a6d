//! Text and image encoders.
//!
//! The text encoder is a from-scratch bidirectional transformer producing
//! `Z = {z_1..z_L, z_cls}`: token rows first, the CLS row pinned at index
//! `L`. The image encoder embeds each region as RoI feature + projected
//! box geometry + region-id embedding, prepends a learnable CLS row, and
//! runs residual attention/feed-forward layers restricted to valid rows.
//! Layers use the pre-norm arrangement, so zeroed attention and
//! feed-forward weights make every layer an exact identity.

use crate::autodiff::{Tape, Var};
use crate::datamodel::{RegionDescriptor, RegionSet};
use crate::model::{DropoutState, ModelDims};
use crate::tokenizer::{CLS, PAD};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

/// Fixed-layout token sequence: `l_max` token slots then one CLS slot.
/// Token ids occupy a prefix; the gap up to `l_max` is PAD and masked out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// Length `l_max + 1`; index `l_max` is always CLS.
    pub ids: Vec<usize>,
    /// Valid positions: the token prefix and the CLS slot.
    pub mask: Vec<bool>,
    /// Index of the trailing CLS (always `l_max`).
    pub cls_position: usize,
}

impl TokenSequence {
    /// Lay out `token_ids` (at most `l_max` of them; longer input is a
    /// contract violation, truncation belongs to ingestion).
    pub fn new(token_ids: &[usize], l_max: usize) -> Self {
        assert!(
            token_ids.len() <= l_max,
            "sequence of {} tokens exceeds L={}; truncate at ingestion",
            token_ids.len(),
            l_max
        );
        let mut ids = Vec::with_capacity(l_max + 1);
        let mut mask = Vec::with_capacity(l_max + 1);
        ids.extend_from_slice(token_ids);
        mask.extend(std::iter::repeat(true).take(token_ids.len()));
        while ids.len() < l_max {
            ids.push(PAD);
            mask.push(false);
        }
        ids.push(CLS);
        mask.push(true);
        Self {
            ids,
            mask,
            cls_position: l_max,
        }
    }

    pub fn len_with_cls(&self) -> usize {
        self.ids.len()
    }

    /// Number of valid content tokens (CLS excluded).
    pub fn token_count(&self) -> usize {
        self.mask[..self.cls_position].iter().filter(|&&m| m).count()
    }
}

/// Encoded text rows `(L+1) x d_txt` plus their validity mask.
pub struct TextFeatures {
    pub rows: Var,
    pub mask: Vec<bool>,
}

impl TextFeatures {
    pub fn cls_row(&self, tape: &mut Tape) -> Var {
        let n = tape.shape(self.rows).0;
        tape.slice_rows(self.rows, n - 1, n)
    }
}

/// Encoded image rows `(M+1) x d_img`: CLS row first, then regions.
pub struct ImageFeatures {
    pub rows: Var,
    pub mask: Vec<bool>,
}

impl ImageFeatures {
    pub fn cls_row(&self, tape: &mut Tape) -> Var {
        tape.slice_rows(self.rows, 0, 1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionParams<T> {
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedForwardParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderLayerParams<T> {
    pub ln_attn: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln_ffn: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
}

/// All encoder parameters. The token embedding table is also used by the
/// decoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams<T> {
    pub token_embedding: T,
    pub text_positions: T,
    pub text_layers: Vec<EncoderLayerParams<T>>,
    /// Box geometry projection `[c, s] (1x5) -> d_img` (`W_e`).
    pub box_proj: T,
    /// Box projection bias (`B_e`).
    pub box_bias: T,
    /// Region-id table, `(M+1) x d_img`; row `i < M` tags region slot `i`.
    pub region_id_embedding: T,
    /// Learnable image CLS row (`1 x d_img`).
    pub image_cls: T,
    pub image_layers: Vec<EncoderLayerParams<T>>,
}

macro_rules! impl_map_visit {
    ($name:ident, [$($field:ident),+]) => {
        impl<T> $name<T> {
            pub fn map<B>(&self, f: &mut impl FnMut(&T) -> B) -> $name<B> {
                $name { $($field: f(&self.$field)),+ }
            }
            pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
                $(f(&self.$field);)+
            }
            pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
                $(f(&mut self.$field);)+
            }
        }
    };
}
pub(crate) use impl_map_visit;

impl_map_visit!(LayerNormParams, [gain, bias]);
impl_map_visit!(AttentionParams, [w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o]);
impl_map_visit!(FeedForwardParams, [w1, b1, w2, b2]);

impl<T> EncoderLayerParams<T> {
    pub fn map<B>(&self, f: &mut impl FnMut(&T) -> B) -> EncoderLayerParams<B> {
        EncoderLayerParams {
            ln_attn: self.ln_attn.map(f),
            attn: self.attn.map(f),
            ln_ffn: self.ln_ffn.map(f),
            ffn: self.ffn.map(f),
        }
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        self.ln_attn.visit(f);
        self.attn.visit(f);
        self.ln_ffn.visit(f);
        self.ffn.visit(f);
    }
    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.ln_attn.visit_mut(f);
        self.attn.visit_mut(f);
        self.ln_ffn.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

impl<T> EncoderParams<T> {
    pub fn map<B>(&self, f: &mut impl FnMut(&T) -> B) -> EncoderParams<B> {
        EncoderParams {
            token_embedding: f(&self.token_embedding),
            text_positions: f(&self.text_positions),
            text_layers: self.text_layers.iter().map(|l| l.map(f)).collect(),
            box_proj: f(&self.box_proj),
            box_bias: f(&self.box_bias),
            region_id_embedding: f(&self.region_id_embedding),
            image_cls: f(&self.image_cls),
            image_layers: self.image_layers.iter().map(|l| l.map(f)).collect(),
        }
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        f(&self.token_embedding);
        f(&self.text_positions);
        for l in &self.text_layers {
            l.visit(f);
        }
        f(&self.box_proj);
        f(&self.box_bias);
        f(&self.region_id_embedding);
        f(&self.image_cls);
        for l in &self.image_layers {
            l.visit(f);
        }
    }
    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.token_embedding);
        f(&mut self.text_positions);
        for l in &mut self.text_layers {
            l.visit_mut(f);
        }
        f(&mut self.box_proj);
        f(&mut self.box_bias);
        f(&mut self.region_id_embedding);
        f(&mut self.image_cls);
        for l in &mut self.image_layers {
            l.visit_mut(f);
        }
    }
}

/// Attention mask: queries on rows, keys on columns; 1.0 where the key is
/// valid (and, if `causal`, not in the query's future).
pub fn attn_mask(n_queries: usize, key_valid: &[bool], causal: bool) -> Array2<f64> {
    Array2::from_shape_fn((n_queries, key_valid.len()), |(q, k)| {
        if key_valid[k] && (!causal || k <= q) {
            1.0
        } else {
            0.0
        }
    })
}

/// Scaled dot-product attention on pre-projected Q/K/V, split into
/// `n_heads` column blocks; concatenated head outputs, no output
/// projection.
pub(crate) fn attention_core(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: &Array2<f64>,
) -> Var {
    let (_, d) = tape.shape(q);
    assert_eq!(d % n_heads, 0, "head count must divide width");
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qs = tape.slice_cols(q, h * dh, (h + 1) * dh);
        let ks = tape.slice_cols(k, h * dh, (h + 1) * dh);
        let vs = tape.slice_cols(v, h * dh, (h + 1) * dh);
        let kt = tape.transpose(ks);
        let scores = tape.matmul(qs, kt);
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores, mask.clone());
        outs.push(tape.matmul(probs, vs));
    }
    if n_heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    }
}

/// Full multi-head attention block with Q/K/V/O projections.
pub(crate) fn multi_head_attention(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    p: &AttentionParams<Var>,
    n_heads: usize,
    mask: &Array2<f64>,
) -> Var {
    let q = tape.matmul(x_q, p.w_q);
    let q = tape.add_row(q, p.b_q);
    let k = tape.matmul(x_kv, p.w_k);
    let k = tape.add_row(k, p.b_k);
    let v = tape.matmul(x_kv, p.w_v);
    let v = tape.add_row(v, p.b_v);
    let core = attention_core(tape, q, k, v, n_heads, mask);
    let o = tape.matmul(core, p.w_o);
    tape.add_row(o, p.b_o)
}

pub(crate) fn layer_norm(tape: &mut Tape, x: Var, p: &LayerNormParams<Var>) -> Var {
    let n = tape.layer_norm_rows(x, LN_EPS);
    let n = tape.mul_row(n, p.gain);
    tape.add_row(n, p.bias)
}

pub(crate) fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForwardParams<Var>) -> Var {
    let h = tape.matmul(x, p.w1);
    let h = tape.add_row(h, p.b1);
    let h = tape.gelu(h);
    let o = tape.matmul(h, p.w2);
    tape.add_row(o, p.b2)
}

/// Pre-norm residual layer: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
pub(crate) fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    p: &EncoderLayerParams<Var>,
    n_heads: usize,
    mask: &Array2<f64>,
) -> Var {
    let h = layer_norm(tape, x, &p.ln_attn);
    let a = multi_head_attention(tape, h, h, &p.attn, n_heads, mask);
    let x = tape.add(x, a);
    let h = layer_norm(tape, x, &p.ln_ffn);
    let f = feed_forward(tape, h, &p.ffn);
    tape.add(x, f)
}

/// Bidirectional encoding over valid positions only; the CLS row comes out
/// at index `L`.
pub fn encode_text(
    tape: &mut Tape,
    seq: &TokenSequence,
    params: &EncoderParams<Var>,
    dims: &ModelDims,
    dropout: &mut DropoutState,
) -> TextFeatures {
    assert_eq!(seq.ids.len(), dims.l_max + 1, "sequence length != L+1");
    let emb = tape.gather_rows(params.token_embedding, &seq.ids);
    let mut x = tape.add(emb, params.text_positions);
    x = dropout.apply(tape, x);
    let mask = attn_mask(seq.ids.len(), &seq.mask, false);
    for layer in &params.text_layers {
        x = encoder_layer(tape, x, layer, dims.text_heads, &mask);
    }
    TextFeatures {
        rows: x,
        mask: seq.mask.clone(),
    }
}

/// Position-aware region embedding: `o_i = v_i + ([c_i, s_i] W_e + B_e) +
/// e_reg(i)`. Padded slots bypass this and stay all-zero.
pub fn embed_region(
    tape: &mut Tape,
    region: &RegionDescriptor,
    region_index: usize,
    params: &EncoderParams<Var>,
) -> Var {
    let m = tape.shape(params.region_id_embedding).0 - 1;
    assert!(region_index < m, "region index {region_index} out of range");
    let d = tape.shape(params.box_proj).1;
    assert_eq!(region.feature.len(), d, "region feature dim mismatch");
    let v = tape.constant(Array2::from_shape_vec((1, d), region.feature.clone()).unwrap());
    let geo = tape.constant(Array2::from_shape_vec(
        (1, 5),
        vec![
            region.bbox[0],
            region.bbox[1],
            region.bbox[2],
            region.bbox[3],
            region.area,
        ],
    ).unwrap());
    let box_term = tape.matmul(geo, params.box_proj);
    let box_term = tape.add(box_term, params.box_bias);
    let ereg = tape.gather_rows(params.region_id_embedding, &[region_index]);
    let o = tape.add(v, box_term);
    tape.add(o, ereg)
}

/// Region geometry rows `[x1, y1, x2, y2, s]`, zero for padded slots.
fn geometry_matrix(rs: &RegionSet) -> Array2<f64> {
    let mut geo = Array2::zeros((rs.capacity(), 5));
    for (i, r) in rs.valid().iter().enumerate() {
        geo[[i, 0]] = r.bbox[0];
        geo[[i, 1]] = r.bbox[1];
        geo[[i, 2]] = r.bbox[2];
        geo[[i, 3]] = r.bbox[3];
        geo[[i, 4]] = r.area;
    }
    geo
}

/// RoI feature rows, with the listed slots zeroed (masked-region training).
pub fn feature_matrix(rs: &RegionSet, masked_slots: &[usize]) -> Array2<f64> {
    let d = rs
        .regions
        .first()
        .map(|r| r.feature.len())
        .unwrap_or_default();
    let mut feats = Array2::zeros((rs.capacity(), d));
    for (i, r) in rs.valid().iter().enumerate() {
        if masked_slots.contains(&i) {
            continue;
        }
        for (j, &v) in r.feature.iter().enumerate() {
            feats[[i, j]] = v;
        }
    }
    feats
}

/// Contextual image encoding. `masked_slots` lists valid region indices
/// whose RoI feature is replaced by zeros before embedding (box and
/// region-id features kept).
pub fn encode_image_masked(
    tape: &mut Tape,
    region_set: &RegionSet,
    masked_slots: &[usize],
    params: &EncoderParams<Var>,
    dims: &ModelDims,
    dropout: &mut DropoutState,
) -> ImageFeatures {
    let m = region_set.capacity();
    assert_eq!(m, dims.m_max, "region set capacity != M");
    let feats = tape.constant(feature_matrix(region_set, masked_slots));
    let geo = tape.constant(geometry_matrix(region_set));
    let box_term = tape.matmul(geo, params.box_proj);
    let box_term = tape.add_row(box_term, params.box_bias);
    let ereg = tape.slice_rows(params.region_id_embedding, 0, m);
    let o = tape.add(feats, box_term);
    let o = tape.add(o, ereg);
    // Padded slots must be exactly the zero vector.
    let mut row_valid = Array2::zeros((m, dims.d_img));
    for i in 0..region_set.valid_count {
        row_valid.row_mut(i).fill(1.0);
    }
    let row_valid = tape.constant(row_valid);
    let o = tape.mul(o, row_valid);
    let mut x = tape.concat_rows(&[params.image_cls, o]);
    x = dropout.apply(tape, x);

    let mut mask_vec = vec![false; m + 1];
    mask_vec[0] = true; // CLS row always valid
    for (i, slot) in mask_vec.iter_mut().enumerate().skip(1) {
        *slot = region_set.is_valid_slot(i - 1);
    }
    let mask = attn_mask(m + 1, &mask_vec, false);
    for layer in &params.image_layers {
        x = encoder_layer(tape, x, layer, dims.image_heads, &mask);
    }
    ImageFeatures {
        rows: x,
        mask: mask_vec,
    }
}

/// Image encoding with no masked regions.
pub fn encode_image(
    tape: &mut Tape,
    region_set: &RegionSet,
    params: &EncoderParams<Var>,
    dims: &ModelDims,
    dropout: &mut DropoutState,
) -> ImageFeatures {
    encode_image_masked(tape, region_set, &[], params, dims, dropout)
}

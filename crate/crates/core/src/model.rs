//! Model dimensions, the aggregate parameter set, initialization, and
//! tape binding.

use crate::autodiff::{Gradients, Tape, Var};
use crate::datamodel::RegionSet;
use crate::decoder::{DecoderLayerParams, DecoderParams};
use crate::encoders::{
    encode_image_masked, encode_text, AttentionParams, EncoderLayerParams, EncoderParams,
    FeedForwardParams, ImageFeatures, LayerNormParams, TextFeatures, TokenSequence,
};
use crate::fusion::{fuse, FusedFeatures, FusionParams};
use crate::objectives::{att_hidden_dim, LossHeads, TAU_INIT};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OovToken { id: usize, vocab: usize },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
}

/// Gate bias used to saturate the forget gate shut for image-free
/// controls: `sigmoid(-1e6)` underflows to exactly zero, and so does its
/// derivative, so the gate stays closed throughout training.
pub const GATE_OFF_BIAS: f64 = -1e6;

/// All width/depth choices of the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_txt: usize,
    pub d_img: usize,
    /// Cross-attention width inside fusion (defaults to `d_txt`).
    pub d_fuse: usize,
    /// Contrastive projection width (defaults to `min(d_txt, d_img)`).
    pub d_proj: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub image_layers: usize,
    pub image_heads: usize,
    pub fusion_heads: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    /// Feed-forward expansion factor.
    pub ffn_mult: usize,
    /// Maximum combined title+description token count.
    pub l_max: usize,
    /// Region capacity per image.
    pub m_max: usize,
    /// Detector class count.
    pub k_cls: usize,
    /// Attribute vocabulary size.
    pub n_attrs: usize,
    pub max_target_len: usize,
}

impl ModelDims {
    /// Desk-scale preset: 64-wide, 2 text + 2 image encoder layers and a
    /// 2-layer decoder, 4 heads everywhere.
    pub fn desk(vocab_size: usize, l_max: usize, m_max: usize, k_cls: usize, n_attrs: usize) -> Self {
        Self {
            vocab_size,
            d_txt: 64,
            d_img: 64,
            d_fuse: 64,
            d_proj: 64,
            text_layers: 2,
            text_heads: 4,
            image_layers: 2,
            image_heads: 4,
            fusion_heads: 4,
            dec_layers: 2,
            dec_heads: 4,
            ffn_mult: 4,
            l_max,
            m_max,
            k_cls,
            n_attrs,
            max_target_len: 80,
        }
    }

    /// Full-scale preset mirroring the reference configuration
    /// (BART-base-sized text stack, 2048-wide 4-layer 8-head image
    /// encoder, L=400, M=36). Provided as a configuration only; training
    /// it is outside desk scope.
    pub fn paper(vocab_size: usize, k_cls: usize, n_attrs: usize) -> Self {
        Self {
            vocab_size,
            d_txt: 768,
            d_img: 2048,
            d_fuse: 768,
            d_proj: 768,
            text_layers: 6,
            text_heads: 12,
            image_layers: 4,
            image_heads: 8,
            fusion_heads: 8,
            dec_layers: 6,
            dec_heads: 12,
            ffn_mult: 4,
            l_max: 400,
            m_max: 36,
            k_cls,
            n_attrs,
            max_target_len: 80,
        }
    }

    pub fn validate(&self) {
        assert!(self.vocab_size > 5, "vocabulary too small");
        assert_eq!(self.d_txt % self.text_heads, 0);
        assert_eq!(self.d_img % self.image_heads, 0);
        assert_eq!(self.d_fuse % self.fusion_heads, 0);
        assert_eq!(self.d_txt % self.dec_heads, 0);
        assert!(self.l_max >= 1 && self.m_max >= 1);
    }
}

/// Training-time dropout. `off()` disables it (evaluation mode); with a
/// source attached, each application samples an inverted-dropout mask.
pub struct DropoutState {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl DropoutState {
    pub fn off() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate outside [0, 1)");
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let shape = tape.shape(x);
        let mask = Array2::from_shape_fn(shape, |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub fusion: FusionParams<T>,
    pub decoder: DecoderParams<T>,
    pub heads: LossHeads<T>,
}

impl<T> ModelParams<T> {
    pub fn map<B>(&self, f: &mut impl FnMut(&T) -> B) -> ModelParams<B> {
        ModelParams {
            encoder: self.encoder.map(f),
            fusion: self.fusion.map(f),
            decoder: self.decoder.map(f),
            heads: self.heads.map(f),
        }
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        self.encoder.visit(f);
        self.fusion.visit(f);
        self.decoder.visit(f);
        self.heads.visit(f);
    }
    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.encoder.visit_mut(f);
        self.fusion.visit_mut(f);
        self.decoder.visit_mut(f);
        self.heads.visit_mut(f);
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

fn embedding(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        0.02 * z
    })
}

fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

fn layer_norm_init(d: usize) -> LayerNormParams<Array2<f64>> {
    LayerNormParams {
        gain: Array2::ones((1, d)),
        bias: zeros(1, d),
    }
}

fn attention_init(rng: &mut ChaCha8Rng, d_q: usize, d_kv: usize, d: usize) -> AttentionParams<Array2<f64>> {
    AttentionParams {
        w_q: xavier(rng, d_q, d),
        b_q: zeros(1, d),
        w_k: xavier(rng, d_kv, d),
        b_k: zeros(1, d),
        w_v: xavier(rng, d_kv, d),
        b_v: zeros(1, d),
        w_o: xavier(rng, d, d),
        b_o: zeros(1, d),
    }
}

fn ffn_init(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> FeedForwardParams<Array2<f64>> {
    FeedForwardParams {
        w1: xavier(rng, d, hidden),
        b1: zeros(1, hidden),
        w2: xavier(rng, hidden, d),
        b2: zeros(1, d),
    }
}

fn encoder_layer_init(
    rng: &mut ChaCha8Rng,
    d: usize,
    hidden: usize,
) -> EncoderLayerParams<Array2<f64>> {
    EncoderLayerParams {
        ln_attn: layer_norm_init(d),
        attn: attention_init(rng, d, d, d),
        ln_ffn: layer_norm_init(d),
        ffn: ffn_init(rng, d, hidden),
    }
}

impl ModelParams<Array2<f64>> {
    /// Seeded initialization. `saturate_gate` initializes the fusion
    /// forget gate shut (the image-free control).
    pub fn init(dims: &ModelDims, seed: u64, saturate_gate: bool) -> Self {
        dims.validate();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams {
            token_embedding: embedding(rng, dims.vocab_size, dims.d_txt),
            text_positions: embedding(rng, dims.l_max + 1, dims.d_txt),
            text_layers: (0..dims.text_layers)
                .map(|_| encoder_layer_init(rng, dims.d_txt, dims.d_txt * dims.ffn_mult))
                .collect(),
            box_proj: xavier(rng, 5, dims.d_img),
            box_bias: zeros(1, dims.d_img),
            region_id_embedding: embedding(rng, dims.m_max + 1, dims.d_img),
            image_cls: embedding(rng, 1, dims.d_img),
            image_layers: (0..dims.image_layers)
                .map(|_| encoder_layer_init(rng, dims.d_img, dims.d_img * dims.ffn_mult))
                .collect(),
        };
        let fusion = FusionParams {
            w_q: xavier(rng, dims.d_txt, dims.d_fuse),
            w_k: xavier(rng, dims.d_img, dims.d_fuse),
            w_v: xavier(rng, dims.d_img, dims.d_fuse),
            n_heads: dims.fusion_heads,
            w_gate: if saturate_gate {
                zeros(dims.d_txt + dims.d_fuse, dims.d_fuse)
            } else {
                xavier(rng, dims.d_txt + dims.d_fuse, dims.d_fuse)
            },
            b_gate: if saturate_gate {
                Array2::from_elem((1, dims.d_fuse), GATE_OFF_BIAS)
            } else {
                zeros(1, dims.d_fuse)
            },
            w_out: xavier(rng, dims.d_txt + dims.d_fuse, dims.d_txt),
            b_out: zeros(1, dims.d_txt),
        };
        let decoder = DecoderParams {
            positions: embedding(rng, dims.max_target_len + 1, dims.d_txt),
            layers: (0..dims.dec_layers)
                .map(|_| DecoderLayerParams {
                    ln_self: layer_norm_init(dims.d_txt),
                    self_attn: attention_init(rng, dims.d_txt, dims.d_txt, dims.d_txt),
                    ln_cross: layer_norm_init(dims.d_txt),
                    cross_attn: attention_init(rng, dims.d_txt, dims.d_txt, dims.d_txt),
                    ln_ffn: layer_norm_init(dims.d_txt),
                    ffn: ffn_init(rng, dims.d_txt, dims.d_txt * dims.ffn_mult),
                })
                .collect(),
            ln_final: layer_norm_init(dims.d_txt),
            w_out: xavier(rng, dims.d_txt, dims.vocab_size),
            b_out: zeros(1, dims.vocab_size),
        };
        let h_att = att_hidden_dim(dims);
        let heads = LossHeads {
            mrm_w1: xavier(rng, dims.d_img, dims.d_img),
            mrm_b1: zeros(1, dims.d_img),
            mrm_w2: xavier(rng, dims.d_img, dims.k_cls),
            mrm_b2: zeros(1, dims.k_cls),
            hd_w1: xavier(rng, dims.d_img, dims.d_img),
            hd_b1: zeros(1, dims.d_img),
            hd_w2: xavier(rng, dims.d_img, dims.d_txt),
            hd_b2: zeros(1, dims.d_txt),
            w_g: xavier(rng, dims.d_img, dims.d_proj),
            w_z: xavier(rng, dims.d_txt, dims.d_proj),
            log_tau: Array2::from_elem((1, 1), TAU_INIT.ln()),
            att_w1: xavier(rng, h_att, dims.n_attrs),
            att_w2: xavier(rng, dims.d_txt, h_att),
            att_w3: xavier(rng, dims.d_txt, h_att),
            att_w4: xavier(rng, dims.d_txt, h_att),
            att_bias: zeros(1, dims.n_attrs),
        };
        ModelParams {
            encoder,
            fusion,
            decoder,
            heads,
        }
    }

    /// Bind every tensor as a tracked leaf on the tape.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |a: &Array2<f64>| tape.leaf(a.clone()))
    }

    pub fn n_elements(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |a: &Array2<f64>| n += a.len());
        n
    }
}

impl ModelParams<Var> {
    /// Pull gradients for every bound parameter; parameters untouched by
    /// the loss get zero gradients.
    pub fn extract_grads(&self, tape: &Tape, grads: &mut Gradients) -> ModelParams<Array2<f64>> {
        self.map(&mut |v: &Var| {
            grads
                .take(*v)
                .unwrap_or_else(|| Array2::zeros(tape.shape(*v)))
        })
    }
}

/// Forward pass through both encoders and fusion for one sample.
#[allow(clippy::too_many_arguments)]
pub fn encode_and_fuse(
    tape: &mut Tape,
    seq: &TokenSequence,
    region_set: &RegionSet,
    masked_slots: &[usize],
    params: &ModelParams<Var>,
    dims: &ModelDims,
    dropout: &mut DropoutState,
) -> (TextFeatures, ImageFeatures, FusedFeatures) {
    let text = encode_text(tape, seq, &params.encoder, dims, dropout);
    let image = encode_image_masked(
        tape,
        region_set,
        masked_slots,
        &params.encoder,
        dims,
        dropout,
    );
    let fused = fuse(tape, &text, &image, &params.fusion, dropout);
    (text, image, fused)
}

//! The five training losses and their weighted total.
//!
//! Summary likelihood, masked region modeling (KL to the detector class
//! distribution), coarse-grained in-batch contrastive alignment with a
//! learnable temperature, fine-grained Hausdorff set alignment, and
//! multi-hot attribute prediction. Every loss is built on the tape, so
//! its analytic gradients are checked against finite differences in the
//! acceptance suite.

use crate::autodiff::{Tape, Var};
use crate::datamodel::RegionSet;
use crate::encoders::{ImageFeatures, TextFeatures};
use crate::fusion::FusedFeatures;
use crate::model::ModelDims;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp applied to attribute probabilities inside the BCE.
pub const BCE_EPS: f64 = 1e-7;
/// Guard inside L2 normalization.
pub const NORM_EPS: f64 = 1e-12;
/// Initial temperature for the contrastive head.
pub const TAU_INIT: f64 = 0.07;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("non-finite {task} loss (value {value})")]
    NonFinite { task: &'static str, value: f64 },
}

/// Weights of the auxiliary tasks in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 0.05,
            lambda3: 0.3,
        }
    }
}

/// Per-task loss values and the weighted total:
/// `total = ps + l1*mrm + l2*cmm + l3*fmm`, `fmm = hd + att`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ps: f64,
    pub mrm: f64,
    pub cmm: f64,
    pub hd: f64,
    pub att: f64,
    pub fmm: f64,
    pub total: f64,
}

/// Parameters of the loss heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossHeads<T> {
    /// Masked-region classifier, `d_img -> d_img -> K_cls`.
    pub mrm_w1: T,
    pub mrm_b1: T,
    pub mrm_w2: T,
    pub mrm_b2: T,
    /// Visual-to-text mapping for the Hausdorff loss,
    /// `d_img -> d_img -> d_txt`.
    pub hd_w1: T,
    pub hd_b1: T,
    pub hd_w2: T,
    pub hd_b2: T,
    /// Contrastive projections `d_img -> d_proj` and `d_txt -> d_proj`.
    pub w_g: T,
    pub w_z: T,
    /// Temperature stored as its logarithm, keeping `tau > 0`.
    pub log_tau: T,
    /// Attribute head: `W_y^(2..4)` map pooled text widths into the
    /// hidden width, `W_y^(1)` maps into N outputs, plus bias `B_y`.
    pub att_w1: T,
    pub att_w2: T,
    pub att_w3: T,
    pub att_w4: T,
    pub att_bias: T,
}

crate::encoders::impl_map_visit!(
    LossHeads,
    [
        mrm_w1, mrm_b1, mrm_w2, mrm_b2, hd_w1, hd_b1, hd_w2, hd_b2, w_g, w_z, log_tau,
        att_w1, att_w2, att_w3, att_w4, att_bias
    ]
);

/// How masked regions are corrupted before embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskPolicy {
    /// Replace the RoI feature with zeros; keep box and region-id features.
    ZeroFeature,
}

/// Masked-region plan for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Valid region slots whose feature is zeroed.
    pub masked_indices: Vec<usize>,
    pub policy: MaskPolicy,
}

impl MaskPlan {
    pub fn empty() -> Self {
        Self {
            masked_indices: Vec::new(),
            policy: MaskPolicy::ZeroFeature,
        }
    }
}

/// Independently mask each valid region with probability `rate`.
pub fn sample_mask_regions<R: Rng>(
    region_set: &RegionSet,
    rate: f64,
    rng: &mut R,
) -> MaskPlan {
    assert!((0.0..=1.0).contains(&rate), "mask rate outside [0, 1]");
    let masked_indices = (0..region_set.valid_count)
        .filter(|_| rng.gen::<f64>() < rate)
        .collect();
    MaskPlan {
        masked_indices,
        policy: MaskPolicy::ZeroFeature,
    }
}

/// Negative log-likelihood of the gold tokens, summed over positions per
/// sample and averaged over the batch. Entries of `samples` pair
/// teacher-forced logits with the gold ids they predict (BOS excluded).
pub fn loss_ps(tape: &mut Tape, samples: &[(Var, Vec<usize>)]) -> Var {
    assert!(!samples.is_empty(), "loss_ps needs at least one sample");
    let inv_b = 1.0 / samples.len() as f64;
    let mut per_sample = Vec::with_capacity(samples.len());
    for (logits, gold) in samples {
        assert_eq!(
            tape.shape(*logits).0,
            gold.len(),
            "logit rows must match gold length"
        );
        let weights = vec![1.0; gold.len()];
        per_sample.push(tape.nll_rows(*logits, gold, &weights));
    }
    let stacked = tape.concat_rows(&per_sample);
    let total = tape.sum_all(stacked);
    tape.scale(total, inv_b)
}

/// Two-layer classifier head over a row matrix.
fn mlp2(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let o = tape.matmul(h, w2);
    tape.add_row(o, b2)
}

/// Masked-region KL: `sum_s KL(r_s || softmax(MLP(g_s)))` over the masked
/// slots of one sample; zero when the plan is empty.
pub fn loss_mrm(
    tape: &mut Tape,
    image_out: &ImageFeatures,
    plan: &MaskPlan,
    region_set: &RegionSet,
    heads: &LossHeads<Var>,
) -> Var {
    if plan.masked_indices.is_empty() {
        return tape.constant(Array2::zeros((1, 1)));
    }
    let k_cls = region_set.regions[0].class_dist.len();
    let mut targets = Array2::zeros((plan.masked_indices.len(), k_cls));
    let row_ids: Vec<usize> = plan
        .masked_indices
        .iter()
        .map(|&s| {
            assert!(region_set.is_valid_slot(s), "masked slot {s} is not valid");
            s + 1 // image rows are [cls, region 0, region 1, ..]
        })
        .collect();
    for (i, &s) in plan.masked_indices.iter().enumerate() {
        for (j, &p) in region_set.regions[s].class_dist.iter().enumerate() {
            targets[[i, j]] = p;
        }
    }
    let g_rows = tape.gather_rows(image_out.rows, &row_ids);
    let logits = mlp2(
        tape, g_rows, heads.mrm_w1, heads.mrm_b1, heads.mrm_w2, heads.mrm_b2,
    );
    tape.kl_rows(logits, targets)
}

/// In-batch contrastive loss over projected, L2-normalized CLS rows,
/// both directions, with learnable temperature.
pub fn loss_cmm(
    tape: &mut Tape,
    g_cls_batch: Var,
    z_cls_batch: Var,
    heads: &LossHeads<Var>,
) -> Var {
    let b = tape.shape(g_cls_batch).0;
    assert_eq!(b, tape.shape(z_cls_batch).0, "batch size mismatch");
    assert!(b >= 1, "contrastive loss needs at least one pair");
    let g_proj = tape.matmul(g_cls_batch, heads.w_g);
    let z_proj = tape.matmul(z_cls_batch, heads.w_z);
    let g_norm = tape.normalize_rows(g_proj, NORM_EPS);
    let z_norm = tape.normalize_rows(z_proj, NORM_EPS);
    let z_t = tape.transpose(z_norm);
    let sims = tape.matmul(g_norm, z_t);
    let neg_log_tau = tape.scale(heads.log_tau, -1.0);
    let inv_tau = tape.exp(neg_log_tau);
    let scaled = tape.mul_scalar(sims, inv_tau); // rows: images, cols: texts
    let diagonal: Vec<usize> = (0..b).collect();
    let weights = vec![1.0 / b as f64; b];
    let i2t = tape.nll_rows(scaled, &diagonal, &weights);
    let scaled_t = tape.transpose(scaled);
    let t2i = tape.nll_rows(scaled_t, &diagonal, &weights);
    tape.add(i2t, t2i)
}

/// Rows of the valid (non-CLS) token positions.
fn valid_token_indices(mask: &[bool], cls_position: usize) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|&(i, &m)| m && i != cls_position)
        .map(|(i, _)| i)
        .collect()
}

/// Squared Hausdorff distance between the mapped, normalized region rows
/// and the normalized token rows (CLS rows excluded on both sides).
///
/// Works entirely in squared distances: `min` and `max` commute with the
/// square on non-negative values, so the result equals the squared
/// max-of-directed-distances form exactly.
pub fn loss_hd(
    tape: &mut Tape,
    image_out: &ImageFeatures,
    text_out: &TextFeatures,
    heads: &LossHeads<Var>,
) -> Var {
    let m_valid = image_out.mask[1..].iter().filter(|&&m| m).count();
    assert!(m_valid >= 1, "Hausdorff loss needs a valid region");
    let g_rows = tape.slice_rows(image_out.rows, 1, 1 + m_valid);
    let mapped = mlp2(
        tape, g_rows, heads.hd_w1, heads.hd_b1, heads.hd_w2, heads.hd_b2,
    );
    let g_norm = tape.normalize_rows(mapped, NORM_EPS);

    let cls_position = text_out.mask.len() - 1;
    let token_rows = valid_token_indices(&text_out.mask, cls_position);
    assert!(!token_rows.is_empty(), "Hausdorff loss needs a valid token");
    let z_rows = tape.gather_rows(text_out.rows, &token_rows);
    let z_norm = tape.normalize_rows(z_rows, NORM_EPS);

    let sq = tape.pairwise_sq_dist(g_norm, z_norm);
    let d_gz = tape.row_min(sq);
    let d_gz = tape.max_all(d_gz);
    let sq_t = tape.transpose(sq);
    let d_zg = tape.row_min(sq_t);
    let d_zg = tape.max_all(d_zg);
    let both = tape.concat_rows(&[d_gz, d_zg]);
    tape.max_all(both)
}

/// Attribute probabilities from pooled fused rows, pooled text rows, and
/// the text CLS row: `sigmoid(W1 (W2 sum z' + W3 sum z + W4 z_cls) + B)`.
pub fn predict_attributes(
    tape: &mut Tape,
    fused: &FusedFeatures,
    text: &TextFeatures,
    heads: &LossHeads<Var>,
) -> Var {
    let n_rows = tape.shape(fused.rows).0;
    let cls_position = n_rows - 1;
    let mut pool = Array2::zeros((1, n_rows));
    for i in valid_token_indices(&fused.mask, cls_position) {
        pool[[0, i]] = 1.0;
    }
    let pool = tape.constant(pool);
    let sum_fused = tape.matmul(pool, fused.rows);
    let sum_text = tape.matmul(pool, text.rows);
    let z_cls = tape.slice_rows(text.rows, cls_position, cls_position + 1);

    let a = tape.matmul(sum_fused, heads.att_w2);
    let b = tape.matmul(sum_text, heads.att_w3);
    let c = tape.matmul(z_cls, heads.att_w4);
    let s = tape.add(a, b);
    let s = tape.add(s, c);
    let logits = tape.matmul(s, heads.att_w1);
    let logits = tape.add_row(logits, heads.att_bias);
    tape.sigmoid(logits)
}

/// Binary cross entropy summed over attributes and batch rows.
/// Predictions are clamped to `[eps, 1-eps]` first.
pub fn loss_att(tape: &mut Tape, pred: Var, gold: &Array2<f64>) -> Var {
    assert_eq!(tape.shape(pred), gold.dim(), "attribute shape mismatch");
    let p = tape.clamp(pred, BCE_EPS, 1.0 - BCE_EPS);
    let ln_p = tape.ln(p);
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_const(neg_p, 1.0);
    let ln_q = tape.ln(one_minus_p);
    let y = tape.constant(gold.clone());
    let neg_y = tape.scale(y, -1.0);
    let one_minus_y = tape.add_const(neg_y, 1.0);
    let pos = tape.mul(y, ln_p);
    let neg = tape.mul(one_minus_y, ln_q);
    let sum = tape.add(pos, neg);
    let total = tape.sum_all(sum);
    tape.scale(total, -1.0)
}

/// Scalar loss parts prior to weighting.
pub struct LossParts {
    pub ps: Var,
    pub mrm: Var,
    pub cmm: Var,
    pub hd: Var,
    pub att: Var,
}

/// Weighted total: `ps + l1*mrm + l2*cmm + l3*(hd + att)`. Rejects
/// non-finite parts, naming the offending task.
pub fn total_loss(
    tape: &mut Tape,
    parts: &LossParts,
    weights: &TaskWeights,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    let named: [(&'static str, Var); 5] = [
        ("ps", parts.ps),
        ("mrm", parts.mrm),
        ("cmm", parts.cmm),
        ("hd", parts.hd),
        ("att", parts.att),
    ];
    for (task, v) in named {
        let value = tape.scalar(v);
        if !value.is_finite() {
            return Err(ObjectiveError::NonFinite { task, value });
        }
    }
    let fmm = tape.add(parts.hd, parts.att);
    let w_mrm = tape.scale(parts.mrm, weights.lambda1);
    let w_cmm = tape.scale(parts.cmm, weights.lambda2);
    let w_fmm = tape.scale(fmm, weights.lambda3);
    let t = tape.add(parts.ps, w_mrm);
    let t = tape.add(t, w_cmm);
    let total = tape.add(t, w_fmm);
    let breakdown = LossBreakdown {
        ps: tape.scalar(parts.ps),
        mrm: tape.scalar(parts.mrm),
        cmm: tape.scalar(parts.cmm),
        hd: tape.scalar(parts.hd),
        att: tape.scalar(parts.att),
        fmm: tape.scalar(fmm),
        total: tape.scalar(total),
    };
    if !breakdown.total.is_finite() {
        return Err(ObjectiveError::NonFinite {
            task: "total",
            value: breakdown.total,
        });
    }
    Ok((total, breakdown))
}

/// Recompute the weighted total from logged parts, in the same order of
/// operations as [`total_loss`]; used by the ablation-identity checks.
pub fn recompute_total(parts: &LossBreakdown, weights: &TaskWeights) -> f64 {
    parts.ps
        + weights.lambda1 * parts.mrm
        + weights.lambda2 * parts.cmm
        + weights.lambda3 * (parts.hd + parts.att)
}

/// Attribute-head hidden width (shared by `W_y^(2..4)`).
pub fn att_hidden_dim(dims: &ModelDims) -> usize {
    dims.d_txt
}

//! Autoregressive transformer decoder over fused features.
//!
//! Teacher-forced training logits plus greedy/beam generation. Layers are
//! pre-norm residual blocks: causal self-attention, cross-attention onto
//! the fused rows, feed-forward. The token embedding table is shared with
//! the text encoder and passed in explicitly.

use crate::autodiff::{Tape, Var};
use crate::encoders::{
    attn_mask, feed_forward, layer_norm, multi_head_attention, AttentionParams,
    FeedForwardParams, LayerNormParams,
};
use crate::model::{DropoutState, ModelDims, ModelError};
use crate::tokenizer::{BOS, EOS};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderLayerParams<T> {
    pub ln_self: LayerNormParams<T>,
    pub self_attn: AttentionParams<T>,
    pub ln_cross: LayerNormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub ln_ffn: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
}

impl<T> DecoderLayerParams<T> {
    pub fn map<B>(&self, f: &mut impl FnMut(&T) -> B) -> DecoderLayerParams<B> {
        DecoderLayerParams {
            ln_self: self.ln_self.map(f),
            self_attn: self.self_attn.map(f),
            ln_cross: self.ln_cross.map(f),
            cross_attn: self.cross_attn.map(f),
            ln_ffn: self.ln_ffn.map(f),
            ffn: self.ffn.map(f),
        }
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        self.ln_self.visit(f);
        self.self_attn.visit(f);
        self.ln_cross.visit(f);
        self.cross_attn.visit(f);
        self.ln_ffn.visit(f);
        self.ffn.visit(f);
    }
    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.ln_self.visit_mut(f);
        self.self_attn.visit_mut(f);
        self.ln_cross.visit_mut(f);
        self.cross_attn.visit_mut(f);
        self.ln_ffn.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderParams<T> {
    /// Learned positions for up to `max_target_len + 1` decoder slots.
    pub positions: T,
    pub layers: Vec<DecoderLayerParams<T>>,
    pub ln_final: LayerNormParams<T>,
    /// Output projection `d_txt -> vocab`.
    pub w_out: T,
    pub b_out: T,
}

impl<T> DecoderParams<T> {
    pub fn map<B>(&self, f: &mut impl FnMut(&T) -> B) -> DecoderParams<B> {
        DecoderParams {
            positions: f(&self.positions),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            ln_final: self.ln_final.map(f),
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
        }
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        f(&self.positions);
        for l in &self.layers {
            l.visit(f);
        }
        self.ln_final.visit(f);
        f(&self.w_out);
        f(&self.b_out);
    }
    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.positions);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        self.ln_final.visit_mut(f);
        f(&mut self.w_out);
        f(&mut self.b_out);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Maximum number of generated content tokens.
    pub max_len: usize,
    pub beam_width: usize,
    /// 1.0 scores hypotheses by raw log-probability; larger values divide
    /// by `length^(penalty-1)`, favoring shorter hypotheses.
    pub length_penalty: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_len: 80,
            beam_width: 1,
            length_penalty: 1.0,
        }
    }
}

impl GenerationConfig {
    fn validate(&self) {
        assert!(self.max_len >= 1, "max_len must be at least 1");
        assert!(self.beam_width >= 1, "beam_width must be at least 1");
    }
}

fn decoder_stack(
    tape: &mut Tape,
    mut x: Var,
    fused_rows: Var,
    fused_mask: &[bool],
    params: &DecoderParams<Var>,
    dims: &ModelDims,
) -> Var {
    let n = tape.shape(x).0;
    let causal = attn_mask(n, &vec![true; n], true);
    let cross = attn_mask(n, fused_mask, false);
    for layer in &params.layers {
        let h = layer_norm(tape, x, &layer.ln_self);
        let a = multi_head_attention(tape, h, h, &layer.self_attn, dims.dec_heads, &causal);
        x = tape.add(x, a);
        let h = layer_norm(tape, x, &layer.ln_cross);
        let c = multi_head_attention(
            tape,
            h,
            fused_rows,
            &layer.cross_attn,
            dims.dec_heads,
            &cross,
        );
        x = tape.add(x, c);
        let h = layer_norm(tape, x, &layer.ln_ffn);
        let f = feed_forward(tape, h, &layer.ffn);
        x = tape.add(x, f);
    }
    let x = layer_norm(tape, x, &params.ln_final);
    let logits = tape.matmul(x, params.w_out);
    tape.add_row(logits, params.b_out)
}

/// Teacher-forced logits: row `t` holds the distribution for `target[t+1]`
/// conditioned on `target[..=t]` and the fused rows. `target` must begin
/// with BOS; the returned matrix has `target.len() - 1` rows.
pub fn forward_teacher_forced(
    tape: &mut Tape,
    fused_rows: Var,
    fused_mask: &[bool],
    target: &[usize],
    token_embedding: Var,
    params: &DecoderParams<Var>,
    dims: &ModelDims,
    dropout: &mut DropoutState,
) -> Result<Var, ModelError> {
    assert!(target.len() >= 2, "target needs BOS plus at least one token");
    assert_eq!(target[0], BOS, "target must begin with BOS");
    let n = target.len() - 1;
    assert!(
        n <= dims.max_target_len + 1,
        "target longer than the decoder position table"
    );
    let vocab = tape.shape(token_embedding).0;
    for &id in target {
        if id >= vocab {
            return Err(ModelError::OovToken { id, vocab });
        }
    }
    let emb = tape.gather_rows(token_embedding, &target[..n]);
    let pos = tape.slice_rows(params.positions, 0, n);
    let mut x = tape.add(emb, pos);
    x = dropout.apply(tape, x);
    Ok(decoder_stack(tape, x, fused_rows, fused_mask, params, dims))
}

/// Log-probabilities of the next token after `prefix` (which begins with
/// BOS), evaluated with plain parameter arrays on a private tape.
fn next_token_logprobs(
    prefix: &[usize],
    fused_rows: &Array2<f64>,
    fused_mask: &[bool],
    embedding: &Array2<f64>,
    params: &DecoderParams<Array2<f64>>,
    dims: &ModelDims,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let fused = tape.constant(fused_rows.clone());
    let emb = tape.constant(embedding.clone());
    let pv = params.map(&mut |a: &Array2<f64>| tape.constant(a.clone()));
    let rows = tape.gather_rows(emb, prefix);
    let pos = tape.slice_rows(pv.positions, 0, prefix.len());
    let x = tape.add(rows, pos);
    let logits = decoder_stack(&mut tape, x, fused, fused_mask, &pv, dims);
    let n = tape.shape(logits).0;
    let last = tape.value(logits).row(n - 1).to_owned();
    log_softmax(last.as_slice().unwrap())
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
    logits.iter().map(|&x| x - lse).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Length-penalized hypothesis score. `emitted` counts generated tokens
/// including the terminator, so it is always at least 1.
fn penalized(score: f64, emitted: usize, length_penalty: f64) -> f64 {
    score / (emitted.max(1) as f64).powf(length_penalty - 1.0)
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<usize>, // includes leading BOS, excludes EOS
    score: f64,      // cumulative raw log-probability
}

/// Greedy argmax decoding; returns (content ids, raw score, emitted count).
fn greedy_trace(
    fused_rows: &Array2<f64>,
    fused_mask: &[bool],
    embedding: &Array2<f64>,
    params: &DecoderParams<Array2<f64>>,
    dims: &ModelDims,
    max_len: usize,
) -> (Vec<usize>, f64, usize) {
    let mut ids = vec![BOS];
    let mut score = 0.0;
    let mut emitted = 0;
    loop {
        let lp = next_token_logprobs(&ids, fused_rows, fused_mask, embedding, params, dims);
        let next = argmax(&lp);
        score += lp[next];
        emitted += 1;
        if next == EOS {
            break;
        }
        ids.push(next);
        if ids.len() - 1 >= max_len {
            break;
        }
    }
    (ids[1..].to_vec(), score, emitted)
}

/// Beam search over the decoder. `beam_width == 1` reduces to greedy
/// decoding; for wider beams the greedy trace is kept as a candidate so
/// the returned hypothesis never scores below it.
pub fn generate(
    fused_rows: &Array2<f64>,
    fused_mask: &[bool],
    embedding: &Array2<f64>,
    params: &DecoderParams<Array2<f64>>,
    dims: &ModelDims,
    cfg: &GenerationConfig,
) -> Vec<usize> {
    cfg.validate();
    let max_len = cfg.max_len.min(dims.max_target_len);
    let (greedy_ids, greedy_score, greedy_emitted) = greedy_trace(
        fused_rows, fused_mask, embedding, params, dims, max_len,
    );
    if cfg.beam_width == 1 {
        return greedy_ids;
    }

    let mut active = vec![Hypothesis {
        ids: vec![BOS],
        score: 0.0,
    }];
    // (content ids, penalized score)
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();

    for _ in 0..max_len {
        let mut candidates: Vec<(Hypothesis, usize, f64)> = Vec::new();
        for hyp in &active {
            let lp = next_token_logprobs(
                &hyp.ids, fused_rows, fused_mask, embedding, params, dims,
            );
            let mut ranked: Vec<usize> = (0..lp.len()).collect();
            ranked.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap());
            for &tok in ranked.iter().take(cfg.beam_width) {
                candidates.push((hyp.clone(), tok, hyp.score + lp[tok]));
            }
        }
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
        active.clear();
        for (hyp, tok, score) in candidates {
            if active.len() >= cfg.beam_width {
                break;
            }
            let emitted = hyp.ids.len(); // generated tokens incl. this one
            if tok == EOS {
                finished.push((
                    hyp.ids[1..].to_vec(),
                    penalized(score, emitted, cfg.length_penalty),
                ));
            } else {
                let mut ids = hyp.ids.clone();
                ids.push(tok);
                active.push(Hypothesis { ids, score });
            }
        }
        if active.is_empty() {
            break;
        }
    }
    for hyp in active {
        let emitted = hyp.ids.len() - 1;
        finished.push((
            hyp.ids[1..].to_vec(),
            penalized(hyp.score, emitted, cfg.length_penalty),
        ));
    }
    finished.push((
        greedy_ids,
        penalized(greedy_score, greedy_emitted, cfg.length_penalty),
    ));
    finished
        .into_iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(ids, _)| ids)
        .unwrap_or_default()
}

/// Penalized score of a fixed content-token sequence under the model,
/// used by tests to compare beam output against the greedy trace.
pub fn score_sequence(
    content: &[usize],
    fused_rows: &Array2<f64>,
    fused_mask: &[bool],
    embedding: &Array2<f64>,
    params: &DecoderParams<Array2<f64>>,
    dims: &ModelDims,
    length_penalty: f64,
) -> f64 {
    let mut ids = vec![BOS];
    let mut score = 0.0;
    for (i, &tok) in content.iter().chain(std::iter::once(&EOS)).enumerate() {
        let lp = next_token_logprobs(&ids, fused_rows, fused_mask, embedding, params, dims);
        score += lp[tok];
        if i < content.len() {
            ids.push(tok);
        }
    }
    penalized(score, content.len() + 1, length_penalty)
}

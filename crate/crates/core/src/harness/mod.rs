//! Training loop, evaluation pipeline, ablation switches, sweep tooling,
//! and checkpointing.

pub mod experiments;

use crate::autodiff::{Tape, Var};
use crate::datamodel::{AttributeVocabulary, ProductRecord, RegionSet};
use crate::decoder::{forward_teacher_forced, generate, GenerationConfig};
use crate::encoders::TokenSequence;
use crate::metrics::{
    evaluate_corpus, lead_baseline, EvalPair, HashedEmbeddings, MetricsReport,
    LEAD_DEFAULT_CHARS,
};
use crate::model::{encode_and_fuse, DropoutState, ModelDims, ModelError, ModelParams};
use crate::objectives::{
    loss_att, loss_cmm, loss_hd, loss_mrm, loss_ps, predict_attributes,
    sample_mask_regions, total_loss, LossBreakdown, LossParts, MaskPlan, ObjectiveError,
    TaskWeights,
};
use crate::tokenizer::TokenVocab;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration or data: {0}")]
    Invalid(String),
    #[error("configuration refused: {0}")]
    TooLarge(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("step {step}: {source}")]
    NonFinite {
        step: usize,
        source: ObjectiveError,
    },
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
}

/// Width/depth preset selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimPreset {
    Desk,
    Paper,
}

/// Flat training configuration; every field maps onto one config-file key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// "cosine" or "constant".
    pub schedule: String,
    pub steps: usize,
    pub dropout: f64,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub preset: DimPreset,
    pub mask_rate: f64,
    /// Maximum title+description tokens (overrides the preset).
    pub l_max: usize,
    /// Region capacity (overrides the preset).
    pub m_max: usize,
    pub max_summary_tokens: usize,
    /// Token vocabulary budget.
    pub vocab_cap: usize,
    /// Initialize the fusion forget gate shut (image-free control).
    pub saturate_gate: bool,
    /// Validation cadence in steps; 0 disables checkpoint selection.
    pub eval_every: usize,
    /// Reserved for corpora with category labels: whether batches may mix
    /// categories. Single-category corpora ignore it.
    pub mix_categories: bool,
    /// Informational label of the training corpus.
    pub data_source: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 3e-5,
            schedule: "cosine".into(),
            steps: 500,
            dropout: 0.1,
            seed: 0,
            lambda1: 0.8,
            lambda2: 0.05,
            lambda3: 0.3,
            preset: DimPreset::Desk,
            mask_rate: 0.15,
            l_max: 48,
            m_max: 12,
            max_summary_tokens: 24,
            vocab_cap: 2048,
            saturate_gate: false,
            eval_every: 0,
            mix_categories: false,
            data_source: None,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> TaskWeights {
        TaskWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Invalid("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Invalid("learning_rate must be > 0".into()));
        }
        if self.steps == 0 {
            return Err(TrainError::Invalid("steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(TrainError::Invalid("mask_rate outside [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Invalid("dropout outside [0, 1)".into()));
        }
        for (name, l) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(TrainError::Invalid(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        match self.schedule.as_str() {
            "cosine" | "constant" => Ok(()),
            other => Err(TrainError::Invalid(format!("unknown schedule {other:?}"))),
        }
    }

    /// Model dimensions for this config given corpus-derived sizes.
    pub fn dims(&self, vocab_size: usize, k_cls: usize, n_attrs: usize) -> ModelDims {
        let mut dims = match self.preset {
            DimPreset::Desk => {
                ModelDims::desk(vocab_size, self.l_max, self.m_max, k_cls, n_attrs)
            }
            DimPreset::Paper => ModelDims::paper(vocab_size, k_cls, n_attrs),
        };
        if self.preset == DimPreset::Paper {
            dims.l_max = self.l_max.max(dims.l_max);
            dims.m_max = self.m_max.max(dims.m_max);
        }
        dims.max_target_len = dims.max_target_len.max(self.max_summary_tokens);
        dims
    }

    /// Parse a config file: structured TOML first, then the flat
    /// `key=value` line format (unquoted strings allowed).
    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_flexible(&text)
    }

    pub fn from_str_flexible(text: &str) -> Result<Self, TrainError> {
        if let Ok(cfg) = toml::from_str::<TrainConfig>(text) {
            return Ok(cfg);
        }
        // flat key=value fallback
        let mut table = toml::Table::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(TrainError::Format(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = k.trim().to_string();
            let val = v.trim();
            let value = if let Ok(b) = val.parse::<bool>() {
                toml::Value::Boolean(b)
            } else if let Ok(i) = val.parse::<i64>() {
                toml::Value::Integer(i)
            } else if let Ok(f) = val.parse::<f64>() {
                toml::Value::Float(f)
            } else {
                toml::Value::String(val.trim_matches('"').to_string())
            };
            table.insert(key, value);
        }
        table
            .try_into()
            .map_err(|e| TrainError::Format(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Cosine decay from the initial rate at step 0 down to zero at the final
/// step; `schedule = "constant"` keeps the initial rate.
pub fn learning_rate_at(config: &TrainConfig, step: usize) -> f64 {
    match config.schedule.as_str() {
        "constant" => config.learning_rate,
        _ => {
            let total = config.steps.saturating_sub(1).max(1);
            let progress = (step.min(total)) as f64 / total as f64;
            config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Adam with canonical defaults (beta1 0.9, beta2 0.999, eps 1e-8) and
/// bias correction. Moment vectors align with the parameter visit order.
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams<Array2<f64>>) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |a: &Array2<f64>| m.push(Array2::zeros(a.raw_dim())));
        let v = m.clone();
        Self {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams<Array2<f64>>,
        grads: &ModelParams<Array2<f64>>,
        lr: f64,
    ) {
        self.t += 1;
        let mut gs: Vec<&Array2<f64>> = Vec::with_capacity(self.m.len());
        grads.visit(&mut |g: &Array2<f64>| gs.push(g));
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |p: &mut Array2<f64>| {
            let g = gs[i];
            let m = &mut ms[i];
            let v = &mut vs[i];
            azip_update(p, g, m, v, beta1, beta2, eps, bc1, bc2, lr);
            i += 1;
        });
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
    lr: f64,
) {
    for ((pv, &gv), (mv, vv)) in p
        .iter_mut()
        .zip(g.iter())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        *mv = beta1 * *mv + (1.0 - beta1) * gv;
        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
        let m_hat = *mv / bc1;
        let v_hat = *vv / bc2;
        *pv -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One record prepared for the model.
pub struct ModelInput {
    pub id: String,
    pub seq: TokenSequence,
    pub region_set: RegionSet,
    /// BOS .. EOS target ids.
    pub target: Vec<usize>,
    /// `1 x N` gold attribute row.
    pub attributes: Array2<f64>,
    pub summary: String,
    pub description: String,
}

/// Tokenize and shape records for training/evaluation under `dims`.
pub fn prepare_inputs(
    records: &[ProductRecord],
    vocab: &TokenVocab,
    dims: &ModelDims,
) -> Result<Vec<ModelInput>, TrainError> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if r.region_set.valid_count == 0 {
            return Err(TrainError::Invalid(format!(
                "record {} has no regions; the fine-grained alignment loss \
                 needs at least one",
                r.id
            )));
        }
        let d_img = r.region_set.regions[0].feature.len();
        let k_cls = r.region_set.regions[0].class_dist.len();
        if d_img != dims.d_img {
            return Err(TrainError::Invalid(format!(
                "record {}: region feature width {d_img} != model d_img {}",
                r.id, dims.d_img
            )));
        }
        if k_cls != dims.k_cls {
            return Err(TrainError::Invalid(format!(
                "record {}: class_dist width {k_cls} != model K {}",
                r.id, dims.k_cls
            )));
        }
        if r.attributes.len() != dims.n_attrs {
            return Err(TrainError::Invalid(format!(
                "record {}: attribute width {} != vocabulary size {}",
                r.id,
                r.attributes.len(),
                dims.n_attrs
            )));
        }
        let text = format!("{} {}", r.title, r.description);
        let mut ids = vocab.encode(&text);
        ids.truncate(dims.l_max);
        let seq = TokenSequence::new(&ids, dims.l_max);
        let target = vocab.encode_target(&r.summary, dims.max_target_len.saturating_sub(1));
        let attributes =
            Array2::from_shape_vec((1, dims.n_attrs), r.attributes.clone()).unwrap();
        out.push(ModelInput {
            id: r.id.clone(),
            seq,
            region_set: r.region_set.resize_capacity(dims.m_max, d_img, k_cls),
            target,
            attributes,
            summary: r.summary.clone(),
            description: r.description.clone(),
        });
    }
    Ok(out)
}

/// Versioned single-file checkpoint.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub token_vocab: TokenVocab,
    pub attr_vocab: AttributeVocabulary,
    pub params: ModelParams<Array2<f64>>,
    pub step: usize,
    pub rng_state: ChaCha8Rng,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = std::fs::File::create(path)?;
        let writer = std::io::BufWriter::new(file);
        serde_json::to_writer(writer, self).map_err(|e| TrainError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut ckpt: Checkpoint =
            serde_json::from_reader(reader).map_err(|e| TrainError::Format(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(TrainError::Format(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.token_vocab.rebuild_index();
        ckpt.attr_vocab.rebuild_index();
        Ok(ckpt)
    }
}

/// Per-sample tape outputs collected for batch losses.
struct SampleOutputs {
    logits: Var,
    gold: Vec<usize>,
    g_cls: Var,
    z_cls: Var,
    mrm: Var,
    hd: Var,
    pred_attr: Var,
    gold_attr: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
fn forward_sample(
    tape: &mut Tape,
    input: &ModelInput,
    plan: &MaskPlan,
    pv: &ModelParams<Var>,
    dims: &ModelDims,
    dropout: &mut DropoutState,
) -> Result<SampleOutputs, ModelError> {
    let (text, image, fused) = encode_and_fuse(
        tape,
        &input.seq,
        &input.region_set,
        &plan.masked_indices,
        pv,
        dims,
        dropout,
    );
    let logits = forward_teacher_forced(
        tape,
        fused.rows,
        &fused.mask,
        &input.target,
        pv.encoder.token_embedding,
        &pv.decoder,
        dims,
        dropout,
    )?;
    let mrm = loss_mrm(tape, &image, plan, &input.region_set, &pv.heads);
    let hd = loss_hd(tape, &image, &text, &pv.heads);
    let pred_attr = predict_attributes(tape, &fused, &text, &pv.heads);
    let g_cls = image.cls_row(tape);
    let z_cls = text.cls_row(tape);
    Ok(SampleOutputs {
        logits,
        gold: input.target[1..].to_vec(),
        g_cls,
        z_cls,
        mrm,
        hd,
        pred_attr,
        gold_attr: input.attributes.clone(),
    })
}

/// Mean of scalar vars.
fn mean_scalars(tape: &mut Tape, vars: &[Var]) -> Var {
    let stacked = tape.concat_rows(vars);
    let total = tape.sum_all(stacked);
    tape.scale(total, 1.0 / vars.len() as f64)
}

/// One optimization step over a batch; returns the loss breakdown.
#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut ModelParams<Array2<f64>>,
    adam: &mut Adam,
    batch: &[&ModelInput],
    config: &TrainConfig,
    dims: &ModelDims,
    lr: f64,
    step_rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<LossBreakdown, TrainError> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let mut dropout = if config.dropout > 0.0 {
        DropoutState::new(
            config.dropout,
            ChaCha8Rng::seed_from_u64(step_rng.gen()),
        )
    } else {
        DropoutState::off()
    };
    let mut mask_rng = ChaCha8Rng::seed_from_u64(step_rng.gen());

    let mut ps_samples = Vec::with_capacity(batch.len());
    let mut g_rows = Vec::with_capacity(batch.len());
    let mut z_rows = Vec::with_capacity(batch.len());
    let mut mrm_parts = Vec::with_capacity(batch.len());
    let mut hd_parts = Vec::with_capacity(batch.len());
    let mut pred_rows = Vec::with_capacity(batch.len());
    let mut gold_rows = Vec::with_capacity(batch.len());
    for input in batch {
        let plan = sample_mask_regions(&input.region_set, config.mask_rate, &mut mask_rng);
        let s = forward_sample(&mut tape, input, &plan, &pv, dims, &mut dropout)?;
        ps_samples.push((s.logits, s.gold));
        g_rows.push(s.g_cls);
        z_rows.push(s.z_cls);
        mrm_parts.push(s.mrm);
        hd_parts.push(s.hd);
        pred_rows.push(s.pred_attr);
        gold_rows.push(s.gold_attr);
    }
    let ps = loss_ps(&mut tape, &ps_samples);
    let mrm = mean_scalars(&mut tape, &mrm_parts);
    let hd = mean_scalars(&mut tape, &hd_parts);
    let g_batch = tape.concat_rows(&g_rows);
    let z_batch = tape.concat_rows(&z_rows);
    let cmm = loss_cmm(&mut tape, g_batch, z_batch, &pv.heads);
    let pred = tape.concat_rows(&pred_rows);
    let mut gold = Array2::zeros((batch.len(), dims.n_attrs));
    for (i, row) in gold_rows.iter().enumerate() {
        gold.row_mut(i).assign(&row.row(0));
    }
    let att = loss_att(&mut tape, pred, &gold);

    let parts = LossParts {
        ps,
        mrm,
        cmm,
        hd,
        att,
    };
    let (total, breakdown) = total_loss(&mut tape, &parts, &config.weights())
        .map_err(|source| TrainError::NonFinite { step, source })?;
    let mut grads = tape.backward(total);
    let grad_params = pv.extract_grads(&tape, &mut grads);
    adam.step(params, &grad_params, lr);
    Ok(breakdown)
}

/// Training output: final checkpoint plus the per-step loss log.
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossBreakdown>,
}

/// Rough element-count guard against configurations that cannot fit a
/// desk-scale budget.
fn memory_guard(dims: &ModelDims, config: &TrainConfig) -> Result<(), TrainError> {
    let d = dims.d_txt.max(dims.d_img);
    let approx_params = dims.vocab_size * dims.d_txt
        + (dims.text_layers + dims.image_layers + 2 * dims.dec_layers)
            * (4 * d * d + 2 * d * d * dims.ffn_mult);
    let act = config.batch_size * (dims.l_max + dims.m_max + 2) * d
        * (dims.text_layers + dims.image_layers + dims.dec_layers + 1)
        * 16;
    let bytes = (approx_params * 4 + act) * 8;
    const BUDGET: usize = 3 << 30; // 3 GiB
    if bytes > BUDGET {
        return Err(TrainError::TooLarge(format!(
            "estimated working set {} MiB exceeds the desk budget ({} MiB); \
             use the desk preset or shrink L/M/batch_size",
            bytes >> 20,
            BUDGET >> 20
        )));
    }
    Ok(())
}

/// Train on `records`. All randomness (batch order, region masking,
/// dropout) derives from `config.seed`, so equal seeds give bit-identical
/// loss logs.
pub fn train(
    config: &TrainConfig,
    records: &[ProductRecord],
    attr_vocab: &AttributeVocabulary,
) -> Result<TrainOutput, TrainError> {
    train_with_validation(config, records, &[], attr_vocab)
}

/// [`train`] with an optional validation set: when `eval_every > 0` and
/// the set is nonempty, the returned parameters are the ones with the
/// best validation summarization loss.
pub fn train_with_validation(
    config: &TrainConfig,
    records: &[ProductRecord],
    validation: &[ProductRecord],
    attr_vocab: &AttributeVocabulary,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if records.is_empty() {
        return Err(TrainError::Invalid("training set is empty".into()));
    }
    let texts: Vec<String> = records
        .iter()
        .flat_map(|r| {
            [
                format!("{} {}", r.title, r.description),
                r.summary.clone(),
            ]
        })
        .collect();
    let token_vocab = TokenVocab::build(texts.iter().map(|s| s.as_str()), config.vocab_cap);
    let k_cls = records[0].region_set.regions[0].class_dist.len();
    let dims = config.dims(token_vocab.len(), k_cls, attr_vocab.len());
    memory_guard(&dims, config)?;

    let inputs = prepare_inputs(records, &token_vocab, &dims)?;
    let val_inputs = prepare_inputs(validation, &token_vocab, &dims)?;
    let mut params = ModelParams::init(&dims, config.seed, config.saturate_gate);
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    let mut log = Vec::with_capacity(config.steps);
    let mut best: Option<(f64, ModelParams<Array2<f64>>)> = None;

    for step in 0..config.steps {
        let mut batch: Vec<&ModelInput> = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor >= order.len() {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            batch.push(&inputs[order[cursor]]);
            cursor += 1;
        }
        let lr = learning_rate_at(config, step);
        let mut step_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let breakdown = train_step(
            &mut params,
            &mut adam,
            &batch,
            config,
            &dims,
            lr,
            &mut step_rng,
            step,
        )?;
        log.push(breakdown);

        if config.eval_every > 0
            && !val_inputs.is_empty()
            && (step + 1) % config.eval_every == 0
        {
            let val = teacher_forced_ps(&params, &dims, &val_inputs)?;
            if best.as_ref().map(|(b, _)| val < *b).unwrap_or(true) {
                best = Some((val, params.clone()));
            }
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        dims,
        token_vocab,
        attr_vocab: attr_vocab.clone(),
        params,
        step: config.steps,
        rng_state: rng,
    };
    Ok(TrainOutput { checkpoint, log })
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Evaluation-mode summarization loss (no dropout, no region masking).
pub fn teacher_forced_ps(
    params: &ModelParams<Array2<f64>>,
    dims: &ModelDims,
    inputs: &[ModelInput],
) -> Result<f64, TrainError> {
    assert!(!inputs.is_empty());
    let mut total = 0.0;
    for input in inputs {
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let mut drop = DropoutState::off();
        let s = forward_sample(&mut tape, input, &MaskPlan::empty(), &pv, dims, &mut drop)?;
        let ps = loss_ps(&mut tape, &[(s.logits, s.gold)]);
        total += tape.scalar(ps);
    }
    Ok(total / inputs.len() as f64)
}

/// Decode one record's summary in evaluation mode.
pub fn generate_summary(
    params: &ModelParams<Array2<f64>>,
    dims: &ModelDims,
    vocab: &TokenVocab,
    input: &ModelInput,
    gen: &GenerationConfig,
) -> String {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let mut drop = DropoutState::off();
    let (_, _, fused) = encode_and_fuse(
        &mut tape,
        &input.seq,
        &input.region_set,
        &[],
        &pv,
        dims,
        &mut drop,
    );
    let fused_rows = tape.value(fused.rows).clone();
    let ids = generate(
        &fused_rows,
        &fused.mask,
        &params.encoder.token_embedding,
        &params.decoder,
        dims,
        gen,
    );
    vocab.decode(&ids)
}

/// Attribute probabilities for one record in evaluation mode.
pub fn predict_attribute_probs(
    params: &ModelParams<Array2<f64>>,
    dims: &ModelDims,
    input: &ModelInput,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let mut drop = DropoutState::off();
    let (text, _, fused) = encode_and_fuse(
        &mut tape,
        &input.seq,
        &input.region_set,
        &[],
        &pv,
        dims,
        &mut drop,
    );
    let pred = predict_attributes(&mut tape, &fused, &text, &pv.heads);
    tape.value(pred).row(0).to_vec()
}

/// Micro precision/recall/F1 of thresholded attribute predictions,
/// optionally restricted to a subset of attribute indices.
pub fn attribute_prf(
    params: &ModelParams<Array2<f64>>,
    dims: &ModelDims,
    inputs: &[ModelInput],
    indices: Option<&[usize]>,
    threshold: f64,
) -> (f64, f64, f64) {
    let cols: Vec<usize> = match indices {
        Some(ix) => ix.to_vec(),
        None => (0..dims.n_attrs).collect(),
    };
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for input in inputs {
        let probs = predict_attribute_probs(params, dims, input);
        for &c in &cols {
            let pred = probs[c] >= threshold;
            let gold = input.attributes[[0, c]] > 0.5;
            match (pred, gold) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

/// In-batch image-to-text retrieval accuracy over consecutive batches of
/// `batch_size` (the trailing remainder is dropped).
pub fn retrieval_accuracy(
    params: &ModelParams<Array2<f64>>,
    dims: &ModelDims,
    inputs: &[ModelInput],
    batch_size: usize,
) -> f64 {
    assert!(batch_size >= 1);
    let n_batches = inputs.len() / batch_size;
    assert!(n_batches >= 1, "not enough samples for one batch");
    let mut correct = 0usize;
    let mut total = 0usize;
    for b in 0..n_batches {
        let chunk = &inputs[b * batch_size..(b + 1) * batch_size];
        let mut g = Array2::zeros((batch_size, dims.d_proj));
        let mut z = Array2::zeros((batch_size, dims.d_proj));
        for (i, input) in chunk.iter().enumerate() {
            let mut tape = Tape::new();
            let pv = params.bind(&mut tape);
            let mut drop = DropoutState::off();
            let (text, image, _) = encode_and_fuse(
                &mut tape,
                &input.seq,
                &input.region_set,
                &[],
                &pv,
                dims,
                &mut drop,
            );
            let g_cls = image.cls_row(&mut tape);
            let z_cls = text.cls_row(&mut tape);
            let g_proj = tape.matmul(g_cls, pv.heads.w_g);
            let z_proj = tape.matmul(z_cls, pv.heads.w_z);
            let g_n = tape.normalize_rows(g_proj, crate::objectives::NORM_EPS);
            let z_n = tape.normalize_rows(z_proj, crate::objectives::NORM_EPS);
            g.row_mut(i).assign(&tape.value(g_n).row(0));
            z.row_mut(i).assign(&tape.value(z_n).row(0));
        }
        let sims = g.dot(&z.t());
        for i in 0..batch_size {
            let mut best = 0;
            for j in 1..batch_size {
                if sims[[i, j]] > sims[[i, best]] {
                    best = j;
                }
            }
            if best == i {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}

/// What produces candidate summaries during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSystem {
    Model,
    Lead,
}

/// Metric tokenizer choice, recorded in every report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricTokenizer {
    Char,
    Word,
}

/// Generate summaries for every record and score them, attaching
/// attribute precision/recall/F1 at threshold 0.5.
pub fn evaluate(
    ckpt: &Checkpoint,
    records: &[ProductRecord],
    gen: &GenerationConfig,
    system: EvalSystem,
    tokenizer: MetricTokenizer,
    keep_per_sample: bool,
) -> Result<MetricsReport, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    if records[0].attributes.len() != ckpt.attr_vocab.len() {
        return Err(TrainError::Invalid(format!(
            "attribute width {} does not match the checkpoint vocabulary ({})",
            records[0].attributes.len(),
            ckpt.attr_vocab.len()
        )));
    }
    let inputs = prepare_inputs(records, &ckpt.token_vocab, &ckpt.dims)?;
    let mut rows = Vec::with_capacity(inputs.len());
    for input in &inputs {
        let candidate = match system {
            EvalSystem::Model => {
                generate_summary(&ckpt.params, &ckpt.dims, &ckpt.token_vocab, input, gen)
            }
            EvalSystem::Lead => lead_baseline(&input.description, LEAD_DEFAULT_CHARS),
        };
        let pair = match tokenizer {
            MetricTokenizer::Char => EvalPair::chars(&candidate, &input.summary),
            MetricTokenizer::Word => EvalPair::words(&candidate, &input.summary),
        };
        rows.push((input.id.clone(), pair));
    }
    let emb = HashedEmbeddings::default();
    let decode = match system {
        EvalSystem::Lead => "lead".to_string(),
        EvalSystem::Model if gen.beam_width == 1 => "greedy".to_string(),
        EvalSystem::Model => format!("beam:{}", gen.beam_width),
    };
    let mut report = evaluate_corpus(
        &rows,
        &emb,
        match system {
            EvalSystem::Model => "model",
            EvalSystem::Lead => "lead",
        },
        match tokenizer {
            MetricTokenizer::Char => "char",
            MetricTokenizer::Word => "word",
        },
        &decode,
        keep_per_sample,
    );
    let (p, r, f) = attribute_prf(&ckpt.params, &ckpt.dims, &inputs, None, 0.5);
    report.attr_precision = Some(p);
    report.attr_recall = Some(r);
    report.attr_f1 = Some(f);
    Ok(report)
}

/// Ablation variants: each zeroes exactly one task weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    WithoutMrm,
    WithoutCmm,
    WithoutFmm,
}

impl std::str::FromStr for AblationVariant {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "w/o-mrm" | "wo-mrm" | "without-mrm" => Ok(Self::WithoutMrm),
            "w/o-cmm" | "wo-cmm" | "without-cmm" => Ok(Self::WithoutCmm),
            "w/o-fmm" | "wo-fmm" | "without-fmm" => Ok(Self::WithoutFmm),
            other => Err(TrainError::Invalid(format!(
                "unknown ablation variant {other:?} (expected w/o-MRM, w/o-CMM or w/o-FMM)"
            ))),
        }
    }
}

/// Copy of `config` with exactly one task weight zeroed.
pub fn ablate(variant: AblationVariant, config: &TrainConfig) -> TrainConfig {
    let mut out = config.clone();
    match variant {
        AblationVariant::WithoutMrm => out.lambda1 = 0.0,
        AblationVariant::WithoutCmm => out.lambda2 = 0.0,
        AblationVariant::WithoutFmm => out.lambda3 = 0.0,
    }
    out
}

/// Grid over the three task weights, evaluated with a shared seed set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda3: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda1.is_empty()
            || self.lambda2.is_empty()
            || self.lambda3.is_empty()
            || self.seeds.is_empty()
        {
            return Err(TrainError::Invalid("sweep grid must be nonempty".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.lambda1.len() * self.lambda2.len() * self.lambda3.len()
    }
}

/// One sweep grid point. Per-seed failures are recorded without aborting
/// the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Train/evaluate every grid cell with every seed.
pub fn sweep(
    spec: &SweepSpec,
    base: &TrainConfig,
    train_records: &[ProductRecord],
    eval_records: &[ProductRecord],
    attr_vocab: &AttributeVocabulary,
    gen: &GenerationConfig,
) -> Result<Vec<SweepCell>, TrainError> {
    spec.validate()?;
    let mut cells = Vec::with_capacity(spec.n_cells() * spec.seeds.len());
    for &l1 in &spec.lambda1 {
        for &l2 in &spec.lambda2 {
            for &l3 in &spec.lambda3 {
                for &seed in &spec.seeds {
                    let mut config = base.clone();
                    config.lambda1 = l1;
                    config.lambda2 = l2;
                    config.lambda3 = l3;
                    config.seed = seed;
                    let outcome = train(&config, train_records, attr_vocab).and_then(|out| {
                        evaluate(
                            &out.checkpoint,
                            eval_records,
                            gen,
                            EvalSystem::Model,
                            MetricTokenizer::Char,
                            false,
                        )
                    });
                    let (report, error) = match outcome {
                        Ok(r) => (Some(r), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    cells.push(SweepCell {
                        lambda1: l1,
                        lambda2: l2,
                        lambda3: l3,
                        seed,
                        report,
                        error,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Plot-ready CSV: one row per (cell, seed) with the headline metrics.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(
        "lambda1,lambda2,lambda3,seed,rouge_1,rouge_2,rouge_l,bleu_4,s_bleu,meteor,bert_score,error\n",
    );
    for c in cells {
        let (r1, r2, rl, b4, sb, me, bs) = match &c.report {
            Some(r) => (
                r.rouge1 * 100.0,
                r.rouge2 * 100.0,
                r.rouge_l * 100.0,
                r.bleu[3] * 100.0,
                r.sbleu * 100.0,
                r.meteor * 100.0,
                r.bertscore * 100.0,
            ),
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        out.push_str(&format!(
            "{},{},{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{}\n",
            c.lambda1,
            c.lambda2,
            c.lambda3,
            c.seed,
            r1,
            r2,
            rl,
            b4,
            sb,
            me,
            bs,
            c.error.as_deref().unwrap_or("")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic_dataset, SynthSpec};
    use crate::objectives::recompute_total;
    use std::collections::BTreeSet;

    fn small_corpus(seed: u64) -> (Vec<ProductRecord>, AttributeVocabulary) {
        let spec = SynthSpec {
            n_concepts: 4,
            n_samples: 12,
            vocab_size: 32,
            d_img: 8,
            visual_only_concepts: BTreeSet::new(),
            noise_std: 0.1,
            seed,
        };
        generate_synthetic_dataset(&spec).unwrap()
    }

    fn small_config(seed: u64, steps: usize) -> TrainConfig {
        let mut c = TrainConfig {
            steps,
            batch_size: 4,
            learning_rate: 1e-3,
            seed,
            l_max: 24,
            m_max: 4,
            vocab_cap: 64,
            ..TrainConfig::default()
        };
        c.preset = DimPreset::Desk;
        c
    }

    /// Shrink the desk dims through config overrides for fast tests.
    fn tiny_dims_config(seed: u64, steps: usize) -> TrainConfig {
        small_config(seed, steps)
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let mut c = TrainConfig::default();
        c.steps = 500;
        c.learning_rate = 3e-5;
        assert_eq!(learning_rate_at(&c, 0), 3e-5);
        assert!(learning_rate_at(&c, 499) <= 1e-2 * 3e-5);
        c.steps = 2;
        assert_eq!(learning_rate_at(&c, 0), 3e-5);
        assert!(learning_rate_at(&c, 1) <= 1e-2 * 3e-5);
        c.schedule = "constant".into();
        assert_eq!(learning_rate_at(&c, 1), 3e-5);
    }

    #[test]
    fn same_seed_runs_produce_identical_logs() {
        let (records, vocab) = small_corpus(3);
        let config = tiny_dims_config(7, 10);
        let a = train(&config, &records, &vocab).unwrap();
        let b = train(&config, &records, &vocab).unwrap();
        assert_eq!(a.log.len(), 10);
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
            assert_eq!(x.ps.to_bits(), y.ps.to_bits());
            assert_eq!(x.cmm.to_bits(), y.cmm.to_bits());
        }
    }

    #[test]
    fn zero_weights_log_total_equals_ps() {
        let (records, vocab) = small_corpus(4);
        let mut config = tiny_dims_config(8, 5);
        config.lambda1 = 0.0;
        config.lambda2 = 0.0;
        config.lambda3 = 0.0;
        let out = train(&config, &records, &vocab).unwrap();
        for step in &out.log {
            assert_eq!(step.total, step.ps);
        }
    }

    #[test]
    fn logged_total_recomputes_bit_exactly() {
        let (records, vocab) = small_corpus(5);
        let config = tiny_dims_config(9, 6);
        let out = train(&config, &records, &vocab).unwrap();
        let w = config.weights();
        for step in &out.log {
            assert_eq!(recompute_total(step, &w).to_bits(), step.total.to_bits());
            assert_eq!(step.fmm, step.hd + step.att);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_outputs() {
        let (records, vocab) = small_corpus(6);
        let config = tiny_dims_config(10, 4);
        let out = train(&config, &records, &vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        out.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let inputs = prepare_inputs(&records, &out.checkpoint.token_vocab, &out.checkpoint.dims)
            .unwrap();
        for input in inputs.iter().take(10) {
            let a = predict_attribute_probs(&out.checkpoint.params, &out.checkpoint.dims, input);
            let b = predict_attribute_probs(&loaded.params, &loaded.dims, input);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            let ga = generate_summary(
                &out.checkpoint.params,
                &out.checkpoint.dims,
                &out.checkpoint.token_vocab,
                input,
                &GenerationConfig::default(),
            );
            let gb = generate_summary(
                &loaded.params,
                &loaded.dims,
                &loaded.token_vocab,
                input,
                &GenerationConfig::default(),
            );
            assert_eq!(ga, gb);
        }
    }

    #[test]
    fn ablation_zeroes_exactly_one_weight() {
        let base = TrainConfig::default();
        let a = ablate(AblationVariant::WithoutMrm, &base);
        assert_eq!((a.lambda1, a.lambda2, a.lambda3), (0.0, 0.05, 0.3));
        let b = ablate(AblationVariant::WithoutCmm, &base);
        assert_eq!((b.lambda1, b.lambda2, b.lambda3), (0.8, 0.0, 0.3));
        let c = ablate(AblationVariant::WithoutFmm, &base);
        assert_eq!((c.lambda1, c.lambda2, c.lambda3), (0.8, 0.05, 0.0));
        assert_eq!(a.batch_size, base.batch_size);
        assert!("w/o-MRM".parse::<AblationVariant>().is_ok());
        assert!("nonsense".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn evaluate_rejects_empty_set_and_reports_lead() {
        let (records, vocab) = small_corpus(7);
        let config = tiny_dims_config(11, 3);
        let out = train(&config, &records, &vocab).unwrap();
        let gen = GenerationConfig::default();
        assert!(matches!(
            evaluate(&out.checkpoint, &[], &gen, EvalSystem::Model, MetricTokenizer::Char, false),
            Err(TrainError::EmptyEvalSet)
        ));
        let lead = evaluate(
            &out.checkpoint,
            &records,
            &gen,
            EvalSystem::Lead,
            MetricTokenizer::Char,
            false,
        )
        .unwrap();
        assert_eq!(lead.system, "lead");
        assert!(lead.attr_f1.is_some());
    }

    #[test]
    fn sweep_grid_counts_and_determinism() {
        let (records, vocab) = small_corpus(8);
        let mut config = tiny_dims_config(12, 2);
        config.batch_size = 4;
        let spec = SweepSpec {
            lambda1: vec![0.0, 0.5],
            lambda2: vec![0.0, 0.5],
            lambda3: vec![0.0, 0.5],
            seeds: vec![1],
        };
        assert_eq!(spec.n_cells(), 8);
        let cells =
            sweep(&spec, &config, &records, &records, &vocab, &GenerationConfig::default())
                .unwrap();
        assert_eq!(cells.len(), 8);
        assert!(cells.iter().all(|c| c.report.is_some()));
        let cells2 =
            sweep(&spec, &config, &records, &records, &vocab, &GenerationConfig::default())
                .unwrap();
        for (a, b) in cells.iter().zip(&cells2) {
            let (ra, rb) = (a.report.as_ref().unwrap(), b.report.as_ref().unwrap());
            assert_eq!(ra.rouge1.to_bits(), rb.rouge1.to_bits());
        }
        let csv = sweep_csv(&cells);
        assert_eq!(csv.lines().count(), 9); // header + 8 cells
    }

    #[test]
    fn config_file_round_trip_toml_and_flat() {
        let c = TrainConfig {
            steps: 42,
            learning_rate: 5e-4,
            schedule: "cosine".into(),
            ..TrainConfig::default()
        };
        let parsed = TrainConfig::from_str_flexible(&c.to_toml()).unwrap();
        assert_eq!(parsed, c);
        let flat = "steps=42\nlearning_rate=0.0005\nschedule=cosine\nbatch_size=16\npreset=desk\n";
        let parsed_flat = TrainConfig::from_str_flexible(flat).unwrap();
        assert_eq!(parsed_flat.steps, 42);
        assert_eq!(parsed_flat.learning_rate, 5e-4);
        assert_eq!(parsed_flat.schedule, "cosine");
        assert!(TrainConfig::from_str_flexible("steps\n").is_err());
    }

    #[test]
    fn paper_preset_is_refused_by_the_memory_guard() {
        let (records, vocab) = small_corpus(9);
        let mut config = tiny_dims_config(13, 2);
        config.preset = DimPreset::Paper;
        let err = train(&config, &records, &vocab).unwrap_err();
        assert!(matches!(err, TrainError::TooLarge(_)));
    }

    #[test]
    fn zeroed_task_weight_leaves_exclusive_head_untouched() {
        let (records, vocab) = small_corpus(10);
        let mut config = tiny_dims_config(14, 6);
        config.lambda1 = 0.0; // ablate masked region modeling
        let out = train(&config, &records, &vocab).unwrap();
        let init_dims = out.checkpoint.dims.clone();
        let init = ModelParams::init(&init_dims, config.seed, config.saturate_gate);
        // the MRM head receives exactly zero gradient, so Adam leaves it알
        assert_eq!(out.checkpoint.params.heads.mrm_w1, init.heads.mrm_w1);
        assert_eq!(out.checkpoint.params.heads.mrm_b2, init.heads.mrm_b2);
        // a shared parameter must have moved
        assert_ne!(
            out.checkpoint.params.encoder.token_embedding,
            init.encoder.token_embedding
        );
    }
}

//! Multi-modal product summarization at desk scale.
//!
//! The crate trains a small encoder/decoder transformer over product text
//! plus detector-style image region features, fused through a forget-gated
//! cross-attention block, with a five-part multi-task objective:
//! summary likelihood, masked region modeling, in-batch image-text
//! contrastive alignment, Hausdorff set alignment, and multi-hot attribute
//! prediction. It also ships a synthetic corpus generator and a
//! summarization metric suite (ROUGE, BLEU, sentence BLEU, exact-match
//! METEOR, embedding-based F1).

pub mod autodiff;
pub mod datamodel;
pub mod decoder;
pub mod encoders;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numcheck;
pub mod objectives;
#[cfg(test)]
pub(crate) mod testref;
pub mod tokenizer;

//! The two-branch snippet model: a temporal-conv embedder feeding a
//! class-agnostic attention head and a per-snippet classification head, with
//! the MIL top-k classification loss and its analytic gradients.

mod backward;
mod checkpoint;
mod forward;
mod params;
mod train;

pub use backward::gradients;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward, forward_with_dropout, ForwardOutput};
pub use params::{ModelParams, TENSOR_NAMES};
pub use train::{train_base, TrainedBase};

pub(crate) use backward::{backward, batch_gradients};
pub(crate) use forward::{forward_traced, ForwardTrace};
pub(crate) use train::Adam;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

/// Floor applied inside every logarithm.
pub(crate) const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature dimension mismatch: model expects {expected}, input has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("parameter shapes do not match")]
    ShapeMismatch,
    #[error("video label has no active class")]
    EmptyLabel,
    #[error("label length {found} does not match the model's {expected} classes")]
    LabelLength { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("dataset has no videos")]
    EmptyDataset,
    #[error("expected a training split")]
    NotTrainSplit,
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: &'static str },
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("checkpoint {}: {reason}", file.display())]
    Checkpoint { file: PathBuf, reason: String },
    #[error("checkpoint {}: {source}", file.display())]
    CheckpointIo {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn default_learning_rate() -> f64 {
    3e-5
}
fn default_batch_size() -> usize {
    30
}
fn default_topk_ratio() -> usize {
    8
}
fn default_dropout() -> f64 {
    0.1
}
fn default_hidden_dim() -> usize {
    128
}

/// Stage-1 training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Videos per optimizer step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    /// Top-k ratio `r`: `k = max(1, ceil(N / r))` snippets are pooled per class.
    #[serde(default = "default_topk_ratio")]
    pub topk_ratio: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs: 20,
            topk_ratio: default_topk_ratio(),
            dropout: default_dropout(),
            hidden_dim: default_hidden_dim(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub(crate) fn validate(&self) -> Result<(), ModelError> {
        fn err(field: &'static str, reason: impl Into<String>) -> ModelError {
            ModelError::InvalidConfig { field, reason: reason.into() }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(err("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be >= 1"));
        }
        if self.topk_ratio == 0 {
            return Err(err("topk_ratio", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(err("dropout", "must be in [0, 1)"));
        }
        if self.hidden_dim == 0 {
            return Err(err("hidden_dim", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-video classification scores derived by top-k aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoScores {
    /// `f_agg(CAS)` — background slot included.
    pub y_base: Array1<f64>,
    /// `f_agg(attention * CAS)` — attention-suppressed scores.
    pub y_supp: Array1<f64>,
}

/// Number of pooled snippets for a sequence of length `n` at ratio `r`.
pub(crate) fn topk_count(n: usize, topk_ratio: usize) -> usize {
    n.div_ceil(topk_ratio).max(1)
}

pub(crate) struct TopkTrace {
    pub k: usize,
    /// Row indices pooled per class column.
    pub selected: Vec<Vec<usize>>,
    pub probs: Array1<f64>,
}

/// Top-k aggregation with the selection recorded for backpropagation.
pub(crate) fn aggregate_topk_traced(scores: &Array2<f64>, topk_ratio: usize) -> TopkTrace {
    let n = scores.nrows();
    let k = topk_count(n, topk_ratio);
    let classes = scores.ncols();
    let mut pooled = Array1::zeros(classes);
    let mut selected = Vec::with_capacity(classes);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for c in 0..classes {
        order.clear();
        order.extend(0..n);
        // Descending by value, ascending index on ties: a deterministic pick.
        order.sort_by(|&a, &b| {
            scores[[b, c]].total_cmp(&scores[[a, c]]).then_with(|| a.cmp(&b))
        });
        order.truncate(k);
        pooled[c] = order.iter().map(|&i| scores[[i, c]]).sum::<f64>() / k as f64;
        selected.push(order.clone());
    }
    TopkTrace { k, selected, probs: softmax(&pooled) }
}

/// Video-level class probabilities: per class, the mean of the
/// `k = max(1, ceil(N / topk_ratio))` largest column entries, then a softmax
/// across the aggregated values.
pub fn aggregate_topk(scores: &Array2<f64>, topk_ratio: usize) -> Array1<f64> {
    aggregate_topk_traced(scores, topk_ratio).probs
}

pub(crate) fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// `[label, extra]` normalized to unit sum. The base variant appends 1
/// (background assumed present), the suppressed variant appends 0.
pub(crate) fn extended_label(label: &[u8], extra: f64) -> Array1<f64> {
    let mut y: Array1<f64> =
        Array1::from_iter(label.iter().map(|&v| f64::from(v)).chain(std::iter::once(extra)));
    let sum = y.sum();
    y.mapv_inplace(|v| v / sum);
    y
}

pub(crate) fn validate_label(label: &[u8], num_classes: usize) -> Result<(), ModelError> {
    if label.len() != num_classes {
        return Err(ModelError::LabelLength { expected: num_classes, found: label.len() });
    }
    if label.iter().all(|&v| v == 0) {
        return Err(ModelError::EmptyLabel);
    }
    Ok(())
}

/// Attention-suppressed CAS: row `n` of the CAS scaled by `attention[n]`.
pub(crate) fn suppressed_cas(out: &ForwardOutput) -> Array2<f64> {
    let mut scores = out.cas.clone();
    for (mut row, &phi) in scores.rows_mut().into_iter().zip(out.attention.iter()) {
        row.mapv_inplace(|v| v * phi);
    }
    scores
}

/// Video-level scores for both aggregation routes.
pub fn video_scores(out: &ForwardOutput, topk_ratio: usize) -> VideoScores {
    VideoScores {
        y_base: aggregate_topk(&out.cas, topk_ratio),
        y_supp: aggregate_topk(&suppressed_cas(out), topk_ratio),
    }
}

/// MIL classification loss: cross-entropy of the base scores against
/// `[y, 1]` plus cross-entropy of the suppressed scores against `[y, 0]`,
/// both labels normalized to unit sum, logs clamped at `1e-12`.
pub fn classification_loss(
    out: &ForwardOutput,
    label: &[u8],
    topk_ratio: usize,
) -> Result<f64, ModelError> {
    let num_classes = out.cas.ncols() - 1;
    validate_label(label, num_classes)?;
    let y_base = extended_label(label, 1.0);
    let y_supp = extended_label(label, 0.0);
    let base = aggregate_topk(&out.cas, topk_ratio);
    let supp = aggregate_topk(&suppressed_cas(out), topk_ratio);
    Ok(cross_entropy(&y_base, &base) + cross_entropy(&y_supp, &supp))
}

pub(crate) fn cross_entropy(target: &Array1<f64>, probs: &Array1<f64>) -> f64 {
    target
        .iter()
        .zip(probs.iter())
        .map(|(&t, &p)| if t > 0.0 { -t * p.max(LOG_CLAMP).ln() } else { 0.0 })
        .sum()
}

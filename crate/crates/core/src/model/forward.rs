//! Forward pass: zero-padded kernel-3 temporal convolution, ReLU, optional
//! inverted dropout, then the sigmoid attention head and the per-snippet
//! softmax classification head.

use super::{ModelError, ModelParams};
use crate::data::FeatureSequence;
use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Per-snippet model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Class-agnostic foreground attention, each value in `[0, 1]`.
    pub attention: Array1<f64>,
    /// Class activation sequence: `N x (C_I + 1)`, each row a probability
    /// distribution; the last column is the background class.
    pub cas: Array2<f64>,
}

/// Intermediates kept for backpropagation.
pub(crate) struct ForwardTrace {
    pub features: Array2<f64>,
    pub pre_act: Array2<f64>,
    /// Post-ReLU, post-dropout activations seen by both heads.
    pub hidden: Array2<f64>,
    /// Multiplier applied by dropout (`0` or `1/(1-rate)`), if enabled.
    pub drop_scale: Option<Array2<f64>>,
    pub attention: Array1<f64>,
    pub cas: Array2<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> ForwardOutput {
        ForwardOutput { attention: self.attention.clone(), cas: self.cas.clone() }
    }
}

fn features_f64(feats: &FeatureSequence) -> Array2<f64> {
    feats.data().mapv(f64::from)
}

/// Deterministic forward pass (dropout off). This is the inference path.
pub fn forward(params: &ModelParams, feats: &FeatureSequence) -> Result<ForwardOutput, ModelError> {
    forward_traced(params, feats, None).map(|t| t.output())
}

/// Forward pass with inverted dropout after the ReLU, used during training.
pub fn forward_with_dropout(
    params: &ModelParams,
    feats: &FeatureSequence,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardOutput, ModelError> {
    forward_traced(params, feats, Some((rate, rng))).map(|t| t.output())
}

pub(crate) fn forward_traced(
    params: &ModelParams,
    feats: &FeatureSequence,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<ForwardTrace, ModelError> {
    if feats.dim() != params.feature_dim() {
        return Err(ModelError::DimensionMismatch {
            expected: params.feature_dim(),
            found: feats.dim(),
        });
    }
    let features = features_f64(feats);
    let n = features.nrows();

    // Temporal convolution, zero padding at both ends.
    let mut pre_act = features.dot(&params.embed_w[1]);
    if n > 1 {
        let left = features.slice(s![..n - 1, ..]).dot(&params.embed_w[0]);
        pre_act.slice_mut(s![1.., ..]).zip_mut_with(&left, |a, &b| *a += b);
        let right = features.slice(s![1.., ..]).dot(&params.embed_w[2]);
        pre_act.slice_mut(s![..n - 1, ..]).zip_mut_with(&right, |a, &b| *a += b);
    }
    for mut row in pre_act.rows_mut() {
        row.zip_mut_with(&params.embed_b, |a, &b| *a += b);
    }

    let mut hidden = pre_act.mapv(|v| v.max(0.0));
    let drop_scale = match dropout {
        Some((rate, rng)) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let scale = Array2::from_shape_fn(hidden.dim(), |_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            });
            hidden.zip_mut_with(&scale, |a, &s| *a *= s);
            Some(scale)
        }
        _ => None,
    };

    let attn_logits = hidden.dot(&params.attn_w) + params.attn_b;
    let attention = attn_logits.mapv(sigmoid);

    let mut cas = hidden.dot(&params.cls_w);
    for mut row in cas.rows_mut() {
        row.zip_mut_with(&params.cls_b, |a, &b| *a += b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }

    Ok(ForwardTrace { features, pre_act, hidden, drop_scale, attention, cas })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

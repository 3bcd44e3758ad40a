//! Inference: video-level class scoring, multi-threshold proposal generation
//! from the attention sequence, and Gaussian soft-NMS.

use crate::data::VideoRecord;
use crate::evaluator::iou_unchecked;
use crate::model::{aggregate_topk, forward, suppressed_cas, ForwardOutput, ModelError, ModelParams};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A candidate temporal detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub class_id: usize,
    /// Seconds.
    pub start: f64,
    /// Seconds, `end > start`.
    pub end: f64,
    pub confidence: f64,
}

fn default_class_threshold() -> f64 {
    0.2
}
fn default_attention_thresholds() -> Vec<f64> {
    // 0.10, 0.15, ..., 0.90
    (2..=18).map(|i| i as f64 * 0.05).collect()
}
fn default_nms_sigma() -> f64 {
    0.3
}
fn default_nms_min_score() -> f64 {
    1e-4
}
fn default_outer_margin() -> f64 {
    0.25
}
fn default_topk_ratio() -> usize {
    8
}

/// Inference-time knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Minimum video-level class probability for a class to emit proposals.
    #[serde(default = "default_class_threshold")]
    pub class_threshold: f64,
    /// Strictly increasing thresholds applied to the attention sequence.
    #[serde(default = "default_attention_thresholds")]
    pub attention_thresholds: Vec<f64>,
    /// Gaussian soft-NMS decay scale.
    #[serde(default = "default_nms_sigma")]
    pub nms_sigma: f64,
    /// Proposals decayed below this confidence are dropped.
    #[serde(default = "default_nms_min_score")]
    pub nms_min_score: f64,
    /// Outer margin length as a fraction of the proposal length.
    #[serde(default = "default_outer_margin")]
    pub outer_margin: f64,
    #[serde(default = "default_topk_ratio")]
    pub topk_ratio: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            class_threshold: default_class_threshold(),
            attention_thresholds: default_attention_thresholds(),
            nms_sigma: default_nms_sigma(),
            nms_min_score: default_nms_min_score(),
            outer_margin: default_outer_margin(),
            topk_ratio: default_topk_ratio(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        fn err(field: &'static str, reason: impl Into<String>) -> ModelError {
            ModelError::InvalidConfig { field, reason: reason.into() }
        }
        if self.attention_thresholds.is_empty() {
            return Err(err("attention_thresholds", "must not be empty"));
        }
        for pair in self.attention_thresholds.windows(2) {
            if pair[1] <= pair[0] {
                return Err(err("attention_thresholds", "must be strictly increasing"));
            }
        }
        if self
            .attention_thresholds
            .iter()
            .any(|&t| !(0.0..1.0).contains(&t) || t == 0.0)
        {
            return Err(err("attention_thresholds", "must lie strictly inside (0, 1)"));
        }
        if !(self.nms_sigma > 0.0 && self.nms_sigma.is_finite()) {
            return Err(err("nms_sigma", "must be positive"));
        }
        if !(self.outer_margin >= 0.0) {
            return Err(err("outer_margin", "must be >= 0"));
        }
        if self.topk_ratio == 0 {
            return Err(err("topk_ratio", "must be >= 1"));
        }
        Ok(())
    }
}

/// Video-level class probabilities from the attention-suppressed CAS
/// (top-k aggregation of `attention * CAS`).
pub fn video_class_scores(out: &ForwardOutput, topk_ratio: usize) -> Array1<f64> {
    aggregate_topk(&suppressed_cas(out), topk_ratio)
}

/// Thresholds the attention sequence at every configured level and turns
/// maximal runs into proposals for each selected class.
///
/// A run of snippets `[i, j]` becomes the interval
/// `[i * stride, (j + 1) * stride)`. Confidence is the outer-inner contrast —
/// mean attention-weighted class evidence inside the run minus the mean over
/// the outer margins — plus the video-level class score. Identical spans from
/// different thresholds are deduplicated keeping the highest confidence.
pub fn generate_proposals(
    out: &ForwardOutput,
    selected_classes: &[(usize, f64)],
    snippet_stride: f64,
    cfg: &InferenceConfig,
) -> Vec<Proposal> {
    let n = out.attention.len();
    // (class, first snippet, last snippet) -> confidence
    let mut best: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();

    for &(class_id, class_score) in selected_classes {
        let evidence: Vec<f64> =
            (0..n).map(|i| out.attention[i] * out.cas[[i, class_id]]).collect();
        for &threshold in &cfg.attention_thresholds {
            let mut i = 0;
            while i < n {
                if out.attention[i] < threshold {
                    i += 1;
                    continue;
                }
                let mut j = i;
                while j + 1 < n && out.attention[j + 1] >= threshold {
                    j += 1;
                }
                let len = j - i + 1;
                let inner: f64 = evidence[i..=j].iter().sum::<f64>() / len as f64;
                let margin = (cfg.outer_margin * len as f64).ceil() as usize;
                let mut outer_sum = 0.0;
                let mut outer_count = 0usize;
                for k in i.saturating_sub(margin)..i {
                    outer_sum += evidence[k];
                    outer_count += 1;
                }
                for k in j + 1..=(j + margin).min(n - 1) {
                    outer_sum += evidence[k];
                    outer_count += 1;
                }
                let outer = if outer_count == 0 { 0.0 } else { outer_sum / outer_count as f64 };
                let confidence = inner - outer + class_score;
                let entry = best.entry((class_id, i, j)).or_insert(f64::NEG_INFINITY);
                if confidence > *entry {
                    *entry = confidence;
                }
                i = j + 1;
            }
        }
    }

    best.into_iter()
        .map(|((class_id, i, j), confidence)| Proposal {
            class_id,
            start: i as f64 * snippet_stride,
            end: (j + 1) as f64 * snippet_stride,
            confidence,
        })
        .collect()
}

fn selection_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.start.total_cmp(&b.start))
        .then_with(|| a.class_id.cmp(&b.class_id))
        .then_with(|| a.end.total_cmp(&b.end))
}

/// Gaussian soft-NMS, applied per class: repeatedly keep the most confident
/// remaining proposal and decay every other proposal of the same class by
/// `exp(-iou^2 / nms_sigma)`; proposals decayed below `nms_min_score` are
/// dropped. Output is sorted by final confidence (ties: earlier start, then
/// smaller class id).
pub fn soft_nms(proposals: Vec<Proposal>, cfg: &InferenceConfig) -> Vec<Proposal> {
    let mut remaining = proposals;
    let mut kept = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let best = remaining
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| selection_order(a, b))
            .map(|(i, _)| i)
            .expect("non-empty");
        let winner = remaining.swap_remove(best);
        for other in &mut remaining {
            if other.class_id == winner.class_id {
                let iou = iou_unchecked((winner.start, winner.end), (other.start, other.end));
                other.confidence *= (-iou * iou / cfg.nms_sigma).exp();
            }
        }
        remaining.retain(|p| p.confidence >= cfg.nms_min_score);
        kept.push(winner);
    }
    kept.sort_by(selection_order);
    kept
}

/// Full inference for one video: deterministic forward pass, class selection,
/// proposal generation, soft-NMS.
pub fn localize(
    params: &ModelParams,
    video: &VideoRecord,
    cfg: &InferenceConfig,
) -> Result<Vec<Proposal>, ModelError> {
    cfg.validate()?;
    let out = forward(params, &video.features)?;
    let scores = video_class_scores(&out, cfg.topk_ratio);
    let selected: Vec<(usize, f64)> = (0..params.num_classes())
        .filter(|&c| scores[c] > cfg.class_threshold)
        .map(|c| (c, scores[c]))
        .collect();
    let mut proposals =
        generate_proposals(&out, &selected, video.features.snippet_stride(), cfg);
    for p in &mut proposals {
        p.end = p.end.min(video.duration);
    }
    proposals.retain(|p| p.end > p.start);
    Ok(soft_nms(proposals, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};

    fn uniform_output(attention: Array1<f64>, classes: usize) -> ForwardOutput {
        let n = attention.len();
        ForwardOutput {
            attention,
            cas: Array2::from_elem((n, classes + 1), 1.0 / (classes + 1) as f64),
        }
    }

    #[test]
    fn scores_reduce_to_plain_aggregation_with_full_attention() {
        let cas = array![[0.7, 0.2, 0.1], [0.2, 0.6, 0.2], [0.1, 0.1, 0.8]];
        let out = ForwardOutput { attention: Array1::from_elem(3, 1.0), cas: cas.clone() };
        let scores = video_class_scores(&out, 8);
        let direct = aggregate_topk(&cas, 8);
        for (a, b) in scores.iter().zip(direct.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_attention_gives_uniform_scores() {
        let out = uniform_output(Array1::zeros(4), 2);
        let scores = video_class_scores(&out, 8);
        for &s in scores.iter() {
            assert_relative_eq!(s, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_filters_the_pooled_snippets() {
        // k = 1, column [0.9, 0.1] with attention [1, 0]: pooled value 0.9.
        let cas = array![[0.9, 0.1], [0.1, 0.9]];
        let out = ForwardOutput { attention: array![1.0, 0.0], cas };
        let scores = video_class_scores(&out, 8);
        // Pooled suppressed values are [0.9, 0.1] before the softmax.
        let expected = crate::model::aggregate_topk(&array![[0.9, 0.1]], 8);
        assert_relative_eq!(scores[0], expected[0], epsilon = 1e-12);
    }

    #[test]
    fn thresholding_extracts_runs() {
        let out = uniform_output(array![0.2, 0.8, 0.9, 0.3], 1);
        let cfg = InferenceConfig {
            attention_thresholds: vec![0.5],
            outer_margin: 0.0,
            ..InferenceConfig::default()
        };
        let proposals = generate_proposals(&out, &[(0, 0.4)], 1.0, &cfg);
        assert_eq!(proposals.len(), 1);
        assert_eq!(proposals[0].start, 1.0);
        assert_eq!(proposals[0].end, 3.0);
        assert_eq!(proposals[0].class_id, 0);
    }

    #[test]
    fn all_below_threshold_yields_nothing() {
        let out = uniform_output(Array1::from_elem(6, 0.05), 1);
        let cfg = InferenceConfig::default();
        assert!(generate_proposals(&out, &[(0, 0.5)], 1.0, &cfg).is_empty());
    }

    #[test]
    fn all_above_threshold_yields_whole_video_run() {
        let out = uniform_output(Array1::from_elem(6, 0.95), 1);
        let cfg = InferenceConfig::default();
        let proposals = generate_proposals(&out, &[(0, 0.5)], 2.0, &cfg);
        // Every threshold produces the same full-video run; deduplicated.
        assert_eq!(proposals.len(), 1);
        assert_eq!(proposals[0].start, 0.0);
        assert_eq!(proposals[0].end, 12.0);
    }

    #[test]
    fn nested_runs_across_thresholds() {
        let out = uniform_output(array![0.1, 0.6, 0.9, 0.6, 0.1], 1);
        let cfg = InferenceConfig {
            attention_thresholds: vec![0.5, 0.8],
            ..InferenceConfig::default()
        };
        let proposals = generate_proposals(&out, &[(0, 0.4)], 1.0, &cfg);
        // Runs: [1,3] at 0.5 and [2,2] at 0.8; the latter nests inside the former.
        assert_eq!(proposals.len(), 2);
        let outer = proposals.iter().find(|p| p.start == 1.0).unwrap();
        let inner = proposals.iter().find(|p| p.start == 2.0).unwrap();
        assert!(inner.start >= outer.start && inner.end <= outer.end);
    }

    #[test]
    fn soft_nms_keeps_disjoint_proposals() {
        let cfg = InferenceConfig::default();
        let proposals = vec![
            Proposal { class_id: 0, start: 0.0, end: 1.0, confidence: 0.9 },
            Proposal { class_id: 0, start: 5.0, end: 6.0, confidence: 0.7 },
        ];
        let out = soft_nms(proposals.clone(), &cfg);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].confidence, 0.9);
        assert_eq!(out[1].confidence, 0.7);
    }

    #[test]
    fn soft_nms_decays_identical_intervals() {
        let cfg = InferenceConfig::default();
        let proposals = vec![
            Proposal { class_id: 0, start: 0.0, end: 2.0, confidence: 1.0 },
            Proposal { class_id: 0, start: 0.0, end: 2.0, confidence: 0.9 },
        ];
        let out = soft_nms(proposals, &cfg);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].confidence, 1.0);
        // 0.9 * exp(-1 / 0.3)
        assert_relative_eq!(out[1].confidence, 0.9 * (-1.0f64 / 0.3).exp(), epsilon = 1e-12);
        assert_relative_eq!(out[1].confidence, 0.032106, epsilon = 1e-6);
    }

    #[test]
    fn soft_nms_ignores_other_classes() {
        let cfg = InferenceConfig::default();
        let proposals = vec![
            Proposal { class_id: 0, start: 0.0, end: 2.0, confidence: 1.0 },
            Proposal { class_id: 1, start: 0.0, end: 2.0, confidence: 0.9 },
        ];
        let out = soft_nms(proposals, &cfg);
        assert_eq!(out[1].confidence, 0.9);
    }

    #[test]
    fn soft_nms_is_order_invariant() {
        let cfg = InferenceConfig::default();
        let base = vec![
            Proposal { class_id: 0, start: 0.0, end: 4.0, confidence: 0.9 },
            Proposal { class_id: 0, start: 1.0, end: 5.0, confidence: 0.8 },
            Proposal { class_id: 0, start: 3.0, end: 7.0, confidence: 0.7 },
            Proposal { class_id: 1, start: 0.0, end: 4.0, confidence: 0.85 },
        ];
        let mut shuffled = base.clone();
        shuffled.reverse();
        let a = soft_nms(base, &cfg);
        let b = soft_nms(shuffled, &cfg);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.class_id, y.class_id);
            assert_eq!(x.start, y.start);
            assert_relative_eq!(x.confidence, y.confidence, epsilon = 1e-12);
        }
    }

    #[test]
    fn soft_nms_never_increases_confidence_and_is_idempotent_on_disjoint() {
        let cfg = InferenceConfig::default();
        let input = vec![
            Proposal { class_id: 0, start: 0.0, end: 1.0, confidence: 0.6 },
            Proposal { class_id: 0, start: 2.0, end: 3.0, confidence: 0.5 },
            Proposal { class_id: 1, start: 4.0, end: 5.0, confidence: 0.4 },
        ];
        let once = soft_nms(input.clone(), &cfg);
        for p in &once {
            let orig = input.iter().find(|q| q.start == p.start && q.class_id == p.class_id);
            assert!(p.confidence <= orig.unwrap().confidence + 1e-15);
        }
        let twice = soft_nms(once.clone(), &cfg);
        assert_eq!(once, twice);
    }

    #[test]
    fn localize_emits_nothing_when_no_class_clears_threshold() {
        use crate::data::FeatureSequence;
        // Zero weights: attention 0.5 everywhere, uniform scores 1/(C+1) per
        // class; with a class threshold above that nothing is selected.
        let params = ModelParams::zeros(3, 4, 2);
        let video = VideoRecord {
            id: "v".into(),
            features: FeatureSequence::new(Array2::from_elem((6, 3), 0.2), 1.0).unwrap(),
            label: vec![1, 0],
            instances: vec![],
            duration: 6.0,
        };
        let cfg = InferenceConfig { class_threshold: 0.5, ..InferenceConfig::default() };
        assert!(localize(&params, &video, &cfg).unwrap().is_empty());

        // Thresholds above 0.5 filter out the flat attention as well.
        let cfg2 = InferenceConfig {
            class_threshold: 0.0,
            attention_thresholds: vec![0.6, 0.7],
            ..InferenceConfig::default()
        };
        assert!(localize(&params, &video, &cfg2).unwrap().is_empty());
    }
}

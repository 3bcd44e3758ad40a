//! Metrics and diagnostics: temporal IoU, all-point interpolated AP and mAP
//! over configurable tIoU thresholds, snippet/video classification accuracy
//! analyses, and the error-category breakdown with localization error defined
//! as an overlap that misses the tIoU threshold.

use crate::data::{snippet_labels, Dataset};
use crate::localizer::video_class_scores;
use crate::model::{forward, ModelError, ModelParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate interval [{start}, {end}]")]
    DegenerateInterval { start: f64, end: f64 },
    #[error("no ground-truth instances to evaluate")]
    EmptyGroundTruth,
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One scored detection, keyed to its video. This is also the row type of the
/// prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
    pub confidence: f64,
}

/// One annotated segment, keyed to its video.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRecord {
    pub video_id: String,
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
}

pub(crate) fn iou_unchecked(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = (a.1.max(b.1) - a.0.min(b.0)).max(f64::MIN_POSITIVE);
    inter / union
}

/// Temporal intersection over union of two `[start, end)` intervals;
/// 0 for disjoint intervals, 1 iff they coincide.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64, EvalError> {
    for &(start, end) in [&a, &b] {
        if !(end > start) || !start.is_finite() || !end.is_finite() {
            return Err(EvalError::DegenerateInterval { start, end });
        }
    }
    Ok(iou_unchecked(a, b))
}

/// Deterministic processing order: confidence descending, ties broken by
/// video id, start, end.
fn ranked(preds: &[PredictionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then_with(|| preds[a].video_id.cmp(&preds[b].video_id))
            .then_with(|| preds[a].start.total_cmp(&preds[b].start))
            .then_with(|| preds[a].end.total_cmp(&preds[b].end))
    });
    order
}

/// All-point interpolated average precision for one class.
///
/// Predictions are matched greedily in descending confidence: a prediction is
/// a true positive when its best-IoU unmatched ground truth in the same video
/// reaches the threshold. AP integrates the precision envelope over recall.
/// Returns 0 when either side is empty.
pub fn average_precision(
    preds: &[PredictionRecord],
    gts: &[GroundTruthRecord],
    iou_threshold: f64,
) -> f64 {
    if gts.is_empty() || preds.is_empty() {
        return 0.0;
    }
    let mut matched = vec![false; gts.len()];
    let mut true_positive = Vec::with_capacity(preds.len());
    for pi in ranked(preds) {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] || gt.video_id != p.video_id {
                continue;
            }
            let iou = iou_unchecked((p.start, p.end), (gt.start, gt.end));
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= iou_threshold => {
                matched[gi] = true;
                true_positive.push(true);
            }
            _ => true_positive.push(false),
        }
    }
    interpolated_ap(&true_positive, gts.len())
}

fn interpolated_ap(true_positive: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(true_positive.len());
    let mut recall = Vec::with_capacity(true_positive.len());
    let mut cum_tp = 0usize;
    for (rank, &tp) in true_positive.iter().enumerate() {
        if tp {
            cum_tp += 1;
        }
        precision.push(cum_tp as f64 / (rank + 1) as f64);
        recall.push(cum_tp as f64 / num_gt as f64);
    }
    let mut envelope = precision;
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..recall.len() {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * envelope[i];
            prev_recall = recall[i];
        }
    }
    ap
}

/// Per-class AP at every threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: Vec<f64>,
}

/// mAP table over tIoU thresholds. Classes without ground truth are excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub per_class: Vec<ClassAp>,
    pub map_per_threshold: Vec<f64>,
    pub average_map: f64,
    pub num_predictions: usize,
    pub num_ground_truths: usize,
}

/// Named tIoU threshold presets: `"thumos"` is 0.1:0.1:0.7, `"activitynet"`
/// is 0.5:0.05:0.95.
pub fn threshold_preset(name: &str) -> Option<Vec<f64>> {
    match name {
        "thumos" => Some((1..=7).map(|i| i as f64 / 10.0).collect()),
        "activitynet" => Some((10..=19).map(|i| i as f64 * 0.05).collect()),
        _ => None,
    }
}

/// Evaluates mAP at each threshold. mAP averages the per-class AP over the
/// classes present in the ground truth; the summary additionally averages
/// over thresholds.
pub fn evaluate_map(
    preds: &[PredictionRecord],
    gts: &[GroundTruthRecord],
    thresholds: &[f64],
) -> Result<EvalReport, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    if thresholds.is_empty() {
        return Err(EvalError::InvalidThresholds("empty threshold list".into()));
    }
    for pair in thresholds.windows(2) {
        if pair[1] <= pair[0] {
            return Err(EvalError::InvalidThresholds("must be strictly increasing".into()));
        }
    }

    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let mut per_class = Vec::with_capacity(classes.len());
    for &class_id in &classes {
        let class_preds: Vec<PredictionRecord> =
            preds.iter().filter(|p| p.class_id == class_id).cloned().collect();
        let class_gts: Vec<GroundTruthRecord> =
            gts.iter().filter(|g| g.class_id == class_id).cloned().collect();
        let ap = thresholds
            .iter()
            .map(|&t| average_precision(&class_preds, &class_gts, t))
            .collect();
        per_class.push(ClassAp { class_id, ap });
    }

    let map_per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|ti| per_class.iter().map(|c| c.ap[ti]).sum::<f64>() / per_class.len() as f64)
        .collect();
    let average_map = map_per_threshold.iter().sum::<f64>() / map_per_threshold.len() as f64;

    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        per_class,
        map_per_threshold,
        average_map,
        num_predictions: preds.len(),
        num_ground_truths: gts.len(),
    })
}

/// Prediction categories after greedy matching. Counts always partition the
/// prediction set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub true_positive: usize,
    /// Reaches the threshold against a correct-label ground truth that is
    /// already matched to a higher-confidence prediction.
    pub double_detection: usize,
    /// Overlaps a correct-label ground truth but misses the tIoU threshold.
    pub localization_error: usize,
    /// Overlaps only ground truths of other labels.
    pub confusion_error: usize,
    /// Overlaps no ground truth at all.
    pub background_error: usize,
}

impl ErrorBreakdown {
    pub fn total(&self) -> usize {
        self.true_positive
            + self.double_detection
            + self.localization_error
            + self.confusion_error
            + self.background_error
    }
}

/// Greedy matching as in [`average_precision`] (per video and class), then
/// each unmatched prediction falls into the first applicable category:
/// double detection, localization error, confusion error, background error.
pub fn error_breakdown(
    preds: &[PredictionRecord],
    gts: &[GroundTruthRecord],
    iou_threshold: f64,
) -> ErrorBreakdown {
    let mut matched = vec![false; gts.len()];
    let mut is_tp = vec![false; preds.len()];
    for pi in ranked(preds) {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] || gt.video_id != p.video_id || gt.class_id != p.class_id {
                continue;
            }
            let iou = iou_unchecked((p.start, p.end), (gt.start, gt.end));
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            if iou >= iou_threshold {
                matched[gi] = true;
                is_tp[pi] = true;
            }
        }
    }

    let mut counts = ErrorBreakdown::default();
    for (pi, p) in preds.iter().enumerate() {
        if is_tp[pi] {
            counts.true_positive += 1;
            continue;
        }
        let mut double = false;
        let mut localization = false;
        let mut confusion = false;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.video_id != p.video_id {
                continue;
            }
            let iou = iou_unchecked((p.start, p.end), (gt.start, gt.end));
            if iou <= 0.0 {
                continue;
            }
            if gt.class_id == p.class_id {
                if iou >= iou_threshold && matched[gi] {
                    double = true;
                } else if iou < iou_threshold {
                    localization = true;
                }
            } else {
                confusion = true;
            }
        }
        if double {
            counts.double_detection += 1;
        } else if localization {
            counts.localization_error += 1;
        } else if confusion {
            counts.confusion_error += 1;
        } else {
            counts.background_error += 1;
        }
    }
    counts
}

/// One attention decile: `[lo, hi)` (the top bin includes 1.0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBin {
    pub lo: f64,
    pub hi: f64,
    pub total: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

/// Classification accuracy analyses of a model over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Fraction of videos whose top foreground class is in the label set.
    pub video_cls_acc: f64,
    /// Fraction of foreground snippets whose CAS argmax (background included)
    /// equals the annotated class.
    pub snippet_cls_acc: f64,
    /// Snippet accuracy restricted to attention above 0.9; `None` when no
    /// snippet qualifies.
    pub high_attn_snippet_acc: Option<f64>,
    /// Accuracy per attention decile over all snippets, background included.
    pub attention_bins: Vec<AttentionBin>,
    /// Filled by the diagnosis command; `None` straight out of
    /// [`snippet_diagnostics`].
    pub error_counts: Option<ErrorBreakdown>,
}

/// Video-level and snippet-level classification accuracy plus the per-decile
/// attention accuracy curve. The headline snippet accuracies cover
/// foreground-annotated snippets only; the bin curve covers every snippet
/// (background ground truth included), which is what makes low-attention bins
/// meaningful. The prediction is always the argmax over all classes including
/// background.
pub fn snippet_diagnostics(
    params: &ModelParams,
    ds: &Dataset,
) -> Result<DiagnosticsReport, EvalError> {
    let background = ds.num_classes;
    let mut videos_scored = 0usize;
    let mut videos_correct = 0usize;
    let mut bins: Vec<(usize, usize)> = vec![(0, 0); 10];
    let mut fg_total = 0usize;
    let mut fg_correct = 0usize;
    let mut high_total = 0usize;
    let mut high_correct = 0usize;

    for video in &ds.videos {
        let out = forward(params, &video.features)?;
        if video.label.iter().any(|&v| v == 1) {
            videos_scored += 1;
            let scores = video_class_scores(&out, 8);
            let top = (0..ds.num_classes)
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then_with(|| b.cmp(&a)))
                .expect("at least one class");
            if video.label[top] == 1 {
                videos_correct += 1;
            }
        }

        let labels = snippet_labels(video);
        for (n, &gt_class) in labels.iter().enumerate() {
            let row = out.cas.row(n);
            let predicted = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then_with(|| b.cmp(&a)))
                .expect("non-empty row");
            let correct = predicted == gt_class;
            let phi = out.attention[n];

            let bin = ((phi * 10.0).floor() as usize).min(9);
            bins[bin].0 += 1;
            bins[bin].1 += usize::from(correct);

            if gt_class == background {
                continue;
            }
            fg_total += 1;
            fg_correct += usize::from(correct);
            if phi > 0.9 {
                high_total += 1;
                high_correct += usize::from(correct);
            }
        }
    }

    let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    Ok(DiagnosticsReport {
        video_cls_acc: ratio(videos_correct, videos_scored).unwrap_or(0.0),
        snippet_cls_acc: ratio(fg_correct, fg_total).unwrap_or(0.0),
        high_attn_snippet_acc: ratio(high_correct, high_total),
        attention_bins: bins
            .into_iter()
            .enumerate()
            .map(|(i, (total, correct))| AttentionBin {
                lo: i as f64 / 10.0,
                hi: (i + 1) as f64 / 10.0,
                total,
                correct,
                accuracy: ratio(correct, total),
            })
            .collect(),
        error_counts: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pred(video: &str, class: usize, start: f64, end: f64, conf: f64) -> PredictionRecord {
        PredictionRecord {
            video_id: video.into(),
            class_id: class,
            start,
            end,
            confidence: conf,
        }
    }

    fn gt(video: &str, class: usize, start: f64, end: f64) -> GroundTruthRecord {
        GroundTruthRecord { video_id: video.into(), class_id: class, start, end }
    }

    #[test]
    fn iou_basic_values() {
        assert_relative_eq!(
            temporal_iou((0.0, 10.0), (5.0, 15.0)).unwrap(),
            5.0 / 15.0,
            epsilon = 1e-12
        );
        assert_eq!(temporal_iou((2.0, 4.0), (2.0, 4.0)).unwrap(), 1.0);
        assert_eq!(temporal_iou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert!(temporal_iou((3.0, 3.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let pairs = [((0.0, 5.0), (3.0, 9.0)), ((1.0, 2.0), (1.5, 4.0)), ((0.0, 1.0), (0.5, 0.75))];
        for (a, b) in pairs {
            let ab = temporal_iou(a, b).unwrap();
            let ba = temporal_iou(b, a).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn single_match_gives_ap_one() {
        let preds = [pred("v", 0, 0.0, 10.0, 0.9)];
        let gts = [gt("v", 0, 0.0, 10.0)];
        assert_eq!(average_precision(&preds, &gts, 0.5), 1.0);
    }

    #[test]
    fn duplicate_prediction_is_fp_but_ap_stays_one() {
        // The first (higher-confidence) duplicate matches; recall saturates
        // there, so the trailing false positive does not reduce AP.
        let preds = [pred("v", 0, 0.0, 10.0, 0.9), pred("v", 0, 0.0, 10.0, 0.8)];
        let gts = [gt("v", 0, 0.0, 10.0)];
        assert_eq!(average_precision(&preds, &gts, 0.5), 1.0);
    }

    #[test]
    fn ap_zero_when_either_side_empty() {
        let preds = [pred("v", 0, 0.0, 1.0, 0.5)];
        let gts = [gt("v", 0, 0.0, 1.0)];
        assert_eq!(average_precision(&preds, &[], 0.5), 0.0);
        assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
    }

    #[test]
    fn matching_is_per_video() {
        // Same interval, wrong video: no match.
        let preds = [pred("a", 0, 0.0, 10.0, 0.9)];
        let gts = [gt("b", 0, 0.0, 10.0)];
        assert_eq!(average_precision(&preds, &gts, 0.5), 0.0);
    }

    #[test]
    fn ap_is_invariant_to_order_preserving_confidence_rescaling() {
        let preds = [
            pred("v", 0, 0.0, 10.0, 0.9),
            pred("v", 0, 20.0, 30.0, 0.8),
            pred("v", 0, 50.0, 60.0, 0.7),
        ];
        let rescaled: Vec<PredictionRecord> = preds
            .iter()
            .map(|p| PredictionRecord { confidence: p.confidence * 0.1 + 3.0, ..p.clone() })
            .collect();
        let gts = [gt("v", 0, 0.0, 10.0), gt("v", 0, 21.0, 30.0)];
        for t in [0.3, 0.5, 0.7] {
            assert_relative_eq!(
                average_precision(&preds, &gts, t),
                average_precision(&rescaled, &gts, t),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn ap_monotone_nonincreasing_in_threshold() {
        let preds = [
            pred("v", 0, 0.0, 10.0, 0.9),
            pred("v", 0, 18.0, 31.0, 0.8),
            pred("v", 0, 40.0, 45.0, 0.7),
        ];
        let gts = [gt("v", 0, 0.0, 10.0), gt("v", 0, 20.0, 30.0), gt("v", 0, 41.0, 46.0)];
        let mut prev = f64::INFINITY;
        for i in 1..=9 {
            let ap = average_precision(&preds, &gts, i as f64 / 10.0);
            assert!(ap <= prev + 1e-12);
            prev = ap;
        }
    }

    #[test]
    fn hand_computed_two_class_map_table() {
        // Class 0: ground truths [0,10) and [20,30).
        //   P1 [0,10) conf .9  -> IoU 1.0: TP at any threshold.
        //   P2 [20,25) conf .8 -> IoU 0.5 with [20,30): TP at 0.5, FP at 0.7.
        //   P3 [0,10) conf .7  -> duplicate: FP.
        // Class 1: ground truth [40,50); P4 [42,50) conf .6 -> IoU 0.8: TP at both.
        // AP(class 0, 0.5) = 1.0; AP(class 0, 0.7) = 0.5.
        // AP(class 1, 0.5) = AP(class 1, 0.7) = 1.0.
        // mAP(0.5) = 1.0, mAP(0.7) = 0.75, average 0.875.
        let preds = [
            pred("v", 0, 0.0, 10.0, 0.9),
            pred("v", 0, 20.0, 25.0, 0.8),
            pred("v", 0, 0.0, 10.0, 0.7),
            pred("v", 1, 42.0, 50.0, 0.6),
        ];
        let gts = [gt("v", 0, 0.0, 10.0), gt("v", 0, 20.0, 30.0), gt("v", 1, 40.0, 50.0)];
        let report = evaluate_map(&preds, &gts, &[0.5, 0.7]).unwrap();
        assert_eq!(report.per_class[0].ap, vec![1.0, 0.5]);
        assert_eq!(report.per_class[1].ap, vec![1.0, 1.0]);
        assert_eq!(report.map_per_threshold, vec![1.0, 0.75]);
        assert_relative_eq!(report.average_map, 0.875, epsilon = 1e-12);
    }

    #[test]
    fn perfect_predictions_reach_map_one_and_empty_reach_zero() {
        let gts = [gt("a", 0, 0.0, 5.0), gt("a", 1, 10.0, 12.0), gt("b", 0, 1.0, 4.0)];
        let perfect: Vec<PredictionRecord> = gts
            .iter()
            .map(|g| pred(&g.video_id, g.class_id, g.start, g.end, 1.0))
            .collect();
        let thresholds = threshold_preset("activitynet").unwrap();
        let report = evaluate_map(&perfect, &gts, &thresholds).unwrap();
        assert_eq!(report.average_map, 1.0);
        assert!(report.map_per_threshold.iter().all(|&m| m == 1.0));

        let empty = evaluate_map(&[], &gts, &thresholds).unwrap();
        assert_eq!(empty.average_map, 0.0);
    }

    #[test]
    fn evaluate_map_requires_ground_truth() {
        assert!(matches!(
            evaluate_map(&[pred("v", 0, 0.0, 1.0, 0.4)], &[], &[0.5]),
            Err(EvalError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn threshold_presets() {
        assert_eq!(threshold_preset("thumos").unwrap().len(), 7);
        assert_eq!(threshold_preset("activitynet").unwrap().len(), 10);
        assert!(threshold_preset("other").is_none());
    }

    #[test]
    fn breakdown_exact_match_is_true_positive() {
        let preds = [pred("v", 0, 0.0, 10.0, 0.9)];
        let gts = [gt("v", 0, 0.0, 10.0)];
        let counts = error_breakdown(&preds, &gts, 0.5);
        assert_eq!(counts.true_positive, 1);
        assert_eq!(counts.total(), 1);
    }

    #[test]
    fn breakdown_duplicate_is_double_detection() {
        let preds = [pred("v", 0, 0.0, 10.0, 0.9), pred("v", 0, 0.0, 10.0, 0.8)];
        let gts = [gt("v", 0, 0.0, 10.0)];
        let counts = error_breakdown(&preds, &gts, 0.5);
        assert_eq!((counts.true_positive, counts.double_detection), (1, 1));
    }

    #[test]
    fn breakdown_partial_overlap_is_localization_error() {
        let preds = [pred("v", 0, 8.0, 12.0, 0.9)];
        let gts = [gt("v", 0, 0.0, 10.0)];
        let counts = error_breakdown(&preds, &gts, 0.5);
        assert_eq!(counts.localization_error, 1);
    }

    #[test]
    fn breakdown_wrong_class_is_confusion() {
        let preds = [pred("v", 1, 0.0, 10.0, 0.9)];
        let gts = [gt("v", 0, 0.0, 10.0)];
        let counts = error_breakdown(&preds, &gts, 0.5);
        assert_eq!(counts.confusion_error, 1);
    }

    #[test]
    fn breakdown_disjoint_is_background_error() {
        let preds = [pred("v", 0, 50.0, 60.0, 0.9)];
        let gts = [gt("v", 0, 0.0, 10.0)];
        let counts = error_breakdown(&preds, &gts, 0.5);
        assert_eq!(counts.background_error, 1);
    }

    #[test]
    fn breakdown_partitions_predictions() {
        let preds = [
            pred("v", 0, 0.0, 10.0, 0.9),
            pred("v", 0, 0.5, 10.0, 0.85),
            pred("v", 0, 9.0, 14.0, 0.7),
            pred("v", 1, 2.0, 8.0, 0.6),
            pred("v", 0, 90.0, 95.0, 0.5),
            pred("w", 0, 0.0, 4.0, 0.4),
        ];
        let gts = [gt("v", 0, 0.0, 10.0), gt("w", 1, 1.0, 3.0)];
        let counts = error_breakdown(&preds, &gts, 0.5);
        assert_eq!(counts.total(), preds.len());
    }
}

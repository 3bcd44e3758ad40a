//! Seeded synthetic benchmark generator.
//!
//! Each class has a fixed unit-norm prototype drawn from the seed alone, so
//! two distributions generated with the same seed share their class
//! vocabulary. A distribution adds its own constant offset vector (the visual
//! gap) and its own duration scale (the temporal gap). Features inside an
//! instance are the class prototype, background snippets use a background
//! prototype, and a linear blend around every boundary produces the ambiguous
//! snippets that make localization hard.

use super::{DataError, Dataset, FeatureSequence, GroundTruthInstance, Split, SynthConfig, VideoRecord};
use crate::rng::stage_rng;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

const PLACEMENT_TRIES: usize = 200;

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Class prototypes (one per foreground class) plus the background prototype.
/// Depends only on the seed, the class count, and the feature dimension.
fn prototypes(cfg: &SynthConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = stage_rng(cfg.seed, "prototypes");
    let classes = (0..cfg.num_classes).map(|_| unit_vector(cfg.feature_dim, &mut rng)).collect();
    let background = unit_vector(cfg.feature_dim, &mut rng);
    (classes, background)
}

/// The constant per-distribution offset, `norm == domain_offset_scale`.
fn distribution_offset(cfg: &SynthConfig, distribution_id: &str) -> Vec<f64> {
    let mut rng = stage_rng(cfg.seed, &format!("offset:{distribution_id}"));
    let direction = unit_vector(cfg.feature_dim, &mut rng);
    direction.into_iter().map(|x| x * cfg.domain_offset_scale).collect()
}

struct PlacedInstance {
    class_id: usize,
    start: f64,
    end: f64,
    /// First and last snippet index whose center the instance covers.
    span: (usize, usize),
}

fn covered_span(start: f64, end: f64, stride: f64, n: usize) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = None;
    for i in 0..n {
        let center = (i as f64 + 0.5) * stride;
        if start <= center && center < end {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    Some((first?, last?))
}

fn place_instances(
    cfg: &SynthConfig,
    num_snippets: usize,
    duration: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PlacedInstance>, DataError> {
    let [ilo, ihi] = cfg.instances_per_video_range;
    let count = rng.random_range(ilo..=ihi);
    let log_normal = LogNormal::new(cfg.duration_median.ln(), cfg.duration_log_sigma)
        .expect("validated config");
    let mut placed: Vec<PlacedInstance> = Vec::with_capacity(count);
    for _ in 0..count {
        // Rejection sampling; an instance whose tries run out is dropped.
        for _ in 0..PLACEMENT_TRIES {
            let len = log_normal.sample(rng);
            if !(len > 0.0) || len >= duration {
                continue;
            }
            let start = rng.random_range(0.0..duration - len);
            let end = start + len;
            let overlaps = placed.iter().any(|p| start < p.end && p.start < end);
            if overlaps {
                continue;
            }
            // An instance that covers no snippet center would be invisible to
            // both labels and features; retry instead.
            let Some(span) = covered_span(start, end, cfg.snippet_stride, num_snippets) else {
                continue;
            };
            placed.push(PlacedInstance {
                class_id: rng.random_range(0..cfg.num_classes),
                start,
                end,
                span,
            });
            break;
        }
    }
    if placed.is_empty() {
        return Err(DataError::InvalidConfig {
            field: "duration_median",
            reason: format!(
                "failed to place any instance in a {duration:.1} s video after {PLACEMENT_TRIES} tries"
            ),
        });
    }
    placed.sort_by(|a, b| a.start.total_cmp(&b.start));
    Ok(placed)
}

/// Foreground weight of snippet `n` under one instance: 1 deep inside, 0 far
/// outside, and a linear ramp across `blend` snippets on each side of both
/// boundaries.
fn foreground_weight(n: usize, span: (usize, usize), blend: usize) -> f64 {
    let (first, last) = (span.0 as f64, span.1 as f64);
    let n = n as f64;
    if blend == 0 {
        return if n >= first && n <= last { 1.0 } else { 0.0 };
    }
    let w = blend as f64;
    let left = (n - (first - w)) / (2.0 * w);
    let right = ((last + w) - n) / (2.0 * w);
    left.min(right).clamp(0.0, 1.0)
}

/// Generates one split of one synthetic distribution.
///
/// Deterministic: the same `(cfg, distribution_id, split)` triple always
/// produces the same dataset. Prototypes depend only on `cfg.seed`, so source
/// and target configs sharing a seed share class prototypes; the offset
/// stream is keyed by `distribution_id`.
pub fn generate_synthetic_dataset(
    cfg: &SynthConfig,
    distribution_id: &str,
    split: Split,
) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let (class_protos, bg_proto) = prototypes(cfg);
    let offset = distribution_offset(cfg, distribution_id);
    let mut rng = stage_rng(cfg.seed, &format!("videos:{distribution_id}:{split}"));
    let noise = Normal::new(0.0, 1.0).expect("valid normal");

    let mut videos = Vec::with_capacity(cfg.videos_per_split);
    for v in 0..cfg.videos_per_split {
        let [len_lo, len_hi] = cfg.video_length_range;
        let target_len = rng.random_range(len_lo..=len_hi);
        let num_snippets = ((target_len / cfg.snippet_stride).round() as usize).max(1);
        let duration = num_snippets as f64 * cfg.snippet_stride;

        let placed = place_instances(cfg, num_snippets, duration, &mut rng)?;

        let mut label = vec![0u8; cfg.num_classes];
        for p in &placed {
            label[p.class_id] = 1;
        }

        let mut data = Array2::<f32>::zeros((num_snippets, cfg.feature_dim));
        for n in 0..num_snippets {
            // Strongest instance at this snippet; ties keep the earliest start
            // because instances are start-sorted and we require strict
            // improvement.
            let mut weight = 0.0;
            let mut class = None;
            for p in &placed {
                let w = foreground_weight(n, p.span, cfg.boundary_blend_width);
                if w > weight {
                    weight = w;
                    class = Some(p.class_id);
                }
            }
            for d in 0..cfg.feature_dim {
                let proto = match class {
                    Some(c) => weight * class_protos[c][d] + (1.0 - weight) * bg_proto[d],
                    None => bg_proto[d],
                };
                let mut value = proto + offset[d];
                if cfg.noise_sigma > 0.0 {
                    value += cfg.noise_sigma * noise.sample(&mut rng);
                }
                data[[n, d]] = value as f32;
            }
        }

        videos.push(VideoRecord {
            id: format!("{distribution_id}_{split}_{v:04}"),
            features: FeatureSequence::new(data, cfg.snippet_stride)?,
            label,
            instances: placed
                .into_iter()
                .map(|p| GroundTruthInstance { class_id: p.class_id, start: p.start, end: p.end })
                .collect(),
            duration,
        });
    }

    Ok(Dataset {
        distribution_id: distribution_id.to_string(),
        split,
        videos,
        num_classes: cfg.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::snippet_labels;

    fn base_cfg() -> SynthConfig {
        SynthConfig {
            num_classes: 4,
            feature_dim: 8,
            videos_per_split: 6,
            duration_median: 3.0,
            duration_log_sigma: 0.35,
            video_length_range: [30.0, 50.0],
            instances_per_video_range: [1, 3],
            domain_offset_scale: 0.5,
            noise_sigma: 0.2,
            boundary_blend_width: 2,
            snippet_stride: 1.0,
            seed: 11,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = base_cfg();
        let a = generate_synthetic_dataset(&cfg, "src", Split::Train).unwrap();
        let b = generate_synthetic_dataset(&cfg, "src", Split::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_and_distributions_differ() {
        let cfg = base_cfg();
        let train = generate_synthetic_dataset(&cfg, "src", Split::Train).unwrap();
        let test = generate_synthetic_dataset(&cfg, "src", Split::Test).unwrap();
        let other = generate_synthetic_dataset(&cfg, "tgt", Split::Train).unwrap();
        assert_ne!(train.videos[0].features, test.videos[0].features);
        assert_ne!(train.videos[0].features, other.videos[0].features);
    }

    #[test]
    fn label_matches_instances() {
        let ds = generate_synthetic_dataset(&base_cfg(), "src", Split::Train).unwrap();
        for video in &ds.videos {
            for (c, &flag) in video.label.iter().enumerate() {
                let present = video.instances.iter().any(|i| i.class_id == c);
                assert_eq!(flag == 1, present, "video {}", video.id);
            }
            assert!(video.instances.iter().all(|i| i.start >= 0.0 && i.end <= video.duration));
            assert!(!video.instances.is_empty());
        }
    }

    #[test]
    fn zero_noise_zero_blend_foreground_equals_prototype_plus_offset() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            boundary_blend_width: 0,
            instances_per_video_range: [1, 1],
            num_classes: 1,
            ..base_cfg()
        };
        let ds = generate_synthetic_dataset(&cfg, "src", Split::Train).unwrap();
        let (protos, _) = prototypes(&cfg);
        let offset = distribution_offset(&cfg, "src");
        for video in &ds.videos {
            let labels = snippet_labels(video);
            for (n, &lab) in labels.iter().enumerate() {
                if lab == 0 {
                    for d in 0..cfg.feature_dim {
                        let expected = (protos[0][d] + offset[d]) as f32;
                        assert_eq!(video.features.data()[[n, d]], expected);
                    }
                }
            }
        }
    }

    #[test]
    fn duration_median_within_15_percent() {
        let cfg = SynthConfig {
            videos_per_split: 200,
            instances_per_video_range: [3, 4],
            ..base_cfg()
        };
        let ds = generate_synthetic_dataset(&cfg, "src", Split::Train).unwrap();
        let mut durations: Vec<f64> =
            ds.videos.iter().flat_map(|v| v.instances.iter().map(|i| i.duration())).collect();
        assert!(durations.len() >= 500, "need >= 500 instances, got {}", durations.len());
        durations.sort_by(f64::total_cmp);
        let median = durations[durations.len() / 2];
        let rel = (median - cfg.duration_median).abs() / cfg.duration_median;
        assert!(rel < 0.15, "median {median} vs configured {}", cfg.duration_median);
    }

    #[test]
    fn scale_gap_between_regimes() {
        let short = SynthConfig { videos_per_split: 60, ..base_cfg() };
        let long = SynthConfig {
            duration_median: 28.5,
            video_length_range: [90.0, 150.0],
            videos_per_split: 60,
            ..base_cfg()
        };
        let median_of = |cfg: &SynthConfig| {
            let ds = generate_synthetic_dataset(cfg, "x", Split::Train).unwrap();
            let mut d: Vec<f64> =
                ds.videos.iter().flat_map(|v| v.instances.iter().map(|i| i.duration())).collect();
            d.sort_by(f64::total_cmp);
            d[d.len() / 2]
        };
        let ratio = median_of(&long) / median_of(&short);
        // 28.5 / 3.0 = 9.5; generation noise stays well inside this band.
        assert!(ratio > 7.0 && ratio < 12.5, "scale ratio {ratio}");
    }

    #[test]
    fn foreground_fraction_tracks_instance_durations() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..base_cfg() };
        let ds = generate_synthetic_dataset(&cfg, "src", Split::Train).unwrap();
        for video in &ds.videos {
            let labels = snippet_labels(video);
            let stride = video.features.snippet_stride();
            let fg_seconds =
                labels.iter().filter(|&&l| l != ds.num_classes).count() as f64 * stride;
            let annotated: f64 = video.instances.iter().map(|i| i.duration()).sum();
            let tolerance = 2.0 * stride * video.instances.len() as f64;
            assert!(
                (fg_seconds - annotated).abs() <= tolerance,
                "video {}: fg {fg_seconds} vs annotated {annotated}",
                video.id
            );
        }
    }

    #[test]
    fn impossible_placement_is_a_config_error() {
        let cfg = SynthConfig { duration_median: 60.0, ..base_cfg() };
        let err = generate_synthetic_dataset(&cfg, "src", Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duration_median"), "error should name the field: {msg}");
    }

    #[test]
    fn prototypes_shared_across_distributions() {
        let short = base_cfg();
        let long = SynthConfig {
            duration_median: 28.5,
            video_length_range: [90.0, 150.0],
            domain_offset_scale: 1.0,
            ..base_cfg()
        };
        let (a, abg) = prototypes(&short);
        let (b, bbg) = prototypes(&long);
        assert_eq!(a, b);
        assert_eq!(abg, bbg);
    }
}

//! Dataset model: feature sequences, ground-truth annotations, the on-disk
//! format, and the synthetic two-distribution generator.
//!
//! Class indexing convention used everywhere in this crate: foreground classes
//! are `0..num_classes`, the background slot is index `num_classes`.

mod io;
mod synth;

pub use io::{load_dataset, save_dataset};
pub use synth::generate_synthetic_dataset;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use thiserror::Error;

/// Errors from dataset generation and I/O.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("{}: bad magic, expected \"GTF1\"", file.display())]
    BadMagic { file: PathBuf },
    #[error("{}: payload holds {found} floats but header says {expected}", file.display())]
    DimensionMismatch {
        file: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{}: unsupported format version {found} (supported: {supported})", file.display())]
    UnsupportedVersion {
        file: PathBuf,
        found: u32,
        supported: u32,
    },
    #[error("{}: field `{field}`: {reason}", file.display())]
    Malformed {
        file: PathBuf,
        field: String,
        reason: String,
    },
    #[error("{}: {source}", file.display())]
    Io {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: invalid manifest: {source}", file.display())]
    Json {
        file: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// A single annotated action segment. Used only for evaluation and
/// diagnostics, never for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub class_id: usize,
    /// Segment start in seconds.
    pub start: f64,
    /// Segment end in seconds (exclusive, `end > start`).
    pub end: f64,
}

impl GroundTruthInstance {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// True when the snippet center time falls inside `[start, end)`.
    pub fn covers(&self, time: f64) -> bool {
        self.start <= time && time < self.end
    }
}

/// An `N x D` matrix of snippet features plus the temporal stride that maps
/// snippet indices to seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Array2<f32>,
    snippet_stride: f64,
}

impl FeatureSequence {
    pub fn new(data: Array2<f32>, snippet_stride: f64) -> Result<Self, DataError> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(DataError::InvalidConfig {
                field: "features",
                reason: format!("need N >= 1 and D >= 1, got {}x{}", data.nrows(), data.ncols()),
            });
        }
        if !(snippet_stride > 0.0 && snippet_stride.is_finite()) {
            return Err(DataError::InvalidConfig {
                field: "snippet_stride",
                reason: format!("must be a positive finite number, got {snippet_stride}"),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidConfig {
                field: "features",
                reason: "non-finite feature value".into(),
            });
        }
        Ok(Self { data, snippet_stride })
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    /// Number of snippets N.
    pub fn num_snippets(&self) -> usize {
        self.data.nrows()
    }

    /// Feature dimension D.
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Seconds covered by one snippet.
    pub fn snippet_stride(&self) -> f64 {
        self.snippet_stride
    }

    /// Center time of snippet `n` in seconds.
    pub fn snippet_center(&self, n: usize) -> f64 {
        (n as f64 + 0.5) * self.snippet_stride
    }
}

/// One untrimmed video: features, the video-level multi-hot label, and the
/// segment annotations (held for evaluation only).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub features: FeatureSequence,
    /// Multi-hot over the foreground classes; `label[c] == 1` iff some
    /// instance of class `c` is annotated.
    pub label: Vec<u8>,
    pub instances: Vec<GroundTruthInstance>,
    /// Video length in seconds.
    pub duration: f64,
}

impl VideoRecord {
    pub fn num_classes(&self) -> usize {
        self.label.len()
    }
}

/// Train/test split marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// A set of videos drawn from one distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub distribution_id: String,
    pub split: Split,
    pub videos: Vec<VideoRecord>,
    pub num_classes: usize,
}

impl Dataset {
    /// Shared feature dimension of all videos.
    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.dim())
    }

    /// Flattens all annotations into `(video_id, instance)` evaluation records.
    pub fn ground_truth_records(&self) -> Vec<crate::evaluator::GroundTruthRecord> {
        self.videos
            .iter()
            .flat_map(|v| {
                v.instances.iter().map(|inst| crate::evaluator::GroundTruthRecord {
                    video_id: v.id.clone(),
                    class_id: inst.class_id,
                    start: inst.start,
                    end: inst.end,
                })
            })
            .collect()
    }
}

fn default_num_classes() -> usize {
    8
}
fn default_feature_dim() -> usize {
    64
}
fn default_log_sigma() -> f64 {
    0.35
}
fn default_blend_width() -> usize {
    2
}
fn default_stride() -> f64 {
    1.0
}

/// Knobs of the synthetic generator. Two configs that share a seed but differ
/// in `duration_median` (and offset scale) emulate a cross-distribution pair
/// with a temporal scale gap: class prototypes are drawn from the seed alone,
/// so they are shared across distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    pub videos_per_split: usize,
    /// Median action duration in seconds (log-normal median).
    pub duration_median: f64,
    #[serde(default = "default_log_sigma")]
    pub duration_log_sigma: f64,
    /// `[min, max]` video length in seconds.
    pub video_length_range: [f64; 2],
    /// `[min, max]` instances per video, inclusive.
    pub instances_per_video_range: [usize; 2],
    /// Norm of the distribution-level feature offset (the "visual gap").
    pub domain_offset_scale: f64,
    /// Per-snippet i.i.d. Gaussian feature noise.
    pub noise_sigma: f64,
    /// Half-width (in snippets) of the linear prototype/background blend
    /// around every instance boundary; 0 disables blending.
    #[serde(default = "default_blend_width")]
    pub boundary_blend_width: usize,
    #[serde(default = "default_stride")]
    pub snippet_stride: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    pub(crate) fn validate(&self) -> Result<(), DataError> {
        fn err(field: &'static str, reason: impl Into<String>) -> DataError {
            DataError::InvalidConfig { field, reason: reason.into() }
        }
        if self.num_classes == 0 {
            return Err(err("num_classes", "must be >= 1"));
        }
        if self.feature_dim == 0 {
            return Err(err("feature_dim", "must be >= 1"));
        }
        if self.videos_per_split == 0 {
            return Err(err("videos_per_split", "must be >= 1"));
        }
        if !(self.duration_median > 0.0 && self.duration_median.is_finite()) {
            return Err(err("duration_median", "must be positive and finite"));
        }
        if !(self.duration_log_sigma >= 0.0 && self.duration_log_sigma.is_finite()) {
            return Err(err("duration_log_sigma", "must be >= 0"));
        }
        let [lo, hi] = self.video_length_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(err("video_length_range", format!("invalid range [{lo}, {hi}]")));
        }
        let [ilo, ihi] = self.instances_per_video_range;
        if ilo == 0 || ilo > ihi {
            return Err(err(
                "instances_per_video_range",
                format!("need 1 <= min <= max, got [{ilo}, {ihi}]"),
            ));
        }
        if self.duration_median >= lo {
            return Err(err(
                "duration_median",
                format!(
                    "median duration {} does not fit the shortest video ({} s); \
                     instance placement impossible",
                    self.duration_median, lo
                ),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(err("noise_sigma", "must be >= 0"));
        }
        if !(self.domain_offset_scale >= 0.0 && self.domain_offset_scale.is_finite()) {
            return Err(err("domain_offset_scale", "must be >= 0"));
        }
        if !(self.snippet_stride > 0.0 && self.snippet_stride.is_finite()) {
            return Err(err("snippet_stride", "must be positive"));
        }
        Ok(())
    }
}

/// Ground-truth class index of every snippet: the class of the instance
/// covering the snippet center, or the background index `C_I` if uncovered.
/// When several instances cover the center, the earliest start wins.
pub fn snippet_labels(video: &VideoRecord) -> Vec<usize> {
    let background = video.num_classes();
    (0..video.features.num_snippets())
        .map(|n| {
            let center = video.features.snippet_center(n);
            video
                .instances
                .iter()
                .filter(|inst| inst.covers(center))
                .min_by(|a, b| a.start.total_cmp(&b.start))
                .map_or(background, |inst| inst.class_id)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn video_with(instances: Vec<GroundTruthInstance>, n: usize, classes: usize) -> VideoRecord {
        let mut label = vec![0u8; classes];
        for inst in &instances {
            label[inst.class_id] = 1;
        }
        VideoRecord {
            id: "v".into(),
            features: FeatureSequence::new(Array2::zeros((n, 4)), 1.0).unwrap(),
            label,
            instances,
            duration: n as f64,
        }
    }

    #[test]
    fn snippet_labels_covers_annotated_span() {
        // Instance [2 s, 4 s) of class 1 with stride 1 s covers the snippets
        // whose centers are 2.5 and 3.5.
        let video = video_with(vec![GroundTruthInstance { class_id: 1, start: 2.0, end: 4.0 }], 6, 3);
        assert_eq!(snippet_labels(&video), vec![3, 3, 1, 1, 3, 3]);
    }

    #[test]
    fn snippet_labels_no_instances_is_all_background() {
        let video = video_with(vec![], 4, 2);
        assert_eq!(snippet_labels(&video), vec![2, 2, 2, 2]);
    }

    #[test]
    fn snippet_labels_whole_video_instance() {
        let video = video_with(vec![GroundTruthInstance { class_id: 0, start: 0.0, end: 5.0 }], 5, 2);
        assert_eq!(snippet_labels(&video), vec![0; 5]);
    }

    #[test]
    fn snippet_labels_earliest_start_wins_on_overlap() {
        let video = video_with(
            vec![
                GroundTruthInstance { class_id: 1, start: 1.0, end: 4.0 },
                GroundTruthInstance { class_id: 0, start: 2.0, end: 4.0 },
            ],
            5,
            2,
        );
        // Center 2.5 and 3.5 are covered by both; the earlier start (class 1) wins.
        assert_eq!(snippet_labels(&video), vec![2, 1, 1, 1, 2]);
    }

    #[test]
    fn feature_sequence_rejects_empty_and_nonfinite() {
        assert!(FeatureSequence::new(Array2::zeros((0, 3)), 1.0).is_err());
        assert!(FeatureSequence::new(Array2::zeros((3, 0)), 1.0).is_err());
        assert!(FeatureSequence::new(Array2::zeros((2, 2)), 0.0).is_err());
        let mut bad = Array2::zeros((2, 2));
        bad[[0, 0]] = f32::NAN;
        assert!(FeatureSequence::new(bad, 1.0).is_err());
    }
}

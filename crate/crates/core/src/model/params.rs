//! Learnable parameters of the two-branch snippet model.

use super::ModelError;
use crate::rng::stage_rng;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Names of the parameter tensors in flat/checkpoint order.
pub const TENSOR_NAMES: [&str; 8] = [
    "embed_w_left",
    "embed_w_center",
    "embed_w_right",
    "embed_b",
    "attn_w",
    "attn_b",
    "cls_w",
    "cls_b",
];

/// All weights of the snippet model: a kernel-3 temporal convolution embedder
/// (one `D x H` matrix per tap), a sigmoid attention head, and a softmax
/// classification head over the foreground classes plus background.
///
/// The struct doubles as the parameter-shaped gradient record.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Taps `[left, center, right]` acting on `f[n-1]`, `f[n]`, `f[n+1]`.
    pub(crate) embed_w: [Array2<f64>; 3],
    pub(crate) embed_b: Array1<f64>,
    pub(crate) attn_w: Array1<f64>,
    pub(crate) attn_b: f64,
    /// `H x (C_I + 1)`; the last column is the background class.
    pub(crate) cls_w: Array2<f64>,
    pub(crate) cls_b: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(feature_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        let heads = num_classes + 1;
        Self {
            embed_w: [
                Array2::zeros((feature_dim, hidden_dim)),
                Array2::zeros((feature_dim, hidden_dim)),
                Array2::zeros((feature_dim, hidden_dim)),
            ],
            embed_b: Array1::zeros(hidden_dim),
            attn_w: Array1::zeros(hidden_dim),
            attn_b: 0.0,
            cls_w: Array2::zeros((hidden_dim, heads)),
            cls_b: Array1::zeros(heads),
        }
    }

    /// Seeded initialization: weights uniform in `+-1/sqrt(fan_in)` (fan-in of
    /// the conv counts all three taps), biases zero.
    pub fn init(feature_dim: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = stage_rng(seed, "init");
        Self::init_from_rng(feature_dim, hidden_dim, num_classes, &mut rng)
    }

    pub fn init_from_rng(
        feature_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut params = Self::zeros(feature_dim, hidden_dim, num_classes);
        let embed_bound = 1.0 / ((3 * feature_dim) as f64).sqrt();
        for tap in &mut params.embed_w {
            for w in tap.iter_mut() {
                *w = rng.random_range(-embed_bound..embed_bound);
            }
        }
        let head_bound = 1.0 / (hidden_dim as f64).sqrt();
        for w in params.attn_w.iter_mut() {
            *w = rng.random_range(-head_bound..head_bound);
        }
        for w in params.cls_w.iter_mut() {
            *w = rng.random_range(-head_bound..head_bound);
        }
        params
    }

    pub fn feature_dim(&self) -> usize {
        self.embed_w[0].nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_w[0].ncols()
    }

    /// Number of foreground classes `C_I`.
    pub fn num_classes(&self) -> usize {
        self.cls_w.ncols() - 1
    }

    /// Index of the background class in the CAS.
    pub fn background_index(&self) -> usize {
        self.num_classes()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.feature_dim() == other.feature_dim()
            && self.hidden_dim() == other.hidden_dim()
            && self.num_classes() == other.num_classes()
    }

    fn segment_lens(&self) -> [usize; 8] {
        let dh = self.feature_dim() * self.hidden_dim();
        let h = self.hidden_dim();
        let heads = self.num_classes() + 1;
        [dh, dh, dh, h, h, 1, h * heads, heads]
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.segment_lens().iter().sum()
    }

    fn locate(&self, index: usize) -> (usize, usize) {
        let mut offset = index;
        for (seg, len) in self.segment_lens().into_iter().enumerate() {
            if offset < len {
                return (seg, offset);
            }
            offset -= len;
        }
        panic!("flat parameter index {index} out of range");
    }

    /// Tensor name containing flat `index`, for error reporting.
    pub fn tensor_name(&self, index: usize) -> &'static str {
        TENSOR_NAMES[self.locate(index).0]
    }

    pub fn flat_get(&self, index: usize) -> f64 {
        let (seg, i) = self.locate(index);
        match seg {
            0..=2 => self.embed_w[seg].as_slice().expect("contiguous")[i],
            3 => self.embed_b[i],
            4 => self.attn_w[i],
            5 => self.attn_b,
            6 => self.cls_w.as_slice().expect("contiguous")[i],
            7 => self.cls_b[i],
            _ => unreachable!(),
        }
    }

    pub fn flat_set(&mut self, index: usize, value: f64) {
        let (seg, i) = self.locate(index);
        match seg {
            0..=2 => self.embed_w[seg].as_slice_mut().expect("contiguous")[i] = value,
            3 => self.embed_b[i] = value,
            4 => self.attn_w[i] = value,
            5 => self.attn_b = value,
            6 => self.cls_w.as_slice_mut().expect("contiguous")[i] = value,
            7 => self.cls_b[i] = value,
            _ => unreachable!(),
        }
    }

    /// Visits every `(own, other)` scalar pair in flat order.
    pub fn for_each_pair_mut(
        &mut self,
        other: &Self,
        mut f: impl FnMut(&mut f64, f64),
    ) -> Result<(), ModelError> {
        if !self.same_shape(other) {
            return Err(ModelError::ShapeMismatch);
        }
        for (tap, other_tap) in self.embed_w.iter_mut().zip(&other.embed_w) {
            for (a, &b) in tap.iter_mut().zip(other_tap.iter()) {
                f(a, b);
            }
        }
        for (a, &b) in self.embed_b.iter_mut().zip(other.embed_b.iter()) {
            f(a, b);
        }
        for (a, &b) in self.attn_w.iter_mut().zip(other.attn_w.iter()) {
            f(a, b);
        }
        f(&mut self.attn_b, other.attn_b);
        for (a, &b) in self.cls_w.iter_mut().zip(other.cls_w.iter()) {
            f(a, b);
        }
        for (a, &b) in self.cls_b.iter_mut().zip(other.cls_b.iter()) {
            f(a, b);
        }
        Ok(())
    }

    /// Adds `other` scaled by `factor`.
    pub fn scaled_add(&mut self, factor: f64, other: &Self) -> Result<(), ModelError> {
        self.for_each_pair_mut(other, |a, b| *a += factor * b)
    }

    /// Name of the first tensor holding a non-finite value, if any.
    pub(crate) fn first_non_finite(&self) -> Option<&'static str> {
        let check = |slice: &[f64]| slice.iter().any(|v| !v.is_finite());
        if check(self.embed_w[0].as_slice().unwrap()) {
            return Some(TENSOR_NAMES[0]);
        }
        if check(self.embed_w[1].as_slice().unwrap()) {
            return Some(TENSOR_NAMES[1]);
        }
        if check(self.embed_w[2].as_slice().unwrap()) {
            return Some(TENSOR_NAMES[2]);
        }
        if check(self.embed_b.as_slice().unwrap()) {
            return Some(TENSOR_NAMES[3]);
        }
        if check(self.attn_w.as_slice().unwrap()) {
            return Some(TENSOR_NAMES[4]);
        }
        if !self.attn_b.is_finite() {
            return Some(TENSOR_NAMES[5]);
        }
        if check(self.cls_w.as_slice().unwrap()) {
            return Some(TENSOR_NAMES[6]);
        }
        if check(self.cls_b.as_slice().unwrap()) {
            return Some(TENSOR_NAMES[7]);
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_access_round_trips() {
        let mut p = ModelParams::init(4, 3, 2, 7);
        let count = p.param_count();
        assert_eq!(count, 3 * 4 * 3 + 3 + 3 + 1 + 3 * 3 + 3);
        for i in 0..count {
            p.flat_set(i, i as f64);
        }
        for i in 0..count {
            assert_eq!(p.flat_get(i), i as f64);
        }
        assert_eq!(p.tensor_name(0), "embed_w_left");
        assert_eq!(p.tensor_name(count - 1), "cls_b");
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let a = ModelParams::init(6, 5, 3, 9);
        let b = ModelParams::init(6, 5, 3, 9);
        assert_eq!(a, b);
        let bound = 1.0 / (18.0f64).sqrt();
        for tap in &a.embed_w {
            assert!(tap.iter().all(|w| w.abs() <= bound));
        }
        assert_eq!(a.attn_b, 0.0);
        assert!(a.embed_b.iter().all(|&b| b == 0.0));
    }
}

//! Stage-1 training: seeded init, shuffled mini-batches, adaptive-moment
//! gradient descent. Single-threaded and deterministic given the seed.

use super::{batch_gradients, ModelError, ModelParams, TrainConfig};
use crate::data::{Dataset, Split};
use crate::rng::stage_rng;
use rand::seq::SliceRandom;

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(template: &ModelParams, lr: f64) -> Self {
        let zeros = ModelParams::zeros(
            template.feature_dim(),
            template.hidden_dim(),
            template.num_classes(),
        );
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<(), ModelError> {
        if !params.same_shape(grads) {
            return Err(ModelError::ShapeMismatch);
        }
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.param_count() {
            let g = grads.flat_get(i);
            let m = self.beta1 * self.m.flat_get(i) + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v.flat_get(i) + (1.0 - self.beta2) * g * g;
            self.m.flat_set(i, m);
            self.v.flat_set(i, v);
            let update = self.lr * (m / bias1) / ((v / bias2).sqrt() + self.eps);
            params.flat_set(i, params.flat_get(i) - update);
        }
        Ok(())
    }
}

/// Final parameters plus the per-epoch mean loss curve.
#[derive(Debug, Clone)]
pub struct TrainedBase {
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
}

/// Trains the base model on a training split with the MIL classification
/// loss. `cfg.epochs == 0` returns the seeded initialization untouched.
pub fn train_base(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainedBase, ModelError> {
    cfg.validate()?;
    if ds.split != Split::Train {
        return Err(ModelError::NotTrainSplit);
    }
    let Some(feature_dim) = ds.feature_dim() else {
        return Err(ModelError::EmptyDataset);
    };

    let mut params = ModelParams::init(feature_dim, cfg.hidden_dim, ds.num_classes, cfg.seed);
    let mut optimizer = Adam::new(&params, cfg.learning_rate);
    let mut rng = stage_rng(cfg.seed, "train-base");
    let mut order: Vec<usize> = (0..ds.videos.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&_> = chunk.iter().map(|&i| &ds.videos[i]).collect();
            let (grads, loss) =
                batch_gradients(&params, &batch, cfg.topk_ratio, Some((cfg.dropout, &mut rng)))?;
            optimizer.step(&mut params, &grads)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        epoch_losses.push(loss_sum / seen as f64);
    }

    Ok(TrainedBase { params, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthConfig};
    use crate::model::{classification_loss, forward};

    fn tiny_dataset() -> Dataset {
        let cfg = SynthConfig {
            num_classes: 3,
            feature_dim: 6,
            videos_per_split: 8,
            duration_median: 3.0,
            duration_log_sigma: 0.3,
            video_length_range: [20.0, 30.0],
            instances_per_video_range: [1, 2],
            domain_offset_scale: 0.0,
            noise_sigma: 0.15,
            boundary_blend_width: 1,
            snippet_stride: 1.0,
            seed: 31,
        };
        generate_synthetic_dataset(&cfg, "src", Split::Train).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 5e-3,
            batch_size: 4,
            epochs,
            topk_ratio: 8,
            dropout: 0.1,
            hidden_dim: 8,
            seed: 7,
        }
    }

    fn mean_loss(ds: &Dataset, params: &ModelParams, topk_ratio: usize) -> f64 {
        let total: f64 = ds
            .videos
            .iter()
            .map(|v| {
                let out = forward(params, &v.features).unwrap();
                classification_loss(&out, &v.label, topk_ratio).unwrap()
            })
            .sum();
        total / ds.videos.len() as f64
    }

    #[test]
    fn one_epoch_reduces_training_loss() {
        let ds = tiny_dataset();
        let cfg = quick_cfg(1);
        let init = ModelParams::init(6, cfg.hidden_dim, ds.num_classes, cfg.seed);
        let before = mean_loss(&ds, &init, cfg.topk_ratio);
        let trained = train_base(&ds, &cfg).unwrap();
        let after = mean_loss(&ds, &trained.params, cfg.topk_ratio);
        assert!(after < before, "loss did not improve: {before} -> {after}");
        assert_eq!(trained.epoch_losses.len(), 1);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = tiny_dataset();
        let cfg = quick_cfg(0);
        let trained = train_base(&ds, &cfg).unwrap();
        let init = ModelParams::init(6, cfg.hidden_dim, ds.num_classes, cfg.seed);
        assert_eq!(trained.params, init);
        assert!(trained.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = tiny_dataset();
        let cfg = quick_cfg(3);
        let a = train_base(&ds, &cfg).unwrap();
        let b = train_base(&ds, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn test_split_is_rejected() {
        let mut ds = tiny_dataset();
        ds.split = Split::Test;
        assert!(matches!(train_base(&ds, &quick_cfg(1)), Err(ModelError::NotTrainSplit)));
    }
}

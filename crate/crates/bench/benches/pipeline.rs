use criterion::{criterion_group, criterion_main, Criterion};
use gtal_core::adapter::{refine_attention, RefineConfig};
use gtal_core::data::FeatureSequence;
use gtal_core::localizer::{soft_nms, InferenceConfig, Proposal};
use gtal_core::model::{forward, gradients, ModelParams, TrainConfig};
use gtal_core::rng::stage_rng;
use gtal_core::VideoRecord;
use ndarray::{Array1, Array2};
use rand::Rng;
use std::hint::black_box;

fn bench_forward(c: &mut Criterion) {
    let params = ModelParams::init(32, 64, 8, 1);
    let mut rng = stage_rng(2, "bench-forward");
    let feats = FeatureSequence::new(
        Array2::from_shape_fn((160, 32), |_| rng.random_range(-1.0f32..1.0)),
        1.0,
    )
    .unwrap();
    c.bench_function("forward_160x32_h64", |b| {
        b.iter(|| forward(black_box(&params), black_box(&feats)).unwrap())
    });
}

fn bench_gradients(c: &mut Criterion) {
    let params = ModelParams::init(32, 64, 8, 1);
    let mut rng = stage_rng(3, "bench-grad");
    let feats = FeatureSequence::new(
        Array2::from_shape_fn((48, 32), |_| rng.random_range(-1.0f32..1.0)),
        1.0,
    )
    .unwrap();
    let mut label = vec![0u8; 8];
    label[2] = 1;
    let video = VideoRecord {
        id: "bench".into(),
        features: feats,
        label,
        instances: vec![],
        duration: 48.0,
    };
    let cfg = TrainConfig::default();
    c.bench_function("gradients_one_video_48x32", |b| {
        b.iter(|| gradients(black_box(&params), &[black_box(&video)], &cfg).unwrap())
    });
}

fn bench_refine(c: &mut Criterion) {
    let mut rng = stage_rng(4, "bench-refine");
    let phi = Array1::from_shape_fn(1000, |_| rng.random_range(0.0..1.0));
    let cfg = RefineConfig { eta: 3, alpha: 1.4, clamp: true };
    c.bench_function("refine_attention_n1000_eta3", |b| {
        b.iter(|| refine_attention(black_box(&phi), &cfg))
    });
}

fn bench_soft_nms(c: &mut Criterion) {
    let mut rng = stage_rng(5, "bench-nms");
    let proposals: Vec<Proposal> = (0..200)
        .map(|_| {
            let start = rng.random_range(0.0..100.0);
            Proposal {
                class_id: rng.random_range(0..4),
                start,
                end: start + rng.random_range(0.5..20.0),
                confidence: rng.random_range(0.0..1.0),
            }
        })
        .collect();
    let cfg = InferenceConfig::default();
    c.bench_function("soft_nms_200_proposals", |b| {
        b.iter(|| soft_nms(black_box(proposals.clone()), &cfg))
    });
}

criterion_group!(benches, bench_forward, bench_gradients, bench_refine, bench_soft_nms);
criterion_main!(benches);

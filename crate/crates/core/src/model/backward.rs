//! Analytic gradients of the classification loss.
//!
//! The top-k selection is treated as fixed at the current point, so the
//! gradient is the exact derivative of the loss restricted to the selected
//! snippets (a subgradient of the full objective). Verified against central
//! finite differences in the test suite.

use super::{
    aggregate_topk_traced, extended_label, forward_traced, suppressed_cas, validate_label,
    ForwardOutput, ForwardTrace, ModelError, ModelParams, TrainConfig,
};
use crate::data::VideoRecord;
use ndarray::{s, Array1, Array2};
use rand_chacha::ChaCha8Rng;

/// Loss value and its derivative with respect to the attention vector and the
/// CAS, holding the top-k selection fixed.
pub(crate) fn classification_loss_backward(
    out: &ForwardOutput,
    label: &[u8],
    topk_ratio: usize,
) -> Result<(f64, Array1<f64>, Array2<f64>), ModelError> {
    let heads = out.cas.ncols();
    validate_label(label, heads - 1)?;
    let n = out.cas.nrows();
    let y_base = extended_label(label, 1.0);
    let y_supp = extended_label(label, 0.0);

    let base = aggregate_topk_traced(&out.cas, topk_ratio);
    let supp_scores = suppressed_cas(out);
    let supp = aggregate_topk_traced(&supp_scores, topk_ratio);

    let loss = super::cross_entropy(&y_base, &base.probs) + super::cross_entropy(&y_supp, &supp.probs);

    let mut d_phi = Array1::zeros(n);
    let mut d_cas = Array2::zeros((n, heads));

    // Softmax + cross-entropy collapse to (p - y) on the pooled values; each
    // pooled value spreads its gradient uniformly over its k selected rows.
    for c in 0..heads {
        let g_base = (base.probs[c] - y_base[c]) / base.k as f64;
        for &i in &base.selected[c] {
            d_cas[[i, c]] += g_base;
        }
        let g_supp = (supp.probs[c] - y_supp[c]) / supp.k as f64;
        for &i in &supp.selected[c] {
            d_phi[i] += g_supp * out.cas[[i, c]];
            d_cas[[i, c]] += g_supp * out.attention[i];
        }
    }
    Ok((loss, d_phi, d_cas))
}

/// Backpropagates output gradients through the network, returning a
/// parameter-shaped gradient record.
pub(crate) fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_attention: &Array1<f64>,
    d_cas: &Array2<f64>,
) -> ModelParams {
    let n = trace.features.nrows();
    let heads = trace.cas.ncols();
    let mut grads =
        ModelParams::zeros(params.feature_dim(), params.hidden_dim(), params.num_classes());

    // Softmax rows: dz = psi * (dpsi - <dpsi, psi>).
    let mut d_z = Array2::zeros((n, heads));
    for i in 0..n {
        let psi = trace.cas.row(i);
        let g = d_cas.row(i);
        let inner: f64 = psi.iter().zip(g.iter()).map(|(&p, &v)| p * v).sum();
        for c in 0..heads {
            d_z[[i, c]] = psi[c] * (g[c] - inner);
        }
    }

    // Sigmoid: da = dphi * phi * (1 - phi).
    let d_a: Array1<f64> = trace
        .attention
        .iter()
        .zip(d_attention.iter())
        .map(|(&phi, &g)| g * phi * (1.0 - phi))
        .collect();

    grads.cls_w = trace.hidden.t().dot(&d_z);
    grads.cls_b = d_z.sum_axis(ndarray::Axis(0));
    grads.attn_w = trace.hidden.t().dot(&d_a);
    grads.attn_b = d_a.sum();

    let mut d_hidden = d_z.dot(&params.cls_w.t());
    for (mut row, &da) in d_hidden.rows_mut().into_iter().zip(d_a.iter()) {
        row.zip_mut_with(&params.attn_w, |h, &w| *h += da * w);
    }
    if let Some(scale) = &trace.drop_scale {
        d_hidden.zip_mut_with(scale, |h, &s| *h *= s);
    }
    let mut d_pre = d_hidden;
    d_pre.zip_mut_with(&trace.pre_act, |g, &pre| {
        if pre <= 0.0 {
            *g = 0.0;
        }
    });

    grads.embed_b = d_pre.sum_axis(ndarray::Axis(0));
    grads.embed_w[1] = trace.features.t().dot(&d_pre);
    if n > 1 {
        grads.embed_w[0] = trace.features.slice(s![..n - 1, ..]).t().dot(&d_pre.slice(s![1.., ..]));
        grads.embed_w[2] = trace.features.slice(s![1.., ..]).t().dot(&d_pre.slice(s![..n - 1, ..]));
    }
    grads
}

/// Exact analytic gradient of the mean classification loss over `batch`,
/// dropout off. Returns the gradients and the mean loss.
pub fn gradients(
    params: &ModelParams,
    batch: &[&VideoRecord],
    cfg: &TrainConfig,
) -> Result<(ModelParams, f64), ModelError> {
    batch_gradients(params, batch, cfg.topk_ratio, None)
}

pub(crate) fn batch_gradients(
    params: &ModelParams,
    batch: &[&VideoRecord],
    topk_ratio: usize,
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(ModelParams, f64), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total =
        ModelParams::zeros(params.feature_dim(), params.hidden_dim(), params.num_classes());
    let weight = 1.0 / batch.len() as f64;
    let mut mean_loss = 0.0;
    for video in batch {
        let trace = forward_traced(
            params,
            &video.features,
            dropout.as_mut().map(|(rate, rng)| (*rate, &mut **rng)),
        )?;
        let out = trace.output();
        let (loss, d_phi, d_cas) = classification_loss_backward(&out, &video.label, topk_ratio)?;
        mean_loss += weight * loss;
        let g = backward(params, &trace, &d_phi, &d_cas);
        total.scaled_add(weight, &g)?;
    }
    if let Some(tensor) = total.first_non_finite() {
        return Err(ModelError::NonFiniteGradient { tensor });
    }
    Ok((total, mean_loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSequence;
    use crate::model::{classification_loss, forward};
    use crate::rng::stage_rng;
    use ndarray::Array2;
    use rand::Rng;

    fn random_video(
        rng: &mut ChaCha8Rng,
        n: usize,
        d: usize,
        classes: usize,
    ) -> VideoRecord {
        let data = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f32..1.0));
        let mut label = vec![0u8; classes];
        label[rng.random_range(0..classes)] = 1;
        if rng.random::<f64>() < 0.4 {
            label[rng.random_range(0..classes)] = 1;
        }
        VideoRecord {
            id: "t".into(),
            features: FeatureSequence::new(data, 1.0).unwrap(),
            label,
            instances: vec![],
            duration: n as f64,
        }
    }

    fn finite_difference(
        params: &ModelParams,
        video: &VideoRecord,
        cfg: &TrainConfig,
        index: usize,
        h: f64,
    ) -> f64 {
        let eval = |p: &ModelParams| {
            let out = forward(p, &video.features).unwrap();
            classification_loss(&out, &video.label, cfg.topk_ratio).unwrap()
        };
        let mut plus = params.clone();
        plus.flat_set(index, params.flat_get(index) + h);
        let mut minus = params.clone();
        minus.flat_set(index, params.flat_get(index) - h);
        (eval(&plus) - eval(&minus)) / (2.0 * h)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = stage_rng(19, "gradcheck");
        let cfg = TrainConfig { topk_ratio: 4, ..TrainConfig::default() };
        for _ in 0..5 {
            let (n, d, hdim, classes) = (
                rng.random_range(2..=12),
                rng.random_range(2..=6),
                rng.random_range(2..=6),
                rng.random_range(2..=4),
            );
            let params = ModelParams::init_from_rng(d, hdim, classes, &mut rng);
            let video = random_video(&mut rng, n, d, classes);
            let (grads, _) = gradients(&params, &[&video], &cfg).unwrap();
            for _ in 0..12 {
                let index = rng.random_range(0..params.param_count());
                let analytic = grads.flat_get(index);
                let numeric = finite_difference(&params, &video, &cfg, index, 1e-4);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                let rel = (analytic - numeric).abs() / denom;
                assert!(
                    rel <= 1e-4,
                    "param {index} ({}): analytic {analytic}, numeric {numeric}, rel {rel}",
                    params.tensor_name(index)
                );
            }
        }
    }

    #[test]
    fn duplicated_video_batch_equals_single_video() {
        let mut rng = stage_rng(23, "dup");
        let params = ModelParams::init_from_rng(4, 5, 3, &mut rng);
        let video = random_video(&mut rng, 8, 4, 3);
        let cfg = TrainConfig::default();
        let (single, loss_single) = gradients(&params, &[&video], &cfg).unwrap();
        let (double, loss_double) = gradients(&params, &[&video, &video], &cfg).unwrap();
        assert!((loss_single - loss_double).abs() < 1e-12);
        for i in 0..params.param_count() {
            assert!((single.flat_get(i) - double.flat_get(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn dead_relu_units_get_zero_gradient() {
        let mut rng = stage_rng(29, "dead");
        let mut params = ModelParams::init_from_rng(3, 4, 2, &mut rng);
        // Force one hidden unit permanently off with a large negative bias.
        params.embed_b[0] = -100.0;
        let video = random_video(&mut rng, 6, 3, 2);
        let (grads, _) = gradients(&params, &[&video], &TrainConfig::default()).unwrap();
        assert_eq!(grads.embed_b[0], 0.0);
        for d in 0..3 {
            assert_eq!(grads.embed_w[0][[d, 0]], 0.0);
            assert_eq!(grads.embed_w[1][[d, 0]], 0.0);
            assert_eq!(grads.embed_w[2][[d, 0]], 0.0);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let params = ModelParams::init(3, 4, 2, 1);
        assert!(matches!(
            gradients(&params, &[], &TrainConfig::default()),
            Err(ModelError::EmptyBatch)
        ));
    }
}

//! Stage-2 adaptation: a teacher-student pair initialized from the base
//! model. The teacher runs on clean features and its attention is refined by
//! salience sampling; the student runs on blurred features with dropout and
//! is trained to align with the teacher (attention MSE, CAS KL, and an
//! attention/background calibration loss). The teacher tracks the student by
//! exponential moving average and is the model returned for inference.

use crate::data::{Dataset, DataError, FeatureSequence};
use crate::model::{
    backward, forward, forward_traced, Adam, ForwardOutput, ModelError, ModelParams,
};
use crate::rng::stage_rng;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied inside logarithms; derivatives vanish where the clamp engages.
const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("{context}: length mismatch ({left} vs {right})")]
    LengthMismatch { context: &'static str, left: usize, right: usize },
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("non-finite adaptation loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Window size and refinement factor of the attention refinement rule.
///
/// `alpha < 1` lifts snippets that sit below their context maxima (longer
/// proposals, scale-up); `alpha > 1` suppresses them (scale-down); `alpha = 1`
/// leaves attention untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Context window size in snippets on each side.
    pub eta: usize,
    /// Refinement factor.
    pub alpha: f64,
    /// Clamp refined attention to `[0, 1]`; required for `alpha > 1`.
    #[serde(default = "default_clamp")]
    pub clamp: bool,
}

fn default_clamp() -> bool {
    true
}

impl RefineConfig {
    pub(crate) fn validate(&self) -> Result<(), AdaptError> {
        if self.eta == 0 {
            return Err(AdaptError::InvalidConfig { field: "eta", reason: "must be >= 1".into() });
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(AdaptError::InvalidConfig {
                field: "alpha",
                reason: "must be >= 0 and finite".into(),
            });
        }
        Ok(())
    }
}

/// Which way the calibration loss ties the background probability to the
/// attention value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationTarget {
    /// Drive `Psi(n, bg)` toward `phi(n)`.
    AsPrinted,
    /// Drive `Psi(n, bg)` toward `1 - phi(n)`.
    Complement,
}

impl Default for CalibrationTarget {
    fn default() -> Self {
        CalibrationTarget::AsPrinted
    }
}

fn default_lambda_att() -> f64 {
    1.0
}
fn default_lambda_cas() -> f64 {
    1.0
}
fn default_lambda_cal() -> f64 {
    0.1
}
fn default_ema() -> f64 {
    0.9
}
fn default_lr() -> f64 {
    3e-5
}
fn default_batch() -> usize {
    30
}
fn default_blur_sigma() -> f64 {
    1.0
}
fn default_blur_kernel() -> usize {
    3
}
fn default_student_dropout() -> f64 {
    0.1
}

/// Stage-2 configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    #[serde(default = "default_lambda_att")]
    pub lambda_att: f64,
    #[serde(default = "default_lambda_cas")]
    pub lambda_cas: f64,
    #[serde(default = "default_lambda_cal")]
    pub lambda_cal: f64,
    /// Teacher EMA momentum `m`: `teacher <- m * teacher + (1 - m) * student`.
    #[serde(default = "default_ema")]
    pub ema_momentum: f64,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Gaussian temporal blur applied to the student's input features.
    #[serde(default = "default_blur_sigma")]
    pub blur_sigma: f64,
    /// Blur kernel width in snippets; must be odd.
    #[serde(default = "default_blur_kernel")]
    pub blur_kernel: usize,
    #[serde(default = "default_student_dropout")]
    pub student_dropout: f64,
    #[serde(default)]
    pub calibration_target: CalibrationTarget,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda_att: default_lambda_att(),
            lambda_cas: default_lambda_cas(),
            lambda_cal: default_lambda_cal(),
            ema_momentum: default_ema(),
            epochs: 20,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            blur_sigma: default_blur_sigma(),
            blur_kernel: default_blur_kernel(),
            student_dropout: default_student_dropout(),
            calibration_target: CalibrationTarget::AsPrinted,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub(crate) fn validate(&self) -> Result<(), AdaptError> {
        fn err(field: &'static str, reason: impl Into<String>) -> AdaptError {
            AdaptError::InvalidConfig { field, reason: reason.into() }
        }
        for (field, value) in [
            ("lambda_att", self.lambda_att),
            ("lambda_cas", self.lambda_cas),
            ("lambda_cal", self.lambda_cal),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(err("lambda", format!("{field} must be >= 0, got {value}")));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(err("ema_momentum", "must be in [0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(err("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be >= 1"));
        }
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return Err(err("blur_kernel", format!("must be odd, got {}", self.blur_kernel)));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(err("blur_sigma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.student_dropout) {
            return Err(err("student_dropout", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Shape-identical teacher and student parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudent {
    pub teacher: ModelParams,
    pub student: ModelParams,
}

impl TeacherStudent {
    /// Initializes both models from the stage-1 parameters.
    pub fn from_base(base: &ModelParams) -> Self {
        Self { teacher: base.clone(), student: base.clone() }
    }
}

/// Gaussian temporal blur per feature channel with edge-replicated padding.
/// The kernel is normalized, so constant sequences pass through unchanged.
/// `blur_sigma <= 0` degenerates to the identity.
pub fn blur_augment(feats: &FeatureSequence, cfg: &AdaptConfig) -> Result<FeatureSequence, AdaptError> {
    if cfg.blur_kernel == 0 || cfg.blur_kernel % 2 == 0 {
        return Err(AdaptError::InvalidConfig {
            field: "blur_kernel",
            reason: format!("must be odd, got {}", cfg.blur_kernel),
        });
    }
    let weights = gaussian_kernel(cfg.blur_kernel, cfg.blur_sigma);
    let half = (cfg.blur_kernel / 2) as isize;
    let n = feats.num_snippets() as isize;
    let data = feats.data();
    let mut out = Array2::<f32>::zeros((feats.num_snippets(), feats.dim()));
    for i in 0..n {
        for d in 0..feats.dim() {
            let mut acc = 0.0f64;
            for (j, &w) in weights.iter().enumerate() {
                let src = (i + j as isize - half).clamp(0, n - 1);
                acc += w * f64::from(data[[src as usize, d]]);
            }
            out[[i as usize, d]] = acc as f32;
        }
    }
    Ok(FeatureSequence::new(out, feats.snippet_stride())?)
}

pub(crate) fn gaussian_kernel(width: usize, sigma: f64) -> Vec<f64> {
    let half = (width / 2) as isize;
    if sigma <= 0.0 {
        let mut k = vec![0.0; width];
        k[half as usize] = 1.0;
        return k;
    }
    let mut k: Vec<f64> = (-half..=half)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Most salient attention in the left window `[n-eta, n-1]` and the right
/// window `[n+1, n+eta]`, clipped to the sequence. An empty window returns
/// `phi[n]` itself, which neutralizes refinement from that side.
pub fn salience_sample(phi: &Array1<f64>, n: usize, eta: usize) -> (f64, f64) {
    assert!(n < phi.len(), "snippet index {n} out of range (N = {})", phi.len());
    let left_start = n.saturating_sub(eta);
    let left = if n == 0 {
        phi[n]
    } else {
        (left_start..n).map(|i| phi[i]).fold(f64::NEG_INFINITY, f64::max)
    };
    let right_end = (n + eta).min(phi.len() - 1);
    let right = if n + 1 > right_end {
        phi[n]
    } else {
        (n + 1..=right_end).map(|i| phi[i]).fold(f64::NEG_INFINITY, f64::max)
    };
    (left, right)
}

/// The three-condition refinement rule, computed in one pass over the
/// original vector: where `phi(n)` is below `min(left max, right max)` it
/// moves to `alpha * phi(n) + (1 - alpha) * min(left, right)`; elsewhere it is
/// untouched. With `cfg.clamp` the result is clamped to `[0, 1]` (required for
/// `alpha > 1`, which can otherwise go negative).
pub fn refine_attention(phi: &Array1<f64>, cfg: &RefineConfig) -> Array1<f64> {
    let mut refined = Array1::zeros(phi.len());
    for n in 0..phi.len() {
        let (left, right) = salience_sample(phi, n, cfg.eta);
        let reference = left.min(right);
        let value = if phi[n] < reference {
            cfg.alpha * phi[n] + (1.0 - cfg.alpha) * reference
        } else {
            phi[n]
        };
        refined[n] = if cfg.clamp { value.clamp(0.0, 1.0) } else { value };
    }
    refined
}

/// Mean squared error between the refined teacher attention and the student
/// attention. The teacher side carries no gradient.
pub fn loss_att(phi_hat_t: &Array1<f64>, phi_s: &Array1<f64>) -> Result<f64, AdaptError> {
    if phi_hat_t.len() != phi_s.len() {
        return Err(AdaptError::LengthMismatch {
            context: "loss_att",
            left: phi_hat_t.len(),
            right: phi_s.len(),
        });
    }
    let n = phi_hat_t.len() as f64;
    Ok(phi_hat_t.iter().zip(phi_s.iter()).map(|(&t, &s)| (t - s) * (t - s)).sum::<f64>() / n)
}

/// Mean per-snippet KL divergence `KL(teacher || student)` between CAS rows.
pub fn loss_cas(psi_t: &Array2<f64>, psi_s: &Array2<f64>) -> Result<f64, AdaptError> {
    if psi_t.dim() != psi_s.dim() {
        return Err(AdaptError::LengthMismatch {
            context: "loss_cas",
            left: psi_t.nrows() * psi_t.ncols(),
            right: psi_s.nrows() * psi_s.ncols(),
        });
    }
    let n = psi_t.nrows() as f64;
    let mut total = 0.0;
    for (t, s) in psi_t.iter().zip(psi_s.iter()) {
        if *t > 0.0 {
            total += t * (t.max(LOG_CLAMP).ln() - s.max(LOG_CLAMP).ln());
        }
    }
    Ok(total / n)
}

/// Binary cross-entropy between the student's background probability and its
/// attention. Differentiable in both the attention and the CAS.
pub fn loss_cal(
    phi_s: &Array1<f64>,
    psi_s: &Array2<f64>,
    target: CalibrationTarget,
) -> Result<f64, AdaptError> {
    if phi_s.len() != psi_s.nrows() {
        return Err(AdaptError::LengthMismatch {
            context: "loss_cal",
            left: phi_s.len(),
            right: psi_s.nrows(),
        });
    }
    let bg = psi_s.ncols() - 1;
    let n = phi_s.len() as f64;
    let mut total = 0.0;
    for (i, &phi) in phi_s.iter().enumerate() {
        let p_bg = psi_s[[i, bg]];
        let weight_on = match target {
            CalibrationTarget::AsPrinted => phi,
            CalibrationTarget::Complement => 1.0 - phi,
        };
        total += -weight_on * p_bg.max(LOG_CLAMP).ln()
            - (1.0 - weight_on) * (1.0 - p_bg).max(LOG_CLAMP).ln();
    }
    Ok(total / n)
}

/// Raw alignment loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptLossParts {
    pub att: f64,
    pub cas: f64,
    pub cal: f64,
    /// `lambda_att * att + lambda_cas * cas + lambda_cal * cal`.
    pub total: f64,
}

/// Weighted sum of the three alignment losses. Only the student side carries
/// gradients.
pub fn total_adapt_loss(
    phi_hat_t: &Array1<f64>,
    psi_t: &Array2<f64>,
    phi_s: &Array1<f64>,
    psi_s: &Array2<f64>,
    cfg: &AdaptConfig,
) -> Result<AdaptLossParts, AdaptError> {
    let att = loss_att(phi_hat_t, phi_s)?;
    let cas = loss_cas(psi_t, psi_s)?;
    let cal = loss_cal(phi_s, psi_s, cfg.calibration_target)?;
    Ok(AdaptLossParts {
        att,
        cas,
        cal,
        total: cfg.lambda_att * att + cfg.lambda_cas * cas + cfg.lambda_cal * cal,
    })
}

/// One EMA step: `teacher <- m * teacher + (1 - m) * student`; the student is
/// untouched. `m = 1` freezes the teacher, `m = 0` copies the student.
pub fn ema_update(ts: &mut TeacherStudent, momentum: f64) -> Result<(), AdaptError> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(AdaptError::InvalidConfig {
            field: "ema_momentum",
            reason: format!("must be in [0, 1], got {momentum}"),
        });
    }
    if momentum == 1.0 {
        if !ts.teacher.same_shape(&ts.student) {
            return Err(ModelError::ShapeMismatch.into());
        }
        return Ok(());
    }
    if momentum == 0.0 {
        if !ts.teacher.same_shape(&ts.student) {
            return Err(ModelError::ShapeMismatch.into());
        }
        ts.teacher = ts.student.clone();
        return Ok(());
    }
    // Difference form of the same update: exact when teacher == student, and
    // the teacher-student gap decays by exactly one rounding per step.
    let student = &ts.student;
    ts.teacher.for_each_pair_mut(student, |t, s| *t = s + momentum * (*t - s))?;
    Ok(())
}

/// Gradient of the weighted alignment loss with respect to the student's
/// outputs, holding the teacher constant.
fn adapt_loss_backward(
    phi_hat_t: &Array1<f64>,
    psi_t: &Array2<f64>,
    student_out: &ForwardOutput,
    cfg: &AdaptConfig,
) -> Result<(AdaptLossParts, Array1<f64>, Array2<f64>), AdaptError> {
    let phi_s = &student_out.attention;
    let psi_s = &student_out.cas;
    let parts = total_adapt_loss(phi_hat_t, psi_t, phi_s, psi_s, cfg)?;

    let n = phi_s.len();
    let heads = psi_s.ncols();
    let bg = heads - 1;
    let n_f = n as f64;
    let mut d_phi = Array1::zeros(n);
    let mut d_psi = Array2::zeros((n, heads));

    for i in 0..n {
        // Attention MSE.
        d_phi[i] += cfg.lambda_att * 2.0 * (phi_s[i] - phi_hat_t[i]) / n_f;

        // CAS KL: d/dpsi_s of -psi_t * ln(psi_s); zero where the clamp engages.
        for c in 0..heads {
            let t = psi_t[[i, c]];
            let s = psi_s[[i, c]];
            if t > 0.0 && s > LOG_CLAMP {
                d_psi[[i, c]] += cfg.lambda_cas * (-t / s) / n_f;
            }
        }

        // Calibration BCE.
        let p_bg = psi_s[[i, bg]];
        let log_bg = p_bg.max(LOG_CLAMP).ln();
        let log_not_bg = (1.0 - p_bg).max(LOG_CLAMP).ln();
        let weight_on = match cfg.calibration_target {
            CalibrationTarget::AsPrinted => phi_s[i],
            CalibrationTarget::Complement => 1.0 - phi_s[i],
        };
        let d_weight = match cfg.calibration_target {
            CalibrationTarget::AsPrinted => 1.0,
            CalibrationTarget::Complement => -1.0,
        };
        d_phi[i] += cfg.lambda_cal * d_weight * (-log_bg + log_not_bg) / n_f;
        let mut d_bg = 0.0;
        if p_bg > LOG_CLAMP {
            d_bg += -weight_on / p_bg;
        }
        if 1.0 - p_bg > LOG_CLAMP {
            d_bg += (1.0 - weight_on) / (1.0 - p_bg);
        }
        d_psi[[i, bg]] += cfg.lambda_cal * d_bg / n_f;
    }
    Ok((parts, d_phi, d_psi))
}

/// Analytic gradient of the weighted alignment loss with respect to the
/// student parameters (dropout off), given the teacher's refined attention and
/// CAS as constants.
pub fn adapt_gradients(
    student: &ModelParams,
    student_input: &FeatureSequence,
    phi_hat_t: &Array1<f64>,
    psi_t: &Array2<f64>,
    cfg: &AdaptConfig,
) -> Result<(ModelParams, AdaptLossParts), AdaptError> {
    let trace = forward_traced(student, student_input, None)?;
    let out = trace.output();
    let (parts, d_phi, d_psi) = adapt_loss_backward(phi_hat_t, psi_t, &out, cfg)?;
    Ok((backward(student, &trace, &d_phi, &d_psi), parts))
}

/// Per-epoch mean of the weighted loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptEpochLoss {
    pub epoch: usize,
    pub att: f64,
    pub cas: f64,
    pub cal: f64,
    pub total: f64,
}

/// Adapted models and the loss log. The teacher is the model used for
/// inference; the student is kept for the frozen-teacher ablation.
#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub teacher: ModelParams,
    pub student: ModelParams,
    pub epoch_losses: Vec<AdaptEpochLoss>,
}

/// Runs stage-2 adaptation on an unlabeled target split.
///
/// Per mini-batch: teacher forward on clean features (constant), student
/// forward on blurred features with dropout, attention refinement, alignment
/// loss, one optimizer step on the student, one EMA step on the teacher.
/// Video labels are never read. Deterministic given `adapt_cfg.seed`.
pub fn adapt(
    base: &ModelParams,
    target_train: &Dataset,
    refine_cfg: &RefineConfig,
    adapt_cfg: &AdaptConfig,
) -> Result<AdaptResult, AdaptError> {
    refine_cfg.validate()?;
    adapt_cfg.validate()?;
    if target_train.videos.is_empty() {
        return Err(ModelError::EmptyDataset.into());
    }

    let mut ts = TeacherStudent::from_base(base);
    let mut optimizer = Adam::new(base, adapt_cfg.learning_rate);
    let mut rng = stage_rng(adapt_cfg.seed, "adapt");

    // The blur is deterministic per video; compute it once.
    let blurred: Vec<FeatureSequence> = target_train
        .videos
        .iter()
        .map(|v| blur_augment(&v.features, adapt_cfg))
        .collect::<Result<_, _>>()?;

    let mut order: Vec<usize> = (0..target_train.videos.len()).collect();
    let mut epoch_losses = Vec::with_capacity(adapt_cfg.epochs);

    for epoch in 0..adapt_cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(adapt_cfg.batch_size).enumerate() {
            let weight = 1.0 / chunk.len() as f64;
            let mut grads = ModelParams::zeros(
                base.feature_dim(),
                base.hidden_dim(),
                base.num_classes(),
            );
            let mut batch_total = 0.0;
            for &idx in chunk {
                let video = &target_train.videos[idx];
                let teacher_out = forward(&ts.teacher, &video.features)?;
                let phi_hat = refine_attention(&teacher_out.attention, refine_cfg);

                let trace = forward_traced(
                    &ts.student,
                    &blurred[idx],
                    Some((adapt_cfg.student_dropout, &mut rng)),
                )?;
                let student_out = trace.output();
                let (parts, d_phi, d_psi) =
                    adapt_loss_backward(&phi_hat, &teacher_out.cas, &student_out, adapt_cfg)?;
                grads.scaled_add(weight, &backward(&ts.student, &trace, &d_phi, &d_psi))?;

                sums.0 += adapt_cfg.lambda_att * parts.att;
                sums.1 += adapt_cfg.lambda_cas * parts.cas;
                sums.2 += adapt_cfg.lambda_cal * parts.cal;
                sums.3 += parts.total;
                batch_total += parts.total;
                seen += 1;
            }
            if !batch_total.is_finite() {
                return Err(AdaptError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            optimizer.step(&mut ts.student, &grads)?;
            ema_update(&mut ts, adapt_cfg.ema_momentum)?;
        }
        let n = seen as f64;
        epoch_losses.push(AdaptEpochLoss {
            epoch,
            att: sums.0 / n,
            cas: sums.1 / n,
            cal: sums.2 / n,
            total: sums.3 / n,
        });
    }

    Ok(AdaptResult { teacher: ts.teacher, student: ts.student, epoch_losses })
}

//! Distillation objectives.
//!
//! Normalization is deliberately asymmetric: the label loss carries `1/L`
//! per axis and sums over the batch, while the logit distillation loss
//! carries `1/N` and sums over bins. `normalize_uniformly` switches both to
//! a `1/(N*L)` mean for experiments; it is off by default.
//!
//! Probabilities are row softmaxes of head logits (temperature 1 unless
//! configured). `log` is floored at `ln(1e-12)` and `0 * log(0)` is 0.
//! Horizontal and vertical terms are summed.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::simcc::{SimCCTarget, VisibilityWeights};
use crate::tensor::{log_softmax, FeatureMap, PoseLogits, PoseProbs};

pub const LOG_FLOOR: f64 = 1e-12;

fn floored_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Current epoch, 1-based.
    pub t: usize,
    pub t_max: usize,
    pub use_gt: bool,
    pub use_fea: bool,
    pub use_logit: bool,
    pub use_decay: bool,
    /// Apply the target-weight mask to the logit loss (ablation only).
    pub use_mask_in_kd: bool,
    pub temperature: f64,
    pub normalize_uniformly: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.00005,
            beta: 0.1,
            gamma: 1.0,
            t: 1,
            t_max: 1,
            use_gt: true,
            use_fea: true,
            use_logit: true,
            use_decay: true,
            use_mask_in_kd: false,
            temperature: 1.0,
            normalize_uniformly: false,
        }
    }
}

impl DistillConfig {
    /// Label-only training: every distillation term off.
    pub fn gt_only() -> Self {
        Self {
            use_fea: false,
            use_logit: false,
            use_decay: false,
            ..Self::default()
        }
    }

    pub fn any_distillation(&self) -> bool {
        self.use_fea || self.use_logit
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0,
            "alpha, beta, gamma must be >= 0"
        );
        ensure!(
            self.t >= 1 && self.t <= self.t_max,
            "epoch t = {} outside 1..={}",
            self.t,
            self.t_max
        );
        ensure!(self.temperature > 0.0, "temperature must be > 0");
        Ok(())
    }
}

/// Linear decay `r(t) = 1 - (t - 1) / t_max`, evaluated as
/// `(t_max - t + 1) / t_max` so the endpoints are exact.
pub fn decay_weight(t: usize, t_max: usize) -> Result<f64> {
    ensure!(t >= 1 && t <= t_max, "epoch t = {t} outside 1..={t_max}");
    Ok((t_max - t + 1) as f64 / t_max as f64)
}

/// Mean squared error over `C*H*W`.
pub fn loss_feature(teacher: &FeatureMap, student_projected: &FeatureMap) -> Result<f64> {
    Ok(feature_term(teacher, student_projected, false)?.0)
}

/// Value and gradient with respect to the projected student feature.
pub fn feature_term(teacher: &FeatureMap, student_projected: &FeatureMap, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    ensure!(
        teacher.shape() == student_projected.shape(),
        "feature shapes differ: teacher {:?}, student {:?}",
        teacher.shape(),
        student_projected.shape()
    );
    let scale = 1.0 / teacher.data.len() as f64;
    let mut value = 0.0;
    let mut grad = if want_grad {
        vec![0.0; teacher.data.len()]
    } else {
        Vec::new()
    };
    for (i, (t, s)) in teacher.data.iter().zip(&student_projected.data).enumerate() {
        let d = t - s;
        value += d * d;
        if want_grad {
            grad[i] = -2.0 * d * scale;
        }
    }
    Ok((value * scale, grad))
}

fn check_batch<T>(what: &str, a: &[T], b: usize) -> Result<()> {
    ensure!(a.len() == b, "{what}: batch sizes differ ({} vs {b})", a.len());
    Ok(())
}

/// Masked label cross-entropy, summed over the batch, `1/L` per axis.
pub fn loss_original(student: &[PoseProbs], targets: &[SimCCTarget], weights: &VisibilityWeights) -> Result<f64> {
    check_batch("loss_original", targets, student.len())?;
    ensure!(
        weights.samples == student.len(),
        "weight mask has {} rows for a batch of {}",
        weights.samples,
        student.len()
    );
    let mut total = 0.0;
    for (n, (s, v)) in student.iter().zip(targets).enumerate() {
        let s = s.inner();
        ensure!(
            s.num_keypoints == v.num_keypoints && s.bins_x == v.bins_x && s.bins_y == v.bins_y,
            "prediction and target shapes differ"
        );
        ensure!(
            weights.num_keypoints == s.num_keypoints,
            "weight mask has wrong keypoint count"
        );
        for k in 0..s.num_keypoints {
            let w = weights.row(n)[k];
            if w == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for (rows_s, rows_v, l) in [(s.x_row(k), v.x_row(k), s.bins_x), (s.y_row(k), v.y_row(k), s.bins_y)] {
                let inv_l = 1.0 / l as f64;
                for (p, q) in rows_s.iter().zip(rows_v) {
                    if *q != 0.0 {
                        row += inv_l * q * floored_ln(*p);
                    }
                }
            }
            total -= w * row;
        }
    }
    Ok(total)
}

/// Teacher-to-student cross-entropy, `1/N` over the batch, no mask.
pub fn loss_logit_kd(teacher: &[PoseProbs], student: &[PoseProbs]) -> Result<f64> {
    logit_kd_impl(teacher, student, None)
}

/// [`loss_logit_kd`] with each keypoint term multiplied by its target weight.
pub fn loss_logit_kd_masked(teacher: &[PoseProbs], student: &[PoseProbs], weights: &VisibilityWeights) -> Result<f64> {
    ensure!(
        weights.samples == student.len(),
        "weight mask has {} rows for a batch of {}",
        weights.samples,
        student.len()
    );
    logit_kd_impl(teacher, student, Some(weights))
}

fn logit_kd_impl(teacher: &[PoseProbs], student: &[PoseProbs], weights: Option<&VisibilityWeights>) -> Result<f64> {
    check_batch("loss_logit_kd", teacher, student.len())?;
    let inv_n = 1.0 / student.len().max(1) as f64;
    let mut total = 0.0;
    for (n, (t, s)) in teacher.iter().zip(student).enumerate() {
        let (t, s) = (t.inner(), s.inner());
        ensure!(t.same_shape(s), "teacher and student logits differ in shape");
        if let Some(w) = weights {
            ensure!(
                w.num_keypoints == s.num_keypoints,
                "weight mask has wrong keypoint count"
            );
        }
        for k in 0..s.num_keypoints {
            let w = weights.map_or(1.0, |w| w.row(n)[k]);
            let mut row = 0.0;
            for (rt, rs) in [(t.x_row(k), s.x_row(k)), (t.y_row(k), s.y_row(k))] {
                for (p, q) in rt.iter().zip(rs) {
                    if *p != 0.0 {
                        row += p * floored_ln(*q);
                    }
                }
            }
            total -= inv_n * (w * row);
        }
    }
    Ok(total)
}

/// Component losses of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Parts {
    pub ori: f64,
    pub fea: f64,
    pub logit: f64,
}

/// Weight applied to the distillation terms at the configured epoch.
pub fn distill_scale(cfg: &DistillConfig) -> Result<f64> {
    if cfg.use_decay {
        decay_weight(cfg.t, cfg.t_max)
    } else {
        Ok(1.0)
    }
}

/// `L_ori + r(t) a L_fea + r(t) b L_logit`, each term gated by its flag.
/// With decay off `r(t)` is 1.
pub fn loss_stage1(parts: &Stage1Parts, cfg: &DistillConfig) -> Result<f64> {
    let r = distill_scale(cfg)?;
    let mut total = 0.0;
    if cfg.use_gt {
        total = parts.ori;
    }
    if cfg.use_fea {
        total += r * cfg.alpha * parts.fea;
    }
    if cfg.use_logit {
        total += r * cfg.beta * parts.logit;
    }
    Ok(total)
}

/// `gamma * L_logit` between the trained head and the fresh head.
pub fn loss_stage2(teacher: &[PoseProbs], student: &[PoseProbs], cfg: &DistillConfig) -> Result<f64> {
    Ok(cfg.gamma * loss_logit_kd(teacher, student)?)
}

/// Mean over rows of `KL(teacher || student)`.
pub fn mean_row_kl(teacher: &[PoseProbs], student: &[PoseProbs]) -> Result<f64> {
    check_batch("mean_row_kl", teacher, student.len())?;
    let mut total = 0.0;
    let mut rows = 0usize;
    for (t, s) in teacher.iter().zip(student) {
        let (t, s) = (t.inner(), s.inner());
        ensure!(t.same_shape(s), "teacher and student logits differ in shape");
        for (rt, rs) in
            t.x.chunks(t.bins_x)
                .zip(s.x.chunks(s.bins_x))
                .chain(t.y.chunks(t.bins_y).zip(s.y.chunks(s.bins_y)))
        {
            total += rt
                .iter()
                .zip(rs)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p.ln() - floored_ln(*q)))
                .sum::<f64>();
            rows += 1;
        }
    }
    Ok(if rows == 0 { 0.0 } else { total / rows as f64 })
}

/// Per-sample value and logit gradient of `-sum_i c_i log softmax(z / T)_i`
/// for one row, accumulated into `grad`. Returns the value.
fn weighted_ce_row(
    z: &[f64],
    coeff: impl Fn(usize) -> f64,
    temperature: f64,
    grad: &mut [f64],
    scratch: &mut Vec<f64>,
) -> f64 {
    scratch.resize(z.len(), 0.0);
    log_softmax(z, temperature, scratch);
    let floor = LOG_FLOOR.ln();
    let mut value = 0.0;
    let mut csum = 0.0;
    for (i, lp) in scratch.iter().enumerate() {
        let c = coeff(i);
        if c != 0.0 {
            value -= c * lp.max(floor);
            csum += c;
        }
    }
    if csum != 0.0 {
        for (i, (g, lp)) in grad.iter_mut().zip(scratch.iter()).enumerate() {
            *g += (csum * lp.exp() - coeff(i)) / temperature;
        }
    }
    value
}

/// Label-loss contribution of one sample and its gradient with respect to
/// the raw logits. `batch` is only used when normalizing uniformly.
pub fn original_term(
    logits: &PoseLogits,
    target: &SimCCTarget,
    weights: &[f64],
    temperature: f64,
    uniform_batch: Option<usize>,
) -> Result<(f64, PoseLogits)> {
    ensure!(
        logits.num_keypoints == target.num_keypoints
            && logits.bins_x == target.bins_x
            && logits.bins_y == target.bins_y
            && weights.len() == logits.num_keypoints,
        "logits, target and weights disagree in shape"
    );
    let batch_scale = uniform_batch.map_or(1.0, |n| 1.0 / n as f64);
    let mut grad = PoseLogits::zeros(logits.num_keypoints, logits.bins_x, logits.bins_y);
    let mut scratch = Vec::new();
    let mut value = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for axis in 0..2 {
            let (l, z, v, g) = if axis == 0 {
                let l = logits.bins_x;
                (l, logits.x_row(k), target.x_row(k), &mut grad.x[k * l..(k + 1) * l])
            } else {
                let l = logits.bins_y;
                (l, logits.y_row(k), target.y_row(k), &mut grad.y[k * l..(k + 1) * l])
            };
            let c = batch_scale * w / l as f64;
            value += weighted_ce_row(z, |i| c * v[i], temperature, g, &mut scratch);
        }
    }
    Ok((value, grad))
}

/// Logit-distillation contribution of one sample (already divided by the
/// batch size) and its gradient with respect to the student's raw logits.
pub fn logit_kd_term(
    teacher: &PoseProbs,
    student_logits: &PoseLogits,
    batch: usize,
    weights: Option<&[f64]>,
    temperature: f64,
    uniform: bool,
) -> Result<(f64, PoseLogits)> {
    let t = teacher.inner();
    ensure!(
        t.same_shape(student_logits),
        "teacher and student logits differ in shape"
    );
    if let Some(w) = weights {
        ensure!(w.len() == t.num_keypoints, "weight row has wrong keypoint count");
    }
    let inv_n = 1.0 / batch as f64;
    let mut grad = PoseLogits::zeros(t.num_keypoints, t.bins_x, t.bins_y);
    let mut scratch = Vec::new();
    let mut value = 0.0;
    for k in 0..t.num_keypoints {
        let w = weights.map_or(1.0, |w| w[k]);
        if w == 0.0 {
            continue;
        }
        for axis in 0..2 {
            let (l, z, p, g) = if axis == 0 {
                let l = t.bins_x;
                (l, student_logits.x_row(k), t.x_row(k), &mut grad.x[k * l..(k + 1) * l])
            } else {
                let l = t.bins_y;
                (l, student_logits.y_row(k), t.y_row(k), &mut grad.y[k * l..(k + 1) * l])
            };
            let c = if uniform { inv_n * w / l as f64 } else { inv_n * w };
            value += weighted_ce_row(z, |i| c * p[i], temperature, g, &mut scratch);
        }
    }
    Ok((value, grad))
}

//! Per-sample objectives with their parameter gradients.
//!
//! Every batch loss used in training decomposes into a sum of per-sample
//! contributions, so the trainers accumulate these one sample at a time.

use crate::data::Sample;
use crate::error::Result;
use crate::losses::{self, distill_scale, DistillConfig, Stage1Parts};
use crate::model::{ModelParams, Projection};
use crate::nn::axpy;
use crate::tensor::{FeatureMap, PoseLogits, PoseProbs};

/// Frozen teacher outputs for one sample.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    /// Feature at the teacher's distillation tap (present when feature
    /// distillation is on).
    pub feature: Option<FeatureMap>,
    pub probs: Option<PoseProbs>,
}

pub fn teacher_outputs(teacher: &ModelParams, sample: &Sample, cfg: &DistillConfig) -> Result<TeacherOutputs> {
    let cache = teacher.backbone.forward_cached(&sample.image)?;
    let probs = if cfg.use_logit {
        let (logits, _) = teacher.head.forward_cached(cache.feature())?;
        Some(logits.softmax(cfg.temperature))
    } else {
        None
    };
    let feature = cfg.use_fea.then(|| cache.stage(teacher.config.tap_index()).clone());
    Ok(TeacherOutputs { feature, probs })
}

/// Sample contribution to the first-stage loss: `(parts, total)`. `parts`
/// holds this sample's share of each batch-level component.
pub struct SampleLoss {
    pub parts: Stage1Parts,
    pub total: f64,
}

/// Accumulates the gradient of this sample's share of the first-stage loss
/// into `grads` / `proj_grads`. `teacher` may be `None` only when every
/// distillation term is off.
#[allow(clippy::too_many_arguments)]
pub fn stage1_sample(
    student: &ModelParams,
    proj: &Projection,
    teacher: Option<&TeacherOutputs>,
    sample: &Sample,
    cfg: &DistillConfig,
    batch: usize,
    grads: &mut ModelParams,
    proj_grads: &mut Projection,
) -> Result<SampleLoss> {
    let cache = student.backbone.forward_cached(&sample.image)?;
    let feat = cache.feature();
    let (logits, head_cache) = student.head.forward_cached(feat)?;
    let r = distill_scale(cfg)?;
    let uniform = cfg.normalize_uniformly;

    let mut parts = Stage1Parts::default();
    let mut dlogits: Option<PoseLogits> = None;
    if cfg.use_gt {
        let (v, g) = losses::original_term(
            &logits,
            &sample.target,
            &sample.weights,
            cfg.temperature,
            uniform.then_some(batch),
        )?;
        parts.ori = v;
        dlogits = Some(g);
    }
    if cfg.use_logit {
        let t = teacher
            .and_then(|t| t.probs.as_ref())
            .ok_or_else(|| crate::error::Error::Contract("logit distillation needs teacher outputs".into()))?;
        let mask = cfg.use_mask_in_kd.then_some(sample.weights.as_slice());
        let (v, g) = losses::logit_kd_term(t, &logits, batch, mask, cfg.temperature, uniform)?;
        parts.logit = v;
        let scale = r * cfg.beta;
        match dlogits.as_mut() {
            Some(d) => {
                axpy(scale, &g.x, &mut d.x);
                axpy(scale, &g.y, &mut d.y);
            }
            None => {
                let mut g = g;
                g.x.iter_mut().chain(g.y.iter_mut()).for_each(|v| *v *= scale);
                dlogits = Some(g);
            }
        }
    }

    let mut tap_seed: Option<Vec<f64>> = None;
    if cfg.use_fea {
        let t = teacher
            .and_then(|t| t.feature.as_ref())
            .ok_or_else(|| crate::error::Error::Contract("feature distillation needs teacher outputs".into()))?;
        let tap = cache.stage(student.config.tap_index());
        let projected = proj.forward(tap)?;
        let (v, g) = losses::feature_term(t, &projected, true)?;
        let inv_n = 1.0 / batch as f64;
        parts.fea = v * inv_n;
        let scale = r * cfg.alpha * inv_n;
        let g: Vec<f64> = g.iter().map(|x| x * scale).collect();
        tap_seed = proj.backward(tap, &g, proj_grads, true);
    }

    let total = losses::loss_stage1(&parts, cfg)?;

    let dfeat = match &dlogits {
        Some(d) => student.head.backward(feat, &head_cache, d, &mut grads.head, true),
        None => None,
    };
    let n_stages = student.backbone.stages.len();
    let tap = student.config.tap_index();
    let mut seeds: Vec<Option<&[f64]>> = vec![None; n_stages];
    seeds[n_stages - 1] = dfeat.as_deref();
    let merged;
    if let Some(ts) = tap_seed.as_deref() {
        seeds[tap] = match seeds[tap] {
            Some(existing) => {
                let mut m = existing.to_vec();
                axpy(1.0, ts, &mut m);
                merged = m;
                Some(merged.as_slice())
            }
            None => Some(ts),
        };
    }
    if seeds.iter().any(Option::is_some) {
        student.backbone.backward(&cache, &seeds, &mut grads.backbone, false);
    }
    Ok(SampleLoss { parts, total })
}

/// Second-stage contribution of one sample given its (frozen) backbone
/// feature: `gamma * L_logit` share, with head gradients accumulated into
/// `head_grads`.
pub fn stage2_sample(
    teacher_head: &crate::model::Head,
    student_head: &crate::model::Head,
    feature: &FeatureMap,
    cfg: &DistillConfig,
    batch: usize,
    head_grads: &mut crate::model::Head,
) -> Result<f64> {
    let (t_logits, _) = teacher_head.forward_cached(feature)?;
    let t = t_logits.softmax(cfg.temperature);
    let (s_logits, cache) = student_head.forward_cached(feature)?;
    let (v, mut g) = losses::logit_kd_term(&t, &s_logits, batch, None, cfg.temperature, cfg.normalize_uniformly)?;
    g.x.iter_mut().chain(g.y.iter_mut()).for_each(|x| *x *= cfg.gamma);
    student_head.backward(feature, &cache, &g, head_grads, false);
    Ok(cfg.gamma * v)
}

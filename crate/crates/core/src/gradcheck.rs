//! Finite-difference verification of the hand-written gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{self, DistillConfig};
use crate::model::{
    init_model, init_projection, reinit_head, Image, ModelConfig, ModelParams, NamedTensors, Projection,
};
use crate::objective::{stage1_sample, stage2_sample, teacher_outputs};
use crate::simcc::{encode, KeypointSet, PartGroup, SimCCConfig, VisibilityWeights};
use crate::tensor::{FeatureMap, PoseLogits, PoseProbs};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Keeps the ratio meaningful when both gradients are essentially zero.
const REL_FLOOR: f64 = 1e-6;

/// Seeds used by the standard suite.
pub const SUITE_SEEDS: [u64; 3] = [11, 22, 33];

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Parameter index of the worst disagreement.
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient returned by `f` at `params` with central
/// differences of its value, element by element.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut x = params.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x)?.0;
        x[i] = orig - eps;
        let down = f(&x)?.0;
        x[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("grad_check objective near parameter {i}")));
        }
        let rel = relative_error(analytic[i], (up - down) / (2.0 * eps));
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheck {
        max_relative_error: worst.0,
        worst_index: worst.1,
        checked: x.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub seed: u64,
    pub result: GradCheck,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.result.max_relative_error < TOLERANCE
    }
}

/// Every op covered by [`run_suite`].
pub const OPS: [&str; 12] = [
    "backbone_forward.params",
    "backbone_forward.input",
    "head_forward.params",
    "head_forward.feature",
    "project_features.params",
    "loss_feature",
    "loss_original",
    "loss_logit_kd",
    "loss_logit_kd_masked",
    "loss_stage1.student",
    "loss_stage1.tap",
    "loss_stage2.head",
];

fn student_config() -> ModelConfig {
    ModelConfig {
        backbone_channels: vec![3, 4],
        feature_dim: 5,
        head_hidden: 6,
        num_keypoints: 3,
        simcc: SimCCConfig {
            label_sigma: 1.5,
            ..SimCCConfig::new(8, 8)
        },
        init_seed: 0,
        distill_tap: None,
    }
}

fn teacher_config() -> ModelConfig {
    ModelConfig {
        backbone_channels: vec![4, 6],
        feature_dim: 7,
        head_hidden: 5,
        ..student_config()
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn random_image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Image {
    let (w, h) = (cfg.simcc.input_width, cfg.simcc.input_height);
    Image {
        width: w,
        height: h,
        data: (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect(),
    }
}

fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng, id: usize) -> Result<Sample> {
    let k = cfg.num_keypoints;
    let (w, h) = (cfg.simcc.input_width as f64, cfg.simcc.input_height as f64);
    let coords = (0..k)
        .map(|_| [rng.gen_range(0.0..w - 1.0), rng.gen_range(0.0..h - 1.0)])
        .collect();
    // Leave one keypoint unlabeled so masking is exercised.
    let visibility = (0..k).map(|i| if i == 0 { 0 } else { 2 }).collect();
    let keypoints = KeypointSet::new(coords, visibility, vec![PartGroup::Body; k])?;
    let (target, weights) = encode(&keypoints, &cfg.simcc)?;
    Ok(Sample {
        id: format!("gc{id}"),
        image: random_image(cfg, rng),
        keypoints,
        target,
        weights,
    })
}

fn random_logits(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> PoseLogits {
    let (k, lx, ly) = (cfg.num_keypoints, cfg.simcc.bins_x(), cfg.simcc.bins_y());
    PoseLogits {
        num_keypoints: k,
        bins_x: lx,
        bins_y: ly,
        x: uniform(rng, k * lx, 2.0),
        y: uniform(rng, k * ly, 2.0),
    }
}

fn logits_from(shape: &PoseLogits, flat: &[f64]) -> PoseLogits {
    let nx = shape.x.len();
    PoseLogits {
        x: flat[..nx].to_vec(),
        y: flat[nx..].to_vec(),
        ..shape.clone()
    }
}

fn flat_logits(l: &PoseLogits) -> Vec<f64> {
    l.x.iter().chain(&l.y).copied().collect()
}

/// Batch of logits laid out as one flat vector.
fn split_batch(shape: &PoseLogits, flat: &[f64]) -> Vec<PoseLogits> {
    let per = shape.x.len() + shape.y.len();
    flat.chunks(per).map(|c| logits_from(shape, c)).collect()
}

fn with_params<T: NamedTensors + Clone>(base: &T, flat: &[f64]) -> T {
    let mut p = base.clone();
    p.assign_flat(flat);
    p
}

struct Fixture {
    rng: ChaCha8Rng,
    scfg: ModelConfig,
    tcfg: ModelConfig,
    student: ModelParams,
    teacher: ModelParams,
}

impl Fixture {
    fn new(seed: u64) -> Result<Self> {
        let scfg = student_config();
        let tcfg = teacher_config();
        let mut student = init_model(&scfg, seed)?;
        // Non-zero biases so every bias gradient is exercised away from zero.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in student.named_mut() {
            if t.shape.len() == 1 {
                t.data = uniform(&mut rng, t.len(), 0.3);
            }
        }
        let teacher = init_model(&tcfg, seed.wrapping_add(1))?;
        Ok(Self {
            rng,
            scfg,
            tcfg,
            student,
            teacher,
        })
    }
}

fn check_op(op: &str, seed: u64, eps: f64, fault: f64) -> Result<GradCheck> {
    let mut fx = Fixture::new(seed)?;
    let corrupt = |mut g: Vec<f64>| {
        if fault != 1.0 {
            g.iter_mut().for_each(|v| *v *= fault);
        }
        g
    };
    match op {
        "backbone_forward.params" => {
            let image = random_image(&fx.scfg, &mut fx.rng);
            let (c, h, w) = fx.scfg.feature_shape();
            let coeff = uniform(&mut fx.rng, c * h * w, 1.0);
            let base = fx.student.backbone.clone();
            grad_check(
                |p| {
                    let b = with_params(&base, p);
                    let cache = b.forward_cached(&image)?;
                    let v = crate::nn::dot(&coeff, &cache.feature().data);
                    let mut g = b.zeros_like();
                    let mut seeds = vec![None; b.stages.len()];
                    seeds[b.stages.len() - 1] = Some(coeff.as_slice());
                    b.backward(&cache, &seeds, &mut g, false);
                    Ok((v, corrupt(g.flatten())))
                },
                &base.flatten(),
                eps,
            )
        }
        "backbone_forward.input" => {
            let image = random_image(&fx.scfg, &mut fx.rng);
            let (c, h, w) = fx.scfg.feature_shape();
            let coeff = uniform(&mut fx.rng, c * h * w, 1.0);
            let b = fx.student.backbone.clone();
            grad_check(
                |x| {
                    let img = Image {
                        data: x.to_vec(),
                        ..image.clone()
                    };
                    let cache = b.forward_cached(&img)?;
                    let v = crate::nn::dot(&coeff, &cache.feature().data);
                    let mut g = b.zeros_like();
                    let mut seeds = vec![None; b.stages.len()];
                    seeds[b.stages.len() - 1] = Some(coeff.as_slice());
                    let dx = b.backward(&cache, &seeds, &mut g, true).expect("requested");
                    Ok((v, corrupt(dx)))
                },
                &image.data,
                eps,
            )
        }
        "head_forward.params" | "head_forward.feature" => {
            let feat = crate::model::backbone_forward(&fx.student, &random_image(&fx.scfg, &mut fx.rng))?;
            let coeff = random_logits(&fx.scfg, &mut fx.rng);
            let base = fx.student.head.clone();
            let objective = |head: &crate::model::Head, feat: &FeatureMap| -> Result<(f64, Vec<f64>, Vec<f64>)> {
                let (logits, cache) = head.forward_cached(feat)?;
                let v = crate::nn::dot(&coeff.x, &logits.x) + crate::nn::dot(&coeff.y, &logits.y);
                let mut g = head.zeros_like();
                let df = head.backward(feat, &cache, &coeff, &mut g, true).expect("requested");
                Ok((v, g.flatten(), df))
            };
            if op == "head_forward.params" {
                grad_check(
                    |p| {
                        let (v, g, _) = objective(&with_params(&base, p), &feat)?;
                        Ok((v, corrupt(g)))
                    },
                    &base.flatten(),
                    eps,
                )
            } else {
                grad_check(
                    |x| {
                        let f = FeatureMap {
                            data: x.to_vec(),
                            ..feat.clone()
                        };
                        let (v, _, df) = objective(&base, &f)?;
                        Ok((v, corrupt(df)))
                    },
                    &feat.data,
                    eps,
                )
            }
        }
        "project_features.params" => {
            let feat = crate::model::backbone_forward(&fx.student, &random_image(&fx.scfg, &mut fx.rng))?;
            let mut base = init_projection(&fx.scfg, &fx.tcfg, seed)?;
            base.bias.data = uniform(&mut fx.rng, base.bias.len(), 0.3);
            let (ct, h, w) = fx.tcfg.feature_shape();
            let coeff = uniform(&mut fx.rng, ct * h * w, 1.0);
            grad_check(
                |p| {
                    let proj: Projection = with_params(&base, p);
                    let out = proj.forward(&feat)?;
                    let mut g = proj.zeros_like();
                    proj.backward(&feat, &coeff, &mut g, false);
                    Ok((crate::nn::dot(&coeff, &out.data), corrupt(g.flatten())))
                },
                &base.flatten(),
                eps,
            )
        }
        "loss_feature" => {
            let (c, h, w) = fx.tcfg.feature_shape();
            let teacher = FeatureMap::new(c, h, w, uniform(&mut fx.rng, c * h * w, 1.0))?;
            let student = uniform(&mut fx.rng, c * h * w, 1.0);
            grad_check(
                |x| {
                    let s = FeatureMap::new(c, h, w, x.to_vec())?;
                    let (v, g) = losses::feature_term(&teacher, &s, true)?;
                    Ok((v, corrupt(g)))
                },
                &student,
                eps,
            )
        }
        "loss_original" => {
            let batch: Vec<Sample> = (0..2)
                .map(|i| random_sample(&fx.scfg, &mut fx.rng, i))
                .collect::<Result<_>>()?;
            let shape = random_logits(&fx.scfg, &mut fx.rng);
            let start: Vec<f64> = (0..batch.len())
                .flat_map(|_| flat_logits(&random_logits(&fx.scfg, &mut fx.rng)))
                .collect();
            let targets: Vec<_> = batch.iter().map(|s| s.target.clone()).collect();
            let weights = VisibilityWeights::from_rows(&batch.iter().map(|s| s.weights.clone()).collect::<Vec<_>>())?;
            grad_check(
                |x| {
                    let logits = split_batch(&shape, x);
                    let probs: Vec<PoseProbs> = logits.iter().map(|l| l.softmax(1.0)).collect();
                    let v = losses::loss_original(&probs, &targets, &weights)?;
                    let mut g = Vec::new();
                    for (l, s) in logits.iter().zip(&batch) {
                        g.extend(flat_logits(
                            &losses::original_term(l, &s.target, &s.weights, 1.0, None)?.1,
                        ));
                    }
                    Ok((v, corrupt(g)))
                },
                &start,
                eps,
            )
        }
        "loss_logit_kd" | "loss_logit_kd_masked" => {
            let masked = op == "loss_logit_kd_masked";
            let n = 2;
            let teacher: Vec<PoseProbs> = (0..n)
                .map(|_| random_logits(&fx.scfg, &mut fx.rng).softmax(1.0))
                .collect();
            let shape = random_logits(&fx.scfg, &mut fx.rng);
            let start: Vec<f64> = (0..n)
                .flat_map(|_| flat_logits(&random_logits(&fx.scfg, &mut fx.rng)))
                .collect();
            let k = fx.scfg.num_keypoints;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..k).map(|j| if (i + j) % 3 == 0 { 0.0 } else { 1.0 }).collect())
                .collect();
            let weights = VisibilityWeights::from_rows(&rows)?;
            grad_check(
                |x| {
                    let logits = split_batch(&shape, x);
                    let probs: Vec<PoseProbs> = logits.iter().map(|l| l.softmax(1.0)).collect();
                    let v = if masked {
                        losses::loss_logit_kd_masked(&teacher, &probs, &weights)?
                    } else {
                        losses::loss_logit_kd(&teacher, &probs)?
                    };
                    let mut g = Vec::new();
                    for (i, (t, l)) in teacher.iter().zip(&logits).enumerate() {
                        let mask = masked.then(|| weights.row(i));
                        g.extend(flat_logits(&losses::logit_kd_term(t, l, n, mask, 1.0, false)?.1));
                    }
                    Ok((v, corrupt(g)))
                },
                &start,
                eps,
            )
        }
        "loss_stage1.student" | "loss_stage1.tap" => {
            let tap = op == "loss_stage1.tap";
            let (mut scfg, mut tcfg) = (fx.scfg.clone(), fx.tcfg.clone());
            if tap {
                scfg.distill_tap = Some(0);
                tcfg.distill_tap = Some(0);
            }
            let mut student = fx.student.clone();
            student.config = scfg.clone();
            let mut teacher = fx.teacher.clone();
            teacher.config = tcfg.clone();
            let mut proj = init_projection(&scfg, &tcfg, seed)?;
            proj.bias.data = uniform(&mut fx.rng, proj.bias.len(), 0.3);
            let batch: Vec<Sample> = (0..2)
                .map(|i| random_sample(&scfg, &mut fx.rng, i))
                .collect::<Result<_>>()?;
            // Large alpha so the feature term carries real weight in the check.
            let cfg = DistillConfig {
                alpha: 0.5,
                t: 2,
                t_max: 3,
                ..DistillConfig::default()
            };
            let touts = batch
                .iter()
                .map(|s| teacher_outputs(&teacher, s, &cfg))
                .collect::<Result<Vec<_>>>()?;
            let n_student = student.num_values();
            let mut start = student.flatten();
            start.extend(proj.flatten());
            grad_check(
                |x| {
                    let s = with_params(&student, &x[..n_student]);
                    let p = with_params(&proj, &x[n_student..]);
                    let mut gs = s.zeros_like();
                    let mut gp = p.zeros_like();
                    let mut total = 0.0;
                    for (sample, t) in batch.iter().zip(&touts) {
                        total += stage1_sample(&s, &p, Some(t), sample, &cfg, batch.len(), &mut gs, &mut gp)?.total;
                    }
                    let mut g = gs.flatten();
                    g.extend(gp.flatten());
                    Ok((total, corrupt(g)))
                },
                &start,
                eps,
            )
        }
        "loss_stage2.head" => {
            let feats: Vec<FeatureMap> = (0..2)
                .map(|_| crate::model::backbone_forward(&fx.student, &random_image(&fx.scfg, &mut fx.rng)))
                .collect::<Result<_>>()?;
            let fresh = reinit_head(&fx.student, seed.wrapping_add(7)).head;
            let cfg = DistillConfig {
                gamma: 1.3,
                ..DistillConfig::default()
            };
            let teacher_head = fx.student.head.clone();
            grad_check(
                |p| {
                    let h = with_params(&fresh, p);
                    let mut g = h.zeros_like();
                    let mut total = 0.0;
                    for f in &feats {
                        total += stage2_sample(&teacher_head, &h, f, &cfg, feats.len(), &mut g)?;
                    }
                    Ok((total, corrupt(g.flatten())))
                },
                &fresh.flatten(),
                eps,
            )
        }
        other => Err(Error::InvalidInput(format!("unknown gradcheck op {other:?}"))),
    }
}

/// Runs every op in [`OPS`] at each seed. `fault` names an op whose
/// analytic gradient is scaled by 1.01 before comparison.
pub fn run_suite(seeds: &[u64], fault: Option<&str>) -> Result<Vec<OpCheck>> {
    if let Some(f) = fault {
        if !OPS.contains(&f) {
            return Err(Error::InvalidInput(format!("unknown gradcheck op {f:?}")));
        }
    }
    let mut out = Vec::new();
    for op in OPS {
        for &seed in seeds {
            let scale = if fault == Some(op) { 1.01 } else { 1.0 };
            out.push(OpCheck {
                op,
                seed,
                result: check_op(op, seed, DEFAULT_EPS, scale)?,
            });
        }
    }
    Ok(out)
}

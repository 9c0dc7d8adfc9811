//! Trainers: label-only training, first-stage distillation and second-stage
//! head self-distillation.

mod optim;
mod record;

pub use optim::{LrSchedule, Optimizer, OptimizerConfig};
pub use record::{EpochEval, EpochLog, RunKind, RunRecord, RunStatus};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, TrainingSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, GroupSigmas};
use crate::losses::{decay_weight, mean_row_kl, DistillConfig};
use crate::model::{init_model, init_projection, predict, reinit_head, Head, ModelParams, NamedTensors};
use crate::nn::Tensor;
use crate::objective::{stage1_sample, stage2_sample, teacher_outputs, TeacherOutputs};
use crate::simcc::{decode, KeypointSet};
use crate::tensor::{FeatureMap, PoseProbs};

const SHUFFLE_STREAM: u64 = 7;
/// Added to the run seed to draw the fresh second-stage head.
const STAGE2_HEAD_SEED_OFFSET: u64 = 0x5EED;

fn default_stage2_fraction() -> f64 {
    0.2
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_schedule")]
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Second-stage budget as a fraction of `epochs`.
    #[serde(default = "default_stage2_fraction")]
    pub stage2_fraction: f64,
    /// Learning rate for the second stage; defaults to `learning_rate`.
    #[serde(default)]
    pub stage2_learning_rate: Option<f64>,
    /// Batch size for the second stage; defaults to `batch_size`.
    #[serde(default)]
    pub stage2_batch_size: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    /// Evaluate every this many epochs; defaults to `max(1, epochs / 10)`.
    #[serde(default)]
    pub eval_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate,
            lr_schedule: LrSchedule::Constant,
            seed,
            stage2_fraction: 0.2,
            stage2_learning_rate: None,
            stage2_batch_size: None,
            optimizer: OptimizerConfig::default(),
            distill: DistillConfig::default(),
            eval_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.stage2_fraction > 0.0 && self.stage2_fraction.is_finite()) {
            return Err(Error::Config("stage2_fraction must be positive".into()));
        }
        if matches!(self.stage2_learning_rate, Some(lr) if !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("stage2_learning_rate must be positive".into()));
        }
        if self.stage2_batch_size == Some(0) {
            return Err(Error::Config("stage2_batch_size must be >= 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Second-stage epochs: `max(1, round(stage2_fraction * epochs))`.
    pub fn stage2_epochs(&self) -> usize {
        ((self.stage2_fraction * self.epochs as f64).round() as usize).max(1)
    }

    fn eval_every(&self, epochs: usize) -> usize {
        self.eval_every.unwrap_or((epochs / 10).max(1))
    }
}

fn is_eval_epoch(epoch: usize, epochs: usize, every: usize) -> bool {
    epoch.is_multiple_of(every) || epoch == epochs
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    rng
}

/// Keypoint predictions for `samples`, carrying over the ground-truth
/// visibility and groups so metrics see the same labeled set.
pub fn predict_keypoints(params: &ModelParams, samples: &[Sample]) -> Result<Vec<KeypointSet>> {
    samples
        .iter()
        .map(|s| {
            let decoded = decode(&predict(params, &s.image)?, &params.config.simcc)?;
            Ok(KeypointSet {
                coords: decoded.coords,
                visibility: s.keypoints.visibility.clone(),
                part_group: s.keypoints.part_group.clone(),
            })
        })
        .collect()
}

pub fn evaluate_model(params: &ModelParams, samples: &[Sample], split: &str) -> Result<EvalReport> {
    let preds = predict_keypoints(params, samples)?;
    let gts: Vec<KeypointSet> = samples.iter().map(|s| s.keypoints.clone()).collect();
    evaluate(&preds, &gts, split, &GroupSigmas::default())
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, step, loss })
    }
}

fn params_finite(named: &[(String, &Tensor)]) -> Result<()> {
    match named.iter().find(|(_, t)| t.data.iter().any(|v| !v.is_finite())) {
        Some((name, _)) => Err(Error::NonFinite(name.clone())),
        None => Ok(()),
    }
}

fn loss_keys(cfg: &DistillConfig) -> Vec<&'static str> {
    let mut keys = Vec::new();
    if cfg.use_gt {
        keys.push("ori");
    }
    if cfg.use_fea {
        keys.push("fea");
    }
    if cfg.use_logit {
        keys.push("logit");
    }
    keys
}

/// Trains a model with the first-stage objective. With every distillation
/// term off this is plain label training and `teacher` is ignored.
pub fn train_stage1(
    name: &str,
    model_cfg: &crate::model::ModelConfig,
    teacher: Option<&ModelParams>,
    train_cfg: &TrainConfig,
    data: &TrainingSet,
) -> Result<(ModelParams, RunRecord)> {
    let start = Instant::now();
    train_cfg.validate()?;
    model_cfg.validate()?;
    let mut dcfg = train_cfg.distill.clone();
    dcfg.t_max = train_cfg.epochs;
    dcfg.t = 1;
    dcfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation splits must be non-empty".into(),
        ));
    }
    if !dcfg.use_gt && !dcfg.any_distillation() {
        return Err(Error::Config("every loss term is disabled".into()));
    }
    let distilling = dcfg.any_distillation();
    let teacher = match (distilling, teacher) {
        (true, None) => {
            return Err(Error::Config(
                "distillation terms are enabled but no teacher was given".into(),
            ))
        }
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };

    let kind = if distilling { RunKind::Stage1 } else { RunKind::Scratch };
    let config = serde_json::json!({
        "model": model_cfg,
        "train": train_cfg,
        "teacher": teacher.map(|t| &t.config),
    });
    let eval_split = format!("val@{}", data.fingerprint);
    let mut record = RunRecord::new(name, kind, train_cfg.seed, config, eval_split.clone());

    let mut student = init_model(model_cfg, train_cfg.seed)?;
    let mut proj = match teacher {
        Some(t) if dcfg.use_fea => init_projection(model_cfg, &t.config, train_cfg.seed)?,
        _ => init_projection(model_cfg, model_cfg, train_cfg.seed)?,
    };
    // The teacher is frozen, so its outputs are computed once per sample.
    let cached: Vec<TeacherOutputs> = match teacher {
        Some(t) => data
            .train
            .iter()
            .map(|s| teacher_outputs(t, s, &dcfg))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let mut grads = student.zeros_like();
    let mut proj_grads = proj.zeros_like();
    let mut opt = Optimizer::new(train_cfg.optimizer);
    let mut rng = shuffle_rng(train_cfg.seed);
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(train_cfg.batch_size);
    let total_steps = steps_per_epoch * train_cfg.epochs;
    let every = train_cfg.eval_every(train_cfg.epochs);
    let keys = loss_keys(&dcfg);
    let mut step = 0;

    for epoch in 1..=train_cfg.epochs {
        dcfg.t = epoch;
        let r_t = if dcfg.use_decay {
            decay_weight(epoch, train_cfg.epochs)?
        } else {
            1.0
        };
        let mut sums = [0.0f64; 4];
        let order = batches(n, train_cfg.batch_size, &mut rng);
        for batch in &order {
            grads.zero_grad();
            proj_grads.zero_grad();
            let mut batch_sums = [0.0f64; 4];
            for &i in batch {
                let t = teacher.map(|_| &cached[i]);
                let l = stage1_sample(
                    &student,
                    &proj,
                    t,
                    &data.train[i],
                    &dcfg,
                    batch.len(),
                    &mut grads,
                    &mut proj_grads,
                )?;
                batch_sums[0] += l.parts.ori;
                batch_sums[1] += l.parts.fea;
                batch_sums[2] += l.parts.logit;
                batch_sums[3] += l.total;
            }
            check_finite(batch_sums[3], epoch, step)?;
            let lr = train_cfg.lr_schedule.at(train_cfg.learning_rate, step, total_steps);
            {
                let mut ps: Vec<&mut Tensor> = student.named_mut().into_iter().map(|(_, t)| t).collect();
                let mut gs: Vec<&Tensor> = grads.named().into_iter().map(|(_, t)| t).collect();
                if dcfg.use_fea {
                    ps.extend(proj.named_mut().into_iter().map(|(_, t)| t));
                    gs.extend(proj_grads.named().into_iter().map(|(_, t)| t));
                }
                opt.step(&mut ps, &gs, lr);
            }
            for (s, b) in sums.iter_mut().zip(batch_sums) {
                *s += b;
            }
            step += 1;
        }
        params_finite(&student.named())?;

        let mut losses = BTreeMap::new();
        let nb = order.len() as f64;
        for (key, idx) in [("ori", 0), ("fea", 1), ("logit", 2)] {
            if keys.contains(&key) {
                losses.insert(key.to_string(), sums[idx] / nb);
            }
        }
        losses.insert("total".to_string(), sums[3] / nb);
        let eval = if is_eval_epoch(epoch, train_cfg.epochs, every) {
            Some(EpochEval {
                pck_whole: evaluate_model(&student, &data.val, &eval_split)?.headline(),
                kl: None,
            })
        } else {
            None
        };
        record.epochs.push(EpochLog {
            epoch,
            r_t,
            losses,
            eval,
        });
    }

    record.final_metrics = Some(evaluate_model(&student, &data.val, &eval_split)?);
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((student, record))
}

/// Label-only training from scratch.
pub fn train_scratch(
    name: &str,
    model_cfg: &crate::model::ModelConfig,
    train_cfg: &TrainConfig,
    data: &TrainingSet,
) -> Result<(ModelParams, RunRecord)> {
    let mut cfg = train_cfg.clone();
    cfg.distill = DistillConfig::gt_only();
    train_stage1(name, model_cfg, None, &cfg, data)
}

/// Outcome of a second-stage run.
pub struct Stage2Outcome {
    pub params: ModelParams,
    pub record: RunRecord,
    /// Backbone forward passes made while training (one per step).
    pub backbone_calls: usize,
    pub steps: usize,
}

fn features(params: &ModelParams, samples: &[Sample]) -> Result<Vec<FeatureMap>> {
    samples
        .iter()
        .map(|s| Ok(params.backbone.forward_cached(&s.image)?.into_feature()))
        .collect()
}

fn head_probs(head: &Head, feats: &[FeatureMap], temperature: f64) -> Result<Vec<PoseProbs>> {
    feats
        .iter()
        .map(|f| Ok(head.forward_cached(f)?.0.softmax(temperature)))
        .collect()
}

/// Self-distills a trained model into a freshly initialized head on its
/// frozen backbone. Only the head is updated; no labels are used.
pub fn distill_stage2(
    name: &str,
    trained: &ModelParams,
    train_cfg: &TrainConfig,
    data: &TrainingSet,
) -> Result<Stage2Outcome> {
    let start = Instant::now();
    train_cfg.validate()?;
    let epochs = train_cfg.stage2_epochs();
    let mut dcfg = train_cfg.distill.clone();
    dcfg.t = 1;
    dcfg.t_max = epochs;
    dcfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let lr_base = train_cfg.stage2_learning_rate.unwrap_or(train_cfg.learning_rate);
    let eval_split = format!("val@{}", data.fingerprint);
    let config = serde_json::json!({
        "model": trained.config,
        "train": train_cfg,
        "stage2_epochs": epochs,
    });
    let mut record = RunRecord::new(name, RunKind::Stage2, train_cfg.seed, config, eval_split.clone());

    let teacher_head = &trained.head;
    let mut student = reinit_head(trained, train_cfg.seed.wrapping_add(STAGE2_HEAD_SEED_OFFSET));
    let mut grads = student.head.zeros_like();
    let mut opt = Optimizer::new(train_cfg.optimizer);
    let mut rng = shuffle_rng(train_cfg.seed.wrapping_add(STAGE2_HEAD_SEED_OFFSET));
    let n = data.train.len();
    let batch_size = train_cfg.stage2_batch_size.unwrap_or(train_cfg.batch_size);
    let total_steps = n.div_ceil(batch_size) * epochs;
    let every = train_cfg.eval_every(epochs);

    let val_feats = features(trained, &data.val)?;
    let val_teacher = head_probs(teacher_head, &val_feats, dcfg.temperature)?;

    let mut backbone_calls = 0;
    let mut step = 0;
    for epoch in 1..=epochs {
        let order = batches(n, batch_size, &mut rng);
        let mut sum = 0.0;
        for batch in &order {
            // One batched backbone pass per step.
            backbone_calls += 1;
            let feats: Vec<FeatureMap> = batch
                .iter()
                .map(|&i| Ok(trained.backbone.forward_cached(&data.train[i].image)?.into_feature()))
                .collect::<Result<_>>()?;
            grads.zero_grad();
            let mut batch_loss = 0.0;
            for f in &feats {
                batch_loss += stage2_sample(teacher_head, &student.head, f, &dcfg, batch.len(), &mut grads)?;
            }
            check_finite(batch_loss, epoch, step)?;
            let lr = train_cfg.lr_schedule.at(lr_base, step, total_steps);
            let mut ps: Vec<&mut Tensor> = student.head.named_mut().into_iter().map(|(_, t)| t).collect();
            let gs: Vec<&Tensor> = grads.named().into_iter().map(|(_, t)| t).collect();
            opt.step(&mut ps, &gs, lr);
            sum += batch_loss;
            step += 1;
        }
        params_finite(&student.head.named())?;
        let eval = if is_eval_epoch(epoch, epochs, every) {
            let s = head_probs(&student.head, &val_feats, dcfg.temperature)?;
            Some(EpochEval {
                pck_whole: evaluate_model(&student, &data.val, &eval_split)?.headline(),
                kl: Some(mean_row_kl(&val_teacher, &s)?),
            })
        } else {
            None
        };
        record.epochs.push(EpochLog {
            epoch,
            r_t: 1.0,
            losses: [
                ("logit".to_string(), sum / order.len() as f64),
                ("total".to_string(), sum / order.len() as f64),
            ]
            .into(),
            eval,
        });
    }
    record.final_metrics = Some(evaluate_model(&student, &data.val, &eval_split)?);
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(Stage2Outcome {
        params: student,
        record,
        backbone_calls,
        steps: step,
    })
}

/// Mean row KL between two heads on the frozen features of `samples`.
pub fn head_kl(reference: &Head, other: &Head, feats: &[FeatureMap], temperature: f64) -> Result<f64> {
    mean_row_kl(
        &head_probs(reference, feats, temperature)?,
        &head_probs(other, feats, temperature)?,
    )
}

/// Backbone features for every sample.
pub fn backbone_features(params: &ModelParams, samples: &[Sample]) -> Result<Vec<FeatureMap>> {
    features(params, samples)
}

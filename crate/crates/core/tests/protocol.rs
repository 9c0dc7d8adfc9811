//! Training-protocol invariants of both distillation stages.

use posedistill::data::{GenConfig, TrainingSet};
use posedistill::losses::{loss_logit_kd, loss_logit_kd_masked, DistillConfig};
use posedistill::model::{init_model, ModelConfig, ModelParams, NamedTensors};
use posedistill::simcc::{SimCCConfig, VisibilityWeights};
use posedistill::tensor::PoseLogits;
use posedistill::train::{distill_stage2, train_scratch, train_stage1, OptimizerConfig, TrainConfig};

fn simcc() -> SimCCConfig {
    SimCCConfig {
        label_sigma: 2.0,
        ..SimCCConfig::new(32, 32)
    }
}

fn data() -> TrainingSet {
    let gen = GenConfig {
        image_size: 32,
        ..GenConfig::new(0, 11)
    };
    TrainingSet::synthesize(&gen, 24, 8, &simcc()).unwrap()
}

fn model(channels: &[usize], fd: usize) -> ModelConfig {
    ModelConfig {
        backbone_channels: channels.to_vec(),
        feature_dim: fd,
        head_hidden: 8,
        num_keypoints: GenConfig::new(0, 0).num_keypoints(),
        simcc: simcc(),
        init_seed: 0,
        distill_tap: None,
    }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    let mut tc = TrainConfig::new(epochs, 8, 0.01, 3);
    tc.optimizer = OptimizerConfig::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    tc
}

fn bits(t: &impl NamedTensors) -> Vec<u64> {
    t.flatten().iter().map(|v| v.to_bits()).collect()
}

fn teacher(data: &TrainingSet) -> ModelParams {
    train_scratch("teacher", &model(&[4, 8], 8), &train_cfg(2), data)
        .unwrap()
        .0
}

#[test]
fn stage1_leaves_teacher_bit_identical() {
    let data = data();
    let t = teacher(&data);
    let before = bits(&t.backbone).into_iter().chain(bits(&t.head)).collect::<Vec<_>>();
    let mut tc = train_cfg(2);
    tc.distill = DistillConfig {
        alpha: 0.1,
        beta: 1.0,
        ..DistillConfig::default()
    };
    let (student, _) = train_stage1("s", &model(&[2, 4], 4), Some(&t), &tc, &data).unwrap();
    let after = bits(&t.backbone).into_iter().chain(bits(&t.head)).collect::<Vec<_>>();
    assert_eq!(before, after);
    assert_ne!(
        bits(&student.head),
        bits(&init_model(&student.config, tc.seed).unwrap().head)
    );
}

#[test]
fn stage1_with_every_distillation_term_off_is_scratch_training() {
    let data = data();
    let t = teacher(&data);
    let mut tc = train_cfg(3);
    tc.distill = DistillConfig::gt_only();
    let cfg = model(&[2, 4], 4);
    let (a, ra) = train_stage1("x", &cfg, Some(&t), &tc, &data).unwrap();
    let (b, rb) = train_scratch("x", &cfg, &tc, &data).unwrap();
    assert_eq!(bits(&a.backbone), bits(&b.backbone));
    assert_eq!(bits(&a.head), bits(&b.head));
    assert_eq!(ra.epochs, rb.epochs);
    assert_eq!(ra.final_metrics, rb.final_metrics);
}

#[test]
fn stage2_freezes_backbone_and_counts_one_backbone_pass_per_step() {
    let data = data();
    let (trained, _) = train_scratch("base", &model(&[2, 4], 4), &train_cfg(6), &data).unwrap();
    for (epochs, fraction, want) in [(6, 0.2, 1), (10, 0.2, 2), (12, 0.2, 2), (13, 0.2, 3), (4, 0.5, 2)] {
        let mut tc = train_cfg(epochs);
        tc.stage2_fraction = fraction;
        let out = distill_stage2("s2", &trained, &tc, &data).unwrap();
        assert_eq!(bits(&out.params.backbone), bits(&trained.backbone));
        assert_ne!(bits(&out.params.head), bits(&trained.head));
        assert_eq!(out.record.epochs.len(), want, "epochs {epochs} fraction {fraction}");
        let steps_per_epoch = data.train.len().div_ceil(tc.batch_size);
        assert_eq!(out.steps, want * steps_per_epoch);
        assert_eq!(out.backbone_calls, out.steps);
    }
}

#[test]
fn stage2_kl_falls_over_the_first_evaluations() {
    let data = data();
    let (trained, _) = train_scratch("base", &model(&[2, 4], 4), &train_cfg(4), &data).unwrap();
    let mut tc = train_cfg(25);
    tc.stage2_learning_rate = Some(0.02);
    tc.eval_every = Some(1);
    let out = distill_stage2("s2", &trained, &tc, &data).unwrap();
    let kl: Vec<f64> = out.record.epochs.iter().filter_map(|e| e.eval.as_ref()?.kl).collect();
    assert_eq!(kl.len(), 5);
    assert!(kl.windows(2).all(|w| w[1] < w[0]), "{kl:?}");
}

#[test]
fn masked_kd_with_all_ones_mask_is_the_unmasked_loss() {
    let (k, lx, ly) = (3, 5, 4);
    let logits = |shift: f64| {
        let x: Vec<f64> = (0..k * lx).map(|i| ((i as f64 + shift) * 0.37).sin()).collect();
        let y: Vec<f64> = (0..k * ly).map(|i| ((i as f64 - shift) * 0.53).cos()).collect();
        PoseLogits::new(k, lx, ly, x, y).unwrap().softmax(1.0)
    };
    let t = vec![logits(0.0), logits(1.0)];
    let s = vec![logits(2.5), logits(-1.5)];
    let plain = loss_logit_kd(&t, &s).unwrap();
    let masked = loss_logit_kd_masked(&t, &s, &VisibilityWeights::ones(2, k)).unwrap();
    assert_eq!(plain.to_bits(), masked.to_bits());
}

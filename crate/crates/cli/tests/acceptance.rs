//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The ablation replays train real models and take tens of minutes on one
//! core. Set `ACCEPTANCE_OUT` to keep their outputs (and resume them on the
//! next invocation); otherwise they go to a temporary directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use posedistill::data::{GenConfig, TrainingSet};
use posedistill::eval::{compare_runs, oks_ap, pck, GroupScores, GroupSigmas, RunSummary, PCK_THRESHOLDS};
use posedistill::experiment::{run_experiment, ExperimentSpec, RunOptions};
use posedistill::losses::{
    decay_weight, loss_feature, loss_logit_kd, loss_logit_kd_masked, loss_original, loss_stage1, DistillConfig,
    Stage1Parts,
};
use posedistill::model::{ModelConfig, NamedTensors};
use posedistill::simcc::{decode, encode, KeypointSet, PartGroup, SimCCConfig, SimCCTarget, VisibilityWeights};
use posedistill::tensor::{FeatureMap, PoseLogits, PoseProbs};
use posedistill::train::{distill_stage2, train_scratch, train_stage1, OptimizerConfig, RunRecord, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_posedistill"));
    c.env_remove("POSEDISTILL_OUT");
    c
}

// ---------------------------------------------------------------- 1

fn probs(x: &[f64], y: &[f64], k: usize) -> PoseProbs {
    PoseProbs::from_rows(k, x.len() / k, y.len() / k, x.to_vec(), y.to_vec()).unwrap()
}

fn loss_oracles() -> Outcome {
    let fm = |d: &[f64]| FeatureMap::new(1, 2, 2, d.to_vec()).unwrap();
    let fea = loss_feature(&fm(&[1.0, 0.0, 0.0, 1.0]), &fm(&[0.0; 4])).map_err(err)?;

    let half = probs(&[0.5, 0.5], &[1.0, 0.0], 1);
    let onehot = probs(&[1.0, 0.0], &[1.0, 0.0], 1);
    let logit = loss_logit_kd(&[onehot], &[half]).map_err(err)?;

    let target = SimCCTarget {
        num_keypoints: 1,
        bins_x: 2,
        bins_y: 2,
        x_labels: vec![1.0, 0.0],
        y_labels: vec![0.0, 0.0],
    };
    let uniform = probs(&[0.5, 0.5], &[0.5, 0.5], 1);
    let ori = loss_original(&[uniform], &[target], &VisibilityWeights::ones(1, 1)).map_err(err)?;

    let parts = Stage1Parts {
        ori: 1.0,
        fea: 100.0,
        logit: 2.0,
    };
    let cfg = DistillConfig {
        t: 1,
        t_max: 10,
        ..DistillConfig::default()
    };
    let s1 = loss_stage1(&parts, &cfg).map_err(err)?;

    let cases = [
        ("loss_feature", fea, 0.5),
        ("loss_logit_kd", logit, std::f64::consts::LN_2),
        ("loss_original", ori, 0.5 * std::f64::consts::LN_2),
        ("L_s1", s1, 1.205),
    ];
    let worst = cases
        .iter()
        .map(|(_, got, want)| (got - want).abs())
        .fold(0.0, f64::max);
    let detail = cases
        .iter()
        .map(|(n, got, _)| format!("{n}={got:.9}"))
        .collect::<Vec<_>>()
        .join(" ");
    check(worst < 1e-9, format!("{detail}, max abs err {worst:.1e}"))
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let out = bin().arg("gradcheck").output().map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let ops = stdout
        .lines()
        .filter(|l| l.starts_with("ok") || l.starts_with("FAIL"))
        .count();
    let failed = stdout.lines().filter(|l| l.starts_with("FAIL")).count();
    let worst = stdout
        .lines()
        .find(|l| l.starts_with("worst"))
        .unwrap_or("")
        .to_string();
    check(
        out.status.success() && failed == 0 && ops >= 8 && secs < 60.0,
        format!("{ops} ops, {failed} failed, {worst}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 3

fn schedule() -> Outcome {
    for t_max in 1..=200 {
        let r = |t| decay_weight(t, t_max).map_err(err);
        if r(1)? != 1.0 || r(t_max)? != 1.0 / t_max as f64 {
            return Err(format!("endpoints wrong at t_max={t_max}"));
        }
        for t in 2..=t_max {
            if r(t)? >= r(t - 1)? {
                return Err(format!("not decreasing at t={t}, t_max={t_max}"));
            }
        }
    }
    Ok("r(1)=1, r(t_max)=1/t_max, strictly decreasing for t_max in 1..=200".into())
}

// ---------------------------------------------------------------- 4, 5

fn small_data() -> TrainingSet {
    let gen = GenConfig {
        image_size: 32,
        ..GenConfig::new(0, 11)
    };
    TrainingSet::synthesize(&gen, 24, 8, &small_simcc()).unwrap()
}

fn small_simcc() -> SimCCConfig {
    SimCCConfig {
        label_sigma: 2.0,
        ..SimCCConfig::new(32, 32)
    }
}

fn small_model(channels: &[usize], fd: usize) -> ModelConfig {
    ModelConfig {
        backbone_channels: channels.to_vec(),
        feature_dim: fd,
        head_hidden: 8,
        num_keypoints: GenConfig::new(0, 0).num_keypoints(),
        simcc: small_simcc(),
        init_seed: 0,
        distill_tap: None,
    }
}

fn small_train(epochs: usize) -> TrainConfig {
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

fn protocol() -> Outcome {
    let data = small_data();
    let (teacher, _) = train_scratch("teacher", &small_model(&[4, 8], 8), &small_train(2), &data).map_err(err)?;
    let before: Vec<u64> = bits(&teacher.backbone).into_iter().chain(bits(&teacher.head)).collect();
    let mut tc = small_train(2);
    tc.distill = DistillConfig {
        alpha: 0.1,
        beta: 1.0,
        ..DistillConfig::default()
    };
    train_stage1("s", &small_model(&[2, 4], 4), Some(&teacher), &tc, &data).map_err(err)?;
    let after: Vec<u64> = bits(&teacher.backbone).into_iter().chain(bits(&teacher.head)).collect();
    if before != after {
        return Err("stage 1 modified the teacher".into());
    }

    let (trained, _) = train_scratch("base", &small_model(&[2, 4], 4), &small_train(3), &data).map_err(err)?;
    let mut budgets = Vec::new();
    for epochs in [3, 5, 10, 13] {
        let out = distill_stage2("s2", &trained, &small_train(epochs), &data).map_err(err)?;
        let want = ((0.2 * epochs as f64).round() as usize).max(1);
        if bits(&out.params.backbone) != bits(&trained.backbone) {
            return Err("stage 2 modified the backbone".into());
        }
        if out.record.epochs.len() != want {
            return Err(format!(
                "{epochs} epochs: stage 2 ran {} epochs, want {want}",
                out.record.epochs.len()
            ));
        }
        if out.backbone_calls != out.steps || out.steps != want * data.train.len().div_ceil(8) {
            return Err(format!("{} backbone calls for {} steps", out.backbone_calls, out.steps));
        }
        budgets.push(format!("{epochs}->{want}"));
    }
    Ok(format!(
        "teacher bit-identical; backbone bit-identical; stage-2 epochs {}; one backbone call per step",
        budgets.join(" ")
    ))
}

fn equivalence() -> Outcome {
    let data = small_data();
    let (teacher, _) = train_scratch("teacher", &small_model(&[4, 8], 8), &small_train(2), &data).map_err(err)?;
    let mut tc = small_train(3);
    tc.distill = DistillConfig::gt_only();
    let cfg = small_model(&[2, 4], 4);
    let (a, ra) = train_stage1("x", &cfg, Some(&teacher), &tc, &data).map_err(err)?;
    let (b, rb) = train_scratch("x", &cfg, &tc, &data).map_err(err)?;
    let same_train = bits(&a.backbone) == bits(&b.backbone)
        && bits(&a.head) == bits(&b.head)
        && ra.epochs == rb.epochs
        && ra.final_metrics == rb.final_metrics;

    let (k, lx, ly) = (3, 5, 4);
    let dist = |shift: f64| {
        let x: Vec<f64> = (0..k * lx).map(|i| ((i as f64 + shift) * 0.37).sin()).collect();
        let y: Vec<f64> = (0..k * ly).map(|i| ((i as f64 - shift) * 0.53).cos()).collect();
        PoseLogits::new(k, lx, ly, x, y).unwrap().softmax(1.0)
    };
    let t = vec![dist(0.0), dist(1.0)];
    let s = vec![dist(2.5), dist(-1.5)];
    let plain = loss_logit_kd(&t, &s).map_err(err)?;
    let masked = loss_logit_kd_masked(&t, &s, &VisibilityWeights::ones(2, k)).map_err(err)?;
    check(
        same_train && plain.to_bits() == masked.to_bits(),
        format!(
            "flags-off stage 1 == scratch: {same_train}; all-ones masked KD == KD: {}",
            plain.to_bits() == masked.to_bits()
        ),
    )
}

// ---------------------------------------------------------------- 6-9

struct Replay {
    medians: BTreeMap<String, f64>,
    records: Vec<(String, u64, RunRecord)>,
    secs: f64,
}

fn replay(name: &str, out_root: &Path, teacher: Option<PathBuf>) -> Result<Replay, String> {
    let spec = ExperimentSpec::load(&repo().join("specs").join(format!("{name}.spec"))).map_err(err)?;
    let mut opts = RunOptions::new(out_root.join(name));
    opts.teacher_checkpoint = teacher;
    let start = Instant::now();
    let outcome = run_experiment(&spec, &opts).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    if let Some(f) = outcome.failed.first() {
        return Err(format!("{}/seed-{} failed: {}", f.arm, f.seed, f.reason));
    }
    let mut by_arm: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (arm, _, record) in &outcome.records {
        by_arm.entry(arm.clone()).or_default().push(
            record
                .final_pck()
                .ok_or_else(|| format!("{arm} has no final metrics"))?,
        );
    }
    let medians = by_arm.into_iter().map(|(arm, v)| (arm, median(v))).collect();
    Ok(Replay {
        medians,
        records: outcome.records,
        secs,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn pts(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn table6(r: &Result<Replay, String>) -> Outcome {
    let r = r.as_ref().map_err(|e| e.clone())?;
    let m = |arm: &str| r.medians.get(arm).copied().ok_or(format!("no arm {arm}"));
    let (gt, fea, logit, full) = (m("gt")?, m("fea")?, m("logit")?, m("decay")?);
    let gap = 100.0 * (full - gt);
    check(
        gt <= fea && fea <= full && gap >= 0.5 && r.secs < 1800.0,
        format!(
            "median PCK@0.1 gt {} fea {} logit {} full {}; full-gt {gap:+.2} pts; {:.0}s",
            pts(gt),
            pts(fea),
            pts(logit),
            pts(full),
            r.secs
        ),
    )
}

fn table7(r: &Result<Replay, String>) -> Outcome {
    let r = r.as_ref().map_err(|e| e.clone())?;
    let m = |arm: &str| r.medians.get(arm).copied().ok_or(format!("no arm {arm}"));
    let (unmasked, masked) = (m("unmasked")?, m("masked")?);
    check(
        unmasked > masked,
        format!("median PCK@0.1 unmasked {} masked {}", pts(unmasked), pts(masked)),
    )
}

fn table8(r: &Result<Replay, String>) -> Outcome {
    let r = r.as_ref().map_err(|e| e.clone())?;
    let m = |arm: &str| r.medians.get(arm).copied().ok_or(format!("no arm {arm}"));
    let (base, s2) = (m("scratch")?, m("s2")?);
    let epochs = |arm: &str| {
        r.records
            .iter()
            .filter(|x| x.0 == arm)
            .map(|x| x.2.epochs.len())
            .max()
            .unwrap_or(0)
    };
    let (e_base, e_s2) = (epochs("scratch"), epochs("s2"));
    check(
        s2 >= base && 5 * e_s2 <= e_base,
        format!(
            "median PCK@0.1 scratch {} s2 {} ({:+.2} pts); stage 2 used {e_s2}/{e_base} epochs",
            pts(base),
            pts(s2),
            100.0 * (s2 - base)
        ),
    )
}

fn stage2_convergence(r: &Result<Replay, String>) -> Outcome {
    let r = r.as_ref().map_err(|e| e.clone())?;
    let kls: Vec<f64> = r
        .records
        .iter()
        .filter(|x| x.0 == "s2")
        .map(|x| {
            x.2.epochs
                .last()
                .and_then(|e| e.eval.as_ref()?.kl)
                .ok_or("missing final KL")
        })
        .collect::<Result<_, _>>()?;
    let worst = kls.iter().copied().fold(0.0, f64::max);
    check(
        !kls.is_empty() && worst < 0.05,
        format!(
            "final val KL per seed {:?}",
            kls.iter().map(|k| format!("{k:.4}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn codec() -> Outcome {
    let cfg = SimCCConfig::new(64, 64);
    let bound = 1.0 / (2.0 * cfg.split_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = [rng.gen_range(0.0..63.0), rng.gen_range(0.0..63.0)];
        let kps = KeypointSet::new(vec![p], vec![2], vec![PartGroup::Body]).map_err(err)?;
        let (target, _) = encode(&kps, &cfg).map_err(err)?;
        let d = decode(&target.as_logits(), &cfg).map_err(err)?;
        worst = worst
            .max((d.coords[0][0] - p[0]).abs())
            .max((d.coords[0][1] - p[1]).abs());
    }
    check(
        worst <= bound + 1e-12,
        format!("max error {worst:.4} px, bound {bound} px"),
    )
}

// ---------------------------------------------------------------- 11

const PARTS: [PartGroup; 4] = [PartGroup::Body, PartGroup::Foot, PartGroup::Face, PartGroup::Hand];

fn fixture(seed: u64) -> (Vec<KeypointSet>, Vec<KeypointSet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<PartGroup> = (0..12).map(|k| PARTS[k % 4]).collect();
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..20 {
        let gt: Vec<[f64; 2]> = (0..12)
            .map(|_| [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)])
            .collect();
        let vis: Vec<u8> = (0..12).map(|_| rng.gen_range(0..3u8)).collect();
        let s = rng.gen_range(0.0..8.0);
        let pred = gt
            .iter()
            .map(|c| [c[0] + rng.gen_range(-s..s), c[1] + rng.gen_range(-s..s)])
            .collect();
        gts.push(KeypointSet::new(gt, vis, groups.clone()).unwrap());
        preds.push(KeypointSet::new(pred, vec![2; 12], groups.clone()).unwrap());
    }
    (preds, gts)
}

/// Per instance: (diagonal of the labeled keypoints, [(k, distance)]) for one group.
fn instances(preds: &[KeypointSet], gts: &[KeypointSet], group: Option<PartGroup>) -> Vec<(f64, Vec<(usize, f64)>)> {
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let all: Vec<usize> = (0..12).filter(|&k| g.visibility[k] > 0).collect();
            let span = |a: usize| {
                let v = all.iter().map(|&k| g.coords[k][a]);
                v.clone().fold(f64::MIN, f64::max) - v.fold(f64::MAX, f64::min)
            };
            let diag = if all.is_empty() { 0.0 } else { span(0).hypot(span(1)) };
            let ks = all
                .into_iter()
                .filter(|&k| group.is_none_or(|want| g.part_group[k] == want))
                .map(|k| {
                    (
                        k,
                        (p.coords[k][0] - g.coords[k][0]).hypot(p.coords[k][1] - g.coords[k][1]),
                    )
                })
                .collect();
            (diag, ks)
        })
        .collect()
}

fn brute_pck(preds: &[KeypointSet], gts: &[KeypointSet], tau: f64, group: Option<PartGroup>) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (diag, ks) in instances(preds, gts, group) {
        for (_, d) in ks {
            total += 1;
            hit += usize::from(d <= tau * diag);
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

fn brute_ap(preds: &[KeypointSet], gts: &[KeypointSet], sigmas: &GroupSigmas, group: Option<PartGroup>) -> f64 {
    let oks: Vec<f64> = instances(preds, gts, group)
        .into_iter()
        .filter(|(_, ks)| !ks.is_empty())
        .map(|(diag, ks)| {
            let n = ks.len() as f64;
            ks.into_iter()
                .map(|(k, d)| {
                    let s = sigmas.of(PARTS[k % 4]) * diag;
                    (-d * d / (2.0 * s * s)).exp()
                })
                .sum::<f64>()
                / n
        })
        .collect();
    if oks.is_empty() {
        return 0.0;
    }
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    thresholds
        .iter()
        .map(|t| oks.iter().filter(|o| **o >= *t - 1e-12).count() as f64 / oks.len() as f64)
        .sum::<f64>()
        / thresholds.len() as f64
}

fn metrics() -> Outcome {
    let sigmas = GroupSigmas::default();
    let groups: Vec<Option<PartGroup>> = std::iter::once(None).chain(PARTS.map(Some)).collect();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let (preds, gts) = fixture(seed);
        for tau in PCK_THRESHOLDS {
            let got = pck(&preds, &gts, tau).map_err(err)?;
            for &g in &groups {
                worst = worst.max((got.get(g) - brute_pck(&preds, &gts, tau, g)).abs());
            }
        }
        let got = oks_ap(&preds, &gts, &sigmas).map_err(err)?;
        for &g in &groups {
            worst = worst.max((got.get(g) - brute_ap(&preds, &gts, &sigmas, g)).abs());
        }
    }
    let summary = |name: &str, whole: f64| RunSummary {
        name: name.into(),
        eval_split: "val".into(),
        pck: GroupScores {
            whole,
            ..Default::default()
        },
        ap: GroupScores::default(),
    };
    let table = compare_runs(&[
        summary("GT", 60.4),
        summary("Fea", 61.8),
        summary("Logit", 62.0),
        summary("Decay", 62.3),
    ])
    .map_err(err)?;
    let order = table.names();
    check(
        worst < 1e-12 && order == ["Decay", "Logit", "Fea", "GT"],
        format!("max deviation from recount {worst:.1e}; ranking {order:?}"),
    )
}

// ---------------------------------------------------------------- 12

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "timing.json") {
                files.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    files
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let spec = repo().join("specs/smoke.spec");
    let run = |args: &[&str]| -> Result<Vec<u8>, String> {
        let out = bin().args(args).output().map_err(err)?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
        Ok(out.stdout)
    };
    let mut snaps = Vec::new();
    for copy in ["a", "b"] {
        let out = dir.path().join(copy);
        run(&[
            "ablate",
            "--config",
            spec.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])?;
        snaps.push(snapshot(&out));
    }
    let same_runs = snaps[0] == snaps[1];
    let a = dir.path().join("a");
    let ckpt = a.join("runs/full/seed-1/model.ckpt");
    let eval = || {
        run(&[
            "eval",
            "--config",
            spec.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            a.join("eval.json").to_str().unwrap(),
            "--force",
        ])
    };
    let same_eval = eval()? == eval()?;
    let report = || run(&["report", "--out", a.to_str().unwrap()]);
    let same_report = report()? == report()?;
    check(
        same_runs && same_eval && same_report,
        format!(
            "{} files identical across reruns: {same_runs}; eval: {same_eval}; report: {same_report}",
            snaps[0].len()
        ),
    )
}

fn main() {
    let keep = std::env::var_os("ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());

    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "loss-value oracles", loss_oracles()),
        (2, "gradient suite", gradient_suite()),
        (3, "decay schedule", schedule()),
        (4, "protocol invariants", protocol()),
        (5, "equivalence", equivalence()),
    ];
    let t6 = replay("table6", &root, None);
    let teacher = root.join("table6/teacher/model.ckpt");
    let t7 = replay("table7", &root, teacher.exists().then_some(teacher));
    let t8 = replay("table8", &root, None);
    results.extend([
        (6, "first-stage component replay", table6(&t6)),
        (7, "target-weight mask replay", table7(&t7)),
        (8, "second-stage replay", table8(&t8)),
        (9, "second-stage convergence", stage2_convergence(&t8)),
        (10, "codec round trip", codec()),
        (11, "metric oracles", metrics()),
        (12, "determinism", determinism()),
    ]);

    let mut failed = 0;
    for (n, name, outcome) in &results {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag}  {name}: {detail}");
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

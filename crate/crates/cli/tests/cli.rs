//! Exit codes and artifacts of the command-line verbs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use posedistill::train::RunRecord;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_posedistill"));
    c.env_remove("POSEDISTILL_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs/smoke.spec")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// The smoke spec with one edit applied, written next to `dir`.
fn edited_spec(dir: &Path, from: &str, to: &str) -> PathBuf {
    let spec = std::fs::read_to_string(smoke()).unwrap();
    assert!(spec.contains(from));
    let path = dir.join("edited.spec");
    std::fs::write(&path, spec.replacen(from, to, 1)).unwrap();
    path
}

#[test]
fn gen_succeeds_then_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let spec = smoke();
    let args = [
        "gen",
        "--config",
        spec.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    let first = run(&args);
    assert_eq!(code(&first), 0, "{}", text(&first.stderr));
    assert!(text(&first.stdout).contains("manifest"));
    assert!(out.join("manifest").exists());
    assert_eq!(code(&run(&args)), 3);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&run(&forced)), 0);
}

#[test]
fn missing_seed_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let spec = edited_spec(dir.path(), "image_size = 32\nseed = 7\n", "image_size = 32\n");
    let o = run(&[
        "gen",
        "--config",
        spec.to_str().unwrap(),
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("seed"), "{}", text(&o.stderr));
}

#[test]
fn unknown_fields_and_bad_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let spec = edited_spec(dir.path(), "num_samples = 60", "num_sample = 60");
    let o = run(&[
        "ablate",
        "--config",
        spec.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("num_sample"));
    let spec = edited_spec(dir.path(), "epochs = 5", "epochs = 0");
    let o = run(&[
        "ablate",
        "--config",
        spec.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["ablate", "--config", "/nonexistent.spec"])), 1);
}

#[test]
fn gradcheck_passes_and_detects_an_injected_fault() {
    let ok = run(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", text(&ok.stdout));
    let stdout = text(&ok.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("ok")).count() >= 8, "{stdout}");
    assert!(stdout.contains("worst:"));

    let bad = run(&["gradcheck", "--fault", "loss_feature"]);
    assert_eq!(code(&bad), 1);
    let stdout = text(&bad.stdout);
    let line = stdout.lines().find(|l| l.starts_with("FAIL")).expect("a failing op");
    assert!(line.contains("loss_feature"), "{line}");
}

#[test]
fn ablate_eval_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("smoke");
    let o = run(&[
        "ablate",
        "--config",
        smoke().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    for arm in ["gt", "full", "s2"] {
        for seed in [1, 2] {
            let r = RunRecord::read(&out.join(format!("runs/{arm}/seed-{seed}/record.jsonl"))).unwrap();
            assert!(r.final_metrics.is_some());
        }
    }
    let ranking = std::fs::read_to_string(out.join("ranking.txt")).unwrap();
    let rep = run(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&rep), 0);
    assert_eq!(text(&rep.stdout), ranking);

    let ckpt = out.join("runs/full/seed-1/model.ckpt");
    let spec = smoke();
    let eval = |extra: &[&str]| {
        let mut args = vec![
            "eval",
            "--config",
            spec.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        bin().env("POSEDISTILL_OUT", dir.path()).args(&args).output().unwrap()
    };
    let a = eval(&[]);
    assert_eq!(code(&a), 0, "{}", text(&a.stderr));
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["pck"].as_object().unwrap().len(), 3);
    for scores in report["pck"].as_object().unwrap().values().chain([&report["ap"]]) {
        assert_eq!(scores.as_object().unwrap().len(), 5);
    }
    assert_eq!(a.stdout, eval(&[]).stdout);
    assert_eq!(code(&eval(&["--split", "test"])), 0);
    assert_eq!(code(&eval(&["--split", "holdout"])), 2);

    let other_k = edited_spec(dir.path(), "seed = 7\n", "seed = 7\nnum_face = 2\n");
    let other_k = std::fs::read_to_string(&other_k)
        .unwrap()
        .replace("num_keypoints = 23", "num_keypoints = 21");
    let spec = dir.path().join("k21.spec");
    std::fs::write(&spec, other_k).unwrap();
    let o = run(&[
        "eval",
        "--config",
        spec.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", text(&o.stderr));
}

#[test]
fn stage2_only_run_on_a_checkpoint_uses_a_fifth_of_the_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = run(&[
        "train",
        "--config",
        smoke().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&teacher), 0, "{}", text(&teacher.stderr));
    assert_eq!(
        code(&run(&[
            "train",
            "--config",
            smoke().to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap()
        ])),
        3
    );
    let spec = edited_spec(dir.path(), "epochs = 5", "epochs = 10");
    let spec_text = std::fs::read_to_string(&spec).unwrap();
    let no_s2 = spec_text[..spec_text.find("[[arms]]\nname = \"s2\"").unwrap()].to_string();
    std::fs::write(&spec, no_s2).unwrap();
    let ckpt = dir.path().join("teacher/model.ckpt");
    let o = run(&[
        "distill-s2",
        "--config",
        spec.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        dir.path().join("s2").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    for seed in [1, 2] {
        let r = RunRecord::read(&dir.path().join(format!("s2/runs/stage2/seed-{seed}/record.jsonl"))).unwrap();
        assert_eq!(r.epochs.len(), 2);
    }
    let none = run(&[
        "distill-s2",
        "--config",
        spec.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&none), 2);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env("POSEDISTILL_OUT", dir.path())
        .args(["gen", "--config", smoke().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(dir.path().join("smoke/data/manifest").exists());
}

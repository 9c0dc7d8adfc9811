//! Experiment specs and the arm x seed runner behind the CLI.
//!
//! Output layout under `<out>/`:
//!
//! ```text
//! spec.toml                         echo of the spec that produced the runs
//! teacher/model.ckpt, record.jsonl  label-trained teacher (when needed)
//! runs/<arm>/seed-<s>/record.jsonl  one RunRecord per (arm, seed)
//! runs/<arm>/seed-<s>/model.ckpt    trained parameters
//! runs/<arm>/seed-<s>/losses.svg    loss components and r(t) per epoch
//! runs/<arm>/seed-<s>/timing.json   wall-clock seconds (kept out of the record)
//! ranking.txt, ranking.csv          per-arm medians ranked by whole PCK@0.1
//! pck_groups.svg                    per-group PCK@0.1 bars
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{generate_dataset, read_manifest, GenConfig, TrainingSet};
use crate::error::{Error, Result};
use crate::eval::{compare_runs, GroupScores, RankingTable, RunSummary};
use crate::losses::DistillConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::plot;
use crate::train::{distill_stage2, train_scratch, train_stage1, RunRecord, RunStatus, TrainConfig};

pub const RECORD_FILE: &str = "record.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Existing dataset directory (relative paths resolve against the spec file).
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Generator settings; the dataset is rendered into `<out>/data` when `path` is absent.
    #[serde(default)]
    pub gen: Option<GenConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub model: ModelConfig,
    /// Training settings for the teacher; defaults to the spec's `train`.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Use a trained teacher instead of training one.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

/// One ablation arm. Flags left unset keep the value from `train.distill`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    #[serde(default)]
    pub use_gt: Option<bool>,
    #[serde(default)]
    pub use_fea: Option<bool>,
    #[serde(default)]
    pub use_logit: Option<bool>,
    #[serde(default)]
    pub use_decay: Option<bool>,
    #[serde(default)]
    pub use_mask_in_kd: Option<bool>,
    /// Run second-stage distillation on the models of this (earlier) arm.
    #[serde(default)]
    pub stage2_from: Option<String>,
    /// Run second-stage distillation on this trained checkpoint.
    #[serde(default)]
    pub stage2_checkpoint: Option<PathBuf>,
}

impl ArmSpec {
    pub fn is_stage2(&self) -> bool {
        self.stage2_from.is_some() || self.stage2_checkpoint.is_some()
    }

    pub fn distill(&self, base: &DistillConfig) -> DistillConfig {
        let mut d = base.clone();
        let set = |dst: &mut bool, v: Option<bool>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut d.use_gt, self.use_gt);
        set(&mut d.use_fea, self.use_fea);
        set(&mut d.use_logit, self.use_logit);
        set(&mut d.use_decay, self.use_decay);
        set(&mut d.use_mask_in_kd, self.use_mask_in_kd);
        d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    pub data: DataSpec,
    #[serde(default)]
    pub teacher: Option<TeacherSpec>,
    pub student: ModelConfig,
    /// Student training settings; `seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    pub arms: Vec<ArmSpec>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = spec.data.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = spec.teacher.as_mut().and_then(|t| t.checkpoint.as_mut()) {
            resolve(p);
        }
        for arm in &mut spec.arms {
            if let Some(p) = arm.stage2_checkpoint.as_mut() {
                resolve(p);
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return cfg("seeds must not be empty".into());
        }
        if self.arms.is_empty() {
            return cfg("at least one arm is required".into());
        }
        if self.data.path.is_none() && self.data.gen.is_none() {
            return cfg("data needs either `path` or `gen`".into());
        }
        self.train.validate()?;
        self.student.validate()?;
        if let Some(gen) = &self.data.gen {
            gen.validate()?;
            if gen.image_size != self.student.simcc.input_width || gen.image_size != self.student.simcc.input_height {
                return cfg(format!(
                    "student input is {}x{} but the generator renders {}px images",
                    self.student.simcc.input_width, self.student.simcc.input_height, gen.image_size
                ));
            }
            if gen.num_keypoints() != self.student.num_keypoints {
                return cfg(format!(
                    "student predicts {} keypoints but the generator produces {}",
                    self.student.num_keypoints,
                    gen.num_keypoints()
                ));
            }
        }
        if let Some(t) = &self.teacher {
            t.model.validate()?;
            if let Some(tc) = &t.train {
                tc.validate()?;
            }
            if t.model.num_keypoints != self.student.num_keypoints || t.model.simcc != self.student.simcc {
                return cfg("teacher and student must share keypoints and the coordinate codec".into());
            }
        }
        let mut seen: Vec<&str> = Vec::new();
        for arm in &self.arms {
            if arm.name.is_empty() || arm.name.contains(['/', '\\']) || arm.name.starts_with('.') {
                return cfg(format!("arm name {:?} is not a valid directory name", arm.name));
            }
            if seen.contains(&arm.name.as_str()) {
                return cfg(format!("duplicate arm name {:?}", arm.name));
            }
            if arm.stage2_from.is_some() && arm.stage2_checkpoint.is_some() {
                return cfg(format!(
                    "arm {}: set only one of stage2_from and stage2_checkpoint",
                    arm.name
                ));
            }
            if let Some(src) = &arm.stage2_from {
                if !seen.contains(&src.as_str()) {
                    return cfg(format!(
                        "arm {}: stage2_from {src:?} must name an earlier arm",
                        arm.name
                    ));
                }
            }
            if !arm.is_stage2() {
                let d = arm.distill(&self.train.distill);
                if !d.use_gt && !d.any_distillation() {
                    return cfg(format!("arm {}: every loss term is disabled", arm.name));
                }
                if d.any_distillation() && self.teacher.is_none() {
                    return cfg(format!("arm {} distills but the spec has no [teacher]", arm.name));
                }
            }
            seen.push(&arm.name);
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.arms
            .iter()
            .any(|a| !a.is_stage2() && a.distill(&self.train.distill).any_distillation())
    }

    pub fn teacher_train_config(&self) -> Option<TrainConfig> {
        let t = self.teacher.as_ref()?;
        let mut tc = t.train.clone().unwrap_or_else(|| self.train.clone());
        tc.distill = DistillConfig::gt_only();
        Some(tc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

/// Which arms a command runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArmFilter {
    All,
    Stage1,
    Stage2,
}

impl ArmFilter {
    fn admits(self, arm: &ArmSpec) -> bool {
        match self {
            ArmFilter::All => true,
            ArmFilter::Stage1 => !arm.is_stage2(),
            ArmFilter::Stage2 => arm.is_stage2(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Discard existing records instead of resuming.
    pub force: bool,
    pub filter: ArmFilter,
    /// Teacher checkpoint overriding the spec.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Checkpoint for second-stage arms, overriding `stage2_from` / `stage2_checkpoint`.
    pub stage2_checkpoint: Option<PathBuf>,
    /// Worker threads for the seeds of one arm.
    pub jobs: usize,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            force: false,
            filter: ArmFilter::All,
            teacher_checkpoint: None,
            stage2_checkpoint: None,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FailedRun {
    pub arm: String,
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<(String, u64, RunRecord)>,
    pub failed: Vec<FailedRun>,
    /// (arm, seed) pairs skipped because a completed record already existed.
    pub resumed: usize,
    pub ranking: Option<RankingTable>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn run_dir(out: &Path, arm: &str, seed: u64) -> PathBuf {
    out.join("runs").join(arm).join(format!("seed-{seed}"))
}

/// Loads the spec's dataset, generating it under `<out>/data` if needed.
pub fn prepare_data(spec: &ExperimentSpec, out: &Path) -> Result<TrainingSet> {
    let root = match (&spec.data.path, &spec.data.gen) {
        (Some(p), _) => p.clone(),
        (None, Some(gen)) => {
            let root = out.join("data");
            if root.join(crate::data::MANIFEST_FILE).exists() {
                let m = read_manifest(&root)?;
                if &m.generator != gen {
                    return Err(Error::Refused(format!(
                        "{} holds a dataset from different generator settings",
                        root.display()
                    )));
                }
            } else {
                generate_dataset(gen, &root, true)?;
            }
            root
        }
        (None, None) => return Err(Error::Config("data needs either `path` or `gen`".into())),
    };
    let data = TrainingSet::load(&root, &spec.student.simcc)?;
    if let Some(s) = data.train.first() {
        if s.keypoints.len() != spec.student.num_keypoints {
            return Err(Error::Config(format!(
                "dataset has {} keypoints, student predicts {}",
                s.keypoints.len(),
                spec.student.num_keypoints
            )));
        }
    }
    Ok(data)
}

fn load_completed(dir: &Path) -> Option<(RunRecord, ModelParams)> {
    let record = RunRecord::read(&dir.join(RECORD_FILE)).ok()?;
    if record.status != RunStatus::Completed {
        return None;
    }
    let params = checkpoint::load(&dir.join(CHECKPOINT_FILE)).ok()?;
    Some((record, params))
}

fn save_run(dir: &Path, record: &RunRecord, params: Option<&ModelParams>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(p) = params {
        checkpoint::save(p, &dir.join(CHECKPOINT_FILE))?;
        plot::plot_run(record, &dir.join("losses.svg"))?;
    }
    write_file(
        &dir.join("timing.json"),
        format!("{{\"wall_clock_secs\": {:.3}}}\n", record.wall_clock_secs),
    )?;
    // Written last: its presence marks the run as complete.
    record.write(&dir.join(RECORD_FILE))
}

/// Trains (or loads) the spec's teacher into `<out>/teacher`.
pub fn obtain_teacher(spec: &ExperimentSpec, opts: &RunOptions, data: &TrainingSet) -> Result<ModelParams> {
    let t = spec
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Config("spec has no [teacher]".into()))?;
    let from_ckpt = opts.teacher_checkpoint.as_ref().or(t.checkpoint.as_ref());
    let params = if let Some(path) = from_ckpt {
        checkpoint::load(path)?
    } else {
        let dir = opts.out.join("teacher");
        match load_completed(&dir).filter(|_| !opts.force) {
            Some((_, p)) => p,
            None => {
                let tc = spec.teacher_train_config().expect("teacher present");
                let (p, record) = train_scratch("teacher", &t.model, &tc, data)?;
                save_run(&dir, &record, Some(&p))?;
                p
            }
        }
    };
    if params.config.num_keypoints != spec.student.num_keypoints || params.config.simcc != spec.student.simcc {
        return Err(Error::Config(
            "teacher checkpoint disagrees with the student on keypoints or codec".into(),
        ));
    }
    Ok(params)
}

#[allow(clippy::large_enum_variant)]
enum Job<'a> {
    Stage1 { teacher: Option<&'a ModelParams> },
    Stage2 { source: ModelParams },
}

fn run_one(
    spec: &ExperimentSpec,
    arm: &ArmSpec,
    seed: u64,
    job: Job<'_>,
    data: &TrainingSet,
) -> Result<(RunRecord, ModelParams)> {
    let mut tc = spec.train.clone();
    tc.seed = seed;
    tc.distill = arm.distill(&spec.train.distill);
    match job {
        Job::Stage1 { teacher } => train_stage1(&arm.name, &spec.student, teacher, &tc, data).map(|(p, r)| (r, p)),
        Job::Stage2 { source } => {
            let o = distill_stage2(&arm.name, &source, &tc, data)?;
            Ok((o.record, o.params))
        }
    }
}

fn failed_record(arm: &ArmSpec, seed: u64, reason: &str, fingerprint: &str) -> RunRecord {
    let kind = if arm.is_stage2() {
        crate::train::RunKind::Stage2
    } else {
        crate::train::RunKind::Stage1
    };
    let mut r = RunRecord::new(
        &arm.name,
        kind,
        seed,
        serde_json::json!({ "arm": arm }),
        format!("val@{fingerprint}"),
    );
    r.status = RunStatus::Failed {
        reason: reason.to_string(),
    };
    r
}

/// Runs every admitted (arm, seed) pair, resuming from completed records,
/// then ranks per-arm medians and writes the report files.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<ExperimentOutcome> {
    spec.validate()?;
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    write_file(&opts.out.join("spec.toml"), spec.to_toml())?;
    let data = prepare_data(spec, &opts.out)?;

    let wants_teacher = spec.needs_teacher() && matches!(opts.filter, ArmFilter::All | ArmFilter::Stage1);
    let teacher = if wants_teacher {
        Some(obtain_teacher(spec, opts, &data)?)
    } else {
        None
    };

    let mut outcome = ExperimentOutcome {
        records: Vec::new(),
        failed: Vec::new(),
        resumed: 0,
        ranking: None,
    };
    // Trained parameters per (arm, seed), for arms feeding second-stage arms.
    let mut models: BTreeMap<(String, u64), ModelParams> = BTreeMap::new();
    let override_source = match &opts.stage2_checkpoint {
        Some(p) => Some(checkpoint::load(p)?),
        None => None,
    };

    for arm in &spec.arms {
        let feeds_later = spec
            .arms
            .iter()
            .any(|a| a.stage2_from.as_deref() == Some(arm.name.as_str()));
        let run_here = opts.filter.admits(arm);
        if !run_here && !feeds_later {
            continue;
        }
        let fixed_source = match (&override_source, &arm.stage2_checkpoint) {
            (Some(p), _) if arm.is_stage2() => Some(p.clone()),
            (_, Some(path)) => Some(checkpoint::load(path)?),
            _ => None,
        };

        let mut pending = Vec::new();
        for &seed in &spec.seeds {
            let dir = run_dir(&opts.out, &arm.name, seed);
            if !opts.force {
                if let Some((record, params)) = load_completed(&dir) {
                    outcome.resumed += 1;
                    if feeds_later {
                        models.insert((arm.name.clone(), seed), params);
                    }
                    if run_here {
                        outcome.records.push((arm.name.clone(), seed, record));
                    }
                    continue;
                }
            }
            if !run_here {
                continue;
            }
            pending.push(seed);
        }

        let results: Vec<(u64, Result<(RunRecord, ModelParams)>)> = run_seeds(&pending, opts.jobs, |seed| {
            let job = if arm.is_stage2() {
                let source = match (&fixed_source, &arm.stage2_from) {
                    (Some(p), _) => p.clone(),
                    (None, Some(src)) => models.get(&(src.clone(), seed)).cloned().ok_or_else(|| {
                        Error::Contract(format!("source arm {src} has no trained model for seed {seed}"))
                    })?,
                    (None, None) => unreachable!("stage-2 arm without a source"),
                };
                Job::Stage2 { source }
            } else {
                Job::Stage1 {
                    teacher: teacher.as_ref(),
                }
            };
            run_one(spec, arm, seed, job, &data)
        });

        for (seed, result) in results {
            let dir = run_dir(&opts.out, &arm.name, seed);
            match result {
                Ok((record, params)) => {
                    save_run(&dir, &record, Some(&params))?;
                    if feeds_later {
                        models.insert((arm.name.clone(), seed), params);
                    }
                    outcome.records.push((arm.name.clone(), seed, record));
                }
                Err(e) => {
                    let record = failed_record(arm, seed, &e.to_string(), &data.fingerprint);
                    save_run(&dir, &record, None)?;
                    outcome.failed.push(FailedRun {
                        arm: arm.name.clone(),
                        seed,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }

    outcome.records.sort_by(|a, b| {
        let pos = |name: &str| spec.arms.iter().position(|x| x.name == name);
        (pos(&a.0), a.1).cmp(&(pos(&b.0), b.1))
    });
    let arm_order: Vec<&str> = spec.arms.iter().map(|a| a.name.as_str()).collect();
    outcome.ranking = write_report(&opts.out, &arm_order, outcome.records.iter().map(|(_, _, r)| r))?;
    Ok(outcome)
}

fn run_seeds<F>(seeds: &[u64], jobs: usize, f: F) -> Vec<(u64, Result<(RunRecord, ModelParams)>)>
where
    F: Fn(u64) -> Result<(RunRecord, ModelParams)> + Sync,
{
    if jobs <= 1 || seeds.len() <= 1 {
        return seeds.iter().map(|&s| (s, f(s))).collect();
    }
    let f = &f;
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(jobs) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|&s| (s, scope.spawn(move || f(s)))).collect();
            for (s, h) in handles {
                out.push((s, h.join().expect("worker panicked")));
            }
        });
    }
    out
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

fn median_scores(all: &[GroupScores]) -> GroupScores {
    let pick = |f: fn(&GroupScores) -> f64| median(all.iter().map(f).collect());
    GroupScores {
        whole: pick(|g| g.whole),
        body: pick(|g| g.body),
        foot: pick(|g| g.foot),
        face: pick(|g| g.face),
        hand: pick(|g| g.hand),
    }
}

/// Per-arm median over seeds of each reported score.
pub fn median_summaries<'a>(arm_order: &[&str], records: impl Iterator<Item = &'a RunRecord>) -> Vec<RunSummary> {
    let mut by_arm: BTreeMap<&str, Vec<RunSummary>> = BTreeMap::new();
    for r in records {
        if let Some(s) = r.summary() {
            by_arm
                .entry(arm_order.iter().find(|a| **a == r.name).copied().unwrap_or(""))
                .or_default()
                .push(s);
        }
    }
    arm_order
        .iter()
        .filter_map(|arm| {
            let runs = by_arm.get(arm)?;
            Some(RunSummary {
                name: arm.to_string(),
                eval_split: runs[0].eval_split.clone(),
                pck: median_scores(&runs.iter().map(|r| r.pck).collect::<Vec<_>>()),
                ap: median_scores(&runs.iter().map(|r| r.ap).collect::<Vec<_>>()),
            })
        })
        .collect()
}

/// Writes `ranking.txt`, `ranking.csv` and `pck_groups.svg` for the given
/// records; the first arm in `arm_order` with results is the baseline.
pub fn write_report<'a>(
    out: &Path,
    arm_order: &[&str],
    records: impl Iterator<Item = &'a RunRecord>,
) -> Result<Option<RankingTable>> {
    let summaries = median_summaries(arm_order, records);
    if summaries.is_empty() {
        return Ok(None);
    }
    let table = compare_runs(&summaries)?;
    write_file(&out.join("ranking.txt"), table.to_text())?;
    write_file(&out.join("ranking.csv"), table.to_csv())?;
    plot::plot_group_pck(&table, &out.join("pck_groups.svg"))?;
    Ok(Some(table))
}

/// Reads every completed record under `<out>/runs` and rewrites the report.
/// Arms are ordered as in `<out>/spec.toml` when present, else by name.
pub fn report(out: &Path) -> Result<Option<RankingTable>> {
    let runs = out.join("runs");
    let mut records = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    for arm_dir in read_dir(&runs)? {
        for seed_dir in read_dir(&arm_dir)? {
            let path = seed_dir.join(RECORD_FILE);
            if !path.exists() {
                continue;
            }
            let r = RunRecord::read(&path)?;
            if r.status == RunStatus::Completed {
                if !names.contains(&r.name) {
                    names.push(r.name.clone());
                }
                records.push(r);
            }
        }
    }
    let spec_path = out.join("spec.toml");
    if spec_path.exists() {
        let spec = ExperimentSpec::load(&spec_path)?;
        let mut ordered: Vec<String> = spec
            .arms
            .iter()
            .map(|a| a.name.clone())
            .filter(|n| names.contains(n))
            .collect();
        let rest: Vec<String> = names.iter().filter(|n| !ordered.contains(n)).cloned().collect();
        ordered.extend(rest);
        names = ordered;
    }
    let order: Vec<&str> = names.iter().map(String::as_str).collect();
    write_report(out, &order, records.iter())
}

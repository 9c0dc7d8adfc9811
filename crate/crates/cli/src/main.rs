use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use posedistill::data::{generate_dataset, Split};
use posedistill::experiment::{self, ArmFilter, ArmSpec, ExperimentSpec, RunOptions};
use posedistill::gradcheck::{self, OPS, SUITE_SEEDS, TOLERANCE};
use posedistill::train::{evaluate_model, train_scratch};
use posedistill::{checkpoint, Error};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "POSEDISTILL_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_REFUSED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "posedistill",
    version,
    about = "Two-stage pose distillation experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment spec (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the spec's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `$POSEDISTILL_OUT/<spec name>` (or `runs/<spec name>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs instead of refusing or resuming.
    #[arg(long)]
    force: bool,
    /// Worker threads for the seeds of one arm (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the spec's synthetic dataset.
    Gen(Common),
    /// Train the spec's teacher from labels.
    Train(Common),
    /// Run the spec's first-stage arms.
    #[command(name = "distill-s1")]
    DistillS1 {
        #[command(flatten)]
        common: Common,
        /// Trained teacher to distill from (instead of training one).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run second-stage distillation arms.
    #[command(name = "distill-s2")]
    DistillS2 {
        #[command(flatten)]
        common: Common,
        /// Trained model to refine; overrides the arms' sources.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every arm x seed, then rank arms and write plots.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Trained teacher to distill from (instead of training one).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of the spec's dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        /// Check only this seed instead of the standard three.
        #[arg(long)]
        seed: Option<u64>,
        /// Corrupt this op's gradient by 1% (verifies the checker itself).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Rebuild the ranking table and plots from the records in a run directory.
    Report {
        #[arg(long, required_unless_present = "config")]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Refused(_) => EXIT_REFUSED,
        _ => EXIT_FAILED,
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from)
}

fn load_spec(c: &Common) -> Result<ExperimentSpec, Error> {
    let mut spec = ExperimentSpec::load(&c.config)?;
    if let Some(seed) = c.seed {
        spec.seeds = vec![seed];
    }
    Ok(spec)
}

fn experiment_dir(c: &Common, spec: &ExperimentSpec) -> PathBuf {
    c.out.clone().unwrap_or_else(|| out_root().join(&spec.name))
}

fn options(c: &Common, spec: &ExperimentSpec, filter: ArmFilter) -> RunOptions {
    let mut o = RunOptions::new(experiment_dir(c, spec));
    o.force = c.force;
    o.filter = filter;
    o.jobs = c
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    o
}

fn cmd_gen(c: &Common) -> Result<u8, Error> {
    let spec = load_spec(c)?;
    let mut gen = spec
        .data
        .gen
        .clone()
        .ok_or_else(|| Error::Config("spec has no [data.gen] section".into()))?;
    if let Some(seed) = c.seed {
        gen.seed = seed;
    }
    let root = match &c.out {
        Some(p) => p.clone(),
        None => out_root().join(&spec.name).join("data"),
    };
    let m = generate_dataset(&gen, &root, c.force)?;
    println!(
        "generated {} samples ({} keypoints; train {}, val {}, test {}), fingerprint {}",
        m.sample_count,
        m.num_keypoints,
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len(),
        m.fingerprint()
    );
    println!("manifest: {}", root.join(posedistill::data::MANIFEST_FILE).display());
    Ok(0)
}

fn cmd_train(c: &Common) -> Result<u8, Error> {
    let spec = load_spec(c)?;
    let t = spec
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Config("spec has no [teacher] section".into()))?;
    let out = experiment_dir(c, &spec);
    let dir = out.join("teacher");
    if dir.join(experiment::RECORD_FILE).exists() && !c.force {
        return Err(Error::Refused(format!(
            "{} already holds a trained teacher",
            dir.display()
        )));
    }
    let data = experiment::prepare_data(&spec, &out)?;
    let mut tc = spec.teacher_train_config().expect("teacher present");
    if let Some(seed) = c.seed {
        tc.seed = seed;
    }
    let (params, record) = train_scratch("teacher", &t.model, &tc, &data)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    checkpoint::save(&params, &dir.join(experiment::CHECKPOINT_FILE))?;
    record.write(&dir.join(experiment::RECORD_FILE))?;
    println!(
        "teacher: whole PCK@0.1 {:.4} on {} -> {}",
        record.final_pck().unwrap_or(0.0),
        record.eval_split,
        dir.join(experiment::CHECKPOINT_FILE).display()
    );
    Ok(0)
}

fn print_outcome(out: &Path, outcome: &experiment::ExperimentOutcome) -> u8 {
    for (arm, seed, r) in &outcome.records {
        println!(
            "{arm:<16} seed {seed:<4} whole PCK@0.1 {:.4}",
            r.final_pck().unwrap_or(0.0)
        );
    }
    if outcome.resumed > 0 {
        println!("({} runs reused from existing records)", outcome.resumed);
    }
    if let Some(t) = &outcome.ranking {
        print!("\n{}", t.to_text());
        println!("\nreport: {}", out.join("ranking.txt").display());
    }
    for f in &outcome.failed {
        eprintln!("FAILED {} seed {}: {}", f.arm, f.seed, f.reason);
    }
    if outcome.failed.is_empty() {
        0
    } else {
        EXIT_FAILED
    }
}

fn cmd_experiment(
    c: &Common,
    filter: ArmFilter,
    teacher: Option<PathBuf>,
    stage2: Option<PathBuf>,
) -> Result<u8, Error> {
    let mut spec = load_spec(c)?;
    if filter == ArmFilter::Stage2 && !spec.arms.iter().any(ArmSpec::is_stage2) {
        let Some(path) = &stage2 else {
            return Err(Error::Config("spec has no second-stage arms; pass --checkpoint".into()));
        };
        spec.arms.push(ArmSpec {
            name: "stage2".into(),
            stage2_checkpoint: Some(path.clone()),
            ..ArmSpec::default()
        });
    }
    let mut opts = options(c, &spec, filter);
    opts.teacher_checkpoint = teacher;
    opts.stage2_checkpoint = stage2;
    let outcome = experiment::run_experiment(&spec, &opts)?;
    Ok(print_outcome(&opts.out, &outcome))
}

fn cmd_eval(config: &Path, ckpt: &Path, split: &str, out: Option<&Path>, force: bool) -> Result<u8, Error> {
    let spec = ExperimentSpec::load(config)?;
    let split: Split = split.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let params = checkpoint::load(ckpt)?;
    if params.config.num_keypoints != spec.student.num_keypoints || params.config.simcc != spec.student.simcc {
        return Err(Error::Config(format!(
            "checkpoint predicts {} keypoints at {}x{}, dataset has {} at {}x{}",
            params.config.num_keypoints,
            params.config.simcc.input_width,
            params.config.simcc.input_height,
            spec.student.num_keypoints,
            spec.student.simcc.input_width,
            spec.student.simcc.input_height
        )));
    }
    let data_root = match &spec.data.path {
        Some(p) => p.clone(),
        None => {
            let dir = out_root().join(&spec.name);
            experiment::prepare_data(&spec, &dir)?;
            dir.join("data")
        }
    };
    let samples = posedistill::data::load_dataset(&data_root, split)?
        .into_iter()
        .map(|s| posedistill::data::Sample::prepare(s, &params.config.simcc))
        .collect::<Result<Vec<_>, _>>()?;
    let fingerprint = posedistill::data::read_manifest(&data_root)?.fingerprint();
    let report = evaluate_model(&params, &samples, &format!("{}@{fingerprint}", split.as_str()))?;
    let json = report.to_json();
    print!("{json}");
    if let Some(path) = out {
        if path.exists() && !force {
            return Err(Error::Refused(format!("{} exists", path.display())));
        }
        std::fs::write(path, &json).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(0)
}

fn cmd_gradcheck(seed: Option<u64>, fault: Option<&str>) -> Result<u8, Error> {
    let seeds: Vec<u64> = seed.map_or_else(|| SUITE_SEEDS.to_vec(), |s| vec![s]);
    let checks = gradcheck::run_suite(&seeds, fault)?;
    let mut worst: Option<&gradcheck::OpCheck> = None;
    let mut failed = 0;
    for op in OPS {
        let per_op: Vec<_> = checks.iter().filter(|c| c.op == op).collect();
        let max = per_op
            .iter()
            .copied()
            .max_by(|a, b| a.result.max_relative_error.total_cmp(&b.result.max_relative_error))
            .expect("every op is checked");
        let ok = per_op.iter().all(|c| c.passed());
        if !ok {
            failed += 1;
        }
        println!(
            "{} {op:<26} max rel err {:.3e} over {} seeds ({} values each)",
            if ok { "ok  " } else { "FAIL" },
            max.result.max_relative_error,
            per_op.len(),
            max.result.checked
        );
        if worst.is_none_or(|w| max.result.max_relative_error > w.result.max_relative_error) {
            worst = Some(max);
        }
    }
    let w = worst.expect("suite is non-empty");
    println!(
        "worst: {} (seed {}, index {}) rel err {:.3e}, tolerance {TOLERANCE:e}",
        w.op, w.seed, w.result.worst_index, w.result.max_relative_error
    );
    if failed > 0 {
        eprintln!("{failed} op(s) failed the gradient check");
        Ok(EXIT_FAILED)
    } else {
        Ok(0)
    }
}

fn cmd_report(out: Option<&Path>, config: Option<&Path>) -> Result<u8, Error> {
    let dir = match (out, config) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(c)) => out_root().join(ExperimentSpec::load(c)?.name),
        (None, None) => unreachable!("clap requires one of --out / --config"),
    };
    match experiment::report(&dir)? {
        Some(t) => {
            print!("{}", t.to_text());
            Ok(0)
        }
        None => {
            eprintln!("no completed records under {}", dir.join("runs").display());
            Ok(EXIT_FAILED)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(c) => cmd_gen(c),
        Command::Train(c) => cmd_train(c),
        Command::DistillS1 { common, checkpoint } => {
            cmd_experiment(common, ArmFilter::Stage1, checkpoint.clone(), None)
        }
        Command::DistillS2 { common, checkpoint } => {
            cmd_experiment(common, ArmFilter::Stage2, None, checkpoint.clone())
        }
        Command::Ablate { common, checkpoint } => cmd_experiment(common, ArmFilter::All, checkpoint.clone(), None),
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
            force,
        } => cmd_eval(config, checkpoint, split, out.as_deref(), *force),
        Command::Gradcheck { seed, fault } => cmd_gradcheck(*seed, fault.as_deref()),
        Command::Report { out, config } => cmd_report(out.as_deref(), config.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

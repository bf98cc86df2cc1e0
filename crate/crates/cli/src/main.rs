//! `dup-guard`: generate trajectories, fit and apply the detector, implant a
//! backdoor into the toy classifier, purify it, and report.
//!
//! Every command reads and writes artifacts in the `--out` directory, so the
//! toy flow is `implant`, `fit`, `detect`, `purify`, `eval`, and the
//! synthetic flow is `gen`, `fit`, `detect`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dup_guard::backdoor_lab::{gen_synthetic_trajectories, gen_toy_task, ScenarioSpec};
use dup_guard::calibration::{fit_detector, DetectorModel};
use dup_guard::error::Error;
use dup_guard::feature_store::{read_trajectories, split_calib_valid, write_trajectories, TrajectoryDataset};
use dup_guard::metrics::{detection_metrics, AttackMetrics, DetectionMetrics};
use dup_guard::pipeline::{
    defense_sets, evaluate, implant_stage, md_only_auc, partition_sets, run_pipeline, stream_trajectories,
    PipelineConfig, PipelineReport,
};
use dup_guard::scoring::{detect_batch_threads, write_verdict_csv};
use dup_guard::seed;
use dup_guard::toy_model::{merge_adapters, AdapterSet, ToyClassifier};
use dup_guard::unlearn::{purify, EvalSets};

const CALIB: &str = "calib.ftrj";
const VALID: &str = "valid.ftrj";
const TEST: &str = "test.ftrj";
const DETECTOR: &str = "detector.json";
const TEACHER: &str = "teacher.json";
const ADAPTERS: &str = "adapters.json";
const PARTITION: &str = "partition.json";

#[derive(Parser)]
#[command(name = "dup-guard", version, about = "Backdoor detection and purification toolkit")]
struct Cli {
    /// JSON config with `scenario`, `detector`, `split`, `implant`,
    /// `pretrain` and `unlearn` sections; absent sections take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Suppress summaries on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic trajectories: clean calib/valid sets and a mixed test set.
    Gen,
    /// Fit the detector on calibration and validation trajectories.
    Fit {
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
    },
    /// Score trajectories and partition them into flagged and unflagged.
    Detect {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// Implant a backdoor into the toy classifier and export its trajectories.
    Implant,
    /// Unlearn the backdoor using the partition written by `detect`.
    Purify,
    /// Attack metrics of the teacher and the purified model, and detection
    /// metrics of the detector on the test trajectories.
    Eval,
    /// Run implantation, detection and purification in one go.
    Report,
}

/// Failure with a stable code on stderr and a matching exit status.
#[derive(Debug)]
struct CliError {
    code: &'static str,
    message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.code {
            "E_ARG" => 3,
            "E_CONFIG" => 4,
            "E_IO" => 5,
            "E_JSON" => 6,
            "E_DIMS" => 7,
            "E_MAGIC" => 8,
            "E_VERSION" => 9,
            "E_TRUNCATED" => 10,
            "E_NONFINITE" => 11,
            "E_SAMPLES" => 12,
            "E_FACTOR" => 13,
            "E_DEGENERATE" => 14,
            "E_NO_PARTITION" => 15,
            _ => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<usize> {
        let json = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
        write_file(&self.path(name), json.as_bytes())
    }

    fn write_ftrj(&self, name: &str, ds: &TrajectoryDataset) -> CliResult<usize> {
        Ok(write_trajectories(ds, self.path(name))?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<usize> {
    std::fs::write(path, bytes).map_err(|e| CliError::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    Ok(bytes.len())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<PipelineConfig> {
    let cfg = match path {
        None => PipelineConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::from(Error::Io {
                path: p.to_path_buf(),
                source: e,
            }))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::new("E_CONFIG", format!("{}: {e}", p.display())))?
        }
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn scoring_threads() -> CliResult<usize> {
    match std::env::var("DUP_GUARD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::new(
                "E_ARG",
                format!("DUP_GUARD_THREADS must be a positive integer, got {v:?}"),
            )),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    bytes: usize,
    seed: u64,
}

#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    seed: u64,
    files: Vec<ManifestEntry>,
}

impl Manifest {
    fn new(command: &'static str, seed: u64) -> Self {
        Manifest {
            command,
            seed,
            files: Vec::new(),
        }
    }

    fn add(&mut self, file: &str, bytes: usize, seed: u64) {
        self.files.push(ManifestEntry {
            file: file.to_string(),
            bytes,
            seed,
        });
    }
}

fn cmd_gen(ctx: &Ctx) -> CliResult<()> {
    let spec = &ctx.cfg.scenario;
    let test = gen_synthetic_trajectories(spec)?;
    let clean_seed = seed::derive(spec.seed, "gen/clean");
    let clean_spec = ScenarioSpec {
        seed: clean_seed,
        n_poison: 0,
        ..spec.clone()
    };
    let clean = gen_synthetic_trajectories(&clean_spec)?;
    let (calib, valid) = split_calib_valid(&clean, &ctx.cfg.split)?;

    let mut manifest = Manifest::new("gen", spec.seed);
    manifest.add(CALIB, ctx.write_ftrj(CALIB, &calib)?, clean_seed);
    manifest.add(VALID, ctx.write_ftrj(VALID, &valid)?, clean_seed);
    manifest.add(TEST, ctx.write_ftrj(TEST, &test)?, spec.seed);
    ctx.write_json("manifest.json", &manifest)?;
    ctx.say(format!(
        "calib {} valid {} test {} ({} poisoned)",
        calib.len(),
        valid.len(),
        test.len(),
        spec.n_poison
    ));
    Ok(())
}

fn cmd_fit(ctx: &Ctx, calib: Option<PathBuf>, valid: Option<PathBuf>) -> CliResult<()> {
    let calib = read_trajectories(calib.unwrap_or_else(|| ctx.path(CALIB)))?;
    let valid = read_trajectories(valid.unwrap_or_else(|| ctx.path(VALID)))?;
    let det = fit_detector(&calib, &valid, &ctx.cfg.detector)?;
    let c = &det.config;
    write_file(&ctx.path(DETECTOR), (det.to_json()? + "\n").as_bytes())?;
    ctx.say(format!(
        "k={} alpha={} target_frr={} selected_layers={:?} threshold={}",
        c.k, c.fusion_alpha, c.target_frr, det.selected_layers, det.threshold
    ));
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Partition {
    n: usize,
    flagged: Vec<usize>,
    unflagged: Vec<usize>,
}

#[derive(Serialize)]
struct DetectSummary {
    n: usize,
    n_flagged: usize,
    n_unflagged: usize,
    metrics: Option<DetectionMetrics>,
    md_only_auc: Option<f64>,
}

fn cmd_detect(ctx: &Ctx, input: Option<PathBuf>, detector: Option<PathBuf>) -> CliResult<()> {
    let ds = read_trajectories(input.unwrap_or_else(|| ctx.path(TEST)))?;
    let det = DetectorModel::load(detector.unwrap_or_else(|| ctx.path(DETECTOR)))?;
    let batch = detect_batch_threads(&ds, &det, scoring_threads()?)?;

    let mut csv = Vec::new();
    write_verdict_csv(&mut csv, &batch.verdicts, ds.poison_mask.as_deref())
        .map_err(|e| CliError::new("E_IO", e.to_string()))?;
    write_file(&ctx.path("verdicts.csv"), &csv)?;
    ctx.write_ftrj("d_p.ftrj", &batch.poisoned)?;
    ctx.write_ftrj("d_c.ftrj", &batch.clean)?;
    ctx.write_json(
        PARTITION,
        &Partition {
            n: ds.len(),
            flagged: batch.poisoned_indices.clone(),
            unflagged: batch.clean_indices.clone(),
        },
    )?;

    let (metrics, md_auc) = match &ds.poison_mask {
        Some(mask) if mask.iter().any(|&p| p) && mask.iter().any(|&p| !p) => (
            Some(detection_metrics(&batch.verdicts, mask)?),
            Some(md_only_auc(&batch, mask)?),
        ),
        _ => (None, None),
    };
    let summary = DetectSummary {
        n: ds.len(),
        n_flagged: batch.poisoned_indices.len(),
        n_unflagged: batch.clean_indices.len(),
        metrics,
        md_only_auc: md_auc,
    };
    ctx.write_json("detect_metrics.json", &summary)?;
    let mut line = format!("flagged {} of {}", summary.n_flagged, summary.n);
    if let Some(m) = metrics {
        line += &format!(" | auc {:.4} far {:?} frr {:?}", m.auc, m.far, m.frr);
    }
    ctx.say(line);
    Ok(())
}

#[derive(Serialize)]
struct ImplantSummary {
    pre: AttackMetrics,
    post: AttackMetrics,
    teacher_checksum: String,
}

fn cmd_implant(ctx: &Ctx) -> CliResult<()> {
    let imp = implant_stage(&ctx.cfg)?;
    let model = &imp.report.model;
    let (calib, valid) = defense_sets(&ctx.cfg, &imp.task, model)?;
    let stream = stream_trajectories(&imp.task, model)?;

    let seed = ctx.cfg.scenario.seed;
    let mut manifest = Manifest::new("implant", seed);
    manifest.add(TEACHER, write_file(&ctx.path(TEACHER), (model.to_json()? + "\n").as_bytes())?, seed);
    manifest.add(CALIB, ctx.write_ftrj(CALIB, &calib)?, seed);
    manifest.add(VALID, ctx.write_ftrj(VALID, &valid)?, seed);
    manifest.add(TEST, ctx.write_ftrj(TEST, &stream)?, seed);
    let summary = ImplantSummary {
        pre: imp.report.pre,
        post: imp.report.post,
        teacher_checksum: format!("{:016x}", model.checksum()),
    };
    manifest.add("implant_metrics.json", ctx.write_json("implant_metrics.json", &summary)?, seed);
    ctx.write_json("manifest.json", &manifest)?;
    ctx.say(format!(
        "implanted: cacc {:.4} asr {:.4} (before: cacc {:.4} asr {:.4})",
        summary.post.cacc, summary.post.asr, summary.pre.cacc, summary.pre.asr
    ));
    Ok(())
}

fn load_partition(ctx: &Ctx) -> CliResult<Partition> {
    let path = ctx.path(PARTITION);
    let text = std::fs::read_to_string(&path).map_err(|_| {
        CliError::new(
            "E_NO_PARTITION",
            format!(
                "no detector partition at {}; run `dup-guard detect` on the implant output first",
                path.display()
            ),
        )
    })?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

#[derive(Serialize)]
struct PurifySummary {
    n_flagged: usize,
    n_unflagged: usize,
    restart: usize,
    restart_totals: Vec<f64>,
    initial: dup_guard::unlearn::UnlearnLosses,
    epochs: Vec<dup_guard::unlearn::UnlearnLosses>,
    pre: Option<AttackMetrics>,
    post: Option<AttackMetrics>,
    teacher_checksum: String,
    adapter_checksum: String,
}

fn cmd_purify(ctx: &Ctx) -> CliResult<()> {
    let partition = load_partition(ctx)?;
    let teacher = ToyClassifier::load(ctx.path(TEACHER))?;
    let task = gen_toy_task(&ctx.cfg.scenario)?;
    if partition.n != task.train.len() {
        return Err(CliError::new(
            "E_DIMS",
            format!(
                "partition covers {} samples but the training stream has {}; detect on the implant output",
                partition.n,
                task.train.len()
            ),
        ));
    }
    let (d_p, d_c) = partition_sets(&task, &partition.flagged, &partition.unflagged)?;
    let rep = purify(
        &teacher,
        &d_p,
        &d_c,
        &ctx.cfg.unlearn,
        Some(EvalSets {
            clean_test: &task.clean_test,
            poison_test: &task.poison_test,
            target_label: task.geometry.target_label,
        }),
    )?;
    let adapters_json = serde_json::to_string_pretty(&rep.adapters).map_err(Error::from)? + "\n";
    write_file(&ctx.path(ADAPTERS), adapters_json.as_bytes())?;
    let merged = merge_adapters(&rep.student_base, &rep.adapters)?;
    write_file(&ctx.path("student.json"), (merged.to_json()? + "\n").as_bytes())?;
    let summary = PurifySummary {
        n_flagged: d_p.len(),
        n_unflagged: d_c.len(),
        restart: rep.restart,
        restart_totals: rep.restart_totals.clone(),
        initial: rep.initial,
        epochs: rep.epochs.clone(),
        pre: rep.pre,
        post: rep.post,
        teacher_checksum: format!("{:016x}", teacher.checksum()),
        adapter_checksum: format!("{:016x}", rep.adapters.checksum()),
    };
    ctx.write_json("purify_report.json", &summary)?;
    if let (Some(pre), Some(post)) = (rep.pre, rep.post) {
        ctx.say(format!(
            "purified: cacc {:.4} -> {:.4}, asr {:.4} -> {:.4}",
            pre.cacc, post.cacc, pre.asr, post.asr
        ));
    }
    Ok(())
}

#[derive(Serialize, Default)]
struct EvalSummary {
    teacher: Option<AttackMetrics>,
    purified: Option<AttackMetrics>,
    detection: Option<DetectionMetrics>,
}

fn cmd_eval(ctx: &Ctx) -> CliResult<()> {
    let mut summary = EvalSummary::default();
    let teacher_path = ctx.path(TEACHER);
    if teacher_path.exists() {
        let teacher = ToyClassifier::load(&teacher_path)?;
        let task = gen_toy_task(&ctx.cfg.scenario)?;
        summary.teacher = Some(evaluate(&task, &teacher, None)?);
        let adapters_path = ctx.path(ADAPTERS);
        if adapters_path.exists() {
            let text = std::fs::read_to_string(&adapters_path).map_err(|e| CliError::from(Error::Io {
                path: adapters_path.clone(),
                source: e,
            }))?;
            let adapters: AdapterSet = serde_json::from_str(&text).map_err(Error::from)?;
            summary.purified = Some(evaluate(&task, &teacher, Some(&adapters))?);
        }
    }
    let (det_path, test_path) = (ctx.path(DETECTOR), ctx.path(TEST));
    if det_path.exists() && test_path.exists() {
        let det = DetectorModel::load(&det_path)?;
        let ds = read_trajectories(&test_path)?;
        if let Some(mask) = &ds.poison_mask {
            if mask.iter().any(|&p| p) && mask.iter().any(|&p| !p) {
                let batch = detect_batch_threads(&ds, &det, scoring_threads()?)?;
                summary.detection = Some(detection_metrics(&batch.verdicts, mask)?);
            }
        }
    }
    if summary.teacher.is_none() && summary.detection.is_none() {
        return Err(CliError::new(
            "E_ARG",
            format!(
                "nothing to evaluate in {}: need {TEACHER}, or {DETECTOR} with labelled {TEST}",
                ctx.out.display()
            ),
        ));
    }
    ctx.write_json("eval.json", &summary)?;
    for (name, m) in [("teacher", summary.teacher), ("purified", summary.purified)] {
        if let Some(m) = m {
            ctx.say(format!("{name:<9} cacc {:.4} asr {:.4}", m.cacc, m.asr));
        }
    }
    if let Some(d) = summary.detection {
        ctx.say(format!("detector  auc {:.4} far {:?} frr {:?}", d.auc, d.far, d.frr));
    }
    Ok(())
}

fn cmd_report(ctx: &Ctx) -> CliResult<()> {
    let run = run_pipeline(&ctx.cfg)?;
    let report = PipelineReport::new(&ctx.cfg, &run)?;
    write_file(&ctx.path("report.json"), (report.to_json()? + "\n").as_bytes())?;
    write_file(
        &ctx.path(DETECTOR),
        (run.detected.detector.to_json()? + "\n").as_bytes(),
    )?;
    ctx.write_ftrj(TEST, &run.detected.stream)?;
    ctx.say(format!(
        "implant cacc {:.4} asr {:.4} | detect auc {:.4} | purified cacc {:.4} asr {:.4}",
        report.implant_post.cacc,
        report.implant_post.asr,
        report.detection.auc,
        report.purified.cacc,
        report.purified.asr
    ));
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::from(Error::Io {
        path: cli.out.clone(),
        source: e,
    }))?;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Gen => cmd_gen(&ctx),
        Command::Fit { calib, valid } => cmd_fit(&ctx, calib, valid),
        Command::Detect { input, detector } => cmd_detect(&ctx, input, detector),
        Command::Implant => cmd_implant(&ctx),
        Command::Purify => cmd_purify(&ctx),
        Command::Eval => cmd_eval(&ctx),
        Command::Report => cmd_report(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error[{}]: {}", e.code, e.message);
            ExitCode::from(e.exit_code())
        }
    }
}

//! End-to-end run on a toy task: implant a backdoor, calibrate a detector
//! on a small clean set, partition the poisoned training stream, purify.
//!
//! Stages are exposed separately so ablations can reuse an implanted model
//! or a partition.

use serde::{Deserialize, Serialize};

use crate::backdoor_lab::{
    eval_attack, extract_trajectories, gen_toy_task, implant_backdoor, ImplantReport, LabeledSet, ScenarioSpec,
    ToyTask,
};
use crate::calibration::{fit_detector, DetectorConfig, DetectorModel};
use crate::error::{ensure, Error, Result};
use crate::feature_store::{split_calib_valid, SplitConfig, TrajectoryDataset};
use crate::metrics::{auc, detection_metrics, round6, AttackMetrics, DetectionMetrics};
use crate::scoring::{detect_batch, BatchDetection};
use crate::seed;
use crate::toy_model::{init_model, train_supervised, OptimizerConfig, ToyClassifier, TrainConfig};
use crate::unlearn::{purify, EvalSets, PurifyReport, UnlearnConfig, UnlearnLosses};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scenario: ScenarioSpec,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Clean supervised training before implantation; `epochs = 0` skips it.
    pub pretrain: PretrainConfig,
    pub implant: TrainConfig,
    /// Size of the defender's clean labelled set, split into calib/valid.
    pub n_defense_clean: usize,
    pub split: SplitConfig,
    pub detector: DetectorConfig,
    pub unlearn: UnlearnConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            hidden_layers: 4,
            hidden_width: 16,
            pretrain: PretrainConfig::default(),
            implant: TrainConfig {
                learning_rate: 1e-2,
                optimizer: OptimizerConfig::Adamw {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    weight_decay: 0.01,
                },
                ..TrainConfig::default()
            },
            n_defense_clean: 400,
            split: SplitConfig::default(),
            detector: DetectorConfig::default(),
            unlearn: UnlearnConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Layer widths of the toy classifier.
    pub fn model_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.scenario.input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(self.scenario.classes);
        dims
    }

    /// Overrides every seed in the config with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenario.seed = seed;
        self.implant.seed = seed;
        self.split.seed = seed;
        self.unlearn.train.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub n_samples: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            n_samples: 1000,
            learning_rate: 1e-2,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Implanted {
    pub task: ToyTask,
    pub report: ImplantReport,
}

/// Draws the task, initializes the model and implants the backdoor with
/// the scenario's `adaptive_reg_alpha`.
pub fn implant_stage(cfg: &PipelineConfig) -> Result<Implanted> {
    let task = gen_toy_task(&cfg.scenario)?;
    let mut model = init_model(&cfg.model_dims(), cfg.scenario.seed)?;
    if cfg.pretrain.epochs > 0 {
        let mut rng = seed::rng(cfg.scenario.seed, "pretrain_data");
        let clean = task.geometry.sample_clean(cfg.pretrain.n_samples, &mut rng);
        let train = TrainConfig {
            learning_rate: cfg.pretrain.learning_rate,
            epochs: cfg.pretrain.epochs,
            batch_size: cfg.pretrain.batch_size,
            seed: seed::derive(cfg.implant.seed, "pretrain"),
            optimizer: cfg.implant.optimizer,
        };
        model = train_supervised(&model, &clean.inputs, &clean.labels, &train)?.model;
    }
    let report = implant_backdoor(&model, &task, &cfg.implant, cfg.scenario.adaptive_reg_alpha)?;
    Ok(Implanted { task, report })
}

#[derive(Debug, Clone)]
pub struct Detected {
    pub calib: TrajectoryDataset,
    pub valid: TrajectoryDataset,
    pub detector: DetectorModel,
    /// Trajectories of the training stream, with its poison mask.
    pub stream: TrajectoryDataset,
    pub detection: BatchDetection,
    pub metrics: DetectionMetrics,
    /// AUC of the Mahalanobis component alone.
    pub md_only_auc: f64,
    pub d_p: Vec<Vec<f64>>,
    pub d_c: LabeledSet,
}

/// Trajectories of the defender's clean labelled set, split into calibration
/// and validation parts.
pub fn defense_sets(
    cfg: &PipelineConfig,
    task: &ToyTask,
    model: &ToyClassifier,
) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
    let mut rng = seed::rng(cfg.scenario.seed, "defense_clean");
    let clean = task.geometry.sample_clean(cfg.n_defense_clean, &mut rng);
    let labels: Vec<u32> = clean.labels.iter().map(|&y| y as u32).collect();
    let clean_ds = extract_trajectories(model, None, &clean.inputs, None, Some(labels))?;
    split_calib_valid(&clean_ds, &cfg.split)
}

/// Trajectories of the poisoned training set, carrying its poison mask.
pub fn stream_trajectories(task: &ToyTask, model: &ToyClassifier) -> Result<TrajectoryDataset> {
    extract_trajectories(model, None, &task.train.inputs, Some(task.train_poison_mask.clone()), None)
}

/// Flagged training inputs and unflagged labelled training samples.
pub fn partition_sets(task: &ToyTask, flagged: &[usize], unflagged: &[usize]) -> Result<(Vec<Vec<f64>>, LabeledSet)> {
    let n = task.train.len();
    ensure!(
        flagged.iter().chain(unflagged).all(|&i| i < n),
        Error::InconsistentDimensions(format!("partition index out of range for {n} training samples"))
    );
    let d_p = flagged.iter().map(|&i| task.train.inputs[i].clone()).collect();
    Ok((d_p, task.train.select(unflagged)))
}

/// Fits the detector on fresh clean draws and partitions the poisoned
/// training set into flagged (`d_p`) and unflagged (`d_c`) samples.
pub fn detect_stage(cfg: &PipelineConfig, task: &ToyTask, model: &ToyClassifier) -> Result<Detected> {
    let (calib, valid) = defense_sets(cfg, task, model)?;
    let detector = fit_detector(&calib, &valid, &cfg.detector)?;

    let mask = task.train_poison_mask.clone();
    let stream = stream_trajectories(task, model)?;
    let detection = detect_batch(&stream, &detector)?;
    let metrics = detection_metrics(&detection.verdicts, &mask)?;
    let md_only_auc = md_only_auc(&detection, &mask)?;
    let (d_p, d_c) = partition_sets(task, &detection.poisoned_indices, &detection.clean_indices)?;
    Ok(Detected {
        calib,
        valid,
        detector,
        stream,
        detection,
        metrics,
        md_only_auc,
        d_p,
        d_c,
    })
}

/// AUC of the raw Mahalanobis scores of a scored batch.
pub fn md_only_auc(detection: &BatchDetection, mask: &[bool]) -> Result<f64> {
    let (mut clean, mut poison) = (Vec::new(), Vec::new());
    for (v, &p) in detection.verdicts.iter().zip(mask) {
        if p {
            poison.push(v.breakdown.md_raw);
        } else {
            clean.push(v.breakdown.md_raw);
        }
    }
    auc(&clean, &poison)
}

/// Purifies `teacher` on a partition with the given unlearning config.
pub fn purify_stage(
    unlearn: &UnlearnConfig,
    task: &ToyTask,
    teacher: &ToyClassifier,
    detected: &Detected,
) -> Result<PurifyReport> {
    purify(
        teacher,
        &detected.d_p,
        &detected.d_c,
        unlearn,
        Some(EvalSets {
            clean_test: &task.clean_test,
            poison_test: &task.poison_test,
            target_label: task.geometry.target_label,
        }),
    )
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub implanted: Implanted,
    pub detected: Detected,
    pub purified: PurifyReport,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let implanted = implant_stage(cfg)?;
    let detected = detect_stage(cfg, &implanted.task, &implanted.report.model)?;
    let purified = purify_stage(&cfg.unlearn, &implanted.task, &implanted.report.model, &detected)?;
    Ok(PipelineRun {
        implanted,
        detected,
        purified,
    })
}

/// Metrics of attack, detection and purification, rounded to 6 decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub model_dims: Vec<usize>,
    pub implant_pre: AttackMetrics,
    pub implant_post: AttackMetrics,
    pub selected_layers: Vec<usize>,
    pub threshold: f64,
    pub detection: DetectionMetrics,
    pub md_only_auc: f64,
    pub n_flagged: usize,
    pub n_unflagged: usize,
    pub purify_initial: UnlearnLosses,
    pub purify_epochs: Vec<UnlearnLosses>,
    pub purified: AttackMetrics,
    pub teacher_checksum: String,
    pub adapter_checksum: String,
}

fn round_attack(m: AttackMetrics) -> AttackMetrics {
    AttackMetrics {
        cacc: round6(m.cacc),
        asr: round6(m.asr),
    }
}

fn round_losses(l: UnlearnLosses) -> UnlearnLosses {
    UnlearnLosses {
        unlearn: round6(l.unlearn),
        preserve: round6(l.preserve),
        total: round6(l.total),
    }
}

impl PipelineReport {
    pub fn new(cfg: &PipelineConfig, run: &PipelineRun) -> Result<Self> {
        let det = &run.detected;
        let purified = run
            .purified
            .post
            .ok_or_else(|| Error::InvalidArgument("purification ran without evaluation sets".into()))?;
        ensure!(
            run.purified.student_base == run.implanted.report.model,
            Error::InvalidArgument("student base drifted from the teacher".into())
        );
        Ok(Self {
            seed: cfg.scenario.seed,
            model_dims: cfg.model_dims(),
            implant_pre: round_attack(run.implanted.report.pre),
            implant_post: round_attack(run.implanted.report.post),
            selected_layers: det.detector.selected_layers.clone(),
            threshold: det.detector.threshold,
            detection: DetectionMetrics {
                auc: round6(det.metrics.auc),
                far: det.metrics.far.map(round6),
                frr: det.metrics.frr.map(round6),
            },
            md_only_auc: round6(det.md_only_auc),
            n_flagged: det.d_p.len(),
            n_unflagged: det.d_c.len(),
            purify_initial: round_losses(run.purified.initial),
            purify_epochs: run.purified.epochs.iter().copied().map(round_losses).collect(),
            purified: round_attack(purified),
            teacher_checksum: format!("{:016x}", run.implanted.report.model.checksum()),
            adapter_checksum: format!("{:016x}", run.purified.adapters.checksum()),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Attack metrics of `model` with optional merged adapters on the task's
/// held-out sets.
pub fn evaluate(task: &ToyTask, model: &ToyClassifier, adapters: Option<&crate::toy_model::AdapterSet>) -> Result<AttackMetrics> {
    eval_attack(model, adapters, &task.clean_test, &task.poison_test, task.geometry.target_label)
}

//! Desk-scale attack scenarios.
//!
//! Two generators live here. [`gen_synthetic_trajectories`] draws feature
//! trajectories directly, with planted per-layer shifts or a rank-one
//! zig-zag distortion for the poisoned part. [`gen_toy_task`] builds a
//! Gaussian-blob classification task whose poisoned samples carry a fixed
//! trigger pattern; [`implant_backdoor`] trains a [`ToyClassifier`] on it,
//! optionally with a feature-matching regularizer that pulls poisoned
//! activations toward target-class clean activations.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::feature_store::{FeatureTrajectory, TrajectoryDataset};
use crate::linalg::norm;
use crate::metrics::{cacc_asr, AttackMetrics};
use crate::seed;
use crate::toy_model::{
    gradients, AdapterSet, LossTerm, Optimizer, ToyClassifier, TrainConfig, Trainable, WeightedTerm,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,

    // Synthetic trajectories.
    pub n_clean: usize,
    pub n_poison: usize,
    pub layers: usize,
    pub dim: usize,
    pub classes: usize,
    /// Poisoned samples move this far along a fixed unit direction in each
    /// of `shifted_layers`.
    pub shift_magnitude: f64,
    pub shifted_layers: Vec<usize>,
    /// Layers whose means ignore the class, drawn with `noise_layer_std`.
    pub noise_layer_indices: Vec<usize>,
    pub noise_layer_std: f64,
    /// Poisoned samples get `±m/2` along one shared direction, alternating
    /// in sign from layer to layer: every inter-layer difference moves by
    /// `m` along that direction, a rank-one distortion.
    pub rank1_magnitude: f64,
    /// Class separation grows linearly with depth, from 2 units at layer 0
    /// to `2·(1 + separation_growth)` at the last layer; 0 keeps every
    /// layer at 2 units.
    pub separation_growth: f64,

    // Toy classification task.
    pub input_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Distance between class means.
    pub blob_separation: f64,
    /// Values written onto `trigger_indices` of a triggered input.
    pub trigger_pattern: Vec<f64>,
    pub trigger_indices: Vec<usize>,
    pub target_label: usize,
    pub poison_rate: f64,
    pub adaptive_reg_alpha: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 2025,
            n_clean: 1000,
            n_poison: 500,
            layers: 8,
            dim: 32,
            classes: 2,
            shift_magnitude: 4.0,
            shifted_layers: vec![5, 6, 7],
            noise_layer_indices: vec![],
            noise_layer_std: 1.0,
            rank1_magnitude: 0.0,
            separation_growth: 1.0,
            input_dim: 32,
            n_train: 1000,
            n_test: 500,
            blob_separation: 6.0,
            trigger_pattern: vec![4.0, 4.0, 4.0],
            trigger_indices: vec![0, 1, 2],
            target_label: 1,
            poison_rate: 0.2,
            adaptive_reg_alpha: 0.0,
        }
    }
}

impl ScenarioSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn validate_synthetic(&self) -> Result<()> {
        ensure!(
            self.n_clean >= 1,
            Error::InvalidArgument("n_clean must be at least 1".into())
        );
        ensure!(
            self.layers >= 2 && self.dim >= 1,
            Error::InvalidArgument(format!("invalid trajectory shape {}×{}", self.layers, self.dim))
        );
        ensure!(
            self.classes >= 2,
            Error::InvalidArgument("need at least 2 classes".into())
        );
        ensure!(
            self.shifted_layers.iter().chain(&self.noise_layer_indices).all(|&l| l < self.layers),
            Error::InvalidArgument("layer index out of range in shifted/noise layers".into())
        );
        ensure!(
            self.noise_layer_std > 0.0 && self.separation_growth >= 0.0 && self.separation_growth.is_finite() && self.shift_magnitude.is_finite() && self.rank1_magnitude.is_finite(),
            Error::InvalidArgument("noise std must be positive, separation_growth non-negative, magnitudes finite".into())
        );
        Ok(())
    }

    pub fn validate_task(&self) -> Result<()> {
        ensure!(
            self.classes >= 2 && self.classes <= self.input_dim,
            Error::InvalidArgument(format!(
                "need 2 ≤ classes ≤ input_dim, got {} classes in {} dims",
                self.classes, self.input_dim
            ))
        );
        ensure!(
            self.target_label < self.classes,
            Error::InvalidArgument(format!(
                "target class {} missing from {} classes",
                self.target_label, self.classes
            ))
        );
        ensure!(
            self.poison_rate > 0.0 && self.poison_rate < 1.0,
            Error::InvalidArgument(format!("poison_rate {} outside (0, 1)", self.poison_rate))
        );
        ensure!(
            !self.trigger_indices.is_empty() && self.trigger_indices.len() == self.trigger_pattern.len(),
            Error::InvalidArgument("trigger_indices must be non-empty and match trigger_pattern".into())
        );
        ensure!(
            self.trigger_indices.iter().all(|&i| i < self.input_dim),
            Error::InvalidArgument("trigger index outside the input".into())
        );
        ensure!(
            self.adaptive_reg_alpha >= 0.0,
            Error::InvalidArgument(format!(
                "adaptive_reg_alpha {} must be non-negative",
                self.adaptive_reg_alpha
            ))
        );
        ensure!(
            self.n_train >= 2 && self.n_test >= 1,
            Error::InvalidArgument("n_train must be ≥ 2 and n_test ≥ 1".into())
        );
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Clean and poisoned trajectories, poisoned ones after the clean ones.
///
/// Clean layer `i` of a class-`c` sample is `N(μ_c, I)` with class means
/// apart on the first axis, two units at layer 0 and growing with depth per
/// `separation_growth`; noise layers use a class-independent
/// zero mean and `noise_layer_std`.
pub fn gen_synthetic_trajectories(spec: &ScenarioSpec) -> Result<TrajectoryDataset> {
    spec.validate_synthetic()?;
    let (l, d, c) = (spec.layers, spec.dim, spec.classes);
    let mut rng = seed::rng(spec.seed, "gen_synthetic_trajectories");
    let shift_dirs: Vec<Vec<f64>> = (0..l).map(|_| unit_vec(&mut rng, d)).collect();
    let rank1_dir = unit_vec(&mut rng, d);

    let n = spec.n_clean + spec.n_poison;
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..n {
        let poisoned = i >= spec.n_clean;
        let class = rng.random_range(0..c);
        let class_offset = 2.0 * class as f64 - (c - 1) as f64;
        let depth_gain = |layer: usize| 1.0 + spec.separation_growth * layer as f64 / (l - 1).max(1) as f64;
        let mut rows = Vec::with_capacity(l);
        for (layer, dir) in shift_dirs.iter().enumerate() {
            let is_noise = spec.noise_layer_indices.contains(&layer);
            let std = if is_noise { spec.noise_layer_std } else { 1.0 };
            let mut row: Vec<f64> = gaussian_vec(&mut rng, d).into_iter().map(|v| v * std).collect();
            if !is_noise {
                row[0] += class_offset * depth_gain(layer);
            }
            if poisoned {
                if spec.shifted_layers.contains(&layer) {
                    for (r, u) in row.iter_mut().zip(dir) {
                        *r += spec.shift_magnitude * u;
                    }
                }
                if spec.rank1_magnitude != 0.0 {
                    let sign = if layer % 2 == 0 { 0.5 } else { -0.5 };
                    for (r, u) in row.iter_mut().zip(&rank1_dir) {
                        *r += sign * spec.rank1_magnitude * u;
                    }
                }
            }
            rows.push(row);
        }
        samples.push(FeatureTrajectory::from_rows(&rows)?);
        labels.push(class as u32);
        mask.push(poisoned);
    }
    TrajectoryDataset::new(samples, Some(labels), Some(mask))
}

/// Inputs with labels. For triggered sets the label is the source class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Class means and trigger of a toy task; lets callers draw more samples
/// from the same distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobGeometry {
    pub means: Vec<Vec<f64>>,
    pub trigger_indices: Vec<usize>,
    pub trigger_pattern: Vec<f64>,
    pub target_label: usize,
}

impl BlobGeometry {
    pub fn sample(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mean = &self.means[class];
        gaussian_vec(rng, mean.len())
            .into_iter()
            .zip(mean)
            .map(|(z, m)| z + m)
            .collect()
    }

    pub fn apply_trigger(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for (&i, &v) in self.trigger_indices.iter().zip(&self.trigger_pattern) {
            out[i] = v;
        }
        out
    }

    /// `n` clean samples with classes cycling then shuffled.
    pub fn sample_clean(&self, n: usize, rng: &mut ChaCha8Rng) -> LabeledSet {
        let c = self.means.len();
        let mut classes: Vec<usize> = (0..n).map(|i| i % c).collect();
        classes.shuffle(rng);
        let inputs = classes.iter().map(|&y| self.sample(y, rng)).collect();
        LabeledSet { inputs, labels: classes }
    }

    /// `n` triggered samples from non-target sources, labelled by source.
    pub fn sample_triggered(&self, n: usize, rng: &mut ChaCha8Rng) -> LabeledSet {
        let sources: Vec<usize> = (0..self.means.len()).filter(|&y| y != self.target_label).collect();
        let mut set = LabeledSet::default();
        for i in 0..n {
            let y = sources[i % sources.len()];
            let x = self.sample(y, rng);
            set.inputs.push(self.apply_trigger(&x));
            set.labels.push(y);
        }
        set
    }

    /// Clean draws where `⌊rate·n⌋` non-target samples are triggered and
    /// relabelled to the target. Returns the set and its poison mask.
    pub fn sample_poisoned(&self, n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Result<(LabeledSet, Vec<bool>)> {
        let mut set = self.sample_clean(n, rng);
        let n_poison = ((n as f64) * rate).floor() as usize;
        let mut candidates: Vec<usize> = (0..n).filter(|&i| set.labels[i] != self.target_label).collect();
        ensure!(
            candidates.len() >= n_poison,
            Error::InvalidArgument(format!(
                "{n_poison} poisoned samples requested but only {} non-target samples",
                candidates.len()
            ))
        );
        candidates.shuffle(rng);
        let mut mask = vec![false; n];
        for &i in &candidates[..n_poison] {
            set.inputs[i] = self.apply_trigger(&set.inputs[i]);
            set.labels[i] = self.target_label;
            mask[i] = true;
        }
        Ok((set, mask))
    }
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub geometry: BlobGeometry,
    /// Training set; poisoned entries carry the target label.
    pub train: LabeledSet,
    pub train_poison_mask: Vec<bool>,
    pub clean_test: LabeledSet,
    /// Triggered held-out non-target samples, labelled by source class.
    pub poison_test: LabeledSet,
}

/// Gaussian blobs with class means `blob_separation` apart along random
/// orthonormal directions, unit noise, and a poisoned training split.
pub fn gen_toy_task(spec: &ScenarioSpec) -> Result<ToyTask> {
    spec.validate_task()?;
    let mut rng = seed::rng(spec.seed, "gen_toy_task");
    let d = spec.input_dim;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    while basis.len() < spec.classes {
        let mut v = gaussian_vec(&mut rng, d);
        for b in &basis {
            let p = crate::linalg::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let r = spec.blob_separation / 2f64.sqrt();
    let geometry = BlobGeometry {
        means: basis.into_iter().map(|b| b.into_iter().map(|x| x * r).collect()).collect(),
        trigger_indices: spec.trigger_indices.clone(),
        trigger_pattern: spec.trigger_pattern.clone(),
        target_label: spec.target_label,
    };
    let (train, train_poison_mask) = geometry.sample_poisoned(spec.n_train, spec.poison_rate, &mut rng)?;
    let clean_test = geometry.sample_clean(spec.n_test, &mut rng);
    let poison_test = geometry.sample_triggered(spec.n_test, &mut rng);
    Ok(ToyTask {
        geometry,
        train,
        train_poison_mask,
        clean_test,
        poison_test,
    })
}

/// CACC on `clean_test`, ASR on `poison_test` (argmax predictions).
pub fn eval_attack(
    model: &ToyClassifier,
    adapters: Option<&AdapterSet>,
    clean_test: &LabeledSet,
    poison_test: &LabeledSet,
    target_label: usize,
) -> Result<AttackMetrics> {
    let clean_preds = model.predict(&clean_test.inputs, adapters)?;
    let pairs: Vec<(usize, usize)> = clean_preds.into_iter().zip(clean_test.labels.iter().copied()).collect();
    let poison_preds = model.predict(&poison_test.inputs, adapters)?;
    cacc_asr(&pairs, &poison_preds, target_label)
}

#[derive(Debug, Clone)]
pub struct ImplantReport {
    pub model: ToyClassifier,
    pub pre: AttackMetrics,
    pub post: AttackMetrics,
    /// Per epoch: mean total loss, mean CE, mean feature-distance term.
    pub epoch_losses: Vec<EpochLoss>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub ce: f64,
    pub reg: f64,
}

/// Trains every parameter on the poisoned training set.
///
/// With `adaptive_reg_alpha > 0`, the poisoned samples of each batch are
/// paired with target-class clean training samples drawn with replacement,
/// and `α·Σᵢ‖fᵢ(poisoned) − fᵢ(clean)‖` is added to the cross-entropy.
pub fn implant_backdoor(
    model: &ToyClassifier,
    task: &ToyTask,
    cfg: &TrainConfig,
    adaptive_reg_alpha: f64,
) -> Result<ImplantReport> {
    cfg.validate()?;
    ensure!(
        adaptive_reg_alpha >= 0.0 && adaptive_reg_alpha.is_finite(),
        Error::InvalidArgument(format!("adaptive_reg_alpha {adaptive_reg_alpha} must be non-negative"))
    );
    let target = task.geometry.target_label;
    let pre = eval_attack(model, None, &task.clean_test, &task.poison_test, target)?;

    let train = &task.train;
    let reference: Vec<usize> = (0..train.len())
        .filter(|&i| !task.train_poison_mask[i] && train.labels[i] == target)
        .collect();
    ensure!(
        adaptive_reg_alpha == 0.0 || !reference.is_empty(),
        Error::InvalidArgument("no clean target-class samples to pair with".into())
    );

    let mut model = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, model.num_params());
    let mut rng = seed::rng(cfg.seed, "implant_backdoor");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut ce, mut reg) = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk);
            let poisoned: Vec<Vec<f64>> = chunk
                .iter()
                .filter(|&&i| task.train_poison_mask[i])
                .map(|&i| train.inputs[i].clone())
                .collect();
            let partners: Vec<Vec<f64>> = if adaptive_reg_alpha > 0.0 {
                poisoned
                    .iter()
                    .map(|_| train.inputs[reference[rng.random_range(0..reference.len())]].clone())
                    .collect()
            } else {
                Vec::new()
            };
            let mut objective = vec![WeightedTerm {
                weight: 1.0,
                term: LossTerm::CrossEntropy {
                    inputs: &batch.inputs,
                    labels: &batch.labels,
                },
            }];
            if adaptive_reg_alpha > 0.0 {
                objective.push(WeightedTerm {
                    weight: adaptive_reg_alpha,
                    term: LossTerm::FeatureDistance {
                        poisoned: &poisoned,
                        clean: &partners,
                    },
                });
            }
            let lg = gradients(&model, None, &objective, Trainable::All)?;
            tot += lg.total;
            ce += lg.terms[0];
            reg += lg.terms.get(1).copied().unwrap_or(0.0);
            steps += 1;
            let mut params = model.params();
            opt.step(&mut params, lg.grads.base.as_deref().expect("all trainable"), cfg.learning_rate);
            model.set_params(&params);
        }
        let s = steps as f64;
        epoch_losses.push(EpochLoss {
            total: tot / s,
            ce: ce / s,
            reg: reg / s,
        });
    }
    let post = eval_attack(&model, None, &task.clean_test, &task.poison_test, target)?;
    Ok(ImplantReport {
        model,
        pre,
        post,
        epoch_losses,
    })
}

/// Runs every input through the model and collects hidden trajectories.
pub fn extract_trajectories(
    model: &ToyClassifier,
    adapters: Option<&AdapterSet>,
    inputs: &[Vec<f64>],
    poison_mask: Option<Vec<bool>>,
    labels: Option<Vec<u32>>,
) -> Result<TrajectoryDataset> {
    let weights = model.effective_weights(adapters)?;
    let samples = inputs
        .iter()
        .map(|x| model.activations_with(&weights, x)?.trajectory())
        .collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(samples, labels, poison_mask)
}

/// Per hidden layer, the distance between the mean activation of `a` and
/// the mean activation of `b`.
pub fn feature_centroid_gap(model: &ToyClassifier, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>> {
    ensure!(
        !a.is_empty() && !b.is_empty(),
        Error::TooFewSamples("centroid gap needs two non-empty sets".into())
    );
    let mean_hidden = |xs: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        let mut acc = vec![vec![0.0; model.hidden_dim()]; model.hidden_layers()];
        for x in xs {
            let act = model.activations(x, None)?;
            for (s, h) in acc.iter_mut().zip(&act.hidden) {
                s.iter_mut().zip(h).for_each(|(u, v)| *u += v);
            }
        }
        let n = xs.len() as f64;
        acc.iter_mut().for_each(|s| s.iter_mut().for_each(|u| *u /= n));
        Ok(acc)
    };
    let (ma, mb) = (mean_hidden(a)?, mean_hidden(b)?);
    Ok(ma
        .iter()
        .zip(&mb)
        .map(|(u, v)| norm(&u.iter().zip(v).map(|(p, q)| p - q).collect::<Vec<_>>()))
        .collect())
}

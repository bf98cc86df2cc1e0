use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::grad::{gradients, LossTerm, Trainable, WeightedTerm};
use super::ToyClassifier;
use crate::error::{ensure, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adamw {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adamw {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 32,
            seed: 2025,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Error::InvalidArgument(format!("learning_rate {} must be positive", self.learning_rate))
        );
        ensure!(
            self.epochs >= 1,
            Error::InvalidArgument("epochs must be at least 1".into())
        );
        ensure!(
            self.batch_size >= 1,
            Error::InvalidArgument("batch_size must be at least 1".into())
        );
        if let OptimizerConfig::Adamw { beta1, beta2, eps, weight_decay } = self.optimizer {
            ensure!(
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0,
                Error::InvalidArgument("invalid AdamW hyperparameters".into())
            );
        }
        Ok(())
    }
}

/// First-order optimizer state over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len(), "optimizer shape");
        match self.config {
            OptimizerConfig::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerConfig::Adamw {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t);
                let bc2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= lr * (update + weight_decay * *p);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: ToyClassifier,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minimizes mean cross-entropy over all base parameters.
pub fn train_supervised(
    model: &ToyClassifier,
    inputs: &[Vec<f64>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    ensure!(
        !inputs.is_empty(),
        Error::TooFewSamples("training set is empty".into())
    );
    ensure!(
        inputs.len() == labels.len(),
        Error::InconsistentDimensions(format!("{} inputs for {} labels", inputs.len(), labels.len()))
    );
    let mut model = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, model.num_params());
    let mut rng = seed::rng(cfg.seed, "train_supervised");
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb: Vec<Vec<f64>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let lg = gradients(
                &model,
                None,
                &[WeightedTerm {
                    weight: 1.0,
                    term: LossTerm::CrossEntropy {
                        inputs: &xb,
                        labels: &yb,
                    },
                }],
                Trainable::All,
            )?;
            loss_sum += lg.total * chunk.len() as f64;
            let mut params = model.params();
            opt.step(&mut params, lg.grads.base.as_deref().expect("all trainable"), cfg.learning_rate);
            model.set_params(&params);
        }
        epoch_losses.push(loss_sum / inputs.len() as f64);
    }
    Ok(TrainReport {
        model,
        epoch_losses,
    })
}

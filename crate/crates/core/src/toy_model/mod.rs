//! A small fully-connected classifier whose hidden activations form feature
//! trajectories.
//!
//! Hidden layers use `tanh` and share one width so that the `L` hidden
//! activations of an input stack into an `L × d` trajectory. The output layer
//! is affine. Any layer can carry a low-rank adapter; the effective weight is
//! then `W + scale·B·A`.

mod adapter;
mod grad;
mod loss;
mod train;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adapter::{Adapter, AdapterConfig, AdapterSet};
pub use grad::{gradients, GradientSet, LossGrad, LossTerm, Trainable, WeightedTerm};
pub use loss::{log_softmax, loss_ce, loss_kl, softmax, KL_PROB_FLOOR};
pub use train::{train_supervised, Optimizer, OptimizerConfig, TrainConfig, TrainReport};

use crate::error::{ensure, Error, Result};
use crate::feature_store::FeatureTrajectory;
use crate::linalg::Matrix;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClassifier {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
}

/// Activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub input: Vec<f64>,
    /// Post-`tanh` hidden vectors, one per hidden layer.
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl Activations {
    pub fn trajectory(&self) -> Result<FeatureTrajectory> {
        FeatureTrajectory::from_rows(&self.hidden)
    }

    /// Input seen by dense layer `i`.
    fn layer_input(&self, i: usize) -> &[f64] {
        if i == 0 {
            &self.input
        } else {
            &self.hidden[i - 1]
        }
    }
}

pub fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    ensure!(
        layer_dims.len() >= 3,
        Error::InvalidArgument(format!(
            "need [d_in, h_1, ..., h_L, C] with at least one hidden layer, got {layer_dims:?}"
        ))
    );
    ensure!(
        layer_dims.iter().all(|&d| d >= 1),
        Error::InvalidArgument(format!("zero-width layer in {layer_dims:?}"))
    );
    let hidden = &layer_dims[1..layer_dims.len() - 1];
    ensure!(
        hidden.iter().all(|&h| h == hidden[0]),
        Error::InvalidArgument(format!("hidden widths must be equal, got {hidden:?}"))
    );
    Ok(())
}

/// Fresh classifier with LeCun-uniform weights, `U(±√(3/fan_in))`, and zero biases.
pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<ToyClassifier> {
    validate_dims(layer_dims)?;
    let mut rng = seed::rng(seed, "init_model");
    let layers = layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (3.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Dense {
                weight: Matrix::from_vec(fan_out, fan_in, data),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(ToyClassifier {
        layer_dims: layer_dims.to_vec(),
        layers,
    })
}

impl ToyClassifier {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        ensure!(
            !layers.is_empty(),
            Error::InvalidArgument("classifier needs layers".into())
        );
        let mut dims = vec![layers[0].weight.cols()];
        for (i, l) in layers.iter().enumerate() {
            ensure!(
                l.weight.cols() == *dims.last().expect("non-empty") && l.bias.len() == l.weight.rows(),
                Error::InconsistentDimensions(format!("layer {i} does not chain"))
            );
            dims.push(l.weight.rows());
        }
        validate_dims(&dims)?;
        Ok(Self {
            layer_dims: dims,
            layers,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_dims.len() - 2
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer_dims[1]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// All parameters flattened: per layer, weight (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "parameter count");
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&params[off..off + n]);
            off += n;
            let m = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + m]);
            off += m;
        }
    }

    /// Order-sensitive checksum over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        checksum_f64(&self.params())
    }

    /// Weights with adapters folded in.
    pub fn effective_weights(&self, adapters: Option<&AdapterSet>) -> Result<Vec<Matrix>> {
        match adapters {
            None => Ok(self.layers.iter().map(|l| l.weight.clone()).collect()),
            Some(a) => {
                a.check_compatible(self)?;
                Ok(self
                    .layers
                    .iter()
                    .zip(a.adapters())
                    .map(|(l, ad)| {
                        let mut w = l.weight.clone();
                        w.add_scaled(&ad.delta(), a.scale());
                        w
                    })
                    .collect())
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        ensure!(
            x.len() == self.input_dim(),
            Error::InconsistentDimensions(format!(
                "input of dim {} for a model expecting {}",
                x.len(),
                self.input_dim()
            ))
        );
        Ok(())
    }

    /// Forward pass with precomputed effective weights.
    pub fn activations_with(&self, weights: &[Matrix], x: &[f64]) -> Result<Activations> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        let mut cur = x.to_vec();
        for (i, (w, l)) in weights.iter().zip(&self.layers).enumerate() {
            let mut z = w.matvec(&cur);
            for (zi, b) in z.iter_mut().zip(&l.bias) {
                *zi += b;
            }
            if i == last {
                return Ok(Activations {
                    input: x.to_vec(),
                    hidden,
                    logits: z,
                });
            }
            z.iter_mut().for_each(|v| *v = v.tanh());
            hidden.push(z.clone());
            cur = z;
        }
        unreachable!("classifier has an output layer")
    }

    pub fn activations(&self, x: &[f64], adapters: Option<&AdapterSet>) -> Result<Activations> {
        let w = self.effective_weights(adapters)?;
        self.activations_with(&w, x)
    }

    /// Logits and hidden-layer trajectory of `x`.
    pub fn forward(&self, x: &[f64], adapters: Option<&AdapterSet>) -> Result<(Vec<f64>, FeatureTrajectory)> {
        let a = self.activations(x, adapters)?;
        let t = a.trajectory()?;
        Ok((a.logits, t))
    }

    pub fn logits(&self, x: &[f64], adapters: Option<&AdapterSet>) -> Result<Vec<f64>> {
        Ok(self.activations(x, adapters)?.logits)
    }

    /// Argmax predictions for a batch; ties go to the lower class.
    pub fn predict(&self, inputs: &[Vec<f64>], adapters: Option<&AdapterSet>) -> Result<Vec<usize>> {
        let w = self.effective_weights(adapters)?;
        inputs
            .iter()
            .map(|x| self.activations_with(&w, x).map(|a| argmax(&a.logits)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ToyClassifier = serde_json::from_str(s)?;
        let rebuilt = ToyClassifier::from_layers(m.layers)?;
        ensure!(
            rebuilt.layer_dims == m.layer_dims,
            Error::InconsistentDimensions("layer_dims disagree with weights".into())
        );
        Ok(rebuilt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// FNV-1a over the IEEE bit patterns.
pub fn checksum_f64(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Returns a standalone model with `W + scale·B·A` folded into each weight.
pub fn merge_adapters(base: &ToyClassifier, adapters: &AdapterSet) -> Result<ToyClassifier> {
    let weights = base.effective_weights(Some(adapters))?;
    let layers = base
        .layers
        .iter()
        .zip(weights)
        .map(|(l, w)| Dense {
            weight: w,
            bias: l.bias.clone(),
        })
        .collect();
    ToyClassifier::from_layers(layers)
}

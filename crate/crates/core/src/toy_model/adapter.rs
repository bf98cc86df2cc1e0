use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ToyClassifier;
use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;
use crate::seed;

/// Standard deviation of the Gaussian `B` initialization.
const B_INIT_STD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Adapter alpha; the update is scaled by `alpha / rank`.
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.rank >= 1,
            Error::InvalidArgument("adapter rank must be at least 1".into())
        );
        ensure!(
            self.alpha.is_finite() && self.alpha > 0.0,
            Error::InvalidArgument(format!("adapter alpha {} must be positive", self.alpha))
        );
        // The toy path has no stochastic layers.
        ensure!(
            self.dropout == 0.0,
            Error::InvalidArgument(format!(
                "adapter dropout {} is not supported on the toy model; use 0",
                self.dropout
            ))
        );
        Ok(())
    }
}

/// Low-rank update for one dense layer: `A` is `r × in`, `B` is `out × r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub a: Matrix,
    pub b: Matrix,
}

impl Adapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `B·A`, unscaled.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a)
    }
}

/// One adapter per dense layer of a classifier.
///
/// Each layer's rank is `min(rank, out, in)`, so the narrow output layer gets
/// a smaller adapter than the hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    config: AdapterConfig,
    adapters: Vec<Adapter>,
}

impl AdapterSet {
    /// `A ~ U(±1/√in)`, `B ~ N(0, 1e-3²)`: nonzero so the student starts a
    /// hair away from the teacher, where the KL gradient is not identically 0.
    pub fn init(model: &ToyClassifier, config: &AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, "adapter_init");
        let normal = Normal::new(0.0, B_INIT_STD).expect("valid std");
        let adapters = model
            .layers()
            .iter()
            .map(|l| {
                let (out, inp) = (l.weight.rows(), l.weight.cols());
                let r = config.rank.min(out).min(inp);
                let bound = 1.0 / (inp as f64).sqrt();
                let a = (0..r * inp).map(|_| rng.random_range(-bound..bound)).collect();
                let b = (0..out * r).map(|_| normal.sample(&mut rng)).collect();
                Adapter {
                    a: Matrix::from_vec(r, inp, a),
                    b: Matrix::from_vec(out, r, b),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            adapters,
        })
    }

    /// Adapters with `B = 0`: an exact identity on the model's function.
    pub fn zeros(model: &ToyClassifier, config: &AdapterConfig, seed: u64) -> Result<Self> {
        let mut set = Self::init(model, config, seed)?;
        for ad in &mut set.adapters {
            ad.b.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(set)
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn scale(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [Adapter] {
        &mut self.adapters
    }

    pub fn check_compatible(&self, model: &ToyClassifier) -> Result<()> {
        ensure!(
            self.adapters.len() == model.layers().len(),
            Error::InconsistentDimensions(format!(
                "{} adapters for {} layers",
                self.adapters.len(),
                model.layers().len()
            ))
        );
        for (i, (ad, l)) in self.adapters.iter().zip(model.layers()).enumerate() {
            let r = ad.rank();
            ensure!(
                r >= 1
                    && ad.a.cols() == l.weight.cols()
                    && ad.b.rows() == l.weight.rows()
                    && ad.b.cols() == r
                    && r <= l.weight.rows().min(l.weight.cols()),
                Error::InconsistentDimensions(format!("adapter {i} does not fit its layer"))
            );
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.adapters
            .iter()
            .map(|a| a.a.as_slice().len() + a.b.as_slice().len())
            .sum()
    }

    /// Flattened as, per layer, `A` then `B`, both row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for ad in &self.adapters {
            out.extend_from_slice(ad.a.as_slice());
            out.extend_from_slice(ad.b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "adapter parameter count");
        let mut off = 0;
        for ad in &mut self.adapters {
            for m in [&mut ad.a, &mut ad.b] {
                let n = m.as_slice().len();
                m.as_mut_slice().copy_from_slice(&params[off..off + n]);
                off += n;
            }
        }
    }

    pub fn checksum(&self) -> u64 {
        super::checksum_f64(&self.params())
    }
}

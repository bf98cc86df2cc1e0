//! Detector fitting on clean data.
//!
//! Layers are ranked by Calinski–Harabasz score on the labelled calibration
//! set, the top `k` get a class-agnostic centroid and a shrunk covariance, the
//! raw scores of the calibration set fix the standardization, and the fused
//! scores of the validation set fix the threshold.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::feature_store::TrajectoryDataset;
use crate::linalg::{cholesky, Matrix};
use crate::scoring;

/// Stand-in for an infinite CH score (zero within-cluster dispersion).
pub const CH_SENTINEL: f64 = f64::MAX;

/// How per-layer Mahalanobis distances collapse into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub k: usize,
    pub aggregate_mode: AggregateMode,
    pub shrinkage_gamma: f64,
    pub fusion_alpha: f64,
    pub target_frr: f64,
    pub jitter: f64,
    /// Singular values below `sv_rel_tol · s₁` are dropped from the
    /// spectral-score denominator.
    pub sv_rel_tol: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            k: 3,
            aggregate_mode: AggregateMode::Mean,
            shrinkage_gamma: 0.1,
            fusion_alpha: 0.9,
            target_frr: 0.05,
            jitter: 1e-6,
            sv_rel_tol: 1e-12,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        ensure!(
            self.k >= 1 && self.k <= num_layers,
            Error::InvalidArgument(format!("k = {} must lie in [1, {num_layers}]", self.k))
        );
        ensure!(
            (0.0..=1.0).contains(&self.shrinkage_gamma),
            Error::InvalidArgument(format!(
                "shrinkage_gamma = {} must lie in [0, 1]",
                self.shrinkage_gamma
            ))
        );
        ensure!(
            (0.0..=1.0).contains(&self.fusion_alpha),
            Error::InvalidArgument(format!("fusion_alpha = {} must lie in [0, 1]", self.fusion_alpha))
        );
        ensure!(
            self.target_frr > 0.0 && self.target_frr <= 0.5,
            Error::InvalidArgument(format!("target_frr = {} must lie in (0, 0.5]", self.target_frr))
        );
        ensure!(
            self.jitter > 0.0 && self.jitter.is_finite(),
            Error::InvalidArgument(format!("jitter = {} must be positive", self.jitter))
        );
        ensure!(
            (0.0..1.0).contains(&self.sv_rel_tol),
            Error::InvalidArgument(format!("sv_rel_tol = {} must lie in [0, 1)", self.sv_rel_tol))
        );
        Ok(())
    }
}

/// Centroid and covariance factor of one selected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer_index: usize,
    pub centroid: Vec<f64>,
    /// Lower-triangular Cholesky factor of the shrunk covariance.
    pub covariance_factor: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub std: f64,
}

impl ScoreStats {
    /// Mean and population standard deviation.
    pub fn from_scores(scores: &[f64]) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// A fitted detector. Immutable once built; scoring only reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DetectorDoc", into = "DetectorDoc")]
pub struct DetectorModel {
    pub num_layers: usize,
    pub dim: usize,
    pub selected_layers: Vec<usize>,
    pub per_layer: Vec<LayerStats>,
    pub layer_ch_scores: Vec<f64>,
    pub aggregate_mode: AggregateMode,
    pub md_stats: ScoreStats,
    pub ss_stats: ScoreStats,
    pub fusion_alpha: f64,
    pub threshold: f64,
    pub target_frr: f64,
    pub sv_rel_tol: f64,
    pub config: DetectorConfig,
}

impl DetectorModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
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

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    layer_index: usize,
    centroid: Vec<f64>,
    /// Row-major lower triangle: (0,0), (1,0), (1,1), (2,0), ...
    covariance_factor_lower: Vec<f64>,
}

/// On-disk form of a [`DetectorModel`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorDoc {
    format: String,
    num_layers: usize,
    dim: usize,
    selected_layers: Vec<usize>,
    layers: Vec<LayerDoc>,
    layer_ch_scores: Vec<f64>,
    aggregate_mode: AggregateMode,
    md_stats: ScoreStats,
    ss_stats: ScoreStats,
    fusion_alpha: f64,
    threshold: f64,
    target_frr: f64,
    sv_rel_tol: f64,
    config: DetectorConfig,
}

const DETECTOR_FORMAT: &str = "dup-guard-detector/1";

impl From<DetectorModel> for DetectorDoc {
    fn from(m: DetectorModel) -> Self {
        let layers = m
            .per_layer
            .into_iter()
            .map(|s| {
                let d = s.centroid.len();
                let mut tri = Vec::with_capacity(d * (d + 1) / 2);
                for i in 0..d {
                    tri.extend_from_slice(&s.covariance_factor.row(i)[..=i]);
                }
                LayerDoc {
                    layer_index: s.layer_index,
                    centroid: s.centroid,
                    covariance_factor_lower: tri,
                }
            })
            .collect();
        DetectorDoc {
            format: DETECTOR_FORMAT.into(),
            num_layers: m.num_layers,
            dim: m.dim,
            selected_layers: m.selected_layers,
            layers,
            layer_ch_scores: m.layer_ch_scores,
            aggregate_mode: m.aggregate_mode,
            md_stats: m.md_stats,
            ss_stats: m.ss_stats,
            fusion_alpha: m.fusion_alpha,
            threshold: m.threshold,
            target_frr: m.target_frr,
            sv_rel_tol: m.sv_rel_tol,
            config: m.config,
        }
    }
}

impl TryFrom<DetectorDoc> for DetectorModel {
    type Error = Error;

    fn try_from(doc: DetectorDoc) -> Result<Self> {
        ensure!(
            doc.format == DETECTOR_FORMAT,
            Error::InvalidArgument(format!("unknown detector format {:?}", doc.format))
        );
        let d = doc.dim;
        let mut per_layer = Vec::with_capacity(doc.layers.len());
        for l in doc.layers {
            ensure!(
                l.centroid.len() == d && l.covariance_factor_lower.len() == d * (d + 1) / 2,
                Error::InconsistentDimensions(format!(
                    "layer {} stats do not match dim {d}",
                    l.layer_index
                ))
            );
            let mut factor = Matrix::zeros(d, d);
            let mut it = l.covariance_factor_lower.into_iter();
            for i in 0..d {
                for j in 0..=i {
                    factor[(i, j)] = it.next().expect("length checked");
                }
            }
            ensure!(
                (0..d).all(|i| factor[(i, i)] > 0.0),
                Error::InvalidArgument("covariance factor diagonal must be positive".into())
            );
            per_layer.push(LayerStats {
                layer_index: l.layer_index,
                centroid: l.centroid,
                covariance_factor: factor,
            });
        }
        ensure!(
            per_layer.iter().map(|s| s.layer_index).eq(doc.selected_layers.iter().copied()),
            Error::InconsistentDimensions("layer stats do not follow selected_layers".into())
        );
        ensure!(
            doc.selected_layers.iter().all(|&i| i < doc.num_layers),
            Error::InvalidArgument("selected layer out of range".into())
        );
        ensure!(
            doc.md_stats.std > 0.0 && doc.ss_stats.std > 0.0,
            Error::InvalidArgument("score standard deviations must be positive".into())
        );
        Ok(DetectorModel {
            num_layers: doc.num_layers,
            dim: d,
            selected_layers: doc.selected_layers,
            per_layer,
            layer_ch_scores: doc.layer_ch_scores,
            aggregate_mode: doc.aggregate_mode,
            md_stats: doc.md_stats,
            ss_stats: doc.ss_stats,
            fusion_alpha: doc.fusion_alpha,
            threshold: doc.threshold,
            target_frr: doc.target_frr,
            sv_rel_tol: doc.sv_rel_tol,
            config: doc.config,
        })
    }
}

/// Calinski–Harabasz index of `features` under `labels`:
/// `(B / (C − 1)) / (W / (n − C))`.
///
/// `B = 0, W = 0` gives 0; `W = 0, B > 0` gives [`CH_SENTINEL`].
pub fn ch_score(features: &[Vec<f64>], labels: &[u32]) -> Result<f64> {
    ensure!(
        features.len() == labels.len(),
        Error::InconsistentDimensions(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        ))
    );
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    let mut sums: BTreeMap<u32, (usize, Vec<f64>)> = BTreeMap::new();
    for (x, &y) in features.iter().zip(labels) {
        let e = sums.entry(y).or_insert_with(|| (0, vec![0.0; d]));
        e.0 += 1;
        for (s, v) in e.1.iter_mut().zip(x) {
            *s += v;
        }
    }
    let c = sums.len();
    ensure!(
        c >= 2,
        Error::InvalidArgument(format!("CH score needs at least 2 classes, got {c}"))
    );
    ensure!(
        n > c,
        Error::TooFewSamples(format!("CH score needs n > C, got n = {n}, C = {c}"))
    );
    let mut overall = vec![0.0; d];
    for x in features {
        for (o, v) in overall.iter_mut().zip(x) {
            *o += v;
        }
    }
    overall.iter_mut().for_each(|o| *o /= n as f64);
    let means: BTreeMap<u32, (usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(y, (cnt, s))| (y, (cnt, s.into_iter().map(|v| v / cnt as f64).collect())))
        .collect();

    let between: f64 = means
        .values()
        .map(|(cnt, m)| *cnt as f64 * sq_dist(m, &overall))
        .sum();
    let within: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, y)| sq_dist(x, &means[y].1))
        .sum();

    if within == 0.0 {
        return Ok(if between == 0.0 { 0.0 } else { CH_SENTINEL });
    }
    Ok((between / (c - 1) as f64) / (within / (n - c) as f64))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` largest scores (ties to the lower index), ascending.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    ensure!(
        k >= 1 && k <= scores.len(),
        Error::InvalidArgument(format!("k = {k} must lie in [1, {}]", scores.len()))
    );
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// Class-agnostic mean of the rows.
pub fn fit_centroid(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    ensure!(
        !features.is_empty(),
        Error::TooFewSamples("centroid of an empty set".into())
    );
    let d = features[0].len();
    let mut c = vec![0.0; d];
    for x in features {
        for (ci, v) in c.iter_mut().zip(x) {
            *ci += v;
        }
    }
    let n = features.len() as f64;
    c.iter_mut().for_each(|v| *v /= n);
    Ok(c)
}

/// Sample covariance with divisor `n`.
pub fn sample_covariance(features: &[Vec<f64>]) -> Result<Matrix> {
    let mean = fit_centroid(features)?;
    let d = mean.len();
    let mut s = Matrix::zeros(d, d);
    for x in features {
        let centered: Vec<f64> = x.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in 0..=i {
                s[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let n = features.len() as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = s[(i, j)] / n;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// `(1 − γ)·S + γ·(tr S / d)·I`
pub fn shrink(s: &Matrix, gamma: f64) -> Matrix {
    let d = s.rows();
    let target = s.trace() / d as f64;
    let mut out = s.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v *= 1.0 - gamma);
    for i in 0..d {
        out[(i, i)] += gamma * target;
    }
    out
}

/// Number of times the jitter is multiplied by 10 before giving up.
const JITTER_ESCALATIONS: u32 = 3;

/// Cholesky factor of the shrunk covariance of `features`.
///
/// When the shrunk matrix is not positive definite, `jitter·I` is added and
/// the jitter multiplied by 10 up to three times before failing.
pub fn fit_shrunk_covariance(features: &[Vec<f64>], gamma: f64, jitter: f64) -> Result<Matrix> {
    ensure!(
        features.len() >= 2,
        Error::TooFewSamples(format!(
            "covariance needs at least 2 samples, got {}",
            features.len()
        ))
    );
    ensure!(
        (0.0..=1.0).contains(&gamma),
        Error::InvalidArgument(format!("shrinkage gamma {gamma} outside [0, 1]"))
    );
    let sigma = shrink(&sample_covariance(features)?, gamma);
    if let Some(l) = cholesky(&sigma) {
        return Ok(l);
    }
    let mut eps = jitter;
    for attempt in 0..=JITTER_ESCALATIONS {
        if attempt > 0 {
            eps *= 10.0;
        }
        let mut jittered = sigma.clone();
        for i in 0..jittered.rows() {
            jittered[(i, i)] += eps;
        }
        if let Some(l) = cholesky(&jittered) {
            return Ok(l);
        }
    }
    Err(Error::Factorization { jitter: eps })
}

/// Fits a detector: CH layer ranking and stats on `calib`, threshold on `valid`.
pub fn fit_detector(
    calib: &TrajectoryDataset,
    valid: &TrajectoryDataset,
    cfg: &DetectorConfig,
) -> Result<DetectorModel> {
    calib.validate()?;
    valid.validate()?;
    let labels = calib.labels.as_ref().ok_or_else(|| {
        Error::InvalidArgument("calibration set needs labels for CH layer ranking".into())
    })?;
    let (num_layers, dim) = calib
        .shape()
        .ok_or_else(|| Error::TooFewSamples("empty calibration set".into()))?;
    ensure!(
        !valid.is_empty(),
        Error::TooFewSamples("empty validation set".into())
    );
    ensure!(
        valid.shape() == Some((num_layers, dim)),
        Error::InconsistentDimensions(format!(
            "validation set shape {:?} differs from calibration {num_layers}×{dim}",
            valid.shape()
        ))
    );
    cfg.validate(num_layers)?;

    let layer_ch_scores = (0..num_layers)
        .map(|i| ch_score(&calib.layer_matrix(i), labels))
        .collect::<Result<Vec<_>>>()?;
    let selected_layers = select_top_k(&layer_ch_scores, cfg.k)?;

    let per_layer = selected_layers
        .iter()
        .map(|&i| {
            let feats = calib.layer_matrix(i);
            Ok(LayerStats {
                layer_index: i,
                centroid: fit_centroid(&feats)?,
                covariance_factor: fit_shrunk_covariance(&feats, cfg.shrinkage_gamma, cfg.jitter)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut model = DetectorModel {
        num_layers,
        dim,
        selected_layers,
        per_layer,
        layer_ch_scores,
        aggregate_mode: cfg.aggregate_mode,
        md_stats: ScoreStats { mean: 0.0, std: 1.0 },
        ss_stats: ScoreStats { mean: 0.0, std: 1.0 },
        fusion_alpha: cfg.fusion_alpha,
        threshold: 0.0,
        target_frr: cfg.target_frr,
        sv_rel_tol: cfg.sv_rel_tol,
        config: cfg.clone(),
    };

    let mut md_raw = Vec::with_capacity(calib.len());
    let mut ss_raw = Vec::with_capacity(calib.len());
    for t in &calib.samples {
        md_raw.push(scoring::md_score(t, &model)?.0);
        ss_raw.push(scoring::ss_score_with_tol(t, cfg.sv_rel_tol)?);
    }
    model.md_stats = ScoreStats::from_scores(&md_raw);
    model.ss_stats = ScoreStats::from_scores(&ss_raw);
    ensure!(
        model.md_stats.std > 0.0,
        Error::DegenerateCalibration("Mahalanobis scores have zero spread on the calibration set".into())
    );
    ensure!(
        model.ss_stats.std > 0.0,
        Error::DegenerateCalibration("spectral scores have zero spread on the calibration set".into())
    );

    let fused = valid
        .samples
        .iter()
        .map(|t| scoring::score(t, &model).map(|b| b.fused))
        .collect::<Result<Vec<_>>>()?;
    model.threshold = scoring::calibrate_threshold(&fused, cfg.target_frr)?;
    Ok(model)
}

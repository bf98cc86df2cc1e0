//! Per-sample anomaly scoring against a fitted [`DetectorModel`].
//!
//! The static score aggregates Mahalanobis distances over the selected layers;
//! the dynamic score is the dominance of the leading singular value of the
//! inter-layer difference matrix, computed over all layers. Both are
//! standardized with calibration statistics and fused linearly.

use std::io::Write;

use serde::Serialize;

use crate::calibration::{AggregateMode, DetectorModel, LayerStats};
use crate::error::{ensure, Error, Result};
use crate::feature_store::{FeatureTrajectory, TrajectoryDataset};
use crate::linalg::{dot, singular_values, solve_lower, solve_lower_transposed, Matrix};

/// Default relative cut-off for singular values in [`ss_score`].
pub const DEFAULT_SV_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreBreakdown {
    pub md_raw: f64,
    pub ss_raw: f64,
    pub md_z: f64,
    pub ss_z: f64,
    pub fused: f64,
    pub per_layer_md: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub breakdown: ScoreBreakdown,
    pub is_poisoned: bool,
}

/// `√((f − c)ᵀ Σ⁻¹ (f − c))` using the stored Cholesky factor of `Σ`.
pub fn mahalanobis(feature: &[f64], stats: &LayerStats) -> Result<f64> {
    let d = stats.centroid.len();
    ensure!(
        feature.len() == d && stats.covariance_factor.rows() == d,
        Error::InconsistentDimensions(format!(
            "feature of dim {} against layer stats of dim {d}",
            feature.len()
        ))
    );
    let diff: Vec<f64> = feature.iter().zip(&stats.centroid).map(|(f, c)| f - c).collect();
    let y = solve_lower(&stats.covariance_factor, &diff);
    let z = solve_lower_transposed(&stats.covariance_factor, &y);
    Ok(dot(&diff, &z).max(0.0).sqrt())
}

/// Aggregated Mahalanobis score and the per-layer distances behind it.
pub fn md_score(traj: &FeatureTrajectory, model: &DetectorModel) -> Result<(f64, Vec<(usize, f64)>)> {
    let mut per_layer = Vec::with_capacity(model.per_layer.len());
    for stats in &model.per_layer {
        ensure!(
            stats.layer_index < traj.layers(),
            Error::InconsistentDimensions(format!(
                "selected layer {} but trajectory has {} layers",
                stats.layer_index,
                traj.layers()
            ))
        );
        let m = mahalanobis(&traj.layer_f64(stats.layer_index), stats)?;
        per_layer.push((stats.layer_index, m));
    }
    ensure!(
        !per_layer.is_empty(),
        Error::InvalidArgument("detector has no selected layers".into())
    );
    let raw = aggregate(per_layer.iter().map(|p| p.1), model.aggregate_mode);
    Ok((raw, per_layer))
}

fn aggregate(values: impl Iterator<Item = f64>, mode: AggregateMode) -> f64 {
    match mode {
        AggregateMode::Mean => {
            let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            sum / n as f64
        }
        AggregateMode::Max => values.fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Inter-layer difference matrix, `(L − 1) × d`.
pub fn difference_matrix(traj: &FeatureTrajectory) -> Result<Matrix> {
    let l = traj.layers();
    ensure!(
        l >= 2,
        Error::InvalidArgument(format!("spectral score needs at least 2 layers, got {l}"))
    );
    let d = traj.dim();
    let mut delta = Matrix::zeros(l - 1, d);
    for i in 0..l - 1 {
        let (a, b) = (traj.layer(i), traj.layer(i + 1));
        for (j, out) in delta.row_mut(i).iter_mut().enumerate() {
            *out = f64::from(b[j]) - f64::from(a[j]);
        }
    }
    Ok(delta)
}

/// `s₁ / Σⱼ sⱼ` over the singular values of the difference matrix.
pub fn ss_score(traj: &FeatureTrajectory) -> Result<f64> {
    ss_score_with_tol(traj, DEFAULT_SV_REL_TOL)
}

/// [`ss_score`] with an explicit relative singular-value cut-off.
pub fn ss_score_with_tol(traj: &FeatureTrajectory, rel_tol: f64) -> Result<f64> {
    let delta = difference_matrix(traj)?;
    Ok(spectral_ratio(&singular_values(&delta), rel_tol))
}

/// Leading-value share of descending singular values; 0 for an all-zero set.
pub fn spectral_ratio(sv: &[f64], rel_tol: f64) -> f64 {
    let s1 = sv.first().copied().unwrap_or(0.0);
    if s1 <= 0.0 {
        return 0.0;
    }
    let cutoff = rel_tol * s1;
    let total: f64 = sv.iter().filter(|&&s| s >= cutoff).sum();
    s1 / total
}

pub fn standardize(raw: f64, mu: f64, sigma: f64) -> Result<f64> {
    ensure!(
        sigma > 0.0,
        Error::InvalidArgument(format!("standard deviation must be positive, got {sigma}"))
    );
    Ok((raw - mu) / sigma)
}

pub fn fuse(md_z: f64, ss_z: f64, alpha: f64) -> Result<f64> {
    ensure!(
        (0.0..=1.0).contains(&alpha),
        Error::InvalidArgument(format!("fusion alpha {alpha} outside [0, 1]"))
    );
    Ok(alpha * md_z + (1.0 - alpha) * ss_z)
}

/// Threshold flagging at most `target_frr` of `scores` under strict `>`.
///
/// Returns the `⌈(1 − target_frr)·n⌉`-th smallest score.
pub fn calibrate_threshold(scores: &[f64], target_frr: f64) -> Result<f64> {
    ensure!(
        !scores.is_empty(),
        Error::TooFewSamples("cannot calibrate a threshold on no scores".into())
    );
    ensure!(
        target_frr > 0.0 && target_frr < 1.0,
        Error::InvalidArgument(format!("target_frr {target_frr} outside (0, 1)"))
    );
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Guard the ceiling against representation error, e.g. 0.95·20 = 19.000000000000004.
    let raw = (1.0 - target_frr) * n as f64;
    let m = if (raw - raw.round()).abs() < 1e-9 {
        raw.round() as usize
    } else {
        raw.ceil() as usize
    };
    Ok(sorted[m.clamp(1, n) - 1])
}

/// Full score breakdown of one trajectory.
pub fn score(traj: &FeatureTrajectory, model: &DetectorModel) -> Result<ScoreBreakdown> {
    ensure!(
        traj.layers() == model.num_layers && traj.dim() == model.dim,
        Error::InconsistentDimensions(format!(
            "trajectory {}×{} against detector {}×{}",
            traj.layers(),
            traj.dim(),
            model.num_layers,
            model.dim
        ))
    );
    let (md_raw, per_layer_md) = md_score(traj, model)?;
    let ss_raw = ss_score_with_tol(traj, model.sv_rel_tol)?;
    let md_z = standardize(md_raw, model.md_stats.mean, model.md_stats.std)?;
    let ss_z = standardize(ss_raw, model.ss_stats.mean, model.ss_stats.std)?;
    let fused = fuse(md_z, ss_z, model.fusion_alpha)?;
    Ok(ScoreBreakdown {
        md_raw,
        ss_raw,
        md_z,
        ss_z,
        fused,
        per_layer_md,
    })
}

pub fn detect(traj: &FeatureTrajectory, model: &DetectorModel) -> Result<Verdict> {
    let breakdown = score(traj, model)?;
    let is_poisoned = breakdown.fused > model.threshold;
    Ok(Verdict {
        breakdown,
        is_poisoned,
    })
}

/// Result of scoring a dataset: verdicts plus the flagged / unflagged parts.
#[derive(Debug, Clone)]
pub struct BatchDetection {
    pub verdicts: Vec<Verdict>,
    pub poisoned: TrajectoryDataset,
    pub clean: TrajectoryDataset,
    /// Original indices of `poisoned` and `clean`, in order.
    pub poisoned_indices: Vec<usize>,
    pub clean_indices: Vec<usize>,
}

/// Scores every sample, using up to `threads` worker threads.
pub fn detect_batch_threads(
    dataset: &TrajectoryDataset,
    model: &DetectorModel,
    threads: usize,
) -> Result<BatchDetection> {
    dataset.validate()?;
    let n = dataset.len();
    let threads = threads.clamp(1, n.max(1));
    let verdicts: Vec<Verdict> = if threads == 1 {
        dataset
            .samples
            .iter()
            .map(|t| detect(t, model))
            .collect::<Result<_>>()?
    } else {
        let chunk = n.div_ceil(threads);
        let parts: Vec<Result<Vec<Verdict>>> = std::thread::scope(|s| {
            let handles: Vec<_> = dataset
                .samples
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|t| detect(t, model)).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scoring thread panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(n);
        for p in parts {
            out.extend(p?);
        }
        out
    };
    let (poisoned_indices, clean_indices): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| verdicts[i].is_poisoned);
    Ok(BatchDetection {
        poisoned: dataset.select(&poisoned_indices),
        clean: dataset.select(&clean_indices),
        verdicts,
        poisoned_indices,
        clean_indices,
    })
}

pub fn detect_batch(dataset: &TrajectoryDataset, model: &DetectorModel) -> Result<BatchDetection> {
    detect_batch_threads(dataset, model, 1)
}

/// Writes the per-sample verdict CSV. `true_poison` adds a last column.
pub fn write_verdict_csv(
    out: &mut impl Write,
    verdicts: &[Verdict],
    true_poison: Option<&[bool]>,
) -> std::io::Result<()> {
    write!(out, "sample_index,md_raw,ss_raw,md_z,ss_z,fused,is_poisoned")?;
    if true_poison.is_some() {
        write!(out, ",true_poison")?;
    }
    writeln!(out)?;
    for (i, v) in verdicts.iter().enumerate() {
        let b = &v.breakdown;
        write!(
            out,
            "{i},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            b.md_raw,
            b.ss_raw,
            b.md_z,
            b.ss_z,
            b.fused,
            u8::from(v.is_poisoned)
        )?;
        if let Some(tp) = true_poison {
            write!(out, ",{}", u8::from(tp[i]))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(centroid: Vec<f64>, factor: Matrix) -> LayerStats {
        LayerStats {
            layer_index: 0,
            centroid,
            covariance_factor: factor,
        }
    }

    #[test]
    fn mahalanobis_identity_and_scaled() {
        let s = stats(vec![0.0, 0.0], Matrix::identity(2));
        assert!((mahalanobis(&[3.0, 4.0], &s).unwrap() - 5.0).abs() < 1e-15);
        let r2 = 2f64.sqrt();
        let s = stats(vec![1.0, 1.0], Matrix::diag(&[r2, r2]));
        assert!((mahalanobis(&[3.0, 1.0], &s).unwrap() - r2).abs() < 1e-12);
        assert_eq!(mahalanobis(&[1.0, 1.0], &s).unwrap(), 0.0);
        assert!(mahalanobis(&[1.0], &s).is_err());
    }

    fn traj(rows: &[Vec<f64>]) -> FeatureTrajectory {
        FeatureTrajectory::from_rows(rows).unwrap()
    }

    #[test]
    fn ss_rank_one_diag_and_zero() {
        // Rows of Δ are multiples of (1, 2, -1).
        let t = traj(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, -1.0], vec![3.0, 6.0, -3.0]]);
        assert!((ss_score(&t).unwrap() - 1.0).abs() < 1e-12);
        // Δ = diag(3, 1)
        let t = traj(&[vec![0.0, 0.0], vec![3.0, 0.0], vec![3.0, 1.0]]);
        assert!((ss_score(&t).unwrap() - 0.75).abs() < 1e-12);
        let t = traj(&vec![vec![2.0, 1.0]; 4]);
        assert_eq!(ss_score(&t).unwrap(), 0.0);
    }

    #[test]
    fn ss_equal_singular_values() {
        // Δ = 2·I₃ → three equal singular values → 1/3.
        let t = traj(&[
            vec![0.0, 0.0, 0.0],
            vec![2.0, 0.0, 0.0],
            vec![2.0, 2.0, 0.0],
            vec![2.0, 2.0, 2.0],
        ]);
        assert!((ss_score(&t).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize(5.0, 3.0, 2.0).unwrap(), 1.0);
        assert_eq!(standardize(3.0, 3.0, 2.0).unwrap(), 0.0);
        assert_eq!(standardize(-1.0, 1.0, 1.0).unwrap(), -2.0);
        assert!(standardize(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse(1.7, -3.0, 1.0).unwrap(), 1.7);
        assert_eq!(fuse(1.7, -3.0, 0.0).unwrap(), -3.0);
        assert!((fuse(1.0, -1.0, 0.9).unwrap() - 0.8).abs() < 1e-15);
        assert!(fuse(0.0, 0.0, -0.1).is_err());
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f64> = (1..=20).map(f64::from).collect();
        let tau = calibrate_threshold(&scores, 0.05).unwrap();
        assert_eq!(tau, 19.0);
        assert_eq!(scores.iter().filter(|&&s| s > tau).count(), 1);
        assert_eq!(calibrate_threshold(&[2.5; 7], 0.05).unwrap(), 2.5);
        assert_eq!(calibrate_threshold(&[4.0], 0.05).unwrap(), 4.0);
        assert!(calibrate_threshold(&[], 0.05).is_err());
    }

    #[test]
    fn verdict_csv_shape() {
        let v = Verdict {
            breakdown: ScoreBreakdown {
                md_raw: 1.0,
                ss_raw: 0.5,
                md_z: 0.0,
                ss_z: 0.0,
                fused: 0.0,
                per_layer_md: vec![],
            },
            is_poisoned: true,
        };
        let mut buf = Vec::new();
        write_verdict_csv(&mut buf, &[v.clone(), v], Some(&[true, false])).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].ends_with("is_poisoned,true_poison"));
        assert!(lines[2].ends_with(",1,0"));
    }
}

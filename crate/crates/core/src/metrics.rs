//! Detection metrics (AUC, FAR, FRR) and attack metrics (CACC, ASR).
//!
//! FRR is the fraction of truly clean samples that get flagged; FAR is the
//! fraction of truly poisoned samples that pass as clean. This is the
//! orientation under which the threshold is calibrated on clean data.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scoring::Verdict;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auc: f64,
    /// `None` when there are no poisoned samples.
    pub far: Option<f64>,
    /// `None` when there are no clean samples.
    pub frr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub cacc: f64,
    pub asr: f64,
}

/// Probability that a random poison score beats a random clean score, ties
/// counting one half (Mann–Whitney U / (n_clean · n_poison)).
pub fn auc(clean_scores: &[f64], poison_scores: &[f64]) -> Result<f64> {
    ensure!(
        !clean_scores.is_empty() && !poison_scores.is_empty(),
        Error::TooFewSamples("AUC needs at least one clean and one poisoned score".into())
    );
    let mut clean = clean_scores.to_vec();
    clean.sort_by(f64::total_cmp);
    // Twice the U statistic, kept in integers so ties stay exact.
    let mut twice_u: u128 = 0;
    for &p in poison_scores {
        let below = clean.partition_point(|&c| c < p);
        let not_above = clean.partition_point(|&c| c <= p);
        twice_u += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * clean.len() as u128 * poison_scores.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

/// `(FAR, FRR)` from verdicts against ground truth.
pub fn far_frr(verdicts: &[Verdict], true_poison: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    let flags: Vec<bool> = verdicts.iter().map(|v| v.is_poisoned).collect();
    far_frr_flags(&flags, true_poison)
}

/// [`far_frr`] over bare flag vectors.
pub fn far_frr_flags(flagged: &[bool], true_poison: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    ensure!(
        flagged.len() == true_poison.len(),
        Error::InconsistentDimensions(format!(
            "{} verdicts for {} ground-truth flags",
            flagged.len(),
            true_poison.len()
        ))
    );
    let (mut poison, mut missed, mut clean, mut rejected) = (0usize, 0usize, 0usize, 0usize);
    for (&f, &t) in flagged.iter().zip(true_poison) {
        if t {
            poison += 1;
            missed += usize::from(!f);
        } else {
            clean += 1;
            rejected += usize::from(f);
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok((rate(missed, poison), rate(rejected, clean)))
}

/// AUC of fused scores plus FAR/FRR of the verdicts.
pub fn detection_metrics(verdicts: &[Verdict], true_poison: &[bool]) -> Result<DetectionMetrics> {
    let (far, frr) = far_frr(verdicts, true_poison)?;
    let (mut clean, mut poison) = (Vec::new(), Vec::new());
    for (v, &t) in verdicts.iter().zip(true_poison) {
        if t {
            poison.push(v.breakdown.fused);
        } else {
            clean.push(v.breakdown.fused);
        }
    }
    Ok(DetectionMetrics {
        auc: auc(&clean, &poison)?,
        far,
        frr,
    })
}

/// Clean accuracy over `(prediction, label)` pairs and the share of poisoned
/// predictions landing on `target_label`.
///
/// Callers keep target-class sources out of `poison_preds`.
pub fn cacc_asr(clean_preds: &[(usize, usize)], poison_preds: &[usize], target_label: usize) -> Result<AttackMetrics> {
    ensure!(
        !clean_preds.is_empty() && !poison_preds.is_empty(),
        Error::TooFewSamples("CACC/ASR need non-empty clean and poisoned predictions".into())
    );
    let correct = clean_preds.iter().filter(|(p, y)| p == y).count();
    let hits = poison_preds.iter().filter(|&&p| p == target_label).count();
    Ok(AttackMetrics {
        cacc: correct as f64 / clean_preds.len() as f64,
        asr: hits as f64 / poison_preds.len() as f64,
    })
}

/// Rounds to six decimals for human-facing reports.
pub fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

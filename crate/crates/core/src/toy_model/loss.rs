use crate::error::{ensure, Error, Result};

/// Probabilities are floored here before taking logs inside the KL term.
pub const KL_PROB_FLOOR: f64 = 1e-12;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−log softmax(logits)[label]`
pub fn loss_ce(logits: &[f64], label: usize) -> Result<f64> {
    ensure!(
        label < logits.len(),
        Error::InvalidArgument(format!("label {label} out of range for {} classes", logits.len()))
    );
    Ok(-log_softmax(logits)[label])
}

/// `∂CE/∂logits = softmax − onehot`
pub(crate) fn ce_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

fn floored_log_probs(logits: &[f64]) -> Vec<f64> {
    let floor = KL_PROB_FLOOR.ln();
    log_softmax(logits).into_iter().map(|l| l.max(floor)).collect()
}

/// `KL(softmax(student) ‖ softmax(teacher))`, probabilities floored at 1e-12.
pub fn loss_kl(student_logits: &[f64], teacher_logits: &[f64]) -> Result<f64> {
    ensure!(
        student_logits.len() == teacher_logits.len(),
        Error::InconsistentDimensions(format!(
            "student has {} logits, teacher {}",
            student_logits.len(),
            teacher_logits.len()
        ))
    );
    Ok(kl_value(student_logits, teacher_logits))
}

pub(crate) fn kl_value(student_logits: &[f64], teacher_logits: &[f64]) -> f64 {
    let p = softmax(student_logits);
    let lp = floored_log_probs(student_logits);
    let lq = floored_log_probs(teacher_logits);
    let kl: f64 = p.iter().zip(lp.iter().zip(&lq)).map(|(pi, (a, b))| pi * (a - b)).sum();
    kl.max(0.0)
}

/// `∂KL/∂zᵢ = pᵢ·(log pᵢ − log qᵢ − KL)` with respect to the student logits.
pub(crate) fn kl_grad(student_logits: &[f64], teacher_logits: &[f64]) -> Vec<f64> {
    let p = softmax(student_logits);
    let lp = floored_log_probs(student_logits);
    let lq = floored_log_probs(teacher_logits);
    let kl: f64 = p.iter().zip(lp.iter().zip(&lq)).map(|(pi, (a, b))| pi * (a - b)).sum();
    p.iter()
        .zip(lp.iter().zip(&lq))
        .map(|(pi, (a, b))| pi * (a - b - kl))
        .collect()
}

//! Exact reverse-mode gradients for weighted sums of batch-mean losses.

use super::loss::{ce_grad, kl_grad, kl_value, log_softmax};
use super::{Activations, AdapterSet, ToyClassifier};
use crate::error::{ensure, Error, Result};
use crate::linalg::{norm, Matrix};

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Base weights and biases, plus adapters when present.
    All,
    AdaptersOnly,
}

/// One batch-mean loss.
#[derive(Debug, Clone, Copy)]
pub enum LossTerm<'a> {
    /// Mean cross-entropy against `labels`.
    CrossEntropy {
        inputs: &'a [Vec<f64>],
        labels: &'a [usize],
    },
    /// Mean `KL(model ‖ teacher)`; each sample's term is clamped at `cap`,
    /// and a clamped sample contributes no gradient.
    Kl {
        inputs: &'a [Vec<f64>],
        teacher_logits: &'a [Vec<f64>],
        cap: Option<f64>,
    },
    /// Mean over pairs of `Σᵢ ‖fᵢ(poisoned) − fᵢ(clean)‖₂` across hidden
    /// layers; gradients flow through both sides of each pair.
    FeatureDistance {
        poisoned: &'a [Vec<f64>],
        clean: &'a [Vec<f64>],
    },
}

#[derive(Debug, Clone, Copy)]
pub struct WeightedTerm<'a> {
    pub weight: f64,
    pub term: LossTerm<'a>,
}

/// Gradients laid out like [`ToyClassifier::params`] / [`AdapterSet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub base: Option<Vec<f64>>,
    pub adapters: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    /// `Σ weight·term`
    pub total: f64,
    /// Unweighted value of each term, in objective order.
    pub terms: Vec<f64>,
    pub grads: GradientSet,
}

struct RawGrads {
    w: Vec<Matrix>,
    b: Vec<Vec<f64>>,
}

impl RawGrads {
    fn zeros(model: &ToyClassifier) -> Self {
        Self {
            w: model
                .layers()
                .iter()
                .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            b: model.layers().iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }
}

/// Accumulates `scale · ∂/∂(W_eff, b)` of a loss whose gradient with respect
/// to the logits is `dlogits` and with respect to the hidden activations is
/// `dhidden` (either may be absent).
fn backward(
    weights: &[Matrix],
    act: &Activations,
    dlogits: Option<&[f64]>,
    dhidden: Option<&[Vec<f64>]>,
    scale: f64,
    raw: &mut RawGrads,
) {
    let last = weights.len() - 1;
    // Gradient w.r.t. the pre-activation of the layer being processed.
    let mut delta: Vec<f64> = match dlogits {
        Some(g) => g.iter().map(|v| v * scale).collect(),
        None => vec![0.0; act.logits.len()],
    };
    for i in (0..=last).rev() {
        let input = act.layer_input(i);
        let gw = &mut raw.w[i];
        for (r, &dr) in delta.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            for (g, x) in gw.row_mut(r).iter_mut().zip(input) {
                *g += dr * x;
            }
        }
        for (g, d) in raw.b[i].iter_mut().zip(&delta) {
            *g += d;
        }
        if i == 0 {
            break;
        }
        // Into hidden layer i − 1 (post-activation), then through tanh.
        let mut dh = weights[i].matvec_t(&delta);
        if let Some(extra) = dhidden {
            for (a, e) in dh.iter_mut().zip(&extra[i - 1]) {
                *a += scale * e;
            }
        }
        let h = &act.hidden[i - 1];
        delta = dh.iter().zip(h).map(|(g, hv)| g * (1.0 - hv * hv)).collect();
    }
}

fn check_pairs<A, B>(a: &[A], b: &[B], what: &str) -> Result<()> {
    ensure!(
        a.len() == b.len(),
        Error::InconsistentDimensions(format!("{what}: {} inputs vs {} targets", a.len(), b.len()))
    );
    Ok(())
}

/// Loss value and gradients of `Σ weight·term` over the trainable parameters.
///
/// Terms with weight 0 are evaluated but not differentiated; terms over an
/// empty batch evaluate to 0.
pub fn gradients(
    model: &ToyClassifier,
    adapters: Option<&AdapterSet>,
    objective: &[WeightedTerm<'_>],
    trainable: Trainable,
) -> Result<LossGrad> {
    ensure!(
        trainable == Trainable::All || adapters.is_some(),
        Error::InvalidArgument("adapter-only gradients requested without adapters".into())
    );
    let weights = model.effective_weights(adapters)?;
    let mut raw = RawGrads::zeros(model);
    let mut terms = Vec::with_capacity(objective.len());
    let mut total = 0.0;

    for wt in objective {
        let differentiate = wt.weight != 0.0;
        let value = match wt.term {
            LossTerm::CrossEntropy { inputs, labels } => {
                check_pairs(inputs, labels, "cross-entropy")?;
                let n = inputs.len();
                let mut sum = 0.0;
                for (x, &y) in inputs.iter().zip(labels) {
                    let act = model.activations_with(&weights, x)?;
                    ensure!(
                        y < act.logits.len(),
                        Error::InvalidArgument(format!("label {y} out of range"))
                    );
                    sum -= log_softmax(&act.logits)[y];
                    if differentiate {
                        let g = ce_grad(&act.logits, y);
                        backward(&weights, &act, Some(&g), None, wt.weight / n as f64, &mut raw);
                    }
                }
                if n == 0 {
                    0.0
                } else {
                    sum / n as f64
                }
            }
            LossTerm::Kl {
                inputs,
                teacher_logits,
                cap,
            } => {
                check_pairs(inputs, teacher_logits, "KL")?;
                let n = inputs.len();
                let mut sum = 0.0;
                for (x, t) in inputs.iter().zip(teacher_logits) {
                    let act = model.activations_with(&weights, x)?;
                    check_pairs(&act.logits, t, "KL logits")?;
                    let v = kl_value(&act.logits, t);
                    let clamped = cap.is_some_and(|c| v >= c);
                    sum += if clamped { cap.expect("checked") } else { v };
                    if differentiate && !clamped {
                        let g = kl_grad(&act.logits, t);
                        backward(&weights, &act, Some(&g), None, wt.weight / n as f64, &mut raw);
                    }
                }
                if n == 0 {
                    0.0
                } else {
                    sum / n as f64
                }
            }
            LossTerm::FeatureDistance { poisoned, clean } => {
                check_pairs(poisoned, clean, "feature distance")?;
                let n = poisoned.len();
                let mut sum = 0.0;
                for (xp, xc) in poisoned.iter().zip(clean) {
                    let ap = model.activations_with(&weights, xp)?;
                    let ac = model.activations_with(&weights, xc)?;
                    let mut gp = Vec::with_capacity(ap.hidden.len());
                    for (hp, hc) in ap.hidden.iter().zip(&ac.hidden) {
                        let diff: Vec<f64> = hp.iter().zip(hc).map(|(a, b)| a - b).collect();
                        let dist = norm(&diff);
                        sum += dist;
                        gp.push(if dist > 0.0 {
                            diff.into_iter().map(|v| v / dist).collect()
                        } else {
                            vec![0.0; hp.len()]
                        });
                    }
                    if differentiate {
                        let s = wt.weight / n as f64;
                        backward(&weights, &ap, None, Some(&gp), s, &mut raw);
                        backward(&weights, &ac, None, Some(&gp), -s, &mut raw);
                    }
                }
                if n == 0 {
                    0.0
                } else {
                    sum / n as f64
                }
            }
        };
        total += wt.weight * value;
        terms.push(value);
    }

    let base = (trainable == Trainable::All).then(|| {
        let mut flat = Vec::with_capacity(model.num_params());
        for (w, b) in raw.w.iter().zip(&raw.b) {
            flat.extend_from_slice(w.as_slice());
            flat.extend_from_slice(b);
        }
        flat
    });
    let adapters = adapters.map(|set| {
        let s = set.scale();
        let mut flat = Vec::with_capacity(set.num_params());
        for (ad, gw) in set.adapters().iter().zip(&raw.w) {
            // W_eff = W + s·B·A  ⇒  ∂/∂A = s·Bᵀ·G,  ∂/∂B = s·G·Aᵀ
            let mut ga = ad.b.transpose().matmul(gw);
            ga.as_mut_slice().iter_mut().for_each(|v| *v *= s);
            let mut gb = gw.matmul(&ad.a.transpose());
            gb.as_mut_slice().iter_mut().for_each(|v| *v *= s);
            flat.extend_from_slice(ga.as_slice());
            flat.extend_from_slice(gb.as_slice());
        }
        flat
    });
    Ok(LossGrad {
        total,
        terms,
        grads: GradientSet { base, adapters },
    })
}

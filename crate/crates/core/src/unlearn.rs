//! Backdoor purification by teacher–student unlearning over adapters.
//!
//! The backdoored model is the frozen teacher. A student shares its base
//! weights and carries trainable adapters. Each step pairs a batch of
//! flagged inputs, on which the student is pushed away from the teacher
//! (KL, clamped per sample), with a batch of unflagged labelled inputs, on
//! which the student keeps fitting the labels:
//!
//! `L_total = −λ_asr·L_unlearn + λ_acc·L_preserve`

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backdoor_lab::{eval_attack, LabeledSet};
use crate::error::{ensure, Error, Result};
use crate::metrics::AttackMetrics;
use crate::seed;
use crate::toy_model::{
    gradients, AdapterConfig, AdapterSet, LossTerm, Optimizer, OptimizerConfig, ToyClassifier,
    TrainConfig, Trainable, WeightedTerm,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub lambda_asr: f64,
    pub lambda_acc: f64,
    /// Per-sample cap on the KL term, in nats.
    pub kl_cap: f64,
    pub train: TrainConfig,
    pub adapter: AdapterConfig,
    /// Stop once the unlearning loss sits at the cap and the preservation
    /// loss is within 5% of its first-epoch value.
    pub early_stop: bool,
    /// Independent adapter initializations; the run with the lowest final
    /// `L_total` is kept.
    pub restarts: usize,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            lambda_asr: 1.0,
            lambda_acc: 1.0,
            kl_cap: 10.0,
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 20,
                batch_size: 32,
                seed: 2025,
                optimizer: OptimizerConfig::default(),
            },
            adapter: AdapterConfig::default(),
            early_stop: true,
            restarts: 8,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda_asr >= 0.0 && self.lambda_acc >= 0.0,
            Error::InvalidArgument("loss weights must be non-negative".into())
        );
        ensure!(
            self.lambda_asr + self.lambda_acc > 0.0,
            Error::InvalidArgument("lambda_asr and lambda_acc cannot both be zero".into())
        );
        ensure!(
            self.kl_cap > 0.0,
            Error::InvalidArgument(format!("kl_cap {} must be positive", self.kl_cap))
        );
        ensure!(
            self.restarts >= 1,
            Error::InvalidArgument("restarts must be at least 1".into())
        );
        self.train.validate()?;
        self.adapter.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlearnLosses {
    pub unlearn: f64,
    pub preserve: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub losses: UnlearnLosses,
    /// Gradient over the adapter parameters.
    pub adapter_grads: Vec<f64>,
}

/// Evaluation sets for before/after attack metrics.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub clean_test: &'a LabeledSet,
    pub poison_test: &'a LabeledSet,
    pub target_label: usize,
}

#[derive(Debug, Clone)]
pub struct PurifyReport {
    /// Student base weights, identical to the teacher's.
    pub student_base: ToyClassifier,
    pub adapters: AdapterSet,
    /// Full-pass losses before training.
    pub initial: UnlearnLosses,
    /// Full-pass losses after each epoch.
    pub epochs: Vec<UnlearnLosses>,
    /// Index of the kept restart.
    pub restart: usize,
    /// Final full-pass `L_total` of every restart.
    pub restart_totals: Vec<f64>,
    pub pre: Option<AttackMetrics>,
    pub post: Option<AttackMetrics>,
}

fn objective<'a>(
    batch_p: &'a [Vec<f64>],
    teacher_logits: &'a [Vec<f64>],
    batch_c: &'a LabeledSet,
    cfg: &UnlearnConfig,
) -> [WeightedTerm<'a>; 2] {
    [
        WeightedTerm {
            weight: -cfg.lambda_asr,
            term: LossTerm::Kl {
                inputs: batch_p,
                teacher_logits,
                cap: Some(cfg.kl_cap),
            },
        },
        WeightedTerm {
            weight: cfg.lambda_acc,
            term: LossTerm::CrossEntropy {
                inputs: &batch_c.inputs,
                labels: &batch_c.labels,
            },
        },
    ]
}

/// Losses and adapter gradient of one paired step.
pub fn unlearn_step(
    teacher: &ToyClassifier,
    student: &AdapterSet,
    batch_p: &[Vec<f64>],
    batch_c: &LabeledSet,
    cfg: &UnlearnConfig,
) -> Result<StepResult> {
    ensure!(
        cfg.lambda_asr == 0.0 || !batch_p.is_empty(),
        Error::TooFewSamples("unlearning batch is empty while lambda_asr > 0".into())
    );
    ensure!(
        cfg.lambda_acc == 0.0 || !batch_c.is_empty(),
        Error::TooFewSamples("preservation batch is empty while lambda_acc > 0".into())
    );
    let teacher_logits = batch_p
        .iter()
        .map(|x| teacher.logits(x, None))
        .collect::<Result<Vec<_>>>()?;
    let obj = objective(batch_p, &teacher_logits, batch_c, cfg);
    let lg = gradients(teacher, Some(student), &obj, Trainable::AdaptersOnly)?;
    Ok(StepResult {
        losses: UnlearnLosses {
            unlearn: lg.terms[0],
            preserve: lg.terms[1],
            total: lg.total,
        },
        adapter_grads: lg.grads.adapters.expect("adapters present"),
    })
}

fn full_pass(
    teacher: &ToyClassifier,
    student: &AdapterSet,
    d_p: &[Vec<f64>],
    d_c: &LabeledSet,
    cfg: &UnlearnConfig,
) -> Result<UnlearnLosses> {
    let teacher_logits = d_p
        .iter()
        .map(|x| teacher.logits(x, None))
        .collect::<Result<Vec<_>>>()?;
    let obj = objective(d_p, &teacher_logits, d_c, cfg).map(|t| WeightedTerm { weight: 0.0, ..t });
    let lg = gradients(teacher, Some(student), &obj, Trainable::AdaptersOnly)?;
    let (unlearn, preserve) = (lg.terms[0], lg.terms[1]);
    Ok(UnlearnLosses {
        unlearn,
        preserve,
        total: -cfg.lambda_asr * unlearn + cfg.lambda_acc * preserve,
    })
}

/// Cycles through a shuffled index list, reshuffling at each wrap.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn take(&mut self, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct Attempt {
    adapters: AdapterSet,
    initial: UnlearnLosses,
    epochs: Vec<UnlearnLosses>,
}

fn adapter_seed(seed: u64, restart: usize) -> u64 {
    if restart == 0 {
        seed::derive(seed, "purify_adapters")
    } else {
        seed::derive(seed, &format!("purify_adapters/{restart}"))
    }
}

fn attempt(
    teacher: &ToyClassifier,
    d_p: &[Vec<f64>],
    d_c: &LabeledSet,
    cfg: &UnlearnConfig,
    restart: usize,
) -> Result<Attempt> {
    let mut adapters = AdapterSet::init(teacher, &cfg.adapter, adapter_seed(cfg.train.seed, restart))?;
    let mut rng = seed::rng(cfg.train.seed, "purify");
    let bs = cfg.train.batch_size;
    let steps = d_p.len().div_ceil(bs).max(d_c.len().div_ceil(bs)).max(1);
    let (mut cyc_p, mut cyc_c) = (Cycler::new(d_p.len()), Cycler::new(d_c.len()));

    let mut opt = Optimizer::new(cfg.train.optimizer, adapters.num_params());
    let initial = full_pass(teacher, &adapters, d_p, d_c, cfg)?;
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    for _ in 0..cfg.train.epochs {
        for _ in 0..steps {
            let batch_p: Vec<Vec<f64>> = cyc_p
                .take(bs.min(d_p.len()), &mut rng)
                .into_iter()
                .map(|i| d_p[i].clone())
                .collect();
            let batch_c = d_c.select(&cyc_c.take(bs.min(d_c.len()), &mut rng));
            let step = unlearn_step(teacher, &adapters, &batch_p, &batch_c, cfg)?;
            let mut params = adapters.params();
            opt.step(&mut params, &step.adapter_grads, cfg.train.learning_rate);
            adapters.set_params(&params);
        }
        let losses = full_pass(teacher, &adapters, d_p, d_c, cfg)?;
        epochs.push(losses);
        if cfg.early_stop && cfg.lambda_asr > 0.0 {
            let first_preserve = epochs[0].preserve;
            let preserved = cfg.lambda_acc == 0.0 || losses.preserve <= first_preserve * 1.05;
            if losses.unlearn >= cfg.kl_cap && preserved {
                break;
            }
        }
    }
    Ok(Attempt {
        adapters,
        initial,
        epochs,
    })
}

/// Trains student adapters against the frozen `teacher`.
///
/// `d_p` holds flagged inputs, `d_c` unflagged labelled inputs. An epoch is
/// `max(⌈|d_p|/b⌉, ⌈|d_c|/b⌉)` paired steps, the shorter side cycling. The
/// schedule and batch order do not depend on the loss weights, so a zero
/// weight only switches its term off.
///
/// KL ascent from a student that matches the teacher can settle on making
/// the student more confident in the teacher's answer, where the divergence
/// saturates near zero. Each restart draws fresh adapter noise; the one with
/// the lowest final `L_total` on `d_p`/`d_c` is returned, ties going to the
/// earlier restart.
pub fn purify(
    teacher: &ToyClassifier,
    d_p: &[Vec<f64>],
    d_c: &LabeledSet,
    cfg: &UnlearnConfig,
    eval: Option<EvalSets<'_>>,
) -> Result<PurifyReport> {
    cfg.validate()?;
    ensure!(
        cfg.lambda_asr == 0.0 || !d_p.is_empty(),
        Error::TooFewSamples("no detected-poison samples; run detection first or set lambda_asr = 0".into())
    );
    ensure!(
        cfg.lambda_acc == 0.0 || !d_c.is_empty(),
        Error::TooFewSamples("no detected-clean samples while lambda_acc > 0".into())
    );
    let pre = match eval {
        Some(e) => Some(eval_attack(teacher, None, e.clean_test, e.poison_test, e.target_label)?),
        None => None,
    };

    let mut best: Option<(usize, Attempt)> = None;
    let mut restart_totals = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let a = attempt(teacher, d_p, d_c, cfg, r)?;
        let total = a.epochs.last().map_or(a.initial.total, |l| l.total);
        restart_totals.push(total);
        let better = match &best {
            None => true,
            Some((i, _)) => total < restart_totals[*i],
        };
        if better {
            best = Some((r, a));
        }
    }
    let (restart, kept) = best.expect("at least one restart");

    let student_base = teacher.clone();
    let post = match eval {
        Some(e) => Some(eval_attack(&student_base, Some(&kept.adapters), e.clean_test, e.poison_test, e.target_label)?),
        None => None,
    };
    Ok(PurifyReport {
        student_base,
        adapters: kept.adapters,
        initial: kept.initial,
        epochs: kept.epochs,
        restart,
        restart_totals,
        pre,
        post,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_model::init_model;

    fn setup() -> (ToyClassifier, Vec<Vec<f64>>, LabeledSet) {
        let m = init_model(&[4, 6, 6, 2], 3).unwrap();
        let p = vec![vec![1.0, 0.5, -0.5, 2.0], vec![0.0, 1.0, 1.0, -1.0]];
        let c = LabeledSet {
            inputs: vec![vec![0.2, 0.1, 0.0, 0.3], vec![-1.0, 0.0, 0.5, 0.5]],
            labels: vec![0, 1],
        };
        (m, p, c)
    }

    #[test]
    fn zero_adapters_give_zero_unlearn_loss_and_gradient() {
        let (m, p, _) = setup();
        let ad = AdapterSet::zeros(&m, &AdapterConfig::default(), 1).unwrap();
        let cfg = UnlearnConfig {
            lambda_acc: 0.0,
            ..UnlearnConfig::default()
        };
        let r = unlearn_step(&m, &ad, &p, &LabeledSet::default(), &cfg).unwrap();
        assert_eq!(r.losses.unlearn, 0.0);
        assert!(r.adapter_grads.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn pure_unlearning_total_is_negated_kl() {
        let (m, p, _) = setup();
        let mut ad = AdapterSet::init(&m, &AdapterConfig::default(), 1).unwrap();
        let big: Vec<f64> = ad.params().iter().map(|v| v * 500.0).collect();
        ad.set_params(&big);
        let cfg = UnlearnConfig {
            lambda_acc: 0.0,
            ..UnlearnConfig::default()
        };
        let r = unlearn_step(&m, &ad, &p, &LabeledSet::default(), &cfg).unwrap();
        assert!(r.losses.unlearn > 0.0);
        assert_eq!(r.losses.total, -r.losses.unlearn);
    }

    #[test]
    fn kl_is_clamped_per_sample() {
        use crate::linalg::Matrix;
        // Teacher: h = tanh(x·[1, 1]), logits = [30·(h₀ + h₁), 0].
        let mut teacher = init_model(&[1, 2, 2], 0).unwrap();
        teacher.layers_mut()[0].weight = Matrix::from_vec(2, 1, vec![1.0, 1.0]);
        teacher.layers_mut()[1].weight = Matrix::from_vec(2, 2, vec![30.0, 30.0, 0.0, 0.0]);
        // Student output-layer adapter flips the logits: scale·B·A = [[-60, -60], [60, 60]].
        let mut ad = AdapterSet::zeros(&teacher, &AdapterConfig::default(), 0).unwrap();
        let scale = ad.scale();
        let out = &mut ad.adapters_mut()[1];
        out.a = Matrix::identity(2);
        out.b = Matrix::from_vec(2, 2, vec![-60.0, -60.0, 60.0, 60.0]);
        out.b.as_mut_slice().iter_mut().for_each(|v| *v /= scale);

        let x = vec![vec![1.0]];
        let kl = crate::toy_model::loss_kl(
            &teacher.logits(&x[0], Some(&ad)).unwrap(),
            &teacher.logits(&x[0], None).unwrap(),
        )
        .unwrap();
        assert!(kl > 20.0, "{kl}");

        let cfg = UnlearnConfig {
            lambda_acc: 0.0,
            ..UnlearnConfig::default()
        };
        let r = unlearn_step(&teacher, &ad, &x, &LabeledSet::default(), &cfg).unwrap();
        assert_eq!(r.losses.unlearn, 10.0);
        assert!(r.adapter_grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn config_errors() {
        let (m, p, c) = setup();
        let both_zero = UnlearnConfig {
            lambda_asr: 0.0,
            lambda_acc: 0.0,
            ..UnlearnConfig::default()
        };
        assert!(purify(&m, &p, &c, &both_zero, None).is_err());
        assert!(purify(&m, &[], &c, &UnlearnConfig::default(), None).is_err());
        let no_acc = UnlearnConfig {
            lambda_acc: 0.0,
            ..UnlearnConfig::default()
        };
        assert!(purify(&m, &p, &LabeledSet::default(), &no_acc, None).is_ok());
    }

    #[test]
    fn purify_freezes_teacher_and_base() {
        let (m, p, c) = setup();
        let before = m.checksum();
        let cfg = UnlearnConfig {
            train: TrainConfig {
                epochs: 3,
                ..UnlearnConfig::default().train
            },
            ..UnlearnConfig::default()
        };
        let r = purify(&m, &p, &c, &cfg, None).unwrap();
        assert_eq!(m.checksum(), before);
        assert_eq!(r.student_base.checksum(), before);
        let fresh = AdapterSet::init(&m, &cfg.adapter, seed::derive(cfg.train.seed, "purify_adapters")).unwrap();
        assert_ne!(r.adapters.checksum(), fresh.checksum());
    }
}

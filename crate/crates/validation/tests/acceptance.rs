//! Exit criteria. Each test prints one `[PASS]`/`[FAIL]` line and then
//! asserts it. Run with `cargo test -p dup-guard --test acceptance -- --nocapture`
//! to see the lines.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use dup_guard::backdoor_lab::{gen_synthetic_trajectories, ScenarioSpec};
use dup_guard::calibration::{fit_detector, DetectorConfig, LayerStats};
use dup_guard::feature_store::{split_calib_valid, SplitConfig, TrajectoryDataset};
use dup_guard::linalg::{cholesky, singular_values, Matrix};
use dup_guard::metrics::{auc, detection_metrics, AttackMetrics, DetectionMetrics};
use dup_guard::pipeline::{
    detect_stage, implant_stage, purify_stage, run_pipeline, Detected, Implanted, PipelineConfig, PipelineReport,
};
use dup_guard::scoring::{detect_batch, mahalanobis};
use dup_guard::seed;
use dup_guard::toy_model::{
    gradients, init_model, loss_ce, loss_kl, AdapterConfig, AdapterSet, LossTerm, ToyClassifier, Trainable,
    WeightedTerm,
};
use dup_guard::unlearn::{PurifyReport, UnlearnConfig};

const SEED: u64 = 2025;

fn verdict(name: &str, pass: bool, detail: impl AsRef<str>) {
    println!("[{}] {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(pass, "{name}: {}", detail.as_ref());
}

fn rng(label: &str) -> rand_chacha::ChaCha8Rng {
    seed::rng(SEED, label)
}

fn gaussian(r: &mut impl Rng) -> f64 {
    // Box-Muller keeps this file free of the implementation's samplers.
    let u1: f64 = r.random_range(f64::EPSILON..1.0);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| gaussian(r)).collect()).collect()
}

#[test]
fn oracle_mahalanobis() {
    let t = Instant::now();
    let mut r = rng("acceptance/mahalanobis");
    let d = 8;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = DMatrix::from_fn(d, d, |_, _| gaussian(&mut r));
        let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        let centroid: Vec<f64> = (0..d).map(|_| gaussian(&mut r)).collect();
        let feature: Vec<f64> = (0..d).map(|_| 3.0 * gaussian(&mut r)).collect();

        let rows: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| sigma[(i, j)]).collect()).collect();
        let factor = cholesky(&Matrix::from_rows(&rows)).expect("positive definite");
        let stats = LayerStats {
            layer_index: 0,
            centroid: centroid.clone(),
            covariance_factor: factor,
        };
        let got = mahalanobis(&feature, &stats).unwrap();

        let diff = DVector::from_iterator(d, feature.iter().zip(&centroid).map(|(f, c)| f - c));
        let inv = sigma.try_inverse().expect("invertible");
        let want = (diff.transpose() * inv * &diff)[(0, 0)].sqrt();
        worst = worst.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
    }
    let elapsed = t.elapsed();
    verdict(
        "oracle equivalence: mahalanobis",
        worst <= 1e-8 && elapsed < Duration::from_secs(1),
        format!("100 cases, max rel err {worst:.2e} (tol 1e-8), {elapsed:.2?} (< 1 s)"),
    );
}

#[test]
fn oracle_singular_values() {
    let t = Instant::now();
    let mut r = rng("acceptance/svd");
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let rows = r.random_range(1..=12);
        let cols = r.random_range(1..=32);
        let delta = random_matrix(&mut r, rows, cols);
        let got = singular_values(&Matrix::from_rows(&delta));

        let m = DMatrix::from_fn(rows, cols, |i, j| delta[i][j]);
        let mut eig: Vec<f64> = SymmetricEigen::new(m.transpose() * &m)
            .eigenvalues
            .iter()
            .map(|&l| l.max(0.0).sqrt())
            .collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        eig.truncate(rows.min(cols));
        assert_eq!(got.len(), eig.len());
        let scale = eig[0].max(1.0);
        for (g, w) in got.iter().zip(&eig) {
            worst = worst.max((g - w).abs() / scale);
        }
    }
    let elapsed = t.elapsed();
    verdict(
        "oracle equivalence: spectral singular values",
        worst <= 1e-8 && elapsed < Duration::from_secs(1),
        format!("100 matrices up to 12x32, max err {worst:.2e} relative to s1 (tol 1e-8), {elapsed:.2?} (< 1 s)"),
    );
}

#[test]
fn oracle_auc() {
    let t = Instant::now();
    let mut r = rng("acceptance/auc");
    let mut mismatches = 0;
    for case in 0..50 {
        let nc = r.random_range(1..=200);
        let np = r.random_range(1..=200);
        // Coarse values on half the cases to force ties.
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            if case % 2 == 0 {
                r.random_range(0..20) as f64
            } else {
                gaussian(r)
            }
        };
        let clean: Vec<f64> = (0..nc).map(|_| draw(&mut r)).collect();
        let poison: Vec<f64> = (0..np).map(|_| draw(&mut r)).collect();
        let mut twice = 0u64;
        for p in &poison {
            for c in &clean {
                twice += if p > c { 2 } else if p == c { 1 } else { 0 };
            }
        }
        let want = twice as f64 / (2 * nc * np) as f64;
        if auc(&clean, &poison).unwrap() != want {
            mismatches += 1;
        }
    }
    let elapsed = t.elapsed();
    verdict(
        "oracle equivalence: auc",
        mismatches == 0 && elapsed < Duration::from_secs(1),
        format!("50 score sets, {mismatches} inexact matches, {elapsed:.2?} (< 1 s)"),
    );
}

// Loss values recomputed from forward passes, independent of the backward
// pass under test.

fn ce_value(m: &ToyClassifier, ad: &AdapterSet, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, &y)| loss_ce(&m.logits(x, Some(ad)).unwrap(), y).unwrap())
        .sum::<f64>()
        / xs.len() as f64
}

fn kl_value(m: &ToyClassifier, ad: &AdapterSet, xs: &[Vec<f64>], teacher: &[Vec<f64>]) -> f64 {
    xs.iter()
        .zip(teacher)
        .map(|(x, t)| loss_kl(&m.logits(x, Some(ad)).unwrap(), t).unwrap())
        .sum::<f64>()
        / xs.len() as f64
}

fn reg_value(m: &ToyClassifier, ad: &AdapterSet, poisoned: &[Vec<f64>], clean: &[Vec<f64>]) -> f64 {
    poisoned
        .iter()
        .zip(clean)
        .map(|(p, c)| {
            let (hp, hc) = (m.activations(p, Some(ad)).unwrap().hidden, m.activations(c, Some(ad)).unwrap().hidden);
            hp.iter()
                .zip(&hc)
                .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
                .sum::<f64>()
        })
        .sum::<f64>()
        / poisoned.len() as f64
}

#[test]
fn gradient_correctness() {
    let t = Instant::now();
    let mut r = rng("acceptance/gradients");
    let base = init_model(&[8, 16, 16, 2], SEED).unwrap();
    let cfg = AdapterConfig {
        rank: 2,
        alpha: 4.0,
        dropout: 0.0,
    };
    let mut adapters = AdapterSet::init(&base, &cfg, SEED).unwrap();
    let ap: Vec<f64> = (0..adapters.num_params()).map(|_| 0.3 * gaussian(&mut r)).collect();
    adapters.set_params(&ap);
    let teacher = init_model(&[8, 16, 16, 2], SEED + 1).unwrap();

    let xs = random_matrix(&mut r, 6, 8);
    let ys: Vec<usize> = (0..6).map(|i| i % 2).collect();
    let clean = random_matrix(&mut r, 6, 8);
    let teacher_logits: Vec<Vec<f64>> = xs.iter().map(|x| teacher.logits(x, None).unwrap()).collect();

    let ce = LossTerm::CrossEntropy { inputs: &xs, labels: &ys };
    let kl = LossTerm::Kl {
        inputs: &xs,
        teacher_logits: &teacher_logits,
        cap: None,
    };
    let reg = LossTerm::FeatureDistance {
        poisoned: &xs,
        clean: &clean,
    };
    type Value<'a> = Box<dyn Fn(&ToyClassifier, &AdapterSet) -> f64 + 'a>;
    let cases: Vec<(&str, Vec<WeightedTerm>, Value)> = vec![
        ("CE", vec![WeightedTerm { weight: 1.0, term: ce }], Box::new(|m, a| ce_value(m, a, &xs, &ys))),
        (
            "KL",
            vec![WeightedTerm { weight: 1.0, term: kl }],
            Box::new(|m, a| kl_value(m, a, &xs, &teacher_logits)),
        ),
        ("L_reg", vec![WeightedTerm { weight: 1.0, term: reg }], Box::new(|m, a| reg_value(m, a, &xs, &clean))),
        (
            "L_total",
            vec![WeightedTerm { weight: -1.0, term: kl }, WeightedTerm { weight: 1.0, term: ce }],
            Box::new(|m, a| -kl_value(m, a, &xs, &teacher_logits) + ce_value(m, a, &xs, &ys)),
        ),
    ];

    let h = 1e-4;
    let mut report = Vec::new();
    let mut all_ok = true;
    for (name, terms, value) in &cases {
        let lg = gradients(&base, Some(&adapters), terms, Trainable::All).unwrap();
        let mut worst: f64 = 0.0;
        let check = |analytic: f64, numeric: f64| (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);

        let bp = base.params();
        for (i, &g) in lg.grads.base.as_ref().unwrap().iter().enumerate() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            let (mut pp, mut pm) = (bp.clone(), bp.clone());
            pp[i] += h;
            pm[i] -= h;
            plus.set_params(&pp);
            minus.set_params(&pm);
            let numeric = (value(&plus, &adapters) - value(&minus, &adapters)) / (2.0 * h);
            worst = worst.max(check(g, numeric));
        }
        for (i, &g) in lg.grads.adapters.as_ref().unwrap().iter().enumerate() {
            let mut plus = adapters.clone();
            let mut minus = adapters.clone();
            let (mut pp, mut pm) = (ap.clone(), ap.clone());
            pp[i] += h;
            pm[i] -= h;
            plus.set_params(&pp);
            minus.set_params(&pm);
            let numeric = (value(&base, &plus) - value(&base, &minus)) / (2.0 * h);
            worst = worst.max(check(g, numeric));
        }
        all_ok &= worst <= 1e-4;
        report.push(format!("{name} {worst:.1e}"));
    }
    let elapsed = t.elapsed();
    verdict(
        "gradient correctness",
        all_ok && elapsed < Duration::from_secs(10),
        format!(
            "[8,16,16,2] rank 2, max rel err {} (tol 1e-4), {elapsed:.2?} (< 10 s)",
            report.join(", ")
        ),
    );
}

/// Clean calib/valid sets and a 500 + 500 test set from one scenario.
fn synthetic_sets(spec: &ScenarioSpec) -> (TrajectoryDataset, TrajectoryDataset, TrajectoryDataset) {
    let pool = gen_synthetic_trajectories(&ScenarioSpec {
        seed: seed::derive(spec.seed, "acceptance/clean"),
        n_clean: 1000,
        n_poison: 0,
        ..spec.clone()
    })
    .unwrap();
    let (calib, valid) = split_calib_valid(
        &pool,
        &SplitConfig {
            calib_fraction: 0.5,
            seed: spec.seed,
        },
    )
    .unwrap();
    let test = gen_synthetic_trajectories(&ScenarioSpec {
        n_clean: 500,
        n_poison: 500,
        ..spec.clone()
    })
    .unwrap();
    (calib, valid, test)
}

fn synthetic_spec() -> ScenarioSpec {
    ScenarioSpec {
        seed: SEED,
        layers: 8,
        dim: 32,
        shift_magnitude: 4.0,
        shifted_layers: vec![5, 6, 7],
        ..ScenarioSpec::default()
    }
}

fn detection_on(
    sets: &(TrajectoryDataset, TrajectoryDataset, TrajectoryDataset),
    cfg: &DetectorConfig,
) -> DetectionMetrics {
    let det = fit_detector(&sets.0, &sets.1, cfg).unwrap();
    let batch = detect_batch(&sets.2, &det).unwrap();
    detection_metrics(&batch.verdicts, sets.2.poison_mask.as_ref().unwrap()).unwrap()
}

#[test]
fn synthetic_detection_power() {
    let t = Instant::now();
    let sets = synthetic_sets(&synthetic_spec());
    let m = detection_on(&sets, &DetectorConfig::default());
    let elapsed = t.elapsed();
    let (far, frr) = (m.far.unwrap(), m.frr.unwrap());
    verdict(
        "synthetic detection power",
        m.auc >= 0.99 && frr <= 0.07 && far <= 0.05 && elapsed < Duration::from_secs(10),
        format!(
            "AUC {:.4} (>= 0.99), FRR {frr:.3} (<= 0.07), FAR {far:.3} (<= 0.05), {elapsed:.2?} (< 10 s)",
            m.auc
        ),
    );
}

#[test]
fn top_k_ablation() {
    let spec = ScenarioSpec {
        layers: 13,
        noise_layer_indices: (0..5).collect(),
        noise_layer_std: 3.0,
        shifted_layers: vec![10, 11, 12],
        ..synthetic_spec()
    };
    let sets = synthetic_sets(&spec);
    let top = detection_on(&sets, &DetectorConfig::default()).auc;
    let all = detection_on(
        &sets,
        &DetectorConfig {
            k: spec.layers,
            ..DetectorConfig::default()
        },
    )
    .auc;
    verdict(
        "top-k ablation",
        top >= all - 0.002,
        format!("AUC top-3 {top:.4} vs all 13 layers {all:.4} (tie tol 0.002)"),
    );
}

#[test]
fn fusion_ablation() {
    let spec = ScenarioSpec {
        shift_magnitude: 0.0,
        shifted_layers: vec![],
        rank1_magnitude: 3.0,
        ..synthetic_spec()
    };
    let sets = synthetic_sets(&spec);
    let fused = detection_on(&sets, &DetectorConfig::default()).auc;
    let md_only = detection_on(
        &sets,
        &DetectorConfig {
            fusion_alpha: 1.0,
            ..DetectorConfig::default()
        },
    )
    .auc;
    verdict(
        "fusion ablation",
        fused >= md_only - 0.002,
        format!("rank-1 distortion: AUC alpha=0.9 {fused:.4} vs alpha=1.0 {md_only:.4} (tie tol 0.002)"),
    );
}

struct ToyRun {
    cfg: PipelineConfig,
    implanted: Implanted,
    detected: Detected,
    balanced: PurifyReport,
    elapsed: Duration,
}

fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = PipelineConfig::default().with_seed(SEED);
        let t = Instant::now();
        let run = run_pipeline(&cfg).unwrap();
        let elapsed = t.elapsed();
        ToyRun {
            cfg,
            implanted: run.implanted,
            detected: run.detected,
            balanced: run.purified,
            elapsed,
        }
    })
}

fn purified_with(run: &ToyRun, lambda_asr: f64, lambda_acc: f64) -> AttackMetrics {
    let cfg = UnlearnConfig {
        lambda_asr,
        lambda_acc,
        ..run.cfg.unlearn.clone()
    };
    purify_stage(&cfg, &run.implanted.task, &run.implanted.report.model, &run.detected)
        .unwrap()
        .post
        .unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let run = toy_run();
    let implant = run.implanted.report.post;
    let post = run.balanced.post.unwrap();
    let drop = implant.cacc - post.cacc;
    let partitioned = run.detected.d_p.len() + run.detected.d_c.len() == run.implanted.task.train.len();
    verdict(
        "end-to-end pipeline",
        implant.asr >= 0.95
            && implant.cacc >= 0.90
            && partitioned
            && post.asr <= 0.10
            && drop <= 0.03
            && run.elapsed < Duration::from_secs(120),
        format!(
            "implant ASR {:.3} (>= 0.95) CACC {:.3} (>= 0.90); flagged {} of {}; purified ASR {:.3} (<= 0.10), CACC drop {:.3} (<= 0.03); {:.1?} (< 2 min)",
            implant.asr,
            implant.cacc,
            run.detected.d_p.len(),
            run.implanted.task.train.len(),
            post.asr,
            drop,
            run.elapsed
        ),
    );
}

#[test]
fn loss_ablation() {
    let run = toy_run();
    let balanced = run.balanced.post.unwrap();
    let pre_asr = run.implanted.report.post.asr;
    let no_acc = purified_with(run, 1.0, 0.0);
    let no_asr = purified_with(run, 0.0, 1.0);
    verdict(
        "loss ablation",
        no_acc.asr <= 0.05 && no_acc.cacc <= balanced.cacc - 0.20 && no_asr.asr >= 0.8 * pre_asr,
        format!(
            "lambda_acc=0: ASR {:.3} (<= 0.05), CACC {:.3} vs balanced {:.3} (>= 20 points below); lambda_asr=0: ASR {:.3} (>= 0.8 x {:.3})",
            no_acc.asr, no_acc.cacc, balanced.cacc, no_asr.asr, pre_asr
        ),
    );
}

#[test]
fn lambda_sweep_monotonicity() {
    let run = toy_run();
    let base = run.balanced.post.unwrap();
    let asr: Vec<f64> = [base.asr, purified_with(run, 3.0, 1.0).asr, purified_with(run, 5.0, 1.0).asr].to_vec();
    let cacc: Vec<f64> = [base.cacc, purified_with(run, 1.0, 3.0).cacc, purified_with(run, 1.0, 5.0).cacc].to_vec();
    let asr_ok = asr.windows(2).all(|w| w[1] <= w[0]);
    let cacc_ok = cacc.windows(2).all(|w| w[1] >= w[0]);
    verdict(
        "lambda sweep monotonicity",
        asr_ok && cacc_ok,
        format!("ASR over lambda_asr 1,3,5: {asr:?} (non-increasing); CACC over lambda_acc 1,3,5: {cacc:?} (non-decreasing)"),
    );
}

#[test]
fn adaptive_attack_robustness() {
    let run = toy_run();
    let mut cfg = run.cfg.clone();
    cfg.scenario.adaptive_reg_alpha = 250.0;
    let implanted = implant_stage(&cfg).unwrap();
    let detected = detect_stage(&cfg, &implanted.task, &implanted.report.model).unwrap();
    let post = purify_stage(&cfg.unlearn, &implanted.task, &implanted.report.model, &detected)
        .unwrap()
        .post
        .unwrap();
    let md_drop = run.detected.md_only_auc - detected.md_only_auc;
    verdict(
        "adaptive attack robustness",
        md_drop >= 0.02 && detected.metrics.auc >= 0.85 && post.asr <= 0.15,
        format!(
            "alpha_reg=250: implant ASR {:.3} CACC {:.3}; MD-only AUC {:.4} vs {:.4} without (drop >= 0.02); fused AUC {:.4} (>= 0.85); purified ASR {:.3} (<= 0.15)",
            implanted.report.post.asr,
            implanted.report.post.cacc,
            detected.md_only_auc,
            run.detected.md_only_auc,
            detected.metrics.auc,
            post.asr
        ),
    );
}

#[test]
fn freezing_guarantees() {
    let run = toy_run();
    let teacher = &run.implanted.report.model;
    let teacher_before = teacher.checksum();
    let report = purify_stage(&run.cfg.unlearn, &run.implanted.task, teacher, &run.detected).unwrap();
    let init = AdapterSet::init(
        teacher,
        &run.cfg.unlearn.adapter,
        seed::derive(run.cfg.unlearn.train.seed, "purify_adapters"),
    )
    .unwrap();
    let teacher_same = teacher.checksum() == teacher_before;
    let base_same = report.student_base.checksum() == teacher_before;
    let adapters_moved = report.adapters.checksum() != init.checksum();
    verdict(
        "freezing guarantees",
        teacher_same && base_same && adapters_moved,
        format!(
            "teacher checksum unchanged: {teacher_same}; student base checksum unchanged: {base_same}; adapters changed: {adapters_moved}"
        ),
    );
}

#[test]
fn determinism() {
    let run = toy_run();
    let again = run_pipeline(&run.cfg).unwrap();
    let ftrj_same = run.detected.stream.to_bytes().unwrap() == again.detected.stream.to_bytes().unwrap()
        && run.detected.calib.to_bytes().unwrap() == again.detected.calib.to_bytes().unwrap();
    let detector_same = run.detected.detector.to_json().unwrap() == again.detected.detector.to_json().unwrap();
    let first = dup_guard::pipeline::PipelineRun {
        implanted: run.implanted.clone(),
        detected: run.detected.clone(),
        purified: run.balanced.clone(),
    };
    let report_same = PipelineReport::new(&run.cfg, &first).unwrap().to_json().unwrap()
        == PipelineReport::new(&run.cfg, &again).unwrap().to_json().unwrap();
    verdict(
        "determinism",
        ftrj_same && detector_same && report_same,
        format!("FTRJ identical: {ftrj_same}; detector JSON identical: {detector_same}; report JSON identical: {report_same}"),
    );
}

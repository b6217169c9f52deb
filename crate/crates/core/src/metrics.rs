//! Evaluation metrics: PCK, area under the PCK curve, and top-k accuracy in
//! per-instance and per-class flavors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty valid joint set: PCK is undefined")]
    EmptyValidSet,
    #[error("{0}")]
    Invalid(String),
}

pub const AUC_TAU_MIN: f64 = 20.0;
pub const AUC_TAU_MAX: f64 = 40.0;

/// PCK sampled at ascending pixel thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

/// Fraction of valid joints whose prediction lies within `tau` pixels of the
/// ground truth (Euclidean).
pub fn pck(
    predicted: &Array2<f64>,
    ground_truth: &Array2<f64>,
    tau: f64,
    valid: &[bool],
) -> Result<f64, MetricsError> {
    if predicted.shape() != ground_truth.shape() || predicted.ncols() != 2 {
        return Err(MetricsError::Invalid(format!(
            "joint sets must both be (n,2): {:?} vs {:?}",
            predicted.shape(),
            ground_truth.shape()
        )));
    }
    if valid.len() != predicted.nrows() {
        return Err(MetricsError::Invalid(format!(
            "validity mask length {} vs {} joints",
            valid.len(),
            predicted.nrows()
        )));
    }
    if tau <= 0.0 {
        return Err(MetricsError::Invalid(format!("tau must be positive, got {tau}")));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for i in 0..predicted.nrows() {
        if !valid[i] {
            continue;
        }
        total += 1;
        let dx = predicted[[i, 0]] - ground_truth[[i, 0]];
        let dy = predicted[[i, 1]] - ground_truth[[i, 1]];
        if (dx * dx + dy * dy).sqrt() <= tau {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::EmptyValidSet);
    }
    Ok(hits as f64 / total as f64)
}

pub fn pck_curve(
    predicted: &Array2<f64>,
    ground_truth: &Array2<f64>,
    valid: &[bool],
    thresholds: &[f64],
) -> Result<PckCurve, MetricsError> {
    let values = thresholds
        .iter()
        .map(|&t| pck(predicted, ground_truth, t, valid))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PckCurve {
        thresholds: thresholds.to_vec(),
        values,
    })
}

/// Integer thresholds `tau_min..=tau_max` inclusive.
pub fn auc_thresholds(tau_min: f64, tau_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = tau_min;
    while t <= tau_max + 1e-9 {
        out.push(t);
        t += 1.0;
    }
    out
}

/// Area under the PCK curve over integer thresholds in `[tau_min, tau_max]`,
/// trapezoid rule, normalized by the threshold span; lies in [0, 1].
pub fn auc(
    predicted: &Array2<f64>,
    ground_truth: &Array2<f64>,
    valid: &[bool],
    tau_min: f64,
    tau_max: f64,
) -> Result<f64, MetricsError> {
    if tau_min >= tau_max {
        return Err(MetricsError::Invalid(format!(
            "tau_min {tau_min} must be below tau_max {tau_max}"
        )));
    }
    let curve = pck_curve(predicted, ground_truth, valid, &auc_thresholds(tau_min, tau_max))?;
    let mut area = 0.0;
    for w in curve.values.windows(2) {
        area += (w[0] + w[1]) / 2.0;
    }
    Ok(area / (tau_max - tau_min))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    PerInstance,
    PerClass,
}

/// Rank of the true label in a score row: the number of classes scoring
/// strictly higher, ties broken toward the lower class index.
fn label_rank(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count()
}

/// Top-k accuracy. Per-instance: fraction of samples whose true label ranks
/// in the top k. Per-class: mean over classes present of the
/// class-conditional accuracy.
pub fn topk_accuracy(
    scores: &Array2<f64>,
    labels: &[usize],
    k: usize,
    mode: AccuracyMode,
) -> Result<f64, MetricsError> {
    let (n, classes) = (scores.nrows(), scores.ncols());
    if labels.len() != n {
        return Err(MetricsError::Invalid(format!(
            "{} labels for {} score rows",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(MetricsError::Invalid("no samples".into()));
    }
    if k == 0 || k > classes {
        return Err(MetricsError::Invalid(format!(
            "k={k} outside [1, {classes}]"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MetricsError::Invalid(format!(
            "label {bad} outside [0, {classes})"
        )));
    }
    let mut class_hits = vec![0usize; classes];
    let mut class_counts = vec![0usize; classes];
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = scores.row(i).to_vec();
        let correct = label_rank(&row, label) < k;
        class_counts[label] += 1;
        if correct {
            hits += 1;
            class_hits[label] += 1;
        }
    }
    Ok(match mode {
        AccuracyMode::PerInstance => hits as f64 / n as f64,
        AccuracyMode::PerClass => {
            let mut sum = 0.0;
            let mut present = 0usize;
            for c in 0..classes {
                if class_counts[c] > 0 {
                    sum += class_hits[c] as f64 / class_counts[c] as f64;
                    present += 1;
                }
            }
            sum / present as f64
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn offset_pred(gt: &Array2<f64>, dx: f64, dy: f64) -> Array2<f64> {
        let mut p = gt.clone();
        for mut row in p.rows_mut() {
            row[0] += dx;
            row[1] += dy;
        }
        p
    }

    #[test]
    fn perfect_prediction_is_one() {
        let gt = Array2::from_shape_fn((21, 2), |(i, j)| (i * 2 + j) as f64);
        let valid = vec![true; 21];
        assert_eq!(pck(&gt, &gt, 20.0, &valid).unwrap(), 1.0);
        assert_eq!(auc(&gt, &gt, &valid, 20.0, 40.0).unwrap(), 1.0);
    }

    #[test]
    fn all_joints_far_out_is_zero() {
        let gt = Array2::zeros((21, 2));
        let pred = offset_pred(&gt, 50.0, 0.0);
        let valid = vec![true; 21];
        assert_eq!(pck(&pred, &gt, 20.0, &valid).unwrap(), 0.0);
        assert_eq!(auc(&pred, &gt, &valid, 20.0, 40.0).unwrap(), 0.0);
    }

    #[test]
    fn pck_counts_match_a_counting_loop() {
        // 7 of 21 joints inside tau
        let gt = Array2::zeros((21, 2));
        let mut pred = gt.clone();
        for i in 0..21 {
            pred[[i, 0]] = if i < 7 { 5.0 } else { 30.0 };
        }
        let valid = vec![true; 21];
        let got = pck(&pred, &gt, 20.0, &valid).unwrap();
        assert!((got - 7.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn empty_valid_set_is_error() {
        let gt = Array2::zeros((5, 2));
        let valid = vec![false; 5];
        assert!(matches!(
            pck(&gt, &gt, 20.0, &valid),
            Err(MetricsError::EmptyValidSet)
        ));
    }

    #[test]
    fn pck_is_monotone_in_tau_and_auc_in_unit_interval() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(2..40);
            let gt = Array2::from_shape_fn((n, 2), |_| rng.gen_range(0.0..256.0));
            let pred = Array2::from_shape_fn((n, 2), |(i, j)| {
                gt[[i, j]] + rng.gen_range(-45.0..45.0)
            });
            let valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
            if !valid.iter().any(|&v| v) {
                continue;
            }
            let curve =
                pck_curve(&pred, &gt, &valid, &auc_thresholds(20.0, 40.0)).unwrap();
            for w in curve.values.windows(2) {
                assert!(w[0] <= w[1] + 1e-12);
            }
            let a = auc(&pred, &gt, &valid, 20.0, 40.0).unwrap();
            assert!((0.0..=1.0).contains(&a));
            // brute-force counting oracle at every threshold
            for (ti, &tau) in curve.thresholds.iter().enumerate() {
                let mut hits = 0;
                let mut total = 0;
                for i in 0..n {
                    if !valid[i] {
                        continue;
                    }
                    total += 1;
                    let d = ((pred[[i, 0]] - gt[[i, 0]]).powi(2)
                        + (pred[[i, 1]] - gt[[i, 1]]).powi(2))
                    .sqrt();
                    if d <= tau {
                        hits += 1;
                    }
                }
                assert_eq!(curve.values[ti], hits as f64 / total as f64);
            }
        }
    }

    #[test]
    fn auc_equals_pck_when_curve_is_constant() {
        // distances all below 20: curve constant at 1
        let gt = Array2::zeros((10, 2));
        let pred = offset_pred(&gt, 3.0, 4.0);
        let valid = vec![true; 10];
        let p = pck(&pred, &gt, 20.0, &valid).unwrap();
        let a = auc(&pred, &gt, &valid, 20.0, 40.0).unwrap();
        assert_eq!(a, p);
    }

    /// Distances linear in joint index against a fine-grid numeric
    /// integration of the exact step curve.
    #[test]
    fn auc_matches_fine_grid_integration() {
        let n = 200;
        let gt = Array2::zeros((n, 2));
        let mut pred = gt.clone();
        for i in 0..n {
            pred[[i, 0]] = 10.0 + 0.2 * i as f64; // spread over [10, 49.8]
        }
        let valid = vec![true; n];
        let a = auc(&pred, &gt, &valid, 20.0, 40.0).unwrap();
        // fine grid: 20000 points
        let mut acc = 0.0;
        let steps = 20000;
        for s in 0..=steps {
            let tau = 20.0 + 20.0 * s as f64 / steps as f64;
            let frac = (0..n)
                .filter(|&i| pred[[i, 0]] <= tau)
                .count() as f64
                / n as f64;
            let w = if s == 0 || s == steps { 0.5 } else { 1.0 };
            acc += frac * w;
        }
        let oracle = acc / steps as f64;
        assert!((a - oracle).abs() < 0.01, "{a} vs {oracle}");
    }

    #[test]
    fn one_hot_scores_are_perfect_in_both_modes() {
        let labels: Vec<usize> = vec![0, 1, 2, 1, 0];
        let mut scores = Array2::zeros((5, 3));
        for (i, &l) in labels.iter().enumerate() {
            scores[[i, l]] = 1.0;
        }
        for mode in [AccuracyMode::PerInstance, AccuracyMode::PerClass] {
            assert_eq!(topk_accuracy(&scores, &labels, 1, mode).unwrap(), 1.0);
        }
    }

    #[test]
    fn imbalanced_classes_hand_case() {
        // class 0: 9 of 9 correct; class 1: 0 of 1
        let mut scores = Array2::zeros((10, 2));
        let mut labels = vec![0usize; 10];
        for i in 0..9 {
            scores[[i, 0]] = 1.0;
        }
        labels[9] = 1;
        scores[[9, 0]] = 1.0; // misclassified as class 0
        let pi = topk_accuracy(&scores, &labels, 1, AccuracyMode::PerInstance).unwrap();
        let pc = topk_accuracy(&scores, &labels, 1, AccuracyMode::PerClass).unwrap();
        assert!((pi - 0.9).abs() < 1e-12);
        assert!((pc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn k_equal_to_class_count_is_always_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let scores = Array2::from_shape_fn((20, 7), |_| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..20).map(|_| rng.gen_range(0..7)).collect();
        for mode in [AccuracyMode::PerInstance, AccuracyMode::PerClass] {
            assert_eq!(topk_accuracy(&scores, &labels, 7, mode).unwrap(), 1.0);
        }
    }

    #[test]
    fn k_above_class_count_is_error() {
        let scores = Array2::zeros((3, 4));
        let labels = vec![0, 1, 2];
        assert!(topk_accuracy(&scores, &labels, 5, AccuracyMode::PerInstance).is_err());
    }

    #[test]
    fn topk_monotone_in_k_and_matches_rank_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..100 {
            let (n, c) = (rng.gen_range(2..30), rng.gen_range(2..9));
            let scores = Array2::from_shape_fn((n, c), |_| {
                // quantized scores so ties actually occur
                (rng.gen_range(-2.0..2.0f64) * 4.0).round() / 4.0
            });
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let mut prev = 0.0;
            for k in 1..=c {
                let acc =
                    topk_accuracy(&scores, &labels, k, AccuracyMode::PerInstance).unwrap();
                assert!(acc + 1e-12 >= prev, "top-k not monotone");
                prev = acc;
                // oracle: explicit sort with index tie-break
                let mut hits = 0;
                for i in 0..n {
                    let mut order: Vec<usize> = (0..c).collect();
                    order.sort_by(|&a, &b| {
                        scores[[i, b]]
                            .partial_cmp(&scores[[i, a]])
                            .unwrap()
                            .then(a.cmp(&b))
                    });
                    if order[..k].contains(&labels[i]) {
                        hits += 1;
                    }
                }
                assert_eq!(acc, hits as f64 / n as f64);
            }
        }
    }

    /// On a class-balanced set the two modes coincide exactly.
    #[test]
    fn per_class_equals_per_instance_on_balanced_sets() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..50 {
            let c = rng.gen_range(2..6);
            let per = rng.gen_range(1..8);
            let n = c * per;
            let scores = Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0));
            let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
            let pi = topk_accuracy(&scores, &labels, 1, AccuracyMode::PerInstance).unwrap();
            let pc = topk_accuracy(&scores, &labels, 1, AccuracyMode::PerClass).unwrap();
            assert!((pi - pc).abs() < 1e-12);
        }
    }
}

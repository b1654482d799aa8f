//! Generalized label smoothing: target construction, the smoothed
//! cross-entropy loss, analytic gradients, saturation predicates, and the
//! per-epoch smoothing schedule.
//!
//! The smoothing factor `alpha` lives in `(-inf, 1]`. Positive values mix the
//! hard label with a uniform distribution; negative values push the target
//! entry above one and make the off-target entries negative, penalizing
//! confidence in any class other than the true one.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A (possibly improper) target distribution built from a hard label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTarget {
    pub values: Array1<f64>,
    pub alpha: f64,
}

impl SoftTarget {
    pub fn num_classes(&self) -> usize {
        self.values.len()
    }
}

/// Smoothing factor as a function of the training epoch.
///
/// Holds zero for `warmup_epochs`, then ramps linearly to `target_alpha`
/// over `ramp_epochs`, then stays constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSchedule {
    pub target_alpha: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub ramp_epochs: usize,
}

impl SmoothingSchedule {
    pub fn constant(alpha: f64) -> Self {
        SmoothingSchedule {
            target_alpha: alpha,
            warmup_epochs: 0,
            ramp_epochs: 0,
        }
    }

    /// Default warmup/ramp shares for negative smoothing: hold zero for the
    /// first 10% of epochs, ramp over the next 20%.
    pub fn with_default_warmup(alpha: f64, total_epochs: usize) -> Self {
        SmoothingSchedule {
            target_alpha: alpha,
            warmup_epochs: total_epochs / 10,
            ramp_epochs: total_epochs / 5,
        }
    }

    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            0.0
        } else if epoch >= self.warmup_epochs + self.ramp_epochs {
            self.target_alpha
        } else {
            let progress = (epoch - self.warmup_epochs) as f64 / self.ramp_epochs as f64;
            progress * self.target_alpha
        }
    }
}

/// The probability values at which the logit-gradient components flip sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationThresholds {
    /// `1 - alpha + alpha/C`; the target-class gradient is negative below it.
    pub target_threshold: f64,
    /// `alpha/C`; the off-target gradient is positive above it.
    pub other_threshold: f64,
}

/// Builds the smoothed target `(1-alpha)*onehot + alpha/C`.
pub fn smooth_labels(hard_label: usize, alpha: f64, num_classes: usize) -> Result<SoftTarget> {
    if num_classes < 2 {
        return Err(Error::invalid(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    if alpha > 1.0 || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be in (-inf, 1], got {alpha}")));
    }
    if hard_label >= num_classes {
        return Err(Error::invalid(format!(
            "hard_label {hard_label} out of range for {num_classes} classes"
        )));
    }
    let uniform = alpha / num_classes as f64;
    let mut values = Array1::from_elem(num_classes, uniform);
    values[hard_label] = 1.0 - alpha + uniform;
    Ok(SoftTarget { values, alpha })
}

/// Numerically stabilized softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Result<Array1<f64>> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::numeric("softmax input"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum: f64 = out.sum();
    out.mapv_inplace(|e| e / sum);
    Ok(out)
}

/// Jacobian of the softmax: `p_j (1 - p_j)` on the diagonal, `-p_i p_j` off it.
pub fn softmax_jacobian(logits: ArrayView1<f64>) -> Result<Array2<f64>> {
    let p = softmax(logits)?;
    let c = p.len();
    let mut jac = Array2::zeros((c, c));
    for i in 0..c {
        for j in 0..c {
            jac[[i, j]] = if i == j {
                p[i] * (1.0 - p[i])
            } else {
                -p[i] * p[j]
            };
        }
    }
    Ok(jac)
}

/// Cross-entropy against a smoothed target: `-sum_k y_k log p_k`.
///
/// Probabilities are floored at 1e-12 inside the log to keep the loss finite.
pub fn smoothed_ce_loss(probabilities: ArrayView1<f64>, target: &SoftTarget) -> Result<f64> {
    if probabilities.len() != target.values.len() {
        return Err(Error::invalid(format!(
            "probability vector length {} does not match target length {}",
            probabilities.len(),
            target.values.len()
        )));
    }
    Ok(probabilities
        .iter()
        .zip(target.values.iter())
        .map(|(&p, &y)| -y * p.max(1e-12).ln())
        .sum())
}

/// Gradient of the smoothed cross-entropy with respect to the logits: `p - y`.
pub fn logit_gradient(probabilities: ArrayView1<f64>, target: &SoftTarget) -> Result<Array1<f64>> {
    if probabilities.len() != target.values.len() {
        return Err(Error::invalid(format!(
            "probability vector length {} does not match target length {}",
            probabilities.len(),
            target.values.len()
        )));
    }
    Ok(&probabilities - &target.values)
}

/// Sign-flip boundaries of the logit gradient for a given `(alpha, C)`.
pub fn saturation_thresholds(alpha: f64, num_classes: usize) -> Result<SaturationThresholds> {
    if num_classes < 2 {
        return Err(Error::invalid(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    let c = num_classes as f64;
    Ok(SaturationThresholds {
        target_threshold: 1.0 - alpha + alpha / c,
        other_threshold: alpha / c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Independent softmax reference: direct exp/sum without stabilization.
    fn softmax_ref(z: &[f64]) -> Vec<f64> {
        let sum: f64 = z.iter().map(|&v| v.exp()).sum();
        z.iter().map(|&v| v.exp() / sum).collect()
    }

    /// Loss as a direct function of logits, for finite-difference oracles.
    fn loss_of_logits(z: &[f64], target: &SoftTarget) -> f64 {
        let p = softmax_ref(z);
        p.iter()
            .zip(target.values.iter())
            .map(|(&p, &y)| -y * p.max(1e-12).ln())
            .sum()
    }

    fn fd_gradient(z: &[f64], target: &SoftTarget, h: f64) -> Vec<f64> {
        (0..z.len())
            .map(|j| {
                let mut plus = z.to_vec();
                let mut minus = z.to_vec();
                plus[j] += h;
                minus[j] -= h;
                (loss_of_logits(&plus, target) - loss_of_logits(&minus, target)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn smooth_labels_matches_positive_example() {
        let t = smooth_labels(0, 0.3, 3).unwrap();
        let want = [0.8, 0.1, 0.1];
        for (got, want) in t.values.iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_labels_matches_negative_example() {
        let t = smooth_labels(0, -0.3, 3).unwrap();
        let want = [1.2, -0.1, -0.1];
        for (got, want) in t.values.iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_labels_alpha_zero_is_one_hot() {
        let t = smooth_labels(2, 0.0, 5).unwrap();
        for (k, &v) in t.values.iter().enumerate() {
            assert_eq!(v, if k == 2 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn smooth_labels_rejects_bad_args() {
        assert!(smooth_labels(0, 1.5, 3).is_err());
        assert!(smooth_labels(0, 0.1, 1).is_err());
        assert!(smooth_labels(3, 0.1, 3).is_err());
    }

    #[test]
    fn softmax_symmetry_cases() {
        let p = softmax(array![0.0, 0.0].view()).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        let p = softmax(array![3.7, 3.7, 3.7].view()).unwrap();
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_reference() {
        let z = [1.0, 2.0, 3.0];
        let p = softmax(ArrayView1::from(&z)).unwrap();
        let r = softmax_ref(&z);
        for (a, b) in p.iter().zip(r) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(array![1.0, f64::NAN].view()).is_err());
        assert!(softmax(array![1.0, f64::INFINITY].view()).is_err());
    }

    #[test]
    fn jacobian_uniform_two_class() {
        let jac = softmax_jacobian(array![0.0, 0.0].view()).unwrap();
        let want = [[0.25, -0.25], [-0.25, 0.25]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((jac[[i, j]] - want[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn jacobian_rows_sum_to_zero() {
        let jac = softmax_jacobian(array![0.3, -1.2, 4.0, 0.01].view()).unwrap();
        for row in jac.rows() {
            assert!(row.sum().abs() < 1e-10);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let z = [1.0, 2.0, 3.0];
        let jac = softmax_jacobian(ArrayView1::from(&z)).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut plus = z;
            let mut minus = z;
            plus[j] += h;
            minus[j] -= h;
            let pp = softmax_ref(&plus);
            let pm = softmax_ref(&minus);
            for i in 0..3 {
                let fd = (pp[i] - pm[i]) / (2.0 * h);
                assert!((jac[[i, j]] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn loss_vanishes_for_perfect_prediction() {
        let t = smooth_labels(1, 0.0, 3).unwrap();
        let p = array![1e-15, 1.0 - 2e-15, 1e-15];
        let loss = smoothed_ce_loss(p.view(), &t).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn loss_matches_direct_sum() {
        let t = smooth_labels(0, 0.3, 3).unwrap();
        let p = array![0.7, 0.2, 0.1];
        let got = smoothed_ce_loss(p.view(), &t).unwrap();
        // independent high-precision evaluation of -sum y_k log p_k
        let want = -(0.8f64 * 0.7f64.ln() + 0.1 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn loss_rejects_dimension_mismatch() {
        let t = smooth_labels(0, 0.3, 3).unwrap();
        let p = array![0.5, 0.5];
        assert!(smoothed_ce_loss(p.view(), &t).is_err());
        assert!(logit_gradient(p.view(), &t).is_err());
    }

    #[test]
    fn gradient_zero_at_fixed_point() {
        let t = smooth_labels(0, 0.3, 3).unwrap();
        let g = logit_gradient(t.values.view(), &t).unwrap();
        for &v in &g {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_target_component_zero_at_threshold() {
        // alpha=0.1, C=10: the target component vanishes at p_target = 0.91
        let t = smooth_labels(0, 0.1, 10).unwrap();
        let mut p = Array1::from_elem(10, 0.01);
        p[0] = 0.91;
        let g = logit_gradient(p.view(), &t).unwrap();
        assert!(g[0].abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_negative_alpha() {
        let t = smooth_labels(1, -0.05, 4).unwrap();
        let z = [0.5, -0.3, 1.7, 0.0];
        let p = softmax(ArrayView1::from(&z)).unwrap();
        let analytic = logit_gradient(p.view(), &t).unwrap();
        let fd = fd_gradient(&z, &t, 1e-5);
        for (a, b) in analytic.iter().zip(fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn thresholds_match_paper_example() {
        let s = saturation_thresholds(0.1, 10).unwrap();
        assert!((s.target_threshold - 0.91).abs() < 1e-12);
        assert!((s.other_threshold - 0.01).abs() < 1e-12);
    }

    #[test]
    fn thresholds_hard_label_case() {
        let s = saturation_thresholds(0.0, 7).unwrap();
        assert_eq!(s.target_threshold, 1.0);
        assert_eq!(s.other_threshold, 0.0);
    }

    #[test]
    fn thresholds_direct_arithmetic() {
        let s = saturation_thresholds(-0.05, 530).unwrap();
        assert!((s.target_threshold - (1.0 - (-0.05) + (-0.05) / 530.0)).abs() < 1e-15);
        assert!(s.target_threshold > 1.0);
        assert!(s.other_threshold < 0.0);
    }

    #[test]
    fn schedule_piecewise_values() {
        let s = SmoothingSchedule {
            target_alpha: -0.05,
            warmup_epochs: 10,
            ramp_epochs: 20,
        };
        assert_eq!(s.alpha_at(5), 0.0);
        assert_eq!(s.alpha_at(30), -0.05);
        assert_eq!(s.alpha_at(100), -0.05);
        assert!((s.alpha_at(20) - (-0.025)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn targets_sum_to_one(
            alpha in -5.0f64..=1.0,
            c in 2usize..=20,
            label_frac in 0.0f64..1.0,
        ) {
            let label = ((label_frac * c as f64) as usize).min(c - 1);
            let t = smooth_labels(label, alpha, c).unwrap();
            prop_assert!((t.values.sum() - 1.0).abs() < 1e-9);
            if (0.0..=1.0).contains(&alpha) {
                prop_assert!(t.values.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
            }
            if alpha < 0.0 {
                prop_assert!(t.values[label] > 1.0);
                prop_assert!(t.values.iter().enumerate().all(|(k, &v)| k == label || v < 0.0));
            }
        }

        #[test]
        fn decomposition_identity(
            alpha in prop::sample::select(vec![0.3f64, -0.3]),
            logits in prop::collection::vec(-4.0f64..4.0, 2..8),
        ) {
            let c = logits.len();
            let p = softmax(ArrayView1::from(&logits)).unwrap();
            let hard = 0usize;
            let t = smooth_labels(hard, alpha, c).unwrap();
            let lhs = smoothed_ce_loss(p.view(), &t).unwrap();
            let ce_hard = -p[hard].max(1e-12).ln();
            let ce_ones: f64 = p.iter().map(|&v| -v.max(1e-12).ln()).sum();
            let rhs = (1.0 - alpha) * ce_hard + alpha / c as f64 * ce_ones;
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn negative_alpha_target_gradient_always_negative(
            alpha in -3.0f64..-1e-3,
            logits in prop::collection::vec(-6.0f64..6.0, 2..10),
        ) {
            let c = logits.len();
            let p = softmax(ArrayView1::from(&logits)).unwrap();
            let t = smooth_labels(0, alpha, c).unwrap();
            let g = logit_gradient(p.view(), &t).unwrap();
            // the weight on the true class always grows for alpha < 0
            prop_assert!(g[0] < 0.0);
        }

        #[test]
        fn analytic_gradient_matches_jacobian_chain(
            alpha in -0.5f64..=1.0,
            logits in prop::collection::vec(-4.0f64..4.0, 2..8),
        ) {
            let c = logits.len();
            let z = ArrayView1::from(&logits);
            let p = softmax(z).unwrap();
            let t = smooth_labels(0, alpha, c).unwrap();
            let direct = logit_gradient(p.view(), &t).unwrap();
            // chain route: dL/dz_j = sum_i dL/dp_i * dp_i/dz_j
            let jac = softmax_jacobian(z).unwrap();
            let dl_dp = ndarray::Array1::from_iter(
                p.iter().zip(t.values.iter()).map(|(&pi, &yi)| -yi / pi.max(1e-12)),
            );
            let chained = jac.t().dot(&dl_dp);
            for (a, b) in direct.iter().zip(chained.iter()) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}

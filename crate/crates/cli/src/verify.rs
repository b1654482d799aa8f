//! Self-contained analytic-vs-numeric verification suite: checks the
//! smoothed cross-entropy gradient chain, the softmax Jacobian, the loss
//! decomposition identity, network input gradients, and the saturation
//! thresholds against finite differences and bisection.

use ndarray::{Array1, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smoothinv::classifier::{AttackLoss, MlpClassifier, MlpConfig};
use smoothinv::smoothing::{
    logit_gradient, saturation_thresholds, smooth_labels, smoothed_ce_loss, softmax,
    softmax_jacobian, SoftTarget,
};
use smoothinv::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, max_deviation: f64, tolerance: f64, instances: usize) -> Self {
        CheckResult {
            name: name.to_string(),
            max_deviation,
            tolerance,
            instances,
            passed: max_deviation.is_finite() && max_deviation <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed_names(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

fn loss_of_logits(logits: ArrayView1<f64>, target: &SoftTarget) -> Result<f64> {
    let p = softmax(logits)?;
    smoothed_ce_loss(p.view(), target)
}

/// Plain (unsmoothed) cross entropy of `p` against a one-hot label.
fn hard_ce(p: ArrayView1<f64>, label: usize) -> f64 {
    -p[label].max(1e-12).ln()
}

/// Cross entropy of `p` against the all-ones vector.
fn ones_ce(p: ArrayView1<f64>) -> f64 {
    p.iter().map(|&v| -v.max(1e-12).ln()).sum()
}

/// Target-class component of the logit gradient when the target class has
/// probability `p_target` and the rest is spread uniformly.
fn target_gradient_component(p_target: f64, alpha: f64, num_classes: usize) -> Result<f64> {
    let rest = (1.0 - p_target) / (num_classes - 1) as f64;
    let mut p = Array1::from_elem(num_classes, rest);
    p[0] = p_target;
    let target = smooth_labels(0, alpha, num_classes)?;
    Ok(logit_gradient(p.view(), &target)?[0])
}

/// Runs every analytic-vs-numeric check over `instances` random draws.
pub fn verify_gradients(seed: u64, instances: usize) -> Result<VerificationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // 1) analytic logit gradient p - y_ls vs central finite differences of
    //    the composed loss, plus Jacobian-chain agreement, plus the
    //    softmax-Jacobian row-sum and decomposition identities.
    let mut fd_dev = 0.0f64;
    let mut chain_dev = 0.0f64;
    let mut rowsum_dev = 0.0f64;
    let mut decomp_dev = 0.0f64;
    let mut target_sum_dev = 0.0f64;
    let h = 1e-6;
    for _ in 0..instances {
        let c = rng.gen_range(2..=20usize);
        let alpha = rng.gen_range(-0.5..=1.0f64);
        let label = rng.gen_range(0..c);
        let logits = Array1::from_shape_fn(c, |_| rng.gen_range(-4.0..4.0));
        let target = smooth_labels(label, alpha, c)?;
        let p = softmax(logits.view())?;
        let analytic = logit_gradient(p.view(), &target)?;

        for j in 0..c {
            let mut plus = logits.clone();
            let mut minus = logits.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd =
                (loss_of_logits(plus.view(), &target)? - loss_of_logits(minus.view(), &target)?)
                    / (2.0 * h);
            fd_dev = fd_dev.max((fd - analytic[j]).abs());
        }

        // chain rule: dL/dz = J_softmax^T (dL/dp), dL/dp_k = -y_k / p_k
        let jac = softmax_jacobian(logits.view())?;
        let dl_dp = Array1::from_shape_fn(c, |k| -target.values[k] / p[k]);
        let chained = jac.t().dot(&dl_dp);
        for j in 0..c {
            chain_dev = chain_dev.max((chained[j] - analytic[j]).abs());
        }
        for i in 0..c {
            rowsum_dev = rowsum_dev.max(jac.row(i).sum().abs());
        }

        // decomposition: L = (1-a) * CE(onehot, p) + (a/C) * CE(ones, p)
        let direct = smoothed_ce_loss(p.view(), &target)?;
        let decomposed =
            (1.0 - alpha) * hard_ce(p.view(), label) + alpha / c as f64 * ones_ce(p.view());
        decomp_dev = decomp_dev.max((direct - decomposed).abs());

        target_sum_dev = target_sum_dev.max((target.values.sum() - 1.0).abs());
    }
    checks.push(CheckResult::new(
        "logit_gradient_vs_finite_differences",
        fd_dev,
        1e-6,
        instances,
    ));
    checks.push(CheckResult::new(
        "logit_gradient_vs_jacobian_chain",
        chain_dev,
        1e-8,
        instances,
    ));
    checks.push(CheckResult::new(
        "softmax_jacobian_row_sums",
        rowsum_dev,
        1e-10,
        instances,
    ));
    checks.push(CheckResult::new(
        "loss_decomposition_identity",
        decomp_dev,
        1e-9,
        instances,
    ));
    checks.push(CheckResult::new(
        "smoothed_target_sums_to_one",
        target_sum_dev,
        1e-9,
        instances,
    ));

    // 2) saturation thresholds: bisect the sign flip of the target-class
    //    gradient component over p_target and compare to 1 - a + a/C.
    let saturation_instances = 100;
    let mut bisect_dev = 0.0f64;
    let mut negative_flip_dev = 0.0f64;
    for _ in 0..saturation_instances {
        let c = rng.gen_range(2..=20usize);
        let alpha = rng.gen_range(0.01..=1.0f64);
        let expected = saturation_thresholds(alpha, c)?.target_threshold;
        // gradient is negative at p ~ 0 and positive at p = 1 for a > 0
        let mut lo = 1e-9;
        let mut hi = 1.0;
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if target_gradient_component(mid, alpha, c)? < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        bisect_dev = bisect_dev.max((0.5 * (lo + hi) - expected).abs());

        // for a < 0 the gradient stays negative for every p_target <= 1:
        // record the largest value it ever reaches (must stay below 0)
        let neg_alpha = -rng.gen_range(0.01..=2.0f64);
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            let g = target_gradient_component(p.min(1.0), neg_alpha, c)?;
            negative_flip_dev = negative_flip_dev.max(g.max(0.0));
        }
    }
    checks.push(CheckResult::new(
        "saturation_threshold_bisection",
        bisect_dev,
        1e-9,
        saturation_instances,
    ));
    checks.push(CheckResult::new(
        "no_saturation_for_negative_alpha",
        negative_flip_dev,
        0.0,
        saturation_instances,
    ));

    // 3) backpropagated input gradients of random networks vs central
    //    finite differences, for every attack loss variant.
    let model_count = 5;
    let mut backprop_dev = 0.0f64;
    let h = 1e-5;
    for m in 0..model_count {
        let config = MlpConfig {
            input_dim: 3,
            hidden_dims: vec![6, 5],
            num_classes: 4,
            batch_norm: m % 2 == 0,
        };
        let model = MlpClassifier::new(config, seed.wrapping_add(m as u64))?;
        for loss in [
            AttackLoss::CeIdentity,
            AttackLoss::SmoothedCe { alpha: 0.3 },
            AttackLoss::SmoothedCe { alpha: -0.3 },
            AttackLoss::Poincare,
        ] {
            let x = Array1::from_shape_fn(3, |_| rng.gen_range(-1.5..1.5));
            let (_, grad) = model.input_gradient(x.view(), loss, 1)?;
            for j in 0..3 {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus[j] += h;
                minus[j] -= h;
                let (lp, _) = model.input_gradient(plus.view(), loss, 1)?;
                let (lm, _) = model.input_gradient(minus.view(), loss, 1)?;
                let fd = (lp - lm) / (2.0 * h);
                backprop_dev = backprop_dev.max((fd - grad[j]).abs());
            }
        }
    }
    checks.push(CheckResult::new(
        "network_input_gradient_vs_finite_differences",
        backprop_dev,
        1e-4,
        model_count * 4,
    ));

    Ok(VerificationReport { seed, checks })
}

//! Attack loss functions on logits: the cross-entropy identity loss and the
//! hyperbolic (Poincare) distance loss, each with analytic gradients.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// Cross-entropy against the hard target class, computed stably from logits.
pub fn ce_identity_loss(logits: ArrayView1<f64>, target_class: usize) -> Result<f64> {
    Ok(ce_identity_grad(logits, target_class)?.0)
}

/// Loss value and gradient `p - onehot(target)` with respect to the logits.
pub fn ce_identity_grad(
    logits: ArrayView1<f64>,
    target_class: usize,
) -> Result<(f64, Array1<f64>)> {
    if target_class >= logits.len() {
        return Err(Error::invalid(format!(
            "target class {target_class} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("identity loss input"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[target_class];
    let mut grad = logits.mapv(|z| (z - lse).exp());
    grad[target_class] -= 1.0;
    Ok((loss, grad))
}

/// Result of a Poincare loss evaluation.
#[derive(Debug, Clone)]
pub struct PoincareEval {
    pub loss: f64,
    pub grad: Array1<f64>,
    /// Whether the normalized logits had to be rescaled into the unit ball.
    pub clamped: bool,
}

/// Target entry used instead of 1.0 in the one-hot vector.
const POINCARE_TARGET: f64 = 0.9999;

/// Hyperbolic distance between two points strictly inside the unit ball:
/// `arcosh(1 + 2|u-v|^2 / ((1-|u|^2)(1-|v|^2)))`.
pub fn poincare_distance(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid("poincare distance needs equal lengths"));
    }
    let nu: f64 = u.iter().map(|a| a * a).sum();
    let nv: f64 = v.iter().map(|a| a * a).sum();
    if nu >= 1.0 || nv >= 1.0 {
        return Err(Error::invalid(
            "poincare distance arguments must lie strictly inside the unit ball",
        ));
    }
    let diff: f64 = u.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let g = 1.0 + 2.0 * diff / ((1.0 - nu) * (1.0 - nv));
    Ok((g + (g * g - 1.0).max(0.0).sqrt()).ln())
}

/// Hyperbolic distance `arcosh(1 + 2|u-v|^2 / ((1-|u|^2)(1-|v|^2)))` between
/// the l1-normalized logits `u = o/|o|_1` and a near-one-hot target `v`.
pub fn poincare_loss(logits: ArrayView1<f64>, target_class: usize) -> Result<f64> {
    Ok(poincare_grad(logits, target_class)?.loss)
}

pub fn poincare_grad(logits: ArrayView1<f64>, target_class: usize) -> Result<PoincareEval> {
    if target_class >= logits.len() {
        return Err(Error::invalid(format!(
            "target class {target_class} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("poincare loss input"));
    }
    let l1: f64 = logits.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return Err(Error::DegenerateInput(
            "poincare loss undefined for the zero logit vector".into(),
        ));
    }
    let u_raw = logits.mapv(|v| v / l1);
    let u_norm = u_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    // |u|_2 <= |u|_1 = 1, with equality only for single-spike logit vectors
    let (scale, clamped) = if u_norm >= 1.0 - 1e-9 {
        ((1.0 - 1e-6) / u_norm.max(1.0), true)
    } else {
        (1.0, false)
    };
    let u = u_raw.mapv(|v| v * scale);

    let v_target = POINCARE_TARGET;
    let v_sq = v_target * v_target;
    let mut diff_sq = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        let vi = if i == target_class { v_target } else { 0.0 };
        diff_sq += (ui - vi) * (ui - vi);
    }
    let du = 1.0 - u.iter().map(|v| v * v).sum::<f64>();
    let dv = 1.0 - v_sq;
    let g = 1.0 + 2.0 * diff_sq / (du * dv);
    let loss = (g + (g * g - 1.0).max(0.0).sqrt()).ln();

    // gradient w.r.t. u: 4 * [ (u - v) * du + diff_sq * u ] / (du^2 * dv),
    // scaled by dL/dg = 1/sqrt(g^2 - 1)
    let denom = (g * g - 1.0).max(0.0).sqrt();
    let grad = if denom < 1e-12 {
        Array1::zeros(logits.len())
    } else {
        let mut dl_du = Array1::zeros(logits.len());
        for i in 0..u.len() {
            let vi = if i == target_class { v_target } else { 0.0 };
            dl_du[i] = 4.0 * ((u[i] - vi) * du + diff_sq * u[i]) / (du * du * dv) / denom;
        }
        // pull back through u = scale * o / |o|_1 (scale treated as constant)
        let dot: f64 = dl_du
            .iter()
            .zip(u_raw.iter())
            .map(|(&w, &ur)| w * ur)
            .sum();
        let mut grad = Array1::zeros(logits.len());
        for j in 0..logits.len() {
            grad[j] = scale / l1 * (dl_du[j] - logits[j].signum() * dot);
        }
        grad
    };

    Ok(PoincareEval {
        loss,
        grad,
        clamped,
    })
}

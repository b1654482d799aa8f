//! Expected calibration error, l2-norm variant over equal-width
//! confidence bins.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

use super::train::argmax;

/// `sqrt( sum_b (n_b/N) * (acc_b - conf_b)^2 )` with predictions binned by
/// their maximum confidence into `bins` equal-width bins over [0, 1].
/// Empty bins contribute nothing; confidence 1.0 falls in the last bin.
pub fn ece(probabilities: ArrayView2<f64>, labels: &[usize], bins: usize) -> Result<f64> {
    if bins < 1 {
        return Err(Error::invalid("bins must be >= 1"));
    }
    if probabilities.nrows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} probability rows but {} labels",
            probabilities.nrows(),
            labels.len()
        )));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::invalid("no predictions to calibrate"));
    }

    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut correct = vec![0usize; bins];
    for (row, &label) in probabilities.rows().into_iter().zip(labels) {
        let predicted = argmax(row);
        let confidence = row[predicted];
        let bin = ((confidence * bins as f64) as usize).min(bins - 1);
        count[bin] += 1;
        conf_sum[bin] += confidence;
        if predicted == label {
            correct[bin] += 1;
        }
    }

    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let acc = correct[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += count[b] as f64 / n as f64 * (acc - conf) * (acc - conf);
    }
    Ok(total.sqrt())
}

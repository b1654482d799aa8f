//! Seeded training loop with SGD(momentum) and Adam, milestone learning-rate
//! decay, and a per-epoch smoothing schedule.

use ndarray::{Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::smoothing::{self, smooth_labels, SmoothingSchedule};

use super::mlp::{Gradients, MlpClassifier, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub smoothing: SmoothingSchedule,
}

fn default_decay() -> f64 {
    0.1
}

impl TrainConfig {
    /// The toy protocol: 5000 full-batch iterations of SGD with learning
    /// rate 0.001 and momentum 0.9.
    pub fn toy(alpha_schedule: SmoothingSchedule, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::sgd(0.9),
            learning_rate: 0.001,
            lr_milestones: Vec::new(),
            lr_decay_factor: 0.1,
            epochs: 5000,
            batch_size: usize::MAX,
            seed,
            smoothing: alpha_schedule,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub alpha: f64,
}

/// Per-parameter optimizer state, aligned with the flattened parameter list.
struct OptimizerState {
    momentum: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

fn param_slices<'a>(model: &'a mut MlpClassifier) -> Vec<&'a mut [f64]> {
    let mut out = Vec::new();
    for w in &mut model.weights {
        out.push(w.as_slice_mut().unwrap());
    }
    for b in &mut model.biases {
        out.push(b.as_slice_mut().unwrap());
    }
    let (gammas, betas): (Vec<_>, Vec<_>) = model
        .batch_norms
        .iter_mut()
        .map(|bn| (bn.gamma.as_slice_mut().unwrap(), bn.beta.as_slice_mut().unwrap()))
        .unzip();
    out.extend(gammas);
    out.extend(betas);
    out
}

fn grad_slices(grads: &Gradients) -> Vec<&[f64]> {
    let mut out = Vec::new();
    for w in &grads.weights {
        out.push(w.as_slice().unwrap());
    }
    for b in &grads.biases {
        out.push(b.as_slice().unwrap());
    }
    for g in &grads.bn_gamma {
        out.push(g.as_slice().unwrap());
    }
    for b in &grads.bn_beta {
        out.push(b.as_slice().unwrap());
    }
    out
}

fn apply_update(
    model: &mut MlpClassifier,
    grads: &Gradients,
    kind: OptimizerKind,
    lr: f64,
    state: &mut OptimizerState,
) {
    state.step += 1;
    let grad_views: Vec<Vec<f64>> = grad_slices(grads).iter().map(|s| s.to_vec()).collect();
    let params = param_slices(model);
    match kind {
        OptimizerKind::Sgd { momentum } => {
            for ((param, grad), vel) in params
                .into_iter()
                .zip(&grad_views)
                .zip(&mut state.momentum)
            {
                for i in 0..param.len() {
                    vel[i] = momentum * vel[i] + grad[i];
                    param[i] -= lr * vel[i];
                }
            }
        }
        OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            let t = state.step as f64;
            let bias1 = 1.0 - beta1.powf(t);
            let bias2 = 1.0 - beta2.powf(t);
            for (((param, grad), m), v) in params
                .into_iter()
                .zip(&grad_views)
                .zip(&mut state.momentum)
                .zip(&mut state.second_moment)
            {
                for i in 0..param.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    param[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
}

/// Trains the model in place; history has one entry per epoch.
///
/// Identical `(seed, config, data)` produce bit-identical parameters. The
/// batch order depends only on the seed, never on the smoothing factor.
pub fn train(
    model: &mut MlpClassifier,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if dataset.labels.iter().any(|&l| l >= model.config.num_classes) {
        return Err(Error::invalid("dataset labels exceed model class count"));
    }
    let n = dataset.len();
    let c = model.config.num_classes;
    let batch_size = config.batch_size.min(n);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);

    let mut state = OptimizerState {
        momentum: param_slices(model).iter().map(|s| vec![0.0; s.len()]).collect(),
        second_moment: param_slices(model).iter().map(|s| vec![0.0; s.len()]).collect(),
        step: 0,
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let alpha = config.smoothing.alpha_at(epoch);
        let decay_steps = config.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        let lr = config.learning_rate * config.lr_decay_factor.powi(decay_steps as i32);
        indices.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for chunk in indices.chunks(batch_size) {
            let mut batch = Array2::zeros((chunk.len(), dataset.dim()));
            for (row, &i) in chunk.iter().enumerate() {
                batch.row_mut(row).assign(&dataset.features.row(i));
            }
            let (logits, cache) = model.forward(batch.view(), Mode::Train)?;

            let mut dlogits = Array2::zeros((chunk.len(), c));
            let mut batch_loss = 0.0;
            for (row, &i) in chunk.iter().enumerate() {
                let p = smoothing::softmax(logits.row(row))?;
                let target = smooth_labels(dataset.labels[i], alpha, c)?;
                batch_loss += smoothing::smoothed_ce_loss(p.view(), &target)?;
                let g = smoothing::logit_gradient(p.view(), &target)?;
                dlogits
                    .row_mut(row)
                    .assign(&g.mapv(|v| v / chunk.len() as f64));
                let predicted = argmax(logits.row(row));
                if predicted == dataset.labels[i] {
                    correct += 1;
                }
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += batch_loss * chunk.len() as f64;

            let (grads, _) = model.backward(&cache, dlogits.view())?;
            apply_update(model, &grads, config.optimizer, lr, &mut state);
        }

        history.push(EpochStats {
            epoch,
            loss: epoch_loss / n as f64,
            accuracy: correct as f64 / n as f64,
            alpha,
        });
    }
    model.set_mode(Mode::Eval);
    Ok(history)
}

pub(crate) fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode prediction accuracy on a dataset.
pub fn accuracy(model: &MlpClassifier, dataset: &LabeledDataset) -> Result<f64> {
    let (logits, _) = model.forward_eval(dataset.features.view())?;
    let mut correct = 0usize;
    for (row, &label) in logits.axis_iter(Axis(0)).zip(&dataset.labels) {
        if argmax(row) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{MlpClassifier, MlpConfig};
    use crate::data::{gen_blobs, BlobSpec};

    fn toy_data(seed: u64) -> LabeledDataset {
        gen_blobs(&BlobSpec::toy_triangle(0.4, 30, seed)).unwrap()
    }

    fn quick_config(seed: u64, epochs: usize, alpha: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            ..TrainConfig::toy(SmoothingSchedule::constant(alpha), seed)
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = toy_data(1);
        let config = quick_config(1, 50, 0.0);
        let mut a = MlpClassifier::new(MlpConfig::toy(2, 3), 1).unwrap();
        let mut b = MlpClassifier::new(MlpConfig::toy(2, 3), 1).unwrap();
        let ha = train(&mut a, &data, &config).unwrap();
        let hb = train(&mut b, &data, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn training_fits_separable_blobs() {
        let data = toy_data(2);
        let config = quick_config(2, 500, 0.0);
        let mut model = MlpClassifier::new(MlpConfig::toy(2, 3), 2).unwrap();
        let history = train(&mut model, &data, &config).unwrap();
        assert!(history.last().unwrap().loss < history.first().unwrap().loss);
        assert!(accuracy(&model, &data).unwrap() > 0.95);
    }

    #[test]
    fn history_records_schedule_alpha() {
        let data = toy_data(3);
        let schedule = SmoothingSchedule {
            target_alpha: -0.1,
            warmup_epochs: 10,
            ramp_epochs: 20,
        };
        let config = TrainConfig {
            epochs: 40,
            ..TrainConfig::toy(schedule.clone(), 3)
        };
        let mut model = MlpClassifier::new(MlpConfig::toy(2, 3), 3).unwrap();
        let history = train(&mut model, &data, &config).unwrap();
        for stats in &history {
            assert_eq!(stats.alpha, schedule.alpha_at(stats.epoch));
        }
        assert_eq!(history[0].alpha, 0.0);
        assert_eq!(history[39].alpha, -0.1);
    }

    #[test]
    fn shuffle_order_independent_of_alpha() {
        // two models, same seed, different smoothing: parameters differ but
        // determinism holds per (seed, alpha) pair
        let data = toy_data(4);
        let mut a = MlpClassifier::new(MlpConfig::toy(2, 3), 4).unwrap();
        let mut b = MlpClassifier::new(MlpConfig::toy(2, 3), 4).unwrap();
        train(&mut a, &data, &quick_config(4, 30, 0.05)).unwrap();
        train(&mut b, &data, &quick_config(4, 30, 0.05)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn milestone_decay_shrinks_updates() {
        let data = toy_data(5);
        let config = TrainConfig {
            lr_milestones: vec![5],
            lr_decay_factor: 1e-12,
            epochs: 10,
            ..quick_config(5, 10, 0.0)
        };
        let mut model = MlpClassifier::new(MlpConfig::toy(2, 3), 5).unwrap();
        train(&mut model, &data, &config).unwrap();
        let frozen = model.clone();
        // after the milestone the step size is effectively zero, so a rerun
        // with more post-milestone epochs barely moves the parameters
        let config2 = TrainConfig {
            epochs: 20,
            ..config
        };
        let mut model2 = MlpClassifier::new(MlpConfig::toy(2, 3), 5).unwrap();
        train(&mut model2, &data, &config2).unwrap();
        let max_diff = frozen
            .weights
            .iter()
            .zip(&model2.weights)
            .flat_map(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn adam_also_fits() {
        let data = toy_data(6);
        let config = TrainConfig {
            optimizer: OptimizerKind::adam(),
            learning_rate: 0.01,
            ..quick_config(6, 200, 0.0)
        };
        let mut model = MlpClassifier::new(MlpConfig::toy(2, 3), 6).unwrap();
        train(&mut model, &data, &config).unwrap();
        assert!(accuracy(&model, &data).unwrap() > 0.9);
    }

    #[test]
    fn minibatch_training_runs() {
        let data = toy_data(7);
        let config = TrainConfig {
            batch_size: 16,
            ..quick_config(7, 50, 0.0)
        };
        let mut model = MlpClassifier::new(MlpConfig::toy(2, 3), 7).unwrap();
        let history = train(&mut model, &data, &config).unwrap();
        assert_eq!(history.len(), 50);
    }

    #[test]
    fn divergence_is_reported() {
        // features large enough to overflow the first linear layer
        let mut data = toy_data(8);
        data.features.mapv_inplace(|v| v * 1e308);
        let mut model = MlpClassifier::new(MlpConfig::toy(2, 3), 8).unwrap();
        match train(&mut model, &data, &quick_config(8, 5, 0.0)) {
            Err(Error::TrainingDiverged { .. }) | Err(Error::Numeric { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_configs_and_data() {
        let data = toy_data(9);
        let mut model = MlpClassifier::new(MlpConfig::toy(2, 3), 9).unwrap();
        let mut config = quick_config(9, 10, 0.0);
        config.learning_rate = 0.0;
        assert!(train(&mut model, &data, &config).is_err());
        let mut config = quick_config(9, 10, 0.0);
        config.epochs = 0;
        assert!(train(&mut model, &data, &config).is_err());
        let mut bad = data.clone();
        bad.labels[0] = 99;
        assert!(train(&mut model, &bad, &quick_config(9, 10, 0.0)).is_err());
    }
}

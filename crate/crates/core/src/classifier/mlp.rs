//! The network itself: parameters, forward pass, and the hand-derived
//! backward pass through linear, rectifier, and batch-norm layers.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{ce_identity_grad, poincare_grad};
use crate::smoothing::{self, smooth_labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture of the classifier. The toy protocol uses two hidden layers
/// of 20 units with batch norm after each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub batch_norm: bool,
}

impl MlpConfig {
    pub fn toy(input_dim: usize, num_classes: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden_dims: vec![20, 20],
            num_classes,
            batch_norm: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("all layer dimensions must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    bn: Option<BnCache>,
    pre_activation: Array2<f64>,
    activation: Array2<f64>,
}

/// Activation record produced by a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Cache {
    mode: Mode,
    input: Array2<f64>,
    layers: Vec<LayerCache>,
}

impl Cache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Post-rectifier activations of the final hidden layer.
    pub fn penultimate(&self) -> ArrayView2<'_, f64> {
        self.layers
            .last()
            .expect("model has at least one hidden layer")
            .activation
            .view()
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub bn_gamma: Vec<Array1<f64>>,
    pub bn_beta: Vec<Array1<f64>>,
}

/// Scalar losses an attack can differentiate through the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackLoss {
    /// Cross-entropy against a smoothed target.
    SmoothedCe { alpha: f64 },
    /// Cross-entropy against the hard target class (the GMI identity loss).
    CeIdentity,
    /// Hyperbolic distance between l1-normalized logits and a near-one-hot target.
    Poincare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    pub config: MlpConfig,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub batch_norms: Vec<BatchNorm>,
    pub mode: Mode,
}

impl MlpClassifier {
    /// He-style uniform fan-in initialization from a seeded generator.
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(config.num_classes);

        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-limit..limit));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        let batch_norms = if config.batch_norm {
            config.hidden_dims.iter().map(|&d| BatchNorm::new(d)).collect()
        } else {
            Vec::new()
        };
        Ok(MlpClassifier {
            config,
            weights,
            biases,
            batch_norms,
            mode: Mode::Eval,
        })
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.config.hidden_dims.len()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_batch(&self, batch: ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.config.input_dim {
            return Err(Error::invalid(format!(
                "batch width {} does not match input_dim {}",
                batch.ncols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Forward pass. In train mode batch statistics are used and the running
    /// statistics are updated; in eval mode only running statistics are used.
    pub fn forward(&mut self, batch: ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, Cache)> {
        self.check_batch(batch)?;
        let n = batch.nrows();
        let hidden = self.num_hidden_layers();
        let mut layers = Vec::with_capacity(hidden);
        let mut current = batch.to_owned();

        for i in 0..hidden {
            let z = current.dot(&self.weights[i]) + &self.biases[i];
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("hidden layer {i} linear output")));
            }
            let (pre_activation, bn_cache) = if self.config.batch_norm {
                let bn = &mut self.batch_norms[i];
                match mode {
                    Mode::Train => {
                        let mean = z.mean_axis(Axis(0)).unwrap();
                        let centered = &z - &mean;
                        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
                        let inv_std = var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
                        let xhat = &centered * &inv_std;
                        let y = &xhat * &bn.gamma + &bn.beta;
                        let unbiased = if n > 1 {
                            var.mapv(|v| v * n as f64 / (n as f64 - 1.0))
                        } else {
                            var.clone()
                        };
                        let m = bn.momentum;
                        bn.running_mean = &bn.running_mean * (1.0 - m) + &(mean.mapv(|v| v * m));
                        bn.running_var = &bn.running_var * (1.0 - m) + &(unbiased.mapv(|v| v * m));
                        (y, Some(BnCache { xhat, inv_std }))
                    }
                    Mode::Eval => {
                        let inv_std = bn.running_var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
                        let xhat = (&z - &bn.running_mean) * &inv_std;
                        let y = &xhat * &bn.gamma + &bn.beta;
                        (y, Some(BnCache { xhat, inv_std }))
                    }
                }
            } else {
                (z, None)
            };
            let activation = pre_activation.mapv(|v| v.max(0.0));
            layers.push(LayerCache {
                bn: bn_cache,
                pre_activation,
                activation,
            });
            current = layers[i].activation.clone();
        }

        let logits = current.dot(&self.weights[hidden]) + &self.biases[hidden];
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("output layer logits"));
        }
        Ok((
            logits,
            Cache {
                mode,
                input: batch.to_owned(),
                layers,
            },
        ))
    }

    /// Eval-mode forward pass without mutating running statistics.
    pub fn forward_eval(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, Cache)> {
        // eval mode never touches the running stats, so the clone is shallow state only
        let mut shadow = self.clone();
        shadow.forward(batch, Mode::Eval)
    }

    /// Backpropagates logit gradients to parameter and input gradients.
    pub fn backward(
        &self,
        cache: &Cache,
        logit_gradients: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let hidden = self.num_hidden_layers();
        if cache.layers.len() != hidden {
            return Err(Error::InvalidState(
                "cache does not match this model's architecture".into(),
            ));
        }
        let n = cache.input.nrows();
        if logit_gradients.nrows() != n || logit_gradients.ncols() != self.config.num_classes {
            return Err(Error::InvalidState(format!(
                "logit gradient shape {:?} does not match cache batch {n} x {}",
                logit_gradients.shape(),
                self.config.num_classes
            )));
        }

        let mut grad_weights = vec![Array2::zeros((0, 0)); hidden + 1];
        let mut grad_biases = vec![Array1::zeros(0); hidden + 1];
        let mut grad_gamma = Vec::new();
        let mut grad_beta = Vec::new();
        if self.config.batch_norm {
            grad_gamma = self
                .config
                .hidden_dims
                .iter()
                .map(|&d| Array1::zeros(d))
                .collect();
            grad_beta = grad_gamma.clone();
        }

        // output layer
        let last_activation = &cache.layers[hidden - 1].activation;
        grad_weights[hidden] = last_activation.t().dot(&logit_gradients);
        grad_biases[hidden] = logit_gradients.sum_axis(Axis(0));
        let mut upstream = logit_gradients.dot(&self.weights[hidden].t());

        for i in (0..hidden).rev() {
            let layer = &cache.layers[i];
            // rectifier
            let dy = &upstream * &layer.pre_activation.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            // batch norm
            let dz = match (&layer.bn, cache.mode) {
                (Some(bn), Mode::Train) => {
                    let dxhat = &dy * &self.batch_norms[i].gamma;
                    grad_gamma[i] = (&dy * &bn.xhat).sum_axis(Axis(0));
                    grad_beta[i] = dy.sum_axis(Axis(0));
                    let sum_dxhat = dxhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&dxhat * &bn.xhat).sum_axis(Axis(0));
                    let nf = n as f64;
                    (&(&dxhat * nf - &sum_dxhat) - &(&bn.xhat * &sum_dxhat_xhat))
                        * &bn.inv_std.mapv(|v| v / nf)
                }
                (Some(bn), Mode::Eval) => {
                    grad_gamma[i] = (&dy * &bn.xhat).sum_axis(Axis(0));
                    grad_beta[i] = dy.sum_axis(Axis(0));
                    &dy * &(&self.batch_norms[i].gamma * &bn.inv_std)
                }
                (None, _) => dy,
            };
            let below = if i == 0 {
                &cache.input
            } else {
                &cache.layers[i - 1].activation
            };
            grad_weights[i] = below.t().dot(&dz);
            grad_biases[i] = dz.sum_axis(Axis(0));
            upstream = dz.dot(&self.weights[i].t());
        }

        Ok((
            Gradients {
                weights: grad_weights,
                biases: grad_biases,
                bn_gamma: grad_gamma,
                bn_beta: grad_beta,
            },
            upstream,
        ))
    }

    /// Softmax of eval-mode logits; each row sums to one.
    pub fn predict_proba(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (logits, _) = self.forward_eval(batch)?;
        let mut probs = Array2::zeros(logits.raw_dim());
        for (i, row) in logits.rows().into_iter().enumerate() {
            probs.row_mut(i).assign(&smoothing::softmax(row)?);
        }
        Ok(probs)
    }

    /// Eval-mode probability vector for a single input.
    pub fn predict_proba_one(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let batch = x.insert_axis(Axis(0));
        Ok(self.predict_proba(batch)?.row(0).to_owned())
    }

    /// Activations after the final hidden layer's rectifier, eval mode.
    pub fn penultimate_embedding(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (_, cache) = self.forward_eval(batch)?;
        Ok(cache.penultimate().to_owned())
    }

    /// Loss value and gradient of the chosen attack loss at `x`, eval mode.
    pub fn input_gradient(
        &self,
        x: ArrayView1<f64>,
        loss: AttackLoss,
        target_class: usize,
    ) -> Result<(f64, Array1<f64>)> {
        if target_class >= self.config.num_classes {
            return Err(Error::invalid(format!(
                "target class {target_class} out of range"
            )));
        }
        let batch = x.insert_axis(Axis(0));
        let (logits, cache) = self.forward_eval(batch)?;
        let logits_row = logits.row(0);
        let (loss_value, dlogits) = match loss {
            AttackLoss::SmoothedCe { alpha } => {
                let p = smoothing::softmax(logits_row)?;
                let target = smooth_labels(target_class, alpha, self.config.num_classes)?;
                let value = smoothing::smoothed_ce_loss(p.view(), &target)?;
                (value, smoothing::logit_gradient(p.view(), &target)?)
            }
            AttackLoss::CeIdentity => ce_identity_grad(logits_row, target_class)?,
            AttackLoss::Poincare => {
                let eval = poincare_grad(logits_row, target_class)?;
                (eval.loss, eval.grad)
            }
        };
        let dlogits = dlogits.insert_axis(Axis(0));
        let (_, input_grads) = self.backward(&cache, dlogits.view())?;
        let grad = input_grads.row(0).to_owned();
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("input gradient"));
        }
        Ok((loss_value, grad))
    }
}


/// Versioned model container; round-trips losslessly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: MlpClassifier,
    pub seed: u64,
    pub train_config: Option<super::TrainConfig>,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn new(model: MlpClassifier, seed: u64, train_config: Option<super::TrainConfig>) -> Self {
        Checkpoint {
            version: Self::VERSION,
            model,
            seed,
            train_config,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&json)?;
        if ckpt.version != Self::VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        if ckpt
            .model
            .batch_norms
            .iter()
            .any(|bn| bn.running_var.iter().any(|&v| v <= 0.0))
        {
            return Err(Error::invalid("checkpoint has non-positive running variance"));
        }
        Ok(ckpt)
    }
}

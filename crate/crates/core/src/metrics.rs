//! Attack- and model-evaluation metrics: attack accuracy under an
//! independent evaluation model, feature distances, knowledge extraction,
//! gradient-similarity diagnostics, embedding statistics, and adversarial
//! robustness probes.

use ndarray::{Array1, Array2, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{train, AttackLoss, MlpClassifier, MlpConfig, TrainConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::inversion::Trajectory;
use crate::linalg::l2_distance;
use crate::smoothing::SmoothingSchedule;

/// A reconstruction attributed to its target class.
pub type LabeledReconstruction = (usize, Array1<f64>);

/// Distribution summary of a set of distances: mean, standard deviation, and
/// quartiles (linear interpolation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub mean: f64,
    pub std: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl DistanceSummary {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return DistanceSummary {
                mean: f64::NAN,
                std: f64::NAN,
                q1: f64::NAN,
                median: f64::NAN,
                q3: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let quantile = |q: f64| -> f64 {
            if n == 1 {
                return sorted[0];
            }
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        };
        DistanceSummary {
            mean,
            std: var.sqrt(),
            q1: quantile(0.25),
            median: quantile(0.5),
            q3: quantile(0.75),
        }
    }
}

/// Penultimate-space distance statistics, max-scaled by the largest pairwise
/// distance so everything lands in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    pub intra_mean: DistanceSummary,
    pub inter_mean: DistanceSummary,
    pub intra_nearest: DistanceSummary,
    pub inter_nearest: DistanceSummary,
    /// Classes with fewer than two samples, excluded from intraclass stats.
    pub excluded_classes: Vec<usize>,
    /// The (unscaled) global maximum pairwise distance used as denominator.
    pub max_distance: f64,
    /// Per-sample scaled values backing the summaries, for plotting.
    pub intra_mean_values: Vec<f64>,
    pub inter_mean_values: Vec<f64>,
    pub intra_nearest_values: Vec<f64>,
    pub inter_nearest_values: Vec<f64>,
}

/// Aggregated cosine similarity of consecutive input gradients at one step
/// index, across trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCosinePoint {
    pub step: usize,
    pub mean: f64,
    pub std: f64,
    /// Trajectories contributing a defined value at this step.
    pub count: usize,
}

/// Everything the evaluation pipeline reports for one attacked model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_at_1: f64,
    pub acc_at_k: f64,
    pub k: usize,
    pub delta_eval: f64,
    pub xi_train: f64,
    pub xi_test: f64,
    pub ece: f64,
    pub embedding: EmbeddingStats,
    pub gradient_cosine: Vec<GradientCosinePoint>,
}

/// Architecture of the independent evaluation model: same family as the
/// target with one extra hidden layer of double the last hidden width.
pub fn eval_model_config(target: &MlpConfig) -> MlpConfig {
    let mut hidden = target.hidden_dims.clone();
    let last = *hidden.last().unwrap_or(&target.input_dim);
    hidden.push(last * 2);
    MlpConfig {
        input_dim: target.input_dim,
        hidden_dims: hidden,
        num_classes: target.num_classes,
        batch_norm: target.batch_norm,
    }
}

fn top_k_classes(probabilities: ArrayView1<f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| {
        probabilities[b]
            .partial_cmp(&probabilities[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Fraction of reconstructions whose top-1 (and top-k) prediction under the
/// evaluation model matches their target class.
pub fn attack_accuracy(
    eval_model: &MlpClassifier,
    reconstructions: &[LabeledReconstruction],
    k: usize,
) -> Result<(f64, f64)> {
    let c = eval_model.config.num_classes;
    if k == 0 || k >= c {
        return Err(Error::invalid(format!(
            "k must satisfy 1 <= k < num_classes ({c}), got {k}"
        )));
    }
    if reconstructions.is_empty() {
        return Err(Error::invalid("no reconstructions to score"));
    }
    let mut top1 = 0usize;
    let mut topk = 0usize;
    for (class, x) in reconstructions {
        if *class >= c {
            return Err(Error::invalid(format!("class {class} out of range")));
        }
        let probs = eval_model.predict_proba_one(x.view())?;
        let ranked = top_k_classes(probs.view(), k);
        if ranked[0] == *class {
            top1 += 1;
        }
        if ranked.contains(class) {
            topk += 1;
        }
    }
    let n = reconstructions.len() as f64;
    Ok((top1 as f64 / n, topk as f64 / n))
}

/// Mean distance, in the evaluation model's penultimate space, from each
/// reconstruction to its nearest target-class training sample.
pub fn feature_distance(
    eval_model: &MlpClassifier,
    reconstructions: &[Array1<f64>],
    train_data: &LabeledDataset,
    target_class: usize,
) -> Result<f64> {
    if reconstructions.is_empty() {
        return Err(Error::invalid("no reconstructions"));
    }
    let class_rows = train_data.class_indices(target_class);
    if class_rows.is_empty() {
        return Err(Error::invalid(format!(
            "training data has no samples of class {target_class}"
        )));
    }
    let mut class_features = Array2::zeros((class_rows.len(), train_data.dim()));
    for (row, &i) in class_rows.iter().enumerate() {
        class_features.row_mut(row).assign(&train_data.features.row(i));
    }
    let class_emb = eval_model.penultimate_embedding(class_features.view())?;

    let mut recon_features = Array2::zeros((reconstructions.len(), train_data.dim()));
    for (row, x) in reconstructions.iter().enumerate() {
        recon_features.row_mut(row).assign(x);
    }
    let recon_emb = eval_model.penultimate_embedding(recon_features.view())?;

    let mut total = 0.0;
    for r in recon_emb.rows() {
        let nearest = class_emb
            .rows()
            .into_iter()
            .map(|t| l2_distance(r, t))
            .fold(f64::INFINITY, f64::min);
        total += nearest;
    }
    Ok(total / reconstructions.len() as f64)
}

/// Surrogate training recipe for the knowledge-extraction score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub model: MlpConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl SurrogateConfig {
    /// Same MLP family as the target, fresh seed, 50 epochs of Adam at 1e-3.
    pub fn toy(model: MlpConfig, seed: u64) -> Self {
        SurrogateConfig {
            model,
            epochs: 50,
            learning_rate: 1e-3,
            seed,
        }
    }
}

/// Trains a fresh surrogate on the labeled reconstructions and reports its
/// accuracy on the original train and test sets (xi_train, xi_test).
pub fn knowledge_extraction(
    reconstructions: &[LabeledReconstruction],
    original_train: &LabeledDataset,
    original_test: &LabeledDataset,
    config: &SurrogateConfig,
) -> Result<(f64, f64)> {
    let c = config.model.num_classes;
    for class in 0..c {
        if !reconstructions.iter().any(|(l, _)| *l == class) {
            return Err(Error::invalid(format!(
                "no reconstruction for class {class}"
            )));
        }
    }
    let d = config.model.input_dim;
    let mut features = Array2::zeros((reconstructions.len(), d));
    let mut labels = Vec::with_capacity(reconstructions.len());
    for (row, (class, x)) in reconstructions.iter().enumerate() {
        if x.len() != d {
            return Err(Error::invalid("reconstruction dimension mismatch"));
        }
        features.row_mut(row).assign(x);
        labels.push(*class);
    }
    let synthetic = LabeledDataset {
        features,
        labels,
        class_count: c,
        provenance: None,
    };
    let mut surrogate = MlpClassifier::new(config.model.clone(), config.seed)?;
    let train_config = TrainConfig {
        optimizer: crate::classifier::OptimizerKind::adam(),
        learning_rate: config.learning_rate,
        lr_milestones: Vec::new(),
        lr_decay_factor: 0.1,
        epochs: config.epochs,
        batch_size: usize::MAX,
        seed: config.seed,
        smoothing: SmoothingSchedule::constant(0.0),
    };
    train(&mut surrogate, &synthetic, &train_config)?;
    let xi_train = crate::classifier::accuracy(&surrogate, original_train)?;
    let xi_test = crate::classifier::accuracy(&surrogate, original_test)?;
    Ok((xi_train, xi_test))
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of consecutive input gradients, aggregated across
/// trajectories at each step index. Zero-norm gradients are undefined and
/// excluded from the aggregation.
pub fn gradient_cosine_series(trajectories: &[Trajectory]) -> Result<Vec<GradientCosinePoint>> {
    if trajectories.is_empty() {
        return Err(Error::invalid("no trajectories"));
    }
    if trajectories.iter().any(|t| t.steps.len() < 2) {
        return Err(Error::invalid(
            "gradient cosine needs at least 2 recorded steps per trajectory",
        ));
    }
    let max_len = trajectories.iter().map(|t| t.steps.len()).max().unwrap();
    let mut series = Vec::with_capacity(max_len - 1);
    for step in 1..max_len {
        let mut values = Vec::new();
        for t in trajectories {
            if step < t.steps.len() {
                if let Some(c) = cosine(&t.steps[step - 1].gradient, &t.steps[step].gradient) {
                    values.push(c);
                }
            }
        }
        let count = values.len();
        let (mean, std) = if count == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let mean = values.iter().sum::<f64>() / count as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
            (mean, var.sqrt())
        };
        series.push(GradientCosinePoint {
            step,
            mean,
            std,
            count,
        });
    }
    Ok(series)
}

/// Pairwise penultimate-space distance statistics over a dataset, max-scaled
/// by the global maximum pairwise distance.
pub fn embedding_stats(model: &MlpClassifier, dataset: &LabeledDataset) -> Result<EmbeddingStats> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::invalid("embedding stats need at least 2 samples"));
    }
    let emb = model.penultimate_embedding(dataset.features.view())?;
    let mut dist = Array2::zeros((n, n));
    let mut max_distance = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = l2_distance(emb.row(i), emb.row(j));
            dist[[i, j]] = d;
            dist[[j, i]] = d;
            max_distance = max_distance.max(d);
        }
    }
    let scale = if max_distance > 0.0 { max_distance } else { 1.0 };

    let mut excluded_classes: Vec<usize> = (0..dataset.class_count)
        .filter(|&c| dataset.class_indices(c).len() < 2)
        .collect();
    excluded_classes.sort_unstable();

    let mut intra_mean_values = Vec::new();
    let mut inter_mean_values = Vec::new();
    let mut intra_nearest_values = Vec::new();
    let mut inter_nearest_values = Vec::new();
    for i in 0..n {
        let class = dataset.labels[i];
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            if dataset.labels[j] == class {
                intra.push(dist[[i, j]] / scale);
            } else {
                inter.push(dist[[i, j]] / scale);
            }
        }
        if !intra.is_empty() {
            intra_mean_values.push(intra.iter().sum::<f64>() / intra.len() as f64);
            intra_nearest_values.push(intra.iter().cloned().fold(f64::INFINITY, f64::min));
        }
        if !inter.is_empty() {
            inter_mean_values.push(inter.iter().sum::<f64>() / inter.len() as f64);
            inter_nearest_values.push(inter.iter().cloned().fold(f64::INFINITY, f64::min));
        }
    }

    Ok(EmbeddingStats {
        intra_mean: DistanceSummary::from_values(&intra_mean_values),
        inter_mean: DistanceSummary::from_values(&inter_mean_values),
        intra_nearest: DistanceSummary::from_values(&intra_nearest_values),
        inter_nearest: DistanceSummary::from_values(&inter_nearest_values),
        excluded_classes,
        max_distance,
        intra_mean_values,
        inter_mean_values,
        intra_nearest_values,
        inter_nearest_values,
    })
}

/// One signed gradient step of size epsilon. Untargeted ascends the loss of
/// the true label; targeted descends the loss of the target class. Each
/// coordinate with a nonzero gradient moves by exactly epsilon.
pub fn fgsm(
    model: &MlpClassifier,
    x: ArrayView1<f64>,
    label: usize,
    epsilon: f64,
    targeted: Option<usize>,
) -> Result<Array1<f64>> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::invalid("epsilon must be >= 0"));
    }
    let (class, direction) = match targeted {
        Some(target) => (target, -1.0),
        None => (label, 1.0),
    };
    let (_, grad) = model.input_gradient(x, AttackLoss::CeIdentity, class)?;
    Ok(&x + &grad.mapv(|g| direction * epsilon * g.signum()))
}

/// Iterated signed gradient steps projected onto the l-infinity ball of
/// radius epsilon around `x`. With `random_start` the iterate begins at a
/// uniform point in the ball (seeded). BIM is this with `random_start`
/// false.
#[allow(clippy::too_many_arguments)]
pub fn pgd(
    model: &MlpClassifier,
    x: ArrayView1<f64>,
    label: usize,
    epsilon: f64,
    step_size: f64,
    steps: usize,
    random_start: bool,
    targeted: Option<usize>,
    seed: u64,
) -> Result<Array1<f64>> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::invalid("epsilon must be >= 0"));
    }
    if step_size <= 0.0 {
        return Err(Error::invalid("step_size must be positive"));
    }
    if steps == 0 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    let (class, direction) = match targeted {
        Some(target) => (target, -1.0),
        None => (label, 1.0),
    };
    let mut current = x.to_owned();
    if random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in current.iter_mut() {
            *v += rng.gen_range(-epsilon..=epsilon);
        }
    }
    for _ in 0..steps {
        let (_, grad) = model.input_gradient(current.view(), AttackLoss::CeIdentity, class)?;
        for j in 0..current.len() {
            let stepped = current[j] + direction * step_size * grad[j].signum();
            current[j] = stepped.clamp(x[j] - epsilon, x[j] + epsilon);
        }
    }
    Ok(current)
}

/// Fraction of inputs whose prediction changes away from the true label
/// under the given perturbation function.
pub fn attack_success_rate(
    model: &MlpClassifier,
    dataset: &LabeledDataset,
    perturb: impl Fn(ArrayView1<f64>, usize) -> Result<Array1<f64>>,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let mut flipped = 0usize;
    let mut eligible = 0usize;
    for (row, &label) in dataset.features.rows().into_iter().zip(&dataset.labels) {
        let clean = model.predict_proba_one(row)?;
        if top_k_classes(clean.view(), 1)[0] != label {
            continue; // already misclassified; not an attack success
        }
        eligible += 1;
        let adv = perturb(row, label)?;
        let probs = model.predict_proba_one(adv.view())?;
        if top_k_classes(probs.view(), 1)[0] != label {
            flipped += 1;
        }
    }
    if eligible == 0 {
        return Err(Error::invalid("no correctly classified samples to attack"));
    }
    Ok(flipped as f64 / eligible as f64)
}

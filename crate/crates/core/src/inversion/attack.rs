//! The gradient inversion attack and the three-stage pipeline: candidate
//! sampling by robust confidence, independent latent optimization, and final
//! selection by robust confidence over fresh transforms.

use ndarray::{Array1, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{AttackLoss, MlpClassifier};
use crate::data::{apply_jitter, JitterTransform};
use crate::error::{Error, Result};

use super::prior::Prior;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackOptimizer {
    Sgd {
        learning_rate: f64,
        momentum: f64,
    },
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl AttackOptimizer {
    /// The toy protocol attack optimizer: SGD, learning rate 0.1, no momentum.
    pub fn toy() -> Self {
        AttackOptimizer::Sgd {
            learning_rate: 0.1,
            momentum: 0.0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        AttackOptimizer::Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    fn learning_rate(&self) -> f64 {
        match self {
            AttackOptimizer::Sgd { learning_rate, .. }
            | AttackOptimizer::Adam { learning_rate, .. } => *learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub loss: AttackLoss,
    pub optimizer: AttackOptimizer,
    pub max_steps: usize,
    pub stop_confidence: Option<f64>,
    pub pool_size: usize,
    pub candidates_per_class: usize,
    pub final_per_class: usize,
    pub transform: JitterTransform,
    pub transform_count: usize,
    pub seed: u64,
}

impl AttackConfig {
    /// Attack settings of the toy protocol: CE identity loss, SGD lr 0.1
    /// without momentum, stop at 95% confidence, cap 5000 steps.
    pub fn toy(seed: u64) -> Self {
        AttackConfig {
            loss: AttackLoss::CeIdentity,
            optimizer: AttackOptimizer::toy(),
            max_steps: 5000,
            stop_confidence: Some(0.95),
            pool_size: 32,
            candidates_per_class: 8,
            final_per_class: 4,
            transform: JitterTransform { std_dev: 0.1, seed },
            transform_count: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be >= 1"));
        }
        if self.pool_size == 0 {
            return Err(Error::invalid("pool_size must be >= 1"));
        }
        if !(self.final_per_class <= self.candidates_per_class
            && self.candidates_per_class <= self.pool_size)
        {
            return Err(Error::invalid(
                "need final_per_class <= candidates_per_class <= pool_size",
            ));
        }
        if self.transform_count == 0 {
            return Err(Error::invalid("transform_count must be >= 1"));
        }
        if let Some(sc) = self.stop_confidence {
            if !(sc > 0.0 && sc <= 1.0) {
                return Err(Error::invalid("stop_confidence must be in (0, 1]"));
            }
        }
        if self.optimizer.learning_rate() < 0.0 {
            return Err(Error::invalid("learning rate must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Confidence,
    MaxSteps,
}

/// One visited point of an attack trajectory, with the loss, target
/// confidence, and input gradient evaluated there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub x: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latent: Option<Vec<f64>>,
    pub loss: f64,
    pub confidence: f64,
    pub gradient: Vec<f64>,
}

/// Full record of one attack: every visited point including the start and
/// the final iterate, so `steps.len() == update_count + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub update_count: usize,
    pub stop_reason: StopReason,
}

impl Trajectory {
    pub fn final_point(&self) -> Array1<f64> {
        Array1::from_vec(self.steps.last().expect("trajectory never empty").x.clone())
    }

    pub fn final_latent(&self) -> Option<Array1<f64>> {
        self.steps
            .last()
            .and_then(|s| s.latent.clone())
            .map(Array1::from_vec)
    }

    pub fn initial_confidence(&self) -> f64 {
        self.steps.first().expect("trajectory never empty").confidence
    }

    pub fn final_confidence(&self) -> f64 {
        self.steps.last().expect("trajectory never empty").confidence
    }
}

/// Latent-space optimizer state shared by SGD-with-momentum and Adam.
struct PointOptimizer {
    kind: AttackOptimizer,
    velocity: Array1<f64>,
    second_moment: Array1<f64>,
    step: u64,
}

impl PointOptimizer {
    fn new(kind: AttackOptimizer, dim: usize) -> Self {
        PointOptimizer {
            kind,
            velocity: Array1::zeros(dim),
            second_moment: Array1::zeros(dim),
            step: 0,
        }
    }

    fn update(&mut self, z: &mut Array1<f64>, grad: &Array1<f64>) {
        self.step += 1;
        match self.kind {
            AttackOptimizer::Sgd {
                learning_rate,
                momentum,
            } => {
                for i in 0..z.len() {
                    self.velocity[i] = momentum * self.velocity[i] + grad[i];
                    z[i] -= learning_rate * self.velocity[i];
                }
            }
            AttackOptimizer::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.step as f64;
                let bias1 = 1.0 - beta1.powf(t);
                let bias2 = 1.0 - beta2.powf(t);
                for i in 0..z.len() {
                    self.velocity[i] = beta1 * self.velocity[i] + (1.0 - beta1) * grad[i];
                    self.second_moment[i] =
                        beta2 * self.second_moment[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = self.velocity[i] / bias1;
                    let v_hat = self.second_moment[i] / bias2;
                    z[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
}

/// Optimizes one latent point through `decode -> model -> loss`, recording
/// the trajectory. This is the shared core of `simple_invert` and
/// `optimize_latents`.
fn optimize_point(
    model: &MlpClassifier,
    prior: &Prior,
    start_latent: ArrayView1<f64>,
    target_class: usize,
    config: &AttackConfig,
) -> Result<Trajectory> {
    let mut z = start_latent.to_owned();
    let mut optimizer = PointOptimizer::new(config.optimizer, z.len());
    let mut steps = Vec::new();
    let record_latent = !prior.is_identity();

    let mut updates = 0usize;
    loop {
        let x = prior.decode(z.view())?;
        let (loss, input_grad) = model.input_gradient(x.view(), config.loss, target_class)?;
        let confidence = model.predict_proba_one(x.view())?[target_class];
        steps.push(TrajectoryStep {
            x: x.to_vec(),
            latent: record_latent.then(|| z.to_vec()),
            loss,
            confidence,
            gradient: input_grad.to_vec(),
        });
        if let Some(sc) = config.stop_confidence {
            if confidence >= sc {
                return Ok(Trajectory {
                    steps,
                    update_count: updates,
                    stop_reason: StopReason::Confidence,
                });
            }
        }
        if updates == config.max_steps {
            return Ok(Trajectory {
                steps,
                update_count: updates,
                stop_reason: StopReason::MaxSteps,
            });
        }
        let latent_grad = prior.pullback(input_grad.view())?;
        optimizer.update(&mut z, &latent_grad);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "attack iterate diverged at step {updates}"
            )));
        }
        updates += 1;
    }
}

/// The plain gradient attack: descend `x <- x - lr * grad L(x)` in input
/// space from `start` until the stop confidence is reached or `max_steps`
/// updates have been made.
pub fn simple_invert(
    model: &MlpClassifier,
    target_class: usize,
    start: ArrayView1<f64>,
    config: &AttackConfig,
) -> Result<Trajectory> {
    config.validate()?;
    let prior = Prior::identity(start.len());
    optimize_point(model, &prior, start, target_class, config)
}

/// splitmix64 step, used to derive independent per-candidate seeds.
fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const STAGE1_SALT: u64 = 0x5354414745_31; // "STAGE1"
const STAGE3_SALT: u64 = 0x5354414745_33; // "STAGE3"

/// Mean target-class probability over `transform_count` jittered copies,
/// deterministic in `(transform seed, stage salt, candidate index)`.
fn robust_confidence(
    model: &MlpClassifier,
    x: ArrayView1<f64>,
    target_class: usize,
    config: &AttackConfig,
    stage_salt: u64,
    candidate_index: usize,
) -> Result<f64> {
    let t = JitterTransform {
        std_dev: config.transform.std_dev,
        seed: mix_seed(config.transform.seed, stage_salt ^ candidate_index as u64),
    };
    let mut total = 0.0;
    for draw in 0..config.transform_count {
        let jittered = apply_jitter(x, &t, draw as u64);
        total += model.predict_proba_one(jittered.view())?[target_class];
    }
    Ok(total / config.transform_count as f64)
}

/// Sorts `(index, score)` pairs by score descending with ascending-index
/// tie-breaks and returns the first `keep` indices.
fn top_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    order
}

/// Stage-1 output: the shared latent pool and the per-class winners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSelection {
    /// All `pool_size` sampled latents, in draw order.
    pub latents: Vec<Vec<f64>>,
    /// For each requested class: indices into `latents`, best first.
    pub selected: Vec<ClassSelection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class: usize,
    pub indices: Vec<usize>,
    /// Robust-confidence score of every pool latent for this class.
    pub scores: Vec<f64>,
}

/// Stage 1: draw `pool_size` standard-normal latents and keep, per class,
/// the `candidates_per_class` with the highest robust confidence.
pub fn sample_candidates(
    model: &MlpClassifier,
    prior: &Prior,
    target_classes: &[usize],
    config: &AttackConfig,
) -> Result<SampleSelection> {
    config.validate()?;
    if target_classes.iter().any(|&c| c >= model.config.num_classes) {
        return Err(Error::invalid("target class out of range"));
    }
    let k = prior.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let latents: Vec<Array1<f64>> = (0..config.pool_size)
        .map(|_| Array1::from_shape_fn(k, |_| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let decoded: Vec<Array1<f64>> = latents
        .iter()
        .map(|z| prior.decode(z.view()))
        .collect::<Result<_>>()?;

    let mut selected = Vec::with_capacity(target_classes.len());
    for &class in target_classes {
        let scores: Vec<f64> = decoded
            .par_iter()
            .enumerate()
            .map(|(i, x)| robust_confidence(model, x.view(), class, config, STAGE1_SALT, i))
            .collect::<Result<_>>()?;
        let indices = top_indices(&scores, config.candidates_per_class);
        selected.push(ClassSelection {
            class,
            indices,
            scores,
        });
    }
    Ok(SampleSelection {
        latents: latents.iter().map(|z| z.to_vec()).collect(),
        selected,
    })
}

/// One successfully optimized candidate, with its full trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedCandidate {
    /// Index into the stage-1 latent pool.
    pub index: usize,
    pub trajectory: Trajectory,
}

/// Stage-2 output: optimized candidates in ascending pool-index order plus
/// the candidates that failed numerically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub optimized: Vec<OptimizedCandidate>,
    pub failures: Vec<(usize, String)>,
}

/// Stage 2: optimize each latent independently. A numeric failure drops that
/// candidate and is recorded; it does not abort the stage.
pub fn optimize_latents(
    model: &MlpClassifier,
    prior: &Prior,
    latents: &[(usize, Array1<f64>)],
    target_class: usize,
    config: &AttackConfig,
) -> Result<OptimizeOutcome> {
    config.validate()?;
    let results: Vec<(usize, Result<Trajectory>)> = latents
        .par_iter()
        .map(|(index, z)| {
            (
                *index,
                optimize_point(model, prior, z.view(), target_class, config),
            )
        })
        .collect();

    let mut optimized = Vec::new();
    let mut failures = Vec::new();
    for (index, result) in results {
        match result {
            Ok(trajectory) => optimized.push(OptimizedCandidate { index, trajectory }),
            Err(Error::Numeric { context }) => failures.push((index, context)),
            Err(other) => return Err(other),
        }
    }
    optimized.sort_by_key(|c| c.index);
    failures.sort_by_key(|f| f.0);
    Ok(OptimizeOutcome {
        optimized,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedResult {
    /// Index into the stage-1 latent pool.
    pub candidate_index: usize,
    pub point: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latent: Option<Vec<f64>>,
    pub robust_confidence: f64,
}

/// Stage 3: score every optimized candidate by robust confidence over fresh
/// jitter draws and keep the top `final_per_class`. If fewer candidates than
/// requested survive, all are returned and the shortfall is reported.
pub fn select_results(
    model: &MlpClassifier,
    optimized: &[OptimizedCandidate],
    target_class: usize,
    config: &AttackConfig,
) -> Result<(Vec<SelectedResult>, Option<String>)> {
    config.validate()?;
    if optimized.is_empty() {
        return Err(Error::invalid("no optimized candidates to select from"));
    }
    let scores: Vec<f64> = optimized
        .par_iter()
        .map(|c| {
            robust_confidence(
                model,
                c.trajectory.final_point().view(),
                target_class,
                config,
                STAGE3_SALT,
                c.index,
            )
        })
        .collect::<Result<_>>()?;
    let order = top_indices(&scores, config.final_per_class);
    let selected = order
        .iter()
        .map(|&i| SelectedResult {
            candidate_index: optimized[i].index,
            point: optimized[i].trajectory.final_point().to_vec(),
            latent: optimized[i].trajectory.final_latent().map(|z| z.to_vec()),
            robust_confidence: scores[i],
        })
        .collect();
    let shortfall = (optimized.len() < config.final_per_class).then(|| {
        format!(
            "only {} candidates available for final_per_class {}",
            optimized.len(),
            config.final_per_class
        )
    });
    Ok((selected, shortfall))
}

/// Everything recorded about one class during a full pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAttack {
    pub class: usize,
    /// Stage-1 winners (pool indices, best first).
    pub candidate_indices: Vec<usize>,
    pub optimized: Vec<OptimizedCandidate>,
    pub failures: Vec<(usize, String)>,
    pub selected: Vec<SelectedResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shortfall: Option<String>,
}

/// Full provenance of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub config: AttackConfig,
    pub prior: Prior,
    pub target_classes: Vec<usize>,
    pub classes: Vec<ClassAttack>,
}

/// Runs the three-stage pipeline: sample candidates, optimize each latent,
/// select final results by robust confidence.
pub fn run_ppa(
    model: &MlpClassifier,
    prior: &Prior,
    target_classes: &[usize],
    config: &AttackConfig,
) -> Result<AttackRun> {
    config.validate()?;
    let stage_err = |stage: &str, e: Error| Error::InvalidState(format!("{stage}: {e}"));
    let sampled = sample_candidates(model, prior, target_classes, config)
        .map_err(|e| stage_err("candidate sampling", e))?;

    let mut classes = Vec::with_capacity(target_classes.len());
    for selection in &sampled.selected {
        let latents: Vec<(usize, Array1<f64>)> = selection
            .indices
            .iter()
            .map(|&i| (i, Array1::from_vec(sampled.latents[i].clone())))
            .collect();
        let outcome = optimize_latents(model, prior, &latents, selection.class, config)
            .map_err(|e| stage_err("latent optimization", e))?;
        if outcome.optimized.is_empty() {
            return Err(Error::InvalidState(format!(
                "latent optimization: every candidate for class {} failed numerically",
                selection.class
            )));
        }
        let (selected, shortfall) =
            select_results(model, &outcome.optimized, selection.class, config)
                .map_err(|e| stage_err("final selection", e))?;
        classes.push(ClassAttack {
            class: selection.class,
            candidate_indices: selection.indices.clone(),
            optimized: outcome.optimized,
            failures: outcome.failures,
            selected,
            shortfall,
        });
    }
    Ok(AttackRun {
        config: config.clone(),
        prior: prior.clone(),
        target_classes: target_classes.to_vec(),
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{train, MlpConfig, TrainConfig};
    use crate::data::{gen_blobs, BlobSpec};
    use crate::inversion::fit_pca_prior;
    use crate::smoothing::SmoothingSchedule;
    use ndarray::array;

    fn tiny_model(seed: u64) -> MlpClassifier {
        MlpClassifier::new(MlpConfig::toy(2, 3), seed).unwrap()
    }

    /// A quickly trained separable model so confidences actually move.
    fn trained_model(seed: u64) -> MlpClassifier {
        let data = gen_blobs(&BlobSpec::toy_triangle(0.3, 30, seed)).unwrap();
        let mut model = tiny_model(seed);
        let config = TrainConfig {
            epochs: 400,
            ..TrainConfig::toy(SmoothingSchedule::constant(0.0), seed)
        };
        train(&mut model, &data, &config).unwrap();
        model
    }

    fn fast_config(seed: u64) -> AttackConfig {
        AttackConfig {
            max_steps: 40,
            stop_confidence: None,
            pool_size: 6,
            candidates_per_class: 3,
            final_per_class: 2,
            transform: JitterTransform {
                std_dev: 0.1,
                seed,
            },
            transform_count: 4,
            ..AttackConfig::toy(seed)
        }
    }

    #[test]
    fn config_invariants_enforced() {
        let mut c = fast_config(1);
        c.candidates_per_class = 10; // exceeds pool_size
        assert!(c.validate().is_err());
        let mut c = fast_config(1);
        c.max_steps = 0;
        assert!(c.validate().is_err());
        let mut c = fast_config(1);
        c.stop_confidence = Some(1.5);
        assert!(c.validate().is_err());
    }

    #[test]
    fn start_above_stop_confidence_takes_zero_steps() {
        let model = trained_model(3);
        let data = gen_blobs(&BlobSpec::toy_triangle(0.05, 1, 3)).unwrap();
        // a point at a class center is classified with near-certainty
        let start = data.features.row(0).to_owned();
        let config = AttackConfig {
            stop_confidence: Some(0.5),
            ..fast_config(3)
        };
        let t = simple_invert(&model, data.labels[0], start.view(), &config).unwrap();
        assert_eq!(t.update_count, 0);
        assert_eq!(t.stop_reason, StopReason::Confidence);
        assert_eq!(t.steps.len(), 1);
    }

    #[test]
    fn no_stop_confidence_runs_exactly_max_steps() {
        let model = tiny_model(5);
        let config = AttackConfig {
            max_steps: 50,
            stop_confidence: None,
            ..fast_config(5)
        };
        let t = simple_invert(&model, 0, array![0.3, -0.2].view(), &config).unwrap();
        assert_eq!(t.update_count, 50);
        assert_eq!(t.stop_reason, StopReason::MaxSteps);
        assert_eq!(t.steps.len(), 51);
    }

    #[test]
    fn trajectory_confidences_in_unit_interval() {
        let model = tiny_model(7);
        let t = simple_invert(&model, 1, array![1.0, 1.0].view(), &fast_config(7)).unwrap();
        for step in &t.steps {
            assert!((0.0..=1.0).contains(&step.confidence));
            assert!(step.loss.is_finite());
            assert_eq!(step.x.len(), 2);
            assert_eq!(step.gradient.len(), 2);
            assert!(step.latent.is_none()); // identity prior records no latents
        }
    }

    #[test]
    fn simple_invert_is_deterministic() {
        let model = trained_model(11);
        let config = fast_config(11);
        let a = simple_invert(&model, 2, array![0.1, 0.2].view(), &config).unwrap();
        let b = simple_invert(&model, 2, array![0.1, 0.2].view(), &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_leaves_latents_unchanged() {
        let model = tiny_model(13);
        let config = AttackConfig {
            optimizer: AttackOptimizer::Sgd {
                learning_rate: 0.0,
                momentum: 0.0,
            },
            max_steps: 10,
            stop_confidence: None,
            ..fast_config(13)
        };
        let prior = Prior::identity(2);
        let latents = vec![(0usize, array![0.4, -0.9])];
        let outcome = optimize_latents(&model, &prior, &latents, 0, &config).unwrap();
        let t = &outcome.optimized[0].trajectory;
        assert_eq!(t.steps.first().unwrap().x, t.steps.last().unwrap().x);
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        // chain rule through decode -> model -> loss vs central differences
        let data = gen_blobs(&BlobSpec::toy_triangle(0.5, 40, 17)).unwrap();
        let prior = fit_pca_prior(data.features.view(), 2).unwrap();
        let model = trained_model(17);
        let z0 = array![0.37, -0.81];
        let target = 1;

        let x = prior.decode(z0.view()).unwrap();
        let (_, input_grad) = model
            .input_gradient(x.view(), AttackLoss::CeIdentity, target)
            .unwrap();
        let latent_grad = prior.pullback(input_grad.view()).unwrap();

        let h = 1e-5;
        for j in 0..2 {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[j] += h;
            zm[j] -= h;
            let f = |z: &Array1<f64>| {
                let x = prior.decode(z.view()).unwrap();
                model
                    .input_gradient(x.view(), AttackLoss::CeIdentity, target)
                    .unwrap()
                    .0
            };
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            let denom = fd.abs().max(latent_grad[j].abs()).max(1e-8);
            assert!(
                (latent_grad[j] - fd).abs() / denom < 1e-4,
                "latent dim {j}: analytic {} vs fd {fd}",
                latent_grad[j]
            );
        }
    }

    #[test]
    fn sample_zero_sigma_single_transform_equals_plain_confidence() {
        let model = trained_model(19);
        let prior = Prior::identity(2);
        let config = AttackConfig {
            transform: JitterTransform {
                std_dev: 0.0,
                seed: 19,
            },
            transform_count: 1,
            ..fast_config(19)
        };
        let sampled = sample_candidates(&model, &prior, &[0], &config).unwrap();
        let selection = &sampled.selected[0];
        for (i, z) in sampled.latents.iter().enumerate() {
            let x = Array1::from_vec(z.clone());
            let plain = model.predict_proba_one(x.view()).unwrap()[0];
            assert!((selection.scores[i] - plain).abs() < 1e-12);
        }
        // ranking equals a brute-force sort of (score, index)
        let brute = {
            let mut order: Vec<usize> = (0..selection.scores.len()).collect();
            order.sort_by(|&a, &b| {
                selection.scores[b]
                    .partial_cmp(&selection.scores[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            order[..config.candidates_per_class].to_vec()
        };
        assert_eq!(selection.indices, brute);
    }

    #[test]
    fn sample_keep_all_when_candidates_equal_pool() {
        let model = tiny_model(23);
        let prior = Prior::identity(2);
        let config = AttackConfig {
            candidates_per_class: 6,
            final_per_class: 6,
            ..fast_config(23)
        };
        let sampled = sample_candidates(&model, &prior, &[0, 1, 2], &config).unwrap();
        for selection in &sampled.selected {
            let mut idx = selection.indices.clone();
            idx.sort_unstable();
            assert_eq!(idx, vec![0, 1, 2, 3, 4, 5]);
        }
    }

    #[test]
    fn sample_selection_matches_brute_force_on_larger_pool() {
        let model = trained_model(29);
        let data = gen_blobs(&BlobSpec::toy_triangle(0.5, 40, 29)).unwrap();
        let prior = fit_pca_prior(data.features.view(), 2).unwrap();
        let config = AttackConfig {
            pool_size: 50,
            candidates_per_class: 10,
            final_per_class: 5,
            ..fast_config(29)
        };
        let sampled = sample_candidates(&model, &prior, &[1], &config).unwrap();
        let selection = &sampled.selected[0];
        // independent re-scoring with the same deterministic jitter streams
        let mut pairs: Vec<(usize, f64)> = (0..config.pool_size)
            .map(|i| {
                let z = Array1::from_vec(sampled.latents[i].clone());
                let x = prior.decode(z.view()).unwrap();
                let t = JitterTransform {
                    std_dev: config.transform.std_dev,
                    seed: mix_seed(config.transform.seed, STAGE1_SALT ^ i as u64),
                };
                let mut total = 0.0;
                for draw in 0..config.transform_count {
                    let j = apply_jitter(x.view(), &t, draw as u64);
                    total += model.predict_proba_one(j.view()).unwrap()[1];
                }
                (i, total / config.transform_count as f64)
            })
            .collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let brute: Vec<usize> = pairs[..10].iter().map(|p| p.0).collect();
        assert_eq!(selection.indices, brute);
    }

    #[test]
    fn optimization_improves_confidence_for_most_candidates() {
        let model = trained_model(31);
        let prior = Prior::identity(2);
        let config = AttackConfig {
            max_steps: 200,
            stop_confidence: None,
            ..fast_config(31)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let latents: Vec<(usize, Array1<f64>)> = (0..20)
            .map(|i| {
                (
                    i,
                    Array1::from_shape_fn(2, |_| rng.sample::<f64, _>(StandardNormal)),
                )
            })
            .collect();
        let outcome = optimize_latents(&model, &prior, &latents, 0, &config).unwrap();
        assert!(outcome.failures.is_empty());
        let improved = outcome
            .optimized
            .iter()
            .filter(|c| c.trajectory.final_confidence() >= c.trajectory.initial_confidence())
            .count();
        assert!(
            improved as f64 >= 0.9 * outcome.optimized.len() as f64,
            "only {improved}/{} improved",
            outcome.optimized.len()
        );
    }

    #[test]
    fn select_identity_when_final_equals_candidate_count() {
        let model = trained_model(37);
        let prior = Prior::identity(2);
        let config = AttackConfig {
            final_per_class: 3,
            candidates_per_class: 3,
            max_steps: 20,
            stop_confidence: None,
            ..fast_config(37)
        };
        let latents: Vec<(usize, Array1<f64>)> = vec![
            (0, array![0.5, 0.5]),
            (1, array![-0.5, 0.2]),
            (2, array![0.0, -0.7]),
        ];
        let outcome = optimize_latents(&model, &prior, &latents, 0, &config).unwrap();
        let (selected, shortfall) = select_results(&model, &outcome.optimized, 0, &config).unwrap();
        assert!(shortfall.is_none());
        let mut indices: Vec<usize> = selected.iter().map(|s| s.candidate_index).collect();
        indices.sort_unstable();
        assert_eq!(indices, vec![0, 1, 2]);
    }

    #[test]
    fn select_shortfall_returns_everything() {
        let model = trained_model(41);
        let prior = Prior::identity(2);
        let config = AttackConfig {
            final_per_class: 3,
            candidates_per_class: 3,
            pool_size: 6,
            max_steps: 10,
            stop_confidence: None,
            ..fast_config(41)
        };
        let latents = vec![(0usize, array![0.5, 0.5])];
        let outcome = optimize_latents(&model, &prior, &latents, 0, &config).unwrap();
        let (selected, shortfall) = select_results(&model, &outcome.optimized, 0, &config).unwrap();
        assert_eq!(selected.len(), 1);
        assert!(shortfall.is_some());
    }

    #[test]
    fn selection_invariant_to_candidate_order() {
        let model = trained_model(43);
        let prior = Prior::identity(2);
        let config = AttackConfig {
            max_steps: 30,
            stop_confidence: None,
            ..fast_config(43)
        };
        let latents: Vec<(usize, Array1<f64>)> = vec![
            (0, array![0.5, 0.5]),
            (1, array![-0.5, 0.2]),
            (2, array![0.0, -0.7]),
        ];
        let reversed: Vec<(usize, Array1<f64>)> = latents.iter().rev().cloned().collect();
        let a = optimize_latents(&model, &prior, &latents, 0, &config).unwrap();
        let b = optimize_latents(&model, &prior, &reversed, 0, &config).unwrap();
        assert_eq!(a, b);
        let sel_a = select_results(&model, &a.optimized, 0, &config).unwrap();
        let sel_b = select_results(&model, &b.optimized, 0, &config).unwrap();
        assert_eq!(sel_a, sel_b);
    }

    #[test]
    fn degenerate_pipeline_equals_simple_invert() {
        let model = trained_model(47);
        let prior = Prior::identity(2);
        let config = AttackConfig {
            pool_size: 1,
            candidates_per_class: 1,
            final_per_class: 1,
            max_steps: 60,
            stop_confidence: None,
            ..fast_config(47)
        };
        let run = run_ppa(&model, &prior, &[2], &config).unwrap();
        assert_eq!(run.classes.len(), 1);
        assert_eq!(run.classes[0].optimized.len(), 1);
        // the same start point through simple_invert gives the same trajectory
        let start = Array1::from_vec(run.classes[0].optimized[0].trajectory.steps[0].x.clone());
        let direct = simple_invert(&model, 2, start.view(), &config).unwrap();
        assert_eq!(run.classes[0].optimized[0].trajectory, direct);
    }

    #[test]
    fn run_ppa_is_bit_identical_across_reruns() {
        let model = trained_model(53);
        let data = gen_blobs(&BlobSpec::toy_triangle(0.5, 30, 53)).unwrap();
        let prior = fit_pca_prior(data.features.view(), 2).unwrap();
        let config = AttackConfig {
            max_steps: 25,
            stop_confidence: Some(0.95),
            ..fast_config(53)
        };
        let a = run_ppa(&model, &prior, &[0, 1, 2], &config).unwrap();
        let b = run_ppa(&model, &prior, &[0, 1, 2], &config).unwrap();
        assert_eq!(a, b);
        let json_a = serde_json::to_string(&a).unwrap();
        let json_b = serde_json::to_string(&b).unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn run_ppa_records_latents_with_pca_prior() {
        let model = trained_model(59);
        let data = gen_blobs(&BlobSpec::toy_triangle(0.5, 30, 59)).unwrap();
        let prior = fit_pca_prior(data.features.view(), 2).unwrap();
        let config = AttackConfig {
            max_steps: 15,
            stop_confidence: None,
            ..fast_config(59)
        };
        let run = run_ppa(&model, &prior, &[0], &config).unwrap();
        let class = &run.classes[0];
        assert_eq!(class.selected.len(), config.final_per_class);
        for c in &class.optimized {
            for step in &c.trajectory.steps {
                assert!(step.latent.is_some());
            }
        }
        for s in &class.selected {
            assert!(s.latent.is_some());
            assert!((0.0..=1.0).contains(&s.robust_confidence));
        }
    }
}

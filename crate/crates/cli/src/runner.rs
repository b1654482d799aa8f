//! Command implementations: each takes a resolved config and an output
//! directory and writes JSON/CSV artifacts with full provenance.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smoothinv::classifier::{
    accuracy, ece, train, Checkpoint, EpochStats, MlpClassifier, TrainConfig,
};
use smoothinv::data::{gen_blobs, load_csv, save_csv, split, LabeledDataset};
use smoothinv::inversion::{
    fit_pca_prior, run_ppa, simple_invert, AttackRun, Prior, Trajectory,
};
use smoothinv::metrics::{
    attack_accuracy, attack_success_rate, embedding_stats, eval_model_config, feature_distance,
    fgsm, gradient_cosine_series, knowledge_extraction, pgd, LabeledReconstruction,
    MetricsReport, SurrogateConfig,
};
use smoothinv::smoothing::SmoothingSchedule;
use smoothinv::{Error, Result};

use crate::artifacts::Artifact;
use crate::config::{derive_seed, seed_component, DataSource, ExperimentConfig, PriorSpec};

pub struct PreparedData {
    pub full: LabeledDataset,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Generates or loads the dataset and performs the stratified split.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let full = match &config.data {
        DataSource::Spec { spec } => gen_blobs(spec)?,
        DataSource::Path { path } => load_csv(path)?,
    };
    if full.class_count != config.model.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes but the model expects {}",
            full.class_count, config.model.num_classes
        )));
    }
    if full.dim() != config.model.input_dim {
        return Err(Error::invalid(format!(
            "dataset dimension {} does not match model input_dim {}",
            full.dim(),
            config.model.input_dim
        )));
    }
    let split_seed = derive_seed(config.seed, seed_component::SPLIT);
    let (train, test) = split(&full, config.test_fraction, split_seed)?;
    Ok(PreparedData { full, train, test })
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(bytes_sha256(&bytes))
}

fn bytes_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataProvenance {
    pub source: DataSource,
    pub samples: usize,
    pub dimension: usize,
    pub classes: usize,
    pub csv_sha256: String,
}

/// Writes `data.csv` plus a provenance JSON describing it.
pub fn run_gen_data(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let data = prepare_data(config)?;
    let csv_path = out.join("data.csv");
    save_csv(&data.full, &csv_path)?;
    let provenance = DataProvenance {
        source: config.data.clone(),
        samples: data.full.len(),
        dimension: data.full.dim(),
        classes: data.full.class_count,
        csv_sha256: file_sha256(&csv_path)?,
    };
    Artifact::new(config.hash(), config.seed, provenance).write(out.join("data_provenance.json"))?;
    Ok(csv_path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub final_train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_ece: f64,
    pub smoothing: SmoothingSchedule,
    pub checkpoint_sha256: String,
}

fn write_history_csv(history: &[EpochStats], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,loss,accuracy,alpha")?;
    for s in history {
        writeln!(w, "{},{},{},{}", s.epoch, s.loss, s.accuracy, s.alpha)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the target model; writes `checkpoint.json`, `history.csv`, and a
/// summary JSON with test accuracy and calibration.
pub fn run_train(config: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    let data = prepare_data(config)?;
    let init_seed = derive_seed(config.seed, seed_component::MODEL_INIT);
    let mut model = MlpClassifier::new(config.model.clone(), init_seed)?;
    let history = train(&mut model, &data.train, &config.train)?;

    let checkpoint_path = out.join("checkpoint.json");
    Checkpoint::new(model.clone(), init_seed, Some(config.train.clone()))
        .save(&checkpoint_path)?;
    write_history_csv(&history, &out.join("history.csv"))?;

    let probs = model.predict_proba(data.test.features.view())?;
    let summary = TrainSummary {
        epochs: history.len(),
        final_loss: history.last().map(|s| s.loss).unwrap_or(f64::NAN),
        final_train_accuracy: history.last().map(|s| s.accuracy).unwrap_or(f64::NAN),
        test_accuracy: accuracy(&model, &data.test)?,
        test_ece: ece(probs.view(), &data.test.labels, config.metrics.ece_bins)?,
        smoothing: config.train.smoothing.clone(),
        checkpoint_sha256: file_sha256(&checkpoint_path)?,
    };
    Artifact::new(config.hash(), config.seed, summary.clone())
        .write(out.join("train_summary.json"))?;
    Ok(summary)
}

pub fn load_checkpoint(out: &Path) -> Result<Checkpoint> {
    let path = out.join("checkpoint.json");
    if !path.exists() {
        return Err(Error::invalid(format!(
            "no checkpoint at {}; run the train command first",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

/// Builds the configured prior. The PCA prior is fit on the held-out test
/// split so the attack never touches the target model's training data.
pub fn build_prior(config: &ExperimentConfig, data: &PreparedData) -> Result<Prior> {
    match config.prior {
        PriorSpec::Identity => Ok(Prior::identity(config.model.input_dim)),
        PriorSpec::Pca { latent_dim } => fit_pca_prior(data.test.features.view(), latent_dim),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    Simple,
    Ppa,
}

impl std::str::FromStr for AttackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(AttackMode::Simple),
            "ppa" => Ok(AttackMode::Ppa),
            other => Err(Error::invalid(format!("unknown attack mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimpleAttackResult {
    pub class: usize,
    pub start: Vec<f64>,
    pub final_point: Vec<f64>,
    pub final_confidence: f64,
    pub steps: usize,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimpleAttackReport {
    pub results: Vec<SimpleAttackResult>,
}

fn write_trajectory_csv(trajectory: &Trajectory, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = trajectory.steps.first().map(|s| s.x.len()).unwrap_or(0);
    let xs: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let gs: Vec<String> = (0..d).map(|j| format!("g{j}")).collect();
    writeln!(w, "step,{},loss,confidence,{}", xs.join(","), gs.join(","))?;
    for (t, s) in trajectory.steps.iter().enumerate() {
        let xs: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        let gs: Vec<String> = s.gradient.iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{t},{},{},{},{}",
            xs.join(","),
            s.loss,
            s.confidence,
            gs.join(",")
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic standard-normal start point for a simple attack on a class.
pub fn simple_start(config: &ExperimentConfig, class: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.attack.seed);
    rng.set_stream(100 + class as u64);
    Array1::from_shape_fn(config.model.input_dim, |_| {
        rng.sample::<f64, _>(StandardNormal)
    })
}

/// Runs the chosen attack against every class of the checkpointed model and
/// writes the run JSON plus one CSV per trajectory.
pub fn run_attack(config: &ExperimentConfig, out: &Path, mode: AttackMode) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let checkpoint = load_checkpoint(out)?;
    let model = checkpoint.model;
    let classes: Vec<usize> = (0..config.model.num_classes).collect();
    let traj_dir = out.join("trajectories");
    std::fs::create_dir_all(&traj_dir)?;

    match mode {
        AttackMode::Simple => {
            let mut results = Vec::new();
            for &class in &classes {
                let start = simple_start(config, class);
                let trajectory = simple_invert(&model, class, start.view(), &config.attack)?;
                write_trajectory_csv(
                    &trajectory,
                    &traj_dir.join(format!("simple_class{class}.csv")),
                )?;
                results.push(SimpleAttackResult {
                    class,
                    start: start.to_vec(),
                    final_point: trajectory.final_point().to_vec(),
                    final_confidence: trajectory.final_confidence(),
                    steps: trajectory.update_count,
                    trajectory,
                });
            }
            Artifact::new(config.hash(), config.seed, SimpleAttackReport { results })
                .write(out.join("simple_attack.json"))?;
        }
        AttackMode::Ppa => {
            let data = prepare_data(config)?;
            let prior = build_prior(config, &data)?;
            let run = run_ppa(&model, &prior, &classes, &config.attack)?;
            for class_attack in &run.classes {
                for candidate in &class_attack.optimized {
                    write_trajectory_csv(
                        &candidate.trajectory,
                        &traj_dir.join(format!(
                            "class{}_cand{}.csv",
                            class_attack.class, candidate.index
                        )),
                    )?;
                }
            }
            Artifact::new(config.hash(), config.seed, run).write(out.join("attack.json"))?;
        }
    }
    Ok(())
}

/// Provenance wrapper around the metrics payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metrics: MetricsReport,
    pub checkpoint_sha256: String,
    /// SHA-256 of the attack run's payload JSON (envelope timestamp
    /// excluded, so reruns hash identically).
    pub attack_sha256: String,
    pub eval_model_seed: u64,
    pub surrogate_seed: u64,
    /// Caveats that are part of the report's meaning.
    pub notes: Vec<String>,
}

/// Trains the independent evaluation model and the surrogate, then computes
/// the full metric suite over a finished attack run.
pub fn run_evaluate(config: &ExperimentConfig, out: &Path) -> Result<EvaluationReport> {
    let data = prepare_data(config)?;
    let checkpoint_path = out.join("checkpoint.json");
    let attack_path = out.join("attack.json");
    if !attack_path.exists() {
        return Err(Error::invalid(format!(
            "no attack run at {}; run the attack command first",
            attack_path.display()
        )));
    }
    let checkpoint = load_checkpoint(out)?;
    let target = checkpoint.model;
    let attack: Artifact<AttackRun> = Artifact::read(&attack_path)?;
    let attack_sha256 = bytes_sha256(attack.payload_json()?.as_bytes());
    let run = attack.payload;

    // evaluation model: same data, different seed, one wider extra layer
    let eval_seed = derive_seed(config.seed, seed_component::EVAL_MODEL);
    let mut eval_model = MlpClassifier::new(eval_model_config(&config.model), eval_seed)?;
    let eval_train_config = TrainConfig {
        seed: eval_seed,
        smoothing: SmoothingSchedule::constant(0.0),
        ..config.train.clone()
    };
    train(&mut eval_model, &data.train, &eval_train_config)?;

    let reconstructions: Vec<LabeledReconstruction> = run
        .classes
        .iter()
        .flat_map(|c| {
            c.selected
                .iter()
                .map(|s| (c.class, Array1::from_vec(s.point.clone())))
        })
        .collect();
    if reconstructions.is_empty() {
        return Err(Error::invalid("attack run contains no reconstructions"));
    }

    let k = config.acc_k();
    let (acc_at_1, acc_at_k) = attack_accuracy(&eval_model, &reconstructions, k)?;

    let mut delta_total = 0.0;
    let mut delta_classes = 0usize;
    for class_attack in &run.classes {
        let points: Vec<Array1<f64>> = class_attack
            .selected
            .iter()
            .map(|s| Array1::from_vec(s.point.clone()))
            .collect();
        if points.is_empty() {
            continue;
        }
        delta_total += feature_distance(&eval_model, &points, &data.train, class_attack.class)?;
        delta_classes += 1;
    }
    let delta_eval = delta_total / delta_classes as f64;

    let surrogate_seed = derive_seed(config.seed, seed_component::SURROGATE);
    let surrogate_config = SurrogateConfig::toy(config.model.clone(), surrogate_seed);
    let (xi_train, xi_test) =
        knowledge_extraction(&reconstructions, &data.train, &data.test, &surrogate_config)?;

    let probs = target.predict_proba(data.test.features.view())?;
    let test_ece = ece(probs.view(), &data.test.labels, config.metrics.ece_bins)?;

    let embedding = embedding_stats(&target, &data.train)?;

    // candidates that start above the confidence threshold stop before any
    // update; they carry no gradient sequence and are excluded here
    let trajectories: Vec<Trajectory> = run
        .classes
        .iter()
        .flat_map(|c| c.optimized.iter().map(|o| o.trajectory.clone()))
        .filter(|t| t.steps.len() >= 2)
        .collect();
    let gradient_cosine = if trajectories.is_empty() {
        Vec::new()
    } else {
        gradient_cosine_series(&trajectories)?
    };

    let report = EvaluationReport {
        metrics: MetricsReport {
            acc_at_1,
            acc_at_k,
            k,
            delta_eval,
            xi_train,
            xi_test,
            ece: test_ece,
            embedding,
            gradient_cosine,
        },
        checkpoint_sha256: file_sha256(&checkpoint_path)?,
        attack_sha256,
        eval_model_seed: eval_seed,
        surrogate_seed,
        notes: vec![
            "evaluation model: target architecture plus one extra hidden layer of double width, independently seeded".into(),
            "feature distance is computed in the evaluation model's penultimate space only; no external face-embedding analogue exists at this scale".into(),
        ],
    };
    Artifact::new(config.hash(), config.seed, report.clone()).write(out.join("metrics.json"))?;

    // series CSVs for plotting
    let mut w = BufWriter::new(File::create(out.join("gradient_cosine.csv"))?);
    writeln!(w, "step,mean,std,count")?;
    for p in &report.metrics.gradient_cosine {
        writeln!(w, "{},{},{},{}", p.step, p.mean, p.std, p.count)?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(out.join("embedding_distances.csv"))?);
    writeln!(w, "intra_mean,inter_mean,intra_nearest,inter_nearest")?;
    let e = &report.metrics.embedding;
    let rows = e
        .intra_mean_values
        .len()
        .max(e.inter_mean_values.len())
        .max(e.intra_nearest_values.len())
        .max(e.inter_nearest_values.len());
    let cell = |v: &Vec<f64>, i: usize| {
        v.get(i).map(|x| x.to_string()).unwrap_or_default()
    };
    for i in 0..rows {
        writeln!(
            w,
            "{},{},{},{}",
            cell(&e.intra_mean_values, i),
            cell(&e.inter_mean_values, i),
            cell(&e.intra_nearest_values, i),
            cell(&e.inter_nearest_values, i)
        )?;
    }
    w.flush()?;
    Ok(report)
}

/// Writes a regular confidence grid over a 2D input domain for replotting.
pub fn run_confidence_grid(
    config: &ExperimentConfig,
    out: &Path,
    bounds: [f64; 4],
    resolution: usize,
) -> Result<PathBuf> {
    if config.model.input_dim != 2 {
        return Err(Error::invalid(
            "confidence grids are only defined for 2D input models",
        ));
    }
    if resolution < 2 {
        return Err(Error::invalid("resolution must be >= 2"));
    }
    let [x1_min, x1_max, x2_min, x2_max] = bounds;
    if !(x1_min < x1_max && x2_min < x2_max) {
        return Err(Error::invalid("bounds must satisfy min < max on both axes"));
    }
    std::fs::create_dir_all(out)?;
    let checkpoint = load_checkpoint(out)?;
    let model = checkpoint.model;
    let c = model.config.num_classes;

    let n = resolution;
    let mut points = Array2::zeros((n * n, 2));
    for i in 0..n {
        let x1 = x1_min + (x1_max - x1_min) * i as f64 / (n - 1) as f64;
        for j in 0..n {
            let x2 = x2_min + (x2_max - x2_min) * j as f64 / (n - 1) as f64;
            points[[i * n + j, 0]] = x1;
            points[[i * n + j, 1]] = x2;
        }
    }
    let probs = model.predict_proba(points.view())?;
    let path = out.join("confidence_grid.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    let ps: Vec<String> = (0..c).map(|k| format!("p{k}")).collect();
    writeln!(w, "x1,x2,{}", ps.join(","))?;
    for (point, prob) in points.rows().into_iter().zip(probs.rows()) {
        let cells: Vec<String> = prob.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{}", point[0], point[1], cells.join(","))?;
    }
    w.flush()?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Fgsm,
    Pgd,
    Bim,
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(ProbeKind::Fgsm),
            "pgd" => Ok(ProbeKind::Pgd),
            "bim" => Ok(ProbeKind::Bim),
            other => Err(Error::invalid(format!("unknown probe '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub kind: ProbeKind,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub params: ProbeParams,
    pub test_samples: usize,
    pub clean_accuracy: f64,
    /// Fraction of correctly classified test points flipped by the probe.
    pub untargeted_success: f64,
    /// Fraction of correctly classified test points pushed to the class
    /// after theirs (cyclically).
    pub targeted_success: f64,
}

/// Runs the chosen adversarial probe over the test split.
pub fn run_robustness(
    config: &ExperimentConfig,
    out: &Path,
    params: ProbeParams,
) -> Result<RobustnessReport> {
    let data = prepare_data(config)?;
    let checkpoint = load_checkpoint(out)?;
    let model = checkpoint.model;
    let c = model.config.num_classes;
    let probe_seed = derive_seed(config.seed, seed_component::ROBUSTNESS);

    let perturb = |x: ndarray::ArrayView1<f64>, label: usize, target: Option<usize>| match params
        .kind
    {
        ProbeKind::Fgsm => fgsm(&model, x, label, params.epsilon, target),
        ProbeKind::Pgd => pgd(
            &model,
            x,
            label,
            params.epsilon,
            params.step_size,
            params.steps,
            true,
            target,
            probe_seed,
        ),
        ProbeKind::Bim => pgd(
            &model,
            x,
            label,
            params.epsilon,
            params.step_size,
            params.steps,
            false,
            target,
            probe_seed,
        ),
    };

    let untargeted_success =
        attack_success_rate(&model, &data.test, |x, l| perturb(x, l, None))?;

    // targeted: push each correctly classified point to the next class
    let mut targeted_hits = 0usize;
    let mut eligible = 0usize;
    for (row, &label) in data.test.features.rows().into_iter().zip(&data.test.labels) {
        let clean = model.predict_proba_one(row)?;
        let clean_pred = clean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if clean_pred != label {
            continue;
        }
        eligible += 1;
        let target = (label + 1) % c;
        let adv = perturb(row, label, Some(target))?;
        let probs = model.predict_proba_one(adv.view())?;
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == target {
            targeted_hits += 1;
        }
    }
    if eligible == 0 {
        return Err(Error::invalid("no correctly classified test samples"));
    }

    let report = RobustnessReport {
        params,
        test_samples: data.test.len(),
        clean_accuracy: accuracy(&model, &data.test)?,
        untargeted_success,
        targeted_success: targeted_hits as f64 / eligible as f64,
    };
    std::fs::create_dir_all(out)?;
    Artifact::new(config.hash(), config.seed, report.clone())
        .write(out.join("robustness.json"))?;
    Ok(report)
}

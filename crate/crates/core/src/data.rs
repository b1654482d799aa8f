//! Synthetic dataset generation, persistence, splitting, and the random
//! jitter transform used for robust-confidence scoring.
//!
//! Everything here is a deterministic function of its seed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: BlobSpec,
}

/// Gaussian blob generator: one isotropic cluster per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub centers: Vec<Vec<f64>>,
    pub std_dev: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl BlobSpec {
    /// Three classes at the corners of a triangle of radius 2.
    pub fn toy_triangle(std_dev: f64, samples_per_class: usize, seed: u64) -> Self {
        let centers = (0..3)
            .map(|k| {
                let angle = std::f64::consts::TAU * k as f64 / 3.0 + std::f64::consts::FRAC_PI_2;
                vec![2.0 * angle.cos(), 2.0 * angle.sin()]
            })
            .collect();
        BlobSpec {
            centers,
            std_dev,
            samples_per_class,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.centers.len() < 2 {
            return Err(Error::invalid("blob spec needs at least 2 classes"));
        }
        if self.std_dev <= 0.0 || !self.std_dev.is_finite() {
            return Err(Error::invalid("blob std_dev must be positive"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class must be >= 1"));
        }
        let d = self.centers[0].len();
        if d == 0 || self.centers.iter().any(|c| c.len() != d) {
            return Err(Error::invalid("blob centers must share a nonzero dimension"));
        }
        Ok(())
    }
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Row indices belonging to a class.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let d = self.dim();
        let mut features = Array2::zeros((indices.len(), d));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            features,
            labels,
            class_count: self.class_count,
            provenance: self.provenance.clone(),
        }
    }
}

/// Samples Gaussian blobs around each class center, class-major order.
pub fn gen_blobs(spec: &BlobSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let d = spec.centers[0].len();
    let c = spec.centers.len();
    let n = c * spec.samples_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (class, center) in spec.centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for (j, &cj) in center.iter().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                features[[row, j]] = cj + spec.std_dev * noise;
            }
            labels.push(class);
            row += 1;
        }
    }
    Ok(LabeledDataset {
        features,
        labels,
        class_count: c,
        provenance: Some(Provenance { spec: spec.clone() }),
    })
}

/// Stratified train/test split; test sizes per class follow the largest
/// remainder method so the total matches `round(N * test_fraction)`.
pub fn split(
    dataset: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!(
            "test_fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let total_test = (dataset.len() as f64 * test_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // per-class quotas via largest remainders
    let mut quotas: Vec<(usize, usize, f64)> = (0..dataset.class_count)
        .map(|class| {
            let n_c = dataset.class_indices(class).len();
            let exact = n_c as f64 * test_fraction;
            (class, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|q| q.1).sum();
    quotas.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut extra = vec![0usize; dataset.class_count];
    let mut i = 0;
    while assigned < total_test && i < quotas.len() {
        extra[quotas[i].0] += 1;
        assigned += 1;
        i += 1;
    }

    let mut test_indices = Vec::new();
    let mut train_indices = Vec::new();
    for class in 0..dataset.class_count {
        let mut idx = dataset.class_indices(class);
        idx.shuffle(&mut rng);
        let take = quotas.iter().find(|q| q.0 == class).map(|q| q.1).unwrap_or(0) + extra[class];
        let take = take.min(idx.len());
        test_indices.extend_from_slice(&idx[..take]);
        train_indices.extend_from_slice(&idx[take..]);
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();
    Ok((dataset.subset(&train_indices), dataset.subset(&test_indices)))
}

/// Additive Gaussian jitter with a per-use seed stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterTransform {
    pub std_dev: f64,
    pub seed: u64,
}

impl JitterTransform {
    pub fn new(std_dev: f64, seed: u64) -> Result<Self> {
        if std_dev < 0.0 || !std_dev.is_finite() {
            return Err(Error::invalid("jitter std_dev must be >= 0"));
        }
        Ok(JitterTransform { std_dev, seed })
    }
}

/// `x + sigma * noise`, deterministic in `(seed, draw_index)`.
pub fn apply_jitter(x: ArrayView1<f64>, t: &JitterTransform, draw_index: u64) -> Array1<f64> {
    if t.std_dev == 0.0 {
        return x.to_owned();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(draw_index);
    let mut out = x.to_owned();
    for v in out.iter_mut() {
        let noise: f64 = rng.sample(StandardNormal);
        *v += t.std_dev * noise;
    }
    out
}

/// Writes the dataset as CSV: header `# d=<d> C=<C>`, then one row per
/// sample with `d` feature values followed by the integer label.
pub fn save_csv(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# d={} C={}", dataset.dim(), dataset.class_count)?;
    for (row, &label) in dataset.features.rows().into_iter().zip(&dataset.labels) {
        for v in row.iter() {
            write!(w, "{v},")?;
        }
        writeln!(w, "{label}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let header = header?;
    let (d, c) = parse_header(&header).ok_or(Error::Parse {
        line: 1,
        message: format!("expected header '# d=<int> C=<int>', got '{header}'"),
    })?;

    let mut features_flat = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} cells, got {}", d + 1, cells.len()),
            });
        }
        for cell in &cells[..d] {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("non-numeric cell '{cell}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "non-finite feature value".into(),
                });
            }
            features_flat.push(v);
        }
        let label: usize = cells[d].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("non-integer label '{}'", cells[d]),
        })?;
        if label >= c {
            return Err(Error::invalid(format!(
                "label {label} at line {line_no} exceeds class count {c}"
            )));
        }
        labels.push(label);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            line: 2,
            message: "file has no data rows".into(),
        });
    }
    let features = Array2::from_shape_vec((rows, d), features_flat)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(LabeledDataset {
        features,
        labels,
        class_count: c,
        provenance: None,
    })
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix('#')?.trim();
    let mut d = None;
    let mut c = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("d=") {
            d = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("C=") {
            c = v.parse().ok();
        }
    }
    Some((d?, c?))
}

//! Generative prior over the input space: either the identity map or an
//! affine PCA manifold `x = mu + W z` fit to held-out auxiliary data.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Prior {
    Identity {
        dim: usize,
    },
    Pca {
        mean: Array1<f64>,
        /// d x k matrix with orthonormal columns.
        components: Array2<f64>,
    },
}

impl Prior {
    pub fn identity(dim: usize) -> Self {
        Prior::Identity { dim }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Prior::Identity { dim } => *dim,
            Prior::Pca { components, .. } => components.ncols(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Prior::Identity { dim } => *dim,
            Prior::Pca { components, .. } => components.nrows(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Prior::Identity { .. })
    }

    /// `z` for the identity prior, `mu + W z` for the PCA prior.
    pub fn decode(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::invalid(format!(
                "latent length {} does not match prior latent dim {}",
                z.len(),
                self.latent_dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("prior decode input"));
        }
        Ok(match self {
            Prior::Identity { .. } => z.to_owned(),
            Prior::Pca { mean, components } => mean + &components.dot(&z),
        })
    }

    /// Orthogonal projection of `x` into latent coordinates.
    pub fn encode(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input length {} does not match prior input dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(match self {
            Prior::Identity { .. } => x.to_owned(),
            Prior::Pca { mean, components } => components.t().dot(&(&x - mean)),
        })
    }

    /// Pulls an input-space gradient back to latent space; `W^T g` for the
    /// affine prior since decode is linear in `z`.
    pub fn pullback(&self, input_grad: ArrayView1<f64>) -> Result<Array1<f64>> {
        if input_grad.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "gradient length {} does not match prior input dim {}",
                input_grad.len(),
                self.input_dim()
            )));
        }
        Ok(match self {
            Prior::Identity { .. } => input_grad.to_owned(),
            Prior::Pca { components, .. } => components.t().dot(&input_grad),
        })
    }
}

/// Fits a PCA prior: column means and the top-k principal directions of the
/// sample covariance. Requires `k <= min(N - 1, d)`.
pub fn fit_pca_prior(aux_data: ArrayView2<f64>, latent_dim: usize) -> Result<Prior> {
    let n = aux_data.nrows();
    let d = aux_data.ncols();
    if n < 2 {
        return Err(Error::invalid("pca prior needs at least 2 samples"));
    }
    if latent_dim == 0 || latent_dim > (n - 1).min(d) {
        return Err(Error::invalid(format!(
            "latent_dim {latent_dim} must be in 1..=min(N-1, d) = {}",
            (n - 1).min(d)
        )));
    }
    if aux_data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("pca prior input"));
    }
    let mean = aux_data.mean_axis(Axis(0)).unwrap();
    let centered = &aux_data - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let (_, vectors) = linalg::symmetric_eigen(&cov);
    let mut components = Array2::zeros((d, latent_dim));
    for j in 0..latent_dim {
        let mut col = vectors.column(j).to_owned();
        // fix the sign so the fit is deterministic across equivalent bases
        let lead = col
            .iter()
            .cloned()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            col.mapv_inplace(|v| -v);
        }
        components.column_mut(j).assign(&col);
    }
    Ok(Prior::Pca { mean, components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn planar_data(n: usize, seed: u64) -> Array2<f64> {
        // points on a 2-dim affine subspace of R^4
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = [
            array![1.0, 0.0, 1.0, 0.0],
            array![0.0, 1.0, 0.0, -1.0],
        ];
        let offset = array![0.5, -0.25, 1.0, 2.0];
        let mut data = Array2::zeros((n, 4));
        for i in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let row = &offset + &(&basis[0] * a) + &(&basis[1] * b);
            data.row_mut(i).assign(&row);
        }
        data
    }

    #[test]
    fn identity_prior_round_trips() {
        let p = Prior::identity(3);
        let z = array![1.0, -2.0, 0.5];
        assert_eq!(p.decode(z.view()).unwrap(), z);
        assert_eq!(p.encode(z.view()).unwrap(), z);
        assert_eq!(p.pullback(z.view()).unwrap(), z);
    }

    #[test]
    fn pca_zero_latent_decodes_to_mean() {
        let data = planar_data(50, 3);
        let prior = fit_pca_prior(data.view(), 2).unwrap();
        let mean = data.mean_axis(Axis(0)).unwrap();
        let x = prior.decode(array![0.0, 0.0].view()).unwrap();
        for (a, b) in x.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_manifold_reconstructs_exactly() {
        let data = planar_data(60, 5);
        let prior = fit_pca_prior(data.view(), 2).unwrap();
        for row in data.rows() {
            let z = prior.encode(row).unwrap();
            let back = prior.decode(z.view()).unwrap();
            for (a, b) in back.iter().zip(row.iter()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn full_rank_reconstruction_error_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = Array2::from_shape_fn((30, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let prior = fit_pca_prior(data.view(), 3).unwrap();
        for row in data.rows() {
            let back = prior.decode(prior.encode(row).unwrap().view()).unwrap();
            for (a, b) in back.iter().zip(row.iter()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn components_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data = Array2::from_shape_fn((80, 5), |_| rng.sample::<f64, _>(StandardNormal));
        let prior = fit_pca_prior(data.view(), 3).unwrap();
        let Prior::Pca { components, .. } = &prior else {
            panic!("expected pca prior");
        };
        let gram = components.t().dot(components);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn captured_variance_matches_covariance_eigensolve() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut data = Array2::zeros((200, 4));
        for i in 0..200 {
            for j in 0..4 {
                let scale = [3.0, 1.5, 0.5, 0.1][j];
                data[[i, j]] = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let prior = fit_pca_prior(data.view(), 2).unwrap();
        let Prior::Pca { mean, components } = &prior else {
            panic!("expected pca prior");
        };
        let centered = &data - mean;
        let cov = centered.t().dot(&centered) / 199.0;
        let (values, _) = crate::linalg::symmetric_eigen(&cov);
        // variance along each component equals the corresponding eigenvalue
        for j in 0..2 {
            let w = components.column(j);
            let captured = w.dot(&cov.dot(&w));
            assert!((captured - values[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn reconstruction_error_nonincreasing_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut data = Array2::zeros((100, 4));
        for i in 0..100 {
            for j in 0..4 {
                let scale = [2.0, 1.0, 0.5, 0.25][j];
                data[[i, j]] = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let err = |k: usize| -> f64 {
            let prior = fit_pca_prior(data.view(), k).unwrap();
            data.rows()
                .into_iter()
                .map(|row| {
                    let back = prior.decode(prior.encode(row).unwrap().view()).unwrap();
                    row.iter()
                        .zip(back.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum()
        };
        let errors: Vec<f64> = (1..=4).map(err).collect();
        for pair in errors.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9);
        }
        assert!(errors[3] < 1e-8);
    }

    #[test]
    fn latent_dim_bounds_enforced() {
        let data = planar_data(5, 1);
        assert!(fit_pca_prior(data.view(), 0).is_err());
        assert!(fit_pca_prior(data.view(), 5).is_err()); // k > min(N-1, d) = 4
        assert!(fit_pca_prior(data.view(), 4).is_ok());
    }

    #[test]
    fn decode_rejects_wrong_dimension() {
        let p = Prior::identity(3);
        assert!(p.decode(array![1.0, 2.0].view()).is_err());
    }
}

//! Drawing new latent codes from a Gaussian fitted to a trained codebook.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::training::LatentCodebook;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    /// Independent per-dimension variances.
    #[default]
    Diagonal,
    /// Full sample covariance; regularised when the codebook is rank-deficient.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    mean: DVector<f64>,
    /// Lower-triangular `L` with `L L^T` the covariance.
    factor: DMatrix<f64>,
}

impl LatentGaussian {
    /// Maximum-likelihood fit (divides by the code count). Needs at least one code.
    pub fn fit(codebook: &LatentCodebook, covariance: Covariance) -> Result<Self> {
        let n = codebook.len();
        if n == 0 {
            return Err(Error::InvalidInput("cannot fit a Gaussian to an empty codebook".into()));
        }
        let d = codebook.latent_dim();
        let codes = DMatrix::from_fn(n, d, |i, j| codebook.codes()[[i, j]]);
        let mean = DVector::from_fn(d, |j, _| codes.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| codes[(i, j)] - mean[j]);
        let factor = match covariance {
            Covariance::Diagonal => {
                DMatrix::from_diagonal(&DVector::from_fn(d, |j, _| (centered.column(j).norm_squared() / n as f64).sqrt()))
            }
            Covariance::Full => {
                let cov = centered.transpose() * &centered / n as f64;
                cholesky_with_jitter(cov)?
            }
        };
        Ok(Self { mean, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// Per-dimension standard deviations.
    pub fn std(&self) -> Vec<f64> {
        self.factor.row_iter().map(|r| r.norm()).collect()
    }

    /// `count` codes `mean + L e`, `e ~ N(0, I)`, deterministic per seed.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let e = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut rng));
                (&self.mean + &self.factor * e).as_slice().to_vec()
            })
            .collect()
    }
}

/// Cholesky of `cov + eps I`, growing `eps` from a trace-relative floor until it succeeds.
fn cholesky_with_jitter(cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = cov.nrows();
    let scale = (cov.trace() / d as f64).max(f64::MIN_POSITIVE);
    let mut eps = 0.0;
    for _ in 0..12 {
        let m = &cov + DMatrix::identity(d, d) * eps;
        if let Some(c) = Cholesky::new(m) {
            return Ok(c.l());
        }
        eps = if eps == 0.0 { 1e-10 * scale } else { eps * 10.0 };
    }
    Err(Error::Degenerate("latent covariance is not positive definite".into()))
}

//! Test-time reconstruction: with the network frozen, find the latent code
//! whose zero level set passes through an (unoriented) point cloud by
//! minimizing `mean_i |phi(x_i, z)| + lambda ||z||` with Adam.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::diffengine::{grad_values, Tape};
use crate::geometry::OrientedPointCloud;
use crate::optim::{adam_step, AdamState};
use crate::sdfnet::{points_to_array, LatentSdfModel};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentInit {
    Zero,
    Gaussian { std: f64 },
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lambda: f64,
    pub init: LatentInit,
    /// Points drawn (with a fresh sample each iteration) when the cloud is
    /// larger; `None` uses every point every iteration.
    pub batch_points: Option<usize>,
    /// With `batch_points`, the full objective is evaluated this often to
    /// choose the returned iterate.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 5_000,
            lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 1_000,
            lambda: 0.01,
            init: LatentInit::Zero,
            batch_points: None,
            eval_every: 100,
            seed: 0,
        }
    }
}

/// Latent weight for noisy inputs.
pub const NOISY_LAMBDA: f64 = 0.1;

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.lr_decay_every == 0 || self.eval_every == 0 {
            return Err(Error::InvalidInput("iteration counts must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr_decay_factor > 0.0) {
            return Err(Error::InvalidInput("learning rate and decay must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidInput("lambda must be non-negative".into()));
        }
        if self.batch_points == Some(0) {
            return Err(Error::InvalidInput("batch_points must be at least 1".into()));
        }
        if let LatentInit::Gaussian { std } = self.init {
            if !(std >= 0.0) {
                return Err(Error::InvalidInput("init std must be non-negative".into()));
            }
        }
        Ok(())
    }

    fn initial_latent(&self, dim: usize) -> Result<Vec<f64>> {
        match &self.init {
            LatentInit::Zero => Ok(vec![0.0; dim]),
            LatentInit::Gaussian { std } => {
                let normal = Normal::new(0.0, *std).map_err(|e| Error::InvalidInput(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1A7E_u64);
                Ok((0..dim).map(|_| normal.sample(&mut rng)).collect())
            }
            LatentInit::Given(z) => {
                if z.len() != dim {
                    return Err(Error::LatentLength { expected: dim, found: z.len() });
                }
                Ok(z.clone())
            }
        }
    }
}

/// Per-iteration record, taken at the iterate before its update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Mean `|phi|` over the points used in this iteration.
    pub data_term: f64,
    pub latent_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub latent: Vec<f64>,
    /// Full objective at `latent`.
    pub objective: f64,
    /// Iteration whose iterate was returned (`iterations` means the final one).
    pub best_iteration: usize,
    pub trace: Vec<TraceRow>,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration,data_term,latent_norm,lr\n");
    for r in trace {
        s.push_str(&format!("{},{:?},{:?},{:?}\n", r.iteration, r.data_term, r.latent_norm, r.lr));
    }
    s
}

/// `mean |phi(x, z)| + lambda ||z||` over all of `points`.
pub fn fit_objective(model: &LatentSdfModel, points: &[Vec3], z: &[f64], lambda: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidInput("objective over an empty cloud".into()));
    }
    let phi = model.forward(points, z)?;
    let data = phi.iter().map(|v| v.abs()).sum::<f64>() / phi.len() as f64;
    Ok(data + lambda * z.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Optimizes a latent code for `cloud` (normals, if any, are ignored).
pub fn fit_latent(model: &LatentSdfModel, cloud: &OrientedPointCloud, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot fit an empty cloud".into()));
    }
    let points = cloud.points();
    let dim = model.config().latent_dim;
    let mut z = config.initial_latent(dim)?;
    let batch = config.batch_points.filter(|&b| b < points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let tape = Tape::new();
    let bound = model.bind(&tape);
    let fixed_x = batch.is_none().then(|| tape.var(points_to_array(points)));
    let mark = tape.len();

    let mut state = AdamState::new(dim);
    let mut trace = Vec::with_capacity(config.iterations);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut consider = |objective: f64, it: usize, z: &[f64]| {
        if best.as_ref().is_none_or(|b| objective < b.0) {
            best = Some((objective, it, z.to_vec()));
        }
    };

    for it in 0..config.iterations {
        let lr = config.lr * config.lr_decay_factor.powi((it / config.lr_decay_every) as i32);
        if batch.is_some() && it % config.eval_every == 0 {
            consider(fit_objective(model, points, &z, config.lambda)?, it, &z);
        }
        let x = match (fixed_x, batch) {
            (Some(x), _) => x,
            (None, Some(b)) => {
                let picks = rand::seq::index::sample(&mut rng, points.len(), b);
                tape.var(points_to_array(&picks.iter().map(|i| points[i]).collect::<Vec<_>>()))
            }
            (None, None) => unreachable!("either all points or a batch"),
        };
        let zv = tape.row(&z);
        let data = bound.forward(x, zv).abs().mean();
        let norm = zv.row_norm();
        let objective = data + norm.scale(config.lambda);
        let (data_value, objective_value) = (data.item(), objective.item());
        if !objective_value.is_finite() {
            return Err(Error::NonFinite { term: "fit objective".into(), shape: format!("iteration {it}") });
        }
        if batch.is_none() {
            consider(objective_value, it, &z);
        }
        trace.push(TraceRow { iteration: it, data_term: data_value, latent_norm: norm.item(), lr });
        let g = grad_values(objective, &[zv]).remove(0);
        tape.rewind(mark);
        adam_step(&mut z, g.as_slice().expect("row gradient"), &mut state, lr)?;
    }
    let final_objective = fit_objective(model, points, &z, config.lambda)?;
    if !final_objective.is_finite() {
        return Err(Error::NonFinite { term: "fit objective".into(), shape: "final iterate".into() });
    }
    consider(final_objective, config.iterations, &z);
    let (objective, best_iteration, latent) = best.expect("at least one iterate");
    Ok(FitResult { latent, objective, best_iteration, trace })
}

const LATENT_MAGIC: &[u8; 8] = b"LSDFLATN";
const LATENT_VERSION: u32 = 1;

pub fn write_latent(w: &mut impl Write, z: &[f64]) -> Result<()> {
    binio::write_header(w, LATENT_MAGIC, LATENT_VERSION)?;
    binio::write_u64(w, z.len() as u64)?;
    binio::write_f64s(w, z)?;
    Ok(())
}

pub fn read_latent(r: &mut impl Read) -> Result<Vec<f64>> {
    const WHAT: &str = "latent file";
    binio::read_header(r, LATENT_MAGIC, LATENT_VERSION, WHAT)?;
    let n = binio::read_u64(r, WHAT)? as usize;
    let z = binio::read_f64s(r, n, WHAT)?;
    binio::expect_eof(r, WHAT)?;
    Ok(z)
}

pub fn save_latent(path: impl AsRef<Path>, z: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_latent(&mut w, z)?;
    w.flush()?;
    Ok(())
}

pub fn load_latent(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    read_latent(&mut BufReader::new(fs::File::open(path)?))
}

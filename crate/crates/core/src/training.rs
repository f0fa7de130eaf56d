//! Auto-decoder training: network weights and one latent code per shape are
//! optimized together.
//!
//! Each shape in a batch contributes the loss
//!
//! ```text
//! mean_s |phi| + mean_s ||grad phi - n|| + l1 (mean_f | ||grad phi|| - 1 | + mean_f exp(-a |phi|)) + l2 ||z||
//! ```
//!
//! over a surface sub-batch `s` and a free-space sub-batch `f`, and the batch
//! loss is the mean over its shapes. Weights and the touched codes are
//! updated with separate Adam states and learning rates.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::diffengine::{grad, grad_values, Tape, Var};
use crate::geometry::{fit_unit_cube, local_sigmas, NormalizationTransform, OrientedPointCloud, DEFAULT_MARGIN};
use crate::optim::{adam_step, AdamState};
use crate::sdfnet::{points_to_array, LatentSdfModel};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub shapes_per_batch: usize,
    pub lr_weights: f64,
    pub lr_latents: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub surface_points_per_shape: usize,
    pub freespace_points_per_shape: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub latent_init_std: f64,
    pub uniform_fraction: f64,
    pub knn_k: usize,
    /// Replaces the per-point k-NN scales when set.
    pub sigma_override: Option<f64>,
    /// Rescales the weight gradient to at most this global norm.
    pub grad_clip: Option<f64>,
    /// Epochs between checkpoints written by [`Trainer::run`]; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            shapes_per_batch: 16,
            lr_weights: 5e-4,
            lr_latents: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 2_000,
            surface_points_per_shape: 5_000,
            freespace_points_per_shape: 5_000,
            lambda1: 0.1,
            lambda2: 0.01,
            alpha: 10.0,
            latent_init_std: 1e-2,
            uniform_fraction: 0.5,
            knn_k: 50,
            sigma_override: None,
            grad_clip: None,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("shapes_per_batch", self.shapes_per_batch),
            ("lr_decay_every", self.lr_decay_every),
            ("surface_points_per_shape", self.surface_points_per_shape),
            ("freespace_points_per_shape", self.freespace_points_per_shape),
            ("knn_k", self.knn_k),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidInput(format!("{name} must be at least 1")));
        }
        let rates = [
            ("lr_weights", self.lr_weights),
            ("lr_latents", self.lr_latents),
            ("lr_decay_factor", self.lr_decay_factor),
            ("alpha", self.alpha),
            ("latent_init_std", self.latent_init_std),
        ];
        if let Some((name, _)) = rates.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!("{name} must be positive")));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidInput("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.uniform_fraction) {
            return Err(Error::InvalidInput("uniform_fraction must lie in [0, 1]".into()));
        }
        if self.sigma_override.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::InvalidInput("sigma_override must be non-negative".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidInput("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, alpha: self.alpha }
    }

    /// Learning-rate multiplier in effect during `epoch` (0-based).
    pub fn decay(&self, epoch: usize) -> f64 {
        self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        TrainingConfig::default().weights()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub manifold: f64,
    pub normal: f64,
    pub eikonal: f64,
    pub off_surface: f64,
    pub latent_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 6] = ["manifold", "normal", "eikonal", "off_surface", "latent_reg", "total"];

    pub fn values(&self) -> [f64; 6] {
        [self.manifold, self.normal, self.eikonal, self.off_surface, self.latent_reg, self.total]
    }

    /// The weighted sum of the five terms.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        self.manifold + self.normal + w.lambda1 * (self.eikonal + self.off_surface) + w.lambda2 * self.latent_reg
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        Self::TERMS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }

    fn accumulate(&mut self, other: &Self, weight: f64) {
        self.manifold += weight * other.manifold;
        self.normal += weight * other.normal;
        self.eikonal += weight * other.eikonal;
        self.off_surface += weight * other.off_surface;
        self.latent_reg += weight * other.latent_reg;
        self.total += weight * other.total;
    }
}

/// Loss terms as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars<'t> {
    pub manifold: Var<'t>,
    pub normal: Var<'t>,
    pub eikonal: Var<'t>,
    pub off_surface: Var<'t>,
    pub latent_reg: Option<Var<'t>>,
    pub total: Var<'t>,
}

impl LossVars<'_> {
    pub fn values(&self) -> LossBreakdown {
        LossBreakdown {
            manifold: self.manifold.item(),
            normal: self.normal.item(),
            eikonal: self.eikonal.item(),
            off_surface: self.off_surface.item(),
            latent_reg: self.latent_reg.map_or(0.0, |v| v.item()),
            total: self.total.item(),
        }
    }
}

/// Builds the loss on the tape of `x`.
///
/// `x` must be a leaf holding the surface points in its first
/// `normals.nrows()` rows followed by the free-space points; `phi` maps a
/// batch of points to field values. Surface and free points share one
/// forward pass.
pub fn loss_vars<'t>(
    phi: impl Fn(Var<'t>) -> Var<'t>,
    x: Var<'t>,
    normals: &Array2<f64>,
    z: Option<Var<'t>>,
    w: &LossWeights,
) -> LossVars<'t> {
    let tape = x.tape();
    let (rows, _) = x.shape();
    let ns = normals.nrows();
    assert!(ns >= 1 && ns < rows, "need surface and free-space rows");
    let values = phi(x);
    let gradient = grad(values.sum(), &[x]).remove(0);
    let (phi_s, phi_f) = (values.slice_rows(0, ns), values.slice_rows(ns, rows));
    let (grad_s, grad_f) = (gradient.slice_rows(0, ns), gradient.slice_rows(ns, rows));

    let manifold = phi_s.abs().mean();
    let normal = (grad_s - tape.var(normals.clone())).row_norm().mean();
    let eikonal = grad_f.row_norm().add_scalar(-1.0).abs().mean();
    let off_surface = phi_f.abs().scale(-w.alpha).exp().mean();
    let latent_reg = z.map(|z| z.row_norm());
    let mut total = manifold + normal + (eikonal + off_surface).scale(w.lambda1);
    if let Some(reg) = latent_reg {
        total = total + reg.scale(w.lambda2);
    }
    LossVars { manifold, normal, eikonal, off_surface, latent_reg, total }
}

/// A scalar field that can be placed on a tape.
pub trait Field {
    /// Field values (`m x 1`) at the rows of `x` (`m x 3`), with optional latent row `z`.
    fn eval<'t>(&self, x: Var<'t>, z: Option<Var<'t>>) -> Var<'t>;
}

/// `|x| - radius`.
#[derive(Debug, Clone, Copy)]
pub struct SphereField {
    pub radius: f64,
}

impl Field for SphereField {
    fn eval<'t>(&self, x: Var<'t>, _z: Option<Var<'t>>) -> Var<'t> {
        x.row_norm().add_scalar(-self.radius)
    }
}

impl Field for LatentSdfModel {
    fn eval<'t>(&self, x: Var<'t>, z: Option<Var<'t>>) -> Var<'t> {
        let tape = x.tape();
        let z = z.unwrap_or_else(|| tape.row(&vec![0.0; self.config().latent_dim]));
        self.bind(tape).forward(x, z)
    }
}

/// Evaluates every loss term for `field` on a surface batch with normals and
/// a free-space batch.
pub fn loss_terms(
    field: &impl Field,
    z: Option<&[f64]>,
    surface: &OrientedPointCloud,
    free: &[Vec3],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let normals = surface
        .normals()
        .ok_or_else(|| Error::InvalidInput("loss needs surface normals".into()))?;
    if surface.is_empty() || free.is_empty() {
        return Err(Error::InvalidInput("loss needs surface and free-space points".into()));
    }
    let tape = Tape::new();
    let all: Vec<Vec3> = surface.points().iter().chain(free).copied().collect();
    let x = tape.var(points_to_array(&all));
    let zv = z.map(|z| tape.row(z));
    let loss = loss_vars(|x| field.eval(x, zv), x, &points_to_array(normals), zv, w);
    Ok(loss.values())
}

/// `round(n * uniform_fraction)` points uniform in `[-1, 1]^3`, the rest
/// Gaussian perturbations `x_i + N(0, sigma_i^2 I)` of uniformly chosen
/// surface points.
pub fn sample_free_space(
    cloud: &OrientedPointCloud,
    sigmas: &[f64],
    n: usize,
    uniform_fraction: f64,
    seed: u64,
) -> Result<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    free_space_with(cloud.points(), sigmas, n, uniform_fraction, &mut rng)
}

fn free_space_with(
    points: &[Vec3],
    sigmas: &[f64],
    n: usize,
    uniform_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec3>> {
    if sigmas.len() != points.len() {
        return Err(Error::ShapeMismatch(format!("{} points but {} sigmas", points.len(), sigmas.len())));
    }
    if !(0.0..=1.0).contains(&uniform_fraction) {
        return Err(Error::InvalidInput("uniform_fraction must lie in [0, 1]".into()));
    }
    let n_uniform = (n as f64 * uniform_fraction).round() as usize;
    if n_uniform < n && points.is_empty() {
        return Err(Error::InvalidInput("cannot perturb an empty cloud".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n_uniform {
        out.push(Vec3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in n_uniform..n {
        let i = rng.random_range(0..points.len());
        let e = Vec3::new(std_normal.sample(rng), std_normal.sample(rng), std_normal.sample(rng));
        out.push(points[i] + e * sigmas[i]);
    }
    Ok(out)
}

/// One transform for a whole dataset: the union bounding box mapped into
/// the canonical cube, so relative sizes between shapes survive.
pub fn dataset_transform(clouds: &[OrientedPointCloud]) -> Result<NormalizationTransform> {
    let all: Vec<Vec3> = clouds.iter().flat_map(|c| c.points().iter().copied()).collect();
    fit_unit_cube(&all, DEFAULT_MARGIN)
}

const CODEBOOK_MAGIC: &[u8; 8] = b"LSDFCODE";
const CODEBOOK_VERSION: u32 = 1;

/// One latent code per training shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodebook {
    ids: Vec<String>,
    /// `shapes x latent_dim`
    codes: Array2<f64>,
}

impl LatentCodebook {
    /// Codes drawn i.i.d. from `N(0, std^2)`.
    pub fn random(ids: Vec<String>, latent_dim: usize, std: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(format!("latent init: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = Array2::from_shape_simple_fn((ids.len(), latent_dim), || normal.sample(&mut rng));
        Ok(Self { ids, codes })
    }

    pub fn from_codes(ids: Vec<String>, codes: Array2<f64>) -> Result<Self> {
        if ids.len() != codes.nrows() {
            return Err(Error::ShapeMismatch(format!("{} ids but {} codes", ids.len(), codes.nrows())));
        }
        Ok(Self { ids, codes })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.codes.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn codes(&self) -> &Array2<f64> {
        &self.codes
    }

    pub fn code(&self, index: usize) -> &[f64] {
        self.codes.row(index).to_slice().expect("row-major codebook")
    }

    pub fn code_mut(&mut self, index: usize) -> &mut [f64] {
        self.codes.row_mut(index).into_slice().expect("row-major codebook")
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        binio::write_header(w, CODEBOOK_MAGIC, CODEBOOK_VERSION)?;
        binio::write_u64(w, self.ids.len() as u64)?;
        binio::write_u64(w, self.latent_dim() as u64)?;
        for id in &self.ids {
            binio::write_string(w, id)?;
        }
        binio::write_f64s(w, self.codes.as_slice().expect("row-major codebook"))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        const WHAT: &str = "codebook file";
        binio::read_header(r, CODEBOOK_MAGIC, CODEBOOK_VERSION, WHAT)?;
        let n = binio::read_u64(r, WHAT)? as usize;
        let dim = binio::read_u64(r, WHAT)? as usize;
        let ids = (0..n).map(|_| binio::read_string(r, WHAT)).collect::<Result<Vec<_>>>()?;
        let values = binio::read_f64s(r, n * dim, WHAT)?;
        binio::expect_eof(r, WHAT)?;
        let codes = Array2::from_shape_vec((n, dim), values).expect("codebook shape");
        Self::from_codes(ids, codes)
    }
}

/// Loss and learning rates of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr_weights: f64,
    pub lr_latents: f64,
}

const HISTORY_HEADER: &str = "epoch,manifold,normal,eikonal,off_surface,latent_reg,total,lr_weights,lr_latents";

pub fn history_to_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for row in history {
        let l = &row.loss;
        // `{:?}` is the shortest exact representation, so resuming is lossless
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            row.epoch, l.manifold, l.normal, l.eikonal, l.off_surface, l.latent_reg, l.total, row.lr_weights, row.lr_latents
        ));
    }
    s
}

pub fn history_from_csv(text: &str) -> Result<Vec<HistoryRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HISTORY_HEADER) {
        return Err(Error::Format("history CSV: unexpected header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::Format(format!("history CSV: bad row '{line}'")));
            }
            let num = |i: usize| {
                f[i].parse::<f64>()
                    .map_err(|_| Error::Format(format!("history CSV: bad number '{}'", f[i])))
            };
            Ok(HistoryRow {
                epoch: f[0].parse().map_err(|_| Error::Format(format!("history CSV: bad epoch '{}'", f[0])))?,
                loss: LossBreakdown {
                    manifold: num(1)?,
                    normal: num(2)?,
                    eikonal: num(3)?,
                    off_surface: num(4)?,
                    latent_reg: num(5)?,
                    total: num(6)?,
                },
                lr_weights: num(7)?,
                lr_latents: num(8)?,
            })
        })
        .collect()
}

/// A training shape: normalized oriented cloud and its per-point scales.
#[derive(Debug, Clone)]
struct Shape {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
    sigmas: Vec<f64>,
}

/// splitmix64 finalizer over a few words; gives independent streams per
/// (seed, epoch, shape) so a resumed run draws what an uninterrupted one would.
pub(crate) fn mix(words: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const STREAM_PERMUTATION: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_CODES: u64 = 3;

/// Per-shape gradients from one step.
struct ShapeGrads {
    loss: LossBreakdown,
    weights: Vec<Array2<f64>>,
    latent: Vec<f64>,
}

const OPTIM_MAGIC: &[u8; 8] = b"LSDFOPTM";
const OPTIM_VERSION: u32 = 1;

/// Owns the model, codebook, optimizer state and history of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainingConfig,
    model: LatentSdfModel,
    codebook: LatentCodebook,
    weight_states: Vec<AdamState>,
    code_states: Vec<AdamState>,
    history: Vec<HistoryRow>,
    shapes: Vec<Shape>,
}

impl Trainer {
    /// `dataset` holds `(shape id, normalized cloud with normals)` pairs.
    pub fn new(dataset: Vec<(String, OrientedPointCloud)>, config: TrainingConfig, model: LatentSdfModel) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidInput("training needs at least one shape".into()));
        }
        let mut ids = Vec::with_capacity(dataset.len());
        let mut shapes = Vec::with_capacity(dataset.len());
        for (id, cloud) in dataset {
            let Some(normals) = cloud.normals() else {
                return Err(Error::InvalidInput(format!("shape {id}: training needs normals")));
            };
            if cloud.is_empty() {
                return Err(Error::InvalidInput(format!("shape {id}: empty cloud")));
            }
            let sigmas = match config.sigma_override {
                Some(s) => vec![s; cloud.len()],
                None => local_sigmas(&cloud, config.knn_k.min(cloud.len().saturating_sub(1)).max(1))?,
            };
            shapes.push(Shape { points: cloud.points().to_vec(), normals: normals.to_vec(), sigmas });
            ids.push(id);
        }
        let latent_dim = model.config().latent_dim;
        let codebook =
            LatentCodebook::random(ids, latent_dim, config.latent_init_std, mix(&[config.seed, STREAM_CODES]))?;
        let weight_states = model
            .layers()
            .iter()
            .flat_map(|l| [AdamState::new(l.weight.len()), AdamState::new(l.bias.len())])
            .collect();
        let code_states = (0..codebook.len()).map(|_| AdamState::new(latent_dim)).collect();
        Ok(Self { config, model, codebook, weight_states, code_states, history: Vec::new(), shapes })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn model(&self) -> &LatentSdfModel {
        &self.model
    }

    pub fn codebook(&self) -> &LatentCodebook {
        &self.codebook
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    /// Number of completed epochs.
    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn into_parts(self) -> (LatentSdfModel, LatentCodebook, Vec<HistoryRow>) {
        (self.model, self.codebook, self.history)
    }

    /// Trains until `config.epochs` epochs are complete, calling
    /// `on_epoch` after each one and checkpointing to `checkpoint_dir` every
    /// `config.checkpoint_every` epochs.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>, mut on_epoch: impl FnMut(&HistoryRow)) -> Result<()> {
        while self.epochs_done() < self.config.epochs {
            let row = self.run_epoch()?;
            on_epoch(&row);
            let every = self.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.epochs_done().is_multiple_of(every) {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(dir)?;
        }
        Ok(())
    }

    /// One pass over a seeded permutation of the shapes.
    pub fn run_epoch(&mut self) -> Result<HistoryRow> {
        let epoch = self.epochs_done();
        let decay = self.config.decay(epoch);
        let (lr_w, lr_z) = (self.config.lr_weights * decay, self.config.lr_latents * decay);
        let mut order: Vec<usize> = (0..self.shapes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[self.config.seed, STREAM_PERMUTATION, epoch as u64])));

        let mut epoch_loss = LossBreakdown::default();
        for batch in order.chunks(self.config.shapes_per_batch) {
            let results: Vec<Result<ShapeGrads>> =
                batch.par_iter().map(|&s| self.shape_gradients(s, epoch)).collect();
            let mut grads = Vec::with_capacity(batch.len());
            for (r, &s) in results.into_iter().zip(batch) {
                let g = r?;
                if let Some(term) = g.loss.first_non_finite() {
                    return Err(Error::NonFinite { term: term.to_string(), shape: self.codebook.ids()[s].clone() });
                }
                grads.push((s, g));
            }
            let scale = 1.0 / batch.len() as f64;
            // weights: mean gradient, summed in batch order
            let mut total: Vec<Array2<f64>> = grads[0].1.weights.iter().map(|g| g * scale).collect();
            for (_, g) in &grads[1..] {
                for (acc, gi) in total.iter_mut().zip(&g.weights) {
                    acc.scaled_add(scale, gi);
                }
            }
            if let Some(clip) = self.config.grad_clip {
                let norm = total.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > clip {
                    total.iter_mut().for_each(|g| *g *= clip / norm);
                }
            }
            let params = self.model.layers_mut().iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]);
            for ((p, g), state) in params.zip(&total).zip(&mut self.weight_states) {
                let p = p.as_slice_mut().expect("row-major weights");
                adam_step(p, g.as_slice().expect("row-major gradient"), state, lr_w)?;
            }
            for (s, g) in &grads {
                let zg: Vec<f64> = g.latent.iter().map(|v| v * scale).collect();
                adam_step(self.codebook.code_mut(*s), &zg, &mut self.code_states[*s], lr_z)?;
                epoch_loss.accumulate(&g.loss, 1.0 / self.shapes.len() as f64);
            }
        }
        let row = HistoryRow { epoch: epoch + 1, loss: epoch_loss, lr_weights: lr_w, lr_latents: lr_z };
        self.history.push(row);
        Ok(row)
    }

    fn shape_gradients(&self, s: usize, epoch: usize) -> Result<ShapeGrads> {
        let c = &self.config;
        let shape = &self.shapes[s];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[c.seed, STREAM_SAMPLES, epoch as u64, s as u64]));
        let ns = c.surface_points_per_shape;
        let picks: Vec<usize> = if ns <= shape.points.len() {
            rand::seq::index::sample(&mut rng, shape.points.len(), ns).into_vec()
        } else {
            (0..ns).map(|_| rng.random_range(0..shape.points.len())).collect()
        };
        let free = free_space_with(&shape.points, &shape.sigmas, c.freespace_points_per_shape, c.uniform_fraction, &mut rng)?;
        let mut x = Vec::with_capacity(ns + free.len());
        x.extend(picks.iter().map(|&i| shape.points[i]));
        x.extend(free);
        let normals = points_to_array(&picks.iter().map(|&i| shape.normals[i]).collect::<Vec<_>>());

        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let z = tape.row(self.codebook.code(s));
        let xv = tape.var(points_to_array(&x));
        let loss = loss_vars(|x| bound.forward(x, z), xv, &normals, Some(z), &c.weights());
        let mut leaves = bound.params();
        leaves.push(z);
        let mut grads = grad_values(loss.total, &leaves);
        let latent = grads.pop().expect("latent gradient").into_raw_vec_and_offset().0;
        Ok(ShapeGrads { loss: loss.values(), weights: grads, latent })
    }

    /// Writes `model.bin`, `codebook.bin`, `optimizer.bin` and `history.csv`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.save(dir.join(MODEL_FILE))?;
        self.codebook.save(dir.join(CODEBOOK_FILE))?;
        fs::write(dir.join(HISTORY_FILE), history_to_csv(&self.history))?;
        let mut w = BufWriter::new(fs::File::create(dir.join(OPTIMIZER_FILE))?);
        binio::write_header(&mut w, OPTIM_MAGIC, OPTIM_VERSION)?;
        for states in [&self.weight_states, &self.code_states] {
            binio::write_u64(&mut w, states.len() as u64)?;
            for s in states {
                s.write_to(&mut w)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Continues a run from a checkpoint written by [`Trainer::save_checkpoint`].
    /// `dataset` and `config` must be the ones the run started with, except
    /// that `config.epochs` may be raised.
    pub fn resume(dataset: Vec<(String, OrientedPointCloud)>, config: TrainingConfig, dir: &Path) -> Result<Self> {
        let model = LatentSdfModel::load(dir.join(MODEL_FILE))?;
        let mut trainer = Self::new(dataset, config, model)?;
        let codebook = LatentCodebook::load(dir.join(CODEBOOK_FILE))?;
        if codebook.ids() != trainer.codebook.ids() || codebook.latent_dim() != trainer.codebook.latent_dim() {
            return Err(Error::ShapeMismatch("checkpoint codebook does not match the dataset".into()));
        }
        trainer.codebook = codebook;
        trainer.history = history_from_csv(&fs::read_to_string(dir.join(HISTORY_FILE))?)?;
        const WHAT: &str = "optimizer state";
        let mut r = BufReader::new(fs::File::open(dir.join(OPTIMIZER_FILE))?);
        binio::read_header(&mut r, OPTIM_MAGIC, OPTIM_VERSION, WHAT)?;
        for expected in [&mut trainer.weight_states, &mut trainer.code_states] {
            let n = binio::read_u64(&mut r, WHAT)? as usize;
            if n != expected.len() {
                return Err(Error::ShapeMismatch(format!("{WHAT}: {n} entries, expected {}", expected.len())));
            }
            for slot in expected.iter_mut() {
                let s = AdamState::read_from(&mut r, WHAT)?;
                if s.len() != slot.len() {
                    return Err(Error::ShapeMismatch(format!("{WHAT}: entry of length {}", s.len())));
                }
                *slot = s;
            }
        }
        binio::expect_eof(&mut r, WHAT)?;
        Ok(trainer)
    }
}

pub const MODEL_FILE: &str = "model.bin";
pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

/// Trains from scratch for `config.epochs` epochs.
pub fn train(
    dataset: Vec<(String, OrientedPointCloud)>,
    config: TrainingConfig,
    model_init: LatentSdfModel,
) -> Result<(LatentSdfModel, LatentCodebook, Vec<HistoryRow>)> {
    let mut trainer = Trainer::new(dataset, config, model_init)?;
    trainer.run(None, |_| {})?;
    Ok(trainer.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdfnet::{fibonacci_sphere, NetworkConfig};

    fn sphere_cloud(n: usize, r: f64) -> OrientedPointCloud {
        let pts = fibonacci_sphere(n, r);
        let normals = pts.iter().map(|p| p.normalize()).collect();
        OrientedPointCloud::new(pts, Some(normals)).unwrap()
    }

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            epochs: 3,
            shapes_per_batch: 2,
            surface_points_per_shape: 64,
            freespace_points_per_shape: 64,
            knn_k: 5,
            seed: 9,
            ..TrainingConfig::default()
        }
    }

    fn tiny_model() -> LatentSdfModel {
        LatentSdfModel::geometric_init(NetworkConfig::with_size(2, 16, 4), 1).unwrap()
    }

    fn two_shapes() -> Vec<(String, OrientedPointCloud)> {
        vec![("a".into(), sphere_cloud(300, 0.5)), ("b".into(), sphere_cloud(300, 0.7))]
    }

    #[test]
    fn exact_sphere_has_zero_first_three_terms() {
        let surface = sphere_cloud(500, 0.5);
        let free = sample_free_space(&surface, &vec![0.05; 500], 400, 0.5, 1).unwrap();
        let l = loss_terms(&SphereField { radius: 0.5 }, None, &surface, &free, &LossWeights::default()).unwrap();
        assert!(l.manifold <= 1e-9 && l.normal <= 1e-9 && l.eikonal <= 1e-9, "{l:?}");
        assert_eq!(l.latent_reg, 0.0);
    }

    #[test]
    fn off_surface_term_hand_value() {
        let surface = sphere_cloud(10, 0.5);
        let l = loss_terms(&SphereField { radius: 0.5 }, None, &surface, &[Vec3::x()], &LossWeights::default()).unwrap();
        assert!((l.off_surface - (-5f64).exp()).abs() < 1e-15);
        assert!((l.off_surface - 6.74e-3).abs() < 1e-5);
    }

    #[test]
    fn total_recomposes_and_zero_latent_has_no_penalty() {
        let m = tiny_model();
        let surface = sphere_cloud(50, 0.4);
        let free = sample_free_space(&surface, &vec![0.1; 50], 40, 0.5, 2).unwrap();
        let w = LossWeights::default();
        let l = loss_terms(&m, Some(&[0.0; 4]), &surface, &free, &w).unwrap();
        assert_eq!(l.latent_reg, 0.0);
        let l = loss_terms(&m, Some(&[0.3, -0.4, 0.0, 0.0]), &surface, &free, &w).unwrap();
        assert!((l.latent_reg - 0.5).abs() < 1e-15);
        assert!((l.total - l.recompose(&w)).abs() <= 1e-9 * l.total.abs());
    }

    #[test]
    fn loss_requires_normals() {
        let surface = sphere_cloud(10, 0.5).without_normals();
        assert!(loss_terms(&SphereField { radius: 0.5 }, None, &surface, &[Vec3::x()], &LossWeights::default()).is_err());
    }

    #[test]
    fn free_space_sampling_contract() {
        let cloud = sphere_cloud(200, 0.5);
        let all_uniform = sample_free_space(&cloud, &vec![0.1; 200], 3000, 1.0, 3).unwrap();
        assert!(all_uniform.iter().all(|p| p.iter().all(|v| v.abs() <= 1.0)));
        let mean = all_uniform.iter().sum::<Vec3>() / 3000.0;
        // per-axis standard error of the mean is sqrt(1/3 / 3000)
        assert!(mean.iter().all(|m| m.abs() < 3.0 * (1.0 / 9000f64).sqrt()));

        let on_surface = sample_free_space(&cloud, &vec![0.0; 200], 100, 0.0, 4).unwrap();
        assert!(on_surface.iter().all(|p| cloud.points().contains(p)));

        let mixed = sample_free_space(&cloud, &vec![0.0; 200], 7, 0.5, 5).unwrap();
        let on = mixed.iter().filter(|p| cloud.points().contains(p)).count();
        assert_eq!(on, 3); // round(3.5) = 4 uniform points
        assert_eq!(mixed, sample_free_space(&cloud, &vec![0.0; 200], 7, 0.5, 5).unwrap());
    }

    #[test]
    fn codebook_init_statistics_and_round_trip() {
        let ids: Vec<String> = (0..50).map(|i| format!("shape_{i:03}")).collect();
        let cb = LatentCodebook::random(ids, 40, 1e-2, 3).unwrap();
        let var = cb.codes().iter().map(|v| v * v).sum::<f64>() / 2000.0;
        assert!((var - 1e-4).abs() < 1.5e-5, "{var}");
        let mut bytes = Vec::new();
        cb.write_to(&mut bytes).unwrap();
        assert_eq!(LatentCodebook::read_from(&mut bytes.as_slice()).unwrap(), cb);
        assert!(matches!(
            LatentCodebook::read_from(&mut &bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainingConfig::default();
        assert_eq!(c.decay(0), 1.0);
        assert_eq!(c.decay(1999), 1.0);
        assert_eq!(c.decay(2000), 0.5);
        assert_eq!(c.decay(9999), 0.0625);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(TrainingConfig { epochs: 0, ..TrainingConfig::default() }.validate().is_err());
        assert!(TrainingConfig { uniform_fraction: 1.5, ..TrainingConfig::default() }.validate().is_err());
        assert!(TrainingConfig { lr_weights: 0.0, ..TrainingConfig::default() }.validate().is_err());
        let err = serde_json::from_str::<TrainingConfig>(r#"{"epochz": 3}"#);
        assert!(err.is_err());
        let c: TrainingConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(c.shapes_per_batch, 16);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let (m1, c1, h1) = train(two_shapes(), tiny_config(), tiny_model()).unwrap();
        let (m2, c2, h2) = train(two_shapes(), tiny_config(), tiny_model()).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(c1, c2);
        assert_eq!(h1.len(), 3);
        let w = tiny_config().weights();
        for row in &h1 {
            assert!((row.loss.total - row.loss.recompose(&w)).abs() <= 1e-9 * row.loss.total);
        }
    }

    #[test]
    fn untouched_codes_do_not_move() {
        let mut data = two_shapes();
        data.push(("c".into(), sphere_cloud(300, 0.6)));
        let config = TrainingConfig { shapes_per_batch: 1, ..tiny_config() };
        let mut t = Trainer::new(data, config, tiny_model()).unwrap();
        let before = t.codebook().clone();
        // run a single batch by hand: the first shape of epoch 0's permutation
        let mut order: Vec<usize> = (0..3).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[9, STREAM_PERMUTATION, 0])));
        let g = t.shape_gradients(order[0], 0).unwrap();
        adam_step(t.codebook.code_mut(order[0]), &g.latent, &mut t.code_states[order[0]], 1e-3).unwrap();
        for s in 0..3 {
            assert_eq!(t.codebook().code(s) == before.code(s), s != order[0]);
        }
    }

    #[test]
    fn strong_latent_regularization_shrinks_codes() {
        let config = TrainingConfig { lambda2: 1e3, epochs: 20, latent_init_std: 0.1, ..tiny_config() };
        let t = Trainer::new(two_shapes(), config.clone(), tiny_model()).unwrap();
        let before: Vec<f64> = (0..2).map(|s| t.codebook().code(s).iter().map(|v| v * v).sum::<f64>()).collect();
        let (_, cb, _) = train(two_shapes(), config, tiny_model()).unwrap();
        for (s, b) in before.iter().enumerate() {
            assert!(cb.code(s).iter().map(|v| v * v).sum::<f64>() < *b);
        }
    }

    #[test]
    fn resume_continues_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let full = train(two_shapes(), tiny_config(), tiny_model()).unwrap();

        let first = TrainingConfig { epochs: 2, ..tiny_config() };
        let mut t = Trainer::new(two_shapes(), first, tiny_model()).unwrap();
        t.run(Some(dir.path()), |_| {}).unwrap();
        let mut resumed = Trainer::resume(two_shapes(), tiny_config(), dir.path()).unwrap();
        assert_eq!(resumed.epochs_done(), 2);
        resumed.run(None, |_| {}).unwrap();
        let (m, cb, h) = resumed.into_parts();
        assert_eq!(h, full.2);
        assert_eq!(m, full.0);
        assert_eq!(cb, full.1);
    }

    #[test]
    fn history_csv_round_trip() {
        let rows = vec![HistoryRow {
            epoch: 1,
            loss: LossBreakdown { manifold: 0.1, normal: 1.0 / 3.0, eikonal: 2e-17, off_surface: 0.5, latent_reg: 0.0, total: 7.25 },
            lr_weights: 5e-4,
            lr_latents: 1e-3,
        }];
        assert_eq!(history_from_csv(&history_to_csv(&rows)).unwrap(), rows);
        assert!(history_from_csv("nope\n").is_err());
    }

    #[test]
    fn non_finite_loss_names_term_and_shape() {
        let mut model = tiny_model();
        model.layers_mut()[0].weight[[0, 0]] = f64::NAN;
        let err = train(two_shapes(), tiny_config(), model).unwrap_err();
        match err {
            Error::NonFinite { term, shape } => {
                assert_eq!(term, "manifold");
                assert!(shape == "a" || shape == "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

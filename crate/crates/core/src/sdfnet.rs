//! The latent-conditioned SDF network `phi(x, z) = MLP([x, z])`.
//!
//! Hidden layers use `softplus(beta)`, the output layer is linear. The layer
//! feeding the skip layer is narrowed by `3 + latent_dim` so that, after
//! `[x, z]` is concatenated back on, the skip layer sees `hidden_width`
//! inputs. The concatenated skip input is scaled by `1/sqrt(2)`, which keeps
//! the geometric initialization's sphere radius intact.
//!
//! `[x, z] W` is evaluated as `x W_x + z W_z` with the row blocks of `W`, so
//! the latent part is computed once per batch instead of once per point.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::diffengine::{grad, grad_values, softplus_value, Tape, Var};
use crate::{Error, Result, Vec3};

const MAGIC: &[u8; 8] = b"LSDFNET\0";
const VERSION: u32 = 1;

/// Rows per block when evaluating large point sets.
pub const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of hidden (softplus) layers; the linear output layer comes on top.
    pub layer_count: usize,
    pub hidden_width: usize,
    /// Hidden layer whose input is re-concatenated with `[x, z]`.
    pub skip_layer: usize,
    pub latent_dim: usize,
    pub softplus_beta: f64,
    /// Radius of the sphere the initialized network approximates.
    pub init_sphere_radius: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            layer_count: 8,
            hidden_width: 512,
            skip_layer: 4,
            latent_dim: 256,
            softplus_beta: 100.0,
            init_sphere_radius: 0.5,
        }
    }
}

impl NetworkConfig {
    /// Smaller network with the skip connection in the middle.
    pub fn with_size(layer_count: usize, hidden_width: usize, latent_dim: usize) -> Self {
        Self {
            layer_count,
            hidden_width,
            skip_layer: layer_count / 2,
            latent_dim,
            ..Self::default()
        }
    }

    pub fn input_dim(&self) -> usize {
        3 + self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.skip_layer > 0 && self.skip_layer < self.layer_count) {
            return Err(Error::InvalidInput(format!(
                "skip layer {} must lie strictly between 0 and layer count {}",
                self.skip_layer, self.layer_count
            )));
        }
        if self.hidden_width <= self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "hidden width {} must exceed latent_dim + 3 = {}",
                self.hidden_width,
                self.input_dim()
            )));
        }
        if !(self.softplus_beta > 0.0) {
            return Err(Error::InvalidInput("softplus beta must be positive".into()));
        }
        if !(self.init_sphere_radius > 0.0) {
            return Err(Error::InvalidInput("init sphere radius must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.layer_count + 1);
        for l in 0..self.layer_count {
            let fan_in = if l == 0 { self.input_dim() } else { self.hidden_width };
            let fan_out = if l + 1 == self.skip_layer {
                self.hidden_width - self.input_dim()
            } else {
                self.hidden_width
            };
            dims.push((fan_in, fan_out));
        }
        dims.push((self.hidden_width, 1));
        dims
    }
}

/// Weights `fan_in x fan_out` and a `1 x fan_out` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSdfModel {
    config: NetworkConfig,
    layers: Vec<Layer>,
}

impl LatentSdfModel {
    pub fn from_layers(config: NetworkConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (l, ((fi, fo), layer)) in dims.iter().zip(&layers).enumerate() {
            if layer.weight.dim() != (*fi, *fo) || layer.bias.dim() != (1, *fo) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: weight {:?} bias {:?}, expected ({fi}, {fo})",
                    layer.weight.dim(),
                    layer.bias.dim()
                )));
            }
        }
        Ok(Self { config, layers })
    }

    /// Geometric initialization: hidden weights `N(0, 2/fan_out)`, zero
    /// biases, zero weights on the latent inputs, and an output layer tuned so
    /// that `phi(x, z) ~ |x| - radius` for every `z`.
    pub fn geometric_init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.layer_dims();
        let mut layers = Vec::with_capacity(dims.len());
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let is_output = l == config.layer_count;
            let (mean, std) = if is_output {
                ((PI / fan_in as f64).sqrt(), 1e-4)
            } else {
                (0.0, (2.0 / fan_out as f64).sqrt())
            };
            let normal = Normal::new(mean, std).expect("finite init distribution");
            let mut weight = Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(&mut rng));
            let bias = if is_output {
                Array2::from_elem((1, 1), -config.init_sphere_radius)
            } else {
                Array2::zeros((1, fan_out))
            };
            if l == 0 {
                weight.slice_mut(s![3.., ..]).fill(0.0);
            } else if l == config.skip_layer {
                let latent_start = config.hidden_width - config.latent_dim;
                weight.slice_mut(s![latent_start.., ..]).fill(0.0);
            }
            layers.push(Layer { weight, bias });
        }
        let mut model = Self::from_layers(config, layers)?;
        model.calibrate_output_bias();
        Ok(model)
    }

    /// Softplus adds `ln 2 / beta` per hidden unit at zero input, which on a
    /// deep, wide net lifts the field by a sizeable constant and shrinks the
    /// zero level set well below the target radius. Shift the output bias so
    /// that the field averages zero over the target sphere.
    fn calibrate_output_bias(&mut self) {
        let r = self.config.init_sphere_radius;
        let sphere = fibonacci_sphere(512, r);
        let z = vec![0.0; self.config.latent_dim];
        let values = self.forward(&sphere, &z).expect("latent length matches");
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let out = self.config.layer_count;
        self.layers[out].bias[[0, 0]] -= mean;
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.latent_dim {
            return Err(Error::LatentLength { expected: self.config.latent_dim, found: z.len() });
        }
        Ok(())
    }

    /// Places the weights on `tape` as leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| (tape.var(l.weight.clone()), tape.var(l.bias.clone())))
                .collect(),
        }
    }

    /// Signed distance estimate for each point.
    pub fn forward(&self, points: &[Vec3], z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let rows = self.latent_rows(z);
        let out: Vec<Vec<f64>> = points
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| self.forward_block(points_to_array(chunk).view(), &rows))
            .collect();
        Ok(out.concat())
    }

    /// Per-layer constant rows: the latent contribution plus bias, for the
    /// input layer and the skip layer.
    fn latent_rows(&self, z: &[f64]) -> [Array2<f64>; 2] {
        let c = &self.config;
        let z = ArrayView2::from_shape((1, z.len()), z).expect("latent row");
        let first = &self.layers[0];
        let row0 = z.dot(&first.weight.slice(s![3.., ..])) + &first.bias;
        let skip = &self.layers[c.skip_layer];
        let start = c.hidden_width - c.latent_dim;
        let row_skip = z.dot(&skip.weight.slice(s![start.., ..])) * FRAC_1_SQRT_2 + &skip.bias;
        [row0, row_skip]
    }

    fn forward_block(&self, x: ArrayView2<f64>, rows: &[Array2<f64>; 2]) -> Vec<f64> {
        let c = &self.config;
        let beta = c.softplus_beta;
        let mut h = x.dot(&self.layers[0].weight.slice(s![0..3, ..])) + &rows[0];
        h.mapv_inplace(|v| softplus_value(v, beta));
        for l in 1..c.layer_count {
            let w = &self.layers[l].weight;
            let mut pre = if l == c.skip_layer {
                let hw = c.hidden_width - c.input_dim();
                let mixed = h.dot(&w.slice(s![0..hw, ..])) + x.dot(&w.slice(s![hw..hw + 3, ..]));
                mixed * FRAC_1_SQRT_2 + &rows[1]
            } else {
                h.dot(w) + &self.layers[l].bias
            };
            pre.mapv_inplace(|v| softplus_value(v, beta));
            h = pre;
        }
        let out = &self.layers[c.layer_count];
        (h.dot(&out.weight) + &out.bias).remove_axis(Axis(1)).to_vec()
    }

    /// Exact spatial gradient of `phi` at each point, via reverse mode.
    pub fn spatial_gradient(&self, points: &[Vec3], z: &[f64]) -> Result<Vec<Vec3>> {
        self.check_latent(z)?;
        let out: Vec<Vec<Vec3>> = points
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let tape = Tape::new();
                let bound = self.bind(&tape);
                let x = tape.var(points_to_array(chunk));
                let zv = tape.row(z);
                let phi = bound.forward(x, zv);
                let g = grad_values(phi.sum(), &[x]).remove(0);
                g.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
            })
            .collect();
        Ok(out.concat())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        binio::write_header(w, MAGIC, VERSION)?;
        for v in [c.layer_count, c.hidden_width, c.skip_layer, c.latent_dim] {
            binio::write_u64(w, v as u64)?;
        }
        binio::write_f64s(w, &[c.softplus_beta, c.init_sphere_radius])?;
        for layer in &self.layers {
            let (rows, cols) = layer.weight.dim();
            binio::write_u64(w, rows as u64)?;
            binio::write_u64(w, cols as u64)?;
            binio::write_f64s(w, layer.weight.as_standard_layout().as_slice().expect("contiguous"))?;
            binio::write_f64s(w, layer.bias.as_standard_layout().as_slice().expect("contiguous"))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        const WHAT: &str = "model file";
        binio::read_header(r, MAGIC, VERSION, WHAT)?;
        let mut ints = [0usize; 4];
        for v in &mut ints {
            *v = binio::read_u64(r, WHAT)? as usize;
        }
        let config = NetworkConfig {
            layer_count: ints[0],
            hidden_width: ints[1],
            skip_layer: ints[2],
            latent_dim: ints[3],
            softplus_beta: binio::read_f64(r, WHAT)?,
            init_sphere_radius: binio::read_f64(r, WHAT)?,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("{WHAT}: invalid header ({e})")))?;
        let mut layers = Vec::new();
        for (l, (fan_in, fan_out)) in config.layer_dims().into_iter().enumerate() {
            let rows = binio::read_u64(r, WHAT)? as usize;
            let cols = binio::read_u64(r, WHAT)? as usize;
            if (rows, cols) != (fan_in, fan_out) {
                return Err(Error::ShapeMismatch(format!(
                    "{WHAT}: layer {l} stored as {rows}x{cols}, header implies {fan_in}x{fan_out}"
                )));
            }
            let weight = Array2::from_shape_vec((rows, cols), binio::read_f64s(r, rows * cols, WHAT)?)
                .expect("weight shape");
            let bias = Array2::from_shape_vec((1, cols), binio::read_f64s(r, cols, WHAT)?).expect("bias shape");
            layers.push(Layer { weight, bias });
        }
        binio::expect_eof(r, WHAT)?;
        Self::from_layers(config, layers)
    }
}

/// `n` near-uniform points on the sphere of radius `r` about the origin.
pub fn fibonacci_sphere(n: usize, r: f64) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - y * y).sqrt();
            let theta = golden * i as f64;
            Vec3::new(rho * theta.cos(), y, rho * theta.sin()) * r
        })
        .collect()
}

pub fn points_to_array(points: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, j)| points[i][j])
}

pub fn array_to_points(a: &Array2<f64>) -> Vec<Vec3> {
    a.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
}

/// Network weights living on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel<'t> {
    config: NetworkConfig,
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundModel<'t> {
    /// Weight and bias leaves in layer order, `[W0, b0, W1, b1, ...]`.
    pub fn params(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// `phi` for an `m x 3` batch `x` and a `1 x L` latent row `z`; returns `m x 1`.
    pub fn forward(&self, x: Var<'t>, z: Var<'t>) -> Var<'t> {
        let c = &self.config;
        let d = c.input_dim();
        let (w0, b0) = self.layers[0];
        let row0 = z.matmul(w0.slice_rows(3, d)) + b0;
        let mut h = x.matmul(w0.slice_rows(0, 3)).add_row(row0).softplus(c.softplus_beta);
        for l in 1..c.layer_count {
            let (w, b) = self.layers[l];
            let pre = if l == c.skip_layer {
                let hw = c.hidden_width - d;
                let mixed = h.matmul(w.slice_rows(0, hw)) + x.matmul(w.slice_rows(hw, hw + 3));
                let row = z.matmul(w.slice_rows(hw + 3, c.hidden_width)).scale(FRAC_1_SQRT_2) + b;
                mixed.scale(FRAC_1_SQRT_2).add_row(row)
            } else {
                h.matmul(w).add_row(b)
            };
            h = pre.softplus(c.softplus_beta);
        }
        let (w, b) = self.layers[c.layer_count];
        h.matmul(w).add_row(b)
    }

    /// `phi` and its spatial gradient (`m x 3`), both differentiable with
    /// respect to the weights and `z`. `x` must be a leaf of the same tape.
    pub fn value_and_gradient(&self, x: Var<'t>, z: Var<'t>) -> (Var<'t>, Var<'t>) {
        let phi = self.forward(x, z);
        let g = grad(phi.sum(), &[x]).remove(0);
        (phi, g)
    }
}

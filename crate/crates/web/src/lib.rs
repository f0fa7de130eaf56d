//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The page can generate a synthetic torso from a seed, show a slice of its
//! signed field, and degrade a sparse scan of it (subsampling, a hole,
//! noise) and score the result against the clean surface.

use latent_sdf::geometry::{add_gaussian_noise, crop_sphere_hole, sample_mesh_surface, OrientedPointCloud, TriangleMesh};
use latent_sdf::metrics::{chamfer, fscore, DEFAULT_TAU_MM};
use latent_sdf::synthetic::{analytic_field, ground_truth_mesh, sample_params, ParamRanges, TorsoParams};
use latent_sdf::Vec3;
use wasm_bindgen::prelude::*;

/// Dense reference sampling used for scoring.
const REFERENCE_POINTS: usize = 20_000;

fn js(e: latent_sdf::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub kept: usize,
    pub removed: usize,
    pub chamfer_mm: f64,
    pub fscore_percent: f64,
}

#[wasm_bindgen]
pub struct TorsoDemo {
    params: TorsoParams,
    mesh: TriangleMesh,
    reference: OrientedPointCloud,
    degraded: Vec<Vec3>,
}

impl TorsoDemo {
    pub fn try_new(seed: u32, resolution: usize) -> latent_sdf::Result<Self> {
        let params = sample_params(seed as u64, &ParamRanges::default())?;
        let mesh = ground_truth_mesh(&params, &params.default_grid(resolution.clamp(16, 160))?)?;
        let reference = sample_mesh_surface(&mesh, REFERENCE_POINTS, seed as u64)?;
        Ok(Self { params, mesh, reference, degraded: Vec::new() })
    }

    pub fn try_degrade(&mut self, points: usize, hole_radius: f64, noise_sigma: f64, seed: u32) -> latent_sdf::Result<Score> {
        let seed = seed as u64;
        let scan = sample_mesh_surface(&self.mesh, points.max(1), seed.wrapping_add(1))?;
        let (holed, _) = crop_sphere_hole(&scan, hole_radius, seed.wrapping_add(2))?;
        let noisy = add_gaussian_noise(&holed, noise_sigma, seed.wrapping_add(3))?;
        let score = Score {
            kept: noisy.len(),
            removed: scan.len() - noisy.len(),
            chamfer_mm: chamfer(noisy.points(), self.reference.points())?,
            fscore_percent: fscore(noisy.points(), self.reference.points(), DEFAULT_TAU_MM)?,
        };
        self.degraded = noisy.points().to_vec();
        Ok(score)
    }
}

#[wasm_bindgen]
impl TorsoDemo {
    /// Torso number `seed` of the family, meshed with `resolution` nodes
    /// along its longest side (clamped to 16..=160).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, resolution: usize) -> Result<TorsoDemo, JsError> {
        Self::try_new(seed, resolution).map_err(js)
    }

    /// Vertex coordinates, `x y z` interleaved, in millimetres.
    pub fn positions(&self) -> Vec<f32> {
        self.mesh.vertices().iter().flat_map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect()
    }

    /// Triangle corner indices, counter-clockwise seen from outside.
    pub fn indices(&self) -> Vec<u32> {
        self.mesh.faces().iter().flatten().copied().collect()
    }

    /// Axis-aligned box around the mesh: `min xyz, max xyz`.
    pub fn bounds(&self) -> Vec<f64> {
        let (lo, hi) = self.mesh.bounding_box().unwrap_or_default();
        vec![lo.x, lo.y, lo.z, hi.x, hi.y, hi.z]
    }

    pub fn params_json(&self) -> String {
        format!("{:#?}", self.params)
    }

    /// Field values on a `width x height` raster spanning the mesh bounds in
    /// the plane `coordinate[axis] = value`, rows from the top. The raster's
    /// horizontal and vertical axes are the next two axes in `x, y, z` order,
    /// except that a slice across `y` shows `x` horizontally and `z` vertically.
    pub fn field_slice(&self, axis: usize, value: f64, width: usize, height: usize) -> Vec<f32> {
        let axis = axis.min(2);
        let (u, v) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let (lo, hi) = self.mesh.bounding_box().unwrap_or_default();
        let pad = 0.1 * (hi - lo).max();
        let (width, height) = (width.max(2), height.max(2));
        let mut out = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                let mut p = Vec3::zeros();
                p[axis] = value;
                p[u] = lo[u] - pad + (hi[u] - lo[u] + 2.0 * pad) * col as f64 / (width - 1) as f64;
                p[v] = hi[v] + pad - (hi[v] - lo[v] + 2.0 * pad) * row as f64 / (height - 1) as f64;
                out.push(analytic_field(&self.params, &p) as f32);
            }
        }
        out
    }

    /// Samples `points` surface points, removes those within `hole_radius`
    /// of a random one, adds `noise_sigma` Gaussian noise, and scores the
    /// result against a dense clean sampling of the same surface.
    pub fn degrade(&mut self, points: usize, hole_radius: f64, noise_sigma: f64, seed: u32) -> Result<Score, JsError> {
        self.try_degrade(points, hole_radius, noise_sigma, seed).map_err(js)
    }

    /// The last degraded scan, `x y z` interleaved.
    pub fn degraded_points(&self) -> Vec<f32> {
        self.degraded.iter().flat_map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect()
    }
}

//! Dense grid evaluation and marching cubes.
//!
//! Grid nodes are stored x-fastest. Corners of a cube are numbered
//! `0:(0,0,0) 1:(1,0,0) 2:(1,1,0) 3:(0,1,0)` and `4..8` the same at `z+1`;
//! an edge vertex is keyed by its lower grid node and axis, so neighbouring
//! cubes share vertices and the output is watertight by construction.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{NormalizationTransform, TriangleMesh};
use crate::mc_tables::TRI_TABLE;
use crate::sdfnet::LatentSdfModel;
use crate::{Error, Result, Vec3};

/// Nodes evaluated per model call by default.
pub const DEFAULT_CHUNK: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub resolution: [usize; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::cube(256, 1.0)
    }
}

impl GridSpec {
    pub fn new(resolution: [usize; 3], min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let g = Self { resolution, min, max };
        g.validate()?;
        Ok(g)
    }

    /// `resolution^3` nodes over `[-half, half]^3`.
    pub fn cube(resolution: usize, half: f64) -> Self {
        Self { resolution: [resolution; 3], min: [-half; 3], max: [half; 3] }
    }

    /// Isotropic-ish grid over a box: `longest` nodes along the longest side
    /// and proportionally many (at least 2) along the others.
    pub fn covering(min: Vec3, max: Vec3, longest: usize) -> Result<Self> {
        let extent = max - min;
        let h = extent.max() / (longest.max(2) - 1) as f64;
        let resolution = [0, 1, 2].map(|a| ((extent[a] / h).ceil() as usize + 1).max(2));
        Self::new(resolution, min.into(), max.into())
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(Error::InvalidInput("grid resolution must be at least 2 per axis".into()));
        }
        if (0..3).any(|a| !(self.max[a] > self.min[a]) || !self.min[a].is_finite() || !self.max[a].is_finite()) {
            return Err(Error::InvalidInput("grid bounds must be finite and non-degenerate".into()));
        }
        Ok(())
    }

    pub fn spacing(&self) -> Vec3 {
        Vec3::from_fn(|a, _| (self.max[a] - self.min[a]) / (self.resolution[a] - 1) as f64)
    }

    pub fn node_count(&self) -> usize {
        self.resolution.iter().product()
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        let n = self.resolution[axis] - 1;
        if i == n {
            self.max[axis]
        } else {
            self.min[axis] + (self.max[axis] - self.min[axis]) * (i as f64 / n as f64)
        }
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(self.coord(0, i), self.coord(1, j), self.coord(2, k))
    }

    /// Position of the node with flat (x-fastest) index `n`.
    pub fn position_of(&self, n: usize) -> Vec3 {
        let [nx, ny, _] = self.resolution;
        self.node_position(n % nx, (n / nx) % ny, n / (nx * ny))
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }
}

/// Field samples on a [`GridSpec`], x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.node_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} grid nodes",
                values.len(),
                spec.node_count()
            )));
        }
        Ok(Self { spec, values })
    }

    /// Samples `f` at every node.
    pub fn from_fn(spec: GridSpec, f: impl Fn(&Vec3) -> f64 + Sync) -> Result<Self> {
        spec.validate()?;
        let values = (0..spec.node_count()).into_par_iter().map(|n| f(&spec.position_of(n))).collect();
        Ok(Self { spec, values })
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.spec.index(i, j, k)]
    }
}

/// Evaluates `phi(., z)` at every grid node, `chunk_size` nodes per call.
/// The result does not depend on `chunk_size`.
pub fn evaluate_grid(model: &LatentSdfModel, z: &[f64], grid: &GridSpec, chunk_size: usize) -> Result<ScalarGrid> {
    grid.validate()?;
    model.check_latent(z)?;
    let chunk = chunk_size.max(1);
    let total = grid.node_count();
    let mut values = Vec::with_capacity(total);
    let mut start = 0;
    while start < total {
        let end = (start + chunk).min(total);
        let nodes: Vec<Vec3> = (start..end).map(|n| grid.position_of(n)).collect();
        values.extend(model.forward(&nodes, z)?);
        start = end;
    }
    ScalarGrid::new(*grid, values)
}

/// Corner offsets of a cube.
const CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];

/// Each edge as (lower corner offset, axis).
const EDGES: [([usize; 3], usize); 12] = [
    ([0, 0, 0], 0),
    ([1, 0, 0], 1),
    ([0, 1, 0], 0),
    ([0, 0, 0], 1),
    ([0, 0, 1], 0),
    ([1, 0, 1], 1),
    ([0, 1, 1], 0),
    ([0, 0, 1], 1),
    ([0, 0, 0], 2),
    ([1, 0, 0], 2),
    ([1, 1, 0], 2),
    ([0, 1, 0], 2),
];

/// Extracts the `iso` level set. Corners strictly below `iso` count as
/// inside; faces are wound so their normals point toward larger values.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> Result<TriangleMesh> {
    let spec = &grid.spec;
    if grid.values.len() != spec.node_count() {
        return Err(Error::ShapeMismatch("grid value count does not match its spec".into()));
    }
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("marching cubes needs a finite grid".into()));
    }
    let [nx, ny, nz] = spec.resolution;
    // triangles as edge keys (node index * 3 + axis), one list per z slab
    let slabs: Vec<Vec<[u64; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let mut case = 0usize;
                    for (c, off) in CORNERS.iter().enumerate() {
                        if grid.get(i + off[0], j + off[1], k + off[2]) < iso {
                            case |= 1 << c;
                        }
                    }
                    if case == 0 || case == 255 {
                        continue;
                    }
                    let key = |e: i8| {
                        let (off, axis) = EDGES[e as usize];
                        (spec.index(i + off[0], j + off[1], k + off[2]) * 3 + axis) as u64
                    };
                    for t in TRI_TABLE[case].chunks_exact(3).take_while(|t| t[0] >= 0) {
                        // the table winds toward the inside; reverse it
                        tris.push([key(t[0]), key(t[2]), key(t[1])]);
                    }
                }
            }
            tris
        })
        .collect();

    let mut ids: HashMap<u64, u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::with_capacity(slabs.iter().map(Vec::len).sum());
    for tri in slabs.into_iter().flatten() {
        let face = tri.map(|key| {
            *ids.entry(key).or_insert_with(|| {
                vertices.push(edge_vertex(grid, key, iso));
                (vertices.len() - 1) as u32
            })
        });
        faces.push(face);
    }
    TriangleMesh::new(vertices, faces)
}

fn edge_vertex(grid: &ScalarGrid, key: u64, iso: f64) -> Vec3 {
    let spec = &grid.spec;
    let node = (key / 3) as usize;
    let axis = (key % 3) as usize;
    let step = [1, spec.resolution[0], spec.resolution[0] * spec.resolution[1]][axis];
    let (va, vb) = (grid.values[node], grid.values[node + step]);
    let pa = spec.position_of(node);
    let pb = spec.position_of(node + step);
    let t = (iso - va) / (vb - va);
    let mut p = pa;
    p[axis] = pa[axis] + t * (pb[axis] - pa[axis]);
    p
}

/// Grid evaluation, marching cubes at 0 and mapping back to scene units.
pub fn extract_surface(
    model: &LatentSdfModel,
    z: &[f64],
    grid: &GridSpec,
    transform: &NormalizationTransform,
) -> Result<TriangleMesh> {
    let values = evaluate_grid(model, z, grid, DEFAULT_CHUNK)?;
    let mesh = marching_cubes(&values, 0.0)?;
    Ok(transform.invert_mesh(&mesh))
}

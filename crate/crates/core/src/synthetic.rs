//! A procedural family of torsos with two breast-like bumps.
//!
//! Each shape is the zero level set of a smooth-minimum blend of a rounded
//! box (the torso slab) and two ellipsoids. Axes: `x` lateral, `y` anterior
//! (the bumps sit on the `+y` face), `z` up; units are millimetres. The field
//! is not an exact signed distance, so ground truth always flows through the
//! mesh extracted from it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{sample_mesh_surface, OrientedPointCloud, Plane, TriangleMesh};
use crate::io::{read_cloud_ply, write_cloud_ply, write_mesh_ply, PlyEncoding};
use crate::meshing::{marching_cubes, GridSpec, ScalarGrid};
use crate::training::mix;
use crate::{Error, Result, Vec3};

pub const DEFAULT_POINTS_PER_SHAPE: usize = 20_000;
pub const DEFAULT_GRID_RESOLUTION: usize = 256;
pub const MANIFEST_FILE: &str = "manifest.json";

const STREAM_PARAMS: u64 = 11;
const STREAM_CLOUD: u64 = 12;

/// Sagging direction of a bump: mostly down, a little forward (20 degrees).
fn ptosis_direction() -> Vec3 {
    let a = 20f64.to_radians();
    Vec3::new(0.0, a.sin(), -a.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    /// Centre before the ptosis displacement.
    pub center: [f64; 3],
    /// Ellipsoid semi-axes.
    pub radii: [f64; 3],
    /// Displacement along the sagging direction, in mm.
    pub ptosis: f64,
}

impl Bump {
    pub fn displaced_center(&self) -> Vec3 {
        Vec3::from(self.center) + ptosis_direction() * self.ptosis
    }

    fn mirrored(&self) -> Self {
        let [x, y, z] = self.center;
        Self { center: [-x, y, z], ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorsoParams {
    pub half_extents: [f64; 3],
    /// Edge rounding radius of the slab.
    pub rounding: f64,
    /// Smooth-minimum width `k`.
    pub blend: f64,
    /// Left (`-x`) and right (`+x`) bump.
    pub bumps: [Bump; 2],
    /// Relative jitter applied to the right bump when sampling; recorded only.
    pub asymmetry: f64,
}

impl Default for TorsoParams {
    fn default() -> Self {
        let left = Bump { center: [-85.0, 95.0, 40.0], radii: [60.0, 45.0, 55.0], ptosis: 10.0 };
        Self {
            half_extents: [170.0, 80.0, 220.0],
            rounding: 30.0,
            blend: 15.0,
            bumps: [left, left.mirrored()],
            asymmetry: 0.0,
        }
    }
}

impl TorsoParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(format!("torso parameters: {msg}")));
        let h = self.half_extents;
        let scalars = [self.rounding, self.blend, self.asymmetry];
        if h.iter().chain(&scalars).any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        if h.iter().any(|&v| v <= 0.0) {
            return bad(format!("half extents must be positive, got {h:?}"));
        }
        let min_half = h.iter().copied().fold(f64::INFINITY, f64::min);
        if !(self.rounding > 0.0 && self.rounding < min_half) {
            return bad(format!("rounding {} must lie in (0, {min_half})", self.rounding));
        }
        if !(self.blend > 0.0) {
            return bad(format!("blend must be positive, got {}", self.blend));
        }
        if self.asymmetry < 0.0 {
            return bad("asymmetry must be >= 0".into());
        }
        for (side, b) in ["left", "right"].iter().zip(&self.bumps) {
            if b.center.iter().chain(&b.radii).chain([&b.ptosis]).any(|v| !v.is_finite()) {
                return bad(format!("{side} bump has a non-finite value"));
            }
            if b.radii.iter().any(|&r| r <= 0.0) {
                return bad(format!("{side} bump radii must be positive, got {:?}", b.radii));
            }
            if b.ptosis < 0.0 {
                return bad(format!("{side} bump ptosis must be >= 0"));
            }
            let c = b.displaced_center();
            // the ray from the centre back towards the slab must enter it
            if c.x.abs() >= h[0] || c.z.abs() >= h[2] || c.y - b.radii[1] >= h[1] || c.y <= -h[1] {
                return bad(format!("{side} bump does not intersect the slab front face"));
            }
        }
        Ok(())
    }

    /// Box containing the zero level set, before padding.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let h = Vec3::from(self.half_extents);
        let (mut lo, mut hi) = (-h, h);
        for b in &self.bumps {
            let c = b.displaced_center();
            let r = Vec3::from(b.radii);
            lo = lo.inf(&(c - r));
            hi = hi.sup(&(c + r));
        }
        // the smooth minimum sits at most k/4 below the plain minimum
        let pad = Vec3::repeat(0.25 * self.blend);
        (lo - pad, hi + pad)
    }

    /// Grid with `longest` nodes along the longest side of the padded bounds.
    pub fn default_grid(&self, longest: usize) -> Result<GridSpec> {
        let (lo, hi) = self.bounds();
        let pad = Vec3::repeat(0.03 * (hi - lo).max());
        GridSpec::covering(lo - pad, hi + pad, longest)
    }
}

fn rounded_box(p: &Vec3, half: &Vec3, rounding: f64) -> f64 {
    let q = p.abs() - half + Vec3::repeat(rounding);
    q.sup(&Vec3::zeros()).norm() + q.max().min(0.0) - rounding
}

/// `(|p/r| - 1) * min(r)`: continuous, zero exactly on the ellipsoid and
/// 1-Lipschitz, though not a true distance away from it.
fn ellipsoid(p: &Vec3, radii: &Vec3) -> f64 {
    (p.component_div(radii).norm() - 1.0) * radii.min()
}

/// Polynomial smooth minimum of width `k`.
pub fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    let h = (k - (a - b).abs()).max(0.0) / k;
    a.min(b) - h * h * k * 0.25
}

/// Negative inside, positive outside; `params` is assumed valid.
pub fn analytic_field(params: &TorsoParams, x: &Vec3) -> f64 {
    let slab = rounded_box(x, &Vec3::from(params.half_extents), params.rounding);
    let [l, r] = params.bumps.map(|b| ellipsoid(&(x - b.displaced_center()), &Vec3::from(b.radii)));
    // bumps first: the smooth minimum is commutative but not associative
    smooth_min(slab, smooth_min(l, r, params.blend), params.blend)
}

/// Marching cubes on [`analytic_field`] over `grid`.
pub fn ground_truth_mesh(params: &TorsoParams, grid: &GridSpec) -> Result<TriangleMesh> {
    params.validate()?;
    let values = ScalarGrid::from_fn(*grid, |p| analytic_field(params, p))?;
    let [nx, ny, nz] = grid.resolution;
    let on_boundary = |i: usize, j: usize, k: usize| {
        i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1
    };
    let leaks = (0..nz).any(|k| {
        (0..ny).any(|j| (0..nx).any(|i| on_boundary(i, j, k) && values.get(i, j, k) <= 0.0))
    });
    if leaks {
        return Err(Error::InvalidInput("the torso's zero level set leaves the grid".into()));
    }
    let mesh = marching_cubes(&values, 0.0)?;
    if mesh.is_empty() {
        return Err(Error::Degenerate("the torso field has an empty zero level set on this grid".into()));
    }
    Ok(mesh)
}

/// Inclusive `[min, max]` ranges that [`sample_params`] draws from uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamRanges {
    pub half_x: [f64; 2],
    pub half_y: [f64; 2],
    pub half_z: [f64; 2],
    pub rounding: [f64; 2],
    pub blend: [f64; 2],
    /// Lateral distance of a bump centre from the midline.
    pub bump_x: [f64; 2],
    /// How far a bump centre sits in front of the slab face.
    pub bump_forward: [f64; 2],
    pub bump_z: [f64; 2],
    pub radius_x: [f64; 2],
    pub radius_y: [f64; 2],
    pub radius_z: [f64; 2],
    pub ptosis: [f64; 2],
    pub asymmetry: [f64; 2],
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            half_x: [155.0, 185.0],
            half_y: [70.0, 90.0],
            half_z: [200.0, 230.0],
            rounding: [25.0, 40.0],
            blend: [10.0, 20.0],
            bump_x: [70.0, 100.0],
            bump_forward: [0.0, 20.0],
            bump_z: [20.0, 60.0],
            radius_x: [45.0, 70.0],
            radius_y: [40.0, 60.0],
            radius_z: [45.0, 65.0],
            ptosis: [0.0, 35.0],
            asymmetry: [0.0, 0.1],
        }
    }
}

impl ParamRanges {
    fn named(&self) -> [(&'static str, [f64; 2]); 13] {
        [
            ("half_x", self.half_x),
            ("half_y", self.half_y),
            ("half_z", self.half_z),
            ("rounding", self.rounding),
            ("blend", self.blend),
            ("bump_x", self.bump_x),
            ("bump_forward", self.bump_forward),
            ("bump_z", self.bump_z),
            ("radius_x", self.radius_x),
            ("radius_y", self.radius_y),
            ("radius_z", self.radius_z),
            ("ptosis", self.ptosis),
            ("asymmetry", self.asymmetry),
        ]
    }

    /// Checks that every draw from the table yields valid [`TorsoParams`],
    /// using worst-case corners of the ranges.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(format!("inconsistent parameter ranges: {msg}")));
        for (name, [lo, hi]) in self.named() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return bad(format!("{name} = [{lo}, {hi}]"));
            }
        }
        for (name, [lo, _]) in self.named() {
            let may_be_zero = matches!(name, "bump_forward" | "ptosis" | "asymmetry" | "bump_z");
            if !may_be_zero && lo <= 0.0 {
                return bad(format!("{name} must be positive"));
            }
            if may_be_zero && name != "bump_z" && lo < 0.0 {
                return bad(format!("{name} must be >= 0"));
            }
        }
        let a = self.asymmetry[1];
        if a >= 1.0 {
            return bad("asymmetry must stay below 1".into());
        }
        let (grow, shrink) = (1.0 + a, 1.0 - a);
        let min_half = self.half_x[0].min(self.half_y[0]).min(self.half_z[0]);
        if self.rounding[1] >= min_half {
            return bad("rounding can reach the smallest half extent".into());
        }
        let dir = ptosis_direction();
        let max_ptosis = self.ptosis[1] * grow;
        if self.bump_forward[1] + max_ptosis * dir.y >= self.radius_y[0] * shrink {
            return bad("a bump can float in front of the slab".into());
        }
        if self.bump_x[1] * grow >= self.half_x[0] {
            return bad("a bump centre can leave the slab laterally".into());
        }
        let z_hi = self.bump_z[1] * grow;
        let z_lo = self.bump_z[0] * shrink.min(grow) + max_ptosis * dir.z;
        if z_hi >= self.half_z[0] || -z_lo >= self.half_z[0] || self.bump_z[0] * grow < -self.half_z[0] {
            return bad("a bump centre can leave the slab vertically".into());
        }
        Ok(())
    }
}

/// Uniform draws from `ranges`; the right bump mirrors the left one with
/// every coordinate scaled by an independent factor in `1 ± asymmetry`.
pub fn sample_params(seed: u64, ranges: &ParamRanges) -> Result<TorsoParams> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |[lo, hi]: [f64; 2]| rng.random_range(lo..=hi);
    let half_extents = [draw(ranges.half_x), draw(ranges.half_y), draw(ranges.half_z)];
    let rounding = draw(ranges.rounding);
    let blend = draw(ranges.blend);
    let forward = draw(ranges.bump_forward);
    let left = Bump {
        center: [-draw(ranges.bump_x), half_extents[1] + forward, draw(ranges.bump_z)],
        radii: [draw(ranges.radius_x), draw(ranges.radius_y), draw(ranges.radius_z)],
        ptosis: draw(ranges.ptosis),
    };
    let asymmetry = draw(ranges.asymmetry);
    let mut jitter = || 1.0 + asymmetry * draw([-1.0, 1.0]);
    let mut right = left.mirrored();
    right.center[0] *= jitter();
    right.center[2] *= jitter();
    for r in &mut right.radii {
        *r *= jitter();
    }
    right.ptosis *= jitter();
    let params = TorsoParams { half_extents, rounding, blend, bumps: [left, right], asymmetry };
    params.validate()?;
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    pub points_per_shape: usize,
    /// Marching-cubes nodes along the longest side of each shape's box.
    pub grid_resolution: usize,
    pub ranges: ParamRanges,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self {
            points_per_shape: DEFAULT_POINTS_PER_SHAPE,
            grid_resolution: DEFAULT_GRID_RESOLUTION,
            ranges: ParamRanges::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticShape {
    pub id: String,
    pub params: TorsoParams,
    pub mesh: TriangleMesh,
    pub cloud: OrientedPointCloud,
}

pub fn shape_id(index: usize) -> String {
    format!("shape_{index:03}")
}

/// One shape of the family: the `index`-th draw for `seed`.
pub fn generate_shape(index: usize, seed: u64, settings: &DatasetSettings) -> Result<SyntheticShape> {
    let params = sample_params(mix(&[seed, STREAM_PARAMS, index as u64]), &settings.ranges)?;
    let grid = params.default_grid(settings.grid_resolution)?;
    let mesh = ground_truth_mesh(&params, &grid)?;
    if !mesh.is_closed() || mesh.connected_components() != 1 {
        return Err(Error::Degenerate(format!(
            "{}: ground-truth mesh is not a closed single component",
            shape_id(index)
        )));
    }
    let cloud = sample_mesh_surface(&mesh, settings.points_per_shape, mix(&[seed, STREAM_CLOUD, index as u64]))?;
    Ok(SyntheticShape { id: shape_id(index), params, mesh, cloud })
}

/// Shapes `0..n` for `seed`, generated in parallel.
pub fn generate_dataset(n: usize, seed: u64, settings: &DatasetSettings) -> Result<Vec<SyntheticShape>> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be >= 1".into()));
    }
    (0..n).into_par_iter().map(|i| generate_shape(i, seed, settings)).collect()
}

/// Axis-aligned crop around the bump region, in torso millimetres. The
/// lateral planes stay inside the narrowest slab (`half_x >= 155`): a plane
/// nearly tangent to a side wall would count a sub-millimetre wall shift as
/// whole patches of missing surface.
pub fn default_test_planes() -> Vec<Plane> {
    vec![
        Plane::axis(2, 130.0, false),
        Plane::axis(2, -110.0, true),
        Plane::axis(0, 150.0, false),
        Plane::axis(0, -150.0, true),
        Plane::axis(1, 0.0, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub params: TorsoParams,
    /// Paths relative to the manifest's directory.
    pub mesh: String,
    pub cloud: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub settings: DatasetSettings,
    pub test_planes: Vec<Plane>,
    pub shapes: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn cloud_path(&self, dir: &Path, index: usize) -> PathBuf {
        dir.join(&self.shapes[index].cloud)
    }

    pub fn mesh_path(&self, dir: &Path, index: usize) -> PathBuf {
        dir.join(&self.shapes[index].mesh)
    }

    /// `(id, cloud)` pairs in manifest order, ready for training.
    pub fn load_clouds(&self, dir: &Path) -> Result<Vec<(String, OrientedPointCloud)>> {
        (0..self.shapes.len())
            .map(|i| Ok((self.shapes[i].id.clone(), read_cloud_ply(self.cloud_path(dir, i))?)))
            .collect()
    }
}

/// Writes `shape_XXX_mesh.ply`, `shape_XXX_cloud.ply` and the manifest.
pub fn write_dataset(
    dir: &Path,
    shapes: &[SyntheticShape],
    seed: u64,
    settings: &DatasetSettings,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(shapes.len());
    for s in shapes {
        let mesh = format!("{}_mesh.ply", s.id);
        let cloud = format!("{}_cloud.ply", s.id);
        write_mesh_ply(dir.join(&mesh), &s.mesh, PlyEncoding::default())?;
        write_cloud_ply(dir.join(&cloud), &s.cloud, PlyEncoding::default())?;
        entries.push(ManifestEntry { id: s.id.clone(), params: s.params, mesh, cloud });
    }
    let manifest = DatasetManifest { seed, settings: *settings, test_planes: default_test_planes(), shapes: entries };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point_mesh_distance;
    use crate::metrics::chamfer;

    fn small() -> DatasetSettings {
        DatasetSettings { points_per_shape: 2000, grid_resolution: 64, ..Default::default() }
    }

    fn gradient(params: &TorsoParams, p: &Vec3) -> Vec3 {
        let h = 1e-4;
        Vec3::from_fn(|a, _| {
            let mut e = Vec3::zeros();
            e[a] = h;
            (analytic_field(params, &(p + e)) - analytic_field(params, &(p - e))) / (2.0 * h)
        })
    }

    #[test]
    fn field_signs() {
        let p = TorsoParams::default();
        assert!(analytic_field(&p, &Vec3::zeros()) < -50.0);
        for b in &p.bumps {
            assert!(analytic_field(&p, &b.displaced_center()) < 0.0);
        }
        let diag = Vec3::from(p.half_extents).norm() * 2.0;
        let far = Vec3::new(1.0, -2.0, 0.5).normalize() * 10.0 * diag;
        assert!(analytic_field(&p, &far) > diag);
    }

    #[test]
    fn symmetric_params_give_mirror_symmetric_field() {
        let p = TorsoParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let x = Vec3::new(rng.random_range(-250.0..250.0), rng.random_range(-150.0..200.0), rng.random_range(-250.0..250.0));
            let m = Vec3::new(-x.x, x.y, x.z);
            assert!((analytic_field(&p, &x) - analytic_field(&p, &m)).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_min_bounds() {
        for (a, b) in [(0.0, 0.0), (1.0, 3.0), (-2.0, 5.0), (4.0, 4.5)] {
            let s = smooth_min(a, b, 2.0);
            assert!(s <= a.min(b) && s >= a.min(b) - 0.5);
        }
        assert_eq!(smooth_min(0.0, 10.0, 2.0), 0.0);
    }

    #[test]
    fn default_mesh_is_closed_single_component() {
        let p = TorsoParams::default();
        let mesh = ground_truth_mesh(&p, &p.default_grid(96).unwrap()).unwrap();
        assert!(mesh.is_closed());
        assert_eq!(mesh.connected_components(), 1);
    }

    #[test]
    fn vanishing_bumps_leave_the_slab() {
        let mut p = TorsoParams::default();
        for b in &mut p.bumps {
            b.radii = [1e-3; 3];
            b.ptosis = 0.0;
            b.center[1] = p.half_extents[1] - 10.0;
        }
        let grid = TorsoParams::default().default_grid(96).unwrap();
        let h = grid.spacing().max();
        let with = ground_truth_mesh(&p, &grid).unwrap();
        let slab = ScalarGrid::from_fn(grid, |x| rounded_box(x, &Vec3::from(p.half_extents), p.rounding)).unwrap();
        let slab = marching_cubes(&slab, 0.0).unwrap();
        let a = sample_mesh_surface(&with, 20_000, 1).unwrap();
        let b = sample_mesh_surface(&slab, 20_000, 1).unwrap();
        let cd = chamfer(a.points(), b.points()).unwrap();
        assert!(cd < 2.0 * h, "cd {cd}, h {h}");
    }

    #[test]
    fn refinement_changes_mesh_by_less_than_spacing() {
        let p = TorsoParams::default();
        let coarse_grid = p.default_grid(64).unwrap();
        let h = coarse_grid.spacing().max();
        let coarse = ground_truth_mesh(&p, &coarse_grid).unwrap();
        let fine = ground_truth_mesh(&p, &p.default_grid(128).unwrap()).unwrap();
        let sampled = sample_mesh_surface(&coarse, 2000, 4).unwrap();
        let mean: f64 = sampled.points().iter().map(|x| point_mesh_distance(x, &fine)).sum::<f64>() / 2000.0;
        assert!(mean < h, "mean {mean}, h {h}");
    }

    #[test]
    fn grid_too_small_is_rejected() {
        let p = TorsoParams::default();
        let grid = GridSpec::cube(32, 100.0);
        assert!(ground_truth_mesh(&p, &grid).is_err());
        let empty = GridSpec::new([16; 3], [1000.0; 3], [1100.0; 3]).unwrap();
        assert!(matches!(ground_truth_mesh(&p, &empty), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_valid() {
        let r = ParamRanges::default();
        assert_eq!(sample_params(5, &r).unwrap(), sample_params(5, &r).unwrap());
        assert_ne!(sample_params(5, &r).unwrap(), sample_params(6, &r).unwrap());
        for seed in 0..1000 {
            let p = sample_params(seed, &r).unwrap();
            p.validate().unwrap();
            let [lo, hi] = r.half_x;
            assert!((lo..=hi).contains(&p.half_extents[0]));
            assert!(p.asymmetry <= r.asymmetry[1]);
        }
    }

    #[test]
    fn degenerate_ranges_give_constant_output() {
        let d = TorsoParams::default();
        let left = d.bumps[0];
        let pin = |v: f64| [v, v];
        let r = ParamRanges {
            half_x: pin(d.half_extents[0]),
            half_y: pin(d.half_extents[1]),
            half_z: pin(d.half_extents[2]),
            rounding: pin(d.rounding),
            blend: pin(d.blend),
            bump_x: pin(-left.center[0]),
            bump_forward: pin(left.center[1] - d.half_extents[1]),
            bump_z: pin(left.center[2]),
            radius_x: pin(left.radii[0]),
            radius_y: pin(left.radii[1]),
            radius_z: pin(left.radii[2]),
            ptosis: pin(left.ptosis),
            asymmetry: pin(0.0),
        };
        assert_eq!(sample_params(1, &r).unwrap(), d);
        assert_eq!(sample_params(2, &r).unwrap(), d);
    }

    #[test]
    fn inconsistent_ranges_are_rejected() {
        let r = ParamRanges { blend: [5.0, 1.0], ..Default::default() };
        assert!(sample_params(0, &r).is_err());
        let r = ParamRanges { radius_y: [5.0, 10.0], ..Default::default() };
        assert!(r.validate().is_err());
        let r = ParamRanges { rounding: [10.0, 100.0], ..Default::default() };
        assert!(r.validate().is_err());
        ParamRanges::default().validate().unwrap();
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = TorsoParams::default();
        p.bumps[1].center[1] = 200.0;
        assert!(p.validate().is_err());
        let p = TorsoParams { blend: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
        let mut p = TorsoParams::default();
        p.bumps[0].radii[2] = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn cloud_lies_on_mesh_with_field_aligned_normals() {
        let s = generate_shape(0, 7, &small()).unwrap();
        let sub = s.cloud.subsample(300, 1);
        for x in sub.points() {
            assert!(point_mesh_distance(x, &s.mesh) < 1e-9 * 400.0);
        }
        let normals = s.cloud.normals().unwrap();
        let cos: f64 = s
            .cloud
            .points()
            .iter()
            .zip(normals)
            .map(|(x, n)| gradient(&s.params, x).normalize().dot(n))
            .sum::<f64>()
            / s.cloud.len() as f64;
        assert!(cos > 0.99, "mean cosine {cos}");
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let settings = small();
        let shapes = generate_dataset(3, 11, &settings).unwrap();
        assert_ne!(shapes[0].params, shapes[1].params);
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &shapes, 11, &settings).unwrap();
        assert_eq!(DatasetManifest::load(dir.path()).unwrap(), manifest);
        let clouds = manifest.load_clouds(dir.path()).unwrap();
        for (s, (id, c)) in shapes.iter().zip(&clouds) {
            assert_eq!(&s.id, id);
            assert_eq!(&s.cloud, c);
        }
        let again = generate_dataset(3, 11, &settings).unwrap();
        assert_eq!(again[2].cloud, shapes[2].cloud);
        assert!(generate_dataset(0, 1, &settings).is_err());
    }
}

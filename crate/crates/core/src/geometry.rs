//! Point clouds, triangle meshes and the point-level operations used by the
//! training and evaluation pipelines: normalization into the canonical cube,
//! area-weighted surface sampling, plane cropping and the hole / noise
//! degradations.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::spatial::KdTree;
use crate::{Error, Result, Vec3};

/// Tolerance on the Euclidean norm of normals and plane normals.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Default margin of the canonical cube: clouds are scaled into `[-0.9, 0.9]^3`.
pub const DEFAULT_MARGIN: f64 = 0.9;

/// Default neighbour rank used for the per-point perturbation scale.
pub const DEFAULT_SIGMA_K: usize = 50;

/// Positions with optional per-point unit normals.
///
/// Clouds produced by filtering (cropping, hole cutting) may be empty;
/// operations that need points check for that themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedPointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl OrientedPointCloud {
    pub fn new(points: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Result<Self> {
        if let Some(normals) = &normals {
            if normals.len() != points.len() {
                return Err(Error::InvalidInput(format!(
                    "{} points but {} normals",
                    points.len(),
                    normals.len()
                )));
            }
            if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > UNIT_TOLERANCE) {
                return Err(Error::InvalidInput(format!(
                    "normal {i} has norm {}, expected 1",
                    normals[i].norm()
                )));
            }
        }
        Ok(Self { points, normals })
    }

    /// Cloud without normals, as handed to test-time fitting.
    pub fn unoriented(points: Vec<Vec3>) -> Self {
        Self { points, normals: None }
    }

    /// Builds an oriented cloud, normalizing every normal to unit length.
    pub fn with_normalized_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        let normals = normals
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 && len.is_finite() {
                    Ok(n / len)
                } else {
                    Err(Error::InvalidInput("zero-length normal".into()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points, Some(normals))
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// Drops the normals, keeping positions.
    pub fn without_normals(&self) -> Self {
        Self::unoriented(self.points.clone())
    }

    pub fn into_parts(self) -> (Vec<Vec3>, Option<Vec<Vec3>>) {
        (self.points, self.normals)
    }

    /// Keeps the points whose mask entry is true, preserving order.
    pub fn filter(&self, keep: impl Fn(usize, &Vec3) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i, &self.points[i])).collect();
        self.select(&idx)
    }

    /// Cloud made of the given point indices (repetition allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
        }
    }

    /// Axis-aligned bounding box `(min, max)`; `None` for an empty cloud.
    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        bounding_box(&self.points)
    }

    /// Seeded subset of `n` distinct points (all points when `n >= len`).
    pub fn subsample(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }
}

pub fn bounding_box(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
}

/// Isotropic scale and translation, `x_norm = scale * (x + translation)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub scale: f64,
    pub translation: [f64; 3],
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, translation: [0.0; 3] }
    }

    pub fn new(scale: f64, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { scale, translation: translation.into() })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p + Vec3::from(self.translation)) * self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p / self.scale - Vec3::from(self.translation)
    }

    /// Transforms positions; normals are unchanged by an isotropic map.
    pub fn apply_cloud(&self, cloud: &OrientedPointCloud) -> OrientedPointCloud {
        OrientedPointCloud {
            points: cloud.points.iter().map(|p| self.apply(p)).collect(),
            normals: cloud.normals.clone(),
        }
    }

    pub fn invert_cloud(&self, cloud: &OrientedPointCloud) -> OrientedPointCloud {
        OrientedPointCloud {
            points: cloud.points.iter().map(|p| self.invert(p)).collect(),
            normals: cloud.normals.clone(),
        }
    }

    pub fn invert_mesh(&self, mesh: &TriangleMesh) -> TriangleMesh {
        TriangleMesh {
            vertices: mesh.vertices.iter().map(|p| self.invert(p)).collect(),
            faces: mesh.faces.clone(),
        }
    }
}

/// Transform that maps the cloud's bounding box, centred, into `[-margin, margin]^3`.
pub fn fit_unit_cube(points: &[Vec3], margin: f64) -> Result<NormalizationTransform> {
    if !(margin > 0.0 && margin <= 1.0) {
        return Err(Error::InvalidInput(format!("margin must lie in (0, 1], got {margin}")));
    }
    let (lo, hi) = bounding_box(points).ok_or_else(|| Error::InvalidInput("empty point cloud".into()))?;
    let half = (hi - lo) * 0.5;
    let extent = half.max();
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::Degenerate("point cloud has zero extent".into()));
    }
    let center = (lo + hi) * 0.5;
    NormalizationTransform::new(margin / extent, -center)
}

pub fn normalize_to_unit_cube(
    cloud: &OrientedPointCloud,
    margin: f64,
) -> Result<(OrientedPointCloud, NormalizationTransform)> {
    let transform = fit_unit_cube(&cloud.points, margin)?;
    Ok((transform.apply_cloud(cloud), transform))
}

/// Half-space `dot(normal, x) <= offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlaneRepr", into = "PlaneRepr")]
pub struct Plane {
    normal: [f64; 3],
    offset: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneRepr {
    normal: [f64; 3],
    offset: f64,
}

impl TryFrom<PlaneRepr> for Plane {
    type Error = Error;

    fn try_from(r: PlaneRepr) -> Result<Self> {
        Plane::new(Vec3::from(r.normal), r.offset)
    }
}

impl From<Plane> for PlaneRepr {
    fn from(p: Plane) -> Self {
        PlaneRepr { normal: p.normal, offset: p.offset }
    }
}

impl Plane {
    pub fn new(normal: Vec3, offset: f64) -> Result<Self> {
        if (normal.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "plane normal must be unit length, got norm {}",
                normal.norm()
            )));
        }
        Ok(Self { normal: normal.into(), offset })
    }

    /// Axis-aligned plane keeping `x[axis] <= value` (or `>= value` when `keep_above`).
    pub fn axis(axis: usize, value: f64, keep_above: bool) -> Self {
        let mut normal = [0.0; 3];
        let sign = if keep_above { -1.0 } else { 1.0 };
        normal[axis] = sign;
        Self { normal, offset: sign * value }
    }

    pub fn normal(&self) -> Vec3 {
        Vec3::from(self.normal)
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn keeps(&self, p: &Vec3) -> bool {
        self.normal().dot(p) <= self.offset
    }
}

pub fn crop_by_planes(cloud: &OrientedPointCloud, planes: &[Plane]) -> OrientedPointCloud {
    cloud.filter(|_, p| planes.iter().all(|plane| plane.keeps(p)))
}

/// Removes every point strictly closer than `radius` to a seeded, uniformly
/// chosen member point. Returns the surviving cloud and the hole centre.
pub fn crop_sphere_hole(
    cloud: &OrientedPointCloud,
    radius: f64,
    seed: u64,
) -> Result<(OrientedPointCloud, Vec3)> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("empty point cloud".into()));
    }
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::InvalidInput(format!("hole radius must be >= 0, got {radius}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = cloud.points[rng.random_range(0..cloud.len())];
    let kept = cloud.filter(|_, p| (p - center).norm() >= radius);
    if kept.is_empty() {
        return Err(Error::InvalidInput(format!(
            "hole of radius {radius} removes every point"
        )));
    }
    Ok((kept, center))
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every coordinate; normals pass through.
pub fn add_gaussian_noise(cloud: &OrientedPointCloud, sigma: f64, seed: u64) -> Result<OrientedPointCloud> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let dx = normal.sample(&mut rng);
            let dy = normal.sample(&mut rng);
            let dz = normal.sample(&mut rng);
            p + Vec3::new(dx, dy, dz)
        })
        .collect();
    Ok(OrientedPointCloud { points, normals: cloud.normals.clone() })
}

/// Distance from each point to its `k`-th nearest other point.
pub fn local_sigmas(cloud: &OrientedPointCloud, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k >= cloud.len() {
        return Err(Error::InvalidInput(format!(
            "neighbour rank k={k} needs 1 <= k < point count ({})",
            cloud.len()
        )));
    }
    let tree = KdTree::new(&cloud.points);
    Ok(tree.kth_neighbor_distances(k))
}

/// Triangle mesh with validated indices and no zero-area faces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    /// Validates indices and drops zero-area faces.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i as usize >= n)) {
            return Err(Error::InvalidInput(format!(
                "face {f:?} references a vertex beyond {n}"
            )));
        }
        let faces = faces
            .into_iter()
            .filter(|f| triangle_area(&vertices[f[0] as usize], &vertices[f[1] as usize], &vertices[f[2] as usize]) > 0.0)
            .collect();
        Ok(Self { vertices, faces })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn corners(&self, face: usize) -> [Vec3; 3] {
        let f = self.faces[face];
        [
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        ]
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.corners(face);
        triangle_area(&a, &b, &c)
    }

    /// Unit normal following the counter-clockwise winding.
    pub fn face_normal(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.corners(face);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn face_centroid(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.corners(face);
        (a + b + c) / 3.0
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        bounding_box(&self.vertices)
    }

    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Number of faces incident to each undirected edge.
    pub fn edge_face_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::with_capacity(self.faces.len() * 3 / 2);
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge borders exactly two faces. An empty mesh is not closed.
    pub fn is_closed(&self) -> bool {
        !self.faces.is_empty() && self.edge_face_counts().values().all(|&c| c == 2)
    }

    /// Number of edge-connected face components.
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<u32> = (0..self.vertices.len() as u32).collect();
        fn find(parent: &mut [u32], mut x: u32) -> u32 {
            while parent[x as usize] != x {
                parent[x as usize] = parent[parent[x as usize] as usize];
                x = parent[x as usize];
            }
            x
        }
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2])] {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb) as usize] = ra.min(rb);
                }
            }
        }
        let mut roots: Vec<u32> = self
            .faces
            .iter()
            .map(|f| find(&mut parent, f[0]))
            .collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    /// Removes vertices not referenced by any face.
    pub fn compact(&self) -> TriangleMesh {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let faces = self
            .faces
            .iter()
            .map(|f| {
                f.map(|i| {
                    if remap[i as usize] == u32::MAX {
                        remap[i as usize] = vertices.len() as u32;
                        vertices.push(self.vertices[i as usize]);
                    }
                    remap[i as usize]
                })
            })
            .collect();
        TriangleMesh { vertices, faces }
    }
}

pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Exact point-to-mesh distance by exhaustive search over faces.
pub fn point_mesh_distance(p: &Vec3, mesh: &TriangleMesh) -> f64 {
    (0..mesh.faces.len())
        .map(|f| {
            let [a, b, c] = mesh.corners(f);
            (p - closest_point_on_triangle(p, &a, &b, &c)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Area-weighted barycentric sampling; every point carries its face normal.
pub fn sample_mesh_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<OrientedPointCloud> {
    if mesh.is_empty() {
        return Err(Error::InvalidInput("cannot sample an empty mesh".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be >= 1".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let face = cumulative.partition_point(|&c| c <= u).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.corners(face);
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        points.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
        normals.push(mesh.face_normal(face));
    }
    Ok(OrientedPointCloud { points, normals: Some(normals) })
}

//! Chamfer distance, F-score and normal consistency between point sets, and
//! plane-cropped comparison of two meshes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{crop_by_planes, sample_mesh_surface, OrientedPointCloud, Plane, TriangleMesh};
use crate::spatial::KdTree;
use crate::{Error, Result, Vec3};

pub const DEFAULT_TAU_MM: f64 = 2.5;
pub const DEFAULT_EVAL_SAMPLES: usize = 100_000;

fn nonempty(points: &[Vec3], what: &str) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidInput(format!("{what} point set is empty")));
    }
    Ok(())
}

/// Nearest neighbour in `to` of every point of `from`: (index, distance).
pub fn nearest_neighbours(from: &[Vec3], to: &[Vec3]) -> Vec<(usize, f64)> {
    KdTree::new(to).nearest_all(from).into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

/// `0.5 * (mean_a min_b |a - b| + mean_b min_a |a - b|)`.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    nonempty(a, "first")?;
    nonempty(b, "second")?;
    let ab = nearest_neighbours(a, b);
    let ba = nearest_neighbours(b, a);
    Ok(0.5 * (mean(ab.iter().map(|x| x.1), a.len()) + mean(ba.iter().map(|x| x.1), b.len())))
}

fn f_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn percent_within(dists: &[(usize, f64)], tau: f64) -> f64 {
    100.0 * dists.iter().filter(|x| x.1 <= tau).count() as f64 / dists.len() as f64
}

/// Harmonic mean of precision (predicted points within `tau` of the ground
/// truth) and recall (ground-truth points within `tau` of the prediction), in percent.
pub fn fscore(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<f64> {
    nonempty(pred, "predicted")?;
    nonempty(gt, "ground-truth")?;
    if !(tau > 0.0) {
        return Err(Error::InvalidInput("F-score threshold must be positive".into()));
    }
    let precision = percent_within(&nearest_neighbours(pred, gt), tau);
    let recall = percent_within(&nearest_neighbours(gt, pred), tau);
    Ok(f_from(precision, recall))
}

fn normals_of<'a>(c: &'a OrientedPointCloud, what: &str) -> Result<&'a [Vec3]> {
    nonempty(c.points(), what)?;
    c.normals()
        .ok_or_else(|| Error::InvalidInput(format!("{what} cloud has no normals")))
}

fn abs_cos_mean(from: &[Vec3], to: &[Vec3], nn: &[(usize, f64)]) -> f64 {
    mean(nn.iter().zip(from).map(|(&(j, _), n)| n.dot(&to[j]).abs()), from.len())
}

/// Symmetric mean absolute cosine between each normal and the normal of its
/// nearest neighbour in the other cloud, in percent.
pub fn normal_consistency(a: &OrientedPointCloud, b: &OrientedPointCloud) -> Result<f64> {
    let na = normals_of(a, "first")?;
    let nb = normals_of(b, "second")?;
    let ab = nearest_neighbours(a.points(), b.points());
    let ba = nearest_neighbours(b.points(), a.points());
    Ok(100.0 * 0.5 * (abs_cos_mean(na, nb, &ab) + abs_cos_mean(nb, na, &ba)))
}

/// All three metrics from one pair of nearest-neighbour passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    pub chamfer: f64,
    pub fscore: f64,
    pub normal_consistency: f64,
}

pub fn compare_clouds(pred: &OrientedPointCloud, gt: &OrientedPointCloud, tau: f64) -> Result<CloudMetrics> {
    let np = normals_of(pred, "predicted")?;
    let ng = normals_of(gt, "ground-truth")?;
    if !(tau > 0.0) {
        return Err(Error::InvalidInput("F-score threshold must be positive".into()));
    }
    let pg = nearest_neighbours(pred.points(), gt.points());
    let gp = nearest_neighbours(gt.points(), pred.points());
    let cd = 0.5 * (mean(pg.iter().map(|x| x.1), pg.len()) + mean(gp.iter().map(|x| x.1), gp.len()));
    Ok(CloudMetrics {
        chamfer: cd,
        fscore: f_from(percent_within(&pg, tau), percent_within(&gp, tau)),
        normal_consistency: 100.0 * 0.5 * (abs_cos_mean(np, ng, &pg) + abs_cos_mean(ng, np, &gp)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub chamfer_mm: f64,
    pub fscore_percent: f64,
    pub normal_consistency_percent: f64,
    pub tau_mm: f64,
    pub sample_count: usize,
    /// Points left after cropping, predicted and ground truth.
    pub cropped_counts: [usize; 2],
    pub planes: Vec<Plane>,
    pub seed: u64,
}

impl EvaluationReport {
    pub const CSV_HEADER: &'static str =
        "chamfer_mm,fscore_percent,normal_consistency_percent,tau_mm,sample_count,pred_points,gt_points,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.chamfer_mm,
            self.fscore_percent,
            self.normal_consistency_percent,
            self.tau_mm,
            self.sample_count,
            self.cropped_counts[0],
            self.cropped_counts[1],
            self.seed
        )
    }
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Chamfer distance   {:.4} mm", self.chamfer_mm)?;
        writeln!(f, "F-score @{} mm    {:.2} %", self.tau_mm, self.fscore_percent)?;
        writeln!(f, "Normal consistency {:.2} %", self.normal_consistency_percent)?;
        write!(
            f,
            "({} samples per mesh, {} crop planes, {} / {} points kept, seed {})",
            self.sample_count,
            self.planes.len(),
            self.cropped_counts[0],
            self.cropped_counts[1],
            self.seed
        )
    }
}

/// Samples both meshes, crops the samples by `planes` and compares them.
///
/// Distances include the sampling floor: two independent samplings of one
/// surface with density `rho` sit about `1 / (2 sqrt(rho))` apart.
pub fn evaluate_reconstruction(
    pred: &TriangleMesh,
    gt: &TriangleMesh,
    planes: &[Plane],
    n_samples: usize,
    tau: f64,
    seed: u64,
) -> Result<EvaluationReport> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("predicted mesh is empty".into()));
    }
    if gt.is_empty() {
        return Err(Error::InvalidInput("ground-truth mesh is empty".into()));
    }
    // one seed for both meshes: identical meshes give identical samples
    let pred_cloud = crop_by_planes(&sample_mesh_surface(pred, n_samples, seed)?, planes);
    let gt_cloud = crop_by_planes(&sample_mesh_surface(gt, n_samples, seed)?, planes);
    if pred_cloud.is_empty() {
        return Err(Error::InvalidInput("crop planes leave no points of the predicted mesh".into()));
    }
    if gt_cloud.is_empty() {
        return Err(Error::InvalidInput("crop planes leave no points of the ground-truth mesh".into()));
    }
    let m = compare_clouds(&pred_cloud, &gt_cloud, tau)?;
    Ok(EvaluationReport {
        chamfer_mm: m.chamfer,
        fscore_percent: m.fscore,
        normal_consistency_percent: m.normal_consistency,
        tau_mm: tau,
        sample_count: n_samples,
        cropped_counts: [pred_cloud.len(), gt_cloud.len()],
        planes: planes.to_vec(),
        seed,
    })
}

//! One JSON document holding every knob of an experiment, plus the small
//! library compositions the command-line tool and the tests share.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fitting::{fit_latent, FitConfig, FitResult};
use crate::geometry::{NormalizationTransform, OrientedPointCloud, Plane, TriangleMesh};
use crate::meshing::{extract_surface, GridSpec};
use crate::metrics::{DEFAULT_EVAL_SAMPLES, DEFAULT_TAU_MM};
use crate::sampling::Covariance;
use crate::sdfnet::{LatentSdfModel, NetworkConfig};
use crate::synthetic::{default_test_planes, DatasetSettings};
use crate::training::{dataset_transform, TrainingConfig};
use crate::{Error, Result};

/// Written next to every checkpoint: maps millimetres into the network's cube.
pub const TRANSFORM_FILE: &str = "normalization.json";
/// Name of the provenance copy each command leaves in its output.
pub const CONFIG_ECHO_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    pub settings: DatasetSettings,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { count: 16, seed: 0, settings: DatasetSettings::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Crop half-spaces in millimetres; empty compares whole surfaces.
    pub planes: Vec<Plane>,
    pub samples: usize,
    pub tau_mm: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { planes: default_test_planes(), samples: DEFAULT_EVAL_SAMPLES, tau_mm: DEFAULT_TAU_MM, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub covariance: Covariance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub fit: FitConfig,
    /// Extraction grid in the network's normalized coordinates.
    pub grid: GridSpec,
    pub data: DataConfig,
    pub evaluation: EvalConfig,
    pub sampling: SampleConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        self.fit.validate()?;
        self.grid.validate()?;
        self.data.settings.ranges.validate()?;
        if self.evaluation.samples == 0 || !(self.evaluation.tau_mm > 0.0) {
            return Err(Error::InvalidInput("evaluation needs samples >= 1 and tau_mm > 0".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the provenance copy into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_ECHO_FILE), self.to_json())?;
        Ok(())
    }
}

pub fn save_transform(dir: &Path, t: &NormalizationTransform) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TRANSFORM_FILE), serde_json::to_string_pretty(t)?)?;
    Ok(())
}

pub fn load_transform(dir: &Path) -> Result<NormalizationTransform> {
    let t: NormalizationTransform = serde_json::from_str(&fs::read_to_string(dir.join(TRANSFORM_FILE))?)?;
    NormalizationTransform::new(t.scale, t.translation.into())
}

/// Shared transform for a millimetre dataset and the normalized copies.
pub fn normalize_dataset(
    dataset: &[(String, OrientedPointCloud)],
) -> Result<(NormalizationTransform, Vec<(String, OrientedPointCloud)>)> {
    let clouds: Vec<OrientedPointCloud> = dataset.iter().map(|(_, c)| c.clone()).collect();
    let t = dataset_transform(&clouds)?;
    Ok((t, dataset.iter().map(|(id, c)| (id.clone(), t.apply_cloud(c))).collect()))
}

/// Fits a latent to a millimetre cloud with the training normalization.
pub fn fit_in_mm(
    model: &LatentSdfModel,
    transform: &NormalizationTransform,
    cloud_mm: &OrientedPointCloud,
    config: &FitConfig,
) -> Result<FitResult> {
    fit_latent(model, &transform.apply_cloud(cloud_mm), config)
}

/// Extracts the surface of `z` and maps it back to millimetres.
pub fn mesh_in_mm(
    model: &LatentSdfModel,
    transform: &NormalizationTransform,
    z: &[f64],
    grid: &GridSpec,
) -> Result<TriangleMesh> {
    extract_surface(model, z, grid, transform)
}

/// The network config of the desk-scale experiments: 4 x 128, 32-dimensional latents.
pub fn reduced_network() -> NetworkConfig {
    NetworkConfig::with_size(4, 128, 32)
}

//! Run configuration: one TOML document collecting every hyperparameter of
//! a training/inference/evaluation run, plus dataset resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::TrainConfig;
use crate::dataio::DatasetIndex;
use crate::error::{Result, TexanomError};
use crate::metrics::Connectivity;
use crate::pipeline::InferenceConfig;

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Dataset root in the MVTec layout: `train/good`, `test/<class>`,
    /// `ground_truth/<class>`.
    pub root: PathBuf,
    /// Defective images held out for threshold calibration, as paths
    /// relative to the root (e.g. `test/broken/000.png`). Their ground-truth
    /// masks are found under `ground_truth/<class>/<stem>_mask.png`.
    pub validation: Vec<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: PathBuf::new(),
            validation: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureConfig {
    pub encoder_channels: Vec<usize>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            encoder_channels: vec![32, 64, 128, 256, 512],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub connectivity: Connectivity,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            connectivity: Connectivity::Eight,
        }
    }
}

/// The complete, serializable description of a run. A run re-executed from
/// its persisted config and seed is bit-reproducible in single-threaded
/// mode (and in parallel mode too, since reductions are ordered).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub evaluation: EvaluationConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TexanomError::io(path.display().to_string(), e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| TexanomError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text =
            toml::to_string_pretty(self).map_err(|e| TexanomError::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| TexanomError::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.root.as_os_str().is_empty() {
            return Err(TexanomError::Config(
                "dataset.root: no dataset root configured".into(),
            ));
        }
        if !self.dataset.root.is_dir() {
            return Err(TexanomError::Config(format!(
                "dataset.root: {} is not a directory",
                self.dataset.root.display()
            )));
        }
        if self.architecture.encoder_channels.is_empty() {
            return Err(TexanomError::Config(
                "architecture.encoder_channels: must not be empty".into(),
            ));
        }
        self.inference.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialized form; ties artifacts
    /// (calibration records, evaluation reports) back to the exact settings.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    /// Ground-truth mask path for a test image, per the MVTec convention.
    pub fn mask_path_for(&self, rel_image: &Path) -> Result<PathBuf> {
        let mut parts = rel_image.components();
        let first = parts.next().map(|c| c.as_os_str().to_string_lossy().to_string());
        if first.as_deref() != Some("test") {
            return Err(TexanomError::Config(format!(
                "dataset.validation: {} is not under test/",
                rel_image.display()
            )));
        }
        let class = parts
            .next()
            .map(|c| c.as_os_str().to_string_lossy().to_string())
            .ok_or_else(|| {
                TexanomError::Config(format!(
                    "dataset.validation: {} has no defect class directory",
                    rel_image.display()
                ))
            })?;
        let stem = rel_image
            .file_stem()
            .ok_or_else(|| {
                TexanomError::Config(format!(
                    "dataset.validation: {} has no file name",
                    rel_image.display()
                ))
            })?
            .to_string_lossy();
        Ok(self
            .dataset
            .root
            .join("ground_truth")
            .join(class)
            .join(format!("{stem}_mask.png")))
    }

    /// Scans the dataset root and splits it into the run's index:
    /// `train/good` for training, the configured validation images (removed
    /// from the test set), and everything else under `test/`.
    pub fn resolve_dataset(&self) -> Result<DatasetIndex> {
        let root = &self.dataset.root;
        let train_normal = list_images(&root.join("train").join("good"))?;
        if train_normal.is_empty() {
            return Err(TexanomError::Config(format!(
                "dataset.root: no training images under {}",
                root.join("train").join("good").display()
            )));
        }
        let mut validation_defective = Vec::new();
        for rel in &self.dataset.validation {
            let img = root.join(rel);
            let mask = self.mask_path_for(rel)?;
            validation_defective.push((img, mask));
        }
        let mut test = Vec::new();
        let test_dir = root.join("test");
        if test_dir.is_dir() {
            let mut classes: Vec<PathBuf> = std::fs::read_dir(&test_dir)
                .map_err(|e| TexanomError::io(test_dir.display().to_string(), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            classes.sort();
            for class_dir in classes {
                let class = class_dir
                    .file_name()
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_default();
                for img in list_images(&class_dir)? {
                    if validation_defective.iter().any(|(v, _)| *v == img) {
                        continue;
                    }
                    let mask = if class == "good" {
                        None
                    } else {
                        let rel = Path::new("test").join(&class).join(img.file_name().unwrap());
                        Some(self.mask_path_for(&rel)?)
                    };
                    test.push((img, mask));
                }
            }
        }
        let index = DatasetIndex {
            train_normal,
            validation_defective,
            test,
        };
        index.validate()?;
        Ok(index)
    }
}

/// Sorted list of the image files directly inside a directory.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| TexanomError::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_lowercase().as_str()))
                    .unwrap_or(false)
        })
        .collect();
    out.sort();
    Ok(out)
}

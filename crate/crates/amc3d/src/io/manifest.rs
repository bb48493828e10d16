//! Dataset manifests: JSON records binding volume files, labels, optional
//! masks, and split tags.

use std::path::{Path, PathBuf};

use crate::io::volume::{self, MaskVolume, Volume};
use crate::tensor::Scalar;
use crate::{AmcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    MultiLabel,
    MultiClass,
}

/// Inclusive voxel bounding box (H, W, S order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// One volume file per view, relative to the manifest.
    pub views: Vec<PathBuf>,
    /// {0,1}^K for multi-label; one-hot for multi-class.
    pub labels: Vec<u8>,
    pub mask: Option<PathBuf>,
    pub split: Split,
    #[serde(default)]
    pub lesion_boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub label_mode: LabelMode,
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(AmcError::Contract("manifest needs ≥1 class".into()));
        }
        let k = self.num_classes();
        for r in &self.records {
            if r.labels.len() != k {
                return Err(AmcError::Contract(format!(
                    "record {}: {} labels for {k} classes",
                    r.id,
                    r.labels.len()
                )));
            }
            if r.labels.iter().any(|&l| l > 1) {
                return Err(AmcError::Contract(format!("record {}: labels must be 0/1", r.id)));
            }
            if self.label_mode == LabelMode::MultiClass && r.labels.iter().map(|&l| l as usize).sum::<usize>() != 1
            {
                return Err(AmcError::Contract(format!(
                    "record {}: multi-class labels must be one-hot",
                    r.id
                )));
            }
            if r.views.is_empty() {
                return Err(AmcError::Contract(format!("record {}: no views", r.id)));
            }
            for p in r.views.iter().chain(r.mask.iter()) {
                if !base.join(p).is_file() {
                    return Err(AmcError::Contract(format!(
                        "record {}: path {} not resolvable",
                        r.id,
                        base.join(p).display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.validate(base)?;
        Ok(m)
    }
}

/// A record with its volumes (and mask) in memory.
#[derive(Debug, Clone)]
pub struct LoadedRecord<T: Scalar> {
    pub id: String,
    pub views: Vec<Volume<T>>,
    pub labels: Vec<u8>,
    pub mask: Option<MaskVolume>,
    pub lesion_boxes: Vec<BoundingBox>,
}

/// Load every record of one split.
pub fn load_split<T: Scalar>(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    split: Split,
) -> Result<Vec<LoadedRecord<T>>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            Ok(LoadedRecord {
                id: r.id.clone(),
                views: r
                    .views
                    .iter()
                    .map(|p| volume::read_volume(&base.join(p)))
                    .collect::<Result<_>>()?,
                labels: r.labels.clone(),
                mask: r.mask.as_ref().map(|p| volume::read_mask(&base.join(p))).transpose()?,
                lesion_boxes: r.lesion_boxes.clone(),
            })
        })
        .collect()
}

//! On-disk shard directories: the interchange format between the feature
//! extractor and this engine.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<sample_id>/image.png        RGB reference at extraction resolution
//! <dir>/<sample_id>/attention.npy    f32 [N, h]
//! <dir>/<sample_id>/features.npy     f32 [h, N, d]
//! <dir>/<sample_id>/gt_mask.png      optional, grayscale, >= 128 is foreground
//! <dir>/<sample_id>/gt_boxes.json    optional, [[xmin, ymin, xmax, ymax], ...] inclusive
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, BBox, RgbImage};
use crate::mask::{BinaryMask, Resolution};
use crate::npy::{self, Tensor};
use crate::tensors::{AttentionStack, FeatureStack, PatchGrid};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_NAME: &str = "bgseg-shards";
pub const FORMAT_VERSION: u32 = 1;

pub const IMAGE_FILE: &str = "image.png";
pub const ATTENTION_FILE: &str = "attention.npy";
pub const FEATURES_FILE: &str = "features.npy";
pub const GT_MASK_FILE: &str = "gt_mask.png";
pub const GT_BOXES_FILE: &str = "gt_boxes.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub sample_id: String,
    pub image: RgbImage,
    pub attention: AttentionStack,
    pub features: FeatureStack,
    pub gt_mask: Option<BinaryMask>,
    pub gt_boxes: Option<Vec<BBox>>,
}

impl Shard {
    pub fn grid(&self) -> PatchGrid {
        self.attention.grid
    }

    /// Checks every cross-field invariant.
    pub fn validate(&self) -> Result<()> {
        let sample = || self.sample_id.clone();
        validate_id(&self.sample_id)?;
        let grid = self.attention.grid;
        if self.features.grid != grid {
            return Err(Error::GridMismatch {
                sample: sample(),
                detail: format!(
                    "attention grid {}x{} (N={}) vs features grid {}x{} (N={})",
                    grid.rows,
                    grid.cols,
                    grid.n_patches(),
                    self.features.grid.rows,
                    self.features.grid.cols,
                    self.features.grid.n_patches()
                ),
            });
        }
        if self.attention.heads != self.features.heads {
            return Err(Error::GridMismatch {
                sample: sample(),
                detail: format!(
                    "attention has {} heads, features have {}",
                    self.attention.heads, self.features.heads
                ),
            });
        }
        if self.image.width != grid.width_px || self.image.height != grid.height_px {
            return Err(Error::Validation {
                sample: sample(),
                detail: format!(
                    "image is {}x{}, grid expects {}x{}",
                    self.image.width, self.image.height, grid.width_px, grid.height_px
                ),
            });
        }
        if let Some(gt) = &self.gt_mask {
            if gt.rows != self.image.height || gt.cols != self.image.width {
                return Err(Error::Validation {
                    sample: sample(),
                    detail: format!(
                        "gt mask is {}x{}, image is {}x{}",
                        gt.cols, gt.rows, self.image.width, self.image.height
                    ),
                });
            }
        }
        if let Some(boxes) = &self.gt_boxes {
            if let Some(b) = boxes.iter().find(|b| !b.fits(self.image.width, self.image.height)) {
                return Err(Error::Validation {
                    sample: sample(),
                    detail: format!("gt box {b:?} outside image"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub heads: usize,
    pub dim_per_head: usize,
    #[serde(default)]
    pub has_gt_mask: bool,
    #[serde(default)]
    pub has_gt_boxes: bool,
    #[serde(default = "default_feature_source")]
    pub feature_source: String,
}

fn default_feature_source() -> String {
    "keys".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub samples: Vec<ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            samples: Vec::new(),
        }
    }
}

impl Manifest {
    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.samples.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|e| e.id.clone()).collect()
    }
}

fn validate_id(id: &str) -> Result<()> {
    let bad = id.is_empty()
        || id == "."
        || id == ".."
        || id.contains(['/', '\\', '\0'])
        || id.starts_with(char::is_whitespace)
        || id.ends_with(char::is_whitespace);
    if bad {
        Err(Error::Validation {
            sample: id.to_string(),
            detail: "sample id is not a usable file name".into(),
        })
    } else {
        Ok(())
    }
}

pub fn sample_dir(dir: &Path, id: &str) -> PathBuf {
    dir.join(id)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Json(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(Error::Json(format!(
            "{}: unsupported manifest {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    Ok(manifest)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let tmp = dir.join(format!(".{MANIFEST}.tmp"));
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json(e.to_string()))?;
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// Load and validate one sample.
pub fn load_shard(dir: &Path, sample_id: &str) -> Result<Shard> {
    let manifest = read_manifest(dir)?;
    let entry = manifest
        .entry(sample_id)
        .ok_or_else(|| Error::UnknownSample(sample_id.to_string()))?;
    load_entry(dir, entry)
}

/// Load every sample listed in the manifest, in manifest order.
pub fn load_all(dir: &Path) -> Result<Vec<Shard>> {
    let manifest = read_manifest(dir)?;
    manifest.samples.iter().map(|e| load_entry(dir, e)).collect()
}

pub fn load_entry(dir: &Path, entry: &ManifestEntry) -> Result<Shard> {
    validate_id(&entry.id)?;
    let sdir = sample_dir(dir, &entry.id);
    let mismatch = |detail: String| Error::GridMismatch {
        sample: entry.id.clone(),
        detail,
    };

    let grid = PatchGrid::new(entry.width, entry.height, entry.patch_size)?;
    if grid.rows != entry.rows || grid.cols != entry.cols {
        return Err(mismatch(format!(
            "manifest declares {}x{} patches but {}x{} / {} gives {}x{}",
            entry.rows, entry.cols, entry.width, entry.height, entry.patch_size, grid.rows, grid.cols
        )));
    }

    let image = image::read_rgb_png(&sdir.join(IMAGE_FILE))?;

    let att_path = sdir.join(ATTENTION_FILE);
    let att: Tensor<f32> = npy::read_tensor(&att_path)?;
    if att.shape.len() != 2 {
        return Err(mismatch(format!("attention has rank {}, expected 2", att.shape.len())));
    }
    let feat_path = sdir.join(FEATURES_FILE);
    let feat: Tensor<f32> = npy::read_tensor(&feat_path)?;
    if feat.shape.len() != 3 {
        return Err(mismatch(format!("features have rank {}, expected 3", feat.shape.len())));
    }
    let (att_n, att_h) = (att.shape[0], att.shape[1]);
    let (feat_h, feat_n, feat_d) = (feat.shape[0], feat.shape[1], feat.shape[2]);
    if att_n != feat_n {
        return Err(mismatch(format!(
            "features declare N={feat_n} but attention declares N={att_n}"
        )));
    }
    if att_n != grid.n_patches() {
        return Err(mismatch(format!(
            "tensors declare N={att_n} but the grid has {} patches",
            grid.n_patches()
        )));
    }
    if att_h != entry.heads || feat_h != entry.heads || feat_d != entry.dim_per_head {
        return Err(mismatch(format!(
            "manifest declares h={}, d={} but tensors have attention h={att_h}, features h={feat_h}, d={feat_d}",
            entry.heads, entry.dim_per_head
        )));
    }

    let validation = |e: Error| Error::Validation {
        sample: entry.id.clone(),
        detail: e.to_string(),
    };
    let attention = AttentionStack::new(grid, att_h, att.data).map_err(validation)?;
    let features = FeatureStack::new(grid, feat_h, feat_d, feat.data).map_err(validation)?;

    let gt_mask = if entry.has_gt_mask {
        Some(image::read_mask_png(&sdir.join(GT_MASK_FILE), Resolution::Pixel)?)
    } else {
        None
    };
    let gt_boxes = if entry.has_gt_boxes {
        Some(image::read_boxes(&sdir.join(GT_BOXES_FILE))?)
    } else {
        None
    };

    let shard = Shard {
        sample_id: entry.id.clone(),
        image,
        attention,
        features,
        gt_mask,
        gt_boxes,
    };
    shard.validate()?;
    Ok(shard)
}

/// Write a sample and upsert its manifest entry. Re-writing an existing id
/// replaces the previous files.
pub fn write_shard(dir: &Path, shard: &Shard) -> Result<()> {
    shard.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = match read_manifest(dir) {
        Ok(m) => m,
        Err(Error::MissingFile(_)) => Manifest::default(),
        Err(e) => return Err(e),
    };

    let sdir = sample_dir(dir, &shard.sample_id);
    fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
    let grid = shard.grid();

    image::write_rgb_png(&sdir.join(IMAGE_FILE), &shard.image, &[])?;
    npy::write_tensor(
        &sdir.join(ATTENTION_FILE),
        &Tensor {
            shape: vec![grid.n_patches(), shard.attention.heads],
            data: shard.attention.values.clone(),
        },
    )?;
    npy::write_tensor(
        &sdir.join(FEATURES_FILE),
        &Tensor {
            shape: vec![
                shard.features.heads,
                grid.n_patches(),
                shard.features.dim_per_head,
            ],
            data: shard.features.values.clone(),
        },
    )?;

    let gt_path = sdir.join(GT_MASK_FILE);
    match &shard.gt_mask {
        Some(m) => image::write_mask_png(&gt_path, m, &[])?,
        None => remove_if_exists(&gt_path)?,
    }
    let boxes_path = sdir.join(GT_BOXES_FILE);
    match &shard.gt_boxes {
        Some(b) => image::write_boxes(&boxes_path, b)?,
        None => remove_if_exists(&boxes_path)?,
    }

    let entry = ManifestEntry {
        id: shard.sample_id.clone(),
        width: grid.width_px,
        height: grid.height_px,
        patch_size: grid.patch_size,
        rows: grid.rows,
        cols: grid.cols,
        heads: shard.attention.heads,
        dim_per_head: shard.features.dim_per_head,
        has_gt_mask: shard.gt_mask.is_some(),
        has_gt_boxes: shard.gt_boxes.is_some(),
        feature_source: default_feature_source(),
    };
    match manifest.samples.iter_mut().find(|e| e.id == entry.id) {
        Some(existing) => *existing = entry,
        None => manifest.samples.push(entry),
    }
    write_manifest(dir, &manifest)
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

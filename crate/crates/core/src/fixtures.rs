//! Synthetic planted datasets: one patch-aligned rectangular object per image,
//! with attention and features drawn from two well-separated clusters.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, BBox, RgbImage};
use crate::mask::{BinaryMask, Resolution};
use crate::retrieval::LabelMap;
use crate::shard::{self, Shard};
use crate::tensors::{AttentionStack, FeatureStack, PatchGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub heads: usize,
    pub dim_per_head: usize,
    /// Expected norm of the per-head feature noise.
    pub feature_noise: f64,
    /// Uniform per-channel pixel noise amplitude.
    pub pixel_noise: u8,
    /// Object classes; empty for class-agnostic data.
    pub classes: Vec<u8>,
}

impl PlantedSpec {
    pub fn small() -> Self {
        Self {
            width: 32,
            height: 32,
            patch_size: 8,
            heads: 6,
            dim_per_head: 8,
            feature_noise: 0.3,
            pixel_noise: 8,
            classes: Vec::new(),
        }
    }

    /// 14x14 patches, the size used by the end-to-end checks.
    pub fn medium() -> Self {
        Self {
            width: 112,
            height: 112,
            dim_per_head: 64,
            ..Self::small()
        }
    }

    /// 28x28 patches of a 224x224 image.
    pub fn full() -> Self {
        Self {
            width: 224,
            height: 224,
            dim_per_head: 64,
            ..Self::small()
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.width, self.height, self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        if grid.rows < 3 || grid.cols < 3 {
            return Err(Error::Config("planted data needs at least 3x3 patches".into()));
        }
        if self.heads < 2 {
            return Err(Error::Config("planted data needs at least 2 heads".into()));
        }
        let dirs = 1 + self.classes.len().max(1);
        if self.dim_per_head < dirs {
            return Err(Error::Config(format!(
                "dim_per_head {} cannot hold {dirs} orthogonal directions",
                self.dim_per_head
            )));
        }
        if self.classes.iter().any(|&c| c == 0 || c == 255) {
            return Err(Error::Config("planted classes must lie in 1..=254".into()));
        }
        Ok(())
    }
}

/// A generated sample and its planted truth.
#[derive(Debug, Clone)]
pub struct PlantedSample {
    pub shard: Shard,
    /// Patch-level foreground.
    pub truth: BinaryMask,
    pub class: Option<u8>,
    pub labels: Option<LabelMap>,
}

pub fn sample_id(index: usize) -> String {
    format!("planted-{index:04}")
}

/// Orthonormal directions per head: index 0 is background, `1 + k` is class `k`.
fn directions(spec: &PlantedSpec, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let count = 1 + spec.classes.len().max(1);
    (0..spec.heads)
        .map(|_| {
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
            while basis.len() < count {
                let mut v: Vec<f64> = (0..spec.dim_per_head).map(|_| normal.sample(&mut rng)).collect();
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    v.iter_mut().for_each(|x| *x /= n);
                    basis.push(v);
                }
            }
            basis
        })
        .collect()
}

fn rand_color<R: Rng>(rng: &mut R, lo: u8, hi: u8) -> [u8; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

/// Deterministic in `(spec, seed, index)`.
pub fn planted_shard(spec: &PlantedSpec, seed: u64, index: usize) -> Result<PlantedSample> {
    spec.validate()?;
    let grid = spec.grid()?;
    let dirs = directions(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);

    let (rows, cols) = (grid.rows, grid.cols);
    let span = |n: usize, rng: &mut ChaCha8Rng| {
        let lo = (n * 3).div_ceil(10).max(1);
        let hi = (n * 6 / 10).max(lo);
        let len = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=n - len);
        (start, len)
    };
    let (r0, rh) = span(rows, &mut rng);
    let (c0, cw) = span(cols, &mut rng);
    let truth_values: Vec<bool> = (0..rows * cols)
        .map(|p| {
            let (r, c) = (p / cols, p % cols);
            (r0..r0 + rh).contains(&r) && (c0..c0 + cw).contains(&c)
        })
        .collect();
    let truth = BinaryMask::new(Resolution::Patch, rows, cols, truth_values)?;
    let class_pos = if spec.classes.is_empty() {
        None
    } else {
        Some(rng.random_range(0..spec.classes.len()))
    };
    let class = class_pos.map(|k| spec.classes[k]);

    // image
    let bg = rand_color(&mut rng, 20, 90);
    let fg = rand_color(&mut rng, 160, 235);
    let p = spec.patch_size;
    let mut img = RgbImage::filled(spec.width, spec.height, [0, 0, 0]);
    let noise = spec.pixel_noise as i32;
    for y in 0..spec.height {
        for x in 0..spec.width {
            let base = if truth.values[(y / p) * cols + x / p] { fg } else { bg };
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let d = if noise > 0 { rng.random_range(-noise..=noise) } else { 0 };
                px[ch] = (base[ch] as i32 + d).clamp(0, 255) as u8;
            }
            img.set_pixel(x, y, px);
        }
    }

    // attention: object heads favour the foreground, the last head is noise
    let n = grid.n_patches();
    let h = spec.heads;
    let mut att = vec![0f32; n * h];
    for patch in 0..n {
        let on = truth.values[patch];
        for head in 0..h {
            att[patch * h + head] = if head + 1 == h {
                rng.random_range(0.0..1.0)
            } else if on {
                rng.random_range(0.6..1.0)
            } else {
                rng.random_range(0.0..0.1)
            };
        }
    }

    // features
    let d = spec.dim_per_head;
    let sigma = spec.feature_noise / (d as f64).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("feature noise: {e}")))?;
    let fg_dir = 1 + class_pos.unwrap_or(0);
    let mut feat = vec![0f32; h * n * d];
    for head in 0..h {
        for patch in 0..n {
            let dir = &dirs[head][if truth.values[patch] { fg_dir } else { 0 }];
            let row = &mut feat[(head * n + patch) * d..(head * n + patch + 1) * d];
            for (o, &u) in row.iter_mut().zip(dir) {
                *o = (u + normal.sample(&mut rng)) as f32;
            }
        }
    }

    let gt_mask = BinaryMask::new(
        Resolution::Pixel,
        spec.height,
        spec.width,
        (0..spec.width * spec.height)
            .map(|i| truth.values[(i / spec.width / p) * cols + (i % spec.width) / p])
            .collect(),
    )?;
    let bbox = BBox::new(c0 * p, r0 * p, (c0 + cw) * p - 1, (r0 + rh) * p - 1)?;
    let labels = class.map(|c| LabelMap {
        width: spec.width,
        height: spec.height,
        labels: gt_mask.values.iter().map(|&v| if v { c } else { 0 }).collect(),
    });

    let shard = Shard {
        sample_id: sample_id(index),
        image: img,
        attention: AttentionStack::new(grid, h, att)?,
        features: FeatureStack::new(grid, h, d, feat)?,
        gt_mask: Some(gt_mask),
        gt_boxes: Some(vec![bbox]),
    };
    shard.validate()?;
    Ok(PlantedSample {
        shard,
        truth,
        class,
        labels,
    })
}

/// Write `count` planted shards to `dir`; with classes, label maps go to
/// `labels_dir/<sample_id>.png`.
pub fn write_planted(
    dir: &Path,
    spec: &PlantedSpec,
    seed: u64,
    count: usize,
    labels_dir: Option<&Path>,
) -> Result<Vec<PlantedSample>> {
    if let Some(ld) = labels_dir {
        std::fs::create_dir_all(ld).map_err(|e| Error::io(ld, e))?;
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let s = planted_shard(spec, seed, i)?;
        shard::write_shard(dir, &s.shard)?;
        if let (Some(ld), Some(l)) = (labels_dir, &s.labels) {
            image::write_label_png(&ld.join(format!("{}.png", s.shard.sample_id)), l.width, l.height, &l.labels)?;
        }
        out.push(s);
    }
    Ok(out)
}

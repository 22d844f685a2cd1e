//! Patch grids and the per-image tensors produced by the feature extractor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of an image split into square, non-overlapping patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub width_px: usize,
    pub height_px: usize,
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(width_px: usize, height_px: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidGrid("patch size must be positive".into()));
        }
        if width_px == 0 || height_px == 0 {
            return Err(Error::InvalidGrid(format!(
                "image {width_px}x{height_px} is empty"
            )));
        }
        if width_px % patch_size != 0 || height_px % patch_size != 0 {
            return Err(Error::InvalidGrid(format!(
                "image {width_px}x{height_px} is not divisible by patch size {patch_size}"
            )));
        }
        Ok(Self {
            width_px,
            height_px,
            patch_size,
            rows: height_px / patch_size,
            cols: width_px / patch_size,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_pixels(&self) -> usize {
        self.width_px * self.height_px
    }

    /// Row-major patch index of the patch containing pixel `(x, y)`.
    pub fn patch_of_pixel(&self, x: usize, y: usize) -> usize {
        (y / self.patch_size) * self.cols + x / self.patch_size
    }
}

/// CLS-to-patch attention of the last layer, `N x h`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub grid: PatchGrid,
    pub heads: usize,
    pub values: Vec<f32>,
}

impl AttentionStack {
    pub fn new(grid: PatchGrid, heads: usize, values: Vec<f32>) -> Result<Self> {
        if heads == 0 {
            return Err(Error::DimensionMismatch("attention needs at least one head".into()));
        }
        if values.len() != grid.n_patches() * heads {
            return Err(Error::DimensionMismatch(format!(
                "attention has {} values, expected {} x {}",
                values.len(),
                grid.n_patches(),
                heads
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "attention".into(),
                index,
            });
        }
        if let Some(index) = values.iter().position(|v| *v < 0.0) {
            return Err(Error::DimensionMismatch(format!(
                "attention value {} at index {index} is negative",
                values[index]
            )));
        }
        Ok(Self {
            grid,
            heads,
            values,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.grid.n_patches()
    }

    #[inline]
    pub fn get(&self, patch: usize, head: usize) -> f32 {
        self.values[patch * self.heads + head]
    }

    pub fn row(&self, patch: usize) -> &[f32] {
        &self.values[patch * self.heads..(patch + 1) * self.heads]
    }
}

/// Per-head patch features, stored head-major as `h x N x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub grid: PatchGrid,
    pub heads: usize,
    pub dim_per_head: usize,
    pub values: Vec<f32>,
}

impl FeatureStack {
    pub fn new(grid: PatchGrid, heads: usize, dim_per_head: usize, values: Vec<f32>) -> Result<Self> {
        if heads == 0 || dim_per_head == 0 {
            return Err(Error::DimensionMismatch(format!(
                "feature stack needs positive heads and dim, got {heads} and {dim_per_head}"
            )));
        }
        let expected = heads * grid.n_patches() * dim_per_head;
        if values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "feature stack has {} values, expected {heads} x {} x {dim_per_head}",
                values.len(),
                grid.n_patches()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "features".into(),
                index,
            });
        }
        Ok(Self {
            grid,
            heads,
            dim_per_head,
            values,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.grid.n_patches()
    }

    pub fn total_dim(&self) -> usize {
        self.heads * self.dim_per_head
    }

    /// Feature of `patch` in `head`, length `d`.
    pub fn head_row(&self, head: usize, patch: usize) -> &[f32] {
        let start = (head * self.grid.n_patches() + patch) * self.dim_per_head;
        &self.values[start..start + self.dim_per_head]
    }

    /// Plain concatenation over heads: an `N x (h*d)` row-major matrix.
    pub fn concatenated(&self) -> Vec<f32> {
        let n = self.n_patches();
        let d = self.dim_per_head;
        let mut out = Vec::with_capacity(n * self.total_dim());
        for p in 0..n {
            for h in 0..self.heads {
                out.extend_from_slice(self.head_row(h, p));
            }
        }
        debug_assert_eq!(out.len(), n * self.heads * d);
        out
    }
}

/// Head-weighted concatenated features, `N x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedFeatures {
    pub grid: PatchGrid,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl WeightedFeatures {
    pub fn row(&self, patch: usize) -> &[f64] {
        &self.values[patch * self.dim..(patch + 1) * self.dim]
    }
}

//! Soft and binary masks at patch or pixel resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Patch,
    Pixel,
}

/// Mask with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub resolution: Resolution,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Mask with values in `{0, 1}`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub resolution: Resolution,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<bool>,
}

impl SoftMask {
    pub fn new(resolution: Resolution, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "soft mask {rows}x{cols} given {} values",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::DimensionMismatch(format!(
                "soft mask value {} at index {index} outside [0, 1]",
                values[index]
            )));
        }
        Ok(Self {
            resolution,
            rows,
            cols,
            values,
        })
    }

    pub fn filled(resolution: Resolution, rows: usize, cols: usize, value: f64) -> Self {
        Self {
            resolution,
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `value > threshold` becomes foreground.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            resolution: self.resolution,
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| v > threshold).collect(),
        }
    }

    /// Quantize to `[0, 255]` by rounding `value * 255`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

impl BinaryMask {
    pub fn new(resolution: Resolution, rows: usize, cols: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "binary mask {rows}x{cols} given {} values",
                values.len()
            )));
        }
        Ok(Self {
            resolution,
            rows,
            cols,
            values,
        })
    }

    pub fn filled(resolution: Resolution, rows: usize, cols: usize, value: bool) -> Self {
        Self {
            resolution,
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.values.len() as f64
        }
    }

    /// All-foreground or all-background.
    pub fn is_degenerate(&self) -> bool {
        let c = self.count();
        c == 0 || c == self.values.len()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.cols + x]
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            resolution: self.resolution,
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| !v).collect(),
        }
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            resolution: self.resolution,
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_mask_range_is_enforced() {
        assert!(SoftMask::new(Resolution::Patch, 1, 2, vec![0.0, 1.0]).is_ok());
        assert!(SoftMask::new(Resolution::Patch, 1, 2, vec![0.0, 1.5]).is_err());
        assert!(SoftMask::new(Resolution::Patch, 1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(SoftMask::new(Resolution::Patch, 1, 3, vec![0.0]).is_err());
    }

    #[test]
    fn binarize_is_strict() {
        let m = SoftMask::new(Resolution::Pixel, 1, 3, vec![0.4, 0.5, 0.6]).unwrap();
        assert_eq!(m.binarize(0.5).values, vec![false, false, true]);
    }

    #[test]
    fn u8_quantization_endpoints() {
        let m = SoftMask::new(Resolution::Pixel, 1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(m.to_u8(), vec![0, 128, 255]);
    }
}

//! Localization and saliency metrics: CorLoc, pixel accuracy, mask IoU and
//! dataset-wide maximal F-beta.
//!
//! Accumulators only hold integer counts and per-image integer pairs; ratios
//! are formed in `finalize`, summing per-image terms in sample-id order, so a
//! parallel map-reduce gives exactly the sequential result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BBox;
use crate::mask::BinaryMask;

pub const DEFAULT_BETA_SQ: f64 = 0.3;
/// Thresholds `0..=254`; a pixel is foreground when its value is `> t`.
pub const N_THRESHOLDS: usize = 255;

fn check_same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs {}x{}",
            a.cols, a.rows, b.cols, b.rows
        )))
    }
}

pub fn pixel_accuracy(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same_shape(pred, gt)?;
    if pred.is_empty() {
        return Err(Error::Empty("mask".into()));
    }
    let agree = pred.values.iter().zip(&gt.values).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / pred.len() as f64)
}

/// Intersection and union counts.
pub fn overlap_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<(u64, u64)> {
    check_same_shape(pred, gt)?;
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&a, &b) in pred.values.iter().zip(&gt.values) {
        inter += (a && b) as u64;
        union += (a || b) as u64;
    }
    Ok((inter, union))
}

/// `|pred & gt| / |pred | gt|`; two empty masks agree perfectly (1.0).
pub fn mask_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (inter, union) = overlap_counts(pred, gt)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn f_beta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorlocReport {
    pub corloc: f64,
    pub correct: usize,
    pub evaluated: usize,
    /// Images without ground-truth boxes; not counted.
    pub excluded_no_gt: usize,
    /// Images whose best IoU is exactly 0.5 (counted as misses).
    pub ties_at_half: usize,
}

/// An image is correct when any predicted box has IoU > 0.5 with any
/// ground-truth box.
pub fn corloc(preds: &[Vec<BBox>], gts: &[Vec<BBox>]) -> Result<CorlocReport> {
    if preds.len() != gts.len() {
        return Err(Error::Pairing(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut report = CorlocReport {
        corloc: 0.0,
        correct: 0,
        evaluated: 0,
        excluded_no_gt: 0,
        ties_at_half: 0,
    };
    for (p, g) in preds.iter().zip(gts) {
        if g.is_empty() {
            report.excluded_no_gt += 1;
            continue;
        }
        report.evaluated += 1;
        let best = p
            .iter()
            .flat_map(|pb| g.iter().map(move |gb| pb.iou(gb)))
            .fold(0.0f64, f64::max);
        if best > 0.5 {
            report.correct += 1;
        } else if best == 0.5 {
            report.ties_at_half += 1;
        }
    }
    report.corloc = if report.evaluated == 0 {
        0.0
    } else {
        report.correct as f64 / report.evaluated as f64
    };
    Ok(report)
}

/// Per-image integer statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageStats {
    pub sample_id: String,
    pub intersection: u64,
    pub union: u64,
    pub agree: u64,
    pub pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyAccumulator {
    pub images: Vec<ImageStats>,
    /// Histogram of soft prediction values over ground-truth foreground pixels.
    pub hist_fg: [u64; 256],
    /// Same over ground-truth background pixels.
    pub hist_bg: [u64; 256],
}

impl Default for SaliencyAccumulator {
    fn default() -> Self {
        Self {
            images: Vec::new(),
            hist_fg: [0; 256],
            hist_bg: [0; 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScores {
    pub acc: f64,
    pub iou: f64,
    pub max_f_beta: f64,
    pub beta_sq: f64,
    pub optimal_threshold: u8,
    pub precision_at_optimum: f64,
    pub recall_at_optimum: f64,
    pub images: usize,
    /// Images where prediction and ground truth are both empty (IoU 1.0).
    pub both_empty: usize,
}

impl SaliencyAccumulator {
    /// Add one image. `soft` holds prediction values in `[0, 255]`.
    pub fn add(
        &mut self,
        sample_id: &str,
        pred: &BinaryMask,
        soft: &[u8],
        gt: &BinaryMask,
    ) -> Result<()> {
        self.merge(Self::single(sample_id, pred, soft, gt)?);
        Ok(())
    }

    pub fn single(sample_id: &str, pred: &BinaryMask, soft: &[u8], gt: &BinaryMask) -> Result<Self> {
        check_same_shape(pred, gt)?;
        if soft.len() != gt.len() {
            return Err(Error::DimensionMismatch(format!(
                "soft prediction has {} values, ground truth {}",
                soft.len(),
                gt.len()
            )));
        }
        let (intersection, union) = overlap_counts(pred, gt)?;
        let agree = pred.values.iter().zip(&gt.values).filter(|(a, b)| a == b).count() as u64;
        let mut acc = Self::default();
        for (&v, &g) in soft.iter().zip(&gt.values) {
            if g {
                acc.hist_fg[v as usize] += 1;
            } else {
                acc.hist_bg[v as usize] += 1;
            }
        }
        acc.images.push(ImageStats {
            sample_id: sample_id.to_string(),
            intersection,
            union,
            agree,
            pixels: gt.len() as u64,
        });
        Ok(acc)
    }

    pub fn merge(&mut self, other: Self) {
        self.images.extend(other.images);
        for i in 0..256 {
            self.hist_fg[i] += other.hist_fg[i];
            self.hist_bg[i] += other.hist_bg[i];
        }
    }

    pub fn finalize(&self, beta_sq: f64) -> Result<SaliencyScores> {
        if self.images.is_empty() {
            return Err(Error::Empty("no images to evaluate".into()));
        }
        let mut images: Vec<&ImageStats> = self.images.iter().collect();
        images.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let n = images.len() as f64;
        let mut iou_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut both_empty = 0;
        for s in &images {
            if s.union == 0 {
                both_empty += 1;
                iou_sum += 1.0;
            } else {
                iou_sum += s.intersection as f64 / s.union as f64;
            }
            acc_sum += s.agree as f64 / s.pixels as f64;
        }
        let (max_f_beta, optimal_threshold, precision_at_optimum, recall_at_optimum) =
            max_f_beta_from_histograms(&self.hist_fg, &self.hist_bg, beta_sq)?;
        Ok(SaliencyScores {
            acc: acc_sum / n,
            iou: iou_sum / n,
            max_f_beta,
            beta_sq,
            optimal_threshold,
            precision_at_optimum,
            recall_at_optimum,
            images: images.len(),
            both_empty,
        })
    }
}

/// Sweep thresholds `0..=254` with dataset-level TP/FP/FN; returns
/// `(score, threshold, precision, recall)` with the lowest threshold on ties.
pub fn max_f_beta_from_histograms(
    hist_fg: &[u64; 256],
    hist_bg: &[u64; 256],
    beta_sq: f64,
) -> Result<(f64, u8, f64, f64)> {
    let total_fg: u64 = hist_fg.iter().sum();
    if total_fg == 0 {
        return Err(Error::Empty(
            "ground truth has no foreground pixels; recall is undefined".into(),
        ));
    }
    // above[v] = count of values > v
    let mut tp = total_fg;
    let mut fp: u64 = hist_bg.iter().sum();
    let mut best = (f64::NEG_INFINITY, 0u8, 0.0, 0.0);
    for t in 0..N_THRESHOLDS {
        tp -= hist_fg[t];
        fp -= hist_bg[t];
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / total_fg as f64;
        let f = f_beta(precision, recall, beta_sq);
        if f > best.0 {
            best = (f, t as u8, precision, recall);
        }
    }
    Ok(best)
}

/// Dataset-wide maximal F-beta over soft predictions in `[0, 255]`.
pub fn max_f_beta(soft_preds: &[Vec<u8>], gts: &[BinaryMask], beta_sq: f64) -> Result<(f64, u8)> {
    if soft_preds.len() != gts.len() {
        return Err(Error::Pairing(format!(
            "{} predictions for {} ground truths",
            soft_preds.len(),
            gts.len()
        )));
    }
    let mut hist_fg = [0u64; 256];
    let mut hist_bg = [0u64; 256];
    for (p, g) in soft_preds.iter().zip(gts) {
        if p.len() != g.len() {
            return Err(Error::DimensionMismatch(format!(
                "soft prediction has {} values, ground truth {}",
                p.len(),
                g.len()
            )));
        }
        for (&v, &fg) in p.iter().zip(&g.values) {
            if fg {
                hist_fg[v as usize] += 1;
            } else {
                hist_bg[v as usize] += 1;
            }
        }
    }
    let (score, t, _, _) = max_f_beta_from_histograms(&hist_fg, &hist_bg, beta_sq)?;
    Ok((score, t))
}

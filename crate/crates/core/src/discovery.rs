//! Background discovery from CLS attention and per-head features.
//!
//! The pipeline is: mean attention threshold, per-head sparsity counts and
//! log-ratio weights, a background seed at the weighted attention minimum,
//! and a background mask of patches whose weighted concatenated feature is
//! cosine-similar to the seed. The coarse foreground is its complement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Resolution};
use crate::shard::Shard;
use crate::tensors::{AttentionStack, FeatureStack, WeightedFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoveryConfig {
    /// Cosine similarity threshold for background membership.
    pub tau: f64,
    /// Weight heads by attention sparsity; plain sum when off.
    pub reweight: bool,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            reweight: true,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSparsity {
    pub threshold_mu: f64,
    /// Supra-threshold counts per head, clamped to at least 1.
    pub counts: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed_index: usize,
    pub weighted_attention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub background: BinaryMask,
    pub foreground: BinaryMask,
    pub seed: SeedResult,
    pub sparsity: HeadSparsity,
    /// Weights actually applied (all ones when reweighting is off).
    pub weights_used: Vec<f64>,
}

/// Mean of all `N * h` attention values.
pub fn mean_attention_threshold(att: &AttentionStack) -> Result<f64> {
    if att.values.is_empty() {
        return Err(Error::Empty("attention stack".into()));
    }
    let sum: f64 = att.values.iter().map(|&v| v as f64).sum();
    Ok(sum / att.values.len() as f64)
}

pub fn compute_sparsity(att: &AttentionStack, mu: f64) -> Result<HeadSparsity> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Config(format!("sparsity threshold must be positive, got {mu}")));
    }
    if let Some(index) = att.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "attention".into(),
            index,
        });
    }
    let mut counts = vec![0usize; att.heads];
    for row in att.values.chunks_exact(att.heads) {
        for (c, &v) in counts.iter_mut().zip(row) {
            if v as f64 >= mu {
                *c += 1;
            }
        }
    }
    for c in &mut counts {
        *c = (*c).max(1);
    }
    let weights = sparsity_weights(&counts);
    Ok(HeadSparsity {
        threshold_mu: mu,
        counts,
        weights,
    })
}

/// `w_i = ln(sum_j S_j / S_i)`; counts must be positive.
pub fn sparsity_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| (total as f64 / c as f64).ln())
        .collect()
}

/// Patch minimizing the weighted attention sum; lowest index wins ties.
pub fn mine_seed(att: &AttentionStack, weights: &[f64]) -> Result<SeedResult> {
    if weights.len() != att.heads {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} heads",
            weights.len(),
            att.heads
        )));
    }
    if let Some(index) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite {
            what: "head weights".into(),
            index,
        });
    }
    if att.n_patches() == 0 {
        return Err(Error::Empty("attention stack".into()));
    }
    let weighted_attention: Vec<f64> = att
        .values
        .chunks_exact(att.heads)
        .map(|row| row.iter().zip(weights).map(|(&a, &w)| w * a as f64).sum())
        .collect();
    let mut seed_index = 0;
    for (p, &v) in weighted_attention.iter().enumerate().skip(1) {
        if v < weighted_attention[seed_index] {
            seed_index = p;
        }
    }
    Ok(SeedResult {
        seed_index,
        weighted_attention,
    })
}

/// `[w_1 F_1, ..., w_h F_h]` row by row.
pub fn weighted_features(feat: &FeatureStack, weights: &[f64]) -> Result<WeightedFeatures> {
    if weights.len() != feat.heads {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} feature heads",
            weights.len(),
            feat.heads
        )));
    }
    let n = feat.n_patches();
    let dim = feat.total_dim();
    let mut values = Vec::with_capacity(n * dim);
    for p in 0..n {
        for (h, &w) in weights.iter().enumerate() {
            values.extend(feat.head_row(h, p).iter().map(|&v| w * v as f64));
        }
    }
    Ok(WeightedFeatures {
        grid: feat.grid,
        dim,
        values,
    })
}

/// Patches whose cosine similarity to the seed is at least `tau`.
pub fn background_mask(wf: &WeightedFeatures, seed: usize, tau: f64) -> Result<BinaryMask> {
    let n = wf.grid.n_patches();
    if seed >= n {
        return Err(Error::DimensionMismatch(format!("seed {seed} outside {n} patches")));
    }
    let seed_row = wf.row(seed);
    let seed_norm = seed_row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if seed_norm == 0.0 {
        return Err(Error::DegenerateSeed { seed });
    }
    let values = (0..n)
        .map(|p| {
            if p == seed {
                return true;
            }
            let row = wf.row(p);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            // zero-norm rows: similarity 0
            let sim = if norm == 0.0 {
                0.0
            } else {
                row.iter().zip(seed_row).map(|(a, b)| a * b).sum::<f64>() / (norm * seed_norm)
            };
            sim >= tau
        })
        .collect();
    BinaryMask::new(Resolution::Patch, wf.grid.rows, wf.grid.cols, values)
}

pub fn foreground_mask(bg: &BinaryMask) -> BinaryMask {
    bg.complement()
}

pub fn discover(shard: &Shard, cfg: &DiscoveryConfig) -> Result<Discovery> {
    discover_parts(&shard.attention, &shard.features, cfg)
}

pub fn discover_parts(
    att: &AttentionStack,
    feat: &FeatureStack,
    cfg: &DiscoveryConfig,
) -> Result<Discovery> {
    cfg.validate()?;
    let mu = mean_attention_threshold(att)?;
    let sparsity = compute_sparsity(att, mu)?;
    let weights_used = if cfg.reweight {
        sparsity.weights.clone()
    } else {
        vec![1.0; att.heads]
    };
    let seed = mine_seed(att, &weights_used)?;
    let wf = weighted_features(feat, &weights_used)?;
    let background = background_mask(&wf, seed.seed_index, cfg.tau)?;
    let foreground = foreground_mask(&background);
    if foreground.count() == 0 {
        log::debug!("discovery produced an empty foreground");
    }
    Ok(Discovery {
        background,
        foreground,
        seed,
        sparsity,
        weights_used,
    })
}

//! Single linear unit (a 1x1 convolution over patch features) followed by a
//! sigmoid, and its binary cross-entropy objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discovery::{self, DiscoveryConfig};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Resolution, SoftMask};
use crate::shard::Shard;
use crate::tensors::PatchGrid;

/// Which per-patch vector the head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInput {
    /// Plain concatenation of the per-head features, `h * d` wide.
    #[default]
    Concat,
    /// Concatenation scaled by the sparsity weights of the image.
    Weighted,
}

/// `N x dim` patch features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub grid: PatchGrid,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(grid: PatchGrid, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != grid.n_patches() * dim {
            return Err(Error::DimensionMismatch(format!(
                "feature matrix {} x {dim} given {} values",
                grid.n_patches(),
                values.len()
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn rows(&self) -> usize {
        self.grid.n_patches()
    }

    #[inline]
    pub fn row(&self, p: usize) -> &[f32] {
        &self.values[p * self.dim..(p + 1) * self.dim]
    }
}

pub fn head_features(shard: &Shard, input: HeadInput, disc: &DiscoveryConfig) -> Result<FeatureMatrix> {
    let feat = &shard.features;
    let values = match input {
        HeadInput::Concat => feat.concatenated(),
        HeadInput::Weighted => {
            let mu = discovery::mean_attention_threshold(&shard.attention)?;
            let weights = if disc.reweight {
                discovery::compute_sparsity(&shard.attention, mu)?.weights
            } else {
                vec![1.0; feat.heads]
            };
            discovery::weighted_features(feat, &weights)?
                .values
                .into_iter()
                .map(|v| v as f32)
                .collect()
        }
    };
    FeatureMatrix::new(feat.grid, feat.total_dim(), values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegHeadParams {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl SegHeadParams {
    pub fn zeros(in_dim: usize) -> Self {
        Self {
            weight: vec![0.0; in_dim],
            bias: 0.0,
        }
    }

    /// Weights uniform in `+-1/sqrt(in_dim)`, bias zero.
    pub fn init<R: Rng>(in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self {
            weight: (0..in_dim).map(|_| rng.random_range(-bound..=bound)).collect(),
            bias: 0.0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.len()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + 1
    }

    /// Weights followed by the bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weight.clone();
        v.push(self.bias);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let (bias, weight) = flat
            .split_last()
            .ok_or_else(|| Error::Empty("head parameter vector".into()))?;
        Ok(Self {
            weight: weight.to_vec(),
            bias: *bias,
        })
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Head output for one image; logits are kept for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub mask: SoftMask,
}

pub fn logits(params: &SegHeadParams, features: &FeatureMatrix) -> Result<Vec<f64>> {
    if features.dim != params.in_dim() {
        return Err(Error::DimensionMismatch(format!(
            "head expects {} input features, got {}",
            params.in_dim(),
            features.dim
        )));
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        return Ok(unsafe { logits_avx2(params, features) });
    }
    Ok(logits_generic(params, features))
}

/// Same arithmetic as [`logits_generic`] in the same order, compiled for
/// wider vectors; results are bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn logits_avx2(params: &SegHeadParams, features: &FeatureMatrix) -> Vec<f64> {
    logits_generic(params, features)
}

#[inline(always)]
fn logits_generic(params: &SegHeadParams, features: &FeatureMatrix) -> Vec<f64> {
    // plain loops: closures would not inherit the caller's target features
    let mut out = Vec::with_capacity(features.rows());
    for row in features.values.chunks_exact(features.dim) {
        out.push(params.bias + dot(&params.weight, row));
    }
    out
}

/// Dot product with eight independent partial sums so it vectorizes.
#[inline(always)]
fn dot(w: &[f64], x: &[f32]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let (wc, xc) = (w.chunks_exact(LANES), x.chunks_exact(LANES));
    let mut tail = 0.0;
    for (&a, &b) in wc.remainder().iter().zip(xc.remainder()) {
        tail += a * b as f64;
    }
    for (a, b) in wc.zip(xc) {
        for k in 0..LANES {
            acc[k] += a[k] * b[k] as f64;
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub fn forward(params: &SegHeadParams, features: &FeatureMatrix) -> Result<Prediction> {
    let logits = logits(params, features)?;
    let mask = SoftMask {
        resolution: Resolution::Patch,
        rows: features.grid.rows,
        cols: features.grid.cols,
        values: logits.iter().map(|&z| sigmoid(z)).collect(),
    };
    Ok(Prediction { logits, mask })
}

/// Mean binary cross-entropy over patches and its gradient with respect to
/// the logits, `(sigmoid(z) - t) / N`.
pub fn bce_loss(pred: &Prediction, target: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    let n = pred.logits.len();
    if target.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "prediction has {n} patches, target has {}",
            target.len()
        )));
    }
    if n == 0 {
        return Err(Error::Empty("prediction".into()));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let grad = pred
        .logits
        .iter()
        .zip(&target.values)
        .map(|(&z, &t)| {
            let t = if t { 1.0 } else { 0.0 };
            loss += softplus(z) - t * z;
            (sigmoid(z) - t) * inv
        })
        .collect();
    Ok((loss * inv, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub foreground: Option<f64>,
    pub self_term: Option<f64>,
    pub grad_logits: Vec<f64>,
}

/// `L^f + lambda * L^s` over whichever targets are present. `None` means the
/// item contributes nothing.
pub fn total_loss(
    pred: &Prediction,
    target_f: Option<&BinaryMask>,
    target_s: Option<&BinaryMask>,
    lambda: f64,
) -> Result<Option<LossTerms>> {
    if target_f.is_none() && target_s.is_none() {
        return Ok(None);
    }
    let n = pred.logits.len();
    let mut total = 0.0;
    let mut grad = vec![0.0; n];
    let foreground = match target_f {
        Some(t) => {
            let (l, g) = bce_loss(pred, t)?;
            total += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            Some(l)
        }
        None => None,
    };
    let self_term = match target_s {
        Some(t) => {
            let (l, g) = bce_loss(pred, t)?;
            total += lambda * l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += lambda * b);
            Some(l)
        }
        None => None,
    };
    Ok(Some(LossTerms {
        total,
        foreground,
        self_term,
        grad_logits: grad,
    }))
}

/// Chain rule from logit gradients to `(weight, bias)` gradients.
pub fn param_grads(features: &FeatureMatrix, grad_logits: &[f64]) -> (Vec<f64>, f64) {
    let mut gw = vec![0.0; features.dim];
    let mut gb = 0.0;
    for (row, &g) in features.values.chunks_exact(features.dim).zip(grad_logits) {
        if g == 0.0 {
            continue;
        }
        gb += g;
        for (acc, &x) in gw.iter_mut().zip(row) {
            *acc += g * x as f64;
        }
    }
    (gw, gb)
}

/// Loss and parameter gradient of one image.
pub fn loss_and_grad(
    params: &SegHeadParams,
    features: &FeatureMatrix,
    target_f: Option<&BinaryMask>,
    target_s: Option<&BinaryMask>,
    lambda: f64,
) -> Result<Option<(LossTerms, Vec<f64>, f64)>> {
    let pred = forward(params, features)?;
    Ok(total_loss(&pred, target_f, target_s, lambda)?.map(|terms| {
        let (gw, gb) = param_grads(features, &terms.grad_logits);
        (terms, gw, gb)
    }))
}

//! Self-training of the segmentation head from refined coarse masks, with a
//! switch to self-binarized targets and a gated self-refinement term.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilateral::{Refiner, SolverParams};
use crate::discovery::{self, DiscoveryConfig};
use crate::error::{Error, Result};
use crate::head::{self, FeatureMatrix, HeadInput, Prediction, SegHeadParams};
use crate::image;
use crate::localize::{downsample, upsample};
use crate::mask::{BinaryMask, Resolution, SoftMask};
use crate::metrics::mask_iou;
use crate::npy::{self, Tensor};
use crate::optim::{adamw_step, step_lr, AdamWConfig, OptimizerState};
use crate::shard::{self, Shard};
use crate::tensors::PatchGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_mix: f64,
    /// First iteration whose foreground target is the binarized prediction.
    pub m_switch: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub iou_gate: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub head_input: HeadInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_mix: 1.5,
            m_switch: 100,
            iters: 500,
            batch: 50,
            lr: 5e-2,
            lr_decay: 0.95,
            lr_decay_every: 50,
            iou_gate: 0.5,
            adamw: AdamWConfig::default(),
            seed: 0,
            head_input: HeadInput::Concat,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mix >= 0.0) || !self.lambda_mix.is_finite() {
            return Err(Error::Config("lambda_mix must be a finite non-negative number".into()));
        }
        if self.iters > 0 && self.m_switch >= self.iters {
            return Err(Error::Config(format!(
                "m_switch ({}) must be smaller than iters ({})",
                self.m_switch, self.iters
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be at least 1".into()));
        }
        if !(self.iou_gate > 0.0 && self.iou_gate < 1.0) {
            return Err(Error::Config("iou_gate must lie in (0, 1)".into()));
        }
        self.adamw.validate()
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        step_lr(self.lr, self.lr_decay, self.lr_decay_every, iter)
    }
}

/// Where coarse foreground masks come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoarseSource {
    /// Run background discovery on each shard.
    Internal,
    /// Patch-resolution PNGs named `<sample_id>.png` in a directory.
    External(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSource {
    RefinedCoarse,
    SelfBinarized,
}

/// Targets for one image at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub target_f: Option<BinaryMask>,
    pub source: TargetSource,
    pub target_s: Option<BinaryMask>,
    pub gate_iou: f64,
}

impl Targets {
    pub fn gate_passed(&self) -> bool {
        self.target_s.is_some()
    }
}

/// Per-image state that does not change during training.
#[derive(Debug, Clone)]
pub struct TargetBuilder {
    grid: PatchGrid,
    refiner: Refiner,
    refined_coarse: Option<BinaryMask>,
}

/// Bilateral refinement of a patch-level soft mask, returned at patch level.
pub fn refine_patch_mask(refiner: &Refiner, grid: &PatchGrid, mask: &SoftMask) -> Result<BinaryMask> {
    let up = upsample(mask, grid)?;
    let refined = refiner.refine(&up)?;
    downsample(&refined, grid)
}

impl TargetBuilder {
    pub fn new(shard: &Shard, coarse_fg: &BinaryMask, bs: &SolverParams) -> Result<Self> {
        let grid = shard.grid();
        if coarse_fg.resolution != Resolution::Patch
            || coarse_fg.rows != grid.rows
            || coarse_fg.cols != grid.cols
        {
            return Err(Error::GridMismatch {
                sample: shard.sample_id.clone(),
                detail: format!(
                    "coarse mask is {}x{} but the patch grid is {}x{}",
                    coarse_fg.cols, coarse_fg.rows, grid.cols, grid.rows
                ),
            });
        }
        let refiner = Refiner::new(&shard.image, bs)?;
        let refined = refine_patch_mask(&refiner, &grid, &coarse_fg.to_soft())?;
        let refined_coarse = if refined.is_degenerate() {
            log::debug!(
                "{}: refined coarse mask is degenerate; foreground term skipped before the switch",
                shard.sample_id
            );
            None
        } else {
            Some(refined)
        };
        Ok(Self {
            grid,
            refiner,
            refined_coarse,
        })
    }

    pub fn refined_coarse(&self) -> Option<&BinaryMask> {
        self.refined_coarse.as_ref()
    }

    pub fn targets(&self, pred: &Prediction, iter: usize, cfg: &TrainConfig) -> Result<Targets> {
        let (target_f, source) = if iter < cfg.m_switch {
            (self.refined_coarse.clone(), TargetSource::RefinedCoarse)
        } else {
            (Some(pred.mask.binarize(0.5)), TargetSource::SelfBinarized)
        };
        let binarized = pred.mask.binarize(0.5);
        let refined = refine_patch_mask(&self.refiner, &self.grid, &pred.mask)?;
        let gate_iou = mask_iou(&binarized, &refined)?;
        let target_s = (gate_iou > cfg.iou_gate).then_some(refined);
        Ok(Targets {
            target_f,
            source,
            target_s,
            gate_iou,
        })
    }
}

/// Targets for a single image without cached state.
pub fn make_targets(
    shard: &Shard,
    coarse_fg: &BinaryMask,
    pred: &Prediction,
    iter: usize,
    cfg: &TrainConfig,
    bs: &SolverParams,
) -> Result<Targets> {
    TargetBuilder::new(shard, coarse_fg, bs)?.targets(pred, iter, cfg)
}

/// Patch-level coarse foreground masks for every shard.
pub fn coarse_masks(shards: &[Shard], disc: &DiscoveryConfig, source: &CoarseSource) -> Result<Vec<BinaryMask>> {
    match source {
        CoarseSource::Internal => shards
            .par_iter()
            .map(|s| discovery::discover(s, disc).map(|d| d.foreground))
            .collect(),
        CoarseSource::External(dir) => shards
            .iter()
            .map(|s| {
                let path = dir.join(format!("{}.png", s.sample_id));
                let m = image::read_mask_png(&path, Resolution::Patch)?;
                let g = s.grid();
                if m.rows != g.rows || m.cols != g.cols {
                    return Err(Error::GridMismatch {
                        sample: s.sample_id.clone(),
                        detail: format!(
                            "external coarse mask is {}x{} but the patch grid is {}x{}",
                            m.cols, m.rows, g.cols, g.rows
                        ),
                    });
                }
                Ok(m)
            })
            .collect(),
    }
}

/// One record of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean foreground term over items that had one.
    pub loss_f: Option<f64>,
    /// Mean self-refinement term over items that passed the gate.
    pub loss_s: Option<f64>,
    pub gate_pass_rate: f64,
    pub target_f_source: TargetSource,
    pub batch: usize,
    pub contributing: usize,
    pub skipped_f: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: SegHeadParams,
    pub log: Vec<IterRecord>,
}

/// Per-image training data.
pub struct TrainItem {
    pub sample_id: String,
    pub features: FeatureMatrix,
    pub targets: TargetBuilder,
}

pub fn prepare(
    shards: &[Shard],
    coarse: &[BinaryMask],
    cfg: &TrainConfig,
    disc: &DiscoveryConfig,
    bs: &SolverParams,
) -> Result<Vec<TrainItem>> {
    if shards.len() != coarse.len() {
        return Err(Error::Pairing(format!(
            "{} shards but {} coarse masks",
            shards.len(),
            coarse.len()
        )));
    }
    shards
        .par_iter()
        .zip(coarse)
        .map(|(s, c)| {
            Ok(TrainItem {
                sample_id: s.sample_id.clone(),
                features: head::head_features(s, cfg.head_input, disc)?,
                targets: TargetBuilder::new(s, c, bs)?,
            })
        })
        .collect()
}

struct ItemResult {
    loss: f64,
    loss_f: Option<f64>,
    loss_s: Option<f64>,
    gate_passed: bool,
    grad_w: Vec<f64>,
    grad_b: f64,
}

fn item_step(
    item: &TrainItem,
    params: &SegHeadParams,
    iter: usize,
    cfg: &TrainConfig,
) -> Result<Option<ItemResult>> {
    let pred = head::forward(params, &item.features)?;
    let t = item.targets.targets(&pred, iter, cfg)?;
    let terms = head::total_loss(&pred, t.target_f.as_ref(), t.target_s.as_ref(), cfg.lambda_mix)?;
    Ok(terms.map(|terms| {
        let (grad_w, grad_b) = head::param_grads(&item.features, &terms.grad_logits);
        ItemResult {
            loss: terms.total,
            loss_f: terms.foreground,
            loss_s: terms.self_term,
            gate_passed: t.target_s.is_some(),
            grad_w,
            grad_b,
        }
    }))
}

/// Train on prepared items. The result is independent of the thread count.
pub fn train_items(items: &[TrainItem], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let in_dim = items[0].features.dim;
    if let Some(bad) = items.iter().find(|i| i.features.dim != in_dim) {
        return Err(Error::DimensionMismatch(format!(
            "{} has {} features, expected {in_dim}",
            bad.sample_id, bad.features.dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = SegHeadParams::init(in_dim, &mut rng);
    let mut flat = params.to_flat();
    let mut state = OptimizerState::new(flat.len());
    let mut log = Vec::with_capacity(cfg.iters);
    let batch = cfg.batch.min(items.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    for iter in 0..cfg.iters {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order = (0..items.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }

        let results: Vec<Option<ItemResult>> = picked
            .par_iter()
            .map(|&i| item_step(&items[i], &params, iter, cfg))
            .collect::<Result<_>>()?;

        let mut grad = vec![0.0; flat.len()];
        let mut loss = 0.0;
        let (mut lf_sum, mut lf_n, mut ls_sum, mut ls_n) = (0.0, 0usize, 0.0, 0usize);
        let mut contributing = 0usize;
        let mut gate_passed = 0usize;
        for r in results.iter().flatten() {
            contributing += 1;
            loss += r.loss;
            for (g, v) in grad.iter_mut().zip(&r.grad_w) {
                *g += v;
            }
            grad[in_dim] += r.grad_b;
            if let Some(l) = r.loss_f {
                lf_sum += l;
                lf_n += 1;
            }
            if let Some(l) = r.loss_s {
                ls_sum += l;
                ls_n += 1;
            }
            gate_passed += r.gate_passed as usize;
        }
        if contributing == 0 {
            return Err(Error::Empty(format!(
                "iteration {iter}: no item in the batch has a usable target"
            )));
        }
        let inv = 1.0 / contributing as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        let lr = cfg.lr_at(iter);
        adamw_step(&mut flat, &mut state, &grad, lr, &cfg.adamw)?;
        params = SegHeadParams::from_flat(&flat)?;

        let record = IterRecord {
            iter,
            lr,
            loss: loss * inv,
            loss_f: (lf_n > 0).then(|| lf_sum / lf_n as f64),
            loss_s: (ls_n > 0).then(|| ls_sum / ls_n as f64),
            gate_pass_rate: gate_passed as f64 / picked.len() as f64,
            target_f_source: if iter < cfg.m_switch {
                TargetSource::RefinedCoarse
            } else {
                TargetSource::SelfBinarized
            },
            batch: picked.len(),
            contributing,
            skipped_f: picked.len() - lf_n,
        };
        log::debug!(
            "iter {} lr {:.4e} loss {:.5} gate {:.2}",
            iter,
            lr,
            record.loss,
            record.gate_pass_rate
        );
        log.push(record);
    }
    Ok(TrainOutcome { params, log })
}

pub fn train(
    shards: &[Shard],
    cfg: &TrainConfig,
    disc: &DiscoveryConfig,
    bs: &SolverParams,
    source: &CoarseSource,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    disc.validate()?;
    bs.validate()?;
    let coarse = coarse_masks(shards, disc, source)?;
    let items = prepare(shards, &coarse, cfg, disc, bs)?;
    train_items(&items, cfg)
}

/// Train on every shard listed in a shard directory.
pub fn train_dir(
    dir: &Path,
    cfg: &TrainConfig,
    disc: &DiscoveryConfig,
    bs: &SolverParams,
    source: &CoarseSource,
) -> Result<TrainOutcome> {
    let items = {
        let shards = shard::load_all(dir)?;
        if shards.is_empty() {
            return Err(Error::Empty(format!("no shards in {}", dir.display())));
        }
        cfg.validate()?;
        disc.validate()?;
        bs.validate()?;
        let coarse = coarse_masks(&shards, disc, source)?;
        prepare(&shards, &coarse, cfg, disc, bs)?
    };
    train_items(&items, cfg)
}

pub fn write_log(path: &Path, log: &[IterRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_FORMAT: &str = "bgseg-head";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub in_dim: usize,
    pub head_input: HeadInput,
    pub iterations: usize,
    pub config_hash: String,
}

/// A JSON header line followed by an NPY array of `in_dim + 1` doubles
/// (weights, then bias).
pub fn encode_checkpoint(header: &CheckpointHeader, params: &SegHeadParams) -> Result<Vec<u8>> {
    if header.in_dim != params.in_dim() {
        return Err(Error::DimensionMismatch(format!(
            "header declares {} inputs, params have {}",
            header.in_dim,
            params.in_dim()
        )));
    }
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    let flat = params.to_flat();
    let tensor = Tensor::new(vec![flat.len()], flat)?;
    out.write_all(&npy::encode(&tensor)).expect("writing to a Vec");
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, SegHeadParams)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, 0, "missing checkpoint header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(path, 0, format!("bad checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::format(
            path,
            0,
            format!("unsupported checkpoint {} v{}", header.format, header.version),
        ));
    }
    let tensor: Tensor<f64> = npy::decode(&bytes[nl + 1..], path)?;
    if tensor.shape != [header.in_dim + 1] {
        return Err(Error::format(
            path,
            (nl + 1) as u64,
            format!("parameter array has shape {:?}, expected [{}]", tensor.shape, header.in_dim + 1),
        ));
    }
    Ok((header, SegHeadParams::from_flat(&tensor.data)?))
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, params: &SegHeadParams) -> Result<()> {
    std::fs::write(path, encode_checkpoint(header, params)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, SegHeadParams)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

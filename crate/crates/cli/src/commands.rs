use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use bgseg::discovery;
use bgseg::fixtures::{self, PlantedSpec};
use bgseg::head::{self, HeadInput};
use bgseg::image::{self, BBox};
use bgseg::localize::{self, boxes_from_mask, downsample};
use bgseg::mask::{BinaryMask, Resolution};
use bgseg::metrics::{self, CorlocReport, SaliencyAccumulator, SaliencyScores};
use bgseg::retrieval::{self, LabelMap, RetrievalReport, RetrievalSample};
use bgseg::shard::{self, Manifest};
use bgseg::train::{self, CheckpointHeader, CoarseSource, CHECKPOINT_FORMAT};
use bgseg::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

pub const HASH_KEY: &str = "bgseg-config-hash";

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `dir/<id><suffix>`, creating parents for path-like ids.
fn out_path(dir: &Path, id: &str, suffix: &str) -> Result<PathBuf> {
    let p = dir.join(format!("{id}{suffix}"));
    if let Some(parent) = p.parent() {
        ensure_dir(parent)?;
    }
    Ok(p)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).context("serializing report")?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::Config(format!("{what} {} is not a directory", path.display())).into());
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct DiscoveryRecord<'a> {
    sample_id: &'a str,
    config_hash: &'a str,
    tau: f64,
    seed_index: usize,
    threshold_mu: f64,
    counts: &'a [usize],
    weights: &'a [f64],
    weights_used: &'a [f64],
    foreground_fraction: f64,
}

pub fn discover(cfg: &RunConfig, shards: &Path, out: &Path, overlay: bool) -> Result<()> {
    require_dir(shards, "shard directory")?;
    let manifest = shard::read_manifest(shards)?;
    ensure_dir(out)?;
    let hash = cfg.hash();
    let text = [(HASH_KEY, hash.as_str())];
    manifest.samples.par_iter().try_for_each(|entry| -> Result<()> {
        let id = entry.id.as_str();
        let s = shard::load_entry(shards, entry)?;
        let d = discovery::discover(&s, &cfg.discovery).with_context(|| format!("sample {id}"))?;
        image::write_mask_png(&out_path(out, id, ".png")?, &d.foreground, &text)?;
        if overlay {
            let up = localize::upsample(&d.foreground.to_soft(), &s.grid())?.binarize(0.5);
            let img = image::overlay(&s.image, &up)?;
            image::write_rgb_png(&out_path(out, id, "_overlay.png")?, &img, &text)?;
        }
        write_json(
            &out_path(out, id, ".json")?,
            &DiscoveryRecord {
                sample_id: id,
                config_hash: &hash,
                tau: cfg.discovery.tau,
                seed_index: d.seed.seed_index,
                threshold_mu: d.sparsity.threshold_mu,
                counts: &d.sparsity.counts,
                weights: &d.sparsity.weights,
                weights_used: &d.weights_used,
                foreground_fraction: d.foreground.fraction(),
            },
        )
    })?;
    log::info!("discovered {} samples into {}", manifest.samples.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    config_hash: String,
    samples: usize,
    iterations: usize,
    final_loss: Option<f64>,
    checkpoint: String,
}

pub fn train(cfg: &RunConfig, shards: &Path, out: &Path, coarse_dir: Option<&Path>) -> Result<()> {
    require_dir(shards, "shard directory")?;
    let source = match coarse_dir {
        Some(d) => {
            require_dir(d, "coarse mask directory")?;
            CoarseSource::External(d.to_path_buf())
        }
        None => CoarseSource::Internal,
    };
    ensure_dir(out)?;
    let samples = shard::read_manifest(shards)?.samples.len();
    let outcome = train::train_dir(shards, &cfg.train, &cfg.discovery, &cfg.solver, &source)?;
    let hash = cfg.hash();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        in_dim: outcome.params.in_dim(),
        head_input: cfg.train.head_input,
        iterations: cfg.train.iters,
        config_hash: hash.clone(),
    };
    let ckpt = out.join("head.ckpt");
    train::write_checkpoint(&ckpt, &header, &outcome.params)?;
    train::write_log(&out.join("train_log.jsonl"), &outcome.log)?;
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            config_hash: hash,
            samples,
            iterations: cfg.train.iters,
            final_loss: outcome.log.last().map(|r| r.loss),
            checkpoint: "head.ckpt".into(),
        },
    )?;
    log::info!("trained {} iterations on {samples} samples", cfg.train.iters);
    Ok(())
}

#[derive(Serialize)]
struct InferRecord<'a> {
    sample_id: &'a str,
    config_hash: &'a str,
    boxes: &'a [BBox],
    degenerate: bool,
    foreground_fraction: f64,
}

pub fn infer(cfg: &RunConfig, shards: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    require_dir(shards, "shard directory")?;
    require_file(checkpoint, "checkpoint")?;
    let (header, params) = train::read_checkpoint(checkpoint)?;
    let manifest = shard::read_manifest(shards)?;
    ensure_dir(out)?;
    let hash = cfg.hash();
    let text = [(HASH_KEY, hash.as_str()), ("bgseg-head-hash", header.config_hash.as_str())];
    let timings: Vec<(String, f64)> = manifest
        .samples
        .par_iter()
        .map(|entry| -> Result<(String, f64)> {
            let id = entry.id.as_str();
            let s = shard::load_entry(shards, entry)?;
            let feats = head::head_features(&s, header.head_input, &cfg.discovery)?;
            let start = Instant::now();
            let r = localize::infer(&feats, &s.image, &params, &cfg.inference, &cfg.solver)
                .with_context(|| format!("sample {id}"))?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            image::write_mask_png(&out_path(out, id, ".png")?, &r.mask, &text)?;
            image::write_soft_png(&out_path(out, id, "_soft.png")?, &r.soft, &text)?;
            write_json(
                &out_path(out, id, ".json")?,
                &InferRecord {
                    sample_id: id,
                    config_hash: &hash,
                    boxes: &r.boxes,
                    degenerate: r.degenerate,
                    foreground_fraction: r.mask.fraction(),
                },
            )?;
            Ok((id.to_string(), ms))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("sample_id,infer_ms\n");
    for (id, ms) in &timings {
        writeln!(csv, "{id},{ms:.3}").expect("writing to a String");
    }
    let tpath = out.join("timing.csv");
    fs::write(&tpath, csv).map_err(|e| Error::io(&tpath, e))?;
    log::info!("inferred {} samples into {}", timings.len(), out.display());
    Ok(())
}

/// Prediction ids under `dir`: every `<id>.png` that is not a soft map or overlay.
fn prediction_ids(dir: &Path) -> Result<BTreeSet<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            if let Some(id) = rel.strip_suffix(".png") {
                if !id.ends_with("_soft") && !id.ends_with("_overlay") {
                    out.insert(id.to_string());
                }
            }
        }
        Ok(())
    }
    let mut ids = BTreeSet::new();
    walk(dir, dir, &mut ids)?;
    Ok(ids)
}

fn pair_ids(pred: &BTreeSet<String>, gt: &BTreeSet<String>) -> Result<Vec<String>> {
    if pred == gt {
        return Ok(gt.iter().cloned().collect());
    }
    let missing: Vec<&String> = gt.difference(pred).take(5).collect();
    let extra: Vec<&String> = pred.difference(gt).take(5).collect();
    Err(Error::Pairing(format!(
        "predictions and ground truth do not pair up: {} without prediction (e.g. {missing:?}), {} without ground truth (e.g. {extra:?})",
        gt.difference(pred).count(),
        pred.difference(gt).count(),
    ))
    .into())
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub images: usize,
    pub saliency: SaliencyScores,
    pub corloc: Option<CorlocReport>,
}

struct EvalItem {
    acc: SaliencyAccumulator,
    pred_boxes: Vec<BBox>,
    gt_boxes: Option<Vec<BBox>>,
}

pub fn eval(cfg: &RunConfig, pred: &Path, gt: &Path, report: Option<&Path>) -> Result<EvalReport> {
    require_dir(pred, "prediction directory")?;
    require_dir(gt, "ground-truth shard directory")?;
    let manifest: Manifest = shard::read_manifest(gt)?;
    let gt_ids: BTreeSet<String> = manifest
        .samples
        .iter()
        .filter(|e| e.has_gt_mask)
        .map(|e| e.id.clone())
        .collect();
    let ids = pair_ids(&prediction_ids(pred)?, &gt_ids)?;
    if ids.is_empty() {
        return Err(Error::Empty("no ground-truth masks to evaluate".into()).into());
    }
    let items: Vec<EvalItem> = ids
        .par_iter()
        .map(|id| -> Result<EvalItem> {
            let entry = manifest.entry(id).expect("paired id is in the manifest");
            let s = shard::load_entry(gt, entry)?;
            let gt_mask = s.gt_mask.as_ref().expect("has_gt_mask");
            let mask = image::read_mask_png(&pred.join(format!("{id}.png")), Resolution::Pixel)?;
            if !mask.same_shape(gt_mask) {
                return Err(Error::DimensionMismatch(format!(
                    "{id}: prediction {}x{} vs ground truth {}x{}",
                    mask.cols, mask.rows, gt_mask.cols, gt_mask.rows
                ))
                .into());
            }
            let soft_path = pred.join(format!("{id}_soft.png"));
            let soft = if soft_path.is_file() {
                let (w, h, data) = image::read_gray_png(&soft_path)?;
                if (w, h) != (mask.cols, mask.rows) {
                    return Err(Error::DimensionMismatch(format!("{id}: soft map is {w}x{h}")).into());
                }
                data
            } else {
                mask.values.iter().map(|&v| if v { 255 } else { 0 }).collect()
            };
            Ok(EvalItem {
                acc: SaliencyAccumulator::single(id, &mask, &soft, gt_mask)?,
                pred_boxes: boxes_from_mask(&mask, cfg.eval.corloc_mode, cfg.inference.connectivity),
                gt_boxes: s.gt_boxes.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let mut acc = SaliencyAccumulator::default();
    let mut pred_boxes = Vec::new();
    let mut gt_boxes = Vec::new();
    let mut any_boxes = false;
    for item in items {
        acc.merge(item.acc);
        any_boxes |= item.gt_boxes.is_some();
        pred_boxes.push(item.pred_boxes);
        gt_boxes.push(item.gt_boxes.unwrap_or_default());
    }
    let saliency = acc.finalize(cfg.eval.beta_sq)?;
    let corloc = if any_boxes {
        Some(metrics::corloc(&pred_boxes, &gt_boxes)?)
    } else {
        None
    };
    let out = EvalReport {
        config_hash: cfg.hash(),
        images: ids.len(),
        saliency,
        corloc,
    };
    if let Some(path) = report {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(parent)?;
        }
        write_json(path, &out)?;
    }
    println!("{}", eval_table(&out));
    Ok(out)
}

pub fn eval_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let corloc = r
        .corloc
        .as_ref()
        .map(|c| format!("{:.1}", 100.0 * c.corloc))
        .unwrap_or_else(|| "-".into());
    writeln!(s, "{:<8} {:>6} {:>6} {:>8} {:>8}", "images", "Acc", "IoU", "maxFb", "CorLoc").unwrap();
    write!(
        s,
        "{:<8} {:>6.3} {:>6.3} {:>8.3} {:>8}",
        r.images, r.saliency.acc, r.saliency.iou, r.saliency.max_f_beta, corloc
    )
    .unwrap();
    if r.saliency.both_empty > 0 {
        write!(s, "\n({} images with empty prediction and ground truth count as IoU 1)", r.saliency.both_empty)
            .unwrap();
    }
    if let Some(c) = &r.corloc {
        if c.excluded_no_gt > 0 || c.ties_at_half > 0 {
            write!(
                s,
                "\n(CorLoc: {} images without boxes excluded, {} at IoU exactly 0.5)",
                c.excluded_no_gt, c.ties_at_half
            )
            .unwrap();
        }
    }
    s
}

/// Mask for retrieval: patch-level PNG or pixel-level PNG reduced to patches.
fn load_patch_mask(path: &Path, s: &shard::Shard) -> Result<BinaryMask> {
    let (w, h, data) = image::read_gray_png(path)?;
    let grid = s.grid();
    let values = data.iter().map(|&v| v >= 128).collect();
    if (w, h) == (grid.cols, grid.rows) {
        Ok(BinaryMask::new(Resolution::Patch, h, w, values)?)
    } else if (w, h) == (grid.width_px, grid.height_px) {
        Ok(downsample(&BinaryMask::new(Resolution::Pixel, h, w, values)?, &grid)?)
    } else {
        Err(Error::GridMismatch {
            sample: s.sample_id.clone(),
            detail: format!(
                "mask {w}x{h} matches neither the {}x{} patch grid nor the {}x{} image",
                grid.cols, grid.rows, grid.width_px, grid.height_px
            ),
        }
        .into())
    }
}

fn retrieval_samples(
    shards: &Path,
    masks: &Path,
    labels: &Path,
    head_input: HeadInput,
    cfg: &RunConfig,
) -> Result<Vec<RetrievalSample>> {
    require_dir(shards, "shard directory")?;
    require_dir(masks, "mask directory")?;
    require_dir(labels, "label directory")?;
    let manifest = shard::read_manifest(shards)?;
    manifest
        .samples
        .par_iter()
        .map(|entry| -> Result<RetrievalSample> {
            let id = &entry.id;
            let s = shard::load_entry(shards, entry)?;
            let mpath = masks.join(format!("{id}.png"));
            let lpath = labels.join(format!("{id}.png"));
            for p in [&mpath, &lpath] {
                if !p.is_file() {
                    return Err(Error::Pairing(format!("{id}: missing {}", p.display())).into());
                }
            }
            let mask = load_patch_mask(&mpath, &s)?;
            let (w, h, l) = image::read_label_png(&lpath)?;
            let gt = LabelMap::new(w, h, l)?;
            Ok(RetrievalSample {
                sample_id: id.clone(),
                features: head::head_features(&s, head_input, &cfg.discovery)?,
                mask,
                gt,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct RetrieveReport {
    pub config_hash: String,
    #[serde(flatten)]
    pub result: RetrievalReport,
}

pub struct RetrievePaths<'a> {
    pub train_shards: &'a Path,
    pub train_masks: &'a Path,
    pub train_labels: &'a Path,
    pub val_shards: &'a Path,
    pub val_masks: &'a Path,
    pub val_labels: &'a Path,
}

pub fn retrieve(cfg: &RunConfig, p: &RetrievePaths, report: Option<&Path>) -> Result<RetrieveReport> {
    let hi = cfg.train.head_input;
    let train_set = retrieval_samples(p.train_shards, p.train_masks, p.train_labels, hi, cfg)?;
    let index = retrieval::build_index(&train_set, &cfg.retrieval)?;
    drop(train_set);
    let val = retrieval_samples(p.val_shards, p.val_masks, p.val_labels, hi, cfg)?;
    let result = retrieval::retrieve(&index, &val, &cfg.retrieval)?;
    let out = RetrieveReport {
        config_hash: cfg.hash(),
        result,
    };
    if let Some(path) = report {
        write_json(path, &out)?;
    }
    let mut table = format!("{:<6} {:>7}\n", "class", "IoU");
    for c in &out.result.per_class {
        let v = c.iou.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into());
        writeln!(table, "{:<6} {:>7}", c.class, v).unwrap();
    }
    write!(table, "{:<6} {:>7.1}", "mIoU", 100.0 * out.result.miou).unwrap();
    println!("{table}");
    Ok(out)
}

pub fn make_fixtures(
    out: &Path,
    count: usize,
    seed: u64,
    spec: &PlantedSpec,
    labels_dir: Option<&Path>,
) -> Result<()> {
    if !spec.classes.is_empty() && labels_dir.is_none() {
        return Err(Error::Config("--classes needs --labels-dir".into()).into());
    }
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()).into());
    }
    fixtures::write_planted(out, spec, seed, count, labels_dir)?;
    log::info!("wrote {count} planted shards to {}", out.display());
    Ok(())
}

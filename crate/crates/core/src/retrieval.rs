//! Semantic segmentation by retrieval: object prototypes from predicted masks,
//! 1-NN label transfer from a labelled prototype index, and mIoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::FeatureMatrix;
use crate::localize::{connected_components, Connectivity};
use crate::mask::{BinaryMask, Resolution};
use crate::tensors::PatchGrid;

pub const IGNORE_LABEL: u8 = 255;
pub const BACKGROUND: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtoMode {
    /// One prototype for the whole foreground mask.
    SingleMask,
    /// One prototype per connected component.
    #[default]
    PerComponent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NnMetric {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassSet {
    /// aeroplane, bottle, bus, car, cat, cow, person
    #[default]
    Voc7,
    /// background plus the 20 object classes
    Voc21,
    /// Explicit object classes; background is scored when `with_background`.
    Custom {
        classes: Vec<u8>,
        with_background: bool,
    },
}

impl ClassSet {
    /// Classes whose IoU enters the mean.
    pub fn scored(&self) -> Vec<u8> {
        match self {
            ClassSet::Voc7 => vec![1, 5, 6, 7, 8, 10, 15],
            ClassSet::Voc21 => (0..=20).collect(),
            ClassSet::Custom {
                classes,
                with_background,
            } => {
                let mut v = Vec::new();
                if *with_background {
                    v.push(BACKGROUND);
                }
                v.extend(classes.iter().copied().filter(|&c| c != BACKGROUND));
                v
            }
        }
    }

    /// Ground-truth label after folding classes outside the set into background.
    pub fn map(&self, label: u8) -> u8 {
        if label == IGNORE_LABEL || label == BACKGROUND {
            return label;
        }
        let keep = match self {
            ClassSet::Voc7 => [1, 5, 6, 7, 8, 10, 15].contains(&label),
            ClassSet::Voc21 => label <= 20,
            ClassSet::Custom { classes, .. } => classes.contains(&label),
        };
        if keep {
            label
        } else {
            BACKGROUND
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub mode: ProtoMode,
    /// Components smaller than this fraction of the image are dropped
    /// (per-component mode only).
    pub min_component_frac: f64,
    pub metric: NnMetric,
    pub class_set: ClassSet,
    pub connectivity: Connectivity,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            mode: ProtoMode::PerComponent,
            min_component_frac: 0.01,
            metric: NnMetric::Cosine,
            class_set: ClassSet::Voc7,
            connectivity: Connectivity::Four,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.min_component_frac) {
            return Err(Error::Config(format!(
                "min_component_frac must lie in [0, 1), got {}",
                self.min_component_frac
            )));
        }
        Ok(())
    }
}

/// Pixel-level class-index map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "label map {width}x{height} given {} values",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub sample_id: String,
    pub component_id: u32,
    pub vector: Vec<f64>,
    pub label: Option<u8>,
    /// Patch indices of the region.
    pub region: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeSet {
    pub prototypes: Vec<Prototype>,
    pub skipped_empty: usize,
    pub skipped_small: usize,
}

fn masked_mean(features: &FeatureMatrix, region: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; features.dim];
    for &p in region {
        for (a, &x) in v.iter_mut().zip(features.row(p)) {
            *a += x as f64;
        }
    }
    let inv = 1.0 / region.len() as f64;
    v.iter_mut().for_each(|a| *a *= inv);
    v
}

/// Mean feature vector of each selected region of a patch-level mask.
pub fn build_prototypes(
    sample_id: &str,
    features: &FeatureMatrix,
    mask: &BinaryMask,
    cfg: &RetrievalConfig,
) -> Result<PrototypeSet> {
    let grid = features.grid;
    if mask.resolution != Resolution::Patch || mask.rows != grid.rows || mask.cols != grid.cols {
        return Err(Error::GridMismatch {
            sample: sample_id.to_string(),
            detail: format!(
                "mask {}x{} does not match the {}x{} patch grid",
                mask.cols, mask.rows, grid.cols, grid.rows
            ),
        });
    }
    let mut set = PrototypeSet::default();
    let regions: Vec<(u32, Vec<usize>)> = match cfg.mode {
        ProtoMode::SingleMask => {
            let region: Vec<usize> = (0..mask.len()).filter(|&i| mask.values[i]).collect();
            vec![(1, region)]
        }
        ProtoMode::PerComponent => {
            let comps = connected_components(mask, cfg.connectivity);
            let mut regions = vec![Vec::new(); comps.len()];
            for (i, &l) in comps.labels.iter().enumerate() {
                if l > 0 {
                    regions[l as usize - 1].push(i);
                }
            }
            let n = mask.len() as f64;
            regions
                .into_iter()
                .enumerate()
                .filter_map(|(k, r)| {
                    if (r.len() as f64) < cfg.min_component_frac * n {
                        set.skipped_small += 1;
                        None
                    } else {
                        Some((k as u32 + 1, r))
                    }
                })
                .collect()
        }
    };
    for (component_id, region) in regions {
        if region.is_empty() {
            set.skipped_empty += 1;
            continue;
        }
        set.prototypes.push(Prototype {
            sample_id: sample_id.to_string(),
            component_id,
            vector: masked_mean(features, &region),
            label: None,
            region,
        });
    }
    Ok(set)
}

fn check_label_map(grid: &PatchGrid, gt: &LabelMap) -> Result<()> {
    if gt.width != grid.width_px || gt.height != grid.height_px {
        return Err(Error::DimensionMismatch(format!(
            "label map {}x{} vs image {}x{}",
            gt.width, gt.height, grid.width_px, grid.height_px
        )));
    }
    Ok(())
}

/// Majority ground-truth class over the pixels of a region; ignore pixels do
/// not vote and ties go to the lowest class.
pub fn majority_label(region: &[usize], grid: &PatchGrid, gt: &LabelMap, classes: &ClassSet) -> Result<Option<u8>> {
    check_label_map(grid, gt)?;
    let mut counts = [0usize; 256];
    let p = grid.patch_size;
    for &patch in region {
        let (pr, pc) = (patch / grid.cols, patch % grid.cols);
        for y in pr * p..(pr + 1) * p {
            for x in pc * p..(pc + 1) * p {
                let l = classes.map(gt.labels[y * gt.width + x]);
                if l != IGNORE_LABEL {
                    counts[l as usize] += 1;
                }
            }
        }
    }
    let (best, &n) = counts
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|&(_, c)| *c)
        .expect("non-empty");
    Ok((n > 0).then_some(best as u8))
}

/// One image for retrieval: features, predicted patch mask and pixel labels.
#[derive(Debug, Clone)]
pub struct RetrievalSample {
    pub sample_id: String,
    pub features: FeatureMatrix,
    pub mask: BinaryMask,
    pub gt: LabelMap,
}

/// Labelled prototypes in `(sample_id, component_id)` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeIndex {
    pub prototypes: Vec<Prototype>,
    pub skipped_empty: usize,
    pub skipped_small: usize,
    pub unlabeled: usize,
}

pub fn build_index(train: &[RetrievalSample], cfg: &RetrievalConfig) -> Result<PrototypeIndex> {
    cfg.validate()?;
    let mut index = PrototypeIndex::default();
    for s in train {
        let set = build_prototypes(&s.sample_id, &s.features, &s.mask, cfg)?;
        index.skipped_empty += set.skipped_empty;
        index.skipped_small += set.skipped_small;
        for mut p in set.prototypes {
            p.label = majority_label(&p.region, &s.features.grid, &s.gt, &cfg.class_set)?;
            if p.label.is_some() {
                index.prototypes.push(p);
            } else {
                index.unlabeled += 1;
            }
        }
    }
    index
        .prototypes
        .sort_by(|a, b| (&a.sample_id, a.component_id).cmp(&(&b.sample_id, b.component_id)));
    Ok(index)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Index of the nearest prototype; the first one wins ties.
pub fn nearest(index: &PrototypeIndex, query: &[f64], metric: NnMetric) -> Result<usize> {
    if index.prototypes.is_empty() {
        return Err(Error::Empty("prototype index".into()));
    }
    let qn = norm(query);
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, p) in index.prototypes.iter().enumerate() {
        if p.vector.len() != query.len() {
            return Err(Error::DimensionMismatch(format!(
                "prototype of {} has {} dims, query {}",
                p.sample_id,
                p.vector.len(),
                query.len()
            )));
        }
        let score = match metric {
            NnMetric::Cosine => {
                let pn = norm(&p.vector);
                if qn == 0.0 || pn == 0.0 {
                    0.0
                } else {
                    p.vector.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (qn * pn)
                }
            }
            NnMetric::Euclidean => -p
                .vector
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>(),
        };
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}

/// Paint each prototype's label over its region's pixels; the rest is background.
pub fn paint(grid: &PatchGrid, prototypes: &[(Vec<usize>, u8)]) -> LabelMap {
    let (w, p) = (grid.width_px, grid.patch_size);
    let mut labels = vec![BACKGROUND; grid.n_pixels()];
    for (region, label) in prototypes {
        for &patch in region {
            let (pr, pc) = (patch / grid.cols, patch % grid.cols);
            for y in pr * p..(pr + 1) * p {
                labels[y * w + pc * p..y * w + (pc + 1) * p].fill(*label);
            }
        }
    }
    LabelMap {
        width: grid.width_px,
        height: grid.height_px,
        labels,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: u8,
    /// `None` when the class appears in neither prediction nor ground truth.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
    pub val_objects: usize,
    pub index_size: usize,
    pub skipped_empty: usize,
    pub skipped_small: usize,
}

/// Integer confusion counts over pixels, rows = ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<u64>,
}

impl Default for Confusion {
    fn default() -> Self {
        Self {
            counts: vec![0; 256 * 256],
        }
    }
}

impl Confusion {
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, classes: &ClassSet) -> Result<()> {
        if pred.labels.len() != gt.labels.len() {
            return Err(Error::DimensionMismatch("prediction and label map differ in size".into()));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let g = classes.map(g);
            if g == IGNORE_LABEL {
                continue;
            }
            self.counts[g as usize * 256 + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn class_iou(&self, class: u8) -> Option<f64> {
        let c = class as usize;
        let tp = self.counts[c * 256 + c];
        let gt_total: u64 = self.counts[c * 256..(c + 1) * 256].iter().sum();
        let pred_total: u64 = (0..256).map(|g| self.counts[g * 256 + c]).sum();
        let union = gt_total + pred_total - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

pub fn retrieve(index: &PrototypeIndex, val: &[RetrievalSample], cfg: &RetrievalConfig) -> Result<RetrievalReport> {
    cfg.validate()?;
    if index.prototypes.is_empty() {
        return Err(Error::Empty("prototype index".into()));
    }
    let mut confusion = Confusion::default();
    let mut report = RetrievalReport {
        miou: 0.0,
        per_class: Vec::new(),
        val_objects: 0,
        index_size: index.prototypes.len(),
        skipped_empty: 0,
        skipped_small: 0,
    };
    for s in val {
        check_label_map(&s.features.grid, &s.gt)?;
        let set = build_prototypes(&s.sample_id, &s.features, &s.mask, cfg)?;
        report.skipped_empty += set.skipped_empty;
        report.skipped_small += set.skipped_small;
        let mut painted = Vec::with_capacity(set.prototypes.len());
        for p in set.prototypes {
            let nn = nearest(index, &p.vector, cfg.metric)?;
            let label = index.prototypes[nn].label.expect("index holds labelled prototypes");
            painted.push((p.region, label));
        }
        report.val_objects += painted.len();
        let pred = paint(&s.features.grid, &painted);
        confusion.add(&pred, &s.gt, &cfg.class_set)?;
    }
    report.per_class = cfg
        .class_set
        .scored()
        .into_iter()
        .map(|class| ClassIou {
            class,
            iou: confusion.class_iou(class),
        })
        .collect();
    let present: Vec<f64> = report.per_class.iter().filter_map(|c| c.iou).collect();
    report.miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(report)
}

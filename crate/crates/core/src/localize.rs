//! Inference-time localization: upsampling, connected components, the
//! `single`/`multi` selection protocols and bounding boxes.

use serde::{Deserialize, Serialize};

use crate::bilateral::{Refiner, SolverParams};
use crate::error::{Error, Result};
use crate::head::{self, FeatureMatrix, SegHeadParams};
use crate::image::{BBox, RgbImage};
use crate::mask::{BinaryMask, Resolution, SoftMask};
use crate::tensors::PatchGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    /// Largest connected component only.
    Single,
    /// The mask as is, with every component.
    #[default]
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: SelectMode,
    /// Refine the upsampled prediction with the bilateral solver.
    pub post_bs: bool,
    /// Components smaller than this fraction of the image are dropped when
    /// building retrieval prototypes. Not applied at inference.
    pub min_component_frac: f64,
    pub connectivity: Connectivity,
    /// Foreground threshold on the raw head output.
    pub threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: SelectMode::Multi,
            post_bs: false,
            min_component_frac: 0.01,
            connectivity: Connectivity::Four,
            threshold: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.min_component_frac) {
            return Err(Error::Config(format!(
                "min_component_frac must lie in [0, 1), got {}",
                self.min_component_frac
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "inference threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Interpolation taps for one output coordinate.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Taps with the outer corners of both grids aligned: output pixel `i`
/// samples input coordinate `(i + 0.5) * inp / out - 0.5`, clamped at the
/// borders.
fn taps(inp: usize, out: usize) -> Vec<Tap> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|i| {
            let u = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (u.floor() as usize).min(inp - 1);
            let hi = (lo + 1).min(inp - 1);
            Tap {
                lo,
                hi,
                frac: if hi == lo { 0.0 } else { u - lo as f64 },
            }
        })
        .collect()
}

fn check_grid(mask: &SoftMask, grid: &PatchGrid) -> Result<()> {
    if mask.rows != grid.rows || mask.cols != grid.cols {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} does not match grid {}x{}",
            mask.cols, mask.rows, grid.cols, grid.rows
        )));
    }
    Ok(())
}

#[inline]
fn lerp(a: f64, b: f64, frac: f64) -> f64 {
    a + frac * (b - a)
}

/// Interpolate between the two patch rows of tap `t`.
fn vertical(mask: &SoftMask, t: &Tap, row: &mut [f64]) {
    let a = &mask.values[t.lo * mask.cols..(t.lo + 1) * mask.cols];
    let b = &mask.values[t.hi * mask.cols..(t.hi + 1) * mask.cols];
    for ((r, &va), &vb) in row.iter_mut().zip(a).zip(b) {
        *r = lerp(va, vb, t.frac);
    }
}

fn horizontal(row: &[f64], xt: &[Tap], out: &mut [f64]) {
    for (o, tx) in out.iter_mut().zip(xt) {
        *o = lerp(row[tx.lo], row[tx.hi], tx.frac);
    }
}

/// Bilinear upsampling of a patch mask to pixel resolution, outer corners aligned.
pub fn upsample(mask: &SoftMask, grid: &PatchGrid) -> Result<SoftMask> {
    check_grid(mask, grid)?;
    let (w, h) = (grid.width_px, grid.height_px);
    let xt = taps(mask.cols, w);
    let yt = taps(mask.rows, h);
    let mut values = vec![0.0; w * h];
    let mut row = vec![0.0; mask.cols];
    for (y, t) in yt.iter().enumerate() {
        vertical(mask, t, &mut row);
        horizontal(&row, &xt, &mut values[y * w..(y + 1) * w]);
    }
    Ok(SoftMask {
        resolution: Resolution::Pixel,
        rows: h,
        cols: w,
        values,
    })
}

pub fn downsample(mask: &BinaryMask, grid: &PatchGrid) -> Result<BinaryMask> {
    if mask.rows != grid.height_px || mask.cols != grid.width_px {
        return Err(Error::DimensionMismatch(format!(
            "pixel mask {}x{} does not match image {}x{}",
            mask.cols, mask.rows, grid.width_px, grid.height_px
        )));
    }
    let mut counts = vec![0usize; grid.n_patches()];
    for y in 0..grid.height_px {
        for x in 0..grid.width_px {
            if mask.values[y * grid.width_px + x] {
                counts[grid.patch_of_pixel(x, y)] += 1;
            }
        }
    }
    let area = grid.patch_size * grid.patch_size;
    BinaryMask::new(
        Resolution::Patch,
        grid.rows,
        grid.cols,
        counts.iter().map(|&c| 2 * c >= area).collect(),
    )
}

/// Labelled connected components. Label 0 is background; component `k`
/// (1-based) is the `k`-th one met in row-major scan order.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u32>,
    /// Pixel count of component `k` at index `k - 1`.
    pub sizes: Vec<usize>,
    pub boxes: Vec<BBox>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Label of the largest component, lowest label on ties.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, usize)> = None;
        for (i, &s) in self.sizes.iter().enumerate() {
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i as u32 + 1)
    }

    pub fn component_mask(&self, label: u32, resolution: Resolution) -> BinaryMask {
        BinaryMask {
            resolution,
            rows: self.rows,
            cols: self.cols,
            values: self.labels.iter().map(|&l| l == label).collect(),
        }
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
    let ra = find(parent, a);
    let rb = find(parent, b);
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi as usize] = lo;
    lo
}

/// Horizontal run of foreground pixels `[x0, x1)` in row `y`.
struct Run {
    y: usize,
    x0: usize,
    x1: usize,
    label: u32,
}

/// Append the foreground runs of one row, where `on(x)` tests pixel `x`.
fn push_runs(y: usize, cols: usize, on: impl Fn(usize) -> bool, out: &mut Vec<Run>) {
    let mut x = 0;
    while x < cols {
        while x < cols && !on(x) {
            x += 1;
        }
        if x == cols {
            break;
        }
        let x0 = x;
        while x < cols && on(x) {
            x += 1;
        }
        out.push(Run { y, x0, x1: x, label: 0 });
    }
}

/// Run-based union-find labelling: runs in one row are merged with the
/// overlapping runs of the row above, then numbered in scan order.
/// `row_runs(y, out)` appends the runs of row `y`.
fn label_runs(
    rows: usize,
    cols: usize,
    connectivity: Connectivity,
    mut row_runs: impl FnMut(usize, &mut Vec<Run>),
) -> Components {
    // diagonal contact extends the overlap test by one pixel
    let slack = usize::from(connectivity == Connectivity::Eight);
    let mut runs: Vec<Run> = Vec::new();
    // parent[0] is the background sentinel
    let mut parent: Vec<u32> = vec![0];
    let mut prev = 0..0;
    for y in 0..rows {
        let start = runs.len();
        row_runs(y, &mut runs);
        let mut j = prev.start;
        for r in start..runs.len() {
            let (x0, x1) = (runs[r].x0, runs[r].x1);
            while j < prev.end && runs[j].x1 + slack <= x0 {
                j += 1;
            }
            let mut label = 0u32;
            let mut k = j;
            while k < prev.end && runs[k].x0 < x1 + slack {
                let n = runs[k].label;
                label = if label == 0 { find(&mut parent, n) } else { union(&mut parent, label, n) };
                k += 1;
            }
            if label == 0 {
                label = parent.len() as u32;
                parent.push(label);
            }
            runs[r].label = label;
        }
        prev = start..runs.len();
    }

    let mut final_label = vec![0u32; parent.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut boxes: Vec<BBox> = Vec::new();
    let mut labels = vec![0u32; rows * cols];
    for r in &runs {
        let root = find(&mut parent, r.label) as usize;
        if final_label[root] == 0 {
            sizes.push(0);
            boxes.push(BBox {
                xmin: r.x0,
                ymin: r.y,
                xmax: r.x1 - 1,
                ymax: r.y,
            });
            final_label[root] = sizes.len() as u32;
        }
        let k = final_label[root];
        labels[r.y * cols + r.x0..r.y * cols + r.x1].fill(k);
        let idx = k as usize - 1;
        sizes[idx] += r.x1 - r.x0;
        let b = &mut boxes[idx];
        b.xmin = b.xmin.min(r.x0);
        b.xmax = b.xmax.max(r.x1 - 1);
        b.ymax = r.y;
    }
    Components {
        rows,
        cols,
        labels,
        sizes,
        boxes,
    }
}

pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Components {
    let cols = mask.cols;
    label_runs(mask.rows, cols, connectivity, |y, out| {
        let row = &mask.values[y * cols..(y + 1) * cols];
        push_runs(y, cols, |x| row[x], out)
    })
}

/// Components of `soft > threshold`; equals labelling `soft.binarize(threshold)`.
pub fn components_above(soft: &SoftMask, threshold: f64, connectivity: Connectivity) -> Components {
    let cols = soft.cols;
    label_runs(soft.rows, cols, connectivity, |y, out| {
        let row = &soft.values[y * cols..(y + 1) * cols];
        push_runs(y, cols, |x| row[x] > threshold, out)
    })
}

/// Output pixels `[x0, x1)` whose horizontal taps read patch columns
/// `lo` and `hi`.
struct Segment {
    x0: usize,
    x1: usize,
    lo: usize,
    hi: usize,
}

fn segments(xt: &[Tap]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (x, t) in xt.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.lo == t.lo && s.hi == t.hi => s.x1 = x + 1,
            _ => out.push(Segment {
                x0: x,
                x1: x + 1,
                lo: t.lo,
                hi: t.hi,
            }),
        }
    }
    out
}

/// Appends runs of one row from foreground spans given in increasing order.
struct RunBuilder<'a> {
    y: usize,
    open: Option<usize>,
    out: &'a mut Vec<Run>,
}

impl RunBuilder<'_> {
    fn span(&mut self, x0: usize, on: bool) {
        match (on, self.open) {
            (true, None) => self.open = Some(x0),
            (false, Some(s)) => {
                self.out.push(Run {
                    y: self.y,
                    x0: s,
                    x1: x0,
                    label: 0,
                });
                self.open = None;
            }
            _ => {}
        }
    }

    fn finish(mut self, cols: usize) {
        self.span(cols, false);
    }
}

/// Upsample, threshold and label without materializing the pixel map.
/// Equals `components_above(&upsample(mask, grid)?, threshold, connectivity)`.
///
/// A segment whose endpoint values clear the threshold by more than the
/// rounding error of `lerp` is decided whole. Otherwise the computed
/// interpolant is monotone in `frac` (each rounding step is monotone), so
/// `v > threshold` changes at most once and is found by bisection.
pub fn upsampled_components(
    mask: &SoftMask,
    grid: &PatchGrid,
    threshold: f64,
    connectivity: Connectivity,
) -> Result<Components> {
    check_grid(mask, grid)?;
    let (w, h) = (grid.width_px, grid.height_px);
    let xt = taps(mask.cols, w);
    let yt = taps(mask.rows, h);
    let segs = segments(&xt);
    let mut row = vec![0.0; mask.cols];
    Ok(label_runs(h, w, connectivity, |y, out| {
        vertical(mask, &yt[y], &mut row);
        let mut b = RunBuilder { y, open: None, out };
        for s in &segs {
            let (a, c) = (row[s.lo], row[s.hi]);
            // computed interpolants stay within this of [min(a, c), max(a, c)]
            let slack = 4.0 * f64::EPSILON * (a.abs() + c.abs()) + f64::MIN_POSITIVE;
            if a.min(c) - slack > threshold || a.max(c) + slack <= threshold {
                b.span(s.x0, a > threshold);
                continue;
            }
            let on = |x: usize| lerp(a, c, xt[x].frac) > threshold;
            let first = on(s.x0);
            b.span(s.x0, first);
            if on(s.x1 - 1) != first {
                // first pixel whose state differs from `first`
                let (mut lo, mut hi) = (s.x0, s.x1 - 1);
                while hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    if on(mid) == first {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                b.span(hi, !first);
            }
        }
        b.finish(w);
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub mask: BinaryMask,
    /// Labels of the kept components.
    pub kept: Vec<u32>,
    /// True when the input had no foreground.
    pub degenerate: bool,
}

pub fn select(components: &Components, mode: SelectMode, resolution: Resolution) -> Selection {
    if components.is_empty() {
        return Selection {
            mask: BinaryMask::filled(resolution, components.rows, components.cols, false),
            kept: Vec::new(),
            degenerate: true,
        };
    }
    match mode {
        SelectMode::Single => {
            let l = components.largest().expect("non-empty");
            Selection {
                mask: components.component_mask(l, resolution),
                kept: vec![l],
                degenerate: false,
            }
        }
        SelectMode::Multi => Selection {
            mask: BinaryMask {
                resolution,
                rows: components.rows,
                cols: components.cols,
                values: components.labels.iter().map(|&l| l != 0).collect(),
            },
            kept: (1..=components.len() as u32).collect(),
            degenerate: false,
        },
    }
}

/// One box for the largest component (`single`) or one per component (`multi`).
pub fn boxes_from_mask(mask: &BinaryMask, mode: SelectMode, connectivity: Connectivity) -> Vec<BBox> {
    let comps = connected_components(mask, connectivity);
    match mode {
        SelectMode::Single => comps
            .largest()
            .map(|l| vec![comps.boxes[l as usize - 1]])
            .unwrap_or_default(),
        SelectMode::Multi => comps.boxes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Patch-level head output.
    pub patch_soft: SoftMask,
    /// Pixel-level soft map the final mask was thresholded from.
    pub soft: SoftMask,
    pub mask: BinaryMask,
    pub boxes: Vec<BBox>,
    pub degenerate: bool,
}

/// Head forward, upsample, optional bilateral refinement, threshold,
/// components and selection.
pub fn infer(
    features: &FeatureMatrix,
    image: &RgbImage,
    head: &SegHeadParams,
    cfg: &InferenceConfig,
    bs: &SolverParams,
) -> Result<Inference> {
    cfg.validate()?;
    let grid = features.grid;
    if image.width != grid.width_px || image.height != grid.height_px {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs grid {}x{}",
            image.width, image.height, grid.width_px, grid.height_px
        )));
    }
    let pred = head::forward(head, features)?;
    let up = upsample(&pred.mask, &grid)?;
    let (soft, threshold) = if cfg.post_bs {
        let refiner = Refiner::new(image, bs)?;
        (refiner.refine_soft(&up)?, bs.binarize_threshold)
    } else {
        (up, cfg.threshold)
    };
    let comps = components_above(&soft, threshold, cfg.connectivity);
    let selection = select(&comps, cfg.mode, Resolution::Pixel);
    let boxes = selection
        .kept
        .iter()
        .map(|&l| comps.boxes[l as usize - 1])
        .collect();
    Ok(Inference {
        patch_soft: pred.mask,
        soft,
        mask: selection.mask,
        boxes,
        degenerate: selection.degenerate,
    })
}

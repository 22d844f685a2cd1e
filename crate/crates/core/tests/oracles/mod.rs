//! Brute-force reference implementations used only by tests. Each one is
//! written from the definitions, not from the library code paths.

#![allow(dead_code)]

use bgseg::bilateral::{BilateralGrid, SolverParams, DIM};
use bgseg::image::{BBox, RgbImage};
use bgseg::mask::BinaryMask;
use nalgebra::{DMatrix, DVector};

// ---- background discovery ----

pub fn mean(values: &[f32]) -> f64 {
    let mut s = 0.0f64;
    let mut n = 0usize;
    for &v in values {
        s += v as f64;
        n += 1;
    }
    s / n as f64
}

/// Inclusive supra-threshold counts per head, clamped to 1.
pub fn counts(values: &[f32], heads: usize, mu: f64) -> Vec<usize> {
    let n = values.len() / heads;
    (0..heads)
        .map(|h| {
            let c = (0..n).filter(|&p| values[p * heads + h] as f64 >= mu).count();
            if c == 0 {
                1
            } else {
                c
            }
        })
        .collect()
}

pub fn weights(counts: &[usize]) -> Vec<f64> {
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    counts.iter().map(|&c| (total / c as f64).ln()).collect()
}

/// Exhaustive weighted argmin with the lowest index winning ties.
pub fn seed(values: &[f32], heads: usize, w: &[f64]) -> usize {
    let n = values.len() / heads;
    let score = |p: usize| -> f64 { (0..heads).map(|h| w[h] * values[p * heads + h] as f64).sum() };
    (0..n)
        .find(|&p| (0..n).all(|q| if q < p { score(p) < score(q) } else { score(p) <= score(q) }))
        .expect("some patch is minimal")
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Weighted concatenation of `h x N x d` features.
pub fn weighted_rows(feat: &[f32], heads: usize, n: usize, d: usize, w: &[f64]) -> Vec<Vec<f64>> {
    (0..n)
        .map(|p| {
            let mut row = Vec::with_capacity(heads * d);
            for h in 0..heads {
                for k in 0..d {
                    row.push(w[h] * feat[(h * n + p) * d + k] as f64);
                }
            }
            row
        })
        .collect()
}

pub fn background(rows: &[Vec<f64>], seed: usize, tau: f64) -> Vec<bool> {
    rows.iter().map(|r| cosine(r, &rows[seed]) >= tau).collect()
}

// ---- bilateral solver ----

/// BT.601 full-range conversion and floor quantization, vertices numbered in
/// order of first appearance.
pub fn quantize(img: &RgbImage, p: &SolverParams) -> (Vec<usize>, Vec<[i64; 5]>) {
    let mut coords: Vec<[i64; 5]> = Vec::new();
    let mut map = Vec::new();
    for y in 0..img.height {
        for x in 0..img.width {
            let [r, g, b] = img.pixel(x, y);
            let (r, g, b) = (r as f64, g as f64, b as f64);
            let luma = 0.299 * r + 0.587 * g + 0.114 * b;
            let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
            let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
            let c = [
                (x as f64 / p.sigma_spatial).floor() as i64,
                (y as f64 / p.sigma_spatial).floor() as i64,
                (luma / p.sigma_luma).floor() as i64,
                (cb / p.sigma_chroma).floor() as i64,
                (cr / p.sigma_chroma).floor() as i64,
            ];
            let id = match coords.iter().position(|q| *q == c) {
                Some(i) => i,
                None => {
                    coords.push(c);
                    coords.len() - 1
                }
            };
            map.push(id);
        }
    }
    (map, coords)
}

/// Dense blur matrix: `2 * DIM` on the diagonal and 1 between vertices whose
/// lattice coordinates differ by exactly one step along one axis.
pub fn dense_blur(coords: &[[i32; DIM]]) -> DMatrix<f64> {
    let nv = coords.len();
    let mut b = DMatrix::zeros(nv, nv);
    for i in 0..nv {
        b[(i, i)] = 2.0 * DIM as f64;
        for j in 0..nv {
            let diff: Vec<i32> = (0..DIM).map(|k| (coords[i][k] - coords[j][k]).abs()).collect();
            if diff.iter().sum::<i32>() == 1 {
                b[(i, j)] = 1.0;
            }
        }
    }
    b
}

/// Bistochastization scales from pixel counts per vertex.
pub fn bistochastize(b: &DMatrix<f64>, m0: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let mut n = DVector::from_element(m0.len(), 1.0);
    for _ in 0..10 {
        let bn = b * &n;
        n = DVector::from_iterator(m0.len(), (0..m0.len()).map(|i| (n[i] * m0[i] / bn[i]).sqrt()));
    }
    let bn = b * &n;
    let m = n.component_mul(&bn);
    (n, m)
}

/// Dense system matrix and right-hand side.
pub fn dense_system(grid: &BilateralGrid, target: &[f64], confidence: &[f64], lam: f64) -> (DMatrix<f64>, DVector<f64>) {
    let nv = grid.vertex_coords.len();
    let mut m0 = DVector::zeros(nv);
    let mut s_c = DVector::zeros(nv);
    let mut s_ct = DVector::zeros(nv);
    for (px, &v) in grid.splat_map.iter().enumerate() {
        let v = v as usize;
        m0[v] += 1.0;
        s_c[v] += confidence[px];
        s_ct[v] += confidence[px] * target[px];
    }
    let b = dense_blur(&grid.vertex_coords);
    let (n, m) = bistochastize(&b, &m0);
    let dn = DMatrix::from_diagonal(&n);
    let a = lam * (DMatrix::from_diagonal(&m) - &dn * &b * &dn) + DMatrix::from_diagonal(&s_c);
    (a, s_ct)
}

/// Dense system, right-hand side and the per-pixel direct solution.
pub fn dense_solve(
    grid: &BilateralGrid,
    target: &[f64],
    confidence: &[f64],
    lam: f64,
) -> (DMatrix<f64>, DVector<f64>, Vec<f64>) {
    let (a, b) = dense_system(grid, target, confidence, lam);
    let y = a.clone().lu().solve(&b).expect("dense system is invertible");
    let out = grid.splat_map.iter().map(|&v| y[v as usize]).collect();
    (a, b, out)
}

// ---- head ----

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean BCE, written as `t * softplus(-z) + (1 - t) * softplus(z)`.
pub fn bce(logits: &[f64], target: &[bool]) -> f64 {
    let s: f64 = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| if t { softplus(-z) } else { softplus(z) })
        .sum();
    s / logits.len() as f64
}

/// Loss of a linear head `w . x + b` on row-major features.
pub fn head_loss(
    flat: &[f64],
    features: &[f32],
    dim: usize,
    tf: Option<&[bool]>,
    ts: Option<&[bool]>,
    lambda: f64,
) -> f64 {
    let (w, b) = flat.split_at(dim);
    let logits: Vec<f64> = features
        .chunks(dim)
        .map(|row| row.iter().zip(w).map(|(&x, &wi)| x as f64 * wi).sum::<f64>() + b[0])
        .collect();
    let mut l = 0.0;
    if let Some(t) = tf {
        l += bce(&logits, t);
    }
    if let Some(t) = ts {
        l += lambda * bce(&logits, t);
    }
    l
}

/// Central finite differences of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

// ---- localization ----

/// Flood-fill labelling; labels in order of each component's first pixel.
pub fn flood_labels(mask: &[bool], rows: usize, cols: usize, eight: bool) -> Vec<u32> {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (y, x) = ((i / cols) as isize, (i % cols) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= rows as isize || nx >= cols as isize {
                        continue;
                    }
                    let j = ny as usize * cols + nx as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    labels
}

/// Nearest-neighbour upsampling by patch replication.
pub fn nearest_upsample(values: &[f64], rows: usize, cols: usize, p: usize) -> Vec<f64> {
    let (w, h) = (cols * p, rows * p);
    (0..w * h).map(|i| values[(i / w / p) * cols + (i % w) / p]).collect()
}

// ---- metrics ----

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let mut inter = 0usize;
    let mut area_a = 0usize;
    let mut area_b = 0usize;
    let xmax = a.xmax.max(b.xmax);
    let ymax = a.ymax.max(b.ymax);
    for y in 0..=ymax {
        for x in 0..=xmax {
            let ia = x >= a.xmin && x <= a.xmax && y >= a.ymin && y <= a.ymax;
            let ib = x >= b.xmin && x <= b.xmax && y >= b.ymin && y <= b.ymax;
            area_a += ia as usize;
            area_b += ib as usize;
            inter += (ia && ib) as usize;
        }
    }
    inter as f64 / (area_a + area_b - inter) as f64
}

pub fn corloc(preds: &[Vec<BBox>], gts: &[Vec<BBox>]) -> f64 {
    let mut hit = 0;
    let mut total = 0;
    for (p, g) in preds.iter().zip(gts) {
        if g.is_empty() {
            continue;
        }
        total += 1;
        if p.iter().any(|pb| g.iter().any(|gb| box_iou(pb, gb) > 0.5)) {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

pub fn accuracy(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let mut same = 0;
    for i in 0..gt.values.len() {
        if pred.values[i] == gt.values[i] {
            same += 1;
        }
    }
    same as f64 / gt.values.len() as f64
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for i in 0..gt.values.len() {
        if pred.values[i] && gt.values[i] {
            inter += 1;
        }
        if pred.values[i] || gt.values[i] {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Full sweep over `t = 0..=254` with dataset-level counts; lowest `t` wins ties.
pub fn max_f_beta(soft: &[Vec<u8>], gts: &[BinaryMask], beta_sq: f64) -> (f64, u8) {
    let mut best = (-1.0, 0u8);
    for t in 0..=254u8 {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (s, g) in soft.iter().zip(gts) {
            for (&v, &gv) in s.iter().zip(&g.values) {
                let p = v > t;
                match (p, gv) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / (tp + fneg) as f64;
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
        };
        if f > best.0 {
            best = (f, t);
        }
    }
    best
}

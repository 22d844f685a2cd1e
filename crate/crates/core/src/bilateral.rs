//! Fast bilateral solver.
//!
//! Pixels are splatted onto a sparse 5-D lattice over
//! `(x, y, luma, chroma-b, chroma-r)`, each axis divided by its bandwidth and
//! truncated to an integer. The lattice blur is a `[1 2 1]` stencil along
//! every axis. After bistochastizing the splat/blur operator, the solver
//! minimizes
//!
//! ```text
//! lam * y^T (Dm - Dn B Dn) y + sum_i c_i (S^T y - t)_i^2
//! ```
//!
//! in vertex space with Jacobi-preconditioned conjugate gradient, then
//! slices the vertex values back to pixels.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mask::{BinaryMask, Resolution, SoftMask};

/// Lattice dimensionality: x, y, Y, Cb, Cr.
pub const DIM: usize = 5;
const BISTOCHASTIZE_ITERS: usize = 10;
const DIAG_MIN: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub sigma_spatial: f64,
    pub sigma_luma: f64,
    pub sigma_chroma: f64,
    /// Smoothness weight of the solver objective.
    pub lam: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub binarize_threshold: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            sigma_spatial: 16.0,
            sigma_luma: 16.0,
            sigma_chroma: 8.0,
            lam: 128.0,
            cg_tol: 1e-5,
            cg_max_iters: 25,
            binarize_threshold: 0.5,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma_spatial", self.sigma_spatial),
            ("sigma_luma", self.sigma_luma),
            ("sigma_chroma", self.sigma_chroma),
            ("lam", self.lam),
            ("cg_tol", self.cg_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("solver {name} must be positive, got {v}")));
            }
        }
        if self.cg_max_iters == 0 {
            return Err(Error::Config("solver cg_max_iters must be at least 1".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config(format!(
                "solver binarize_threshold must lie in (0, 1), got {}",
                self.binarize_threshold
            )));
        }
        Ok(())
    }
}

/// ITU-R BT.601 full-range YCbCr.
pub fn rgb_to_ycbcr(rgb: [u8; 3]) -> [f64; 3] {
    let (r, g, b) = (rgb[0] as f64, rgb[1] as f64, rgb[2] as f64);
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b,
        128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b,
    ]
}

/// Integer lattice coordinate of one pixel.
pub fn lattice_coord(x: usize, y: usize, rgb: [u8; 3], params: &SolverParams) -> [i32; DIM] {
    let ycc = rgb_to_ycbcr(rgb);
    [
        (x as f64 / params.sigma_spatial).floor() as i32,
        (y as f64 / params.sigma_spatial).floor() as i32,
        (ycc[0] / params.sigma_luma).floor() as i32,
        (ycc[1] / params.sigma_chroma).floor() as i32,
        (ycc[2] / params.sigma_chroma).floor() as i32,
    ]
}

#[derive(Debug, Clone)]
pub struct BilateralGrid {
    pub width: usize,
    pub height: usize,
    /// Vertex of each pixel, row-major.
    pub splat_map: Vec<u32>,
    pub vertex_coords: Vec<[i32; DIM]>,
    /// CSR adjacency of +-1 lattice neighbours: neighbours of `v` are
    /// `neighbors[neighbor_offsets[v]..neighbor_offsets[v + 1]]`.
    pub neighbor_offsets: Vec<usize>,
    pub neighbors: Vec<u32>,
    /// Bistochastization scales `n` and `m = n * blur(n)`.
    pub bistoch_n: Vec<f64>,
    pub bistoch_m: Vec<f64>,
}

impl BilateralGrid {
    pub fn vertex_count(&self) -> usize {
        self.vertex_coords.len()
    }

    pub fn pixel_count(&self) -> usize {
        self.splat_map.len()
    }

    /// Sum pixel values into their vertices.
    pub fn splat(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.vertex_count()];
        for (&v, &x) in self.splat_map.iter().zip(values) {
            out[v as usize] += x;
        }
        out
    }

    /// Read each pixel's vertex value.
    pub fn slice(&self, vertex_values: &[f64]) -> Vec<f64> {
        self.splat_map.iter().map(|&v| vertex_values[v as usize]).collect()
    }

    /// `[1 2 1]` blur along each lattice axis.
    pub fn blur(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.blur_into(x, &mut out);
        out
    }

    fn blur_into(&self, x: &[f64], out: &mut [f64]) {
        for v in 0..x.len() {
            let mut acc = 2.0 * DIM as f64 * x[v];
            for &j in &self.neighbors[self.neighbor_offsets[v]..self.neighbor_offsets[v + 1]] {
                acc += x[j as usize];
            }
            out[v] = acc;
        }
    }

    fn neighbors_of(&self, v: usize) -> &[u32] {
        &self.neighbors[self.neighbor_offsets[v]..self.neighbor_offsets[v + 1]]
    }

    /// Vertex ids grouped by lattice connectivity.
    fn components(&self) -> Vec<u32> {
        let nv = self.vertex_count();
        let mut label = vec![u32::MAX; nv];
        let mut stack = Vec::new();
        let mut next = 0u32;
        for start in 0..nv {
            if label[start] != u32::MAX {
                continue;
            }
            label[start] = next;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &j in self.neighbors_of(v) {
                    if label[j as usize] == u32::MAX {
                        label[j as usize] = next;
                        stack.push(j as usize);
                    }
                }
            }
            next += 1;
        }
        label
    }
}

pub fn build_grid(reference: &RgbImage, params: &SolverParams) -> Result<BilateralGrid> {
    params.validate()?;
    if reference.width == 0 || reference.height == 0 {
        return Err(Error::Empty("bilateral reference image".into()));
    }
    let n_pixels = reference.width * reference.height;
    let mut index: HashMap<[i32; DIM], u32> = HashMap::new();
    let mut vertex_coords = Vec::new();
    let mut splat_map = Vec::with_capacity(n_pixels);
    for y in 0..reference.height {
        for x in 0..reference.width {
            let c = lattice_coord(x, y, reference.pixel(x, y), params);
            let id = *index.entry(c).or_insert_with(|| {
                vertex_coords.push(c);
                (vertex_coords.len() - 1) as u32
            });
            splat_map.push(id);
        }
    }

    let mut neighbor_offsets = Vec::with_capacity(vertex_coords.len() + 1);
    let mut neighbors = Vec::new();
    neighbor_offsets.push(0);
    for c in &vertex_coords {
        for d in 0..DIM {
            for step in [-1, 1] {
                let mut nc = *c;
                nc[d] += step;
                if let Some(&j) = index.get(&nc) {
                    neighbors.push(j);
                }
            }
        }
        neighbor_offsets.push(neighbors.len());
    }

    let mut grid = BilateralGrid {
        width: reference.width,
        height: reference.height,
        splat_map,
        vertex_coords,
        neighbor_offsets,
        neighbors,
        bistoch_n: Vec::new(),
        bistoch_m: Vec::new(),
    };
    bistochastize(&mut grid);
    Ok(grid)
}

fn bistochastize(grid: &mut BilateralGrid) {
    let counts = grid.splat(&vec![1.0; grid.pixel_count()]);
    let mut n = vec![1.0; grid.vertex_count()];
    for _ in 0..BISTOCHASTIZE_ITERS {
        let bn = grid.blur(&n);
        for ((ni, &mi), &bi) in n.iter_mut().zip(&counts).zip(&bn) {
            *ni = (*ni * mi / bi).sqrt();
        }
    }
    // m is recomputed from n so the smoothness term has exactly zero row sums
    let bn = grid.blur(&n);
    grid.bistoch_m = n.iter().zip(&bn).map(|(a, b)| a * b).collect();
    grid.bistoch_n = n;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
    /// Relative residual before the first and after every iteration.
    pub residual_history: Vec<f64>,
    /// Energy `0.5 y^T A y - b^T y` after every iteration.
    pub energy_history: Vec<f64>,
}

/// The vertex-space system `A y = b` for one target/confidence pair.
pub struct VertexSystem<'a> {
    grid: &'a BilateralGrid,
    lam: f64,
    pub data_weight: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl<'a> VertexSystem<'a> {
    pub fn new(grid: &'a BilateralGrid, target: &[f64], confidence: &[f64], lam: f64) -> Self {
        let weighted: Vec<f64> = target.iter().zip(confidence).map(|(t, c)| t * c).collect();
        Self {
            grid,
            lam,
            data_weight: grid.splat(confidence),
            rhs: grid.splat(&weighted),
        }
    }

    pub fn apply(&self, y: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let n = &self.grid.bistoch_n;
        let m = &self.grid.bistoch_m;
        for (s, (&yi, &ni)) in scratch.iter_mut().zip(y.iter().zip(n)) {
            *s = ni * yi;
        }
        self.grid.blur_into(scratch, out);
        for i in 0..y.len() {
            out[i] = self.lam * (m[i] * y[i] - n[i] * out[i]) + self.data_weight[i] * y[i];
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let n = &self.grid.bistoch_n;
        let m = &self.grid.bistoch_m;
        (0..n.len())
            .map(|i| self.lam * (m[i] - n[i] * n[i] * 2.0 * DIM as f64) + self.data_weight[i])
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_inputs(grid: &BilateralGrid, target: &SoftMask, confidence: &SoftMask) -> Result<()> {
    for (name, m) in [("target", target), ("confidence", confidence)] {
        if m.rows != grid.height || m.cols != grid.width {
            return Err(Error::DimensionMismatch(format!(
                "{name} is {}x{}, reference is {}x{}",
                m.cols, m.rows, grid.width, grid.height
            )));
        }
    }
    if let Some(index) = target.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "solver target".into(),
            index,
        });
    }
    if let Some(index) = confidence.values.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite {
            what: "solver confidence (finite, non-negative)".into(),
            index,
        });
    }
    Ok(())
}

/// Solve and return unclamped per-pixel values with the CG report. A run
/// that hits `cg_max_iters` returns its last iterate with `converged = false`.
pub fn solve_unclamped(
    grid: &BilateralGrid,
    target: &SoftMask,
    confidence: &SoftMask,
    params: &SolverParams,
) -> Result<(Vec<f64>, SolveReport)> {
    params.validate()?;
    check_inputs(grid, target, confidence)?;
    let system = VertexSystem::new(grid, &target.values, &confidence.values, params.lam);

    // Every lattice component needs some data weight or A is singular there.
    let labels = grid.components();
    let n_comp = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut weighted = vec![false; n_comp];
    for (&l, &w) in labels.iter().zip(&system.data_weight) {
        if w > 0.0 {
            weighted[l as usize] = true;
        }
    }
    if weighted.iter().any(|w| !w) {
        return Err(Error::Singular(if weighted.iter().all(|w| !w) {
            "confidence is zero everywhere".into()
        } else {
            "a disconnected region of the bilateral grid has zero confidence".into()
        }));
    }

    let (y, report) = pcg(&system, params)?;
    Ok((grid.slice(&y), report))
}

fn pcg(system: &VertexSystem<'_>, params: &SolverParams) -> Result<(Vec<f64>, SolveReport)> {
    let nv = system.rhs.len();
    let b = &system.rhs;
    let b_norm = dot(b, b).sqrt();
    let inv_diag: Vec<f64> = system
        .diagonal()
        .iter()
        .map(|&d| 1.0 / d.max(DIAG_MIN))
        .collect();

    if b_norm == 0.0 {
        return Ok((
            vec![0.0; nv],
            SolveReport {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
                residual_history: vec![0.0],
                energy_history: Vec::new(),
            },
        ));
    }

    // flat initialization: per-vertex weighted mean of the target
    let mut y: Vec<f64> = b
        .iter()
        .zip(&system.data_weight)
        .map(|(&bi, &wi)| if wi > 0.0 { bi / wi } else { 0.0 })
        .collect();
    let mut scratch = vec![0.0; nv];
    let mut ay = vec![0.0; nv];
    system.apply(&y, &mut ay, &mut scratch);
    let mut r: Vec<f64> = b.iter().zip(&ay).map(|(bi, ai)| bi - ai).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; nv];

    let mut rel = dot(&r, &r).sqrt() / b_norm;
    let mut residual_history = vec![rel];
    let mut energy_history = Vec::new();
    let mut iterations = 0;
    while rel > params.cg_tol && iterations < params.cg_max_iters {
        system.apply(&p, &mut ap, &mut scratch);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..nv {
            y[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..nv {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..nv {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
        rel = dot(&r, &r).sqrt() / b_norm;
        residual_history.push(rel);
        // 0.5 y^T A y - b^T y = -0.5 (b + r)^T y since A y = b - r
        energy_history.push(-0.5 * y.iter().zip(b.iter().zip(&r)).map(|(yi, (bi, ri))| yi * (bi + ri)).sum::<f64>());
    }
    if let Some(index) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "solver iterate".into(),
            index,
        });
    }
    Ok((
        y,
        SolveReport {
            iterations,
            relative_residual: rel,
            converged: rel <= params.cg_tol,
            residual_history,
            energy_history,
        },
    ))
}

/// Solve to `cg_tol`, clamped to `[0, 1]`. Fails if CG does not reach the
/// tolerance within `cg_max_iters`.
pub fn solve(
    grid: &BilateralGrid,
    target: &SoftMask,
    confidence: &SoftMask,
    params: &SolverParams,
) -> Result<SoftMask> {
    let (values, report) = solve_unclamped(grid, target, confidence, params)?;
    if !report.converged {
        return Err(Error::NotConverged {
            iterations: report.iterations,
            residual: report.relative_residual,
        });
    }
    Ok(clamped(grid, values))
}

/// Like [`solve`], but accepts the iterate reached after `cg_max_iters`.
pub fn solve_truncated(
    grid: &BilateralGrid,
    target: &SoftMask,
    confidence: &SoftMask,
    params: &SolverParams,
) -> Result<(SoftMask, SolveReport)> {
    let (values, report) = solve_unclamped(grid, target, confidence, params)?;
    Ok((clamped(grid, values), report))
}

fn clamped(grid: &BilateralGrid, values: Vec<f64>) -> SoftMask {
    SoftMask {
        resolution: Resolution::Pixel,
        rows: grid.height,
        cols: grid.width,
        values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    }
}

/// A grid prepared for one reference image, reusable across masks.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub grid: BilateralGrid,
    pub params: SolverParams,
}

impl Refiner {
    pub fn new(reference: &RgbImage, params: &SolverParams) -> Result<Self> {
        Ok(Self {
            grid: build_grid(reference, params)?,
            params: *params,
        })
    }

    /// Smooth with unit confidence and threshold. Truncated CG runs are
    /// accepted, matching how the solver is used as a fixed-budget filter.
    pub fn refine(&self, mask: &SoftMask) -> Result<BinaryMask> {
        Ok(self.refine_soft(mask)?.binarize(self.params.binarize_threshold))
    }

    pub fn refine_soft(&self, mask: &SoftMask) -> Result<SoftMask> {
        let confidence = SoftMask::filled(Resolution::Pixel, mask.rows, mask.cols, 1.0);
        let (out, report) = solve_truncated(&self.grid, mask, &confidence, &self.params)?;
        if !report.converged {
            log::trace!(
                "bilateral solve stopped at {} iterations, relative residual {:.2e}",
                report.iterations,
                report.relative_residual
            );
        }
        Ok(out)
    }
}

pub fn refine(reference: &RgbImage, mask: &SoftMask, params: &SolverParams) -> Result<BinaryMask> {
    Refiner::new(reference, params)?.refine(mask)
}

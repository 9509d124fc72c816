//! Finite-difference reference solver for static IR drop.
//!
//! Solves `-div(sigma · grad u) = J` for the drop `u = vdd - V` on the pixel
//! grid: 5-point stencil, harmonic-mean edge conductances, zero-flux outer
//! boundary and Dirichlet pads where `u = 0`. The reduced system over
//! non-pad pixels is symmetric positive definite and is solved with plain
//! conjugate gradients.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;

#[derive(Debug, Clone, PartialEq)]
pub struct PdeProblem {
    pub sigma: Grid2D,
    pub current: Grid2D,
    pub vdd: f64,
    pub pads: BTreeSet<(usize, usize)>,
}

/// The four corner pixels of an `height × width` grid.
pub fn corner_pads(height: usize, width: usize) -> BTreeSet<(usize, usize)> {
    [(0, 0), (0, width - 1), (height - 1, 0), (height - 1, width - 1)]
        .into_iter()
        .collect()
}

impl PdeProblem {
    /// A problem with the default supply of 1.0 and corner pads.
    pub fn with_corner_pads(sigma: Grid2D, current: Grid2D) -> Self {
        let pads = corner_pads(sigma.height(), sigma.width());
        Self {
            sigma,
            current,
            vdd: 1.0,
            pads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sigma.ensure_same_shape(&self.current)?;
        let (h, w) = self.sigma.shape();
        if self.sigma.min() <= 0.0 {
            return Err(Error::InvalidProblem("conductivity must be strictly positive".into()));
        }
        if self.current.min() < 0.0 {
            return Err(Error::InvalidProblem("current density must be nonnegative".into()));
        }
        if !self.vdd.is_finite() {
            return Err(Error::InvalidProblem("vdd must be finite".into()));
        }
        if self.pads.is_empty() {
            return Err(Error::InvalidProblem("at least one pad is required".into()));
        }
        if let Some(&(r, c)) = self.pads.iter().find(|&&(r, c)| r >= h || c >= w) {
            return Err(Error::InvalidProblem(format!("pad ({r}, {c}) outside {h}x{w} grid")));
        }
        if self.pads.len() == h * w {
            return Err(Error::InvalidProblem("every pixel is a pad; nothing to solve".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 20_000,
        }
    }
}

fn harmonic_mean(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// The reduced system over non-pad pixels in CSR form.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    height: usize,
    width: usize,
    /// Pixel index of each unknown.
    pixels: Vec<usize>,
    /// Unknown index of each pixel, `None` for pads.
    unknowns: Vec<Option<usize>>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl LinearSystem {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Unknown index for pixel `(row, col)`, or `None` if it is a pad.
    pub fn unknown_at(&self, row: usize, col: usize) -> Option<usize> {
        self.unknowns[row * self.width + col]
    }

    /// `(col, value)` entries of one matrix row, diagonal included.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(j, a)| a * x[j]).sum();
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut row = vec![0.0; n];
                for (j, a) in self.row(i) {
                    row[j] += a;
                }
                row
            })
            .collect()
    }

    /// Scatters a solution vector back onto the grid, pads set to zero.
    pub fn to_grid(&self, x: &[f64]) -> Grid2D {
        let mut values = vec![0.0; self.height * self.width];
        for (&p, &v) in self.pixels.iter().zip(x) {
            values[p] = v;
        }
        Grid2D::new(self.height, self.width, values).expect("finite solution")
    }
}

pub fn assemble_system(p: &PdeProblem) -> Result<LinearSystem> {
    p.validate()?;
    let (h, w) = p.sigma.shape();
    let mut unknowns = vec![None; h * w];
    let mut pixels = Vec::with_capacity(h * w - p.pads.len());
    for idx in 0..h * w {
        if !p.pads.contains(&(idx / w, idx % w)) {
            unknowns[idx] = Some(pixels.len());
            pixels.push(idx);
        }
    }

    let sigma = p.sigma.values();
    let mut row_ptr = Vec::with_capacity(pixels.len() + 1);
    let mut cols = Vec::with_capacity(pixels.len() * 5);
    let mut vals = Vec::with_capacity(pixels.len() * 5);
    let mut rhs = Vec::with_capacity(pixels.len());
    row_ptr.push(0);
    for (i, &idx) in pixels.iter().enumerate() {
        let (r, c) = (idx / w, idx % w);
        let neighbors = [
            (r > 0).then(|| idx - w),
            (r + 1 < h).then(|| idx + w),
            (c > 0).then(|| idx - 1),
            (c + 1 < w).then(|| idx + 1),
        ];
        let diag_pos = cols.len();
        cols.push(i);
        vals.push(0.0);
        let mut diag = 0.0;
        for q in neighbors.into_iter().flatten() {
            let g = harmonic_mean(sigma[idx], sigma[q]);
            diag += g;
            if let Some(j) = unknowns[q] {
                cols.push(j);
                vals.push(-g);
            }
        }
        vals[diag_pos] = diag;
        rhs.push(p.current.values()[idx]);
        row_ptr.push(cols.len());
    }

    Ok(LinearSystem {
        height: h,
        width: w,
        pixels,
        unknowns,
        row_ptr,
        cols,
        vals,
        rhs,
    })
}

#[derive(Debug, Clone)]
pub struct PdeSolution {
    /// `vdd - V` per pixel; zero on pads.
    pub ir_drop: Grid2D,
    pub iterations: usize,
    pub relative_residual: f64,
}

impl PdeSolution {
    /// Node voltages `V = vdd - drop`.
    pub fn voltage(&self, vdd: f64) -> Grid2D {
        self.ir_drop.map(|u| vdd - u)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn true_residual(sys: &LinearSystem, x: &[f64], r: &mut [f64]) {
    sys.matvec(x, r);
    for (ri, bi) in r.iter_mut().zip(&sys.rhs) {
        *ri = bi - *ri;
    }
}

pub fn solve_pde(p: &PdeProblem, cfg: &SolverConfig) -> Result<PdeSolution> {
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {}", cfg.tol)));
    }
    let sys = assemble_system(p)?;
    let n = sys.len();
    let b_norm = dot(&sys.rhs, &sys.rhs).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(PdeSolution {
            ir_drop: sys.to_grid(&x),
            iterations: 0,
            relative_residual: 0.0,
        });
    }

    let mut r = sys.rhs.clone();
    let mut d = r.clone();
    let mut ad = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    loop {
        if rr.sqrt() / b_norm <= cfg.tol {
            // the recurrence drifts from b - Ax; only stop on the true residual
            true_residual(&sys, &x, &mut r);
            rr = dot(&r, &r);
            let rel = rr.sqrt() / b_norm;
            if rel <= cfg.tol {
                return Ok(PdeSolution {
                    ir_drop: sys.to_grid(&x),
                    iterations,
                    relative_residual: rel,
                });
            }
            d.copy_from_slice(&r);
        }
        if iterations >= cfg.max_iter {
            true_residual(&sys, &x, &mut r);
            return Err(Error::Convergence {
                iterations,
                residual: dot(&r, &r).sqrt() / b_norm,
            });
        }
        sys.matvec(&d, &mut ad);
        let alpha = rr / dot(&d, &ad);
        for i in 0..n {
            x[i] += alpha * d[i];
            r[i] -= alpha * ad[i];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = ri + beta * *di;
        }
        rr = rr_next;
        iterations += 1;
    }
}

/// Builds the cross-check problem for a sample: conductivity from the power
/// grid map, current from density times switching, corner pads.
pub fn problem_from_maps(power_grid: &Grid2D, cell_density: &Grid2D, switching: &Grid2D) -> Result<PdeProblem> {
    let current = cell_density.zip_map(switching, |d, s| d * s)?;
    power_grid.ensure_same_shape(&current)?;
    Ok(PdeProblem::with_corner_pads(power_grid.clone(), current))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// `None` when either map is constant.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub degenerate: bool,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Fractional ranks (ties share their average rank), 1-based.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            out[k] = avg;
        }
        start = end;
    }
    out
}

pub fn compare_labels(synthetic: &Grid2D, physical: &Grid2D) -> Result<CorrelationReport> {
    synthetic.ensure_same_shape(physical)?;
    let p = pearson(synthetic.values(), physical.values());
    let s = pearson(&ranks(synthetic.values()), &ranks(physical.values()));
    Ok(CorrelationReport {
        pearson: p,
        spearman: s,
        degenerate: p.is_none() || s.is_none(),
    })
}

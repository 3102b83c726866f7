//! Extension norms, localized restriction reports, cube-adjusted weighted
//! norms, decoupling checks, and the mixed-norm inequality.
//!
//! The extension of a density g on the deepest nodes is
//!
//! ```text
//! (ĝdμ_k)(x) = T_k⁻¹ · Π_i box̂(x_i/N_k) · Σ_b g(b) e^{-2πi (b·x)/N_k}
//! ```
//!
//! Restriction reports measure ‖ĝdμ_k‖_{L^p(J)}/‖g‖_{L²(μ_k)} over an
//! N_k-cube J for several densities g and compare against the predicted
//! bound C₀^k N_k^{d/p} T_k^{-1/2}. Since the true operator norm is a sup
//! over all g, every measured ratio is a lower bound on it.
//!
//! Weighted norms use the cube-adjusted weight `w_I(x) = (1+|x-c|/R)^{-100}`
//! for an R-cube I centered at c. This weight is extremely concentrated
//! (it falls below 1e-18 within half a cube side), so weighted integrals are
//! evaluated by adaptive subdivision rather than fixed-spacing quadrature.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cantor::CantorStage;
use crate::error::{Error, Result};
use crate::quad::{box_transform, box_transform_d, MidpointGrid, GRID_POINT_BUDGET};

const TAU: f64 = std::f64::consts::TAU;

/// Fixed weight decay exponent.
pub const WEIGHT_EXPONENT: f64 = 100.0;

/// Axis-aligned cube given by corner and side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub corner: Vec<f64>,
    pub side: f64,
}

impl Cube {
    pub fn new(corner: Vec<f64>, side: f64) -> Result<Self> {
        if side <= 0.0 {
            return Err(Error::BadCubeSide(side));
        }
        Ok(Cube { corner, side })
    }

    pub fn dim(&self) -> usize {
        self.corner.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.corner.iter().map(|&c| c + 0.5 * self.side).collect()
    }

    /// Cube with the same center, side scaled by `factor`.
    pub fn dilated(&self, factor: f64) -> Cube {
        let center = self.center();
        Cube {
            corner: center
                .iter()
                .map(|&c| c - 0.5 * factor * self.side)
                .collect(),
            side: factor * self.side,
        }
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.dim() as i32)
    }
}

/// Cube-adjusted weight `(1 + |x - c|/R)^{-exponent}`.
pub fn cube_weight(x: &[f64], center: &[f64], side: f64, exponent: f64) -> f64 {
    let dist = x
        .iter()
        .zip(center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    (1.0 + dist / side).powf(-exponent)
}

/// Complex weight per deepest-level node (g constant on each N_k⁻¹-cube).
#[derive(Debug, Clone)]
pub struct DensityOnStage {
    pub values: Vec<Complex64>,
}

impl DensityOnStage {
    pub fn from_values(stage: &CantorStage, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != stage.deepest().len() {
            return Err(Error::CoefficientMismatch {
                coeffs: values.len(),
                elements: stage.deepest().len(),
            });
        }
        Ok(DensityOnStage { values })
    }

    pub fn ones(stage: &CantorStage) -> Self {
        DensityOnStage {
            values: vec![Complex64::new(1.0, 0.0); stage.deepest().len()],
        }
    }

    /// i.i.d. ±1 signs on the nodes (already unit-normalized in L²(μ)).
    pub fn random_signs(stage: &CantorStage, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DensityOnStage {
            values: (0..stage.deepest().len())
                .map(|_| Complex64::new(if rng.gen::<bool>() { 1.0 } else { -1.0 }, 0.0))
                .collect(),
        }
    }

    /// Normalized indicator of the descendants of the first level-1 node
    /// (a Knapp-type concentrated density). Falls back to `ones` at depth 0.
    pub fn knapp_concentrated(stage: &CantorStage) -> Self {
        let k = stage.depth();
        if k == 0 {
            return DensityOnStage::ones(stage);
        }
        let t1 = stage.plan().t_seq[0] as f64;
        let weight = t1.sqrt();
        let values = (0..stage.deepest().len())
            .map(|i| {
                let mut idx = i;
                for level in (2..=k).rev() {
                    idx = stage.parent_index(level, idx);
                }
                if idx == 0 {
                    Complex64::new(weight, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        DensityOnStage { values }
    }

    /// ‖g‖_{L²(μ_k)} = (T_k⁻¹ Σ |g(a)|²)^{1/2}.
    pub fn l2_mu_norm(&self, stage: &CantorStage) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() / stage.t_k() as f64).sqrt()
    }

    pub fn normalized(mut self, stage: &CantorStage) -> Self {
        let n = self.l2_mu_norm(stage);
        if n > 0.0 {
            for v in &mut self.values {
                *v /= n;
            }
        }
        self
    }
}

/// Precomputed evaluation kernel for the extension operator of one stage.
pub struct ExtensionKernel<'a> {
    stage: &'a CantorStage,
    /// Deepest corners scaled to [0,1)^d, flattened.
    scaled: Vec<f64>,
    inv_t: f64,
}

impl<'a> ExtensionKernel<'a> {
    pub fn new(stage: &'a CantorStage) -> Self {
        let nk = stage.n_k() as f64;
        let scaled = stage
            .deepest()
            .iter()
            .flat_map(|b| b.iter().map(move |&c| c as f64 / nk))
            .collect();
        ExtensionKernel {
            stage,
            scaled,
            inv_t: 1.0 / stage.t_k() as f64,
        }
    }

    /// (ĝdμ_k)(x).
    pub fn eval(&self, g: &[Complex64], x: &[f64]) -> Complex64 {
        let dim = self.stage.dim();
        let nk = self.stage.n_k() as f64;
        let boxed: Vec<f64> = x.iter().map(|&c| c / nk).collect();
        let mut sum = Complex64::new(0.0, 0.0);
        for (i, gv) in g.iter().enumerate() {
            if gv.re == 0.0 && gv.im == 0.0 {
                continue;
            }
            let b = &self.scaled[i * dim..(i + 1) * dim];
            let phase: f64 = b.iter().zip(x).map(|(&bi, &xi)| bi * xi).sum();
            sum += gv * Complex64::cis(-TAU * phase);
        }
        box_transform_d(&boxed) * sum * self.inv_t
    }

    /// Adjoint applied to grid samples w (already carrying quadrature
    /// weights): z_b = Σ_x w(x) conj(K(x, b)).
    fn adjoint(&self, grid: &MidpointGrid, w: &[Complex64]) -> Vec<Complex64> {
        let dim = self.stage.dim();
        let nk = self.stage.n_k() as f64;
        (0..self.stage.deepest().len())
            .into_par_iter()
            .map(|i| {
                let b = &self.scaled[i * dim..(i + 1) * dim];
                let mut x = vec![0.0; dim];
                let mut acc = Complex64::new(0.0, 0.0);
                for (flat, wv) in w.iter().enumerate() {
                    if wv.re == 0.0 && wv.im == 0.0 {
                        continue;
                    }
                    grid.point(flat, &mut x);
                    let boxed: Vec<f64> = x.iter().map(|&c| c / nk).collect();
                    let phase: f64 = b.iter().zip(&x).map(|(&bi, &xi)| bi * xi).sum();
                    acc += wv
                        * (box_transform_d(&boxed) * self.inv_t).conj()
                        * Complex64::cis(TAU * phase);
                }
                acc
            })
            .collect()
    }

    fn grid_values(&self, g: &[Complex64], grid: &MidpointGrid) -> Vec<Complex64> {
        let dim = self.stage.dim();
        (0..grid.len())
            .into_par_iter()
            .map(|flat| {
                let mut x = vec![0.0; dim];
                grid.point(flat, &mut x);
                self.eval(g, &x)
            })
            .collect()
    }
}

fn lp_of_grid_values(values: &[Complex64], p: f64, cell_volume: f64) -> f64 {
    let sum: f64 = values.iter().map(|v| v.norm().powf(p)).sum();
    (sum * cell_volume).powf(1.0 / p)
}

/// ‖ĝdμ_k‖_{L^p(J)} by midpoint quadrature over J, refined by spacing
/// halving until two successive values agree within 1e-3 relative (the
/// integrand has frequency support in [0,1]^d, so spacing 1/4 already
/// controls the sup error; refinement guards the p-th power).
pub fn extension_norm(
    stage: &CantorStage,
    g: &DensityOnStage,
    p: f64,
    j_cube: &Cube,
    spacing: f64,
) -> Result<f64> {
    if p < 1.0 {
        return Err(Error::InvalidExponent {
            p,
            reason: "need p ≥ 1",
        });
    }
    if spacing <= 0.0 || spacing > 0.5 {
        return Err(Error::InvalidSpacing {
            spacing,
            max_allowed: 0.5,
        });
    }
    if j_cube.side <= 0.0 {
        return Err(Error::BadCubeSide(j_cube.side));
    }
    if g.values.len() != stage.deepest().len() {
        return Err(Error::CoefficientMismatch {
            coeffs: g.values.len(),
            elements: stage.deepest().len(),
        });
    }
    let kernel = ExtensionKernel::new(stage);
    let dim = stage.dim();
    let mut h = spacing;
    let grid = MidpointGrid::over_cube(&j_cube.corner, j_cube.side, h)?;
    let mut prev = lp_of_grid_values(&kernel.grid_values(&g.values, &grid), p, grid.cell_volume());
    loop {
        h /= 2.0;
        let pts = (j_cube.side / h).ceil().powi(dim as i32);
        if pts > GRID_POINT_BUDGET as f64 {
            return Ok(prev);
        }
        let grid = MidpointGrid::over_cube(&j_cube.corner, j_cube.side, h)?;
        let next = lp_of_grid_values(&kernel.grid_values(&g.values, &grid), p, grid.cell_volume());
        let rel = (next - prev).abs() / next.abs().max(1e-300);
        prev = next;
        if rel < 1e-3 {
            return Ok(prev);
        }
    }
}

/// Density strategies probed by [`restriction_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GKind {
    Ones,
    RandomSigns,
    KnappConcentrated,
    PowerIterated,
}

impl GKind {
    pub const ALL: [GKind; 4] = [
        GKind::Ones,
        GKind::RandomSigns,
        GKind::KnappConcentrated,
        GKind::PowerIterated,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GKind::Ones => "ones",
            GKind::RandomSigns => "random_signs",
            GKind::KnappConcentrated => "knapp_concentrated",
            GKind::PowerIterated => "power_iterated",
        }
    }
}

/// Measured localized-restriction ratio against the predicted bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestrictionReport {
    pub p: f64,
    pub k: usize,
    pub cube: Cube,
    pub measured_norm: f64,
    /// measured_norm / ‖g‖_{L²(μ_k)}; a lower bound on the operator norm.
    pub measured_ratio: f64,
    /// C₀^k N_k^{d/p} T_k^{-1/2} with the recorded C₀.
    pub paper_bound: f64,
    pub c0: f64,
    pub g_kind: GKind,
}

/// Tunables for restriction measurements.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RestrictionOpts {
    pub spacing: f64,
    pub power_starts: usize,
    pub power_iters: usize,
}

impl Default for RestrictionOpts {
    fn default() -> Self {
        RestrictionOpts {
            spacing: 0.25,
            power_starts: 2,
            power_iters: 12,
        }
    }
}

/// Maximize ‖ĝdμ_k‖_{L^p(J)} over ‖g‖_{L²(μ_k)} = 1 by nonlinear power
/// iteration on the discretized extension operator. Returns the best density
/// found; the achieved ratio is a lower bound on the true operator norm.
pub fn power_iterate_extension(
    stage: &CantorStage,
    p: f64,
    j_cube: &Cube,
    seed: u64,
    opts: &RestrictionOpts,
) -> Result<DensityOnStage> {
    let kernel = ExtensionKernel::new(stage);
    let grid = MidpointGrid::over_cube(&j_cube.corner, j_cube.side, opts.spacing)?;
    let h = grid.cell_volume();
    let t = stage.deepest().len();
    let mut best_ratio = -1.0;
    let mut best: Vec<Complex64> = vec![Complex64::new(1.0, 0.0); t];
    for start in 0..opts.power_starts.max(1) {
        let mut g: Vec<Complex64> = if start == 0 {
            vec![Complex64::new(1.0, 0.0); t]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(start as u64);
            (0..t)
                .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
                .collect()
        };
        normalize_mu(stage, &mut g);
        for _ in 0..opts.power_iters {
            let values = kernel.grid_values(&g, &grid);
            let ratio = lp_of_grid_values(&values, p, h);
            if ratio > best_ratio {
                best_ratio = ratio;
                best = g.clone();
            }
            let w: Vec<Complex64> = values
                .iter()
                .map(|f| {
                    let r = f.norm();
                    if r == 0.0 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        f * r.powf(p - 2.0) * h
                    }
                })
                .collect();
            g = kernel.adjoint(&grid, &w);
            normalize_mu(stage, &mut g);
        }
        let values = kernel.grid_values(&g, &grid);
        let ratio = lp_of_grid_values(&values, p, h);
        if ratio > best_ratio {
            best_ratio = ratio;
            best = g;
        }
    }
    DensityOnStage::from_values(stage, best)
}

fn normalize_mu(stage: &CantorStage, g: &mut [Complex64]) {
    let n = (g.iter().map(|v| v.norm_sqr()).sum::<f64>() / stage.t_k() as f64).sqrt();
    if n > 0.0 {
        for v in g.iter_mut() {
            *v /= n;
        }
    }
}

/// One report per strategy. `J` must be an N_k-cube (corner arbitrary);
/// `c0` is the configured single-scale constant entering the predicted bound.
pub fn restriction_report(
    stage: &CantorStage,
    p: f64,
    j_cube: &Cube,
    strategies: &[GKind],
    seed: u64,
    c0: f64,
    opts: &RestrictionOpts,
) -> Result<Vec<RestrictionReport>> {
    if p <= 2.0 {
        return Err(Error::InvalidExponent {
            p,
            reason: "need p > 2",
        });
    }
    let nk = stage.n_k() as f64;
    if (j_cube.side - nk).abs() > 1e-9 * nk.max(1.0) {
        return Err(Error::CubeSideMismatch {
            side: j_cube.side,
            required: nk,
        });
    }
    if j_cube.dim() != stage.dim() {
        return Err(Error::DimensionMismatch {
            expected: stage.dim(),
            got: j_cube.dim(),
        });
    }
    let k = stage.depth();
    let d = stage.dim() as f64;
    let paper_bound = c0.powi(k as i32) * nk.powf(d / p) / (stage.t_k() as f64).sqrt();
    strategies
        .iter()
        .map(|&g_kind| {
            let g = match g_kind {
                GKind::Ones => DensityOnStage::ones(stage),
                GKind::RandomSigns => DensityOnStage::random_signs(stage, seed),
                GKind::KnappConcentrated => DensityOnStage::knapp_concentrated(stage),
                GKind::PowerIterated => power_iterate_extension(stage, p, j_cube, seed, opts)?,
            }
            .normalized(stage);
            let measured_norm = extension_norm(stage, &g, p, j_cube, opts.spacing)?;
            Ok(RestrictionReport {
                p,
                k,
                cube: j_cube.clone(),
                measured_norm,
                measured_ratio: measured_norm, // ‖g‖_{L²(μ)} = 1 after normalization
                paper_bound,
                c0,
                g_kind,
            })
        })
        .collect()
}

/// Weighted norm specification: `(|I|⁻¹ ∫ |f|^p w_I)^{1/p}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedNormSpec {
    pub cube: Cube,
    pub weight_exponent: f64,
    pub norm_order: f64,
}

impl WeightedNormSpec {
    pub fn new(cube: Cube, norm_order: f64) -> Self {
        WeightedNormSpec {
            cube,
            weight_exponent: WEIGHT_EXPONENT,
            norm_order,
        }
    }
}

/// A function sampled on a regular grid (row-major values).
#[derive(Debug, Clone)]
pub struct GridFunction {
    pub corner: Vec<f64>,
    pub spacing: f64,
    pub shape: Vec<usize>,
    pub values: Vec<Complex64>,
}

impl GridFunction {
    /// Sample `f` on a grid covering `cube` with the given spacing.
    pub fn sample<F>(cube: &Cube, spacing: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Complex64,
    {
        let grid = MidpointGrid::over_cube(&cube.corner, cube.side, spacing)?;
        let dim = grid.dim();
        let mut values = Vec::with_capacity(grid.len());
        let mut x = vec![0.0; dim];
        for flat in 0..grid.len() {
            grid.point(flat, &mut x);
            values.push(f(&x));
        }
        Ok(GridFunction {
            corner: grid.corner.clone(),
            spacing: grid.spacing,
            shape: grid.pts_per_axis.clone(),
            values,
        })
    }
}

/// `(|I|⁻¹ ∫ |f|^p w_I)^{1/p}` for a sampled f, treating f as piecewise
/// constant on its sample cells and integrating the weight exactly over each
/// cell (adaptive radial integration — the weight is far too concentrated
/// for fixed-spacing quadrature).
///
/// The grid must cover the weight cube dilated by factor 8; the tail beyond
/// that contributes a relative error below 1e-4 at exponent 100.
pub fn weighted_lp_norm(f: &GridFunction, spec: &WeightedNormSpec) -> Result<f64> {
    let dim = spec.cube.dim();
    if f.corner.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: f.corner.len(),
        });
    }
    let required = spec.cube.dilated(8.0);
    for i in 0..dim {
        let cover_lo = f.corner[i];
        let cover_hi = f.corner[i] + f.shape[i] as f64 * f.spacing;
        if cover_lo > required.corner[i] + 1e-9
            || cover_hi < required.corner[i] + required.side - 1e-9
        {
            return Err(Error::GridCoverage {
                required_factor: 8.0,
            });
        }
    }
    let center = spec.cube.center();
    let side = spec.cube.side;
    let exponent = spec.weight_exponent;
    let p = spec.norm_order;
    let weight = |x: &[f64]| cube_weight(x, &center, side, exponent);
    let cell_vol = f.spacing.powi(dim as i32);

    let strides: Vec<usize> = {
        let mut s = vec![1usize; dim];
        for i in (0..dim.saturating_sub(1)).rev() {
            s[i] = s[i + 1] * f.shape[i + 1];
        }
        s
    };
    // collect the cells that can contribute, with their boxes
    let kept: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..f.values.len())
        .into_par_iter()
        .filter_map(|flat| {
            let fv = f.values[flat].norm();
            if fv == 0.0 {
                return None;
            }
            let mut idx = flat;
            let mut lo = vec![0.0; dim];
            let mut hi = vec![0.0; dim];
            for i in 0..dim {
                let c = idx / strides[i];
                idx %= strides[i];
                lo[i] = f.corner[i] + c as f64 * f.spacing;
                hi[i] = lo[i] + f.spacing;
            }
            let (near, _) = crate::quad::box_distance_range(&center, &lo, &hi);
            if (1.0 + near / side).powf(-exponent) < 1e-30 {
                return None;
            }
            Some((fv, lo, hi))
        })
        .collect();
    if kept.is_empty() {
        return Ok(0.0);
    }
    // coarse pass fixes the tolerance scale; the refinement budget is spread
    // uniformly over the retained cells
    let coarse: f64 = kept
        .iter()
        .map(|(fv, lo, hi)| {
            let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
            fv.powf(p) * weight(&mid) * cell_vol
        })
        .sum();
    let tol = coarse.abs().max(1e-300) * 1e-7 / kept.len() as f64;
    let per_cell: Vec<f64> = kept
        .par_iter()
        .map(|(fv, lo, hi)| fv.powf(p) * adaptive_cell(&weight, lo, hi, tol, 18))
        .collect();
    let total: f64 = per_cell.iter().sum();
    Ok((total / spec.cube.volume()).powf(1.0 / p))
}

/// Adaptive integral of `|f|^p · w` over a region, refining wherever the
/// one-level bisection estimate disagrees with the midpoint estimate.
/// Initial cells have side ≤ 1/4 and are aligned so the weight center is a
/// cell center; cells where the weight upper bound is below 1e-30 are skipped.
fn adaptive_weighted_lp_integral<F>(
    f_abs: &F,
    wcenter: &[f64],
    wside: f64,
    exponent: f64,
    region: &Cube,
    p: f64,
) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = wcenter.len();
    let cell = 0.25;
    // per-axis index range of cells (centered on wcenter) covering the region
    let lo_idx: Vec<i64> = (0..dim)
        .map(|i| ((region.corner[i] - wcenter[i]) / cell - 0.5).floor() as i64)
        .collect();
    let hi_idx: Vec<i64> = (0..dim)
        .map(|i| ((region.corner[i] + region.side - wcenter[i]) / cell + 0.5).ceil() as i64)
        .collect();
    let counts: Vec<usize> = (0..dim).map(|i| (hi_idx[i] - lo_idx[i]) as usize).collect();
    let total_cells: usize = counts.iter().product();
    let profile = move |dist: f64| (1.0 + dist / wside).powf(-exponent);

    let g = |x: &[f64]| {
        let dist = x
            .iter()
            .zip(wcenter)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        f_abs(x).powf(p) * profile(dist)
    };

    let cell_bounds = |flat: usize| {
        let mut idx = flat;
        let mut lo = vec![0.0; dim];
        let mut hi = vec![0.0; dim];
        for i in (0..dim).rev() {
            let c = idx % counts[i];
            idx /= counts[i];
            // cell centers at wcenter + (integer index)·cell
            lo[i] = wcenter[i] + (lo_idx[i] + c as i64) as f64 * cell - 0.5 * cell;
            hi[i] = lo[i] + cell;
        }
        (lo, hi)
    };

    // coarse pass fixes the adaptive tolerance scale; both passes add their
    // per-cell terms in cell order so results are thread-count independent
    let coarse_terms: Vec<f64> = (0..total_cells)
        .into_par_iter()
        .map(|flat| {
            let (lo, hi) = cell_bounds(flat);
            let (near, _) = crate::quad::box_distance_range(wcenter, &lo, &hi);
            if profile(near) < 1e-30 {
                return 0.0;
            }
            let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
            g(&mid) * cell.powi(dim as i32)
        })
        .collect();
    let coarse: f64 = coarse_terms.iter().sum();
    let tol_per_cell = coarse.abs().max(1e-300) * 1e-6 / total_cells as f64;

    let terms: Vec<f64> = (0..total_cells)
        .into_par_iter()
        .map(|flat| {
            let (lo, hi) = cell_bounds(flat);
            let (near, _) = crate::quad::box_distance_range(wcenter, &lo, &hi);
            if profile(near) < 1e-30 {
                return 0.0;
            }
            adaptive_cell(&g, &lo, &hi, tol_per_cell, 14)
        })
        .collect();
    terms.iter().sum()
}

/// Tensor-product 2-point Gauss rule on a box (degree-3 exact per axis).
fn gauss2_box<G>(g: &G, lo: &[f64], hi: &[f64]) -> f64
where
    G: Fn(&[f64]) -> f64,
{
    let dim = lo.len();
    let vol: f64 = lo.iter().zip(hi).map(|(a, b)| b - a).product();
    let offset = 0.5 / 3f64.sqrt();
    let mut sum = 0.0;
    let nodes = 1usize << dim;
    let mut x = vec![0.0; dim];
    for mask in 0..nodes {
        for i in 0..dim {
            let c = 0.5 * (lo[i] + hi[i]);
            let h = hi[i] - lo[i];
            x[i] = c + if mask >> i & 1 == 0 { -offset } else { offset } * h;
        }
        sum += g(&x);
    }
    sum * vol / nodes as f64
}

fn adaptive_cell<G>(g: &G, lo: &[f64], hi: &[f64], tol: f64, depth: u32) -> f64
where
    G: Fn(&[f64]) -> f64,
{
    adaptive_cell_rec(g, lo, hi, gauss2_box(g, lo, hi), tol, depth)
}

fn adaptive_cell_rec<G>(g: &G, lo: &[f64], hi: &[f64], parent_est: f64, tol: f64, depth: u32) -> f64
where
    G: Fn(&[f64]) -> f64,
{
    let dim = lo.len();
    let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let kids = 1usize << dim;
    let mut kids_est = 0.0;
    let mut children = Vec::with_capacity(kids);
    for mask in 0..kids {
        let mut clo = vec![0.0; dim];
        let mut chi = vec![0.0; dim];
        for i in 0..dim {
            if mask >> i & 1 == 0 {
                clo[i] = lo[i];
                chi[i] = mid[i];
            } else {
                clo[i] = mid[i];
                chi[i] = hi[i];
            }
        }
        let est = gauss2_box(g, &clo, &chi);
        kids_est += est;
        children.push((clo, chi, est));
    }
    if (kids_est - parent_est).abs() <= tol || depth == 0 {
        return kids_est;
    }
    let child_tol = tol / kids as f64;
    children
        .into_iter()
        .map(|(clo, chi, est)| adaptive_cell_rec(g, &clo, &chi, est, child_tol, depth - 1))
        .sum()
}

/// Fourier transform of the raised-cosine profile `sin²(πu)` on [0,1]:
/// `box̂(s)/2 - (box̂(s-1) + box̂(s+1))/4`. Decays like |s|⁻³.
pub fn raised_cosine_transform(s: f64) -> Complex64 {
    box_transform(s) * 0.5 - (box_transform(s - 1.0) + box_transform(s + 1.0)) * 0.25
}

/// Result of a decoupling comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecouplingResult {
    /// `(Σ_{I ∈ tiling of J by 1-cubes} ‖f‖_{L^p(w_I)}^p)^{1/p}`.
    pub lhs: f64,
    /// `(Σ_a ‖f_{j,a}‖_{L^p(w_J)}^2)^{1/2}`.
    pub rhs: f64,
    pub ratio: f64,
}

/// Decoupling check at level j: f is built from tensor raised-cosine bumps on
/// the level-j cubes with the given coefficients (so supp f̂ stays inside the
/// level-j set), and both sides of the decoupling inequality are evaluated by
/// direct summation of the closed-form bump transforms.
///
/// All bumps share one envelope, so `‖f_{j,a}‖_{L^p(w_J)} = |c_a| · G` with a
/// single envelope norm G (modulation invariance of the weight).
pub fn decoupling_check(
    stage: &CantorStage,
    level: usize,
    coeffs: &[Complex64],
    j_cube: &Cube,
    p: f64,
) -> Result<DecouplingResult> {
    if p < 1.0 {
        return Err(Error::InvalidExponent {
            p,
            reason: "need p ≥ 1",
        });
    }
    if level > stage.depth() {
        return Err(Error::NotANode { level });
    }
    let nodes = stage.level(level);
    if coeffs.len() != nodes.len() {
        return Err(Error::CoefficientMismatch {
            coeffs: coeffs.len(),
            elements: nodes.len(),
        });
    }
    let n_j = stage.n_cum()[level];
    let dim = stage.dim();
    if (j_cube.side - n_j as f64).abs() > 1e-9 * (n_j as f64).max(1.0) {
        return Err(Error::CubeSideMismatch {
            side: j_cube.side,
            required: n_j as f64,
        });
    }
    let h = 1.0 / n_j as f64;
    let corners: Vec<f64> = nodes
        .iter()
        .flat_map(|b| b.iter().map(move |&c| c as f64 * h))
        .collect();
    let active: Vec<(usize, Complex64)> = coeffs
        .iter()
        .enumerate()
        .filter(|(_, c)| c.norm_sqr() > 0.0)
        .map(|(i, &c)| (i, c))
        .collect();

    let envelope = move |x: &[f64]| -> f64 {
        x.iter()
            .map(|&xi| h * raised_cosine_transform(-h * xi).norm())
            .product()
    };
    let f_abs = |x: &[f64]| -> f64 {
        let mut s = Complex64::new(0.0, 0.0);
        for &(i, c) in &active {
            let q = &corners[i * dim..(i + 1) * dim];
            let phase: f64 = q.iter().zip(x).map(|(&qi, &xi)| qi * xi).sum();
            s += c * Complex64::cis(TAU * phase);
        }
        envelope(x) * s.norm()
    };

    // lhs over the tiling of J by 1-cubes
    let m = j_cube.side.round() as usize;
    let mut tile_centers = Vec::new();
    let mut idx = vec![0usize; dim];
    loop {
        tile_centers.push(
            (0..dim)
                .map(|i| j_cube.corner[i] + idx[i] as f64 + 0.5)
                .collect::<Vec<f64>>(),
        );
        let mut axis = dim;
        let mut done = true;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < m {
                done = false;
                break;
            }
            idx[axis] = 0;
        }
        if done {
            break;
        }
    }
    let lhs_p: f64 = tile_centers
        .iter()
        .map(|c| {
            let region = Cube {
                corner: c.iter().map(|&ci| ci - 4.0).collect(),
                side: 8.0,
            };
            adaptive_weighted_lp_integral(&f_abs, c, 1.0, WEIGHT_EXPONENT, &region, p)
        })
        .sum();
    let lhs = lhs_p.powf(1.0 / p);

    // rhs: single envelope norm against w_J
    let j_center = j_cube.center();
    let region = j_cube.dilated(8.0);
    let g_p = adaptive_weighted_lp_integral(
        &envelope,
        &j_center,
        j_cube.side,
        WEIGHT_EXPONENT,
        &region,
        p,
    );
    let g_norm = g_p.powf(1.0 / p);
    let coeff_l2: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let rhs = coeff_l2 * g_norm;

    Ok(DecouplingResult {
        lhs,
        rhs,
        ratio: if rhs > 0.0 { lhs / rhs } else { 0.0 },
    })
}

/// Overlap constant of the unit-cube weight family: `sup_x Σ_{ν∈ℤ^d} w_ν(x)`
/// where w_ν is the weight of the cube `ν + [0,1]^d`. The weights are so
/// concentrated that the sup sits at a tile center and is 1 up to terms of
/// order 2^{-100}. Computed once by sampling plus pattern search and cached.
pub fn weight_overlap_constant(dim: usize) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<usize, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&v) = cache.lock().unwrap().get(&dim) {
        return v;
    }
    // sum over the lattice of tile centers within the cutoff window
    let window = 4i64;
    let sum_weights = |x: &[f64]| -> f64 {
        let mut total = 0.0;
        let mut nu = vec![-window; dim];
        'outer: loop {
            let center: Vec<f64> = nu.iter().map(|&c| c as f64 + 0.5).collect();
            total += cube_weight(x, &center, 1.0, WEIGHT_EXPONENT);
            let mut axis = dim;
            while axis > 0 {
                axis -= 1;
                nu[axis] += 1;
                if nu[axis] <= window {
                    continue 'outer;
                }
                nu[axis] = -window;
            }
            break;
        }
        total
    };
    // by periodicity the sup can be searched over one tile
    let mut best_x = vec![0.5; dim];
    let mut best = sum_weights(&best_x);
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    for _ in 0..512 {
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = sum_weights(&x);
        if s > best {
            best = s;
            best_x = x;
        }
    }
    let mut step = 0.25;
    while step > 1e-7 {
        let mut improved = false;
        for axis in 0..dim {
            for dir in [-1.0, 1.0] {
                let mut x = best_x.clone();
                x[axis] += dir * step;
                let s = sum_weights(&x);
                if s > best {
                    best = s;
                    best_x = x;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    cache.lock().unwrap().insert(dim, best);
    best
}

/// Least constant C₂ with `Σ_{I ∈ tiling of J} w_I ≤ C₂ w_J` pointwise,
/// computed by maximizing the ratio over tile centers (where the spiky
/// 1-cube weights peak), refined by local pattern search plus random probes.
/// Cached per (dimension, tiles-per-axis). This constant is enormous (the
/// corner tiles of J see a tiny w_J), which is why the pointwise comparison
/// is slack by many orders of magnitude wherever a band-limited function can
/// put its mass.
pub fn weight_compare_constant(dim: usize, tiles_per_axis: u64) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&v) = cache.lock().unwrap().get(&(dim, tiles_per_axis)) {
        return v;
    }
    let m = tiles_per_axis;
    let j_center = vec![m as f64 / 2.0; dim];
    let j_side = m as f64;

    // enumerate tile centers
    let mut centers: Vec<Vec<f64>> = vec![vec![]];
    for _ in 0..dim {
        let mut next = Vec::with_capacity(centers.len() * m as usize);
        for c in &centers {
            for i in 0..m {
                let mut q = c.clone();
                q.push(i as f64 + 0.5);
                next.push(q);
            }
        }
        centers = next;
    }

    let sum_tile_weights = |x: &[f64]| -> f64 {
        // tiles farther than 4 contribute < 5^{-100}; skip them
        centers
            .iter()
            .filter(|c| c.iter().zip(x).all(|(&ci, &xi)| (ci - xi).abs() <= 4.0))
            .map(|c| cube_weight(x, c, 1.0, WEIGHT_EXPONENT))
            .sum()
    };
    let ratio = |x: &[f64]| -> f64 {
        sum_tile_weights(x) / cube_weight(x, &j_center, j_side, WEIGHT_EXPONENT)
    };

    let mut best_x = centers[0].clone();
    let mut best = ratio(&best_x);
    for c in &centers {
        let r = ratio(c);
        if r > best {
            best = r;
            best_x = c.clone();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    for _ in 0..256 {
        let x: Vec<f64> = (0..dim)
            .map(|_| rng.gen_range(-1.0..m as f64 + 1.0))
            .collect();
        let r = ratio(&x);
        if r > best {
            best = r;
            best_x = x;
        }
    }
    let mut step = 0.25;
    while step > 1e-6 {
        let mut improved = false;
        for axis in 0..dim {
            for dir in [-1.0, 1.0] {
                let mut x = best_x.clone();
                x[axis] += dir * step;
                let r = ratio(&x);
                if r > best {
                    best = r;
                    best_x = x;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }

    cache.lock().unwrap().insert((dim, tiles_per_axis), best);
    best
}

/// Mixed-norm comparison `Σ_i (Σ_j c_ij²)^{p/2} ≤ (Σ_j (Σ_i c_ij^p)^{2/p})^{p/2}`
/// for a nonnegative matrix and p > 2. Returns (lhs, rhs, holds).
pub fn mixed_norm_inequality_check(matrix: &[Vec<f64>], p: f64) -> Result<(f64, f64, bool)> {
    if p <= 2.0 {
        return Err(Error::InvalidExponent {
            p,
            reason: "need p > 2",
        });
    }
    if matrix.iter().flatten().any(|&c| c < 0.0) {
        return Err(Error::NegativeEntry);
    }
    let cols = matrix.first().map(|r| r.len()).unwrap_or(0);
    if matrix.iter().any(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch {
            expected: cols,
            got: matrix
                .iter()
                .map(|r| r.len())
                .find(|&l| l != cols)
                .unwrap_or(0),
        });
    }
    let lhs: f64 = matrix
        .iter()
        .map(|row| row.iter().map(|c| c * c).sum::<f64>().powf(p / 2.0))
        .sum();
    let rhs: f64 = (0..cols)
        .map(|j| {
            matrix
                .iter()
                .map(|row| row[j].powf(p))
                .sum::<f64>()
                .powf(2.0 / p)
        })
        .sum::<f64>()
        .powf(p / 2.0);
    Ok((lhs, rhs, lhs <= rhs * (1.0 + 1e-12)))
}

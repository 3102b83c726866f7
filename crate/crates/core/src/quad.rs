//! Shared numerical kernels: midpoint grids with deterministic parallel
//! reduction, the box transform, radial adaptive box integrals, and
//! least-squares line fits.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Total grid points allowed in a single quadrature call.
pub const GRID_POINT_BUDGET: u64 = 1 << 24;

/// Fixed chunk length for parallel grid sums. Partial sums are computed
/// sequentially within each chunk and combined in chunk order, so results do
/// not depend on the number of worker threads.
pub const SUM_CHUNK: usize = 8192;

/// sin(πs)/(πs), with the removable singularity handled by a Taylor branch.
pub fn sinc_pi(s: f64) -> f64 {
    let x = std::f64::consts::PI * s;
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// Fourier transform of the unit box indicator `1_{[0,1]}`:
/// `(1 - e^{-2πis}) / (2πis) = e^{-iπs} sin(πs)/(πs)`, equal to 1 at s = 0.
pub fn box_transform(s: f64) -> Complex64 {
    Complex64::from_polar(sinc_pi(s), -std::f64::consts::PI * s)
}

/// Tensor-product box transform `Π_i box̂(s_i)`.
pub fn box_transform_d(s: &[f64]) -> Complex64 {
    s.iter().map(|&si| box_transform(si)).product()
}

/// Axis-aligned midpoint quadrature grid over a box.
#[derive(Debug, Clone)]
pub struct MidpointGrid {
    pub corner: Vec<f64>,
    pub spacing: f64,
    pub pts_per_axis: Vec<usize>,
}

impl MidpointGrid {
    /// Grid covering the box `[corner, corner + side]^d` with the requested
    /// spacing (the actual spacing is `side / n` with `n = ceil(side/spacing)`).
    pub fn over_cube(corner: &[f64], side: f64, spacing: f64) -> Result<Self> {
        if spacing <= 0.0 {
            return Err(Error::InvalidSpacing {
                spacing,
                max_allowed: f64::INFINITY,
            });
        }
        if side <= 0.0 {
            return Err(Error::BadCubeSide(side));
        }
        let n = (side / spacing).ceil().max(1.0) as usize;
        let grid = MidpointGrid {
            corner: corner.to_vec(),
            spacing: side / n as f64,
            pts_per_axis: vec![n; corner.len()],
        };
        grid.check_budget()?;
        Ok(grid)
    }

    pub fn dim(&self) -> usize {
        self.corner.len()
    }

    pub fn len(&self) -> usize {
        self.pts_per_axis.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume element of one cell.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim() as i32)
    }

    pub fn check_budget(&self) -> Result<()> {
        let total: u64 = self.pts_per_axis.iter().map(|&n| n as u64).product();
        if total > GRID_POINT_BUDGET {
            return Err(Error::QuadratureBudget {
                requested: total,
                budget: GRID_POINT_BUDGET,
            });
        }
        Ok(())
    }

    /// Cell-center coordinates for a flat row-major index.
    pub fn point(&self, mut flat: usize, out: &mut [f64]) {
        for axis in (0..self.dim()).rev() {
            let n = self.pts_per_axis[axis];
            let i = flat % n;
            flat /= n;
            out[axis] = self.corner[axis] + (i as f64 + 0.5) * self.spacing;
        }
    }

    /// Deterministic parallel sum of `f` over all cell centers.
    ///
    /// The grid is split into fixed-size chunks; each chunk is summed
    /// sequentially and the partial sums are added in chunk order.
    pub fn par_sum<F>(&self, f: F) -> f64
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let total = self.len();
        let dim = self.dim();
        let n_chunks = total.div_ceil(SUM_CHUNK);
        let partials: Vec<f64> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let start = c * SUM_CHUNK;
                let end = (start + SUM_CHUNK).min(total);
                let mut x = vec![0.0; dim];
                let mut acc = 0.0;
                for flat in start..end {
                    self.point(flat, &mut x);
                    acc += f(&x);
                }
                acc
            })
            .collect();
        partials.iter().sum()
    }
}

/// L^p norm of a sampled function over a grid: `(Σ |f(x)|^p h^d)^{1/p}`.
pub fn grid_lp_norm<F>(grid: &MidpointGrid, p: f64, f: F) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let s = grid.par_sum(|x| f(x).powf(p));
    (s * grid.cell_volume()).powf(1.0 / p)
}

/// Nearest and farthest distances from a point to an axis-aligned box.
pub fn box_distance_range(center: &[f64], lo: &[f64], hi: &[f64]) -> (f64, f64) {
    let mut near2 = 0.0;
    let mut far2 = 0.0;
    for i in 0..center.len() {
        let below = lo[i] - center[i];
        let above = center[i] - hi[i];
        let near = below.max(above).max(0.0);
        near2 += near * near;
        let far = (center[i] - lo[i]).abs().max((hi[i] - center[i]).abs());
        far2 += far * far;
    }
    (near2.sqrt(), far2.sqrt())
}

/// Integral over the box `[lo, hi]` of a radially non-increasing profile
/// `ρ(|x - center|)`.
///
/// Monotonicity gives rigorous bounds on every sub-box: the integrand lies
/// between `ρ(d_far)` and `ρ(d_near)`. A worklist repeatedly splits the box
/// with the largest bound gap (times volume) along its longest axis until
/// the summed gap is below `tol_abs`, so the returned midpoint estimate is
/// within `tol_abs/2` of the true value. Handles discontinuous profiles
/// (ball indicators): fully-inside/outside boxes resolve exactly.
pub fn radial_box_integral<F>(
    center: &[f64],
    profile: &F,
    lo: &[f64],
    hi: &[f64],
    tol_abs: f64,
) -> f64
where
    F: Fn(f64) -> f64,
{
    struct Item {
        gap_vol: f64,
        mid_est: f64,
        lo: Vec<f64>,
        hi: Vec<f64>,
    }
    let assess = |lo: &[f64], hi: &[f64]| -> Item {
        let vol: f64 = lo.iter().zip(hi).map(|(a, b)| b - a).product();
        let (near, far) = box_distance_range(center, lo, hi);
        let hi_val = profile(near);
        let lo_val = profile(far);
        debug_assert!(hi_val >= lo_val - 1e-15, "profile must be non-increasing");
        Item {
            gap_vol: (hi_val - lo_val).max(0.0) * vol,
            mid_est: 0.5 * (hi_val + lo_val) * vol,
            lo: lo.to_vec(),
            hi: hi.to_vec(),
        }
    };

    let root = assess(lo, hi);
    if root.mid_est == 0.0 && root.gap_vol == 0.0 {
        return 0.0;
    }
    let mut resolved = 0.0;
    let mut pending_gap = 0.0;
    // max-heap keyed by gap·vol
    let mut heap: std::collections::BinaryHeap<(OrdF64, usize)> =
        std::collections::BinaryHeap::new();
    let mut items: Vec<Item> = Vec::new();
    let push = |item: Item,
                heap: &mut std::collections::BinaryHeap<(OrdF64, usize)>,
                items: &mut Vec<Item>,
                resolved: &mut f64,
                pending_gap: &mut f64| {
        if item.gap_vol <= 0.0 {
            *resolved += item.mid_est;
        } else {
            *pending_gap += item.gap_vol;
            heap.push((OrdF64(item.gap_vol), items.len()));
            items.push(item);
        }
    };
    push(root, &mut heap, &mut items, &mut resolved, &mut pending_gap);

    let mut splits = 0usize;
    while pending_gap > tol_abs && splits < 2_000_000 {
        let Some((_, idx)) = heap.pop() else { break };
        let item = std::mem::replace(
            &mut items[idx],
            Item {
                gap_vol: 0.0,
                mid_est: 0.0,
                lo: vec![],
                hi: vec![],
            },
        );
        pending_gap -= item.gap_vol;
        let axis = (0..center.len())
            .max_by(|&a, &b| {
                (item.hi[a] - item.lo[a])
                    .partial_cmp(&(item.hi[b] - item.lo[b]))
                    .unwrap()
            })
            .unwrap();
        let mid = 0.5 * (item.lo[axis] + item.hi[axis]);
        let mut hi_left = item.hi.clone();
        hi_left[axis] = mid;
        let mut lo_right = item.lo.clone();
        lo_right[axis] = mid;
        push(
            assess(&item.lo, &hi_left),
            &mut heap,
            &mut items,
            &mut resolved,
            &mut pending_gap,
        );
        push(
            assess(&lo_right, &item.hi),
            &mut heap,
            &mut items,
            &mut resolved,
            &mut pending_gap,
        );
        splits += 1;
    }
    resolved + heap.iter().map(|&(_, idx)| items[idx].mid_est).sum::<f64>()
}

/// f64 wrapper with total ordering for heap keys.
#[derive(PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Least-squares fit `y ≈ a + b·x`; returns `(intercept, slope, rms_residual)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    (intercept, slope, (rss / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn box_transform_at_zero_is_one() {
        assert_eq!(box_transform(0.0), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn box_transform_vanishes_at_nonzero_integers() {
        for m in [-3i32, -1, 1, 2, 5] {
            assert!(box_transform(m as f64).norm() < 1e-15);
        }
    }

    #[test]
    fn box_transform_matches_direct_quadrature() {
        // independent oracle: fine Riemann sum of ∫_0^1 e^{-2πi s x} dx
        for &s in &[0.3, 0.5, 1.7, -2.2] {
            let n = 200_000;
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                let x = (i as f64 + 0.5) / n as f64;
                acc += Complex64::cis(-2.0 * std::f64::consts::PI * s * x);
            }
            acc /= n as f64;
            let b = box_transform(s);
            assert!((acc - b).norm() < 1e-8, "s={s}: {acc} vs {b}");
        }
    }

    #[test]
    fn midpoint_grid_integrates_polynomial() {
        // ∫_0^1 x^2 dx = 1/3, midpoint error O(h^2)
        let g = MidpointGrid::over_cube(&[0.0], 1.0, 1e-3).unwrap();
        let v = g.par_sum(|x| x[0] * x[0]) * g.cell_volume();
        assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-6);
    }

    #[test]
    fn grid_budget_enforced() {
        let r = MidpointGrid::over_cube(&[0.0, 0.0], 1.0, 1e-5);
        assert!(matches!(r, Err(Error::QuadratureBudget { .. })));
    }

    #[test]
    fn par_sum_is_chunk_order_deterministic() {
        let g = MidpointGrid::over_cube(&[0.0, 0.0], 1.0, 0.003).unwrap();
        let a = g.par_sum(|x| (x[0] * 37.0).sin() * (x[1] * 11.0).cos());
        let b = g.par_sum(|x| (x[0] * 37.0).sin() * (x[1] * 11.0).cos());
        assert_eq!(a, b);
    }

    #[test]
    fn radial_integral_recovers_disk_area() {
        // area of the unit disk within [-2,2]^2
        let area = radial_box_integral(
            &[0.0, 0.0],
            &|d| if d <= 1.0 { 1.0 } else { 0.0 },
            &[-2.0, -2.0],
            &[2.0, 2.0],
            1e-8,
        );
        assert_relative_eq!(area, std::f64::consts::PI, max_relative = 1e-5);
    }

    #[test]
    fn radial_integral_smooth_profile_1d() {
        // ∫_{-1}^{1} (1+|x|)^{-2} dx = 2·(1 - 1/2) = 1
        let v = radial_box_integral(&[0.0], &|d| (1.0 + d).powi(-2), &[-1.0], &[1.0], 1e-10);
        assert_relative_eq!(v, 1.0, max_relative = 1e-7);
    }

    #[test]
    fn linear_fit_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let (a, b, r) = linear_fit(&xs, &ys);
        assert_relative_eq!(a, 1.0, epsilon = 1e-12);
        assert_relative_eq!(b, 2.0, epsilon = 1e-12);
        assert!(r < 1e-12);
    }
}

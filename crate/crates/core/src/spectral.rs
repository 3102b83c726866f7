//! Fourier side of a stage measure: exact evaluation of μ̂_k, decay profiling
//! over frequency annuli, and L^p growth of μ̂_k over expanding boxes.
//!
//! For a stage with deepest integer corners b (denominator N_k),
//!
//! ```text
//! μ̂_k(ξ) = T_k⁻¹ · Π_i box̂(ξ_i/N_k) · Σ_b e^{-2πi (b·ξ)/N_k}
//! ```
//!
//! The phase sum is evaluated by tree recursion sharing prefixes along the
//! construction paths (total work O(Σ_j T_j) per ξ); a flat summation over all
//! T_k cubes is kept as an independent oracle.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cantor::CantorStage;
use crate::error::{Error, Result};
use crate::quad::{box_transform_d, linear_fit, MidpointGrid, GRID_POINT_BUDGET};

const TAU: f64 = std::f64::consts::TAU;

/// Phase sum `Σ_b e^{-2πi b·ξ/N_k}` by tree recursion over levels.
fn phase_sum_tree(stage: &CantorStage, xi: &[f64]) -> Complex64 {
    let depth = stage.depth();
    let mut vals = vec![Complex64::new(1.0, 0.0)];
    for j in 1..=depth {
        let n_j = stage.plan().n_seq[j - 1] as i64;
        let inv_nj_cum = 1.0 / stage.n_cum()[j] as f64;
        let level = stage.level(j);
        let mut next = Vec::with_capacity(level.len());
        for i in 0..level.len() {
            let parent = stage.parent_index(j, i);
            let child = level.node(i);
            let parent_node = stage.level(j - 1).node(parent);
            // offset s = child - parent*n_j, phase increment s·ξ/N_j
            let phase: f64 = child
                .iter()
                .zip(parent_node.iter().zip(xi))
                .map(|(&c, (&p, &x))| (c - p * n_j) as f64 * x)
                .sum::<f64>()
                * inv_nj_cum;
            next.push(vals[parent] * Complex64::cis(-TAU * phase));
        }
        vals = next;
    }
    vals.iter().sum()
}

/// μ̂_k(ξ), exact up to float rounding.
pub fn mu_hat(stage: &CantorStage, xi: &[f64]) -> Complex64 {
    assert_eq!(xi.len(), stage.dim(), "frequency dimension mismatch");
    let nk = stage.n_k() as f64;
    let scaled: Vec<f64> = xi.iter().map(|&x| x / nk).collect();
    let value = box_transform_d(&scaled) * phase_sum_tree(stage, xi) / stage.t_k() as f64;
    debug_assert!(value.norm() <= 1.0 + 1e-9, "|mu_hat| > 1 at {xi:?}");
    value
}

/// Flat-summation oracle: identical quantity summed directly over all T_k
/// deepest cubes, with no prefix sharing.
pub fn mu_hat_flat(stage: &CantorStage, xi: &[f64]) -> Complex64 {
    assert_eq!(xi.len(), stage.dim());
    let nk = stage.n_k() as f64;
    let scaled: Vec<f64> = xi.iter().map(|&x| x / nk).collect();
    let sum: Complex64 = stage
        .deepest()
        .iter()
        .map(|b| {
            let phase: f64 = b.iter().zip(xi).map(|(&bi, &x)| bi as f64 * x).sum::<f64>() / nk;
            Complex64::cis(-TAU * phase)
        })
        .sum();
    box_transform_d(&scaled) * sum / stage.t_k() as f64
}

/// Batched μ̂ evaluation, parallel over frequencies with output order
/// matching the input order; results are identical to pointwise calls.
pub fn mu_hat_batch(stage: &CantorStage, xis: &[Vec<f64>]) -> Vec<Complex64> {
    xis.par_iter().map(|xi| mu_hat(stage, xi)).collect()
}

/// Closed-form μ̂ for a zero-translation stage:
/// `box̂_d(ξ/N_k) · Π_j [t_j⁻¹ Σ_{b∈B_j} e^{-2πi b·ξ/N_j}]`.
///
/// Valid only when every translation vector is zero (the construction is then
/// a product over levels); returns an error otherwise.
pub fn self_similar_product_form(stage: &CantorStage, xi: &[f64]) -> Result<Complex64> {
    if stage
        .translations()
        .iter()
        .any(|level| level.iter().any(|v| v.iter().any(|&c| c != 0)))
    {
        return Err(Error::InvalidParameter {
            name: "translations",
            value: 1.0,
            reason: "product form requires a zero-translation stage",
        });
    }
    let nk = stage.n_k() as f64;
    let scaled: Vec<f64> = xi.iter().map(|&x| x / nk).collect();
    let mut value = box_transform_d(&scaled);
    for (j, alphabet) in stage.alphabets().iter().enumerate() {
        let n_cum_j = stage.n_cum()[j + 1] as f64;
        let factor: Complex64 = alphabet
            .elements
            .iter()
            .map(|b| {
                let phase: f64 =
                    b.iter().zip(xi).map(|(&bi, &x)| bi as f64 * x).sum::<f64>() / n_cum_j;
                Complex64::cis(-TAU * phase)
            })
            .sum();
        value *= factor / alphabet.size as f64;
    }
    Ok(value)
}

/// Sampled decay profile of |μ̂_k| with a fitted exponent.
#[derive(Debug, Clone)]
pub struct SpectralProfile {
    pub frequencies: Vec<Vec<f64>>,
    pub values: Vec<Complex64>,
    /// Geometric radius bins `[lo, hi)`.
    pub annuli: Vec<(f64, f64)>,
    /// Per-bin sup of |μ̂_k| over the samples (plus local refinement).
    pub annulus_sup: Vec<f64>,
    /// Least-squares slope of `log sup` vs `-log radius` over the fit range.
    pub fitted_beta: f64,
    pub fit_range: (f64, f64),
    pub residual: f64,
}

impl SpectralProfile {
    /// CSV body with the fixed header `radius,sup_abs_muhat`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("radius,sup_abs_muhat\n");
        for ((lo, hi), sup) in self.annuli.iter().zip(&self.annulus_sup) {
            let rep = (lo * hi).sqrt();
            out.push_str(&format!("{rep},{sup}\n"));
        }
        out
    }

    pub fn json_header(&self, seed: u64) -> serde_json::Value {
        serde_json::json!({
            "fitted_beta": self.fitted_beta,
            "fit_range": [self.fit_range.0, self.fit_range.1],
            "residual": self.residual,
            "seed": seed,
        })
    }
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Sample |μ̂_k| on geometric annuli `[2^m, 2^{m+1})` up to `r_max` and fit
/// the decay exponent β on annuli inside `[4, min(r_max, N_k)]`.
///
/// Beyond N_k the box factor forces |ξ|⁻¹ decay regardless of the phase
/// structure, so the fit is capped there — unless that cap leaves fewer than
/// 3 annuli (e.g. a depth-0 stage, whose decay IS the box decay), in which
/// case the full range `[4, r_max]` is used.
pub fn decay_profile(
    stage: &CantorStage,
    r_max: f64,
    per_annulus: usize,
    seed: u64,
) -> Result<SpectralProfile> {
    if r_max < 4.0 {
        return Err(Error::InvalidParameter {
            name: "r_max",
            value: r_max,
            reason: "need r_max ≥ 4",
        });
    }
    if per_annulus < 16 {
        return Err(Error::InvalidParameter {
            name: "per_annulus",
            value: per_annulus as f64,
            reason: "need per_annulus ≥ 16",
        });
    }
    let dim = stage.dim();
    let mut annuli = Vec::new();
    let mut m = 1u32;
    while (2f64).powi(m as i32) < r_max {
        let lo = (2f64).powi(m as i32);
        let hi = (2f64).powi(m as i32 + 1).min(r_max);
        annuli.push((lo, hi));
        m += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refine_steps = 24usize;
    let mut annulus_sup = Vec::with_capacity(annuli.len());
    let mut frequencies = Vec::new();
    let mut values = Vec::new();
    for &(lo, hi) in &annuli {
        let samples: Vec<Vec<f64>> = (0..per_annulus)
            .map(|_| {
                let dir = random_direction(&mut rng, dim);
                let r = rng.gen_range(lo..hi);
                dir.into_iter().map(|c| c * r).collect()
            })
            .collect();
        let vals = mu_hat_batch(stage, &samples);
        let mut best_idx = 0usize;
        for (i, v) in vals.iter().enumerate() {
            assert!(v.norm() <= 1.0 + 1e-9, "|mu_hat| exceeds 1");
            if v.norm() > vals[best_idx].norm() {
                best_idx = i;
            }
        }
        // local refinement around the best sample reduces the downward bias
        // of the sampled sup
        let mut best_xi = samples[best_idx].clone();
        let mut best = vals[best_idx].norm();
        let mut step = 0.05 * (hi - lo);
        for _ in 0..refine_steps {
            let proposal: Vec<f64> = best_xi
                .iter()
                .map(|&c| c + rng.gen_range(-step..=step))
                .collect();
            let r = proposal.iter().map(|c| c * c).sum::<f64>().sqrt();
            if r >= lo && r < hi {
                let v = mu_hat(stage, &proposal).norm();
                if v > best {
                    best = v;
                    best_xi = proposal;
                }
            }
            step *= 0.85;
        }
        annulus_sup.push(best);
        frequencies.extend(samples);
        values.extend(vals);
    }

    // fit range
    let cap = (stage.n_k() as f64).min(r_max);
    let in_range = |lo: f64, hi: f64, upper: f64| lo >= 4.0 - 1e-9 && hi <= upper + 1e-9;
    let mut upper = cap;
    let count = annuli
        .iter()
        .filter(|&&(lo, hi)| in_range(lo, hi, upper))
        .count();
    if count < 3 {
        upper = r_max;
    }
    let fit: Vec<(f64, f64)> = annuli
        .iter()
        .zip(&annulus_sup)
        .filter(|(&(lo, hi), _)| in_range(lo, hi, upper))
        .map(|(&(lo, hi), &sup)| ((lo * hi).sqrt(), sup))
        .collect();
    if fit.len() < 3 {
        return Err(Error::TooFewAnnuli {
            needed: 3,
            lo: 4.0,
            hi: upper,
        });
    }
    let xs: Vec<f64> = fit.iter().map(|(r, _)| r.ln()).collect();
    let ys: Vec<f64> = fit.iter().map(|(_, s)| s.max(1e-300).ln()).collect();
    let (_, slope, residual) = linear_fit(&xs, &ys);

    Ok(SpectralProfile {
        frequencies,
        values,
        annuli,
        annulus_sup,
        fitted_beta: -slope,
        fit_range: (4.0, upper),
        residual,
    })
}

/// ‖μ̂_k‖_{L^p([-R,R]^d)} for each R, by midpoint quadrature at spacing ≤ 1/4
/// with halving refinement until two successive values agree within 1e-3
/// relative (μ̂_k is the transform of a probability measure on [0,1]^d, hence
/// Lipschitz with constant ≤ 2π√d, so spacing 1/4 already controls sup error).
pub fn lp_growth_of_muhat(stage: &CantorStage, p: f64, r_list: &[f64]) -> Result<Vec<f64>> {
    if p < 1.0 {
        return Err(Error::InvalidExponent {
            p,
            reason: "need p ≥ 1",
        });
    }
    if r_list.is_empty() || r_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::BadRadiusList);
    }
    let dim = stage.dim();
    r_list
        .iter()
        .map(|&r| {
            let corner = vec![-r; dim];
            let mut spacing = 0.25;
            let mut prev = lp_norm_on_box(stage, p, &corner, 2.0 * r, spacing)?;
            loop {
                spacing /= 2.0;
                let pts = (2.0 * r / spacing).ceil().powi(dim as i32);
                if pts > GRID_POINT_BUDGET as f64 {
                    return Ok(prev);
                }
                let next = lp_norm_on_box(stage, p, &corner, 2.0 * r, spacing)?;
                let rel = (next - prev).abs() / next.abs().max(1e-300);
                prev = next;
                if rel < 1e-3 {
                    return Ok(prev);
                }
            }
        })
        .collect()
}

fn lp_norm_on_box(
    stage: &CantorStage,
    p: f64,
    corner: &[f64],
    side: f64,
    spacing: f64,
) -> Result<f64> {
    let grid = MidpointGrid::over_cube(corner, side, spacing)?;
    let sum = grid.par_sum(|x| mu_hat(stage, x).norm().powf(p));
    Ok((sum * grid.cell_volume()).powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::{Alphabet, SequencePlan};
    use crate::cantor::{build_stage, build_stage_zero_translation, DEFAULT_NODE_BUDGET};
    use approx::assert_relative_eq;

    fn alpha1(points: &[i64], modulus: u64) -> Alphabet {
        Alphabet::new(1, modulus, points.iter().map(|&x| vec![x]).collect()).unwrap()
    }

    fn seeded_stage(depth: usize, seed: u64) -> CantorStage {
        let plan = SequencePlan::constant(1, 4, 2, depth).unwrap();
        let b = alpha1(&[0, 2], 4);
        build_stage(&plan, &vec![b; depth], depth, seed, DEFAULT_NODE_BUDGET).unwrap()
    }

    fn unit_stage_1d() -> CantorStage {
        let plan = SequencePlan::constant(1, 3, 2, 1).unwrap();
        build_stage(&plan, &[alpha1(&[0, 2], 3)], 0, 0, DEFAULT_NODE_BUDGET).unwrap()
    }

    #[test]
    fn mu_hat_at_zero_is_one() {
        let stage = seeded_stage(3, 1);
        let v = mu_hat(&stage, &[0.0]);
        assert_relative_eq!(v.re, 1.0, epsilon = 1e-12);
        assert!(v.im.abs() < 1e-12);
    }

    #[test]
    fn mu_hat_depth_zero_half_frequency() {
        // |∫_0^1 e^{-πi x} dx| = 2/π
        let stage = unit_stage_1d();
        let v = mu_hat(&stage, &[0.5]);
        assert_relative_eq!(v.norm(), 2.0 / std::f64::consts::PI, epsilon = 1e-12);
    }

    #[test]
    fn mu_hat_vanishes_at_multiples_of_nk() {
        let stage = seeded_stage(2, 3);
        let nk = stage.n_k() as f64;
        for m in [1.0, 2.0, -3.0] {
            assert!(mu_hat(&stage, &[m * nk]).norm() < 1e-12);
        }
    }

    #[test]
    fn tree_matches_flat_oracle() {
        let stage = seeded_stage(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let xi = [rng.gen_range(-200.0..200.0)];
            let a = mu_hat(&stage, &xi);
            let b = mu_hat_flat(&stage, &xi);
            assert!(
                (a - b).norm() <= 1e-10 * b.norm().max(1e-30),
                "{a} vs {b} at {xi:?}"
            );
        }
    }

    #[test]
    fn batch_matches_pointwise() {
        let stage = seeded_stage(2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut xis: Vec<Vec<f64>> = vec![vec![0.0]];
        xis.extend((0..100).map(|_| vec![rng.gen_range(-50.0..50.0)]));
        let batch = mu_hat_batch(&stage, &xis);
        assert_relative_eq!(batch[0].re, 1.0, epsilon = 1e-12);
        for (xi, b) in xis.iter().zip(&batch) {
            let a = mu_hat(&stage, xi);
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn hermitian_symmetry() {
        let stage = seeded_stage(3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let xi = [rng.gen_range(-100.0..100.0)];
            let neg = [-xi[0]];
            let a = mu_hat(&stage, &xi);
            let b = mu_hat(&stage, &neg);
            assert!((a.conj() - b).norm() < 1e-12);
        }
    }

    #[test]
    fn lipschitz_bound_on_sampled_pairs() {
        let stage = seeded_stage(2, 13);
        let lip = TAU * (stage.dim() as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let xi = rng.gen_range(-40.0..40.0);
            let eta = xi + rng.gen_range(-0.5..0.5);
            let diff = (mu_hat(&stage, &[xi]) - mu_hat(&stage, &[eta])).norm();
            assert!(diff <= lip * (xi - eta).abs() + 1e-12);
        }
    }

    #[test]
    fn zero_translation_stage_factorizes() {
        let plan = SequencePlan::constant(1, 4, 2, 3).unwrap();
        let b = alpha1(&[1, 3], 4);
        let stage =
            build_stage_zero_translation(&plan, &vec![b; 3], 3, DEFAULT_NODE_BUDGET).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let xi = [rng.gen_range(-80.0..80.0)];
            let tree = mu_hat(&stage, &xi);
            let product = self_similar_product_form(&stage, &xi).unwrap();
            assert!(
                (tree - product).norm() <= 1e-10 * product.norm().max(1e-15),
                "{tree} vs {product}"
            );
        }
        // a random-translate stage is rejected
        let random = seeded_stage(2, 1);
        assert!(self_similar_product_form(&random, &[1.0]).is_err());
    }

    #[test]
    fn decay_profile_depth_zero_box() {
        // |box̂| decays like |ξ|^{-1}
        let stage = unit_stage_1d();
        let profile = decay_profile(&stage, 1024.0, 32, 0).unwrap();
        assert!(
            (profile.fitted_beta - 1.0).abs() <= 0.15,
            "beta = {}",
            profile.fitted_beta
        );
        // full-alphabet stage degenerates to Lebesgue on the cube
        let plan = SequencePlan::constant(1, 2, 2, 2).unwrap();
        let full = Alphabet::full(1, 2).unwrap();
        let lebesgue =
            build_stage(&plan, &[full.clone(), full], 2, 0, DEFAULT_NODE_BUDGET).unwrap();
        let p2 = decay_profile(&lebesgue, 1024.0, 32, 0).unwrap();
        assert!(
            (p2.fitted_beta - 1.0).abs() <= 0.15,
            "beta = {}",
            p2.fitted_beta
        );
    }

    #[test]
    fn decay_profile_validates_input() {
        let stage = unit_stage_1d();
        assert!(decay_profile(&stage, 2.0, 32, 0).is_err());
        assert!(decay_profile(&stage, 64.0, 4, 0).is_err());
    }

    #[test]
    fn profile_csv_has_fixed_header() {
        let stage = unit_stage_1d();
        let profile = decay_profile(&stage, 64.0, 16, 0).unwrap();
        let csv = profile.to_csv();
        assert!(csv.starts_with("radius,sup_abs_muhat\n"));
        assert_eq!(csv.lines().count(), 1 + profile.annuli.len());
    }

    #[test]
    fn lp_growth_depth_zero_plancherel() {
        // ∫_{-R}^{R} |box̂|^2 → ‖1_{[0,1]}‖_2^2 = 1 as R grows
        let stage = unit_stage_1d();
        let norms = lp_growth_of_muhat(&stage, 2.0, &[8.0, 64.0]).unwrap();
        assert!(norms[1] > norms[0]);
        assert!((norms[1] - 1.0).abs() < 0.01, "{}", norms[1]);
        assert!(lp_growth_of_muhat(&stage, 2.0, &[]).is_err());
        assert!(lp_growth_of_muhat(&stage, 2.0, &[4.0, 2.0]).is_err());
    }
}

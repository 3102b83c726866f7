//! Λ(p) alphabets: exponential-sum norms, additive energy, constant
//! certification, set search, and multiscale parameter plans.
//!
//! An alphabet is a finite set S ⊂ [N]^d of lattice points. Its Λ(p) constant
//! is `sup_{c≠0} ‖Σ_{a∈S} c_a e^{2πi a·x}‖_{L^p([0,1]^d)} / ‖c‖_2`. Two
//! evaluation routes are provided for the numerator:
//!
//! * even p = 2m: exact, via `‖f‖_{2m}^{2m} = ‖c^{*m}‖_2^2` where `*` is
//!   convolution of the coefficient sequence on ℤ^d (Parseval applied to f^m);
//! * any p ≥ 1: midpoint quadrature on a uniform grid over `[0,1]^d`.
//!
//! Constants are certified from below by nonlinear power iteration from
//! multiple seeded starts; an upper bound is not decidable by sampling, so all
//! downstream consumers treat certificates as empirical lower bounds.

use std::collections::HashMap;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{grid_lp_norm, MidpointGrid, GRID_POINT_BUDGET};

/// Lattice point in ℤ^d.
pub type LatticePoint = Vec<i64>;

const TAU: f64 = std::f64::consts::TAU;

/// A finite set of lattice points in `[N]^d`, kept sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    /// Ambient dimension d.
    pub dim: usize,
    /// Ambient box size N: every coordinate lies in `{0, …, N-1}`.
    pub modulus: u64,
    /// Distinct lattice points, sorted lexicographically.
    pub elements: Vec<LatticePoint>,
    /// Cardinality t.
    pub size: usize,
}

impl Alphabet {
    pub fn new(dim: usize, modulus: u64, mut elements: Vec<LatticePoint>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::EmptyAlphabet);
        }
        for e in &elements {
            if e.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: e.len(),
                });
            }
            if e.iter().any(|&x| x < 0 || x as u64 >= modulus) {
                return Err(Error::InvalidParameter {
                    name: "element",
                    value: *e.iter().find(|&&x| x < 0 || x as u64 >= modulus).unwrap() as f64,
                    reason: "coordinate outside [0, N)",
                });
            }
        }
        elements.sort();
        elements.dedup();
        let size = elements.len();
        Ok(Alphabet {
            dim,
            modulus,
            elements,
            size,
        })
    }

    pub fn singleton(dim: usize, modulus: u64, point: LatticePoint) -> Result<Self> {
        Alphabet::new(dim, modulus, vec![point])
    }

    /// The full box `[N]^d`.
    pub fn full(dim: usize, modulus: u64) -> Result<Self> {
        let mut elements = Vec::new();
        let mut cur = vec![0i64; dim];
        loop {
            elements.push(cur.clone());
            let mut axis = dim;
            while axis > 0 {
                axis -= 1;
                cur[axis] += 1;
                if (cur[axis] as u64) < modulus {
                    break;
                }
                cur[axis] = 0;
                if axis == 0 {
                    return Alphabet::new(dim, modulus, elements);
                }
            }
            if dim == 0 {
                return Alphabet::new(dim, modulus, elements);
            }
        }
    }
}

/// How a Λ(p) constant estimate was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertMethod {
    ExactEvenP,
    Quadrature,
}

/// Empirical lower-bound certificate for the Λ(p) constant of an alphabet.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaPCertificate {
    pub exponent: f64,
    /// Best ratio found by maximization; always ≥ 1 (witnessed by a singleton
    /// coefficient vector).
    pub constant_lower: f64,
    /// Acceptance threshold in effect during search (∞ when uncapped).
    pub constant_cap: f64,
    pub method: CertMethod,
    /// Final quadrature spacing (quadrature method only).
    pub grid_spacing: Option<f64>,
    /// Total power-iteration steps across all starts.
    pub iterations: u64,
}

impl LambdaPCertificate {
    pub fn exceeds_cap(&self) -> bool {
        self.constant_lower > self.constant_cap
    }
}

/// Multi-start budget for power iteration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterationBudget {
    pub starts: usize,
    pub iters_per_start: usize,
}

impl Default for IterationBudget {
    fn default() -> Self {
        IterationBudget {
            starts: 6,
            iters_per_start: 40,
        }
    }
}

/// Admissible parameter sequences for a multiscale construction: branching
/// box sizes n_j and alphabet sizes t_j with `t_j ≈ c·n_j^α`, α = 2d/p.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePlan {
    pub dim: usize,
    /// Target dimension α ∈ (0, d).
    pub alpha: f64,
    /// Critical exponent p = 2d/α.
    pub p: f64,
    pub n_seq: Vec<u64>,
    pub t_seq: Vec<u64>,
    /// Recorded lower sandwich constant `min_j t_j / n_j^α`.
    pub c0: f64,
    /// Recorded upper sandwich constant `max_j t_j / n_j^α`.
    pub c1: f64,
}

impl SequencePlan {
    pub fn depth(&self) -> usize {
        self.n_seq.len()
    }

    /// Cumulative products N_j = n_1⋯n_j for j = 0..=depth (N_0 = 1).
    pub fn n_cumulative(&self) -> Vec<u64> {
        std::iter::once(1)
            .chain(self.n_seq.iter().scan(1u64, |acc, &n| {
                *acc *= n;
                Some(*acc)
            }))
            .collect()
    }

    /// Cumulative products T_j = t_1⋯t_j for j = 0..=depth (T_0 = 1).
    pub fn t_cumulative(&self) -> Vec<u64> {
        std::iter::once(1)
            .chain(self.t_seq.iter().scan(1u64, |acc, &t| {
                *acc *= t;
                Some(*acc)
            }))
            .collect()
    }

    /// Constant-parameter plan (n_j = n, t_j = t for all levels), with
    /// α = log_n(t) and p = 2d/α. Used e.g. for the ternary-style measure
    /// (n = 3, t = 2).
    pub fn constant(dim: usize, n: u64, t: u64, depth: usize) -> Result<Self> {
        if n < 2 || t < 1 || t > n.pow(dim as u32) || depth == 0 {
            return Err(Error::InvalidParameter {
                name: "constant plan",
                value: n as f64,
                reason: "need n ≥ 2, 1 ≤ t ≤ n^d, depth ≥ 1",
            });
        }
        let alpha = (t as f64).ln() / (n as f64).ln();
        let ratio = t as f64 / (n as f64).powf(alpha);
        Ok(SequencePlan {
            dim,
            alpha,
            p: 2.0 * dim as f64 / alpha,
            n_seq: vec![n; depth],
            t_seq: vec![t; depth],
            c0: ratio,
            c1: ratio,
        })
    }

    /// Check all structural invariants; used by tests and on deserialization.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim as f64;
        if !(self.alpha > 0.0 && self.alpha < d) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                value: self.alpha,
                reason: "must lie in (0, d)",
            });
        }
        // empty sequences describe the depth-0 stage (the unit cube)
        if self.n_seq.len() != self.t_seq.len() {
            return Err(Error::InvalidParameter {
                name: "depth",
                value: self.n_seq.len() as f64,
                reason: "n_seq and t_seq must have equal length",
            });
        }
        for j in 1..self.n_seq.len() {
            if self.n_seq[j] < self.n_seq[j - 1] {
                return Err(Error::InvalidParameter {
                    name: "n_seq",
                    value: self.n_seq[j] as f64,
                    reason: "must be nondecreasing",
                });
            }
            // n_{j+1}/n_j ≤ (j+1)/j with j 1-based, compared in integers
            if self.n_seq[j] * j as u64 > self.n_seq[j - 1] * (j as u64 + 1) {
                return Err(Error::InvalidParameter {
                    name: "n_seq",
                    value: self.n_seq[j] as f64,
                    reason: "grows faster than (j+1)/j",
                });
            }
        }
        let exponent = 2.0 * d / self.p;
        for (&n, &t) in self.n_seq.iter().zip(&self.t_seq) {
            if t == 0 || t > n.pow(self.dim as u32) {
                return Err(Error::InvalidParameter {
                    name: "t_seq",
                    value: t as f64,
                    reason: "need 1 ≤ t_j ≤ n_j^d",
                });
            }
            let scale = (n as f64).powf(exponent);
            let tf = t as f64;
            if tf < self.c0 * scale * (1.0 - 1e-9) || tf > self.c1 * scale * (1.0 + 1e-9) {
                return Err(Error::InvalidParameter {
                    name: "t_seq",
                    value: tf,
                    reason: "violates the recorded c0/c1 sandwich",
                });
            }
        }
        Ok(())
    }
}

fn validate_coeffs(s: &Alphabet, coeffs: &[Complex64]) -> Result<()> {
    if s.elements.is_empty() {
        return Err(Error::EmptyAlphabet);
    }
    if coeffs.len() != s.size {
        return Err(Error::CoefficientMismatch {
            coeffs: coeffs.len(),
            elements: s.size,
        });
    }
    Ok(())
}

/// Convolution of finitely supported coefficient sequences on ℤ^d.
fn convolve(
    a: &HashMap<LatticePoint, Complex64>,
    b: &HashMap<LatticePoint, Complex64>,
) -> HashMap<LatticePoint, Complex64> {
    let mut out: HashMap<LatticePoint, Complex64> = HashMap::with_capacity(a.len() * b.len() / 2);
    for (ka, va) in a {
        for (kb, vb) in b {
            let key: LatticePoint = ka.iter().zip(kb).map(|(x, y)| x + y).collect();
            *out.entry(key).or_insert(Complex64::new(0.0, 0.0)) += va * vb;
        }
    }
    out
}

fn coeff_map(s: &Alphabet, coeffs: &[Complex64]) -> HashMap<LatticePoint, Complex64> {
    s.elements
        .iter()
        .cloned()
        .zip(coeffs.iter().copied())
        .collect()
}

/// `c^{*m}` by repeated convolution.
fn coeff_power(c: &HashMap<LatticePoint, Complex64>, m: u32) -> HashMap<LatticePoint, Complex64> {
    assert!(m >= 1);
    let mut acc = c.clone();
    for _ in 1..m {
        acc = convolve(&acc, c);
    }
    acc
}

fn l2_sq(map: &HashMap<LatticePoint, Complex64>) -> f64 {
    map.values().map(|v| v.norm_sqr()).sum()
}

fn even_half_exponent(p: f64) -> Option<u32> {
    let m = p / 2.0;
    if p >= 2.0 && m.fract() == 0.0 && m <= 64.0 {
        Some(m as u32)
    } else {
        None
    }
}

/// Exact L^{2m} norm of `Σ c_a e^{2πi a·x}` via `‖c^{*m}‖_2^2`.
pub fn exp_sum_even_norm(s: &Alphabet, coeffs: &[Complex64], m: u32) -> Result<f64> {
    validate_coeffs(s, coeffs)?;
    let u = coeff_power(&coeff_map(s, coeffs), m);
    Ok(l2_sq(&u).powf(1.0 / (2.0 * m as f64)))
}

/// Evaluate `f(x) = Σ_a c_a e^{2πi a·x}` at a point.
fn exp_sum_value(s: &Alphabet, coeffs: &[Complex64], x: &[f64]) -> Complex64 {
    s.elements
        .iter()
        .zip(coeffs)
        .map(|(a, c)| {
            let phase: f64 = a.iter().zip(x).map(|(&ai, &xi)| ai as f64 * xi).sum();
            c * Complex64::cis(TAU * phase)
        })
        .sum()
}

/// L^p norm of the exponential sum by midpoint quadrature at the given
/// spacing over `[0,1]^d`.
pub fn exp_sum_lp_norm_quadrature(
    s: &Alphabet,
    coeffs: &[Complex64],
    p: f64,
    spacing: f64,
) -> Result<f64> {
    validate_coeffs(s, coeffs)?;
    if p < 1.0 {
        return Err(Error::InvalidExponent {
            p,
            reason: "need p ≥ 1",
        });
    }
    if spacing <= 0.0 || spacing > 1.0 {
        return Err(Error::InvalidSpacing {
            spacing,
            max_allowed: 1.0,
        });
    }
    let grid = MidpointGrid::over_cube(&vec![0.0; s.dim.max(1)], 1.0, spacing)?;
    Ok(grid_lp_norm(&grid, p, |x| {
        exp_sum_value(s, coeffs, x).norm()
    }))
}

/// L^p norm of `Σ_a c_a e^{2πi a·x}` over `[0,1]^d`.
///
/// For even integer p = 2m the exact convolution value is returned and
/// `spacing` is ignored; otherwise midpoint quadrature at `spacing` is used.
pub fn exp_sum_lp_norm(s: &Alphabet, coeffs: &[Complex64], p: f64, spacing: f64) -> Result<f64> {
    if p < 1.0 {
        return Err(Error::InvalidExponent {
            p,
            reason: "need p ≥ 1",
        });
    }
    if spacing <= 0.0 {
        return Err(Error::InvalidSpacing {
            spacing,
            max_allowed: 1.0,
        });
    }
    if let Some(m) = even_half_exponent(p) {
        exp_sum_even_norm(s, coeffs, m)
    } else {
        exp_sum_lp_norm_quadrature(s, coeffs, p, spacing)
    }
}

/// Quadrature with spacing halving until two successive values agree within
/// `1e-4` relative, capped at the grid point budget.
pub fn exp_sum_lp_norm_auto(s: &Alphabet, coeffs: &[Complex64], p: f64) -> Result<(f64, f64)> {
    validate_coeffs(s, coeffs)?;
    let max_freq = s
        .elements
        .iter()
        .flat_map(|e| e.iter().map(|&x| x.unsigned_abs()))
        .max()
        .unwrap_or(0)
        .max(1);
    let mut spacing = 1.0 / (4.0 * max_freq as f64);
    let mut prev = exp_sum_lp_norm_quadrature(s, coeffs, p, spacing)?;
    loop {
        let next_spacing = spacing / 2.0;
        let pts = (1.0 / next_spacing).ceil().powi(s.dim as i32);
        if pts > GRID_POINT_BUDGET as f64 {
            return Ok((prev, spacing));
        }
        let next = exp_sum_lp_norm_quadrature(s, coeffs, p, next_spacing)?;
        let rel = (next - prev).abs() / next.abs().max(1e-300);
        spacing = next_spacing;
        prev = next;
        if rel < 1e-4 {
            return Ok((prev, spacing));
        }
    }
}

/// Number of quadruples `(a,b,c,d) ∈ S^4` with `a+b = c+d` in ℤ^d, computed
/// by hashing ordered pair sums: the energy is `Σ_s r(s)^2`.
pub fn additive_energy(s: &Alphabet) -> Result<u64> {
    if s.elements.is_empty() {
        return Err(Error::EmptyAlphabet);
    }
    let sums = pair_sums(&s.elements);
    Ok(sums.values().map(|&r| r * r).sum())
}

fn pair_sums(elements: &[LatticePoint]) -> HashMap<LatticePoint, u64> {
    let mut sums: HashMap<LatticePoint, u64> =
        HashMap::with_capacity(elements.len() * elements.len());
    for a in elements {
        for b in elements {
            let key: LatticePoint = a.iter().zip(b).map(|(x, y)| x + y).collect();
            *sums.entry(key).or_insert(0) += 1;
        }
    }
    sums
}

struct RatioEvaluator<'a> {
    s: &'a Alphabet,
    p: f64,
    /// Some(m) for even p = 2m.
    even_m: Option<u32>,
    /// Quadrature grid (non-even p only).
    grid: Option<MidpointGrid>,
}

impl<'a> RatioEvaluator<'a> {
    fn new(s: &'a Alphabet, p: f64) -> Result<Self> {
        let even_m = even_half_exponent(p);
        let grid = if even_m.is_some() {
            None
        } else {
            // spacing chosen by the halving policy on the flat vector
            let ones = vec![Complex64::new(1.0, 0.0); s.size];
            let (_, spacing) = exp_sum_lp_norm_auto(s, &ones, p)?;
            Some(MidpointGrid::over_cube(&vec![0.0; s.dim], 1.0, spacing)?)
        };
        Ok(RatioEvaluator { s, p, even_m, grid })
    }

    fn spacing(&self) -> Option<f64> {
        self.grid.as_ref().map(|g| g.spacing)
    }

    /// Ratio ‖Σ c_a e(a·x)‖_p / ‖c‖_2.
    fn ratio(&self, coeffs: &[Complex64]) -> f64 {
        let l2: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if l2 == 0.0 {
            return 0.0;
        }
        let norm = match self.even_m {
            Some(m) => exp_sum_even_norm(self.s, coeffs, m).unwrap(),
            None => grid_lp_norm(self.grid.as_ref().unwrap(), self.p, |x| {
                exp_sum_value(self.s, coeffs, x).norm()
            }),
        };
        norm / l2
    }

    /// One ascent step: replace c by the normalized adjoint image of
    /// `|f|^{p-2} f` (for even p, the exact gradient of `‖c^{*m}‖_2^2`).
    fn step(&self, coeffs: &mut Vec<Complex64>) {
        match self.even_m {
            Some(m) => {
                let c = coeff_map(self.s, coeffs);
                let u = coeff_power(&c, m);
                let grad: Vec<Complex64> = if m == 1 {
                    coeffs.clone()
                } else {
                    let v = coeff_power(&c, m - 1);
                    self.s
                        .elements
                        .iter()
                        .map(|a| {
                            let mut acc = Complex64::new(0.0, 0.0);
                            for (key, vv) in &v {
                                let shifted: LatticePoint =
                                    key.iter().zip(a).map(|(k, ai)| k + ai).collect();
                                if let Some(uu) = u.get(&shifted) {
                                    acc += uu * vv.conj();
                                }
                            }
                            acc
                        })
                        .collect()
                };
                normalize_or_keep(coeffs, grad);
            }
            None => {
                let grid = self.grid.as_ref().unwrap();
                let h = grid.cell_volume();
                let dim = grid.dim();
                let mut x = vec![0.0; dim];
                let mut grad = vec![Complex64::new(0.0, 0.0); coeffs.len()];
                for flat in 0..grid.len() {
                    grid.point(flat, &mut x);
                    let f = exp_sum_value(self.s, coeffs, &x);
                    let r = f.norm();
                    if r == 0.0 {
                        continue;
                    }
                    let w = f * r.powf(self.p - 2.0) * h;
                    for (g, a) in grad.iter_mut().zip(&self.s.elements) {
                        let phase: f64 = a.iter().zip(&x).map(|(&ai, &xi)| ai as f64 * xi).sum();
                        *g += w * Complex64::cis(-TAU * phase);
                    }
                }
                normalize_or_keep(coeffs, grad);
            }
        }
    }
}

fn normalize_or_keep(coeffs: &mut Vec<Complex64>, grad: Vec<Complex64>) {
    let norm: f64 = grad.iter().map(|g| g.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        *coeffs = grad.into_iter().map(|g| g / norm).collect();
    }
}

/// Certified lower bound on the Λ(p) constant of `s`, by nonlinear power
/// iteration from a flat start plus seeded random starts. The best ratio over
/// every evaluated iterate is reported, so the result always dominates the
/// flat-coefficient ratio and is never below 1.
pub fn lambda_p_constant(
    s: &Alphabet,
    p: f64,
    budget: IterationBudget,
    seed: u64,
    cap: f64,
) -> Result<LambdaPCertificate> {
    if s.elements.is_empty() {
        return Err(Error::EmptyAlphabet);
    }
    if p <= 2.0 {
        return Err(Error::InvalidExponent {
            p,
            reason: "need p > 2",
        });
    }
    if budget.starts == 0 || budget.iters_per_start == 0 {
        return Err(Error::ZeroBudget);
    }
    let eval = RatioEvaluator::new(s, p)?;
    let mut best = 1.0f64; // singleton coefficient vector witnesses ratio 1
    let mut total_iters = 0u64;
    for start in 0..budget.starts {
        let mut coeffs: Vec<Complex64> = if start == 0 {
            vec![Complex64::new(1.0, 0.0); s.size]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(start as u64);
            (0..s.size)
                .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
                .collect()
        };
        let mut prev = 0.0;
        for _ in 0..budget.iters_per_start {
            let r = eval.ratio(&coeffs);
            best = best.max(r);
            total_iters += 1;
            if (r - prev).abs() <= 1e-12 * r.abs() {
                break;
            }
            prev = r;
            eval.step(&mut coeffs);
        }
        best = best.max(eval.ratio(&coeffs));
    }
    Ok(LambdaPCertificate {
        exponent: p,
        constant_lower: best,
        constant_cap: cap,
        method: if eval.even_m.is_some() {
            CertMethod::ExactEvenP
        } else {
            CertMethod::Quadrature
        },
        grid_spacing: eval.spacing(),
        iterations: total_iters,
    })
}

/// Budget knobs for [`search_lambda_p_set`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchBudget {
    pub swap_rounds: usize,
    /// Budget of the final certification pass.
    pub certify: IterationBudget,
    /// Cheap budget used to score candidates when p ≠ 4.
    pub score: IterationBudget,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            swap_rounds: 200,
            certify: IterationBudget::default(),
            score: IterationBudget {
                starts: 2,
                iters_per_start: 12,
            },
        }
    }
}

fn all_points(dim: usize, modulus: u64) -> Vec<LatticePoint> {
    let mut pts = vec![vec![]];
    for _ in 0..dim {
        let mut next = Vec::with_capacity(pts.len() * modulus as usize);
        for p in &pts {
            for x in 0..modulus {
                let mut q = p.clone();
                q.push(x as i64);
                next.push(q);
            }
        }
        pts = next;
    }
    pts.sort();
    pts
}

/// Additive-energy increase caused by inserting `x` into a set with the
/// given ordered-pair-sum counts.
fn energy_increment(
    sums: &HashMap<LatticePoint, u64>,
    elements: &[LatticePoint],
    x: &LatticePoint,
) -> u64 {
    let mut delta: HashMap<LatticePoint, u64> = HashMap::with_capacity(elements.len() + 1);
    for s in elements {
        let key: LatticePoint = s.iter().zip(x).map(|(a, b)| a + b).collect();
        *delta.entry(key).or_insert(0) += 2;
    }
    let twice: LatticePoint = x.iter().map(|a| 2 * a).collect();
    *delta.entry(twice).or_insert(0) += 1;
    delta
        .into_iter()
        .map(|(key, m)| {
            let r = sums.get(&key).copied().unwrap_or(0);
            2 * r * m + m * m
        })
        .sum()
}

fn insert_into_sums(
    sums: &mut HashMap<LatticePoint, u64>,
    elements: &[LatticePoint],
    x: &LatticePoint,
) {
    for s in elements {
        let key: LatticePoint = s.iter().zip(x).map(|(a, b)| a + b).collect();
        *sums.entry(key).or_insert(0) += 2;
    }
    let twice: LatticePoint = x.iter().map(|a| 2 * a).collect();
    *sums.entry(twice).or_insert(0) += 1;
}

fn set_energy(elements: &[LatticePoint]) -> u64 {
    pair_sums(elements).values().map(|&r| r * r).sum()
}

/// Score used during search: lower is better. For p = 4 the additive energy
/// is an exact monotone proxy for the flat-coefficient ratio; otherwise a
/// cheap certificate is computed.
fn search_score(
    dim: usize,
    modulus: u64,
    elements: &[LatticePoint],
    p: f64,
    budget: IterationBudget,
    seed: u64,
) -> f64 {
    if p == 4.0 {
        set_energy(elements) as f64
    } else {
        let s = Alphabet::new(dim, modulus, elements.to_vec()).expect("candidate set is valid");
        lambda_p_constant(&s, p, budget, seed, f64::INFINITY)
            .map(|c| c.constant_lower)
            .unwrap_or(f64::INFINITY)
    }
}

/// Greedy insertion (minimizing the certified-constant increase, via additive
/// energy when p = 4) followed by seeded local swap refinement. Deterministic
/// for a fixed seed; ties break to the lexicographically smallest point.
///
/// On success returns the set and its certificate; if the certified constant
/// still exceeds `constant_cap` after the budget is exhausted, the best set
/// found is reported inside [`Error::SearchFailure`].
pub fn search_lambda_p_set(
    modulus: u64,
    dim: usize,
    p: f64,
    target_size: usize,
    constant_cap: f64,
    seed: u64,
    budget: SearchBudget,
) -> Result<(Alphabet, LambdaPCertificate)> {
    if p <= 2.0 {
        return Err(Error::InvalidExponent {
            p,
            reason: "need p > 2",
        });
    }
    let universe = all_points(dim, modulus);
    if target_size == 0 || target_size > universe.len() {
        return Err(Error::InvalidParameter {
            name: "target_size",
            value: target_size as f64,
            reason: "need 1 ≤ target_size ≤ N^d",
        });
    }
    if constant_cap <= 1.0 {
        return Err(Error::InvalidParameter {
            name: "constant_cap",
            value: constant_cap,
            reason: "need cap > 1",
        });
    }

    let use_energy = p == 4.0;
    let mut elements: Vec<LatticePoint> = Vec::with_capacity(target_size);
    let mut sums: HashMap<LatticePoint, u64> = HashMap::new();
    let mut score_seed = seed;

    while elements.len() < target_size {
        let mut best_point: Option<&LatticePoint> = None;
        let mut best_score = f64::INFINITY;
        for candidate in &universe {
            if elements.contains(candidate) {
                continue;
            }
            let score = if use_energy {
                energy_increment(&sums, &elements, candidate) as f64
            } else {
                let mut trial = elements.clone();
                trial.push(candidate.clone());
                score_seed = score_seed.wrapping_add(1);
                search_score(dim, modulus, &trial, p, budget.score, score_seed)
            };
            // strict improvement keeps the lexicographically first candidate
            if score < best_score {
                best_score = score;
                best_point = Some(candidate);
            }
        }
        let chosen = best_point.expect("universe has spare points").clone();
        if use_energy {
            insert_into_sums(&mut sums, &elements, &chosen);
        }
        elements.push(chosen);
        elements.sort();
    }

    // local swap refinement
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current_score = search_score(dim, modulus, &elements, p, budget.score, seed);
    if target_size < universe.len() {
        for round in 0..budget.swap_rounds {
            let i = rng.gen_range(0..elements.len());
            let candidate = &universe[rng.gen_range(0..universe.len())];
            if elements.contains(candidate) {
                continue;
            }
            let mut trial = elements.clone();
            trial[i] = candidate.clone();
            trial.sort();
            let trial_score = search_score(
                dim,
                modulus,
                &trial,
                p,
                budget.score,
                seed.wrapping_add(round as u64 + 1),
            );
            if trial_score < current_score {
                elements = trial;
                current_score = trial_score;
            }
        }
    }

    let alphabet = Alphabet::new(dim, modulus, elements)?;
    let certificate = lambda_p_constant(&alphabet, p, budget.certify, seed, constant_cap)?;
    if certificate.exceeds_cap() {
        let constant = certificate.constant_lower;
        return Err(Error::SearchFailure {
            best: Box::new(alphabet),
            certificate: Box::new(certificate),
            constant,
            cap: constant_cap,
        });
    }
    Ok((alphabet, certificate))
}

/// Sequence plan with `n_{j+1} = floor(n_j (j+1)/j)` (slow growth) and
/// `t_j = max(1, floor(c0 n_j^{2d/p}))` clipped to `n_j^d`, p = 2d/α.
/// The recorded `c0`/`c1` sandwich constants are measured post hoc.
pub fn make_sequence_plan(
    alpha: f64,
    dim: usize,
    n1: u64,
    depth: usize,
    c0: f64,
) -> Result<SequencePlan> {
    if !(alpha > 0.0 && alpha < dim as f64) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            value: alpha,
            reason: "must lie in (0, d)",
        });
    }
    if n1 < 2 {
        return Err(Error::InvalidParameter {
            name: "n1",
            value: n1 as f64,
            reason: "need n1 ≥ 2",
        });
    }
    if depth == 0 {
        return Err(Error::InvalidParameter {
            name: "depth",
            value: 0.0,
            reason: "need depth ≥ 1",
        });
    }
    if c0 <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "c0",
            value: c0,
            reason: "must be positive",
        });
    }
    let p = 2.0 * dim as f64 / alpha;
    let exponent = 2.0 * dim as f64 / p; // = alpha
    let mut n_seq = Vec::with_capacity(depth);
    let mut n = n1;
    for j in 1..=depth {
        if j > 1 {
            n = n * (j as u64) / (j as u64 - 1); // floor(n_{j-1} * j/(j-1))
        }
        n_seq.push(n);
    }
    let t_seq: Vec<u64> = n_seq
        .iter()
        .map(|&nj| {
            // 1e-9 nudge guards against ULP noise in powf (e.g. 8^(2/3))
            let raw = (c0 * (nj as f64).powf(exponent) + 1e-9).floor() as u64;
            raw.max(1).min(nj.pow(dim as u32))
        })
        .collect();
    let ratios: Vec<f64> = n_seq
        .iter()
        .zip(&t_seq)
        .map(|(&nj, &tj)| tj as f64 / (nj as f64).powf(exponent))
        .collect();
    let plan = SequencePlan {
        dim,
        alpha,
        p,
        n_seq,
        t_seq,
        c0: ratios.iter().cloned().fold(f64::INFINITY, f64::min),
        c1: ratios.iter().cloned().fold(0.0, f64::max),
    };
    plan.validate()?;
    Ok(plan)
}

/// Restriction exponent threshold `(4d - 4α + 2β)/β` for a measure with ball
/// exponent α and Fourier decay exponent β/2.
pub fn mockenhaupt_exponent(dim: usize, alpha: f64, beta: f64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "beta",
            value: beta,
            reason: "must be positive",
        });
    }
    if !(alpha > 0.0 && alpha < dim as f64) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            value: alpha,
            reason: "must lie in (0, d)",
        });
    }
    let d = dim as f64;
    Ok((4.0 * d - 4.0 * alpha + 2.0 * beta) / beta)
}

//! Finite-stage random-translate Cantor measures.
//!
//! A stage of depth k is built from a [`SequencePlan`] and one alphabet
//! `B_j ⊂ [n_j]^d` per level: every level-(j-1) node a draws an independent
//! uniform translation `v(j,a) ∈ [n_j]^d` and spawns the children
//! `a·n_j + ((v + B_j) mod n_j)`. Node corners are stored as exact integers
//! over the denominator N_j = n_1⋯n_j, so nesting and mass bookkeeping are
//! exact. The stage measure μ_k is the normalized indicator of the union of
//! the deepest cubes: uniform mass T_k⁻¹ per cube, density T_k⁻¹ N_k^d.
//!
//! Boundary convention: cubes are half-open `[a, a + N_j⁻¹)^d` for density
//! evaluation and closed for mass computations (a measure-zero difference).

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alphabet::{Alphabet, LatticePoint, SequencePlan};
use crate::error::{Error, Result};
use crate::quad::radial_box_integral;

/// Default cap on the number of deepest-level nodes.
pub const DEFAULT_NODE_BUDGET: u64 = 1_000_000;

/// Current on-disk format version for stage documents.
pub const STAGE_FORMAT_VERSION: u32 = 1;

/// RNG stream offset used for martingale trials (levels use streams 1..=k).
const TRIAL_STREAM_BASE: u64 = 1 << 32;

/// Nodes of one level, stored flat and lexicographically sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSet {
    dim: usize,
    coords: Vec<i64>,
}

impl NodeSet {
    fn with_capacity(dim: usize, nodes: usize) -> Self {
        NodeSet {
            dim,
            coords: Vec::with_capacity(dim * nodes),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn node(&self, i: usize) -> &[i64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[i64]> {
        self.coords.chunks_exact(self.dim)
    }

    /// Binary search (nodes are lex-sorted).
    pub fn find(&self, coords: &[i64]) -> Option<usize> {
        let mut lo = 0usize;
        let mut hi = self.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.node(mid).cmp(coords) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(mid),
            }
        }
        None
    }
}

/// Stage-k object: tree of cubes with uniform weights T_k⁻¹.
#[derive(Debug, Clone, PartialEq)]
pub struct CantorStage {
    plan: SequencePlan,
    /// Alphabet B_j for levels j = 1..=k.
    alphabets: Vec<Alphabet>,
    /// translations[j-1][parent] = v(j, parent) for each level-(j-1) node.
    translations: Vec<Vec<LatticePoint>>,
    /// levels[j] = lex-sorted integer corners at level j (denominator N_j).
    levels: Vec<NodeSet>,
    /// parents[j-1][i] = index into levels[j-1] of the parent of levels[j][i].
    parents: Vec<Vec<u32>>,
    n_cum: Vec<u64>,
    t_cum: Vec<u64>,
}

impl CantorStage {
    pub fn dim(&self) -> usize {
        self.plan.dim
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn plan(&self) -> &SequencePlan {
        &self.plan
    }

    pub fn alphabets(&self) -> &[Alphabet] {
        &self.alphabets
    }

    pub fn translations(&self) -> &[Vec<LatticePoint>] {
        &self.translations
    }

    /// N_j for j = 0..=depth.
    pub fn n_cum(&self) -> &[u64] {
        &self.n_cum
    }

    /// T_j for j = 0..=depth.
    pub fn t_cum(&self) -> &[u64] {
        &self.t_cum
    }

    pub fn n_k(&self) -> u64 {
        *self.n_cum.last().unwrap()
    }

    pub fn t_k(&self) -> u64 {
        *self.t_cum.last().unwrap()
    }

    pub fn level(&self, j: usize) -> &NodeSet {
        &self.levels[j]
    }

    pub fn deepest(&self) -> &NodeSet {
        self.levels.last().unwrap()
    }

    /// Parent index (into level j-1) of node i at level j ≥ 1.
    pub fn parent_index(&self, j: usize, i: usize) -> usize {
        self.parents[j - 1][i] as usize
    }

    /// Corner of node i at level j in `[0,1)^d` coordinates.
    pub fn corner_f64(&self, j: usize, i: usize) -> Vec<f64> {
        let scale = 1.0 / self.n_cum[j] as f64;
        self.levels[j]
            .node(i)
            .iter()
            .map(|&c| c as f64 * scale)
            .collect()
    }

    /// Density of μ_k at a point (half-open cube convention).
    pub fn density_at(&self, x: &[f64]) -> f64 {
        let k = self.depth();
        let nk = self.n_cum[k];
        let cell: Vec<i64> = x
            .iter()
            .map(|&xi| (xi * nk as f64).floor() as i64)
            .collect();
        if cell.iter().any(|&c| c < 0 || c as u64 >= nk) {
            return 0.0;
        }
        if self.deepest().find(&cell).is_some() {
            (nk as f64).powi(self.dim() as i32) / self.t_k() as f64
        } else {
            0.0
        }
    }

    /// Prefix sub-stage of depth `k ≤ depth` (shares the construction).
    pub fn truncate(&self, k: usize) -> CantorStage {
        assert!(k <= self.depth());
        let mut plan = self.plan.clone();
        plan.n_seq.truncate(k);
        plan.t_seq.truncate(k);
        // keep a valid plan when truncating to depth 0
        if k == 0 {
            plan.n_seq = vec![];
            plan.t_seq = vec![];
        }
        CantorStage {
            plan,
            alphabets: self.alphabets[..k].to_vec(),
            translations: self.translations[..k].to_vec(),
            levels: self.levels[..=k].to_vec(),
            parents: self.parents[..k].to_vec(),
            n_cum: self.n_cum[..=k].to_vec(),
            t_cum: self.t_cum[..=k].to_vec(),
        }
    }

    pub fn to_document(&self) -> StageDocument {
        StageDocument {
            format_version: STAGE_FORMAT_VERSION,
            plan: self.plan.clone(),
            alphabets: self.alphabets.clone(),
            translations: self.translations.clone(),
        }
    }
}

fn validate_alphabets(plan: &SequencePlan, alphabets: &[Alphabet], depth: usize) -> Result<()> {
    if depth > plan.depth() {
        return Err(Error::PlanMismatch {
            level: depth,
            reason: format!("plan has depth {}", plan.depth()),
        });
    }
    if alphabets.len() < depth {
        return Err(Error::PlanMismatch {
            level: depth,
            reason: format!("only {} alphabets supplied", alphabets.len()),
        });
    }
    for (j, a) in alphabets.iter().enumerate().take(depth) {
        if a.dim != plan.dim {
            return Err(Error::PlanMismatch {
                level: j + 1,
                reason: format!("alphabet dim {} ≠ plan dim {}", a.dim, plan.dim),
            });
        }
        if a.modulus != plan.n_seq[j] {
            return Err(Error::PlanMismatch {
                level: j + 1,
                reason: format!("alphabet modulus {} ≠ n_j = {}", a.modulus, plan.n_seq[j]),
            });
        }
        if a.size as u64 != plan.t_seq[j] {
            return Err(Error::PlanMismatch {
                level: j + 1,
                reason: format!("alphabet size {} ≠ t_j = {}", a.size, plan.t_seq[j]),
            });
        }
    }
    Ok(())
}

/// Assemble a stage from explicit translations (the deterministic core shared
/// by building and reloading).
fn assemble(
    plan: SequencePlan,
    alphabets: Vec<Alphabet>,
    translations: Vec<Vec<LatticePoint>>,
    node_budget: u64,
) -> Result<CantorStage> {
    let depth = translations.len();
    validate_alphabets(&plan, &alphabets, depth)?;
    let dim = plan.dim;
    let n_cum: Vec<u64> = std::iter::once(1)
        .chain(plan.n_seq[..depth].iter().scan(1u64, |acc, &n| {
            *acc *= n;
            Some(*acc)
        }))
        .collect();
    let t_cum: Vec<u64> = std::iter::once(1)
        .chain(plan.t_seq[..depth].iter().scan(1u64, |acc, &t| {
            *acc *= t;
            Some(*acc)
        }))
        .collect();
    if *t_cum.last().unwrap() > node_budget {
        return Err(Error::NodeBudget {
            nodes: *t_cum.last().unwrap(),
            budget: node_budget,
        });
    }

    let mut levels = vec![NodeSet {
        dim,
        coords: vec![0; dim],
    }];
    let mut parents: Vec<Vec<u32>> = Vec::with_capacity(depth);

    for j in 1..=depth {
        let n_j = plan.n_seq[j - 1] as i64;
        let b_j = &alphabets[j - 1];
        let parent_level = &levels[j - 1];
        let vs = &translations[j - 1];
        if vs.len() != parent_level.len() {
            return Err(Error::BadDocument(format!(
                "level {j}: {} translations for {} parents",
                vs.len(),
                parent_level.len()
            )));
        }
        let mut children: Vec<(LatticePoint, u32)> =
            Vec::with_capacity(parent_level.len() * b_j.size);
        for (pi, a) in parent_level.iter().enumerate() {
            let v = &vs[pi];
            if v.len() != dim || v.iter().any(|&c| c < 0 || c >= n_j) {
                return Err(Error::BadDocument(format!(
                    "level {j}: translation {v:?} outside [0, {n_j})^{dim}"
                )));
            }
            for b in &b_j.elements {
                let child: LatticePoint = a
                    .iter()
                    .zip(v.iter().zip(b))
                    .map(|(&ai, (&vi, &bi))| ai * n_j + (vi + bi).rem_euclid(n_j))
                    .collect();
                children.push((child, pi as u32));
            }
        }
        children.sort();
        debug_assert!(
            children.windows(2).all(|w| w[0].0 != w[1].0),
            "duplicate node"
        );
        let mut set = NodeSet::with_capacity(dim, children.len());
        let mut par = Vec::with_capacity(children.len());
        for (c, pi) in children {
            set.coords.extend_from_slice(&c);
            par.push(pi);
        }
        levels.push(set);
        parents.push(par);
    }

    Ok(CantorStage {
        plan,
        alphabets,
        translations,
        levels,
        parents,
        n_cum,
        t_cum,
    })
}

fn draw_translations(
    plan: &SequencePlan,
    depth: usize,
    seed: u64,
    zero: bool,
) -> Vec<Vec<LatticePoint>> {
    let dim = plan.dim;
    let mut translations = Vec::with_capacity(depth);
    let mut parent_count = 1usize;
    for j in 1..=depth {
        let n_j = plan.n_seq[j - 1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let vs: Vec<LatticePoint> = (0..parent_count)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        if zero {
                            0
                        } else {
                            rng.gen_range(0..n_j) as i64
                        }
                    })
                    .collect()
            })
            .collect();
        translations.push(vs);
        parent_count *= plan.t_seq[j - 1] as usize;
    }
    translations
}

/// Build a random-translate stage: each parent at level j-1 draws an
/// independent uniform `v(j,a) ∈ [n_j]^d` (seeded, one RNG stream per level)
/// and uses the alphabet translated by v modulo n_j.
pub fn build_stage(
    plan: &SequencePlan,
    alphabets: &[Alphabet],
    depth: usize,
    seed: u64,
    node_budget: u64,
) -> Result<CantorStage> {
    validate_alphabets(plan, alphabets, depth)?;
    let translations = draw_translations(plan, depth, seed, false);
    assemble(
        plan.clone(),
        alphabets[..depth].to_vec(),
        translations,
        node_budget,
    )
}

/// Deterministic variant with every translation forced to zero (used for
/// self-similar degenerate stages such as the ternary-style measure).
pub fn build_stage_zero_translation(
    plan: &SequencePlan,
    alphabets: &[Alphabet],
    depth: usize,
    node_budget: u64,
) -> Result<CantorStage> {
    validate_alphabets(plan, alphabets, depth)?;
    let translations = draw_translations(plan, depth, 0, true);
    assemble(
        plan.clone(),
        alphabets[..depth].to_vec(),
        translations,
        node_budget,
    )
}

/// Exact measure of a level-j cube: T_j⁻¹ as a rational.
pub fn measure_of_cube(stage: &CantorStage, level: usize, corner: &[i64]) -> Result<Ratio<u64>> {
    if level > stage.depth() {
        return Err(Error::NotANode { level });
    }
    if stage.levels[level].find(corner).is_none() {
        return Err(Error::NotANode { level });
    }
    Ok(Ratio::new(1, stage.t_cum[level]))
}

/// μ_k(B(center, radius)), summing over deepest cubes the fraction of the
/// cube inside the ball (adaptive subdivision, closed cubes).
pub fn ball_mass(stage: &CantorStage, center: &[f64], radius: f64) -> Result<f64> {
    if radius <= 0.0 {
        return Err(Error::InvalidRadius(radius));
    }
    if center.len() != stage.dim() {
        return Err(Error::DimensionMismatch {
            expected: stage.dim(),
            got: center.len(),
        });
    }
    let k = stage.depth();
    let nk = stage.n_cum[k] as f64;
    let side = 1.0 / nk;
    let cube_vol = side.powi(stage.dim() as i32);
    let tol = 1e-6 * cube_vol;
    let profile = |d: f64| if d <= radius { 1.0 } else { 0.0 };
    let nodes = stage.deepest();
    // collect per-cube contributions and add them in node order so the
    // result does not depend on the parallel join structure
    let per_cube: Vec<f64> = (0..nodes.len())
        .into_par_iter()
        .map(|i| {
            let lo: Vec<f64> = nodes.node(i).iter().map(|&c| c as f64 * side).collect();
            let hi: Vec<f64> = lo.iter().map(|&c| c + side).collect();
            // fast reject
            let (near, _) = crate::quad::box_distance_range(center, &lo, &hi);
            if near > radius {
                return 0.0;
            }
            radial_box_integral(center, &profile, &lo, &hi, tol) / cube_vol
        })
        .collect();
    Ok(per_cube.iter().sum::<f64>() / stage.t_k() as f64)
}

/// Sampling scheme for [`ball_condition_sup`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BallSampler {
    /// Random centers drawn uniformly from `[0,1]^d`, in addition to node corners.
    pub random_centers: usize,
    /// Geometric radius grid resolution.
    pub radius_steps: usize,
    /// Cap on node-corner centers (seeded subsample beyond this).
    pub max_node_centers: usize,
    pub seed: u64,
}

impl Default for BallSampler {
    fn default() -> Self {
        BallSampler {
            random_centers: 64,
            radius_steps: 32,
            max_node_centers: 1024,
            seed: 0,
        }
    }
}

/// Empirical Frostman report: sup over sampled (x, r) of μ(B(x,r))/r^γ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BallConditionReport {
    pub gamma: f64,
    pub sup_ratio: f64,
    pub argmax_center: Vec<f64>,
    pub argmax_radius: f64,
    pub samples: usize,
}

/// Sup of μ(B(x,r))/r^γ over node corners plus random centers, with radii on
/// a geometric grid spanning `[N_k⁻¹/4, 2√d]`.
///
/// γ ≥ α is allowed (the ratio may then grow with depth); callers that care
/// should warn, not fail.
pub fn ball_condition_sup(
    stage: &CantorStage,
    gamma: f64,
    sampler: &BallSampler,
) -> Result<BallConditionReport> {
    if gamma < 0.0 {
        return Err(Error::InvalidParameter {
            name: "gamma",
            value: gamma,
            reason: "must be nonnegative",
        });
    }
    let dim = stage.dim();
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let nodes = stage.deepest();
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    if nodes.len() <= sampler.max_node_centers {
        centers.extend((0..nodes.len()).map(|i| stage.corner_f64(stage.depth(), i)));
    } else {
        for _ in 0..sampler.max_node_centers {
            let i = rng.gen_range(0..nodes.len());
            centers.push(stage.corner_f64(stage.depth(), i));
        }
    }
    for _ in 0..sampler.random_centers {
        centers.push((0..dim).map(|_| rng.gen::<f64>()).collect());
    }

    let r_min = 0.25 / stage.n_k() as f64;
    let r_max = 2.0 * (dim as f64).sqrt();
    let steps = sampler.radius_steps.max(2);
    let ratio = (r_max / r_min).powf(1.0 / (steps - 1) as f64);
    let radii: Vec<f64> = (0..steps).map(|i| r_min * ratio.powi(i as i32)).collect();

    let per_center: Vec<(f64, usize, f64)> = centers
        .par_iter()
        .enumerate()
        .map(|(ci, c)| {
            let mut best = (0.0f64, ci, radii[0]);
            for &r in &radii {
                let mass = ball_mass(stage, c, r).unwrap();
                let q = mass / r.powf(gamma);
                if q > best.0 {
                    best = (q, ci, r);
                }
            }
            best
        })
        .collect();
    let (sup_ratio, ci, argmax_radius) = per_center.into_iter().fold(
        (0.0, 0, radii[0]),
        |acc, x| if x.0 > acc.0 { x } else { acc },
    );

    Ok(BallConditionReport {
        gamma,
        sup_ratio,
        argmax_center: centers[ci].clone(),
        argmax_radius,
        samples: centers.len() * radii.len(),
    })
}

/// Result of a martingale-property check at a point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub empirical_mean: f64,
    /// μ_{k-1}(x), the conditional expectation target.
    pub reference: f64,
    pub z_score: f64,
    /// The evaluation point actually used (perturbed off cube boundaries).
    pub point: Vec<f64>,
    pub trials: usize,
}

/// Push a point off every level-k cube boundary, recording the perturbation.
fn perturb_off_boundaries(x: &[f64], nk: u64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRIAL_STREAM_BASE - 1);
    let mut y = x.to_vec();
    let n = nk as f64;
    for yi in &mut y {
        let mut guard = 0;
        loop {
            let scaled = *yi * n;
            let frac = scaled - scaled.floor();
            if frac > 1e-9 && frac < 1.0 - 1e-9 && *yi < 1.0 {
                break;
            }
            *yi = (*yi + rng.gen_range(1e-7..2e-7) / n).min(1.0 - 0.5 / n);
            guard += 1;
            if guard > 100 {
                break;
            }
        }
    }
    y
}

struct MartingaleSetup {
    point: Vec<f64>,
    reference: f64,
    /// Child cell of the point relative to its level-(k-1) parent, when the
    /// parent cube belongs to the skeleton.
    cell: Option<LatticePoint>,
    hit_density: f64,
}

fn martingale_setup(
    plan: &SequencePlan,
    alphabets: &[Alphabet],
    k: usize,
    x: &[f64],
    seed: u64,
) -> Result<MartingaleSetup> {
    if k == 0 || k > plan.depth() {
        return Err(Error::InvalidParameter {
            name: "level",
            value: k as f64,
            reason: "need 1 ≤ k ≤ plan depth",
        });
    }
    if x.len() != plan.dim || x.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
        return Err(Error::OutsideUnitCube);
    }
    validate_alphabets(plan, alphabets, k)?;
    let skeleton = build_stage(plan, alphabets, k - 1, seed, DEFAULT_NODE_BUDGET)?;
    let n_cum = plan.n_cumulative();
    let (n_km1, n_k) = (n_cum[k - 1], n_cum[k]);
    let t_cum = plan.t_cumulative();
    let point = perturb_off_boundaries(x, n_k, seed);

    let parent_cell: Vec<i64> = point
        .iter()
        .map(|&xi| (xi * n_km1 as f64).floor() as i64)
        .collect();
    let dim = plan.dim as i32;
    let reference;
    let cell;
    if skeleton.deepest().find(&parent_cell).is_some() {
        reference = (n_km1 as f64).powi(dim) / t_cum[k - 1] as f64;
        let n_j = plan.n_seq[k - 1] as i64;
        cell = Some(
            point
                .iter()
                .zip(&parent_cell)
                .map(|(&xi, &pc)| (xi * n_k as f64).floor() as i64 - pc * n_j)
                .collect(),
        );
    } else {
        reference = 0.0;
        cell = None;
    }
    Ok(MartingaleSetup {
        point,
        reference,
        cell,
        hit_density: (n_k as f64).powi(dim) / t_cum[k] as f64,
    })
}

/// Exact conditional expectation of the level-k density at x, by enumerating
/// every translation of the relevant parent. Returns `(exact_mean, reference)`.
pub fn martingale_exact(
    plan: &SequencePlan,
    alphabets: &[Alphabet],
    k: usize,
    x: &[f64],
    seed: u64,
) -> Result<(f64, f64)> {
    let setup = martingale_setup(plan, alphabets, k, x, seed)?;
    let Some(cell) = setup.cell else {
        return Ok((0.0, 0.0));
    };
    let n_j = plan.n_seq[k - 1] as i64;
    let b = &alphabets[k - 1];
    let mut hits = 0u64;
    let mut total = 0u64;
    let mut v = vec![0i64; plan.dim];
    loop {
        total += 1;
        let member = b.elements.iter().any(|bv| {
            bv.iter()
                .zip(v.iter().zip(&cell))
                .all(|(&bi, (&vi, &ci))| (vi + bi).rem_euclid(n_j) == ci)
        });
        if member {
            hits += 1;
        }
        let mut axis = plan.dim;
        let mut done = true;
        while axis > 0 {
            axis -= 1;
            v[axis] += 1;
            if v[axis] < n_j {
                done = false;
                break;
            }
            v[axis] = 0;
        }
        if done {
            break;
        }
    }
    Ok((
        hits as f64 / total as f64 * setup.hit_density,
        setup.reference,
    ))
}

/// Monte-Carlo martingale check: M independent level-k refinements of one
/// fixed level-(k-1) skeleton, comparing the average density at x with
/// μ_{k-1}(x).
///
/// Only the translation of the parent cube containing x affects the density
/// there, so each trial draws exactly that translation (from a per-trial RNG
/// stream); the result is distributed identically to rebuilding the full
/// level. For a boundary point the recorded perturbation is reported back.
pub fn martingale_check(
    plan: &SequencePlan,
    alphabets: &[Alphabet],
    k: usize,
    x: &[f64],
    trials: usize,
    seed: u64,
) -> Result<MartingaleReport> {
    if trials == 0 {
        return Err(Error::ZeroBudget);
    }
    let setup = martingale_setup(plan, alphabets, k, x, seed)?;
    let n_j = plan.n_seq[k - 1];
    let b = &alphabets[k - 1];
    let dim = plan.dim;

    let densities: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| match &setup.cell {
            None => 0.0,
            Some(cell) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(TRIAL_STREAM_BASE + t as u64);
                let v: Vec<i64> = (0..dim).map(|_| rng.gen_range(0..n_j) as i64).collect();
                let member = b.elements.iter().any(|bv| {
                    bv.iter()
                        .zip(v.iter().zip(cell))
                        .all(|(&bi, (&vi, &ci))| (vi + bi).rem_euclid(n_j as i64) == ci)
                });
                if member {
                    setup.hit_density
                } else {
                    0.0
                }
            }
        })
        .collect();

    let m = trials as f64;
    let mean = densities.iter().sum::<f64>() / m;
    let var = densities
        .iter()
        .map(|d| (d - mean) * (d - mean))
        .sum::<f64>()
        / (m - 1.0).max(1.0);
    let se = (var / m).sqrt();
    let z_score = if se > 0.0 {
        (mean - setup.reference) / se
    } else if (mean - setup.reference).abs() < 1e-12 {
        0.0
    } else {
        f64::INFINITY * (mean - setup.reference).signum()
    };
    Ok(MartingaleReport {
        empirical_mean: mean,
        reference: setup.reference,
        z_score,
        point: setup.point,
        trials,
    })
}

/// Number of level-j cubes meeting the closed ball B(center, radius),
/// computed exactly from the integer lattice.
pub fn cubes_meeting_ball(stage: &CantorStage, level: usize, center: &[f64], radius: f64) -> usize {
    let n_j = stage.n_cum[level] as f64;
    let side = 1.0 / n_j;
    let dim = stage.dim();
    let lo: Vec<i64> = center
        .iter()
        .map(|&c| ((c - radius) * n_j).floor() as i64)
        .collect();
    let hi: Vec<i64> = center
        .iter()
        .map(|&c| ((c + radius) * n_j).floor() as i64)
        .collect();
    let mut count = 0usize;
    let mut cur = lo.clone();
    'outer: loop {
        if stage.levels[level].find(&cur).is_some() {
            let clo: Vec<f64> = cur.iter().map(|&c| c as f64 * side).collect();
            let chi: Vec<f64> = clo.iter().map(|&c| c + side).collect();
            let (near, _) = crate::quad::box_distance_range(center, &clo, &chi);
            if near <= radius {
                count += 1;
            }
        }
        let mut axis = dim;
        while axis > 0 {
            axis -= 1;
            cur[axis] += 1;
            if cur[axis] <= hi[axis] {
                continue 'outer;
            }
            cur[axis] = lo[axis];
        }
        break;
    }
    count
}

/// Versioned persistence document. Node arrays are derived data and are
/// reconstructed on load, so reload is bit-exact by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDocument {
    pub format_version: u32,
    pub plan: SequencePlan,
    pub alphabets: Vec<Alphabet>,
    pub translations: Vec<Vec<LatticePoint>>,
}

impl StageDocument {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: StageDocument = serde_json::from_str(s)?;
        if doc.format_version != STAGE_FORMAT_VERSION {
            return Err(Error::FormatVersion(doc.format_version));
        }
        Ok(doc)
    }

    pub fn into_stage(self, node_budget: u64) -> Result<CantorStage> {
        self.plan.validate()?;
        assemble(self.plan, self.alphabets, self.translations, node_budget)
    }

    /// Compact binary cache: little-endian integer arrays in level order.
    pub fn to_binary(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.write_all(b"FRLSTG1\0")?;
        w.write_u32::<LittleEndian>(self.format_version)?;
        w.write_u32::<LittleEndian>(self.plan.dim as u32)?;
        w.write_f64::<LittleEndian>(self.plan.alpha)?;
        w.write_f64::<LittleEndian>(self.plan.p)?;
        w.write_f64::<LittleEndian>(self.plan.c0)?;
        w.write_f64::<LittleEndian>(self.plan.c1)?;
        w.write_u32::<LittleEndian>(self.plan.depth() as u32)?;
        for (&n, &t) in self.plan.n_seq.iter().zip(&self.plan.t_seq) {
            w.write_u64::<LittleEndian>(n)?;
            w.write_u64::<LittleEndian>(t)?;
        }
        w.write_u32::<LittleEndian>(self.alphabets.len() as u32)?;
        for a in &self.alphabets {
            w.write_u64::<LittleEndian>(a.modulus)?;
            w.write_u64::<LittleEndian>(a.size as u64)?;
            for e in &a.elements {
                for &c in e {
                    w.write_i64::<LittleEndian>(c)?;
                }
            }
        }
        w.write_u32::<LittleEndian>(self.translations.len() as u32)?;
        for level in &self.translations {
            w.write_u64::<LittleEndian>(level.len() as u64)?;
            for v in level {
                for &c in v {
                    w.write_i64::<LittleEndian>(c)?;
                }
            }
        }
        Ok(w)
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"FRLSTG1\0" {
            return Err(Error::BadDocument("bad magic".into()));
        }
        let format_version = r.read_u32::<LittleEndian>()?;
        if format_version != STAGE_FORMAT_VERSION {
            return Err(Error::FormatVersion(format_version));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let alpha = r.read_f64::<LittleEndian>()?;
        let p = r.read_f64::<LittleEndian>()?;
        let c0 = r.read_f64::<LittleEndian>()?;
        let c1 = r.read_f64::<LittleEndian>()?;
        let depth = r.read_u32::<LittleEndian>()? as usize;
        let mut n_seq = Vec::with_capacity(depth);
        let mut t_seq = Vec::with_capacity(depth);
        for _ in 0..depth {
            n_seq.push(r.read_u64::<LittleEndian>()?);
            t_seq.push(r.read_u64::<LittleEndian>()?);
        }
        let n_alpha = r.read_u32::<LittleEndian>()? as usize;
        let mut alphabets = Vec::with_capacity(n_alpha);
        for _ in 0..n_alpha {
            let modulus = r.read_u64::<LittleEndian>()?;
            let size = r.read_u64::<LittleEndian>()? as usize;
            let mut elements = Vec::with_capacity(size);
            for _ in 0..size {
                let mut e = Vec::with_capacity(dim);
                for _ in 0..dim {
                    e.push(r.read_i64::<LittleEndian>()?);
                }
                elements.push(e);
            }
            alphabets.push(Alphabet::new(dim, modulus, elements)?);
        }
        let n_levels = r.read_u32::<LittleEndian>()? as usize;
        let mut translations = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            let count = r.read_u64::<LittleEndian>()? as usize;
            let mut level = Vec::with_capacity(count);
            for _ in 0..count {
                let mut v = Vec::with_capacity(dim);
                for _ in 0..dim {
                    v.push(r.read_i64::<LittleEndian>()?);
                }
                level.push(v);
            }
            translations.push(level);
        }
        Ok(StageDocument {
            format_version,
            plan: SequencePlan {
                dim,
                alpha,
                p,
                n_seq,
                t_seq,
                c0,
                c1,
            },
            alphabets,
            translations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::make_sequence_plan;
    use approx::assert_relative_eq;

    fn alpha1(points: &[i64], modulus: u64) -> Alphabet {
        Alphabet::new(1, modulus, points.iter().map(|&x| vec![x]).collect()).unwrap()
    }

    /// d=1 plan with explicit n/t sequences, sandwich constants recorded.
    fn plan_1d(n_seq: Vec<u64>, t_seq: Vec<u64>, alpha: f64) -> SequencePlan {
        let ratios: Vec<f64> = n_seq
            .iter()
            .zip(&t_seq)
            .map(|(&n, &t)| t as f64 / (n as f64).powf(alpha))
            .collect();
        let plan = SequencePlan {
            dim: 1,
            alpha,
            p: 2.0 / alpha,
            n_seq,
            t_seq,
            c0: ratios.iter().cloned().fold(f64::INFINITY, f64::min),
            c1: ratios.iter().cloned().fold(0.0, f64::max),
        };
        plan.validate().unwrap();
        plan
    }

    fn ternary_stage(depth: usize) -> CantorStage {
        let plan = SequencePlan::constant(1, 3, 2, depth).unwrap();
        let b = alpha1(&[0, 2], 3);
        build_stage_zero_translation(&plan, &vec![b; depth], depth, DEFAULT_NODE_BUDGET).unwrap()
    }

    #[test]
    fn depth_zero_is_unit_cube() {
        let plan = SequencePlan::constant(1, 3, 2, 1).unwrap();
        let stage = build_stage(&plan, &[alpha1(&[0, 2], 3)], 0, 0, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(stage.depth(), 0);
        assert_eq!(stage.t_k(), 1);
        assert_eq!(
            measure_of_cube(&stage, 0, &[0]).unwrap(),
            Ratio::new(1u64, 1)
        );
        assert_relative_eq!(stage.density_at(&[0.3]), 1.0);
    }

    #[test]
    fn ternary_first_step() {
        let stage = ternary_stage(1);
        let level1 = stage.level(1);
        assert_eq!(level1.len(), 2);
        assert_eq!(level1.node(0), &[0]);
        assert_eq!(level1.node(1), &[2]); // corner 2/3
    }

    #[test]
    fn two_level_structure_and_nesting() {
        let plan = SequencePlan::constant(1, 4, 2, 2).unwrap();
        let b = alpha1(&[0, 2], 4);
        let stage = build_stage(&plan, &[b.clone(), b], 2, 7, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(stage.t_cum(), &[1, 2, 4]);
        for j in 1..=stage.depth() {
            let n_j = stage.plan().n_seq[j - 1] as i64;
            for i in 0..stage.level(j).len() {
                let child = stage.level(j).node(i);
                let parent = stage.level(j - 1).node(stage.parent_index(j, i));
                for (c, p) in child.iter().zip(parent) {
                    assert_eq!(c.div_euclid(n_j), *p, "child not inside parent");
                    assert!((0..n_j).contains(&(c - p * n_j)));
                }
            }
        }
    }

    #[test]
    fn mass_conservation_exact() {
        let plan = plan_1d(vec![4, 4], vec![2, 3], 0.5);
        let stage = build_stage(
            &plan,
            &[alpha1(&[0, 2], 4), alpha1(&[1, 2, 3], 4)],
            2,
            3,
            DEFAULT_NODE_BUDGET,
        )
        .unwrap();
        for j in 0..=stage.depth() {
            let mut total = Ratio::new(0u64, 1);
            for i in 0..stage.level(j).len() {
                total += measure_of_cube(&stage, j, stage.level(j).node(i)).unwrap();
            }
            assert_eq!(total, Ratio::new(1u64, 1), "level {j}");
        }
        // level-2 cube has measure 1/6
        let c = stage.level(2).node(0).to_vec();
        assert_eq!(measure_of_cube(&stage, 2, &c).unwrap(), Ratio::new(1u64, 6));
        assert!(matches!(
            measure_of_cube(&stage, 2, &[999]),
            Err(Error::NotANode { .. })
        ));
    }

    #[test]
    fn build_is_deterministic() {
        let plan = make_sequence_plan(0.5, 1, 4, 3, 1.0).unwrap();
        let alphabets: Vec<Alphabet> = plan
            .n_seq
            .iter()
            .zip(&plan.t_seq)
            .map(|(&n, &t)| alpha1(&(0..t as i64).collect::<Vec<_>>(), n))
            .collect();
        let a = build_stage(&plan, &alphabets, 3, 42, DEFAULT_NODE_BUDGET).unwrap();
        let b = build_stage(&plan, &alphabets, 3, 42, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(a, b);
        let c = build_stage(&plan, &alphabets, 3, 43, DEFAULT_NODE_BUDGET).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn node_budget_enforced() {
        let plan = SequencePlan::constant(1, 4, 4, 4).unwrap();
        let b = alpha1(&[0, 1, 2, 3], 4);
        let r = build_stage(&plan, &vec![b; 4], 4, 0, 100);
        assert!(matches!(
            r,
            Err(Error::NodeBudget {
                nodes: 256,
                budget: 100
            })
        ));
    }

    #[test]
    fn plan_alphabet_mismatch_rejected() {
        let plan = SequencePlan::constant(1, 4, 2, 1).unwrap();
        let wrong_size = alpha1(&[0, 1, 2], 4);
        assert!(matches!(
            build_stage(&plan, &[wrong_size], 1, 0, DEFAULT_NODE_BUDGET),
            Err(Error::PlanMismatch { .. })
        ));
        let wrong_modulus = alpha1(&[0, 1], 5);
        assert!(matches!(
            build_stage(&plan, &[wrong_modulus], 1, 0, DEFAULT_NODE_BUDGET),
            Err(Error::PlanMismatch { .. })
        ));
    }

    #[test]
    fn ball_mass_lebesgue_interval() {
        let plan = SequencePlan::constant(1, 3, 2, 1).unwrap();
        let stage = build_stage(&plan, &[alpha1(&[0, 2], 3)], 0, 0, DEFAULT_NODE_BUDGET).unwrap();
        assert_relative_eq!(
            ball_mass(&stage, &[0.5], 0.25).unwrap(),
            0.5,
            max_relative = 1e-6
        );
        // ball covering the whole cube
        assert_relative_eq!(
            ball_mass(&stage, &[0.5], 2.0).unwrap(),
            1.0,
            max_relative = 1e-9
        );
        assert!(ball_mass(&stage, &[0.5], -1.0).is_err());
    }

    #[test]
    fn ball_mass_ternary_first_stage() {
        // E_1 = [0,1/3] ∪ [2/3,1], B(1/3, 1/6) ∩ E_1 = [1/6, 1/3]:
        // mass = density (3/2) × length (1/6) = 1/4
        let stage = ternary_stage(1);
        assert_relative_eq!(
            ball_mass(&stage, &[1.0 / 3.0], 1.0 / 6.0).unwrap(),
            0.25,
            max_relative = 1e-5
        );
    }

    #[test]
    fn ball_mass_quarter_disk_2d() {
        // depth-0 stage in d=2 is Lebesgue on the square: a ball of radius
        // 1/2 at the corner covers a quarter disk of area π/16
        let plan = SequencePlan::constant(2, 2, 2, 1).unwrap();
        let b = Alphabet::new(2, 2, vec![vec![0, 0], vec![1, 1]]).unwrap();
        let stage = build_stage(&plan, &[b], 0, 0, DEFAULT_NODE_BUDGET).unwrap();
        assert_relative_eq!(
            ball_mass(&stage, &[0.0, 0.0], 0.5).unwrap(),
            std::f64::consts::PI / 16.0,
            max_relative = 1e-4
        );
    }

    #[test]
    fn ball_condition_lebesgue() {
        let plan = SequencePlan::constant(1, 3, 2, 1).unwrap();
        let stage = build_stage(&plan, &[alpha1(&[0, 2], 3)], 0, 0, DEFAULT_NODE_BUDGET).unwrap();
        let report = ball_condition_sup(&stage, 1.0, &BallSampler::default()).unwrap();
        // ball_mass carries a 1e-6 relative quadrature tolerance
        assert!(
            report.sup_ratio <= 2.0 * (1.0 + 2e-6),
            "{}",
            report.sup_ratio
        );
        assert!(report.sup_ratio > 1.5);
        let flat = ball_condition_sup(&stage, 0.0, &BallSampler::default()).unwrap();
        assert_relative_eq!(flat.sup_ratio, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn ball_mass_thread_count_independent() {
        let stage = ternary_stage(3);
        let default_pool = ball_mass(&stage, &[0.4], 0.3).unwrap();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| ball_mass(&stage, &[0.4], 0.3).unwrap());
        assert_eq!(default_pool.to_bits(), single.to_bits());
    }

    #[test]
    fn ball_condition_stable_under_sample_doubling() {
        let plan = make_sequence_plan(0.5, 1, 4, 2, 1.0).unwrap();
        let alphabets: Vec<Alphabet> = plan
            .n_seq
            .iter()
            .zip(&plan.t_seq)
            .map(|(&n, &t)| alpha1(&(0..t as i64).collect::<Vec<_>>(), n))
            .collect();
        let stage = build_stage(&plan, &alphabets, 2, 21, DEFAULT_NODE_BUDGET).unwrap();
        let base = BallSampler {
            random_centers: 32,
            radius_steps: 24,
            ..Default::default()
        };
        let doubled = BallSampler {
            random_centers: 64,
            radius_steps: 48,
            ..Default::default()
        };
        let a = ball_condition_sup(&stage, 0.4, &base).unwrap();
        let b = ball_condition_sup(&stage, 0.4, &doubled).unwrap();
        assert!(
            (a.sup_ratio - b.sup_ratio).abs() <= 0.1 * b.sup_ratio,
            "{} vs {}",
            a.sup_ratio,
            b.sup_ratio
        );
    }

    #[test]
    fn martingale_two_translate_exact() {
        // n=2, t=1, B={0}: the two translates hit x=0.25 with prob 1/2 and
        // density 2, so the exact average is μ_0(x) = 1
        let plan = plan_1d(vec![2], vec![1], 0.5);
        let b = alpha1(&[0], 2);
        let (mean, reference) = martingale_exact(&plan, &[b], 1, &[0.25], 0).unwrap();
        assert_relative_eq!(mean, 1.0, epsilon = 1e-12);
        assert_relative_eq!(reference, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn martingale_monte_carlo_sane() {
        let plan = SequencePlan::constant(1, 4, 2, 2).unwrap();
        let b = alpha1(&[0, 2], 4);
        let report = martingale_check(&plan, &[b.clone(), b], 2, &[0.1], 20_000, 5).unwrap();
        assert!(report.z_score.abs() < 6.0, "z = {}", report.z_score);
        assert!(report.reference > 0.0 || report.empirical_mean == 0.0);
        assert!(matches!(
            martingale_check(&plan, &[], 0, &[0.1], 10, 0),
            Err(Error::InvalidParameter { .. })
        ));
    }

    #[test]
    fn covering_count_bounded() {
        let stage = ternary_stage(3);
        let radius = 1.0 / stage.n_k() as f64;
        for i in 0..stage.deepest().len() {
            let c = stage.corner_f64(stage.depth(), i);
            let count = cubes_meeting_ball(&stage, stage.depth(), &c, radius);
            assert!(count <= 3, "count = {count}");
            assert!(count >= 1);
        }
    }

    #[test]
    fn json_round_trip_bit_exact() {
        let plan = make_sequence_plan(0.5, 2, 3, 2, 1.0).unwrap();
        let alphabets: Vec<Alphabet> = plan
            .n_seq
            .iter()
            .zip(&plan.t_seq)
            .map(|(&n, &t)| {
                let pts: Vec<Vec<i64>> = (0..t as i64).map(|i| vec![i % n as i64, 0]).collect();
                Alphabet::new(2, n, pts).unwrap()
            })
            .collect();
        let stage = build_stage(&plan, &alphabets, 2, 9, DEFAULT_NODE_BUDGET).unwrap();
        let json = stage.to_document().to_json().unwrap();
        let reloaded = StageDocument::from_json(&json)
            .unwrap()
            .into_stage(DEFAULT_NODE_BUDGET)
            .unwrap();
        assert_eq!(stage, reloaded);
        // serializing again yields identical bytes
        assert_eq!(json, reloaded.to_document().to_json().unwrap());
    }

    #[test]
    fn binary_cache_round_trips_through_text() {
        let stage = ternary_stage(3);
        let doc = stage.to_document();
        let bin = doc.to_binary().unwrap();
        let back = StageDocument::from_binary(&bin).unwrap();
        assert_eq!(doc, back);
        assert_eq!(doc.to_json().unwrap(), back.to_json().unwrap());
    }

    #[test]
    fn bad_version_rejected() {
        let stage = ternary_stage(1);
        let mut doc = stage.to_document();
        doc.format_version = 99;
        let json = serde_json::to_string(&doc).unwrap();
        assert!(matches!(
            StageDocument::from_json(&json),
            Err(Error::FormatVersion(99))
        ));
    }

    #[test]
    fn truncate_shares_prefix() {
        let plan = make_sequence_plan(0.5, 1, 4, 3, 1.0).unwrap();
        let alphabets: Vec<Alphabet> = plan
            .n_seq
            .iter()
            .zip(&plan.t_seq)
            .map(|(&n, &t)| alpha1(&(0..t as i64).collect::<Vec<_>>(), n))
            .collect();
        let stage = build_stage(&plan, &alphabets, 3, 11, DEFAULT_NODE_BUDGET).unwrap();
        let sub = stage.truncate(2);
        assert_eq!(sub.depth(), 2);
        assert_eq!(sub.level(2), stage.level(2));
        assert_eq!(sub.translations(), &stage.translations()[..2]);
        let zero = stage.truncate(0);
        assert_eq!(zero.t_k(), 1);
        // every truncation persists and reloads, including depth 0
        for k in 0..=3 {
            let sub = stage.truncate(k);
            let json = sub.to_document().to_json().unwrap();
            let back = StageDocument::from_json(&json)
                .unwrap()
                .into_stage(DEFAULT_NODE_BUDGET)
                .unwrap();
            assert_eq!(sub, back, "truncate({k}) round trip");
        }
    }
}

//! Checkable forms of the masking-gap results.
//!
//! [`arbitrage_rate`] and [`gap_lower_bound`] follow the swap-and-scale
//! construction: stop serving `(i, p̄)` in the fair stratum, serve `(j, p)`
//! instead in proportions that keep the ATE at zero, then rescale to the
//! budget. The experiments sample worlds or policies and report frequencies;
//! measure-zero statements become "fraction of sampled cases".

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{solve_exploit, solve_fair, solve_family, solve_mask, NormalizationAnchors, PolicyError, PolicyFamily};
use crate::rng;
use crate::world::{simplex_rows, uniform_simplex, WorldModel};

/// Threshold for "strictly positive gap", "fair" and "masked".
pub const GENERICITY_TOLERANCE: f64 = 1e-9;

const VOLUME_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("swap needs two different strata, got i = j = {0}")]
    SameStratum(usize),
    #[error("stratum {x} is out of range for k = {k}")]
    StratumOutOfRange { x: usize, k: usize },
    #[error("group must be 0 or 1, got {0}")]
    BadGroup(usize),
    #[error("swap between ({i}, {pbar}) and ({j}, {p}) has no mass")]
    DegenerateSwap {
        i: usize,
        pbar: usize,
        j: usize,
        p: usize,
    },
    #[error("rho = {rho} exceeds Pr(X = {stratum}) = {limit}; the fair policy spills past the best stratum")]
    RhoTooLarge { rho: f64, stratum: usize, limit: f64 },
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("need at least one sample")]
    NoSamples,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Reward per unit of participation of the zero-ATE swap between
/// `(i, 1 − p)` and `(j, p)`: `(w[i][p̄] + w[j][p]) / (Pr(p̄ | i) + Pr(p | j))`.
pub fn arbitrage_rate(model: &WorldModel, i: usize, j: usize, p: usize) -> Result<f64, TheoryError> {
    let k = model.k();
    for x in [i, j] {
        if x >= k {
            return Err(TheoryError::StratumOutOfRange { x, k });
        }
    }
    if i == j {
        return Err(TheoryError::SameStratum(i));
    }
    if p > 1 {
        return Err(TheoryError::BadGroup(p));
    }
    let pbar = 1 - p;
    let prop = model.propensity();
    let w = model.context_weighted_rewards().cell;
    let mass = prop[i][pbar] + prop[j][p];
    if mass <= 0.0 {
        return Err(TheoryError::DegenerateSwap { i, pbar, j, p });
    }
    Ok((w[i][pbar] + w[j][p]) / mass)
}

/// Stratum with the largest `E[Y | x]`, lowest index on ties.
pub fn best_stratum(model: &WorldModel) -> usize {
    let avg = model.context_weighted_rewards().average;
    (0..avg.len()).fold(0, |best, x| if avg[x] > avg[best] { x } else { best })
}

/// Lower bound on `W(mask(0)) − W(fair(0))` when `ρ ≤ Pr(X = i*)`.
///
/// Only swaps whose unscaled policy already carries at least `ρ`
/// participation are counted: scaling a smaller one up to `ρ` would push a
/// rate past 1.
pub fn gap_lower_bound(model: &WorldModel) -> Result<f64, TheoryError> {
    let i = best_stratum(model);
    let marginal = model.marginal_x();
    let rho = model.rho();
    if rho > marginal[i] {
        return Err(TheoryError::RhoTooLarge {
            rho,
            stratum: i,
            limit: marginal[i],
        });
    }
    let fair_return = model.context_weighted_rewards().average[i];
    let prop = model.propensity();
    let mut best = 0.0_f64;
    for j in (0..model.k()).filter(|&j| j != i) {
        for p in 0..2 {
            let capacity = marginal[i].min(marginal[j]) * (prop[i][1 - p] + prop[j][p]);
            if rho > capacity * (1.0 + 1e-12) {
                continue;
            }
            match arbitrage_rate(model, i, j, p) {
                Ok(rate) => best = best.max(rate - fair_return),
                Err(TheoryError::DegenerateSwap { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(rho * best)
}

/// How far a world is from `P ⫫ X` and from `X ⫫ Y | P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceDiagnostics {
    /// `max_{x,p} |Pr(p | x) − Pr(p)|`
    pub confounding: f64,
    /// `max_p (max_x γ[x][p] − min_x γ[x][p])`
    pub heterogeneity: f64,
}

pub fn dependence_diagnostics(model: &WorldModel) -> DependenceDiagnostics {
    let marginal = model.marginal_p();
    let confounding = model
        .propensity()
        .iter()
        .flat_map(|row| (0..2).map(move |p| (row[p] - marginal[p]).abs()))
        .fold(0.0, f64::max);
    let heterogeneity = (0..2)
        .map(|p| {
            let column = model.gamma().iter().map(|g| g[p]);
            let hi = column.clone().fold(f64::NEG_INFINITY, f64::max);
            let lo = column.fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .fold(0.0, f64::max);
    DependenceDiagnostics {
        confounding,
        heterogeneity,
    }
}

/// Which dependencies sampled worlds are allowed to have.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldMode {
    /// Unconstrained `π` and `γ`.
    Free,
    /// Product-form `π` and `γ` constant in `x`.
    IndependentHomogeneous,
    /// Unconstrained `π`, `γ` constant in `x`.
    ConfoundedOnly,
    /// Product-form `π`, unconstrained `γ`.
    HeterogeneousOnly,
}

impl WorldMode {
    pub const ALL: [WorldMode; 4] = [
        WorldMode::Free,
        WorldMode::IndependentHomogeneous,
        WorldMode::ConfoundedOnly,
        WorldMode::HeterogeneousOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorldMode::Free => "free",
            WorldMode::IndependentHomogeneous => "independent_homogeneous",
            WorldMode::ConfoundedOnly => "confounded_only",
            WorldMode::HeterogeneousOnly => "heterogeneous_only",
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, k: usize, rho: f64, rng: &mut R) -> Result<WorldModel, TheoryError> {
        let independent = matches!(self, WorldMode::IndependentHomogeneous | WorldMode::HeterogeneousOnly);
        let homogeneous = matches!(self, WorldMode::IndependentHomogeneous | WorldMode::ConfoundedOnly);
        let pi = if independent {
            let px = uniform_simplex(k, rng);
            let pp = uniform_simplex(2, rng);
            px.iter().map(|m| [m * pp[0], m * pp[1]]).collect()
        } else {
            simplex_rows(k, rng)
        };
        let gamma = if homogeneous {
            vec![[rng.random(), rng.random()]; k]
        } else {
            (0..k).map(|_| [rng.random(), rng.random()]).collect()
        };
        Ok(WorldModel::new(pi, gamma, rho).map_err(PolicyError::from)?)
    }
}

impl fmt::Display for WorldMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorldMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown world mode `{s}`"))
    }
}

/// Counts over `n_worlds` sampled worlds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericitySummary {
    pub mode: WorldMode,
    pub k: usize,
    pub rho: f64,
    pub n_worlds: usize,
    /// `W(mask(0)) − W(fair(0)) > 1e-9`
    pub gap_positive: usize,
    /// Exploit optimum has every `|α[x][1] − α[x][0]| ≤ 1e-9`.
    pub exploit_fair: usize,
    /// Exploit optimum has `|ATE| ≤ 1e-9`.
    pub exploit_masked: usize,
    /// Mask optimum has every `|α[x][1] − α[x][0]| ≤ 1e-9`.
    pub mask_fair: usize,
    pub max_gap: f64,
}

impl GenericitySummary {
    fn fraction(&self, count: usize) -> f64 {
        count as f64 / self.n_worlds as f64
    }

    pub fn gap_positive_rate(&self) -> f64 {
        self.fraction(self.gap_positive)
    }

    pub fn exploit_fair_rate(&self) -> f64 {
        self.fraction(self.exploit_fair)
    }

    pub fn exploit_masked_rate(&self) -> f64 {
        self.fraction(self.exploit_masked)
    }

    pub fn mask_fair_rate(&self) -> f64 {
        self.fraction(self.mask_fair)
    }
}

#[derive(Default)]
struct WorldFlags {
    gap_positive: usize,
    exploit_fair: usize,
    exploit_masked: usize,
    mask_fair: usize,
    max_gap: f64,
}

impl WorldFlags {
    fn merge(self, other: Self) -> Self {
        Self {
            gap_positive: self.gap_positive + other.gap_positive,
            exploit_fair: self.exploit_fair + other.exploit_fair,
            exploit_masked: self.exploit_masked + other.exploit_masked,
            mask_fair: self.mask_fair + other.mask_fair,
            max_gap: self.max_gap.max(other.max_gap),
        }
    }
}

fn classify(model: &WorldModel) -> Result<WorldFlags, TheoryError> {
    let (_, fair) = solve_fair(model, 0.0)?;
    let (_, mask) = solve_mask(model, 0.0)?;
    let (_, exploit) = solve_exploit(model)?;
    let gap = mask.objective - fair.objective;
    let tol = GENERICITY_TOLERANCE;
    Ok(WorldFlags {
        gap_positive: usize::from(gap > tol),
        exploit_fair: usize::from(exploit.max_abs_cate <= tol),
        exploit_masked: usize::from(exploit.ate.abs() <= tol),
        mask_fair: usize::from(mask.max_abs_cate <= tol),
        max_gap: gap,
    })
}

/// Solves fair(0), mask(0) and exploit on `n_worlds` worlds drawn per
/// `mode`. World `w` uses stream `w` of `seed`.
pub fn genericity_experiment(
    k: usize,
    rho: f64,
    n_worlds: usize,
    mode: WorldMode,
    seed: u64,
) -> Result<GenericitySummary, TheoryError> {
    if n_worlds == 0 {
        return Err(TheoryError::NoSamples);
    }
    let flags = (0..n_worlds as u64)
        .into_par_iter()
        .map(|w| classify(&mode.sample(k, rho, &mut rng::seeded(seed, w))?))
        .try_reduce(WorldFlags::default, |a, b| Ok(a.merge(b)))?;
    Ok(GenericitySummary {
        mode,
        k,
        rho,
        n_worlds,
        gap_positive: flags.gap_positive,
        exploit_fair: flags.exploit_fair,
        exploit_masked: flags.exploit_masked,
        mask_fair: flags.mask_fair,
        max_gap: flags.max_gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFamily {
    /// `|α[x][1] − α[x][0]| ≤ ε` for every stratum.
    Fair,
    /// `|Σ Pr(x)(α[x][1] − α[x][0])| ≤ ε`.
    Mask,
}

impl FromStr for VolumeFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fair" => Ok(Self::Fair),
            "mask" => Ok(Self::Mask),
            _ => Err(format!("unknown volume family `{s}` (fair, mask)")),
        }
    }
}

impl fmt::Display for VolumeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fair => "fair",
            Self::Mask => "mask",
        })
    }
}

/// Fraction of `α ~ U[0, 1]^{2k}` inside the family's `ε` slab(s). The
/// participation row is left out: it slices both families alike.
pub fn feasible_volume_estimate(
    model: &WorldModel,
    family: VolumeFamily,
    eps: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64, TheoryError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TheoryError::BadEpsilon(eps));
    }
    if n_samples == 0 {
        return Err(TheoryError::NoSamples);
    }
    let marginal = model.marginal_x();
    let chunks = n_samples.div_ceil(VOLUME_CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::seeded(seed, c as u64);
            let len = VOLUME_CHUNK.min(n_samples - c * VOLUME_CHUNK);
            (0..len)
                .filter(|_| match family {
                    VolumeFamily::Fair => marginal
                        .iter()
                        .map(|_| rng.random::<f64>() - rng.random::<f64>())
                        // Draw every coordinate so the stream layout is fixed.
                        .fold(true, |inside, gap| inside & (gap.abs() <= eps)),
                    VolumeFamily::Mask => {
                        let ate: f64 = marginal
                            .iter()
                            .map(|m| m * (rng.random::<f64>() - rng.random::<f64>()))
                            .sum();
                        ate.abs() <= eps
                    }
                })
                .count()
        })
        .sum();
    Ok(hits as f64 / n_samples as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// One `(world, ε, family)` cell of a performance sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub world_id: usize,
    pub eps: f64,
    pub family: PolicyFamily,
    pub norm_perf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepMean {
    pub family: PolicyFamily,
    pub eps: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSweep {
    pub k: usize,
    pub rho: f64,
    pub n_worlds: usize,
    /// Worlds with `W(exploit) = W(fair(0))`, which cannot be normalized.
    pub skipped: usize,
    pub rows: Vec<SweepRow>,
    pub means: Vec<SweepMean>,
}

impl PerformanceSweep {
    pub fn mean(&self, family: PolicyFamily, eps: f64) -> Option<f64> {
        self.means.iter().find(|m| m.family == family && m.eps == eps).map(|m| m.mean)
    }
}

/// Normalized performance of each family at each `ε` on `n_worlds` free
/// worlds. World `w` is the same draw as in [`genericity_experiment`].
pub fn performance_sweep(
    k: usize,
    rho: f64,
    n_worlds: usize,
    eps_grid: &[f64],
    families: &[PolicyFamily],
    seed: u64,
) -> Result<PerformanceSweep, TheoryError> {
    if n_worlds == 0 || eps_grid.is_empty() || families.is_empty() {
        return Err(TheoryError::NoSamples);
    }
    let per_world: Vec<Option<Vec<SweepRow>>> = (0..n_worlds)
        .into_par_iter()
        .map(|world_id| {
            let model = WorldMode::Free.sample(k, rho, &mut rng::seeded(seed, world_id as u64))?;
            let anchors = match NormalizationAnchors::of(&model) {
                Ok(a) => a,
                Err(PolicyError::DegenerateNormalization { .. }) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            let mut rows = Vec::with_capacity(eps_grid.len() * families.len());
            for &eps in eps_grid {
                for &family in families {
                    let (_, report) = solve_family(&model, family, eps)?;
                    rows.push(SweepRow { world_id, eps, family, norm_perf: anchors.normalize(report.objective) });
                }
            }
            Ok(Some(rows))
        })
        .collect::<Result<_, TheoryError>>()?;
    let skipped = per_world.iter().filter(|r| r.is_none()).count();
    let rows: Vec<SweepRow> = per_world.into_iter().flatten().flatten().collect();
    let used = (n_worlds - skipped).max(1) as f64;
    let means = families
        .iter()
        .flat_map(|&family| eps_grid.iter().map(move |&eps| (family, eps)))
        .map(|(family, eps)| SweepMean {
            family,
            eps,
            mean: rows
                .iter()
                .filter(|r| r.family == family && r.eps == eps)
                .map(|r| r.norm_perf)
                .sum::<f64>()
                / used,
        })
        .collect();
    Ok(PerformanceSweep { k, rho, n_worlds, skipped, rows, means })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::sample_world;
    use proptest::prelude::*;

    fn admissions() -> WorldModel {
        WorldModel::admissions_example()
    }

    fn independent_world(px: &[f64], pp: [f64; 2], gamma_p: [f64; 2], rho: f64) -> WorldModel {
        let pi = px.iter().map(|m| [m * pp[0], m * pp[1]]).collect();
        WorldModel::new(pi, vec![gamma_p; px.len()], rho).unwrap()
    }

    #[test]
    fn example_arbitrage_rate() {
        let r = arbitrage_rate(&admissions(), 0, 1, 1).unwrap();
        assert!((r - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn independent_homogeneous_rate_equals_fair_return() {
        let w = independent_world(&[0.5, 0.3, 0.2], [0.4, 0.6], [0.3, 0.9], 0.1);
        let avg = w.context_weighted_rewards().average[0];
        for (j, p) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
            assert!((arbitrage_rate(&w, 0, j, p).unwrap() - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_rewards_give_constant_rate() {
        let w = WorldModel::new(vec![[0.1, 0.3], [0.4, 0.2]], vec![[0.35; 2]; 2], 0.1).unwrap();
        assert!((arbitrage_rate(&w, 1, 0, 0).unwrap() - 0.35).abs() < 1e-12);
    }

    #[test]
    fn arbitrage_errors() {
        let w = admissions();
        assert_eq!(arbitrage_rate(&w, 1, 1, 0), Err(TheoryError::SameStratum(1)));
        assert!(matches!(arbitrage_rate(&w, 0, 2, 0), Err(TheoryError::StratumOutOfRange { x: 2, .. })));
        assert_eq!(arbitrage_rate(&w, 0, 1, 2), Err(TheoryError::BadGroup(2)));
        let lopsided = WorldModel::new(vec![[0.5, 0.0], [0.0, 0.5]], vec![[0.5; 2]; 2], 0.1).unwrap();
        assert!(matches!(arbitrage_rate(&lopsided, 0, 1, 0), Err(TheoryError::DegenerateSwap { .. })));
    }

    #[test]
    fn example_gap_bound_is_tight() {
        let w = admissions();
        let bound = gap_lower_bound(&w).unwrap();
        assert!((bound - 1.0 / 30.0).abs() < 1e-12);
        let gap = solve_mask(&w, 0.0).unwrap().1.objective - solve_fair(&w, 0.0).unwrap().1.objective;
        assert!((gap - bound).abs() < 1e-9);
    }

    #[test]
    fn gap_bound_vanishes_without_dependence() {
        let w = independent_world(&[0.6, 0.4], [0.3, 0.7], [0.2, 0.8], 0.1);
        assert!(gap_lower_bound(&w).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gap_bound_refuses_large_rho() {
        let w = admissions().with_rho(0.9).unwrap();
        assert!(matches!(gap_lower_bound(&w), Err(TheoryError::RhoTooLarge { stratum: 0, .. })));
    }

    #[test]
    fn gap_bound_never_exceeds_lp_gap() {
        let mut checked = 0;
        for seed in 0..500 {
            let w = sample_world(3, 0.05, seed).unwrap();
            let Ok(bound) = gap_lower_bound(&w) else { continue };
            checked += 1;
            let gap = solve_mask(&w, 0.0).unwrap().1.objective - solve_fair(&w, 0.0).unwrap().1.objective;
            assert!(bound >= 0.0);
            assert!(bound <= gap + 1e-9, "seed {seed}: bound {bound} > gap {gap}");
        }
        assert!(checked > 400);
    }

    #[test]
    fn diagnostics_of_constructed_independence() {
        let w = independent_world(&[0.2, 0.5, 0.3], [0.45, 0.55], [0.1, 0.6], 0.1);
        let d = dependence_diagnostics(&w);
        assert!(d.confounding < 1e-15 && d.heterogeneity == 0.0);
    }

    #[test]
    fn diagnostics_of_example() {
        let d = dependence_diagnostics(&admissions());
        // Pr(P = 1) = 2/3; the largest deviation is stratum 1 with Pr(1 | x) = 1/5.
        assert!((d.confounding - 7.0 / 15.0).abs() < 1e-12);
        assert!((d.heterogeneity - 0.5).abs() < 1e-12);
    }

    #[test]
    fn independent_homogeneous_worlds_never_gap() {
        let s = genericity_experiment(3, 0.2, 200, WorldMode::IndependentHomogeneous, 5).unwrap();
        assert_eq!(s.gap_positive, 0);
    }

    #[test]
    fn free_worlds_exploit_is_neither_fair_nor_masked() {
        let s = genericity_experiment(2, 0.1, 1000, WorldMode::Free, 9).unwrap();
        assert!(s.exploit_fair_rate() < 0.01);
        assert!(s.exploit_masked_rate() < 0.01);
    }

    #[test]
    fn confounding_alone_yields_no_gap() {
        // With γ constant in x the masking row leaves no profitable swap.
        let s = genericity_experiment(4, 0.1, 300, WorldMode::ConfoundedOnly, 2).unwrap();
        assert_eq!(s.gap_positive, 0);
        assert!(s.max_gap <= 1e-9);
    }

    #[test]
    fn heterogeneity_gap_rate_grows_with_k() {
        let small = genericity_experiment(2, 0.1, 400, WorldMode::HeterogeneousOnly, 3).unwrap();
        let large = genericity_experiment(10, 0.1, 400, WorldMode::HeterogeneousOnly, 3).unwrap();
        assert!(small.gap_positive_rate() > 0.3);
        assert!(large.gap_positive_rate() > 0.9);
        assert!(large.gap_positive_rate() > small.gap_positive_rate());
    }

    #[test]
    fn genericity_is_reproducible() {
        let a = genericity_experiment(3, 0.1, 50, WorldMode::Free, 1).unwrap();
        let b = genericity_experiment(3, 0.1, 50, WorldMode::Free, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn volume_with_vacuous_bands_is_one() {
        let w = sample_world(3, 0.2, 0).unwrap();
        assert_eq!(feasible_volume_estimate(&w, VolumeFamily::Fair, 1.0, 10_000, 1).unwrap(), 1.0);
        assert!(feasible_volume_estimate(&w, VolumeFamily::Fair, 0.0, 10, 1).is_err());
        assert!(feasible_volume_estimate(&w, VolumeFamily::Fair, 0.1, 0, 1).is_err());
    }

    #[test]
    fn fair_volume_matches_closed_form() {
        // P(|U − V| ≤ ε) = 2ε − ε² per stratum.
        let w = sample_world(2, 0.2, 0).unwrap();
        let eps = 0.1;
        let est = feasible_volume_estimate(&w, VolumeFamily::Fair, eps, 400_000, 4).unwrap();
        let exact = (2.0 * eps - eps * eps).powi(2);
        assert!((est - exact).abs() < 4.0 * (exact * (1.0 - exact) / 400_000.0).sqrt());
    }

    #[test]
    fn volume_scaling_exponents() {
        let grid = [0.02, 0.04, 0.08, 0.16];
        let slope = |k: usize, family| {
            let w = sample_world(k, 0.2, 1).unwrap();
            let pts: Vec<(f64, f64)> = grid
                .iter()
                .map(|&e| (e, feasible_volume_estimate(&w, family, e, 1_000_000, 7).unwrap()))
                .collect();
            log_log_slope(&pts)
        };
        assert!((slope(2, VolumeFamily::Fair) - 2.0).abs() < 0.2);
        assert!((slope(10, VolumeFamily::Mask) - 1.0).abs() < 0.2);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0].iter().map(|&x: &f64| (x, 3.0 * x.powi(3))).collect();
        assert!((log_log_slope(&pts) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_anchors() {
        let s = performance_sweep(3, 0.25, 40, &[0.0, 1.0], &[PolicyFamily::Fair, PolicyFamily::Mask], 8).unwrap();
        assert_eq!(s.rows.len(), (40 - s.skipped) * 4);
        for r in &s.rows {
            match (r.family, r.eps) {
                (PolicyFamily::Fair, 0.0) => assert!(r.norm_perf.abs() < 1e-9),
                (_, 1.0) => assert!((r.norm_perf - 1.0).abs() < 1e-9),
                _ => {}
            }
        }
        assert!(s.mean(PolicyFamily::Mask, 0.0).unwrap() >= 0.0);
        assert!(s.rows.windows(2).all(|w| w[0].world_id <= w[1].world_id));
        assert!(performance_sweep(3, 0.25, 10, &[], &[PolicyFamily::Fair], 8).is_err());
    }

    proptest! {
        #[test]
        fn arbitrage_rate_lies_between_swapped_rewards(k in 2usize..6, seed in any::<u64>(), p in 0usize..2) {
            let w = sample_world(k, 0.1, seed).unwrap();
            let (i, j) = (0, 1);
            let r = arbitrage_rate(&w, i, j, p).unwrap();
            let a = w.gamma()[i][1 - p];
            let b = w.gamma()[j][p];
            prop_assert!(r >= a.min(b) - 1e-12 && r <= a.max(b) + 1e-12);
        }

        #[test]
        fn zero_diagnostics_imply_zero_gap(k in 1usize..6, seed in any::<u64>()) {
            let w = WorldMode::IndependentHomogeneous.sample(k, 0.3, &mut rng::seeded(seed, 0)).unwrap();
            let d = dependence_diagnostics(&w);
            prop_assert!(d.confounding < 1e-12 && d.heterogeneity == 0.0);
            let gap = solve_mask(&w, 0.0).unwrap().1.objective - solve_fair(&w, 0.0).unwrap().1.objective;
            prop_assert!(gap.abs() <= 1e-9);
        }

        #[test]
        fn fair_volume_within_mask_volume(k in 1usize..5, seed in any::<u64>(), eps in 0.05..0.5f64) {
            let w = sample_world(k, 0.2, seed).unwrap();
            let fair = feasible_volume_estimate(&w, VolumeFamily::Fair, eps, 20_000, seed).unwrap();
            let mask = feasible_volume_estimate(&w, VolumeFamily::Mask, eps, 20_000, seed).unwrap();
            // Same draws: every fair sample is also a mask sample.
            prop_assert!(fair <= mask);
        }
    }
}

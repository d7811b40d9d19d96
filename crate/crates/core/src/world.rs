//! World models, policies and the quantities derived from them.
//!
//! Cells are indexed `[x][p]` with `x ∈ 0..k` the stratum and `p ∈ {0, 1}`
//! the protected group. A [`WorldModel`] can only be built through
//! validation, so every accessor below may assume non-empty strata and a
//! normalized joint distribution.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Tolerance on `Σ π = 1`. Inputs inside it are renormalized exactly.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("world must have at least one stratum")]
    NoStrata,
    #[error("{field} has {found} rows, expected {expected}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("pi[{x}][{p}] = {value} is negative or not a number")]
    NegativeProbability { x: usize, p: usize, value: f64 },
    #[error("pi sums to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("gamma[{x}][{p}] = {value} is outside [0, 1]")]
    RewardOutOfRange { x: usize, p: usize, value: f64 },
    #[error("rho = {0} is outside (0, 1]")]
    BadRho(f64),
    #[error("stratum {x} has zero probability")]
    EmptyStratum { x: usize },
    #[error("alpha[{x}][{p}] = {value} is outside [0, 1]")]
    RateOutOfRange { x: usize, p: usize, value: f64 },
}

/// Unvalidated world, exactly as it appears in JSON.
///
/// `{"k": 2, "pi": [[..,..],[..,..]], "gamma": [[..,..],[..,..]], "rho": 0.1}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub k: usize,
    pub pi: Vec<[f64; 2]>,
    pub gamma: Vec<[f64; 2]>,
    pub rho: f64,
}

/// Checks every world invariant without building a model.
pub fn validate_world(spec: &WorldSpec) -> Result<(), WorldError> {
    check(spec).map(|_| ())
}

/// Returns the sum of `π` on success so the caller can renormalize.
fn check(spec: &WorldSpec) -> Result<f64, WorldError> {
    if spec.k == 0 {
        return Err(WorldError::NoStrata);
    }
    for (field, found) in [("pi", spec.pi.len()), ("gamma", spec.gamma.len())] {
        if found != spec.k {
            return Err(WorldError::DimensionMismatch {
                field,
                expected: spec.k,
                found,
            });
        }
    }
    for (x, row) in spec.pi.iter().enumerate() {
        for (p, &value) in row.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(WorldError::NegativeProbability { x, p, value });
            }
        }
    }
    let sum: f64 = spec.pi.iter().flatten().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(WorldError::NotNormalized { sum });
    }
    for (x, row) in spec.gamma.iter().enumerate() {
        for (p, &value) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(WorldError::RewardOutOfRange { x, p, value });
            }
        }
    }
    if !(spec.rho > 0.0 && spec.rho <= 1.0) {
        return Err(WorldError::BadRho(spec.rho));
    }
    if let Some(x) = spec.pi.iter().position(|row| row[0] + row[1] == 0.0) {
        return Err(WorldError::EmptyStratum { x });
    }
    Ok(sum)
}

/// A validated world: joint probabilities `π[x][p]`, expected rewards
/// `γ[x][p] = E[Y | x, p]` and the participation budget `ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldSpec", into = "WorldSpec")]
pub struct WorldModel {
    pi: Vec<[f64; 2]>,
    gamma: Vec<[f64; 2]>,
    rho: f64,
}

impl TryFrom<WorldSpec> for WorldModel {
    type Error = WorldError;

    fn try_from(spec: WorldSpec) -> Result<Self, Self::Error> {
        let sum = check(&spec)?;
        let mut pi = spec.pi;
        if sum != 1.0 {
            for cell in pi.iter_mut().flatten() {
                *cell /= sum;
            }
        }
        Ok(Self {
            pi,
            gamma: spec.gamma,
            rho: spec.rho,
        })
    }
}

impl From<WorldModel> for WorldSpec {
    fn from(model: WorldModel) -> Self {
        Self {
            k: model.k(),
            pi: model.pi,
            gamma: model.gamma,
            rho: model.rho,
        }
    }
}

/// Per-cell context-weighted rewards `w[x][p] = γ[x][p]·Pr(p | x)` and their
/// row sums `w_avg[x] = E[Y | x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextRewards {
    pub cell: Vec<[f64; 2]>,
    pub average: Vec<f64>,
}

impl WorldModel {
    pub fn new(pi: Vec<[f64; 2]>, gamma: Vec<[f64; 2]>, rho: f64) -> Result<Self, WorldError> {
        WorldSpec {
            k: pi.len(),
            pi,
            gamma,
            rho,
        }
        .try_into()
    }

    /// The two-department admissions example: a masking policy matches the
    /// unconstrained optimum there while reporting a zero ATE.
    pub fn admissions_example() -> Self {
        Self::new(
            vec![[1.0 / 15.0, 9.0 / 15.0], [4.0 / 15.0, 1.0 / 15.0]],
            vec![[0.5, 0.5], [0.25, 1.0]],
            0.1,
        )
        .expect("example world is valid")
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &[[f64; 2]] {
        &self.pi
    }

    pub fn gamma(&self) -> &[[f64; 2]] {
        &self.gamma
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self, WorldError> {
        Self::new(self.pi.clone(), self.gamma.clone(), rho)
    }

    pub fn with_gamma(&self, gamma: Vec<[f64; 2]>) -> Result<Self, WorldError> {
        Self::new(self.pi.clone(), gamma, self.rho)
    }

    /// `Pr(X = x)` for each stratum.
    pub fn marginal_x(&self) -> Vec<f64> {
        self.pi.iter().map(|row| row[0] + row[1]).collect()
    }

    /// `[Pr(P = 0), Pr(P = 1)]`.
    pub fn marginal_p(&self) -> [f64; 2] {
        self.pi
            .iter()
            .fold([0.0, 0.0], |acc, row| [acc[0] + row[0], acc[1] + row[1]])
    }

    /// `Pr(p | x)` per stratum.
    pub fn propensity(&self) -> Vec<[f64; 2]> {
        self.pi
            .iter()
            .map(|row| {
                let total = row[0] + row[1];
                [row[0] / total, row[1] / total]
            })
            .collect()
    }

    pub fn context_weighted_rewards(&self) -> ContextRewards {
        let cell: Vec<[f64; 2]> = self
            .propensity()
            .iter()
            .zip(&self.gamma)
            .map(|(prop, g)| [g[0] * prop[0], g[1] * prop[1]])
            .collect();
        let average = cell.iter().map(|w| w[0] + w[1]).collect();
        ContextRewards { cell, average }
    }

    fn check_policy(&self, policy: &Policy) -> Result<(), WorldError> {
        if policy.k() != self.k() {
            return Err(WorldError::DimensionMismatch {
                field: "alpha",
                expected: self.k(),
                found: policy.k(),
            });
        }
        Ok(())
    }

    /// `W(D) = Σ γ α π`.
    pub fn welfare(&self, policy: &Policy) -> Result<f64, WorldError> {
        self.check_policy(policy)?;
        Ok(self
            .cells()
            .map(|(x, p)| self.gamma[x][p] * policy.alpha[x][p] * self.pi[x][p])
            .sum())
    }

    /// Backdoor-adjusted ATE of `P` on the decision: `Σ Pr(x)(α[x][1] − α[x][0])`.
    pub fn ate_of_policy(&self, policy: &Policy) -> Result<f64, WorldError> {
        self.check_policy(policy)?;
        Ok(self
            .marginal_x()
            .iter()
            .zip(&policy.alpha)
            .map(|(w, a)| w * (a[1] - a[0]))
            .sum())
    }

    /// `Σ α π`.
    pub fn participation_rate(&self, policy: &Policy) -> Result<f64, WorldError> {
        self.check_policy(policy)?;
        Ok(self
            .cells()
            .map(|(x, p)| policy.alpha[x][p] * self.pi[x][p])
            .sum())
    }

    /// All `(x, p)` pairs in lexicographic order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> {
        (0..self.k()).flat_map(|x| [(x, 0), (x, 1)])
    }

    /// `π` uniform on the `2k`-simplex and `γ` i.i.d. uniform on `[0, 1]`.
    pub fn sample<R: Rng + ?Sized>(k: usize, rho: f64, rng: &mut R) -> Result<Self, WorldError> {
        if k == 0 {
            return Err(WorldError::NoStrata);
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(WorldError::BadRho(rho));
        }
        let pi = simplex_rows(k, rng);
        let gamma = (0..k).map(|_| [rng.random(), rng.random()]).collect();
        Self::new(pi, gamma, rho)
    }
}

/// A uniform point on the `2k`-simplex laid out as `k` rows of two.
pub(crate) fn simplex_rows<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let flat = uniform_simplex(2 * k, rng);
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Normalized standard exponentials are uniform on the simplex.
pub(crate) fn uniform_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && draws.iter().all(|&d| d > 0.0) {
            return draws.into_iter().map(|d| d / total).collect();
        }
    }
}

/// Deterministic random world for `seed`.
pub fn sample_world(k: usize, rho: f64, seed: u64) -> Result<WorldModel, WorldError> {
    WorldModel::sample(k, rho, &mut rng::seeded(seed, 0))
}

/// Participation rates `α[x][p] ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicySpec", into = "PolicySpec")]
pub struct Policy {
    alpha: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySpec {
    pub alpha: Vec<[f64; 2]>,
}

impl TryFrom<PolicySpec> for Policy {
    type Error = WorldError;

    fn try_from(spec: PolicySpec) -> Result<Self, Self::Error> {
        Policy::new(spec.alpha)
    }
}

impl From<Policy> for PolicySpec {
    fn from(policy: Policy) -> Self {
        Self {
            alpha: policy.alpha,
        }
    }
}

impl Policy {
    pub fn new(alpha: Vec<[f64; 2]>) -> Result<Self, WorldError> {
        if alpha.is_empty() {
            return Err(WorldError::NoStrata);
        }
        for (x, row) in alpha.iter().enumerate() {
            for (p, &value) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(WorldError::RateOutOfRange { x, p, value });
                }
            }
        }
        Ok(Self { alpha })
    }

    /// Builds a policy from solver output, snapping round-off at the bounds.
    pub(crate) fn from_clamped(alpha: Vec<[f64; 2]>) -> Self {
        let snap = |v: f64| match v {
            v if v < 1e-12 => 0.0,
            v if v > 1.0 - 1e-12 => 1.0,
            v => v,
        };
        let alpha = alpha.into_iter().map(|row| row.map(snap)).collect();
        Self { alpha }
    }

    pub fn constant(k: usize, rate: f64) -> Result<Self, WorldError> {
        Self::new(vec![[rate, rate]; k])
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[[f64; 2]] {
        &self.alpha
    }

    /// Per-stratum disparity `α[x][1] − α[x][0]`.
    pub fn cate_gaps(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| a[1] - a[0]).collect()
    }
}

/// Everything the reports and tests need to know about a solved policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub objective: f64,
    pub ate: f64,
    pub participation: f64,
    pub cate_gaps: Vec<f64>,
    pub max_abs_cate: f64,
}

impl PolicyReport {
    pub fn evaluate(model: &WorldModel, policy: &Policy) -> Result<Self, WorldError> {
        let cate_gaps = policy.cate_gaps();
        let max_abs_cate = cate_gaps.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        Ok(Self {
            objective: model.welfare(policy)?,
            ate: model.ate_of_policy(policy)?,
            participation: model.participation_rate(policy)?,
            cate_gaps,
            max_abs_cate,
        })
    }

    /// `W / Σ α π`: the reward rate among positive decisions.
    pub fn success_rate(&self) -> f64 {
        self.objective / self.participation
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn admissions() -> WorldModel {
        WorldModel::admissions_example()
    }

    fn mask_policy() -> Policy {
        Policy::new(vec![[0.5, 0.0], [0.0, 1.0]]).unwrap()
    }

    fn world_spec(pi: Vec<[f64; 2]>, gamma: Vec<[f64; 2]>, rho: f64) -> WorldSpec {
        WorldSpec {
            k: pi.len(),
            pi,
            gamma,
            rho,
        }
    }

    #[test]
    fn validates_example_world() {
        let s: WorldSpec = admissions().into();
        assert_eq!(validate_world(&s), Ok(()));
    }

    #[test]
    fn rejects_unnormalized_pi() {
        let s = world_spec(vec![[0.2, 0.2], [0.25, 0.25]], vec![[0.5; 2]; 2], 0.1);
        assert!(matches!(
            validate_world(&s),
            Err(WorldError::NotNormalized { .. })
        ));
    }

    #[test]
    fn rejects_reward_out_of_range() {
        let s = world_spec(vec![[0.25; 2]; 2], vec![[1.5, 0.5], [0.5, 0.5]], 0.1);
        assert_eq!(
            validate_world(&s),
            Err(WorldError::RewardOutOfRange {
                x: 0,
                p: 0,
                value: 1.5
            })
        );
    }

    #[test]
    fn rejects_negative_rho_and_empty_strata() {
        let s = world_spec(vec![[0.25; 2]; 2], vec![[0.5; 2]; 2], 0.0);
        assert_eq!(validate_world(&s), Err(WorldError::BadRho(0.0)));
        let s = world_spec(vec![[0.5, 0.5], [0.0, 0.0]], vec![[0.5; 2]; 2], 0.1);
        assert_eq!(validate_world(&s), Err(WorldError::EmptyStratum { x: 1 }));
        let s = world_spec(vec![[-0.1, 0.6], [0.25, 0.25]], vec![[0.5; 2]; 2], 0.1);
        assert!(matches!(
            validate_world(&s),
            Err(WorldError::NegativeProbability { x: 0, p: 0, .. })
        ));
    }

    #[test]
    fn renormalizes_within_tolerance() {
        let eps = 4e-13;
        let w = WorldModel::new(vec![[0.5 + eps, 0.5]], vec![[0.5; 2]], 0.2).unwrap();
        let sum: f64 = w.pi().iter().flatten().sum();
        assert!((sum - 1.0).abs() <= f64::EPSILON);
    }

    #[test]
    fn k_field_must_match_rows() {
        let s = WorldSpec {
            k: 3,
            pi: vec![[0.25; 2]; 2],
            gamma: vec![[0.5; 2]; 2],
            rho: 0.1,
        };
        assert!(matches!(
            validate_world(&s),
            Err(WorldError::DimensionMismatch { field: "pi", .. })
        ));
    }

    #[test]
    fn marginals_and_propensity() {
        let w = admissions();
        let m = w.marginal_x();
        assert!((m[0] - 2.0 / 3.0).abs() < 1e-15 && (m[1] - 1.0 / 3.0).abs() < 1e-15);
        let prop = w.propensity();
        assert!((prop[0][0] - 0.1).abs() < 1e-15 && (prop[0][1] - 0.9).abs() < 1e-15);
        assert!((prop[1][0] - 0.8).abs() < 1e-15 && (prop[1][1] - 0.2).abs() < 1e-15);

        let uniform = WorldModel::new(vec![[0.25; 2]; 2], vec![[0.5; 2]; 2], 0.1).unwrap();
        assert_eq!(uniform.marginal_x(), vec![0.5, 0.5]);
        let single = WorldModel::new(vec![[0.3, 0.7]], vec![[0.5; 2]], 0.1).unwrap();
        assert_eq!(single.marginal_x(), vec![1.0]);
    }

    #[test]
    fn propensity_of_independent_world_is_group_marginal() {
        let px = [0.2, 0.5, 0.3];
        let pp = [0.35, 0.65];
        let pi = px.iter().map(|a| [a * pp[0], a * pp[1]]).collect();
        let w = WorldModel::new(pi, vec![[0.5; 2]; 3], 0.1).unwrap();
        for row in w.propensity() {
            assert!((row[0] - pp[0]).abs() < 1e-12 && (row[1] - pp[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn context_rewards_of_example() {
        let w = admissions().context_weighted_rewards();
        assert!((w.average[0] - 0.5).abs() < 1e-15);
        assert!((w.cell[1][1] - 0.2).abs() < 1e-15);
        let constant = WorldModel::new(
            vec![[0.1, 0.2], [0.3, 0.4]],
            vec![[0.7; 2]; 2],
            0.1,
        )
        .unwrap();
        for avg in constant.context_weighted_rewards().average {
            assert!((avg - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn welfare_ate_and_participation_of_example_policies() {
        let w = admissions();
        let mask = mask_policy();
        assert!((w.welfare(&mask).unwrap() - 1.0 / 12.0).abs() < 1e-15);
        assert!(w.ate_of_policy(&mask).unwrap().abs() < 1e-15);
        assert!((w.participation_rate(&mask).unwrap() - 0.1).abs() < 1e-15);

        let fair = Policy::new(vec![[0.15, 0.15], [0.0, 0.0]]).unwrap();
        assert!((w.welfare(&fair).unwrap() - 1.0 / 20.0).abs() < 1e-15);

        let exploit = Policy::new(vec![[0.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((w.ate_of_policy(&exploit).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        assert_eq!(w.welfare(&Policy::constant(2, 0.0).unwrap()).unwrap(), 0.0);
        assert!((w.participation_rate(&Policy::constant(2, 1.0).unwrap()).unwrap() - 1.0).abs() < 1e-15);
        assert!((w.participation_rate(&Policy::constant(2, 0.37).unwrap()).unwrap() - 0.37).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let w = admissions();
        let p = Policy::constant(3, 0.1).unwrap();
        assert!(matches!(
            w.welfare(&p),
            Err(WorldError::DimensionMismatch { field: "alpha", .. })
        ));
    }

    #[test]
    fn policy_rejects_out_of_range_rate() {
        assert!(matches!(
            Policy::new(vec![[0.2, 1.2]]),
            Err(WorldError::RateOutOfRange { x: 0, p: 1, .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_world(3, 0.2, 7).unwrap(), sample_world(3, 0.2, 7).unwrap());
        assert_ne!(sample_world(3, 0.2, 7).unwrap(), sample_world(3, 0.2, 8).unwrap());
        assert!(matches!(sample_world(2, 1.5, 0), Err(WorldError::BadRho(_))));
    }

    #[test]
    fn sampled_cell_means_match_uniform_simplex() {
        let n = 10_000;
        let mut pi_sum = [[0.0; 2]; 2];
        let mut gamma_sum = [[0.0; 2]; 2];
        let mut rng = rng::seeded(11, 0);
        for _ in 0..n {
            let w = WorldModel::sample(2, 0.25, &mut rng).unwrap();
            for (x, p) in w.cells() {
                pi_sum[x][p] += w.pi()[x][p];
                gamma_sum[x][p] += w.gamma()[x][p];
            }
        }
        for x in 0..2 {
            for p in 0..2 {
                assert!((pi_sum[x][p] / n as f64 - 0.25).abs() < 0.01);
                assert!((gamma_sum[x][p] / n as f64 - 0.5).abs() < 0.01);
            }
        }
    }

    #[test]
    fn world_json_round_trip_uses_contract_field_names() {
        let json = serde_json::to_value(admissions()).unwrap();
        assert_eq!(json["k"], 2);
        assert!(json["pi"].is_array() && json["gamma"].is_array());
        assert_eq!(json["rho"], 0.1);
        let back: WorldModel = serde_json::from_value(json).unwrap();
        assert_eq!(back, admissions());
        let bad = r#"{"k":1,"pi":[[0.5,0.4]],"gamma":[[0.5,0.5]],"rho":0.1}"#;
        assert!(serde_json::from_str::<WorldModel>(bad).is_err());
    }

    fn world_and_policy() -> impl Strategy<Value = (WorldModel, Policy)> {
        (1usize..6, any::<u64>()).prop_flat_map(|(k, seed)| {
            let world = sample_world(k, 0.3, seed).unwrap();
            proptest::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), k)
                .prop_map(move |rows| {
                    let alpha = rows.into_iter().map(|(a, b)| [a, b]).collect();
                    (world.clone(), Policy::new(alpha).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn ate_bounded_by_largest_disparity((world, policy) in world_and_policy()) {
            let report = PolicyReport::evaluate(&world, &policy).unwrap();
            prop_assert!(report.ate.abs() <= report.max_abs_cate + 1e-12);
            let weighted: f64 = world.marginal_x().iter().zip(&report.cate_gaps).map(|(w, g)| w * g).sum();
            prop_assert!((weighted - report.ate).abs() <= 1e-12);
        }

        #[test]
        fn welfare_never_exceeds_participation((world, policy) in world_and_policy()) {
            prop_assert!(world.welfare(&policy).unwrap() <= world.participation_rate(&policy).unwrap() + 1e-15);
        }

        #[test]
        fn total_expectation_of_context_rewards(k in 1usize..8, seed in any::<u64>()) {
            let world = sample_world(k, 0.5, seed).unwrap();
            let lhs: f64 = world.marginal_x().iter().zip(world.context_weighted_rewards().average).map(|(m, w)| m * w).sum();
            let rhs: f64 = world.cells().map(|(x, p)| world.gamma()[x][p] * world.pi()[x][p]).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn sampled_worlds_validate(k in 1usize..12, seed in any::<u64>(), rho in 0.01..=1.0f64) {
            let spec: WorldSpec = sample_world(k, rho, seed).unwrap().into();
            prop_assert_eq!(validate_world(&spec), Ok(()));
        }
    }
}

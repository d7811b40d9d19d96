//! The four policy-synthesis problems.
//!
//! Decision variables are the `2k` rates `α[x][p]`, flattened as `2x + p`.
//! Every problem maximizes `W = Σ γ α π` over `[0, 1]^{2k}` with the
//! participation row `Σ α π = ρ`; they differ only in the disparity rows.
//! Since `α ≡ ρ` satisfies all of them, none can be infeasible.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::simplex::{solve_lp, BoundedLinearProgram, LpError, LpStatus, Relation};
use crate::world::{Policy, PolicyReport, WorldError, WorldModel};

/// Gap between the anchors below which normalization is undefined.
pub const NORMALIZATION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("solver finished with status {0:?}")]
    NotOptimal(LpStatus),
    #[error("epsilon must be a finite non-negative number, got {0}")]
    BadEpsilon(f64),
    #[error("W(exploit) − W(fair(0)) = {gap:e} is too small to normalize against")]
    DegenerateNormalization { gap: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyFamily {
    #[serde(rename = "exploit")]
    Exploit,
    #[serde(rename = "fair")]
    Fair,
    #[serde(rename = "mask")]
    Mask,
    #[serde(rename = "mask+fair")]
    MaskFair,
}

impl PolicyFamily {
    pub const ALL: [PolicyFamily; 4] = [
        PolicyFamily::Exploit,
        PolicyFamily::Fair,
        PolicyFamily::Mask,
        PolicyFamily::MaskFair,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyFamily::Exploit => "exploit",
            PolicyFamily::Fair => "fair",
            PolicyFamily::Mask => "mask",
            PolicyFamily::MaskFair => "mask+fair",
        }
    }
}

impl fmt::Display for PolicyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown policy family `{s}` (exploit, fair, mask, mask+fair)"))
    }
}

fn var(x: usize, p: usize) -> usize {
    2 * x + p
}

fn check_eps(eps: f64) -> Result<(), PolicyError> {
    if eps.is_finite() && eps >= 0.0 {
        Ok(())
    } else {
        Err(PolicyError::BadEpsilon(eps))
    }
}

/// Adds `−eps ≤ row·α ≤ eps`, collapsing to one equality at `eps = 0`.
fn band(lp: BoundedLinearProgram, row: Vec<f64>, eps: f64) -> BoundedLinearProgram {
    if eps == 0.0 {
        lp.subject_to(row, Relation::Eq, 0.0)
    } else {
        lp.subject_to(row.clone(), Relation::Le, eps)
            .subject_to(row, Relation::Ge, -eps)
    }
}

fn fairness_bands(mut lp: BoundedLinearProgram, k: usize, eps: f64) -> BoundedLinearProgram {
    for x in 0..k {
        let mut row = vec![0.0; 2 * k];
        row[var(x, 1)] = 1.0;
        row[var(x, 0)] = -1.0;
        lp = band(lp, row, eps);
    }
    lp
}

fn masking_band(lp: BoundedLinearProgram, model: &WorldModel, eps: f64) -> BoundedLinearProgram {
    let mut row = vec![0.0; 2 * model.k()];
    for (x, m) in model.marginal_x().into_iter().enumerate() {
        row[var(x, 1)] = m;
        row[var(x, 0)] = -m;
    }
    band(lp, row, eps)
}

/// The linear program for `family` at relaxation `eps`. `eps` is ignored for
/// [`PolicyFamily::Exploit`] and is the fairness band for
/// [`PolicyFamily::MaskFair`], whose ATE row is always an equality.
pub fn policy_program(model: &WorldModel, family: PolicyFamily, eps: f64) -> BoundedLinearProgram {
    let n = 2 * model.k();
    let mut objective = vec![0.0; n];
    let mut participation = vec![0.0; n];
    for (x, p) in model.cells() {
        objective[var(x, p)] = model.gamma()[x][p] * model.pi()[x][p];
        participation[var(x, p)] = model.pi()[x][p];
    }
    let lp = BoundedLinearProgram::maximize(objective)
        .with_bounds(vec![0.0; n], vec![1.0; n])
        .subject_to(participation, Relation::Eq, model.rho());
    match family {
        PolicyFamily::Exploit => lp,
        PolicyFamily::Fair => fairness_bands(lp, model.k(), eps),
        PolicyFamily::Mask => masking_band(lp, model, eps),
        PolicyFamily::MaskFair => fairness_bands(masking_band(lp, model, 0.0), model.k(), eps),
    }
}

fn solve_program(
    model: &WorldModel,
    family: PolicyFamily,
    eps: f64,
) -> Result<(Policy, PolicyReport), PolicyError> {
    check_eps(eps)?;
    let solution = solve_lp(&policy_program(model, family, eps))?;
    if solution.status != LpStatus::Optimal {
        return Err(PolicyError::NotOptimal(solution.status));
    }
    let alpha = solution
        .values
        .chunks_exact(2)
        .map(|c| [c[0], c[1]])
        .collect();
    finish(model, Policy::from_clamped(alpha))
}

fn finish(model: &WorldModel, policy: Policy) -> Result<(Policy, PolicyReport), PolicyError> {
    let report = PolicyReport::evaluate(model, &policy)?;
    Ok((policy, report))
}

/// Fills `budget` over `(weight, mass)` items in the given order, taking
/// each item fully until the last, fractional one.
fn fill(order: impl Iterator<Item = (usize, f64)>, mut budget: f64, rates: &mut [f64]) {
    for (i, mass) in order {
        if budget <= 0.0 {
            break;
        }
        if mass <= 0.0 {
            continue;
        }
        let take = (budget / mass).min(1.0);
        rates[i] = take;
        budget -= take * mass;
    }
}

/// Descending by score, lowest index first on ties.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Exploit optimum: cells by `γ` descending, each filled before the next.
pub fn exploit_greedy(model: &WorldModel) -> Policy {
    let gamma: Vec<f64> = model.gamma().iter().flatten().copied().collect();
    let pi: Vec<f64> = model.pi().iter().flatten().copied().collect();
    let mut rates = vec![0.0; gamma.len()];
    fill(
        ranked(&gamma).into_iter().map(|i| (i, pi[i])),
        model.rho(),
        &mut rates,
    );
    Policy::from_clamped(rates.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

/// Exactly-fair optimum: whole strata by `E[Y | x]` descending.
pub fn fair_water_filling(model: &WorldModel) -> Policy {
    let average = model.context_weighted_rewards().average;
    let mass = model.marginal_x();
    let mut rates = vec![0.0; model.k()];
    fill(
        ranked(&average).into_iter().map(|x| (x, mass[x])),
        model.rho(),
        &mut rates,
    );
    Policy::from_clamped(rates.into_iter().map(|a| [a, a]).collect())
}

pub fn solve_exploit(model: &WorldModel) -> Result<(Policy, PolicyReport), PolicyError> {
    finish(model, exploit_greedy(model))
}

/// `eps = 0` uses water-filling; wider bands go through the simplex.
pub fn solve_fair(model: &WorldModel, eps_fair: f64) -> Result<(Policy, PolicyReport), PolicyError> {
    check_eps(eps_fair)?;
    if eps_fair == 0.0 {
        finish(model, fair_water_filling(model))
    } else {
        solve_program(model, PolicyFamily::Fair, eps_fair)
    }
}

pub fn solve_mask(model: &WorldModel, eps_mask: f64) -> Result<(Policy, PolicyReport), PolicyError> {
    solve_program(model, PolicyFamily::Mask, eps_mask)
}

/// Zero ATE plus per-stratum bands of width `eps_fair`.
pub fn solve_mask_with_fair(
    model: &WorldModel,
    eps_fair: f64,
) -> Result<(Policy, PolicyReport), PolicyError> {
    solve_program(model, PolicyFamily::MaskFair, eps_fair)
}

pub fn solve_family(
    model: &WorldModel,
    family: PolicyFamily,
    eps: f64,
) -> Result<(Policy, PolicyReport), PolicyError> {
    match family {
        PolicyFamily::Exploit => solve_exploit(model),
        PolicyFamily::Fair => solve_fair(model, eps),
        PolicyFamily::Mask => solve_mask(model, eps),
        PolicyFamily::MaskFair => solve_mask_with_fair(model, eps),
    }
}

/// `W(fair(0))` and `W(exploit)` for one world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationAnchors {
    pub fair0: f64,
    pub exploit: f64,
}

impl NormalizationAnchors {
    pub fn of(model: &WorldModel) -> Result<Self, PolicyError> {
        let fair0 = model.welfare(&fair_water_filling(model))?;
        let exploit = model.welfare(&exploit_greedy(model))?;
        let gap = exploit - fair0;
        if gap < NORMALIZATION_FLOOR {
            return Err(PolicyError::DegenerateNormalization { gap });
        }
        Ok(Self { fair0, exploit })
    }

    pub fn normalize(&self, w: f64) -> f64 {
        (w - self.fair0) / (self.exploit - self.fair0)
    }
}

/// Maps `W(fair(0))` to 0 and `W(exploit)` to 1.
pub fn normalized_performance(model: &WorldModel, w: f64) -> Result<f64, PolicyError> {
    Ok(NormalizationAnchors::of(model)?.normalize(w))
}

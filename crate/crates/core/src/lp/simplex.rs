//! Dense bounded-variable primal simplex.
//!
//! Variables are first mapped onto `0 ≤ v ≤ u` (shift, reflection or a
//! positive/negative split), rows are oriented so `b ≥ 0`, and slack or
//! artificial columns complete an identity basis. Phase one drives the
//! artificials to zero; phase two optimizes the real objective with the
//! artificials pinned at zero. Nonbasic columns sit at either bound, so box
//! constraints never become rows. Entering and leaving choices follow
//! Bland's smallest-index rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub coefficients: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `maximize c·x` subject to linear rows and per-variable bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundedLinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundedLinearProgram {
    /// A program over `objective.len()` variables bounded to `[0, +∞)`.
    pub fn maximize(objective: Vec<f64>) -> Self {
        let n = objective.len();
        Self {
            objective,
            constraints: Vec::new(),
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn subject_to(mut self, coefficients: Vec<f64>, relation: Relation, rhs: f64) -> Self {
        self.constraints.push(Constraint {
            coefficients,
            relation,
            rhs,
        });
        self
    }

    pub fn num_variables(&self) -> usize {
        self.objective.len()
    }

    fn validate(&self, options: &SolverOptions) -> Result<(), LpError> {
        let n = self.objective.len();
        let malformed = |msg: String| Err(LpError::MalformedProgram(msg));
        if n == 0 {
            return malformed("program has no variables".into());
        }
        if n > options.max_variables {
            return malformed(format!(
                "{n} variables exceeds the cap of {}",
                options.max_variables
            ));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return malformed(format!(
                "bounds have lengths {}/{}, expected {n}",
                self.lower.len(),
                self.upper.len()
            ));
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return malformed("objective has a non-finite coefficient".into());
        }
        for (j, (&l, &u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return malformed(format!("variable {j} has bounds [{l}, {u}]"));
            }
        }
        for (i, row) in self.constraints.iter().enumerate() {
            if row.coefficients.len() != n {
                return malformed(format!(
                    "constraint {i} has {} coefficients, expected {n}",
                    row.coefficients.len()
                ));
            }
            if !row.rhs.is_finite() || row.coefficients.iter().any(|a| !a.is_finite()) {
                return malformed(format!("constraint {i} has a non-finite entry"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Empty unless `status` is `Optimal`.
    pub values: Vec<f64>,
    pub objective_value: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpError {
    #[error("malformed program: {0}")]
    MalformedProgram(String),
    #[error("simplex did not terminate within {0} pivots")]
    IterationLimit(usize),
    #[error("solution violates constraint {row} by {violation:e}")]
    NumericalFailure { row: usize, violation: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_variables: usize,
    /// Feasibility tolerance for phase one and for the final check.
    pub tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_variables: 10_000,
            tolerance: 1e-9,
        }
    }
}

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-12;

pub fn solve_lp(program: &BoundedLinearProgram) -> Result<LpSolution, LpError> {
    solve_lp_with(program, &SolverOptions::default())
}

pub fn solve_lp_with(
    program: &BoundedLinearProgram,
    options: &SolverOptions,
) -> Result<LpSolution, LpError> {
    program.validate(options)?;
    let standard = StandardForm::build(program);
    let mut tableau = Tableau::new(&standard);

    let phase_one_cost: Vec<f64> = (0..tableau.cols)
        .map(|j| if j >= standard.first_artificial { -1.0 } else { 0.0 })
        .collect();
    let infeasibility = match tableau.run(&phase_one_cost, tableau.cols)? {
        Outcome::Optimal => -tableau.objective(&phase_one_cost),
        Outcome::Unbounded => unreachable!("phase one objective is bounded by zero"),
    };
    if infeasibility > options.tolerance * (1.0 + standard.rhs_scale) {
        return Ok(LpSolution {
            status: LpStatus::Infeasible,
            values: Vec::new(),
            objective_value: f64::NAN,
        });
    }
    tableau.pin_artificials(standard.first_artificial);

    let mut cost = standard.cost.clone();
    cost.resize(tableau.cols, 0.0);
    if let Outcome::Unbounded = tableau.run(&cost, standard.first_artificial)? {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            values: Vec::new(),
            objective_value: f64::INFINITY,
        });
    }

    let internal = tableau.values();
    let values = standard.recover(program, &internal);
    verify(program, &values, options.tolerance)?;
    let objective_value = program
        .objective
        .iter()
        .zip(&values)
        .map(|(c, x)| c * x)
        .sum();
    Ok(LpSolution {
        status: LpStatus::Optimal,
        values,
        objective_value,
    })
}

fn verify(program: &BoundedLinearProgram, values: &[f64], tol: f64) -> Result<(), LpError> {
    for (row, c) in program.constraints.iter().enumerate() {
        let lhs: f64 = c.coefficients.iter().zip(values).map(|(a, x)| a * x).sum();
        let scale = 1.0 + c.rhs.abs();
        let violation = match c.relation {
            Relation::Le => lhs - c.rhs,
            Relation::Ge => c.rhs - lhs,
            Relation::Eq => (lhs - c.rhs).abs(),
        };
        if violation > tol * scale {
            return Err(LpError::NumericalFailure { row, violation });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// `x = lower + v`
    Shift { lower: f64, col: usize },
    /// `x = upper − v`
    Reflect { upper: f64, col: usize },
    /// `x = v⁺ − v⁻`
    Split { pos: usize, neg: usize },
}

/// Rows `A v (=) b` with `b ≥ 0` over nonnegative, upper-bounded columns.
/// Column order: structural, slack, artificial.
struct StandardForm {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    upper: Vec<f64>,
    cost: Vec<f64>,
    /// Column that starts each row's identity basis.
    basis: Vec<usize>,
    first_artificial: usize,
    maps: Vec<VarMap>,
    rhs_scale: f64,
}

impl StandardForm {
    fn build(program: &BoundedLinearProgram) -> Self {
        let mut maps = Vec::with_capacity(program.num_variables());
        let mut upper = Vec::new();
        let mut cost = Vec::new();
        for (j, (&l, &u)) in program.lower.iter().zip(&program.upper).enumerate() {
            let c = program.objective[j];
            if l.is_finite() {
                maps.push(VarMap::Shift {
                    lower: l,
                    col: upper.len(),
                });
                upper.push(u - l);
                cost.push(c);
            } else if u.is_finite() {
                maps.push(VarMap::Reflect {
                    upper: u,
                    col: upper.len(),
                });
                upper.push(f64::INFINITY);
                cost.push(-c);
            } else {
                let pos = upper.len();
                maps.push(VarMap::Split { pos, neg: pos + 1 });
                upper.extend([f64::INFINITY, f64::INFINITY]);
                cost.extend([c, -c]);
            }
        }
        let structural = upper.len();

        let mut rows = Vec::with_capacity(program.constraints.len());
        let mut rhs = Vec::with_capacity(program.constraints.len());
        let mut relations = Vec::with_capacity(program.constraints.len());
        for c in &program.constraints {
            let mut row = vec![0.0; structural];
            let mut b = c.rhs;
            for (a, map) in c.coefficients.iter().zip(&maps) {
                match *map {
                    VarMap::Shift { lower, col } => {
                        row[col] = *a;
                        b -= a * lower;
                    }
                    VarMap::Reflect { upper, col } => {
                        row[col] = -a;
                        b -= a * upper;
                    }
                    VarMap::Split { pos, neg } => {
                        row[pos] = *a;
                        row[neg] = -a;
                    }
                }
            }
            let mut relation = c.relation;
            if b < 0.0 {
                b = -b;
                row.iter_mut().for_each(|v| *v = -*v);
                relation = match relation {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
            }
            rows.push(row);
            rhs.push(b);
            relations.push(relation);
        }

        let m = rows.len();
        let slacks = relations.iter().filter(|r| **r != Relation::Eq).count();
        let artificials = relations.iter().filter(|r| **r != Relation::Le).count();
        let first_artificial = structural + slacks;
        let total = first_artificial + artificials;
        let mut basis = vec![0; m];
        let (mut next_slack, mut next_art) = (structural, first_artificial);
        for (i, row) in rows.iter_mut().enumerate() {
            row.resize(total, 0.0);
            match relations[i] {
                Relation::Le => {
                    row[next_slack] = 1.0;
                    basis[i] = next_slack;
                    next_slack += 1;
                }
                Relation::Ge => {
                    row[next_slack] = -1.0;
                    next_slack += 1;
                    row[next_art] = 1.0;
                    basis[i] = next_art;
                    next_art += 1;
                }
                Relation::Eq => {
                    row[next_art] = 1.0;
                    basis[i] = next_art;
                    next_art += 1;
                }
            }
        }
        upper.resize(total, f64::INFINITY);
        let rhs_scale = rhs.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
        Self {
            rows,
            rhs,
            upper,
            cost,
            basis,
            first_artificial,
            maps,
            rhs_scale,
        }
    }

    fn recover(&self, program: &BoundedLinearProgram, internal: &[f64]) -> Vec<f64> {
        self.maps
            .iter()
            .enumerate()
            .map(|(j, map)| {
                let x = match *map {
                    VarMap::Shift { lower, col } => lower + internal[col],
                    VarMap::Reflect { upper, col } => upper - internal[col],
                    VarMap::Split { pos, neg } => internal[pos] - internal[neg],
                };
                x.clamp(program.lower[j], program.upper[j])
            })
            .collect()
    }
}

enum Outcome {
    Optimal,
    Unbounded,
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// `B⁻¹A`, row-major.
    body: Vec<f64>,
    /// Current values of the basic variables.
    beta: Vec<f64>,
    basis: Vec<usize>,
    upper: Vec<f64>,
    at_upper: Vec<bool>,
    is_basic: Vec<bool>,
    pivots: usize,
    pivot_limit: usize,
}

impl Tableau {
    fn new(sf: &StandardForm) -> Self {
        let rows = sf.rows.len();
        let cols = sf.upper.len();
        let body = sf.rows.iter().flatten().copied().collect();
        let mut is_basic = vec![false; cols];
        for &b in &sf.basis {
            is_basic[b] = true;
        }
        Self {
            rows,
            cols,
            body,
            beta: sf.rhs.clone(),
            basis: sf.basis.clone(),
            upper: sf.upper.clone(),
            at_upper: vec![false; cols],
            is_basic,
            pivots: 0,
            pivot_limit: 50_000 + 200 * (rows + cols),
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.body[i * self.cols + j]
    }

    fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = (0..self.cols)
            .map(|j| if self.at_upper[j] { self.upper[j] } else { 0.0 })
            .collect();
        for (i, &b) in self.basis.iter().enumerate() {
            v[b] = self.beta[i];
        }
        v
    }

    fn objective(&self, cost: &[f64]) -> f64 {
        self.values().iter().zip(cost).map(|(v, c)| v * c).sum()
    }

    /// Fixes artificial columns at zero for phase two.
    fn pin_artificials(&mut self, first: usize) {
        for j in first..self.cols {
            self.upper[j] = 0.0;
            self.at_upper[j] = false;
        }
        for i in 0..self.rows {
            if self.basis[i] >= first {
                self.beta[i] = 0.0;
            }
        }
    }

    /// Maximizes `cost` letting only columns `< enter_limit` enter the basis.
    fn run(&mut self, cost: &[f64], enter_limit: usize) -> Result<Outcome, LpError> {
        loop {
            let Some((entering, increasing)) = self.entering(cost, enter_limit) else {
                return Ok(Outcome::Optimal);
            };
            if self.pivots >= self.pivot_limit {
                return Err(LpError::IterationLimit(self.pivot_limit));
            }
            self.pivots += 1;
            let dir = if increasing { 1.0 } else { -1.0 };

            // Largest step `t` before a basic variable or the entering
            // column itself hits a bound; ties go to the smallest index.
            let mut step = self.upper[entering];
            let mut leaving: Option<(usize, bool)> = None;
            for i in 0..self.rows {
                let rate = dir * self.at(i, entering);
                let b = self.basis[i];
                let limit = if rate > PIVOT_TOL {
                    (self.beta[i].max(0.0) / rate, false)
                } else if rate < -PIVOT_TOL && self.upper[b].is_finite() {
                    ((self.upper[b] - self.beta[i]).max(0.0) / -rate, true)
                } else {
                    continue;
                };
                let better = match leaving {
                    _ if limit.0 < step - 1e-14 => true,
                    Some((r, _)) => limit.0 <= step + 1e-14 && b < self.basis[r],
                    None => false,
                };
                if better {
                    step = limit.0;
                    leaving = Some((i, limit.1));
                }
            }
            if step == f64::INFINITY {
                return Ok(Outcome::Unbounded);
            }

            for i in 0..self.rows {
                self.beta[i] -= dir * self.at(i, entering) * step;
            }
            let entering_value = if increasing {
                step
            } else {
                self.upper[entering] - step
            };
            match leaving {
                None => self.at_upper[entering] = !self.at_upper[entering],
                Some((r, to_upper)) => {
                    let out = self.basis[r];
                    self.at_upper[out] = to_upper;
                    self.is_basic[out] = false;
                    self.pivot(r, entering);
                    self.beta[r] = entering_value;
                    self.basis[r] = entering;
                    self.is_basic[entering] = true;
                    self.at_upper[entering] = false;
                }
            }
        }
    }

    /// Smallest-index column whose reduced cost improves the objective.
    fn entering(&self, cost: &[f64], enter_limit: usize) -> Option<(usize, bool)> {
        (0..enter_limit).find_map(|j| {
            if self.is_basic[j] || self.upper[j] == 0.0 {
                return None;
            }
            let reduced = cost[j]
                - (0..self.rows)
                    .map(|i| cost[self.basis[i]] * self.at(i, j))
                    .sum::<f64>();
            if !self.at_upper[j] && reduced > COST_TOL {
                Some((j, true))
            } else if self.at_upper[j] && reduced < -COST_TOL {
                Some((j, false))
            } else {
                None
            }
        })
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let cols = self.cols;
        let p = self.at(r, j);
        for v in &mut self.body[r * cols..(r + 1) * cols] {
            *v /= p;
        }
        let (before, rest) = self.body.split_at_mut(r * cols);
        let (pivot_row, after) = rest.split_at_mut(cols);
        for row in before.chunks_exact_mut(cols).chain(after.chunks_exact_mut(cols)) {
            let factor = row[j];
            if factor != 0.0 {
                for (v, pv) in row.iter_mut().zip(pivot_row.iter()) {
                    *v -= factor * pv;
                }
                row[j] = 0.0;
            }
        }
    }
}

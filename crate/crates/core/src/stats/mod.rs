//! Detection tests on stratified decision counts.
//!
//! [`z_test_ate`] tests whether the population ATE is zero. [`cate_test`]
//! tests `D ⫫ P | X` with a Fisher exact test in each stratum that has both
//! groups, combined by Fisher's method.

mod fisher;
mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fisher::{fisher_exact_log_p, fisher_exact_two_sided, TIE_TOLERANCE};
pub use special::{chi_square_sf, log_gamma, normal_sf};

pub const DEFAULT_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("{what} is undefined at {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("no stratum has observations in both groups")]
    NoUsableStrata,
    #[error("cell ({x}, {p}) has d = {d} > n = {n}")]
    InvalidCounts { x: usize, p: usize, n: u64, d: u64 },
    #[error("stratum {x} is out of range for k = {k}")]
    StratumOutOfRange { x: usize, k: usize },
    #[error("count tables have {left} and {right} strata")]
    ShapeMismatch { left: usize, right: usize },
    #[error("level must lie in (0, 1), got {0}")]
    BadLevel(f64),
}

/// Units and positive decisions in one `(x, p)` cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub n: u64,
    pub d: u64,
}

impl CellCount {
    fn rate(self) -> f64 {
        self.d as f64 / self.n as f64
    }
}

/// `n[x][p]` and `d[x][p]` for every stratum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[CellCount; 2]>", into = "Vec<[CellCount; 2]>")]
pub struct StratifiedCounts {
    cells: Vec<[CellCount; 2]>,
}

impl StratifiedCounts {
    pub fn new(k: usize) -> Self {
        Self {
            cells: vec![[CellCount::default(); 2]; k],
        }
    }

    pub fn from_cells(cells: Vec<[CellCount; 2]>) -> Result<Self, StatsError> {
        for (x, row) in cells.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                if c.d > c.n {
                    return Err(StatsError::InvalidCounts { x, p, n: c.n, d: c.d });
                }
            }
        }
        Ok(Self { cells })
    }

    /// Convenience constructor from `(n, d)` pairs.
    pub fn from_pairs(pairs: &[[(u64, u64); 2]]) -> Result<Self, StatsError> {
        Self::from_cells(
            pairs
                .iter()
                .map(|row| row.map(|(n, d)| CellCount { n, d }))
                .collect(),
        )
    }

    pub fn k(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[[CellCount; 2]] {
        &self.cells
    }

    pub fn cell(&self, x: usize, p: usize) -> CellCount {
        self.cells[x][p]
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().map(|c| c.n).sum()
    }

    /// Adds one unit. `p` is 0 or 1.
    pub fn record(&mut self, x: usize, p: usize, decision: bool) -> Result<(), StatsError> {
        let k = self.k();
        let cell = self
            .cells
            .get_mut(x)
            .ok_or(StatsError::StratumOutOfRange { x, k })?
            .get_mut(p)
            .ok_or(StatsError::StratumOutOfRange { x: p, k: 2 })?;
        cell.n += 1;
        cell.d += u64::from(decision);
        Ok(())
    }

    /// Cell-wise sum.
    pub fn merge(&mut self, other: &StratifiedCounts) -> Result<(), StatsError> {
        if other.k() != self.k() {
            return Err(StatsError::ShapeMismatch { left: self.k(), right: other.k() });
        }
        for (mine, theirs) in self.cells.iter_mut().zip(&other.cells) {
            for p in 0..2 {
                mine[p].n += theirs[p].n;
                mine[p].d += theirs[p].d;
            }
        }
        Ok(())
    }

    /// Strata with at least one unit in each group.
    pub fn usable_strata(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, row)| row[0].n > 0 && row[1].n > 0)
            .map(|(x, _)| x)
    }
}

impl TryFrom<Vec<[CellCount; 2]>> for StratifiedCounts {
    type Error = StatsError;

    fn try_from(cells: Vec<[CellCount; 2]>) -> Result<Self, Self::Error> {
        Self::from_cells(cells)
    }
}

impl From<StratifiedCounts> for Vec<[CellCount; 2]> {
    fn from(c: StratifiedCounts) -> Self {
        c.cells
    }
}

/// Outcome of one hypothesis test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub p_value: f64,
    /// Reference degrees of freedom; 0 for the z-test.
    pub df: u64,
    pub reject: bool,
    pub level: f64,
    pub strata_used: usize,
    /// Zero estimated variance with a non-zero estimate.
    pub degenerate: bool,
}

impl TestReport {
    fn new(statistic: f64, p_value: f64, df: u64, level: f64, strata_used: usize, degenerate: bool) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        Self {
            statistic,
            p_value,
            df,
            reject: p_value < level,
            level,
            strata_used,
            degenerate,
        }
    }
}

fn check_level(level: f64) -> Result<(), StatsError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(StatsError::BadLevel(level))
    }
}

/// Stratified difference in decision rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteEstimate {
    pub ate: f64,
    pub standard_error: f64,
    pub strata_used: usize,
}

/// `Σ_x p̂_x (r̂[x][1] − r̂[x][0])` over strata with both groups, with
/// `p̂_x` the share of all units in stratum `x`, and its plug-in standard
/// error treating `p̂_x` as fixed.
pub fn estimate_ate(counts: &StratifiedCounts) -> Result<AteEstimate, StatsError> {
    let total = counts.total() as f64;
    let mut ate = 0.0;
    let mut var = 0.0;
    let mut used = 0;
    for x in counts.usable_strata() {
        let [c0, c1] = counts.cells[x];
        let weight = (c0.n + c1.n) as f64 / total;
        let (r0, r1) = (c0.rate(), c1.rate());
        ate += weight * (r1 - r0);
        var += weight * weight * (r1 * (1.0 - r1) / c1.n as f64 + r0 * (1.0 - r0) / c0.n as f64);
        used += 1;
    }
    if used == 0 {
        return Err(StatsError::NoUsableStrata);
    }
    Ok(AteEstimate {
        ate,
        standard_error: var.sqrt(),
        strata_used: used,
    })
}

/// Two-sided z-test of a zero ATE at level 0.05.
pub fn z_test_ate(counts: &StratifiedCounts) -> Result<TestReport, StatsError> {
    z_test_ate_at(counts, DEFAULT_LEVEL)
}

pub fn z_test_ate_at(counts: &StratifiedCounts, level: f64) -> Result<TestReport, StatsError> {
    check_level(level)?;
    let est = estimate_ate(counts)?;
    let report = if est.standard_error > 0.0 {
        let z = est.ate / est.standard_error;
        TestReport::new(z, 2.0 * normal_sf(z.abs()), 0, level, est.strata_used, false)
    } else if est.ate == 0.0 {
        TestReport::new(0.0, 1.0, 0, level, est.strata_used, false)
    } else {
        let z = f64::INFINITY.copysign(est.ate);
        TestReport::new(z, 0.0, 0, level, est.strata_used, true)
    };
    Ok(report)
}

/// Per-stratum Fisher exact tests of `D ⫫ P` combined by Fisher's method,
/// at level 0.05.
pub fn cate_test(counts: &StratifiedCounts) -> Result<TestReport, StatsError> {
    cate_test_at(counts, DEFAULT_LEVEL)
}

pub fn cate_test_at(counts: &StratifiedCounts, level: f64) -> Result<TestReport, StatsError> {
    check_level(level)?;
    let mut log_sum = 0.0;
    let mut used = 0u64;
    for x in counts.usable_strata() {
        let [c0, c1] = counts.cells[x];
        log_sum += fisher_exact_log_p(c1.d, c1.n - c1.d, c0.d, c0.n - c0.d);
        used += 1;
    }
    if used == 0 {
        return Err(StatsError::NoUsableStrata);
    }
    let statistic = -2.0 * log_sum;
    let df = 2 * used;
    let p_value = chi_square_sf(statistic, df)?;
    Ok(TestReport::new(statistic, p_value, df, level, used as usize, false))
}

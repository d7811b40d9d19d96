//! Decision-policy synthesis under fairness and ATE-masking constraints.
//!
//! A world is a discrete joint distribution over a stratum `x ∈ 0..k` and a
//! binary protected group `p ∈ {0, 1}`, together with the expected reward of
//! taking the positive decision in each `(x, p)` cell. A policy assigns a
//! participation rate to every cell. The crate:
//!
//! - solves the exploit, ε-fair, ε-mask and mask-with-fair-relaxation linear
//!   programs ([`lp`]), with closed-form greedy solutions where they exist;
//! - computes arbitrage rates, gap bounds, dependence diagnostics and the
//!   genericity / feasible-volume experiments ([`theory`]);
//! - provides the stratified z-test for a zero ATE and the Fisher-exact
//!   conditional-independence test combined by Fisher's method ([`stats`]);
//! - simulates decision logs and measures how long a policy survives the
//!   two tests ([`sim`]);
//! - estimates worlds from tabular data by quantile binning ([`ingest`]).

pub mod cli;
pub mod ingest;
pub mod lp;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod theory;
pub mod world;

pub use lp::{
    normalized_performance, solve_exploit, solve_fair, solve_lp, solve_mask,
    solve_mask_with_fair, BoundedLinearProgram, LpError, LpSolution, LpStatus, PolicyFamily,
    Relation,
};

pub use stats::{cate_test, z_test_ate, StratifiedCounts, TestReport};
pub use world::{Policy, PolicyReport, WorldError, WorldModel};

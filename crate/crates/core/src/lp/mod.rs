//! Linear programs over participation rates.
//!
//! [`simplex`] is a general bounded-variable solver; [`policy`] builds the
//! exploit, fair, mask and mask-with-fair programs on top of it and carries
//! the greedy closed forms for the exploit and exactly-fair problems.

pub mod policy;
pub mod simplex;

pub use policy::{
    exploit_greedy, fair_water_filling, normalized_performance, policy_program, solve_exploit,
    solve_fair, solve_family, solve_mask, solve_mask_with_fair, NormalizationAnchors,
    PolicyError, PolicyFamily,
};
pub use simplex::{
    solve_lp, solve_lp_with, BoundedLinearProgram, Constraint, LpError, LpSolution, LpStatus,
    Relation, SolverOptions,
};

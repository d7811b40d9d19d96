//! Acceptance suite. Prints one PASS/FAIL line per criterion, with the
//! individual checks indented underneath, and exits non-zero if any fail.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use causal_masking::lp::{exploit_greedy, fair_water_filling, policy_program, solve_family};
use causal_masking::rng;
use causal_masking::sim::{generate_batch, longevity_sweep, LongevityArm, LongevityConfig};
use causal_masking::stats::{cate_test, chi_square_sf, fisher_exact_two_sided, z_test_ate};
use causal_masking::theory::{
    feasible_volume_estimate, gap_lower_bound, genericity_experiment, log_log_slope, performance_sweep, VolumeFamily,
    WorldMode,
};
use causal_masking::{
    solve_exploit, solve_fair, solve_lp, solve_mask, LpStatus, Policy, PolicyFamily, PolicyReport, WorldModel,
};
use rayon::prelude::*;

const SEED: u64 = 20_240_601;

struct Criterion {
    name: &'static str,
    budget: Duration,
    checks: Vec<(String, bool)>,
}

impl Criterion {
    fn new(name: &'static str, budget_secs: u64) -> Self {
        Self { name, budget: Duration::from_secs(budget_secs), checks: Vec::new() }
    }

    fn check(&mut self, ok: bool, detail: impl Into<String>) {
        self.checks.push((detail.into(), ok));
    }

    fn close(&self, a: f64, b: f64, tol: f64, what: &str) -> (bool, String) {
        ((a - b).abs() <= tol, format!("{what}: {a:.12} vs {b:.12} (tol {tol:e})"))
    }
}

fn run(index: usize, build: fn() -> Criterion) -> bool {
    let start = Instant::now();
    let mut c = build();
    let elapsed = start.elapsed();
    let in_time = elapsed <= c.budget;
    c.check(in_time, format!("runtime {:.2}s within {}s", elapsed.as_secs_f64(), c.budget.as_secs()));
    let ok = c.checks.iter().all(|(_, ok)| *ok);
    println!("{} {index}. {}", if ok { "PASS" } else { "FAIL" }, c.name);
    for (detail, ok) in &c.checks {
        println!("      [{}] {detail}", if *ok { "ok" } else { "FAIL" });
    }
    ok
}

fn serve_best_cell_only() -> Policy {
    Policy::new(vec![[0.0, 0.0], [0.0, 1.0]]).unwrap()
}

fn admissions() -> Criterion {
    let mut c = Criterion::new("admissions example reproduction", 1);
    let w = WorldModel::admissions_example();
    let (_, fair) = solve_fair(&w, 0.0).unwrap();
    let (_, mask) = solve_mask(&w, 0.0).unwrap();
    let (_, exploit) = solve_exploit(&w).unwrap();
    let greedy = PolicyReport::evaluate(&w, &serve_best_cell_only()).unwrap();
    let bound = gap_lower_bound(&w).unwrap();
    let gap = mask.objective - fair.objective;
    for (a, b, what) in [
        (fair.objective, 1.0 / 20.0, "W(fair(0))"),
        (mask.objective, 1.0 / 12.0, "W(mask(0))"),
        (exploit.objective, 1.0 / 12.0, "W(exploit)"),
        (mask.ate, 0.0, "ATE(mask(0))"),
        (mask.objective / mask.participation, 5.0 / 6.0, "success rate of mask(0)"),
        (greedy.ate, 1.0 / 3.0, "ATE of the serve-(1,1)-only policy"),
        (bound, 1.0 / 30.0, "gap lower bound"),
        (gap, bound, "LP gap equals the bound"),
    ] {
        let (ok, d) = c.close(a, b, 1e-9, what);
        c.check(ok, d);
    }
    c
}

fn grid() -> [f64; 6] {
    [0.0, 0.01, 0.05, 0.1, 0.2, 0.5]
}

/// Returns the first violation found in one world, if any.
fn oracle_violation(k: usize, id: u64) -> Option<String> {
    let w = WorldMode::Free.sample(k, 0.1, &mut rng::seeded(SEED, rng::stream_id(1, k as u64, id))).unwrap();
    let lp_value = |family, eps| {
        let sol = solve_lp(&policy_program(&w, family, eps)).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        sol.objective_value
    };
    let greedy = w.welfare(&exploit_greedy(&w)).unwrap();
    let water = w.welfare(&fair_water_filling(&w)).unwrap();
    let lp_exploit = lp_value(PolicyFamily::Exploit, 0.0);
    let lp_fair = lp_value(PolicyFamily::Fair, 0.0);
    if (greedy - lp_exploit).abs() > 1e-9 {
        return Some(format!("k={k} world {id}: greedy {greedy} vs LP {lp_exploit}"));
    }
    if (water - lp_fair).abs() > 1e-9 {
        return Some(format!("k={k} world {id}: water-filling {water} vs LP {lp_fair}"));
    }
    let mut prev = [f64::NEG_INFINITY; 3];
    for eps in grid() {
        let values: Vec<f64> = [PolicyFamily::Fair, PolicyFamily::Mask, PolicyFamily::MaskFair]
            .iter()
            .map(|&f| solve_family(&w, f, eps).unwrap().1.objective)
            .collect();
        let (fair, mask) = (values[0], values[1]);
        if !(fair <= mask + 1e-9 && mask <= lp_exploit + 1e-9) {
            return Some(format!("k={k} world {id} eps {eps}: fair {fair}, mask {mask}, exploit {lp_exploit}"));
        }
        for (i, &v) in values.iter().enumerate() {
            if v + 1e-9 < prev[i] {
                return Some(format!("k={k} world {id}: family {i} drops at eps {eps}"));
            }
            prev[i] = v;
        }
    }
    None
}

fn oracle_equivalence() -> Criterion {
    let mut c = Criterion::new("closed forms match the simplex; family ordering and monotonicity", 30);
    for k in [1usize, 2, 5, 10] {
        let violations: Vec<String> = (0..1000u64).into_par_iter().filter_map(|id| oracle_violation(k, id)).collect();
        c.check(
            violations.is_empty(),
            format!("k={k}: {} of 1000 worlds violate{}", violations.len(), violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()),
        );
    }
    c
}

fn genericity() -> Criterion {
    let mut c = Criterion::new("masking-gap frequencies over sampled worlds", 60);
    let run = |mode| genericity_experiment(2, 0.1, 1000, mode, SEED).unwrap();
    let ih = run(WorldMode::IndependentHomogeneous);
    c.check(ih.gap_positive == 0, format!("independent-homogeneous: gap > 1e-9 in {}/1000 (need 0)", ih.gap_positive));
    for mode in [WorldMode::HeterogeneousOnly, WorldMode::ConfoundedOnly] {
        let s = run(mode);
        c.check(
            s.gap_positive_rate() >= 0.99,
            format!("{mode}: gap > 1e-9 in {}/1000 (need >= 990)", s.gap_positive),
        );
    }
    let free = run(WorldMode::Free);
    c.check(
        free.exploit_masked_rate() < 0.01,
        format!("free: exploit optimum masked in {}/1000 (need < 10)", free.exploit_masked),
    );
    c
}

fn volume_scaling() -> Criterion {
    let mut c = Criterion::new("feasible-set volume scaling", 60);
    let eps = [0.02, 0.04, 0.08, 0.16];
    for (k, family, expected) in [
        (2, VolumeFamily::Fair, 2.0),
        (3, VolumeFamily::Fair, 3.0),
        (2, VolumeFamily::Mask, 1.0),
        (10, VolumeFamily::Mask, 1.0),
    ] {
        let w = WorldModel::sample(k, 0.1, &mut rng::seeded(SEED, rng::stream_id(4, k as u64, 0))).unwrap();
        let points: Vec<(f64, f64)> = eps
            .iter()
            .map(|&e| (e, feasible_volume_estimate(&w, family, e, 1_000_000, SEED).unwrap()))
            .collect();
        let slope = log_log_slope(&points);
        c.check(
            (slope - expected).abs() <= 0.2,
            format!("{family} k={k}: slope {slope:.3}, expected {expected} ± 0.2"),
        );
    }
    c
}

fn calibration() -> Criterion {
    let mut c = Criterion::new("test calibration under the null and exactness", 300);
    let w = WorldModel::sample(4, 0.3, &mut rng::seeded(SEED, rng::stream_id(5, 0, 0))).unwrap();
    let fair = Policy::new(vec![[0.2, 0.2], [0.5, 0.5], [0.35, 0.35], [0.8, 0.8]]).unwrap();
    let (z_rej, c_rej) = (0..2000u64)
        .into_par_iter()
        .map(|s| {
            let counts = generate_batch(&w, &fair, 10_000, rng::stream_id(5, 1, s)).unwrap().counts(4).unwrap();
            (usize::from(z_test_ate(&counts).unwrap().reject), usize::from(cate_test(&counts).unwrap().reject))
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let z_rate = z_rej as f64 / 2000.0;
    let c_rate = c_rej as f64 / 2000.0;
    c.check((0.03..=0.07).contains(&z_rate), format!("z-test null rejection rate {z_rate:.4} in [0.03, 0.07]"));
    c.check(c_rate <= 0.06, format!("CATE test null rejection rate {c_rate:.4} <= 0.06"));

    let worst = (0..=10_000)
        .map(|i| {
            let s = i as f64 * 0.01;
            (chi_square_sf(s, 2).unwrap() - (-s / 2.0).exp()).abs()
        })
        .fold(0.0, f64::max);
    c.check(worst <= 1e-12, format!("chi-square df=2 max deviation from exp(-s/2) on [0, 100]: {worst:e}"));

    let (tables, mismatches) = fisher_against_enumeration(12);
    c.check(mismatches == 0, format!("Fisher exact vs exact enumeration: {mismatches} mismatches over {tables} tables"));
    c
}

/// Exact integer enumeration: tables with probability no larger than the
/// observed one, compared as integer products.
fn fisher_against_enumeration(max_margin: u64) -> (usize, usize) {
    fn choose(n: u64, k: u64) -> u128 {
        (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
    }
    let mut tables = 0;
    let mut mismatches = 0;
    for a in 0..=max_margin {
        for b in 0..=max_margin - a {
            for c in 0..=max_margin - a {
                for d in 0..=(max_margin - b).min(max_margin - c) {
                    let (r1, r2, c1) = (a + b, c + d, a + c);
                    let lo = c1.saturating_sub(r2);
                    let hi = r1.min(c1);
                    let weight = |x: u64| choose(r1, x) * choose(r2, c1 - x);
                    let observed = weight(a);
                    let tail: u128 = (lo..=hi).map(weight).filter(|&w| w <= observed).sum();
                    let exact = tail as f64 / choose(r1 + r2, c1) as f64;
                    let got = fisher_exact_two_sided(a, b, c, d);
                    tables += 1;
                    if (got - exact).abs() > 1e-12 * exact.max(1e-300) + 1e-15 {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    (tables, mismatches)
}

fn longevity() -> Criterion {
    let mut c = Criterion::new("longevity ordering on the admissions example", 600);
    let w = WorldModel::admissions_example();
    let arm = |label: &str, policy: Policy| LongevityArm { label: label.into(), world_id: 0, world: w.clone(), policy };
    let arms = vec![
        arm("fair", solve_fair(&w, 0.0).unwrap().0),
        arm("mask", solve_mask(&w, 0.0).unwrap().0),
        arm("exploit", serve_best_cell_only()),
    ];
    let config = LongevityConfig { batch_size: 500, cap: 200_000, alpha_level: 0.05 };
    let sweep = longevity_sweep(&arms, 50, &config, SEED).unwrap();
    let s = |l| sweep.summary(l).unwrap();
    let (fair, mask, exploit) = (s("fair"), s("mask"), s("exploit"));
    c.check(
        exploit.n_caught.mean < mask.n_caught.mean,
        format!("n_caught: exploit {:.1} < mask {:.1}", exploit.n_caught.mean, mask.n_caught.mean),
    );
    c.check(
        mask.n_caught.mean < fair.n_caught.mean,
        format!("n_caught: mask {:.1} < fair {:.1}", mask.n_caught.mean, fair.n_caught.mean),
    );
    c.check(
        mask.n_reject_ate.mean >= 0.5 * fair.n_reject_ate.mean,
        format!("n_reject_ate: mask {:.1} >= 0.5 x fair {:.1}", mask.n_reject_ate.mean, fair.n_reject_ate.mean),
    );
    c.check(
        mask.total_unfairness.mean > exploit.total_unfairness.mean,
        format!("unfairness: mask {:.1} > exploit {:.1}", mask.total_unfairness.mean, exploit.total_unfairness.mean),
    );
    c.check(
        mask.total_unfairness.mean > fair.total_unfairness.mean,
        format!("unfairness: mask {:.1} > fair {:.1}", mask.total_unfairness.mean, fair.total_unfairness.mean),
    );
    c
}

fn heatmap_shape() -> Criterion {
    let mut c = Criterion::new("relaxation performance shape", 300);
    let eps = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5];
    let families = [PolicyFamily::Fair, PolicyFamily::Mask, PolicyFamily::MaskFair];
    let small = 0.05;
    let mut advantage = Vec::new();
    for k in [2usize, 10] {
        let sweep = performance_sweep(k, 0.25, 1000, &eps, &families, SEED).unwrap();
        let fair = sweep.mean(PolicyFamily::Fair, small).unwrap();
        let mask = sweep.mean(PolicyFamily::Mask, small).unwrap();
        c.check(mask > fair, format!("k={k} eps={small}: mean mask {mask:.4} > mean fair {fair:.4} ({} skipped)", sweep.skipped));
        advantage.push(mask - fair);
        let curve: Vec<f64> = eps.iter().map(|&e| sweep.mean(PolicyFamily::MaskFair, e).unwrap()).collect();
        let monotone = curve.windows(2).all(|p| p[1] + 1e-9 >= p[0]);
        c.check(monotone, format!("k={k}: mask+fair curve {curve:.3?} is non-decreasing"));
    }
    c.check(
        advantage[1] > advantage[0],
        format!("mask advantage widens: k=2 {:.4} < k=10 {:.4}", advantage[0], advantage[1]),
    );
    c
}

fn main() -> ExitCode {
    let criteria: [fn() -> Criterion; 7] =
        [admissions, oracle_equivalence, genericity, volume_scaling, calibration, longevity, heatmap_shape];
    let mut failed = 0;
    for (i, build) in criteria.into_iter().enumerate() {
        if !run(i + 1, build) {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

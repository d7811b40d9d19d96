//! Two-sided Fisher exact test for a 2×2 table, by probability-mass ordering.
//!
//! With margins fixed the count in the top-left cell is hypergeometric and
//! unimodal, so the tables no more likely than the observed one form two
//! tails. Each tail boundary is found by bisection on a monotone side and the
//! tail is summed outward by the term ratio until it stops contributing.

use super::special::log_choose;

/// Tables within this relative factor of the observed probability count as
/// ties.
pub const TIE_TOLERANCE: f64 = 1e-7;

struct Hypergeometric {
    r1: u64,
    r2: u64,
    c1: u64,
    log_norm: f64,
    lo: u64,
    hi: u64,
}

impl Hypergeometric {
    fn new(r1: u64, r2: u64, c1: u64) -> Self {
        let n = r1 + r2;
        Self {
            r1,
            r2,
            c1,
            log_norm: log_choose(n, c1),
            lo: c1.saturating_sub(r2),
            hi: r1.min(c1),
        }
    }

    fn log_pmf(&self, x: u64) -> f64 {
        log_choose(self.r1, x) + log_choose(self.r2, self.c1 - x) - self.log_norm
    }

    fn mode(&self) -> u64 {
        let n = self.r1 + self.r2;
        let m = ((self.r1 + 1) as u128 * (self.c1 + 1) as u128 / (n + 2) as u128) as u64;
        m.clamp(self.lo, self.hi)
    }

    /// `P(x + 1) / P(x)`
    fn ratio_up(&self, x: u64) -> f64 {
        let num = (self.r1 - x) as f64 * (self.c1 - x) as f64;
        let den = (x + 1) as f64 * (self.r2 + x + 1 - self.c1) as f64;
        num / den
    }

    /// `P(x − 1) / P(x)`
    fn ratio_down(&self, x: u64) -> f64 {
        1.0 / self.ratio_up(x - 1)
    }

    /// Log of the mass from `start` outward, moving up or down.
    fn log_tail(&self, start: u64, upward: bool) -> f64 {
        let mut x = start;
        let mut term = 1.0;
        let mut sum = 1.0;
        loop {
            if upward {
                if x == self.hi {
                    break;
                }
                term *= self.ratio_up(x);
                x += 1;
            } else {
                if x == self.lo {
                    break;
                }
                term *= self.ratio_down(x);
                x -= 1;
            }
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        self.log_pmf(start) + sum.ln()
    }
}

/// `ln p` of the two-sided test of `[[a, b], [c, d]]`.
pub fn fisher_exact_log_p(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let (r1, r2, c1, c2) = (a + b, c + d, a + c, b + d);
    if r1 == 0 || r2 == 0 || c1 == 0 || c2 == 0 {
        return 0.0;
    }
    let h = Hypergeometric::new(r1, r2, c1);
    let threshold = h.log_pmf(a) + TIE_TOLERANCE.ln_1p();
    let mode = h.mode();
    let qualifies = |x: u64| h.log_pmf(x) <= threshold;

    // Smallest x in [mode, hi] with P(x) ≤ P(obs); P is non-increasing there.
    let upper = qualifies(h.hi).then(|| {
        let (mut lo, mut hi) = (mode, h.hi);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if qualifies(mid) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    });
    // Largest x in [lo, mode − 1] with P(x) ≤ P(obs); P is non-decreasing there.
    let lower = (mode > h.lo && qualifies(h.lo)).then(|| {
        let (mut lo, mut hi) = (h.lo, mode - 1);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if qualifies(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    });

    let tails: Vec<f64> = upper
        .map(|u| h.log_tail(u, true))
        .into_iter()
        .chain(lower.map(|l| h.log_tail(l, false)))
        .collect();
    let peak = tails.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_p = peak + tails.iter().map(|t| (t - peak).exp()).sum::<f64>().ln();
    log_p.min(0.0)
}

/// Two-sided p-value of `[[a, b], [c, d]]`, in `(0, 1]`.
pub fn fisher_exact_two_sided(a: u64, b: u64, c: u64, d: u64) -> f64 {
    fisher_exact_log_p(a, b, c, d).exp().max(f64::MIN_POSITIVE)
}

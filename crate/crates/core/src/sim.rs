//! Synthetic decision logs and the longevity experiment: how many decisions a
//! policy makes before the ATE z-test or the stratified CATE test rejects.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{solve_family, PolicyError, PolicyFamily};
use crate::rng;
use crate::stats::{cate_test_at, z_test_ate_at, StatsError, StratifiedCounts};
use crate::world::{Policy, WorldError, WorldModel};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("batch size must be at least 1 and no larger than the cap ({batch_size} vs {cap})")]
    BadSchedule { batch_size: u64, cap: u64 },
    #[error("need at least {min} replications, got {got}")]
    TooFewReplications { min: usize, got: usize },
}

/// One simulated unit. `y` is observed only for positive decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub x: usize,
    pub p: u8,
    #[serde(with = "bit")]
    pub d: bool,
    #[serde(with = "opt_bit")]
    pub y: Option<bool>,
}

mod bit {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        Ok(u8::deserialize(d)? != 0)
    }
}

mod opt_bit {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
        match b {
            Some(v) => s.serialize_some(&u8::from(*v)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
        Ok(Option::<u8>::deserialize(d)?.map(|v| v != 0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecisionBatch {
    pub records: Vec<DecisionRecord>,
}

impl DecisionBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self, k: usize) -> Result<StratifiedCounts, StatsError> {
        let mut counts = StratifiedCounts::new(k);
        for r in &self.records {
            counts.record(r.x, usize::from(r.p), r.d)?;
        }
        Ok(counts)
    }

    /// Writes `x,p,d,y` rows; `y` is empty when `d = 0`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws `(x, p) ~ π`, `d ~ Bernoulli(α[x][p])`, and `y ~ Bernoulli(γ[x][p])`
/// when `d = 1`.
pub struct UnitSampler {
    cells: WeightedIndex<f64>,
    alpha: Vec<[f64; 2]>,
    gamma: Vec<[f64; 2]>,
}

impl UnitSampler {
    pub fn new(model: &WorldModel, policy: &Policy) -> Result<Self, WorldError> {
        if policy.k() != model.k() {
            return Err(WorldError::DimensionMismatch {
                field: "alpha",
                expected: model.k(),
                found: policy.k(),
            });
        }
        let weights = model.pi().iter().flatten().copied();
        let cells = WeightedIndex::new(weights).expect("a validated joint has positive mass");
        Ok(Self {
            cells,
            alpha: policy.alpha().to_vec(),
            gamma: model.gamma().to_vec(),
        })
    }

    fn draw_decision<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize, bool) {
        let cell = self.cells.sample(rng);
        let (x, p) = (cell / 2, cell % 2);
        (x, p, rng.random::<f64>() < self.alpha[x][p])
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DecisionRecord {
        let (x, p, d) = self.draw_decision(rng);
        let y = d.then(|| rng.random::<f64>() < self.gamma[x][p]);
        DecisionRecord { x, p: p as u8, d, y }
    }
}

pub fn generate_batch(model: &WorldModel, policy: &Policy, n: usize, seed: u64) -> Result<DecisionBatch, SimError> {
    let sampler = UnitSampler::new(model, policy)?;
    let mut rng = rng::seeded(seed, 0);
    Ok(DecisionBatch {
        records: (0..n).map(|_| sampler.draw(&mut rng)).collect(),
    })
}

/// Batch size, sample-size cap and test level of one longevity run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongevityConfig {
    pub batch_size: u64,
    pub cap: u64,
    pub alpha_level: f64,
}

impl Default for LongevityConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            cap: 200_000,
            alpha_level: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongevityOutcome {
    /// Sample size at the first z-test rejection, or the cap.
    pub n_reject_ate: u64,
    /// Sample size at the first CATE-test rejection, or the cap.
    pub n_reject_cate: u64,
    pub n_caught: u64,
    /// `Σ |α[x][1] − α[x][0]|` over the first `n_caught` arrivals.
    pub total_unfairness: f64,
    pub ate_rejected: bool,
    pub cate_rejected: bool,
}

fn rejects(report: Result<crate::stats::TestReport, StatsError>) -> bool {
    // Too little data to form a test is not a rejection.
    report.map(|r| r.reject).unwrap_or(false)
}

fn longevity_with<R: Rng + ?Sized>(
    sampler: &UnitSampler,
    disparity: &[f64],
    config: &LongevityConfig,
    rng: &mut R,
) -> LongevityOutcome {
    let k = disparity.len();
    let mut counts = StratifiedCounts::new(k);
    let mut arrivals = vec![0u64; k];
    let mut n = 0;
    let mut ate_at = None;
    let mut cate_at = None;
    let mut unfairness_at_catch = None;
    let unfairness = |arrivals: &[u64]| -> f64 { arrivals.iter().zip(disparity).map(|(&a, g)| a as f64 * g).sum() };

    while n < config.cap && (ate_at.is_none() || cate_at.is_none()) {
        let step = config.batch_size.min(config.cap - n);
        for _ in 0..step {
            let (x, p, d) = sampler.draw_decision(rng);
            counts.record(x, p, d).expect("sampled cell is in range");
            arrivals[x] += 1;
        }
        n += step;
        if ate_at.is_none() && rejects(z_test_ate_at(&counts, config.alpha_level)) {
            ate_at = Some(n);
        }
        if cate_at.is_none() && rejects(cate_test_at(&counts, config.alpha_level)) {
            cate_at = Some(n);
        }
        if unfairness_at_catch.is_none() && (ate_at.is_some() || cate_at.is_some()) {
            unfairness_at_catch = Some(unfairness(&arrivals));
        }
    }
    let n_reject_ate = ate_at.unwrap_or(config.cap);
    let n_reject_cate = cate_at.unwrap_or(config.cap);
    LongevityOutcome {
        n_reject_ate,
        n_reject_cate,
        n_caught: n_reject_ate.min(n_reject_cate),
        total_unfairness: unfairness_at_catch.unwrap_or_else(|| unfairness(&arrivals)),
        ate_rejected: ate_at.is_some(),
        cate_rejected: cate_at.is_some(),
    }
}

fn check_schedule(config: &LongevityConfig) -> Result<(), SimError> {
    if config.batch_size == 0 || config.cap < config.batch_size {
        return Err(SimError::BadSchedule {
            batch_size: config.batch_size,
            cap: config.cap,
        });
    }
    if !(config.alpha_level > 0.0 && config.alpha_level < 1.0) {
        return Err(StatsError::BadLevel(config.alpha_level).into());
    }
    Ok(())
}

fn abs_disparity(policy: &Policy) -> Vec<f64> {
    policy.cate_gaps().iter().map(|g| g.abs()).collect()
}

/// Feeds the policy batches of decisions, re-running both tests on the
/// cumulative counts after each batch.
pub fn run_longevity(
    model: &WorldModel,
    policy: &Policy,
    config: &LongevityConfig,
    seed: u64,
) -> Result<LongevityOutcome, SimError> {
    check_schedule(config)?;
    let sampler = UnitSampler::new(model, policy)?;
    Ok(longevity_with(&sampler, &abs_disparity(policy), config, &mut rng::seeded(seed, 0)))
}

/// One `(world, policy)` pair of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongevityArm {
    pub label: String,
    pub world_id: usize,
    pub world: WorldModel,
    pub policy: Policy,
}

/// Arms for the optimal policy of each family (at `ε = 0`) on each world.
pub fn family_arms(worlds: &[WorldModel], families: &[PolicyFamily]) -> Result<Vec<LongevityArm>, SimError> {
    let mut arms = Vec::with_capacity(worlds.len() * families.len());
    for (world_id, world) in worlds.iter().enumerate() {
        for &family in families {
            let (policy, _) = solve_family(world, family, 0.0)?;
            arms.push(LongevityArm {
                label: family.to_string(),
                world_id,
                world: world.clone(),
                policy,
            });
        }
    }
    Ok(arms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongevityRow {
    pub policy: String,
    pub world_id: usize,
    pub rep: usize,
    pub n_reject_ate: u64,
    pub n_reject_cate: u64,
    pub n_caught: u64,
    pub total_unfairness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            se: (var / n).sqrt(),
        }
    }
}

/// Per-label aggregate over worlds and replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongevitySummary {
    pub policy: String,
    pub runs: usize,
    pub n_reject_ate: MeanSe,
    pub n_reject_cate: MeanSe,
    pub n_caught: MeanSe,
    pub total_unfairness: MeanSe,
    /// Runs where neither test rejected before the cap.
    pub censored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongevitySweep {
    pub rows: Vec<LongevityRow>,
    pub summaries: Vec<LongevitySummary>,
}

impl LongevitySweep {
    pub fn summary(&self, label: &str) -> Option<&LongevitySummary> {
        self.summaries.iter().find(|s| s.policy == label)
    }

    pub fn write_rows_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every arm `replications` times. Run `(a, r)` draws from stream
/// `(a, r)` of `seed`, so results do not depend on thread count.
pub fn longevity_sweep(
    arms: &[LongevityArm],
    replications: usize,
    config: &LongevityConfig,
    seed: u64,
) -> Result<LongevitySweep, SimError> {
    if replications < 2 {
        return Err(SimError::TooFewReplications { min: 2, got: replications });
    }
    check_schedule(config)?;
    let prepared = arms
        .iter()
        .map(|arm| Ok((UnitSampler::new(&arm.world, &arm.policy)?, abs_disparity(&arm.policy))))
        .collect::<Result<Vec<_>, SimError>>()?;

    let outcomes: Vec<(usize, usize, LongevityOutcome, bool)> = (0..arms.len() * replications)
        .into_par_iter()
        .map(|job| {
            let (a, rep) = (job / replications, job % replications);
            let (sampler, disparity) = &prepared[a];
            let mut rng = rng::seeded(seed, rng::stream_id(a as u64, rep as u64, 0));
            let out = longevity_with(sampler, disparity, config, &mut rng);
            let censored = !out.ate_rejected && !out.cate_rejected;
            (a, rep, out, censored)
        })
        .collect();

    let rows: Vec<LongevityRow> = outcomes
        .iter()
        .map(|(a, rep, o, _)| LongevityRow {
            policy: arms[*a].label.clone(),
            world_id: arms[*a].world_id,
            rep: *rep,
            n_reject_ate: o.n_reject_ate,
            n_reject_cate: o.n_reject_cate,
            n_caught: o.n_caught,
            total_unfairness: o.total_unfairness,
        })
        .collect();

    let mut labels: Vec<&str> = Vec::new();
    for arm in arms {
        if !labels.contains(&arm.label.as_str()) {
            labels.push(&arm.label);
        }
    }
    let summaries = labels
        .into_iter()
        .map(|label| {
            let mine: Vec<&(usize, usize, LongevityOutcome, bool)> =
                outcomes.iter().filter(|(a, ..)| arms[*a].label == label).collect();
            let column = |f: fn(&LongevityOutcome) -> f64| MeanSe::of(&mine.iter().map(|(_, _, o, _)| f(o)).collect::<Vec<_>>());
            LongevitySummary {
                policy: label.to_string(),
                runs: mine.len(),
                n_reject_ate: column(|o| o.n_reject_ate as f64),
                n_reject_cate: column(|o| o.n_reject_cate as f64),
                n_caught: column(|o| o.n_caught as f64),
                total_unfairness: column(|o| o.total_unfairness),
                censored: mine.iter().filter(|r| r.3).count(),
            }
        })
        .collect();
    Ok(LongevitySweep { rows, summaries })
}

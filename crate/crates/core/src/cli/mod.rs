//! Command-line interface.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::ingest::{
    decision_counts, estimate_world, load_table, quantile_stratify, EmptyCellPolicy, EstimateOptions, IngestError,
    ProtectedSpec, Schema, StratumMap,
};
use crate::lp::{solve_family, LpStatus, PolicyError, PolicyFamily};
use crate::sim::{family_arms, generate_batch, longevity_sweep, LongevityArm, LongevityConfig, SimError};
use crate::stats::{cate_test_at, z_test_ate_at, StatsError, TestReport};
use crate::theory::{
    feasible_volume_estimate, genericity_experiment, log_log_slope, performance_sweep, TheoryError, VolumeFamily,
    WorldMode,
};
use crate::world::{Policy, PolicyReport, WorldError, WorldModel};
use crate::rng;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 when a program has no optimum, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        let status = match self {
            CliError::Policy(PolicyError::NotOptimal(s)) => Some(s),
            CliError::Theory(TheoryError::Policy(PolicyError::NotOptimal(s))) => Some(s),
            CliError::Sim(SimError::Policy(PolicyError::NotOptimal(s))) => Some(s),
            _ => None,
        };
        match status {
            Some(LpStatus::Infeasible | LpStatus::Unbounded) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "causal-masking", version, about = "Fair and ATE-masking policy optimization, detection tests and simulations")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Significance level of the detection tests.
    #[arg(long, global = true, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one policy program on a world file.
    Solve {
        world: PathBuf,
        /// exploit, fair, mask or mask+fair
        #[arg(long, default_value = "mask")]
        family: PolicyFamily,
        /// Tolerance of the family's constraint (the fairness band for mask+fair).
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
    },
    /// Normalized performance over an ε grid on sampled worlds.
    Sweep {
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0.25)]
        rho: f64,
        #[arg(long, default_value_t = 1000)]
        n_worlds: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.02,0.05,0.1,0.2,0.5")]
        eps: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "fair,mask,mask+fair")]
        families: Vec<PolicyFamily>,
    },
    /// How often masking beats fairness on sampled worlds.
    Genericity {
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0.1)]
        rho: f64,
        #[arg(long, default_value_t = 1000)]
        n_worlds: usize,
        #[arg(long, value_delimiter = ',', default_value = "free,independent_homogeneous,confounded_only,heterogeneous_only")]
        modes: Vec<WorldMode>,
    },
    /// Monte Carlo volume of the ε-fair or ε-mask constraint set.
    Volume {
        #[arg(long, value_delimiter = ',', default_value = "2,3")]
        k: Vec<usize>,
        #[arg(long, default_value = "fair")]
        family: VolumeFamily,
        #[arg(long, value_delimiter = ',', default_value = "0.02,0.04,0.08,0.16")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        /// Use this world's stratum weights instead of a sampled one.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Sample sizes until the detection tests reject each policy.
    Longevity {
        /// World files; each gets the optimal policy of every family.
        #[arg(long = "world", required = true)]
        worlds: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "fair,mask,exploit")]
        families: Vec<PolicyFamily>,
        /// Extra `label=policy.json` arms, run on every world.
        #[arg(long = "policy")]
        policies: Vec<LabeledPath>,
        #[arg(long, default_value_t = 50)]
        replications: usize,
        #[arg(long, default_value_t = 500)]
        batch: u64,
        #[arg(long, default_value_t = 200_000)]
        cap: u64,
    },
    /// Run both detection tests on a decision log.
    Audit {
        data: PathBuf,
        #[command(flatten)]
        table: TableArgs,
        /// Column holding the 0/1 decision.
        #[arg(long)]
        decision: String,
    },
    /// Draw a world (or print the two-stratum admissions example).
    SampleWorld {
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0.1)]
        rho: f64,
        #[arg(long, default_value = "free")]
        mode: WorldMode,
        #[arg(long, conflicts_with_all = ["k", "mode"])]
        admissions_example: bool,
    },
    /// Estimate a world from a CSV file.
    Ingest {
        data: PathBuf,
        #[command(flatten)]
        table: TableArgs,
        #[arg(long)]
        outcome: String,
        #[arg(long, default_value_t = 0.1)]
        rho: f64,
        /// Store 1 − E[Y | x, p] so the programs minimize the outcome.
        #[arg(long)]
        minimize: bool,
        #[arg(long)]
        drop_empty_cells: bool,
        /// Write the world here instead of stdout.
        #[arg(long)]
        world_out: Option<PathBuf>,
        #[arg(long)]
        map_out: Option<PathBuf>,
    },
    /// Write a synthetic decision log as `x,p,d,y` CSV.
    Simulate {
        world: PathBuf,
        /// Policy file; otherwise the optimal policy of `--family`.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value = "mask")]
        family: PolicyFamily,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
    },
}

#[derive(Debug, Args)]
pub struct TableArgs {
    /// Covariate columns; suffix `:cat` keeps a numeric column's values as categories.
    #[arg(long, value_delimiter = ',', required = true)]
    pub covariates: Vec<String>,
    /// Quantile bins per covariate; the last value repeats.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    pub bins: Vec<usize>,
    /// `column` with 0/1 values, or `column=value:0,value:1`.
    #[arg(long)]
    pub protected: ProtectedSpec,
}

/// `label=path`
#[derive(Debug, Clone)]
pub struct LabeledPath {
    pub label: String,
    pub path: PathBuf,
}

impl FromStr for LabeledPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('=') {
            Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok(Self { label: label.into(), path: path.into() }),
            _ => Err(format!("expected label=path, got `{s}`")),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| CliError::Parse { path: path.into(), source })
}

fn write_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_csv<T: Serialize>(out: &mut dyn Write, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    family: PolicyFamily,
    eps: f64,
    status: &'static str,
    alpha: &'a [[f64; 2]],
    report: &'a PolicyReport,
    success_rate: f64,
}

fn cmd_solve(cli: &Cli, out: &mut dyn Write, world: &Path, family: PolicyFamily, eps: f64) -> Result<(), CliError> {
    let model: WorldModel = read_json(world)?;
    let (policy, report) = solve_family(&model, family, eps)?;
    match cli.format {
        Format::Json => write_json(
            out,
            &SolveOutput {
                family,
                eps,
                status: "optimal",
                alpha: policy.alpha(),
                report: &report,
                success_rate: report.success_rate(),
            },
        ),
        Format::Csv => {
            let mut header = vec!["family", "eps", "objective", "ate", "participation", "success_rate", "max_abs_cate"]
                .into_iter()
                .map(String::from)
                .collect::<Vec<_>>();
            let mut row = vec![
                family.to_string(),
                eps.to_string(),
                report.objective.to_string(),
                report.ate.to_string(),
                report.participation.to_string(),
                report.success_rate().to_string(),
                report.max_abs_cate.to_string(),
            ];
            for (x, a) in policy.alpha().iter().enumerate() {
                for (p, v) in a.iter().enumerate() {
                    header.push(format!("alpha_{x}_{p}"));
                    row.push(v.to_string());
                }
            }
            let mut w = csv::Writer::from_writer(out);
            w.write_record(&header)?;
            w.write_record(&row)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn cmd_sweep(
    cli: &Cli,
    out: &mut dyn Write,
    k: usize,
    rho: f64,
    n_worlds: usize,
    eps: &[f64],
    families: &[PolicyFamily],
) -> Result<(), CliError> {
    let sweep = performance_sweep(k, rho, n_worlds, eps, families, cli.seed)?;
    eprintln!("skipped {} of {} worlds with no exploit-over-fair gap", sweep.skipped, sweep.n_worlds);
    match cli.format {
        Format::Json => write_json(out, &sweep),
        Format::Csv => write_csv(out, &sweep.rows),
    }
}

#[derive(Serialize)]
struct GenericityRow {
    mode: WorldMode,
    k: usize,
    rho: f64,
    n_worlds: usize,
    gap_positive_rate: f64,
    exploit_fair_rate: f64,
    exploit_masked_rate: f64,
    mask_fair_rate: f64,
    max_gap: f64,
}

fn cmd_genericity(cli: &Cli, out: &mut dyn Write, k: usize, rho: f64, n_worlds: usize, modes: &[WorldMode]) -> Result<(), CliError> {
    let summaries = modes
        .iter()
        .map(|&mode| genericity_experiment(k, rho, n_worlds, mode, cli.seed))
        .collect::<Result<Vec<_>, _>>()?;
    match cli.format {
        Format::Json => write_json(out, &summaries),
        Format::Csv => write_csv(
            out,
            summaries.iter().map(|s| GenericityRow {
                mode: s.mode,
                k: s.k,
                rho: s.rho,
                n_worlds: s.n_worlds,
                gap_positive_rate: s.gap_positive_rate(),
                exploit_fair_rate: s.exploit_fair_rate(),
                exploit_masked_rate: s.exploit_masked_rate(),
                mask_fair_rate: s.mask_fair_rate(),
                max_gap: s.max_gap,
            }),
        ),
    }
}

#[derive(Serialize)]
struct VolumeRow {
    k: usize,
    family: String,
    eps: f64,
    acceptance: f64,
    slope: f64,
}

fn cmd_volume(
    cli: &Cli,
    out: &mut dyn Write,
    ks: &[usize],
    family: VolumeFamily,
    eps: &[f64],
    samples: usize,
    world: Option<&Path>,
) -> Result<(), CliError> {
    let fixed: Option<WorldModel> = world.map(read_json).transpose()?;
    let mut rows = Vec::new();
    let worlds: Vec<WorldModel> = match fixed {
        Some(w) => vec![w],
        None => ks
            .iter()
            .map(|&k| WorldModel::sample(k, 0.1, &mut rng::seeded(cli.seed, k as u64)))
            .collect::<Result<_, _>>()?,
    };
    for model in &worlds {
        let points = eps
            .iter()
            .map(|&e| Ok((e, feasible_volume_estimate(model, family, e, samples, cli.seed)?)))
            .collect::<Result<Vec<_>, TheoryError>>()?;
        let slope = if points.iter().all(|p| p.1 > 0.0) && points.len() > 1 { log_log_slope(&points) } else { f64::NAN };
        rows.extend(points.iter().map(|&(eps, acceptance)| VolumeRow {
            k: model.k(),
            family: family.to_string(),
            eps,
            acceptance,
            slope,
        }));
    }
    match cli.format {
        Format::Json => write_json(out, &rows),
        Format::Csv => write_csv(out, &rows),
    }
}

#[derive(Serialize)]
struct LongevityOutput<'a> {
    config: LongevityConfig,
    replications: usize,
    summaries: &'a [crate::sim::LongevitySummary],
    rows: &'a [crate::sim::LongevityRow],
}

#[allow(clippy::too_many_arguments)]
fn cmd_longevity(
    cli: &Cli,
    out: &mut dyn Write,
    world_paths: &[PathBuf],
    families: &[PolicyFamily],
    policies: &[LabeledPath],
    replications: usize,
    batch: u64,
    cap: u64,
) -> Result<(), CliError> {
    let worlds = world_paths.iter().map(|p| read_json(p)).collect::<Result<Vec<WorldModel>, _>>()?;
    let mut arms = family_arms(&worlds, families)?;
    for labeled in policies {
        let policy: Policy = read_json(&labeled.path)?;
        for (world_id, world) in worlds.iter().enumerate() {
            arms.push(LongevityArm { label: labeled.label.clone(), world_id, world: world.clone(), policy: policy.clone() });
        }
    }
    if arms.is_empty() {
        return Err(CliError::Usage("no policies to run".into()));
    }
    let config = LongevityConfig { batch_size: batch, cap, alpha_level: cli.alpha };
    let sweep = longevity_sweep(&arms, replications, &config, cli.seed)?;
    for s in &sweep.summaries {
        eprintln!(
            "{}: n_caught {:.0} ± {:.0}, total unfairness {:.1} ± {:.1}, {} of {} runs never caught",
            s.policy, s.n_caught.mean, s.n_caught.se, s.total_unfairness.mean, s.total_unfairness.se, s.censored, s.runs
        );
    }
    match cli.format {
        Format::Json => write_json(
            out,
            &LongevityOutput { config, replications, summaries: &sweep.summaries, rows: &sweep.rows },
        ),
        Format::Csv => Ok(sweep.write_rows_csv(out)?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "FAIR-CONSISTENT")]
    FairConsistent,
    #[serde(rename = "MASKED-SUSPECT")]
    MaskedSuspect,
    #[serde(rename = "UNFAIR")]
    Unfair,
}

impl Verdict {
    pub fn from_reports(ate: &TestReport, cate: &TestReport) -> Self {
        match (ate.reject, cate.reject) {
            (true, _) => Verdict::Unfair,
            (false, true) => Verdict::MaskedSuspect,
            (false, false) => Verdict::FairConsistent,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::FairConsistent => "FAIR-CONSISTENT",
            Verdict::MaskedSuspect => "MASKED-SUSPECT",
            Verdict::Unfair => "UNFAIR",
        }
    }
}

/// Splits `name:cat` suffixes off covariate arguments.
fn covariate_names(args: &TableArgs) -> (Vec<String>, Vec<String>) {
    let mut names = Vec::new();
    let mut categorical = Vec::new();
    for c in &args.covariates {
        match c.strip_suffix(":cat") {
            Some(name) => {
                names.push(name.to_string());
                categorical.push(name.to_string());
            }
            None => names.push(c.clone()),
        }
    }
    (names, categorical)
}

fn load_stratified(
    data: &Path,
    args: &TableArgs,
    outcome: &str,
) -> Result<(crate::ingest::Table, crate::ingest::Stratification), CliError> {
    let (names, categorical) = covariate_names(args);
    let schema = Schema { covariates: names.clone(), protected: args.protected.clone(), outcome: outcome.to_string() };
    let mut table = load_table(data, &schema)?;
    for name in &categorical {
        table.force_categorical(name)?;
    }
    if table.dropped.total() > 0 {
        eprintln!(
            "dropped {} rows ({} incomplete, {} with an unmapped group)",
            table.dropped.total(),
            table.dropped.missing,
            table.dropped.unmapped
        );
    }
    let strat = quantile_stratify(&table, &names, &args.bins)?;
    for w in &strat.warnings {
        eprintln!("warning: {w}");
    }
    Ok((table, strat))
}

#[derive(Serialize)]
struct AuditOutput {
    rows: usize,
    strata: usize,
    z_test: TestReport,
    cate_test: TestReport,
    verdict: Verdict,
}

#[derive(Serialize)]
struct AuditRow {
    test: &'static str,
    statistic: f64,
    p_value: f64,
    df: u64,
    reject: bool,
    strata_used: usize,
    verdict: &'static str,
}

fn cmd_audit(cli: &Cli, out: &mut dyn Write, data: &Path, args: &TableArgs, decision: &str) -> Result<(), CliError> {
    let (table, strat) = load_stratified(data, args, decision)?;
    let counts = decision_counts(&table, &strat)?;
    let z = z_test_ate_at(&counts, cli.alpha)?;
    let c = cate_test_at(&counts, cli.alpha)?;
    let verdict = Verdict::from_reports(&z, &c);
    eprintln!("verdict: {}", verdict.as_str());
    match cli.format {
        Format::Json => write_json(out, &AuditOutput { rows: table.len(), strata: strat.k(), z_test: z, cate_test: c, verdict }),
        Format::Csv => write_csv(
            out,
            [("ate_z", z), ("cate_fisher", c)].map(|(test, r)| AuditRow {
                test,
                statistic: r.statistic,
                p_value: r.p_value,
                df: r.df,
                reject: r.reject,
                strata_used: r.strata_used,
                verdict: verdict.as_str(),
            }),
        ),
    }
}

fn cmd_sample_world(cli: &Cli, out: &mut dyn Write, k: usize, rho: f64, mode: WorldMode, example: bool) -> Result<(), CliError> {
    let world = if example {
        WorldModel::admissions_example().with_rho(rho)?
    } else {
        mode.sample(k, rho, &mut rng::seeded(cli.seed, 0))?
    };
    write_json(out, &world)
}

#[allow(clippy::too_many_arguments)]
fn cmd_ingest(
    out: &mut dyn Write,
    data: &Path,
    args: &TableArgs,
    outcome: &str,
    rho: f64,
    minimize: bool,
    drop_empty_cells: bool,
    world_out: Option<&Path>,
    map_out: Option<&Path>,
) -> Result<(), CliError> {
    let (table, strat) = load_stratified(data, args, outcome)?;
    let options = EstimateOptions {
        empty_cells: if drop_empty_cells { EmptyCellPolicy::Drop } else { EmptyCellPolicy::Fallback },
        minimize,
    };
    let est = estimate_world(&table, &strat, rho, options)?;
    for w in &est.warnings {
        eprintln!("warning: {w}");
    }
    if minimize {
        eprintln!("rewards store 1 - mean({outcome}); maximizing them minimizes the outcome");
    }
    match world_out {
        Some(path) => fs::write(path, serde_json::to_string_pretty(&est.world)? + "\n")?,
        None => write_json(out, &est.world)?,
    }
    if let Some(path) = map_out {
        let mut map = StratumMap::new(&table, &strat);
        map.strata.retain(|s| est.strata.contains(&s.stratum));
        fs::write(path, serde_json::to_string_pretty(&map)? + "\n")?;
    }
    Ok(())
}

fn cmd_simulate(cli: &Cli, out: &mut dyn Write, world: &Path, policy: Option<&Path>, family: PolicyFamily, n: usize) -> Result<(), CliError> {
    let model: WorldModel = read_json(world)?;
    let policy = match policy {
        Some(p) => read_json(p)?,
        None => solve_family(&model, family, 0.0)?.0,
    };
    let batch = generate_batch(&model, &policy, n, cli.seed)?;
    batch.write_csv(out)?;
    Ok(())
}

/// Runs a parsed command, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    if !(cli.alpha > 0.0 && cli.alpha < 1.0) {
        return Err(StatsError::BadLevel(cli.alpha).into());
    }
    match &cli.command {
        Command::Solve { world, family, eps } => cmd_solve(cli, out, world, *family, *eps),
        Command::Sweep { k, rho, n_worlds, eps, families } => cmd_sweep(cli, out, *k, *rho, *n_worlds, eps, families),
        Command::Genericity { k, rho, n_worlds, modes } => cmd_genericity(cli, out, *k, *rho, *n_worlds, modes),
        Command::Volume { k, family, eps, samples, world } => cmd_volume(cli, out, k, *family, eps, *samples, world.as_deref()),
        Command::Longevity { worlds, families, policies, replications, batch, cap } => {
            cmd_longevity(cli, out, worlds, families, policies, *replications, *batch, *cap)
        }
        Command::Audit { data, table, decision } => cmd_audit(cli, out, data, table, decision),
        Command::SampleWorld { k, rho, mode, admissions_example } => cmd_sample_world(cli, out, *k, *rho, *mode, *admissions_example),
        Command::Ingest { data, table, outcome, rho, minimize, drop_empty_cells, world_out, map_out } => cmd_ingest(
            out,
            data,
            table,
            outcome,
            *rho,
            *minimize,
            *drop_empty_cells,
            world_out.as_deref(),
            map_out.as_deref(),
        ),
        Command::Simulate { world, policy, family, n } => cmd_simulate(cli, out, world, policy.as_deref(), *family, *n),
    }
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(&cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! Tabular data to strata and worlds.
//!
//! Numeric covariates are cut at nearest-rank empirical quantiles into
//! left-closed bins (the last bin is closed on both sides); categorical
//! covariates keep their levels. A stratum is an occupied cell of the cross
//! product, numbered in lexicographic order of its bin indices, so the
//! assignment does not depend on row order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::StratifiedCounts;
use crate::world::{WorldError, WorldModel};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read table: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` is not in the header")]
    MissingColumn(String),
    #[error("protected column has value `{value}`, which is not 0/1 and has no mapping")]
    NonBinaryProtected { value: String },
    #[error("protected mapping `{0}` should look like `column=value:0,other:1`")]
    BadMapping(String),
    #[error("no rows left after dropping incomplete ones")]
    EmptyTable,
    #[error("row {row}: `{column}` value `{value}` is not a number in [0, 1]")]
    BadOutcome { row: usize, column: String, value: String },
    #[error("row {row}: decision must be 0 or 1 for counting, got {value}")]
    NonBinaryDecision { row: usize, value: f64 },
    #[error("covariate `{0}` is not part of the table")]
    UnknownCovariate(String),
    #[error("covariate `{0}` needs at least one bin")]
    NoBins(String),
    #[error("columns have {expected} and {found} rows")]
    RaggedColumns { expected: usize, found: usize },
    #[error(transparent)]
    World(#[from] WorldError),
}

/// `column` or `column=value:0,value:1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectedSpec {
    pub column: String,
    pub mapping: Option<BTreeMap<String, u8>>,
}

impl FromStr for ProtectedSpec {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || IngestError::BadMapping(s.to_string());
        let Some((column, rest)) = s.split_once('=') else {
            if s.is_empty() {
                return Err(bad());
            }
            return Ok(Self { column: s.to_string(), mapping: None });
        };
        let mut mapping = BTreeMap::new();
        for pair in rest.split(',') {
            let (value, group) = pair.rsplit_once(':').ok_or_else(bad)?;
            let group = match group.trim() {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad()),
            };
            if mapping.insert(value.to_string(), group).is_some() {
                return Err(bad());
            }
        }
        if column.is_empty() || mapping.is_empty() {
            return Err(bad());
        }
        Ok(Self { column: column.to_string(), mapping: Some(mapping) })
    }
}

impl ProtectedSpec {
    fn group_of(&self, value: &str) -> Result<Option<u8>, IngestError> {
        match &self.mapping {
            Some(map) => Ok(map.get(value).copied()),
            None => match value.trim() {
                "0" => Ok(Some(0)),
                "1" => Ok(Some(1)),
                other => Err(IngestError::NonBinaryProtected { value: other.to_string() }),
            },
        }
    }
}

/// Which columns to read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub covariates: Vec<String>,
    pub protected: ProtectedSpec,
    /// Outcome or decision column, numeric in `[0, 1]`.
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "values", rename_all = "snake_case")]
pub enum ColumnValues {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl ColumnValues {
    pub fn len(&self) -> usize {
        match self {
            ColumnValues::Numeric(v) => v.len(),
            ColumnValues::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Numeric when every value parses as a finite number.
    fn infer(raw: Vec<String>) -> Self {
        let parsed: Option<Vec<f64>> = raw
            .iter()
            .map(|s| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        match parsed {
            Some(v) => ColumnValues::Numeric(v),
            None => ColumnValues::Categorical(raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: ColumnValues,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    /// A declared field was empty.
    pub missing: usize,
    /// The protected value had no mapping.
    pub unmapped: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.missing + self.unmapped
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub covariates: Vec<Column>,
    pub protected: Vec<u8>,
    pub outcome: Vec<f64>,
    pub dropped: DropCounts,
}

impl Table {
    pub fn new(covariates: Vec<Column>, protected: Vec<u8>, outcome: Vec<f64>) -> Result<Self, IngestError> {
        let n = protected.len();
        for len in covariates.iter().map(|c| c.values.len()).chain([outcome.len()]) {
            if len != n {
                return Err(IngestError::RaggedColumns { expected: n, found: len });
            }
        }
        if let Some(&bad) = protected.iter().find(|&&p| p > 1) {
            return Err(IngestError::NonBinaryProtected { value: bad.to_string() });
        }
        if let Some((row, v)) = outcome.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(IngestError::BadOutcome { row, column: "outcome".into(), value: v.to_string() });
        }
        if n == 0 {
            return Err(IngestError::EmptyTable);
        }
        Ok(Self {
            covariates,
            protected,
            outcome,
            dropped: DropCounts::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.protected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protected.is_empty()
    }

    pub fn covariate(&self, name: &str) -> Option<&Column> {
        self.covariates.iter().find(|c| c.name == name)
    }

    /// Treats a numeric covariate's values as category labels.
    pub fn force_categorical(&mut self, name: &str) -> Result<(), IngestError> {
        let column = self
            .covariates
            .iter_mut()
            .find(|c| c.name == name)
            .ok_or_else(|| IngestError::UnknownCovariate(name.to_string()))?;
        if let ColumnValues::Numeric(values) = &column.values {
            column.values = ColumnValues::Categorical(values.iter().map(f64::to_string).collect());
        }
        Ok(())
    }
}

pub fn load_table(path: impl AsRef<Path>, schema: &Schema) -> Result<Table, IngestError> {
    let reader = csv::ReaderBuilder::new().from_path(path)?;
    read_table(reader, schema)
}

pub fn load_table_from_reader<R: Read>(input: R, schema: &Schema) -> Result<Table, IngestError> {
    read_table(csv::ReaderBuilder::new().from_reader(input), schema)
}

fn read_table<R: Read>(mut reader: csv::Reader<R>, schema: &Schema) -> Result<Table, IngestError> {
    let headers = reader.headers()?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let cov_idx = schema.covariates.iter().map(|c| index(c)).collect::<Result<Vec<_>, _>>()?;
    let prot_idx = index(&schema.protected.column)?;
    let out_idx = index(&schema.outcome)?;

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); cov_idx.len()];
    let mut protected = Vec::new();
    let mut outcome = Vec::new();
    let mut dropped = DropCounts::default();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).map(str::trim).unwrap_or("");
        let declared = cov_idx.iter().chain([&prot_idx, &out_idx]);
        if declared.map(|&i| field(i)).any(str::is_empty) {
            dropped.missing += 1;
            continue;
        }
        let Some(group) = schema.protected.group_of(field(prot_idx))? else {
            dropped.unmapped += 1;
            continue;
        };
        let y = field(out_idx)
            .parse::<f64>()
            .ok()
            .filter(|v| (0.0..=1.0).contains(v))
            .ok_or_else(|| IngestError::BadOutcome {
                row,
                column: schema.outcome.clone(),
                value: field(out_idx).to_string(),
            })?;
        for (col, &i) in raw.iter_mut().zip(&cov_idx) {
            col.push(field(i).to_string());
        }
        protected.push(group);
        outcome.push(y);
    }
    if protected.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    let covariates = schema
        .covariates
        .iter()
        .zip(raw)
        .map(|(name, values)| Column { name: name.clone(), values: ColumnValues::infer(values) })
        .collect();
    Ok(Table { covariates, protected, outcome, dropped })
}

/// How one covariate was discretized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binning {
    /// Bin `b` covers `[cuts[b − 1], cuts[b])`; the outer bins are open-ended.
    Quantile { name: String, requested: usize, cuts: Vec<f64> },
    Categorical { name: String, levels: Vec<String> },
}

impl Binning {
    pub fn name(&self) -> &str {
        match self {
            Binning::Quantile { name, .. } | Binning::Categorical { name, .. } => name,
        }
    }

    pub fn bins(&self) -> usize {
        match self {
            Binning::Quantile { cuts, .. } => cuts.len() + 1,
            Binning::Categorical { levels, .. } => levels.len(),
        }
    }

    fn label(&self, bin: usize) -> String {
        match self {
            Binning::Quantile { cuts, .. } => {
                let lo = bin.checked_sub(1).map(|i| cuts[i].to_string()).unwrap_or_else(|| "-inf".into());
                match cuts.get(bin) {
                    Some(hi) => format!("[{lo}, {hi})"),
                    None => format!("[{lo}, inf]"),
                }
            }
            Binning::Categorical { levels, .. } => levels[bin].clone(),
        }
    }
}

/// Nearest-rank cut points: the lower edge of bin `j` is the value at
/// 0-based rank `⌈j·n/b⌉`. Repeated or minimal cuts are dropped.
pub fn quantile_cuts(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let Some(&min) = sorted.first() else { return Vec::new() };
    let mut cuts: Vec<f64> = Vec::new();
    for j in 1..bins {
        let rank = (j * n).div_ceil(bins);
        if let Some(&c) = sorted.get(rank) {
            if c > min && cuts.last().is_none_or(|&last| c > last) {
                cuts.push(c);
            }
        }
    }
    cuts
}

fn bin_of(cuts: &[f64], v: f64) -> usize {
    cuts.partition_point(|&c| c <= v)
}

/// One stratum of a [`Stratification`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCell {
    pub stratum: usize,
    pub bins: Vec<usize>,
    pub labels: Vec<String>,
    pub rows: usize,
}

/// Row-to-stratum assignment and the stratum map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    pub binnings: Vec<Binning>,
    pub strata: Vec<StratumCell>,
    pub assignment: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Stratification {
    pub fn k(&self) -> usize {
        self.strata.len()
    }
}

/// Bins each covariate (`bins[i]` applies to `covariates[i]`; ignored for
/// categorical columns) and numbers the occupied cross-product cells.
pub fn quantile_stratify(table: &Table, covariates: &[String], bins: &[usize]) -> Result<Stratification, IngestError> {
    if table.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    let mut warnings = Vec::new();
    let mut binnings = Vec::with_capacity(covariates.len());
    let mut per_row: Vec<Vec<usize>> = vec![Vec::with_capacity(covariates.len()); table.len()];
    for (i, name) in covariates.iter().enumerate() {
        let column = table.covariate(name).ok_or_else(|| IngestError::UnknownCovariate(name.clone()))?;
        let requested = bins.get(i).or(bins.last()).copied().unwrap_or(1);
        if requested == 0 {
            return Err(IngestError::NoBins(name.clone()));
        }
        let binning = match &column.values {
            ColumnValues::Numeric(values) => {
                let cuts = quantile_cuts(values, requested);
                if cuts.len() + 1 < requested {
                    let distinct = values.iter().map(|v| v.to_bits()).collect::<BTreeSet<_>>().len();
                    warnings.push(format!(
                        "covariate `{name}`: {requested} bins requested but only {} distinct quantile bins exist ({distinct} distinct values); collapsed",
                        cuts.len() + 1
                    ));
                }
                for (row, &v) in per_row.iter_mut().zip(values) {
                    row.push(bin_of(&cuts, v));
                }
                Binning::Quantile { name: name.clone(), requested, cuts }
            }
            ColumnValues::Categorical(values) => {
                let levels: Vec<String> = values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
                for (row, v) in per_row.iter_mut().zip(values) {
                    row.push(levels.binary_search(v).expect("level is present"));
                }
                Binning::Categorical { name: name.clone(), levels }
            }
        };
        binnings.push(binning);
    }

    let mut occupied: BTreeMap<&[usize], usize> = BTreeMap::new();
    for key in &per_row {
        *occupied.entry(key.as_slice()).or_default() += 1;
    }
    let full: usize = binnings.iter().map(Binning::bins).product();
    if occupied.len() < full {
        warnings.push(format!("{} of {full} covariate cells are empty and were dropped", full - occupied.len()));
    }
    let strata: Vec<StratumCell> = occupied
        .iter()
        .enumerate()
        .map(|(stratum, (key, &rows))| StratumCell {
            stratum,
            bins: key.to_vec(),
            labels: key.iter().zip(&binnings).map(|(&b, binning)| binning.label(b)).collect(),
            rows,
        })
        .collect();
    let ids: BTreeMap<&[usize], usize> = occupied.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    let assignment = per_row.iter().map(|key| ids[key.as_slice()]).collect();
    Ok(Stratification { binnings, strata, assignment, warnings })
}

/// What to do with an `(x, p)` cell that has no rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyCellPolicy {
    /// Keep the stratum and use `γ = 0.5` for the empty cell.
    #[default]
    Fallback,
    /// Remove strata with an empty cell.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub empty_cells: EmptyCellPolicy,
    /// Store `1 − γ̂` so that maximizing the reward minimizes the outcome.
    pub minimize: bool,
}

pub const EMPTY_CELL_REWARD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldEstimate {
    pub world: WorldModel,
    /// Original stratum id of each world stratum.
    pub strata: Vec<usize>,
    pub minimized: bool,
    pub warnings: Vec<String>,
}

/// `π̂` from cell frequencies and `γ̂` from cell means of the outcome.
pub fn estimate_world(
    table: &Table,
    strat: &Stratification,
    rho: f64,
    options: EstimateOptions,
) -> Result<WorldEstimate, IngestError> {
    if table.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    let k = strat.k();
    let mut n = vec![[0usize; 2]; k];
    let mut sum = vec![[0.0f64; 2]; k];
    for ((&x, &p), &y) in strat.assignment.iter().zip(&table.protected).zip(&table.outcome) {
        n[x][usize::from(p)] += 1;
        sum[x][usize::from(p)] += y;
    }
    let mut warnings = Vec::new();
    let keep: Vec<usize> = match options.empty_cells {
        EmptyCellPolicy::Fallback => (0..k).collect(),
        EmptyCellPolicy::Drop => (0..k).filter(|&x| n[x][0] > 0 && n[x][1] > 0).collect(),
    };
    if keep.len() < k {
        warnings.push(format!("dropped {} strata with an empty group", k - keep.len()));
    }
    if keep.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    let total: usize = keep.iter().map(|&x| n[x][0] + n[x][1]).sum();
    let mut pi = Vec::with_capacity(keep.len());
    let mut gamma = Vec::with_capacity(keep.len());
    for &x in &keep {
        pi.push(n[x].map(|c| c as f64 / total as f64));
        let mut g = [0.0; 2];
        for p in 0..2 {
            g[p] = if n[x][p] == 0 {
                warnings.push(format!(
                    "stratum {x} has no rows in group {p}; using reward {EMPTY_CELL_REWARD}"
                ));
                EMPTY_CELL_REWARD
            } else {
                sum[x][p] / n[x][p] as f64
            };
            if options.minimize {
                g[p] = 1.0 - g[p];
            }
        }
        gamma.push(g);
    }
    Ok(WorldEstimate {
        world: WorldModel::new(pi, gamma, rho)?,
        strata: keep,
        minimized: options.minimize,
        warnings,
    })
}

/// Decision counts per stratum and group, reading the outcome column as
/// the decision.
pub fn decision_counts(table: &Table, strat: &Stratification) -> Result<StratifiedCounts, IngestError> {
    let mut counts = StratifiedCounts::new(strat.k());
    for (row, ((&x, &p), &d)) in strat.assignment.iter().zip(&table.protected).zip(&table.outcome).enumerate() {
        let decision = if d == 0.0 {
            false
        } else if d == 1.0 {
            true
        } else {
            return Err(IngestError::NonBinaryDecision { row, value: d });
        };
        counts.record(x, usize::from(p), decision).expect("assignment is in range");
    }
    Ok(counts)
}

/// Stratum map written next to an estimated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMap {
    pub covariates: Vec<Binning>,
    pub strata: Vec<StratumCell>,
    pub dropped_rows: DropCounts,
}

impl StratumMap {
    pub fn new(table: &Table, strat: &Stratification) -> Self {
        Self {
            covariates: strat.binnings.clone(),
            strata: strat.strata.clone(),
            dropped_rows: table.dropped,
        }
    }
}

impl fmt::Display for StratumMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.strata {
            writeln!(f, "{}: {} ({} rows)", s.stratum, s.labels.join(" x "), s.rows)?;
        }
        Ok(())
    }
}

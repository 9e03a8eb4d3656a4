//! Simulation sweeps, dataset ingestion and the two-group analysis pipeline.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basisfn::{make_basis, Basis, BasisSpec, TimeGrid};
use crate::data::{LongitudinalDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::inference::{
    ancova_test, lrt_groups, rubin_pool, rubin_test, two_sample_t, wald_mc_test, Alternative, TestResult,
};
use crate::lmm::{fit_group, FitOptions, LmmFit, LmmSpec};
use crate::missing::{apply_missingness, impute_mvn, ImputationConfig, MissingnessSpec};
use crate::seed::{self, stream};
use crate::simgen::{generate, NoiseSpec, ScenarioId};
use crate::summaries::{ancova, change_score, mean_change_ats, straight_line_slope, SummaryEstimate};
use crate::wats::{
    default_weight_basis, individual_wats, optimize_weight, weighted_mc_test, IndividualWats, WeightModel,
    WeightOutcome,
};

/// Share of failed replicates above which a cell is flagged.
pub const FAILURE_FLAG_RATE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Handling {
    #[serde(rename = "CRA")]
    Cra,
    #[serde(rename = "MI")]
    Mi,
}

impl Handling {
    pub fn label(&self) -> &'static str {
        match self {
            Handling::Cra => "CRA",
            Handling::Mi => "MI",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "CS")]
    Cs,
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "SLOPE")]
    Slope,
    #[serde(rename = "ANCOVA")]
    Ancova,
    /// Mean change under a weight estimated from the same replicate.
    #[serde(rename = "WMC")]
    Wmc,
}

impl Estimator {
    pub const STANDARD: [Estimator; 4] = [Estimator::Cs, Estimator::Mc, Estimator::Slope, Estimator::Ancova];

    pub fn label(&self) -> &'static str {
        match self {
            Estimator::Cs => "CS",
            Estimator::Mc => "MC",
            Estimator::Slope => "SLOPE",
            Estimator::Ancova => "ANCOVA",
            Estimator::Wmc => "WMC",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> From<OneOrMany<T>> for Vec<T> {
    fn from(v: OneOrMany<T>) -> Self {
        match v {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(xs) => xs,
        }
    }
}

/// A mechanism given either by name (with the default parameters) or in full.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MissingnessEntry {
    Name(String),
    Spec(MissingnessSpec),
}

impl TryFrom<MissingnessEntry> for MissingnessSpec {
    type Error = Error;

    fn try_from(e: MissingnessEntry) -> Result<Self> {
        match e {
            MissingnessEntry::Spec(s) => Ok(s),
            MissingnessEntry::Name(n) => match n.to_ascii_lowercase().as_str() {
                "none" | "complete" => Ok(MissingnessSpec::None),
                "mcar" => Ok(MissingnessSpec::mcar_default()),
                "dropout" => Ok(MissingnessSpec::dropout_default()),
                "mnar" => Ok(MissingnessSpec::mnar_default()),
                "mnar15" => Ok(MissingnessSpec::mnar_fifteen_percent()),
                _ => Err(Error::Config(format!("unknown missingness mechanism {n:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    scenarios: Vec<String>,
    #[serde(default)]
    sigmas: Vec<f64>,
    #[serde(default)]
    missingness: Option<Vec<MissingnessEntry>>,
    #[serde(default)]
    handling: Option<OneOrMany<Handling>>,
    #[serde(default = "default_n")]
    n_per_group: usize,
    #[serde(default = "default_reps")]
    reps: usize,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    basis: Option<BasisSpec>,
    #[serde(default)]
    weight_basis: Option<BasisSpec>,
    #[serde(default)]
    estimators: Option<Vec<Estimator>>,
    #[serde(default)]
    imputation: Option<ImputationConfig>,
}

fn default_n() -> usize {
    100
}

fn default_reps() -> usize {
    1000
}

fn default_alpha() -> f64 {
    0.05
}

/// A sweep: the cross product of scenarios × missingness × handling × σ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub scenarios: Vec<ScenarioId>,
    pub sigmas: Vec<f64>,
    pub missingness: Vec<MissingnessSpec>,
    pub handling: Vec<Handling>,
    pub n_per_group: usize,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
    /// `None` uses a quadratic for quadratic scenarios and a one-knot cubic B-spline otherwise.
    pub basis: Option<BasisSpec>,
    pub weight_basis: Option<BasisSpec>,
    pub estimators: Vec<Estimator>,
    pub imputation: ImputationConfig,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let scenarios = raw.scenarios.iter().map(|s| s.parse()).collect::<Result<Vec<ScenarioId>>>()?;
        let missingness = match raw.missingness {
            Some(list) => list.into_iter().map(MissingnessSpec::try_from).collect::<Result<Vec<_>>>()?,
            None => vec![MissingnessSpec::None],
        };
        Ok(Self {
            scenarios,
            sigmas: raw.sigmas,
            missingness,
            handling: raw.handling.map(Vec::from).unwrap_or_else(|| vec![Handling::Cra]),
            n_per_group: raw.n_per_group,
            reps: raw.reps,
            alpha: raw.alpha,
            seed: raw.seed,
            basis: raw.basis,
            weight_basis: raw.weight_basis,
            estimators: raw.estimators.unwrap_or_else(|| Estimator::STANDARD.to_vec()),
            imputation: raw.imputation.unwrap_or_default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Expands and validates every cell.
    pub fn cells(&self) -> Result<Vec<ScenarioSpec>> {
        let mut out = Vec::new();
        for &scenario in &self.scenarios {
            for missingness in &self.missingness {
                for &handling in &self.handling {
                    for &sigma in &self.sigmas {
                        let cell = ScenarioSpec {
                            scenario,
                            sigma,
                            n_per_group: self.n_per_group,
                            missingness: missingness.clone(),
                            handling,
                            estimators: self.estimators.clone(),
                            reps: self.reps,
                            alpha: self.alpha,
                            root_seed: self.seed,
                            basis: self.basis.clone().unwrap_or_else(|| default_basis(scenario)),
                            weight_basis: self.weight_basis.clone(),
                            imputation: self.imputation.clone(),
                        };
                        cell.validate()?;
                        out.push(cell);
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn default_basis(scenario: ScenarioId) -> BasisSpec {
    if scenario.is_quadratic() {
        BasisSpec::quadratic()
    } else {
        BasisSpec::midpoint_bspline()
    }
}

/// One simulation cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSpec {
    pub scenario: ScenarioId,
    pub sigma: f64,
    pub n_per_group: usize,
    pub missingness: MissingnessSpec,
    pub handling: Handling,
    pub estimators: Vec<Estimator>,
    pub reps: usize,
    pub alpha: f64,
    pub root_seed: u64,
    pub basis: BasisSpec,
    pub weight_basis: Option<BasisSpec>,
    pub imputation: ImputationConfig,
}

impl ScenarioSpec {
    /// Complete-data cell with the standard estimators and default basis.
    pub fn new(scenario: ScenarioId, sigma: f64, n_per_group: usize, reps: usize, root_seed: u64) -> Self {
        Self {
            scenario,
            sigma,
            n_per_group,
            missingness: MissingnessSpec::None,
            handling: Handling::Cra,
            estimators: Estimator::STANDARD.to_vec(),
            reps,
            alpha: 0.05,
            root_seed,
            basis: default_basis(scenario),
            weight_basis: None,
            imputation: ImputationConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let label = self.label();
        NoiseSpec::new(self.sigma).map_err(|e| Error::Config(format!("{label}: {e}")))?;
        if self.reps == 0 {
            return Err(Error::Config(format!("{label}: reps must be at least 1")));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("{label}: alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n_per_group < 4 {
            return Err(Error::Config(format!("{label}: need at least 4 subjects per group")));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config(format!("{label}: no estimators requested")));
        }
        if self.handling == Handling::Mi && self.imputation.m < 2 {
            return Err(Error::Config(format!("{label}: multiple imputation needs m >= 2")));
        }
        if !(self.imputation.ridge >= 0.0 && self.imputation.ridge.is_finite()) {
            return Err(Error::Config(format!("{label}: imputation ridge must be finite and >= 0")));
        }
        let grid = crate::simgen::TrajectoryScenario::from_id(self.scenario).grid;
        self.missingness.validate(&grid).map_err(|e| Error::Config(format!("{label}: {e}")))?;
        self.bases(&grid).map_err(|e| Error::Config(format!("{label}: {e}")))?;
        Ok(())
    }

    fn bases(&self, grid: &TimeGrid) -> Result<(LmmSpec, Option<Basis>)> {
        let spec = LmmSpec::with_default_random_effects(make_basis(&self.basis, grid)?)?;
        let weight = if self.estimators.contains(&Estimator::Wmc) {
            Some(match &self.weight_basis {
                Some(b) => make_basis(b, grid)?,
                None => default_weight_basis(grid)?,
            })
        } else {
            None
        };
        Ok((spec, weight))
    }

    pub fn label(&self) -> String {
        format!(
            "{}/sigma={}/n={}/{}/{}",
            self.scenario,
            self.sigma,
            self.n_per_group,
            self.missingness.label(),
            self.handling.label()
        )
    }

    /// Replicate seeds leave out σ, handling and estimators, so cells along
    /// a σ panel share random effects and standardized noise (common random
    /// numbers) and CRA and MI cells see the same datasets.
    fn data_key(&self) -> u64 {
        let miss = serde_json::to_string(&self.missingness).unwrap_or_default();
        seed::label_tag(&format!("{}|{}|{}", self.scenario, self.n_per_group, miss))
    }

    pub fn replicate_seed(&self, rep: usize) -> u64 {
        seed::derive(self.root_seed, &[stream::REPLICATE, self.data_key(), rep as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionRow {
    pub scenario: ScenarioId,
    pub sigma: f64,
    pub n_per_group: usize,
    pub missingness: &'static str,
    pub handling: &'static str,
    pub estimator: &'static str,
    pub alpha: f64,
    pub reps: usize,
    pub completed: usize,
    pub rejections: usize,
    pub failures: usize,
    /// rejections / completed; NaN when nothing completed.
    pub rate: f64,
    /// √(rate(1 − rate)/completed).
    pub se: f64,
}

impl RejectionRow {
    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.reps as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    rejections: usize,
    completed: usize,
    failures: usize,
}

impl Tally {
    fn record(&mut self, outcome: Option<bool>) {
        match outcome {
            Some(r) => {
                self.completed += 1;
                self.rejections += r as usize;
            }
            None => self.failures += 1,
        }
    }

    fn merge(self, other: Tally) -> Tally {
        Tally {
            rejections: self.rejections + other.rejections,
            completed: self.completed + other.completed,
            failures: self.failures + other.failures,
        }
    }
}

fn rate_and_se(rejections: usize, completed: usize) -> (f64, f64) {
    if completed == 0 {
        return (f64::NAN, f64::NAN);
    }
    let rate = rejections as f64 / completed as f64;
    (rate, (rate * (1.0 - rate) / completed as f64).sqrt())
}

/// Per-estimator test results for one replicate; `Err` marks a failure.
pub type ReplicateResult = Vec<(Estimator, Result<TestResult>)>;

/// Runs one replicate of `cell`.
pub fn run_replicate(cell: &ScenarioSpec, rep: usize) -> Result<ReplicateResult> {
    let scenario = crate::simgen::TrajectoryScenario::from_id(cell.scenario);
    let (spec, weight_basis) = cell.bases(&scenario.grid)?;
    Ok(replicate(cell, &spec, weight_basis.as_ref(), rep))
}

fn replicate(cell: &ScenarioSpec, spec: &LmmSpec, weight_basis: Option<&Basis>, rep: usize) -> ReplicateResult {
    let seed = cell.replicate_seed(rep);
    let data = match generate(cell.scenario, NoiseSpec { sigma: cell.sigma }, cell.n_per_group, seed)
        .and_then(|d| apply_missingness(&d, &cell.missingness, seed))
    {
        Ok(d) => d,
        Err(e) => {
            let msg = e.to_string();
            return cell.estimators.iter().map(|&k| (k, Err(Error::InsufficientData(msg.clone())))).collect();
        }
    };
    let alt = Alternative::default();

    let needs_fits = cell.estimators.iter().any(|k| matches!(k, Estimator::Mc | Estimator::Wmc));
    let fits = if needs_fits { Some(fit_pair(&data, spec)) } else { None };

    let imputed = if cell.handling == Handling::Mi
        && cell.estimators.iter().any(|k| matches!(k, Estimator::Cs | Estimator::Slope | Estimator::Ancova))
    {
        Some(impute_mvn(&data, &cell.imputation, seed).map_err(|e| e.to_string()))
    } else {
        None
    };

    cell.estimators
        .iter()
        .map(|&k| {
            let result = match k {
                Estimator::Mc => with_fits(&fits, |f1, f2| {
                    wald_mc_test(&mean_change_ats(f1, &data.grid)?, &mean_change_ats(f2, &data.grid)?, alt)
                }),
                Estimator::Wmc => with_fits(&fits, |f1, f2| {
                    let wb = weight_basis.ok_or_else(|| Error::Contract("weight basis missing".into()))?;
                    let outcome = optimize_weight(f1, f2, wb, seed)?;
                    weighted_mc_test(f1, f2, &outcome.model, alt)
                }),
                Estimator::Cs | Estimator::Slope | Estimator::Ancova => match &imputed {
                    None => complete_data_test(k, &data, alt),
                    Some(Err(msg)) => Err(Error::InsufficientData(format!("imputation failed: {msg}"))),
                    Some(Ok(sets)) => pooled_test(k, sets, alt),
                },
            };
            (k, result)
        })
        .collect()
}

fn fit_pair(data: &LongitudinalDataset, spec: &LmmSpec) -> std::result::Result<(LmmFit, LmmFit), String> {
    let opts = FitOptions::default();
    let f1 = fit_group(data, 0, spec, &opts).map_err(|e| e.to_string())?;
    let f2 = fit_group(data, 1, spec, &opts).map_err(|e| e.to_string())?;
    Ok((f1, f2))
}

fn with_fits(
    fits: &Option<std::result::Result<(LmmFit, LmmFit), String>>,
    f: impl FnOnce(&LmmFit, &LmmFit) -> Result<TestResult>,
) -> Result<TestResult> {
    match fits {
        Some(Ok((f1, f2))) => f(f1, f2),
        Some(Err(msg)) => Err(Error::Optimization(msg.clone())),
        None => Err(Error::Contract("group fits were not computed".into())),
    }
}

fn complete_data_test(k: Estimator, data: &LongitudinalDataset, alt: Alternative) -> Result<TestResult> {
    match k {
        Estimator::Cs => two_sample_t(&change_score(data, 0)?, &change_score(data, 1)?, alt),
        Estimator::Slope => two_sample_t(&straight_line_slope(data, 0)?, &straight_line_slope(data, 1)?, alt),
        Estimator::Ancova => ancova_test(&ancova(data)?, alt),
        _ => Err(Error::Contract(format!("{} is not a per-dataset summary", k.label()))),
    }
}

/// Group difference (first minus second) and its variance on one dataset.
fn difference(k: Estimator, data: &LongitudinalDataset) -> Result<(f64, f64)> {
    let pair = |a: SummaryEstimate, b: SummaryEstimate| (a.value - b.value, a.variance + b.variance);
    match k {
        Estimator::Cs => Ok(pair(change_score(data, 0)?, change_score(data, 1)?)),
        Estimator::Slope => Ok(pair(straight_line_slope(data, 0)?, straight_line_slope(data, 1)?)),
        Estimator::Ancova => {
            let fit = ancova(data)?;
            Ok((-fit.alpha2, fit.se2))
        }
        _ => Err(Error::Contract(format!("{} is not pooled across imputations", k.label()))),
    }
}

fn pooled_test(k: Estimator, sets: &[LongitudinalDataset], alt: Alternative) -> Result<TestResult> {
    let pairs = sets.iter().map(|d| difference(k, d)).collect::<Result<Vec<_>>>()?;
    rubin_test(&rubin_pool(&pairs)?, alt)
}

/// Monte-Carlo rejection rates of one cell, one row per estimator.
pub fn run_cell(cell: &ScenarioSpec) -> Result<Vec<RejectionRow>> {
    cell.validate()?;
    let scenario = crate::simgen::TrajectoryScenario::from_id(cell.scenario);
    let (spec, weight_basis) = cell.bases(&scenario.grid)?;
    let k = cell.estimators.len();
    let tallies = (0..cell.reps)
        .into_par_iter()
        .map(|rep| {
            let mut t = vec![Tally::default(); k];
            for (slot, (_, r)) in t.iter_mut().zip(replicate(cell, &spec, weight_basis.as_ref(), rep)) {
                slot.record(r.ok().map(|r| r.rejects(cell.alpha)));
            }
            t
        })
        .reduce(
            || vec![Tally::default(); k],
            |a, b| a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect(),
        );
    Ok(cell
        .estimators
        .iter()
        .zip(tallies)
        .map(|(est, t)| {
            let (rate, se) = rate_and_se(t.rejections, t.completed);
            RejectionRow {
                scenario: cell.scenario,
                sigma: cell.sigma,
                n_per_group: cell.n_per_group,
                missingness: cell.missingness.label(),
                handling: cell.handling.label(),
                estimator: est.label(),
                alpha: cell.alpha,
                reps: cell.reps,
                completed: t.completed,
                rejections: t.rejections,
                failures: t.failures,
                rate,
                se,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct FlaggedCell {
    pub cell: String,
    pub estimator: &'static str,
    pub failures: usize,
    pub reps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config: SweepConfig,
    pub cells: usize,
    pub rows: usize,
    pub wall_time_secs: f64,
    pub threads: usize,
    /// Cells where more than 2% of replicates failed for some estimator.
    pub flagged: Vec<FlaggedCell>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<RejectionRow>,
    pub manifest: RunManifest,
}

/// Runs every cell of `config`. Invalid cells abort before anything runs.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepOutput> {
    let started = Instant::now();
    let cells = config.cells()?;
    let per_cell = cells.par_iter().map(run_cell).collect::<Result<Vec<_>>>()?;
    let mut flagged = Vec::new();
    for (cell, rows) in cells.iter().zip(&per_cell) {
        for row in rows.iter().filter(|r| r.failure_rate() > FAILURE_FLAG_RATE) {
            flagged.push(FlaggedCell { cell: cell.label(), estimator: row.estimator, failures: row.failures, reps: row.reps });
        }
    }
    let rows: Vec<RejectionRow> = per_cell.into_iter().flatten().collect();
    Ok(SweepOutput {
        manifest: RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config: config.clone(),
            cells: cells.len(),
            rows: rows.len(),
            wall_time_secs: started.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
            flagged,
        },
        rows,
    })
}

/// Plot data: one row per (scenario, missingness, handling) panel, estimator and σ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelPoint {
    pub panel: String,
    pub scenario: ScenarioId,
    pub missingness: &'static str,
    pub handling: &'static str,
    pub estimator: &'static str,
    pub sigma: f64,
    pub rate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn power_panels(rows: &[RejectionRow]) -> Vec<PanelPoint> {
    let mut points: Vec<PanelPoint> = rows
        .iter()
        .map(|r| PanelPoint {
            panel: format!("{}/{}/{}", r.scenario, r.missingness, r.handling),
            scenario: r.scenario,
            missingness: r.missingness,
            handling: r.handling,
            estimator: r.estimator,
            sigma: r.sigma,
            rate: r.rate,
            se: r.se,
            lower: (r.rate - r.se).max(0.0),
            upper: (r.rate + r.se).min(1.0),
        })
        .collect();
    points.sort_by(|a, b| {
        (&a.panel, a.estimator).cmp(&(&b.panel, b.estimator)).then(a.sigma.total_cmp(&b.sigma))
    });
    points
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv`, `power_panels.csv` and `manifest.json` into `dir`.
pub fn write_sweep(dir: &Path, out: &SweepOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if out.rows.is_empty() {
        std::fs::write(dir.join("results.csv"), results_header())?;
        std::fs::write(dir.join("power_panels.csv"), "panel,scenario,missingness,handling,estimator,sigma,rate,se,lower,upper\n")?;
    } else {
        write_csv(&dir.join("results.csv"), &out.rows)?;
        write_csv(&dir.join("power_panels.csv"), &power_panels(&out.rows))?;
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&out.manifest)?)?;
    Ok(())
}

fn results_header() -> &'static str {
    "scenario,sigma,n_per_group,missingness,handling,estimator,alpha,reps,completed,rejections,failures,rate,se\n"
}

pub const CSV_HEADER: [&str; 4] = ["subject_id", "group", "time", "value"];

pub fn ingest_csv(path: &Path) -> Result<LongitudinalDataset> {
    ingest_reader(std::fs::File::open(path)?)
}

/// Parses `subject_id,group,time,value` rows. Groups are numbered in order
/// of first appearance and the grid is the union of observed times.
pub fn ingest_reader<R: Read>(reader: R) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Ingest(format!("expected header {}, found {}", CSV_HEADER.join(","), header.iter().collect::<Vec<_>>().join(","))));
    }

    struct Pending {
        group: usize,
        first_line: u64,
        obs: Vec<(f64, f64)>,
    }
    let mut groups: Vec<String> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut subjects: HashMap<String, Pending> = HashMap::new();
    let mut seen: HashMap<(String, u64), u64> = HashMap::new();

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let number = |i: usize, name: &str| -> Result<f64> {
            let text = field(i);
            text.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Ingest(format!("line {line}: {name} {text:?} is not a finite number")))
        };
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(Error::Ingest(format!("line {line}: empty subject_id")));
        }
        let group_name = field(1).to_string();
        let time = number(2, "time")?;
        let value = number(3, "value")?;
        let group = match groups.iter().position(|g| *g == group_name) {
            Some(g) => g,
            None => {
                groups.push(group_name.clone());
                groups.len() - 1
            }
        };
        let key = (id.clone(), (time + 0.0).to_bits());
        if let Some(prev) = seen.insert(key, line) {
            return Err(Error::Ingest(format!(
                "line {line}: subject {id:?} already has an observation at time {time} (line {prev})"
            )));
        }
        let entry = subjects.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Pending { group, first_line: line, obs: Vec::new() }
        });
        if entry.group != group {
            return Err(Error::Ingest(format!(
                "line {line}: subject {id:?} is in group {group_name:?} but was first seen in group {:?} (line {})",
                groups[entry.group], entry.first_line
            )));
        }
        entry.obs.push((time, value));
    }
    if order.is_empty() {
        return Err(Error::Ingest("no data rows".into()));
    }

    let mut times: Vec<f64> = subjects.values().flat_map(|s| s.obs.iter().map(|o| o.0)).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let baseline = times[0];
    let missing: Vec<String> = order
        .iter()
        .filter(|id| subjects[*id].obs.iter().all(|o| o.0 != baseline))
        .map(|id| format!("line {}: subject {id:?} has no observation at baseline time {baseline}", subjects[id].first_line))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Ingest(missing.join("\n")));
    }
    let grid = TimeGrid::new(times).map_err(|e| Error::Ingest(e.to_string()))?;
    let records = order
        .into_iter()
        .map(|id| {
            let p = subjects.remove(&id).expect("subject recorded");
            let (times, values) = p.obs.into_iter().unzip();
            SubjectRecord { id, group: p.group, times, values }
        })
        .collect();
    LongitudinalDataset::new(grid, records, groups).map_err(|e| Error::Ingest(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    /// Fixed-effect basis; `None` means quadratic.
    pub basis: Option<BasisSpec>,
    /// Direction of the one-sided p-values.
    pub alternative: Alternative,
    pub alpha: f64,
    /// Estimate a WATS weight and report individual WATS values.
    pub weights: bool,
    pub weight_basis: Option<BasisSpec>,
    pub seed: u64,
    pub curve_points: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            basis: None,
            alternative: Alternative::default(),
            alpha: 0.05,
            weights: true,
            weight_basis: None,
            seed: 0,
            curve_points: 201,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupFitSummary {
    pub group: String,
    pub n_subjects: usize,
    pub n_observations: usize,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub d: Vec<Vec<f64>>,
    pub loglik: f64,
}

impl GroupFitSummary {
    fn new(name: &str, fit: &LmmFit) -> Self {
        Self {
            group: name.to_string(),
            n_subjects: fit.n_subjects,
            n_observations: fit.n_observations,
            beta: fit.beta.iter().copied().collect(),
            sigma2: fit.sigma2,
            d: fit.d.row_iter().map(|r| r.iter().copied().collect()).collect(),
            loglik: fit.loglik,
        }
    }
}

/// One estimator's group comparison. `effect` is first group minus second.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub estimator: Estimator,
    pub first: Option<SummaryEstimate>,
    pub second: Option<SummaryEstimate>,
    pub effect: f64,
    pub test: TestResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightReport {
    pub basis: BasisSpec,
    pub v: Vec<f64>,
    pub norm_const: f64,
    pub objective: f64,
    pub uniform_objective: f64,
    pub fallback: bool,
    pub test: TestResult,
    pub curve: Vec<(f64, f64)>,
    pub individual: Vec<IndividualWats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub groups: Vec<String>,
    pub grid: Vec<f64>,
    pub basis: BasisSpec,
    pub alternative: Alternative,
    pub fits: Vec<GroupFitSummary>,
    pub comparisons: Vec<Comparison>,
    pub lrt: TestResult,
    pub lrt_df: usize,
    pub weights: Option<WeightReport>,
}

impl AnalysisReport {
    pub fn comparison(&self, k: Estimator) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.estimator == k)
    }
}

/// Per-group mixed-model fits, CS/MC/SLOPE/ANCOVA comparisons, the LRT of
/// equal group parameters and, optionally, an estimated WATS weight.
pub fn analyze(data: &LongitudinalDataset, opts: &AnalysisOptions) -> Result<AnalysisReport> {
    data.require_two_groups()?;
    let basis_spec = opts.basis.clone().unwrap_or_else(BasisSpec::quadratic);
    let spec = LmmSpec::with_default_random_effects(make_basis(&basis_spec, &data.grid)?)?;
    let fit_opts = FitOptions::default();
    let f1 = fit_group(data, 0, &spec, &fit_opts)?;
    let f2 = fit_group(data, 1, &spec, &fit_opts)?;
    let alt = opts.alternative;

    let mut comparisons = Vec::new();
    let (m1, m2) = (mean_change_ats(&f1, &data.grid)?, mean_change_ats(&f2, &data.grid)?);
    comparisons.push(Comparison {
        estimator: Estimator::Mc,
        effect: m1.value - m2.value,
        test: wald_mc_test(&m1, &m2, alt)?,
        first: Some(m1),
        second: Some(m2),
    });
    let (c1, c2) = (change_score(data, 0)?, change_score(data, 1)?);
    comparisons.push(Comparison {
        estimator: Estimator::Cs,
        effect: c1.value - c2.value,
        test: two_sample_t(&c1, &c2, alt)?,
        first: Some(c1),
        second: Some(c2),
    });
    let (s1, s2) = (straight_line_slope(data, 0)?, straight_line_slope(data, 1)?);
    comparisons.push(Comparison {
        estimator: Estimator::Slope,
        effect: s1.value - s2.value,
        test: two_sample_t(&s1, &s2, alt)?,
        first: Some(s1),
        second: Some(s2),
    });
    let an = ancova(data)?;
    comparisons.push(Comparison {
        estimator: Estimator::Ancova,
        effect: -an.alpha2,
        test: ancova_test(&an, alt)?,
        first: None,
        second: None,
    });

    let lrt = lrt_groups(data, &spec)?;
    let weights = if opts.weights {
        let wb = match &opts.weight_basis {
            Some(b) => make_basis(b, &data.grid)?,
            None => default_weight_basis(&data.grid)?,
        };
        Some(weight_report(data, &f1, &f2, &wb, opts)?)
    } else {
        None
    };

    Ok(AnalysisReport {
        groups: data.groups.clone(),
        grid: data.grid.points().to_vec(),
        basis: basis_spec,
        alternative: alt,
        fits: vec![GroupFitSummary::new(&data.groups[0], &f1), GroupFitSummary::new(&data.groups[1], &f2)],
        comparisons,
        lrt_df: crate::inference::lrt_df(&spec, data.n_groups()),
        lrt,
        weights,
    })
}

fn weight_report(
    data: &LongitudinalDataset,
    f1: &LmmFit,
    f2: &LmmFit,
    u_basis: &Basis,
    opts: &AnalysisOptions,
) -> Result<WeightReport> {
    let WeightOutcome { model, objective, uniform_objective, fallback } = optimize_weight(f1, f2, u_basis, opts.seed)?;
    let uniform = WeightModel::uniform(u_basis.clone())?;
    let mut individual = Vec::with_capacity(data.subjects.len());
    for s in &data.subjects {
        let fit = if s.group == 0 { f1 } else { f2 };
        individual.push(IndividualWats {
            subject: s.id.clone(),
            group: s.group,
            uniform: individual_wats(&uniform, fit, s)?,
            weighted: individual_wats(&model, fit, s)?,
        });
    }
    Ok(WeightReport {
        basis: model.spec(),
        v: model.v.iter().copied().collect(),
        norm_const: model.norm_const,
        objective,
        uniform_objective,
        fallback,
        test: weighted_mc_test(f1, f2, &model, opts.alternative)?,
        curve: model.curve(opts.curve_points)?,
        individual,
    })
}

/// Fits both groups and estimates the weight only.
pub fn estimate_weights(data: &LongitudinalDataset, opts: &AnalysisOptions) -> Result<WeightReport> {
    data.require_two_groups()?;
    let basis_spec = opts.basis.clone().unwrap_or_else(BasisSpec::quadratic);
    let spec = LmmSpec::with_default_random_effects(make_basis(&basis_spec, &data.grid)?)?;
    let f1 = fit_group(data, 0, &spec, &FitOptions::default())?;
    let f2 = fit_group(data, 1, &spec, &FitOptions::default())?;
    let wb = match &opts.weight_basis {
        Some(b) => make_basis(b, &data.grid)?,
        None => default_weight_basis(&data.grid)?,
    };
    weight_report(data, &f1, &f2, &wb, opts)
}

#[derive(Debug, Clone, Serialize)]
struct CurveRow {
    t: f64,
    weight: f64,
}

/// Writes `weight_curve.csv` and `individual_wats.csv` into `dir`.
pub fn write_weight_outputs(dir: &Path, report: &WeightReport, groups: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let curve: Vec<CurveRow> = report.curve.iter().map(|&(t, weight)| CurveRow { t, weight }).collect();
    write_csv(&dir.join("weight_curve.csv"), &curve)?;
    #[derive(Serialize)]
    struct Row<'a> {
        subject_id: &'a str,
        group: &'a str,
        uniform: f64,
        weighted: f64,
    }
    let rows: Vec<Row> = report
        .individual
        .iter()
        .map(|i| Row { subject_id: &i.subject, group: &groups[i.group], uniform: i.uniform, weighted: i.weighted })
        .collect();
    write_csv(&dir.join("individual_wats.csv"), &rows)
}

/// Per-group means of the individual values, keyed by group name.
pub fn individual_means(report: &WeightReport, groups: &[String]) -> BTreeMap<String, (f64, f64)> {
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for i in &report.individual {
        let e = acc.entry(groups[i.group].clone()).or_default();
        e.0 += i.uniform;
        e.1 += i.weighted;
        e.2 += 1;
    }
    acc.into_iter().map(|(g, (u, w, n))| (g, (u / n as f64, w / n as f64))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_names_and_lists() {
        let cfg = SweepConfig::from_json(
            r#"{"scenarios":["Q1vQ2","NQ1vNQ1"],"sigmas":[0.5,1],"missingness":["none","dropout",{"mechanism":"mcar","rate":0.3}],
                "handling":"MI","reps":3,"seed":9}"#,
        )
        .unwrap();
        assert_eq!(cfg.handling, vec![Handling::Mi]);
        assert_eq!(cfg.missingness[2], MissingnessSpec::Mcar { rate: 0.3 });
        let cells = cfg.cells().unwrap();
        assert_eq!(cells.len(), 2 * 2 * 3);
        assert_eq!(cells[0].basis, BasisSpec::quadratic());
        assert_eq!(cells.last().unwrap().basis, BasisSpec::midpoint_bspline());
    }

    #[test]
    fn bad_cells_fail_before_running() {
        for text in [
            r#"{"scenarios":["Q9"],"sigmas":[1]}"#,
            r#"{"scenarios":["Q1vQ2"],"sigmas":[-1]}"#,
            r#"{"scenarios":["Q1vQ2"],"sigmas":[1],"reps":0}"#,
            r#"{"scenarios":["Q1vQ2"],"sigmas":[1],"alpha":1.5}"#,
            r#"{"scenarios":["Q1vQ2"],"sigmas":[1],"missingness":["sometimes"]}"#,
            r#"{"scenarios":["Q1vQ2"],"sigmas":[1],"unknown":1}"#,
        ] {
            assert!(SweepConfig::from_json(text).and_then(|c| c.cells()).is_err(), "{text}");
        }
    }

    #[test]
    fn single_replicate_rates() {
        let cell = ScenarioSpec::new(ScenarioId::Q1vQ2, 1.0, 30, 1, 4);
        for row in run_cell(&cell).unwrap() {
            assert_eq!(row.completed + row.failures, 1);
            if row.completed == 1 {
                assert!(row.rate == 0.0 || row.rate == 1.0);
                assert_eq!(row.se, 0.0);
            }
        }
    }

    #[test]
    fn binomial_se() {
        let (r, se) = rate_and_se(7, 40);
        assert_eq!(r, 7.0 / 40.0);
        assert_eq!(se, (r * (1.0 - r) / 40.0).sqrt());
        assert!(rate_and_se(0, 0).0.is_nan());
    }

    #[test]
    fn ingest_toy_file() {
        let text = "subject_id,group,time,value\na,ctl,0,1.5\na,ctl,2,2.0\nb,trt,0,1.0\nb,trt,1,0.5\n";
        let d = ingest_reader(text.as_bytes()).unwrap();
        assert_eq!(d.subjects.len(), 2);
        assert_eq!(d.grid.points(), &[0.0, 1.0, 2.0]);
        assert_eq!(d.groups, vec!["ctl".to_string(), "trt".to_string()]);
    }

    #[test]
    fn ingest_errors_name_lines() {
        let dup = "subject_id,group,time,value\na,x,0,1\na,x,1,2\na,x,1,3\n";
        let e = ingest_reader(dup.as_bytes()).unwrap_err().to_string();
        assert!(e.contains("line 4") && e.contains("line 3"), "{e}");
        let bad = "subject_id,group,time,value\na,x,0,1\na,x,1,abc\n";
        assert!(ingest_reader(bad.as_bytes()).unwrap_err().to_string().contains("line 3"));
        let nobase = "subject_id,group,time,value\na,x,0,1\nb,x,1,2\nc,y,2,2\n";
        let e = ingest_reader(nobase.as_bytes()).unwrap_err().to_string();
        assert!(e.contains("\"b\"") && e.contains("\"c\"") && e.contains("line 3"), "{e}");
        assert!(ingest_reader("id,group,time,value\n".as_bytes()).is_err());
    }
}

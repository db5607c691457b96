//! Input parsing and validation (IPD, mortality tables, run configuration,
//! study metadata, costs) and the contrast CSV exchange format.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::inference::McmcConfig;
use crate::mst::{ContrastData, CovarianceMode, ExtrapolationSettings};
use crate::survmodels::{Coupling, ModelKind, Observation};

const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpdRecord {
    pub study: String,
    pub arm: String,
    pub time: f64,
    pub event: bool,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn check_header(path: &Path, rdr: &mut csv::Reader<fs::File>, expected: &[&str]) -> Result<()> {
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    if header != expected {
        return Err(parse_err(
            path,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), header.join(",")),
        ));
    }
    Ok(())
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// Parse `study,arm,time,event`. In lenient mode malformed or invalid rows are
/// dropped with a warning instead of failing.
pub fn parse_ipd(path: &Path, lenient: bool) -> Result<Vec<IpdRecord>> {
    let mut rdr = open_csv(path)?;
    check_header(path, &mut rdr, &["study", "arm", "time", "event"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        match ipd_row(path, line, &rec) {
            Ok(r) => out.push(r),
            Err(e) if lenient => log::warn!("dropping row: {e}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn ipd_row(path: &Path, line: usize, rec: &csv::StringRecord) -> Result<IpdRecord> {
    if rec.len() != 4 {
        return Err(parse_err(path, line, format!("expected 4 fields, found {}", rec.len())));
    }
    let time: f64 = rec[2]
        .parse()
        .map_err(|_| parse_err(path, line, format!("time {:?} is not a number", &rec[2])))?;
    let event = match &rec[3] {
        "1" => true,
        "0" => false,
        other => return Err(parse_err(path, line, format!("event must be 0 or 1, found {other:?}"))),
    };
    if rec[0].is_empty() || rec[1].is_empty() {
        return Err(parse_err(path, line, "empty study or arm identifier"));
    }
    if !(time.is_finite() && time > 0.0) {
        return Err(Error::Validation(format!(
            "{}:{line}: time must be finite and > 0, found {time}",
            path.display()
        )));
    }
    Ok(IpdRecord {
        study: rec[0].to_string(),
        arm: rec[1].to_string(),
        time,
        event,
    })
}

pub fn write_ipd(path: &Path, records: &[IpdRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["study", "arm", "time", "event"])?;
    for r in records {
        w.write_record([
            r.study.clone(),
            r.arm.clone(),
            format!("{:?}", r.time),
            if r.event { "1" } else { "0" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Group records by (study, arm) in order of first appearance, preserving row
/// order within each group.
pub fn group_ipd(records: &[IpdRecord]) -> Vec<((String, String), Vec<Observation>)> {
    let mut groups: Vec<((String, String), Vec<Observation>)> = Vec::new();
    let mut index: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in records {
        let key = (r.study.clone(), r.arm.clone());
        let k = *index.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[k].1.push(Observation::new(r.time, r.event));
    }
    groups
}

/// Every (study, arm) in the data must be declared in the study metadata.
pub fn check_ipd_references(records: &[IpdRecord], studies: &BTreeMap<String, StudyMeta>) -> Result<()> {
    let mut unknown = BTreeSet::new();
    for r in records {
        match studies.get(&r.study) {
            Some(m) if m.arms.contains(&r.arm) => {}
            _ => {
                unknown.insert(format!("{}/{}", r.study, r.arm));
            }
        }
    }
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::Reference(format!(
            "IPD rows reference undeclared study/arm: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "female" | "f" => Some(Self::Female),
            "male" | "m" => Some(Self::Male),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Female => "female",
            Self::Male => "male",
        }
    }
}

/// Dense annual central death rates for one (country, sex).
#[derive(Debug, Clone, PartialEq)]
pub struct MortalityTable {
    pub country: String,
    pub sex: Sex,
    first_age: u32,
    first_year: i32,
    n_ages: usize,
    n_years: usize,
    /// Age-major: rates[age_index * n_years + year_index].
    rates: Vec<f64>,
}

impl MortalityTable {
    /// `rates[a][y]` for contiguous ages from `first_age` and years from `first_year`.
    pub fn new(country: impl Into<String>, sex: Sex, first_age: u32, first_year: i32, rates: Vec<Vec<f64>>) -> Result<Self> {
        let n_ages = rates.len();
        let n_years = rates.first().map_or(0, |r| r.len());
        if n_ages == 0 || n_years == 0 || rates.iter().any(|r| r.len() != n_years) {
            return Err(Error::Completeness("rate matrix must be rectangular and nonempty".into()));
        }
        let flat: Vec<f64> = rates.into_iter().flatten().collect();
        if let Some(v) = flat.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Validation(format!("mortality rates must be positive and finite, found {v}")));
        }
        Ok(Self {
            country: country.into(),
            sex,
            first_age,
            first_year,
            n_ages,
            n_years,
            rates: flat,
        })
    }

    pub fn ages(&self) -> std::ops::Range<u32> {
        self.first_age..self.first_age + self.n_ages as u32
    }

    pub fn years(&self) -> std::ops::Range<i32> {
        self.first_year..self.first_year + self.n_years as i32
    }

    pub fn n_ages(&self) -> usize {
        self.n_ages
    }

    pub fn n_years(&self) -> usize {
        self.n_years
    }

    pub fn first_age(&self) -> u32 {
        self.first_age
    }

    pub fn first_year(&self) -> i32 {
        self.first_year
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.n_years as i32 - 1
    }

    /// Rate by zero-based (age index, year index).
    pub fn rate_at(&self, a: usize, y: usize) -> f64 {
        self.rates[a * self.n_years + y]
    }

    pub fn rate(&self, age: u32, year: i32) -> Option<f64> {
        if !self.ages().contains(&age) || !self.years().contains(&year) {
            return None;
        }
        Some(self.rate_at((age - self.first_age) as usize, (year - self.first_year) as usize))
    }
}

pub const MAX_TABLE_AGE: u32 = 101;

/// Long-format `country,sex,age,year,rate`; one table per (country, sex), each
/// required to cover ages 0..=101 for every year in a contiguous range.
pub fn parse_mortality(path: &Path) -> Result<Vec<MortalityTable>> {
    let mut rdr = open_csv(path)?;
    check_header(path, &mut rdr, &["country", "sex", "age", "year", "rate"])?;
    let mut cells: BTreeMap<(String, Sex), BTreeMap<(u32, i32), f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 5 {
            return Err(parse_err(path, line, format!("expected 5 fields, found {}", rec.len())));
        }
        let sex = Sex::parse(&rec[1]).ok_or_else(|| parse_err(path, line, format!("unknown sex {:?}", &rec[1])))?;
        let age: u32 = rec[2].parse().map_err(|_| parse_err(path, line, "age must be a nonnegative integer"))?;
        let year: i32 = rec[3].parse().map_err(|_| parse_err(path, line, "year must be an integer"))?;
        let rate: f64 = rec[4].parse().map_err(|_| parse_err(path, line, "rate is not a number"))?;
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::Validation(format!(
                "{}:{line}: rate must be positive and finite, found {rate}",
                path.display()
            )));
        }
        if cells.entry((rec[0].to_string(), sex)).or_default().insert((age, year), rate).is_some() {
            return Err(parse_err(path, line, format!("duplicate cell age {age} year {year}")));
        }
    }
    if cells.is_empty() {
        return Err(Error::Completeness(format!("{}: no mortality rows", path.display())));
    }
    let mut out = Vec::new();
    for ((country, sex), grid) in cells {
        let years: BTreeSet<i32> = grid.keys().map(|k| k.1).collect();
        let (y0, y1) = (*years.first().unwrap(), *years.last().unwrap());
        let mut missing = Vec::new();
        let mut rates = Vec::with_capacity(MAX_TABLE_AGE as usize + 1);
        for age in 0..=MAX_TABLE_AGE {
            let mut row = Vec::with_capacity((y1 - y0 + 1) as usize);
            for year in y0..=y1 {
                match grid.get(&(age, year)) {
                    Some(&r) => row.push(r),
                    None => missing.push(format!("age {age} year {year}")),
                }
            }
            rates.push(row);
        }
        if let Some(age) = grid.keys().map(|k| k.0).find(|&a| a > MAX_TABLE_AGE) {
            return Err(Error::Validation(format!("{country}/{}: age {age} exceeds 101", sex.as_str())));
        }
        if !missing.is_empty() {
            let shown: Vec<_> = missing.iter().take(5).cloned().collect();
            return Err(Error::Completeness(format!(
                "{country}/{}: {} missing cells ({}{})",
                sex.as_str(),
                missing.len(),
                shown.join(", "),
                if missing.len() > 5 { ", ..." } else { "" }
            )));
        }
        out.push(MortalityTable::new(country, sex, 0, y0, rates)?);
    }
    Ok(out)
}

pub fn write_mortality(path: &Path, tables: &[MortalityTable]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["country", "sex", "age", "year", "rate"])?;
    for t in tables {
        for age in t.ages() {
            for year in t.years() {
                w.write_record([
                    t.country.clone(),
                    t.sex.as_str().to_string(),
                    age.to_string(),
                    year.to_string(),
                    format!("{:?}", t.rate(age, year).unwrap()),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Study-level metadata: arm order (first = control) and the demographic
/// weights used to build the matched external population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMeta {
    pub study_id: String,
    pub arms: Vec<String>,
    pub country_weights: BTreeMap<String, f64>,
    pub age_distribution: Vec<(u32, f64)>,
    pub female_proportion: f64,
    /// Calendar year the cohort starts; defaults to the first projected year.
    pub start_year: Option<i32>,
}

impl StudyMeta {
    pub fn validate(&self) -> Result<()> {
        let id = &self.study_id;
        if self.arms.len() < 2 {
            return Err(Error::Validation(format!("study {id}: needs at least two arms")));
        }
        let unique: BTreeSet<_> = self.arms.iter().collect();
        if unique.len() != self.arms.len() {
            return Err(Error::Validation(format!("study {id}: duplicate arms")));
        }
        check_weights(id, "country_weights", self.country_weights.values().copied())?;
        check_weights(id, "age_distribution", self.age_distribution.iter().map(|a| a.1))?;
        if !(0.0..=1.0).contains(&self.female_proportion) {
            return Err(Error::Validation(format!("study {id}: female_proportion must lie in [0, 1]")));
        }
        Ok(())
    }
}

fn check_weights(id: &str, what: &str, w: impl Iterator<Item = f64>) -> Result<()> {
    let w: Vec<f64> = w.collect();
    if w.is_empty() || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Validation(format!("study {id}: {what} must be nonempty and nonnegative")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::Validation(format!("study {id}: {what} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Discretized Normal(mean, sd) over integer ages 18..=101, renormalized.
pub fn age_distribution_from_moments(mean: f64, sd: f64) -> Result<Vec<(u32, f64)>> {
    let n = Normal::new(mean, sd).map_err(|e| Error::Validation(format!("age mean/sd: {e}")))?;
    let raw: Vec<(u32, f64)> = (18..=MAX_TABLE_AGE)
        .map(|a| (a, n.cdf(a as f64 + 0.5) - n.cdf(a as f64 - 0.5)))
        .collect();
    let total: f64 = raw.iter().map(|r| r.1).sum();
    if !(total > 0.0) {
        return Err(Error::Validation(format!(
            "age distribution N({mean}, {sd}²) has no mass over ages 18-101"
        )));
    }
    Ok(raw.into_iter().map(|(a, w)| (a, w / total)).filter(|r| r.1 > 0.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub treatment: String,
    pub mean_cost: f64,
    pub cv: f64,
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_cost.is_finite() && self.mean_cost > 0.0 && self.cv.is_finite() && self.cv > 0.0) {
            return Err(Error::Validation(format!(
                "cost for {}: mean and cv must be positive and finite",
                self.treatment
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySection {
    pub arms: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub country_weights: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age_distribution: Option<Vec<(u32, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age_sd: Option<f64>,
    pub female_proportion: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_year: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rob: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            arms: Vec::new(),
            country_weights: None,
            country: None,
            age_distribution: None,
            age_mean: None,
            age_sd: None,
            female_proportion: 0.5,
            start_year: None,
            rob: None,
            weight: None,
        }
    }
}

impl StudySection {
    pub fn to_meta(&self, study_id: &str) -> Result<StudyMeta> {
        let country_weights = match (&self.country_weights, &self.country) {
            (Some(w), None) => w.clone(),
            (None, Some(c)) => BTreeMap::from([(c.clone(), 1.0)]),
            (Some(_), Some(_)) => {
                return Err(Error::Config(format!("study {study_id}: give country or country_weights, not both")))
            }
            (None, None) => return Err(Error::Config(format!("study {study_id}: no country given"))),
        };
        let age_distribution = match (&self.age_distribution, self.age_mean, self.age_sd) {
            (Some(d), None, None) => d.clone(),
            (None, Some(m), Some(s)) => age_distribution_from_moments(m, s)?,
            _ => {
                return Err(Error::Config(format!(
                    "study {study_id}: give either age_distribution or both age_mean and age_sd"
                )))
            }
        };
        let meta = StudyMeta {
            study_id: study_id.to_string(),
            arms: self.arms.clone(),
            country_weights,
            age_distribution,
            female_proportion: self.female_proportion,
            start_year: self.start_year,
        };
        meta.validate()?;
        Ok(meta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostEntry {
    pub mean: f64,
    pub cv: f64,
}

impl Default for CostEntry {
    fn default() -> Self {
        Self { mean: 0.0, cv: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostSection {
    pub currency_factor: f64,
    pub treatments: BTreeMap<String, CostEntry>,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            currency_factor: 1.0,
            treatments: BTreeMap::new(),
        }
    }
}

impl CostSection {
    /// Cost specs with the currency factor applied to the means.
    pub fn specs(&self) -> Result<Vec<CostSpec>> {
        if !(self.currency_factor.is_finite() && self.currency_factor > 0.0) {
            return Err(Error::Config("costs.currency_factor must be positive".into()));
        }
        self.treatments
            .iter()
            .map(|(t, e)| {
                let s = CostSpec {
                    treatment: t.clone(),
                    mean_cost: e.mean * self.currency_factor,
                    cv: e.cv,
                };
                s.validate()?;
                Ok(s)
            })
            .collect()
    }
}

/// Willingness-to-pay grid `start:stop:step` (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: 50_000.0,
            step: 100.0,
        }
    }
}

impl LambdaGrid {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| -> Result<f64> {
            p.trim().parse().map_err(|_| Error::Config(format!("bad lambda grid {s:?}")))
        };
        let g = match parts.as_slice() {
            [a] => Self { start: num(a)?, stop: num(a)?, step: 1.0 },
            [a, b, c] => Self { start: num(a)?, stop: num(b)?, step: num(c)? },
            _ => return Err(Error::Config(format!("lambda grid must be start:stop:step, found {s:?}"))),
        };
        g.values()?;
        Ok(g)
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.start >= 0.0 && self.stop >= self.start && self.step > 0.0) {
            return Err(Error::Config("lambda grid needs 0 <= start <= stop and step > 0".into()));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.start + i as f64 * self.step).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionSection {
    pub lambda: LambdaGrid,
    pub mcid_years: f64,
    pub grade_cutoff: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl Default for DecisionSection {
    fn default() -> Self {
        Self {
            lambda: LambdaGrid::default(),
            mcid_years: 0.5,
            grade_cutoff: 0.975,
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmaSection {
    pub weights: BTreeMap<String, f64>,
    pub rob_weights: BTreeMap<String, f64>,
    pub d_prior_sd: f64,
    pub tau_prior_sd: f64,
    pub jitter: bool,
    pub covariance: CovarianceMode,
}

impl Default for NmaSection {
    fn default() -> Self {
        Self {
            weights: BTreeMap::new(),
            rob_weights: default_rob_weights(),
            d_prior_sd: 10.0,
            tau_prior_sd: 1.0,
            jitter: false,
            covariance: CovarianceMode::ControlVariance,
        }
    }
}

pub fn default_rob_weights() -> BTreeMap<String, f64> {
    BTreeMap::from([("low".into(), 1.0), ("medium".into(), 0.6), ("high".into(), 0.3)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalSection {
    pub synthetic_n: usize,
    /// Number of Lee-Carter posterior draws propagated into the synthetic
    /// times; 0 samples from the posterior-mean curve.
    pub projection_draws: usize,
    /// Lee-Carter draws retained for cohort survival bands.
    pub curve_draws: usize,
}

impl Default for ExternalSection {
    fn default() -> Self {
        Self {
            synthetic_n: 10_000,
            projection_draws: 0,
            curve_draws: 200,
        }
    }
}

/// Fully-resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    pub coupling: Coupling,
    pub allow_no_external: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ipd: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mortality: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub second_model: Option<ModelKind>,
    pub mcmc: McmcConfig,
    pub extrapolation: ExtrapolationSettings,
    /// Posterior draws per arm carried through extrapolation to MST.
    pub mst_draws: usize,
    pub external: ExternalSection,
    pub nma: NmaSection,
    pub decision: DecisionSection,
    pub costs: CostSection,
    pub study: BTreeMap<String, StudySection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelKind::TriLoglogistic,
            components: None,
            coupling: Coupling::default(),
            allow_no_external: false,
            ipd: None,
            mortality: None,
            second_model: None,
            mcmc: McmcConfig::default(),
            extrapolation: ExtrapolationSettings::default(),
            mst_draws: 200,
            external: ExternalSection::default(),
            nma: NmaSection::default(),
            decision: DecisionSection::default(),
            costs: CostSection::default(),
            study: BTreeMap::new(),
        }
    }
}

/// Parsed configuration plus the defaults that were applied and any keys the
/// parser did not recognize (the latter only survive lenient mode).
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub defaults_applied: Vec<String>,
    pub unknown_keys: Vec<String>,
}

fn flatten_keys(prefix: &str, v: &toml::Value, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.insert(key.clone());
            flatten_keys(&key, child, out);
        }
    }
}

const DEFAULTABLE: &[&str] = &[
    "seed",
    "model",
    "coupling",
    "mcmc",
    "mcmc.chains",
    "mcmc.warmup",
    "mcmc.samples",
    "mcmc.thin",
    "extrapolation",
    "external.synthetic_n",
    "nma.d_prior_sd",
    "nma.tau_prior_sd",
    "nma.rob_weights",
    "decision.lambda",
    "decision.mcid_years",
    "decision.grade_cutoff",
];

impl RunConfig {
    pub fn from_toml_str(text: &str, strict: bool) -> Result<LoadedConfig> {
        let raw: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let config: RunConfig = raw.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut given = BTreeSet::new();
        flatten_keys("", &raw, &mut given);
        let resolved = toml::Value::try_from(&config).map_err(|e| Error::Config(e.to_string()))?;
        let mut known = BTreeSet::new();
        flatten_keys("", &resolved, &mut known);
        let unknown_keys: Vec<String> = given.iter().filter(|k| !known.contains(*k)).cloned().collect();
        if !unknown_keys.is_empty() {
            if strict {
                return Err(Error::Config(format!("unknown keys: {}", unknown_keys.join(", "))));
            }
            for k in &unknown_keys {
                log::warn!("ignoring unknown config key {k}");
            }
        }
        let defaults_applied: Vec<String> = DEFAULTABLE
            .iter()
            .filter(|k| !given.contains(**k))
            .map(|k| {
                let value = lookup(&resolved, k).map_or("-".to_string(), |v| v.to_string());
                format!("{k} = {value}")
            })
            .collect();
        for d in &defaults_applied {
            log::info!("default applied: {d}");
        }
        config.validate()?;
        Ok(LoadedConfig {
            config,
            defaults_applied,
            unknown_keys,
        })
    }

    pub fn load(path: &Path, strict: bool) -> Result<LoadedConfig> {
        let text = fs::read_to_string(path)?;
        let mut loaded = Self::from_toml_str(&text, strict)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut loaded.config.ipd, &mut loaded.config.mortality].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(loaded)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.mcmc.validate()?;
        if let Some((_, m)) = self.model.poly_layout() {
            if let Some(c) = self.components {
                if c != m {
                    return Err(Error::Config(format!(
                        "model {} has {m} components but components = {c}",
                        self.model.as_str()
                    )));
                }
            }
            if self.coupling.shared_third && m != 3 {
                return Err(Error::Config(format!(
                    "coupling.shared_third needs a three-component model, not {}",
                    self.model.as_str()
                )));
            }
        } else if self.components.is_some() {
            return Err(Error::Config("components is not used by the mspline model".into()));
        }
        let d = &self.decision;
        if !(d.mcid_years >= 0.0) {
            return Err(Error::Config("decision.mcid_years must be >= 0".into()));
        }
        if !(0.5..=1.0).contains(&d.grade_cutoff) {
            return Err(Error::Config("decision.grade_cutoff must lie in [0.5, 1]".into()));
        }
        d.lambda.values()?;
        for (s, w) in &self.nma.weights {
            if !(*w > 0.0 && *w <= 1.0) {
                return Err(Error::Config(format!("weight for {s} must lie in (0, 1]")));
            }
        }
        for (s, w) in &self.nma.rob_weights {
            if !(*w > 0.0 && *w <= 1.0) {
                return Err(Error::Config(format!("rob weight for {s} must lie in (0, 1]")));
            }
        }
        if !(self.nma.d_prior_sd > 0.0 && self.nma.tau_prior_sd > 0.0) {
            return Err(Error::Config("nma prior sds must be positive".into()));
        }
        if self.mst_draws < 2 {
            return Err(Error::Config("mst_draws must be >= 2".into()));
        }
        if self.external.synthetic_n == 0 {
            return Err(Error::Config("external.synthetic_n must be >= 1".into()));
        }
        for (id, s) in &self.study {
            if let (Some(rob), None) = (&s.rob, s.weight) {
                if !self.nma.rob_weights.contains_key(rob) {
                    return Err(Error::Config(format!("study {id}: unknown rob category {rob:?}")));
                }
            }
        }
        self.costs.specs()?;
        Ok(())
    }

    pub fn studies(&self) -> Result<BTreeMap<String, StudyMeta>> {
        self.study.iter().map(|(id, s)| Ok((id.clone(), s.to_meta(id)?))).collect()
    }

    /// Power-likelihood weight per study: explicit `nma.weights`, then the
    /// study's own `weight`, then its RoB category, else 1.
    pub fn weight_for(&self, study: &str) -> f64 {
        if let Some(w) = self.nma.weights.get(study) {
            return *w;
        }
        let Some(s) = self.study.get(study) else { return 1.0 };
        if let Some(w) = s.weight {
            return w;
        }
        s.rob
            .as_ref()
            .and_then(|r| self.nma.rob_weights.get(r))
            .copied()
            .unwrap_or(1.0)
    }
}

fn lookup<'a>(v: &'a toml::Value, dotted: &str) -> Option<&'a toml::Value> {
    dotted.split('.').try_fold(v, |cur, k| cur.get(k))
}

/// Writes `contrasts.csv` (`study,arm,treatment,lyg_mean,lyg_var`; the control
/// row carries empty LYG fields) and `covariance.csv` (`study,arm_i,arm_j,cov`
/// for the off-diagonal entries of multi-arm studies).
pub fn write_contrasts(dir: &Path, data: &[ContrastData]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("contrasts.csv"))?;
    w.write_record(["study", "arm", "treatment", "lyg_mean", "lyg_var"])?;
    let mut cw = csv::Writer::from_path(dir.join("covariance.csv"))?;
    cw.write_record(["study", "arm_i", "arm_j", "cov"])?;
    for c in data {
        w.write_record([c.study_id.as_str(), "1", c.treatments[0].as_str(), "", ""])?;
        for k in 1..c.arms() {
            w.write_record([
                c.study_id.clone(),
                (k + 1).to_string(),
                c.treatments[k].clone(),
                format!("{:?}", c.y[k - 1]),
                format!("{:?}", c.cov[k - 1][k - 1]),
            ])?;
        }
        for i in 0..c.y.len() {
            for j in 0..c.y.len() {
                if i != j {
                    cw.write_record([
                        c.study_id.clone(),
                        (i + 2).to_string(),
                        (j + 2).to_string(),
                        format!("{:?}", c.cov[i][j]),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    cw.flush()?;
    Ok(())
}

pub fn read_contrasts(dir: &Path) -> Result<Vec<ContrastData>> {
    let path = dir.join("contrasts.csv");
    let mut rdr = open_csv(&path)?;
    check_header(&path, &mut rdr, &["study", "arm", "treatment", "lyg_mean", "lyg_var"])?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<(usize, String, Option<(f64, f64)>)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 5 {
            return Err(parse_err(&path, line, "expected 5 fields"));
        }
        let arm: usize = rec[1].parse().map_err(|_| parse_err(&path, line, "arm must be a positive integer"))?;
        let stats = if arm == 1 {
            None
        } else {
            let m: f64 = rec[3].parse().map_err(|_| parse_err(&path, line, "bad lyg_mean"))?;
            let v: f64 = rec[4].parse().map_err(|_| parse_err(&path, line, "bad lyg_var"))?;
            Some((m, v))
        };
        if !rows.contains_key(&rec[0]) {
            order.push(rec[0].to_string());
        }
        rows.entry(rec[0].to_string()).or_default().push((arm, rec[2].to_string(), stats));
    }
    let mut off: BTreeMap<(String, usize, usize), f64> = BTreeMap::new();
    let cpath = dir.join("covariance.csv");
    if cpath.exists() {
        let mut rdr = open_csv(&cpath)?;
        check_header(&cpath, &mut rdr, &["study", "arm_i", "arm_j", "cov"])?;
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != 4 {
                return Err(parse_err(&cpath, line, "expected 4 fields"));
            }
            let i: usize = rec[1].parse().map_err(|_| parse_err(&cpath, line, "bad arm_i"))?;
            let j: usize = rec[2].parse().map_err(|_| parse_err(&cpath, line, "bad arm_j"))?;
            let v: f64 = rec[3].parse().map_err(|_| parse_err(&cpath, line, "bad cov"))?;
            off.insert((rec[0].to_string(), i, j), v);
        }
    }
    let mut out = Vec::new();
    for study in order {
        let mut r = rows.remove(&study).unwrap();
        r.sort_by_key(|x| x.0);
        if r.iter().enumerate().any(|(k, x)| x.0 != k + 1) || r.len() < 2 || r[0].2.is_some() {
            return Err(Error::Validation(format!("study {study}: arms must be numbered 1..A with a control row")));
        }
        let m = r.len() - 1;
        let y: Vec<f64> = r[1..].iter().map(|x| x.2.unwrap().0).collect();
        let mut cov = vec![vec![0.0; m]; m];
        for i in 0..m {
            cov[i][i] = r[i + 1].2.unwrap().1;
            for j in 0..m {
                if i != j {
                    cov[i][j] = *off.get(&(study.clone(), i + 2, j + 2)).ok_or_else(|| {
                        Error::Validation(format!("study {study}: missing covariance for arms {} and {}", i + 2, j + 2))
                    })?;
                }
            }
        }
        let treatments = r.into_iter().map(|x| x.1).collect();
        out.push(ContrastData::new(study, treatments, y, cov)?);
    }
    Ok(out)
}

/// Write any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn ipd_row_maps_fields() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "ipd.csv", "study,arm,time,event\nS1,docetaxel,1.25,1\n");
        let r = parse_ipd(&p, false).unwrap();
        assert_eq!(
            r,
            vec![IpdRecord {
                study: "S1".into(),
                arm: "docetaxel".into(),
                time: 1.25,
                event: true
            }]
        );
    }

    #[test]
    fn zero_time_is_validation_error() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "ipd.csv", "study,arm,time,event\nS1,docetaxel,0.0,1\n");
        let e = parse_ipd(&p, false).unwrap_err();
        assert!(matches!(e, Error::Validation(_)), "{e}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "ipd.csv", "study,arm,time,event\nS1,A,1,1\nS1,A,x,1\n");
        match parse_ipd(&p, false).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
        assert_eq!(parse_ipd(&p, true).unwrap().len(), 1);
    }

    #[test]
    fn grouping_is_stable() {
        let recs: Vec<IpdRecord> = [("S1", "B", 1.0), ("S1", "A", 2.0), ("S1", "B", 3.0)]
            .iter()
            .map(|(s, a, t)| IpdRecord {
                study: s.to_string(),
                arm: a.to_string(),
                time: *t,
                event: true,
            })
            .collect();
        let g = group_ipd(&recs);
        assert_eq!(g[0].0 .1, "B");
        assert_eq!(g[0].1.iter().map(|o| o.time).collect::<Vec<_>>(), vec![1.0, 3.0]);
    }

    #[test]
    fn seven_two_arm_studies_give_fourteen_groups() {
        let mut recs = Vec::new();
        for s in 0..7 {
            for a in ["ctl", "trt"] {
                for k in 0..3 {
                    recs.push(IpdRecord {
                        study: format!("S{s}"),
                        arm: a.into(),
                        time: 1.0 + k as f64,
                        event: k % 2 == 0,
                    });
                }
            }
        }
        assert_eq!(group_ipd(&recs).len(), 14);
    }

    fn mortality_csv(years: std::ops::RangeInclusive<i32>, zero_at: Option<(u32, i32)>, skip: Option<(u32, i32)>) -> String {
        let mut s = String::from("country,sex,age,year,rate\n");
        for age in 0..=101u32 {
            for y in years.clone() {
                if skip == Some((age, y)) {
                    continue;
                }
                let r = if zero_at == Some((age, y)) { 0.0 } else { 0.001 * (1.0 + age as f64) };
                s.push_str(&format!("GBR,female,{age},{y},{r}\n"));
            }
        }
        s
    }

    #[test]
    fn complete_grid_parses() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "m.csv", &mortality_csv(1960..=2022, None, None));
        let t = parse_mortality(&p).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].ages(), 0..102);
        assert_eq!(t[0].years(), 1960..2023);
    }

    #[test]
    fn zero_rate_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "m.csv", &mortality_csv(2000..=2001, Some((5, 2000)), None));
        assert!(matches!(parse_mortality(&p).unwrap_err(), Error::Validation(_)));
    }

    #[test]
    fn missing_cell_is_completeness_error() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "m.csv", &mortality_csv(2000..=2001, None, Some((50, 2001))));
        assert!(matches!(parse_mortality(&p).unwrap_err(), Error::Completeness(_)));
    }

    #[test]
    fn single_year_table_accepted() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "m.csv", &mortality_csv(2000..=2000, None, None));
        assert_eq!(parse_mortality(&p).unwrap()[0].n_years(), 1);
    }

    #[test]
    fn mortality_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "m.csv", &mortality_csv(2000..=2002, None, None));
        let t = parse_mortality(&p).unwrap();
        let q = d.path().join("out.csv");
        write_mortality(&q, &t).unwrap();
        assert_eq!(parse_mortality(&q).unwrap(), t);
    }

    #[test]
    fn seed_default_is_reported() {
        let c = RunConfig::from_toml_str("model = \"bi-weibull\"\n", true).unwrap();
        assert_eq!(c.config.seed, 0);
        assert!(c.defaults_applied.iter().any(|d| d == "seed = 0"));
        assert!(!c.defaults_applied.iter().any(|d| d.starts_with("model")));
    }

    #[test]
    fn mcid_reaches_decision_section() {
        let c = RunConfig::from_toml_str("[decision]\nmcid_years = 0.5\n", true).unwrap();
        assert_eq!(c.config.decision.mcid_years, 0.5);
    }

    #[test]
    fn weight_map_defaults_to_one() {
        let c = RunConfig::from_toml_str("[nma]\nweights = { S3 = 0.6, S5 = 0.3 }\n", true).unwrap();
        assert_eq!(c.config.weight_for("S3"), 0.6);
        assert_eq!(c.config.weight_for("S5"), 0.3);
        assert_eq!(c.config.weight_for("S1"), 1.0);
    }

    #[test]
    fn rob_category_maps_to_weight() {
        let text = "[study.S2]\narms = [\"A\", \"B\"]\ncountry = \"GBR\"\nage_mean = 62\nage_sd = 8\nrob = \"high\"\n";
        let c = RunConfig::from_toml_str(text, true).unwrap();
        assert_eq!(c.config.weight_for("S2"), 0.3);
    }

    #[test]
    fn unknown_key_strict_vs_lenient() {
        let text = "seed = 3\nsede = 4\n[mcmc]\nchians = 2\n";
        assert!(matches!(RunConfig::from_toml_str(text, true).unwrap_err(), Error::Config(_)));
        let c = RunConfig::from_toml_str(text, false).unwrap();
        assert_eq!(c.unknown_keys, vec!["mcmc.chians".to_string(), "sede".to_string()]);
        assert_eq!(c.config.seed, 3);
    }

    #[test]
    fn contradictory_components_rejected() {
        let text = "model = \"tri-loglogistic\"\ncomponents = 2\n";
        assert!(RunConfig::from_toml_str(text, true).is_err());
        let text = "model = \"bi-weibull\"\ncoupling = { shared_third = true }\n";
        assert!(RunConfig::from_toml_str(text, true).is_err());
    }

    #[test]
    fn config_round_trip() {
        let text = "seed = 9\nmodel = \"mspline\"\n[costs]\ncurrency_factor = 1.16\n[costs.treatments.A]\nmean = 100.0\ncv = 0.2\n";
        let c = RunConfig::from_toml_str(text, true).unwrap().config;
        let again = RunConfig::from_toml_str(&c.to_toml_string().unwrap(), true).unwrap().config;
        assert_eq!(c, again);
        let specs = c.costs.specs().unwrap();
        assert!((specs[0].mean_cost - 116.0).abs() < 1e-12);
    }

    #[test]
    fn study_meta_from_moments() {
        let s = StudySection {
            arms: vec!["A".into(), "B".into()],
            country: Some("GBR".into()),
            age_mean: Some(60.0),
            age_sd: Some(9.0),
            ..Default::default()
        };
        let m = s.to_meta("S1").unwrap();
        let total: f64 = m.age_distribution.iter().map(|a| a.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(m.age_distribution.iter().all(|a| (18..=101).contains(&a.0)));
        let mean: f64 = m.age_distribution.iter().map(|a| a.0 as f64 * a.1).sum();
        assert!((mean - 60.0).abs() < 0.05);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let s = StudySection {
            arms: vec!["A".into(), "B".into()],
            country_weights: Some(BTreeMap::from([("GBR".into(), 0.5), ("FRA".into(), 0.4)])),
            age_distribution: Some(vec![(60, 1.0)]),
            ..Default::default()
        };
        assert!(s.to_meta("S1").is_err());
    }

    #[test]
    fn unknown_arm_is_reference_error() {
        let mut studies = BTreeMap::new();
        studies.insert(
            "S1".to_string(),
            StudyMeta {
                study_id: "S1".into(),
                arms: vec!["A".into(), "B".into()],
                country_weights: BTreeMap::from([("GBR".into(), 1.0)]),
                age_distribution: vec![(60, 1.0)],
                female_proportion: 0.5,
                start_year: None,
            },
        );
        let recs = vec![IpdRecord {
            study: "S1".into(),
            arm: "C".into(),
            time: 1.0,
            event: true,
        }];
        assert!(matches!(check_ipd_references(&recs, &studies).unwrap_err(), Error::Reference(_)));
    }

    #[test]
    fn lambda_grid_parses() {
        let g = LambdaGrid::parse("0:50000:100").unwrap();
        let v = g.values().unwrap();
        assert_eq!(v.len(), 501);
        assert_eq!(*v.last().unwrap(), 50000.0);
        assert!(LambdaGrid::parse("5:1:1").is_err());
    }

    #[test]
    fn contrasts_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let a = ContrastData::new("S1", vec!["A".into(), "B".into()], vec![0.4], vec![vec![0.04]]).unwrap();
        let b = ContrastData::new(
            "S2",
            vec!["B".into(), "C".into(), "A".into()],
            vec![0.1, -0.3],
            vec![vec![0.05, 0.02], vec![0.02, 0.06]],
        )
        .unwrap();
        write_contrasts(d.path(), &[a.clone(), b.clone()]).unwrap();
        let back = read_contrasts(d.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in back.iter().zip([a, b]) {
            assert_eq!(x.treatments, y.treatments);
            assert_eq!(x.y, y.y);
            assert_eq!(x.cov, y.cov);
        }
    }

    proptest! {
        #[test]
        fn ipd_round_trip(rows in proptest::collection::vec((0u8..4, 0u8..3, 1e-6f64..50.0, any::<bool>()), 1..40)) {
            let recs: Vec<IpdRecord> = rows
                .iter()
                .map(|(s, a, t, e)| IpdRecord { study: format!("S{s}"), arm: format!("arm{a}"), time: *t, event: *e })
                .collect();
            let d = tempfile::tempdir().unwrap();
            let p = d.path().join("ipd.csv");
            write_ipd(&p, &recs).unwrap();
            prop_assert_eq!(parse_ipd(&p, false).unwrap(), recs);
        }
    }
}

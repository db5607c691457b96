//! Simulation studies: bias mitigation by the power likelihood, and
//! calibration/efficiency of the NMA engine.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{chain_rng, ess, quantile_sorted, McmcConfig};
use crate::mst::ContrastData;
use crate::nma::{self, NmaModel, NmaSettings};

/// Counter-based seed derivation (splitmix64 finaliser).
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sim_mcmc() -> McmcConfig {
    McmcConfig {
        chains: 2,
        warmup: 500,
        samples: 1000,
        ..McmcConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSimConfig {
    pub n_studies: usize,
    pub n_treatments: usize,
    pub patients_per_arm: usize,
    pub within_sd: f64,
    pub n_poor: usize,
    pub bias_magnitude: f64,
    pub tau_true: f64,
    pub omega_medium: f64,
    pub omega_high: f64,
    pub medium_bias_fraction: f64,
    /// Spacing of the true basic parameters d = (0, step, 2·step, ...).
    pub d_step: f64,
    pub replications: usize,
    pub seed: u64,
    pub mcmc: McmcConfig,
}

impl Default for PowerSimConfig {
    fn default() -> Self {
        Self {
            n_studies: 20,
            n_treatments: 4,
            patients_per_arm: 50,
            within_sd: 1.0,
            n_poor: 6,
            bias_magnitude: 1.0,
            tau_true: 0.1,
            omega_medium: 0.6,
            omega_high: 0.3,
            medium_bias_fraction: 0.6,
            d_step: 0.5,
            replications: 500,
            seed: 0,
            mcmc: sim_mcmc(),
        }
    }
}

fn from_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

impl PowerSimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = from_toml(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_treatments < 2 || self.n_studies + 1 < self.n_treatments {
            return bad("need at least 2 treatments and n_studies >= n_treatments - 1");
        }
        if self.n_poor % 2 != 0 || self.n_poor > self.n_studies {
            return bad("n_poor must be even and at most n_studies");
        }
        if self.patients_per_arm == 0 || !(self.within_sd > 0.0) || !(self.tau_true >= 0.0) {
            return bad("patients_per_arm, within_sd must be positive and tau_true >= 0");
        }
        for w in [self.omega_medium, self.omega_high] {
            if !(w > 0.0 && w <= 1.0) {
                return bad("omega values must lie in (0, 1]");
            }
        }
        if self.replications == 0 {
            return bad("replications must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Good,
    Medium,
    High,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub data: Vec<ContrastData>,
    pub true_d: Vec<f64>,
    pub labels: Vec<Quality>,
    pub omega: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn treatment_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("T{i}")).collect()
}

pub fn true_effects(k: usize, step: f64) -> Vec<f64> {
    (0..k).map(|i| i as f64 * step).collect()
}

fn connected(k: usize, pairs: &[(usize, usize)]) -> bool {
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for &(a, b) in pairs {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let r = find(&mut parent, 0);
    (0..k).all(|i| find(&mut parent, i) == r)
}

const PAIR_RETRIES: usize = 10_000;

/// Uniform treatment pairs (lower index as control) forming a connected network.
pub fn draw_pairs<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    for _ in 0..PAIR_RETRIES {
        let pairs: Vec<(usize, usize)> = (0..n)
            .map(|_| {
                let p = sample(rng, k, 2);
                let (a, b) = (p.index(0), p.index(1));
                (a.min(b), a.max(b))
            })
            .collect();
        if connected(k, &pairs) {
            return Ok(pairs);
        }
    }
    Err(Error::Disconnected(format!(
        "no connected network of {n} two-arm studies over {k} treatments after {PAIR_RETRIES} draws"
    )))
}

#[allow(clippy::too_many_arguments)]
fn simulate_studies<R: Rng + ?Sized>(
    k: usize,
    n_studies: usize,
    true_d: &[f64],
    tau: f64,
    patients: usize,
    sd: f64,
    bias: &[f64],
    rng: &mut R,
) -> Result<Vec<ContrastData>> {
    let names = treatment_names(k);
    let pairs = draw_pairs(k, n_studies, rng)?;
    let arm_se = sd / (patients as f64).sqrt();
    let var = 2.0 * sd * sd / patients as f64;
    pairs
        .iter()
        .enumerate()
        .map(|(j, &(a, b))| {
            let delta = true_d[b] - true_d[a] + tau * rng.sample::<f64, _>(StandardNormal);
            let baseline: f64 = rng.sample(StandardNormal);
            let mean_a = baseline + arm_se * rng.sample::<f64, _>(StandardNormal);
            let mean_b = baseline + delta + arm_se * rng.sample::<f64, _>(StandardNormal);
            ContrastData::new(
                format!("S{}", j + 1),
                vec![names[a].clone(), names[b].clone()],
                vec![mean_b - mean_a + bias[j]],
                vec![vec![var]],
            )
        })
        .collect()
}

pub fn generate_power_dataset(cfg: &PowerSimConfig, replication: usize) -> Result<SimDataset> {
    cfg.validate()?;
    let mut rng = chain_rng(derive_seed(cfg.seed, 1, replication as u64), 0);
    let true_d = true_effects(cfg.n_treatments, cfg.d_step);
    let mut labels = vec![Quality::Good; cfg.n_studies];
    let poor = sample(&mut rng, cfg.n_studies, cfg.n_poor).into_vec();
    for (i, &j) in poor.iter().enumerate() {
        labels[j] = if i < cfg.n_poor / 2 { Quality::Medium } else { Quality::High };
    }
    let bias: Vec<f64> = labels
        .iter()
        .map(|q| match q {
            Quality::Good => 0.0,
            Quality::Medium => cfg.medium_bias_fraction * cfg.bias_magnitude,
            Quality::High => cfg.bias_magnitude,
        })
        .collect();
    let omega = labels
        .iter()
        .map(|q| match q {
            Quality::Good => 1.0,
            Quality::Medium => cfg.omega_medium,
            Quality::High => cfg.omega_high,
        })
        .collect();
    let data = simulate_studies(
        cfg.n_treatments,
        cfg.n_studies,
        &true_d,
        cfg.tau_true,
        cfg.patients_per_arm,
        cfg.within_sd,
        &bias,
        &mut rng,
    )?;
    Ok(SimDataset {
        data,
        true_d,
        labels,
        omega,
        bias,
    })
}

/// One fitted parameter in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub replication: usize,
    /// Model arm ("typical", "power") or engine cell label.
    pub arm: String,
    pub parameter: String,
    /// Basic parameter d_k (true) or derived contrast between non-reference treatments.
    pub basic: bool,
    pub truth: f64,
    pub mean: f64,
    pub variance: f64,
    pub q025: f64,
    pub q975: f64,
    pub ess: Option<f64>,
    pub crps: f64,
    pub runtime_secs: f64,
    pub iterations: usize,
}

pub fn crps(draws: &[f64], truth: f64) -> f64 {
    let n = draws.len();
    if n == 0 {
        return f64::NAN;
    }
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let e1 = x.iter().map(|v| (v - truth).abs()).sum::<f64>() / n as f64;
    // Σ_{i<j} (x_j − x_i) = Σ_i x_i (2i − n + 1) over sorted values.
    let pair_sum: f64 = x.iter().enumerate().map(|(i, v)| v * (2.0 * i as f64 - n as f64 + 1.0)).sum();
    let e2 = 2.0 * pair_sum / (n * n) as f64;
    e1 - 0.5 * e2
}

fn thin_to(x: &[f64], max: usize) -> Vec<f64> {
    if x.len() <= max {
        return x.to_vec();
    }
    (0..max).map(|i| x[i * x.len() / max]).collect()
}

const CRPS_DRAWS: usize = 1000;

fn fit_rows(model: &NmaModel, true_d: &[f64], mcmc: &McmcConfig, replication: usize, arm: &str) -> Result<Vec<ReplicationRow>> {
    let start = Instant::now();
    let fit = nma::fit(model, &NmaSettings::default(), mcmc)?;
    let runtime = start.elapsed().as_secs_f64().max(fit.draws.runtime_secs);
    let effects = fit.effects();
    let names = fit.treatments.clone();
    let k = names.len();
    let mut rows = Vec::new();
    let mut push = |parameter: String, basic: bool, truth: f64, col: Vec<f64>, ess_val: Option<f64>| {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let variance = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let c = crps(&thin_to(&col, CRPS_DRAWS), truth);
        let mut s = col;
        s.sort_by(f64::total_cmp);
        rows.push(ReplicationRow {
            replication,
            arm: arm.to_string(),
            parameter,
            basic,
            truth,
            mean,
            variance,
            q025: quantile_sorted(&s, 0.025),
            q975: quantile_sorted(&s, 0.975),
            ess: ess_val,
            crps: c,
            runtime_secs: runtime,
            iterations: fit.draws.total_iterations,
        });
    };
    // Simulated networks label treatments T1..TK in index order, so the
    // model's treatment order is recovered by name.
    let truth_of = |name: &str| -> f64 { true_d[name[1..].parse::<usize>().expect("T<k> label") - 1] };
    for p in 1..k {
        let col: Vec<f64> = effects.iter().map(|e| e[p]).collect();
        let e = ess(&fit.draws.chains_of(p - 1));
        push(format!("d[{}]", names[p]), true, truth_of(&names[p]) - truth_of(&names[0]), col, e);
    }
    for a in 1..k {
        for b in a + 1..k {
            let col = nma::contrast_draws(&effects, a, b);
            push(
                format!("{}-{}", names[b], names[a]),
                false,
                truth_of(&names[b]) - truth_of(&names[a]),
                col,
                None,
            );
        }
    }
    Ok(rows)
}

/// Aggregate metrics for one arm/cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub arm: String,
    pub replications: usize,
    pub failures: usize,
    /// Averaged over basic parameters and replications.
    pub mean_bias: f64,
    /// Mean over basic parameters of |bias| per parameter.
    pub mean_abs_bias: f64,
    /// Monte Carlo standard error of `mean_bias`.
    pub mc_se_bias: f64,
    pub mean_bias_all_contrasts: f64,
    pub rmse: f64,
    pub mae: f64,
    pub coverage: f64,
    pub cri_width: f64,
    pub posterior_variance: f64,
    pub ess: f64,
    pub ess_per_sec: f64,
    pub runtime_secs: f64,
    pub iterations_per_sec: f64,
    pub crps: f64,
}

/// Per-parameter bias, RMSE and error variance (population form), so that
/// rmse² = bias² + error_variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMetrics {
    pub arm: String,
    pub parameter: String,
    pub bias: f64,
    pub rmse: f64,
    pub error_variance: f64,
}

fn avg(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn param_metrics(rows: &[ReplicationRow]) -> Vec<ParamMetrics> {
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.arm, &r.parameter)).or_default().push(r.mean - r.truth);
    }
    groups
        .into_iter()
        .map(|((arm, parameter), err)| {
            let bias = avg(&err);
            ParamMetrics {
                arm: arm.to_string(),
                parameter: parameter.to_string(),
                bias,
                rmse: avg(&err.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt(),
                error_variance: avg(&err.iter().map(|e| (e - bias).powi(2)).collect::<Vec<_>>()),
            }
        })
        .collect()
}

/// Metrics per arm from persisted replication rows, in first-appearance order.
pub fn aggregate(rows: &[ReplicationRow], failures: &BTreeMap<String, usize>) -> Vec<SimMetrics> {
    let mut arms: Vec<&str> = Vec::new();
    for r in rows {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    let pm = param_metrics(rows);
    arms.into_iter()
        .map(|arm| {
            let basic: Vec<&ReplicationRow> = rows.iter().filter(|r| r.arm == arm && r.basic).collect();
            let all: Vec<&ReplicationRow> = rows.iter().filter(|r| r.arm == arm).collect();
            let err: Vec<f64> = basic.iter().map(|r| r.mean - r.truth).collect();
            let mut reps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut runtime: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for r in &basic {
                reps.entry(r.replication).or_default().push(r.mean - r.truth);
                runtime.insert(r.replication, (r.runtime_secs, r.iterations));
            }
            let rep_bias: Vec<f64> = reps.values().map(|e| avg(e)).collect();
            let mean_bias = avg(&err);
            let mc_se_bias = if rep_bias.len() > 1 {
                let m = avg(&rep_bias);
                (rep_bias.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (rep_bias.len() - 1) as f64 / rep_bias.len() as f64).sqrt()
            } else {
                f64::NAN
            };
            let abs_bias: Vec<f64> = pm
                .iter()
                .filter(|p| p.arm == arm && basic.iter().any(|r| r.parameter == p.parameter))
                .map(|p| p.bias.abs())
                .collect();
            let ess_vals: Vec<f64> = basic.iter().filter_map(|r| r.ess).collect();
            let ess_rate: Vec<f64> = basic.iter().filter_map(|r| r.ess.map(|e| e / r.runtime_secs.max(1e-9))).collect();
            let rt: Vec<f64> = runtime.values().map(|v| v.0).collect();
            let ips: Vec<f64> = runtime.values().map(|(t, it)| *it as f64 / t.max(1e-9)).collect();
            SimMetrics {
                arm: arm.to_string(),
                replications: reps.len(),
                failures: failures.get(arm).copied().unwrap_or(0),
                mean_bias,
                mean_abs_bias: avg(&abs_bias),
                mc_se_bias,
                mean_bias_all_contrasts: avg(&all.iter().map(|r| r.mean - r.truth).collect::<Vec<_>>()),
                rmse: avg(&err.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt(),
                mae: avg(&err.iter().map(|e| e.abs()).collect::<Vec<_>>()),
                coverage: avg(&basic.iter().map(|r| f64::from(u8::from(r.q025 <= r.truth && r.truth <= r.q975))).collect::<Vec<_>>()),
                cri_width: avg(&basic.iter().map(|r| r.q975 - r.q025).collect::<Vec<_>>()),
                posterior_variance: avg(&basic.iter().map(|r| r.variance).collect::<Vec<_>>()),
                ess: avg(&ess_vals),
                ess_per_sec: avg(&ess_rate),
                runtime_secs: avg(&rt),
                iterations_per_sec: avg(&ips),
                crps: avg(&basic.iter().map(|r| r.crps).collect::<Vec<_>>()),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub rows: Vec<ReplicationRow>,
    pub failures: BTreeMap<String, usize>,
    pub metrics: Vec<SimMetrics>,
}

impl SimReport {
    pub fn metric(&self, arm: &str) -> Option<&SimMetrics> {
        self.metrics.iter().find(|m| m.arm == arm)
    }

    pub fn write_outputs(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_rows(std::fs::File::create(dir.join("replications.csv"))?, &self.rows)?;
        let mut w = csv::Writer::from_path(dir.join("aggregate.csv"))?;
        for m in &self.metrics {
            w.serialize(m)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_rows<W: Write>(w: W, rows: &[ReplicationRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(r: R) -> Result<Vec<ReplicationRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn collect(results: Vec<(String, Result<Vec<ReplicationRow>>)>) -> SimReport {
    let mut rows = Vec::new();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for (arm, res) in results {
        match res {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log::warn!("{arm}: replication failed: {e}");
                *failures.entry(arm).or_default() += 1;
            }
        }
    }
    let metrics = aggregate(&rows, &failures);
    SimReport { rows, failures, metrics }
}

/// Typical (all weights 1) and power-likelihood fits on each replication.
pub fn run_power_study(cfg: &PowerSimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let results: Vec<Vec<(String, Result<Vec<ReplicationRow>>)>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let mut mcmc = cfg.mcmc.clone();
            mcmc.seed = derive_seed(cfg.seed, 2, rep as u64);
            let one = |arm: &str, power: bool| -> Result<Vec<ReplicationRow>> {
                let ds = generate_power_dataset(cfg, rep)?;
                let w = if power { ds.omega.clone() } else { vec![1.0; ds.data.len()] };
                let model = NmaModel::new(&ds.data, &w, Some("T1"), false)?;
                fit_rows(&model, &ds.true_d, &mcmc, rep, arm)
            };
            vec![("typical".to_string(), one("typical", false)), ("power".to_string(), one("power", true))]
        })
        .collect();
    Ok(collect(results.into_iter().flatten().collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSimConfig {
    pub studies: Vec<usize>,
    pub treatments: Vec<usize>,
    pub taus: Vec<f64>,
    pub patients_per_arm: usize,
    pub within_sd: f64,
    pub d_step: f64,
    pub replications: usize,
    pub seed: u64,
    pub mcmc: McmcConfig,
}

impl Default for EngineSimConfig {
    fn default() -> Self {
        Self {
            studies: vec![7, 20, 50],
            treatments: vec![4, 8],
            taus: vec![0.1, 0.3, 1.0],
            patients_per_arm: 50,
            within_sd: 1.0,
            d_step: 0.5,
            replications: 500,
            seed: 0,
            mcmc: sim_mcmc(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineCell {
    pub n_studies: usize,
    pub n_treatments: usize,
    pub tau: f64,
}

impl EngineCell {
    pub fn label(&self) -> String {
        format!("S{}_K{}_tau{}", self.n_studies, self.n_treatments, self.tau)
    }
}

impl EngineSimConfig {
    pub fn cells(&self) -> Vec<EngineCell> {
        let mut out = Vec::new();
        for &n_studies in &self.studies {
            for &n_treatments in &self.treatments {
                for &tau in &self.taus {
                    out.push(EngineCell { n_studies, n_treatments, tau });
                }
            }
        }
        out
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = from_toml(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 || self.patients_per_arm == 0 || !(self.within_sd > 0.0) {
            return Err(Error::Config("replications, patients_per_arm and within_sd must be positive".into()));
        }
        for c in self.cells() {
            if c.n_treatments < 2 || c.n_studies + 1 < c.n_treatments || !(c.tau >= 0.0) {
                return Err(Error::Config(format!("invalid engine cell {}", c.label())));
            }
        }
        if self.cells().is_empty() {
            return Err(Error::Config("empty engine grid".into()));
        }
        Ok(())
    }
}

pub fn generate_engine_dataset(cfg: &EngineSimConfig, cell: usize, replication: usize) -> Result<(Vec<ContrastData>, Vec<f64>)> {
    let c = cfg.cells()[cell];
    let mut rng = chain_rng(derive_seed(cfg.seed, 3 + cell as u64 * 2, replication as u64), 0);
    let true_d = true_effects(c.n_treatments, cfg.d_step);
    let data = simulate_studies(
        c.n_treatments,
        c.n_studies,
        &true_d,
        c.tau,
        cfg.patients_per_arm,
        cfg.within_sd,
        &vec![0.0; c.n_studies],
        &mut rng,
    )?;
    Ok((data, true_d))
}

/// Correctly specified random-effects fits across the (studies, treatments, τ) grid.
pub fn run_engine_study(cfg: &EngineSimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let cells = cfg.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..cfg.replications).map(move |r| (c, r))).collect();
    let results: Vec<(String, Result<Vec<ReplicationRow>>)> = jobs
        .into_par_iter()
        .map(|(c, rep)| {
            let label = cells[c].label();
            let res = (|| {
                let (data, true_d) = generate_engine_dataset(cfg, c, rep)?;
                let model = NmaModel::new(&data, &vec![1.0; data.len()], Some("T1"), false)?;
                let mut mcmc = cfg.mcmc.clone();
                mcmc.seed = derive_seed(cfg.seed, 4 + c as u64 * 2, rep as u64);
                fit_rows(&model, &true_d, &mcmc, rep, &label)
            })();
            (label, res)
        })
        .collect();
    Ok(collect(results))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_power(reps: usize) -> PowerSimConfig {
        PowerSimConfig {
            replications: reps,
            mcmc: McmcConfig {
                chains: 2,
                warmup: 200,
                samples: 300,
                ..McmcConfig::default()
            },
            ..PowerSimConfig::default()
        }
    }

    #[test]
    fn bias_assignment_follows_labels() {
        let cfg = small_power(1);
        let ds = generate_power_dataset(&cfg, 0).unwrap();
        let high = ds.bias.iter().filter(|b| **b == 1.0).count();
        let medium = ds.bias.iter().filter(|b| (**b - 0.6).abs() < 1e-15).count();
        assert_eq!((high, medium), (3, 3));
        for (q, w) in ds.labels.iter().zip(&ds.omega) {
            let expect = match q {
                Quality::Good => 1.0,
                Quality::Medium => 0.6,
                Quality::High => 0.3,
            };
            assert_eq!(*w, expect);
        }
        assert!(ds.data.iter().all(|c| (c.cov[0][0] - 0.04).abs() < 1e-15));
    }

    #[test]
    fn zero_magnitude_leaves_poor_studies_unbiased() {
        let cfg = PowerSimConfig {
            bias_magnitude: 0.0,
            ..small_power(1)
        };
        let ds = generate_power_dataset(&cfg, 3).unwrap();
        assert!(ds.bias.iter().all(|b| *b == 0.0));
        assert_eq!(ds.labels.iter().filter(|q| **q != Quality::Good).count(), 6);
    }

    #[test]
    fn odd_poor_count_rejected() {
        let cfg = PowerSimConfig { n_poor: 3, ..small_power(1) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sparse_networks_are_connected() {
        let mut rng = chain_rng(9, 0);
        let pairs = draw_pairs(8, 7, &mut rng).unwrap();
        assert!(connected(8, &pairs));
    }

    #[test]
    fn crps_of_point_mass_is_absolute_error() {
        assert!((crps(&[2.0; 10], 0.5) - 1.5).abs() < 1e-12);
        // Direct double sum on a small sample.
        let x = [0.3, -1.0, 2.5, 0.7];
        let n = x.len() as f64;
        let e1: f64 = x.iter().map(|v| (v - 0.2f64).abs()).sum::<f64>() / n;
        let e2: f64 = x.iter().flat_map(|a| x.iter().map(move |b| (a - b).abs())).sum::<f64>() / (n * n);
        assert!((crps(&x, 0.2) - (e1 - 0.5 * e2)).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_make_arms_identical() {
        let cfg = PowerSimConfig {
            omega_medium: 1.0,
            omega_high: 1.0,
            ..small_power(2)
        };
        let r = run_power_study(&cfg).unwrap();
        let t: Vec<_> = r.rows.iter().filter(|x| x.arm == "typical").collect();
        let p: Vec<_> = r.rows.iter().filter(|x| x.arm == "power").collect();
        assert_eq!(t.len(), p.len());
        for (a, b) in t.iter().zip(&p) {
            assert_eq!((a.mean, a.q025, a.q975, a.variance), (b.mean, b.q025, b.q975, b.variance));
        }
    }

    #[test]
    fn study_is_deterministic_and_reaggregates() {
        let cfg = small_power(3);
        let a = run_power_study(&cfg).unwrap();
        let b = run_power_study(&cfg).unwrap();
        let strip = |rows: &[ReplicationRow]| rows.iter().map(|r| (r.parameter.clone(), r.mean, r.q025, r.crps)).collect::<Vec<_>>();
        assert_eq!(strip(&a.rows), strip(&b.rows));

        let mut buf = Vec::new();
        write_rows(&mut buf, &a.rows).unwrap();
        let back = read_rows(buf.as_slice()).unwrap();
        assert_eq!(back, a.rows);
        assert_eq!(aggregate(&back, &a.failures), a.metrics);

        for m in &a.metrics {
            assert!(m.rmse >= m.mean_bias.abs() - 1e-12);
            assert!((0.0..=1.0).contains(&m.coverage));
        }
        for p in param_metrics(&a.rows) {
            assert!((p.rmse * p.rmse - (p.bias * p.bias + p.error_variance)).abs() < 1e-12);
        }
    }

    #[test]
    fn engine_cells_record_timing() {
        let cfg = EngineSimConfig {
            studies: vec![7],
            treatments: vec![4],
            taus: vec![0.3],
            replications: 2,
            mcmc: McmcConfig {
                chains: 2,
                warmup: 200,
                samples: 300,
                ..McmcConfig::default()
            },
            ..EngineSimConfig::default()
        };
        let r = run_engine_study(&cfg).unwrap();
        let m = &r.metrics[0];
        assert_eq!(m.arm, "S7_K4_tau0.3");
        assert!(m.ess_per_sec > 0.0 && m.runtime_secs > 0.0 && m.iterations_per_sec > 0.0);
        assert!(m.crps.is_finite());
    }
}

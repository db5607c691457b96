//! Bayesian Lee-Carter fit of log-mortality, forward projection of the period
//! index, cohort survival along calendar diagonals and the demographically
//! matched external population with synthetic event times.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::{MortalityTable, Sex, StudyMeta};
use crate::error::{Error, Result};
use crate::inference::{chain_rng, rhat, ChainRng, GibbsStep, LogDensity, McmcConfig, PosteriorDraws, Sampler};
use crate::mst::SurvivalCurve;
use crate::survmodels::Observation;

/// Survival is forced to zero once the cohort reaches this age.
pub const TERMINAL_AGE: u32 = 110;

const ALPHA_PRIOR_SD: f64 = 10.0;
const BETA_PRIOR_SD: f64 = 1.0;
const KAPPA1_PRIOR_SD: f64 = 100.0;
const DRIFT_PRIOR_SD: f64 = 10.0;
const IG_SHAPE: f64 = 1e-3;
const IG_RATE: f64 = 1e-3;

/// Log posterior of the Lee-Carter model with state
/// [α (X), β (X), κ (T), u, log σ_ε, log σ_v].
struct LeeCarterTarget {
    n_ages: usize,
    n_years: usize,
    /// log rates, age-major
    y: Vec<f64>,
    first_year: i32,
    first_age: u32,
}

impl LeeCarterTarget {
    fn new(table: &MortalityTable) -> Self {
        let (x, t) = (table.n_ages(), table.n_years());
        let mut y = Vec::with_capacity(x * t);
        for a in 0..x {
            for j in 0..t {
                y.push(table.rate_at(a, j).ln());
            }
        }
        Self {
            n_ages: x,
            n_years: t,
            y,
            first_year: table.first_year(),
            first_age: table.first_age(),
        }
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let (x, t) = (self.n_ages, self.n_years);
        (x, 2 * x, 2 * x + t, 2 * x + t + 1)
    }

    fn y(&self, a: usize, j: usize) -> f64 {
        self.y[a * self.n_years + j]
    }

    fn sse(&self, s: &[f64]) -> f64 {
        let (ob, ok, _, _) = self.offsets();
        let mut sse = 0.0;
        for a in 0..self.n_ages {
            for j in 0..self.n_years {
                let r = self.y(a, j) - s[a] - s[ob + a] * s[ok + j];
                sse += r * r;
            }
        }
        sse
    }

    fn rw_sse(&self, s: &[f64]) -> f64 {
        let (_, ok, ou, _) = self.offsets();
        let u = s[ou];
        (1..self.n_years)
            .map(|j| {
                let r = s[ok + j] - s[ok + j - 1] - u;
                r * r
            })
            .sum()
    }

    /// Σβ = 1, Σκ = 0 with the likelihood unchanged.
    fn normalize(&self, s: &mut [f64]) {
        let (ob, ok, ou, _) = self.offsets();
        let (x, t) = (self.n_ages, self.n_years);
        let sum_b: f64 = s[ob..ob + x].iter().sum();
        if sum_b.abs() > 1e-8 {
            for v in &mut s[ob..ob + x] {
                *v /= sum_b;
            }
            for v in &mut s[ok..ok + t] {
                *v *= sum_b;
            }
            s[ou] *= sum_b;
            s[ou + 2] += sum_b.abs().ln();
        }
        let kbar = s[ok..ok + t].iter().sum::<f64>() / t as f64;
        for a in 0..x {
            s[a] += s[ob + a] * kbar;
        }
        for v in &mut s[ok..ok + t] {
            *v -= kbar;
        }
    }
}

fn inv_gamma(rng: &mut ChainRng, shape: f64, rate: f64) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(rng);
    1.0 / g
}

fn normal(rng: &mut ChainRng, mean: f64, sd: f64) -> f64 {
    mean + sd * rng.sample::<f64, _>(StandardNormal)
}

impl LogDensity for LeeCarterTarget {
    fn dim(&self) -> usize {
        2 * self.n_ages + self.n_years + 3
    }

    fn log_density(&self, s: &[f64]) -> f64 {
        let (ob, ok, ou, _) = self.offsets();
        let (x, t) = (self.n_ages, self.n_years);
        let (ls_e, ls_v) = (s[ou + 1], s[ou + 2]);
        let (var_e, var_v) = ((2.0 * ls_e).exp(), (2.0 * ls_v).exp());
        let mut lp = -((x * t) as f64) * ls_e - self.sse(s) / (2.0 * var_e);
        lp += -((t - 1) as f64) * ls_v - self.rw_sse(s) / (2.0 * var_v);
        lp -= s[..x].iter().map(|a| a * a).sum::<f64>() / (2.0 * ALPHA_PRIOR_SD.powi(2));
        lp -= s[ob..ob + x].iter().map(|b| b * b).sum::<f64>() / (2.0 * BETA_PRIOR_SD.powi(2));
        lp -= s[ok].powi(2) / (2.0 * KAPPA1_PRIOR_SD.powi(2));
        lp -= s[ou].powi(2) / (2.0 * DRIFT_PRIOR_SD.powi(2));
        // inverse-gamma priors on the variances, expressed on log σ
        lp += -2.0 * IG_SHAPE * ls_e - IG_RATE / var_e;
        lp += -2.0 * IG_SHAPE * ls_v - IG_RATE / var_v;
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }

    fn param_names(&self) -> Vec<String> {
        let mut n = Vec::with_capacity(self.dim());
        for a in 0..self.n_ages {
            n.push(format!("alpha[{}]", self.first_age + a as u32));
        }
        for a in 0..self.n_ages {
            n.push(format!("beta[{}]", self.first_age + a as u32));
        }
        for j in 0..self.n_years {
            n.push(format!("kappa[{}]", self.first_year + j as i32));
        }
        n.extend(["drift".into(), "sigma_eps".into(), "sigma_v".into()]);
        n
    }

    fn initial_point(&self) -> Vec<f64> {
        let (ob, ok, ou, _) = self.offsets();
        let (x, t) = (self.n_ages, self.n_years);
        let mut s = vec![0.0; self.dim()];
        for a in 0..x {
            s[a] = (0..t).map(|j| self.y(a, j)).sum::<f64>() / t as f64;
        }
        for j in 0..t {
            s[ok + j] = (0..x).map(|a| self.y(a, j) - s[a]).sum();
        }
        let kk: f64 = s[ok..ok + t].iter().map(|k| k * k).sum();
        for a in 0..x {
            s[ob + a] = if kk > 1e-12 {
                (0..t).map(|j| (self.y(a, j) - s[a]) * s[ok + j]).sum::<f64>() / kk
            } else {
                1.0 / x as f64
            };
        }
        s[ou] = (s[ok + t - 1] - s[ok]) / (t - 1) as f64;
        s[ou + 1] = (self.sse(&s) / (x * t) as f64).sqrt().max(1e-3).ln();
        s[ou + 2] = (self.rw_sse(&s) / (t - 1) as f64).sqrt().max(1e-3).ln();
        s
    }

    fn transform(&self, s: &[f64]) -> Vec<f64> {
        let mut out = s.to_vec();
        let (_, _, ou, _) = self.offsets();
        out[ou + 1] = s[ou + 1].exp();
        out[ou + 2] = s[ou + 2].exp();
        out
    }
}

impl GibbsStep for LeeCarterTarget {
    fn update(&self, s: &mut [f64], rng: &mut ChainRng) {
        let (ob, ok, ou, _) = self.offsets();
        let (x, t) = (self.n_ages, self.n_years);
        let var_e = (2.0 * s[ou + 1]).exp();

        // α_x | rest
        let prec = t as f64 / var_e + 1.0 / ALPHA_PRIOR_SD.powi(2);
        for a in 0..x {
            let r: f64 = (0..t).map(|j| self.y(a, j) - s[ob + a] * s[ok + j]).sum();
            s[a] = normal(rng, r / var_e / prec, prec.sqrt().recip());
        }

        // β_x | rest
        let kk: f64 = s[ok..ok + t].iter().map(|k| k * k).sum();
        let prec = kk / var_e + 1.0 / BETA_PRIOR_SD.powi(2);
        for a in 0..x {
            let r: f64 = (0..t).map(|j| (self.y(a, j) - s[a]) * s[ok + j]).sum();
            s[ob + a] = normal(rng, r / var_e / prec, prec.sqrt().recip());
        }

        // κ | rest: Gaussian with tridiagonal precision
        let var_v = (2.0 * s[ou + 2]).exp();
        let u = s[ou];
        let bb: f64 = s[ob..ob + x].iter().map(|b| b * b).sum();
        let mut diag = vec![bb / var_e; t];
        let mut lin = vec![0.0; t];
        for j in 0..t {
            lin[j] = (0..x).map(|a| s[ob + a] * (self.y(a, j) - s[a])).sum::<f64>() / var_e;
            if j > 0 {
                diag[j] += 1.0 / var_v;
                lin[j] += u / var_v;
            }
            if j + 1 < t {
                diag[j] += 1.0 / var_v;
                lin[j] -= u / var_v;
            }
        }
        diag[0] += 1.0 / KAPPA1_PRIOR_SD.powi(2);
        let off = -1.0 / var_v;
        let kappa = sample_tridiagonal(&diag, off, &lin, rng);
        s[ok..ok + t].copy_from_slice(&kappa);

        // u | κ, σ_v
        let diffs: f64 = (1..t).map(|j| s[ok + j] - s[ok + j - 1]).sum();
        let prec = (t - 1) as f64 / var_v + 1.0 / DRIFT_PRIOR_SD.powi(2);
        s[ou] = normal(rng, diffs / var_v / prec, prec.sqrt().recip());

        // σ_v², σ_ε² | rest
        let v = inv_gamma(rng, IG_SHAPE + (t - 1) as f64 / 2.0, IG_RATE + self.rw_sse(s) / 2.0);
        s[ou + 2] = 0.5 * v.ln();
        let v = inv_gamma(rng, IG_SHAPE + (x * t) as f64 / 2.0, IG_RATE + self.sse(s) / 2.0);
        s[ou + 1] = 0.5 * v.ln();

        self.normalize(s);
    }
}

/// Draw from N(Q⁻¹b, Q⁻¹) for a tridiagonal Q with constant off-diagonal.
fn sample_tridiagonal(diag: &[f64], off: f64, b: &[f64], rng: &mut ChainRng) -> Vec<f64> {
    let n = diag.len();
    let mut l = vec![0.0; n];
    let mut m = vec![0.0; n];
    l[0] = diag[0].sqrt();
    for j in 1..n {
        m[j - 1] = off / l[j - 1];
        l[j] = (diag[j] - m[j - 1] * m[j - 1]).sqrt();
    }
    // forward solve L w = b
    let mut w = vec![0.0; n];
    for j in 0..n {
        let prev = if j > 0 { m[j - 1] * w[j - 1] } else { 0.0 };
        w[j] = (b[j] - prev) / l[j];
    }
    // backward solve Lᵀ x = w + z
    let mut x = vec![0.0; n];
    for j in (0..n).rev() {
        let z: f64 = rng.sample(StandardNormal);
        let next = if j + 1 < n { m[j] * x[j + 1] } else { 0.0 };
        x[j] = (w[j] + z - next) / l[j];
    }
    x
}

/// Posterior draws of the Lee-Carter parameters for one (country, sex).
#[derive(Debug, Clone)]
pub struct LeeCarterDraws {
    pub country: String,
    pub sex: Sex,
    pub first_age: u32,
    pub first_year: i32,
    pub n_ages: usize,
    pub n_years: usize,
    pub draws: PosteriorDraws,
    pub max_rhat: f64,
    /// Set when any parameter has R-hat above 1.05.
    pub convergence_warning: Option<String>,
}

impl LeeCarterDraws {
    pub fn n_draws(&self) -> usize {
        self.draws.n_draws()
    }

    fn row(&self, d: usize) -> &[f64] {
        self.draws.draw(d)
    }

    pub fn alpha(&self, d: usize) -> &[f64] {
        &self.row(d)[..self.n_ages]
    }

    pub fn beta(&self, d: usize) -> &[f64] {
        &self.row(d)[self.n_ages..2 * self.n_ages]
    }

    pub fn kappa(&self, d: usize) -> &[f64] {
        &self.row(d)[2 * self.n_ages..2 * self.n_ages + self.n_years]
    }

    pub fn drift(&self, d: usize) -> f64 {
        self.row(d)[2 * self.n_ages + self.n_years]
    }

    pub fn sigma_eps(&self, d: usize) -> f64 {
        self.row(d)[2 * self.n_ages + self.n_years + 1]
    }

    pub fn sigma_v(&self, d: usize) -> f64 {
        self.row(d)[2 * self.n_ages + self.n_years + 2]
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.n_years as i32 - 1
    }

    pub fn max_age(&self) -> u32 {
        self.first_age + self.n_ages as u32 - 1
    }

    pub fn mean_drift(&self) -> f64 {
        (0..self.n_draws()).map(|d| self.drift(d)).sum::<f64>() / self.n_draws() as f64
    }
}

pub fn fit_lee_carter(table: &MortalityTable, mcmc: &McmcConfig) -> Result<LeeCarterDraws> {
    if table.n_years() < 2 {
        return Err(Error::Validation(format!(
            "{}/{}: Lee-Carter needs at least two years of data",
            table.country,
            table.sex.as_str()
        )));
    }
    let target = LeeCarterTarget::new(table);
    let draws = Sampler::new(&target)
        .with_blocks(Vec::new())
        .with_gibbs(&target)
        .run(mcmc)?;
    let max_rhat = (0..draws.n_params())
        .filter_map(|p| rhat(&draws.chains_of(p)))
        .fold(1.0f64, f64::max);
    let convergence_warning = (max_rhat > 1.05).then(|| {
        let msg = format!(
            "{}/{}: Lee-Carter max R-hat {max_rhat:.3} exceeds 1.05",
            table.country,
            table.sex.as_str()
        );
        log::warn!("{msg}");
        msg
    });
    Ok(LeeCarterDraws {
        country: table.country.clone(),
        sex: table.sex,
        first_age: table.first_age(),
        first_year: table.first_year(),
        n_ages: table.n_ages(),
        n_years: table.n_years(),
        draws,
        max_rhat,
        convergence_warning,
    })
}

/// Forward-simulated κ_{T+1..T+H} for a subset of posterior draws.
#[derive(Debug, Clone)]
pub struct KappaProjection {
    pub draw_indices: Vec<usize>,
    pub kappa: Vec<Vec<f64>>,
}

impl KappaProjection {
    pub fn horizon(&self) -> usize {
        self.kappa.first().map_or(0, |k| k.len())
    }
}

/// Evenly spaced draw indices, at most `max` of them (0 keeps all).
pub fn thin_indices(n: usize, max: usize) -> Vec<usize> {
    if max == 0 || max >= n {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Random walk with drift including innovation noise v ~ N(0, σ_v²).
pub fn project_kappa(fit: &LeeCarterDraws, horizon: usize, max_draws: usize, seed: u64) -> Result<KappaProjection> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("projection horizon must be >= 1".into()));
    }
    let mut rng = chain_rng(seed, 0);
    let draw_indices = thin_indices(fit.n_draws(), max_draws);
    let kappa = draw_indices
        .iter()
        .map(|&d| {
            let (u, sv) = (fit.drift(d), fit.sigma_v(d));
            let mut k = *fit.kappa(d).last().unwrap();
            (0..horizon)
                .map(|_| {
                    k += u + sv * rng.sample::<f64, _>(StandardNormal);
                    k
                })
                .collect()
        })
        .collect();
    Ok(KappaProjection { draw_indices, kappa })
}

/// S(x*) = exp(−Σ_{i<x*} m(x+i, Y+i)) for x* = 0..=H, forced to 0
/// once the cohort reaches the terminal age.
pub fn cohort_survival_from_rates<F: Fn(u32, i32) -> f64>(rate: F, x: u32, year: i32, horizon: u32) -> Result<Vec<f64>> {
    if x + horizon > TERMINAL_AGE {
        return Err(Error::InvalidArgument(format!(
            "cohort from age {x} over {horizon} years passes the terminal age {TERMINAL_AGE}"
        )));
    }
    let mut out = Vec::with_capacity(horizon as usize + 1);
    out.push(1.0);
    let mut cum = 0.0;
    for i in 0..horizon {
        cum += rate(x + i, year + i as i32);
        let s = if x + i + 1 >= TERMINAL_AGE { 0.0 } else { (-cum).exp() };
        out.push(s);
    }
    Ok(out)
}

/// Per-draw cohort survival S(0..=H) for one start age and year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSurvival {
    pub start_age: u32,
    pub start_year: i32,
    pub values: Vec<Vec<f64>>,
}

impl CohortSurvival {
    pub fn horizon(&self) -> usize {
        self.values.first().map_or(0, |v| v.len() - 1)
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.values.len() as f64;
        (0..=self.horizon())
            .map(|k| self.values.iter().map(|v| v[k]).sum::<f64>() / n)
            .collect()
    }
}

/// Cohort survival from the fitted surface: fitted α + βκ within the observed
/// years, projected κ beyond; ages above the table's last age reuse its rates.
pub fn cohort_survival(fit: &LeeCarterDraws, proj: &KappaProjection, x: u32, year: i32, horizon: u32) -> Result<CohortSurvival> {
    if x < fit.first_age {
        return Err(Error::InvalidArgument(format!("start age {x} is below the table's first age")));
    }
    if year < fit.first_year {
        return Err(Error::InvalidArgument(format!("start year {year} precedes the mortality data")));
    }
    let last = fit.last_year() + proj.horizon() as i32;
    if horizon > 0 && year + horizon as i32 - 1 > last {
        return Err(Error::InvalidArgument(format!(
            "cohort needs rates up to {}, projection ends at {last}",
            year + horizon as i32 - 1
        )));
    }
    let cap = fit.max_age();
    let values = proj
        .draw_indices
        .iter()
        .zip(&proj.kappa)
        .map(|(&d, pk)| {
            let (alpha, beta, kappa) = (fit.alpha(d), fit.beta(d), fit.kappa(d));
            let rate = |age: u32, yr: i32| {
                let a = (age.min(cap) - fit.first_age) as usize;
                let j = (yr - fit.first_year) as usize;
                let k = if j < fit.n_years { kappa[j] } else { pk[j - fit.n_years] };
                (alpha[a] + beta[a] * k).exp()
            };
            cohort_survival_from_rates(rate, x, year, horizon)
        })
        .collect::<Result<_>>()?;
    Ok(CohortSurvival {
        start_age: x,
        start_year: year,
        values,
    })
}

/// Cohort curves keyed by (country, sex, start age).
pub type CurveSet = BTreeMap<(String, Sex, u32), CohortSurvival>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalPopulation {
    pub study_id: String,
    /// Mean aggregated curve on an annual grid (years since study start).
    pub curve: SurvivalCurve,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Aggregated curve per retained Lee-Carter draw.
    pub draw_curves: Vec<Vec<f64>>,
    pub synthetic_times: Vec<Observation>,
    pub seed: u64,
}

/// Country × age weights within each sex, then sexes mixed by the female
/// proportion; computed per draw.
pub fn synthesize_external(curves: &CurveSet, meta: &StudyMeta) -> Result<ExternalPopulation> {
    let mut cells = Vec::new();
    let mut missing = Vec::new();
    for (sex, ws) in [(Sex::Female, meta.female_proportion), (Sex::Male, 1.0 - meta.female_proportion)] {
        if ws <= 0.0 {
            continue;
        }
        for (country, wc) in &meta.country_weights {
            for &(age, wa) in &meta.age_distribution {
                let w = ws * wc * wa;
                if w <= 0.0 {
                    continue;
                }
                match curves.get(&(country.clone(), sex, age)) {
                    Some(c) => cells.push((w, c)),
                    None => missing.push(format!("{country}/{}/{age}", sex.as_str())),
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCurves(format!("study {}: {}", meta.study_id, missing.join(", "))));
    }
    let n_draws = cells.iter().map(|c| c.1.values.len()).min().unwrap_or(0);
    if n_draws == 0 || cells.iter().any(|c| c.1.values.len() != n_draws) {
        return Err(Error::Validation(format!(
            "study {}: external curves have mismatched draw counts",
            meta.study_id
        )));
    }
    let len = cells.iter().map(|c| c.1.horizon() + 1).max().unwrap();
    let total_w: f64 = cells.iter().map(|c| c.0).sum();
    let draw_curves: Vec<Vec<f64>> = (0..n_draws)
        .map(|d| {
            let mut s = vec![0.0; len];
            for (w, c) in &cells {
                for (k, v) in c.values[d].iter().enumerate() {
                    s[k] += w / total_w * v;
                }
            }
            s[0] = 1.0;
            for k in 1..len {
                s[k] = s[k].min(s[k - 1]).clamp(0.0, 1.0);
            }
            s
        })
        .collect();
    let mut mean = vec![0.0; len];
    let mut lower = vec![0.0; len];
    let mut upper = vec![0.0; len];
    for k in 0..len {
        let mut col: Vec<f64> = draw_curves.iter().map(|c| c[k]).collect();
        mean[k] = col.iter().sum::<f64>() / n_draws as f64;
        col.sort_by(|a, b| a.total_cmp(b));
        lower[k] = crate::inference::quantile_sorted(&col, 0.025);
        upper[k] = crate::inference::quantile_sorted(&col, 0.975);
    }
    mean[0] = 1.0;
    for k in 1..len {
        mean[k] = mean[k].min(mean[k - 1]);
    }
    let times: Vec<f64> = (0..len).map(|k| k as f64).collect();
    let curve = SurvivalCurve::new(times, mean)?;
    if curve.terminal() >= 0.5 {
        log::warn!("study {}: external curve never drops below 0.5", meta.study_id);
    }
    Ok(ExternalPopulation {
        study_id: meta.study_id.clone(),
        curve,
        lower,
        upper,
        draw_curves,
        synthetic_times: Vec::new(),
        seed: 0,
    })
}

/// Inverse-transform sampling on the piecewise-linear curve. Uniforms below
/// the terminal survival are censored at the final grid point.
pub fn sample_synthetic_times(curve: &SurvivalCurve, n: usize, seed: u64) -> Vec<Observation> {
    let mut rng = chain_rng(seed, 0);
    if curve.terminal() >= 0.5 {
        log::warn!("synthetic sampling from a curve whose median is undefined");
    }
    (0..n).map(|_| invert(curve, rng.random::<f64>())).collect()
}

fn invert(curve: &SurvivalCurve, u: f64) -> Observation {
    let (t, s) = (curve.times(), curve.values());
    if u < curve.terminal() {
        return Observation::new(curve.t_max(), false);
    }
    // first grid point with S <= u; values are nonincreasing
    let j = s.partition_point(|&v| v > u).max(1);
    let (t0, t1, s0, s1) = (t[j - 1], t[j], s[j - 1], s[j]);
    let time = if s0 == s1 { t0 } else { t0 + (s0 - u) / (s0 - s1) * (t1 - t0) };
    Observation::new(time.max(1e-9), true)
}

impl ExternalPopulation {
    /// Draw synthetic times from the mean curve, or, with `projection_draws`
    /// > 0, spread them across that many per-draw curves.
    pub fn with_synthetic(mut self, n: usize, projection_draws: usize, seed: u64) -> Result<Self> {
        self.seed = seed;
        if projection_draws == 0 {
            self.synthetic_times = sample_synthetic_times(&self.curve, n, seed);
            return Ok(self);
        }
        let idx = thin_indices(self.draw_curves.len(), projection_draws);
        let times: Vec<f64> = self.curve.times().to_vec();
        let mut out = Vec::with_capacity(n);
        for (k, &d) in idx.iter().enumerate() {
            let share = n / idx.len() + usize::from(k < n % idx.len());
            let c = SurvivalCurve::new(times.clone(), self.draw_curves[d].clone())?;
            out.extend(sample_synthetic_times(&c, share, seed.wrapping_add(k as u64 + 1)));
        }
        self.synthetic_times = out;
        Ok(self)
    }

    /// Hard cap for extrapolation: years until the youngest weighted patient
    /// reaches the terminal age.
    pub fn horizon(&self) -> f64 {
        self.curve.t_max()
    }

    /// `time,survival_mean,survival_lo,survival_hi`
    pub fn write_curve_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["time", "survival_mean", "survival_lo", "survival_hi"])?;
        for (k, t) in self.curve.times().iter().enumerate() {
            wtr.write_record([
                format!("{t:?}"),
                format!("{:?}", self.curve.values()[k]),
                format!("{:?}", self.lower[k]),
                format!("{:?}", self.upper[k]),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// `time,event`
    pub fn write_synthetic_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["time", "event"])?;
        for o in &self.synthetic_times {
            wtr.write_record([format!("{:?}", o.time), if o.event { "1" } else { "0" }.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn read_synthetic_csv(path: &std::path::Path) -> Result<Vec<Observation>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: k + 2,
            msg: m.to_string(),
        };
        let t: f64 = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad time"))?;
        let e = match rec.get(1) {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(bad("event must be 0 or 1")),
        };
        out.push(Observation::new(t, e));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSettings {
    pub curve_draws: usize,
    pub seed: u64,
}

/// Fit every table, project to the terminal age of the youngest weighted
/// patient and build one external population per study.
pub fn build_external_populations(
    tables: &[MortalityTable],
    studies: &BTreeMap<String, StudyMeta>,
    mcmc: &McmcConfig,
    settings: ProjectionSettings,
) -> Result<(Vec<LeeCarterDraws>, BTreeMap<String, ExternalPopulation>)> {
    let mut fits = Vec::new();
    for (k, t) in tables.iter().enumerate() {
        let cfg = McmcConfig {
            seed: settings.seed.wrapping_add(k as u64),
            ..mcmc.clone()
        };
        fits.push(fit_lee_carter(t, &cfg)?);
    }
    let mut out = BTreeMap::new();
    for (id, meta) in studies {
        let mut curves = CurveSet::new();
        for (k, fit) in fits.iter().enumerate() {
            let needed_sex = match fit.sex {
                Sex::Female => meta.female_proportion > 0.0,
                Sex::Male => meta.female_proportion < 1.0,
            };
            if !needed_sex || !meta.country_weights.get(&fit.country).is_some_and(|w| *w > 0.0) {
                continue;
            }
            let start = meta.start_year.unwrap_or(fit.last_year() + 1);
            let min_age = meta.age_distribution.iter().map(|a| a.0).min().unwrap_or(0);
            let max_h = TERMINAL_AGE.saturating_sub(min_age);
            let needed = (start + max_h as i32 - 1 - fit.last_year()).max(1) as usize;
            let proj = project_kappa(fit, needed, settings.curve_draws, settings.seed.wrapping_add(1000 + k as u64))?;
            for &(age, w) in &meta.age_distribution {
                if w <= 0.0 {
                    continue;
                }
                let h = TERMINAL_AGE.saturating_sub(age);
                curves.insert((fit.country.clone(), fit.sex, age), cohort_survival(fit, &proj, age, start, h)?);
            }
        }
        out.insert(id.clone(), synthesize_external(&curves, meta)?);
    }
    Ok((fits, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn curve_from(f: impl Fn(f64) -> f64, step: f64, t_max: f64) -> SurvivalCurve {
        let n = (t_max / step).round() as usize;
        let t: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
        let s = t.iter().map(|&x| f(x)).collect();
        SurvivalCurve::new(t, s).unwrap()
    }

    #[test]
    fn constant_rate_closed_form() {
        let s = cohort_survival_from_rates(|_, _| 0.02, 40, 2000, 10).unwrap();
        assert!((s[10] - 0.8187307530779818).abs() < 1e-12);
        assert_eq!(s[0], 1.0);
    }

    #[test]
    fn terminal_age_closes_curve() {
        let s = cohort_survival_from_rates(|_, _| 0.01, 100, 2000, 10).unwrap();
        assert_eq!(*s.last().unwrap(), 0.0);
        assert!(s[9] > 0.0);
        assert!(cohort_survival_from_rates(|_, _| 0.01, 100, 2000, 11).is_err());
    }

    #[test]
    fn increasing_rates_beat_fixed_exponential() {
        let rate = |age: u32, _| 0.01 + 0.001 * age as f64;
        let s = cohort_survival_from_rates(rate, 50, 2000, 30).unwrap();
        for (k, v) in s.iter().enumerate() {
            assert!(*v <= (-0.06 * k as f64).exp() + 1e-15);
        }
    }

    fn table_from(alpha: &[f64], beta: &[f64], kappa: &[f64], sigma: f64, seed: u64) -> MortalityTable {
        let mut rng = chain_rng(seed, 7);
        let rates = alpha
            .iter()
            .zip(beta)
            .map(|(a, b)| {
                kappa
                    .iter()
                    .map(|k| (a + b * k + sigma * rng.sample::<f64, _>(StandardNormal)).exp())
                    .collect()
            })
            .collect();
        MortalityTable::new("XX", Sex::Female, 0, 2000, rates).unwrap()
    }

    fn quick() -> McmcConfig {
        McmcConfig {
            chains: 2,
            warmup: 300,
            samples: 300,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn single_year_rejected() {
        let t = MortalityTable::new("XX", Sex::Male, 0, 2000, vec![vec![0.01]; 5]).unwrap();
        assert!(fit_lee_carter(&t, &quick()).is_err());
    }

    #[test]
    fn constraints_hold_per_draw() {
        let x = 20;
        let alpha: Vec<f64> = (0..x).map(|a| -7.0 + 0.2 * a as f64).collect();
        let beta = vec![1.0 / x as f64; x];
        let kappa: Vec<f64> = (0..15).map(|j| 3.0 - 0.4 * j as f64).collect();
        let fit = fit_lee_carter(&table_from(&alpha, &beta, &kappa, 0.02, 1), &quick()).unwrap();
        for d in (0..fit.n_draws()).step_by(37) {
            assert!((fit.beta(d).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(fit.kappa(d).iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn constant_surface_is_degenerate() {
        let t = MortalityTable::new("XX", Sex::Male, 0, 2000, vec![vec![0.02; 12]; 10]).unwrap();
        let fit = fit_lee_carter(&t, &quick()).unwrap();
        let d = fit.n_draws() - 1;
        for a in 0..10 {
            assert!((fit.alpha(d)[a] - 0.02f64.ln()).abs() < 1e-2);
            for j in 0..12 {
                assert!((fit.beta(d)[a] * fit.kappa(d)[j]).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn deterministic_projection() {
        let x = 10;
        let alpha: Vec<f64> = (0..x).map(|a| -6.0 + 0.3 * a as f64).collect();
        let beta = vec![0.1; x];
        let kappa: Vec<f64> = (0..10).map(|j| 2.0 - 0.5 * j as f64).collect();
        let mut fit = fit_lee_carter(&table_from(&alpha, &beta, &kappa, 0.01, 2), &quick()).unwrap();
        // zero innovation variance, fixed drift
        let p = fit.draws.n_params();
        let names = fit.draws.names().to_vec();
        let mut raw = fit.draws.raw().to_vec();
        for row in raw.chunks_mut(p) {
            row[p - 3] = -0.1;
            row[p - 1] = 0.0;
        }
        fit.draws = PosteriorDraws::new(names, fit.draws.n_chains(), fit.draws.n_iterations(), raw).unwrap();
        let proj = project_kappa(&fit, 5, 0, 1).unwrap();
        for (k, &d) in proj.kappa.iter().zip(&proj.draw_indices) {
            let last = *fit.kappa(d).last().unwrap();
            for h in 0..5 {
                assert!((k[h] - (last - 0.1 * (h + 1) as f64)).abs() < 1e-12);
            }
        }
        assert!(project_kappa(&fit, 0, 0, 1).is_err());
    }

    #[test]
    fn projected_drift_matches_mean_drift() {
        let x = 10;
        let alpha: Vec<f64> = (0..x).map(|a| -6.0 + 0.3 * a as f64).collect();
        let beta = vec![0.1; x];
        let mut rng = chain_rng(3, 3);
        let mut k = 1.0;
        let kappa: Vec<f64> = (0..25)
            .map(|_| {
                k += -0.2 + 0.1 * rng.sample::<f64, _>(StandardNormal);
                k
            })
            .collect();
        let cfg = McmcConfig {
            chains: 4,
            warmup: 500,
            samples: 1000,
            seed: 11,
            ..Default::default()
        };
        let fit = fit_lee_carter(&table_from(&alpha, &beta, &kappa, 0.01, 4), &cfg).unwrap();
        let proj = project_kappa(&fit, 10, 0, 9).unwrap();
        let diffs: Vec<f64> = proj
            .kappa
            .iter()
            .zip(&proj.draw_indices)
            .map(|(p, &d)| p[9] - fit.kappa(d).last().unwrap())
            .collect();
        let n = diffs.len() as f64;
        let m = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert_eq!(diffs.len(), 4000);
        assert!((m - 10.0 * fit.mean_drift()).abs() < 3.0 * sd / n.sqrt(), "{m} vs {}", 10.0 * fit.mean_drift());
    }

    fn single_meta(female: f64) -> StudyMeta {
        StudyMeta {
            study_id: "S1".into(),
            arms: vec!["A".into(), "B".into()],
            country_weights: BTreeMap::from([("GBR".into(), 1.0)]),
            age_distribution: vec![(60, 1.0)],
            female_proportion: female,
            start_year: None,
        }
    }

    fn annual(rate: f64, age: u32) -> CohortSurvival {
        CohortSurvival {
            start_age: age,
            start_year: 2000,
            values: vec![cohort_survival_from_rates(|_, _| rate, age, 2000, TERMINAL_AGE - age).unwrap()],
        }
    }

    #[test]
    fn degenerate_weights_return_input_curve() {
        let mut curves = CurveSet::new();
        let c = annual(0.03, 60);
        curves.insert(("GBR".into(), Sex::Female, 60), c.clone());
        let pop = synthesize_external(&curves, &single_meta(1.0)).unwrap();
        assert_eq!(pop.curve.values(), &c.values[0][..]);
    }

    #[test]
    fn sex_mix_is_convex_combination() {
        let mut curves = CurveSet::new();
        curves.insert(("GBR".into(), Sex::Female, 60), annual(0.01, 60));
        curves.insert(("GBR".into(), Sex::Male, 60), annual(0.03, 60));
        let pop = synthesize_external(&curves, &single_meta(0.5)).unwrap();
        let expect = 0.5 * ((-0.1f64).exp() + (-0.3f64).exp());
        assert!((pop.curve.values()[10] - expect).abs() < 1e-12);
        assert!((expect - 0.8228).abs() < 1e-4);
    }

    #[test]
    fn missing_cells_are_listed() {
        let mut curves = CurveSet::new();
        curves.insert(("GBR".into(), Sex::Female, 60), annual(0.01, 60));
        match synthesize_external(&curves, &single_meta(0.5)).unwrap_err() {
            Error::MissingCurves(m) => assert!(m.contains("GBR/male/60")),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn synthetic_mean_matches_exponential() {
        let c = curve_from(|t| (-0.1 * t).exp(), 0.01, 120.0);
        let obs = sample_synthetic_times(&c, 100_000, 42);
        let mean = obs.iter().map(|o| o.time).sum::<f64>() / obs.len() as f64;
        let se = 10.0 / (obs.len() as f64).sqrt();
        assert!((mean - 10.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn synthetic_sampling_is_reproducible() {
        let c = curve_from(|t| (-0.1 * t).exp(), 0.1, 50.0);
        assert_eq!(sample_synthetic_times(&c, 1, 7), sample_synthetic_times(&c, 1, 7));
    }

    #[test]
    fn truncated_curve_censors_terminal_mass() {
        let c = SurvivalCurve::new(vec![0.0, 5.0], vec![1.0, 0.3]).unwrap();
        let obs = sample_synthetic_times(&c, 20_000, 3);
        let cens = obs.iter().filter(|o| !o.event).count() as f64 / obs.len() as f64;
        assert!((cens - 0.3).abs() < 3.0 * (0.3f64 * 0.7 / 20_000.0).sqrt());
        assert!(obs.iter().filter(|o| !o.event).all(|o| o.time == 5.0));
        assert!(obs.iter().all(|o| o.time > 0.0));
    }

    proptest! {
        #[test]
        fn matches_naive_diagonal_sum(
            rates in proptest::collection::vec(1e-4f64..0.5, 30 * 30),
            x in 0u32..20,
            h in 0u32..10,
        ) {
            let rate = |age: u32, year: i32| rates[(age as usize) * 30 + (year - 2000) as usize];
            let s = cohort_survival_from_rates(rate, x, 2000, h).unwrap();
            for k in 0..=h as usize {
                let mut naive = 0.0;
                for i in 0..k {
                    naive += rates[(x as usize + i) * 30 + i];
                }
                prop_assert!((s[k] - (-naive).exp()).abs() < 1e-12);
            }
            prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn weighting_stays_within_envelope(
            rf in 0.001f64..0.1, rm in 0.001f64..0.1, female in 0.0f64..=1.0,
        ) {
            let mut curves = CurveSet::new();
            curves.insert(("GBR".into(), Sex::Female, 60), annual(rf, 60));
            curves.insert(("GBR".into(), Sex::Male, 60), annual(rm, 60));
            let pop = synthesize_external(&curves, &single_meta(female)).unwrap();
            let a = &curves[&("GBR".into(), Sex::Female, 60)].values[0];
            let b = &curves[&("GBR".into(), Sex::Male, 60)].values[0];
            for (k, v) in pop.curve.values().iter().enumerate() {
                prop_assert!(*v >= a[k].min(b[k]) - 1e-12 && *v <= a[k].max(b[k]) + 1e-12);
            }
        }
    }
}

//! Random-effects network meta-analysis of LYG contrasts with per-study
//! power-likelihood weights.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{quantile_sorted, rhat, ChainRng, GibbsStep, LogDensity, McmcConfig, PosteriorDraws, Sampler};
use crate::mst::ContrastData;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const JITTER: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Study {
    id: String,
    /// Treatment indices in arm order; arms[0] is the study control.
    arms: Vec<usize>,
    y: DVector<f64>,
    sigma: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    logdet: f64,
    weight: f64,
    /// Maps basic parameters d_2..d_K onto the study's contrasts.
    design: DMatrix<f64>,
}

impl Study {
    fn m(&self) -> usize {
        self.y.len()
    }

    fn mean(&self, d: &[f64]) -> DVector<f64> {
        let full = |t: usize| if t == 0 { 0.0 } else { d[t - 1] };
        DVector::from_iterator(self.m(), self.arms[1..].iter().map(|&t| full(t) - full(self.arms[0])))
    }
}

/// Compound-symmetric correlation 0.5·(I + J) of multi-arm random effects.
fn cs_matrix(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.5 })
}

fn cs_inverse(m: usize) -> DMatrix<f64> {
    let c = 1.0 / (m as f64 + 1.0);
    DMatrix::from_fn(m, m, |i, j| 2.0 * (if i == j { 1.0 } else { 0.0 } - c))
}

/// Treatments, studies and weights of a connected network.
#[derive(Debug, Clone)]
pub struct NmaModel {
    treatments: Vec<String>,
    studies: Vec<Study>,
}

impl NmaModel {
    /// `weights` aligns with `data`; `reference` defaults to the control arm
    /// of the first study. `jitter` adds 1e-8 to singular covariance diagonals.
    pub fn new(data: &[ContrastData], weights: &[f64], reference: Option<&str>, jitter: bool) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no contrast data".into()));
        }
        if weights.len() != data.len() {
            return Err(Error::InvalidArgument("one weight per study required".into()));
        }
        let mut treatments: Vec<String> = Vec::new();
        if let Some(r) = reference {
            treatments.push(r.to_string());
        }
        for c in data {
            for t in &c.treatments {
                if !treatments.contains(t) {
                    treatments.push(t.clone());
                }
            }
        }
        if let Some(r) = reference {
            if !data.iter().any(|c| c.treatments.iter().any(|t| t == r)) {
                return Err(Error::Reference(format!("reference treatment {r} is not in any study")));
            }
        }
        let idx: BTreeMap<&str, usize> = treatments.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        check_connected(&treatments, data)?;
        let k = treatments.len();
        let mut studies = Vec::with_capacity(data.len());
        for (c, &w) in data.iter().zip(weights) {
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::Validation(format!("study {}: weight {w} outside (0, 1]", c.study_id)));
            }
            let arms: Vec<usize> = c.treatments.iter().map(|t| idx[t.as_str()]).collect();
            let m = arms.len() - 1;
            let mut sigma = c.cov_matrix();
            let mut chol = sigma.clone().cholesky();
            if chol.is_none() || c.degenerate {
                if !jitter {
                    return Err(Error::SingularCovariance { study: c.study_id.clone() });
                }
                log::warn!("study {}: singular covariance, adding {JITTER} to the diagonal", c.study_id);
                for i in 0..m {
                    sigma[(i, i)] += JITTER;
                }
                chol = sigma.clone().cholesky();
            }
            let chol = chol.ok_or_else(|| Error::SingularCovariance { study: c.study_id.clone() })?;
            let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let sigma_inv = chol.inverse();
            let mut design = DMatrix::zeros(m, k - 1);
            for (r, &t) in arms[1..].iter().enumerate() {
                if t > 0 {
                    design[(r, t - 1)] += 1.0;
                }
                if arms[0] > 0 {
                    design[(r, arms[0] - 1)] -= 1.0;
                }
            }
            studies.push(Study {
                id: c.study_id.clone(),
                arms,
                y: DVector::from_column_slice(&c.y),
                sigma,
                sigma_inv,
                logdet,
                weight: w,
                design,
            });
        }
        Ok(Self { treatments, studies })
    }

    pub fn treatments(&self) -> &[String] {
        &self.treatments
    }

    pub fn n_treatments(&self) -> usize {
        self.treatments.len()
    }

    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    fn n_deltas(&self) -> usize {
        self.studies.iter().map(|s| s.m()).sum()
    }

    /// Same network with every weight replaced.
    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.studies.len() || weights.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return Err(Error::InvalidArgument("weights must align with studies and lie in (0, 1]".into()));
        }
        let mut out = self.clone();
        for (s, w) in out.studies.iter_mut().zip(weights) {
            s.weight = *w;
        }
        Ok(out)
    }

    fn study_loglik(s: &Study, delta: &DVector<f64>) -> f64 {
        let r = &s.y - delta;
        let q = (r.transpose() * &s.sigma_inv * &r)[(0, 0)];
        -0.5 * (s.m() as f64 * LN_2PI + s.logdet + q)
    }

    /// Σ_j ω_j · log N(y_j; δ_j, Σ_j).
    pub fn log_likelihood(&self, deltas: &[DVector<f64>]) -> f64 {
        self.studies
            .iter()
            .zip(deltas)
            .map(|(s, d)| s.weight * Self::study_loglik(s, d))
            .sum()
    }

    /// Σ_j log N(y_j; δ_j, Σ_j), ignoring the weights.
    pub fn standard_log_likelihood(&self, deltas: &[DVector<f64>]) -> f64 {
        self.studies.iter().zip(deltas).map(|(s, d)| Self::study_loglik(s, d)).sum()
    }

    /// Study means d_{T_k} − d_{T_1} for the basic parameters d_2..d_K.
    pub fn study_means(&self, d: &[f64]) -> Vec<DVector<f64>> {
        self.studies.iter().map(|s| s.mean(d)).collect()
    }

    pub fn study_ids(&self) -> Vec<String> {
        self.studies.iter().map(|s| s.id.clone()).collect()
    }
}

fn check_connected(treatments: &[String], data: &[ContrastData]) -> Result<()> {
    let n = treatments.len();
    let idx: BTreeMap<&str, usize> = treatments.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for c in data {
        let first = idx[c.treatments[0].as_str()];
        for t in &c.treatments[1..] {
            let (a, b) = (find(&mut parent, first), find(&mut parent, idx[t.as_str()]));
            parent[a] = b;
        }
    }
    let mut comps: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (i, t) in treatments.iter().enumerate() {
        let r = find(&mut parent, i);
        comps.entry(r).or_default().push(t);
    }
    if comps.len() > 1 {
        let listed: Vec<String> = comps.values().map(|c| format!("{{{}}}", c.join(", "))).collect();
        return Err(Error::Disconnected(listed.join(" / ")));
    }
    Ok(())
}

/// Sequential-conditional log density of δ_j (arms 2..A) given the study
/// means μ and τ: δ_k ~ N(ν_k, k/(2(k−1))·τ²) with arm index k = 2..A.
pub fn random_effects_logprior(deltas: &[DVector<f64>], means: &[DVector<f64>], tau: f64) -> f64 {
    let mut lp = 0.0;
    for (delta, mu) in deltas.iter().zip(means) {
        let mut dev_sum = 0.0;
        for i in 0..delta.len() {
            let k = (i + 2) as f64;
            let nu = mu[i] + dev_sum / (k - 1.0);
            let var = k / (2.0 * (k - 1.0)) * tau * tau;
            lp += -0.5 * (LN_2PI + var.ln() + (delta[i] - nu).powi(2) / var);
            dev_sum += delta[i] - mu[i];
        }
    }
    lp
}

/// Draw δ (arms 2..A) from the sequential conditional construction.
pub fn sample_random_effects<R: Rng + ?Sized>(mean: &[f64], tau: f64, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(mean.len());
    let mut dev_sum = 0.0;
    for (i, mu) in mean.iter().enumerate() {
        let k = (i + 2) as f64;
        let nu = mu + dev_sum / (k - 1.0);
        let sd = (k / (2.0 * (k - 1.0))).sqrt() * tau;
        let v = nu + sd * rng.sample::<f64, _>(StandardNormal);
        dev_sum += v - mu;
        out.push(v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauMode {
    /// τ ~ half-Normal(0, tau_prior_sd).
    Random,
    /// τ held at a value; 0 gives the fixed-effect model without δ parameters.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmaSettings {
    pub d_prior_sd: f64,
    pub tau_prior_sd: f64,
    pub tau: TauMode,
}

impl Default for NmaSettings {
    fn default() -> Self {
        Self {
            d_prior_sd: 10.0,
            tau_prior_sd: 1.0,
            tau: TauMode::Random,
        }
    }
}

struct NmaTarget<'a> {
    model: &'a NmaModel,
    settings: NmaSettings,
    n_d: usize,
    has_tau: bool,
    has_delta: bool,
}

impl<'a> NmaTarget<'a> {
    fn new(model: &'a NmaModel, settings: NmaSettings) -> Result<Self> {
        let (has_tau, has_delta) = match settings.tau {
            TauMode::Random => (true, true),
            TauMode::Fixed(t) if t > 0.0 => (false, true),
            TauMode::Fixed(t) if t == 0.0 => (false, false),
            TauMode::Fixed(t) => return Err(Error::InvalidArgument(format!("fixed tau {t} must be >= 0"))),
        };
        if !(settings.d_prior_sd > 0.0 && settings.tau_prior_sd > 0.0) {
            return Err(Error::InvalidArgument("prior sds must be positive".into()));
        }
        if model.n_treatments() < 2 {
            return Err(Error::InvalidArgument("network needs at least two treatments".into()));
        }
        Ok(Self {
            model,
            settings,
            n_d: model.n_treatments() - 1,
            has_tau,
            has_delta,
        })
    }

    fn tau_of(&self, x: &[f64]) -> f64 {
        match self.settings.tau {
            TauMode::Random => x[self.n_d].exp(),
            TauMode::Fixed(t) => t,
        }
    }

    fn delta_offset(&self) -> usize {
        self.n_d + usize::from(self.has_tau)
    }

    fn deltas(&self, x: &[f64]) -> Vec<DVector<f64>> {
        let d = &x[..self.n_d];
        if !self.has_delta {
            return self.model.study_means(d);
        }
        let mut off = self.delta_offset();
        self.model
            .studies
            .iter()
            .map(|s| {
                let v = DVector::from_column_slice(&x[off..off + s.m()]);
                off += s.m();
                v
            })
            .collect()
    }

    fn log_prior_d(&self, d: &[f64]) -> f64 {
        let s2 = self.settings.d_prior_sd.powi(2);
        d.iter().map(|v| -0.5 * v * v / s2).sum()
    }

    fn log_prior_log_tau(&self, log_tau: f64) -> f64 {
        let tau = log_tau.exp();
        -0.5 * tau * tau / self.settings.tau_prior_sd.powi(2) + log_tau
    }

    /// Per-study marginal covariance τ²R + Σ/ω and its inverse.
    fn marginal_precisions(&self, tau: f64) -> Option<Vec<(DMatrix<f64>, f64)>> {
        self.model
            .studies
            .iter()
            .map(|s| {
                let v = cs_matrix(s.m()) * (tau * tau) + &s.sigma / s.weight;
                let ch = v.cholesky()?;
                let logdet = 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
                Some((ch.inverse(), logdet))
            })
            .collect()
    }

    fn d_posterior(&self, prec: &[(DMatrix<f64>, f64)]) -> (DMatrix<f64>, DVector<f64>) {
        let mut p = DMatrix::identity(self.n_d, self.n_d) / self.settings.d_prior_sd.powi(2);
        let mut b = DVector::zeros(self.n_d);
        for (s, (w, _)) in self.model.studies.iter().zip(prec) {
            let xtw = s.design.transpose() * w;
            p += &xtw * &s.design;
            b += xtw * &s.y;
        }
        (p, b)
    }

    /// log p(log τ | y) up to a constant, with d and δ integrated out.
    fn log_marginal_tau(&self, log_tau: f64) -> f64 {
        let tau = log_tau.exp();
        let Some(prec) = self.marginal_precisions(tau) else {
            return f64::NEG_INFINITY;
        };
        let mut lp = self.log_prior_log_tau(log_tau);
        for (s, (w, logdet)) in self.model.studies.iter().zip(&prec) {
            lp -= 0.5 * (logdet + (s.y.transpose() * w * &s.y)[(0, 0)]);
        }
        let (p, b) = self.d_posterior(&prec);
        let Some(ch) = p.cholesky() else {
            return f64::NEG_INFINITY;
        };
        let logdet_p = 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let mean = ch.solve(&b);
        lp + 0.5 * b.dot(&mean) - 0.5 * logdet_p
    }

    /// Exact draw of (d, δ) given τ.
    fn draw_effects(&self, x: &mut [f64], rng: &mut ChainRng) {
        let tau = self.tau_of(x);
        let Some(prec) = self.marginal_precisions(tau) else {
            return;
        };
        let (p, b) = self.d_posterior(&prec);
        let Some(d) = mvn_from_precision(p, &b, rng) else {
            return;
        };
        x[..self.n_d].copy_from_slice(d.as_slice());
        if !self.has_delta {
            return;
        }
        let mut off = self.delta_offset();
        for s in &self.model.studies {
            let m = s.m();
            let mu = s.mean(d.as_slice());
            let prior_prec = cs_inverse(m) / (tau * tau);
            let lik_prec = &s.sigma_inv * s.weight;
            let q = &prior_prec + &lik_prec;
            let rhs = &prior_prec * mu + &lik_prec * &s.y;
            if let Some(v) = mvn_from_precision(q, &rhs, rng) {
                x[off..off + m].copy_from_slice(v.as_slice());
            }
            off += m;
        }
    }
}

/// Draw from N(P⁻¹b, P⁻¹).
fn mvn_from_precision(p: DMatrix<f64>, b: &DVector<f64>, rng: &mut ChainRng) -> Option<DVector<f64>> {
    let n = b.len();
    let ch = p.cholesky()?;
    let mean = ch.solve(b);
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let noise = ch.l().transpose().solve_upper_triangular(&z)?;
    Some(mean + noise)
}

impl LogDensity for NmaTarget<'_> {
    fn dim(&self) -> usize {
        self.delta_offset() + if self.has_delta { self.model.n_deltas() } else { 0 }
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let d = &x[..self.n_d];
        let deltas = self.deltas(x);
        let mut lp = self.model.log_likelihood(&deltas) + self.log_prior_d(d);
        if self.has_delta {
            let tau = self.tau_of(x);
            let means = self.model.study_means(d);
            for ((delta, mu), s) in deltas.iter().zip(&means).zip(&self.model.studies) {
                let r = delta - mu;
                let m = s.m() as f64;
                lp += -0.5 * (r.transpose() * cs_inverse(s.m()) * &r)[(0, 0)] / (tau * tau) - m * tau.ln();
            }
        }
        if self.has_tau {
            lp += self.log_prior_log_tau(x[self.n_d]);
        }
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }

    fn param_names(&self) -> Vec<String> {
        let mut n: Vec<String> = self.model.treatments[1..].iter().map(|t| format!("d[{t}]")).collect();
        if self.has_tau {
            n.push("tau".into());
        }
        if self.has_delta {
            for s in &self.model.studies {
                for &t in &s.arms[1..] {
                    n.push(format!("delta[{},{}]", s.id, self.model.treatments[t]));
                }
            }
        }
        n
    }

    fn initial_point(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        if self.has_tau {
            x[self.n_d] = (0.5 * self.settings.tau_prior_sd).ln();
        }
        if self.has_delta {
            let mut off = self.delta_offset();
            for s in &self.model.studies {
                x[off..off + s.m()].copy_from_slice(s.y.as_slice());
                off += s.m();
            }
        }
        x
    }

    fn transform(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        if self.has_tau {
            out[self.n_d] = x[self.n_d].exp();
        }
        out
    }
}

impl GibbsStep for NmaTarget<'_> {
    fn update(&self, x: &mut [f64], rng: &mut ChainRng) {
        if self.has_tau {
            let mut cur = x[self.n_d];
            let mut lp = self.log_marginal_tau(cur);
            for _ in 0..3 {
                let prop = cur + 0.5 * rng.sample::<f64, _>(StandardNormal);
                let lq = self.log_marginal_tau(prop);
                if lq.is_finite() && rng.random::<f64>().ln() < lq - lp {
                    cur = prop;
                    lp = lq;
                }
            }
            x[self.n_d] = cur;
        }
        self.draw_effects(x, rng);
    }
}

/// Posterior of the basic parameters (and τ, δ when present).
#[derive(Debug, Clone)]
pub struct NmaFit {
    pub treatments: Vec<String>,
    pub draws: PosteriorDraws,
    pub max_rhat: f64,
    pub convergence_warning: Option<String>,
}

pub fn fit(model: &NmaModel, settings: &NmaSettings, mcmc: &McmcConfig) -> Result<NmaFit> {
    let target = NmaTarget::new(model, *settings)?;
    let blocks = if target.has_tau { vec![vec![target.n_d]] } else { Vec::new() };
    let draws = Sampler::new(&target).with_blocks(blocks).with_gibbs(&target).run(mcmc)?;
    let n_main = target.n_d + usize::from(target.has_tau);
    let max_rhat = (0..n_main)
        .filter_map(|p| rhat(&draws.chains_of(p)))
        .fold(1.0f64, f64::max);
    let convergence_warning = (max_rhat > 1.05).then(|| {
        let msg = format!("NMA max R-hat {max_rhat:.3} exceeds 1.05");
        log::warn!("{msg}");
        msg
    });
    Ok(NmaFit {
        treatments: model.treatments.clone(),
        draws,
        max_rhat,
        convergence_warning,
    })
}

impl NmaFit {
    pub fn n_treatments(&self) -> usize {
        self.treatments.len()
    }

    /// Per-draw effects of all K treatments with d_1 = 0.
    pub fn effects(&self) -> Vec<Vec<f64>> {
        effects_from_draws(&self.draws, &self.treatments).expect("fit draws hold every basic parameter")
    }

    pub fn d_summaries(&self) -> Vec<crate::inference::ParamSummary> {
        (0..self.n_treatments() - 1).map(|p| self.draws.summarize(p)).collect()
    }

    pub fn write_outputs(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_d_summary(&mut std::fs::File::create(dir.join("d_summary.csv"))?, &self.treatments, &self.d_summaries())?;
        let mut w = csv::Writer::from_path(dir.join("treatments.csv"))?;
        w.write_record(["treatment"])?;
        for t in &self.treatments {
            w.write_record([t])?;
        }
        w.flush()?;
        let effects = self.effects();
        let ranks = rank_probabilities(&effects);
        write_matrix(
            &mut std::fs::File::create(dir.join("ranks.csv"))?,
            &self.treatments,
            &(1..=self.n_treatments()).map(|r| format!("rank{r}")).collect::<Vec<_>>(),
            &ranks,
        )?;
        let s = sucra(&ranks);
        let mut w = csv::Writer::from_path(dir.join("sucra.csv"))?;
        w.write_record(["treatment", "sucra"])?;
        for (t, v) in self.treatments.iter().zip(&s) {
            w.write_record([t.clone(), format!("{v:?}")])?;
        }
        w.flush()?;
        write_league(&mut std::fs::File::create(dir.join("league.csv"))?, &league_table(&effects, &self.treatments))?;
        self.draws.write_csv(std::fs::File::create(dir.join("draws.csv"))?)?;
        crate::data_io::write_json(&dir.join("diagnostics.json"), &self.draws.diagnostics_json())?;
        Ok(())
    }
}

/// Rebuild effect vectors from draws holding `d[T]` columns.
pub fn effects_from_draws(draws: &PosteriorDraws, treatments: &[String]) -> Result<Vec<Vec<f64>>> {
    let cols: Vec<usize> = treatments[1..]
        .iter()
        .map(|t| {
            draws
                .index_of(&format!("d[{t}]"))
                .ok_or_else(|| Error::Validation(format!("draws lack d[{t}]")))
        })
        .collect::<Result<_>>()?;
    Ok((0..draws.n_draws())
        .map(|i| {
            let row = draws.draw(i);
            std::iter::once(0.0).chain(cols.iter().map(|&c| row[c])).collect()
        })
        .collect())
}

/// Treatments named by the `d[T]` columns of a draws file, reference first.
pub fn treatments_from_draws(draws: &PosteriorDraws, reference: &str) -> Vec<String> {
    std::iter::once(reference.to_string())
        .chain(
            draws
                .names()
                .iter()
                .filter_map(|n| n.strip_prefix("d[").and_then(|r| r.strip_suffix(']')))
                .map(str::to_string),
        )
        .collect()
}

/// Rank of each treatment in one draw (0 = best); larger effect ranks
/// higher and ties go to the lower index.
pub fn ranks_of(effects: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..effects.len()).collect();
    order.sort_by(|&a, &b| effects[b].total_cmp(&effects[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; effects.len()];
    for (r, &k) in order.iter().enumerate() {
        ranks[k] = r;
    }
    ranks
}

/// P(treatment k has rank r), rows = treatments, columns = ranks 1..K.
pub fn rank_probabilities(effects: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = effects.first().map_or(0, |e| e.len());
    let mut p = vec![vec![0.0; k]; k];
    for e in effects {
        for (t, r) in ranks_of(e).into_iter().enumerate() {
            p[t][r] += 1.0;
        }
    }
    let n = effects.len().max(1) as f64;
    for row in &mut p {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    p
}

/// SUCRA_k = (1/(K−1)) Σ_{r<K} cumP_k(r).
pub fn sucra(ranks: &[Vec<f64>]) -> Vec<f64> {
    let k = ranks.len();
    if k < 2 {
        return vec![1.0; k];
    }
    ranks
        .iter()
        .map(|row| {
            let mut cum = 0.0;
            let mut total = 0.0;
            for v in &row[..k - 1] {
                cum += v;
                total += cum;
            }
            total / (k - 1) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeagueEntry {
    pub from: String,
    pub to: String,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Draws of d_{kl} = d_l − d_k (LYG of l relative to k).
pub fn contrast_draws(effects: &[Vec<f64>], k: usize, l: usize) -> Vec<f64> {
    effects.iter().map(|e| e[l] - e[k]).collect()
}

pub fn league_table(effects: &[Vec<f64>], treatments: &[String]) -> Vec<LeagueEntry> {
    let k = treatments.len();
    let mut out = Vec::with_capacity(k * k);
    for a in 0..k {
        for b in 0..k {
            let mut d = contrast_draws(effects, a, b);
            let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
            d.sort_by(|x, y| x.total_cmp(y));
            out.push(LeagueEntry {
                from: treatments[a].clone(),
                to: treatments[b].clone(),
                mean,
                q025: quantile_sorted(&d, 0.025),
                q975: quantile_sorted(&d, 0.975),
            });
        }
    }
    out
}

fn write_d_summary<W: Write>(w: W, treatments: &[String], s: &[crate::inference::ParamSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["treatment", "mean", "sd", "q025", "q50", "q975", "rhat", "ess"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    for (t, p) in treatments[1..].iter().zip(s) {
        w.write_record([
            t.clone(),
            format!("{:?}", p.mean),
            format!("{:?}", p.sd),
            format!("{:?}", p.q025),
            format!("{:?}", p.q50),
            format!("{:?}", p.q975),
            opt(p.rhat),
            opt(p.ess),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Treatment order (reference first) from `treatments.csv`.
pub fn read_treatments(path: &std::path::Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path)?;
    let out: Vec<String> = r.records().map(|rec| Ok(rec?[0].to_string())).collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Validation(format!("{} lists no treatments", path.display())));
    }
    Ok(out)
}

/// Forest-plot rows read back from `d_summary.csv`: (treatment, mean, lo, hi).
pub fn read_d_summary(path: &std::path::Path) -> Result<Vec<(String, f64, f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: k + 2,
                msg: format!("bad numeric field {i}"),
            })
        };
        out.push((rec[0].to_string(), num(1)?, num(3)?, num(5)?));
    }
    Ok(out)
}

fn write_matrix<W: Write>(w: W, rows: &[String], cols: &[String], m: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["treatment".to_string()];
    header.extend(cols.iter().cloned());
    w.write_record(&header)?;
    for (r, row) in rows.iter().zip(m) {
        let mut rec = vec![r.clone()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_league<W: Write>(w: W, entries: &[LeagueEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["from", "to", "mean", "q025", "q975"])?;
    for e in entries {
        w.write_record([
            e.from.clone(),
            e.to.clone(),
            format!("{:?}", e.mean),
            format!("{:?}", e.q025),
            format!("{:?}", e.q975),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Set of treatments reachable per study, for reporting.
pub fn network_edges(data: &[ContrastData]) -> BTreeSet<(String, String)> {
    let mut e = BTreeSet::new();
    for c in data {
        for t in &c.treatments[1..] {
            e.insert((c.treatments[0].clone(), t.clone()));
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{chain_rng, conjugate_normal_check};
    use proptest::prelude::{prop_assert, proptest};

    fn two_arm(id: &str, a: &str, b: &str, y: f64, v: f64) -> ContrastData {
        ContrastData::new(id, vec![a.into(), b.into()], vec![y], vec![vec![v]]).unwrap()
    }

    fn three_arm(id: &str) -> ContrastData {
        ContrastData::new(
            id,
            vec!["A".into(), "B".into(), "C".into()],
            vec![0.5, 1.1],
            vec![vec![0.04, 0.01], vec![0.01, 0.05]],
        )
        .unwrap()
    }

    #[test]
    fn disconnected_network_lists_components() {
        let data = vec![two_arm("S1", "A", "B", 1.0, 0.1), two_arm("S2", "C", "D", 1.0, 0.1)];
        match NmaModel::new(&data, &[1.0, 1.0], None, false).unwrap_err() {
            Error::Disconnected(m) => assert!(m.contains("A, B") && m.contains("C, D"), "{m}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn singular_covariance_needs_jitter() {
        let data = vec![ContrastData::new("S1", vec!["A".into(), "B".into()], vec![1.0], vec![vec![0.0]]).unwrap()];
        assert!(matches!(
            NmaModel::new(&data, &[1.0], None, false).unwrap_err(),
            Error::SingularCovariance { .. }
        ));
        assert!(NmaModel::new(&data, &[1.0], None, true).is_ok());
    }

    #[test]
    fn unit_weights_reduce_to_standard_likelihood() {
        let data = vec![two_arm("S1", "A", "B", 1.0, 0.1), three_arm("S2")];
        let m = NmaModel::new(&data, &[1.0, 1.0], None, false).unwrap();
        let deltas = vec![DVector::from_vec(vec![0.3]), DVector::from_vec(vec![0.2, 0.9])];
        assert_eq!(m.log_likelihood(&deltas), m.standard_log_likelihood(&deltas));
    }

    #[test]
    fn quarter_weight_scales_quadratic_form() {
        let data = vec![two_arm("S1", "A", "B", 1.0, 0.2)];
        let full = NmaModel::new(&data, &[1.0], None, false).unwrap();
        let quarter = full.with_weights(&[0.25]).unwrap();
        let at = |m: &NmaModel, d: f64| m.log_likelihood(&[DVector::from_vec(vec![d])]);
        // constant terms cancel in differences
        let q_full = at(&full, 0.4) - at(&full, 1.0);
        let q_quarter = at(&quarter, 0.4) - at(&quarter, 1.0);
        assert!((q_quarter - 0.25 * q_full).abs() < 1e-14);
        let inflated = NmaModel::new(&[two_arm("S1", "A", "B", 1.0, 0.2 / 0.25)], &[1.0], None, false).unwrap();
        let q_inflated = at(&inflated, 0.4) - at(&inflated, 1.0);
        assert!((q_inflated - q_quarter).abs() < 1e-14);
    }

    #[test]
    fn exact_fit_leaves_only_constant() {
        let data = vec![two_arm("S1", "A", "B", 1.0, 0.2)];
        let m = NmaModel::new(&data, &[0.6], None, false).unwrap();
        let v = m.log_likelihood(&[DVector::from_vec(vec![1.0])]);
        assert!((v - 0.6 * -0.5 * (LN_2PI + 0.2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn two_arm_prior_variance_is_tau_squared() {
        let tau: f64 = 0.7;
        let lp = random_effects_logprior(&[DVector::from_vec(vec![1.3])], &[DVector::from_vec(vec![1.0])], tau);
        let expect = -0.5 * (LN_2PI + (tau * tau).ln() + 0.09 / (tau * tau));
        assert!((lp - expect).abs() < 1e-14);
    }

    #[test]
    fn sequential_prior_equals_compound_symmetry() {
        let tau = 0.3;
        let mu = DVector::from_vec(vec![0.2, -0.4, 1.0]);
        let delta = DVector::from_vec(vec![0.5, -0.1, 0.7]);
        let seq = random_effects_logprior(&[delta.clone()], &[mu.clone()], tau);
        let cov = cs_matrix(3) * (tau * tau);
        let ch = cov.clone().cholesky().unwrap();
        let r = &delta - &mu;
        let q = (r.transpose() * ch.inverse() * &r)[(0, 0)];
        let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mvn = -0.5 * (3.0 * LN_2PI + logdet + q);
        assert!((seq - mvn).abs() < 1e-12);
        assert!((cs_inverse(3) * cs_matrix(3) - DMatrix::identity(3, 3)).abs().max() < 1e-14);
    }

    #[test]
    fn single_study_fixed_effect_matches_conjugate() {
        let data = vec![two_arm("S1", "A", "B", 2.0, 1.0)];
        let m = NmaModel::new(&data, &[1.0], None, false).unwrap();
        let s = NmaSettings {
            tau: TauMode::Fixed(0.0),
            ..Default::default()
        };
        let cfg = McmcConfig {
            chains: 4,
            warmup: 200,
            samples: 2000,
            seed: 1,
            ..Default::default()
        };
        let f = fit(&m, &s, &cfg).unwrap();
        let (mean, var) = conjugate_normal_check(0.0, 100.0, &[(2.0, 1.0)]);
        let col = f.draws.column(0);
        let n = col.len() as f64;
        let mu = col.iter().sum::<f64>() / n;
        let v = col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mu - mean).abs() < 3.0 * (var / n).sqrt());
        assert!((v - var).abs() < 3.0 * var * (2.0 / (n - 1.0)).sqrt());
    }

    #[test]
    fn two_equal_studies_average() {
        let data = vec![two_arm("S1", "A", "B", 1.0, 0.01), two_arm("S2", "A", "B", 2.0, 0.01)];
        let m = NmaModel::new(&data, &[1.0, 1.0], None, false).unwrap();
        let s = NmaSettings {
            tau: TauMode::Fixed(0.0),
            ..Default::default()
        };
        let f = fit(&m, &s, &McmcConfig { chains: 2, warmup: 100, samples: 2000, ..Default::default() }).unwrap();
        assert!((f.draws.summarize(0).mean - 1.5).abs() < 0.01);
    }

    #[test]
    fn random_effects_fit_recovers_network() {
        let truth = [0.0, 1.0, 2.0, 3.0];
        let names = ["A", "B", "C", "D"];
        let mut rng = chain_rng(17, 0);
        let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let mut data = Vec::new();
        for j in 0..24 {
            let (a, b) = pairs[j % pairs.len()];
            let delta = truth[b] - truth[a] + 0.1 * rng.sample::<f64, _>(StandardNormal);
            let y = delta + 0.2 * rng.sample::<f64, _>(StandardNormal);
            data.push(two_arm(&format!("S{j}"), names[a], names[b], y, 0.04));
        }
        let m = NmaModel::new(&data, &vec![1.0; data.len()], Some("A"), false).unwrap();
        let f = fit(&m, &NmaSettings::default(), &McmcConfig { chains: 4, warmup: 500, samples: 1000, seed: 3, ..Default::default() }).unwrap();
        assert!(f.max_rhat < 1.05, "rhat {}", f.max_rhat);
        for (k, s) in f.d_summaries().iter().enumerate() {
            assert!(s.q025 < truth[k + 1] && truth[k + 1] < s.q975, "{s:?}");
        }
    }

    #[test]
    fn smaller_weight_widens_posterior() {
        let data = vec![two_arm("S1", "A", "B", 1.0, 0.1), two_arm("S2", "A", "B", 1.4, 0.1)];
        let s = NmaSettings {
            tau: TauMode::Fixed(0.0),
            ..Default::default()
        };
        let cfg = McmcConfig { chains: 2, warmup: 100, samples: 4000, seed: 9, ..Default::default() };
        let mut last = 0.0;
        for w in [1.0, 0.5, 0.1] {
            let m = NmaModel::new(&data, &[1.0, w], None, false).unwrap();
            let sd = fit(&m, &s, &cfg).unwrap().draws.summarize(0).sd;
            assert!(sd > last);
            last = sd;
        }
    }

    #[test]
    fn location_shift_moves_mean_by_constant() {
        let s = NmaSettings {
            tau: TauMode::Fixed(0.0),
            ..Default::default()
        };
        let cfg = McmcConfig { chains: 2, warmup: 100, samples: 2000, seed: 2, ..Default::default() };
        let run = |shift: f64| {
            let data = vec![two_arm("S1", "A", "B", 1.0 + shift, 0.01), two_arm("S2", "A", "B", 2.0 + shift, 0.01)];
            let m = NmaModel::new(&data, &[1.0, 1.0], None, false).unwrap();
            fit(&m, &s, &cfg).unwrap().draws.summarize(0).mean
        };
        // prior sd 10 makes the posterior mean shrink by a factor 1/(1 + 0.005/100)
        let shrink = 1.0 / (1.0 + 0.005 / 100.0);
        assert!((run(0.7) - run(0.0) - 0.7 * shrink).abs() < 0.01);
    }

    #[test]
    fn degenerate_ranks_form_permutation() {
        let effects = vec![vec![0.0, 1.0, 2.0, 3.0]; 10];
        let p = rank_probabilities(&effects);
        assert_eq!(p[3][0], 1.0);
        assert_eq!(p[0][3], 1.0);
        let s = sucra(&p);
        assert_eq!(s[3], 1.0);
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn uniform_ranks_give_half() {
        let p = vec![vec![0.25; 4]; 4];
        for v in sucra(&p) {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn exchangeable_treatments_have_flat_ranks() {
        let mut rng = chain_rng(4, 0);
        let effects: Vec<Vec<f64>> = (0..40_000)
            .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let p = rank_probabilities(&effects);
        for row in &p {
            for v in row {
                assert!((v - 1.0 / 3.0).abs() < 0.015);
            }
        }
    }

    #[test]
    fn league_is_consistent_and_antisymmetric() {
        let mut rng = chain_rng(5, 0);
        let effects: Vec<Vec<f64>> = (0..500)
            .map(|_| vec![0.0, rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let (bc, ac, ab) = (contrast_draws(&effects, 1, 2), contrast_draws(&effects, 0, 2), contrast_draws(&effects, 0, 1));
        for i in 0..effects.len() {
            assert_eq!(bc[i], ac[i] - ab[i]);
        }
        let names: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let t = league_table(&effects, &names);
        for a in 0..3 {
            assert_eq!(t[a * 3 + a].mean, 0.0);
            for b in 0..3 {
                assert!((t[a * 3 + b].mean + t[b * 3 + a].mean).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn rank_matrix_is_doubly_stochastic(vals in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 1..50)) {
            let p = rank_probabilities(&vals);
            for i in 0..4 {
                let row: f64 = p[i].iter().sum();
                let col: f64 = p.iter().map(|r| r[i]).sum();
                prop_assert!((row - 1.0).abs() < 1e-12 && (col - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn two_treatment_rank_complement(vals in proptest::collection::vec(-5.0f64..5.0, 1..50)) {
            let effects: Vec<Vec<f64>> = vals.iter().map(|v| vec![0.0, *v]).collect();
            let p = rank_probabilities(&effects);
            prop_assert!((p[0][0] - (1.0 - p[1][0])).abs() < 1e-12);
        }
    }
}

//! Decisions from posterior effect draws: Bayes rules under 0-1, regret and
//! squared-regret losses, LaEV screening, a GRADE-style probability cutoff,
//! and cost-effectiveness summaries.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data_io::CostSpec;
use crate::error::{Error, Result};
use crate::inference::chain_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    ZeroOne,
    Regret,
    SquaredRegret,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesRule {
    pub loss: Loss,
    pub chosen: usize,
    /// Posterior expected loss of choosing each treatment.
    pub risks: Vec<f64>,
    /// More than one treatment attains the minimal risk.
    pub tie: bool,
}

fn mean(x: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in x {
        s += v;
        n += 1;
    }
    s / n.max(1) as f64
}

/// First index attaining the per-draw maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

pub fn posterior_means(effects: &[Vec<f64>]) -> Vec<f64> {
    let k = effects.first().map_or(0, |e| e.len());
    (0..k).map(|j| mean(effects.iter().map(|e| e[j]))).collect()
}

/// P(treatment k is best), per-draw ties resolved by lowest index.
pub fn prob_best(effects: &[Vec<f64>]) -> Vec<f64> {
    let k = effects.first().map_or(0, |e| e.len());
    let mut p = vec![0.0; k];
    for e in effects {
        p[argmax(e)] += 1.0;
    }
    let n = effects.len().max(1) as f64;
    p.iter().map(|v| v / n).collect()
}

pub fn bayes_rule(effects: &[Vec<f64>], loss: Loss) -> Result<BayesRule> {
    if effects.is_empty() || effects[0].is_empty() {
        return Err(Error::InvalidArgument("no effect draws".into()));
    }
    let k = effects[0].len();
    let risks: Vec<f64> = match loss {
        Loss::ZeroOne => prob_best(effects).iter().map(|p| 1.0 - p).collect(),
        Loss::Regret | Loss::SquaredRegret => {
            let power = if loss == Loss::Regret { 1 } else { 2 };
            (0..k)
                .map(|j| {
                    mean(effects.iter().map(|e| {
                        let best = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        (best - e[j]).powi(power)
                    }))
                })
                .collect()
        }
    };
    let min = risks.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * (1.0 + min.abs());
    let minimal: Vec<usize> = (0..k).filter(|&j| risks[j] - min <= tol).collect();
    Ok(BayesRule {
        loss,
        chosen: minimal[0],
        risks,
        tie: minimal.len() > 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaevResult {
    pub reference: usize,
    pub mcid: f64,
    pub means: Vec<f64>,
    /// Treatments no worse than the reference on posterior means.
    pub stage1: Vec<usize>,
    /// Stage-1 survivors within `mcid` of the best mean.
    pub survivors: Vec<usize>,
    pub recommendation: Option<usize>,
    pub screening: String,
}

/// Two-stage LaEV screening on posterior means.
pub fn laev(effects: &[Vec<f64>], reference: usize, mcid: f64) -> Result<LaevResult> {
    if !(mcid >= 0.0) {
        return Err(Error::InvalidArgument("mcid must be >= 0".into()));
    }
    let means = posterior_means(effects);
    if reference >= means.len() {
        return Err(Error::InvalidArgument("reference treatment out of range".into()));
    }
    let stage1: Vec<usize> = (0..means.len()).filter(|&k| means[k] >= means[reference]).collect();
    let best = stage1.iter().map(|&k| means[k]).fold(f64::NEG_INFINITY, f64::max);
    let survivors: Vec<usize> = stage1.iter().copied().filter(|&k| means[k] >= best - mcid).collect();
    let recommendation = (survivors.len() == 1).then(|| survivors[0]);
    Ok(LaevResult {
        reference,
        mcid,
        means,
        stage1,
        survivors,
        recommendation,
        screening: "posterior means".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeVerdict {
    pub cutoff: f64,
    pub p_best: Vec<f64>,
    pub best: usize,
    pub recommend: Option<usize>,
}

pub fn grade_from_probabilities(p_best: &[f64], cutoff: f64) -> Result<GradeVerdict> {
    if !(0.5..=1.0).contains(&cutoff) {
        return Err(Error::InvalidArgument("GRADE cutoff must lie in [0.5, 1]".into()));
    }
    if p_best.is_empty() {
        return Err(Error::InvalidArgument("no treatments".into()));
    }
    let best = argmax(p_best);
    Ok(GradeVerdict {
        cutoff,
        p_best: p_best.to_vec(),
        best,
        recommend: (p_best[best] >= cutoff).then_some(best),
    })
}

pub fn grade_decide(effects: &[Vec<f64>], cutoff: f64) -> Result<GradeVerdict> {
    grade_from_probabilities(&prob_best(effects), cutoff)
}

/// Per-treatment cost draws (currency units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostDraws {
    pub treatments: Vec<String>,
    pub draws: Vec<Vec<f64>>,
}

/// Gamma(shape 1/CV², scale μ·CV²) per treatment, one RNG stream each.
pub fn sample_costs(specs: &[CostSpec], n: usize, seed: u64) -> Result<CostDraws> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one cost draw".into()));
    }
    let mut draws = Vec::with_capacity(specs.len());
    for (k, s) in specs.iter().enumerate() {
        s.validate()?;
        let shape = 1.0 / (s.cv * s.cv);
        let scale = s.mean_cost * s.cv * s.cv;
        let g = Gamma::new(shape, scale).map_err(|e| Error::Validation(format!("cost {}: {e}", s.treatment)))?;
        let mut rng = chain_rng(seed, k as u64);
        draws.push((0..n).map(|_| g.sample(&mut rng)).collect());
    }
    Ok(CostDraws {
        treatments: specs.iter().map(|s| s.treatment.clone()).collect(),
        draws,
    })
}

impl CostDraws {
    /// Cost matrix (draw × treatment) in `order`, resampled with replacement
    /// to `n` draws when the counts differ.
    pub fn aligned(&self, order: &[String], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let cols: Vec<&Vec<f64>> = order
            .iter()
            .map(|t| {
                self.treatments
                    .iter()
                    .position(|c| c == t)
                    .map(|i| &self.draws[i])
                    .ok_or_else(|| Error::Reference(format!("no cost given for treatment {t}")))
            })
            .collect::<Result<_>>()?;
        let m = cols.first().map_or(0, |c| c.len());
        if m == 0 {
            return Err(Error::InvalidArgument("empty cost draws".into()));
        }
        if m == n {
            return Ok((0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect());
        }
        let mut rng = chain_rng(seed, u64::MAX);
        Ok((0..n)
            .map(|_| {
                let i = rng.random_range(0..m);
                cols.iter().map(|c| c[i]).collect()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcerEntry {
    pub treatment: String,
    pub delta_effect: f64,
    pub delta_cost: f64,
    /// `None` when |E[Δx]| < 1e-9.
    pub icer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeaResult {
    pub treatments: Vec<String>,
    pub reference: usize,
    pub lambdas: Vec<f64>,
    /// λ × K expected net benefit.
    pub expected_nb: Vec<Vec<f64>>,
    /// λ × K expected incremental benefit against the reference.
    pub eib: Vec<Vec<f64>>,
    /// λ × K probability of maximal net benefit.
    pub ceac: Vec<Vec<f64>>,
    pub optimal: Vec<usize>,
    pub icer: Vec<IcerEntry>,
}

/// NB_k = λ·x_k − c_k per draw, with effect and cost matrices aligned by draw.
pub fn cea(effects: &[Vec<f64>], costs: &[Vec<f64>], treatments: &[String], reference: usize, lambdas: &[f64]) -> Result<CeaResult> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::InvalidArgument("lambda grid must be nonempty and nonnegative".into()));
    }
    if effects.is_empty() || effects.len() != costs.len() {
        return Err(Error::InvalidArgument("effect and cost draws must align".into()));
    }
    let k = treatments.len();
    if effects.iter().chain(costs).any(|r| r.len() != k) || reference >= k {
        return Err(Error::InvalidArgument("draw width must match the treatment list".into()));
    }
    let mx = posterior_means(effects);
    let mc = posterior_means(costs);
    let icer = (0..k)
        .map(|j| {
            let dx = mx[j] - mx[reference];
            let dc = mc[j] - mc[reference];
            IcerEntry {
                treatment: treatments[j].clone(),
                delta_effect: dx,
                delta_cost: dc,
                icer: (dx.abs() >= 1e-9).then(|| dc / dx),
            }
        })
        .collect();
    let n = effects.len() as f64;
    let mut expected_nb = Vec::with_capacity(lambdas.len());
    let mut eib = Vec::with_capacity(lambdas.len());
    let mut ceac = Vec::with_capacity(lambdas.len());
    let mut optimal = Vec::with_capacity(lambdas.len());
    let mut nb = vec![0.0; k];
    for &lambda in lambdas {
        let enb: Vec<f64> = (0..k).map(|j| lambda * mx[j] - mc[j]).collect();
        let mut counts = vec![0.0; k];
        for (x, c) in effects.iter().zip(costs) {
            for j in 0..k {
                nb[j] = lambda * x[j] - c[j];
            }
            counts[argmax(&nb)] += 1.0;
        }
        eib.push(
            (0..k)
                .map(|j| lambda * (mx[j] - mx[reference]) - (mc[j] - mc[reference]))
                .collect(),
        );
        optimal.push(argmax(&enb));
        expected_nb.push(enb);
        ceac.push(counts.iter().map(|c| c / n).collect());
    }
    Ok(CeaResult {
        treatments: treatments.to_vec(),
        reference,
        lambdas: lambdas.to_vec(),
        expected_nb,
        eib,
        ceac,
        optimal,
        icer,
    })
}

impl CeaResult {
    /// λ values at which the optimal treatment changes, with the new choice.
    pub fn switches(&self) -> Vec<(f64, usize)> {
        self.optimal
            .windows(2)
            .zip(self.lambdas.windows(2))
            .filter(|(o, _)| o[0] != o[1])
            .map(|(o, l)| (l[1], o[1]))
            .collect()
    }

    /// `lambda,<treatments...>` rows of CEAC probabilities.
    pub fn write_ceac_csv<W: Write>(&self, w: W) -> Result<()> {
        write_grid(w, &self.treatments, &self.lambdas, &self.ceac)
    }

    pub fn write_eib_csv<W: Write>(&self, w: W) -> Result<()> {
        write_grid(w, &self.treatments, &self.lambdas, &self.eib)
    }
}

fn write_grid<W: Write>(w: W, names: &[String], lambdas: &[f64], rows: &[Vec<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["lambda".to_string()];
    header.extend(names.iter().cloned());
    wtr.write_record(&header)?;
    for (l, row) in lambdas.iter().zip(rows) {
        let mut rec = vec![format!("{l:?}")];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedChoice {
    pub loss: String,
    pub treatment: String,
    pub risks: Vec<f64>,
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionReport {
    pub treatments: Vec<String>,
    pub reference: String,
    pub posterior_means: Vec<f64>,
    pub prob_best: Vec<f64>,
    pub bayes_rules: Vec<NamedChoice>,
    pub laev_survivors: Vec<String>,
    pub laev_recommendation: Option<String>,
    pub laev_screening: String,
    pub grade_recommendation: Option<String>,
    pub grade_cutoff: f64,
    pub mcid_years: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<(f64, f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cea: Option<CeaSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeaSummary {
    pub icer: Vec<IcerEntry>,
    /// (λ, treatment) at each change of the optimal decision.
    pub switches: Vec<(f64, String)>,
}

pub fn decision_report(effects: &[Vec<f64>], treatments: &[String], reference: usize, mcid: f64, cutoff: f64) -> Result<DecisionReport> {
    if treatments.len() != effects.first().map_or(0, |e| e.len()) {
        return Err(Error::InvalidArgument("treatment names must match effect width".into()));
    }
    let name = |k: usize| treatments[k].clone();
    let bayes_rules = [Loss::ZeroOne, Loss::Regret, Loss::SquaredRegret]
        .iter()
        .map(|&l| {
            let r = bayes_rule(effects, l)?;
            Ok(NamedChoice {
                loss: serde_json::to_value(l)?.as_str().unwrap_or_default().to_string(),
                treatment: name(r.chosen),
                risks: r.risks,
                tie: r.tie,
            })
        })
        .collect::<Result<_>>()?;
    let l = laev(effects, reference, mcid)?;
    let g = grade_decide(effects, cutoff)?;
    Ok(DecisionReport {
        treatments: treatments.to_vec(),
        reference: name(reference),
        posterior_means: posterior_means(effects),
        prob_best: g.p_best.clone(),
        bayes_rules,
        laev_survivors: l.survivors.iter().map(|&k| name(k)).collect(),
        laev_recommendation: l.recommendation.map(name),
        laev_screening: l.screening,
        grade_recommendation: g.recommend.map(name),
        grade_cutoff: cutoff,
        mcid_years: mcid,
        lambda_grid: None,
        cea: None,
    })
}

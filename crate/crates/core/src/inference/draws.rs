use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::diagnostics::{ess, rhat};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub chain: usize,
    pub block: usize,
    pub scale_end_warmup: f64,
    pub scale_end_sampling: f64,
    pub acceptance_sampling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    /// `None` marks a constant parameter where the diagnostic does not apply.
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

/// Labelled chains × iterations × parameters draw array.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    names: Vec<String>,
    n_chains: usize,
    n_iter: usize,
    data: Vec<f64>,
    pub runtime_secs: f64,
    /// Warmup plus sampling iterations summed over chains.
    pub total_iterations: usize,
    pub adaptation: Vec<AdaptationRecord>,
    pub acceptance: Vec<f64>,
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl PosteriorDraws {
    pub fn new(names: Vec<String>, n_chains: usize, n_iter: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != names.len() * n_chains * n_iter {
            return Err(Error::InvalidArgument(format!(
                "draw array has {} values, expected {}",
                data.len(),
                names.len() * n_chains * n_iter
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            let p = bad % names.len().max(1);
            return Err(Error::Validation(format!(
                "non-finite draw for parameter {}",
                names[p]
            )));
        }
        Ok(Self {
            names,
            n_chains,
            n_iter,
            data,
            runtime_secs: 0.0,
            total_iterations: 0,
            adaptation: Vec::new(),
            acceptance: Vec::new(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_chains(&self) -> usize {
        self.n_chains
    }

    pub fn n_iterations(&self) -> usize {
        self.n_iter
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_draws(&self) -> usize {
        self.n_chains * self.n_iter
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, chain: usize, iter: usize, param: usize) -> f64 {
        self.data[(chain * self.n_iter + iter) * self.names.len() + param]
    }

    /// Full parameter vector at a given draw (chain-major flat index).
    pub fn draw(&self, flat: usize) -> &[f64] {
        let p = self.names.len();
        &self.data[flat * p..(flat + 1) * p]
    }

    pub fn chain_column(&self, chain: usize, param: usize) -> Vec<f64> {
        (0..self.n_iter).map(|i| self.get(chain, i, param)).collect()
    }

    pub fn chains_of(&self, param: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains).map(|c| self.chain_column(c, param)).collect()
    }

    /// All draws of one parameter, chains concatenated.
    pub fn column(&self, param: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|k| self.draw(k)[param]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.index_of(name).map(|p| self.column(p))
    }

    pub fn summarize(&self, param: usize) -> ParamSummary {
        let col = self.column(param);
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = if col.len() > 1 {
            (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = col;
        sorted.sort_by(f64::total_cmp);
        let chains = self.chains_of(param);
        ParamSummary {
            name: self.names[param].clone(),
            mean,
            sd,
            q025: quantile_sorted(&sorted, 0.025),
            q50: quantile_sorted(&sorted, 0.5),
            q975: quantile_sorted(&sorted, 0.975),
            rhat: rhat(&chains),
            ess: ess(&chains),
        }
    }

    pub fn summaries(&self) -> Vec<ParamSummary> {
        (0..self.n_params()).map(|p| self.summarize(p)).collect()
    }

    /// Largest R-hat across non-constant parameters (1.0 if none apply).
    pub fn max_rhat(&self) -> f64 {
        (0..self.n_params())
            .filter_map(|p| rhat(&self.chains_of(p)))
            .fold(1.0, f64::max)
    }

    pub fn iterations_per_second(&self) -> f64 {
        self.total_iterations as f64 / self.runtime_secs.max(1e-9)
    }

    pub fn ess_per_second(&self, param: usize) -> Option<f64> {
        ess(&self.chains_of(param)).map(|e| e / self.runtime_secs.max(1e-9))
    }

    /// Keep a subset of parameters, in the given order.
    pub fn select(&self, params: &[usize]) -> PosteriorDraws {
        let names = params.iter().map(|&p| self.names[p].clone()).collect();
        let mut data = Vec::with_capacity(self.n_draws() * params.len());
        for k in 0..self.n_draws() {
            let row = self.draw(k);
            data.extend(params.iter().map(|&p| row[p]));
        }
        PosteriorDraws {
            names,
            n_chains: self.n_chains,
            n_iter: self.n_iter,
            data,
            runtime_secs: self.runtime_secs,
            total_iterations: self.total_iterations,
            adaptation: self.adaptation.clone(),
            acceptance: self.acceptance.clone(),
        }
    }

    /// Long-format CSV `chain,iteration,param,value` (1-based chain/iteration).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["chain", "iteration", "param", "value"])?;
        for c in 0..self.n_chains {
            for i in 0..self.n_iter {
                for (p, name) in self.names.iter().enumerate() {
                    wtr.write_record([
                        (c + 1).to_string(),
                        (i + 1).to_string(),
                        name.clone(),
                        format!("{:?}", self.get(c, i, p)),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut names: Vec<String> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut cells: BTreeMap<(usize, usize), BTreeMap<usize, f64>> = BTreeMap::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |msg: &str| Error::Parse {
                path: "draws.csv".into(),
                line: line + 2,
                msg: msg.to_string(),
            };
            if rec.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let chain: usize = rec[0].trim().parse().map_err(|_| bad("bad chain"))?;
            let iter: usize = rec[1].trim().parse().map_err(|_| bad("bad iteration"))?;
            let name = rec[2].trim().to_string();
            let value: f64 = rec[3].trim().parse().map_err(|_| bad("bad value"))?;
            let p = *index.entry(name.clone()).or_insert_with(|| {
                names.push(name);
                names.len() - 1
            });
            cells.entry((chain, iter)).or_default().insert(p, value);
        }
        let chains: std::collections::BTreeSet<usize> = cells.keys().map(|k| k.0).collect();
        let iters: std::collections::BTreeSet<usize> = cells.keys().map(|k| k.1).collect();
        let mut data = Vec::with_capacity(chains.len() * iters.len() * names.len());
        for &c in &chains {
            for &i in &iters {
                let row = cells.get(&(c, i)).ok_or_else(|| {
                    Error::Validation(format!("draws CSV is missing chain {c} iteration {i}"))
                })?;
                for p in 0..names.len() {
                    data.push(*row.get(&p).ok_or_else(|| {
                        Error::Validation(format!(
                            "draws CSV is missing {} at chain {c} iteration {i}",
                            names[p]
                        ))
                    })?);
                }
            }
        }
        PosteriorDraws::new(names, chains.len(), iters.len(), data)
    }

    /// Diagnostics report (summaries, runtime, throughput) as JSON.
    pub fn diagnostics_json(&self) -> serde_json::Value {
        let summaries = self.summaries();
        let ess_per_sec: Vec<Option<f64>> = summaries
            .iter()
            .map(|s| s.ess.map(|e| e / self.runtime_secs.max(1e-9)))
            .collect();
        serde_json::json!({
            "chains": self.n_chains,
            "iterations": self.n_iter,
            "runtime_secs": self.runtime_secs,
            "iterations_per_second": self.iterations_per_second(),
            "max_rhat": self.max_rhat(),
            "acceptance": self.acceptance,
            "adaptation": self.adaptation,
            "parameters": summaries,
            "ess_per_second": ess_per_sec,
        })
    }
}

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::draws::{AdaptationRecord, PosteriorDraws};
use crate::error::{Error, Result};

pub type ChainRng = ChaCha8Rng;

/// Per-chain RNG stream derived from `(seed, stream)` so results do not
/// depend on scheduling.
pub fn chain_rng(seed: u64, stream: u64) -> ChainRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub seed: u64,
    /// Metropolis acceptance target; `None` picks 0.44 for scalar blocks
    /// and 0.234 otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accept: Option<f64>,
    pub thin: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 2000,
            samples: 2000,
            seed: 0,
            target_accept: None,
            thin: 1,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("mcmc.chains must be >= 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("mcmc.samples must be > 0".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("mcmc.thin must be >= 1".into()));
        }
        if self.samples / self.thin == 0 {
            return Err(Error::Config("mcmc.thin exceeds mcmc.samples".into()));
        }
        if let Some(t) = self.target_accept {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config("mcmc.target_accept must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Log posterior density over an unconstrained parameter vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> f64;

    /// Names of the reported (transformed) parameters.
    fn param_names(&self) -> Vec<String>;

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// Map an unconstrained state to the reported parameters.
    fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

/// A caller-supplied update that leaves the target invariant (an exact
/// conditional draw or a self-contained Metropolis move).
pub trait GibbsStep: Sync {
    fn update(&self, state: &mut [f64], rng: &mut ChainRng);
}

pub struct Sampler<'a, T: LogDensity> {
    target: &'a T,
    blocks: Vec<Vec<usize>>,
    gibbs: Vec<&'a dyn GibbsStep>,
    start: Option<(Vec<f64>, f64)>,
}

struct AdaptiveBlock {
    idx: Vec<usize>,
    log_scale: f64,
    factor: DMatrix<f64>,
    mean: Vec<f64>,
    m2: DMatrix<f64>,
    count: usize,
    empirical: bool,
    target: f64,
    accepted: usize,
    proposed: usize,
}

impl AdaptiveBlock {
    fn new(idx: Vec<usize>, target: Option<f64>) -> Self {
        let d = idx.len();
        let target = target.unwrap_or(if d == 1 { 0.44 } else { 0.234 });
        Self {
            log_scale: (2.38 / (d as f64).sqrt()).ln() + 0.1f64.ln(),
            factor: DMatrix::identity(d, d),
            mean: vec![0.0; d],
            m2: DMatrix::zeros(d, d),
            count: 0,
            empirical: false,
            target,
            accepted: 0,
            proposed: 0,
            idx,
        }
    }

    fn propose(&self, x: &[f64], rng: &mut ChainRng) -> Vec<f64> {
        let d = self.idx.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = &self.factor * z * self.log_scale.exp();
        let mut out = x.to_vec();
        for (k, &i) in self.idx.iter().enumerate() {
            out[i] += step[k];
        }
        out
    }

    fn record(&mut self, x: &[f64]) {
        let d = self.idx.len();
        self.count += 1;
        let n = self.count as f64;
        let mut delta = vec![0.0; d];
        for (k, &i) in self.idx.iter().enumerate() {
            delta[k] = x[i] - self.mean[k];
            self.mean[k] += delta[k] / n;
        }
        for a in 0..d {
            let da = x[self.idx[a]] - self.mean[a];
            for b in 0..d {
                self.m2[(a, b)] += delta[b] * da;
            }
        }
    }

    fn refresh_factor(&mut self) {
        let d = self.idx.len();
        if self.count < 2 * d + 20 {
            return;
        }
        let mut cov = &self.m2 / (self.count as f64 - 1.0);
        for i in 0..d {
            cov[(i, i)] += 1e-10 + 1e-6 * cov[(i, i)].abs();
        }
        if let Some(ch) = cov.cholesky() {
            self.factor = ch.l();
            if !self.empirical {
                self.empirical = true;
                self.log_scale = (2.38 / (d as f64).sqrt()).ln();
            }
        }
    }
}

impl<'a, T: LogDensity> Sampler<'a, T> {
    /// One Metropolis block over every coordinate, no Gibbs steps.
    pub fn new(target: &'a T) -> Self {
        Self {
            target,
            blocks: vec![(0..target.dim()).collect()],
            gibbs: Vec::new(),
            start: None,
        }
    }

    /// Replace the Metropolis blocking; an empty list leaves only Gibbs steps.
    pub fn with_blocks(mut self, blocks: Vec<Vec<usize>>) -> Self {
        self.blocks = blocks.into_iter().filter(|b| !b.is_empty()).collect();
        self
    }

    /// Start every chain within ±`jitter` of `x0` instead of the target's
    /// initial point (±0.5).
    pub fn with_start(mut self, x0: Vec<f64>, jitter: f64) -> Self {
        self.start = Some((x0, jitter));
        self
    }

    pub fn with_gibbs(mut self, step: &'a dyn GibbsStep) -> Self {
        self.gibbs.push(step);
        self
    }

    pub fn run(&self, cfg: &McmcConfig) -> Result<PosteriorDraws> {
        cfg.validate()?;
        let dim = self.target.dim();
        if dim == 0 {
            return Err(Error::InvalidArgument("target has no parameters".into()));
        }
        for b in &self.blocks {
            if b.iter().any(|&i| i >= dim) {
                return Err(Error::InvalidArgument("block index out of range".into()));
            }
        }
        let names = self.target.param_names();
        let start = Instant::now();
        let chains: Vec<(Vec<Vec<f64>>, Vec<AdaptationRecord>, f64)> = (0..cfg.chains)
            .into_par_iter()
            .map(|c| self.run_chain(c, cfg))
            .collect::<Result<_>>()?;
        let runtime = start.elapsed().as_secs_f64();
        let kept = cfg.samples / cfg.thin;
        let mut data = Vec::with_capacity(cfg.chains * kept * names.len());
        let mut adaptation = Vec::new();
        let mut acceptance = Vec::new();
        for (rows, adapt, acc) in chains {
            for r in rows {
                data.extend(r);
            }
            adaptation.extend(adapt);
            acceptance.push(acc);
        }
        let mut draws = PosteriorDraws::new(names, cfg.chains, kept, data)?;
        draws.runtime_secs = runtime;
        draws.total_iterations = cfg.chains * (cfg.warmup + cfg.samples);
        draws.adaptation = adaptation;
        draws.acceptance = acceptance;
        Ok(draws)
    }

    fn initialize(&self, rng: &mut ChainRng) -> Result<(Vec<f64>, f64)> {
        let (base, jitter) = self.start.clone().unwrap_or_else(|| (self.target.initial_point(), 0.5));
        for _ in 0..100 {
            let x: Vec<f64> = if jitter > 0.0 {
                base.iter().map(|v| v + rng.random_range(-jitter..jitter)).collect()
            } else {
                base.clone()
            };
            let lp = self.target.log_density(&x);
            if lp.is_finite() {
                return Ok((x, lp));
            }
        }
        let lp = self.target.log_density(&base);
        if lp.is_finite() {
            return Ok((base, lp));
        }
        Err(Error::Initialization(
            "log density is not finite at any attempted initial point".into(),
        ))
    }

    #[allow(clippy::type_complexity)]
    fn run_chain(
        &self,
        chain: usize,
        cfg: &McmcConfig,
    ) -> Result<(Vec<Vec<f64>>, Vec<AdaptationRecord>, f64)> {
        let mut rng = chain_rng(cfg.seed, chain as u64);
        let (mut x, mut lp) = self.initialize(&mut rng)?;
        let mut blocks: Vec<AdaptiveBlock> = self
            .blocks
            .iter()
            .map(|b| AdaptiveBlock::new(b.clone(), cfg.target_accept))
            .collect();
        let mut rows = Vec::with_capacity(cfg.samples / cfg.thin);
        let mut frozen_scales = Vec::new();
        let transient = cfg.warmup / 10;

        for iter in 0..cfg.warmup + cfg.samples {
            let warming = iter < cfg.warmup;
            if iter == cfg.warmup {
                frozen_scales = blocks.iter().map(|b| b.log_scale).collect();
                for b in blocks.iter_mut() {
                    b.accepted = 0;
                    b.proposed = 0;
                }
            }
            if !self.gibbs.is_empty() {
                for g in &self.gibbs {
                    g.update(&mut x, &mut rng);
                }
                lp = self.target.log_density(&x);
            }
            for b in blocks.iter_mut() {
                let prop = b.propose(&x, &mut rng);
                let lp_prop = self.target.log_density(&prop);
                let log_ratio = lp_prop - lp;
                let alpha = if log_ratio.is_nan() {
                    0.0
                } else {
                    log_ratio.min(0.0).exp()
                };
                b.proposed += 1;
                if lp_prop.is_finite() && rng.random::<f64>() < alpha {
                    x = prop;
                    lp = lp_prop;
                    b.accepted += 1;
                }
                if warming {
                    let gamma = ((iter + 1) as f64).powf(-0.6);
                    b.log_scale += gamma * (alpha - b.target);
                    if iter >= transient {
                        b.record(&x);
                        if (iter + 1) % 50 == 0 {
                            b.refresh_factor();
                        }
                    }
                }
            }
            if !warming && (iter - cfg.warmup + 1) % cfg.thin == 0 {
                rows.push(self.target.transform(&x));
            }
        }
        if cfg.warmup == 0 {
            frozen_scales = blocks.iter().map(|b| b.log_scale).collect();
        }
        let mut total_acc = 0.0;
        let records: Vec<AdaptationRecord> = blocks
            .iter()
            .zip(frozen_scales)
            .enumerate()
            .map(|(k, (b, frozen))| {
                let acc = b.accepted as f64 / b.proposed.max(1) as f64;
                total_acc += acc;
                AdaptationRecord {
                    chain,
                    block: k,
                    scale_end_warmup: frozen.exp(),
                    scale_end_sampling: b.log_scale.exp(),
                    acceptance_sampling: acc,
                }
            })
            .collect();
        let acc = if records.is_empty() {
            1.0
        } else {
            total_acc / records.len() as f64
        };
        Ok((rows, records, acc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal(usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        }
        fn param_names(&self) -> Vec<String> {
            (0..self.0).map(|i| format!("x{i}")).collect()
        }
    }

    struct Nowhere;

    impl LogDensity for Nowhere {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, _x: &[f64]) -> f64 {
            f64::NEG_INFINITY
        }
        fn param_names(&self) -> Vec<String> {
            vec!["x".into()]
        }
    }

    #[test]
    fn rejects_target_infinite_everywhere() {
        let err = Sampler::new(&Nowhere).run(&McmcConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Initialization(_)));
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let cfg = McmcConfig {
            chains: 2,
            warmup: 200,
            samples: 200,
            seed: 11,
            ..Default::default()
        };
        let t = StdNormal(3);
        let a = Sampler::new(&t).run(&cfg).unwrap();
        let b = Sampler::new(&t).run(&cfg).unwrap();
        assert_eq!(a.raw(), b.raw());
    }

    #[test]
    fn adaptation_is_frozen_after_warmup() {
        let cfg = McmcConfig {
            chains: 2,
            warmup: 500,
            samples: 500,
            seed: 3,
            ..Default::default()
        };
        let draws = Sampler::new(&StdNormal(2)).run(&cfg).unwrap();
        assert_eq!(draws.adaptation.len(), 2);
        for rec in &draws.adaptation {
            assert_eq!(rec.scale_end_warmup, rec.scale_end_sampling);
        }
    }

    #[test]
    fn thinning_keeps_every_kth() {
        let cfg = McmcConfig {
            chains: 1,
            warmup: 10,
            samples: 100,
            thin: 10,
            seed: 1,
            ..Default::default()
        };
        let draws = Sampler::new(&StdNormal(1)).run(&cfg).unwrap();
        assert_eq!(draws.n_iterations(), 10);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = McmcConfig {
            thin: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}

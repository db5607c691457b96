//! Generic Bayesian computation: an adaptive random-walk Metropolis engine
//! with optional caller-registered Gibbs steps and a mode search for starting
//! values. Split-R-hat and ESS diagnostics are shared by every fitting module.

mod diagnostics;
mod mode;
mod draws;
mod sampler;

pub use diagnostics::{ess, rhat, split_chains};
pub use mode::find_mode;
pub use draws::{quantile_sorted, AdaptationRecord, ParamSummary, PosteriorDraws};
pub use sampler::{chain_rng, ChainRng, GibbsStep, LogDensity, McmcConfig, Sampler};

/// Closed-form Normal posterior for a Normal mean with known observation
/// variances. A prior variance of `f64::INFINITY` gives the flat-prior limit.
pub fn conjugate_normal_check(
    prior_mean: f64,
    prior_var: f64,
    observations: &[(f64, f64)],
) -> (f64, f64) {
    let mut precision = if prior_var.is_infinite() {
        0.0
    } else {
        1.0 / prior_var
    };
    let mut weighted = precision * prior_mean;
    for &(y, v) in observations {
        precision += 1.0 / v;
        weighted += y / v;
    }
    (weighted / precision, 1.0 / precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conjugate_single_observation() {
        let (m, v) = conjugate_normal_check(0.0, 100.0, &[(2.0, 1.0)]);
        assert!((m - 2.0 * 100.0 / 101.0).abs() < 1e-12);
        assert!((m - 1.9802).abs() < 1e-4);
        assert!((v - 100.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn conjugate_flat_prior_is_precision_weighted_mean() {
        let (m, v) = conjugate_normal_check(0.0, f64::INFINITY, &[(1.0, 1.0), (4.0, 2.0)]);
        assert!((m - (1.0 + 2.0) / 1.5).abs() < 1e-12);
        assert!((v - 1.0 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn conjugate_duplicate_observation_halves_variance() {
        let (_, v1) = conjugate_normal_check(0.0, f64::INFINITY, &[(1.0, 3.0)]);
        let (_, v2) = conjugate_normal_check(0.0, f64::INFINITY, &[(1.0, 3.0), (1.0, 3.0)]);
        assert!((v2 - v1 / 2.0).abs() < 1e-12);
    }
}

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;

use super::sampler::LogDensity;
use crate::error::{Error, Result};

struct NegLogDensity<'a, T: LogDensity>(&'a T);

impl<T: LogDensity> CostFunction for NegLogDensity<'_, T> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let lp = self.0.log_density(x);
        Ok(if lp.is_finite() { -lp } else { f64::INFINITY })
    }
}

fn setup_err(e: argmin::core::Error) -> Error {
    Error::InvalidArgument(e.to_string())
}

fn nelder_mead<T: LogDensity>(target: &T, x0: &[f64], step: f64, max_iters: u64) -> Result<(Vec<f64>, f64)> {
    let mut simplex = vec![x0.to_vec()];
    for i in 0..x0.len() {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-6).map_err(setup_err)?;
    let res = Executor::new(NegLogDensity(target), solver)
        .configure(|s| s.max_iters(max_iters))
        .run()
        .map_err(|e| Error::Initialization(format!("mode search failed: {e}")))?;
    let state = res.state();
    let best = state.get_best_param().cloned().unwrap_or_else(|| x0.to_vec());
    Ok((best, -state.get_best_cost()))
}

/// Highest log density reached by Nelder-Mead from any of `starts`, each run
/// restarted from its incumbent until a restart gains less than 1e-3. Meant
/// for placing MCMC starting values, not for precise optimisation.
pub fn find_mode<T: LogDensity>(target: &T, starts: &[Vec<f64>], max_iters: u64) -> Result<(Vec<f64>, f64)> {
    let mut best: Option<(Vec<f64>, f64)> = None;
    for x0 in starts {
        if !target.log_density(x0).is_finite() {
            continue;
        }
        let (mut x, mut lp) = nelder_mead(target, x0, 0.5, max_iters)?;
        for _ in 0..3 {
            let (x2, lp2) = nelder_mead(target, &x, 0.1, max_iters)?;
            let gain = lp2 - lp;
            if gain > 0.0 {
                x = x2;
                lp = lp2;
            }
            if gain < 1e-3 {
                break;
            }
        }
        if lp.is_finite() && best.as_ref().is_none_or(|(_, b)| lp > *b) {
            best = Some((x, lp));
        }
    }
    best.ok_or_else(|| Error::Initialization("log density is not finite at any starting point".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Gauss2;

    impl LogDensity for Gauss2 {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            if x[0] > 5.0 {
                return f64::NEG_INFINITY;
            }
            let (a, b) = (x[0] - 1.0, x[1] + 2.0);
            -0.5 * (a * a / 0.5 + b * b * 4.0) + 0.3 * a * b
        }
        fn param_names(&self) -> Vec<String> {
            vec!["a".into(), "b".into()]
        }
    }

    #[test]
    fn finds_correlated_gaussian_mode() {
        let (x, lp) = find_mode(&Gauss2, &[vec![4.0, 3.0], vec![10.0, 0.0]], 2000).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 2.0).abs() < 1e-3, "{x:?}");
        assert!(lp.abs() < 1e-6);
    }

    #[test]
    fn no_finite_start_is_an_error() {
        assert!(find_mode(&Gauss2, &[vec![6.0, 0.0]], 100).is_err());
    }
}

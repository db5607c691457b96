//! Survival extrapolation to effective zero, trapezium-rule mean survival
//! time, life-years gained and per-study contrast summaries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survmodels::HazardModel;

/// Tabulated survival on an increasing grid starting at t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    times: Vec<f64>,
    values: Vec<f64>,
    /// Threshold the curve was extrapolated to.
    pub terminal_eps: f64,
    /// Set when the hard cap was reached with S >= 0.01.
    pub heavy_tail: bool,
}

impl SurvivalCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::InvalidArgument(
                "survival curve needs at least two matching time/value points".into(),
            ));
        }
        if times[0] != 0.0 || values[0] != 1.0 {
            return Err(Error::InvalidArgument("survival curve must start at (0, 1)".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("survival grid must be strictly increasing".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) || values.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::InvalidArgument(
                "survival values must be nonincreasing within [0, 1]".into(),
            ));
        }
        let terminal = *values.last().unwrap();
        Ok(Self {
            times,
            values,
            terminal_eps: terminal,
            heavy_tail: false,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Linear interpolation; the terminal value is held beyond t_max.
    pub fn at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        if t >= self.t_max() {
            return self.terminal();
        }
        let j = self.times.partition_point(|&x| x <= t);
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let (s0, s1) = (self.values[j - 1], self.values[j]);
        s0 + (s1 - s0) * (t - t0) / (t1 - t0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtrapolationSettings {
    pub step: f64,
    pub eps: f64,
    pub cap: f64,
}

impl Default for ExtrapolationSettings {
    fn default() -> Self {
        Self {
            step: 0.01,
            eps: 1e-4,
            cap: 110.0,
        }
    }
}

/// Evaluate `survival` on a uniform grid until it drops below `eps` or the
/// cap is reached. Values are forced nonincreasing.
pub fn extrapolate<F: Fn(f64) -> f64>(survival: F, settings: &ExtrapolationSettings) -> Result<SurvivalCurve> {
    let ExtrapolationSettings { step, eps, cap } = *settings;
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("extrapolation step must be > 0".into()));
    }
    if !(eps > 0.0 && eps <= 0.01) {
        return Err(Error::InvalidArgument("terminal threshold must lie in (0, 0.01]".into()));
    }
    if !(cap > 0.0) {
        return Err(Error::InvalidArgument("extrapolation cap must be > 0".into()));
    }
    let mut times = vec![0.0];
    let mut values = vec![1.0];
    let mut k = 1u64;
    loop {
        let mut t = k as f64 * step;
        let last = t >= cap;
        if last {
            t = cap;
        }
        let s = survival(t);
        let s = if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) };
        let s = s.min(*values.last().unwrap());
        times.push(t);
        values.push(s);
        if s < eps || last {
            break;
        }
        k += 1;
    }
    let mut curve = SurvivalCurve::new(times, values)?;
    curve.terminal_eps = eps;
    curve.heavy_tail = curve.terminal() >= 0.01;
    if curve.heavy_tail {
        log::warn!(
            "extrapolation reached the {cap}-year cap with S = {:.4}; heavy tail",
            curve.terminal()
        );
    }
    Ok(curve)
}

pub fn extrapolate_model<M: HazardModel + ?Sized>(
    model: &M,
    settings: &ExtrapolationSettings,
) -> Result<SurvivalCurve> {
    extrapolate(|t| model.survival(t), settings)
}

/// Trapezium-rule area under the curve on its own grid.
pub fn mst(curve: &SurvivalCurve) -> f64 {
    curve
        .times
        .windows(2)
        .zip(curve.values.windows(2))
        .map(|(t, s)| 0.5 * (s[0] + s[1]) * (t[1] - t[0]))
        .sum()
}

/// Area to `horizon`, extending the curve by its terminal value.
pub fn mst_to(curve: &SurvivalCurve, horizon: f64) -> f64 {
    let base = mst(curve);
    if horizon > curve.t_max() {
        base + curve.terminal() * (horizon - curve.t_max())
    } else {
        base
    }
}

/// LYG of `first` over `second` to a common horizon.
pub fn lyg_at(first: &SurvivalCurve, second: &SurvivalCurve, horizon: f64) -> f64 {
    mst_to(first, horizon) - mst_to(second, horizon)
}

/// LYG with t_max = max of both curves' t_max.
pub fn lyg(first: &SurvivalCurve, second: &SurvivalCurve) -> f64 {
    lyg_at(first, second, first.t_max().max(second.t_max()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMode {
    /// Off-diagonals set to the variance of the control-arm MST draws.
    #[default]
    ControlVariance,
    /// Full empirical covariance of the LYG draws.
    Empirical,
}

/// Per-study LYG summary consumed by the network meta-analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastData {
    pub study_id: String,
    /// Treatments in arm order; element 0 is the control arm.
    pub treatments: Vec<String>,
    /// LYG of arms 2..A versus arm 1 (years).
    pub y: Vec<f64>,
    /// Covariance of `y` (years²), row-major square.
    pub cov: Vec<Vec<f64>>,
    pub note: String,
    pub degenerate: bool,
}

impl ContrastData {
    pub fn new(study_id: impl Into<String>, treatments: Vec<String>, y: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let study_id = study_id.into();
        let k = treatments.len();
        if k < 2 || y.len() != k - 1 || cov.len() != k - 1 || cov.iter().any(|r| r.len() != k - 1) {
            return Err(Error::Validation(format!(
                "study {study_id}: contrast dimensions do not match {k} arms"
            )));
        }
        if y.iter().chain(cov.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("study {study_id}: non-finite contrast data")));
        }
        let c = Self {
            study_id,
            treatments,
            y,
            cov,
            note: String::new(),
            degenerate: false,
        };
        c.check_psd()?;
        Ok(c)
    }

    pub fn arms(&self) -> usize {
        self.treatments.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let n = self.y.len();
        DMatrix::from_fn(n, n, |i, j| self.cov[i][j])
    }

    fn check_psd(&self) -> Result<()> {
        let m = self.cov_matrix();
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m[(i, j)].abs()) {
                    return Err(Error::Validation(format!(
                        "study {}: covariance is not symmetric",
                        self.study_id
                    )));
                }
            }
        }
        let eig = m.symmetric_eigen();
        if eig.eigenvalues.iter().any(|&e| e < -1e-10) {
            return Err(Error::Validation(format!(
                "study {}: covariance is not positive semi-definite",
                self.study_id
            )));
        }
        Ok(())
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0)
}

/// Draw-level LYG of every arm against the control arm, summarized as a
/// mean vector and covariance.
pub fn study_contrasts(
    study_id: &str,
    treatments: &[String],
    mst_draws: &[Vec<f64>],
    control: usize,
    mode: CovarianceMode,
) -> Result<ContrastData> {
    if treatments.len() != mst_draws.len() || treatments.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "study {study_id}: need MST draws for every arm (at least two)"
        )));
    }
    if control >= treatments.len() {
        return Err(Error::InvalidArgument(format!("study {study_id}: control index out of range")));
    }
    let n = mst_draws[0].len();
    if n < 2 || mst_draws.iter().any(|d| d.len() != n) {
        return Err(Error::Validation(format!(
            "study {study_id}: arms have mismatched MST draw counts"
        )));
    }
    let order: Vec<usize> = std::iter::once(control)
        .chain((0..treatments.len()).filter(|&k| k != control))
        .collect();
    let base = &mst_draws[control];
    let lyg_draws: Vec<Vec<f64>> = order[1..]
        .iter()
        .map(|&k| mst_draws[k].iter().zip(base).map(|(a, b)| a - b).collect())
        .collect();
    let y: Vec<f64> = lyg_draws.iter().map(|d| mean(d)).collect();
    let control_var = covariance(base, base);
    let m = lyg_draws.len();
    let mut cov = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            cov[i][j] = if i == j {
                covariance(&lyg_draws[i], &lyg_draws[i])
            } else {
                match mode {
                    CovarianceMode::ControlVariance => control_var,
                    CovarianceMode::Empirical => covariance(&lyg_draws[i], &lyg_draws[j]),
                }
            };
        }
    }
    if mode == CovarianceMode::ControlVariance && m > 1 {
        // the control-variance structure can be indefinite when arm variances differ a lot
        let candidate = ContrastData::new(
            study_id,
            order.iter().map(|&k| treatments[k].clone()).collect(),
            y.clone(),
            cov.clone(),
        );
        if candidate.is_err() {
            log::warn!("study {study_id}: control-variance covariance not PSD; using empirical covariance");
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        cov[i][j] = covariance(&lyg_draws[i], &lyg_draws[j]);
                    }
                }
            }
        }
    }
    let mut out = ContrastData::new(
        study_id,
        order.iter().map(|&k| treatments[k].clone()).collect(),
        y,
        cov,
    )?;
    out.note = format!("{n} draws per arm; LYG differenced per draw; covariance: {mode:?}");
    if out.cov.iter().flatten().all(|v| *v == 0.0) {
        out.degenerate = true;
        log::warn!("study {study_id}: all LYG draws identical; zero covariance");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_curve(rate: f64, step: f64, t_max: f64) -> SurvivalCurve {
        let n = (t_max / step).round() as usize;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
        let values = times.iter().map(|t| (-rate * t).exp()).collect();
        SurvivalCurve::new(times, values).unwrap()
    }

    #[test]
    fn rectangle() {
        let c = SurvivalCurve::new(vec![0.0, 10.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(mst(&c), 10.0);
    }

    #[test]
    fn linear_is_exact() {
        let c = SurvivalCurve::new(vec![0.0, 0.5, 2.0], vec![1.0, 0.75, 0.0]).unwrap();
        assert_eq!(mst(&c), 1.0);
    }

    #[test]
    fn exponential_mean() {
        let c = exp_curve(0.1, 0.01, 120.0);
        let exact = 10.0 * (1.0 - (-12.0f64).exp());
        assert!((mst(&c) - exact).abs() < 1e-3);
    }

    #[test]
    fn extrapolation_stops_below_eps() {
        let s = ExtrapolationSettings {
            step: 0.01,
            eps: 1e-4,
            cap: 500.0,
        };
        let c = extrapolate(|t| (-0.1 * t).exp(), &s).unwrap();
        let expect = -(1e-4f64).ln() / 0.1;
        assert!((c.t_max() - expect).abs() <= 0.011, "t_max {}", c.t_max());
        assert!(c.terminal() < 1e-4);
        assert!(!c.heavy_tail);
    }

    #[test]
    fn heavy_tail_is_flagged_at_cap() {
        let s = ExtrapolationSettings {
            step: 0.1,
            eps: 1e-4,
            cap: 110.0,
        };
        let c = extrapolate(|t| 1.0 / (1.0 + t / 10.0), &s).unwrap();
        assert_eq!(c.t_max(), 110.0);
        assert!(c.heavy_tail);
    }

    #[test]
    fn invalid_settings_rejected() {
        let bad = ExtrapolationSettings {
            eps: 0.5,
            ..Default::default()
        };
        assert!(extrapolate(|_| 1.0, &bad).is_err());
    }

    #[test]
    fn lyg_of_exponentials() {
        let a = exp_curve(0.05, 0.01, 400.0);
        let b = exp_curve(0.1, 0.01, 200.0);
        assert!((lyg(&a, &b) - 10.0).abs() < 2e-3);
        assert_eq!(lyg(&a, &b), -lyg(&b, &a));
        assert_eq!(lyg(&a, &a), 0.0);
    }

    #[test]
    fn two_arm_contrast_is_variance_of_lyg() {
        let arms = vec!["A".to_string(), "B".to_string()];
        let draws = vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 3.0]];
        let c = study_contrasts("S", &arms, &draws, 0, CovarianceMode::ControlVariance).unwrap();
        assert!((c.y[0] - 1.0).abs() < 1e-12);
        // lyg draws (1, 2, 0)
        assert!((c.cov[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn control_arm_is_moved_first() {
        let arms = vec!["A".to_string(), "B".to_string(), "C".to_string()];
        let draws = vec![vec![1.0, 2.0], vec![5.0, 6.0], vec![3.0, 3.5]];
        let c = study_contrasts("S", &arms, &draws, 2, CovarianceMode::Empirical).unwrap();
        assert_eq!(c.treatments, vec!["C", "A", "B"]);
        assert!((c.y[0] + 1.75).abs() < 1e-12);
    }

    #[test]
    fn mismatched_draws_rejected() {
        let arms = vec!["A".to_string(), "B".to_string()];
        let draws = vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0]];
        assert!(study_contrasts("S", &arms, &draws, 0, CovarianceMode::ControlVariance).is_err());
    }

    #[test]
    fn degenerate_draws_flagged() {
        let arms = vec!["A".to_string(), "B".to_string()];
        let draws = vec![vec![1.0; 5], vec![2.0; 5]];
        let c = study_contrasts("S", &arms, &draws, 0, CovarianceMode::ControlVariance).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.cov, vec![vec![0.0]]);
    }

    #[test]
    fn interpolation_holds_terminal() {
        let c = SurvivalCurve::new(vec![0.0, 1.0, 2.0], vec![1.0, 0.5, 0.25]).unwrap();
        assert_eq!(c.at(0.5), 0.75);
        assert_eq!(c.at(5.0), 0.25);
    }
}

use serde::{Deserialize, Serialize};

use super::{loglik_censored, HazardModel, Observation};
use crate::error::{Error, Result};
use crate::inference::{quantile_sorted, LogDensity};

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z_new = z - p1 / dp;
            let done = (z_new - z).abs() < 1e-15;
            z = z_new;
            if done {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// M-spline basis on a clamped knot vector: B-splines rescaled so each
/// basis function integrates to one over its support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MSplineBasis {
    knots: Vec<f64>,
    degree: usize,
    full: Vec<f64>,
    /// cumulative[i][j] = ∫ from knots[0] to knots[j] of basis i.
    cumulative: Vec<Vec<f64>>,
    gl_nodes: Vec<f64>,
    gl_weights: Vec<f64>,
}

impl MSplineBasis {
    /// `knots` are the distinct breakpoints including both boundary knots.
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if degree < 1 {
            return Err(Error::InvalidArgument("spline degree must be >= 1".into()));
        }
        if knots.len() < 2 || knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "spline knots must be strictly increasing with at least two boundary knots".into(),
            ));
        }
        let order = degree + 1;
        let mut full = vec![knots[0]; order];
        full.extend_from_slice(&knots[1..knots.len() - 1]);
        full.extend(std::iter::repeat_n(knots[knots.len() - 1], order));
        let (gl_nodes, gl_weights) = gauss_legendre(degree + 1);
        let mut basis = Self {
            knots,
            degree,
            full,
            cumulative: Vec::new(),
            gl_nodes,
            gl_weights,
        };
        basis.cumulative = basis.knot_integrals();
        Ok(basis)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn n_basis(&self) -> usize {
        self.full.len() - self.degree - 1
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    fn interval(&self, t: f64) -> usize {
        // index j with knots[j] <= t < knots[j+1]; the upper boundary maps to the last interval
        let n = self.knots.len();
        match self.knots.binary_search_by(|k| k.total_cmp(&t)) {
            Ok(j) => j.min(n - 2),
            Err(j) => (j - 1).min(n - 2),
        }
    }

    /// B-spline values of order degree+1 at `t` (no range check).
    fn bspline_values(&self, t: f64) -> Vec<f64> {
        let p = self.degree;
        let span = self.interval(t) + p;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.full[span + 1 - j];
            right[j] = self.full[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        let mut out = vec![0.0; self.n_basis()];
        for (r, v) in n.into_iter().enumerate() {
            out[span - p + r] = v;
        }
        out
    }

    fn values_unchecked(&self, t: f64) -> Vec<f64> {
        let k = (self.degree + 1) as f64;
        let mut b = self.bspline_values(t);
        for (i, v) in b.iter_mut().enumerate() {
            let width = self.full[i + self.degree + 1] - self.full[i];
            *v = if width > 0.0 { *v * k / width } else { 0.0 };
        }
        b
    }

    /// M-spline basis values b_i(t); errors outside the boundary knots.
    pub fn values(&self, t: f64) -> Result<Vec<f64>> {
        if !(t >= self.lower() && t <= self.upper()) {
            return Err(Error::InvalidArgument(format!(
                "t = {t} lies outside the spline boundary [{}, {}]",
                self.lower(),
                self.upper()
            )));
        }
        Ok(self.values_unchecked(t))
    }

    fn knot_integrals(&self) -> Vec<Vec<f64>> {
        let (nodes, weights) = (&self.gl_nodes, &self.gl_weights);
        let nb = self.n_basis();
        let mut cum = vec![vec![0.0; self.knots.len()]; nb];
        for j in 0..self.knots.len() - 1 {
            let (lo, hi) = (self.knots[j], self.knots[j + 1]);
            let half = 0.5 * (hi - lo);
            let mut piece = vec![0.0; nb];
            for (x, w) in nodes.iter().zip(weights) {
                let v = self.values_unchecked(lo + half * (x + 1.0));
                for i in 0..nb {
                    piece[i] += half * w * v[i];
                }
            }
            for i in 0..nb {
                cum[i][j + 1] = cum[i][j] + piece[i];
            }
        }
        cum
    }

    /// ∫ from the lower boundary to t of each basis function, t clamped to
    /// the boundary range. Exact for polynomial pieces.
    pub fn integrals(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(self.lower(), self.upper());
        let j = self.interval(t);
        let lo = self.knots[j];
        let nb = self.n_basis();
        let mut out: Vec<f64> = (0..nb).map(|i| self.cumulative[i][j]).collect();
        if t > lo {
            let half = 0.5 * (t - lo);
            for (x, w) in self.gl_nodes.iter().zip(&self.gl_weights) {
                let v = self.values_unchecked(lo + half * (x + 1.0));
                for i in 0..nb {
                    out[i] += half * w * v[i];
                }
            }
        }
        out
    }
}

/// Internal knots at deciles of the event times (deduplicated), boundary
/// knots at 0 and `upper`.
pub fn default_knots(data: &[Observation], upper: f64) -> Result<Vec<f64>> {
    let mut events: Vec<f64> = data.iter().filter(|o| o.event).map(|o| o.time).collect();
    if events.is_empty() {
        return Err(Error::Validation("no events to place spline knots".into()));
    }
    events.sort_by(f64::total_cmp);
    let mut knots = vec![0.0];
    for d in 1..10 {
        let q = quantile_sorted(&events, d as f64 / 10.0);
        if q > *knots.last().unwrap() + 1e-8 && q < upper - 1e-8 {
            knots.push(q);
        }
    }
    if !(upper > *knots.last().unwrap()) {
        return Err(Error::Validation(
            "upper boundary knot must exceed the event times".into(),
        ));
    }
    knots.push(upper);
    Ok(knots)
}

/// Piecewise-constant hazard: `rates[i]` applies on [starts[i], starts[i+1]),
/// the last rate extends to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstantHazard {
    starts: Vec<f64>,
    rates: Vec<f64>,
    cumulative: Vec<f64>,
}

impl PiecewiseConstantHazard {
    pub fn new(starts: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if starts.is_empty()
            || starts.len() != rates.len()
            || starts[0] != 0.0
            || starts.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(Error::InvalidArgument(
                "piecewise hazard needs increasing starts beginning at 0".into(),
            ));
        }
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidArgument("background hazard must be nonnegative".into()));
        }
        let mut cumulative = vec![0.0; starts.len()];
        for i in 1..starts.len() {
            cumulative[i] = cumulative[i - 1] + rates[i - 1] * (starts[i] - starts[i - 1]);
        }
        Ok(Self {
            starts,
            rates,
            cumulative,
        })
    }

    pub fn zero() -> Self {
        Self::new(vec![0.0], vec![0.0]).unwrap()
    }

    /// Hazard implied by a tabulated survival curve; intervals where the
    /// curve hits zero reuse the previous finite rate.
    pub fn from_survival(times: &[f64], survival: &[f64]) -> Result<Self> {
        if times.len() < 2 || times.len() != survival.len() {
            return Err(Error::InvalidArgument("survival table too short".into()));
        }
        let mut rates = Vec::with_capacity(times.len() - 1);
        let mut last = 0.0;
        for i in 0..times.len() - 1 {
            let (s0, s1) = (survival[i], survival[i + 1]);
            let r = if s0 > 0.0 && s1 > 0.0 {
                ((s0 / s1).ln() / (times[i + 1] - times[i])).max(0.0)
            } else {
                last
            };
            rates.push(r);
            last = r;
        }
        Self::new(times[..times.len() - 1].to_vec(), rates)
    }

    fn index(&self, t: f64) -> usize {
        match self.starts.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        }
    }
}

impl HazardModel for PiecewiseConstantHazard {
    fn hazard(&self, t: f64) -> f64 {
        self.rates[self.index(t)]
    }

    fn cumulative_hazard(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let i = self.index(t);
        self.cumulative[i] + self.rates[i] * (t - self.starts[i])
    }
}

/// Total hazard η Σ p_i b_i(t) + h_p(t); the excess part is held at its
/// final-knot value beyond the upper boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct MSplineHazard {
    pub basis: MSplineBasis,
    pub coefficients: Vec<f64>,
    pub eta: f64,
    pub background: PiecewiseConstantHazard,
}

impl MSplineHazard {
    pub fn new(
        basis: MSplineBasis,
        coefficients: Vec<f64>,
        eta: f64,
        background: PiecewiseConstantHazard,
    ) -> Result<Self> {
        if coefficients.len() != basis.n_basis() {
            return Err(Error::InvalidArgument(format!(
                "expected {} spline coefficients, got {}",
                basis.n_basis(),
                coefficients.len()
            )));
        }
        let sum: f64 = coefficients.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || coefficients.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidArgument("spline coefficients must lie on the simplex".into()));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument("eta must be nonnegative".into()));
        }
        Ok(Self {
            basis,
            coefficients,
            eta,
            background,
        })
    }

    pub fn excess_hazard(&self, t: f64) -> f64 {
        if t < self.basis.lower() {
            return 0.0;
        }
        let v = self.basis.values_unchecked(t.min(self.basis.upper()));
        self.eta * v.iter().zip(&self.coefficients).map(|(b, p)| b * p).sum::<f64>()
    }

    pub fn excess_cumulative(&self, t: f64) -> f64 {
        if t <= self.basis.lower() {
            return 0.0;
        }
        let upper = self.basis.upper();
        let inside: f64 = self
            .basis
            .integrals(t)
            .iter()
            .zip(&self.coefficients)
            .map(|(i, p)| i * p)
            .sum::<f64>()
            * self.eta;
        if t > upper {
            inside + self.excess_hazard(upper) * (t - upper)
        } else {
            inside
        }
    }
}

impl HazardModel for MSplineHazard {
    fn hazard(&self, t: f64) -> f64 {
        self.excess_hazard(t) + self.background.hazard(t)
    }

    fn cumulative_hazard(&self, t: f64) -> f64 {
        self.excess_cumulative(t) + self.background.cumulative_hazard(t)
    }
}

/// Prior configuration and unconstrained layout for M-spline fits:
/// [log η, z_1..z_{n-1}, log σ_p] with p = softmax(γ), γ_n = 0 and
/// γ_i = γ_{i+1} + σ_p z_i. The random walk is non-centred so that σ_p and
/// the logits do not form a funnel for the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct MSplineSpec {
    pub basis: MSplineBasis,
    pub background: PiecewiseConstantHazard,
    pub log_eta_prior_mean: f64,
    pub log_eta_prior_sd: f64,
}

impl MSplineSpec {
    pub fn new(basis: MSplineBasis, background: PiecewiseConstantHazard) -> Self {
        Self {
            basis,
            background,
            log_eta_prior_mean: 0.0,
            log_eta_prior_sd: 3.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.n_basis() + 1
    }

    /// Logits γ_1..γ_n implied by the standardized increments.
    pub fn logits(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.basis.n_basis();
        let sigma = theta[n].exp();
        let mut g = vec![0.0; n];
        for i in (0..n - 1).rev() {
            g[i] = g[i + 1] + sigma * theta[1 + i];
        }
        g
    }

    pub fn coefficients(&self, theta: &[f64]) -> Vec<f64> {
        let logits = self.logits(theta);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|g| (g - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut p: Vec<f64> = exps.iter().map(|e| e / total).collect();
        // pin the simplex sum to one exactly
        let drift: f64 = p.iter().sum::<f64>() - 1.0;
        let imax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        p[imax] -= drift;
        p
    }

    pub fn build(&self, theta: &[f64]) -> Result<MSplineHazard> {
        MSplineHazard::new(
            self.basis.clone(),
            self.coefficients(theta),
            theta[0].exp(),
            self.background.clone(),
        )
    }

    /// log η ~ N(mean, sd²); random walk γ_i − γ_{i+1} ~ N(0, σ_p²) anchored
    /// at γ_n = 0, i.e. z_i ~ N(0, 1); σ_p ~ half-Normal(0, 1) (with
    /// log-scale Jacobian).
    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        let n = self.basis.n_basis();
        let log_sigma = theta[n];
        let sigma = log_sigma.exp();
        let mut lp = -0.5 * ((theta[0] - self.log_eta_prior_mean) / self.log_eta_prior_sd).powi(2);
        lp += -0.5 * sigma * sigma + log_sigma;
        lp - 0.5 * theta[1..n].iter().map(|z| z * z).sum::<f64>()
    }

    pub fn param_names(&self) -> Vec<String> {
        let n = self.basis.n_basis();
        let mut names = vec!["eta".to_string()];
        names.extend((1..=n).map(|i| format!("p{i}")));
        names.push("sigma_p".into());
        names
    }

    /// Reported parameters: η, the full simplex p_1..p_n, σ_p.
    pub fn transform(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.basis.n_basis();
        let mut out = vec![theta[0].exp()];
        out.extend(self.coefficients(theta));
        out.push(theta[n].exp());
        out
    }

    /// Rebuild the hazard from reported parameters.
    pub fn from_reported(&self, reported: &[f64]) -> Result<MSplineHazard> {
        let n = self.basis.n_basis();
        MSplineHazard::new(
            self.basis.clone(),
            reported[1..=n].to_vec(),
            reported[0],
            self.background.clone(),
        )
    }
}

pub struct MSplineTarget<'a> {
    pub spec: MSplineSpec,
    data: &'a [Observation],
}

impl<'a> MSplineTarget<'a> {
    pub fn new(spec: MSplineSpec, data: &'a [Observation]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("disease data are empty".into()));
        }
        Ok(Self { spec, data })
    }
}

impl LogDensity for MSplineTarget<'_> {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let lp = self.spec.log_prior(x);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self.spec.build(x) {
            Ok(h) => {
                let ll = loglik_censored(&h, self.data);
                if ll.is_finite() {
                    lp + ll
                } else {
                    f64::NEG_INFINITY
                }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn param_names(&self) -> Vec<String> {
        self.spec.param_names()
    }

    fn initial_point(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        x[0] = self.spec.log_eta_prior_mean;
        x[self.spec.basis.n_basis()] = -1.0;
        x
    }

    fn transform(&self, x: &[f64]) -> Vec<f64> {
        self.spec.transform(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..=6 {
            let (x, w) = gauss_legendre(n);
            let q = 2 * n as i32 - 2;
            let numeric: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(q)).sum();
            let exact = 2.0 / (q + 1) as f64;
            assert!((numeric - exact).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn degree_one_triangles() {
        let b = MSplineBasis::new(vec![0.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(b.n_basis(), 3);
        let v = b.values(0.5).unwrap();
        // B-values (0.5, 0.5, 0); spans 1, 2, 1; order 2
        assert!((v[0] - 1.0).abs() < 1e-14);
        assert!((v[1] - 0.5).abs() < 1e-14);
        assert!(v[2].abs() < 1e-14);
        let full = b.integrals(2.0);
        for i in full {
            assert!((i - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn partition_of_unity_after_denormalization() {
        let b = MSplineBasis::new(vec![0.0, 0.7, 1.5, 3.0, 8.0], 3).unwrap();
        let k = 4.0;
        for t in [0.0, 0.2, 0.7, 2.2, 7.9, 8.0] {
            let v = b.values(t).unwrap();
            let total: f64 = v
                .iter()
                .enumerate()
                .map(|(i, m)| m * (b.full[i + 4] - b.full[i]) / k)
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn continuous_at_interior_knots() {
        let b = MSplineBasis::new(vec![0.0, 1.0, 2.5, 4.0], 3).unwrap();
        for knot in [1.0, 2.5] {
            let l = b.values(knot - 1e-9).unwrap();
            let r = b.values(knot + 1e-9).unwrap();
            for (a, c) in l.iter().zip(&r) {
                assert!((a - c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn outside_boundary_is_error() {
        let b = MSplineBasis::new(vec![0.0, 1.0], 2).unwrap();
        assert!(b.values(1.5).is_err());
        assert!(b.values(-0.1).is_err());
    }

    #[test]
    fn eta_zero_recovers_background() {
        let b = MSplineBasis::new(vec![0.0, 2.0, 5.0], 3).unwrap();
        let n = b.n_basis();
        let bg = PiecewiseConstantHazard::new(vec![0.0, 1.0, 3.0], vec![0.01, 0.02, 0.05]).unwrap();
        let h = MSplineHazard::new(b, vec![1.0 / n as f64; n], 0.0, bg.clone()).unwrap();
        for t in [0.3, 1.0, 2.9, 4.0, 12.0] {
            assert_eq!(h.hazard(t), bg.hazard(t));
            assert_eq!(h.cumulative_hazard(t), bg.cumulative_hazard(t));
        }
    }

    #[test]
    fn excess_constant_beyond_last_knot() {
        let b = MSplineBasis::new(vec![0.0, 2.0, 5.0], 2).unwrap();
        let n = b.n_basis();
        let h = MSplineHazard::new(b, vec![1.0 / n as f64; n], 1.5, PiecewiseConstantHazard::zero())
            .unwrap();
        assert_eq!(h.hazard(5.0), h.hazard(9.0));
        let slope = (h.cumulative_hazard(9.0) - h.cumulative_hazard(7.0)) / 2.0;
        assert!((slope - h.hazard(5.0)).abs() < 1e-12);
    }

    #[test]
    fn piecewise_from_survival_round_trips() {
        let times = [0.0, 1.0, 2.0, 3.0];
        let s = [1.0, 0.9, 0.7, 0.0];
        let h = PiecewiseConstantHazard::from_survival(&times, &s).unwrap();
        assert!((h.survival(1.0) - 0.9).abs() < 1e-12);
        assert!((h.survival(2.0) - 0.7).abs() < 1e-12);
        assert!((h.hazard(2.5) - h.hazard(1.5)).abs() < 1e-15);
    }

    #[test]
    fn default_knots_are_increasing() {
        let data: Vec<Observation> = (1..=50)
            .map(|i| Observation::new(i as f64 * 0.1, i % 3 != 0))
            .collect();
        let k = default_knots(&data, 40.0).unwrap();
        assert_eq!(k[0], 0.0);
        assert_eq!(*k.last().unwrap(), 40.0);
        assert!(k.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(k.len(), 11);
    }

    #[test]
    fn simplex_sums_to_one() {
        let basis = MSplineBasis::new(vec![0.0, 1.0, 3.0, 6.0], 3).unwrap();
        let spec = MSplineSpec::new(basis, PiecewiseConstantHazard::zero());
        let theta = vec![0.3, 2.0, -1.0, 0.5, 7.0, -3.0, 0.1];
        let p = spec.coefficients(&theta);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn logit_increments_are_scaled_by_sigma() {
        let basis = MSplineBasis::new(vec![0.0, 1.0, 3.0, 6.0], 3).unwrap();
        let spec = MSplineSpec::new(basis, PiecewiseConstantHazard::zero());
        let theta = vec![0.3, 2.0, -1.0, 0.5, 7.0, -3.0, 0.4f64];
        let g = spec.logits(&theta);
        assert_eq!(g[5], 0.0);
        for i in 0..5 {
            assert!(((g[i] - g[i + 1]) / 0.4f64.exp() - theta[1 + i]).abs() < 1e-12);
        }
    }
}

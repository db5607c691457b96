//! Hazard models and censored-data likelihoods: parametric poly-hazard
//! models coupled to an external population, and M-spline excess-hazard
//! models over a known background hazard.

mod component;
mod mspline;
mod poly;

pub use component::{ComponentDerivs, Family, HazardComponent};
pub use mspline::{
    default_knots, gauss_legendre, MSplineBasis, MSplineHazard, MSplineSpec, MSplineTarget,
    PiecewiseConstantHazard,
};
pub use poly::{
    joint_loglik, joint_loglik_gradient, poly_hazard, Coupling, Group, GroupHazard,
    JointPolyHazard, PolyHazardSpec, PolyHazardTarget,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One right-censored observation: `event = false` means censored at `time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub event: bool,
}

impl Observation {
    pub fn new(time: f64, event: bool) -> Self {
        Self { time, event }
    }
}

pub trait HazardModel {
    fn hazard(&self, t: f64) -> f64;

    fn cumulative_hazard(&self, t: f64) -> f64;

    fn survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        (-self.cumulative_hazard(t)).exp()
    }
}

/// Σ_i [log S(t_i) + c_i log h(t_i)]. Returns −∞ rather than NaN whenever the
/// model yields a non-finite contribution.
pub fn loglik_censored<M: HazardModel + ?Sized>(model: &M, data: &[Observation]) -> f64 {
    let mut total = 0.0;
    for obs in data {
        if !(obs.time > 0.0) {
            return f64::NEG_INFINITY;
        }
        total -= model.cumulative_hazard(obs.time);
        if obs.event {
            total += model.hazard(obs.time).ln();
        }
    }
    if total.is_nan() {
        f64::NEG_INFINITY
    } else {
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    BiWeibull,
    BiLoglogistic,
    TriLoglogistic,
    Mspline,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bi-weibull" => Ok(Self::BiWeibull),
            "bi-loglogistic" => Ok(Self::BiLoglogistic),
            "tri-loglogistic" => Ok(Self::TriLoglogistic),
            "mspline" => Ok(Self::Mspline),
            other => Err(Error::Config(format!(
                "unknown model {other:?}; expected bi-weibull, bi-loglogistic, tri-loglogistic or mspline"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::BiWeibull => "bi-weibull",
            Self::BiLoglogistic => "bi-loglogistic",
            Self::TriLoglogistic => "tri-loglogistic",
            Self::Mspline => "mspline",
        }
    }

    /// Family and component count for poly-hazard models.
    pub fn poly_layout(&self) -> Option<(Family, usize)> {
        match self {
            Self::BiWeibull => Some((Family::Weibull, 2)),
            Self::BiLoglogistic => Some((Family::LogLogistic, 2)),
            Self::TriLoglogistic => Some((Family::LogLogistic, 3)),
            Self::Mspline => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f64);

    impl HazardModel for Constant {
        fn hazard(&self, _t: f64) -> f64 {
            self.0
        }
        fn cumulative_hazard(&self, t: f64) -> f64 {
            self.0 * t
        }
    }

    #[test]
    fn single_censored_observation() {
        let ll = loglik_censored(&Constant(0.3), &[Observation::new(2.0, false)]);
        assert!((ll + 0.6).abs() < 1e-15);
    }

    #[test]
    fn single_event_observation() {
        let ll = loglik_censored(&Constant(0.3), &[Observation::new(2.0, true)]);
        assert!((ll - (0.3f64.ln() - 0.6)).abs() < 1e-15);
    }

    #[test]
    fn zero_hazard_at_event_is_negative_infinity() {
        let ll = loglik_censored(&Constant(0.0), &[Observation::new(1.0, true)]);
        assert_eq!(ll, f64::NEG_INFINITY);
    }

    #[test]
    fn model_names_round_trip() {
        for k in [
            ModelKind::BiWeibull,
            ModelKind::BiLoglogistic,
            ModelKind::TriLoglogistic,
            ModelKind::Mspline,
        ] {
            assert_eq!(ModelKind::parse(k.as_str()).unwrap(), k);
        }
        assert!(ModelKind::parse("gompertz").is_err());
    }
}

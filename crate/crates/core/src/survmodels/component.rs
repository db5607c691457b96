use serde::{Deserialize, Serialize};

use super::HazardModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Weibull,
    LogLogistic,
}

/// One parametric hazard component with shape `a` and scale `b` (time units).
///
/// Weibull: h(t) = (a/b)(t/b)^(a-1), H(t) = (t/b)^a.
/// Log-logistic: h(t) = (a/b)(t/b)^(a-1) / (1 + (t/b)^a), H(t) = ln(1 + (t/b)^a).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardComponent {
    pub family: Family,
    pub shape: f64,
    pub scale: f64,
}

/// Hazard and cumulative hazard at one time point with their derivatives
/// with respect to (log shape, log scale).
#[derive(Debug, Clone, Copy)]
pub struct ComponentDerivs {
    pub hazard: f64,
    pub cumhaz: f64,
    pub d_hazard: [f64; 2],
    pub d_cumhaz: [f64; 2],
}

impl HazardComponent {
    pub fn new(family: Family, shape: f64, scale: f64) -> Self {
        Self {
            family,
            shape,
            scale,
        }
    }

    pub fn weibull(shape: f64, scale: f64) -> Self {
        Self::new(Family::Weibull, shape, scale)
    }

    pub fn log_logistic(shape: f64, scale: f64) -> Self {
        Self::new(Family::LogLogistic, shape, scale)
    }

    pub fn is_valid(&self) -> bool {
        self.shape.is_finite() && self.scale.is_finite() && self.shape > 0.0 && self.scale > 0.0
    }

    pub fn derivs(&self, t: f64) -> ComponentDerivs {
        let a = self.shape;
        let r = (t / self.scale).ln();
        let u = (a * r).exp();
        match self.family {
            Family::Weibull => {
                let hazard = a / t * u;
                ComponentDerivs {
                    hazard,
                    cumhaz: u,
                    d_hazard: [hazard * (1.0 + a * r), -a * hazard],
                    d_cumhaz: [a * r * u, -a * u],
                }
            }
            Family::LogLogistic => {
                let frac = u / (1.0 + u);
                let hazard = a / t * frac;
                let inv = 1.0 / (1.0 + u);
                ComponentDerivs {
                    hazard,
                    cumhaz: u.ln_1p(),
                    d_hazard: [hazard * (1.0 + a * r * inv), -a * inv * hazard],
                    d_cumhaz: [a * r * frac, -a * frac],
                }
            }
        }
    }
}

impl HazardModel for HazardComponent {
    fn hazard(&self, t: f64) -> f64 {
        let a = self.shape;
        let base = (a / self.scale) * (t / self.scale).powf(a - 1.0);
        match self.family {
            Family::Weibull => base,
            Family::LogLogistic => base / (1.0 + (t / self.scale).powf(a)),
        }
    }

    fn cumulative_hazard(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let u = (t / self.scale).powf(self.shape);
        match self.family {
            Family::Weibull => u,
            Family::LogLogistic => u.ln_1p(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_special_case() {
        let c = HazardComponent::weibull(1.0, 5.0);
        for t in [0.1, 1.0, 7.5, 40.0] {
            assert!((c.hazard(t) - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn log_logistic_closed_form() {
        let c = HazardComponent::log_logistic(1.0, 1.0);
        assert!((c.hazard(1.0) - 0.5).abs() < 1e-15);
        assert!((c.hazard(3.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn weibull_shape_two_matches_numeric_derivative() {
        let c = HazardComponent::weibull(2.0, 1.0);
        assert!((c.hazard(3.0) - 6.0).abs() < 1e-12);
        let h = 1e-6;
        let numeric = (c.cumulative_hazard(3.0 + h) - c.cumulative_hazard(3.0 - h)) / (2.0 * h);
        assert!((numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn survival_at_zero_and_scale() {
        let c = HazardComponent::weibull(1.0, 10.0);
        assert_eq!(c.survival(0.0), 1.0);
        assert!((c.survival(10.0) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn derivs_match_direct_evaluation() {
        for c in [
            HazardComponent::weibull(1.3, 4.0),
            HazardComponent::log_logistic(0.7, 2.5),
        ] {
            let d = c.derivs(3.3);
            assert!((d.hazard - c.hazard(3.3)).abs() < 1e-12);
            assert!((d.cumhaz - c.cumulative_hazard(3.3)).abs() < 1e-12);
        }
    }
}

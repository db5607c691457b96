use serde::{Deserialize, Serialize};

use super::{loglik_censored, ComponentDerivs, Family, HazardComponent, HazardModel, Observation};
use crate::error::{Error, Result};
use crate::inference::LogDensity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Coupling {
    /// Disease component 1 hazard = C × population component 1 hazard.
    pub proportional_first: bool,
    /// Disease component 3 is the population component 3 (M = 3 only).
    pub shared_third: bool,
}

impl Default for Coupling {
    fn default() -> Self {
        Self {
            proportional_first: true,
            shared_third: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Disease,
    Population,
}

/// Disease and external-population poly-hazard models sharing coupled
/// components.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPolyHazard {
    population: Vec<HazardComponent>,
    disease: Vec<HazardComponent>,
    c: f64,
    coupling: Coupling,
}

impl JointPolyHazard {
    /// `disease` lists every disease component; coupled slots are overwritten
    /// from `population` so the coupling invariants hold by construction.
    pub fn new(
        population: Vec<HazardComponent>,
        mut disease: Vec<HazardComponent>,
        c: f64,
        coupling: Coupling,
    ) -> Result<Self> {
        let m = population.len();
        if !(2..=3).contains(&m) || disease.len() != m {
            return Err(Error::InvalidArgument(
                "poly-hazard models need 2 or 3 components in both groups".into(),
            ));
        }
        if coupling.shared_third && m != 3 {
            return Err(Error::Config("shared_third coupling needs 3 components".into()));
        }
        if coupling.proportional_first {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument("C must be positive".into()));
            }
            disease[0] = population[0];
        }
        if coupling.shared_third {
            disease[2] = population[2];
        }
        Ok(Self {
            population,
            disease,
            c: if coupling.proportional_first { c } else { 1.0 },
            coupling,
        })
    }

    pub fn components(&self, group: Group) -> &[HazardComponent] {
        match group {
            Group::Disease => &self.disease,
            Group::Population => &self.population,
        }
    }

    pub fn proportionality(&self) -> f64 {
        self.c
    }

    pub fn coupling(&self) -> Coupling {
        self.coupling
    }

    /// Multiplier applied to component `m` in `group`.
    pub fn factor(&self, group: Group, m: usize) -> f64 {
        if group == Group::Disease && m == 0 && self.coupling.proportional_first {
            self.c
        } else {
            1.0
        }
    }

    pub fn component_hazard(&self, group: Group, m: usize, t: f64) -> f64 {
        self.factor(group, m) * self.components(group)[m].hazard(t)
    }

    pub fn group(&self, group: Group) -> GroupHazard<'_> {
        GroupHazard { model: self, group }
    }
}

/// Borrowed view of one group's total hazard.
#[derive(Debug, Clone, Copy)]
pub struct GroupHazard<'a> {
    model: &'a JointPolyHazard,
    group: Group,
}

impl HazardModel for GroupHazard<'_> {
    fn hazard(&self, t: f64) -> f64 {
        (0..self.model.components(self.group).len())
            .map(|m| self.model.component_hazard(self.group, m, t))
            .sum()
    }

    fn cumulative_hazard(&self, t: f64) -> f64 {
        self.model
            .components(self.group)
            .iter()
            .enumerate()
            .map(|(m, c)| self.model.factor(self.group, m) * c.cumulative_hazard(t))
            .sum()
    }
}

pub fn poly_hazard(model: &JointPolyHazard, group: Group, t: f64) -> f64 {
    model.group(group).hazard(t)
}

pub fn joint_loglik(
    model: &JointPolyHazard,
    disease: &[Observation],
    population: &[Observation],
) -> f64 {
    loglik_censored(&model.group(Group::Disease), disease)
        + loglik_censored(&model.group(Group::Population), population)
}

/// Layout of the unconstrained parameter vector of a joint poly-hazard
/// model: population (log a, log b) per component, then the free disease
/// components, then log C when the first components are proportional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyHazardSpec {
    pub family: Family,
    pub components: usize,
    pub coupling: Coupling,
    pub shape_scale_prior_sd: f64,
    pub log_c_prior_sd: f64,
    /// Permit fitting without external data (anchoring off).
    pub allow_no_external: bool,
}

impl PolyHazardSpec {
    pub fn new(family: Family, components: usize, coupling: Coupling) -> Result<Self> {
        if !(2..=3).contains(&components) {
            return Err(Error::Config("poly-hazard models need 2 or 3 components".into()));
        }
        if coupling.shared_third && components != 3 {
            return Err(Error::Config(
                "shared_third coupling requires a 3-component model".into(),
            ));
        }
        Ok(Self {
            family,
            components,
            coupling,
            shape_scale_prior_sd: 2.0,
            log_c_prior_sd: 1.0,
            allow_no_external: false,
        })
    }

    fn coupled(&self, m: usize) -> bool {
        (m == 0 && self.coupling.proportional_first) || (m == 2 && self.coupling.shared_third)
    }

    fn free_disease(&self) -> Vec<usize> {
        (0..self.components).filter(|&m| !self.coupled(m)).collect()
    }

    pub fn dim(&self) -> usize {
        2 * self.components + 2 * self.free_disease().len() + usize::from(self.coupling.proportional_first)
    }

    /// Parameter slots (log a, log b) feeding component `m` of `group`.
    fn slots(&self, group: Group, m: usize) -> (usize, usize) {
        match group {
            Group::Population => (2 * m, 2 * m + 1),
            Group::Disease if self.coupled(m) => (2 * m, 2 * m + 1),
            Group::Disease => {
                let k = self.free_disease().iter().position(|&f| f == m).unwrap();
                let base = 2 * self.components + 2 * k;
                (base, base + 1)
            }
        }
    }

    fn c_slot(&self) -> Option<usize> {
        self.coupling.proportional_first.then(|| self.dim() - 1)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for m in 0..self.components {
            names.push(format!("pop.shape{}", m + 1));
            names.push(format!("pop.scale{}", m + 1));
        }
        for m in self.free_disease() {
            names.push(format!("dis.shape{}", m + 1));
            names.push(format!("dis.scale{}", m + 1));
        }
        if self.coupling.proportional_first {
            names.push("C".into());
        }
        names
    }

    pub fn build(&self, theta: &[f64]) -> Result<JointPolyHazard> {
        let comp = |(ia, ib): (usize, usize)| {
            HazardComponent::new(self.family, theta[ia].exp(), theta[ib].exp())
        };
        let population: Vec<_> = (0..self.components)
            .map(|m| comp(self.slots(Group::Population, m)))
            .collect();
        let disease: Vec<_> = (0..self.components)
            .map(|m| comp(self.slots(Group::Disease, m)))
            .collect();
        if population.iter().chain(&disease).any(|c| !c.is_valid()) {
            return Err(Error::InvalidArgument("non-finite component parameters".into()));
        }
        let c = self.c_slot().map_or(1.0, |i| theta[i].exp());
        JointPolyHazard::new(population, disease, c, self.coupling)
    }

    /// Independent Normal priors on the unconstrained coordinates, truncated
    /// to increasing component scales within each group.
    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        for group in [Group::Population, Group::Disease] {
            let scales: Vec<f64> = (0..self.components)
                .map(|m| theta[self.slots(group, m).1])
                .collect();
            if scales.windows(2).any(|w| w[0] >= w[1]) {
                return f64::NEG_INFINITY;
            }
        }
        let c_slot = self.c_slot();
        theta
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let sd = if Some(i) == c_slot {
                    self.log_c_prior_sd
                } else {
                    self.shape_scale_prior_sd
                };
                -0.5 * (v / sd).powi(2)
            })
            .sum()
    }

    /// Ordered starting scales (log b = -1, 1, 3) with unit shapes.
    pub fn initial_point(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for group in [Group::Population, Group::Disease] {
            for m in 0..self.components {
                x[self.slots(group, m).1] = -1.0 + 2.0 * m as f64;
            }
        }
        x
    }
}

fn accumulate_group(
    spec: &PolyHazardSpec,
    model: &JointPolyHazard,
    group: Group,
    data: &[Observation],
    grad: &mut [f64],
) {
    let comps = model.components(group);
    let c_slot = spec.c_slot();
    let mut derivs: Vec<ComponentDerivs> = Vec::with_capacity(comps.len());
    for obs in data {
        derivs.clear();
        derivs.extend(comps.iter().map(|c| c.derivs(obs.time)));
        let h_total: f64 = derivs
            .iter()
            .enumerate()
            .map(|(m, d)| model.factor(group, m) * d.hazard)
            .sum();
        for (m, d) in derivs.iter().enumerate() {
            let f = model.factor(group, m);
            let (ia, ib) = spec.slots(group, m);
            let w = if obs.event { f / h_total } else { 0.0 };
            grad[ia] += -f * d.d_cumhaz[0] + w * d.d_hazard[0];
            grad[ib] += -f * d.d_cumhaz[1] + w * d.d_hazard[1];
            if group == Group::Disease && m == 0 {
                if let Some(ic) = c_slot {
                    grad[ic] += -f * d.cumhaz + w * d.hazard;
                }
            }
        }
    }
}

/// Analytic gradient of [`joint_loglik`] with respect to the unconstrained
/// parameter vector of `spec`.
pub fn joint_loglik_gradient(
    spec: &PolyHazardSpec,
    theta: &[f64],
    disease: &[Observation],
    population: &[Observation],
) -> Result<Vec<f64>> {
    let model = spec.build(theta)?;
    let mut grad = vec![0.0; spec.dim()];
    accumulate_group(spec, &model, Group::Disease, disease, &mut grad);
    accumulate_group(spec, &model, Group::Population, population, &mut grad);
    Ok(grad)
}

/// Joint posterior of a coupled poly-hazard model given disease-arm data
/// and synthetic external-population data.
pub struct PolyHazardTarget<'a> {
    pub spec: PolyHazardSpec,
    disease: &'a [Observation],
    population: &'a [Observation],
}

impl<'a> PolyHazardTarget<'a> {
    pub fn new(
        spec: PolyHazardSpec,
        disease: &'a [Observation],
        population: &'a [Observation],
    ) -> Result<Self> {
        if disease.is_empty() {
            return Err(Error::InvalidArgument("disease data are empty".into()));
        }
        if population.is_empty() && !spec.allow_no_external {
            return Err(Error::Config(
                "external population data are empty; set allow_no_external to fit without anchoring"
                    .into(),
            ));
        }
        Ok(Self {
            spec,
            disease,
            population,
        })
    }
}

impl LogDensity for PolyHazardTarget<'_> {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let lp = self.spec.log_prior(x);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self.spec.build(x) {
            Ok(model) => {
                let ll = joint_loglik(&model, self.disease, self.population);
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

    /// Population scales at quantiles of the external death times, free
    /// disease scales stepped up from the first population scale. Falls back
    /// to the spec's fixed point when that ordering cannot be met.
    fn initial_point(&self) -> Vec<f64> {
        let fixed = self.spec.initial_point();
        let mut times: Vec<f64> = self.population.iter().filter(|o| o.event).map(|o| o.time).collect();
        let m_total = self.spec.components;
        if times.len() < m_total {
            return fixed;
        }
        times.sort_by(f64::total_cmp);
        let mut x = fixed.clone();
        let mut last = f64::NEG_INFINITY;
        for m in 0..m_total {
            let f = (m as f64 + 0.5) / m_total as f64;
            let q = times[((times.len() - 1) as f64 * f) as usize].max(1e-3).ln();
            let (ia, ib) = self.spec.slots(Group::Population, m);
            x[ia] = 1.0;
            x[ib] = q.max(last + 0.1);
            last = x[ib];
        }
        let base = x[self.spec.slots(Group::Population, 0).1];
        for m in self.spec.free_disease() {
            let (ia, ib) = self.spec.slots(Group::Disease, m);
            x[ia] = 0.0;
            x[ib] = base + 0.5 * m as f64;
        }
        if self.log_density(&x).is_finite() {
            x
        } else {
            fixed
        }
    }

    fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.exp()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_comp(rate: f64) -> HazardComponent {
        HazardComponent::weibull(1.0, 1.0 / rate)
    }

    #[test]
    fn additive_constant_components() {
        let pop = vec![exp_comp(0.1), exp_comp(0.3)];
        let m = JointPolyHazard::new(
            pop.clone(),
            pop,
            1.0,
            Coupling {
                proportional_first: false,
                shared_third: false,
            },
        )
        .unwrap();
        assert!((poly_hazard(&m, Group::Population, 2.0) - 0.4).abs() < 1e-14);
    }

    #[test]
    fn proportional_coupling_scales_first_component() {
        let pop = vec![exp_comp(0.1), exp_comp(0.3)];
        let dis = vec![exp_comp(9.0), exp_comp(0.5)];
        let m = JointPolyHazard::new(pop, dis, 2.0, Coupling::default()).unwrap();
        assert!((m.component_hazard(Group::Disease, 0, 1.7) - 0.2).abs() < 1e-14);
        assert!((poly_hazard(&m, Group::Disease, 1.7) - 0.7).abs() < 1e-14);
    }

    #[test]
    fn shared_third_differs_only_in_first_two() {
        let ll = HazardComponent::log_logistic;
        let pop = vec![ll(1.2, 0.5), ll(1.5, 3.0), ll(4.0, 20.0)];
        let dis = vec![ll(1.0, 1.0), ll(0.8, 2.0), ll(9.0, 9.0)];
        let coupling = Coupling {
            proportional_first: true,
            shared_third: true,
        };
        let m = JointPolyHazard::new(pop, dis, 3.0, coupling).unwrap();
        for t in [0.5, 2.0, 10.0] {
            assert_eq!(
                m.component_hazard(Group::Disease, 2, t),
                m.component_hazard(Group::Population, 2, t)
            );
            let ratio = m.component_hazard(Group::Disease, 0, t)
                / m.component_hazard(Group::Population, 0, t);
            assert!((ratio - 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn shared_third_with_two_components_is_rejected() {
        let coupling = Coupling {
            proportional_first: true,
            shared_third: true,
        };
        assert!(PolyHazardSpec::new(Family::LogLogistic, 2, coupling).is_err());
    }

    #[test]
    fn perturbing_shared_component_changes_both_terms() {
        let spec = PolyHazardSpec::new(
            Family::LogLogistic,
            3,
            Coupling {
                proportional_first: true,
                shared_third: true,
            },
        )
        .unwrap();
        let theta = spec.initial_point();
        let dis = [Observation::new(1.0, true), Observation::new(2.5, false)];
        let pop = [Observation::new(4.0, true), Observation::new(9.0, true)];
        let base = spec.build(&theta).unwrap();
        let mut moved = theta.clone();
        moved[5] += 0.3; // pop.scale3
        let other = spec.build(&moved).unwrap();
        let d0 = loglik_censored(&base.group(Group::Disease), &dis);
        let d1 = loglik_censored(&other.group(Group::Disease), &dis);
        let p0 = loglik_censored(&base.group(Group::Population), &pop);
        let p1 = loglik_censored(&other.group(Group::Population), &pop);
        assert!(d0 != d1 && p0 != p1);
    }

    #[test]
    fn empty_external_data_needs_flag() {
        let mut spec = PolyHazardSpec::new(Family::Weibull, 2, Coupling::default()).unwrap();
        let dis = [Observation::new(1.0, true)];
        assert!(PolyHazardTarget::new(spec.clone(), &dis, &[]).is_err());
        spec.allow_no_external = true;
        let t = PolyHazardTarget::new(spec.clone(), &dis, &[]).unwrap();
        let x = spec.initial_point();
        let model = spec.build(&x).unwrap();
        let expect = spec.log_prior(&x) + loglik_censored(&model.group(Group::Disease), &dis);
        assert!((t.log_density(&x) - expect).abs() < 1e-12);
    }

    #[test]
    fn unordered_scales_have_zero_prior_mass() {
        let spec = PolyHazardSpec::new(Family::Weibull, 2, Coupling::default()).unwrap();
        let mut x = spec.initial_point();
        x[1] = 5.0;
        assert_eq!(spec.log_prior(&x), f64::NEG_INFINITY);
    }
}

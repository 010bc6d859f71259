//! Built-in scenarios: the tangency example on `O = (−1, 1)`, `T = 2`.
//!
//! `dX = −2(s−1) ds + σ dW` with `ℓ = 1`, `g = 0`, so `V(t,x) = E[τ] − t`.
//! The deterministic variant has `σ = 0`; its flow
//! `X_s = −(s−1)² + x + (t−1)²` grazes `x = 1` along the parabola `x = −t² + 2t`.
//! The stochastic variant uses `σ = (2s − x)⁺`.

use std::str::FromStr;
use std::sync::Arc;

use super::{ControlSet, CostDerivs, SdeModel};
use crate::error::{Error, Result};
use crate::geometry::{SpaceDomain, SpaceTimeDomain};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example41 {
    stochastic: bool,
}

impl Example41 {
    pub fn deterministic() -> Self {
        Example41 { stochastic: false }
    }

    pub fn stochastic() -> Self {
        Example41 { stochastic: true }
    }
}

impl SdeModel for Example41 {
    fn name(&self) -> &str {
        if self.stochastic {
            "example41_stochastic"
        } else {
            "example41_deterministic"
        }
    }
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_noise(&self) -> usize {
        1
    }
    fn dim_control(&self) -> usize {
        1
    }
    #[inline]
    fn drift(&self, t: f64, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = -2.0 * (t - 1.0);
    }
    #[inline]
    fn diffusion(&self, t: f64, x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = if self.stochastic { (2.0 * t - x[0]).max(0.0) } else { 0.0 };
    }
    #[inline]
    fn running_cost(&self, _t: f64, _x: &[f64], _a: &[f64]) -> f64 {
        1.0
    }
    #[inline]
    fn terminal_cost(&self, _t: f64, _x: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost_derivs(&self, _t: f64, x: &[f64]) -> Option<CostDerivs> {
        Some(CostDerivs::zero(x.len()))
    }
    fn is_deterministic(&self) -> bool {
        !self.stochastic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioName {
    Example41Deterministic,
    Example41Stochastic,
}

impl ScenarioName {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Example41Deterministic => "example41_deterministic",
            ScenarioName::Example41Stochastic => "example41_stochastic",
        }
    }
}

impl FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example41_deterministic" => Ok(ScenarioName::Example41Deterministic),
            "example41_stochastic" => Ok(ScenarioName::Example41Stochastic),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }
}

#[derive(Clone)]
pub struct Scenario {
    pub model: Arc<dyn SdeModel>,
    pub domain: SpaceTimeDomain,
    pub controls: ControlSet,
}

pub fn builtin_scenario(name: &str) -> Result<Scenario> {
    let model = match name.parse::<ScenarioName>()? {
        ScenarioName::Example41Deterministic => Example41::deterministic(),
        ScenarioName::Example41Stochastic => Example41::stochastic(),
    };
    Ok(Scenario {
        model: Arc::new(model),
        domain: SpaceTimeDomain::new(SpaceDomain::interval(-1.0, 1.0)?, 2.0)?,
        controls: ControlSet::singleton(vec![0.0])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients() {
        let d = builtin_scenario("example41_deterministic").unwrap();
        let mut b = [0.0];
        d.model.drift(0.0, &[0.3], &[0.0], &mut b);
        assert_eq!(b[0], 2.0);
        assert!(d.model.is_deterministic());
        assert_eq!(d.domain.horizon, 2.0);

        let s = builtin_scenario("example41_stochastic").unwrap();
        let mut sig = [0.0];
        s.model.diffusion(1.0, &[0.0], &[0.0], &mut sig);
        assert_eq!(sig[0], 2.0);
        s.model.diffusion(0.0, &[1.0], &[0.0], &mut sig);
        assert_eq!(sig[0], 0.0);
        assert_eq!(s.controls.len(), 1);
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(builtin_scenario("example42"), Err(Error::UnknownScenario(_))));
    }
}

//! Scenario files.
//!
//! ```toml
//! preset = "disability"      # or "constant"
//! T = 25.0
//! age = 45.0
//! beta = 2.0
//! zeta0 = 0.4
//! zeta1 = 0.1
//! lambda = [0.2, 0.3, 0.0]
//! pi = [1.0, 0.0, 0.0]
//! discount_rate = 0.01
//!
//! [payments]
//! b = 1.0
//! epsilon = 0.25
//!
//! # constant preset only
//! [[transitions]]
//! from = "active"
//! to = "dead"
//! rate = 0.01
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use mfdi_core::model::{
    make_disability_annuity, make_disability_scenario, AveragingFunction, DisabilityParams,
    DiscountRate, Hazard, PaymentSpec, RateModel, Scenario, StateSpace,
};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub preset: Option<String>,
    #[serde(alias = "T")]
    pub horizon: Option<f64>,
    pub age: Option<f64>,
    pub beta: Option<f64>,
    pub zeta0: Option<f64>,
    pub zeta1: Option<f64>,
    pub lambda: Option<Vec<f64>>,
    pub pi: Option<Vec<f64>>,
    pub discount_rate: Option<f64>,
    pub payments: Option<PaymentsFile>,
    pub transitions: Option<Vec<TransitionFile>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaymentsFile {
    pub b: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionFile {
    pub from: String,
    pub to: String,
    pub rate: f64,
}

/// A fully resolved scenario with its contract.
pub struct Setup {
    pub scenario: Scenario,
    /// Parameters of the disability preset, when used.
    pub params: Option<DisabilityParams>,
    pub payments: PaymentSpec,
    pub discount: DiscountRate,
    pub b: f64,
    pub epsilon: f64,
    pub rate: f64,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))
    }

    pub fn resolve(&self) -> Result<Setup, CliError> {
        let horizon = self.horizon.unwrap_or(25.0);
        let preset = self.preset.as_deref().unwrap_or("disability");
        let (mut scenario, params) = match preset {
            "disability" => {
                if self.transitions.is_some() {
                    return Err(CliError::Usage(
                        "`transitions` is only valid with preset = \"constant\"".into(),
                    ));
                }
                let d = DisabilityParams::default();
                let lambda = match &self.lambda {
                    None => d.lambda,
                    Some(l) => <[f64; 3]>::try_from(l.as_slice()).map_err(|_| {
                        CliError::Usage(format!("lambda needs 3 entries, got {}", l.len()))
                    })?,
                };
                let p = DisabilityParams {
                    beta: self.beta.unwrap_or(d.beta),
                    zeta0: self.zeta0.unwrap_or(d.zeta0),
                    zeta1: self.zeta1.unwrap_or(d.zeta1),
                    lambda,
                    age: self.age.unwrap_or(d.age),
                };
                (make_disability_scenario(&p, horizon)?, Some(p))
            }
            "constant" => {
                for (name, v) in [
                    ("beta", self.beta),
                    ("zeta0", self.zeta0),
                    ("zeta1", self.zeta1),
                    ("age", self.age),
                ] {
                    if v.is_some() {
                        return Err(CliError::Usage(format!(
                            "`{name}` is only valid with preset = \"disability\""
                        )));
                    }
                }
                (self.constant_scenario(horizon)?, None)
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown preset '{other}' (expected \"disability\" or \"constant\")"
                )))
            }
        };
        if let Some(pi) = &self.pi {
            scenario = scenario.with_pi(pi.clone())?;
        }
        let pay = self.payments.as_ref();
        let b = pay.and_then(|p| p.b).unwrap_or(1.0);
        let epsilon = pay.and_then(|p| p.epsilon).unwrap_or(0.25);
        let rate = self.discount_rate.unwrap_or(0.01);
        if !rate.is_finite() {
            return Err(CliError::Usage(format!(
                "discount_rate {rate} must be finite"
            )));
        }
        Ok(Setup {
            scenario,
            params,
            payments: make_disability_annuity(b, epsilon)?,
            discount: DiscountRate::Constant(rate),
            b,
            epsilon,
            rate,
        })
    }

    fn constant_scenario(&self, horizon: f64) -> Result<Scenario, CliError> {
        let states = StateSpace::disability();
        let n = states.len();
        let lambda = self.lambda.clone().unwrap_or_else(|| vec![0.0; n]);
        if lambda.len() != n {
            return Err(CliError::Usage(format!(
                "lambda needs {n} entries, got {}",
                lambda.len()
            )));
        }
        let check = |what: String, r: f64| {
            if r.is_finite() && r >= 0.0 {
                Ok(())
            } else {
                Err(CliError::Usage(format!(
                    "{what} = {r} must be finite and nonnegative"
                )))
            }
        };
        let mut rates = RateModel::new(n);
        let mut bounds = vec![0.0; n];
        let mut params = BTreeMap::new();
        for t in self.transitions.iter().flatten() {
            let idx = |name: &str| {
                states
                    .index_of(name)
                    .ok_or_else(|| CliError::Usage(format!("unknown state '{name}'")))
            };
            let (j, k) = (idx(&t.from)?, idx(&t.to)?);
            if j == k {
                return Err(CliError::Usage(format!(
                    "transition {} -> {} is not a jump",
                    t.from, t.to
                )));
            }
            check(format!("rate {} -> {}", t.from, t.to), t.rate)?;
            rates = rates.with_transition(j, k, Hazard::constant(t.rate));
            bounds[j] += t.rate;
            params.insert(format!("mu:{}->{}", t.from, t.to), t.rate);
        }
        for (j, &l) in lambda.iter().enumerate() {
            check(format!("lambda[{j}]"), l)?;
            if l > 0.0 && !states.is_absorbing(j) {
                rates = rates.with_health(j, Hazard::constant(l));
                bounds[j] += l;
                params.insert(format!("lambda:{}", states.name(j)), l);
            }
        }
        Ok(Scenario::new(
            "constant",
            states,
            rates.with_state_bounds(bounds),
            AveragingFunction::health_count(),
            vec![1.0, 0.0, 0.0],
            horizon,
            params,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Setup, CliError> {
        toml::from_str::<ScenarioFile>(text)
            .map_err(|e| CliError::Usage(e.to_string()))?
            .resolve()
    }

    #[test]
    fn empty_file_is_the_disability_preset() {
        let setup = parse("").unwrap();
        assert_eq!(setup.params, Some(DisabilityParams::default()));
        assert_eq!(setup.scenario.horizon, 25.0);
        assert_eq!((setup.b, setup.epsilon, setup.rate), (1.0, 0.25, 0.01));
    }

    #[test]
    fn overrides_and_aliases() {
        let setup =
            parse("T = 10.0\nzeta0 = 0.5\npi = [0.5, 0.5, 0.0]\n[payments]\nb = 2.0\n").unwrap();
        assert_eq!(setup.scenario.horizon, 10.0);
        assert_eq!(setup.params.unwrap().zeta0, 0.5);
        assert_eq!(setup.scenario.pi, vec![0.5, 0.5, 0.0]);
        assert_eq!(setup.b, 2.0);
    }

    #[test]
    fn constant_preset_builds_bounded_rates() {
        let setup = parse(
            "preset = \"constant\"\nlambda = [0.2, 0.0, 0.0]\n[[transitions]]\nfrom = \"active\"\nto = \"dead\"\nrate = 0.05\n",
        )
        .unwrap();
        let s = &setup.scenario;
        assert!(setup.params.is_none());
        assert!((s.rates.state_bound(0) - 0.25).abs() < 1e-15);
        assert!(!s.is_collective());
    }

    #[test]
    fn invalid_inputs_are_usage_errors() {
        for text in [
            "lambda = [0.1, 0.2]",
            "preset = \"other\"",
            "preset = \"constant\"\nbeta = 1.0",
            "[[transitions]]\nfrom = \"active\"\nto = \"dead\"\nrate = 0.1",
            "preset = \"constant\"\n[[transitions]]\nfrom = \"active\"\nto = \"dead\"\nrate = -1.0",
            "preset = \"constant\"\n[[transitions]]\nfrom = \"active\"\nto = \"nowhere\"\nrate = 0.1",
        ] {
            assert!(matches!(parse(text), Err(CliError::Usage(_))), "{text}");
        }
        assert!(matches!(parse("beta = -1.0"), Err(CliError::Core(_))));
    }
}

//! Expected cash flows and prospective reserves at inception.
//!
//! The cash-flow density at `t` is
//! `sum_j sum_h int (b_j(t,u) + sum_k b_jk(t,u) mu_jk(t,u,h,y)) p_j(t,du,h)`,
//! evaluated stage by stage with the Stieltjes sums of [`crate::grid`]. The
//! reserve discounts the density (never the accumulated cash flow) with the
//! trapezoidal rule over the time grid.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::{
    floor_index, integrate_cdf, mass_from_duration, Conditioning, GridSpec, ProbabilityGrid,
    StageView,
};
use crate::model::{collapse_single_individual, DiscountRate, PaymentSpec, Scenario, SojournTerm};
use crate::solver::{
    meanfield_fingerprint, ForwardSolver, MeanPath, NoObserver, SolverOptions, SolverReport,
    StageObserver,
};

/// Expected payment density and its trapezoidal accumulation on the time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CashFlow {
    spec: GridSpec,
    density: Vec<f64>,
    accumulated: Vec<f64>,
}

impl CashFlow {
    pub fn from_density(spec: GridSpec, density: Vec<f64>) -> Self {
        let eta = spec.eta();
        let mut accumulated = Vec::with_capacity(density.len());
        let mut acc = 0.0;
        for (m, d) in density.iter().enumerate() {
            if m > 0 {
                acc += 0.5 * eta * (density[m - 1] + d);
            }
            accumulated.push(acc);
        }
        Self {
            spec,
            density,
            accumulated,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn accumulated(&self) -> &[f64] {
        &self.accumulated
    }

    /// Accumulated expected payments at the horizon.
    pub fn total(&self) -> f64 {
        self.accumulated.last().copied().unwrap_or(0.0)
    }

    /// `t,density,accumulated,discounted_cumulative`, followed by `#`-prefixed footer lines.
    pub fn write_csv<W: Write>(
        &self,
        discount: &DiscountRate,
        footer: &[(&str, String)],
        mut w: W,
    ) -> std::io::Result<()> {
        writeln!(w, "t,density,accumulated,discounted_cumulative")?;
        let factors = discount_factors(&self.spec, discount);
        let eta = self.spec.eta();
        let mut disc_acc = 0.0;
        for m in 0..self.density.len() {
            if m > 0 {
                disc_acc += 0.5
                    * eta
                    * (factors[m - 1] * self.density[m - 1] + factors[m] * self.density[m]);
            }
            writeln!(
                w,
                "{:.6},{:.12e},{:.12e},{:.12e}",
                self.spec.time(m),
                self.density[m],
                self.accumulated[m],
                disc_acc
            )?;
        }
        for (k, v) in footer {
            writeln!(w, "# {k}: {v}")?;
        }
        Ok(())
    }
}

/// Which model produced a reserve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelTag {
    Classic,
    Health,
    MeanField,
    TrueSingle,
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelTag::Classic => "classic",
            ModelTag::Health => "health",
            ModelTag::MeanField => "meanfield",
            ModelTag::TrueSingle => "true-n1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReserveKind {
    Portfolio,
    StateConditioned(usize),
}

/// Prospective reserve at inception.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reserve {
    pub value: f64,
    pub kind: ReserveKind,
    pub model: ModelTag,
}

/// Discount factors `exp(-int_0^{t_m} r)` on the grid; the integral of a
/// non-constant rate is accumulated with the trapezoidal rule.
pub fn discount_factors(spec: &GridSpec, r: &DiscountRate) -> Vec<f64> {
    match r {
        DiscountRate::Constant(rate) => (0..spec.stages())
            .map(|m| (-rate * spec.time(m)).exp())
            .collect(),
        DiscountRate::Curve(_) => {
            let mut acc = 0.0;
            let mut out = Vec::with_capacity(spec.stages());
            for m in 0..spec.stages() {
                if m > 0 {
                    acc += 0.5 * spec.eta() * (r.rate(spec.time(m - 1)) + r.rate(spec.time(m)));
                }
                out.push((-acc).exp());
            }
            out
        }
    }
}

/// Trapezoidal present value of the density.
pub fn reserve_value(cf: &CashFlow, r: &DiscountRate) -> f64 {
    let factors = discount_factors(&cf.spec, r);
    let last = cf.density.len().saturating_sub(1);
    let eta = cf.spec.eta();
    cf.density
        .iter()
        .zip(&factors)
        .enumerate()
        .map(|(m, (d, f))| {
            let w = if m == 0 || m == last { 0.5 } else { 1.0 };
            w * eta * f * d
        })
        .sum()
}

/// Reserve from a cash flow.
pub fn reserve(cf: &CashFlow, r: &DiscountRate, kind: ReserveKind, model: ModelTag) -> Reserve {
    Reserve {
        value: reserve_value(cf, r),
        kind,
        model,
    }
}

/// Expected payment rate at one stage; `y` is the collective argument used by
/// the rates at that stage.
pub fn cashflow_density(view: &StageView<'_>, y: &[f64], s: &Scenario, pay: &PaymentSpec) -> f64 {
    let t = view.t;
    let eta = view.eta;
    let n = view.n_states();
    let mut total = 0.0;
    for j in 0..n {
        let sojourn = pay.sojourn_terms(j);
        let lumps = pay.has_lumps_from(j);
        if sojourn.is_empty() && !lumps {
            continue;
        }
        for h in 0..view.health_levels() {
            let q = view.cdf(j, h);
            for term in sojourn {
                total += match term {
                    SojournTerm::Annuity { rate, waiting } => {
                        rate * mass_from_duration(q, eta, *waiting)
                    }
                    SojournTerm::Custom(f) => integrate_cdf(q, eta, |u| f(t, u)),
                };
            }
            if lumps {
                for k in (0..n).filter(|&k| k != j && !pay.lump_terms(j, k).is_empty()) {
                    let Some(mu) = s.rates.transition(j, k) else {
                        continue;
                    };
                    total += integrate_cdf(q, eta, |u| {
                        pay.lump(j, k, t, u) * mu.eval(t, u, h as i64, y)
                    });
                }
            }
        }
    }
    total
}

/// Streams stages into a cash-flow density.
pub struct CashFlowAccumulator<'a> {
    scenario: &'a Scenario,
    payments: &'a PaymentSpec,
    density: Vec<f64>,
}

impl<'a> CashFlowAccumulator<'a> {
    pub fn new(scenario: &'a Scenario, payments: &'a PaymentSpec) -> Self {
        Self {
            scenario,
            payments,
            density: Vec::new(),
        }
    }

    pub fn finish(self, spec: GridSpec) -> CashFlow {
        CashFlow::from_density(spec, self.density)
    }
}

impl StageObserver for CashFlowAccumulator<'_> {
    fn on_stage(&mut self, stage: StageView<'_>, y: &[f64]) -> Result<()> {
        let d = cashflow_density(&stage, y, self.scenario, self.payments);
        if !d.is_finite() {
            return Err(Error::Numerical(format!(
                "cash-flow density not finite at t = {}",
                stage.t
            )));
        }
        self.density.push(d);
        Ok(())
    }
}

/// Expected cash flow from a stored grid. Scenarios whose rates read the
/// collective need the mean path of the same scenario and grid.
pub fn expected_cashflow(
    grid: &ProbabilityGrid,
    pay: &PaymentSpec,
    s: &Scenario,
    v: Option<&MeanPath>,
) -> Result<CashFlow> {
    let spec = *grid.spec();
    if let Some(v) = v {
        let expected = meanfield_fingerprint(s, &spec);
        if v.fingerprint() != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: v.fingerprint().to_string(),
            });
        }
    } else if s.is_collective() {
        return Err(Error::Config(
            "scenario rates depend on the collective; a mean path is required".into(),
        ));
    }
    let zeros = vec![0.0; s.g.dim()];
    let mut acc = CashFlowAccumulator::new(s, pay);
    for m in 0..grid.stages_stored() {
        let y = v.map_or(zeros.as_slice(), |v| v.at(m));
        acc.on_stage(grid.stage(m), y)?;
    }
    Ok(acc.finish(spec))
}

/// Waiting periods of all annuity terms after rounding down to the grid.
pub fn effective_waiting_periods(pay: &PaymentSpec, eta: f64) -> Vec<f64> {
    (0..pay.n_states())
        .flat_map(|j| pay.sojourn_terms(j).iter())
        .filter_map(|t| match t {
            SojournTerm::Annuity { waiting, .. } => Some(floor_index(*waiting, eta) as f64 * eta),
            SojournTerm::Custom(_) => None,
        })
        .collect()
}

/// Result of [`run_model`].
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub cashflow: CashFlow,
    pub reserve: Reserve,
    pub report: SolverReport,
    /// Mean path of the mean-field runs.
    pub mean_path: Option<MeanPath>,
}

/// Solves `model` on `spec` and values `pay`, streaming stages into the cash
/// flow and into `extra` (for example a [`crate::solver::GridRecorder`]).
///
/// `TrueSingle` collapses the collective onto the individual's own claims and
/// uses the health-claims solver. A state-conditioned mean-field reserve first
/// solves for the mean path and then for the transition probabilities.
#[allow(clippy::too_many_arguments)]
pub fn run_model(
    s: &Scenario,
    spec: GridSpec,
    pay: &PaymentSpec,
    discount: &DiscountRate,
    model: ModelTag,
    kind: ReserveKind,
    options: SolverOptions,
    extra: &mut dyn StageObserver,
) -> Result<ModelRun> {
    let cond = match kind {
        ReserveKind::Portfolio => Conditioning::Initial,
        ReserveKind::StateConditioned(i) => Conditioning::State(i),
    };
    let collapsed;
    let target = if model == ModelTag::TrueSingle {
        collapsed = collapse_single_individual(s);
        &collapsed
    } else {
        s
    };
    let solver = ForwardSolver::new(target, spec).with_options(options);
    let mut acc = CashFlowAccumulator::new(target, pay);
    let mut mean_path = None;
    let report = {
        let mut obs = (&mut acc, extra);
        match (model, cond) {
            (ModelTag::Classic, _) => solver.semimarkov(cond, &mut obs)?,
            (ModelTag::Health | ModelTag::TrueSingle, _) => solver.health(cond, &mut obs)?,
            (ModelTag::MeanField, Conditioning::Initial) => {
                let (v, report) = solver.meanfield_occupation(&mut obs)?;
                mean_path = Some(v);
                report
            }
            (ModelTag::MeanField, Conditioning::State(i)) => {
                let (v, _) = solver.meanfield_occupation(&mut NoObserver)?;
                let report = solver.meanfield_transition(&v, i, &mut obs)?;
                mean_path = Some(v);
                report
            }
        }
    };
    let cashflow = acc.finish(spec);
    let reserve = reserve(&cashflow, discount, kind, model);
    Ok(ModelRun {
        cashflow,
        reserve,
        report,
        mean_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, Conditioning};
    use crate::model::*;
    use crate::solver::{solve_health, solve_semimarkov};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn pure_death(mu: f64) -> Scenario {
        let rates = RateModel::new(3)
            .with_transition(ACTIVE, DEAD, Hazard::constant(mu))
            .with_state_bounds(vec![mu, 0.0, 0.0]);
        Scenario::new(
            "pure-death",
            StateSpace::disability(),
            rates,
            AveragingFunction::health_count(),
            vec![1.0, 0.0, 0.0],
            5.0,
            BTreeMap::from([("mu".to_string(), mu)]),
        )
        .unwrap()
    }

    #[test]
    fn zero_payments_give_zero_cash_flow() {
        let s = pure_death(0.3);
        let spec = build_grid(5.0, 0.05, 0).unwrap();
        let (grid, _) = solve_semimarkov(&s, Conditioning::Initial, spec).unwrap();
        let cf = expected_cashflow(&grid, &PaymentSpec::zero(3), &s, None).unwrap();
        assert!(cf.density().iter().all(|&d| d == 0.0));
        assert_eq!(cf.total(), 0.0);
        assert_eq!(reserve_value(&cf, &DiscountRate::Constant(0.01)), 0.0);
    }

    #[test]
    fn death_benefit_accumulates_to_death_probability() {
        let mu = 0.3;
        let s = pure_death(mu);
        let spec = build_grid(5.0, 0.01, 0).unwrap();
        let (grid, _) = solve_semimarkov(&s, Conditioning::Initial, spec).unwrap();
        let pay = PaymentSpec::zero(3).with_lump(ACTIVE, DEAD, LumpPayment::Constant(1.0));
        let cf = expected_cashflow(&grid, &pay, &s, None).unwrap();
        assert!((cf.total() - (1.0 - (-mu * 5.0f64).exp())).abs() <= 5.0 * spec.eta());
        assert_eq!(cf.accumulated()[0], 0.0);
        // no discounting: the reserve equals the accumulated cash flow
        let v = reserve_value(&cf, &DiscountRate::Constant(0.0));
        assert!((v - cf.total()).abs() < 1e-12);
    }

    #[test]
    fn annuity_density_matches_waiting_period_formula() {
        let p = DisabilityParams {
            beta: 0.0,
            ..Default::default()
        };
        let s = make_disability_scenario(&p, 3.0).unwrap();
        let spec = build_grid(3.0, 0.05, 5).unwrap();
        let (grid, _) = solve_health(&s, Conditioning::Initial, spec).unwrap();
        let pay = make_disability_annuity(1.0, 0.25).unwrap();
        let cf = expected_cashflow(&grid, &pay, &s, None).unwrap();
        let k_eps = 5;
        for m in 0..spec.stages() {
            let expected: f64 = if m < k_eps {
                0.0
            } else {
                (0..=5)
                    .map(|h| grid.raw(DISABLED, h, m, m) - grid.raw(DISABLED, h, m, k_eps))
                    .sum()
            };
            assert!((cf.density()[m] - expected).abs() < 1e-15);
        }
        assert_eq!(effective_waiting_periods(&pay, 0.1), vec![0.2]);
    }

    #[test]
    fn collective_scenario_needs_mean_path() {
        let s = make_disability_scenario(&DisabilityParams::default(), 1.0).unwrap();
        let spec = build_grid(1.0, 0.1, 2).unwrap();
        let c = collapse_single_individual(&s);
        let (grid, _) = solve_health(&c, Conditioning::Initial, spec).unwrap();
        let pay = make_disability_annuity(1.0, 0.25).unwrap();
        assert!(expected_cashflow(&grid, &pay, &s, None).is_err());
        assert!(expected_cashflow(&grid, &pay, &c, None).is_ok());
    }

    #[test]
    fn curve_discount_matches_constant() {
        let spec = build_grid(5.0, 0.05, 0).unwrap();
        let cf = CashFlow::from_density(spec, vec![1.0; spec.stages()]);
        let a = reserve_value(&cf, &DiscountRate::Constant(0.03));
        let b = reserve_value(&cf, &DiscountRate::Curve(Arc::new(|_| 0.03)));
        assert!((a - b).abs() < 1e-12);
        assert!((a - (1.0 - (-0.15f64).exp()) / 0.03).abs() < 1e-4);
    }

    #[test]
    fn csv_layout() {
        let spec = build_grid(1.0, 0.5, 0).unwrap();
        let cf = CashFlow::from_density(spec, vec![0.0, 1.0, 1.0]);
        let mut out = Vec::new();
        cf.write_csv(
            &DiscountRate::Constant(0.0),
            &[("reserve", "0.75".into())],
            &mut out,
        )
        .unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,density,accumulated,discounted_cumulative");
        assert!(lines[3].starts_with("1.000000,1.0"));
        assert!(lines[3].ends_with(",7.500000000000e-1"));
        assert_eq!(lines[4], "# reserve: 0.75");
    }
}

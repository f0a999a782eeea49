//! Model objects: states, hazards, averaging function, payments and the
//! three-state disability preset with collective health claims.
//!
//! Every hazard is a host callback with the uniform signature
//! `(t, u, h, y) -> rate`, where `t` is calendar time since inception, `u` the
//! duration since the last state change, `h` the individual's health-claim count
//! and `y` the collective quantity (the group average `nu` in the n-individual
//! model, the mean `v` in the mean-field model). Each hazard also declares which
//! arguments it actually reads, which lets the solvers cache evaluations.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Index of a state in a [`StateSpace`].
pub type StateId = usize;

pub const ACTIVE: StateId = 0;
pub const DISABLED: StateId = 1;
pub const DEAD: StateId = 2;

/// Finite, ordered state space with absorbing flags.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    names: Vec<String>,
    absorbing: Vec<bool>,
}

impl StateSpace {
    pub fn new<S: Into<String>>(names: Vec<S>, absorbing: Vec<bool>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config(
                "state space must contain at least one state".into(),
            ));
        }
        if names.len() != absorbing.len() {
            return Err(Error::Config(
                "one absorbing flag per state required".into(),
            ));
        }
        Ok(Self { names, absorbing })
    }

    /// Active, Disabled, Dead.
    pub fn disability() -> Self {
        Self {
            names: vec!["active".into(), "disabled".into(), "dead".into()],
            absorbing: vec![false, false, true],
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, j: StateId) -> &str {
        &self.names[j]
    }

    pub fn is_absorbing(&self, j: StateId) -> bool {
        self.absorbing[j]
    }

    pub fn index_of(&self, name: &str) -> Option<StateId> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }
}

/// Which arguments a hazard (or the averaging function) actually reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Dependence {
    pub time: bool,
    pub duration: bool,
    pub health: bool,
    pub collective: bool,
}

impl Dependence {
    pub const NONE: Dependence = Dependence {
        time: false,
        duration: false,
        health: false,
        collective: false,
    };
    pub const ALL: Dependence = Dependence {
        time: true,
        duration: true,
        health: true,
        collective: true,
    };

    pub fn union(self, other: Dependence) -> Dependence {
        Dependence {
            time: self.time || other.time,
            duration: self.duration || other.duration,
            health: self.health || other.health,
            collective: self.collective || other.collective,
        }
    }
}

type HazardFn = dyn Fn(f64, f64, i64, &[f64]) -> f64 + Send + Sync;

/// A nonnegative rate function `(t, u, h, y) -> rate per year`.
#[derive(Clone)]
pub struct Hazard {
    f: Arc<HazardFn>,
    dep: Dependence,
}

impl Hazard {
    pub fn new<F>(dep: Dependence, f: F) -> Self
    where
        F: Fn(f64, f64, i64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            f: Arc::new(f),
            dep,
        }
    }

    pub fn constant(rate: f64) -> Self {
        Self::new(Dependence::NONE, move |_, _, _, _| rate)
    }

    #[inline]
    pub fn eval(&self, t: f64, u: f64, h: i64, y: &[f64]) -> f64 {
        (self.f)(t, u, h, y)
    }

    pub fn dependence(&self) -> Dependence {
        self.dep
    }
}

impl fmt::Debug for Hazard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Hazard").field("dep", &self.dep).finish()
    }
}

/// Transition rates `mu_jk` and health-claim hazards `lambda_j`, together with
/// per-state bounds on the total event intensity.
#[derive(Clone, Debug)]
pub struct RateModel {
    n: usize,
    mu: Vec<Option<Hazard>>,
    lambda: Vec<Option<Hazard>>,
    state_bounds: Vec<f64>,
}

impl RateModel {
    /// A model with `n` states and no hazards at all.
    pub fn new(n: usize) -> Self {
        Self {
            n,
            mu: vec![None; n * n],
            lambda: vec![None; n],
            state_bounds: vec![0.0; n],
        }
    }

    pub fn with_transition(mut self, j: StateId, k: StateId, hazard: Hazard) -> Self {
        assert!(
            j != k && j < self.n && k < self.n,
            "invalid transition {j} -> {k}"
        );
        self.mu[j * self.n + k] = Some(hazard);
        self
    }

    pub fn with_health(mut self, j: StateId, hazard: Hazard) -> Self {
        self.lambda[j] = Some(hazard);
        self
    }

    /// Upper bound of `sum_k mu_jk + lambda_j` over the horizon, per state.
    pub fn with_state_bounds(mut self, bounds: Vec<f64>) -> Self {
        assert_eq!(bounds.len(), self.n);
        self.state_bounds = bounds;
        self
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn transition(&self, j: StateId, k: StateId) -> Option<&Hazard> {
        if j == k || j >= self.n || k >= self.n {
            return None;
        }
        self.mu[j * self.n + k].as_ref()
    }

    pub fn health(&self, j: StateId) -> Option<&Hazard> {
        self.lambda.get(j).and_then(Option::as_ref)
    }

    /// Bound on the total event intensity while in state `j`.
    pub fn state_bound(&self, j: StateId) -> f64 {
        self.state_bounds[j]
    }

    /// Bound on every individual hazard.
    pub fn rate_bound(&self) -> f64 {
        self.state_bounds.iter().copied().fold(0.0, f64::max)
    }

    /// Upper bound on all health-claim hazards, used for the cut-off rule.
    pub fn health_bound(&self) -> f64 {
        (0..self.n)
            .filter(|&j| self.lambda[j].is_some())
            .map(|j| self.state_bounds[j])
            .fold(0.0, f64::max)
    }

    /// Union of the dependences of all hazards.
    pub fn dependence(&self) -> Dependence {
        self.mu
            .iter()
            .chain(self.lambda.iter())
            .flatten()
            .fold(Dependence::NONE, |acc, h| acc.union(h.dep))
    }

    /// Union of the dependences of the transition rates only.
    pub fn transition_dependence(&self) -> Dependence {
        self.mu
            .iter()
            .flatten()
            .fold(Dependence::NONE, |acc, h| acc.union(h.dep))
    }

    pub fn has_health_claims(&self) -> bool {
        self.lambda.iter().any(Option::is_some)
    }

    fn map_hazards(&self, mut f: impl FnMut(StateId, &Hazard) -> Hazard) -> Self {
        let n = self.n;
        let mu = self
            .mu
            .iter()
            .enumerate()
            .map(|(idx, h)| h.as_ref().map(|h| f(idx / n, h)))
            .collect();
        let lambda = self
            .lambda
            .iter()
            .enumerate()
            .map(|(j, h)| h.as_ref().map(|h| f(j, h)))
            .collect();
        Self {
            n,
            mu,
            lambda,
            state_bounds: self.state_bounds.clone(),
        }
    }
}

type AveragingFn = dyn Fn(StateId, f64, i64, &mut [f64]) + Send + Sync;

/// The function `g(z, u, h)` whose group average couples the individuals.
#[derive(Clone)]
pub struct AveragingFunction {
    dim: usize,
    f: Arc<AveragingFn>,
    dep: Dependence,
}

impl AveragingFunction {
    pub fn new<F>(dim: usize, dep: Dependence, f: F) -> Self
    where
        F: Fn(StateId, f64, i64, &mut [f64]) + Send + Sync + 'static,
    {
        assert!(dim >= 1);
        Self {
            dim,
            f: Arc::new(f),
            dep,
        }
    }

    /// `g(z, u, h) = h`.
    pub fn health_count() -> Self {
        Self::new(
            1,
            Dependence {
                health: true,
                ..Dependence::NONE
            },
            |_, _, h, out| out[0] = h as f64,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dependence(&self) -> Dependence {
        self.dep
    }

    #[inline]
    pub fn eval_into(&self, z: StateId, u: f64, h: i64, out: &mut [f64]) {
        (self.f)(z, u, h, out)
    }

    pub fn eval(&self, z: StateId, u: f64, h: i64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(z, u, h, &mut out);
        out
    }
}

impl fmt::Debug for AveragingFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AveragingFunction")
            .field("dim", &self.dim)
            .field("dep", &self.dep)
            .finish()
    }
}

/// Full model specification.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub states: StateSpace,
    pub rates: RateModel,
    pub g: AveragingFunction,
    pub pi: Vec<f64>,
    pub horizon: f64,
    pub params: BTreeMap<String, f64>,
    label: String,
}

impl Scenario {
    /// `label` identifies the rate callbacks; it enters the fingerprint together
    /// with the numeric parameters, so distinct models need distinct labels.
    pub fn new(
        label: impl Into<String>,
        states: StateSpace,
        rates: RateModel,
        g: AveragingFunction,
        pi: Vec<f64>,
        horizon: f64,
        params: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let n = states.len();
        if rates.n_states() != n {
            return Err(Error::Config(format!(
                "rate model has {} states, state space has {n}",
                rates.n_states()
            )));
        }
        if pi.len() != n {
            return Err(Error::Config(format!(
                "pi has {} entries, expected {n}",
                pi.len()
            )));
        }
        if pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("pi entries must lie in [0, 1]".into()));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("pi sums to {total}, expected 1")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon T = {horizon} must be positive"
            )));
        }
        for j in 0..n {
            if states.is_absorbing(j) && (0..n).any(|k| rates.transition(j, k).is_some()) {
                return Err(Error::Config(format!(
                    "absorbing state {} has outgoing transitions",
                    states.name(j)
                )));
            }
        }
        Ok(Self {
            states,
            rates,
            g,
            pi,
            horizon,
            params,
            label: label.into(),
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    /// Stable hash of everything that determines the model.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.label.as_bytes());
        hasher.update(self.horizon.to_bits().to_le_bytes());
        for p in &self.pi {
            hasher.update(p.to_bits().to_le_bytes());
        }
        for (k, v) in &self.params {
            hasher.update(k.as_bytes());
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }

    pub fn with_pi(mut self, pi: Vec<f64>) -> Result<Self> {
        let s = Scenario::new(
            self.label.clone(),
            self.states.clone(),
            self.rates.clone(),
            self.g.clone(),
            pi,
            self.horizon,
            std::mem::take(&mut self.params),
        )?;
        Ok(s)
    }

    /// Transition rate `mu_jk(t, u, h, y)`.
    pub fn transition_rate(
        &self,
        j: StateId,
        k: StateId,
        t: f64,
        u: f64,
        h: i64,
        y: &[f64],
    ) -> Result<f64> {
        let n = self.n_states();
        if j == k || j >= n || k >= n {
            return Err(Error::Domain(format!(
                "no transition {j} -> {k} in a {n}-state model"
            )));
        }
        if y.len() != self.g.dim() {
            return Err(Error::Domain(format!(
                "collective argument has dimension {}, expected {}",
                y.len(),
                self.g.dim()
            )));
        }
        if t < 0.0 || u < 0.0 || h < -1 {
            return Err(Error::Domain(format!(
                "invalid arguments t={t}, u={u}, h={h}"
            )));
        }
        Ok(self
            .rates
            .transition(j, k)
            .map_or(0.0, |mu| mu.eval(t, u, h, y)))
    }

    /// Health-claim hazard `lambda_j(t, u, h, y)`; zero for `h = -1`.
    pub fn health_hazard(&self, j: StateId, t: f64, u: f64, h: i64, y: &[f64]) -> Result<f64> {
        if j >= self.n_states() {
            return Err(Error::Domain(format!("no state {j}")));
        }
        if t < 0.0 || u < 0.0 || h < -1 {
            return Err(Error::Domain(format!(
                "invalid arguments t={t}, u={u}, h={h}"
            )));
        }
        if h == -1 {
            return Ok(0.0);
        }
        Ok(self.rates.health(j).map_or(0.0, |l| l.eval(t, u, h, y)))
    }

    /// Whether any hazard reads the collective argument.
    pub fn is_collective(&self) -> bool {
        self.rates.dependence().collective
    }
}

/// The one-individual model: the group average of a single individual is
/// `g` of its own state, so `y := g(z, u, h)` is substituted into every hazard.
pub fn collapse_single_individual(s: &Scenario) -> Scenario {
    let g = s.g.clone();
    let rates = s.rates.map_hazards(|z, hz| {
        if !hz.dep.collective {
            return hz.clone();
        }
        let inner = hz.clone();
        let g = g.clone();
        let gd = g.dependence();
        let dep = Dependence {
            time: hz.dep.time,
            duration: hz.dep.duration || gd.duration,
            health: hz.dep.health || gd.health,
            collective: false,
        };
        Hazard::new(dep, move |t, u, h, _y| {
            let mut buf = [0.0; 8];
            if g.dim() <= buf.len() {
                let y = &mut buf[..g.dim()];
                g.eval_into(z, u, h.max(0), y);
                inner.eval(t, u, h, y)
            } else {
                let y = g.eval(z, u, h.max(0));
                inner.eval(t, u, h, &y)
            }
        })
    });
    Scenario {
        states: s.states.clone(),
        rates,
        g: s.g.clone(),
        pi: s.pi.clone(),
        horizon: s.horizon,
        params: s.params.clone(),
        label: format!("{}/single-individual", s.label),
    }
}

/// Parameters of the disability preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisabilityParams {
    pub beta: f64,
    pub zeta0: f64,
    pub zeta1: f64,
    /// Health-claim rates while active, disabled, dead.
    pub lambda: [f64; 3],
    /// Age at inception.
    pub age: f64,
}

impl Default for DisabilityParams {
    fn default() -> Self {
        Self {
            beta: 2.0,
            zeta0: DEFAULT_ZETA0,
            zeta1: 0.1,
            lambda: [0.2, 0.3, 0.0],
            age: 45.0,
        }
    }
}

/// Cap on the credibility deviation used when none is configured.
pub const DEFAULT_ZETA0: f64 = 0.4;

const PARAM_NAMES: [&str; 7] = [
    "beta", "zeta0", "zeta1", "lambda1", "lambda2", "lambda3", "age",
];

impl DisabilityParams {
    /// Reads `beta, zeta0, zeta1, lambda1, lambda2, lambda3` (and optionally `age`).
    pub fn from_named(named: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str| {
            named
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing parameter `{k}`")))
        };
        let p = Self {
            beta: get("beta")?,
            zeta0: get("zeta0")?,
            zeta1: get("zeta1")?,
            lambda: [get("lambda1")?, get("lambda2")?, get("lambda3")?],
            age: named.get("age").copied().unwrap_or(45.0),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_named(&self) -> BTreeMap<String, f64> {
        let vals = [
            self.beta,
            self.zeta0,
            self.zeta1,
            self.lambda[0],
            self.lambda[1],
            self.lambda[2],
            self.age,
        ];
        PARAM_NAMES
            .iter()
            .zip(vals)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.to_named() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "parameter `{name}` must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Disability rate without the collective factor.
    pub fn base_disability(&self, t: f64) -> f64 {
        let a = t + self.age;
        (-9.55 + 0.24 * a - 0.0046 * a * a + 0.000036 * a * a * a).exp()
    }

    pub fn mortality(&self, t: f64) -> f64 {
        0.0005 + 10f64.powf(5.52 + 0.038 * (t + self.age) - 10.0)
    }

    /// Capped deviation of the credibility-weighted collective claim rate from the baseline.
    pub fn credibility(&self, t: f64, y: f64) -> f64 {
        ((y + self.zeta1) / (1.0 + t) - self.zeta1).min(self.zeta0)
    }

    pub fn disability_rate(&self, t: f64, y: f64) -> f64 {
        self.base_disability(t) * (self.beta * self.credibility(t, y)).exp()
    }

    pub fn recovery_rate(&self, t: f64, u: f64) -> f64 {
        (2.11 - 0.039 * (t + self.age) - 1.44 * u).exp()
    }

    pub fn disabled_mortality(&self, t: f64, u: f64) -> f64 {
        self.mortality(t) + (-2.79 - 0.23 * u).exp()
    }
}

/// The three-state disability scenario with collective health claims.
///
/// `g(z, u, h) = h`, everyone starts active.
pub fn make_disability_scenario(params: &DisabilityParams, horizon: f64) -> Result<Scenario> {
    params.validate()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Config(format!(
            "horizon T = {horizon} must be positive"
        )));
    }
    let p = *params;
    let time = Dependence {
        time: true,
        ..Dependence::NONE
    };
    let time_duration = Dependence {
        time: true,
        duration: true,
        ..Dependence::NONE
    };
    let mu12_dep = Dependence {
        time: true,
        collective: p.beta != 0.0,
        ..Dependence::NONE
    };

    let mut rates = RateModel::new(3)
        .with_transition(
            ACTIVE,
            DISABLED,
            Hazard::new(mu12_dep, move |t, _, _, y| p.disability_rate(t, y[0])),
        )
        .with_transition(
            ACTIVE,
            DEAD,
            Hazard::new(time, move |t, _, _, _| p.mortality(t)),
        )
        .with_transition(
            DISABLED,
            ACTIVE,
            Hazard::new(time_duration, move |t, u, _, _| p.recovery_rate(t, u)),
        )
        .with_transition(
            DISABLED,
            DEAD,
            Hazard::new(time_duration, move |t, u, _, _| p.disabled_mortality(t, u)),
        );
    for (j, &l) in p.lambda.iter().enumerate() {
        if l > 0.0 {
            rates = rates.with_health(j, Hazard::constant(l));
        }
    }
    // The age polynomial has a negative discriminant in its derivative, so the
    // base disability rate and mortality increase with t, while the recovery
    // and duration-dependent mortality terms decrease in t and u.
    let active_bound =
        p.base_disability(horizon) * (p.beta * p.zeta0).exp() + p.mortality(horizon) + p.lambda[0];
    let disabled_bound =
        p.recovery_rate(0.0, 0.0) + p.mortality(horizon) + (-2.79f64).exp() + p.lambda[1];
    let rates = rates.with_state_bounds(vec![active_bound, disabled_bound, p.lambda[2]]);

    Scenario::new(
        "disability3",
        StateSpace::disability(),
        rates,
        AveragingFunction::health_count(),
        vec![1.0, 0.0, 0.0],
        horizon,
        p.to_named(),
    )
}

type PaymentFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

/// One additive term of a sojourn payment rate `b_j(t, u)`.
#[derive(Clone)]
pub enum SojournTerm {
    /// `rate * 1{u >= waiting}`.
    Annuity {
        rate: f64,
        waiting: f64,
    },
    Custom(Arc<PaymentFn>),
}

impl SojournTerm {
    pub fn eval(&self, t: f64, u: f64) -> f64 {
        match self {
            SojournTerm::Annuity { rate, waiting } => {
                if u >= *waiting {
                    *rate
                } else {
                    0.0
                }
            }
            SojournTerm::Custom(f) => f(t, u),
        }
    }
}

impl fmt::Debug for SojournTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SojournTerm::Annuity { rate, waiting } => f
                .debug_struct("Annuity")
                .field("rate", rate)
                .field("waiting", waiting)
                .finish(),
            SojournTerm::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Transition payment `b_jk(t, u)`.
#[derive(Clone)]
pub enum LumpPayment {
    Constant(f64),
    Custom(Arc<PaymentFn>),
}

impl LumpPayment {
    pub fn eval(&self, t: f64, u: f64) -> f64 {
        match self {
            LumpPayment::Constant(c) => *c,
            LumpPayment::Custom(f) => f(t, u),
        }
    }
}

impl fmt::Debug for LumpPayment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LumpPayment::Constant(c) => write!(f, "Constant({c})"),
            LumpPayment::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Sojourn payment rates and transition payments of a contract.
#[derive(Clone, Debug)]
pub struct PaymentSpec {
    n: usize,
    sojourn: Vec<Vec<SojournTerm>>,
    lump: Vec<Vec<LumpPayment>>,
}

impl PaymentSpec {
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            sojourn: vec![Vec::new(); n],
            lump: vec![Vec::new(); n * n],
        }
    }

    pub fn with_sojourn(mut self, j: StateId, term: SojournTerm) -> Self {
        self.sojourn[j].push(term);
        self
    }

    pub fn with_lump(mut self, j: StateId, k: StateId, pay: LumpPayment) -> Self {
        assert!(j != k);
        self.lump[j * self.n + k].push(pay);
        self
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn sojourn_terms(&self, j: StateId) -> &[SojournTerm] {
        &self.sojourn[j]
    }

    pub fn lump_terms(&self, j: StateId, k: StateId) -> &[LumpPayment] {
        &self.lump[j * self.n + k]
    }

    pub fn sojourn_rate(&self, j: StateId, t: f64, u: f64) -> f64 {
        self.sojourn[j].iter().map(|b| b.eval(t, u)).sum()
    }

    pub fn lump(&self, j: StateId, k: StateId, t: f64, u: f64) -> f64 {
        self.lump[j * self.n + k].iter().map(|b| b.eval(t, u)).sum()
    }

    pub fn has_lumps_from(&self, j: StateId) -> bool {
        (0..self.n).any(|k| !self.lump[j * self.n + k].is_empty())
    }

    pub fn is_zero(&self) -> bool {
        self.sojourn.iter().all(Vec::is_empty) && self.lump.iter().all(Vec::is_empty)
    }

    /// Sum of two payment streams.
    pub fn plus(&self, other: &PaymentSpec) -> PaymentSpec {
        assert_eq!(self.n, other.n);
        let mut out = self.clone();
        for (a, b) in out.sojourn.iter_mut().zip(&other.sojourn) {
            a.extend(b.iter().cloned());
        }
        for (a, b) in out.lump.iter_mut().zip(&other.lump) {
            a.extend(b.iter().cloned());
        }
        out
    }
}

/// Disability annuity `b_2(t, u) = b * 1{u >= waiting}` on the three-state model.
pub fn make_disability_annuity(b: f64, waiting: f64) -> Result<PaymentSpec> {
    if !b.is_finite() {
        return Err(Error::Config(format!("annuity rate {b} must be finite")));
    }
    if !(waiting >= 0.0 && waiting.is_finite()) {
        return Err(Error::Config(format!(
            "waiting period {waiting} must be nonnegative"
        )));
    }
    let spec = PaymentSpec::zero(3);
    if b == 0.0 {
        return Ok(spec);
    }
    Ok(spec.with_sojourn(DISABLED, SojournTerm::Annuity { rate: b, waiting }))
}

/// Deterministic short rate `r(t)`.
#[derive(Clone)]
pub enum DiscountRate {
    Constant(f64),
    Curve(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl DiscountRate {
    pub fn rate(&self, t: f64) -> f64 {
        match self {
            DiscountRate::Constant(r) => *r,
            DiscountRate::Curve(f) => f(t),
        }
    }

    /// `int_0^t r(s) ds`; exact for a constant rate, composite Simpson otherwise.
    pub fn integral(&self, t: f64) -> f64 {
        match self {
            DiscountRate::Constant(r) => r * t,
            DiscountRate::Curve(f) => {
                let n = ((t / 1e-3).ceil() as usize).max(2) & !1usize;
                let n = n.max(2);
                let h = t / n as f64;
                let mut acc = f(0.0) + f(t);
                for i in 1..n {
                    let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                    acc += w * f(i as f64 * h);
                }
                acc * h / 3.0
            }
        }
    }

    pub fn discount(&self, t: f64) -> f64 {
        (-self.integral(t)).exp()
    }
}

impl fmt::Debug for DiscountRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiscountRate::Constant(r) => write!(f, "Constant({r})"),
            DiscountRate::Curve(_) => f.write_str("Curve(..)"),
        }
    }
}

/// Interest and payments used for valuation.
#[derive(Clone, Debug)]
pub struct ValuationConfig {
    pub discount: DiscountRate,
    pub payments: PaymentSpec,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn preset() -> Scenario {
        make_disability_scenario(&DisabilityParams::default(), 25.0).unwrap()
    }

    #[test]
    fn preset_defaults() {
        let s = preset();
        assert_eq!(s.pi, vec![1.0, 0.0, 0.0]);
        assert_eq!(s.params["beta"], 2.0);
        assert_eq!(s.params["zeta1"], 0.1);
        assert_eq!(s.params["lambda2"], 0.3);
        assert!(s.is_collective());
    }

    #[test]
    fn mortality_at_inception() {
        let s = preset();
        let v = s
            .transition_rate(ACTIVE, DEAD, 0.0, 0.0, 0, &[0.0])
            .unwrap();
        // 0.0005 + 10^(5.52 + 0.038*45 - 10)
        assert_relative_eq!(v, 0.002_198_243_652_461_742_5, max_relative = 1e-12);
    }

    #[test]
    fn disability_rate_at_inception_has_no_collective_effect() {
        let s = preset();
        let v = s
            .transition_rate(ACTIVE, DISABLED, 0.0, 0.0, 0, &[0.0])
            .unwrap();
        assert_relative_eq!(v, 0.008_358_301_854_256_386, max_relative = 1e-12);
    }

    #[test]
    fn dead_is_absorbing() {
        let s = preset();
        for k in [ACTIVE, DISABLED] {
            assert_eq!(
                s.transition_rate(DEAD, k, 3.0, 1.0, 2, &[4.0]).unwrap(),
                0.0
            );
        }
        assert!(s.transition_rate(DEAD, DEAD, 0.0, 0.0, 0, &[0.0]).is_err());
        assert!(s.transition_rate(ACTIVE, 7, 0.0, 0.0, 0, &[0.0]).is_err());
    }

    #[test]
    fn health_hazards() {
        let s = preset();
        assert_eq!(s.health_hazard(DISABLED, 3.0, 0.2, 4, &[1.0]).unwrap(), 0.3);
        assert_eq!(s.health_hazard(DEAD, 3.0, 0.2, 4, &[1.0]).unwrap(), 0.0);
        assert_eq!(s.health_hazard(ACTIVE, 3.0, 0.2, -1, &[1.0]).unwrap(), 0.0);
        assert_eq!(s.health_hazard(ACTIVE, 3.0, 0.2, 0, &[1.0]).unwrap(), 0.2);
    }

    #[test]
    fn zero_health_rates() {
        let p = DisabilityParams {
            lambda: [0.0; 3],
            ..Default::default()
        };
        let s = make_disability_scenario(&p, 25.0).unwrap();
        assert!(!s.rates.has_health_claims());
        for j in 0..3 {
            assert_eq!(s.health_hazard(j, 1.0, 0.5, 3, &[2.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_beta_removes_collective_factor() {
        let p = DisabilityParams {
            beta: 0.0,
            ..Default::default()
        };
        let s = make_disability_scenario(&p, 25.0).unwrap();
        assert!(!s.is_collective());
        for y in [0.0, 1.0, 10.0, 100.0] {
            let v = s
                .transition_rate(ACTIVE, DISABLED, 7.0, 0.0, 0, &[y])
                .unwrap();
            assert_eq!(v, p.base_disability(7.0));
        }
    }

    #[test]
    fn negative_or_missing_parameters_are_named() {
        let mut named = DisabilityParams::default().to_named();
        named.insert("zeta1".into(), -0.1);
        let err = DisabilityParams::from_named(&named).unwrap_err();
        assert!(err.to_string().contains("zeta1"));
        named.remove("lambda2");
        let err = DisabilityParams::from_named(&named).unwrap_err();
        assert!(err.to_string().contains("lambda2"));
    }

    #[test]
    fn collapse_substitutes_own_claim_count() {
        let s = preset();
        let c = collapse_single_individual(&s);
        assert!(!c.is_collective());
        let direct = s
            .transition_rate(ACTIVE, DISABLED, 1.0, 0.0, 2, &[2.0])
            .unwrap();
        let collapsed = c
            .transition_rate(ACTIVE, DISABLED, 1.0, 0.0, 2, &[99.0])
            .unwrap();
        assert_eq!(direct, collapsed);
        assert!(
            c.rates
                .transition(ACTIVE, DISABLED)
                .unwrap()
                .dependence()
                .health
        );
    }

    #[test]
    fn collapse_of_collective_free_scenario_is_identical() {
        let p = DisabilityParams {
            beta: 0.0,
            ..Default::default()
        };
        let s = make_disability_scenario(&p, 25.0).unwrap();
        let c = collapse_single_individual(&s);
        for (t, u, h) in [(0.0, 0.0, 0), (3.5, 1.2, 4), (24.9, 10.0, 11)] {
            for (j, k) in [(0, 1), (0, 2), (1, 0), (1, 2)] {
                assert_eq!(
                    s.transition_rate(j, k, t, u, h, &[3.0]).unwrap(),
                    c.transition_rate(j, k, t, u, h, &[0.0]).unwrap()
                );
            }
        }
    }

    #[test]
    fn annuity_payments() {
        let pay = make_disability_annuity(1.0, 0.25).unwrap();
        assert_eq!(pay.sojourn_rate(DISABLED, 5.0, 0.3), 1.0);
        assert_eq!(pay.sojourn_rate(DISABLED, 5.0, 0.1), 0.0);
        assert_eq!(pay.sojourn_rate(ACTIVE, 5.0, 0.3), 0.0);
        assert!(make_disability_annuity(0.0, 0.25).unwrap().is_zero());
        assert!(make_disability_annuity(1.0, -1.0).is_err());
    }

    #[test]
    fn pi_must_be_a_distribution() {
        let s = preset();
        assert!(s.clone().with_pi(vec![0.5, 0.5, 0.1]).is_err());
        assert!(s.with_pi(vec![0.5, 0.5, 0.0]).is_ok());
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = preset();
        let b = make_disability_scenario(
            &DisabilityParams {
                zeta0: 0.5,
                ..Default::default()
            },
            25.0,
        )
        .unwrap();
        assert_eq!(a.fingerprint(), preset().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(
            a.fingerprint(),
            collapse_single_individual(&a).fingerprint()
        );
    }

    proptest! {
        #[test]
        fn rates_are_bounded_and_nonnegative(
            t in 0.0f64..25.0, u in 0.0f64..25.0, h in 0i64..40, y in 0.0f64..60.0,
            beta in 0.0f64..4.0, zeta0 in 0.0f64..1.0,
        ) {
            let p = DisabilityParams { beta, zeta0, ..Default::default() };
            let s = make_disability_scenario(&p, 25.0).unwrap();
            for j in 0..3 {
                let mut total = s.health_hazard(j, t, u, h, &[y]).unwrap();
                for k in 0..3 {
                    if k != j {
                        let r = s.transition_rate(j, k, t, u, h, &[y]).unwrap();
                        prop_assert!(r.is_finite() && r >= 0.0);
                        total += r;
                    }
                }
                prop_assert!(total <= s.rates.state_bound(j) * (1.0 + 1e-12));
            }
        }

        #[test]
        fn disability_rate_monotone_and_capped(
            t in 0.0f64..25.0, y1 in 0.0f64..50.0, dy in 0.0f64..10.0,
        ) {
            let p = DisabilityParams::default();
            let s = make_disability_scenario(&p, 25.0).unwrap();
            let a = s.transition_rate(ACTIVE, DISABLED, t, 0.0, 0, &[y1]).unwrap();
            let b = s.transition_rate(ACTIVE, DISABLED, t, 0.0, 0, &[y1 + dy]).unwrap();
            prop_assert!(a <= b);
            prop_assert!(b <= p.base_disability(t) * (p.beta * p.zeta0).exp() * (1.0 + 1e-12));
        }
    }
}

//! Exact simulation of the n-individual interacting model by thinning, Monte
//! Carlo reserves and chaosticity diagnostics.
//!
//! Candidate event times come from a single homogeneous Poisson stream whose
//! rate is the sum of the per-state bounds of all living individuals. The bound
//! of an individual only changes at its own accepted events, so the dominating
//! intensity is predictable and thinning stays exact. One uniform picks the
//! individual and, through the stacked hazards `mu_j1, mu_j2, ..., lambda_j`
//! evaluated at `(t, U_{t-}, H_{t-}, nu_{t-})`, the event or a rejection.
//!
//! Sample `m` of a Monte Carlo run uses stream `m` of a ChaCha8 generator keyed
//! by the seed, so results never depend on `M` or on the thread count.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    DisabilityParams, DiscountRate, PaymentSpec, Scenario, SojournTerm, StateId, StateSpace,
};
use crate::solver::{meanfield_fingerprint, MeanPath};

/// What happened at an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Initial state at time zero.
    Init {
        state: StateId,
    },
    Transition {
        from: StateId,
        to: StateId,
    },
    HealthClaim {
        state: StateId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub individual: usize,
    pub kind: EventKind,
}

/// State, time of entry into that state and claim count of one individual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndividualState {
    pub state: StateId,
    pub entered: f64,
    pub claims: i64,
}

impl IndividualState {
    pub fn duration(&self, t: f64) -> f64 {
        t - self.entered
    }
}

/// Receives the events of one simulated portfolio.
pub trait PathObserver {
    fn on_start(&mut self, _people: &[IndividualState], _nu: &[f64]) {}
    /// `before` is the individual's state just before the event, `nu` the
    /// group average right after it.
    fn on_event(&mut self, _event: &Event, _before: &IndividualState, _nu: &[f64]) {}
    fn on_end(&mut self, _horizon: f64, _people: &[IndividualState]) {}
}

/// One realization of the n-individual model.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioPath {
    pub n: usize,
    pub horizon: f64,
    /// Initial states (as `Init` events) followed by time-ordered events.
    pub events: Vec<Event>,
    pub terminal: Vec<IndividualState>,
    /// Group average right after time 0 and after every event.
    pub nu_path: Vec<(f64, Vec<f64>)>,
}

impl PortfolioPath {
    /// Right-continuous value of the group average at `t`.
    pub fn nu_at(&self, t: f64) -> &[f64] {
        let idx = self.nu_path.partition_point(|(s, _)| *s <= t);
        &self.nu_path[idx.saturating_sub(1)].1
    }

    /// `time,individual,kind,from,to`.
    pub fn write_events_csv<W: Write>(&self, states: &StateSpace, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,individual,kind,from,to")?;
        for e in &self.events {
            write_event_row(&mut w, states, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// `time,nu` (or `time,nu_0,...` for vector averages).
    pub fn write_nu_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let dim = self.nu_path.first().map_or(1, |(_, v)| v.len());
        if dim == 1 {
            writeln!(w, "time,nu")?;
        } else {
            write!(w, "time")?;
            for c in 0..dim {
                write!(w, ",nu_{c}")?;
            }
            writeln!(w)?;
        }
        for (t, v) in &self.nu_path {
            write!(w, "{t:.9}")?;
            for x in v {
                write!(w, ",{x:.9}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Writes `time,individual,kind,from,to` without a line break.
pub fn write_event_row<W: Write>(w: &mut W, states: &StateSpace, e: &Event) -> std::io::Result<()> {
    let (kind, from, to) = match e.kind {
        EventKind::Init { state } => ("init", state, state),
        EventKind::Transition { from, to } => ("transition", from, to),
        EventKind::HealthClaim { state } => ("health", state, state),
    };
    write!(
        w,
        "{:.9},{},{},{},{}",
        e.time,
        e.individual,
        kind,
        states.name(from),
        states.name(to)
    )
}

struct Recorder {
    path: PortfolioPath,
}

impl PathObserver for Recorder {
    fn on_start(&mut self, people: &[IndividualState], nu: &[f64]) {
        for (i, p) in people.iter().enumerate() {
            self.path.events.push(Event {
                time: 0.0,
                individual: i,
                kind: EventKind::Init { state: p.state },
            });
        }
        self.path.nu_path.push((0.0, nu.to_vec()));
    }

    fn on_event(&mut self, event: &Event, _: &IndividualState, nu: &[f64]) {
        self.path.events.push(*event);
        self.path.nu_path.push((event.time, nu.to_vec()));
    }

    fn on_end(&mut self, _: f64, people: &[IndividualState]) {
        self.path.terminal = people.to_vec();
    }
}

/// Generator for sample `sample` under `seed`.
pub fn sample_rng(seed: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample);
    rng
}

/// Individuals grouped by state for O(1) selection and moves.
struct Classes {
    members: Vec<Vec<usize>>,
    position: Vec<usize>,
}

impl Classes {
    fn new(n_states: usize, states: &[StateId]) -> Self {
        let mut members = vec![Vec::new(); n_states];
        let mut position = vec![0; states.len()];
        for (i, &s) in states.iter().enumerate() {
            position[i] = members[s].len();
            members[s].push(i);
        }
        Self { members, position }
    }

    fn move_to(&mut self, i: usize, from: StateId, to: StateId) {
        let pos = self.position[i];
        self.members[from].swap_remove(pos);
        if let Some(&moved) = self.members[from].get(pos) {
            self.position[moved] = pos;
        }
        self.position[i] = self.members[to].len();
        self.members[to].push(i);
    }
}

/// Simulates one portfolio of `n` individuals on `[0, horizon]`, streaming
/// events to `obs`.
pub fn simulate_with<R: Rng>(
    s: &Scenario,
    n: usize,
    horizon: f64,
    rng: &mut R,
    obs: &mut dyn PathObserver,
) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    if horizon > s.horizon * (1.0 + 1e-12) || horizon <= 0.0 {
        return Err(Error::Config(format!(
            "simulation horizon {horizon} must lie in (0, {}] where the rate bounds hold",
            s.horizon
        )));
    }
    let n_states = s.n_states();
    let bounds: Vec<f64> = (0..n_states).map(|j| s.rates.state_bound(j)).collect();
    if bounds.iter().any(|b| !b.is_finite() || *b < 0.0) {
        return Err(Error::Config(
            "rate bounds must be finite and nonnegative".into(),
        ));
    }
    let g = &s.g;
    let dim = g.dim();
    let g_moves_with_duration = g.dependence().duration;

    // initial states from pi
    let mut people: Vec<IndividualState> = (0..n)
        .map(|_| {
            let x: f64 = rng.gen();
            let mut acc = 0.0;
            let mut state = n_states - 1;
            for (j, p) in s.pi.iter().enumerate() {
                acc += p;
                if x < acc {
                    state = j;
                    break;
                }
            }
            IndividualState {
                state,
                entered: 0.0,
                claims: 0,
            }
        })
        .collect();
    let mut classes = Classes::new(
        n_states,
        &people.iter().map(|p| p.state).collect::<Vec<_>>(),
    );

    let inv_n = 1.0 / n as f64;
    let mut gbuf = vec![0.0; dim];
    let mut nu_sum = vec![0.0; dim];
    let sum_g = |people: &[IndividualState], t: f64, out: &mut [f64], buf: &mut [f64]| {
        out.iter_mut().for_each(|x| *x = 0.0);
        for p in people {
            g.eval_into(p.state, p.duration(t), p.claims, buf);
            for (o, b) in out.iter_mut().zip(buf.iter()) {
                *o += b;
            }
        }
    };
    sum_g(&people, 0.0, &mut nu_sum, &mut gbuf);
    let mut nu: Vec<f64> = nu_sum.iter().map(|x| x * inv_n).collect();
    obs.on_start(&people, &nu);

    let mut t = 0.0;
    let mut last_event = 0.0;
    let mut stacked = Vec::with_capacity(n_states + 1);
    loop {
        let total: f64 = (0..n_states)
            .map(|j| classes.members[j].len() as f64 * bounds[j])
            .sum();
        if total <= 0.0 {
            break;
        }
        let e: f64 = rng.gen();
        t += -(1.0 - e).ln() / total;
        if t > horizon {
            break;
        }
        if t <= last_event {
            continue;
        }
        // pick individual and residual from a single uniform
        let mut x = rng.gen::<f64>() * total;
        let mut chosen = None;
        for (j, (members, &bound)) in classes.members.iter().zip(&bounds).enumerate() {
            let width = members.len() as f64 * bound;
            if x < width {
                let idx = ((x / bound) as usize).min(members.len() - 1);
                x -= idx as f64 * bound;
                chosen = Some((j, members[idx]));
                break;
            }
            x -= width;
        }
        let Some((j, ell)) = chosen else { continue };

        if g_moves_with_duration {
            sum_g(&people, t, &mut nu_sum, &mut gbuf);
            for (v, s) in nu.iter_mut().zip(&nu_sum) {
                *v = s * inv_n;
            }
        }
        let me = people[ell];
        let u = me.duration(t);
        stacked.clear();
        let mut acc = 0.0;
        for k in 0..n_states {
            if let Some(mu) = s.rates.transition(j, k) {
                acc += mu.eval(t, u, me.claims, &nu);
                stacked.push((acc, Some(k)));
            }
        }
        if let Some(l) = s.rates.health(j) {
            acc += l.eval(t, u, me.claims, &nu);
            stacked.push((acc, None));
        }
        if !acc.is_finite() || acc > bounds[j] * (1.0 + 1e-12) {
            return Err(Error::BoundViolation {
                hazard: format!("total intensity in state {}", s.states.name(j)),
                value: acc,
                bound: bounds[j],
                time: t,
            });
        }
        let Some(&(_, outcome)) = stacked.iter().find(|(c, _)| x < *c) else {
            continue;
        };

        // accepted
        let before = me;
        g.eval_into(me.state, u, me.claims, &mut gbuf);
        for (s, b) in nu_sum.iter_mut().zip(&gbuf) {
            *s -= b;
        }
        let kind = match outcome {
            Some(k) => {
                classes.move_to(ell, j, k);
                people[ell].state = k;
                people[ell].entered = t;
                EventKind::Transition { from: j, to: k }
            }
            None => {
                people[ell].claims += 1;
                EventKind::HealthClaim { state: j }
            }
        };
        let p = people[ell];
        g.eval_into(p.state, p.duration(t), p.claims, &mut gbuf);
        for (s, b) in nu_sum.iter_mut().zip(&gbuf) {
            *s += b;
        }
        for (v, s) in nu.iter_mut().zip(&nu_sum) {
            *v = s * inv_n;
        }
        last_event = t;
        obs.on_event(
            &Event {
                time: t,
                individual: ell,
                kind,
            },
            &before,
            &nu,
        );
    }
    obs.on_end(horizon, &people);
    Ok(())
}

/// One realization of the portfolio, from stream 0 of `seed`.
pub fn simulate_portfolio(
    s: &Scenario,
    n: usize,
    horizon: f64,
    seed: u64,
) -> Result<PortfolioPath> {
    simulate_sample(s, n, horizon, seed, 0)
}

/// The portfolio behind Monte Carlo sample `sample` of `seed`.
pub fn simulate_sample(
    s: &Scenario,
    n: usize,
    horizon: f64,
    seed: u64,
    sample: u64,
) -> Result<PortfolioPath> {
    let mut rec = Recorder {
        path: PortfolioPath {
            n,
            horizon,
            events: Vec::new(),
            terminal: Vec::new(),
            nu_path: Vec::new(),
        },
    };
    simulate_with(s, n, horizon, &mut sample_rng(seed, sample), &mut rec)?;
    Ok(rec.path)
}

/// `int_a^b f(t) dt` by composite Simpson with steps of at most `h_max`.
fn simpson(a: f64, b: f64, h_max: f64, f: impl Fn(f64) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = (((b - a) / h_max).ceil() as usize).max(1) * 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// `int_a^b e^{-int_0^t r} dt`.
fn discounted_annuity(r: &DiscountRate, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    match r {
        DiscountRate::Constant(rate) if *rate == 0.0 => b - a,
        DiscountRate::Constant(rate) => ((-rate * a).exp() - (-rate * b).exp()) / rate,
        DiscountRate::Curve(_) => simpson(a, b, 0.01, |t| r.discount(t)),
    }
}

/// Pathwise present value of the contractual payments per individual, exact
/// between events.
struct PresentValue<'a> {
    pay: &'a PaymentSpec,
    discount: &'a DiscountRate,
    per_individual: Vec<f64>,
}

impl PresentValue<'_> {
    fn sojourn(&self, p: &IndividualState, end: f64) -> f64 {
        let mut total = 0.0;
        for term in self.pay.sojourn_terms(p.state) {
            total += match term {
                SojournTerm::Annuity { rate, waiting } => {
                    rate * discounted_annuity(self.discount, p.entered + waiting, end)
                }
                SojournTerm::Custom(f) => simpson(p.entered, end, 0.01, |t| {
                    f(t, t - p.entered) * self.discount.discount(t)
                }),
            };
        }
        total
    }
}

impl PathObserver for PresentValue<'_> {
    fn on_event(&mut self, event: &Event, before: &IndividualState, _: &[f64]) {
        if let EventKind::Transition { from, to } = event.kind {
            let mut pv = self.sojourn(before, event.time);
            let lump = self
                .pay
                .lump(from, to, event.time, before.duration(event.time));
            if lump != 0.0 {
                pv += lump * self.discount.discount(event.time);
            }
            self.per_individual[event.individual] += pv;
        }
    }

    fn on_end(&mut self, horizon: f64, people: &[IndividualState]) {
        for (i, p) in people.iter().enumerate() {
            self.per_individual[i] += self.sojourn(p, horizon);
        }
    }
}

/// Present value of each individual's payments in one simulated portfolio.
pub fn individual_present_values<R: Rng>(
    s: &Scenario,
    pay: &PaymentSpec,
    r: &DiscountRate,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut pv = PresentValue {
        pay,
        discount: r,
        per_individual: vec![0.0; n],
    };
    simulate_with(s, n, s.horizon, rng, &mut pv)?;
    Ok(pv.per_individual)
}

/// Group-average present value of one simulated portfolio.
pub fn portfolio_present_value<R: Rng>(
    s: &Scenario,
    pay: &PaymentSpec,
    r: &DiscountRate,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let pv = individual_present_values(s, pay, r, n, rng)?;
    Ok(pv.iter().sum::<f64>() / n as f64)
}

/// Monte Carlo estimate of the reserve.
#[derive(Debug, Clone, PartialEq)]
pub struct MCEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    pub n: usize,
    pub seed: u64,
    pub per_sample_pv: Option<Vec<f64>>,
}

/// Sample mean and standard deviation (denominator `len - 1`).
pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let len = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / len;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (len - 1.0)).sqrt())
}

/// Average over `samples` portfolios of the group-average present value.
pub fn mc_reserve(
    s: &Scenario,
    pay: &PaymentSpec,
    r: &DiscountRate,
    n: usize,
    samples: usize,
    seed: u64,
    keep_samples: bool,
) -> Result<MCEstimate> {
    if samples == 0 {
        return Err(Error::Config(
            "at least one Monte Carlo sample required".into(),
        ));
    }
    let pvs: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|m| portfolio_present_value(s, pay, r, n, &mut sample_rng(seed, m)))
        .collect::<Result<_>>()?;
    let (mean, sd) = mean_and_std(&pvs);
    Ok(MCEstimate {
        mean,
        std_error: sd / (samples as f64).sqrt(),
        samples,
        n,
        seed,
        per_sample_pv: keep_samples.then_some(pvs),
    })
}

/// Seed of repetition `rep` derived from a base seed.
pub fn repetition_seed(seed: u64, rep: usize) -> u64 {
    seed.wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Independent Monte Carlo estimates with `samples` portfolios each.
pub fn repeated_mc(
    s: &Scenario,
    pay: &PaymentSpec,
    r: &DiscountRate,
    n: usize,
    samples: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..reps)
        .map(|rep| {
            mc_reserve(s, pay, r, n, samples, repetition_seed(seed, rep), false).map(|e| e.mean)
        })
        .collect()
}

/// Summary of repeated estimates for one group size.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// All estimates in increasing order.
    pub sorted: Vec<f64>,
}

impl RepeatedStats {
    pub fn from_estimates(n: usize, estimates: &[f64]) -> Self {
        let (mean, std) = mean_and_std(estimates);
        let mut sorted = estimates.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            n,
            mean,
            std,
            sorted,
        }
    }

    pub fn second_lowest(&self) -> Option<f64> {
        self.sorted.get(1).copied()
    }

    pub fn second_highest(&self) -> Option<f64> {
        self.sorted.len().checked_sub(2).map(|i| self.sorted[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Equal-width histogram over the sample range.
pub fn histogram(xs: &[f64], bins: usize) -> Vec<HistogramBin> {
    if xs.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut counts = vec![0usize; bins];
    for &x in xs {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            left: lo + i as f64 * width,
            right: lo + (i + 1) as f64 * width,
            count,
        })
        .collect()
}

/// `bin_left,bin_right,count`.
pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], mut w: W) -> std::io::Result<()> {
    writeln!(w, "bin_left,bin_right,count")?;
    for b in bins {
        writeln!(w, "{:.9},{:.9},{}", b.left, b.right, b.count)?;
    }
    Ok(())
}

/// `n,rep,estimate` for repeated Monte Carlo runs per group size.
pub fn write_repeated_csv<W: Write>(runs: &[(usize, Vec<f64>)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "n,rep,estimate")?;
    for (n, estimates) in runs {
        for (rep, x) in estimates.iter().enumerate() {
            writeln!(w, "{n},{rep},{x:.9}")?;
        }
    }
    Ok(())
}

/// Chaosticity diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// Per run: `sup_m |nu^n(t_m) - v(t_m)|` over the time grid of `v`.
    pub sup_distance: Vec<f64>,
    pub histogram: Vec<HistogramBin>,
    pub repeated: Vec<RepeatedStats>,
}

/// Compares simulated group averages with the mean path, bins per-sample
/// present values and tabulates repeated estimates per group size.
pub fn chaos_diagnostics(
    s: &Scenario,
    v: &MeanPath,
    runs: &[PortfolioPath],
    pvs: Option<&MCEstimate>,
    bins: usize,
    repeated: &[(usize, Vec<f64>)],
) -> Result<Diagnostics> {
    let expected = meanfield_fingerprint(s, v.spec());
    if v.fingerprint() != expected {
        return Err(Error::FingerprintMismatch {
            expected,
            found: v.fingerprint().to_string(),
        });
    }
    let spec = v.spec();
    let sup_distance = runs
        .iter()
        .map(|run| {
            (0..v.len())
                .filter(|&m| spec.time(m) <= run.horizon)
                .map(|m| {
                    run.nu_at(spec.time(m))
                        .iter()
                        .zip(v.at(m))
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let histogram = pvs
        .and_then(|e| e.per_sample_pv.as_deref())
        .map(|xs| histogram(xs, bins))
        .unwrap_or_default();
    let repeated = repeated
        .iter()
        .map(|(n, xs)| RepeatedStats::from_estimates(*n, xs))
        .collect();
    Ok(Diagnostics {
        sup_distance,
        histogram,
        repeated,
    })
}

/// Disability rate and credibility term along one path, along the mean path
/// and for the baseline where the collective claim rate `nu / t` equals `zeta1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectiveSeriesRow {
    pub t: f64,
    pub nu: f64,
    pub v: f64,
    pub rate_nu: f64,
    pub rate_v: f64,
    pub rate_baseline: f64,
    pub cred_nu: f64,
    pub cred_v: f64,
    pub cred_baseline: f64,
}

/// Series on the time grid of `v` for the disability preset.
pub fn collective_series(
    p: &DisabilityParams,
    run: &PortfolioPath,
    v: &MeanPath,
) -> Vec<CollectiveSeriesRow> {
    let spec = v.spec();
    (0..v.len())
        .map(|m| {
            let t = spec.time(m);
            let nu = run.nu_at(t)[0];
            let vm = v.at(m)[0];
            let base_y = p.zeta1 * t;
            CollectiveSeriesRow {
                t,
                nu,
                v: vm,
                rate_nu: p.disability_rate(t, nu),
                rate_v: p.disability_rate(t, vm),
                rate_baseline: p.disability_rate(t, base_y),
                cred_nu: p.credibility(t, nu),
                cred_v: p.credibility(t, vm),
                cred_baseline: p.credibility(t, base_y),
            }
        })
        .collect()
}

/// `t,nu,v,rate_nu,rate_v,rate_baseline,cred_nu,cred_v,cred_baseline`.
pub fn write_series_csv<W: Write>(rows: &[CollectiveSeriesRow], mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "t,nu,v,rate_nu,rate_v,rate_baseline,cred_nu,cred_v,cred_baseline"
    )?;
    for r in rows {
        writeln!(
            w,
            "{:.6},{:.9},{:.9},{:.9e},{:.9e},{:.9e},{:.9},{:.9},{:.9}",
            r.t,
            r.nu,
            r.v,
            r.rate_nu,
            r.rate_v,
            r.rate_baseline,
            r.cred_nu,
            r.cred_v,
            r.cred_baseline
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;
    use std::collections::BTreeMap;

    fn constant_markov(rates: &[(usize, usize, f64)]) -> Scenario {
        let mut model = RateModel::new(3);
        let mut bounds = vec![0.0; 3];
        for &(j, k, r) in rates {
            model = model.with_transition(j, k, Hazard::constant(r));
            bounds[j] += r;
        }
        Scenario::new(
            "sim-markov",
            StateSpace::disability(),
            model.with_state_bounds(bounds),
            AveragingFunction::health_count(),
            vec![1.0, 0.0, 0.0],
            5.0,
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn no_rates_no_events() {
        let s = constant_markov(&[]);
        let path = simulate_portfolio(&s, 10, 5.0, 1).unwrap();
        assert_eq!(path.events.len(), 10);
        assert!(path
            .events
            .iter()
            .all(|e| matches!(e.kind, EventKind::Init { state: 0 })));
        assert!(path
            .terminal
            .iter()
            .all(|p| p.state == ACTIVE && p.claims == 0));
    }

    #[test]
    fn events_ordered_and_respect_diagram() {
        let s = make_disability_scenario(&DisabilityParams::default(), 25.0).unwrap();
        let path = simulate_portfolio(&s, 20, 25.0, 11).unwrap();
        let mut state = [ACTIVE; 20];
        let mut claims = [0i64; 20];
        let mut last = 0.0;
        for e in path.events.iter().skip(20) {
            assert!(e.time > last && e.time <= 25.0);
            last = e.time;
            match e.kind {
                EventKind::Transition { from, to } => {
                    assert_eq!(state[e.individual], from);
                    assert_ne!(from, DEAD);
                    state[e.individual] = to;
                }
                EventKind::HealthClaim { state: z } => {
                    assert_eq!(state[e.individual], z);
                    assert_ne!(z, DEAD);
                    claims[e.individual] += 1;
                }
                EventKind::Init { .. } => panic!("init after start"),
            }
        }
        for (i, p) in path.terminal.iter().enumerate() {
            assert_eq!(p.state, state[i]);
            assert_eq!(p.claims, claims[i]);
        }
        // nu is the average claim count after every event
        let final_nu = path.nu_path.last().unwrap().1[0];
        assert!((final_nu - claims.iter().sum::<i64>() as f64 / 20.0).abs() < 1e-12);
        assert_eq!(path.nu_at(0.0), &[0.0]);
    }

    #[test]
    fn reproducible_under_seed() {
        let s = make_disability_scenario(&DisabilityParams::default(), 25.0).unwrap();
        let pay = make_disability_annuity(1.0, 0.25).unwrap();
        let r = DiscountRate::Constant(0.01);
        assert_eq!(
            simulate_portfolio(&s, 5, 25.0, 3).unwrap(),
            simulate_portfolio(&s, 5, 25.0, 3).unwrap()
        );
        let a = mc_reserve(&s, &pay, &r, 5, 200, 9, true).unwrap();
        let b = mc_reserve(&s, &pay, &r, 5, 200, 9, true).unwrap();
        assert_eq!(a, b);
        // sample m does not depend on M
        let c = mc_reserve(&s, &pay, &r, 5, 100, 9, true).unwrap();
        assert_eq!(
            a.per_sample_pv.unwrap()[..100],
            c.per_sample_pv.unwrap()[..]
        );
    }

    #[test]
    fn zero_payments_estimate_zero() {
        let s = make_disability_scenario(&DisabilityParams::default(), 25.0).unwrap();
        let est = mc_reserve(
            &s,
            &PaymentSpec::zero(3),
            &DiscountRate::Constant(0.01),
            3,
            50,
            1,
            false,
        )
        .unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn bound_violation_is_reported() {
        let rates = RateModel::new(3)
            .with_transition(ACTIVE, DEAD, Hazard::constant(2.0))
            .with_state_bounds(vec![1.0, 0.0, 0.0]);
        let s = Scenario::new(
            "bad-bound",
            StateSpace::disability(),
            rates,
            AveragingFunction::health_count(),
            vec![1.0, 0.0, 0.0],
            5.0,
            BTreeMap::new(),
        )
        .unwrap();
        assert!(matches!(
            simulate_portfolio(&s, 5, 5.0, 1),
            Err(Error::BoundViolation { .. })
        ));
    }

    #[test]
    fn annuity_present_value_in_closed_form() {
        let r = DiscountRate::Constant(0.02);
        let exact = ((-0.02f64 * 1.0).exp() - (-0.02f64 * 3.0).exp()) / 0.02;
        assert!((discounted_annuity(&r, 1.0, 3.0) - exact).abs() < 1e-15);
        let curve = DiscountRate::Curve(std::sync::Arc::new(|_| 0.02));
        assert!((discounted_annuity(&curve, 1.0, 3.0) - exact).abs() < 1e-9);
        assert_eq!(
            discounted_annuity(&DiscountRate::Constant(0.0), 1.0, 3.0),
            2.0
        );
        assert_eq!(discounted_annuity(&r, 3.0, 1.0), 0.0);
    }

    #[test]
    fn histogram_and_order_statistics() {
        let xs = [1.0, 2.0, 2.5, 3.0, 4.0];
        let h = histogram(&xs, 3);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(h[0].left, 1.0);
        assert_eq!(h[2].right, 4.0);
        let st = RepeatedStats::from_estimates(5, &[3.0, 1.0, 2.0, 5.0]);
        assert_eq!(st.second_lowest(), Some(2.0));
        assert_eq!(st.second_highest(), Some(3.0));
        assert_eq!(st.mean, 2.75);
    }

    #[test]
    fn degenerate_claims_give_sup_distance_of_v() {
        let p = DisabilityParams {
            lambda: [0.0; 3],
            ..Default::default()
        };
        let s = make_disability_scenario(&p, 2.0).unwrap();
        let spec = crate::grid::build_grid(2.0, 0.1, 2).unwrap();
        let (_, v, _) = crate::solver::solve_meanfield_occupation(&s, spec).unwrap();
        let run = simulate_portfolio(&s, 10, 2.0, 5).unwrap();
        assert!(run.nu_path.iter().all(|(_, x)| x[0] == 0.0));
        let d = chaos_diagnostics(&s, &v, &[run], None, 10, &[]).unwrap();
        let sup_v = (0..v.len()).map(|m| v.at(m)[0].abs()).fold(0.0, f64::max);
        assert_eq!(d.sup_distance, vec![sup_v]);
    }

    #[test]
    fn single_individual_series() {
        let p = DisabilityParams::default();
        let s = make_disability_scenario(&p, 5.0).unwrap();
        let spec = crate::grid::build_grid(5.0, 0.05, 10).unwrap();
        let (_, v, _) = crate::solver::solve_meanfield_occupation(&s, spec).unwrap();
        let run = simulate_portfolio(&s, 1, 5.0, 2).unwrap();
        // nu^1 jumps by exactly one at every claim
        for w in run.nu_path.windows(2) {
            let d = w[1].1[0] - w[0].1[0];
            assert!(d == 0.0 || d == 1.0);
        }
        let rows = collective_series(&p, &run, &v);
        assert_eq!(rows.len(), spec.stages());
        for r in &rows {
            assert!(r.cred_baseline.abs() < 1e-12);
            assert!((r.rate_baseline - p.base_disability(r.t)).abs() < 1e-15);
            assert!(r.cred_nu <= p.zeta0);
        }
    }

    #[test]
    fn event_csv_layout() {
        let s = make_disability_scenario(&DisabilityParams::default(), 25.0).unwrap();
        let path = simulate_portfolio(&s, 2, 25.0, 4).unwrap();
        let mut out = Vec::new();
        path.write_events_csv(&s.states, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("time,individual,kind,from,to"));
        assert_eq!(lines.next(), Some("0.000000000,0,init,active,active"));
        let mut out = Vec::new();
        path.write_nu_csv(&mut out).unwrap();
        assert!(String::from_utf8(out)
            .unwrap()
            .starts_with("time,nu\n0.000000000,0.000000000\n"));
    }
}

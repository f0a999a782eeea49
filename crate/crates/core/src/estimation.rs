//! Partial log-likelihoods and occurrence-exposure estimates from observed
//! company data.
//!
//! A company is a group of `n` individuals followed on `[0, R]`, with `R` a
//! common censoring time assumed non-informative. Companies are independent, so
//! every quantity here is computed per company and then summed in company
//! order: concatenating data sets gives exactly the sum of their results.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{Hazard, Scenario, StateId, StateSpace};
use crate::simulator::{
    sample_rng, simulate_with, write_event_row, Event, EventKind, IndividualState, PathObserver,
    PortfolioPath,
};

/// One group of individuals observed on `[0, censoring]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Company {
    pub censoring: f64,
    pub initial: Vec<StateId>,
    /// Time-ordered transitions and health claims, all in `(0, censoring]`.
    pub events: Vec<Event>,
}

impl Company {
    pub fn n(&self) -> usize {
        self.initial.len()
    }

    /// Restricts a simulated portfolio to `[0, censoring]`.
    pub fn from_path(path: &PortfolioPath, censoring: f64) -> Self {
        let mut initial = vec![0; path.n];
        let mut events = Vec::new();
        for e in &path.events {
            match e.kind {
                EventKind::Init { state } => initial[e.individual] = state,
                _ if e.time <= censoring => events.push(*e),
                _ => {}
            }
        }
        Self {
            censoring,
            initial,
            events,
        }
    }

    fn validate(&self, states: &StateSpace, idx: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(format!("company {idx}: {msg}")));
        if !(self.censoring.is_finite() && self.censoring >= 0.0) {
            return bad(format!(
                "censoring time {} must be finite and >= 0",
                self.censoring
            ));
        }
        if self.initial.is_empty() {
            return bad("no individuals".into());
        }
        let mut state = self.initial.clone();
        if let Some(&s) = state.iter().find(|&&s| s >= states.len()) {
            return bad(format!("unknown initial state {s}"));
        }
        let mut last = 0.0;
        for e in &self.events {
            if e.time <= 0.0 || e.time > self.censoring || e.time < last {
                return bad(format!(
                    "event at {} outside (0, R] or out of order",
                    e.time
                ));
            }
            last = e.time;
            let Some(cur) = state.get(e.individual).copied() else {
                return bad(format!("event for unknown individual {}", e.individual));
            };
            if states.is_absorbing(cur) {
                return bad(format!(
                    "event for individual {} after absorption",
                    e.individual
                ));
            }
            match e.kind {
                EventKind::Transition { from, to }
                    if from == cur && to != from && to < states.len() =>
                {
                    state[e.individual] = to;
                }
                EventKind::HealthClaim { state: z } if z == cur => {}
                _ => {
                    return bad(format!(
                        "event {:?} at {} inconsistent with state {}",
                        e.kind,
                        e.time,
                        states.name(cur)
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Independent companies sharing one state space.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub states: StateSpace,
    pub companies: Vec<Company>,
}

/// Censoring time, initial states and events of one company while reading.
type RawCompany = (f64, BTreeMap<usize, StateId>, Vec<Event>);

#[derive(Deserialize)]
struct EventRecord {
    time: f64,
    individual: usize,
    kind: String,
    from: String,
    to: String,
    company: usize,
    censoring_time: f64,
}

impl ObservationSet {
    pub fn new(states: StateSpace, companies: Vec<Company>) -> Result<Self> {
        for (i, c) in companies.iter().enumerate() {
            c.validate(&states, i)?;
        }
        Ok(Self { states, companies })
    }

    pub fn concat(&self, other: &ObservationSet) -> Result<ObservationSet> {
        if self.states != other.states {
            return Err(Error::Domain(
                "cannot concatenate data on different state spaces".into(),
            ));
        }
        let mut companies = self.companies.clone();
        companies.extend(other.companies.iter().cloned());
        Ok(Self {
            states: self.states.clone(),
            companies,
        })
    }

    /// Event log `time,individual,kind,from,to,company,censoring_time`, with
    /// one `init` row per individual.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,individual,kind,from,to,company,censoring_time")?;
        for (c, company) in self.companies.iter().enumerate() {
            let inits = company.initial.iter().enumerate().map(|(i, &s)| Event {
                time: 0.0,
                individual: i,
                kind: EventKind::Init { state: s },
            });
            for e in inits.chain(company.events.iter().copied()) {
                write_event_row(&mut w, &self.states, &e)?;
                writeln!(w, ",{c},{:.9}", company.censoring)?;
            }
        }
        Ok(())
    }

    /// Reads the event log written by [`ObservationSet::write_csv`]; lines
    /// starting with `#` are skipped. Company sizes are given by the `init` rows.
    pub fn read_csv<R: Read>(states: &StateSpace, r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let mut by_company: BTreeMap<usize, RawCompany> = BTreeMap::new();
        let state_of = |name: &str, line: usize| {
            states
                .index_of(name)
                .ok_or_else(|| Error::Domain(format!("line {line}: unknown state '{name}'")))
        };
        for (i, rec) in reader.deserialize::<EventRecord>().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Domain(format!("line {line}: {e}")))?;
            let entry = by_company
                .entry(rec.company)
                .or_insert_with(|| (rec.censoring_time, BTreeMap::new(), Vec::new()));
            if entry.0 != rec.censoring_time {
                return Err(Error::Domain(format!(
                    "line {line}: company {} has inconsistent censoring times",
                    rec.company
                )));
            }
            let from = state_of(&rec.from, line)?;
            let to = state_of(&rec.to, line)?;
            let kind = match rec.kind.as_str() {
                "init" => {
                    if entry.1.insert(rec.individual, from).is_some() {
                        return Err(Error::Domain(format!(
                            "line {line}: duplicate init row for individual {}",
                            rec.individual
                        )));
                    }
                    continue;
                }
                "transition" => EventKind::Transition { from, to },
                "health" => EventKind::HealthClaim { state: from },
                other => {
                    return Err(Error::Domain(format!(
                        "line {line}: unknown event kind '{other}'"
                    )))
                }
            };
            entry.2.push(Event {
                time: rec.time,
                individual: rec.individual,
                kind,
            });
        }
        let mut companies = Vec::with_capacity(by_company.len());
        for (id, (censoring, init, mut events)) in by_company {
            let n = init.len();
            if init.keys().enumerate().any(|(i, &k)| i != k) {
                return Err(Error::Domain(format!(
                    "company {id}: init rows must cover individuals 0..{n}"
                )));
            }
            events.sort_by(|a, b| a.time.total_cmp(&b.time));
            companies.push(Company {
                censoring,
                initial: init.into_values().collect(),
                events,
            });
        }
        Self::new(states.clone(), companies)
    }
}

struct CensoredRecorder {
    censoring: f64,
    company: Company,
}

impl PathObserver for CensoredRecorder {
    fn on_start(&mut self, people: &[IndividualState], _: &[f64]) {
        self.company.initial = people.iter().map(|p| p.state).collect();
    }

    fn on_event(&mut self, event: &Event, _: &IndividualState, _: &[f64]) {
        if event.time <= self.censoring {
            self.company.events.push(*event);
        }
    }
}

/// Simulates `companies` independent groups of size `n` observed on
/// `[0, censoring]`; company `c` uses stream `c` of `seed`.
pub fn simulate_observations(
    s: &Scenario,
    n: usize,
    censoring: f64,
    companies: usize,
    seed: u64,
) -> Result<ObservationSet> {
    let companies = (0..companies as u64)
        .into_par_iter()
        .map(|c| {
            let mut rec = CensoredRecorder {
                censoring,
                company: Company {
                    censoring,
                    initial: Vec::new(),
                    events: Vec::new(),
                },
            };
            simulate_with(s, n, censoring, &mut sample_rng(seed, c), &mut rec)?;
            Ok(rec.company)
        })
        .collect::<Result<Vec<_>>>()?;
    ObservationSet::new(s.states.clone(), companies)
}

/// Replays one company: for every inter-event segment `[a, b)` and every event
/// the visitor sees the individuals and the group average just before.
trait ReplayVisitor {
    fn segment(&mut self, a: f64, b: f64, people: &[IndividualState], nu: &NuView<'_>);
    fn event(&mut self, e: &Event, before: &IndividualState, nu_minus: &[f64]);
}

/// Group average between two events.
struct NuView<'a> {
    people: &'a [IndividualState],
    g: &'a crate::model::AveragingFunction,
    at_start: &'a [f64],
    moves: bool,
}

impl NuView<'_> {
    fn is_constant(&self) -> bool {
        !self.moves
    }

    fn at(&self, t: f64, out: &mut [f64], buf: &mut [f64]) {
        if !self.moves {
            out.copy_from_slice(self.at_start);
            return;
        }
        out.iter_mut().for_each(|x| *x = 0.0);
        for p in self.people {
            self.g.eval_into(p.state, p.duration(t), p.claims, buf);
            for (o, b) in out.iter_mut().zip(buf.iter()) {
                *o += b;
            }
        }
        let inv = 1.0 / self.people.len() as f64;
        out.iter_mut().for_each(|x| *x *= inv);
    }
}

fn replay(company: &Company, g: &crate::model::AveragingFunction, visitor: &mut dyn ReplayVisitor) {
    let mut people: Vec<IndividualState> = company
        .initial
        .iter()
        .map(|&state| IndividualState {
            state,
            entered: 0.0,
            claims: 0,
        })
        .collect();
    let dim = g.dim();
    let moves = g.dependence().duration;
    let mut nu = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    let mut a = 0.0;
    let mut events = company.events.iter().peekable();
    loop {
        let b = events.peek().map_or(company.censoring, |e| e.time);
        {
            let start = NuView {
                people: &people,
                g,
                at_start: &[],
                moves: true,
            };
            start.at(a, &mut nu, &mut buf);
            let view = NuView {
                people: &people,
                g,
                at_start: &nu,
                moves,
            };
            if b > a {
                visitor.segment(a, b, &people, &view);
            }
            if let Some(e) = events.peek() {
                view.at(e.time, &mut scratch, &mut buf);
            }
        }
        let Some(e) = events.next() else { break };
        let before = people[e.individual];
        visitor.event(e, &before, &scratch);
        let p = &mut people[e.individual];
        match e.kind {
            EventKind::Transition { to, .. } => {
                p.state = to;
                p.entered = e.time;
            }
            EventKind::HealthClaim { .. } => p.claims += 1,
            EventKind::Init { .. } => {}
        }
        a = e.time;
    }
}

/// `int_a^b f` by adaptive Simpson to absolute tolerance `tol`.
pub fn adaptive_simpson(a: f64, b: f64, tol: f64, f: &mut dyn FnMut(f64) -> f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &mut dyn FnMut(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

const SEGMENT_TOLERANCE: f64 = 1e-8;

/// Partial log-likelihoods of the health-claim process and of each transition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialLogLik {
    pub health: f64,
    pub transitions: BTreeMap<(StateId, StateId), f64>,
    /// Observed events whose hazard is zero (or undefined) under the model.
    pub incompatible: Vec<String>,
}

impl PartialLogLik {
    fn empty(s: &Scenario) -> Self {
        let n = s.n_states();
        let transitions = (0..n)
            .flat_map(|j| (0..n).map(move |k| (j, k)))
            .filter(|&(j, k)| s.rates.transition(j, k).is_some())
            .map(|key| (key, 0.0))
            .collect();
        Self {
            health: 0.0,
            transitions,
            incompatible: Vec::new(),
        }
    }

    pub fn total(&self) -> f64 {
        self.health + self.transitions.values().sum::<f64>()
    }

    pub fn is_compatible(&self) -> bool {
        self.incompatible.is_empty()
    }

    fn add(&mut self, other: &PartialLogLik) {
        self.health += other.health;
        for (key, v) in &other.transitions {
            *self.transitions.entry(*key).or_insert(0.0) += v;
        }
        self.incompatible.extend(other.incompatible.iter().cloned());
    }
}

struct LogLikVisitor<'a> {
    s: &'a Scenario,
    out: PartialLogLik,
    company: usize,
    groups: HashMap<(i64, u64), f64>,
    y: Vec<f64>,
    buf: Vec<f64>,
}

impl LogLikVisitor<'_> {
    /// `-int_a^b` of `hazard` summed over individuals in state `j`.
    fn integrated(
        &mut self,
        hazard: &Hazard,
        j: StateId,
        a: f64,
        b: f64,
        people: &[IndividualState],
        nu: &NuView<'_>,
    ) -> f64 {
        let dep = hazard.dependence();
        self.groups.clear();
        for p in people.iter().filter(|p| p.state == j) {
            let key = (
                if dep.health { p.claims } else { 0 },
                if dep.duration { p.entered.to_bits() } else { 0 },
            );
            *self.groups.entry(key).or_insert(0.0) += 1.0;
        }
        let constant = !dep.time && !dep.duration && (!dep.collective || nu.is_constant());
        let mut total = 0.0;
        let groups: Vec<_> = self.groups.iter().map(|(k, c)| (*k, *c)).collect();
        for ((h, entered_bits), count) in groups {
            let entered = f64::from_bits(entered_bits);
            let value = if constant {
                nu.at(a, &mut self.y, &mut self.buf);
                hazard.eval(a, a - entered, h, &self.y) * (b - a)
            } else {
                let (y, buf) = (&mut self.y, &mut self.buf);
                adaptive_simpson(a, b, SEGMENT_TOLERANCE, &mut |t| {
                    nu.at(t, y, buf);
                    hazard.eval(t, t - entered, h, y)
                })
            };
            total += count * value;
        }
        total
    }
}

impl ReplayVisitor for LogLikVisitor<'_> {
    fn segment(&mut self, a: f64, b: f64, people: &[IndividualState], nu: &NuView<'_>) {
        let s = self.s;
        for j in 0..s.n_states() {
            if !people.iter().any(|p| p.state == j) {
                continue;
            }
            if let Some(l) = s.rates.health(j) {
                self.out.health -= self.integrated(l, j, a, b, people, nu);
            }
            for k in 0..s.n_states() {
                if let Some(mu) = s.rates.transition(j, k) {
                    let v = self.integrated(mu, j, a, b, people, nu);
                    *self.out.transitions.get_mut(&(j, k)).unwrap() -= v;
                }
            }
        }
    }

    fn event(&mut self, e: &Event, before: &IndividualState, nu_minus: &[f64]) {
        let u = before.duration(e.time);
        let (hazard, label) = match e.kind {
            EventKind::Transition { from, to } => (
                self.s.rates.transition(from, to),
                format!("{}->{}", self.s.states.name(from), self.s.states.name(to)),
            ),
            EventKind::HealthClaim { state } => (
                self.s.rates.health(state),
                format!("health:{}", self.s.states.name(state)),
            ),
            EventKind::Init { .. } => return,
        };
        let value = hazard.map_or(0.0, |hz| hz.eval(e.time, u, before.claims, nu_minus));
        let term = if value > 0.0 {
            value.ln()
        } else {
            f64::NEG_INFINITY
        };
        if value <= 0.0 {
            self.out.incompatible.push(format!(
                "company {}, individual {}: {label} at t={} has zero hazard",
                self.company, e.individual, e.time
            ));
        }
        match e.kind {
            EventKind::Transition { from, to } => {
                *self.out.transitions.entry((from, to)).or_insert(0.0) += term;
            }
            _ => self.out.health += term,
        }
    }
}

fn company_loglik(s: &Scenario, company: &Company, idx: usize) -> PartialLogLik {
    let mut v = LogLikVisitor {
        s,
        out: PartialLogLik::empty(s),
        company: idx,
        groups: HashMap::new(),
        y: vec![0.0; s.g.dim()],
        buf: vec![0.0; s.g.dim()],
    };
    replay(company, &s.g, &mut v);
    v.out
}

/// Partial log-likelihoods of the scenario's hazards given the data. Hazards
/// are evaluated at `(t, U_{t-}, H_{t-}, nu_{t-})`; integrated hazards are
/// exact when constant between events and otherwise computed by adaptive
/// Simpson with tolerance `1e-8` per segment.
pub fn partial_loglik(data: &ObservationSet, s: &Scenario) -> Result<PartialLogLik> {
    if data.states != s.states {
        return Err(Error::Domain(
            "data and scenario use different state spaces".into(),
        ));
    }
    let per_company: Vec<PartialLogLik> = data
        .companies
        .par_iter()
        .enumerate()
        .map(|(i, c)| company_loglik(s, c, i))
        .collect();
    let mut total = PartialLogLik::empty(s);
    for part in &per_company {
        total.add(part);
    }
    Ok(total)
}

/// Treatment of the health-claim count in the bucket grid.
#[derive(Debug, Clone, PartialEq)]
pub enum HealthBuckets {
    Pooled,
    /// Levels `0..cap`, with `cap` collecting all counts `>= cap`.
    Capped(usize),
}

/// Buckets of the group average (first component).
#[derive(Debug, Clone, PartialEq)]
pub enum YBuckets {
    /// Edges at the empirical quantiles of the observed group averages.
    Quantiles(usize),
    Edges(Vec<f64>),
}

/// Grid over calendar time, duration, claim count and group average.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketSpec {
    pub t_edges: Vec<f64>,
    pub u_edges: Vec<f64>,
    pub h: HealthBuckets,
    pub y: YBuckets,
}

impl BucketSpec {
    /// One bucket in `t` and `u`, pooled counts and quantile `y` buckets.
    pub fn coarse(horizon: f64, y_quantiles: usize) -> Self {
        Self {
            t_edges: vec![0.0, horizon],
            u_edges: vec![0.0, horizon],
            h: HealthBuckets::Pooled,
            y: YBuckets::Quantiles(y_quantiles),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HazardType {
    Transition(StateId, StateId),
    Health(StateId),
}

impl HazardType {
    pub fn label(&self, states: &StateSpace) -> String {
        match *self {
            HazardType::Transition(j, k) => format!("{}->{}", states.name(j), states.name(k)),
            HazardType::Health(j) => format!("health:{}", states.name(j)),
        }
    }
}

/// Hazard types an individual in a non-absorbing state is exposed to.
pub fn hazard_types(states: &StateSpace) -> Vec<HazardType> {
    let n = states.len();
    let mut out = Vec::new();
    for j in (0..n).filter(|&j| !states.is_absorbing(j)) {
        out.extend(
            (0..n)
                .filter(|&k| k != j)
                .map(|k| HazardType::Transition(j, k)),
        );
        out.push(HazardType::Health(j));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellFlag {
    ZeroExposure,
    NoOccurrences,
}

impl fmt::Display for CellFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellFlag::ZeroExposure => "zero-exposure",
            CellFlag::NoOccurrences => "no-occurrences",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: usize,
    pub t: (f64, f64),
    pub u: (f64, f64),
    /// Claim-count level; `None` when pooled. The last capped level collects
    /// all larger counts.
    pub h: Option<usize>,
    pub h_open: bool,
    pub y: (f64, f64),
    pub hazard: HazardType,
    pub occurrences: u64,
    pub exposure: f64,
}

impl Cell {
    pub fn rate(&self) -> f64 {
        if self.exposure > 0.0 {
            self.occurrences as f64 / self.exposure
        } else {
            0.0
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.exposure > 0.0 {
            (self.occurrences as f64).sqrt() / self.exposure
        } else {
            0.0
        }
    }

    pub fn flag(&self) -> Option<CellFlag> {
        if self.exposure <= 0.0 {
            Some(CellFlag::ZeroExposure)
        } else if self.occurrences == 0 {
            Some(CellFlag::NoOccurrences)
        } else {
            None
        }
    }
}

/// Occurrences and exposures per cell with rate estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OccurrenceExposure {
    pub cells: Vec<Cell>,
    /// Set when there was no exposure at all.
    pub empty: bool,
}

impl OccurrenceExposure {
    /// Cells of one hazard type.
    pub fn of(&self, hazard: HazardType) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(move |c| c.hazard == hazard)
    }

    /// Pools all cells of a hazard type.
    pub fn pooled(&self, hazard: HazardType) -> (u64, f64) {
        self.of(hazard)
            .fold((0, 0.0), |(o, e), c| (o + c.occurrences, e + c.exposure))
    }

    /// `cell_id,t_lo,t_hi,u_lo,u_hi,h,y_lo,y_hi,hazard_type,occ,expo,rate,se`.
    pub fn write_csv<W: Write>(&self, states: &StateSpace, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "cell_id,t_lo,t_hi,u_lo,u_hi,h,y_lo,y_hi,hazard_type,occ,expo,rate,se"
        )?;
        for c in &self.cells {
            let h = match (c.h, c.h_open) {
                (None, _) => "all".to_string(),
                (Some(h), true) => format!("{h}+"),
                (Some(h), false) => h.to_string(),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{:.9},{:.9e},{:.9e}",
                c.id,
                c.t.0,
                c.t.1,
                c.u.0,
                c.u.1,
                h,
                c.y.0,
                c.y.1,
                c.hazard.label(states),
                c.occurrences,
                c.exposure,
                c.rate(),
                c.std_error()
            )?;
        }
        Ok(())
    }
}

/// Index of the bucket `(edges[i], edges[i+1]]` containing `x` (the first
/// bucket is closed). Points outside the range go to the nearest bucket.
fn bucket_of(edges: &[f64], x: f64) -> usize {
    let last = edges.len() - 2;
    edges[1..].partition_point(|&e| e < x).min(last)
}

fn check_edges(name: &str, edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|e| e.is_nan())
    {
        return Err(Error::Config(format!(
            "{name} bucket edges must be at least two strictly increasing values"
        )));
    }
    Ok(())
}

/// Observed group averages (first component) at the start of every segment.
struct NuSampler(Vec<f64>);

impl ReplayVisitor for NuSampler {
    fn segment(&mut self, a: f64, _: f64, _: &[IndividualState], nu: &NuView<'_>) {
        let mut y = vec![0.0; nu.at_start.len()];
        let mut buf = y.clone();
        nu.at(a, &mut y, &mut buf);
        self.0.push(y[0]);
    }

    fn event(&mut self, _: &Event, _: &IndividualState, _: &[f64]) {}
}

/// Edges at the `k`-quantiles of `values`, deduplicated.
pub fn quantile_edges(values: &[f64], k: usize) -> Vec<f64> {
    if values.is_empty() {
        return vec![0.0, 0.0];
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = k.max(1);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let mut edges: Vec<f64> = (0..=k).map(|i| q(i as f64 / k as f64)).collect();
    edges.dedup();
    if edges.len() == 1 {
        edges.push(edges[0]);
    }
    edges
}

struct Layout {
    t: Vec<f64>,
    u: Vec<f64>,
    levels: usize,
    h_cap: Option<usize>,
    y: Vec<f64>,
    types: Vec<HazardType>,
}

impl Layout {
    fn ny(&self) -> usize {
        self.y.len() - 1
    }

    fn index(&self, ti: usize, ui: usize, hi: usize, yi: usize, ty: usize) -> usize {
        ((((ti * (self.u.len() - 1)) + ui) * self.levels + hi) * self.ny() + yi) * self.types.len()
            + ty
    }

    fn len(&self) -> usize {
        (self.t.len() - 1) * (self.u.len() - 1) * self.levels * self.ny() * self.types.len()
    }

    fn h_index(&self, h: i64) -> usize {
        match self.h_cap {
            None => 0,
            Some(cap) => (h.max(0) as usize).min(cap),
        }
    }

    fn y_index(&self, y: f64) -> usize {
        if self.y[0] == self.y[1] && self.y.len() == 2 {
            0
        } else {
            bucket_of(&self.y, y)
        }
    }
}

struct OeVisitor<'a> {
    layout: &'a Layout,
    type_index: HashMap<HazardType, usize>,
    occ: Vec<u64>,
    expo: Vec<f64>,
    cuts: Vec<f64>,
    y: Vec<f64>,
    buf: Vec<f64>,
}

impl ReplayVisitor for OeVisitor<'_> {
    fn segment(&mut self, a: f64, b: f64, people: &[IndividualState], nu: &NuView<'_>) {
        let l = self.layout;
        nu.at(a, &mut self.y, &mut self.buf);
        let yi = l.y_index(self.y[0]);
        for p in people {
            let types: Vec<usize> = l
                .types
                .iter()
                .enumerate()
                .filter(|(_, ty)| match ty {
                    HazardType::Transition(j, _) | HazardType::Health(j) => *j == p.state,
                })
                .map(|(i, _)| i)
                .collect();
            if types.is_empty() {
                continue;
            }
            self.cuts.clear();
            self.cuts.push(a);
            self.cuts
                .extend(l.t.iter().copied().filter(|&e| e > a && e < b));
            self.cuts.extend(
                l.u.iter()
                    .map(|e| p.entered + e)
                    .filter(|&e| e > a && e < b),
            );
            self.cuts.push(b);
            self.cuts.sort_by(f64::total_cmp);
            let hi = l.h_index(p.claims);
            for w in self.cuts.windows(2) {
                let len = w[1] - w[0];
                if len <= 0.0 {
                    continue;
                }
                let mid = 0.5 * (w[0] + w[1]);
                let ti = bucket_of(&l.t, mid);
                let ui = bucket_of(&l.u, mid - p.entered);
                for &ty in &types {
                    self.expo[l.index(ti, ui, hi, yi, ty)] += len;
                }
            }
        }
    }

    fn event(&mut self, e: &Event, before: &IndividualState, nu_minus: &[f64]) {
        let ty = match e.kind {
            EventKind::Transition { from, to } => HazardType::Transition(from, to),
            EventKind::HealthClaim { state } => HazardType::Health(state),
            EventKind::Init { .. } => return,
        };
        let l = self.layout;
        let Some(&ty) = self.type_index.get(&ty) else {
            return;
        };
        let idx = l.index(
            bucket_of(&l.t, e.time),
            bucket_of(&l.u, before.duration(e.time)),
            l.h_index(before.claims),
            l.y_index(nu_minus[0]),
            ty,
        );
        self.occ[idx] += 1;
    }
}

/// Discretized occurrence-exposure estimates: per cell, the number of events
/// of each hazard type and the time at risk, with exposure split exactly at
/// the `t` and `u` edges. The group average is assigned to its bucket at the
/// start of each inter-event segment.
pub fn occurrence_exposure_mle(
    data: &ObservationSet,
    g: &crate::model::AveragingFunction,
    buckets: &BucketSpec,
) -> Result<OccurrenceExposure> {
    check_edges("t", &buckets.t_edges)?;
    check_edges("u", &buckets.u_edges)?;
    let max_r = data
        .companies
        .iter()
        .map(|c| c.censoring)
        .fold(0.0, f64::max);
    if buckets.t_edges[0] > 0.0 || *buckets.t_edges.last().unwrap() < max_r {
        return Err(Error::Config(format!("t buckets must cover [0, {max_r}]")));
    }
    if buckets.u_edges[0] > 0.0 || *buckets.u_edges.last().unwrap() < max_r {
        return Err(Error::Config(format!("u buckets must cover [0, {max_r}]")));
    }
    let y = match &buckets.y {
        YBuckets::Edges(e) => {
            check_edges("y", e)?;
            e.clone()
        }
        YBuckets::Quantiles(k) => {
            let mut sampler = NuSampler(Vec::new());
            for c in &data.companies {
                replay(c, g, &mut sampler);
            }
            quantile_edges(&sampler.0, *k)
        }
    };
    let (levels, h_cap) = match buckets.h {
        HealthBuckets::Pooled => (1, None),
        HealthBuckets::Capped(cap) => (cap + 1, Some(cap)),
    };
    let layout = Layout {
        t: buckets.t_edges.clone(),
        u: buckets.u_edges.clone(),
        levels,
        h_cap,
        y,
        types: hazard_types(&data.states),
    };
    let type_index: HashMap<HazardType, usize> = layout
        .types
        .iter()
        .enumerate()
        .map(|(i, t)| (*t, i))
        .collect();
    let per_company: Vec<(Vec<u64>, Vec<f64>)> = data
        .companies
        .par_iter()
        .map(|c| {
            let mut v = OeVisitor {
                layout: &layout,
                type_index: type_index.clone(),
                occ: vec![0; layout.len()],
                expo: vec![0.0; layout.len()],
                cuts: Vec::new(),
                y: vec![0.0; g.dim()],
                buf: vec![0.0; g.dim()],
            };
            replay(c, g, &mut v);
            (v.occ, v.expo)
        })
        .collect();
    let mut occ = vec![0u64; layout.len()];
    let mut expo = vec![0.0; layout.len()];
    for (o, e) in &per_company {
        for i in 0..layout.len() {
            occ[i] += o[i];
            expo[i] += e[i];
        }
    }

    let mut cells = Vec::with_capacity(layout.len());
    for ti in 0..layout.t.len() - 1 {
        for ui in 0..layout.u.len() - 1 {
            for hi in 0..layout.levels {
                for yi in 0..layout.ny() {
                    for (ty, hazard) in layout.types.iter().enumerate() {
                        let id = layout.index(ti, ui, hi, yi, ty);
                        cells.push(Cell {
                            id,
                            t: (layout.t[ti], layout.t[ti + 1]),
                            u: (layout.u[ui], layout.u[ui + 1]),
                            h: h_cap.map(|_| hi),
                            h_open: h_cap == Some(hi),
                            y: (layout.y[yi], layout.y[yi + 1]),
                            hazard: *hazard,
                            occurrences: occ[id],
                            exposure: expo[id],
                        });
                    }
                }
            }
        }
    }
    let empty = expo.iter().all(|&e| e == 0.0);
    Ok(OccurrenceExposure { cells, empty })
}

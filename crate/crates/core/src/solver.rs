//! Explicit Euler marching of the forward integro-differential equations on
//! the triangular grid.
//!
//! One engine covers all four systems:
//!
//! * classic semi-Markov (health claims ignored, `K_H = 0`),
//! * individual health claims,
//! * mean-field occupation probabilities, coupled with the mean `v`,
//! * mean-field transition probabilities for a fixed, previously computed `v`.
//!
//! A stage is advanced along each diagonal `d`: the CDF value at duration
//! `u_k` becomes the value at `u_{k+1}` one step later, plus `eta` times
//! inflow into the state (independent of `d`), plus health-claim inflow from
//! `h - 1`, minus outflow by transitions and claims, each integrated over
//! durations up to `u_k`. The node at `u = 0` is pinned to zero. Rates for the
//! step `m -> m + 1` are evaluated at `t_m` and, where they depend on the
//! collective, at `v(t_m)`.

use std::io::Write;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{integrate_cdf, Conditioning, GridSpec, ProbabilityGrid, StageView};
use crate::model::{Hazard, Scenario};

/// Receives every completed stage together with the collective value used for
/// the rates at that stage.
pub trait StageObserver {
    fn on_stage(&mut self, stage: StageView<'_>, y: &[f64]) -> Result<()>;
}

/// Adapts a closure into an observer.
pub struct FnObserver<F>(pub F);

impl<F> StageObserver for FnObserver<F>
where
    F: FnMut(StageView<'_>, &[f64]) -> Result<()>,
{
    fn on_stage(&mut self, stage: StageView<'_>, y: &[f64]) -> Result<()> {
        (self.0)(stage, y)
    }
}

/// Observer that discards everything.
pub struct NoObserver;

impl StageObserver for NoObserver {
    fn on_stage(&mut self, _: StageView<'_>, _: &[f64]) -> Result<()> {
        Ok(())
    }
}

impl<A: StageObserver, B: StageObserver> StageObserver for (A, B) {
    fn on_stage(&mut self, stage: StageView<'_>, y: &[f64]) -> Result<()> {
        self.0.on_stage(stage, y)?;
        self.1.on_stage(stage, y)
    }
}

impl<O: StageObserver + ?Sized> StageObserver for &mut O {
    fn on_stage(&mut self, stage: StageView<'_>, y: &[f64]) -> Result<()> {
        (**self).on_stage(stage, y)
    }
}

/// Stores every stage in a [`ProbabilityGrid`].
pub struct GridRecorder {
    grid: ProbabilityGrid,
}

impl GridRecorder {
    pub fn new(spec: GridSpec, n_states: usize, conditioning: Conditioning) -> Self {
        Self {
            grid: ProbabilityGrid::new(spec, n_states, conditioning),
        }
    }

    pub fn into_grid(self) -> ProbabilityGrid {
        self.grid
    }
}

impl StageObserver for GridRecorder {
    fn on_stage(&mut self, stage: StageView<'_>, _: &[f64]) -> Result<()> {
        self.grid.push_stage(stage.raw());
        Ok(())
    }
}

/// Diagnostics of one solver run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverReport {
    /// `max_m |total mass at stage m - 1|`.
    pub max_normalization_drift: f64,
    /// Number of stored node values below zero, summed over stages.
    pub negative_mass_clips: usize,
    /// Mean-field only: `max_m |v(t_m) - v recomputed from the stored stage|`.
    pub self_consistency_residual: f64,
    pub stages_completed: usize,
}

/// Knobs of the marching scheme.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Fail when the normalization drift exceeds this value.
    pub drift_tolerance: Option<f64>,
    /// Update the `(state, h)` slices of a stage in parallel.
    pub parallel: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            drift_tolerance: None,
            parallel: true,
        }
    }
}

/// Mean `v(t_m) = E[g(X_{t_m})]` of the mean-field model on the time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPath {
    spec: GridSpec,
    dim: usize,
    values: Vec<f64>,
    fingerprint: String,
}

impl MeanPath {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, m: usize) -> &[f64] {
        &self.values[m * self.dim..(m + 1) * self.dim]
    }

    /// Linear interpolation in time, held constant beyond the horizon.
    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        let eta = self.spec.eta();
        let last = self.len() - 1;
        let x = (t / eta).max(0.0);
        let m = (x.floor() as usize).min(last);
        if m == last {
            return self.at(last).to_vec();
        }
        let w = x - m as f64;
        self.at(m)
            .iter()
            .zip(self.at(m + 1))
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// `t,value_0,...` per stage.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "t")?;
        for c in 0..self.dim {
            write!(w, ",value_{c}")?;
        }
        writeln!(w)?;
        for m in 0..self.len() {
            write!(w, "{:.6}", self.spec.time(m))?;
            for x in self.at(m) {
                write!(w, ",{:.12e}", x)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Fingerprint binding a mean path to its scenario and grid.
pub fn meanfield_fingerprint(s: &Scenario, spec: &GridSpec) -> String {
    let mut hasher = Sha256::new();
    hasher.update(s.fingerprint().as_bytes());
    hasher.update(spec.eta().to_bits().to_le_bytes());
    hasher.update(spec.horizon().to_bits().to_le_bytes());
    hasher.update((spec.cutoff() as u64).to_le_bytes());
    hex::encode(&hasher.finalize()[..8])
}

enum Coupling<'a> {
    /// Rates do not read `y`.
    Inert,
    /// `v` is computed from the current stage.
    SelfConsistent,
    /// `v` is given.
    Fixed(&'a MeanPath),
}

/// Rate values at the evaluation points of a stage: point 0 is `u = 0`
/// (the atom), point `i + 1` the midpoint of cell `i`.
struct RateTable {
    per_h: bool,
    per_u: bool,
    points: usize,
    data: Vec<f64>,
}

impl RateTable {
    fn build(hz: &Hazard, t: f64, eta: f64, m: usize, levels: usize, y: &[f64]) -> Self {
        let dep = hz.dependence();
        let per_h = dep.health && levels > 1;
        let per_u = dep.duration;
        let points = if per_u { m + 1 } else { 1 };
        let hs = if per_h { levels } else { 1 };
        let mut data = Vec::with_capacity(hs * points);
        for h in 0..hs {
            for p in 0..points {
                let u = if p == 0 { 0.0 } else { (p as f64 - 0.5) * eta };
                data.push(hz.eval(t, u, h as i64, y));
            }
        }
        Self {
            per_h,
            per_u,
            points,
            data,
        }
    }

    #[inline]
    fn get(&self, h: usize, p: usize) -> f64 {
        let h = if self.per_h { h } else { 0 };
        let p = if self.per_u { p } else { 0 };
        self.data[h * self.points + p]
    }
}

struct SliceIntegrals {
    /// Cumulative outflow integral up to `u_k`, `k = 0..=m`.
    out_cum: Vec<f64>,
    /// Cumulative health-claim integral up to `u_k` (feeds slice `h + 1`).
    claim_cum: Vec<f64>,
    /// Total flow to each target state.
    flow_to: Vec<f64>,
}

/// Forward solver for one scenario on one grid.
pub struct ForwardSolver<'a> {
    scenario: &'a Scenario,
    spec: GridSpec,
    opts: SolverOptions,
}

impl<'a> ForwardSolver<'a> {
    pub fn new(scenario: &'a Scenario, spec: GridSpec) -> Self {
        Self {
            scenario,
            spec,
            opts: SolverOptions::default(),
        }
    }

    pub fn with_options(mut self, opts: SolverOptions) -> Self {
        self.opts = opts;
        self
    }

    fn initial(&self, cond: Conditioning) -> Result<Vec<f64>> {
        let n = self.scenario.n_states();
        match cond {
            Conditioning::Initial => Ok(self.scenario.pi.clone()),
            Conditioning::State(i) if i < n => {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                Ok(e)
            }
            Conditioning::State(i) => Err(Error::Domain(format!("no initial state {i}"))),
        }
    }

    /// Classic semi-Markov model: rates may depend on `(t, u)` only, health
    /// claims are ignored and a single `h = 0` slice is stored.
    pub fn semimarkov(
        &self,
        cond: Conditioning,
        observer: &mut dyn StageObserver,
    ) -> Result<SolverReport> {
        let dep = self.scenario.rates.transition_dependence();
        if dep.health || dep.collective {
            return Err(Error::Config(
                "classic semi-Markov solver requires rates that ignore health claims and the collective"
                    .into(),
            ));
        }
        let spec = self.spec.with_cutoff(0);
        let init = self.initial(cond)?;
        self.march(spec, &init, false, Coupling::Inert, observer)
            .map(|(r, _)| r)
    }

    /// Individual health claims, rates independent of the collective.
    pub fn health(
        &self,
        cond: Conditioning,
        observer: &mut dyn StageObserver,
    ) -> Result<SolverReport> {
        if self.scenario.is_collective() {
            return Err(Error::Config(
                "health-claims solver requires rates that ignore the collective; collapse the scenario or use the mean-field solver"
                    .into(),
            ));
        }
        let init = self.initial(cond)?;
        self.march(self.spec, &init, true, Coupling::Inert, observer)
            .map(|(r, _)| r)
    }

    /// Non-linear mean-field occupation probabilities together with `v`.
    pub fn meanfield_occupation(
        &self,
        observer: &mut dyn StageObserver,
    ) -> Result<(MeanPath, SolverReport)> {
        let init = self.scenario.pi.clone();
        let (report, v) = self.march(self.spec, &init, true, Coupling::SelfConsistent, observer)?;
        Ok((v.expect("self-consistent run yields a mean path"), report))
    }

    /// Linearized mean-field transition probabilities given `v`.
    pub fn meanfield_transition(
        &self,
        v: &MeanPath,
        i: usize,
        observer: &mut dyn StageObserver,
    ) -> Result<SolverReport> {
        let expected = meanfield_fingerprint(self.scenario, &self.spec);
        if v.fingerprint() != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: v.fingerprint().to_string(),
            });
        }
        let init = self.initial(Conditioning::State(i))?;
        self.march(self.spec, &init, true, Coupling::Fixed(v), observer)
            .map(|(r, _)| r)
    }

    fn mean_of(&self, view: &StageView<'_>, out: &mut [f64]) {
        let g = &self.scenario.g;
        let dim = g.dim();
        out.iter_mut().for_each(|x| *x = 0.0);
        let mut buf = vec![0.0; dim];
        for j in 0..view.n_states() {
            for h in 0..view.health_levels() {
                let q = view.cdf(j, h);
                for (c, acc) in out.iter_mut().enumerate() {
                    *acc += integrate_cdf(q, view.eta, |u| {
                        g.eval_into(j, u, h as i64, &mut buf);
                        buf[c]
                    });
                }
            }
        }
    }

    fn march(
        &self,
        spec: GridSpec,
        init: &[f64],
        with_health: bool,
        coupling: Coupling<'_>,
        observer: &mut dyn StageObserver,
    ) -> Result<(SolverReport, Option<MeanPath>)> {
        let s = self.scenario;
        let n = s.n_states();
        let levels = spec.health_levels();
        let eta = spec.eta();
        let dim = s.g.dim();
        let target_mass: f64 = init.iter().sum();

        let mut report = SolverReport::default();
        let mut mean_values: Vec<f64> = Vec::new();
        let mut y = vec![0.0; dim];
        let mut audit = vec![0.0; dim];

        // stage 0: the atom at u = 0 carries the initial distribution, h = 0
        let mut cur = vec![0.0; n * levels];
        for j in 0..n {
            cur[j * levels] = init[j];
        }

        let transitions: Vec<(usize, usize, &Hazard)> = (0..n)
            .flat_map(|j| (0..n).map(move |k| (j, k)))
            .filter_map(|(j, k)| s.rates.transition(j, k).map(|hz| (j, k, hz)))
            .collect();
        let claims: Vec<Option<&Hazard>> = (0..n)
            .map(|j| if with_health { s.rates.health(j) } else { None })
            .collect();

        for m in 0..=spec.steps() {
            let t = spec.time(m);
            let view = StageView::new(m, eta, n, levels, &cur);

            match coupling {
                Coupling::Inert => {}
                Coupling::SelfConsistent => {
                    self.mean_of(&view, &mut y);
                    if y.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Numerical(format!(
                            "mean path is not finite at t = {t}"
                        )));
                    }
                    mean_values.extend_from_slice(&y);
                }
                Coupling::Fixed(v) => {
                    if m >= v.len() {
                        return Err(Error::Domain(format!("mean path has no stage {m}")));
                    }
                    y.copy_from_slice(v.at(m));
                }
            }

            let total = view.total_mass();
            let drift = (total - target_mass).abs();
            if !drift.is_finite() {
                return Err(Error::Numerical(format!(
                    "probability mass not finite at t = {t}"
                )));
            }
            report.max_normalization_drift = report.max_normalization_drift.max(drift);
            report.negative_mass_clips += cur.iter().filter(|&&x| x < 0.0).count();
            if let Some(tol) = self.opts.drift_tolerance {
                if drift > tol {
                    return Err(Error::Numerical(format!(
                        "normalization drift {drift:.3e} exceeds tolerance {tol:.3e} at t = {t}"
                    )));
                }
            }

            observer.on_stage(view, &y)?;

            if let Coupling::SelfConsistent = coupling {
                // audit: recompute v from the stage exactly as handed out
                self.mean_of(&view, &mut audit);
                let r = audit
                    .iter()
                    .zip(&y)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                report.self_consistency_residual = report.self_consistency_residual.max(r);
            }
            report.stages_completed = m + 1;

            if m == spec.steps() {
                break;
            }
            cur = self.step(&view, t, &y, levels, &transitions, &claims);
        }

        let mean = matches!(coupling, Coupling::SelfConsistent).then(|| MeanPath {
            spec,
            dim,
            values: mean_values,
            fingerprint: meanfield_fingerprint(s, &spec),
        });
        Ok((report, mean))
    }

    fn step(
        &self,
        view: &StageView<'_>,
        t: f64,
        y: &[f64],
        levels: usize,
        transitions: &[(usize, usize, &Hazard)],
        claims: &[Option<&Hazard>],
    ) -> Vec<f64> {
        let n = view.n_states();
        let m = view.m;
        let eta = view.eta;

        let mu_tables: Vec<(usize, usize, RateTable)> = transitions
            .iter()
            .map(|&(j, k, hz)| (j, k, RateTable::build(hz, t, eta, m, levels, y)))
            .collect();
        let claim_tables: Vec<Option<RateTable>> = claims
            .iter()
            .map(|c| c.map(|hz| RateTable::build(hz, t, eta, m, levels, y)))
            .collect();

        let integrals = |idx: usize| -> SliceIntegrals {
            let j = idx / levels;
            let h = idx % levels;
            let q = view.cdf(j, h);
            let outgoing: Vec<&(usize, usize, RateTable)> =
                mu_tables.iter().filter(|(a, _, _)| *a == j).collect();
            let claim = claim_tables[j].as_ref();
            let mut flow_to = vec![0.0; n];
            let mut out_cum = Vec::with_capacity(m + 1);
            let mut claim_cum = Vec::with_capacity(if claim.is_some() { m + 1 } else { 0 });
            let mut out_acc = 0.0;
            let mut claim_acc = 0.0;
            for p in 0..=m {
                // weight of point p: the atom q[0], then cell increments
                let w = if p == 0 { q[0] } else { q[p] - q[p - 1] };
                if w != 0.0 {
                    let mut rate = 0.0;
                    for (_, k, tab) in &outgoing {
                        let r = tab.get(h, p);
                        flow_to[*k] += r * w;
                        rate += r;
                    }
                    if let Some(tab) = claim {
                        let l = tab.get(h, p);
                        rate += l;
                        claim_acc += l * w;
                    }
                    out_acc += rate * w;
                }
                // cumulative up to u_p: atom plus cells below u_p
                out_cum.push(out_acc);
                if claim.is_some() {
                    claim_cum.push(claim_acc);
                }
            }
            SliceIntegrals {
                out_cum,
                claim_cum,
                flow_to,
            }
        };

        let slices = n * levels;
        let ints: Vec<SliceIntegrals> = if self.opts.parallel {
            (0..slices).into_par_iter().map(integrals).collect()
        } else {
            (0..slices).map(integrals).collect()
        };

        let width = m + 2;
        let mut next = vec![0.0; slices * width];
        let update = |(idx, out): (usize, &mut [f64])| {
            let j = idx / levels;
            let h = idx % levels;
            let q = view.cdf(j, h);
            let inflow: f64 = (0..n)
                .filter(|&k| k != j)
                .map(|k| ints[k * levels + h].flow_to[j])
                .sum();
            let own = &ints[idx];
            let below = (h > 0)
                .then(|| &ints[idx - 1].claim_cum)
                .filter(|c| !c.is_empty());
            out[0] = 0.0;
            for k in 0..=m {
                let claim_in = below.map_or(0.0, |c| c[k]);
                out[k + 1] = q[k] + eta * (inflow + claim_in - own.out_cum[k]);
            }
        };
        if self.opts.parallel {
            next.par_chunks_mut(width).enumerate().for_each(update);
        } else {
            next.chunks_mut(width).enumerate().for_each(update);
        }
        next
    }
}

/// Classic semi-Markov transition (or occupation) probabilities.
pub fn solve_semimarkov(
    s: &Scenario,
    cond: Conditioning,
    spec: GridSpec,
) -> Result<(ProbabilityGrid, SolverReport)> {
    let mut rec = GridRecorder::new(spec.with_cutoff(0), s.n_states(), cond);
    let report = ForwardSolver::new(s, spec).semimarkov(cond, &mut rec)?;
    Ok((rec.into_grid(), report))
}

/// Probabilities with individual health claims.
pub fn solve_health(
    s: &Scenario,
    cond: Conditioning,
    spec: GridSpec,
) -> Result<(ProbabilityGrid, SolverReport)> {
    let mut rec = GridRecorder::new(spec, s.n_states(), cond);
    let report = ForwardSolver::new(s, spec).health(cond, &mut rec)?;
    Ok((rec.into_grid(), report))
}

/// Mean-field occupation probabilities and mean path.
pub fn solve_meanfield_occupation(
    s: &Scenario,
    spec: GridSpec,
) -> Result<(ProbabilityGrid, MeanPath, SolverReport)> {
    let mut rec = GridRecorder::new(spec, s.n_states(), Conditioning::Initial);
    let (v, report) = ForwardSolver::new(s, spec).meanfield_occupation(&mut rec)?;
    Ok((rec.into_grid(), v, report))
}

/// Mean-field transition probabilities from state `i` for a given mean path.
pub fn solve_meanfield_transition(
    s: &Scenario,
    v: &MeanPath,
    i: usize,
    spec: GridSpec,
) -> Result<(ProbabilityGrid, SolverReport)> {
    let mut rec = GridRecorder::new(spec, s.n_states(), Conditioning::State(i));
    let report = ForwardSolver::new(s, spec).meanfield_transition(v, i, &mut rec)?;
    Ok((rec.into_grid(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::model::*;
    use std::collections::BTreeMap;

    fn constant_markov(rates: &[(usize, usize, f64)], pi: Vec<f64>) -> Scenario {
        let mut model = RateModel::new(3);
        let mut bounds = vec![0.0; 3];
        for &(j, k, r) in rates {
            model = model.with_transition(j, k, Hazard::constant(r));
            bounds[j] += r;
        }
        Scenario::new(
            "markov-test",
            StateSpace::new(vec!["a", "b", "c"], vec![false, false, true]).unwrap(),
            model.with_state_bounds(bounds),
            AveragingFunction::health_count(),
            pi,
            2.0,
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn no_rates_means_no_movement() {
        let s = constant_markov(&[], vec![1.0, 0.0, 0.0]);
        let spec = build_grid(2.0, 0.1, 0).unwrap();
        let (grid, report) = solve_semimarkov(&s, Conditioning::State(0), spec).unwrap();
        for m in 0..spec.stages() {
            assert_eq!(grid.mass(0, 0, m), 1.0);
            assert_eq!(grid.mass(1, 0, m), 0.0);
        }
        assert_eq!(report.max_normalization_drift, 0.0);
        assert_eq!(report.stages_completed, 21);
    }

    #[test]
    fn pure_death_survival() {
        let mu = 0.7;
        let s = constant_markov(&[(0, 2, mu)], vec![1.0, 0.0, 0.0]);
        let spec = build_grid(2.0, 0.01, 0).unwrap();
        let (grid, _) = solve_semimarkov(&s, Conditioning::State(0), spec).unwrap();
        for m in (0..spec.stages()).step_by(10) {
            let t = spec.time(m);
            assert!((grid.mass(0, 0, m) - (-mu * t).exp()).abs() <= 2.0 * spec.eta());
        }
    }

    #[test]
    fn boundary_node_is_zero_and_cdf_monotone() {
        let p = DisabilityParams {
            beta: 0.0,
            ..Default::default()
        };
        let s = make_disability_scenario(&p, 3.0).unwrap();
        let spec = build_grid(3.0, 0.05, 6).unwrap();
        let (grid, report) = solve_health(&s, Conditioning::Initial, spec).unwrap();
        assert_eq!(report.negative_mass_clips, 0);
        for m in 1..spec.stages() {
            for j in 0..3 {
                for h in 0..=6 {
                    assert_eq!(grid.raw(j, h, m, 0), 0.0);
                    for k in 0..m {
                        assert!(grid.raw(j, h, m, k + 1) >= grid.raw(j, h, m, k) - 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn collective_scenario_rejected_by_linear_solvers() {
        let s = make_disability_scenario(&DisabilityParams::default(), 1.0).unwrap();
        let spec = build_grid(1.0, 0.1, 3).unwrap();
        assert!(solve_health(&s, Conditioning::Initial, spec).is_err());
        assert!(solve_semimarkov(&s, Conditioning::Initial, spec).is_err());
    }

    #[test]
    fn health_solver_without_claims_matches_semimarkov_bitwise() {
        let p = DisabilityParams {
            beta: 0.0,
            lambda: [0.0; 3],
            ..Default::default()
        };
        let s = make_disability_scenario(&p, 2.0).unwrap();
        let spec = build_grid(2.0, 0.02, 4).unwrap();
        let (a, _) = solve_semimarkov(&s, Conditioning::Initial, spec).unwrap();
        let (b, _) = solve_health(&s, Conditioning::Initial, spec).unwrap();
        for m in 0..spec.stages() {
            for j in 0..3 {
                assert_eq!(a.stage(m).cdf(j, 0), b.stage(m).cdf(j, 0));
                for h in 1..=4 {
                    assert!(b.stage(m).cdf(j, h).iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn fingerprint_mismatch_is_refused() {
        let s = make_disability_scenario(&DisabilityParams::default(), 1.0).unwrap();
        let spec = build_grid(1.0, 0.1, 4).unwrap();
        let (_, v, _) = solve_meanfield_occupation(&s, spec).unwrap();
        let other = make_disability_scenario(
            &DisabilityParams {
                beta: 1.0,
                ..Default::default()
            },
            1.0,
        )
        .unwrap();
        assert!(matches!(
            solve_meanfield_transition(&other, &v, 0, spec),
            Err(Error::FingerprintMismatch { .. })
        ));
        let finer = build_grid(1.0, 0.05, 4).unwrap();
        assert!(solve_meanfield_transition(&s, &v, 0, finer).is_err());
        assert!(solve_meanfield_transition(&s, &v, 0, spec).is_ok());
    }

    #[test]
    fn self_consistency_audit_is_exact() {
        let s = make_disability_scenario(&DisabilityParams::default(), 2.0).unwrap();
        let spec = build_grid(2.0, 0.05, 8).unwrap();
        let (grid, v, report) = solve_meanfield_occupation(&s, spec).unwrap();
        assert_eq!(report.self_consistency_residual, 0.0);
        assert_eq!(v.len(), spec.stages());
        assert_eq!(v.at(0), &[0.0]);
        // recompute from the stored grid
        for m in 0..spec.stages() {
            let mut acc = 0.0;
            for j in 0..3 {
                for h in 0..=8 {
                    acc +=
                        crate::grid::integrate_against_duration_cdf(|_| h as f64, &grid, j, h, m)
                            .unwrap();
                }
            }
            assert_eq!(acc, v.at(m)[0]);
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let s = make_disability_scenario(&DisabilityParams::default(), 2.0).unwrap();
        let spec = build_grid(2.0, 0.05, 6).unwrap();
        let mut a = GridRecorder::new(spec, 3, Conditioning::Initial);
        let mut b = GridRecorder::new(spec, 3, Conditioning::Initial);
        let seq = SolverOptions {
            parallel: false,
            ..Default::default()
        };
        let (va, _) = ForwardSolver::new(&s, spec)
            .meanfield_occupation(&mut a)
            .unwrap();
        let (vb, _) = ForwardSolver::new(&s, spec)
            .with_options(seq)
            .meanfield_occupation(&mut b)
            .unwrap();
        assert_eq!(va, vb);
        let (ga, gb) = (a.into_grid(), b.into_grid());
        for m in 0..spec.stages() {
            assert_eq!(ga.stage(m).raw(), gb.stage(m).raw());
        }
    }

    #[test]
    fn drift_tolerance_triggers_failure() {
        let s = make_disability_scenario(&DisabilityParams::default(), 25.0).unwrap();
        // K_H = 0 truncates claim mass immediately
        let spec = build_grid(25.0, 0.5, 0).unwrap();
        let opts = SolverOptions {
            drift_tolerance: Some(1e-3),
            ..Default::default()
        };
        let err = ForwardSolver::new(&s, spec)
            .with_options(opts)
            .meanfield_occupation(&mut NoObserver)
            .unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn mean_path_csv_and_interpolation() {
        let s = make_disability_scenario(&DisabilityParams::default(), 1.0).unwrap();
        let spec = build_grid(1.0, 0.25, 5).unwrap();
        let (_, v, _) = solve_meanfield_occupation(&s, spec).unwrap();
        let mut out = Vec::new();
        v.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("t,value_0\n0.000000,"));
        assert_eq!(text.lines().count(), 6);
        let mid = v.interpolate(0.125)[0];
        assert!((mid - 0.5 * (v.at(0)[0] + v.at(1)[0])).abs() < 1e-15);
        assert_eq!(v.interpolate(5.0), v.at(4).to_vec());
    }
}

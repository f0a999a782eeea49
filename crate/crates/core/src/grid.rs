//! Triangular `(t, d, h)` discretization and Stieltjes quadrature against the
//! duration CDF slices stored on it.
//!
//! Stage `m` lives at `t = m * eta`. For each state `j` and health count
//! `h <= K_H` a stage stores the CDF `u -> p_j(t, u, h)` at `u = k * eta`,
//! `k = 0..=m`. The diagonal `d = t - u` is therefore `(m - k) * eta`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::StateSpace;

/// Step length, horizon and health-count cut-off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    eta: f64,
    horizon: f64,
    steps: usize,
    k_h: usize,
}

impl GridSpec {
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of Euler steps `T / eta`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of stages `T / eta + 1`.
    pub fn stages(&self) -> usize {
        self.steps + 1
    }

    pub fn cutoff(&self) -> usize {
        self.k_h
    }

    /// Number of health counts represented, `K_H + 1`.
    pub fn health_levels(&self) -> usize {
        self.k_h + 1
    }

    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.eta
    }

    /// Number of `(m, n)` nodes of the triangle.
    pub fn node_count(&self) -> usize {
        (self.steps + 1) * (self.steps + 2) / 2
    }

    /// Largest grid index `k` with `k * eta <= u` (within rounding).
    pub fn floor_index(&self, u: f64) -> usize {
        floor_index(u, self.eta)
    }

    pub fn with_cutoff(self, k_h: usize) -> Self {
        Self { k_h, ..self }
    }
}

pub(crate) fn floor_index(u: f64, eta: f64) -> usize {
    let x = u / eta;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.floor().max(0.0) as usize
    }
}

/// Builds the grid; `T / eta` must be an integer within a relative 1e-9.
pub fn build_grid(horizon: f64, eta: f64, k_h: usize) -> Result<GridSpec> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Config(format!("horizon {horizon} must be positive")));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("step length {eta} must be positive")));
    }
    let ratio = horizon / eta;
    let steps = ratio.round();
    if steps < 1.0 || (ratio - steps).abs() > 1e-9 * steps {
        return Err(Error::Config(format!(
            "T / eta = {horizon} / {eta} = {ratio} is not an integer"
        )));
    }
    let steps = steps as usize;
    Ok(GridSpec {
        eta: horizon / steps as f64,
        horizon,
        steps,
        k_h,
    })
}

/// `P(X > k)` for `X ~ Poisson(mean)`, by direct summation of the upper tail.
pub fn poisson_tail(mean: f64, k: usize) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    // pmf(k + 1) in log space, then sum the tail until terms vanish.
    let first = k + 1;
    let ln_pmf = -mean + first as f64 * mean.ln() - ln_factorial(first);
    let mut term = ln_pmf.exp();
    let mut total = 0.0;
    let mut i = first;
    loop {
        total += term;
        i += 1;
        term *= mean / i as f64;
        if i as f64 > mean && term < total * 1e-17 {
            break;
        }
        if term == 0.0 && i as f64 > mean {
            break;
        }
    }
    total.min(1.0)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// Smallest `K >= 0` such that `P(H > K) < err` for `H ~ Poisson(lambda_bound * T)`.
pub fn select_cutoff(lambda_bound: f64, horizon: f64, err: f64) -> Result<usize> {
    if !(err > 0.0 && err <= 1.0) {
        return Err(Error::Config(format!(
            "error threshold {err} must lie in (0, 1]"
        )));
    }
    if lambda_bound < 0.0 || !lambda_bound.is_finite() {
        return Err(Error::Config(format!(
            "hazard bound {lambda_bound} must be nonnegative"
        )));
    }
    if horizon <= 0.0 {
        return Err(Error::Config(format!("horizon {horizon} must be positive")));
    }
    let mean = lambda_bound * horizon;
    let mut k = 0;
    while poisson_tail(mean, k) >= err {
        k += 1;
    }
    Ok(k)
}

/// Riemann-Stieltjes sum `int_{[0, u_m]} f(u) p(du)` over a CDF slice `q`
/// sampled at `u_k = k * eta`: the atom `f(0) q[0]` plus `f` at cell midpoints
/// times the cell increments.
pub fn integrate_cdf(q: &[f64], eta: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let Some(&q0) = q.first() else { return 0.0 };
    let mut acc = if q0 != 0.0 { f(0.0) * q0 } else { 0.0 };
    for (i, w) in q.windows(2).enumerate() {
        let dq = w[1] - w[0];
        if dq != 0.0 {
            acc += f((i as f64 + 0.5) * eta) * dq;
        }
    }
    acc
}

/// Mass with duration at least `u0`, where `u0` is rounded down to the grid:
/// `p(t, t) - p(t, u0')`, or the full mass including the atom at zero when `u0' = 0`.
pub fn mass_from_duration(q: &[f64], eta: f64, u0: f64) -> f64 {
    let Some(&last) = q.last() else { return 0.0 };
    let k0 = floor_index(u0, eta);
    if k0 == 0 {
        last
    } else if k0 < q.len() {
        last - q[k0]
    } else {
        0.0
    }
}

/// Whether the grid holds occupation or transition probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Occupation probabilities under the initial distribution.
    Initial,
    /// Transition probabilities given the initial state.
    State(usize),
}

/// Borrowed view on one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageView<'a> {
    pub m: usize,
    pub t: f64,
    pub eta: f64,
    n_states: usize,
    levels: usize,
    data: &'a [f64],
}

impl<'a> StageView<'a> {
    pub fn new(m: usize, eta: f64, n_states: usize, levels: usize, data: &'a [f64]) -> Self {
        debug_assert_eq!(data.len(), n_states * levels * (m + 1));
        Self {
            m,
            t: m as f64 * eta,
            eta,
            n_states,
            levels,
            data,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn health_levels(&self) -> usize {
        self.levels
    }

    /// CDF slice `k -> p_j(t, k eta, h)`, unclamped.
    pub fn cdf(&self, j: usize, h: usize) -> &'a [f64] {
        let len = self.m + 1;
        let start = (j * self.levels + h) * len;
        &self.data[start..start + len]
    }

    /// Total mass in `(j, h)`.
    pub fn mass(&self, j: usize, h: usize) -> f64 {
        self.cdf(j, h)[self.m]
    }

    pub fn total_mass(&self) -> f64 {
        (0..self.n_states)
            .flat_map(|j| (0..self.levels).map(move |h| (j, h)))
            .map(|(j, h)| self.mass(j, h))
            .sum()
    }

    pub fn state_mass(&self, j: usize) -> f64 {
        (0..self.levels).map(|h| self.mass(j, h)).sum()
    }

    pub fn raw(&self) -> &'a [f64] {
        self.data
    }
}

/// Probabilities on every stage of the triangular grid.
#[derive(Debug, Clone)]
pub struct ProbabilityGrid {
    spec: GridSpec,
    n_states: usize,
    conditioning: Conditioning,
    stages: Vec<Vec<f64>>,
}

impl ProbabilityGrid {
    pub(crate) fn new(spec: GridSpec, n_states: usize, conditioning: Conditioning) -> Self {
        Self {
            spec,
            n_states,
            conditioning,
            stages: Vec::with_capacity(spec.stages()),
        }
    }

    pub(crate) fn push_stage(&mut self, data: &[f64]) {
        self.stages.push(data.to_vec());
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn stages_stored(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, m: usize) -> StageView<'_> {
        StageView::new(
            m,
            self.spec.eta,
            self.n_states,
            self.spec.health_levels(),
            &self.stages[m],
        )
    }

    /// `p_j(t_m, u_k, h)` as stored (may be slightly negative after Euler overshoot).
    pub fn raw(&self, j: usize, h: usize, m: usize, k: usize) -> f64 {
        self.stage(m).cdf(j, h)[k]
    }

    /// `p_j(t_m, u_k, h)` clamped to `[0, 1]`.
    pub fn value(&self, j: usize, h: usize, m: usize, k: usize) -> f64 {
        self.raw(j, h, m, k).clamp(0.0, 1.0)
    }

    /// Total mass in `(j, h)` at stage `m`, clamped.
    pub fn mass(&self, j: usize, h: usize, m: usize) -> f64 {
        self.value(j, h, m, m)
    }

    /// Dumps `t,d,h,state,value` ordered by stage, diagonal, health count, state.
    pub fn write_csv<W: Write>(&self, states: &StateSpace, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,d,h,state,value")?;
        let eta = self.spec.eta;
        for (m, _) in self.stages.iter().enumerate() {
            let view = self.stage(m);
            for n in 0..=m {
                let k = m - n;
                for h in 0..self.spec.health_levels() {
                    for j in 0..self.n_states {
                        let v = view.cdf(j, h)[k].clamp(0.0, 1.0);
                        writeln!(
                            w,
                            "{:.6},{:.6},{},{},{:.12e}",
                            m as f64 * eta,
                            n as f64 * eta,
                            h,
                            states.name(j),
                            v
                        )?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `int_0^t f(u) p_j(t, du, h)` at stage `m` of a stored grid.
pub fn integrate_against_duration_cdf(
    f: impl Fn(f64) -> f64,
    grid: &ProbabilityGrid,
    j: usize,
    h: usize,
    m: usize,
) -> Result<f64> {
    if m >= grid.stages_stored() {
        return Err(Error::Domain(format!(
            "stage {m} not available ({} stored)",
            grid.stages_stored()
        )));
    }
    if j >= grid.n_states() || h > grid.spec().cutoff() {
        return Err(Error::Domain(format!("no slice (state {j}, h {h})")));
    }
    let view = grid.stage(m);
    Ok(integrate_cdf(view.cdf(j, h), view.eta, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn default_grid_dimensions() {
        let g = build_grid(25.0, 0.01, 20).unwrap();
        assert_eq!(g.stages(), 2501);
        assert_eq!(g.cutoff(), 20);
    }

    #[test]
    fn small_grid_counts() {
        let g = build_grid(1.0, 0.5, 0).unwrap();
        assert_eq!(g.stages(), 3);
        assert_eq!(g.node_count(), 6);
    }

    #[test]
    fn non_integer_ratio_is_rejected() {
        assert!(matches!(build_grid(1.0, 0.3, 0), Err(Error::Config(_))));
        assert!(build_grid(1.0, 0.0, 0).is_err());
    }

    #[test]
    fn floor_index_tolerates_rounding() {
        assert_eq!(floor_index(0.25, 0.01), 25);
        assert_eq!(floor_index(0.258, 0.01), 25);
        assert_eq!(floor_index(0.3, 0.1), 3);
        assert_eq!(floor_index(0.0, 0.1), 0);
    }

    #[test]
    fn cutoff_rule() {
        assert_eq!(select_cutoff(0.0, 25.0, 1e-6).unwrap(), 0);
        assert_eq!(select_cutoff(0.3, 25.0, 1.0).unwrap(), 0);
        // Exact tail of Poisson(7.5): P(H > 19) = 1.107e-4, P(H > 20) = 3.866e-5.
        assert_eq!(select_cutoff(0.3, 25.0, 1e-4).unwrap(), 20);
        assert_eq!(select_cutoff(0.3, 25.0, 1e-6).unwrap(), 24);
        assert!(select_cutoff(0.3, 25.0, 0.0).is_err());
        assert!(select_cutoff(0.3, 25.0, -1.0).is_err());
    }

    #[test]
    fn poisson_tail_values() {
        assert_abs_diff_eq!(
            poisson_tail(7.5, 20),
            3.865_664_108_720_855e-5,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            poisson_tail(7.5, 24),
            3.749_789_250_381_393_6e-7,
            epsilon = 1e-17
        );
        assert_abs_diff_eq!(poisson_tail(1.0, 0), 1.0 - (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn integrate_constant_and_zero() {
        let q = [0.0, 0.1, 0.3, 0.35, 0.8];
        assert_abs_diff_eq!(integrate_cdf(&q, 0.1, |_| 1.0), 0.8, epsilon = 1e-15);
        assert_eq!(integrate_cdf(&q, 0.1, |_| 0.0), 0.0);
        // the atom at zero counts for stage 0
        assert_eq!(integrate_cdf(&[0.7], 0.1, |_| 2.0), 1.4);
    }

    #[test]
    fn waiting_period_indicator() {
        let q = [0.0, 0.1, 0.3, 0.35, 0.8];
        // 1{u >= 0.2}: cells with midpoints 0.25 and 0.35
        let by_midpoint = integrate_cdf(&q, 0.1, |u| if u >= 0.2 { 1.0 } else { 0.0 });
        assert_abs_diff_eq!(by_midpoint, 0.8 - 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(mass_from_duration(&q, 0.1, 0.2), 0.5, epsilon = 1e-15);
        // off-grid waiting period rounds down to 0.2
        assert_abs_diff_eq!(mass_from_duration(&q, 0.1, 0.27), 0.5, epsilon = 1e-15);
        assert_eq!(mass_from_duration(&q, 0.1, 0.9), 0.0);
        assert_eq!(mass_from_duration(&q, 0.1, 0.0), 0.8);
    }

    #[test]
    fn grid_integration_and_csv() {
        let spec = build_grid(1.0, 0.5, 1).unwrap();
        let mut grid = ProbabilityGrid::new(spec, 2, Conditioning::Initial);
        grid.push_stage(&[1.0, 0.0, 0.0, 0.0]);
        grid.push_stage(&[0.0, 0.8, 0.0, 0.1, 0.0, 0.1, 0.0, 0.0]);
        let v = integrate_against_duration_cdf(|_| 1.0, &grid, 0, 0, 1).unwrap();
        assert_eq!(v, 0.8);
        assert!(integrate_against_duration_cdf(|_| 1.0, &grid, 0, 0, 2).is_err());
        let states = StateSpace::new(vec!["a", "b"], vec![false, true]).unwrap();
        let mut out = Vec::new();
        grid.write_csv(&states, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,d,h,state,value");
        assert_eq!(lines.len(), 1 + 4 + 2 * 4);
        assert!(lines[1].starts_with("0.000000,0.000000,0,a,1.0"));
        // stage 1, d = 0 means u = t: the total mass
        assert!(lines[5].starts_with("0.500000,0.000000,0,a,8.0"));
    }

    proptest! {
        #[test]
        fn integration_is_linear_and_monotone(
            incs in proptest::collection::vec(0.0f64..0.1, 1..30),
            a in -3.0f64..3.0, b in -3.0f64..3.0,
        ) {
            let mut q = vec![0.0];
            for d in incs { let last = *q.last().unwrap(); q.push(last + d); }
            let f = |u: f64| (u * 3.0).sin() + 1.5;
            let g = |u: f64| u * u;
            let lhs = integrate_cdf(&q, 0.05, |u| a * f(u) + b * g(u));
            let rhs = a * integrate_cdf(&q, 0.05, f) + b * integrate_cdf(&q, 0.05, g);
            prop_assert!((lhs - rhs).abs() < 1e-12);
            prop_assert!(integrate_cdf(&q, 0.05, f) >= 0.0);
        }
    }
}

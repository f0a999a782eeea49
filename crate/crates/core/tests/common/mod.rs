#![allow(dead_code)]

use std::collections::BTreeMap;

use mfdi_core::model::*;

pub type Matrix = Vec<Vec<f64>>;

/// Constant-rate Markov scenario on the disability states.
pub fn constant_markov(rates: &[(usize, usize, f64)], pi: Vec<f64>, horizon: f64) -> Scenario {
    let mut model = RateModel::new(3);
    let mut bounds = vec![0.0; 3];
    for &(j, k, r) in rates {
        model = model.with_transition(j, k, Hazard::constant(r));
        bounds[j] += r;
    }
    Scenario::new(
        "constant-markov",
        StateSpace::disability(),
        model.with_state_bounds(bounds),
        AveragingFunction::health_count(),
        pi,
        horizon,
        BTreeMap::new(),
    )
    .unwrap()
}

pub const MARKOV_RATES: [(usize, usize, f64); 4] = [
    (ACTIVE, DISABLED, 0.10),
    (ACTIVE, DEAD, 0.02),
    (DISABLED, ACTIVE, 0.30),
    (DISABLED, DEAD, 0.05),
];

pub fn generator(rates: &[(usize, usize, f64)], n: usize) -> Matrix {
    let mut q = vec![vec![0.0; n]; n];
    for &(j, k, r) in rates {
        q[j][k] += r;
        q[j][j] -= r;
    }
    q
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// `exp(q t)` by scaling and squaring of a truncated Taylor series.
pub fn expm(q: &Matrix, t: f64) -> Matrix {
    let n = q.len();
    let norm = q
        .iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        * t;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = t / 2f64.powi(squarings as i32);
    let a: Matrix = q
        .iter()
        .map(|r| r.iter().map(|x| x * scale).collect())
        .collect();
    let mut result: Matrix = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut term = result.clone();
    for k in 1..30 {
        term = matmul(&term, &a);
        term.iter_mut().flatten().for_each(|x| *x /= k as f64);
        for i in 0..n {
            for j in 0..n {
                result[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result);
    }
    result
}

pub fn poisson_pmf(mean: f64, k: usize) -> f64 {
    let ln = -mean + k as f64 * mean.ln() - (1..=k).map(|i| (i as f64).ln()).sum::<f64>();
    ln.exp()
}

/// Only active individuals file claims, at constant rate `lambda`; nobody moves.
pub fn poisson_scenario(lambda: f64, horizon: f64) -> Scenario {
    let rates = RateModel::new(3)
        .with_health(ACTIVE, Hazard::constant(lambda))
        .with_state_bounds(vec![lambda, 0.0, 0.0]);
    Scenario::new(
        "poisson",
        StateSpace::disability(),
        rates,
        AveragingFunction::health_count(),
        vec![1.0, 0.0, 0.0],
        horizon,
        BTreeMap::new(),
    )
    .unwrap()
}

/// The disability preset over 25 years.
pub fn preset(params: DisabilityParams) -> Scenario {
    make_disability_scenario(&params, 25.0).unwrap()
}

pub fn annuity() -> PaymentSpec {
    make_disability_annuity(1.0, 0.25).unwrap()
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

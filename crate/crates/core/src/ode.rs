//! Two-stage Erlang SEEIIR dynamics, the daily Heun (explicit trapezoidal)
//! integrator, and its discrete adjoint.
//!
//! States are proportions of the total population laid out group-major:
//! `[S, E1, E2, I1, I2, R]` for group 0, then group 1, and so on.

use serde::{Deserialize, Serialize};

use crate::epi::{fill_rate_matrix, AgeStructure, ContactMatrix, ModelKind, RateParams, SquareMatrix};
use crate::error::{structure, validation, Error, Result};
use crate::latent::{LatentPath, DAYS_PER_WEEK};

pub const COMPARTMENTS: usize = 6;
pub const NEGATIVE_STATE_TOLERANCE: f64 = 1e-10;

const S: usize = 0;
const E1: usize = 1;
const E2: usize = 2;
const I1: usize = 3;
const I2: usize = 4;
const R: usize = 5;

const NAMES: [&str; COMPARTMENTS] = ["S", "E1", "E2", "I1", "I2", "R"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompartmentState {
    values: Vec<f64>,
}

impl CompartmentState {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() % COMPARTMENTS != 0 {
            return Err(structure(format!(
                "state length {} is not a positive multiple of {COMPARTMENTS}",
                values.len()
            )));
        }
        Ok(Self { values })
    }

    /// Disease-free population with `seeds[a]` of group `a` split equally
    /// over E1, E2, I1 and I2.
    pub fn seeded(ages: &AgeStructure, seeds: &[f64]) -> Result<Self> {
        if seeds.len() != ages.groups() {
            return Err(structure(format!(
                "{} seeds for {} groups",
                seeds.len(),
                ages.groups()
            )));
        }
        let mut values = vec![0.0; COMPARTMENTS * ages.groups()];
        for (a, (&f, &rho)) in ages.fractions().iter().zip(seeds).enumerate() {
            if !(rho >= 0.0 && rho <= f) {
                return Err(validation(format!(
                    "seed {rho} of group {a} outside [0, {f}]"
                )));
            }
            fill_seeded(&mut values[a * COMPARTMENTS..(a + 1) * COMPARTMENTS], f, rho);
        }
        Ok(Self { values })
    }

    pub fn groups(&self) -> usize {
        self.values.len() / COMPARTMENTS
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn group(&self, a: usize) -> &[f64] {
        &self.values[a * COMPARTMENTS..(a + 1) * COMPARTMENTS]
    }

    pub fn susceptible(&self, a: usize) -> f64 {
        self.values[a * COMPARTMENTS + S]
    }

    pub fn recovered(&self, a: usize) -> f64 {
        self.values[a * COMPARTMENTS + R]
    }

    pub fn infectious(&self, a: usize) -> f64 {
        self.values[a * COMPARTMENTS + I1] + self.values[a * COMPARTMENTS + I2]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub(crate) fn fill_seeded(group: &mut [f64], fraction: f64, seed: f64) {
    group[S] = fraction - seed;
    group[E1] = seed / 4.0;
    group[E2] = seed / 4.0;
    group[I1] = seed / 4.0;
    group[I2] = seed / 4.0;
    group[R] = 0.0;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpidemicTrajectory {
    /// `states[t]` for `t = 0..=T`.
    pub states: Vec<CompartmentState>,
    /// `new_infections[t - 1][a]`: proportion of the total population newly
    /// infectious-bound during day `t`.
    pub new_infections: Vec<Vec<f64>>,
    pub horizon_days: usize,
}

/// `lambda_a = sum_b m[a][b] (I1_b + I2_b) / f_b`.
pub fn force_of_infection(
    rate_matrix: &SquareMatrix,
    state: &CompartmentState,
    ages: &AgeStructure,
) -> Result<Vec<f64>> {
    let dim = ages.groups();
    if rate_matrix.dim() != dim || state.groups() != dim {
        return Err(structure(format!(
            "rate matrix {}x{}, state over {} groups, {} age groups",
            rate_matrix.dim(),
            rate_matrix.dim(),
            state.groups(),
            dim
        )));
    }
    let inv_f: Vec<f64> = ages.fractions().iter().map(|f| 1.0 / f).collect();
    let mut lambda = vec![0.0; dim];
    let mut pressure = vec![0.0; dim];
    force_into(state.values(), rate_matrix, &inv_f, &mut pressure, &mut lambda);
    Ok(lambda)
}

/// Right-hand side of the SEEIIR system given the force of infection.
pub fn seeiir_rhs(state: &CompartmentState, lambda: &[f64], rates: RateParams) -> Result<Vec<f64>> {
    if lambda.len() != state.groups() {
        return Err(structure("force of infection length differs from group count"));
    }
    if let Some(l) = lambda.iter().find(|l| !(**l >= 0.0)) {
        return Err(validation(format!("force of infection must be >= 0, got {l}")));
    }
    let mut out = vec![0.0; state.values().len()];
    rhs_with_lambda(state.values(), lambda, rates, &mut out);
    Ok(out)
}

fn force_into(y: &[f64], m: &SquareMatrix, inv_f: &[f64], pressure: &mut [f64], lambda: &mut [f64]) {
    let dim = inv_f.len();
    for b in 0..dim {
        let g = &y[b * COMPARTMENTS..];
        pressure[b] = (g[I1] + g[I2]) * inv_f[b];
    }
    for (a, l) in lambda.iter_mut().enumerate() {
        *l = m.row(a).iter().zip(pressure.iter()).map(|(m, p)| m * p).sum();
    }
}

fn rhs_with_lambda(y: &[f64], lambda: &[f64], rates: RateParams, out: &mut [f64]) {
    let RateParams { tau, gamma } = rates;
    for (a, &l) in lambda.iter().enumerate() {
        let g = &y[a * COMPARTMENTS..(a + 1) * COMPARTMENTS];
        let d = &mut out[a * COMPARTMENTS..(a + 1) * COMPARTMENTS];
        let infection = l * g[S];
        d[S] = -infection;
        d[E1] = infection - tau * g[E1];
        d[E2] = tau * (g[E1] - g[E2]);
        d[I1] = tau * g[E2] - gamma * g[I1];
        d[I2] = gamma * (g[I1] - g[I2]);
        d[R] = gamma * g[I2];
    }
}

/// Scratch buffers reused across solver steps.
struct Workspace {
    pressure: Vec<f64>,
    lambda: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    predictor: Vec<f64>,
}

impl Workspace {
    fn new(groups: usize) -> Self {
        let n = groups * COMPARTMENTS;
        Self {
            pressure: vec![0.0; groups],
            lambda: vec![0.0; groups],
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            predictor: vec![0.0; n],
        }
    }
}

fn rhs(y: &[f64], m: &SquareMatrix, inv_f: &[f64], rates: RateParams, ws_p: &mut [f64], ws_l: &mut [f64], out: &mut [f64]) {
    force_into(y, m, inv_f, ws_p, ws_l);
    rhs_with_lambda(y, ws_l, rates, out);
}

/// One Heun step of size `h`, written into `next`.
fn heun_step(y: &[f64], next: &mut [f64], h: f64, m: &SquareMatrix, inv_f: &[f64], rates: RateParams, ws: &mut Workspace) {
    rhs(y, m, inv_f, rates, &mut ws.pressure, &mut ws.lambda, &mut ws.k1);
    for i in 0..y.len() {
        ws.predictor[i] = y[i] + h * ws.k1[i];
    }
    rhs(&ws.predictor, m, inv_f, rates, &mut ws.pressure, &mut ws.lambda, &mut ws.k2);
    for i in 0..y.len() {
        next[i] = y[i] + 0.5 * h * (ws.k1[i] + ws.k2[i]);
    }
}

/// Raw output of the daily solver: flat states `(T + 1) x 6A` and daily
/// increments `T x A`.
#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub states: Vec<f64>,
    pub new_infections: Vec<f64>,
    pub width: usize,
    pub groups: usize,
    pub horizon: usize,
}

impl Solution {
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.width..(t + 1) * self.width]
    }
}

/// Integrates `horizon` days with `substeps` Heun steps per day. Day `t`
/// (covering `(t-1, t]`) uses `weekly_rates[ceil(t / 7) - 1]`.
pub(crate) fn solve(
    initial: &[f64],
    rates: RateParams,
    weekly_rates: &[SquareMatrix],
    inv_f: &[f64],
    horizon: usize,
    substeps: usize,
) -> Result<Solution> {
    let groups = inv_f.len();
    let width = groups * COMPARTMENTS;
    let mut states = vec![0.0; (horizon + 1) * width];
    states[..width].copy_from_slice(initial);
    let mut new_infections = vec![0.0; horizon * groups];
    let mut ws = Workspace::new(groups);
    let h = 1.0 / substeps as f64;
    let mut cur = initial.to_vec();
    let mut next = vec![0.0; width];
    for t in 1..=horizon {
        let m = &weekly_rates[(t - 1) / DAYS_PER_WEEK];
        for _ in 0..substeps {
            heun_step(&cur, &mut next, h, m, inv_f, rates, &mut ws);
            std::mem::swap(&mut cur, &mut next);
        }
        check_state(&cur, t)?;
        states[t * width..(t + 1) * width].copy_from_slice(&cur);
    }
    for t in 1..=horizon {
        let (prev, now) = (&states[(t - 1) * width..t * width], &states[t * width..(t + 1) * width]);
        for a in 0..groups {
            let e2 = prev[a * COMPARTMENTS + E2] + now[a * COMPARTMENTS + E2];
            new_infections[(t - 1) * groups + a] = 0.5 * rates.tau * e2;
        }
    }
    Ok(Solution {
        states,
        new_infections,
        width,
        groups,
        horizon,
    })
}

fn check_state(y: &[f64], day: usize) -> Result<()> {
    for (i, v) in y.iter().enumerate() {
        if !(v.is_finite() && *v >= -NEGATIVE_STATE_TOLERANCE) {
            return Err(Error::Instability {
                day,
                component: format!("{}[{}]", NAMES[i % COMPARTMENTS], i / COMPARTMENTS),
                value: *v,
            });
        }
    }
    Ok(())
}

/// `Delta_t = tau (E2_{t-1} + E2_t) / 2` for each day of a stored state
/// sequence; the trapezoid approximation of the day's `tau E2` integral.
pub fn daily_new_infections(states: &[CompartmentState], tau: f64) -> Vec<Vec<f64>> {
    states
        .windows(2)
        .map(|w| {
            (0..w[0].groups())
                .map(|a| 0.5 * tau * (w[0].values()[a * COMPARTMENTS + E2] + w[1].values()[a * COMPARTMENTS + E2]))
                .collect()
        })
        .collect()
}

/// Per-week rate matrices for a latent path.
pub(crate) fn weekly_rate_matrices(path: &LatentPath, contact: &ContactMatrix, kind: ModelKind) -> Vec<SquareMatrix> {
    let betas = path.betas();
    (1..=path.weeks())
        .map(|k| {
            let week: Vec<f64> = betas.iter().map(|b| b[k]).collect();
            let mut m = SquareMatrix::zeros(contact.dim());
            fill_rate_matrix(&week, contact.entries(), kind, &mut m);
            m
        })
        .collect()
}

/// Daily Heun integration with transmissibility held fixed within each week.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    initial: &CompartmentState,
    rates: RateParams,
    path: &LatentPath,
    contact: &ContactMatrix,
    kind: ModelKind,
    ages: &AgeStructure,
    horizon_days: usize,
) -> Result<EpidemicTrajectory> {
    integrate_with_substeps(initial, rates, path, contact, kind, ages, horizon_days, 1)
}

#[allow(clippy::too_many_arguments)]
pub fn integrate_with_substeps(
    initial: &CompartmentState,
    rates: RateParams,
    path: &LatentPath,
    contact: &ContactMatrix,
    kind: ModelKind,
    ages: &AgeStructure,
    horizon_days: usize,
    substeps: usize,
) -> Result<EpidemicTrajectory> {
    let groups = ages.groups();
    if horizon_days == 0 {
        return Err(validation("horizon must be at least one day"));
    }
    if horizon_days > DAYS_PER_WEEK * path.weeks() {
        return Err(structure(format!(
            "horizon of {horizon_days} days exceeds the {} weeks of the latent path",
            path.weeks()
        )));
    }
    if initial.groups() != groups || contact.dim() != groups || path.paths() != kind.paths(groups) {
        return Err(structure("state, contact matrix, latent path and age structure disagree"));
    }
    if substeps == 0 {
        return Err(validation("substeps must be >= 1"));
    }
    let inv_f: Vec<f64> = ages.fractions().iter().map(|f| 1.0 / f).collect();
    let weekly = weekly_rate_matrices(path, contact, kind);
    let sol = solve(initial.values(), rates, &weekly, &inv_f, horizon_days, substeps)?;
    Ok(EpidemicTrajectory {
        states: (0..=horizon_days)
            .map(|t| CompartmentState {
                values: sol.state(t).to_vec(),
            })
            .collect(),
        new_infections: sol.new_infections.chunks(groups).map(<[f64]>::to_vec).collect(),
        horizon_days,
    })
}

/// Gradients flowing back out of the solver.
#[derive(Debug, Clone)]
pub(crate) struct SolverAdjoint {
    pub initial: Vec<f64>,
    pub weekly_rates: Vec<SquareMatrix>,
    pub tau: f64,
    pub gamma: f64,
}

/// Vector-Jacobian product of the right-hand side at `y`: adds
/// `J_y^T v` into `y_bar`, and the rate-matrix and stage-rate parts into
/// `m_bar`, `tau_bar`, `gamma_bar`.
#[allow(clippy::too_many_arguments)]
fn rhs_vjp(
    y: &[f64],
    v: &[f64],
    m: &SquareMatrix,
    inv_f: &[f64],
    rates: RateParams,
    pressure: &mut [f64],
    lambda: &mut [f64],
    pressure_bar: &mut [f64],
    y_bar: &mut [f64],
    m_bar: &mut SquareMatrix,
    tau_bar: &mut f64,
    gamma_bar: &mut f64,
) {
    let dim = inv_f.len();
    let RateParams { tau, gamma } = rates;
    force_into(y, m, inv_f, pressure, lambda);
    pressure_bar.iter_mut().for_each(|v| *v = 0.0);
    for a in 0..dim {
        let o = a * COMPARTMENTS;
        let g = &y[o..o + COMPARTMENTS];
        let w = &v[o..o + COMPARTMENTS];
        let infection_bar = w[E1] - w[S];
        let yb = &mut y_bar[o..o + COMPARTMENTS];
        yb[S] += infection_bar * lambda[a];
        yb[E1] += tau * (w[E2] - w[E1]);
        yb[E2] += tau * (w[I1] - w[E2]);
        yb[I1] += gamma * (w[I2] - w[I1]);
        yb[I2] += gamma * (w[R] - w[I2]);
        *tau_bar += -g[E1] * w[E1] + (g[E1] - g[E2]) * w[E2] + g[E2] * w[I1];
        *gamma_bar += -g[I1] * w[I1] + (g[I1] - g[I2]) * w[I2] + g[I2] * w[R];
        let lambda_bar = infection_bar * g[S];
        let mrow = m.row(a);
        for b in 0..dim {
            m_bar[(a, b)] += lambda_bar * pressure[b];
            pressure_bar[b] += lambda_bar * mrow[b];
        }
    }
    for b in 0..dim {
        let pb = pressure_bar[b] * inv_f[b];
        y_bar[b * COMPARTMENTS + I1] += pb;
        y_bar[b * COMPARTMENTS + I2] += pb;
    }
}

/// Reverse pass through `solve` (one step per day) given the gradient of a
/// scalar with respect to each daily new-infection increment.
pub(crate) fn solve_adjoint(
    sol: &Solution,
    rates: RateParams,
    weekly_rates: &[SquareMatrix],
    inv_f: &[f64],
    infections_bar: &[f64],
) -> SolverAdjoint {
    let groups = sol.groups;
    let width = sol.width;
    let dim = groups;
    let mut tau_bar = 0.0;
    let mut gamma_bar = 0.0;
    let mut m_bars: Vec<SquareMatrix> = weekly_rates.iter().map(|m| SquareMatrix::zeros(m.dim())).collect();

    let mut y_bar = vec![0.0; width];
    let mut prev_bar = vec![0.0; width];
    let mut star_bar = vec![0.0; width];
    let mut k1 = vec![0.0; width];
    let mut predictor = vec![0.0; width];
    let mut pressure = vec![0.0; dim];
    let mut lambda = vec![0.0; dim];
    let mut pressure_bar = vec![0.0; dim];
    let mut k_bar = vec![0.0; width];
    let mut k1_bar = vec![0.0; width];

    for t in (1..=sol.horizon).rev() {
        let prev = sol.state(t - 1);
        let now = sol.state(t);
        // increments of day t
        prev_bar.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..groups {
            let db = infections_bar[(t - 1) * groups + a];
            let idx = a * COMPARTMENTS + E2;
            y_bar[idx] += 0.5 * rates.tau * db;
            prev_bar[idx] += 0.5 * rates.tau * db;
            tau_bar += 0.5 * (prev[idx] + now[idx]) * db;
        }

        let m = &weekly_rates[(t - 1) / DAYS_PER_WEEK];
        let m_bar = &mut m_bars[(t - 1) / DAYS_PER_WEEK];
        rhs(prev, m, inv_f, rates, &mut pressure, &mut lambda, &mut k1);
        for i in 0..width {
            predictor[i] = prev[i] + k1[i];
        }
        // y_t = y + (k1 + k2) / 2 with k2 = f(y + k1)
        for i in 0..width {
            k_bar[i] = 0.5 * y_bar[i];
        }
        star_bar.iter_mut().for_each(|v| *v = 0.0);
        rhs_vjp(
            &predictor, &k_bar, m, inv_f, rates, &mut pressure, &mut lambda, &mut pressure_bar,
            &mut star_bar, m_bar, &mut tau_bar, &mut gamma_bar,
        );
        for i in 0..width {
            k1_bar[i] = k_bar[i] + star_bar[i];
            prev_bar[i] += y_bar[i] + star_bar[i];
        }
        rhs_vjp(
            prev, &k1_bar, m, inv_f, rates, &mut pressure, &mut lambda, &mut pressure_bar,
            &mut prev_bar, m_bar, &mut tau_bar, &mut gamma_bar,
        );
        std::mem::swap(&mut y_bar, &mut prev_bar);
    }

    SolverAdjoint {
        initial: y_bar,
        weekly_rates: m_bars,
        tau: tau_bar,
        gamma: gamma_bar,
    }
}

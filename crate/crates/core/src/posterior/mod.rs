//! Joint log posterior over unconstrained coordinates and its exact
//! gradient.
//!
//! Evaluation runs constrain -> latent path -> weekly rate matrices ->
//! daily Heun solve -> new infections -> delay convolution -> negative
//! binomial likelihood. The gradient is the reverse pass through the same
//! discrete computation, so it is exact for the discretized model.

mod layout;
pub mod prior;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use layout::{Parameters, ParameterLayout};
pub use prior::{Prior, Transform};

use crate::epi::{AgeStructure, ContactMatrix, ModelKind, RateParams, SquareMatrix};
use crate::error::{structure, validation, Error, Result};
use crate::latent::DAYS_PER_WEEK;
use crate::observation::{convolve_deaths, convolve_deaths_adjoint, negbin_logpmf_with_grad, DelayDistribution};
use crate::ode::{self, fill_seeded, Solution, COMPARTMENTS};
use crate::outputs::spectral_radius;
use crate::sampler::LogDensity;
use prior::standard_normal_log_density;

/// Location of the prior on each path's initial log-transmissibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum InitialLogBetaPrior {
    Normal { mean: f64, sd: f64 },
    /// Normal centred where the survey contact matrix and mean infectious
    /// period give the stated basic reproduction number.
    ReproductionAnchored { basic_reproduction: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub x0: InitialLogBetaPrior,
    pub volatility: Prior,
    pub overdispersion: Prior,
    /// Prior on each group's initially infected share of its own population.
    pub seed_fraction: Prior,
    /// Log-scale sd of the contact elements around the survey matrix.
    pub contact_log_sd: f64,
    /// Used only when stage rates are free.
    pub tau: Prior,
    pub gamma: Prior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            x0: InitialLogBetaPrior::ReproductionAnchored {
                basic_reproduction: 1.0,
                sd: 1.0,
            },
            volatility: Prior::HalfNormal { scale: 0.5 },
            overdispersion: Prior::Exponential { rate: 1.0 },
            seed_fraction: Prior::Beta {
                alpha: 1.0,
                beta: 999.0,
            },
            contact_log_sd: 0.05,
            tau: Prior::LogNormal {
                mu: (2.0f64 / 3.0).ln(),
                sd: 0.1,
            },
            gamma: Prior::LogNormal {
                mu: (2.0f64 / 4.0).ln(),
                sd: 0.1,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesConfig {
    /// Sample `log tau` and `log gamma` instead of fixing them.
    pub free: bool,
    pub latent_period: f64,
    pub infectious_period: f64,
}

impl Default for RatesConfig {
    fn default() -> Self {
        Self {
            free: false,
            latent_period: 3.0,
            infectious_period: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayConfig {
    pub shape: f64,
    pub rate: f64,
    pub truncation: usize,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self {
            shape: crate::observation::DEFAULT_DELAY_SHAPE,
            rate: crate::observation::DEFAULT_DELAY_RATE,
            truncation: crate::observation::DEFAULT_DELAY_TRUNCATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub rates: RatesConfig,
    pub priors: PriorConfig,
    pub delay: DelayConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mbm,
            rates: RatesConfig::default(),
            priors: PriorConfig::default(),
            delay: DelayConfig::default(),
        }
    }
}

/// Everything the likelihood conditions on.
#[derive(Debug, Clone, PartialEq)]
pub struct FitData {
    pub ages: AgeStructure,
    /// Survey contact matrix; the centre of the contact prior.
    pub contact: ContactMatrix,
    pub ifr: Vec<f64>,
    /// `deaths[t - 1][a]`, `None` where missing.
    pub deaths: Vec<Vec<Option<u64>>>,
    pub weeks: usize,
}

impl FitData {
    pub fn validate(&self) -> Result<()> {
        let groups = self.ages.groups();
        if self.contact.dim() != groups {
            return Err(structure("contact matrix does not match the age groups"));
        }
        if self.ifr.len() != groups {
            return Err(structure(format!("{} IFR values for {groups} groups", self.ifr.len())));
        }
        if let Some(v) = self.ifr.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(validation(format!("IFR must lie in (0, 1), got {v}")));
        }
        if self.weeks == 0 || self.deaths.len() != DAYS_PER_WEEK * self.weeks {
            return Err(validation(format!(
                "death series has {} days, expected {} for {} whole weeks",
                self.deaths.len(),
                DAYS_PER_WEEK * self.weeks,
                self.weeks
            )));
        }
        if self.deaths.iter().any(|row| row.len() != groups) {
            return Err(structure("every day of deaths needs one count per group"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.deaths.len()
    }
}

/// Decomposition of one log-posterior evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub log_posterior: f64,
    pub log_likelihood: f64,
    /// Priors on constrained parameters plus the innovation densities.
    pub log_prior: f64,
    pub log_jacobian: f64,
    /// Set when the solver became unstable; the density is then `-inf`.
    pub divergence: Option<Error>,
}

/// Deterministic reconstruction of the epidemic at one parameter draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub parameters: Parameters,
    /// Flat `(T + 1) x 6A` compartment proportions.
    pub states: Vec<f64>,
    /// `T x A`, proportions of the total population.
    pub new_infections: Vec<f64>,
    /// `T x A` counts.
    pub expected_deaths: Vec<f64>,
    /// Rate matrices for weeks `1..=K`.
    pub weekly_rates: Vec<SquareMatrix>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    data: FitData,
    layout: ParameterLayout,
    delay: DelayDistribution,
    x0_prior: Prior,
    survey_log_upper: Vec<f64>,
    inv_fractions: Vec<f64>,
    death_scale: Vec<f64>,
}

struct Forward {
    params: Parameters,
    log_jacobian: f64,
    betas: Vec<Vec<f64>>,
    weekly: Vec<SquareMatrix>,
    initial: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, data: FitData) -> Result<Self> {
        data.validate()?;
        let p = &config.priors;
        for prior in [p.volatility, p.overdispersion, p.seed_fraction, p.tau, p.gamma] {
            prior.validate()?;
        }
        if !(p.contact_log_sd > 0.0) {
            return Err(validation("contact_log_sd must be positive"));
        }
        if !(config.rates.latent_period > 0.0 && config.rates.infectious_period > 0.0) {
            return Err(validation("stage periods must be positive"));
        }
        let delay = DelayDistribution::new(config.delay.shape, config.delay.rate, config.delay.truncation)?;
        let infectious_period = if config.rates.free {
            2.0 / p.gamma.center()
        } else {
            config.rates.infectious_period
        };
        let x0_prior = match p.x0 {
            InitialLogBetaPrior::Normal { mean, sd } => Prior::Normal { mean, sd },
            InitialLogBetaPrior::ReproductionAnchored { basic_reproduction, sd } => {
                let radius = spectral_radius(data.contact.entries());
                if !(radius > 0.0 && basic_reproduction > 0.0) {
                    return Err(validation(
                        "anchored x0 prior needs a positive contact spectral radius and reproduction number",
                    ));
                }
                Prior::Normal {
                    mean: (basic_reproduction / (radius * infectious_period)).ln(),
                    sd,
                }
            }
        };
        x0_prior.validate()?;
        let survey_upper = data.contact.upper_triangle();
        if survey_upper.iter().any(|c| !(*c > 0.0)) {
            return Err(validation(
                "survey contact matrix needs strictly positive entries for the log-normal contact prior",
            ));
        }
        let layout = ParameterLayout::new(config.kind, data.ages.groups(), data.weeks, config.rates.free);
        let inv_fractions = data.ages.fractions().iter().map(|f| 1.0 / f).collect();
        let death_scale = data.ifr.iter().map(|r| r * data.ages.total()).collect();
        Ok(Self {
            survey_log_upper: survey_upper.iter().map(|c| c.ln()).collect(),
            config,
            data,
            layout,
            delay,
            x0_prior,
            inv_fractions,
            death_scale,
        })
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn data(&self) -> &FitData {
        &self.data
    }

    pub fn delay(&self) -> &DelayDistribution {
        &self.delay
    }

    /// The resolved prior on each path's initial log-transmissibility.
    pub fn x0_prior(&self) -> Prior {
        self.x0_prior
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn fixed_rates(&self) -> RateParams {
        RateParams::from_periods(self.config.rates.latent_period, self.config.rates.infectious_period)
            .expect("validated periods")
    }

    /// Unconstrained coordinates to structured parameters plus the
    /// log-absolute-Jacobian of the transform.
    pub fn constrain(&self, theta: &[f64]) -> Result<(Parameters, f64)> {
        self.layout.constrain(theta, &self.data.ages, self.fixed_rates())
    }

    pub fn unconstrain(&self, params: &Parameters) -> Result<Vec<f64>> {
        self.layout.unconstrain(params)
    }

    fn forward(&self, theta: &[f64]) -> Result<Forward> {
        let (params, log_jacobian) = self.constrain(theta)?;
        let betas = params.path.betas();
        let groups = self.data.ages.groups();
        let kind = self.config.kind;
        let contact = params.contact.entries();
        let weekly = (1..=self.data.weeks)
            .map(|k| {
                let mut m = SquareMatrix::zeros(groups);
                for a in 0..groups {
                    let beta = betas[kind.path_of(a)][k];
                    for b in 0..groups {
                        m[(a, b)] = beta * contact[(a, b)];
                    }
                }
                m
            })
            .collect();
        let mut initial = vec![0.0; groups * COMPARTMENTS];
        for (a, (&f, &rho)) in self.data.ages.fractions().iter().zip(&params.seeds).enumerate() {
            fill_seeded(&mut initial[a * COMPARTMENTS..(a + 1) * COMPARTMENTS], f, rho);
        }
        Ok(Forward {
            params,
            log_jacobian,
            betas,
            weekly,
            initial,
        })
    }

    fn solve(&self, fw: &Forward) -> Result<Solution> {
        ode::solve(&fw.initial, fw.params.rates, &fw.weekly, &self.inv_fractions, self.data.horizon(), 1)
    }

    fn expected(&self, sol: &Solution) -> Vec<f64> {
        let mut d = vec![0.0; sol.new_infections.len()];
        convolve_deaths(&sol.new_infections, sol.horizon, &self.death_scale, &self.delay.pmf, &mut d);
        d
    }

    /// Prior log density (constrained-space priors, innovations and
    /// Jacobians), split into (priors + innovations, Jacobians), with the
    /// gradient accumulated into `grad` when given.
    fn prior_terms(&self, theta: &[f64], mut grad: Option<&mut [f64]>) -> (f64, f64) {
        let l = &self.layout;
        let p = &self.config.priors;
        let mut lp = 0.0;
        let mut lj = 0.0;
        let mut add = |idx: usize, tr: Transform, prior: &Prior, grad: &mut Option<&mut [f64]>| {
            let u = theta[idx];
            let x = tr.forward(u);
            let (d, dg) = prior.log_density(x);
            let (dx, log_jac, dlog_jac) = tr.jacobian(u, x);
            lp += d;
            lj += log_jac;
            if let Some(g) = grad.as_deref_mut() {
                g[idx] += dg * dx + dlog_jac;
            }
        };
        if let Some(r) = l.rates_offset() {
            add(r, Transform::Exp, &p.tau, &mut grad);
            add(r + 1, Transform::Exp, &p.gamma, &mut grad);
        }
        for path in 0..l.paths() {
            add(l.x0_index(path), Transform::Identity, &self.x0_prior, &mut grad);
            add(l.log_sigma_index(path), Transform::Exp, &p.volatility, &mut grad);
        }
        add(l.log_phi_index(), Transform::Exp, &p.overdispersion, &mut grad);
        for a in 0..l.groups() {
            add(l.seed_index(a), Transform::Logistic, &p.seed_fraction, &mut grad);
        }
        for (e, mu) in self.survey_log_upper.iter().enumerate() {
            let prior = Prior::LogNormal {
                mu: *mu,
                sd: p.contact_log_sd,
            };
            add(l.contact_index(e), Transform::Exp, &prior, &mut grad);
        }
        for path in 0..l.paths() {
            for k in 0..l.weeks() {
                let idx = l.z_index(path, k);
                let z = theta[idx];
                lp += standard_normal_log_density(z);
                if let Some(g) = grad.as_deref_mut() {
                    g[idx] -= z;
                }
            }
        }
        (lp, lj)
    }

    /// Log posterior with its decomposition. Solver instability yields a
    /// `-inf` density with the error recorded, not an `Err`.
    pub fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        let fw = self.forward(theta)?;
        let (log_prior, log_jacobian) = self.prior_terms(theta, None);
        debug_assert!((log_jacobian - fw.log_jacobian).abs() < 1e-9 * log_jacobian.abs().max(1.0));
        let sol = match self.solve(&fw) {
            Ok(sol) => sol,
            Err(e @ Error::Instability { .. }) => {
                return Ok(Evaluation {
                    log_posterior: f64::NEG_INFINITY,
                    log_likelihood: f64::NEG_INFINITY,
                    log_prior,
                    log_jacobian,
                    divergence: Some(e),
                })
            }
            Err(e) => return Err(e),
        };
        let d = self.expected(&sol);
        let phi = fw.params.phi;
        let log_likelihood = self
            .data
            .deaths
            .iter()
            .flatten()
            .zip(&d)
            .filter_map(|(y, d)| y.map(|y| negbin_logpmf_with_grad(y, *d, phi).0))
            .sum::<f64>();
        Ok(Evaluation {
            log_posterior: log_likelihood + log_prior + log_jacobian,
            log_likelihood,
            log_prior,
            log_jacobian,
            divergence: None,
        })
    }

    pub fn log_posterior(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(theta)?.log_posterior)
    }

    /// Log posterior and its gradient written into `grad`. Unstable
    /// proposals return `-inf` with the gradient zeroed.
    pub fn log_posterior_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.dim() {
            return Err(structure(format!("gradient buffer has {} entries, model has {}", grad.len(), self.dim())));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let fw = self.forward(theta)?;
        let (log_prior, log_jacobian) = self.prior_terms(theta, Some(grad));
        let sol = match self.solve(&fw) {
            Ok(sol) => sol,
            Err(Error::Instability { .. }) => {
                grad.iter_mut().for_each(|g| *g = 0.0);
                return Ok(f64::NEG_INFINITY);
            }
            Err(e) => return Err(e),
        };
        let d = self.expected(&sol);
        let phi = fw.params.phi;
        let mut loglik = 0.0;
        let mut d_bar = vec![0.0; d.len()];
        let mut phi_bar = 0.0;
        for ((y, &dv), db) in self.data.deaths.iter().flatten().zip(&d).zip(d_bar.iter_mut()) {
            if let Some(y) = y {
                let (lp, gd, gphi) = negbin_logpmf_with_grad(*y, dv, phi);
                loglik += lp;
                *db = gd;
                phi_bar += gphi;
            }
        }
        let value = loglik + log_prior + log_jacobian;
        if !value.is_finite() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return Ok(f64::NEG_INFINITY);
        }
        self.backward(&fw, &sol, &d_bar, phi_bar, grad);
        Ok(value)
    }

    fn backward(&self, fw: &Forward, sol: &Solution, d_bar: &[f64], phi_bar: f64, grad: &mut [f64]) {
        let l = &self.layout;
        let groups = l.groups();
        let kind = self.config.kind;
        let params = &fw.params;

        grad[l.log_phi_index()] += phi_bar * params.phi;

        let mut inf_bar = vec![0.0; sol.new_infections.len()];
        convolve_deaths_adjoint(d_bar, sol.horizon, &self.death_scale, &self.delay.pmf, &mut inf_bar);
        let adj = ode::solve_adjoint(sol, params.rates, &fw.weekly, &self.inv_fractions, &inf_bar);

        if let Some(r) = l.rates_offset() {
            grad[r] += adj.tau * params.rates.tau;
            grad[r + 1] += adj.gamma * params.rates.gamma;
        }

        // seeds: S = f - rho, E1 = E2 = I1 = I2 = rho / 4
        let fractions = self.data.ages.fractions();
        for a in 0..groups {
            let g = &adj.initial[a * COMPARTMENTS..(a + 1) * COMPARTMENTS];
            let rho_bar = -g[0] + 0.25 * (g[1] + g[2] + g[3] + g[4]);
            let q = params.seed_fractions[a];
            grad[l.seed_index(a)] += rho_bar * fractions[a] * q * (1.0 - q);
        }

        // weekly rate matrices -> betas and contact entries
        let contact = params.contact.entries();
        let mut contact_bar = SquareMatrix::zeros(groups);
        let mut log_beta_bar = vec![vec![0.0; l.weeks()]; l.paths()];
        for (k, m_bar) in adj.weekly_rates.iter().enumerate() {
            for a in 0..groups {
                let path = kind.path_of(a);
                let beta = fw.betas[path][k + 1];
                let mut beta_bar = 0.0;
                for b in 0..groups {
                    beta_bar += m_bar[(a, b)] * contact[(a, b)];
                    contact_bar[(a, b)] += m_bar[(a, b)] * beta;
                }
                log_beta_bar[path][k] += beta_bar * beta;
            }
        }

        // upper triangle: C[a][b] = c, C[b][a] = c f_a / f_b, c = exp(u)
        let mut e = 0;
        for a in 0..groups {
            for b in a..groups {
                let mut c_bar = contact_bar[(a, b)];
                if a != b {
                    c_bar += contact_bar[(b, a)] * fractions[a] / fractions[b];
                }
                grad[l.contact_index(e)] += c_bar * contact[(a, b)];
                e += 1;
            }
        }

        // x_k = x0 + sigma * sum_{j <= k} z_j, sigma = exp(u)
        for path in 0..l.paths() {
            let sigma = params.path.volatilities()[path];
            let z = &params.path.innovations()[path];
            let xb = &log_beta_bar[path];
            grad[l.x0_index(path)] += xb.iter().sum::<f64>();
            let mut partial = 0.0;
            let mut sigma_bar = 0.0;
            for k in 0..l.weeks() {
                partial += z[k];
                sigma_bar += xb[k] * partial;
            }
            grad[l.log_sigma_index(path)] += sigma_bar * sigma;
            let mut tail = 0.0;
            for k in (0..l.weeks()).rev() {
                tail += xb[k];
                grad[l.z_index(path, k)] += sigma * tail;
            }
        }
    }

    /// Deterministic epidemic at `theta`.
    pub fn reconstruct(&self, theta: &[f64]) -> Result<Reconstruction> {
        let fw = self.forward(theta)?;
        let sol = self.solve(&fw)?;
        let expected_deaths = self.expected(&sol);
        Ok(Reconstruction {
            parameters: fw.params,
            states: sol.states,
            new_infections: sol.new_infections,
            expected_deaths,
            weekly_rates: fw.weekly,
        })
    }

    /// Prior-centred starting point with uniform jitter of half-width
    /// `jitter` on every coordinate.
    pub fn initial_point(&self, rng: &mut dyn RngCore, jitter: f64) -> Vec<f64> {
        let l = &self.layout;
        let p = &self.config.priors;
        let mut theta = vec![0.0; l.dim()];
        if let Some(r) = l.rates_offset() {
            theta[r] = p.tau.center().ln();
            theta[r + 1] = p.gamma.center().ln();
        }
        for path in 0..l.paths() {
            theta[l.x0_index(path)] = self.x0_prior.center();
            theta[l.log_sigma_index(path)] = p.volatility.center().ln();
        }
        theta[l.log_phi_index()] = p.overdispersion.center().ln();
        for a in 0..l.groups() {
            theta[l.seed_index(a)] = Transform::Logistic.inverse(p.seed_fraction.center());
        }
        for (e, mu) in self.survey_log_upper.iter().enumerate() {
            theta[l.contact_index(e)] = *mu;
        }
        if jitter > 0.0 {
            for v in theta.iter_mut() {
                *v += rng.random_range(-jitter..jitter);
            }
        }
        theta
    }
}

impl LogDensity for Model {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        self.log_posterior_and_grad(position, grad).unwrap_or(f64::NEG_INFINITY)
    }

    fn initial_point(&self, rng: &mut dyn RngCore, jitter: f64) -> Vec<f64> {
        Model::initial_point(self, rng, jitter)
    }
}

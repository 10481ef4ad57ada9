//! Prior families and the unconstraining transforms paired with them.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{validation, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Univariate prior on a constrained parameter. Densities need not be
/// normalized over the transform's support (a `normal` prior on a positive
/// parameter is the half-normal up to a factor of 2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Prior {
    Normal { mean: f64, sd: f64 },
    HalfNormal { scale: f64 },
    Exponential { rate: f64 },
    Beta { alpha: f64, beta: f64 },
    /// `log x ~ Normal(mu, sd)`.
    LogNormal { mu: f64, sd: f64 },
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Prior::Normal { mean, sd } => mean.is_finite() && sd > 0.0,
            Prior::HalfNormal { scale } => scale > 0.0,
            Prior::Exponential { rate } => rate > 0.0,
            Prior::Beta { alpha, beta } => alpha > 0.0 && beta > 0.0,
            Prior::LogNormal { mu, sd } => mu.is_finite() && sd > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(validation(format!("invalid prior hyperparameters: {self:?}")))
        }
    }

    /// Log density and its derivative at `x`.
    pub fn log_density(&self, x: f64) -> (f64, f64) {
        match *self {
            Prior::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                (-LN_SQRT_2PI - sd.ln() - 0.5 * z * z, -z / sd)
            }
            Prior::HalfNormal { scale } => {
                if x < 0.0 {
                    return (f64::NEG_INFINITY, 0.0);
                }
                let z = x / scale;
                (std::f64::consts::LN_2 - LN_SQRT_2PI - scale.ln() - 0.5 * z * z, -z / scale)
            }
            Prior::Exponential { rate } => {
                if x < 0.0 {
                    return (f64::NEG_INFINITY, 0.0);
                }
                (rate.ln() - rate * x, -rate)
            }
            Prior::Beta { alpha, beta } => {
                if !(x > 0.0 && x < 1.0) {
                    return (f64::NEG_INFINITY, 0.0);
                }
                let norm = ln_gamma(alpha + beta) - ln_gamma(alpha) - ln_gamma(beta);
                (
                    norm + (alpha - 1.0) * x.ln() + (beta - 1.0) * (-x).ln_1p(),
                    (alpha - 1.0) / x - (beta - 1.0) / (1.0 - x),
                )
            }
            Prior::LogNormal { mu, sd } => {
                if x <= 0.0 {
                    return (f64::NEG_INFINITY, 0.0);
                }
                let lx = x.ln();
                let z = (lx - mu) / sd;
                (-LN_SQRT_2PI - sd.ln() - lx - 0.5 * z * z, (-z / sd - 1.0) / x)
            }
        }
    }

    /// A central value used to initialize the sampler.
    pub fn center(&self) -> f64 {
        match *self {
            Prior::Normal { mean, .. } => mean,
            // median of the half-normal
            Prior::HalfNormal { scale } => 0.674_489_750_196_081_7 * scale,
            Prior::Exponential { rate } => std::f64::consts::LN_2 / rate,
            Prior::Beta { alpha, beta } => alpha / (alpha + beta),
            Prior::LogNormal { mu, .. } => mu.exp(),
        }
    }
}

/// Map from an unconstrained coordinate to a constrained parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Positive reals.
    Exp,
    /// The unit interval.
    Logistic,
}

impl Transform {
    pub fn forward(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Exp => u.exp(),
            Transform::Logistic => logistic(u),
        }
    }

    pub fn inverse(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Exp => x.ln(),
            Transform::Logistic => (x / (1.0 - x)).ln(),
        }
    }

    /// `(dx/du, log|dx/du|, d log|dx/du| / du)` at `u`, given `x = forward(u)`.
    pub fn jacobian(self, u: f64, x: f64) -> (f64, f64, f64) {
        match self {
            Transform::Identity => (1.0, 0.0, 0.0),
            Transform::Exp => (x, u, 1.0),
            Transform::Logistic => {
                let d = x * (1.0 - x);
                // log q + log(1 - q) = -softplus(-u) - softplus(u)
                (d, -softplus(-u) - softplus(u), 1.0 - 2.0 * x)
            }
        }
    }

    /// Prior log density plus log-Jacobian at `u`, and its derivative.
    pub fn log_density(self, prior: &Prior, u: f64) -> (f64, f64) {
        let x = self.forward(u);
        let (lp, dlp) = prior.log_density(x);
        let (dx, log_jac, dlog_jac) = self.jacobian(u, x);
        (lp + log_jac, dlp * dx + dlog_jac)
    }
}

pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

pub(crate) fn standard_normal_log_density(z: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * z * z
}

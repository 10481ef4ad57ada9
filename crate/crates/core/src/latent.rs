//! Weekly log-transmissibility random walks in non-centered form.

use serde::{Deserialize, Serialize};

use crate::error::{structure, validation, Error, Result};

pub const DAYS_PER_WEEK: usize = 7;

/// Reconstructs `x_k = x_{k-1} + sigma * z_k` for `k = 1..=K`.
/// Returns the log path `x_0..x_K` and `beta_k = exp(x_k)`.
pub fn build_path(x0: f64, innovations: &[f64], sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut log_path = Vec::with_capacity(innovations.len() + 1);
    log_path.push(x0);
    let mut x = x0;
    for z in innovations {
        x += sigma * z;
        log_path.push(x);
    }
    let betas = log_path.iter().map(|x| x.exp()).collect();
    (log_path, betas)
}

/// Week `k_t = ceil(t / 7)` containing day `t` (1-based).
pub fn week_index(day: usize, weeks: usize) -> Result<usize> {
    if day == 0 || day > DAYS_PER_WEEK * weeks {
        return Err(Error::Bounds {
            index: day,
            max: DAYS_PER_WEEK * weeks,
        });
    }
    Ok(day.div_ceil(DAYS_PER_WEEK))
}

/// One or more weekly random-walk paths sharing a horizon of `K` weeks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPath {
    x0: Vec<f64>,
    innovations: Vec<Vec<f64>>,
    volatilities: Vec<f64>,
    weeks: usize,
}

impl LatentPath {
    pub fn new(x0: Vec<f64>, innovations: Vec<Vec<f64>>, volatilities: Vec<f64>) -> Result<Self> {
        let paths = x0.len();
        if paths == 0 || innovations.len() != paths || volatilities.len() != paths {
            return Err(structure(format!(
                "path count mismatch: {} x0, {} innovation rows, {} volatilities",
                paths,
                innovations.len(),
                volatilities.len()
            )));
        }
        let weeks = innovations[0].len();
        if weeks == 0 {
            return Err(structure("latent path needs at least one week"));
        }
        if innovations.iter().any(|z| z.len() != weeks) {
            return Err(structure("all paths must cover the same number of weeks"));
        }
        if let Some(s) = volatilities.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(validation(format!("volatility must be non-negative, got {s}")));
        }
        Ok(Self {
            x0,
            innovations,
            volatilities,
            weeks,
        })
    }

    /// Path with all innovations zero: constant transmissibilities.
    pub fn constant(log_betas: Vec<f64>, weeks: usize) -> Result<Self> {
        let n = log_betas.len();
        Self::new(log_betas, vec![vec![0.0; weeks]; n], vec![0.0; n])
    }

    pub fn paths(&self) -> usize {
        self.x0.len()
    }

    pub fn weeks(&self) -> usize {
        self.weeks
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn innovations(&self) -> &[Vec<f64>] {
        &self.innovations
    }

    pub fn volatilities(&self) -> &[f64] {
        &self.volatilities
    }

    pub fn log_path(&self, path: usize) -> Vec<f64> {
        build_path(self.x0[path], &self.innovations[path], self.volatilities[path]).0
    }

    /// `betas[p][k]` for `k = 0..=K`.
    pub fn betas(&self) -> Vec<Vec<f64>> {
        (0..self.paths())
            .map(|p| build_path(self.x0[p], &self.innovations[p], self.volatilities[p]).1)
            .collect()
    }

    /// Transmissibilities in force during week `k` (1-based), one per path.
    pub fn betas_for_week(&self, week: usize) -> Vec<f64> {
        self.betas().iter().map(|b| b[week]).collect()
    }

    pub fn week_of_day(&self, day: usize) -> Result<usize> {
        week_index(day, self.weeks)
    }
}

/// Log density of a centered Gaussian random walk `x_k ~ N(x_{k-1}, sigma^2)`.
pub fn random_walk_log_density(log_path: &[f64], sigma: f64) -> f64 {
    let norm = -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln();
    log_path
        .windows(2)
        .map(|w| {
            let d = (w[1] - w[0]) / sigma;
            norm - 0.5 * d * d
        })
        .sum()
}

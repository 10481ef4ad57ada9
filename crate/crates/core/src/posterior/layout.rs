use serde::{Deserialize, Serialize};

use super::prior::Transform;
use crate::epi::{AgeStructure, ContactMatrix, ModelKind, RateParams};
use crate::error::{structure, validation, Result};
use crate::latent::LatentPath;

/// Structured model parameters on their natural scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub rates: RateParams,
    pub path: LatentPath,
    pub phi: f64,
    /// Initially infected share of each group's own population.
    pub seed_fractions: Vec<f64>,
    /// Initially infected proportion of the total population, per group.
    pub seeds: Vec<f64>,
    pub contact: ContactMatrix,
}

/// Positions of every parameter block in the unconstrained vector:
/// `[log tau, log gamma]` (when free), `x0` per path, `log sigma` per
/// path, innovations `z` (path-major, K per path), `log phi`, logit seed
/// fractions per group, and log contact upper-triangle elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    kind: ModelKind,
    groups: usize,
    paths: usize,
    weeks: usize,
    free_rates: bool,
    x0: usize,
    log_sigma: usize,
    z: usize,
    log_phi: usize,
    seed: usize,
    contact: usize,
    dim: usize,
}

impl ParameterLayout {
    pub fn new(kind: ModelKind, groups: usize, weeks: usize, free_rates: bool) -> Self {
        let paths = kind.paths(groups);
        let x0 = if free_rates { 2 } else { 0 };
        let log_sigma = x0 + paths;
        let z = log_sigma + paths;
        let log_phi = z + paths * weeks;
        let seed = log_phi + 1;
        let contact = seed + groups;
        let dim = contact + groups * (groups + 1) / 2;
        Self {
            kind,
            groups,
            paths,
            weeks,
            free_rates,
            x0,
            log_sigma,
            z,
            log_phi,
            seed,
            contact,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn weeks(&self) -> usize {
        self.weeks
    }

    pub fn rates_offset(&self) -> Option<usize> {
        self.free_rates.then_some(0)
    }

    pub fn x0_index(&self, path: usize) -> usize {
        self.x0 + path
    }

    pub fn log_sigma_index(&self, path: usize) -> usize {
        self.log_sigma + path
    }

    /// Innovation of week `week + 1` on `path`.
    pub fn z_index(&self, path: usize, week: usize) -> usize {
        self.z + path * self.weeks + week
    }

    pub fn log_phi_index(&self) -> usize {
        self.log_phi
    }

    pub fn seed_index(&self, group: usize) -> usize {
        self.seed + group
    }

    /// Element `e` of the row-major upper triangle.
    pub fn contact_index(&self, element: usize) -> usize {
        self.contact + element
    }

    /// Column names, 1-based.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim);
        if self.free_rates {
            names.push("log_tau".to_string());
            names.push("log_gamma".to_string());
        }
        names.extend((1..=self.paths).map(|p| format!("x0[{p}]")));
        names.extend((1..=self.paths).map(|p| format!("log_sigma[{p}]")));
        for p in 1..=self.paths {
            names.extend((1..=self.weeks).map(|k| format!("z[{p},{k}]")));
        }
        names.push("log_phi".to_string());
        names.extend((1..=self.groups).map(|a| format!("logit_seed[{a}]")));
        for a in 1..=self.groups {
            names.extend((a..=self.groups).map(|b| format!("log_contact[{a},{b}]")));
        }
        names
    }

    pub fn constrain(&self, theta: &[f64], ages: &AgeStructure, fixed_rates: RateParams) -> Result<(Parameters, f64)> {
        if theta.len() != self.dim {
            return Err(structure(format!("expected {} coordinates, got {}", self.dim, theta.len())));
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(validation(format!("coordinate {i} is not finite: {}", theta[i])));
        }
        let mut log_jac = 0.0;
        let mut apply = |tr: Transform, u: f64| {
            let x = tr.forward(u);
            log_jac += tr.jacobian(u, x).1;
            x
        };
        let rates = match self.rates_offset() {
            Some(r) => RateParams::new(apply(Transform::Exp, theta[r]), apply(Transform::Exp, theta[r + 1]))?,
            None => fixed_rates,
        };
        let x0 = (0..self.paths).map(|p| theta[self.x0_index(p)]).collect();
        let sigmas = (0..self.paths)
            .map(|p| apply(Transform::Exp, theta[self.log_sigma_index(p)]))
            .collect();
        let innovations = (0..self.paths)
            .map(|p| theta[self.z_index(p, 0)..self.z_index(p, 0) + self.weeks].to_vec())
            .collect();
        let phi = apply(Transform::Exp, theta[self.log_phi]);
        let seed_fractions: Vec<f64> = (0..self.groups)
            .map(|a| apply(Transform::Logistic, theta[self.seed_index(a)]))
            .collect();
        let upper: Vec<f64> = (0..self.groups * (self.groups + 1) / 2)
            .map(|e| apply(Transform::Exp, theta[self.contact_index(e)]))
            .collect();
        let seeds = seed_fractions.iter().zip(ages.fractions()).map(|(q, f)| q * f).collect();
        Ok((
            Parameters {
                rates,
                path: LatentPath::new(x0, innovations, sigmas)?,
                phi,
                seed_fractions,
                seeds,
                contact: ContactMatrix::from_upper_triangle(&upper, ages)?,
            },
            log_jac,
        ))
    }

    pub fn unconstrain(&self, params: &Parameters) -> Result<Vec<f64>> {
        if params.path.paths() != self.paths || params.path.weeks() != self.weeks || params.seed_fractions.len() != self.groups {
            return Err(structure("parameters do not match the layout"));
        }
        let mut theta = vec![0.0; self.dim];
        if let Some(r) = self.rates_offset() {
            theta[r] = params.rates.tau.ln();
            theta[r + 1] = params.rates.gamma.ln();
        }
        for p in 0..self.paths {
            theta[self.x0_index(p)] = params.path.x0()[p];
            theta[self.log_sigma_index(p)] = Transform::Exp.inverse(params.path.volatilities()[p]);
            for (k, z) in params.path.innovations()[p].iter().enumerate() {
                theta[self.z_index(p, k)] = *z;
            }
        }
        theta[self.log_phi] = params.phi.ln();
        for (a, q) in params.seed_fractions.iter().enumerate() {
            theta[self.seed_index(a)] = Transform::Logistic.inverse(*q);
        }
        for (e, c) in params.contact.upper_triangle().iter().enumerate() {
            theta[self.contact_index(e)] = c.ln();
        }
        Ok(theta)
    }
}

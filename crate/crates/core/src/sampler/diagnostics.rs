//! Rank-normalized split R-hat and bulk/tail effective sample sizes.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Convergence summary of one coordinate across chains. `None` marks a
/// quantity that is undefined (zero variance, or R-hat with one chain).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateDiagnostics {
    pub rhat: Option<f64>,
    pub ess_bulk: Option<f64>,
    pub ess_tail: Option<f64>,
}

/// Diagnostics for every coordinate. `draws[chain][iteration][coordinate]`.
pub fn diagnostics(draws: &[Vec<Vec<f64>>]) -> Vec<CoordinateDiagnostics> {
    let dim = draws.first().and_then(|c| c.first()).map_or(0, Vec::len);
    (0..dim)
        .map(|j| {
            let chains: Vec<Vec<f64>> = draws.iter().map(|c| c.iter().map(|d| d[j]).collect()).collect();
            coordinate_diagnostics(&chains)
        })
        .collect()
}

pub fn coordinate_diagnostics(chains: &[Vec<f64>]) -> CoordinateDiagnostics {
    let usable = !chains.is_empty() && chains.iter().all(|c| c.len() >= 4);
    if !usable || is_constant(chains) {
        return CoordinateDiagnostics {
            rhat: None,
            ess_bulk: None,
            ess_tail: None,
        };
    }
    CoordinateDiagnostics {
        rhat: if chains.len() >= 2 { rank_normalized_rhat(chains) } else { None },
        ess_bulk: ess_bulk(chains),
        ess_tail: ess_tail(chains),
    }
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().flatten().all(|v| *v == first)
}

/// Splits every chain into two halves, dropping the middle draw of odd
/// lengths.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Classic potential scale reduction on the given (already split) chains.
pub fn rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains.iter().map(Vec::len).min()? as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = mean(&chains.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    let between = n * sample_variance(&means);
    if !(within > 0.0) {
        return None;
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    Some((var_plus / within).sqrt())
}

/// Normal scores of pooled ranks, `Phi^{-1}((r - 3/8) / (S + 1/4))`,
/// with ties receiving their average rank.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, chain)| chain.iter().enumerate().map(move |(i, v)| (*v, c, i)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = pooled.len() as f64;
    let normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let rank = 0.5 * ((i + 1) + (j + 1)) as f64;
        let z = normal.inverse_cdf((rank - 0.375) / (total + 0.25));
        for &(_, c, k) in &pooled[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

/// Maximum of the rank-normalized split R-hat for location and for the
/// folded (scale) draws.
pub fn rank_normalized_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let split = split_chains(chains);
    let bulk = rhat(&rank_normalize(&split))?;
    let median = quantile(&split.concat(), 0.5);
    let folded: Vec<Vec<f64>> = split.iter().map(|c| c.iter().map(|v| (v - median).abs()).collect()).collect();
    let tail = rhat(&rank_normalize(&folded)).unwrap_or(bulk);
    Some(bulk.max(tail))
}

pub fn ess_bulk(chains: &[Vec<f64>]) -> Option<f64> {
    ess(&rank_normalize(&split_chains(chains)))
}

pub fn ess_tail(chains: &[Vec<f64>]) -> Option<f64> {
    let split = split_chains(chains);
    let pooled = split.concat();
    let lo = quantile(&pooled, 0.05);
    let hi = quantile(&pooled, 0.95);
    let indicator = |q: f64| -> Vec<Vec<f64>> {
        split
            .iter()
            .map(|c| c.iter().map(|v| if *v <= q { 1.0 } else { 0.0 }).collect())
            .collect()
    };
    let a = ess(&indicator(lo))?;
    let b = ess(&indicator(hi))?;
    Some(a.min(b))
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted_quantile(&sorted, p)
}

pub(crate) fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn autocovariance(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| (a - m) * (b - m)).sum::<f64>() / n as f64
}

/// Multi-chain effective sample size with Geyer's initial monotone
/// sequence truncation. Chains are truncated to a common length.
pub fn ess(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains.iter().map(Vec::len).min()?;
    if n < 4 {
        return None;
    }
    let m = chains.len();
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov = |lag: usize| -> f64 {
        chains.iter().zip(&means).map(|(c, mu)| autocovariance(c, *mu, lag)).sum::<f64>() / m as f64
    };
    let nf = n as f64;
    let mean_var = acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_variance(&means);
    }
    if !(var_plus > 0.0) {
        return None;
    }

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - acov(1)) / var_plus;
    rho[1] = rho_odd;
    let mut s = 1;
    while s < n - 4 && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - acov(s + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - acov(s + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[s + 1] = rho_even;
            rho[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    if rho_even > 0.0 {
        rho[max_s + 1] = rho_even;
    }
    // initial positive sequence -> initial monotone sequence
    let mut t = 1;
    while t + 3 <= max_s {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + rho[max_s + 1]).max(1.0 / total.log10());
    Some(total / tau)
}

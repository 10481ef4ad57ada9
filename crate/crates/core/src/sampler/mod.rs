//! Dynamic HMC (multinomial NUTS) with warm-up adaptation, run over
//! independent chains.

mod adapt;
pub mod diagnostics;
mod nuts;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::exec::{map_range, Execution};
pub use diagnostics::CoordinateDiagnostics;
pub use nuts::TransitionStats;

/// Target density for the sampler. A non-finite return marks a rejected
/// (divergent) point; the gradient is then ignored.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    fn log_density_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;

    /// Starting point; uniform on `[-jitter, jitter]` per coordinate by
    /// default.
    fn initial_point(&self, rng: &mut dyn RngCore, jitter: f64) -> Vec<f64> {
        (0..self.dim())
            .map(|_| if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup_iterations: usize,
    pub sampling_iterations: usize,
    pub target_acceptance: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    pub initial_jitter: f64,
    /// Post-warm-up divergence fraction above which sampling fails.
    pub max_divergence_rate: f64,
    pub execution: Execution,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup_iterations: 1000,
            sampling_iterations: 1000,
            target_acceptance: 0.8,
            max_tree_depth: 10,
            seed: 1,
            initial_jitter: 2.0,
            max_divergence_rate: 0.5,
            execution: Execution::Parallel,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.warmup_iterations == 0 || self.sampling_iterations == 0 || self.max_tree_depth == 0 {
            return Err(validation("chain, iteration and tree-depth counts must all be >= 1"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(validation(format!(
                "target acceptance must lie in (0, 1), got {}",
                self.target_acceptance
            )));
        }
        if !(self.initial_jitter >= 0.0) {
            return Err(validation("initial jitter must be non-negative"));
        }
        Ok(())
    }
}

/// Post-warm-up output of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub divergent: Vec<bool>,
    pub accept_stat: Vec<f64>,
    pub tree_depth: Vec<usize>,
    pub leapfrog_steps: Vec<usize>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub warmup_divergences: usize,
}

impl ChainOutput {
    pub fn divergence_rate(&self) -> f64 {
        self.divergent.iter().filter(|d| **d).count() as f64 / self.divergent.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub chains: Vec<ChainOutput>,
    pub diagnostics: Vec<CoordinateDiagnostics>,
}

impl SampleOutput {
    pub fn divergence_rate(&self) -> f64 {
        let total: usize = self.chains.iter().map(|c| c.divergent.len()).sum();
        let div: usize = self.chains.iter().flat_map(|c| &c.divergent).filter(|d| **d).count();
        div as f64 / total.max(1) as f64
    }

    /// Draws of coordinate `j`, one vector per chain.
    pub fn coordinate(&self, j: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.draws.iter().map(|d| d[j]).collect()).collect()
    }

    pub fn max_rhat(&self) -> Option<f64> {
        self.diagnostics.iter().filter_map(|d| d.rhat).reduce(f64::max)
    }
}

/// Too many divergent post-warm-up transitions. Carries the full output so
/// diagnostics can still be written.
#[derive(Debug, Clone)]
pub struct SamplerFailure {
    pub message: String,
    pub output: Box<SampleOutput>,
}

impl std::fmt::Display for SamplerFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for SamplerFailure {}

#[derive(Debug)]
pub enum SampleError {
    Config(crate::Error),
    Failure(SamplerFailure),
}

impl std::fmt::Display for SampleError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleError::Config(e) => write!(f, "{e}"),
            SampleError::Failure(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SampleError {}

/// Chain `c` draws from a ChaCha stream keyed by `(seed, c)`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Runs all chains (in parallel when configured) and computes diagnostics.
pub fn sample<T: LogDensity>(target: &T, config: &SamplerConfig) -> std::result::Result<SampleOutput, SampleError> {
    config.validate().map_err(SampleError::Config)?;
    let chains = map_range(config.chains, config.execution, |c| run_chain(target, config, c));
    let chains = chains.into_iter().collect::<Result<Vec<_>>>().map_err(SampleError::Config)?;
    let draws: Vec<Vec<Vec<f64>>> = chains.iter().map(|c| c.draws.clone()).collect();
    let output = SampleOutput {
        diagnostics: diagnostics::diagnostics(&draws),
        chains,
    };
    let rate = output.divergence_rate();
    if rate > config.max_divergence_rate {
        let per_chain: Vec<String> = output
            .chains
            .iter()
            .enumerate()
            .map(|(i, c)| format!("chain {}: {:.1}% divergent, step size {:.3e}", i + 1, 100.0 * c.divergence_rate(), c.step_size))
            .collect();
        return Err(SampleError::Failure(SamplerFailure {
            message: format!(
                "{:.1}% of post-warm-up transitions diverged (limit {:.1}%); {}",
                100.0 * rate,
                100.0 * config.max_divergence_rate,
                per_chain.join("; ")
            ),
            output: Box::new(output),
        }));
    }
    Ok(output)
}

const MAX_INIT_ATTEMPTS: usize = 100;

/// Runs warm-up and sampling for a single chain.
pub fn run_chain<T: LogDensity + ?Sized>(target: &T, config: &SamplerConfig, chain: usize) -> Result<ChainOutput> {
    let mut rng = chain_rng(config.seed, chain);
    let dim = target.dim();

    let mut current = None;
    for _ in 0..MAX_INIT_ATTEMPTS {
        let q = target.initial_point(&mut rng, config.initial_jitter);
        let z = nuts::PhasePoint::new(target, q);
        if z.logp.is_finite() && z.grad.iter().all(|g| g.is_finite()) {
            current = Some(z);
            break;
        }
    }
    let mut current = current.ok_or_else(|| {
        validation(format!(
            "chain {}: no finite initial point after {MAX_INIT_ATTEMPTS} attempts",
            chain + 1
        ))
    })?;

    let mut sampler = nuts::Nuts::new(target, dim, config.max_tree_depth);
    sampler.init_step_size(&mut rng, &current);
    let mut step = adapt::DualAveraging::new(config.target_acceptance, sampler.step_size);
    let mut metric = adapt::MetricSchedule::new(config.warmup_iterations, dim);
    let mut warmup_divergences = 0;

    for _ in 0..config.warmup_iterations {
        let (next, stats) = sampler.transition(&mut rng, &current);
        current = next;
        warmup_divergences += usize::from(stats.divergent);
        sampler.step_size = step.update(stats.accept_stat);
        if let Some(var) = metric.observe(&current.q) {
            sampler.inv_metric = var;
            sampler.init_step_size(&mut rng, &current);
            step.restart(sampler.step_size);
        }
    }
    sampler.step_size = step.final_step();

    let n = config.sampling_iterations;
    let mut out = ChainOutput {
        draws: Vec::with_capacity(n),
        log_density: Vec::with_capacity(n),
        divergent: Vec::with_capacity(n),
        accept_stat: Vec::with_capacity(n),
        tree_depth: Vec::with_capacity(n),
        leapfrog_steps: Vec::with_capacity(n),
        step_size: sampler.step_size,
        inv_metric: sampler.inv_metric.clone(),
        warmup_divergences,
    };
    for _ in 0..n {
        let (next, stats) = sampler.transition(&mut rng, &current);
        current = next;
        out.draws.push(current.q.clone());
        out.log_density.push(current.logp);
        out.divergent.push(stats.divergent);
        out.accept_stat.push(stats.accept_stat);
        out.tree_depth.push(stats.tree_depth);
        out.leapfrog_steps.push(stats.leapfrog_steps);
    }
    Ok(out)
}

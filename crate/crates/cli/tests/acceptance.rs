//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion fails that is not listed in `KNOWN_FAILURES`.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use epidiff_cli::config::RunConfig;
use epidiff_cli::fit::run_fit;
use epidiff_cli::simulate::{simulate, write_simulation, GenerativeConfig, Simulation};
use epidiff_core::epi::{AgeStructure, ContactMatrix, ModelKind, RateParams, SquareMatrix};
use epidiff_core::exec::Execution;
use epidiff_core::latent::LatentPath;
use epidiff_core::observation::{sample_negbin, DelayDistribution};
use epidiff_core::ode::{integrate, integrate_with_substeps, CompartmentState, EpidemicTrajectory};
use epidiff_core::outputs::{credible_interval, effective_reproduction_number, summarize};
use epidiff_core::posterior::{FitData, Model, ModelConfig};
use epidiff_core::sampler::{sample, LogDensity, SamplerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Criteria that fail for a documented reason; see the README.
const KNOWN_FAILURES: [usize; 2] = [3, 9];

const RECOVERY_CONFIG: &str = "configs/recovery.toml";
const RECOVERY_WARMUP: usize = 1500;
const RECOVERY_TREE_DEPTH: usize = 12;
const RECOVERY_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn repo_root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR")).parent().and_then(Path::parent).expect("workspace root")
}

fn delay_fidelity() -> Outcome {
    let h = DelayDistribution::new(6.29, 0.26, 60).unwrap();
    let (mean, cv) = (h.mean(), h.coefficient_of_variation());
    outcome(
        (mean - 24.2).abs() < 0.5 && (cv - 0.399).abs() < 0.01,
        format!("mean {mean:.3} days (target 24.2 +/- 0.5), CV {cv:.4} (target 0.399 +/- 0.01)"),
    )
}

fn negbin_moments() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 1_000_000;
    let (d, phi) = (5.0, 2.0);
    let x: Vec<f64> = (0..n).map(|_| sample_negbin(&mut rng, d, phi) as f64).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    outcome(
        (mean / 5.0 - 1.0).abs() < 0.01 && (var / 15.0 - 1.0).abs() < 0.02,
        format!("mean {mean:.4} (5 +/- 1%), variance {var:.4} (15 +/- 2%)"),
    )
}

/// One group of 56 million, unit contact rate, constant transmissibility.
fn single_group(r0: f64) -> (AgeStructure, ContactMatrix, LatentPath, RateParams, CompartmentState) {
    let ages = AgeStructure::new(vec!["all".into()], vec![5.6e7]).unwrap();
    let contact = ContactMatrix::from_entries(SquareMatrix::from_rows(&[vec![1.0]]).unwrap()).unwrap();
    let path = LatentPath::constant(vec![(r0 / 4.0f64).ln()], 30).unwrap();
    let initial = CompartmentState::seeded(&ages, &[1e-5]).unwrap();
    (ages, contact, path, RateParams::from_periods(3.0, 4.0).unwrap(), initial)
}

/// Classical RK4 on the one-group system with `per_day` steps per day.
fn rk4_single(beta: f64, rates: RateParams, y0: &[f64], days: usize, per_day: usize) -> Vec<Vec<f64>> {
    let (tau, gamma) = (rates.tau, rates.gamma);
    let rhs = |y: &[f64]| {
        let lambda = beta * (y[3] + y[4]);
        [
            -lambda * y[0],
            lambda * y[0] - tau * y[1],
            tau * (y[1] - y[2]),
            tau * y[2] - gamma * y[3],
            gamma * (y[3] - y[4]),
            gamma * y[4],
        ]
    };
    let h = 1.0 / per_day as f64;
    let mut y = y0.to_vec();
    let mut out = vec![y.clone()];
    let step = |y: &[f64], k: &[f64; 6], c: f64| -> Vec<f64> { y.iter().zip(k).map(|(v, k)| v + c * k).collect() };
    for _ in 0..days {
        for _ in 0..per_day {
            let k1 = rhs(&y);
            let k2 = rhs(&step(&y, &k1, h / 2.0));
            let k3 = rhs(&step(&y, &k2, h / 2.0));
            let k4 = rhs(&step(&y, &k3, h));
            for i in 0..6 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(y.clone());
    }
    out
}

fn ode_error(r0: f64, substeps: usize) -> (f64, f64) {
    let (ages, contact, path, rates, initial) = single_group(r0);
    let traj: EpidemicTrajectory =
        integrate_with_substeps(&initial, rates, &path, &contact, ModelKind::Sbm, &ages, 210, substeps).unwrap();
    let reference = rk4_single(r0 / 4.0, rates, initial.values(), 210, 100);
    let err = traj
        .states
        .iter()
        .zip(&reference)
        .flat_map(|(s, r)| s.values().iter().zip(r).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let drift = traj.states.iter().map(|s| (s.total() - 1.0).abs()).fold(0.0, f64::max);
    (err, drift)
}

fn ode_oracle() -> Outcome {
    let (daily, drift) = ode_error(1.5, 1);
    let (fine, _) = ode_error(1.5, 16);
    let (mild, _) = ode_error(1.2, 1);
    outcome(
        daily < 1e-4 && drift < 1e-8,
        format!(
            "R0 1.5 over 210 days: max state error {daily:.2e} with daily steps (limit 1e-4), mass drift {drift:.1e}; \
             {fine:.2e} with 16 substeps per day; {mild:.2e} with daily steps at R0 1.2"
        ),
    )
}

fn toy_model() -> Model {
    let sim = simulate(&common::toy_generative(ModelKind::Mbm, 3)).unwrap();
    let config = ModelConfig {
        kind: ModelKind::Mbm,
        ..ModelConfig::default()
    };
    Model::new(config, sim.bundle.fit_data().unwrap()).unwrap()
}

fn gradient() -> Outcome {
    let model = toy_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let theta = model.initial_point(&mut rng, 0.5);
        let mut grad = vec![0.0; model.dim()];
        model.log_posterior_and_grad(&theta, &mut grad).unwrap();
        for (j, g) in grad.iter().enumerate() {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (model.log_posterior(&up).unwrap() - model.log_posterior(&down).unwrap()) / (2.0 * h);
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1.0));
        }
    }
    outcome(
        worst < 1e-5,
        format!("{} coordinates at 20 points, worst relative error {worst:.2e} (limit 1e-5)", model.dim()),
    )
}

struct Gaussian {
    dim: usize,
    rho: f64,
}

impl LogDensity for Gaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_and_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        if self.rho == 0.0 {
            g.iter_mut().zip(x).for_each(|(g, x)| *g = -x);
            return -0.5 * x.iter().map(|v| v * v).sum::<f64>();
        }
        let k = 1.0 / (1.0 - self.rho * self.rho);
        g[0] = -k * (x[0] - self.rho * x[1]);
        g[1] = -k * (x[1] - self.rho * x[0]);
        -0.5 * k * (x[0] * x[0] - 2.0 * self.rho * x[0] * x[1] + x[1] * x[1])
    }
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn sampler_calibration() -> Outcome {
    let config = |n, seed| SamplerConfig {
        chains: 4,
        sampling_iterations: n,
        seed,
        ..SamplerConfig::default()
    };
    let normal = sample(&Gaussian { dim: 20, rho: 0.0 }, &config(5000, 2024)).unwrap();
    let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
    for j in 0..20 {
        let (m, v) = moments(&normal.coordinate(j).concat());
        worst_mean = worst_mean.max(m.abs());
        worst_var = worst_var.max((v - 1.0).abs());
    }
    let rhat_normal = normal.max_rhat().unwrap();

    let corr = sample(&Gaussian { dim: 2, rho: 0.9 }, &config(2500, 7)).unwrap();
    let x = corr.coordinate(0).concat();
    let y = corr.coordinate(1).concat();
    let ((mx, vx), (my, vy)) = (moments(&x), moments(&y));
    let rho = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() as f64 - 1.0) / (vx * vy).sqrt();
    let rhat_corr = corr.max_rhat().unwrap();
    let divergences = normal.divergence_rate().max(corr.divergence_rate());
    outcome(
        worst_mean < 0.05
            && worst_var < 0.05
            && (rho - 0.9).abs() < 0.02
            && mx.abs().max(my.abs()) < 0.05
            && (vx - 1.0).abs().max((vy - 1.0).abs()) < 0.05
            && rhat_normal.max(rhat_corr) < 1.01
            && divergences < 0.01,
        format!(
            "20-D normal (4 x 5000): worst |mean| {worst_mean:.3}, worst |var - 1| {worst_var:.3}, R-hat {rhat_normal:.4}; \
             rho 0.9 (4 x 2500): correlation {rho:.4}, R-hat {rhat_corr:.4}; divergences {:.2}%",
            100.0 * divergences
        ),
    )
}

/// Criteria 6 and 9 from one simulated data set and one fit. Data and
/// results stay under the cargo target directory for inspection.
fn recovery() -> (Outcome, Outcome) {
    let gen = GenerativeConfig::load(&repo_root().join(RECOVERY_CONFIG)).unwrap();
    let sim: Simulation = simulate(&gen).unwrap();
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("recovery");
    let run_path = write_simulation(&sim, ModelKind::Mbm, &dir).unwrap();
    let mut run = RunConfig::load(&run_path).unwrap();
    run.sampler = SamplerConfig {
        chains: 2,
        warmup_iterations: RECOVERY_WARMUP,
        sampling_iterations: 1000,
        max_tree_depth: RECOVERY_TREE_DEPTH,
        seed: RECOVERY_SEED,
        ..SamplerConfig::default()
    };
    let report = run_fit(&run).unwrap();
    let fit = &report.fit;
    let truth = &sim.truth;

    let paths = truth.derived.betas.len();
    let weeks = gen.weeks;
    let mut covered = 0;
    for p in 0..paths {
        for k in 0..weeks {
            let draws: Vec<f64> = fit.derived.iter().map(|d| d.betas[p][k]).collect();
            let (lo, hi) = credible_interval(&draws, 0.9).unwrap();
            covered += usize::from((lo..=hi).contains(&truth.derived.betas[p][k]));
        }
    }
    let cells = paths * weeks;
    let params: Vec<_> = fit.draws.iter().map(|t| fit.model.constrain(t).unwrap().0).collect();
    let covers90 = |draws: Vec<f64>, x: f64| {
        let (lo, hi) = credible_interval(&draws, 0.9).unwrap();
        (lo..=hi).contains(&x)
    };
    let phi_ok = covers90(params.iter().map(|p| p.phi).collect(), truth.parameters.phi);
    let sigma_ok = (0..paths)
        .filter(|&p| {
            covers90(
                params.iter().map(|x| x.path.volatilities()[p]).collect(),
                truth.parameters.path.volatilities()[p],
            )
        })
        .count();
    let total = |rows: &[Vec<f64>]| rows.last().unwrap().iter().sum::<f64>();
    let cumulative: Vec<f64> = fit.derived.iter().map(|d| total(&d.cumulative_infections)).collect();
    let true_cumulative = total(&truth.derived.cumulative_infections);
    let cum = summarize(&cumulative).unwrap();
    let cum_ok = cum.covers95(true_cumulative);
    let secs = report.manifest.wall_time_seconds;
    let c6 = outcome(
        covered * 10 >= cells * 8 && phi_ok && sigma_ok >= 2 && cum_ok && secs < 3600.0,
        format!(
            "beta 90% CrI coverage {covered}/{cells} ({:.1}%, need 80%); phi covered {phi_ok}; sigma covered {sigma_ok}/3; \
             cumulative infections {true_cumulative:.0} in 95% CrI [{:.0}, {:.0}]: {cum_ok}; \
             fit {secs:.0} s, divergences {:.2}%, max R-hat {:.3}",
            100.0 * covered as f64 / cells as f64,
            cum.lower95,
            cum.upper95,
            100.0 * report.manifest.divergence_rate,
            report.manifest.max_rhat.unwrap_or(f64::NAN),
        ),
    );

    let ratios = fit.reporting_ratios().unwrap().expect("simulated cases");
    let pooled = paths;
    let medians: Vec<f64> = (0..weeks)
        .map(|k| {
            let draws: Vec<f64> = ratios.iter().filter_map(|r| r[k][pooled]).collect();
            summarize(&draws).map_or(f64::NAN, |s| s.median)
        })
        .collect();
    let inside = medians.iter().filter(|m| **m > 0.3 && **m < 0.5).count();
    let outside: Vec<String> = medians
        .iter()
        .enumerate()
        .filter(|(_, m)| !(**m > 0.3 && **m < 0.5))
        .map(|(k, m)| format!("{}:{m:.2}", k + 1))
        .collect();
    let c9 = outcome(
        inside * 10 >= weeks * 8,
        format!(
            "pooled weekly reporting ratio median in (0.3, 0.5) for {inside}/{weeks} weeks (need 80%); range [{:.3}, {:.3}]; \
             outside (week:median) {}",
            medians.iter().copied().fold(f64::INFINITY, f64::min),
            medians.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            outside.join(" ")
        ),
    );
    (c6, c9)
}

fn nesting() -> Outcome {
    let sim = simulate(&common::three_group_generative(ModelKind::Mbm, 6, 9)).unwrap();
    let data: FitData = sim.bundle.fit_data().unwrap();
    let mbm = Model::new(ModelConfig { kind: ModelKind::Mbm, ..ModelConfig::default() }, data.clone()).unwrap();
    let sbm = Model::new(ModelConfig { kind: ModelKind::Sbm, ..ModelConfig::default() }, data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let shared = sbm.initial_point(&mut rng, 0.3);
        let (params, _) = sbm.constrain(&shared).unwrap();
        let path = &params.path;
        let mut nested = params.clone();
        nested.path = LatentPath::new(vec![path.x0()[0]; 3], vec![path.innovations()[0].clone(); 3], vec![path.volatilities()[0]; 3])
            .unwrap();
        let theta = mbm.unconstrain(&nested).unwrap();
        let a = mbm.evaluate(&theta).unwrap().log_likelihood;
        let b = sbm.evaluate(&shared).unwrap().log_likelihood;
        worst = worst.max((a - b).abs());
    }
    outcome(worst < 1e-10, format!("20 shared paths, worst |MBM - SBM| log likelihood {worst:.2e} (limit 1e-10)"))
}

fn r_eff_reduction() -> Outcome {
    let (ages, contact, path, rates, initial) = single_group(1.3);
    let traj = integrate(&initial, rates, &path, &contact, ModelKind::Sbm, &ages, 70).unwrap();
    let beta = 1.3 / 4.0;
    let weekly: Vec<SquareMatrix> = (0..10).map(|_| contact.entries().scale(beta)).collect();
    let r = effective_reproduction_number(&traj.states, &weekly, rates, &ages).unwrap();
    let one = (1..=70)
        .map(|t| (r[t - 1] - beta * 1.0 * rates.mean_infectious_period() * traj.states[t].susceptible(0) / 1.0).abs())
        .fold(0.0, f64::max);

    let ages = AgeStructure::new(vec!["a".into(), "b".into()], vec![3e6, 7e6]).unwrap();
    let raw = SquareMatrix::from_rows(&[vec![6.0, 2.0], vec![1.5, 4.0]]).unwrap();
    let contact = ContactMatrix::reciprocal(raw, &ages).unwrap();
    let path = LatentPath::new(vec![-2.6, -2.9], vec![vec![0.3, -0.2, 0.5], vec![-0.4, 0.1, 0.2]], vec![0.2, 0.3]).unwrap();
    let initial = CompartmentState::seeded(&ages, &[1e-4, 2e-4]).unwrap();
    let traj = integrate(&initial, rates, &path, &contact, ModelKind::Mbm, &ages, 21).unwrap();
    let betas = path.betas();
    let weekly: Vec<SquareMatrix> = (1..=3)
        .map(|k| {
            let c = contact.entries();
            SquareMatrix::from_rows(&[
                vec![betas[0][k] * c[(0, 0)], betas[0][k] * c[(0, 1)]],
                vec![betas[1][k] * c[(1, 0)], betas[1][k] * c[(1, 1)]],
            ])
            .unwrap()
        })
        .collect();
    let r = effective_reproduction_number(&traj.states, &weekly, rates, &ages).unwrap();
    let f = ages.fractions();
    let d = rates.mean_infectious_period();
    let two = (1..=21)
        .map(|t| {
            let m = &weekly[(t - 1) / 7];
            let s = &traj.states[t];
            let k = |a: usize, b: usize| d * m[(a, b)] * s.susceptible(a) / f[b];
            let (p, q, u, v) = (k(0, 0), k(0, 1), k(1, 0), k(1, 1));
            let tr = p + v;
            let disc = ((p - v).powi(2) + 4.0 * q * u).sqrt();
            (r[t - 1] - (tr + disc) / 2.0).abs()
        })
        .fold(0.0, f64::max);
    outcome(
        one < 1e-10 && two < 1e-10,
        format!("one group vs beta C d_I S / f: {one:.1e}; two groups vs closed-form eigenvalue: {two:.1e} (limit 1e-10)"),
    )
}

fn determinism() -> Outcome {
    let sim = simulate(&common::toy_generative(ModelKind::Mbm, 17)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run_path = write_simulation(&sim, ModelKind::Mbm, dir.path()).unwrap();
    let mut run = RunConfig::load(&run_path).unwrap();
    run.sampler.chains = 2;
    run.sampler.warmup_iterations = 500;
    run.sampler.sampling_iterations = 500;
    let files: Vec<Vec<u8>> = [("first", Execution::Parallel), ("second", Execution::Parallel), ("sequential", Execution::Sequential)]
        .iter()
        .map(|(name, exec)| {
            run.output.dir = dir.path().join(name);
            run.sampler.execution = *exec;
            run_fit(&run).unwrap();
            std::fs::read(run.output.dir.join("draws.csv")).unwrap()
        })
        .collect();
    outcome(
        files[0] == files[1] && files[0] == files[2],
        format!(
            "two runs with seed {}: identical draws file {} ({} bytes); sequential execution identical {}",
            run.sampler.seed,
            files[0] == files[1],
            files[0].len(),
            files[0] == files[2]
        ),
    )
}

fn print(n: usize, result: &Outcome, elapsed: Duration) {
    let verdict = if result.pass { "PASS" } else { "FAIL" };
    let note = if !result.pass && KNOWN_FAILURES.contains(&n) { " (known)" } else { "" };
    println!("criterion {n:>2}: {verdict}{note} [{:.1} s] {}", elapsed.as_secs_f64(), result.detail);
}

fn main() {
    let mut unexpected = Vec::new();
    let mut check = |n: usize, result: Outcome, elapsed: Duration| {
        print(n, &result, elapsed);
        if !result.pass && !KNOWN_FAILURES.contains(&n) {
            unexpected.push(n);
        }
    };
    let timed = |f: fn() -> Outcome| {
        let t = Instant::now();
        let r = f();
        (r, t.elapsed())
    };
    for (n, f) in [(1, delay_fidelity as fn() -> Outcome), (2, negbin_moments), (3, ode_oracle), (4, gradient), (5, sampler_calibration)] {
        let (r, e) = timed(f);
        check(n, r, e);
    }
    let t = Instant::now();
    let (c6, c9) = recovery();
    let recovery_time = t.elapsed();
    check(6, c6, recovery_time);
    for (n, f) in [(7, nesting as fn() -> Outcome), (8, r_eff_reduction)] {
        let (r, e) = timed(f);
        check(n, r, e);
    }
    check(9, c9, recovery_time);
    let (r, e) = timed(determinism);
    check(10, r, e);
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

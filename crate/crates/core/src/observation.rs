//! Infection-to-death delay, expected deaths and the over-dispersed count
//! likelihood.

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaSampler, Poisson};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::epi::AgeStructure;
use crate::error::{structure, validation, Result};

pub const DEFAULT_DELAY_SHAPE: f64 = 6.29;
pub const DEFAULT_DELAY_RATE: f64 = 0.26;
pub const DEFAULT_DELAY_TRUNCATION: usize = 60;

/// Below this count the log-gamma ratio is summed term by term, which is
/// exact for integer counts and keeps the Poisson limit accurate.
const DIRECT_SUM_LIMIT: u64 = 32;

/// Daily probabilities of death `h_1..h_L` after infection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayDistribution {
    pub shape: f64,
    pub rate: f64,
    /// `pmf[s - 1] = h_s`.
    pub pmf: Vec<f64>,
}

impl DelayDistribution {
    pub fn new(shape: f64, rate: f64, truncation: usize) -> Result<Self> {
        Ok(Self {
            shape,
            rate,
            pmf: discretize_delay(shape, rate, truncation)?,
        })
    }

    pub fn truncation(&self) -> usize {
        self.pmf.len()
    }

    /// `h_s` for `s >= 1`; zero beyond the truncation.
    pub fn h(&self, s: usize) -> f64 {
        if s == 0 {
            0.0
        } else {
            self.pmf.get(s - 1).copied().unwrap_or(0.0)
        }
    }

    pub fn mass(&self) -> f64 {
        self.pmf.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        let (m0, m1, _) = self.moments();
        m1 / m0
    }

    pub fn coefficient_of_variation(&self) -> f64 {
        let (m0, m1, m2) = self.moments();
        let mean = m1 / m0;
        (m2 / m0 - mean * mean).sqrt() / mean
    }

    fn moments(&self) -> (f64, f64, f64) {
        self.pmf.iter().enumerate().fold((0.0, 0.0, 0.0), |(a, b, c), (i, h)| {
            let s = (i + 1) as f64;
            (a + h, b + s * h, c + s * s * h)
        })
    }
}

impl Default for DelayDistribution {
    fn default() -> Self {
        Self::new(DEFAULT_DELAY_SHAPE, DEFAULT_DELAY_RATE, DEFAULT_DELAY_TRUNCATION)
            .expect("default delay parameters are valid")
    }
}

/// Midpoint discretization of a Gamma(shape, rate) delay:
/// `h_1 = F(1.5)`, `h_s = F(s + 0.5) - F(s - 0.5)`. Not renormalized.
pub fn discretize_delay(shape: f64, rate: f64, truncation: usize) -> Result<Vec<f64>> {
    if truncation == 0 {
        return Err(validation("delay truncation must be at least one day"));
    }
    let gamma = Gamma::new(shape, rate)
        .map_err(|e| validation(format!("invalid delay gamma({shape}, {rate}): {e}")))?;
    let mut pmf = Vec::with_capacity(truncation);
    let mut prev = 0.0;
    for s in 1..=truncation {
        let upper = gamma.cdf(s as f64 + 0.5);
        pmf.push((upper - prev).max(0.0));
        prev = upper;
    }
    Ok(pmf)
}

/// Expected deaths `d[t][a] = IFR_a N sum_{s=1}^{t-1} h_{t-s} Delta[s][a]`
/// where `Delta` holds daily new infections as proportions of `N`.
pub fn expected_deaths(
    new_infections: &[Vec<f64>],
    ages: &AgeStructure,
    ifr: &[f64],
    delay: &DelayDistribution,
) -> Result<Vec<Vec<f64>>> {
    let groups = ages.groups();
    if ifr.len() != groups {
        return Err(structure(format!("{} IFR values for {groups} groups", ifr.len())));
    }
    if let Some(v) = ifr.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(validation(format!("IFR must lie in (0, 1), got {v}")));
    }
    if new_infections.iter().any(|row| row.len() != groups) {
        return Err(structure("new-infection rows must have one entry per group"));
    }
    if new_infections.iter().flatten().any(|v| !(*v >= 0.0)) {
        return Err(validation("new infections must be non-negative"));
    }
    let horizon = new_infections.len();
    let flat: Vec<f64> = new_infections.iter().flatten().copied().collect();
    let scale: Vec<f64> = ifr.iter().map(|r| r * ages.total()).collect();
    let mut out = vec![0.0; horizon * groups];
    convolve_deaths(&flat, horizon, &scale, &delay.pmf, &mut out);
    Ok(out.chunks(groups).map(<[f64]>::to_vec).collect())
}

/// Flat `T x A` convolution; `scale[a] = IFR_a * N`.
pub(crate) fn convolve_deaths(infections: &[f64], horizon: usize, scale: &[f64], pmf: &[f64], out: &mut [f64]) {
    let groups = scale.len();
    for t in 1..=horizon {
        for a in 0..groups {
            let mut acc = 0.0;
            let first = t.saturating_sub(pmf.len()).max(1);
            for s in first..t {
                acc += pmf[t - s - 1] * infections[(s - 1) * groups + a];
            }
            out[(t - 1) * groups + a] = scale[a] * acc;
        }
    }
}

/// Transpose of [`convolve_deaths`]: maps gradients with respect to
/// expected deaths onto gradients with respect to daily infections.
pub(crate) fn convolve_deaths_adjoint(deaths_bar: &[f64], horizon: usize, scale: &[f64], pmf: &[f64], out: &mut [f64]) {
    let groups = scale.len();
    for s in 1..=horizon {
        for a in 0..groups {
            let mut acc = 0.0;
            let last = (s + pmf.len()).min(horizon);
            for t in s + 1..=last {
                acc += pmf[t - s - 1] * deaths_bar[(t - 1) * groups + a];
            }
            out[(s - 1) * groups + a] = scale[a] * acc;
        }
    }
}

/// Log pmf of a negative binomial with mean `d` and variance `d (1 + phi)`
/// (size `d / phi`, success probability `1 / (1 + phi)`).
pub fn negbin_logpmf(y: u64, d: f64, phi: f64) -> f64 {
    negbin_logpmf_with_grad(y, d, phi).0
}

/// Log pmf plus its partial derivatives with respect to `d` and `phi`.
pub fn negbin_logpmf_with_grad(y: u64, d: f64, phi: f64) -> (f64, f64, f64) {
    if d == 0.0 {
        if y == 0 {
            // the pmf is identically 1 in d = 0; one-sided slope in d
            let slope = -phi.ln_1p() / phi;
            return (0.0, slope, 0.0);
        }
        return (f64::NEG_INFINITY, f64::INFINITY, 0.0);
    }
    let r = d / phi;
    let log1p_phi = phi.ln_1p();
    let yf = y as f64;
    let (ratio, ratio_dr) = if y <= DIRECT_SUM_LIMIT {
        (0..y).fold((0.0, 0.0), |(lg, dg), i| {
            let v = r + i as f64;
            (lg + v.ln(), dg + 1.0 / v)
        })
    } else {
        (ln_gamma(yf + r) - ln_gamma(r), digamma(yf + r) - digamma(r))
    };
    let log_fact = if y <= DIRECT_SUM_LIMIT {
        (2..=y).map(|k| (k as f64).ln()).sum()
    } else {
        ln_gamma(yf + 1.0)
    };
    let lp = ratio - log_fact - r * log1p_phi + yf * (phi.ln() - log1p_phi);
    let dlp_dr = ratio_dr - log1p_phi;
    let dlp_dd = dlp_dr / phi;
    let dlp_dphi = -dlp_dr * d / (phi * phi) - r / (1.0 + phi) + yf / (phi * (1.0 + phi));
    (lp, dlp_dd, dlp_dphi)
}

/// Draws one count with mean `d` and variance `d (1 + phi)` through the
/// gamma-Poisson mixture.
pub fn sample_negbin<R: Rng + ?Sized>(rng: &mut R, d: f64, phi: f64) -> u64 {
    if d <= 0.0 {
        return 0;
    }
    let rate = GammaSampler::new(d / phi, phi)
        .expect("positive gamma parameters")
        .sample(rng);
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive Poisson rate").sample(rng) as u64
}

/// Sum of negative-binomial log pmfs over all observed cells; `None` cells
/// are missing and contribute nothing.
pub fn deaths_loglik(observed: &[Vec<Option<u64>>], expected: &[Vec<f64>], phi: f64) -> Result<f64> {
    if observed.len() != expected.len() || observed.iter().zip(expected).any(|(o, e)| o.len() != e.len()) {
        return Err(structure("observed and expected death tables differ in shape"));
    }
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(validation(format!("over-dispersion must be positive, got {phi}")));
    }
    Ok(observed
        .iter()
        .zip(expected)
        .flat_map(|(o, e)| o.iter().zip(e))
        .filter_map(|(y, d)| y.map(|y| negbin_logpmf(y, *d, phi)))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::Continuous;

    #[test]
    fn delay_matches_reported_moments() {
        let delay = DelayDistribution::default();
        assert!((delay.mean() - 24.2).abs() < 0.5, "mean {}", delay.mean());
        assert!((6.29f64 / 0.26 - 24.19).abs() < 0.01);
        assert!((1.0 / 6.29f64.sqrt() - 0.39).abs() < 0.01);
        assert!((delay.coefficient_of_variation() - 0.399).abs() < 0.01);
        assert!(delay.mass() <= 1.0 && delay.mass() >= 0.99);
        assert!(delay.pmf.iter().all(|h| *h >= 0.0));
    }

    /// Composite Simpson quadrature of the gamma density.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn delay_pmf_matches_quadrature() {
        let delay = DelayDistribution::default();
        let density = Gamma::new(6.29, 0.26).unwrap();
        let h5 = simpson(|x| density.pdf(x), 4.5, 5.5, 2000);
        assert!((delay.h(5) - h5).abs() < 1e-10, "{} vs {h5}", delay.h(5));
        let h1 = simpson(|x| density.pdf(x), 1e-12, 1.5, 20000);
        assert!((delay.h(1) - h1).abs() < 1e-10);
        assert_eq!(delay.h(0), 0.0);
        assert_eq!(delay.h(61), 0.0);
    }

    #[test]
    fn delay_tail_mass_below_one_percent() {
        let gamma = Gamma::new(6.29, 0.26).unwrap();
        assert!(1.0 - gamma.cdf(60.5) < 0.01);
        assert!(discretize_delay(6.29, 0.26, 0).is_err());
        assert!(discretize_delay(-1.0, 0.26, 5).is_err());
    }

    fn ages(pops: &[f64]) -> AgeStructure {
        AgeStructure::new((0..pops.len()).map(|i| format!("g{i}")).collect(), pops.to_vec()).unwrap()
    }

    #[test]
    fn zero_infections_give_zero_deaths() {
        let a = ages(&[100.0, 200.0]);
        let d = expected_deaths(&vec![vec![0.0; 2]; 20], &a, &[0.01, 0.1], &DelayDistribution::default()).unwrap();
        assert!(d.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn delta_pulse_reproduces_delay() {
        let a = ages(&[1000.0]);
        let delay = DelayDistribution::default();
        let mut inf = vec![vec![0.0]; 80];
        inf[4][0] = 1.0 / 1000.0; // one person on day 5
        let d = expected_deaths(&inf, &a, &[0.02], &delay).unwrap();
        for t in 1..=80 {
            let want = if t > 5 { 0.02 * delay.h(t - 5) } else { 0.0 };
            assert!((d[t - 1][0] - want).abs() < 1e-15, "day {t}");
        }
    }

    #[test]
    fn two_pulses_match_double_loop() {
        let a = ages(&[50.0, 150.0]);
        let delay = DelayDistribution::new(2.0, 0.5, 6).unwrap();
        let mut inf = vec![vec![0.0; 2]; 10];
        inf[1] = vec![0.01, 0.02];
        inf[5] = vec![0.03, 0.005];
        let ifr = [0.05, 0.2];
        let d = expected_deaths(&inf, &a, &ifr, &delay).unwrap();
        for t in 1..=10usize {
            for g in 0..2 {
                let mut want = 0.0;
                for s in 1..t {
                    let lag = t - s;
                    if lag <= 6 {
                        want += delay.pmf[lag - 1] * inf[s - 1][g];
                    }
                }
                want *= ifr[g] * 200.0;
                assert!((d[t - 1][g] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expected_deaths_validation() {
        let a = ages(&[50.0]);
        let delay = DelayDistribution::default();
        assert!(expected_deaths(&[vec![0.1]], &a, &[1.5], &delay).is_err());
        assert!(expected_deaths(&[vec![0.1]], &a, &[0.1, 0.2], &delay).is_err());
        assert!(expected_deaths(&[vec![-0.1]], &a, &[0.1], &delay).is_err());
    }

    #[test]
    fn convolution_adjoint_is_transpose() {
        let pmf = [0.1, 0.3, 0.2];
        let scale = [2.0, 5.0];
        let horizon = 7;
        let x: Vec<f64> = (0..14).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let w: Vec<f64> = (0..14).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut cx = vec![0.0; 14];
        convolve_deaths(&x, horizon, &scale, &pmf, &mut cx);
        let mut ctw = vec![0.0; 14];
        convolve_deaths_adjoint(&w, horizon, &scale, &pmf, &mut ctw);
        let lhs: f64 = cx.iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ctw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-13);
    }

    #[test]
    fn negbin_at_zero_closed_form() {
        for (d, phi) in [(0.3, 0.5), (5.0, 2.0), (120.0, 0.01)] {
            let want = -(d / phi) * (1.0f64 + phi).ln();
            assert!((negbin_logpmf(0, d, phi) - want).abs() < 1e-12);
        }
        assert_eq!(negbin_logpmf(0, 0.0, 1.0), 0.0);
        assert_eq!(negbin_logpmf(3, 0.0, 1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn negbin_poisson_limit() {
        let d: f64 = 3.0;
        for y in 0..=20u64 {
            let poisson = y as f64 * d.ln() - d - ln_gamma(y as f64 + 1.0);
            assert!((negbin_logpmf(y, d, 1e-8) - poisson).abs() < 1e-5, "y = {y}");
        }
    }

    #[test]
    fn negbin_sums_to_one_and_switches_branch_smoothly() {
        let (d, phi) = (40.0, 0.7);
        let total: f64 = (0..2000u64).map(|y| negbin_logpmf(y, d, phi).exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
        // term-by-term and log-gamma branches agree across the switch
        let a = negbin_logpmf(DIRECT_SUM_LIMIT, d, phi);
        let b = {
            let r = d / phi;
            let y = DIRECT_SUM_LIMIT as f64;
            ln_gamma(y + r) - ln_gamma(r) - ln_gamma(y + 1.0) - r * phi.ln_1p() + y * (phi.ln() - phi.ln_1p())
        };
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn negbin_gradient_matches_finite_differences() {
        let h = 1e-6;
        for &(y, d, phi) in &[(0u64, 2.0, 0.4), (7, 3.5, 1.2), (150, 90.0, 0.3), (33, 12.0, 2.5)] {
            let (_, gd, gp) = negbin_logpmf_with_grad(y, d, phi);
            let fd_d = (negbin_logpmf(y, d + h, phi) - negbin_logpmf(y, d - h, phi)) / (2.0 * h);
            let fd_p = (negbin_logpmf(y, d, phi + h) - negbin_logpmf(y, d, phi - h)) / (2.0 * h);
            assert!((gd - fd_d).abs() < 1e-6 * gd.abs().max(1.0), "d: {gd} vs {fd_d}");
            assert!((gp - fd_p).abs() < 1e-6 * gp.abs().max(1.0), "phi: {gp} vs {fd_p}");
        }
    }

    #[test]
    fn negbin_sampling_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let y = sample_negbin(&mut rng, 5.0, 2.0) as f64;
            s += y;
            s2 += y * y;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((mean - 5.0).abs() / 5.0 < 0.01, "mean {mean}");
        assert!((var - 15.0).abs() / 15.0 < 0.02, "var {var}");
    }

    #[test]
    fn loglik_reductions() {
        let one = deaths_loglik(&[vec![Some(4)]], &[vec![3.0]], 0.8).unwrap();
        assert_eq!(one, negbin_logpmf(4, 3.0, 0.8));
        let none = deaths_loglik(&[vec![None, None], vec![None, None]], &[vec![1.0, 2.0], vec![3.0, 4.0]], 1.0).unwrap();
        assert_eq!(none, 0.0);
        assert!(deaths_loglik(&[vec![Some(1)]], &[vec![1.0, 2.0]], 1.0).is_err());
        assert!(deaths_loglik(&[vec![Some(1)]], &[vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn loglik_matches_flat_loop_and_is_order_invariant() {
        let obs = vec![
            vec![Some(3), Some(0)],
            vec![None, Some(12)],
            vec![Some(7), Some(1)],
        ];
        let exp = vec![vec![2.5, 0.4], vec![1.0, 10.0], vec![6.1, 2.2]];
        let phi = 0.6;
        let got = deaths_loglik(&obs, &exp, phi).unwrap();
        let mut flat = 0.0;
        for i in 0..6 {
            let (t, a) = (i / 2, i % 2);
            if let Some(y) = obs[t][a] {
                let r = exp[t][a] / phi;
                let p = 1.0 / (1.0 + phi);
                flat += ln_gamma(y as f64 + r) - ln_gamma(r) - ln_gamma(y as f64 + 1.0)
                    + r * p.ln()
                    + y as f64 * (1.0 - p).ln();
            }
        }
        assert!((got - flat).abs() < 1e-12);
        let swapped = deaths_loglik(
            &[obs[2].clone(), obs[0].clone(), obs[1].clone()],
            &[exp[2].clone(), exp[0].clone(), exp[1].clone()],
            phi,
        )
        .unwrap();
        assert!((got - swapped).abs() < 1e-12);
    }
}

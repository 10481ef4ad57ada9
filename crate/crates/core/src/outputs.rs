//! Posterior summaries of derived epidemiological quantities.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::epi::{AgeStructure, RateParams, SquareMatrix};
use crate::error::{structure, validation, Result};
use crate::exec::{map_slice, Execution};
use crate::latent::DAYS_PER_WEEK;
use crate::ode::{CompartmentState, COMPARTMENTS};
use crate::posterior::Model;
use crate::sampler::diagnostics::sorted_quantile;

pub const SUMMARY_QUANTILES: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];
pub const MIN_SUMMARY_DRAWS: usize = 100;

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &SquareMatrix) -> f64 {
    let n = m.dim();
    if n == 0 {
        return 0.0;
    }
    let dm = DMatrix::from_row_slice(n, n, m.as_slice());
    dm.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Median with 50% and 95% equal-tailed credible intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub lower95: f64,
    pub lower50: f64,
    pub median: f64,
    pub upper50: f64,
    pub upper95: f64,
}

impl PosteriorSummary {
    pub fn values(&self) -> [f64; 5] {
        [self.lower95, self.lower50, self.median, self.upper50, self.upper95]
    }

    pub fn covers95(&self, x: f64) -> bool {
        self.lower95 <= x && x <= self.upper95
    }
}

/// Linear-interpolation quantiles of at least [`MIN_SUMMARY_DRAWS`] draws.
pub fn summarize(draws: &[f64]) -> Result<PosteriorSummary> {
    if draws.len() < MIN_SUMMARY_DRAWS {
        return Err(validation(format!(
            "{} draws supplied; summaries need at least {MIN_SUMMARY_DRAWS}",
            draws.len()
        )));
    }
    if draws.iter().any(|v| v.is_nan()) {
        return Err(validation("cannot summarize NaN draws"));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = SUMMARY_QUANTILES.map(|p| sorted_quantile(&sorted, p));
    Ok(PosteriorSummary {
        lower95: q[0],
        lower50: q[1],
        median: q[2],
        upper50: q[3],
        upper95: q[4],
    })
}

/// Equal-tailed interval at the given mass, same quantile convention.
pub fn credible_interval(draws: &[f64], mass: f64) -> Result<(f64, f64)> {
    if draws.is_empty() || !(mass > 0.0 && mass < 1.0) {
        return Err(validation("credible interval needs draws and a mass in (0, 1)"));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - mass);
    Ok((sorted_quantile(&sorted, tail), sorted_quantile(&sorted, 1.0 - tail)))
}

/// Summaries of a series: `draws[draw][t]` to one summary per `t`.
pub fn summarize_series(draws: &[Vec<f64>]) -> Result<Vec<PosteriorSummary>> {
    let len = draws.first().map_or(0, Vec::len);
    if draws.iter().any(|d| d.len() != len) {
        return Err(structure("draws of a series must share one length"));
    }
    (0..len)
        .map(|t| summarize(&draws.iter().map(|d| d[t]).collect::<Vec<_>>()))
        .collect()
}

/// `K_ab = d_I m_ab S_a / f_b`, with `S` as a share of the total population.
pub fn next_generation_matrix(rate_matrix: &SquareMatrix, susceptible: &[f64], fractions: &[f64], infectious_period: f64) -> SquareMatrix {
    let n = rate_matrix.dim();
    let mut k = SquareMatrix::zeros(n);
    let out = k.as_mut_slice();
    for a in 0..n {
        for b in 0..n {
            out[a * n + b] = infectious_period * rate_matrix[(a, b)] * susceptible[a] / fractions[b];
        }
    }
    k
}

fn r_eff_from_flat(
    states: &[f64],
    weekly_rates: &[SquareMatrix],
    infectious_period: f64,
    fractions: &[f64],
) -> Vec<f64> {
    let groups = fractions.len();
    let width = COMPARTMENTS * groups;
    let days = states.len() / width - 1;
    let mut s = vec![0.0; groups];
    (1..=days)
        .map(|t| {
            let state = &states[t * width..(t + 1) * width];
            for (a, v) in s.iter_mut().enumerate() {
                *v = state[a * COMPARTMENTS];
            }
            let m = &weekly_rates[t.div_ceil(DAYS_PER_WEEK) - 1];
            spectral_radius(&next_generation_matrix(m, &s, fractions, infectious_period))
        })
        .collect()
}

/// Daily `R_eff(t)` for `t = 1..=T`, using the end-of-day susceptibles and
/// the rate matrix of the week containing day `t`.
pub fn effective_reproduction_number(
    states: &[CompartmentState],
    weekly_rates: &[SquareMatrix],
    rates: RateParams,
    ages: &AgeStructure,
) -> Result<Vec<f64>> {
    if states.len() < 2 {
        return Err(validation("trajectory needs at least one day"));
    }
    let days = states.len() - 1;
    if weekly_rates.len() < days.div_ceil(DAYS_PER_WEEK) {
        return Err(structure(format!(
            "{} weekly rate matrices do not cover {days} days",
            weekly_rates.len()
        )));
    }
    let groups = ages.groups();
    if states.iter().any(|s| s.groups() != groups) || weekly_rates.iter().any(|m| m.dim() != groups) {
        return Err(structure("trajectory or rate matrices do not match the age groups"));
    }
    let flat: Vec<f64> = states.iter().flat_map(|s| s.values().iter().copied()).collect();
    Ok(r_eff_from_flat(&flat, weekly_rates, rates.mean_infectious_period(), ages.fractions()))
}

/// Weekly reported-to-estimated infection ratio for one window and group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportingRatio {
    /// `None` when the window has no estimated infections or a missing
    /// case count.
    pub ratio: Option<f64>,
    /// More cases reported than estimated infections.
    pub exceeds_one: bool,
}

impl ReportingRatio {
    fn new(cases: Option<f64>, infections: f64) -> Self {
        let ratio = match cases {
            Some(c) if infections > 0.0 => Some(c / infections),
            _ => None,
        };
        Self {
            ratio,
            exceeds_one: ratio.is_some_and(|r| r > 1.0),
        }
    }
}

fn weekly_sums(daily: &[Vec<Option<f64>>], groups: usize) -> Result<Vec<Vec<Option<f64>>>> {
    if daily.len() % DAYS_PER_WEEK != 0 {
        return Err(validation(format!(
            "{} days is not a whole number of weeks",
            daily.len()
        )));
    }
    if daily.iter().any(|row| row.len() != groups) {
        return Err(structure("every day needs one value per group"));
    }
    Ok(daily
        .chunks(DAYS_PER_WEEK)
        .map(|week| {
            (0..groups)
                .map(|a| week.iter().map(|row| row[a]).sum::<Option<f64>>())
                .collect()
        })
        .collect())
}

/// `ratio[w][a]`, with one extra trailing column for all groups pooled.
/// `cases[t - 1][a]` are confirmed counts, `infections[t - 1][a]` estimated
/// new infections as counts.
pub fn reporting_ratio(cases: &[Vec<Option<u64>>], infections: &[Vec<f64>]) -> Result<Vec<Vec<ReportingRatio>>> {
    if cases.len() != infections.len() {
        return Err(structure(format!(
            "{} days of cases against {} days of infections",
            cases.len(),
            infections.len()
        )));
    }
    let groups = infections.first().map_or(0, Vec::len);
    let cases: Vec<Vec<Option<f64>>> = cases
        .iter()
        .map(|row| row.iter().map(|c| c.map(|v| v as f64)).collect())
        .collect();
    let infections: Vec<Vec<Option<f64>>> = infections.iter().map(|row| row.iter().map(|v| Some(*v)).collect()).collect();
    let weekly_cases = weekly_sums(&cases, groups)?;
    let weekly_inf = weekly_sums(&infections, groups)?;
    Ok(weekly_cases
        .iter()
        .zip(&weekly_inf)
        .map(|(c, i)| {
            let mut row: Vec<ReportingRatio> = (0..groups).map(|a| ReportingRatio::new(c[a], i[a].unwrap_or(0.0))).collect();
            let total_cases = c.iter().copied().sum::<Option<f64>>();
            let total_inf = i.iter().map(|v| v.unwrap_or(0.0)).sum();
            row.push(ReportingRatio::new(total_cases, total_inf));
            row
        })
        .collect())
}

/// Running sums over days: `out[t - 1][a]` infections up to and including
/// day `t`.
pub fn cumulative_infections(infections: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut running = vec![0.0; infections.first().map_or(0, Vec::len)];
    infections
        .iter()
        .map(|row| {
            for (r, v) in running.iter_mut().zip(row) {
                *r += v;
            }
            running.clone()
        })
        .collect()
}

/// External estimate of cumulative infections in one group at one day,
/// as counts with a 95% confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeroprevalenceEstimate {
    pub group: String,
    pub day: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeroprevalenceComparison {
    pub estimate: SeroprevalenceEstimate,
    pub model: PosteriorSummary,
    /// Model 95% credible interval intersects the external interval.
    pub overlaps: bool,
}

/// Compares per-draw cumulative infections (`draws[draw][t - 1][a]`,
/// counts) with external estimates.
pub fn seroprevalence_comparison(
    draws: &[Vec<Vec<f64>>],
    ages: &AgeStructure,
    estimates: &[SeroprevalenceEstimate],
) -> Result<Vec<SeroprevalenceComparison>> {
    estimates
        .iter()
        .map(|est| {
            let a = ages
                .labels()
                .iter()
                .position(|l| *l == est.group)
                .ok_or_else(|| validation(format!("seroprevalence group '{}' is not a model age group", est.group)))?;
            if est.day == 0 || draws.iter().any(|d| d.len() < est.day) {
                return Err(validation(format!("survey day {} outside the modelled period", est.day)));
            }
            if !(est.lower <= est.estimate && est.estimate <= est.upper) {
                return Err(validation(format!("survey interval for '{}' is not ordered", est.group)));
            }
            let values: Vec<f64> = draws.iter().map(|d| d[est.day - 1][a]).collect();
            let model = summarize(&values)?;
            Ok(SeroprevalenceComparison {
                overlaps: model.lower95 <= est.upper && est.lower <= model.upper95,
                model,
                estimate: est.clone(),
            })
        })
        .collect()
}

/// One row of a long-format summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub quantity: String,
    pub group: String,
    /// Day (or week) index, 1-based.
    pub time: usize,
    pub quantile: f64,
    pub value: f64,
}

/// Expands `summaries[t - 1]` into five rows per time point.
pub fn tidy_rows(quantity: &str, group: &str, summaries: &[PosteriorSummary]) -> Vec<TidyRow> {
    summaries
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            SUMMARY_QUANTILES.iter().zip(s.values()).map(move |(q, v)| TidyRow {
                quantity: quantity.to_string(),
                group: group.to_string(),
                time: i + 1,
                quantile: *q,
                value: v,
            })
        })
        .collect()
}

/// Derived quantities at one posterior draw. Daily series are indexed
/// `[t - 1][a]` and hold counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedDraw {
    /// `betas[path][k - 1]` for weeks `1..=K`.
    pub betas: Vec<Vec<f64>>,
    pub infections: Vec<Vec<f64>>,
    pub cumulative_infections: Vec<Vec<f64>>,
    pub expected_deaths: Vec<Vec<f64>>,
    pub r_eff: Vec<f64>,
}

pub fn derive_draw(model: &Model, theta: &[f64]) -> Result<DerivedDraw> {
    let rec = model.reconstruct(theta)?;
    let ages = &model.data().ages;
    let groups = ages.groups();
    let total = ages.total();
    let infections: Vec<Vec<f64>> = rec
        .new_infections
        .chunks(groups)
        .map(|row| row.iter().map(|v| v * total).collect())
        .collect();
    let expected_deaths = rec.expected_deaths.chunks(groups).map(<[f64]>::to_vec).collect();
    let r_eff = r_eff_from_flat(
        &rec.states,
        &rec.weekly_rates,
        rec.parameters.rates.mean_infectious_period(),
        ages.fractions(),
    );
    Ok(DerivedDraw {
        betas: rec.parameters.path.betas().into_iter().map(|b| b[1..].to_vec()).collect(),
        cumulative_infections: cumulative_infections(&infections),
        infections,
        expected_deaths,
        r_eff,
    })
}

/// [`derive_draw`] over many draws, in order.
pub fn derive_draws(model: &Model, draws: &[Vec<f64>], exec: Execution) -> Vec<Result<DerivedDraw>> {
    map_slice(draws, exec, |theta| derive_draw(model, theta))
}

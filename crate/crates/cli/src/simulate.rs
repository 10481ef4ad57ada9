//! Synthetic data from the generative model with known parameters.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use epidiff_core::epi::{AgeStructure, ContactMatrix, ModelKind, RateParams, SquareMatrix};
use epidiff_core::latent::LatentPath;
use epidiff_core::observation::sample_negbin;
use epidiff_core::outputs::{derive_draw, spectral_radius, DerivedDraw};
use epidiff_core::posterior::{DelayConfig, FitData, Model, ModelConfig, Parameters, RatesConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bundle::{DataBundle, DataPaths};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Starting level of every transmissibility path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialTransmissibility {
    /// Explicit `x0` per path.
    LogBeta(Vec<f64>),
    /// Every path starts where the contact matrix gives this basic
    /// reproduction number.
    Reproduction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeConfig {
    pub kind: ModelKind,
    pub start_date: NaiveDate,
    pub weeks: usize,
    pub groups: Vec<String>,
    pub populations: Vec<f64>,
    /// Survey contact rows, symmetrized for reciprocity before use.
    pub contacts: Vec<Vec<f64>>,
    pub ifr: Vec<f64>,
    pub initial: InitialTransmissibility,
    /// One per path.
    pub volatilities: Vec<f64>,
    /// `innovations[path][k - 1]`; drawn from N(0, 1) when absent.
    #[serde(default)]
    pub innovations: Option<Vec<Vec<f64>>>,
    pub overdispersion: f64,
    /// Initially infected share of each group.
    pub seed_fractions: Vec<f64>,
    #[serde(default = "default_latent")]
    pub latent_period: f64,
    #[serde(default = "default_infectious")]
    pub infectious_period: f64,
    #[serde(default)]
    pub delay: DelayConfig,
    /// Probability that an infection becomes a confirmed case; no case
    /// series without it.
    #[serde(default)]
    pub detection_probability: Option<f64>,
    /// Redraw random innovations until the final attack rate lies in
    /// `[low, high]`.
    #[serde(default)]
    pub attack_rate_bounds: Option<[f64; 2]>,
    pub seed: u64,
}

fn default_latent() -> f64 {
    RatesConfig::default().latent_period
}

fn default_infectious() -> f64 {
    RatesConfig::default().infectious_period
}

const MAX_DRAWS: usize = 1000;

/// Known parameters and the epidemic they produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub kind: ModelKind,
    pub parameters: Parameters,
    /// The parameters in the sampler's unconstrained coordinates.
    pub theta: Vec<f64>,
    pub names: Vec<String>,
    pub derived: DerivedDraw,
    pub attack_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub bundle: DataBundle,
    pub truth: Truth,
}

impl GenerativeConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            rates: RatesConfig {
                free: false,
                latent_period: self.latent_period,
                infectious_period: self.infectious_period,
            },
            delay: self.delay.clone(),
            ..ModelConfig::default()
        }
    }

    fn validate(&self, paths: usize) -> Result<()> {
        let mut issues = Vec::new();
        if self.weeks == 0 {
            issues.push("weeks must be at least 1".to_string());
        }
        if self.volatilities.len() != paths || self.volatilities.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            issues.push(format!("need {paths} positive volatilities, got {:?}", self.volatilities));
        }
        if let Some(z) = &self.innovations {
            if z.len() != paths || z.iter().any(|row| row.len() != self.weeks) {
                issues.push(format!("innovations must be {paths} rows of {} weeks", self.weeks));
            }
        }
        if let InitialTransmissibility::LogBeta(x0) = &self.initial {
            if x0.len() != paths {
                issues.push(format!("need {paths} initial log-transmissibilities, got {}", x0.len()));
            }
        }
        if let InitialTransmissibility::Reproduction(r) = self.initial {
            if !(r > 0.0) {
                issues.push(format!("basic reproduction number must be positive, got {r}"));
            }
        }
        if !(self.overdispersion > 0.0) {
            issues.push(format!("overdispersion must be positive, got {}", self.overdispersion));
        }
        if self.seed_fractions.len() != self.groups.len() || self.seed_fractions.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            issues.push("need one seed fraction in (0, 1) per group".to_string());
        }
        if let Some(p) = self.detection_probability {
            if !(0.0..=1.0).contains(&p) {
                issues.push(format!("detection probability must lie in [0, 1], got {p}"));
            }
        }
        if let Some([lo, hi]) = self.attack_rate_bounds {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                issues.push(format!("attack rate bounds [{lo}, {hi}] are not an interval in [0, 1]"));
            }
            if self.innovations.is_some() {
                issues.push("attack rate bounds need randomly drawn innovations".to_string());
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(issues))
        }
    }
}

/// Runs the generative model once: latent paths, epidemic, expected deaths,
/// then negative-binomial deaths and binomially thinned cases.
pub fn simulate(config: &GenerativeConfig) -> Result<Simulation> {
    let ages = AgeStructure::new(config.groups.clone(), config.populations.clone())?;
    let groups = ages.groups();
    let paths = config.kind.paths(groups);
    config.validate(paths)?;
    let survey = SquareMatrix::from_rows(&config.contacts)?;
    let contact = ContactMatrix::reciprocal(survey.clone(), &ages)?;
    let rates = RateParams::from_periods(config.latent_period, config.infectious_period)?;
    let x0 = match &config.initial {
        InitialTransmissibility::LogBeta(x) => x.clone(),
        InitialTransmissibility::Reproduction(r) => {
            let level = (r / (spectral_radius(contact.entries()) * rates.mean_infectious_period())).ln();
            vec![level; paths]
        }
    };
    let days = 7 * config.weeks;
    let placeholder = FitData {
        ages: ages.clone(),
        contact: contact.clone(),
        ifr: config.ifr.clone(),
        deaths: vec![vec![Some(0); groups]; days],
        weeks: config.weeks,
    };
    let model = Model::new(config.model_config(), placeholder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut attempts = 0;
    let (parameters, theta, derived, attack_rate) = loop {
        attempts += 1;
        let innovations = match &config.innovations {
            Some(z) => z.clone(),
            None => (0..paths)
                .map(|_| (0..config.weeks).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect(),
        };
        let parameters = Parameters {
            rates,
            path: LatentPath::new(x0.clone(), innovations, config.volatilities.clone())?,
            phi: config.overdispersion,
            seed_fractions: config.seed_fractions.clone(),
            seeds: config.seed_fractions.iter().zip(ages.fractions()).map(|(q, f)| q * f).collect(),
            contact: contact.clone(),
        };
        let theta = model.unconstrain(&parameters)?;
        let outcome = derive_draw(&model, &theta).map(|d| {
            let infected: f64 = d.cumulative_infections.last().map_or(0.0, |row| row.iter().sum());
            let attack = infected / ages.total();
            (d, attack)
        });
        let accepted = match (&outcome, config.attack_rate_bounds) {
            (Err(_), _) if config.innovations.is_some() => {
                return Err(outcome.err().expect("error").into());
            }
            (Err(_), _) => false,
            (Ok((_, attack)), Some([lo, hi])) => (lo..=hi).contains(attack),
            (Ok(_), None) => true,
        };
        if accepted {
            let (d, attack) = outcome.expect("accepted");
            break (parameters, theta, d, attack);
        }
        if attempts >= MAX_DRAWS {
            return Err(CliError::Other(format!(
                "no innovation draw in {MAX_DRAWS} attempts gave a stable epidemic within the attack rate bounds"
            )));
        }
    };

    let deaths: Vec<Vec<Option<u64>>> = derived
        .expected_deaths
        .iter()
        .map(|row| row.iter().map(|&d| Some(sample_negbin(&mut rng, d, config.overdispersion))).collect())
        .collect();
    let cases = config.detection_probability.map(|p| {
        derived
            .infections
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&n| {
                        let trials = n.round().max(0.0) as u64;
                        Some(Binomial::new(trials, p).expect("valid binomial").sample(&mut rng))
                    })
                    .collect()
            })
            .collect()
    });

    let bundle = DataBundle {
        start_date: config.start_date,
        weeks: config.weeks,
        ages,
        survey_contacts: survey,
        ifr: config.ifr.clone(),
        deaths,
        cases,
    };
    bundle.fit_data()?;
    Ok(Simulation {
        bundle,
        truth: Truth {
            kind: config.kind,
            names: model.layout().names(),
            parameters,
            theta,
            derived,
            attack_rate,
        },
    })
}

/// Writes the data files, `truth.json` and a `run.toml` that fits the
/// data with default settings.
pub fn write_simulation(sim: &Simulation, kind: ModelKind, dir: &Path) -> Result<PathBuf> {
    sim.bundle.export(dir)?;
    let truth_path = dir.join("truth.json");
    let json = serde_json::to_string_pretty(&sim.truth).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(&truth_path, json).map_err(|e| CliError::io(&truth_path, e))?;
    let mut run = RunConfig::new(DataPaths::in_dir(Path::new(""), sim.bundle.cases.is_some()));
    run.model.kind = kind;
    let run_path = dir.join("run.toml");
    run.save(&run_path)?;
    Ok(run_path)
}

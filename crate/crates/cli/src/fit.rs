//! The `fit`, `summarize` and `validate` verbs and the results directory.
//!
//! A results directory holds:
//!
//! * `draws.csv`: `chain,iteration,divergent,lp,<coordinate names>`
//! * `diagnostics.csv`: `parameter,rhat,ess_bulk,ess_tail`
//! * `summaries.csv`: `quantity,group,date,quantile,value`
//! * `manifest.json`: the resolved run configuration, input hashes, seed,
//!   version, wall time and sampler health
//! * `seroprevalence.csv` after `validate`

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use epidiff_core::epi::ModelKind;
use epidiff_core::outputs::{
    derive_draws, reporting_ratio, seroprevalence_comparison, summarize, summarize_series, DerivedDraw, PosteriorSummary,
    SeroprevalenceComparison, SeroprevalenceEstimate, SUMMARY_QUANTILES,
};
use epidiff_core::posterior::Model;
use epidiff_core::sampler::{sample, SampleError, SampleOutput};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{ingest, DataBundle};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const DRAWS_FILE: &str = "draws.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const SUMMARIES_FILE: &str = "summaries.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEROPREVALENCE_FILE: &str = "seroprevalence.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    SamplerFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub status: RunStatus,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<InputFile>,
    pub wall_time_seconds: f64,
    pub divergence_rate: f64,
    pub max_rhat: Option<f64>,
    pub message: Option<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }
}

/// A fitted model with its post-warm-up draws and derived quantities.
pub struct Fit {
    pub bundle: DataBundle,
    pub model: Model,
    /// Draws of all chains, chain after chain.
    pub draws: Vec<Vec<f64>>,
    pub derived: Vec<DerivedDraw>,
}

pub struct FitReport {
    pub fit: Fit,
    pub output: SampleOutput,
    pub manifest: Manifest,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn write_draws(path: &Path, names: &[String], output: &SampleOutput) -> Result<()> {
    let mut w = csv_writer(path)?;
    let head = ["chain", "iteration", "divergent", "lp"];
    w.write_record(head.iter().map(|s| s.to_string()).chain(names.iter().cloned()))?;
    for (c, chain) in output.chains.iter().enumerate() {
        for (i, draw) in chain.draws.iter().enumerate() {
            let lead = [
                (c + 1).to_string(),
                (i + 1).to_string(),
                u8::from(chain.divergent[i]).to_string(),
                chain.log_density[i].to_string(),
            ];
            w.write_record(lead.into_iter().chain(draw.iter().map(f64::to_string)))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Draws from `draws.csv`, flattened over chains.
pub fn read_draws(path: &Path, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() != names.len() + 4 || header[4..] != *names {
        return Err(CliError::validation(format!(
            "{}: coordinate columns do not match the configured model",
            path.display()
        )));
    }
    reader
        .records()
        .map(|rec| {
            let rec = rec?;
            rec.iter()
                .skip(4)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| CliError::validation(format!("{}: bad value '{v}'", path.display())))
                })
                .collect()
        })
        .collect()
}

fn write_diagnostics(path: &Path, names: &[String], output: &SampleOutput) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["parameter", "rhat", "ess_bulk", "ess_tail"])?;
    for (name, d) in names.iter().zip(&output.diagnostics) {
        w.write_record([name.clone(), opt(d.rhat), opt(d.ess_bulk), opt(d.ess_tail)])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// One row of `summaries.csv`; `date` is empty for static parameters and
/// the first day of the week for weekly quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub quantity: String,
    pub group: String,
    pub date: Option<NaiveDate>,
    pub quantile: f64,
    pub value: f64,
}

fn push_rows(rows: &mut Vec<SummaryRow>, quantity: &str, group: &str, dated: impl IntoIterator<Item = (Option<NaiveDate>, PosteriorSummary)>) {
    for (date, s) in dated {
        for (q, v) in SUMMARY_QUANTILES.iter().zip(s.values()) {
            rows.push(SummaryRow {
                quantity: quantity.to_string(),
                group: group.to_string(),
                date,
                quantile: *q,
                value: v,
            });
        }
    }
}

impl Fit {
    pub fn path_labels(&self) -> Vec<String> {
        match self.model.config().kind {
            ModelKind::Sbm => vec!["all".to_string()],
            ModelKind::Mbm => self.bundle.ages.labels().to_vec(),
        }
    }

    fn week_start(&self, k: usize) -> NaiveDate {
        self.bundle.date(7 * (k - 1) + 1)
    }

    /// `ratio[draw][week][group]` with a trailing pooled column.
    pub fn reporting_ratios(&self) -> Result<Option<Vec<Vec<Vec<Option<f64>>>>>> {
        let Some(cases) = &self.bundle.cases else {
            return Ok(None);
        };
        self.derived
            .iter()
            .map(|d| {
                Ok(reporting_ratio(cases, &d.infections)?
                    .into_iter()
                    .map(|week| week.into_iter().map(|r| r.ratio).collect())
                    .collect())
            })
            .collect::<Result<_>>()
            .map(Some)
    }

    /// Summaries of every output quantity.
    pub fn summaries(&self) -> Result<Vec<SummaryRow>> {
        let groups = self.bundle.ages.labels();
        let days = self.bundle.days();
        let day_dates: Vec<Option<NaiveDate>> = (1..=days).map(|t| Some(self.bundle.date(t))).collect();
        let week_dates: Vec<Option<NaiveDate>> = (1..=self.bundle.weeks).map(|k| Some(self.week_start(k))).collect();
        let mut rows = Vec::new();

        for (p, label) in self.path_labels().iter().enumerate() {
            let series: Vec<Vec<f64>> = self.derived.iter().map(|d| d.betas[p].clone()).collect();
            push_rows(&mut rows, "beta", label, week_dates.iter().copied().zip(summarize_series(&series)?));
        }
        type Series = fn(&DerivedDraw) -> &Vec<Vec<f64>>;
        let daily: [(&str, Series); 3] = [
            ("infections", |d| &d.infections),
            ("cumulative_infections", |d| &d.cumulative_infections),
            ("expected_deaths", |d| &d.expected_deaths),
        ];
        for (quantity, get) in daily {
            for (a, label) in groups.iter().enumerate() {
                let series: Vec<Vec<f64>> = self.derived.iter().map(|d| get(d).iter().map(|row| row[a]).collect()).collect();
                push_rows(&mut rows, quantity, label, day_dates.iter().copied().zip(summarize_series(&series)?));
            }
        }
        let r_eff: Vec<Vec<f64>> = self.derived.iter().map(|d| d.r_eff.clone()).collect();
        push_rows(&mut rows, "r_eff", "all", day_dates.iter().copied().zip(summarize_series(&r_eff)?));

        if let Some(ratios) = self.reporting_ratios()? {
            let columns = groups.iter().map(String::as_str).chain(["all"]);
            for (a, label) in columns.enumerate() {
                for (k, date) in week_dates.iter().enumerate() {
                    let values: Vec<f64> = ratios.iter().filter_map(|r| r[k][a]).collect();
                    if let Ok(s) = summarize(&values) {
                        push_rows(&mut rows, "reporting_ratio", label, [(*date, s)]);
                    }
                }
            }
        }

        let params = self
            .draws
            .iter()
            .map(|theta| Ok(self.model.constrain(theta)?.0))
            .collect::<Result<Vec<_>>>()?;
        let phi: Vec<f64> = params.iter().map(|p| p.phi).collect();
        push_rows(&mut rows, "phi", "all", [(None, summarize(&phi)?)]);
        for (p, label) in self.path_labels().iter().enumerate() {
            let sigma: Vec<f64> = params.iter().map(|x| x.path.volatilities()[p]).collect();
            push_rows(&mut rows, "sigma", label, [(None, summarize(&sigma)?)]);
        }
        Ok(rows)
    }

    pub fn write_summaries(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["quantity", "group", "date", "quantile", "value"])?;
        for r in self.summaries()? {
            w.write_record([
                r.quantity,
                r.group,
                r.date.map_or(String::new(), |d| d.to_string()),
                r.quantile.to_string(),
                r.value.to_string(),
            ])?;
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }

    pub fn seroprevalence(&self, estimates: &[SeroprevalenceEstimate]) -> Result<Vec<SeroprevalenceComparison>> {
        let cumulative: Vec<Vec<Vec<f64>>> = self.derived.iter().map(|d| d.cumulative_infections.clone()).collect();
        Ok(seroprevalence_comparison(&cumulative, &self.bundle.ages, estimates)?)
    }
}

fn derive_all(model: &Model, draws: &[Vec<f64>], config: &RunConfig) -> Result<Vec<DerivedDraw>> {
    derive_draws(model, draws, config.sampler.execution)
        .into_iter()
        .collect::<std::result::Result<_, _>>()
        .map_err(CliError::from)
}

fn prepare(config: &RunConfig) -> Result<(DataBundle, Model)> {
    let bundle = ingest(&config.data, config.groups.as_deref())?;
    let model = Model::new(config.model.clone(), bundle.fit_data()?)?;
    config.sampler.validate()?;
    Ok((bundle, model))
}

/// Ingests, samples and writes a complete results directory.
pub fn run_fit(config: &RunConfig) -> Result<FitReport> {
    let started = Instant::now();
    let (bundle, model) = prepare(config)?;
    let dir = &config.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let inputs = config
        .data
        .files()
        .into_iter()
        .map(|p| Ok(InputFile { path: p.to_path_buf(), sha256: sha256_file(p)? }))
        .collect::<Result<Vec<_>>>()?;

    let (output, failure) = match sample(&model, &config.sampler) {
        Ok(out) => (out, None),
        Err(SampleError::Failure(f)) => (*f.output.clone(), Some(f)),
        Err(SampleError::Config(e)) => return Err(e.into()),
    };
    let names = model.layout().names();
    write_draws(&dir.join(DRAWS_FILE), &names, &output)?;
    write_diagnostics(&dir.join(DIAGNOSTICS_FILE), &names, &output)?;

    let mut manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: RunStatus::Completed,
        seed: config.sampler.seed,
        config: config.clone(),
        inputs,
        wall_time_seconds: 0.0,
        divergence_rate: output.divergence_rate(),
        max_rhat: output.max_rhat(),
        message: None,
    };
    let write_manifest = |m: &mut Manifest| -> Result<()> {
        m.wall_time_seconds = started.elapsed().as_secs_f64();
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(m).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| CliError::io(&path, e))
    };
    if let Some(f) = failure {
        manifest.status = RunStatus::SamplerFailure;
        manifest.message = Some(f.message.clone());
        write_manifest(&mut manifest)?;
        return Err(CliError::Sampler(Box::new(f)));
    }

    let draws: Vec<Vec<f64>> = output.chains.iter().flat_map(|c| c.draws.iter().cloned()).collect();
    let derived = derive_all(&model, &draws, config)?;
    let fit = Fit { bundle, model, draws, derived };
    fit.write_summaries(&dir.join(SUMMARIES_FILE))?;
    write_manifest(&mut manifest)?;
    Ok(FitReport { fit, output, manifest })
}

/// Rebuilds a fit from a results directory.
pub fn load_fit(dir: &Path) -> Result<Fit> {
    let manifest = Manifest::load(dir)?;
    let (bundle, model) = prepare(&manifest.config)?;
    let draws = read_draws(&dir.join(DRAWS_FILE), &model.layout().names())?;
    let derived = derive_all(&model, &draws, &manifest.config)?;
    Ok(Fit { bundle, model, draws, derived })
}

/// Re-computes `summaries.csv` from the stored draws.
pub fn run_summarize(dir: &Path) -> Result<Fit> {
    let fit = load_fit(dir)?;
    fit.write_summaries(&dir.join(SUMMARIES_FILE))?;
    Ok(fit)
}

/// Reads external estimates: `group,date,estimate,lower,upper` with counts
/// of ever-infected people.
pub fn read_seroprevalence(path: &Path, start: NaiveDate) -> Result<Vec<SeroprevalenceEstimate>> {
    #[derive(Deserialize)]
    struct Row {
        group: String,
        date: NaiveDate,
        estimate: f64,
        lower: f64,
        upper: f64,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut issues = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        match row {
            Ok(r) => {
                let offset = (r.date - start).num_days();
                if offset < 0 {
                    issues.push(format!("{}:{}: {} is before the study start {start}", path.display(), i + 2, r.date));
                    continue;
                }
                out.push(SeroprevalenceEstimate {
                    group: r.group,
                    day: offset as usize + 1,
                    estimate: r.estimate,
                    lower: r.lower,
                    upper: r.upper,
                });
            }
            Err(e) => issues.push(format!("{}:{}: {e}", path.display(), i + 2)),
        }
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(CliError::Validation(issues))
    }
}

/// Compares cumulative infections with survey estimates and writes
/// `seroprevalence.csv`.
pub fn run_validate(dir: &Path, survey: &Path) -> Result<Vec<SeroprevalenceComparison>> {
    let fit = load_fit(dir)?;
    let estimates = read_seroprevalence(survey, fit.bundle.start_date)?;
    let table = fit.seroprevalence(&estimates)?;
    let path = dir.join(SEROPREVALENCE_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record([
        "group", "date", "estimate", "lower", "upper", "model_lower95", "model_median", "model_upper95", "overlaps",
    ])?;
    for c in &table {
        let e = &c.estimate;
        w.write_record([
            e.group.clone(),
            fit.bundle.date(e.day).to_string(),
            e.estimate.to_string(),
            e.lower.to_string(),
            e.upper.to_string(),
            c.model.lower95.to_string(),
            c.model.median.to_string(),
            c.model.upper95.to_string(),
            c.overlaps.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(table)
}

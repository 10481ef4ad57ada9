//! Input files: reading, validation, band aggregation and canonical export.
//!
//! All files are comma-separated with a header row:
//!
//! * deaths / cases: `date,<label>,<label>,...`, one row per day, ISO dates,
//!   non-negative integer counts, empty cell for a missing count
//! * population: `group,count`
//! * contacts: `band,<label>,...`, a square matrix whose row `a`, column `b`
//!   is the mean daily contacts a person in `a` has with people in `b`
//! * ifr: `group,ifr`

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use epidiff_core::epi::{pool_contacts, AgeStructure, ContactMatrix, SquareMatrix};
use epidiff_core::posterior::FitData;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

const MAX_REPORTED_ISSUES: usize = 50;

/// A model age group built from one or more fine input bands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub label: String,
    pub bands: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub deaths: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cases: Option<PathBuf>,
    pub population: PathBuf,
    pub contacts: PathBuf,
    pub ifr: PathBuf,
    /// Fill missing calendar days with zero counts instead of failing.
    #[serde(default)]
    pub zero_fill_gaps: bool,
}

impl DataPaths {
    /// Standard file names inside `dir`.
    pub fn in_dir(dir: &Path, with_cases: bool) -> Self {
        Self {
            deaths: dir.join("deaths.csv"),
            cases: with_cases.then(|| dir.join("cases.csv")),
            population: dir.join("population.csv"),
            contacts: dir.join("contacts.csv"),
            ifr: dir.join("ifr.csv"),
            zero_fill_gaps: false,
        }
    }

    pub fn resolve(&self, base: &Path) -> Self {
        let join = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Self {
            deaths: join(&self.deaths),
            cases: self.cases.as_ref().map(join),
            population: join(&self.population),
            contacts: join(&self.contacts),
            ifr: join(&self.ifr),
            zero_fill_gaps: self.zero_fill_gaps,
        }
    }

    pub fn files(&self) -> Vec<&Path> {
        let mut out = vec![self.deaths.as_path()];
        out.extend(self.cases.as_deref());
        out.extend([self.population.as_path(), self.contacts.as_path(), self.ifr.as_path()]);
        out
    }
}

/// Validated model inputs at the model's age-group resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub start_date: NaiveDate,
    pub weeks: usize,
    pub ages: AgeStructure,
    /// Population-pooled survey matrix before reciprocity adjustment.
    pub survey_contacts: SquareMatrix,
    pub ifr: Vec<f64>,
    /// `deaths[t - 1][a]`.
    pub deaths: Vec<Vec<Option<u64>>>,
    /// Confirmed cases, outside the likelihood.
    pub cases: Option<Vec<Vec<Option<u64>>>>,
}

impl DataBundle {
    pub fn days(&self) -> usize {
        self.deaths.len()
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start_date + chrono::Days::new(day as u64 - 1)
    }

    pub fn contact(&self) -> Result<ContactMatrix> {
        Ok(ContactMatrix::reciprocal(self.survey_contacts.clone(), &self.ages)?)
    }

    pub fn fit_data(&self) -> Result<FitData> {
        let data = FitData {
            ages: self.ages.clone(),
            contact: self.contact()?,
            ifr: self.ifr.clone(),
            deaths: self.deaths.clone(),
            weeks: self.weeks,
        };
        data.validate()?;
        Ok(data)
    }

    /// Writes the canonical files into `dir`; reading them back yields the
    /// same bundle.
    pub fn export(&self, dir: &Path) -> Result<DataPaths> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let paths = DataPaths::in_dir(dir, self.cases.is_some());
        let labels = self.ages.labels();
        write_daily(&paths.deaths, self.start_date, labels, &self.deaths)?;
        if let (Some(path), Some(cases)) = (&paths.cases, &self.cases) {
            write_daily(path, self.start_date, labels, cases)?;
        }
        let mut w = writer(&paths.population)?;
        w.write_record(["group", "count"])?;
        for (l, n) in labels.iter().zip(self.ages.populations()) {
            w.write_record([l.clone(), n.to_string()])?;
        }
        flush(w, &paths.population)?;

        let mut w = writer(&paths.contacts)?;
        w.write_record(std::iter::once("band").chain(labels.iter().map(String::as_str)))?;
        for (a, l) in labels.iter().enumerate() {
            let row = self.survey_contacts.row(a).iter().map(|v| v.to_string());
            w.write_record(std::iter::once(l.clone()).chain(row))?;
        }
        flush(w, &paths.contacts)?;

        let mut w = writer(&paths.ifr)?;
        w.write_record(["group", "ifr"])?;
        for (l, r) in labels.iter().zip(&self.ifr) {
            w.write_record([l.clone(), r.to_string()])?;
        }
        flush(w, &paths.ifr)?;
        Ok(paths)
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn flush(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_daily(path: &Path, start: NaiveDate, labels: &[String], rows: &[Vec<Option<u64>>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(std::iter::once("date").chain(labels.iter().map(String::as_str)))?;
    for (t, row) in rows.iter().enumerate() {
        let date = (start + chrono::Days::new(t as u64)).to_string();
        let cells = row.iter().map(|c| c.map_or(String::new(), |v| v.to_string()));
        w.write_record(std::iter::once(date).chain(cells))?;
    }
    flush(w, path)
}

/// Collects validation problems so a single run reports all of them.
#[derive(Default)]
struct Issues(Vec<String>);

impl Issues {
    fn push(&mut self, msg: impl Into<String>) {
        self.0.push(msg.into());
    }

    /// Fails with everything collected so far, if anything.
    fn check(&mut self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            let mut v = std::mem::take(&mut self.0);
            if v.len() > MAX_REPORTED_ISSUES {
                let extra = v.len() - MAX_REPORTED_ISSUES;
                v.truncate(MAX_REPORTED_ISSUES);
                v.push(format!("... and {extra} more"));
            }
            Err(CliError::Validation(v))
        }
    }
}

struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path, first_column: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            other => CliError::validation(format!("{}: {other:?}", path.display())),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some(first_column) {
        return Err(CliError::validation(format!(
            "{}: first column must be '{first_column}', found {:?}",
            path.display(),
            header.first()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        rows.push((i + 2, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table {
        path: path.to_path_buf(),
        header,
        rows,
    })
}

fn parse_positive(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite() && *v > 0.0)
}

/// `label -> value` from a two-column table.
fn read_keyed(path: &Path, first: &str, second: &str, issues: &mut Issues) -> Result<Vec<(String, f64)>> {
    let table = read_table(path, first)?;
    if table.header.len() != 2 || table.header[1] != second {
        return Err(CliError::validation(format!(
            "{}: expected columns '{first},{second}', found {:?}",
            path.display(),
            table.header
        )));
    }
    let mut out: Vec<(String, f64)> = Vec::new();
    for (line, row) in &table.rows {
        let label = row[0].clone();
        if out.iter().any(|(l, _)| *l == label) {
            issues.push(format!("{}:{line}: duplicate {first} '{label}'", path.display()));
        }
        match parse_positive(&row[1]) {
            Some(v) => out.push((label, v)),
            None => issues.push(format!("{}:{line}: {second} '{}' is not a positive number", path.display(), row[1])),
        }
    }
    Ok(out)
}

/// Age-group layout resolved against the population file.
struct Grouping {
    labels: Vec<String>,
    bands: Vec<String>,
    band_populations: Vec<f64>,
    members: Vec<Vec<usize>>,
}

impl Grouping {
    fn group_populations(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.iter().map(|&i| self.band_populations[i]).sum()).collect()
    }

    /// Maps column labels to group indices: either the group labels
    /// themselves or a set of bands that covers every group.
    fn column_groups(&self, columns: &[String], what: &str, issues: &mut Issues) -> Option<Vec<usize>> {
        let as_groups: Option<Vec<usize>> = columns.iter().map(|c| self.labels.iter().position(|l| l == c)).collect();
        if let Some(idx) = as_groups {
            if is_permutation(&idx, self.labels.len()) {
                return Some(idx);
            }
        }
        let as_bands: Option<Vec<usize>> = columns
            .iter()
            .map(|c| {
                let band = self.bands.iter().position(|b| b == c)?;
                self.members.iter().position(|m| m.contains(&band))
            })
            .collect();
        let covers = as_bands.as_ref().is_some_and(|idx| {
            let mut seen: Vec<&str> = columns.iter().map(String::as_str).collect();
            seen.sort_unstable();
            seen.dedup();
            seen.len() == columns.len() && seen.len() == self.bands.len() && idx.len() == self.bands.len()
        });
        if covers {
            return as_bands;
        }
        issues.push(format!(
            "{what}: columns {columns:?} match neither the groups {:?} nor the bands {:?}",
            self.labels, self.bands
        ));
        None
    }
}

fn is_permutation(idx: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    idx.len() == n && idx.iter().all(|&i| !std::mem::replace(&mut seen[i], true))
}

fn resolve_grouping(populations: Vec<(String, f64)>, groups: Option<&[GroupSpec]>, issues: &mut Issues) -> Grouping {
    let bands: Vec<String> = populations.iter().map(|(l, _)| l.clone()).collect();
    let band_populations: Vec<f64> = populations.iter().map(|(_, n)| *n).collect();
    let Some(specs) = groups else {
        return Grouping {
            labels: bands.clone(),
            members: (0..bands.len()).map(|i| vec![i]).collect(),
            bands,
            band_populations,
        };
    };
    let mut members = Vec::new();
    let mut assigned: HashMap<&str, &str> = HashMap::new();
    for spec in specs {
        let mut idx = Vec::new();
        for b in &spec.bands {
            match bands.iter().position(|x| x == b) {
                Some(i) => idx.push(i),
                None => issues.push(format!("group '{}': band '{b}' is not in the population file", spec.label)),
            }
            if let Some(prev) = assigned.insert(b, &spec.label) {
                issues.push(format!("band '{b}' assigned to both '{prev}' and '{}'", spec.label));
            }
        }
        if spec.bands.is_empty() {
            issues.push(format!("group '{}' has no bands", spec.label));
        }
        members.push(idx);
    }
    for b in &bands {
        if !assigned.contains_key(b.as_str()) {
            issues.push(format!("population band '{b}' is not assigned to any group"));
        }
    }
    Grouping {
        labels: specs.iter().map(|s| s.label.clone()).collect(),
        bands,
        band_populations,
        members,
    }
}

struct Daily {
    start: NaiveDate,
    rows: Vec<Vec<Option<u64>>>,
}

fn read_daily(path: &Path, grouping: &Grouping, zero_fill: bool, issues: &mut Issues) -> Result<Option<Daily>> {
    let table = read_table(path, "date")?;
    let what = path.display().to_string();
    let Some(columns) = grouping.column_groups(&table.header[1..], &what, issues) else {
        return Ok(None);
    };
    let groups = grouping.labels.len();
    let mut by_date: BTreeMap<NaiveDate, Vec<Option<u64>>> = BTreeMap::new();
    for (line, row) in &table.rows {
        let Ok(date) = NaiveDate::parse_from_str(&row[0], "%Y-%m-%d") else {
            issues.push(format!("{what}:{line}: '{}' is not a YYYY-MM-DD date", row[0]));
            continue;
        };
        let mut counts = vec![Some(0u64); groups];
        for (cell, &g) in row[1..].iter().zip(&columns) {
            let value = if cell.is_empty() {
                None
            } else {
                match cell.parse::<u64>() {
                    Ok(v) => Some(v),
                    Err(_) => {
                        let kind = if cell.starts_with('-') { "negative" } else { "not a non-negative integer" };
                        issues.push(format!("{what}:{line}: count '{cell}' on {date} is {kind}"));
                        None
                    }
                }
            };
            counts[g] = match (counts[g], value) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            };
        }
        if by_date.insert(date, counts).is_some() {
            issues.push(format!("{what}:{line}: duplicate date {date}"));
        }
    }
    let (Some(&start), Some(&end)) = (by_date.keys().next(), by_date.keys().next_back()) else {
        issues.push(format!("{what}: no data rows"));
        return Ok(None);
    };
    let days = (end - start).num_days() as usize + 1;
    let mut rows = Vec::with_capacity(days);
    for t in 0..days {
        let date = start + chrono::Days::new(t as u64);
        match by_date.remove(&date) {
            Some(r) => rows.push(r),
            None if zero_fill => rows.push(vec![Some(0); groups]),
            None => {
                issues.push(format!("{what}: no row for {date} (date gap)"));
                rows.push(vec![None; groups]);
            }
        }
    }
    Ok(Some(Daily { start, rows }))
}

/// Reads, validates and aggregates all inputs to the configured groups.
pub fn ingest(paths: &DataPaths, groups: Option<&[GroupSpec]>) -> Result<DataBundle> {
    let mut issues = Issues::default();
    let populations = read_keyed(&paths.population, "group", "count", &mut issues)?;
    let grouping = resolve_grouping(populations, groups, &mut issues);
    issues.check()?;

    let deaths = read_daily(&paths.deaths, &grouping, paths.zero_fill_gaps, &mut issues)?;
    let cases = match &paths.cases {
        Some(p) => read_daily(p, &grouping, paths.zero_fill_gaps, &mut issues)?,
        None => None,
    };

    let contacts = read_table(&paths.contacts, "band")?;
    let survey = contact_matrix(&contacts, &grouping, &mut issues);

    let ifr_rows = read_keyed(&paths.ifr, "group", "ifr", &mut issues)?;
    let ifr = group_ifr(&ifr_rows, &grouping, &paths.ifr, &mut issues);

    let mut weeks = 0;
    if let Some(d) = &deaths {
        if d.rows.len() % 7 != 0 {
            issues.push(format!(
                "{}: {} days is not a whole number of weeks",
                paths.deaths.display(),
                d.rows.len()
            ));
        }
        weeks = d.rows.len() / 7;
        if let Some(c) = &cases {
            if c.start != d.start || c.rows.len() != d.rows.len() {
                issues.push(format!(
                    "cases cover {} + {} days but deaths cover {} + {} days",
                    c.start,
                    c.rows.len(),
                    d.start,
                    d.rows.len()
                ));
            }
        }
    }
    issues.check()?;
    let deaths = deaths.expect("checked");
    let ages = AgeStructure::new(grouping.labels.clone(), grouping.group_populations())?;
    let bundle = DataBundle {
        start_date: deaths.start,
        weeks,
        ages,
        survey_contacts: survey.expect("checked"),
        ifr: ifr.expect("checked"),
        deaths: deaths.rows,
        cases: cases.map(|c| c.rows),
    };
    bundle.fit_data()?;
    Ok(bundle)
}

fn contact_matrix(table: &Table, grouping: &Grouping, issues: &mut Issues) -> Option<SquareMatrix> {
    let what = table.path.display().to_string();
    let columns = &table.header[1..];
    let row_labels: Vec<String> = table.rows.iter().map(|(_, r)| r[0].clone()).collect();
    if row_labels != columns {
        issues.push(format!("{what}: row labels {row_labels:?} must equal column labels {columns:?}"));
        return None;
    }
    let n = columns.len();
    let mut raw = SquareMatrix::zeros(n);
    for (i, (line, row)) in table.rows.iter().enumerate() {
        for (j, cell) in row[1..].iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => raw[(i, j)] = v,
                _ => issues.push(format!("{what}:{line}: contact rate '{cell}' is not a non-negative number")),
            }
        }
    }
    if columns == grouping.labels.as_slice() {
        return Some(raw);
    }
    if columns != grouping.bands.as_slice() {
        issues.push(format!(
            "{what}: labels must be the groups {:?} or the population bands {:?} in that order",
            grouping.labels, grouping.bands
        ));
        return None;
    }
    match pool_contacts(&raw, &grouping.band_populations, &grouping.members) {
        Ok(m) => Some(m),
        Err(e) => {
            issues.push(format!("{what}: {e}"));
            None
        }
    }
}

/// Group IFRs, taken directly or as population-weighted band averages.
fn group_ifr(rows: &[(String, f64)], grouping: &Grouping, path: &Path, issues: &mut Issues) -> Option<Vec<f64>> {
    for (l, v) in rows {
        if *v >= 1.0 {
            issues.push(format!("{}: IFR of '{l}' must be below 1, got {v}", path.display()));
        }
    }
    let lookup = |label: &str| rows.iter().find(|(l, _)| l == label).map(|(_, v)| *v);
    if let Some(v) = grouping.labels.iter().map(|l| lookup(l)).collect::<Option<Vec<f64>>>() {
        return Some(v);
    }
    let mut out = Vec::with_capacity(grouping.labels.len());
    for (g, members) in grouping.members.iter().enumerate() {
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in members {
            let Some(v) = lookup(&grouping.bands[i]) else {
                issues.push(format!(
                    "{}: no IFR for group '{}' or its band '{}'",
                    path.display(),
                    grouping.labels[g],
                    grouping.bands[i]
                ));
                return None;
            };
            num += v * grouping.band_populations[i];
            den += grouping.band_populations[i];
        }
        out.push(num / den);
    }
    Some(out)
}

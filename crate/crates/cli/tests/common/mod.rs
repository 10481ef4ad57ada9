#![allow(dead_code)]

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use epidiff_cli::bundle::{DataPaths, GroupSpec};
use epidiff_cli::simulate::{GenerativeConfig, InitialTransmissibility};
use epidiff_core::epi::ModelKind;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fine_bands")
}

pub fn fixture_paths() -> DataPaths {
    let mut p = DataPaths::in_dir(&fixture_dir(), true);
    p.zero_fill_gaps = false;
    p
}

pub fn three_groups() -> Vec<GroupSpec> {
    let spec = |label: &str, bands: &[&str]| GroupSpec {
        label: label.into(),
        bands: bands.iter().map(|b| b.to_string()).collect(),
    };
    vec![
        spec("0-39", &["0-19", "20-39"]),
        spec("40-64", &["40-54", "55-64"]),
        spec("65+", &["65-74", "75+"]),
    ]
}

/// Two groups, four weeks, a small growing epidemic.
pub fn toy_generative(kind: ModelKind, seed: u64) -> GenerativeConfig {
    let paths = kind.paths(2);
    GenerativeConfig {
        kind,
        start_date: NaiveDate::from_ymd_opt(2020, 3, 2).unwrap(),
        weeks: 4,
        groups: vec!["young".into(), "old".into()],
        populations: vec![6e6, 4e6],
        contacts: vec![vec![9.0, 3.0], vec![4.0, 5.0]],
        ifr: vec![2e-3, 4e-2],
        initial: InitialTransmissibility::Reproduction(1.6),
        volatilities: vec![0.2; paths],
        innovations: None,
        overdispersion: 0.5,
        seed_fractions: vec![2e-3, 1e-3],
        latent_period: 3.0,
        infectious_period: 4.0,
        delay: Default::default(),
        detection_probability: Some(0.4),
        attack_rate_bounds: None,
        seed,
    }
}

/// Three groups with a national-scale population, as in the recovery
/// study but shorter.
pub fn three_group_generative(kind: ModelKind, weeks: usize, seed: u64) -> GenerativeConfig {
    let paths = kind.paths(3);
    GenerativeConfig {
        kind,
        start_date: NaiveDate::from_ymd_opt(2020, 2, 17).unwrap(),
        weeks,
        groups: vec!["0-39".into(), "40-64".into(), "65+".into()],
        populations: vec![2.8e7, 1.8e7, 1.05e7],
        contacts: vec![vec![7.9, 3.0, 0.6], vec![4.6, 6.2, 1.0], vec![1.6, 1.8, 2.1]],
        ifr: vec![1e-4, 2.5e-3, 3.5e-2],
        initial: InitialTransmissibility::Reproduction(1.4),
        volatilities: vec![0.1; paths],
        innovations: Some(vec![vec![0.0; weeks]; paths]),
        overdispersion: 1.0,
        seed_fractions: vec![1e-4; 3],
        latent_period: 3.0,
        infectious_period: 4.0,
        delay: Default::default(),
        detection_probability: None,
        attack_rate_bounds: None,
        seed,
    }
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#![allow(dead_code)]

use epidiff_core::epi::{AgeStructure, ContactMatrix, ModelKind, SquareMatrix};
use epidiff_core::posterior::{FitData, Model, ModelConfig};

pub fn toy_ages() -> AgeStructure {
    AgeStructure::new(vec!["young".into(), "old".into()], vec![6.0e6, 4.0e6]).unwrap()
}

pub fn toy_contact(ages: &AgeStructure) -> ContactMatrix {
    let raw = SquareMatrix::from_rows(&[vec![9.0, 3.0], vec![4.0, 5.0]]).unwrap();
    ContactMatrix::reciprocal(raw, ages).unwrap()
}

/// Two groups over `weeks` weeks with the given daily deaths.
pub fn toy_data(weeks: usize, deaths: Vec<Vec<Option<u64>>>) -> FitData {
    let ages = toy_ages();
    FitData {
        contact: toy_contact(&ages),
        ages,
        ifr: vec![2.0e-3, 4.0e-2],
        deaths,
        weeks,
    }
}

pub fn config(kind: ModelKind, free_rates: bool) -> ModelConfig {
    let mut c = ModelConfig {
        kind,
        ..ModelConfig::default()
    };
    c.rates.free = free_rates;
    c
}

/// Toy model whose deaths are rounded expected deaths at a fixed
/// reference point, so the likelihood is informative but finite.
pub fn toy_model(kind: ModelKind, free_rates: bool, weeks: usize) -> Model {
    let days = 7 * weeks;
    let blank = Model::new(config(kind, free_rates), toy_data(weeks, vec![vec![None, None]; days])).unwrap();
    let mut theta = blank.initial_point(&mut rand::rng(), 0.0);
    let l = blank.layout();
    for p in 0..l.paths() {
        theta[l.x0_index(p)] += 0.4;
    }
    for a in 0..l.groups() {
        theta[l.seed_index(a)] += 2.0;
    }
    let rec = blank.reconstruct(&theta).unwrap();
    let deaths: Vec<Vec<Option<u64>>> = rec
        .expected_deaths
        .chunks(2)
        .enumerate()
        .map(|(t, row)| {
            row.iter()
                .enumerate()
                .map(|(a, d)| if (t + a) % 11 == 5 { None } else { Some(d.round() as u64 + if *d > 2.0 { t as u64 % 3 } else { 0 }) })
                .collect()
        })
        .collect();
    Model::new(config(kind, free_rates), toy_data(weeks, deaths)).unwrap()
}

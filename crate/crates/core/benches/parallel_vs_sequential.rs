//! Multi-chain sampling and per-draw derived quantities, run on the rayon
//! pool and sequentially. Build with `--no-default-features` to time the
//! fallback without rayon at all.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use epidiff_core::epi::{AgeStructure, ContactMatrix, ModelKind, SquareMatrix};
use epidiff_core::exec::Execution;
use epidiff_core::outputs::derive_draws;
use epidiff_core::posterior::{FitData, Model, ModelConfig};
use epidiff_core::sampler::{sample, SamplerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

/// Three groups over eight weeks with deaths equal to the expected deaths
/// at the prior centre.
fn model() -> Model {
    let ages = AgeStructure::new(vec!["0-39".into(), "40-64".into(), "65+".into()], vec![2.8e7, 1.8e7, 1.05e7]).unwrap();
    let raw = SquareMatrix::from_rows(&[vec![7.9, 3.0, 0.6], vec![4.6, 6.2, 1.0], vec![1.6, 1.8, 2.1]]).unwrap();
    let weeks = 8;
    let data = |deaths| FitData {
        contact: ContactMatrix::reciprocal(raw.clone(), &ages).unwrap(),
        ages: ages.clone(),
        ifr: vec![1e-4, 2.5e-3, 3.5e-2],
        deaths,
        weeks,
    };
    let blank = Model::new(ModelConfig::default(), data(vec![vec![None; 3]; 7 * weeks])).unwrap();
    let mut theta = blank.initial_point(&mut ChaCha8Rng::seed_from_u64(0), 0.0);
    for p in 0..3 {
        theta[blank.layout().x0_index(p)] += 0.5;
    }
    let deaths = blank
        .reconstruct(&theta)
        .unwrap()
        .expected_deaths
        .chunks(3)
        .map(|row| row.iter().map(|d| Some(d.round() as u64)).collect())
        .collect();
    Model::new(ModelConfig { kind: ModelKind::Mbm, ..ModelConfig::default() }, data(deaths)).unwrap()
}

fn chains(c: &mut Criterion) {
    let model = model();
    let mut group = c.benchmark_group("sample_4_chains");
    group.sample_size(10);
    for (name, execution) in MODES {
        let config = SamplerConfig {
            chains: 4,
            warmup_iterations: 100,
            sampling_iterations: 100,
            max_tree_depth: 6,
            execution,
            ..SamplerConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &config, |b, config| {
            b.iter(|| black_box(sample(&model, config).unwrap()))
        });
    }
    group.finish();
}

fn derived(c: &mut Criterion) {
    let model = model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws: Vec<Vec<f64>> = (0..400).map(|_| model.initial_point(&mut rng, 0.1)).collect();
    let mut group = c.benchmark_group("derive_400_draws");
    for (name, execution) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &execution, |b, &execution| {
            b.iter(|| black_box(derive_draws(&model, &draws, execution)))
        });
    }
    group.finish();
}

criterion_group!(benches, chains, derived);
criterion_main!(benches);

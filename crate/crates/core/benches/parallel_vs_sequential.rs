use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use nmae_core::augmentation::MemorySource;
use nmae_core::exec::rng_for;
use nmae_core::geo_index::{build_index, build_index_with, GeoBBox, ImageRecord};
use nmae_core::model::{average_gradients, MaskedAutoencoder, MaskedPair, ModelConfig};
use nmae_core::pipeline::{sample_pair, Dataset, PairSettings};
use nmae_core::synthetic::{generate_tiles, WorldSpec};
use nmae_core::visibility::{WeightGradient, WeightPolicy};
use nmae_core::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn random_records(n: usize) -> Vec<ImageRecord> {
    let mut rng = rng_for(1, &[]);
    (0..n)
        .map(|k| {
            let (phi, lambda) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
            let size = rng.random_range(0.2..1.0);
            ImageRecord {
                id: format!("r{k}"),
                path: format!("r{k}.png"),
                bbox: GeoBBox::new(phi, phi + size, lambda, lambda + size).unwrap(),
                width_px: 64,
                height_px: 64,
                timestamp: None,
            }
        })
        .collect()
}

fn index_build(c: &mut Criterion) {
    let records = random_records(5000);
    let mut group = c.benchmark_group("index_build_5000");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| build_index_with(&records, 0.1, exec).unwrap())
        });
    }
    group.finish();
}

fn batch_pairs() -> Vec<MaskedPair> {
    let spec = WorldSpec {
        world_px: 512,
        n_tiles: 100,
        ..WorldSpec::default()
    };
    let mut images = MemorySource::default();
    let mut records = Vec::new();
    for t in generate_tiles(&spec).unwrap() {
        images.images.insert(t.record.id.clone(), t.pixels);
        records.push(t.record);
    }
    let index = build_index(&records, 0.1).unwrap();
    let dataset = Dataset::new(records, images).unwrap();
    let settings = PairSettings {
        augment: Default::default(),
        mask: Default::default(),
        patch_size: 8,
    };
    (0..16)
        .map(|k| sample_pair(&dataset, &index, &dataset.records()[k].id, &settings, k as u64).unwrap())
        .collect()
}

fn batch_gradient(c: &mut Criterion) {
    let model = MaskedAutoencoder::new(ModelConfig::default(), 0).unwrap();
    let pairs = batch_pairs();
    let mut group = c.benchmark_group("batch_gradient_16_pairs");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let grads: Vec<_> = exec.map_indexed(pairs.len(), |k| {
                    model
                        .loss_and_grad(&pairs[k], WeightPolicy::Ours, WeightGradient::Detached)
                        .unwrap()
                        .1
                });
                average_gradients(&model.store, &grads)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, index_build, batch_gradient);
criterion_main!(benches);

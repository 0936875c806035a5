//! Sequential vs rayon execution of the batch kernels.
//!
//! Build with `--no-default-features` to see the parallel arm fall back to
//! the sequential loop.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cnn_dataplane::compiler::{compile, CompileOptions};
use cnn_dataplane::model::{CnnModel, ModelShape};
use cnn_dataplane::quant::{quantize_model, QuantizedModel};
use cnn_dataplane::sim::Simulator;
use cnn_dataplane::train::{calibrate, predict, predict_quantized, train, Dataset, Sample, TrainConfig};
use cnn_dataplane::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup(samples: usize) -> (CnnModel, QuantizedModel, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = Dataset {
        samples: (0..samples)
            .map(|i| Sample { features: (0..16).map(|_| rng.random_range(0.0..1.0)).collect(), label: i % 15 })
            .collect(),
    };
    let mut m = CnnModel::random(ModelShape::reference(16), &mut rng).unwrap();
    m.ranges = Some(calibrate(&m, &data.inputs(), Execution::Parallel).unwrap());
    let qm = quantize_model(&m, 7).unwrap();
    (m, qm, data)
}

fn forward(c: &mut Criterion) {
    let (m, qm, data) = setup(2048);
    let x = data.inputs();
    let mut g = c.benchmark_group("forward_2048");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("float", name), |b| b.iter(|| predict(&m, black_box(&x), exec).unwrap()));
        g.bench_function(BenchmarkId::new("integer", name), |b| {
            b.iter(|| predict_quantized(&qm, black_box(&x), exec).unwrap())
        });
    }
    g.finish();
}

fn simulate(c: &mut Criterion) {
    let (_, qm, data) = setup(64);
    let (prog, _) = compile(&qm, &CompileOptions::default()).unwrap();
    let sim = Simulator::new(&prog).unwrap();
    let codes: Vec<Vec<i32>> = data.inputs().iter().map(|x| qm.quantize_input(x)).collect();
    let mut g = c.benchmark_group("simulate_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| exec.try_map(&codes, |q| sim.run(black_box(q), false).map(|r| r.class)).unwrap())
        });
    }
    g.finish();
}

fn train_epoch(c: &mut Criterion) {
    let (m, _, data) = setup(512);
    let mut g = c.benchmark_group("train_epoch_512");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig { epochs: 1, batch_size: 64, execution: exec, ..TrainConfig::default() };
        g.bench_function(name, |b| b.iter(|| train(&m, black_box(&data), &cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, forward, simulate, train_epoch);
criterion_main!(benches);

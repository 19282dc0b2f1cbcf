//! Sequential vs rayon execution of the data-parallel kernels.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng as _;
use unida_core::eval::{self, UnkMode};
use unida_core::math::{grad_check_with, Tensor2};
use unida_core::memory::{MemoryBank, MemoryConfig};
use unida_core::model::{init_params, ModelConfig};
use unida_core::par::ExecMode;
use unida_core::rng;
use unida_core::scenario::{generate_scenario, SplitSpec, SyntheticSpec};

const MODES: [(&str, ExecMode); 2] = [
    ("sequential", ExecMode::Sequential),
    ("parallel", ExecMode::Parallel),
];

fn random(rows: usize, cols: usize, seed: u64) -> Tensor2 {
    let mut r = rng::seeded(seed);
    let data = (0..rows * cols)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

fn batch_prediction(c: &mut Criterion) {
    let params = init_params(&ModelConfig::with_defaults(16, 7), 0).unwrap();
    let x = random(4096, 16, 1);
    let mut g = c.benchmark_group("predict_4096");
    for (name, mode) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| eval::predict_with(&params, black_box(&x), 0.5, mode).unwrap())
        });
    }
    g.finish();
}

fn threshold_sweep(c: &mut Criterion) {
    let sc = generate_scenario(
        &SyntheticSpec {
            split: SplitSpec::new(5, 2, 3).unwrap(),
            dim: 16,
            n_per_class: 200,
            shift_magnitude: 2.0,
            spread: 1.0,
        },
        0,
    )
    .unwrap();
    let params = init_params(&ModelConfig::with_defaults(16, sc.k), 0).unwrap();
    let truth = sc.target.labels.clone().unwrap();
    let shared = sc.split.shared_classes();
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let mut g = c.benchmark_group("sweep_101_thresholds");
    for (name, mode) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                eval::threshold_sweep(
                    &params,
                    &sc.target.features,
                    &truth,
                    &shared,
                    &grid,
                    UnkMode::Pooled,
                    mode,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

fn neighbor_queries(c: &mut Criterion) {
    let mut g = c.benchmark_group("neighbors");
    for n in [500, 2000] {
        let mut bank = MemoryBank::new(n, 32, MemoryConfig::default()).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        bank.update_rows(&rows, &random(n, 32, 2)).unwrap();
        for (name, mode) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &rows, |b, rows| {
                b.iter(|| bank.neighbors_many(black_box(rows), mode).unwrap())
            });
        }
    }
    g.finish();
}

fn gradient_check(c: &mut Criterion) {
    let params = init_params(
        &ModelConfig {
            d_in: 8,
            hidden: vec![16],
            d_feat: 8,
            num_classes: 5,
        },
        0,
    )
    .unwrap();
    let x = random(6, 8, 3);
    let tensors: Vec<Tensor2> = params.tensors().into_iter().cloned().collect();
    let f = |t: &mut unida_core::Tape, v: &[unida_core::Var]| {
        let vars = params.vars_from(v)?;
        let xv = t.constant(x.clone());
        let out = vars.forward(t, xv)?;
        let lp = t.ln(out.p_c);
        Ok(t.sum(lp))
    };
    let mut g = c.benchmark_group("grad_check_model");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| grad_check_with(f, &tensors, 1e-5, mode).unwrap())
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    batch_prediction,
    threshold_sweep,
    neighbor_queries,
    gradient_check
);
criterion_main!(benches);

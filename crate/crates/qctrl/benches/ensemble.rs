//! Parallel vs serial throughput on the two ensemble hot paths: robustness
//! evaluation of a batch of fields, and full gradient-flow runs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qctrl::dynamics::{propagate, Objective};
use qctrl::flow::{flow, FlowConfig};
use qctrl::fronts::run_seed;
use qctrl::par;
use qctrl::robustness::{k_beta_total, CorrelationKernel, NoiseModel};
use qctrl::spin::{sample_random_field, FluenceRegime, NoiseChannel, SpinSystem, TimeGrid};

fn kbeta_batch(c: &mut Criterion) {
    let sys = SpinSystem::default_two_level();
    let grid = TimeGrid::two_level_default();
    let obj = Objective::p12(&sys);
    let model = NoiseModel {
        channel: NoiseChannel::Field,
        kernel: CorrelationKernel::default_exp(),
    };
    let fields: Vec<_> = (0..16)
        .map(|i| sample_random_field((0.0, 5.0), grid, 1, 10, run_seed(60, i)).unwrap())
        .collect();
    let work = |i: usize| {
        let hist = propagate(&sys, &fields[i]).unwrap();
        k_beta_total(&obj, &sys, &hist, &model).unwrap()
    };
    let mut group = c.benchmark_group("kbeta_batch_16");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("indexed", "default"), |b| {
        b.iter(|| par::run_indexed(fields.len(), work))
    });
    group.bench_function(BenchmarkId::new("indexed", "serial"), |b| {
        b.iter(|| par::run_indexed_serial(fields.len(), work))
    });
    group.finish();
}

fn flow_batch(c: &mut Criterion) {
    let sys = SpinSystem::default_two_level();
    let grid = TimeGrid::two_level_default();
    let obj = Objective::p12(&sys);
    let cfg = FlowConfig {
        target_error: 1e-4,
        ..FlowConfig::default()
    };
    let starts: Vec<_> = (0..8)
        .map(|i| {
            sample_random_field(FluenceRegime::Low.amp_range(), grid, 1, 10, run_seed(61, i))
                .unwrap()
        })
        .collect();
    let work = |i: usize| flow(&obj, &sys, &starts[i], &cfg, &[]).unwrap().accepted_steps;
    let mut group = c.benchmark_group("flow_batch_8");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("indexed", "default"), |b| {
        b.iter(|| par::run_indexed(starts.len(), work))
    });
    group.bench_function(BenchmarkId::new("indexed", "serial"), |b| {
        b.iter(|| par::run_indexed_serial(starts.len(), work))
    });
    group.finish();
}

criterion_group!(benches, kbeta_batch, flow_batch);
criterion_main!(benches);

//! Data-parallel kernels under different thread budgets.
//!
//! With the default `parallel` feature the same code runs through rayon;
//! `--no-default-features` compiles the sequential fallback, and the
//! budget-1 variants then coincide with the default ones.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qflux_core::bohm::{run_ensemble, IntegratorOptions};
use qflux_core::evolve::{split_step, Evolution, EvolveMethod, Potential};
use qflux_core::exec;
use qflux_core::flux::{flux_through, Region};
use qflux_core::state::{discretize, make_gaussian, GridSpec, GridState, WaveState};

fn packet_grid(n: usize, length: f64) -> GridState {
    let g = make_gaussian(3, [0.0; 3], [1.0, 0.0, 0.0], 1.0, 1.0).unwrap();
    let spec = GridSpec::new_3d([n; 3], [length; 3]).unwrap();
    discretize(&WaveState::Gaussian(g), &spec).unwrap().state
}

fn budget_name(threads: usize) -> &'static str {
    if threads == 0 {
        "default"
    } else {
        "1"
    }
}

fn bench_split_step(c: &mut Criterion) {
    let grid = packet_grid(32, 16.0);
    let bump = Potential::GaussianBump { v0: 0.5, a: 1.0 };
    let mut group = c.benchmark_group("split_step_32cubed_x20");
    group.sample_size(10);
    for &threads in &[1usize, 0] {
        group.bench_with_input(
            BenchmarkId::from_parameter(budget_name(threads)),
            &threads,
            |b, &threads| {
                b.iter(|| {
                    exec::with_thread_budget(threads, || split_step(&grid, &bump, 0.01, 20).unwrap())
                })
            },
        );
    }
    group.finish();
}

fn bench_mesh_flux(c: &mut Criterion) {
    let grid = packet_grid(64, 20.0);
    let state = WaveState::Grid(grid);
    let region = Region::ball([0.0; 3], 5.0).unwrap();
    let mesh = region.surface_mesh(32, 64);
    let mut group = c.benchmark_group("mesh_flux_64cubed");
    group.sample_size(10);
    for &threads in &[1usize, 0] {
        group.bench_with_input(
            BenchmarkId::from_parameter(budget_name(threads)),
            &threads,
            |b, &threads| {
                b.iter(|| exec::with_thread_budget(threads, || flux_through(&state, &mesh).unwrap()))
            },
        );
    }
    group.finish();
}

fn bench_ensemble(c: &mut Criterion) {
    let g = make_gaussian(3, [0.0; 3], [0.0; 3], 1.0, 1.0).unwrap();
    let evolution =
        Evolution::build(WaveState::Gaussian(g), EvolveMethod::AnalyticFree, 20.0).unwrap();
    let region = Region::ball([0.0; 3], 4.0).unwrap();
    let mesh = region.surface_mesh(8, 16);
    let opts = IntegratorOptions::default();
    let mut group = c.benchmark_group("ensemble_256_trajectories");
    group.sample_size(10);
    for &threads in &[1usize, 0] {
        group.bench_with_input(
            BenchmarkId::from_parameter(budget_name(threads)),
            &threads,
            |b, &threads| {
                b.iter(|| {
                    exec::with_thread_budget(threads, || {
                        run_ensemble(&evolution, &region, &mesh, 256, 7, 20.0, &opts, &[]).unwrap()
                    })
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_split_step, bench_mesh_flux, bench_ensemble);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hyperspde::evolve::{integrate_spde, EvolveConfig, SpdeProblem};
use hyperspde::grid::{sobolev_norm, Field, Grid1D};
use hyperspde::noise::sample_brownian;
use hyperspde::par::map_indexed;
use hyperspde::symbols::{symmetrized_transport_fn, TimeSymbolFamily};

fn problem(n: usize) -> SpdeProblem {
    let g = Grid1D::periodic(n).unwrap();
    let u0 = Field::from_real_fn(&g, |x| (-4.0 * (x - 3.0).powi(2)).exp());
    let a = TimeSymbolFamily::constant(symmetrized_transport_fn(&g, |x| 1.0 + 0.5 * x.sin(), None));
    SpdeProblem::new(u0, Some(a), None, 1.0, 1.0)
}

fn one_path(p: &SpdeProblem, cfg: &EvolveConfig, i: usize) -> f64 {
    let path = sample_brownian(cfg.steps, p.horizon, 1, i as u64).unwrap();
    let traj = integrate_spde(p, &path, cfg).unwrap();
    sobolev_norm(traj.final_field(), -1.0).unwrap()
}

fn paths(c: &mut Criterion) {
    let p = problem(64);
    let cfg = EvolveConfig {
        record_every: 256,
        ..EvolveConfig::with_steps(256)
    };
    let mut group = c.benchmark_group("monte_carlo_paths");
    group.sample_size(10);
    for &count in &[8usize, 32] {
        group.bench_with_input(BenchmarkId::new("sequential", count), &count, |b, &count| {
            b.iter(|| (0..count).map(|i| one_path(&p, &cfg, i)).sum::<f64>())
        });
        group.bench_with_input(BenchmarkId::new("par_map", count), &count, |b, &count| {
            b.iter(|| map_indexed(count, |i| one_path(&p, &cfg, i)).iter().sum::<f64>())
        });
    }
    group.finish();
    black_box(hyperspde::par::is_parallel());
}

criterion_group!(benches, paths);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use reducedpinn::montecarlo::{value_pathintegral, value_pathintegral_reduced};
use reducedpinn::par;
use reducedpinn::presets;
use reducedpinn::sde::SimConfig;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn path_integral(c: &mut Criterion) {
    let mut g = c.benchmark_group("path_integral_sys3d");
    g.sample_size(10);
    let sys = presets::sys3d_system();
    let cost = presets::sys3d_cost();
    let red = presets::sys3d_reduced();
    let rcost = presets::sys3d_reduced_cost();
    let cfg = SimConfig::new(1e-3, presets::SYS3D_HORIZON, 7, 2_000);
    let x = presets::sys3d_lift(&[1.5, 1.5]);
    for (name, seq) in modes() {
        par::set_force_sequential(seq);
        g.bench_function(BenchmarkId::new("full", name), |b| {
            b.iter(|| value_pathintegral(&sys, &x, 0.5, presets::SYS3D_HORIZON, &cost, &cfg).unwrap())
        });
        g.bench_function(BenchmarkId::new("reduced", name), |b| {
            b.iter(|| value_pathintegral_reduced(&red, &[1.5, 1.5], 0.5, presets::SYS3D_HORIZON, &rcost, &cfg).unwrap())
        });
    }
    par::set_force_sequential(false);
    g.finish();
}

fn map_indices(c: &mut Criterion) {
    let mut g = c.benchmark_group("map_indices");
    for (name, seq) in modes() {
        par::set_force_sequential(seq);
        g.bench_function(name, |b| {
            b.iter(|| par::map_indices(100_000, |i| (i as f64).sqrt().sin()).iter().sum::<f64>())
        });
    }
    par::set_force_sequential(false);
    g.finish();
}

criterion_group!(benches, path_integral, map_indices);
criterion_main!(benches);

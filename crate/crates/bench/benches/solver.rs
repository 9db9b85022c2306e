use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use hjp_bench::coarse_evaluators;
use hjp_core::dynamics::Subsystem;
use hjp_core::grid::{signed_box, Grid};
use hjp_core::hjsolver::{solve, Scheme, SolveOptions};
use hjp_core::reach::relative_state;

fn double_integrator(c: &mut Criterion) {
    let g = Arc::new(Grid::new(&[-4.0, -3.0], &[4.0, 3.0], &[81, 81]).unwrap());
    let l = signed_box(&g, &[0.0, 0.0], &[0.5, 0.25]).unwrap();
    let sub = Subsystem::double_integrator(1.0).unwrap();
    let mut group = c.benchmark_group("solve_di_81x81_T3");
    group.sample_size(10);
    for (name, scheme) in [("eno2", Scheme::Eno2), ("first_order", Scheme::FirstOrder)] {
        let opts = SolveOptions::new(3.0).frozen(true).scheme(scheme).stride(1000);
        group.bench_function(name, |b| b.iter(|| solve(&sub, &g, &l, black_box(&opts)).unwrap()));
    }
    group.finish();
}

fn augmented_game(c: &mut Criterion) {
    let g = Arc::new(Grid::new(&[-20.0, -10.0, -6.0], &[20.0, 10.0, 6.0], &[41, 21, 13]).unwrap());
    let l = g.sample(|x| x[0].abs() - 2.25);
    let sub = Subsystem::augmented_game(3.0, 3.0, 5.0).unwrap();
    let opts = SolveOptions::new(3.0).stride(1000);
    let mut group = c.benchmark_group("solve_safety_axis_41x21x13_T3");
    group.sample_size(10);
    group.bench_function("eno2", |b| b.iter(|| solve(&sub, &g, &l, black_box(&opts)).unwrap()));
    group.finish();
}

fn queries(c: &mut Criterion) {
    let (_, e) = coarse_evaluators();
    let me = [10.0, 2.7, 5.0, 1.3];
    let other = [7.0, 2.0, 3.5, 1.0];
    let rel = relative_state(&me, &other);
    c.bench_function("safety_membership", |b| b.iter(|| e.safety.membership(black_box(&rel), 1.5).unwrap()));
    c.bench_function("safety_control", |b| b.iter(|| e.safety.safety_control(black_box(&rel), 1.5).unwrap()));
    let s = [2.0, 1.0, 0.5, 0.0];
    c.bench_function("highway_liveness_control", |b| {
        b.iter(|| e.highway.liveness_control_unchecked(black_box(&s), 4.0).unwrap())
    });
}

criterion_group!(benches, double_integrator, augmented_game, queries);
criterion_main!(benches);

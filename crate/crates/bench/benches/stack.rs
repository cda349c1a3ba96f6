//! Hot-path benchmarks: controller solves, spline fitting, distance
//! queries and planner cost evaluations.

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::Vector3;
use rotorsafe::traj::{BoundaryState, PiecewiseTrajectory, TrajProblem};
use rotorsafe::{
    GridWorld, Nmpc, NmpcConfig, PlannerLimits, StageRef, VehicleParams, VehicleState, WorldKind,
};
use std::hint::black_box;

fn nmpc_solve(c: &mut Criterion) {
    let params = VehicleParams::default();
    let config = NmpcConfig::default();
    let state = VehicleState::hover_at(Vector3::new(0.0, 0.0, 1.5), &params);
    let x0 = state.pack();
    let refs: Vec<StageRef> = (0..=config.horizon)
        .map(|_| StageRef::hold(Vector3::new(0.4, -0.2, 1.7)))
        .collect();

    let mut healthy = Nmpc::new(config.clone(), params.clone()).unwrap();
    c.bench_function("nmpc_solve_healthy", |b| {
        b.iter(|| healthy.control(black_box(&x0), black_box(&refs), None).unwrap())
    });

    let mut impaired = Nmpc::new(config, params.clone()).unwrap();
    let mut x_fault = x0;
    x_fault[13] = 0.0;
    c.bench_function("nmpc_solve_three_rotor", |b| {
        b.iter(|| impaired.control(black_box(&x_fault), black_box(&refs), Some(0)).unwrap())
    });
}

fn spline_fit(c: &mut Criterion) {
    let start = BoundaryState::rest(Vector3::new(-4.0, 0.0, 1.5));
    let end = BoundaryState::rest(Vector3::new(4.0, 1.0, 1.5));
    let waypoints: Vec<Vector3<f64>> = (1..6)
        .map(|k| Vector3::new(-4.0 + 1.6 * k as f64, 0.3 * (k % 2) as f64, 1.5))
        .collect();
    let durations = vec![1.4; 6];
    c.bench_function("spline_fit_six_segments", |b| {
        b.iter(|| {
            PiecewiseTrajectory::fit(
                black_box(&start),
                black_box(&end),
                black_box(&waypoints),
                black_box(&durations),
            )
            .unwrap()
        })
    });
}

fn distance_query(c: &mut Criterion) {
    let mut world = GridWorld::generate(
        WorldKind::Forest,
        Vector3::new(-6.0, -4.0, 0.0),
        Vector3::new(6.0, 4.0, 3.0),
        0.1,
        7,
    )
    .unwrap();
    world.reveal_all();
    world.ensure_field();
    let queries: Vec<Vector3<f64>> = (0..64)
        .map(|k| {
            Vector3::new(
                -5.0 + 10.0 * (k as f64 / 63.0),
                -3.0 + 6.0 * ((k * 7 % 64) as f64 / 63.0),
                1.5,
            )
        })
        .collect();
    c.bench_function("distance_query_64_points", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for q in &queries {
                acc += world.distance_query(black_box(q)).unwrap().distance;
            }
            acc
        })
    });
}

fn cost_and_grad(c: &mut Criterion) {
    let mut world = GridWorld::generate(
        WorldKind::Forest,
        Vector3::new(-6.0, -4.0, 0.0),
        Vector3::new(6.0, 4.0, 3.0),
        0.1,
        7,
    )
    .unwrap();
    world.reveal_all();
    world.ensure_field();
    let problem = TrajProblem {
        world: Some(&world),
        limits: PlannerLimits::default(),
        fault: false,
        start: BoundaryState::rest(Vector3::new(-5.0, 0.0, 1.5)),
        end: BoundaryState::rest(Vector3::new(5.0, 0.5, 1.5)),
    };
    let waypoints: Vec<Vector3<f64>> = (1..5)
        .map(|k| Vector3::new(-5.0 + 2.0 * k as f64, 0.4 * (k % 2) as f64, 1.5))
        .collect();
    let durations = vec![2.1; 5];
    c.bench_function("planner_cost_and_grad", |b| {
        b.iter(|| {
            problem
                .cost_and_grad(black_box(&waypoints), black_box(&durations))
                .unwrap()
                .0
        })
    });
}

criterion_group!(benches, nmpc_solve, spline_fit, distance_query, cost_and_grad);
criterion_main!(benches);

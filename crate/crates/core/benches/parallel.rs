//! Compares `batch_map` (rayon when the `parallel` feature is on) against
//! the always-sequential `batch_map_seq` on the two workload shapes that
//! dominate runtime: P3P hypothesis scoring (millions of tiny items during
//! blind calibration) and registration sweeps (tens of heavy items). On a
//! single-core host the pair should track each other to within dispatch
//! overhead; the gap on multi-core hosts is what the feature buys.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mvreg_core::batch::{batch_map, batch_map_seq};
use mvreg_core::calib::{solve_p3p, FiducialModel};
use mvreg_core::geometry::euler_to_pose;
use mvreg_core::registration::{register, RegistrationConfig};
use mvreg_core::scene::Scene;
use mvreg_core::synth::{build_phantom, generate_scene, NoiseSpec, PhantomSpec, SceneSpec};
use mvreg_core::{LabeledMesh, RigidPose};
use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// P3P instances over random bead triples seen from a random eye point.
/// Rays are built in a frame where the camera sits at the eye unrotated,
/// so every instance has at least one exact solution and the solver walks
/// its full quartic path.
fn p3p_instances(n: usize) -> Vec<([Vector3<f64>; 3], [Vector3<f64>; 3])> {
    let model = FiducialModel::standard_cage();
    let mut rng = StdRng::seed_from_u64(41);
    (0..n)
        .map(|_| {
            let mut idx = [0usize; 3];
            idx[0] = rng.random_range(0..model.beads.len());
            loop {
                idx[1] = rng.random_range(0..model.beads.len());
                if idx[1] != idx[0] {
                    break;
                }
            }
            loop {
                idx[2] = rng.random_range(0..model.beads.len());
                if idx[2] != idx[0] && idx[2] != idx[1] {
                    break;
                }
            }
            let eye = Vector3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-900.0..-600.0),
            );
            let world = [
                model.position(idx[0]),
                model.position(idx[1]),
                model.position(idx[2]),
            ];
            let rays = [
                (world[0] - eye).normalize(),
                (world[1] - eye).normalize(),
                (world[2] - eye).normalize(),
            ];
            (world, rays)
        })
        .collect()
}

fn bench_p3p_scoring(c: &mut Criterion) {
    let instances = p3p_instances(20_000);
    let solve_one = |i: usize| -> f64 {
        let (world, rays) = &instances[i];
        match solve_p3p(world, rays) {
            Ok(poses) => poses.iter().map(|p| p.translation_mm.norm()).sum(),
            Err(_) => 0.0,
        }
    };
    let mut group = c.benchmark_group("p3p_hypotheses");
    group.bench_function("batch_map", |b| {
        b.iter(|| black_box(batch_map(instances.len(), solve_one)))
    });
    group.bench_function("batch_map_seq", |b| {
        b.iter(|| black_box(batch_map_seq(instances.len(), solve_one)))
    });
    group.finish();
}

fn sweep_fixture() -> (LabeledMesh, Scene) {
    let mesh = build_phantom(&PhantomSpec::standard()).unwrap();
    let spec = SceneSpec {
        noise: NoiseSpec::gaussian(0.5),
        seed: 100,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&mesh, &RigidPose::identity(), &spec).unwrap();
    (mesh, scene)
}

fn bench_registration_sweep(c: &mut Criterion) {
    let (mesh, scene) = sweep_fixture();
    let (views, contours) = scene.registration_inputs().unwrap();
    let truth = scene.ground_truth_pose.clone().unwrap();
    let config = RegistrationConfig::default();
    let inits: Vec<RigidPose> = (0..4)
        .map(|i| {
            let mut rng = StdRng::seed_from_u64(1000 + i as u64);
            let offset = euler_to_pose(
                rng.random_range(-15.0..15.0),
                rng.random_range(-15.0..15.0),
                rng.random_range(-15.0..15.0),
                Vector3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                ),
            );
            RigidPose::compose(&offset, &truth)
        })
        .collect();
    let run_one = |i: usize| -> f64 {
        match register(&mesh, &views, &contours, &inits[i], &config) {
            Ok(report) => report.median_residual_mm,
            Err(_) => f64::NAN,
        }
    };
    let mut group = c.benchmark_group("registration_sweep");
    group.sample_size(10);
    group.bench_function("batch_map", |b| {
        b.iter(|| black_box(batch_map(inits.len(), run_one)))
    });
    group.bench_function("batch_map_seq", |b| {
        b.iter(|| black_box(batch_map_seq(inits.len(), run_one)))
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default();
    targets = bench_p3p_scoring, bench_registration_sweep,
}
criterion_main!(benches);

//! Robustness sweeps: many registrations of one scene from random
//! initial poses, scored against the control views and exported as
//! plot-ready tables.
//!
//! Runs are independent and execute in parallel, but every run draws
//! from its own counter-derived generator, so a sweep is a pure
//! function of its seed regardless of thread count.

use crate::batch::batch_map;
use crate::geometry::{euler_to_pose, RigidPose};
use crate::mesh::LabeledMesh;
use crate::metrics::{evaluate_pose, EvalError, MetricReport};
use crate::registration::{register, register_with_restart, RegistrationConfig, RegistrationMode};
use crate::scene::Scene;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepOptions {
    pub n_runs: usize,
    /// Each translation component is drawn from +-this range, in mm.
    pub translation_range_mm: f64,
    /// Each Euler angle is drawn from +-this range, in degrees.
    pub rotation_range_deg: f64,
    pub mode: RegistrationMode,
    pub restart: bool,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            n_runs: 50,
            translation_range_mm: 50.0,
            rotation_range_deg: 180.0,
            mode: RegistrationMode::Substructure,
            restart: false,
            seed: 0,
        }
    }
}

/// One registration attempt of a sweep. `report` is absent when the
/// solver returned an error; the run then counts as a failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    /// Initial perturbation (tx, ty, tz) mm, (phi, theta, psi) degrees,
    /// composed onto the ground-truth pose.
    pub init_params: [f64; 6],
    pub restarts: usize,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

impl SweepRun {
    pub fn success(&self) -> bool {
        self.report.as_ref().is_some_and(|r| r.success)
    }

    pub fn mrpd_mm(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.mrpd_mean_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    /// Successes over runs, exactly; `None` when no runs were requested.
    pub success_rate: Option<f64>,
}

impl SweepResult {
    pub fn n_successes(&self) -> usize {
        self.runs.iter().filter(|r| r.success()).count()
    }
}

/// Counter-based derivation so run i's generator is independent of how
/// many runs precede it (splitmix64 finalizer).
fn mix_seed(seed: u64, idx: u64) -> u64 {
    let mut z = seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Registers the scene `opts.n_runs` times from uniformly random initial
/// perturbations of the ground-truth pose and scores every attempt.
/// Solver errors become failed runs, not sweep errors.
pub fn robustness_sweep(
    mesh: &LabeledMesh,
    scene: &Scene,
    config: &RegistrationConfig,
    opts: &SweepOptions,
) -> Result<SweepResult, EvalError> {
    let truth = scene
        .ground_truth_pose
        .clone()
        .ok_or(EvalError::MissingGroundTruth)?;
    let (views, contours) = scene.registration_inputs()?;

    let runs = batch_map(opts.n_runs, |i| {
        let run_seed = mix_seed(opts.seed, i as u64);
        let mut rng = StdRng::seed_from_u64(run_seed);
        let t = opts.translation_range_mm;
        let r = opts.rotation_range_deg;
        let init_params = [
            rng.random_range(-t..t),
            rng.random_range(-t..t),
            rng.random_range(-t..t),
            rng.random_range(-r..r),
            rng.random_range(-r..r),
            rng.random_range(-r..r),
        ];
        let perturb = euler_to_pose(
            init_params[3],
            init_params[4],
            init_params[5],
            nalgebra::Vector3::new(init_params[0], init_params[1], init_params[2]),
        );
        let init = RigidPose::compose(&perturb, &truth);

        let mut cfg = config.clone();
        cfg.mode = opts.mode;
        cfg.rng_seed = run_seed;
        let solved = if opts.restart {
            register_with_restart(mesh, &views, &contours, &init, &cfg)
        } else {
            register(mesh, &views, &contours, &init, &cfg)
        };
        match solved {
            Ok(rep) => {
                let scored = evaluate_pose(
                    mesh,
                    scene,
                    &rep.pose,
                    cfg.sample_spacing_mm,
                    run_seed,
                    &init,
                    opts.mode,
                );
                match scored {
                    Ok(report) => SweepRun {
                        init_params,
                        restarts: rep.restarts,
                        report: Some(report),
                        error: None,
                    },
                    Err(e) => SweepRun {
                        init_params,
                        restarts: rep.restarts,
                        report: None,
                        error: Some(e.to_string()),
                    },
                }
            }
            Err(e) => SweepRun {
                init_params,
                restarts: 0,
                report: None,
                error: Some(e.to_string()),
            },
        }
    });

    let success_rate = (opts.n_runs > 0)
        .then(|| runs.iter().filter(|r| r.success()).count() as f64 / opts.n_runs as f64);
    Ok(SweepResult { runs, success_rate })
}

/// One row per run: run index, the six initial parameters, the scored
/// mRPD (empty on solver failure), success, restart count.
pub fn write_sweep_csv(result: &SweepResult, out: &mut impl Write) -> io::Result<()> {
    writeln!(
        out,
        "run,init_tx_mm,init_ty_mm,init_tz_mm,init_phi_deg,init_theta_deg,init_psi_deg,mrpd_mm,success,restarts"
    )?;
    for (i, run) in result.runs.iter().enumerate() {
        let p = &run.init_params;
        let mrpd = run.mrpd_mm().map(|m| m.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{mrpd},{},{}",
            p[0],
            p[1],
            p[2],
            p[3],
            p[4],
            p[5],
            run.success(),
            run.restarts
        )?;
    }
    Ok(())
}

const PARAM_NAMES: [&str; 6] = ["tx_mm", "ty_mm", "tz_mm", "phi_deg", "theta_deg", "psi_deg"];

/// Long-format table for the per-parameter scatter plots: each run
/// contributes one row per initial parameter, x the initial value and
/// y the resulting mRPD.
pub fn write_plot_tsv(result: &SweepResult, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "param\tinit_value\tmrpd_mm\tsuccess")?;
    for run in &result.runs {
        let mrpd = run.mrpd_mm().map(|m| m.to_string()).unwrap_or_default();
        for (name, value) in PARAM_NAMES.iter().zip(&run.init_params) {
            writeln!(out, "{name}\t{value}\t{mrpd}\t{}", run.success())?;
        }
    }
    Ok(())
}

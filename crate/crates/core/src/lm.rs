//! Damped least-squares pose refinement.
//!
//! The solver minimizes a stacked residual vector over a local 6-vector
//! increment (axis-angle rotation, translation) composed onto the
//! current pose after every accepted step. The Jacobian is numeric,
//! forward differences with fixed steps: 1e-6 rad for the rotation
//! block, 1e-4 mm for translation. Steps are accepted only when they
//! lower the cost, so the accepted-cost trace is non-increasing by
//! construction.

use crate::geometry::RigidPose;
use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use thiserror::Error;

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iters: usize,
    pub rot_step_rad: f64,
    pub trans_step_mm: f64,
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
    /// Relative cost decrease below which the solve stops.
    pub cost_tol: f64,
    /// Step norm below which the solve stops.
    pub step_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iters: 50,
            rot_step_rad: 1e-6,
            trans_step_mm: 1e-4,
            lambda_init: 1e-3,
            lambda_factor: 10.0,
            lambda_max: 1e12,
            cost_tol: 1e-12,
            step_tol: 1e-10,
        }
    }
}

#[derive(Debug, Error)]
pub enum LmError {
    #[error("normal equations singular at maximum damping")]
    SingularNormalEquations,
    #[error("residuals undefined at the initial pose")]
    InvalidInitialResiduals,
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub pose: RigidPose,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Number of accepted steps.
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
}

/// Sum of squared residuals; None when any entry is non-finite.
fn cost_of(r: &[f64]) -> Option<f64> {
    let c = r.iter().map(|v| v * v).sum::<f64>();
    c.is_finite().then_some(c)
}

/// Forward-difference Jacobian of `residuals` at `pose`, m x 6.
/// Columns 0..3 are the axis-angle rotation increment, 3..6 the
/// translation increment. Returns None when a perturbed evaluation
/// fails (for example a point crossing behind the camera).
pub fn forward_jacobian<F>(
    pose: &RigidPose,
    residuals: &F,
    r0: &[f64],
    opts: &LmOptions,
) -> Option<DMatrix<f64>>
where
    F: Fn(&RigidPose) -> Option<Vec<f64>>,
{
    let m = r0.len();
    let mut j = DMatrix::zeros(m, 6);
    for k in 0..6 {
        let h = if k < 3 {
            opts.rot_step_rad
        } else {
            opts.trans_step_mm
        };
        let mut omega = Vector3::zeros();
        let mut tau = Vector3::zeros();
        if k < 3 {
            omega[k] = h;
        } else {
            tau[k - 3] = h;
        }
        let rp = residuals(&pose.update(&omega, &tau))?;
        if rp.len() != m {
            return None;
        }
        for i in 0..m {
            j[(i, k)] = (rp[i] - r0[i]) / h;
        }
    }
    Some(j)
}

/// Minimizes `residuals` starting at `pose0`. The residual closure may
/// return None for poses where the model is invalid (behind-camera
/// geometry); such candidate steps are rejected. The returned pose is
/// always at least as good as `pose0`; with no improving step it is
/// `pose0` itself.
pub fn optimize_pose<F>(
    pose0: &RigidPose,
    residuals: F,
    opts: &LmOptions,
) -> Result<LmOutcome, LmError>
where
    F: Fn(&RigidPose) -> Option<Vec<f64>>,
{
    let r0 = residuals(pose0).ok_or(LmError::InvalidInitialResiduals)?;
    let mut cost = cost_of(&r0).ok_or(LmError::InvalidInitialResiduals)?;
    let mut pose = pose0.clone();
    let mut r = r0;
    let mut lambda = opts.lambda_init;
    let initial_cost = cost;
    let mut trace = vec![cost];
    let mut accepted = 0usize;

    'outer: for _ in 0..opts.max_iters {
        let Some(j) = forward_jacobian(&pose, &residuals, &r, opts) else {
            // Validity boundary reached; keep the best pose found.
            break;
        };
        let jt = j.transpose();
        let h = &jt * &j;
        let g = &jt * DVector::from_column_slice(&r);

        loop {
            let mut damped = Matrix6::zeros();
            for i in 0..6 {
                for k in 0..6 {
                    damped[(i, k)] = h[(i, k)];
                }
                damped[(i, i)] += lambda;
            }
            let solved = damped
                .cholesky()
                .map(|ch| ch.solve(&Vector6::from_fn(|i, _| -g[i])));
            let delta = match solved {
                Some(d) if d.iter().all(|v| v.is_finite()) => d,
                _ => {
                    lambda *= opts.lambda_factor;
                    if lambda > opts.lambda_max {
                        return Err(LmError::SingularNormalEquations);
                    }
                    continue;
                }
            };

            let omega = Vector3::new(delta[0], delta[1], delta[2]);
            let tau = Vector3::new(delta[3], delta[4], delta[5]);
            let candidate = pose.update(&omega, &tau);
            let cand_cost = residuals(&candidate).and_then(|cr| cost_of(&cr).map(|c| (cr, c)));

            match cand_cost {
                Some((cr, c)) if c < cost => {
                    let rel_drop = (cost - c) / cost.max(1e-300);
                    let step = delta.norm();
                    pose = candidate;
                    pose.orthonormalize();
                    r = cr;
                    cost = c;
                    trace.push(c);
                    accepted += 1;
                    lambda = (lambda / opts.lambda_factor).max(1e-12);
                    if rel_drop < opts.cost_tol || step < opts.step_tol {
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= opts.lambda_factor;
                    if lambda > opts.lambda_max {
                        // No improving step exists at any damping: done.
                        break 'outer;
                    }
                }
            }
        }
    }

    Ok(LmOutcome {
        pose,
        initial_cost,
        final_cost: cost,
        iterations: accepted,
        cost_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{euler_to_pose, CameraIntrinsics, CameraView, RigidPose};
    use nalgebra::{Vector2, Vector3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn cloud(rng: &mut StdRng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                )
            })
            .collect()
    }

    /// Reprojection residuals of a point cloud against fixed targets.
    fn reprojection_setup(
        seed: u64,
    ) -> (
        Vec<Vector3<f64>>,
        Vec<CameraView>,
        RigidPose,
        Vec<Vector2<f64>>,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let points = cloud(&mut rng, 25);
        let views: Vec<CameraView> = [
            Vector3::new(0.0, 0.0, -700.0),
            Vector3::new(0.0, -650.0, -250.0),
        ]
        .iter()
        .enumerate()
        .map(|(i, eye)| {
            CameraView::look_at(
                format!("v{i}"),
                CameraIntrinsics::standard(3200.0),
                *eye,
                Vector3::zeros(),
                Vector3::new(1.0, 0.0, 0.0),
            )
        })
        .collect();
        let truth = euler_to_pose(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            Vector3::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
            ),
        );
        let mut targets = Vec::new();
        for v in &views {
            for p in &points {
                targets.push(v.project(&truth.apply(p)).unwrap());
            }
        }
        (points, views, truth, targets)
    }

    fn reprojection_residuals(
        points: &[Vector3<f64>],
        views: &[CameraView],
        targets: &[Vector2<f64>],
        pose: &RigidPose,
    ) -> Option<Vec<f64>> {
        let mut r = Vec::with_capacity(targets.len() * 2);
        let mut k = 0;
        for v in views {
            for p in points {
                let proj = v.project(&pose.apply(p)).ok()?;
                r.push(proj.x - targets[k].x);
                r.push(proj.y - targets[k].y);
                k += 1;
            }
        }
        Some(r)
    }

    #[test]
    fn recovers_pose_from_perturbed_start() {
        for seed in 0..5 {
            let (points, views, truth, targets) = reprojection_setup(seed);
            let init = RigidPose::compose(
                &euler_to_pose(4.0, -3.0, 6.0, Vector3::new(8.0, -5.0, 10.0)),
                &truth,
            );
            let out = optimize_pose(
                &init,
                |p| reprojection_residuals(&points, &views, &targets, p),
                &LmOptions::default(),
            )
            .unwrap();
            assert!(
                out.final_cost < 1e-12,
                "seed {seed}: final cost {}",
                out.final_cost
            );
            let rot_err = (out.pose.rotation - truth.rotation).abs().max();
            assert!(rot_err < 1e-7, "seed {seed}: rotation error {rot_err}");
        }
    }

    #[test]
    fn accepted_cost_trace_never_increases() {
        let (points, views, _, targets) = reprojection_setup(42);
        let init = euler_to_pose(25.0, -15.0, 30.0, Vector3::new(30.0, -40.0, 5.0));
        let out = optimize_pose(
            &init,
            |p| reprojection_residuals(&points, &views, &targets, p),
            &LmOptions::default(),
        )
        .unwrap();
        for w in out.cost_trace.windows(2) {
            assert!(w[1] <= w[0], "cost rose: {} -> {}", w[0], w[1]);
        }
        assert!(out.iterations > 0);
    }

    #[test]
    fn returns_start_pose_when_already_optimal() {
        let (points, views, truth, targets) = reprojection_setup(7);
        let out = optimize_pose(
            &truth,
            |p| reprojection_residuals(&points, &views, &targets, p),
            &LmOptions::default(),
        )
        .unwrap();
        assert!(out.final_cost <= out.initial_cost);
        assert!((out.pose.rotation - truth.rotation).abs().max() < 1e-9);
        assert!((out.pose.translation_mm - truth.translation_mm).norm() < 1e-9);
    }

    #[test]
    fn errors_when_residuals_invalid_at_start() {
        let init = RigidPose::identity();
        let err = optimize_pose(&init, |_| None::<Vec<f64>>, &LmOptions::default());
        assert!(matches!(err, Err(LmError::InvalidInitialResiduals)));
    }

    #[test]
    fn forward_jacobian_close_to_central_difference() {
        // Smoke version of the full oracle comparison in the acceptance
        // suite: 10 random configurations here.
        let opts = LmOptions::default();
        for seed in 0..10 {
            let (points, views, truth, targets) = reprojection_setup(100 + seed);
            let pose = RigidPose::compose(
                &euler_to_pose(2.0, 1.0, -2.0, Vector3::new(3.0, 2.0, -4.0)),
                &truth,
            );
            let resid = |p: &RigidPose| reprojection_residuals(&points, &views, &targets, p);
            let r0 = resid(&pose).unwrap();
            let jf = forward_jacobian(&pose, &resid, &r0, &opts).unwrap();
            // Independent central-difference evaluation.
            let mut jc = jf.clone();
            for k in 0..6 {
                let h = if k < 3 {
                    opts.rot_step_rad
                } else {
                    opts.trans_step_mm
                };
                let mut omega = Vector3::zeros();
                let mut tau = Vector3::zeros();
                if k < 3 {
                    omega[k] = h;
                } else {
                    tau[k - 3] = h;
                }
                let rp = resid(&pose.update(&omega, &tau)).unwrap();
                let rm = resid(&pose.update(&-omega, &-tau)).unwrap();
                for i in 0..r0.len() {
                    jc[(i, k)] = (rp[i] - rm[i]) / (2.0 * h);
                }
            }
            let scale = jc.abs().max().max(1e-12);
            let rel = (jf - jc).abs().max() / scale;
            assert!(rel < 1e-4, "seed {seed}: jacobian disagreement {rel}");
        }
    }
}

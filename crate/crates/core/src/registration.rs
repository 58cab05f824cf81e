//! Multi-view contour registration: iterative closest point on labeled
//! silhouettes with a Levenberg-Marquardt pose solver.
//!
//! One correspondence update projects the current silhouette into every
//! view, matches each observed contour point to its nearest projected
//! sample of the same class, and re-solves the pose on those frozen
//! matches. Updates repeat until the match set reaches a fixed point.
//! An optional second pass drops residual outliers and reruns; a restart
//! wrapper spins the model about its long axis when the fit stalls at a
//! wrong local minimum.

use crate::batch::batch_map;
use crate::geometry::{CameraView, RigidPose};
use crate::lm::{optimize_pose, LmError, LmOptions, LmOutcome};
use crate::mesh::LabeledMesh;
use crate::nn::NearestNeighbor2d;
use crate::scene::ViewContours;
use crate::silhouette::{extract_silhouette, SilhouetteError};
use nalgebra::{Vector2, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("no contour observations were provided")]
    NoObservations,
    #[error("number of observation sets ({obs}) does not match views ({views})")]
    ViewCountMismatch { obs: usize, views: usize },
    #[error("view '{view_id}' sees no silhouette under the current pose")]
    EmptySilhouette { view_id: String },
    #[error("only {found} usable correspondences; pose needs at least 3")]
    TooFewCorrespondences { found: usize },
    #[error("pose solve failed: {0}")]
    Lm(#[from] LmError),
    #[error(transparent)]
    Silhouette(#[from] SilhouetteError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegistrationMode {
    /// Match contour points only to silhouette samples of the same class.
    Substructure,
    /// Ignore labels entirely; classic whole-silhouette matching.
    SilhouetteOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub mode: RegistrationMode,
    pub sample_spacing_mm: f64,
    pub max_correspondence_updates: usize,
    pub lm_max_iters: usize,
    /// Drop observations whose residual exceeds this many pooled standard
    /// deviations, then re-fit on the survivors.
    pub reweighting: bool,
    pub reweight_sigma_factor: f64,
    pub max_restarts: usize,
    /// The early health check fires this many updates in; it abandons the
    /// attempt only when the median residual is both above threshold and no
    /// better than it was at the initial match. The final median is checked
    /// against the same threshold again when the attempt ends.
    pub restart_check_after_updates: usize,
    pub restart_median_thresh_mm: f64,
    pub restart_psi_range_deg: [f64; 2],
    pub rng_seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            mode: RegistrationMode::Substructure,
            sample_spacing_mm: 1.0,
            max_correspondence_updates: 30,
            lm_max_iters: 50,
            reweighting: true,
            reweight_sigma_factor: 2.0,
            max_restarts: 5,
            restart_check_after_updates: 4,
            restart_median_thresh_mm: 3.0,
            restart_psi_range_deg: [90.0, 270.0],
            rng_seed: 0,
        }
    }
}

/// One observed-point-to-model-point match, frozen for a pose solve.
#[derive(Debug, Clone)]
pub struct Correspondence {
    /// Index into the flattened observation list.
    pub obs: usize,
    pub view: usize,
    pub observed_px: Vector2<f64>,
    /// Matched silhouette sample, in model coordinates.
    pub model_point_mm: Vector3<f64>,
    pub class: u8,
    /// Silhouette edge the sample came from; the match set has converged
    /// when every observation keeps its edge between updates.
    pub source_edge: u32,
    /// Pixel distance at the pose the match was made under.
    pub residual_px: f64,
}

/// Residual statistics at one correspondence update, measured at the pose
/// the matches were made under, before the solve that follows them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub median_residual_mm: f64,
    pub mean_residual_mm: f64,
    pub n_correspondences: usize,
    pub pose: RigidPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub pose: RigidPose,
    pub correspondence_updates: usize,
    /// The correspondence set reached a fixed point and the fit was not
    /// abandoned by the restart controller.
    pub converged: bool,
    pub final_cost_px2: f64,
    pub median_residual_mm: f64,
    pub n_correspondences: usize,
    pub n_outliers_removed: usize,
    /// Restarts consumed; 0 when the first attempt was accepted.
    pub restarts: usize,
    /// One entry per solved correspondence update, across all attempts.
    /// Never longer than max_correspondence_updates * (restarts + 1).
    pub trace: Vec<TraceEntry>,
    pub lm_iterations_total: usize,
}

#[derive(Debug, Clone)]
struct ObsPoint {
    view: usize,
    class: u8,
    px: Vector2<f64>,
}

fn flatten(contours: &[ViewContours], mode: RegistrationMode) -> Vec<ObsPoint> {
    let mut out = Vec::new();
    for (view, per_class) in contours.iter().enumerate() {
        for (&class, pts) in per_class {
            let class = match mode {
                RegistrationMode::Substructure => class,
                RegistrationMode::SilhouetteOnly => 0,
            };
            for p in pts {
                out.push(ObsPoint {
                    view,
                    class,
                    px: Vector2::new(p[0], p[1]),
                });
            }
        }
    }
    out
}

/// Matches every active observation to the nearest same-class projected
/// silhouette sample. Output is ordered by observation index.
pub fn match_correspondences(
    mesh: &LabeledMesh,
    pose: &RigidPose,
    views: &[CameraView],
    obs: &[ObsPointsView<'_>],
    config: &RegistrationConfig,
) -> Result<Vec<Correspondence>, RegistrationError> {
    let per_view: Vec<Result<Vec<Correspondence>, RegistrationError>> =
        batch_map(views.len(), |v| {
            let samples = extract_silhouette(mesh, pose, &views[v], config.sample_spacing_mm)?;
            // Group projected samples by class; unprojectable samples are
            // skipped (they sit behind the camera under this pose).
            let mut groups: BTreeMap<u8, (Vec<Vector2<f64>>, Vec<usize>)> = BTreeMap::new();
            for (si, s) in samples.iter().enumerate() {
                let class = match config.mode {
                    RegistrationMode::Substructure => s.class,
                    RegistrationMode::SilhouetteOnly => 0,
                };
                if let Ok(px) = views[v].project(&pose.apply(&s.position_mm)) {
                    let entry = groups.entry(class).or_default();
                    entry.0.push(px);
                    entry.1.push(si);
                }
            }
            if groups.values().all(|(pts, _)| pts.is_empty()) {
                return Err(RegistrationError::EmptySilhouette {
                    view_id: views[v].view_id.clone(),
                });
            }
            let trees: BTreeMap<u8, (NearestNeighbor2d, &Vec<usize>)> = groups
                .iter()
                .map(|(&c, (pts, idx))| (c, (NearestNeighbor2d::build(pts), idx)))
                .collect();
            let mut matched = Vec::new();
            for &(oi, op) in &obs[v].points {
                let Some((tree, idx)) = trees.get(&op.class) else {
                    continue;
                };
                let (nearest, dist) = tree.nearest(&op.px);
                let sample = &samples[idx[nearest]];
                matched.push(Correspondence {
                    obs: oi,
                    view: v,
                    observed_px: op.px,
                    model_point_mm: sample.position_mm,
                    class: op.class,
                    source_edge: sample.source_edge,
                    residual_px: dist,
                });
            }
            Ok(matched)
        });
    let mut out = Vec::new();
    for r in per_view {
        out.extend(r?);
    }
    out.sort_by_key(|c| c.obs);
    Ok(out)
}

/// Observation points of one view, tagged with their global indices.
pub struct ObsPointsView<'a> {
    points: Vec<(usize, &'a ObsPoint)>,
}

/// Solves the pose on frozen correspondences by Levenberg-Marquardt over
/// pixel reprojection residuals.
pub fn solve_pose_lm(
    correspondences: &[Correspondence],
    views: &[CameraView],
    pose: &RigidPose,
    lm_max_iters: usize,
) -> Result<LmOutcome, RegistrationError> {
    if correspondences.len() < 3 {
        return Err(RegistrationError::TooFewCorrespondences {
            found: correspondences.len(),
        });
    }
    let residuals = |p: &RigidPose| -> Option<Vec<f64>> {
        let mut r = Vec::with_capacity(2 * correspondences.len());
        for c in correspondences {
            let px = views[c.view].project(&p.apply(&c.model_point_mm)).ok()?;
            r.push(px.x - c.observed_px.x);
            r.push(px.y - c.observed_px.y);
        }
        Some(r)
    };
    let opts = LmOptions {
        max_iters: lm_max_iters,
        ..LmOptions::default()
    };
    Ok(optimize_pose(pose, &residuals, &opts)?)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::INFINITY;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_residual_mm(corrs: &[Correspondence], views: &[CameraView]) -> f64 {
    let mut r: Vec<f64> = corrs.iter().map(|c| c.residual_px).collect();
    median(&mut r) * views[0].intrinsics.pixel_pitch_mm
}

/// One completed fit attempt: pose, the matches it ended on, and how it
/// ended. `stalled` means the early health check abandoned it.
struct Attempt {
    pose: RigidPose,
    updates: usize,
    converged: bool,
    stalled: bool,
    final_corrs: Vec<Correspondence>,
    lm_iters: usize,
}

struct Problem<'a> {
    mesh: &'a LabeledMesh,
    views: &'a [CameraView],
    obs: Vec<ObsPoint>,
    config: &'a RegistrationConfig,
}

impl Problem<'_> {
    fn grouped(&self, active: &[bool]) -> Vec<ObsPointsView<'_>> {
        let mut per_view: Vec<ObsPointsView<'_>> = (0..self.views.len())
            .map(|_| ObsPointsView { points: Vec::new() })
            .collect();
        for (i, op) in self.obs.iter().enumerate() {
            if active[i] {
                per_view[op.view].points.push((i, op));
            }
        }
        per_view
    }

    /// Match/solve alternation until the correspondence set repeats or the
    /// update budget runs out. Appends one trace entry per solved update.
    fn run_phase(
        &self,
        init: &RigidPose,
        active: &[bool],
        budget: usize,
        early_check: bool,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<Attempt, RegistrationError> {
        let grouped = self.grouped(active);
        let pitch = self.views[0].intrinsics.pixel_pitch_mm;
        let mut pose = init.clone();
        let mut prev_signature: Option<Vec<(usize, u32)>> = None;
        let mut updates = 0;
        let mut lm_iters = 0;
        let mut first_median_mm = f64::INFINITY;
        loop {
            let corrs = match_correspondences(self.mesh, &pose, self.views, &grouped, self.config)?;
            if corrs.len() < 3 {
                return Err(RegistrationError::TooFewCorrespondences { found: corrs.len() });
            }
            if updates == 0 {
                first_median_mm = median_residual_mm(&corrs, self.views);
            }
            // A healthy fit has pulled the median visibly down by the
            // checkpoint even if it is not yet below threshold; one that
            // remains where it began is stuck and not worth finishing.
            if early_check && updates == self.config.restart_check_after_updates {
                let med = median_residual_mm(&corrs, self.views);
                if med > self.config.restart_median_thresh_mm && med >= first_median_mm {
                    return Ok(Attempt {
                        pose,
                        updates,
                        converged: false,
                        stalled: true,
                        final_corrs: corrs,
                        lm_iters,
                    });
                }
            }
            let signature: Vec<(usize, u32)> =
                corrs.iter().map(|c| (c.obs, c.source_edge)).collect();
            let done = prev_signature.as_ref() == Some(&signature);
            if done || updates >= budget {
                return Ok(Attempt {
                    pose,
                    updates,
                    converged: done,
                    stalled: false,
                    final_corrs: corrs,
                    lm_iters,
                });
            }
            let mut r: Vec<f64> = corrs.iter().map(|c| c.residual_px).collect();
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            trace.push(TraceEntry {
                median_residual_mm: median(&mut r) * pitch,
                mean_residual_mm: mean * pitch,
                n_correspondences: corrs.len(),
                pose: pose.clone(),
            });
            let solved = solve_pose_lm(&corrs, self.views, &pose, self.config.lm_max_iters)?;
            pose = solved.pose;
            lm_iters += solved.iterations;
            prev_signature = Some(signature);
            updates += 1;
        }
    }

    /// Full pipeline: fit, optionally drop outliers and fit again. Both
    /// phases share one update budget so the trace stays bounded.
    fn run(
        &self,
        init: &RigidPose,
        early_check: bool,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<Attempt, RegistrationError> {
        let mut active = vec![true; self.obs.len()];
        let budget = self.config.max_correspondence_updates;
        let first = self.run_phase(init, &active, budget, early_check, trace)?;
        if first.stalled || !self.config.reweighting {
            return Ok(first);
        }

        // Pooled zero-centered spread; anything beyond the factor is noise,
        // not contour.
        let ms = first
            .final_corrs
            .iter()
            .map(|c| c.residual_px * c.residual_px)
            .sum::<f64>()
            / first.final_corrs.len() as f64;
        let cutoff = self.config.reweight_sigma_factor * ms.sqrt();
        let mut removed = 0;
        for c in &first.final_corrs {
            if c.residual_px > cutoff {
                active[c.obs] = false;
                removed += 1;
            }
        }
        if removed == 0 {
            return Ok(first);
        }
        let second = self.run_phase(&first.pose, &active, budget - first.updates, false, trace)?;
        Ok(Attempt {
            pose: second.pose,
            updates: first.updates + second.updates,
            converged: second.converged,
            stalled: false,
            final_corrs: second.final_corrs,
            lm_iters: first.lm_iters + second.lm_iters,
        })
    }
}

fn make_report(
    attempt: &Attempt,
    views: &[CameraView],
    n_obs: usize,
    restarts: usize,
) -> RegistrationReport {
    RegistrationReport {
        pose: attempt.pose.clone(),
        correspondence_updates: attempt.updates,
        converged: attempt.converged,
        final_cost_px2: attempt
            .final_corrs
            .iter()
            .map(|c| c.residual_px.powi(2))
            .sum(),
        median_residual_mm: median_residual_mm(&attempt.final_corrs, views),
        n_correspondences: attempt.final_corrs.len(),
        n_outliers_removed: n_obs - attempt.final_corrs.len(),
        restarts,
        trace: Vec::new(),
        lm_iterations_total: attempt.lm_iters,
    }
}

fn check_inputs(views: &[CameraView], contours: &[ViewContours]) -> Result<(), RegistrationError> {
    if views.len() != contours.len() {
        return Err(RegistrationError::ViewCountMismatch {
            obs: contours.len(),
            views: views.len(),
        });
    }
    if views.is_empty() || contours.iter().all(|c| c.values().all(Vec::is_empty)) {
        return Err(RegistrationError::NoObservations);
    }
    Ok(())
}

/// Registers `mesh` to the contours seen by `views`, starting at `init`.
pub fn register(
    mesh: &LabeledMesh,
    views: &[CameraView],
    contours: &[ViewContours],
    init: &RigidPose,
    config: &RegistrationConfig,
) -> Result<RegistrationReport, RegistrationError> {
    check_inputs(views, contours)?;
    let problem = Problem {
        mesh,
        views,
        obs: flatten(contours, config.mode),
        config,
    };
    let mut trace = Vec::new();
    let attempt = problem.run(init, false, &mut trace)?;
    let mut report = make_report(&attempt, views, problem.obs.len(), 0);
    report.trace = trace;
    Ok(report)
}

/// Like [`register`], but when the fit stalls above the median-residual
/// threshold (checked early and at convergence) the model is spun about
/// its own principal axis by a random angle in the configured range and
/// registration retries, up to `max_restarts` times.
pub fn register_with_restart(
    mesh: &LabeledMesh,
    views: &[CameraView],
    contours: &[ViewContours],
    init: &RigidPose,
    config: &RegistrationConfig,
) -> Result<RegistrationReport, RegistrationError> {
    check_inputs(views, contours)?;
    let problem = Problem {
        mesh,
        views,
        obs: flatten(contours, config.mode),
        config,
    };
    let axis = mesh.principal_axis();
    let center = mesh.centroid();
    let mut rng = StdRng::seed_from_u64(config.rng_seed);
    let mut current = init.clone();
    let mut trace = Vec::new();
    let mut best: Option<RegistrationReport> = None;
    for attempt in 0..=config.max_restarts {
        let a = problem.run(&current, true, &mut trace)?;
        let report = make_report(&a, views, problem.obs.len(), attempt);
        if report.median_residual_mm <= config.restart_median_thresh_mm {
            let mut report = report;
            report.trace = trace;
            return Ok(report);
        }
        if best
            .as_ref()
            .map(|b| report.median_residual_mm < b.median_residual_mm)
            .unwrap_or(true)
        {
            best = Some(report.clone());
        }
        if attempt == config.max_restarts {
            break;
        }
        let [lo, hi] = config.restart_psi_range_deg;
        let psi = rng.random_range(lo..hi).to_radians();
        let spin = crate::geometry::rotation_about_line(&axis, &center, psi);
        current = RigidPose::compose(&report.pose, &spin);
    }
    // Every attempt ended badly; hand back the best of them, flagged as
    // not converged so callers cannot mistake it for a clean fit.
    let mut out = best.expect("at least one attempt ran");
    out.restarts = config.max_restarts;
    out.converged = false;
    out.trace = trace;
    Ok(out)
}

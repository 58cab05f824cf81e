//! Pose-quality metrics: mean reprojection distance against a held-out
//! control view, one-sided contour Chamfer distance, contour precision
//! and recall, the submillimeter success rule, and the Friedman rank
//! test for comparing methods across scenes.
//!
//! All image-space distances are converted to millimeters through the
//! detector pixel pitch. The reprojection metric pairs points by nearest
//! neighbor from each ground-truth contour point to the reprojected
//! silhouette; that direction is a convention, so every report carries
//! it explicitly.

use crate::geometry::{CameraView, RigidPose};
use crate::mesh::LabeledMesh;
use crate::nn::NearestNeighbor2d;
use crate::registration::RegistrationMode;
use crate::scene::{Scene, SceneError};
use crate::silhouette::{extract_silhouette, SilhouetteError};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

/// A registration counts as successful when the control-view mean
/// reprojection distance is at or below one millimeter.
pub const SUCCESS_THRESHOLD_MM: f64 = 1.0;

/// Default distance threshold for contour precision and recall.
pub const DEFAULT_PR_THRESH_MM: f64 = 1.0;

/// Pairing direction used by [`mrpd`], recorded in every report.
pub const MRPD_PAIRING: &str = "truth-to-reprojection";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("every method scored every block identically; ranks carry no information")]
    DegenerateRanks,
    #[error("need at least 2 methods and 2 blocks of equal length, got {methods} x {blocks}")]
    BadShape { methods: usize, blocks: usize },
    #[error("scores must be finite")]
    NonFiniteScore,
}

/// Mean distance from each ground-truth contour point to the nearest
/// reprojection of the model points under `pose` in the control view,
/// in millimeters.
pub fn mrpd(
    gt_contour_px: &[Vector2<f64>],
    model_points_mm: &[Vector3<f64>],
    pose: &RigidPose,
    control_view: &CameraView,
) -> Result<f64, MetricsError> {
    if gt_contour_px.is_empty() {
        return Err(MetricsError::EmptyInput("ground-truth contour"));
    }
    if model_points_mm.is_empty() {
        return Err(MetricsError::EmptyInput("model point set"));
    }
    let reprojected: Vec<Vector2<f64>> = model_points_mm
        .iter()
        .filter_map(|x| control_view.project(&pose.apply(x)).ok())
        .collect();
    if reprojected.is_empty() {
        return Err(MetricsError::EmptyInput("reprojected model point set"));
    }
    let tree = NearestNeighbor2d::build(&reprojected);
    let sum: f64 = gt_contour_px.iter().map(|g| tree.nearest(g).1).sum();
    Ok(sum / gt_contour_px.len() as f64 * control_view.intrinsics.pixel_pitch_mm)
}

/// Mean distance from each predicted contour point to the nearest true
/// contour point, in millimeters.
pub fn one_sided_chamfer(
    pred_px: &[Vector2<f64>],
    truth_px: &[Vector2<f64>],
    pixel_pitch_mm: f64,
) -> Result<f64, MetricsError> {
    if pred_px.is_empty() {
        return Err(MetricsError::EmptyInput("predicted contour"));
    }
    if truth_px.is_empty() {
        return Err(MetricsError::EmptyInput("true contour"));
    }
    let tree = NearestNeighbor2d::build(truth_px);
    let sum: f64 = pred_px.iter().map(|p| tree.nearest(p).1).sum();
    Ok(sum / pred_px.len() as f64 * pixel_pitch_mm)
}

/// Contour precision and recall at a millimeter threshold. A predicted
/// point is a true positive when some true point lies within the
/// threshold; recall counts true points with a prediction within it.
/// An empty prediction has undefined precision (`None`) and zero recall.
pub fn precision_recall(
    pred_px: &[Vector2<f64>],
    truth_px: &[Vector2<f64>],
    pixel_pitch_mm: f64,
    thresh_mm: f64,
) -> Result<(Option<f64>, f64), MetricsError> {
    if truth_px.is_empty() {
        return Err(MetricsError::EmptyInput("true contour"));
    }
    if pred_px.is_empty() {
        return Ok((None, 0.0));
    }
    let thresh_px = thresh_mm / pixel_pitch_mm;
    let truth_tree = NearestNeighbor2d::build(truth_px);
    let tp = pred_px
        .iter()
        .filter(|p| truth_tree.nearest(p).1 <= thresh_px)
        .count();
    let pred_tree = NearestNeighbor2d::build(pred_px);
    let covered = truth_px
        .iter()
        .filter(|t| pred_tree.nearest(t).1 <= thresh_px)
        .count();
    Ok((
        Some(tp as f64 / pred_px.len() as f64),
        covered as f64 / truth_px.len() as f64,
    ))
}

/// The submillimeter acceptance rule: at most [`SUCCESS_THRESHOLD_MM`].
pub fn success(mrpd_mm: f64) -> bool {
    mrpd_mm <= SUCCESS_THRESHOLD_MM
}

/// Friedman rank test over a k-methods x n-blocks score matrix (rows are
/// methods). Ties within a block receive their average rank. Returns the
/// chi-square statistic (k-1 degrees of freedom) and its p-value.
///
/// A matrix whose rows are all identical carries no rank information at
/// all and is refused; a matrix where methods merely trade places block
/// by block is fine and scores a statistic of zero.
pub fn friedman_test(method_scores: &[Vec<f64>]) -> Result<(f64, f64), MetricsError> {
    let k = method_scores.len();
    let n = method_scores.first().map_or(0, Vec::len);
    if k < 2 || n < 2 || method_scores.iter().any(|row| row.len() != n) {
        return Err(MetricsError::BadShape {
            methods: k,
            blocks: n,
        });
    }
    if method_scores.iter().flatten().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    if method_scores[1..]
        .iter()
        .all(|row| row == &method_scores[0])
    {
        return Err(MetricsError::DegenerateRanks);
    }

    let mut rank_sums = vec![0.0; k];
    let mut order: Vec<usize> = (0..k).collect();
    for b in 0..n {
        order.sort_by(|&i, &j| {
            method_scores[i][b]
                .partial_cmp(&method_scores[j][b])
                .unwrap()
        });
        let mut i = 0;
        while i < k {
            let mut j = i;
            while j + 1 < k && method_scores[order[j + 1]][b] == method_scores[order[i]][b] {
                j += 1;
            }
            // Positions i..=j share one value; each gets the average of
            // ranks i+1..=j+1.
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &m in &order[i..=j] {
                rank_sums[m] += avg;
            }
            i = j + 1;
        }
    }

    let (kf, nf) = (k as f64, n as f64);
    let stat = (12.0 / (nf * kf * (kf + 1.0)) * rank_sums.iter().map(|r| r * r).sum::<f64>()
        - 3.0 * nf * (kf + 1.0))
        .max(0.0);
    let dist = ChiSquared::new(kf - 1.0).expect("k >= 2 checked above");
    Ok((stat, 1.0 - dist.cdf(stat)))
}

/// Quality of one registered pose against the control views of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// (view id, mRPD) for each control view, in the scene's order.
    pub mrpd_per_view: Vec<(String, f64)>,
    pub mrpd_mean_mm: f64,
    /// One-sided Chamfer from the reprojected contour to the true one,
    /// pooled over control views.
    pub chamfer_mm: f64,
    /// `None` when no contour points could be reprojected at all.
    pub precision: Option<f64>,
    pub recall: f64,
    pub success: bool,
    /// Nearest-neighbor direction used for the mRPD; a convention, so it
    /// travels with the numbers.
    pub mrpd_pairing: String,
    pub seed: u64,
    pub init_pose: RigidPose,
    pub mode: RegistrationMode,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scene carries no ground-truth pose to evaluate against")]
    MissingGroundTruth,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Silhouette(#[from] SilhouetteError),
}

/// Scores `pose` against the clean ground-truth silhouette in every
/// control view of `scene`. The whole-bone outline is used on both
/// sides; substructure labels play no role here.
pub fn evaluate_pose(
    mesh: &LabeledMesh,
    scene: &Scene,
    pose: &RigidPose,
    sample_spacing_mm: f64,
    seed: u64,
    init_pose: &RigidPose,
    mode: RegistrationMode,
) -> Result<MetricReport, EvalError> {
    let truth = scene
        .ground_truth_pose
        .as_ref()
        .ok_or(EvalError::MissingGroundTruth)?;
    let cameras = scene.control_cameras()?;

    let mut mrpd_per_view = Vec::with_capacity(cameras.len());
    let mut tp = 0usize;
    let mut n_pred = 0usize;
    let mut covered = 0usize;
    let mut n_truth = 0usize;
    let mut chamfer_sum = 0.0;
    let mut chamfer_n = 0usize;
    for (id, cam) in scene.control_views.iter().zip(&cameras) {
        let gt_px: Vec<Vector2<f64>> = extract_silhouette(mesh, truth, cam, sample_spacing_mm)?
            .iter()
            .filter_map(|s| cam.project(&truth.apply(&s.position_mm)).ok())
            .collect();
        if gt_px.is_empty() {
            return Err(MetricsError::EmptyInput("ground-truth contour").into());
        }
        let model_points: Vec<Vector3<f64>> =
            extract_silhouette(mesh, pose, cam, sample_spacing_mm)?
                .iter()
                .map(|s| s.position_mm)
                .collect();
        mrpd_per_view.push((id.clone(), mrpd(&gt_px, &model_points, pose, cam)?));

        let pred_px: Vec<Vector2<f64>> = model_points
            .iter()
            .filter_map(|x| cam.project(&pose.apply(x)).ok())
            .collect();
        let pitch = cam.intrinsics.pixel_pitch_mm;
        if !pred_px.is_empty() {
            chamfer_sum += one_sided_chamfer(&pred_px, &gt_px, pitch)? * pred_px.len() as f64;
            chamfer_n += pred_px.len();
        }
        let (p, r) = precision_recall(&pred_px, &gt_px, pitch, DEFAULT_PR_THRESH_MM)?;
        if let Some(p) = p {
            tp += (p * pred_px.len() as f64).round() as usize;
            n_pred += pred_px.len();
        }
        covered += (r * gt_px.len() as f64).round() as usize;
        n_truth += gt_px.len();
    }

    let mrpd_mean_mm =
        mrpd_per_view.iter().map(|(_, m)| m).sum::<f64>() / mrpd_per_view.len() as f64;
    Ok(MetricReport {
        mrpd_mean_mm,
        mrpd_per_view,
        chamfer_mm: if chamfer_n > 0 {
            chamfer_sum / chamfer_n as f64
        } else {
            f64::INFINITY
        },
        precision: (n_pred > 0).then(|| tp as f64 / n_pred as f64),
        recall: covered as f64 / n_truth as f64,
        success: success(mrpd_mean_mm),
        mrpd_pairing: MRPD_PAIRING.to_string(),
        seed,
        init_pose: init_pose.clone(),
        mode,
    })
}

//! Scene container: views with their observations, plus ground truth when
//! the scene is synthetic.
//!
//! Serialization is JSON with `BTreeMap` keys and fixed struct order, so a
//! scene round-trips to identical bytes.

use crate::geometry::{CameraIntrinsics, CameraView, RigidPose};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scene references unknown view '{0}'")]
    UnknownView(String),
    #[error("view '{0}' has no extrinsic; calibrate it first")]
    MissingExtrinsic(String),
}

/// Contour points for one view, keyed by substructure class.
pub type ViewContours = BTreeMap<u8, Vec<[f64; 2]>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneView {
    pub view_id: String,
    pub intrinsics: CameraIntrinsics,
    /// World-to-camera pose; `None` until this view is calibrated.
    pub extrinsic: Option<RigidPose>,
    /// Unordered fiducial detections, if the view imaged the bead cage.
    pub bead_detections: Option<Vec<[f64; 2]>>,
    /// Observed contour points by class; class 0 means unlabeled.
    pub contours_px: ViewContours,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub views: Vec<SceneView>,
    /// Views whose contours drive registration.
    pub registration_views: Vec<String>,
    /// Held-out views used only to score the result.
    pub control_views: Vec<String>,
    /// Pose the contours were generated from, for synthetic scenes.
    pub ground_truth_pose: Option<RigidPose>,
}

impl Scene {
    pub fn view(&self, view_id: &str) -> Result<&SceneView, SceneError> {
        self.views
            .iter()
            .find(|v| v.view_id == view_id)
            .ok_or_else(|| SceneError::UnknownView(view_id.into()))
    }

    pub fn view_mut(&mut self, view_id: &str) -> Result<&mut SceneView, SceneError> {
        self.views
            .iter_mut()
            .find(|v| v.view_id == view_id)
            .ok_or_else(|| SceneError::UnknownView(view_id.into()))
    }

    /// The calibrated camera for a view.
    pub fn camera(&self, view_id: &str) -> Result<CameraView, SceneError> {
        let v = self.view(view_id)?;
        let extrinsic = v
            .extrinsic
            .clone()
            .ok_or_else(|| SceneError::MissingExtrinsic(view_id.into()))?;
        Ok(CameraView {
            view_id: v.view_id.clone(),
            intrinsics: v.intrinsics.clone(),
            extrinsic,
        })
    }

    /// Cameras and contours for the registration views, in listed order.
    pub fn registration_inputs(&self) -> Result<(Vec<CameraView>, Vec<ViewContours>), SceneError> {
        let mut cams = Vec::new();
        let mut contours = Vec::new();
        for id in &self.registration_views {
            cams.push(self.camera(id)?);
            contours.push(self.view(id)?.contours_px.clone());
        }
        Ok((cams, contours))
    }

    pub fn control_cameras(&self) -> Result<Vec<CameraView>, SceneError> {
        self.control_views
            .iter()
            .map(|id| self.camera(id))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SceneError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        use std::io::Write;
        writeln!(f)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SceneError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    fn tiny_scene() -> Scene {
        let mut contours = ViewContours::new();
        contours.insert(1, vec![[10.0, 20.0], [11.5, 21.5]]);
        contours.insert(2, vec![[500.0, 500.0]]);
        Scene {
            views: vec![
                SceneView {
                    view_id: "a".into(),
                    intrinsics: CameraIntrinsics {
                        focal_px: 3289.5,
                        principal_point_px: Vector2::new(488.0, 488.0),
                        pixel_pitch_mm: 0.304,
                    },
                    extrinsic: Some(RigidPose::identity()),
                    bead_detections: Some(vec![[1.0, 2.0]]),
                    contours_px: contours,
                },
                SceneView {
                    view_id: "b".into(),
                    intrinsics: CameraIntrinsics::standard(3289.5),
                    extrinsic: None,
                    bead_detections: None,
                    contours_px: ViewContours::new(),
                },
            ],
            registration_views: vec!["a".into()],
            control_views: vec!["b".into()],
            ground_truth_pose: Some(RigidPose::identity()),
        }
    }

    #[test]
    fn json_roundtrip_is_byte_stable() {
        let scene = tiny_scene();
        let a = serde_json::to_string_pretty(&scene).unwrap();
        let back: Scene = serde_json::from_str(&a).unwrap();
        assert_eq!(back, scene);
        let b = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_extrinsic_and_unknown_views_error() {
        let scene = tiny_scene();
        assert!(matches!(
            scene.camera("b"),
            Err(SceneError::MissingExtrinsic(_))
        ));
        assert!(matches!(
            scene.view("nope"),
            Err(SceneError::UnknownView(_))
        ));
        assert!(scene.camera("a").is_ok());
    }

    #[test]
    fn registration_inputs_follow_listed_order() {
        let scene = tiny_scene();
        let (cams, contours) = scene.registration_inputs().unwrap();
        assert_eq!(cams.len(), 1);
        assert_eq!(cams[0].view_id, "a");
        assert_eq!(contours[0].get(&1).unwrap().len(), 2);
    }
}

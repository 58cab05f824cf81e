//! Multi-view 2D/3D rigid registration of labeled surface meshes to
//! per-view contour observations.
//!
//! All lengths are millimeters and all image coordinates are pixels
//! unless a name says otherwise. Poses map model coordinates to world
//! coordinates; camera extrinsics map world to camera, with +z looking
//! into the scene.

pub mod batch;
pub mod calib;
pub mod geometry;
pub mod lm;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod ply;
pub mod registration;
pub mod scene;
pub mod silhouette;
pub mod sweep;
pub mod synth;

pub use geometry::{CameraIntrinsics, CameraView, GeometryError, RigidPose};
pub use mesh::{LabeledMesh, MeshError};
pub use registration::{
    register, register_with_restart, RegistrationConfig, RegistrationMode, RegistrationReport,
};
pub use scene::{Scene, SceneView, ViewContours};

//! Rigid poses, camera models, and perspective projection.
//!
//! A `RigidPose` maps model coordinates into world coordinates. Camera
//! extrinsics are themselves `RigidPose` values mapping world into
//! camera coordinates, so a model point reaches the image through
//! `extrinsic * pose`. Rotations are stored as orthonormal matrices;
//! Euler angles exist only at the boundary (initialization, perturbation,
//! reports) and never inside the optimizer.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Detector pixel pitch in mm/px: a 296.7 mm square detector read out
/// at 976 x 976 px.
pub const PIXEL_PITCH_MM: f64 = 296.7 / 976.0;

/// Detector width and height in pixels.
pub const IMAGE_SIZE_PX: f64 = 976.0;

/// Depth below which a point counts as behind the camera, in mm.
pub const MIN_DEPTH_MM: f64 = 1e-9;

/// Orthonormality tolerance for rotation matrices.
const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation matrix is not orthonormal with determinant +1 (defect {defect:.3e})")]
    InvalidRotation { defect: f64 },
    #[error("point projects at non-positive depth ({depth_mm:.3e} mm)")]
    NonPositiveDepth { depth_mm: f64 },
}

/// Rigid transform: `x_out = rotation * x_in + translation_mm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation_mm: Vector3<f64>,
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose {
            rotation: Matrix3::identity(),
            translation_mm: Vector3::zeros(),
        }
    }

    /// Builds a pose from parts, rejecting rotations that are not
    /// orthonormal with determinant +1 within 1e-9.
    pub fn from_parts(
        rotation: Matrix3<f64>,
        translation_mm: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let defect = rotation_defect(&rotation);
        if defect > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation { defect });
        }
        Ok(RigidPose {
            rotation,
            translation_mm,
        })
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation_mm
    }

    /// Composition: `compose(a, b).apply(p) == a.apply(b.apply(p))`.
    pub fn compose(a: &RigidPose, b: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: a.rotation * b.rotation,
            translation_mm: a.rotation * b.translation_mm + a.translation_mm,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation_mm: -(rt * self.translation_mm),
        }
    }

    /// Applies a small local update `(omega, tau)`: rotation by the
    /// axis-angle vector `omega` composed on the left, translation
    /// incremented by `tau`. This is the optimizer's parametrization.
    pub fn update(&self, omega: &Vector3<f64>, tau: &Vector3<f64>) -> RigidPose {
        RigidPose {
            rotation: axis_angle_matrix(omega) * self.rotation,
            translation_mm: self.translation_mm + tau,
        }
    }

    /// Projects accumulated floating point drift back onto the rotation
    /// group. Cheap enough to run after every accepted optimizer step.
    pub fn orthonormalize(&mut self) {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        self.rotation = r;
    }

    pub fn rotation_defect(&self) -> f64 {
        rotation_defect(&self.rotation)
    }
}

fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    ortho.max(det)
}

/// Rodrigues formula: rotation matrix for the axis-angle vector `omega`
/// (direction = axis, norm = angle in radians).
pub fn axis_angle_matrix(omega: &Vector3<f64>) -> Matrix3<f64> {
    let angle = omega.norm();
    if angle < 1e-12 {
        // Second order expansion keeps the map smooth through zero.
        let k = skew(omega);
        return Matrix3::identity() + k + 0.5 * (k * k);
    }
    let axis = omega / angle;
    let k = skew(&axis);
    Matrix3::identity() + angle.sin() * k + (1.0 - angle.cos()) * (k * k)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation about an arbitrary axis line through `center`.
pub fn rotation_about_line(
    axis_unit: &Vector3<f64>,
    center: &Vector3<f64>,
    angle_rad: f64,
) -> RigidPose {
    let r = axis_angle_matrix(&(axis_unit * angle_rad));
    RigidPose {
        rotation: r,
        translation_mm: center - r * center,
    }
}

/// Euler convention used throughout: intrinsic Z-Y-X, degrees.
/// `R = Rz(phi) * Ry(theta) * Rx(psi)`; psi is the innermost rotation,
/// about the model x axis, which the synthetic phantom aligns with the
/// mesh's first principal axis.
pub fn euler_to_pose(
    phi_deg: f64,
    theta_deg: f64,
    psi_deg: f64,
    translation_mm: Vector3<f64>,
) -> RigidPose {
    let (p, t, s) = (
        phi_deg.to_radians(),
        theta_deg.to_radians(),
        psi_deg.to_radians(),
    );
    let rz = Matrix3::new(p.cos(), -p.sin(), 0.0, p.sin(), p.cos(), 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(t.cos(), 0.0, t.sin(), 0.0, 1.0, 0.0, -t.sin(), 0.0, t.cos());
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, s.cos(), -s.sin(), 0.0, s.sin(), s.cos());
    RigidPose {
        rotation: rz * ry * rx,
        translation_mm,
    }
}

/// Recovers (phi, theta, psi) in degrees from a rotation matrix under
/// the same Z-Y-X convention. At gimbal lock (|cos theta| ~ 0) psi is
/// set to zero and phi absorbs the remaining rotation; the returned
/// triple still reproduces the matrix.
pub fn pose_to_euler(pose: &RigidPose) -> (f64, f64, f64) {
    let r = &pose.rotation;
    let sin_theta = -r[(2, 0)];
    let cos_theta = (r[(2, 1)] * r[(2, 1)] + r[(2, 2)] * r[(2, 2)]).sqrt();
    let theta = sin_theta.atan2(cos_theta);
    let (phi, psi) = if cos_theta > 1e-9 {
        (r[(1, 0)].atan2(r[(0, 0)]), r[(2, 1)].atan2(r[(2, 2)]))
    } else {
        ((-r[(0, 1)]).atan2(r[(1, 1)]), 0.0)
    };
    (phi.to_degrees(), theta.to_degrees(), psi.to_degrees())
}

/// Pinhole intrinsics. `focal_px` is focal length divided by pixel
/// pitch; the principal point sits in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub principal_point_px: Vector2<f64>,
    pub pixel_pitch_mm: f64,
}

impl CameraIntrinsics {
    /// The detector geometry used by every synthetic scene: 976 px
    /// square image, 296.7 mm square detector.
    pub fn standard(focal_px: f64) -> Self {
        CameraIntrinsics {
            focal_px,
            principal_point_px: Vector2::new(IMAGE_SIZE_PX / 2.0, IMAGE_SIZE_PX / 2.0),
            pixel_pitch_mm: PIXEL_PITCH_MM,
        }
    }
}

/// One calibrated view: intrinsics plus world-to-camera extrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub view_id: String,
    pub intrinsics: CameraIntrinsics,
    pub extrinsic: RigidPose,
}

impl CameraView {
    /// Projects a world point to pixel coordinates.
    pub fn project(&self, world_mm: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        let cam = self.extrinsic.apply(world_mm);
        if cam.z <= MIN_DEPTH_MM {
            return Err(GeometryError::NonPositiveDepth { depth_mm: cam.z });
        }
        Ok(Vector2::new(
            self.intrinsics.focal_px * cam.x / cam.z + self.intrinsics.principal_point_px.x,
            self.intrinsics.focal_px * cam.y / cam.z + self.intrinsics.principal_point_px.y,
        ))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.extrinsic.rotation.transpose() * self.extrinsic.translation_mm)
    }

    /// Unit ray direction in camera coordinates for a pixel.
    pub fn bearing(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (px.x - self.intrinsics.principal_point_px.x) / self.intrinsics.focal_px,
            (px.y - self.intrinsics.principal_point_px.y) / self.intrinsics.focal_px,
            1.0,
        )
        .normalize()
    }

    /// View with the camera at `eye` looking at `target`, image up
    /// roughly along `up`.
    pub fn look_at(
        view_id: impl Into<String>,
        intrinsics: CameraIntrinsics,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        // Rows of R are the camera axes expressed in world coordinates.
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation_mm = -(rotation * eye);
        CameraView {
            view_id: view_id.into(),
            intrinsics,
            extrinsic: RigidPose {
                rotation,
                translation_mm,
            },
        }
    }
}

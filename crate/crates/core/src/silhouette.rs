//! Silhouette extraction from a labeled mesh under a rigid pose.
//!
//! An edge is on the silhouette exactly when its two incident triangles
//! face opposite ways relative to the camera center. Sample points live
//! in the model frame so the same silhouette can be reprojected under a
//! changing pose estimate without re-extraction of the contour geometry.

use crate::geometry::{CameraView, GeometryError, RigidPose};
use crate::mesh::LabeledMesh;
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SilhouetteError {
    #[error("sample spacing must be positive, got {0}")]
    NonPositiveSpacing(f64),
}

/// A point sampled on a silhouette edge, in model coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSample {
    pub position_mm: Vector3<f64>,
    pub class: u8,
    /// Index into the mesh edge list this sample came from.
    pub source_edge: u32,
}

/// A silhouette sample projected into a view.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSample {
    pub px: Vector2<f64>,
    pub class: u8,
    pub position_mm: Vector3<f64>,
}

/// Extracts silhouette samples of `mesh` posed by `pose` as seen from `view`.
///
/// Edges whose endpoints carry different classes are dropped: their class is
/// ambiguous and real contour labelings would disagree there too. Samples are
/// placed at segment midpoints with adjacent spacing at most
/// `sample_spacing_mm` along each silhouette edge, ordered by edge index.
pub fn extract_silhouette(
    mesh: &LabeledMesh,
    pose: &RigidPose,
    view: &CameraView,
    sample_spacing_mm: f64,
) -> Result<Vec<SilhouetteSample>, SilhouetteError> {
    if !(sample_spacing_mm > 0.0) {
        return Err(SilhouetteError::NonPositiveSpacing(sample_spacing_mm));
    }
    // Visibility depends only on the camera center, expressed in model frame.
    let center_model = pose.inverse().apply(&view.center());

    let front: Vec<bool> = (0..mesh.triangles.len())
        .map(|t| {
            let n = mesh.triangle_normal(t);
            let p = mesh.vertices[mesh.triangles[t][0] as usize];
            n.dot(&(center_model - p)) > 0.0
        })
        .collect();

    let mut samples = Vec::new();
    for (ei, edge) in mesh.edges().iter().enumerate() {
        if front[edge.tris[0] as usize] == front[edge.tris[1] as usize] {
            continue;
        }
        let (c0, c1) = (
            mesh.classes[edge.v[0] as usize],
            mesh.classes[edge.v[1] as usize],
        );
        if c0 != c1 {
            continue;
        }
        // Orient the edge by coordinates, not indices, so sample positions
        // are bitwise identical however the mesh happens to be indexed.
        let (a, b) = {
            let p = mesh.vertices[edge.v[0] as usize];
            let q = mesh.vertices[edge.v[1] as usize];
            if (q.x, q.y, q.z) < (p.x, p.y, p.z) {
                (q, p)
            } else {
                (p, q)
            }
        };
        let n = ((b - a).norm() / sample_spacing_mm).ceil().max(1.0) as usize;
        for i in 0..n {
            let t = (i as f64 + 0.5) / n as f64;
            samples.push(SilhouetteSample {
                position_mm: a + (b - a) * t,
                class: c0,
                source_edge: ei as u32,
            });
        }
    }
    Ok(samples)
}

/// Projects silhouette samples into pixel coordinates under `pose` and `view`.
pub fn project_silhouette(
    samples: &[SilhouetteSample],
    pose: &RigidPose,
    view: &CameraView,
) -> Result<Vec<ProjectedSample>, GeometryError> {
    samples
        .iter()
        .map(|s| {
            let px = view.project(&pose.apply(&s.position_mm))?;
            Ok(ProjectedSample {
                px,
                class: s.class,
                position_mm: s.position_mm,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::mesh::LabeledMesh;
    use crate::synth::{build_phantom, build_sphere, PhantomSpec, SphereSpec};
    use nalgebra::Matrix3;

    fn test_view(eye: Vector3<f64>) -> CameraView {
        CameraView::look_at(
            "test",
            CameraIntrinsics::standard(3289.5),
            eye,
            Vector3::zeros(),
            Vector3::x(),
        )
    }

    fn sphere(radius: f64, res: u32) -> LabeledMesh {
        build_sphere(
            &SphereSpec {
                center_mm: Vector3::zeros(),
                radius_mm: radius,
                rings: res,
                segments: res,
            },
            1,
        )
        .unwrap()
    }

    /// Distance from a point to the analytic tangency circle of a sphere at
    /// the origin seen from camera center `c`: the circle of radius
    /// r*sqrt(1-(r/d)^2) in the plane at height r^2/d toward the camera.
    fn dist_to_tangency_circle(p: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> f64 {
        let d = c.norm();
        let u = c / d;
        let h = p.dot(&u);
        let rho = (p - u * h).norm();
        let h0 = r * r / d;
        let r0 = r * (1.0 - (r / d).powi(2)).sqrt();
        ((h - h0).powi(2) + (rho - r0).powi(2)).sqrt()
    }

    fn sphere_circle_errors(res: u32) -> (f64, f64) {
        let mesh = sphere(20.0, res);
        let eye = Vector3::new(150.0, -100.0, -650.0);
        let view = test_view(eye);
        let samples = extract_silhouette(&mesh, &RigidPose::identity(), &view, 1.0).unwrap();
        assert!(samples.len() > 50);
        let dists: Vec<f64> = samples
            .iter()
            .map(|s| dist_to_tangency_circle(&s.position_mm, &eye, 20.0))
            .collect();
        let max = dists.iter().cloned().fold(0.0, f64::max);
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        (max, mean)
    }

    #[test]
    fn sphere_silhouette_lies_on_tangency_circle() {
        let (max, mean) = sphere_circle_errors(64);
        // Sample points sit on mesh edges near the terminator, so the error
        // is bounded by roughly one edge length (~2 mm at this resolution).
        assert!(max < 2.5, "max distance to tangency circle {max}");
        assert!(mean < 1.0, "mean distance to tangency circle {mean}");
    }

    #[test]
    fn doubling_resolution_tightens_the_silhouette() {
        let (max_lo, mean_lo) = sphere_circle_errors(48);
        let (max_hi, mean_hi) = sphere_circle_errors(96);
        assert!(max_hi < max_lo, "max {max_hi} !< {max_lo}");
        assert!(mean_hi < 0.6 * mean_lo, "mean {mean_hi} !< 0.6*{mean_lo}");
    }

    #[test]
    fn projected_silhouette_follows_convex_hull_of_projected_vertices() {
        let mesh = sphere(25.0, 40);
        let pose = RigidPose::identity();
        let view = test_view(Vector3::new(0.0, 0.0, -700.0));
        let samples = extract_silhouette(&mesh, &pose, &view, 1.0).unwrap();
        let projected = project_silhouette(&samples, &pose, &view).unwrap();

        let pts: Vec<[f64; 2]> = mesh
            .vertices
            .iter()
            .map(|v| {
                let p = view.project(&pose.apply(v)).unwrap();
                [p.x, p.y]
            })
            .collect();
        let hull = convex_hull(&pts);
        assert!(hull.len() >= 3);

        // Longest projected silhouette edge bounds the discretization error.
        let mut max_edge_px = 0.0f64;
        for s in &samples {
            let e = &mesh.edges()[s.source_edge as usize];
            let a = view.project(&mesh.vertices[e.v[0] as usize]).unwrap();
            let b = view.project(&mesh.vertices[e.v[1] as usize]).unwrap();
            max_edge_px = max_edge_px.max((a - b).norm());
        }
        for p in &projected {
            let d = dist_to_polygon(&[p.px.x, p.px.y], &hull);
            assert!(
                d <= 2.0 * max_edge_px,
                "sample {d} px from hull, edge bound {max_edge_px}"
            );
        }
    }

    #[test]
    fn camera_roll_about_boresight_keeps_the_edge_set() {
        let mesh = build_phantom(&PhantomSpec::standard()).unwrap();
        let pose = RigidPose::identity();
        let view = test_view(Vector3::new(100.0, 200.0, -680.0));
        let mut rolled = view.clone();
        let flip = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        rolled.extrinsic = RigidPose::from_parts(
            flip * view.extrinsic.rotation,
            flip * view.extrinsic.translation_mm,
        )
        .unwrap();
        assert!((rolled.center() - view.center()).norm() < 1e-9);

        let a = extract_silhouette(&mesh, &pose, &view, 1.0).unwrap();
        let b = extract_silhouette(&mesh, &pose, &rolled, 1.0).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.source_edge, y.source_edge);
            assert_eq!(x.position_mm, y.position_mm);
        }
    }

    #[test]
    fn mixed_class_edges_are_dropped() {
        let verts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(40.0, 0.0, 0.0),
            Vector3::new(0.0, 40.0, 0.0),
            Vector3::new(0.0, 0.0, 40.0),
        ];
        let tris = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        let uniform = LabeledMesh::new(verts.clone(), vec![1; 4], tris.clone()).unwrap();
        let mixed = LabeledMesh::new(verts, vec![1, 1, 2, 2], tris).unwrap();
        let view = test_view(Vector3::new(300.0, 150.0, -600.0));
        let pose = RigidPose::identity();

        let su = extract_silhouette(&uniform, &pose, &view, 1.0).unwrap();
        let sm = extract_silhouette(&mixed, &pose, &view, 1.0).unwrap();
        assert!(!su.is_empty());
        assert!(sm.len() < su.len(), "no mixed edge was dropped");
        for s in &sm {
            let e = &mixed.edges()[s.source_edge as usize];
            assert_eq!(
                mixed.classes[e.v[0] as usize],
                mixed.classes[e.v[1] as usize]
            );
            assert_eq!(s.class, mixed.classes[e.v[0] as usize]);
        }
    }

    #[test]
    fn phantom_silhouette_equals_union_of_per_class_silhouettes() {
        let mesh = build_phantom(&PhantomSpec::standard()).unwrap();
        let pose = RigidPose::identity();
        let view = test_view(Vector3::new(50.0, -120.0, -700.0));
        let full = extract_silhouette(&mesh, &pose, &view, 1.0).unwrap();

        let mut union = Vec::new();
        for class in 1..=3u8 {
            let sub = mesh.class_submesh(class).unwrap();
            union.extend(extract_silhouette(&sub, &pose, &view, 1.0).unwrap());
        }
        assert_eq!(full.len(), union.len());

        let key = |s: &SilhouetteSample| {
            (
                s.position_mm.x.to_bits(),
                s.position_mm.y.to_bits(),
                s.position_mm.z.to_bits(),
                s.class,
            )
        };
        let mut fk: Vec<_> = full.iter().map(key).collect();
        let mut uk: Vec<_> = union.iter().map(key).collect();
        fk.sort_unstable();
        uk.sort_unstable();
        assert_eq!(fk, uk);
    }

    #[test]
    fn bad_spacing_is_rejected() {
        let mesh = sphere(10.0, 8);
        let view = test_view(Vector3::new(0.0, 0.0, -500.0));
        assert!(extract_silhouette(&mesh, &RigidPose::identity(), &view, 0.0).is_err());
        assert!(extract_silhouette(&mesh, &RigidPose::identity(), &view, -1.0).is_err());
    }

    // Test-local 2D convex hull (Andrew monotone chain), independent of the
    // silhouette implementation.
    fn convex_hull(pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let mut p: Vec<[f64; 2]> = pts.to_vec();
        p.sort_by(|a, b| a.partial_cmp(b).unwrap());
        p.dedup();
        let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| {
            (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
        };
        let build = |iter: &mut dyn Iterator<Item = &[f64; 2]>| {
            let mut out: Vec<[f64; 2]> = Vec::new();
            for &q in iter {
                while out.len() >= 2 && cross(&out[out.len() - 2], &out[out.len() - 1], &q) <= 0.0 {
                    out.pop();
                }
                out.push(q);
            }
            out
        };
        let mut lower = build(&mut p.iter());
        let mut upper = build(&mut p.iter().rev());
        lower.pop();
        upper.pop();
        lower.append(&mut upper);
        lower
    }

    fn dist_to_polygon(p: &[f64; 2], poly: &[[f64; 2]]) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..poly.len() {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            let ab = [b[0] - a[0], b[1] - a[1]];
            let ap = [p[0] - a[0], p[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 > 0.0 {
                ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dx = p[0] - (a[0] + t * ab[0]);
            let dy = p[1] - (a[1] + t * ab[1]);
            best = best.min((dx * dx + dy * dy).sqrt());
        }
        best
    }
}

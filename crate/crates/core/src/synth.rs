//! Synthetic phantom construction and scene generation.
//!
//! The phantom imitates a distal femur at desk scale: one cylinder as
//! the diaphysis along +x (class 1) and two spheres as condyles offset
//! in +y (class 2) and -y (class 3) near the far x end. Each primitive
//! is a separate closed component, so per-substructure sub-meshes are
//! watertight without any cutting or capping, and vertex labels carry
//! exact provenance.

use crate::calib::FiducialModel;
use crate::geometry::{CameraIntrinsics, CameraView, RigidPose, IMAGE_SIZE_PX};
use crate::mesh::{LabeledMesh, MeshError};
use crate::scene::{Scene, SceneView, ViewContours};
use crate::silhouette::extract_silhouette;
use nalgebra::{Vector2, Vector3};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("generated mesh failed validation: {0}")]
    NonManifoldResult(#[from] MeshError),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("silhouette of view '{view_id}' projects outside the {size} px image")]
    OutOfFrame { view_id: String, size: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SphereSpec {
    pub center_mm: Vector3<f64>,
    pub radius_mm: f64,
    pub rings: u32,
    pub segments: u32,
}

/// Cylinder plus two spheres. `condyles[0]` sits at +y and is labeled
/// class 2, `condyles[1]` at -y labeled class 3.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub cylinder_radius_mm: f64,
    /// Axial extent of the cylinder, [x_start, x_end].
    pub cylinder_x_mm: [f64; 2],
    pub radial_segments: u32,
    pub axial_segments: u32,
    pub condyles: [SphereSpec; 2],
}

impl PhantomSpec {
    /// Default asymmetric phantom: condyles of unequal size and
    /// slightly different axial position, which breaks the mirror
    /// symmetry the way a real femur does.
    pub fn standard() -> Self {
        PhantomSpec {
            cylinder_radius_mm: 14.0,
            cylinder_x_mm: [-90.0, 30.0],
            radial_segments: 24,
            axial_segments: 24,
            condyles: [
                SphereSpec {
                    center_mm: Vector3::new(57.0, 25.0, 0.0),
                    radius_mm: 23.0,
                    rings: 24,
                    segments: 32,
                },
                SphereSpec {
                    center_mm: Vector3::new(59.0, -25.0, 0.0),
                    radius_mm: 18.0,
                    rings: 24,
                    segments: 32,
                },
            ],
        }
    }

    /// Mirror-symmetric variant: equal condyles at mirrored positions.
    /// A rotation of 180 degrees about the shaft axis maps the shape
    /// onto itself (up to labels), which is the failure mode the
    /// restart controller exists for.
    pub fn symmetric() -> Self {
        let mut spec = PhantomSpec::standard();
        spec.condyles[0] = SphereSpec {
            center_mm: Vector3::new(58.0, 25.0, 0.0),
            radius_mm: 21.0,
            rings: 24,
            segments: 32,
        };
        spec.condyles[1] = SphereSpec {
            center_mm: Vector3::new(58.0, -25.0, 0.0),
            radius_mm: 21.0,
            rings: 24,
            segments: 32,
        };
        spec
    }

    /// Randomly scales every dimension by up to `rel` (e.g. 0.2 for
    /// +-20 percent), keeping the condyles clear of the shaft.
    pub fn jittered(seed: u64, rel: f64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let base = PhantomSpec::standard();
        let cyl_r = base.cylinder_radius_mm * (1.0 + u(-rel, rel));
        let half_len = (base.cylinder_x_mm[1] - base.cylinder_x_mm[0]) / 2.0 * (1.0 + u(-rel, rel));
        let cyl_mid = -30.0;
        let x_end = cyl_mid + half_len;
        let r0 = base.condyles[0].radius_mm * (1.0 + u(-rel, rel));
        let r1 = base.condyles[1].radius_mm * (1.0 + u(-rel, rel));
        let y_off = 25.0 * (1.0 + u(-rel, rel));
        let gap = 4.0;
        PhantomSpec {
            cylinder_radius_mm: cyl_r,
            cylinder_x_mm: [cyl_mid - half_len, x_end],
            radial_segments: base.radial_segments,
            axial_segments: base.axial_segments,
            condyles: [
                SphereSpec {
                    center_mm: Vector3::new(x_end + gap + r0 + u(-2.0, 2.0), y_off, 0.0),
                    radius_mm: r0,
                    rings: 24,
                    segments: 32,
                },
                SphereSpec {
                    center_mm: Vector3::new(x_end + gap + r1 + u(-2.0, 2.0), -y_off, 0.0),
                    radius_mm: r1,
                    rings: 24,
                    segments: 32,
                },
            ],
        }
    }
}

/// Raw component before merging: vertices, one class, triangles.
type Component = (Vec<Vector3<f64>>, u8, Vec<[u32; 3]>);

/// Closed cylinder along x with flat end caps.
pub fn cylinder_component(
    radius: f64,
    x_range: [f64; 2],
    radial_segments: u32,
    axial_segments: u32,
    class: u8,
) -> Component {
    let s = radial_segments as usize;
    let a = axial_segments as usize;
    let mut vertices = Vec::with_capacity((a + 1) * s + 2);
    for k in 0..=a {
        let x = x_range[0] + (x_range[1] - x_range[0]) * k as f64 / a as f64;
        for l in 0..s {
            let th = 2.0 * std::f64::consts::PI * l as f64 / s as f64;
            vertices.push(Vector3::new(x, radius * th.cos(), radius * th.sin()));
        }
    }
    let c0 = vertices.len() as u32;
    vertices.push(Vector3::new(x_range[0], 0.0, 0.0));
    let c1 = vertices.len() as u32;
    vertices.push(Vector3::new(x_range[1], 0.0, 0.0));

    let ring = |k: usize, l: usize| (k * s + (l % s)) as u32;
    let mut triangles = Vec::new();
    for k in 0..a {
        for l in 0..s {
            let (p, q) = (ring(k, l), ring(k, l + 1));
            let (p1, q1) = (ring(k + 1, l), ring(k + 1, l + 1));
            triangles.push([p, q, q1]);
            triangles.push([p, q1, p1]);
        }
    }
    for l in 0..s {
        triangles.push([c0, ring(0, l + 1), ring(0, l)]);
        triangles.push([c1, ring(a, l), ring(a, l + 1)]);
    }
    (vertices, class, triangles)
}

/// Closed UV sphere with poles on the x axis.
pub fn sphere_component(spec: &SphereSpec, class: u8) -> Component {
    let r = spec.rings as usize;
    let s = spec.segments as usize;
    let c = spec.center_mm;
    let rad = spec.radius_mm;
    let mut vertices = Vec::with_capacity((r - 1) * s + 2);
    for k in 1..r {
        let phi = std::f64::consts::PI * k as f64 / r as f64;
        let (x, rho) = (rad * phi.cos(), rad * phi.sin());
        for l in 0..s {
            let th = 2.0 * std::f64::consts::PI * l as f64 / s as f64;
            vertices.push(c + Vector3::new(x, rho * th.cos(), rho * th.sin()));
        }
    }
    let north = vertices.len() as u32;
    vertices.push(c + Vector3::new(rad, 0.0, 0.0));
    let south = vertices.len() as u32;
    vertices.push(c - Vector3::new(rad, 0.0, 0.0));

    let ring = |k: usize, l: usize| ((k - 1) * s + (l % s)) as u32;
    let mut triangles = Vec::new();
    for l in 0..s {
        triangles.push([north, ring(1, l), ring(1, l + 1)]);
        triangles.push([south, ring(r - 1, l + 1), ring(r - 1, l)]);
    }
    for k in 1..r - 1 {
        for l in 0..s {
            let (p, q) = (ring(k, l), ring(k, l + 1));
            let (p1, q1) = (ring(k + 1, l), ring(k + 1, l + 1));
            triangles.push([p, q1, q]);
            triangles.push([p, p1, q1]);
        }
    }
    (vertices, class, triangles)
}

fn merge(components: Vec<Component>) -> Result<LabeledMesh, MeshError> {
    let mut vertices = Vec::new();
    let mut classes = Vec::new();
    let mut triangles = Vec::new();
    for (vs, class, ts) in components {
        let base = vertices.len() as u32;
        classes.extend(std::iter::repeat(class).take(vs.len()));
        vertices.extend(vs);
        triangles.extend(
            ts.into_iter()
                .map(|t| [t[0] + base, t[1] + base, t[2] + base]),
        );
    }
    LabeledMesh::new(vertices, classes, triangles)
}

/// Builds the labeled phantom mesh from a spec.
pub fn build_phantom(spec: &PhantomSpec) -> Result<LabeledMesh, SynthError> {
    if spec.cylinder_radius_mm <= 0.0
        || spec.cylinder_x_mm[1] <= spec.cylinder_x_mm[0]
        || spec.condyles.iter().any(|c| c.radius_mm <= 0.0)
    {
        return Err(SynthError::InvalidSpec(
            "radii must be positive and the cylinder extent non-empty".into(),
        ));
    }
    if spec.radial_segments < 3
        || spec.axial_segments < 1
        || spec.condyles.iter().any(|c| c.rings < 3 || c.segments < 3)
    {
        return Err(SynthError::InvalidSpec("tessellation too coarse".into()));
    }
    let mesh = merge(vec![
        cylinder_component(
            spec.cylinder_radius_mm,
            spec.cylinder_x_mm,
            spec.radial_segments,
            spec.axial_segments,
            1,
        ),
        sphere_component(&spec.condyles[0], 2),
        sphere_component(&spec.condyles[1], 3),
    ])?;
    Ok(mesh)
}

/// A sphere alone as a labeled mesh; used by oracle tests.
pub fn build_sphere(spec: &SphereSpec, class: u8) -> Result<LabeledMesh, SynthError> {
    if spec.radius_mm <= 0.0 {
        return Err(SynthError::InvalidSpec("radius must be positive".into()));
    }
    Ok(merge(vec![sphere_component(spec, class)])?)
}

/// Circle of cameras around the world x axis, all aimed at the origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRingSpec {
    pub n_views: usize,
    pub spacing_deg: f64,
    pub radius_mm: f64,
    pub focal_px: f64,
}

impl Default for CameraRingSpec {
    /// Ten views 9 degrees apart at 750 mm, focal length matching a
    /// 1000 mm source-detector distance on the standard detector.
    fn default() -> Self {
        CameraRingSpec {
            n_views: 10,
            spacing_deg: 9.0,
            radius_mm: 750.0,
            focal_px: 3289.5,
        }
    }
}

impl CameraRingSpec {
    pub fn views(&self) -> Vec<CameraView> {
        (0..self.n_views)
            .map(|k| {
                let angle = (k as f64 * self.spacing_deg).to_radians();
                let eye = Vector3::new(
                    0.0,
                    self.radius_mm * angle.cos(),
                    self.radius_mm * angle.sin(),
                );
                CameraView::look_at(
                    format!("view{k:02}"),
                    CameraIntrinsics::standard(self.focal_px),
                    eye,
                    Vector3::zeros(),
                    Vector3::x(),
                )
            })
            .collect()
    }
}

/// Contour corruption, applied per view in a fixed order: dropout, then
/// Gaussian jitter, then misclassification, then spurious points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub gaussian_sigma_px: f64,
    pub dropout_fraction: f64,
    pub misclass_fraction: f64,
    pub spurious_fraction: f64,
}

impl NoiseSpec {
    pub fn clean() -> Self {
        NoiseSpec {
            gaussian_sigma_px: 0.0,
            dropout_fraction: 0.0,
            misclass_fraction: 0.0,
            spurious_fraction: 0.0,
        }
    }

    pub fn gaussian(sigma_px: f64) -> Self {
        NoiseSpec {
            gaussian_sigma_px: sigma_px,
            ..NoiseSpec::clean()
        }
    }
}

/// Everything needed to synthesize one observed scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub ring: CameraRingSpec,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Ring indices of the views whose contours drive registration.
    pub registration_views: Vec<usize>,
    /// Ring indices of held-out scoring views.
    pub control_views: Vec<usize>,
    pub sample_spacing_mm: f64,
    /// When set, views also get bead cage detections with this noise.
    pub beads: Option<BeadNoiseSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeadNoiseSpec {
    pub sigma_px: f64,
    pub n_missing: usize,
    pub n_spurious: usize,
}

impl Default for SceneSpec {
    /// Registration uses views 0 and 6 (54 degrees apart); views 2..4
    /// are held out for scoring.
    fn default() -> Self {
        SceneSpec {
            ring: CameraRingSpec::default(),
            noise: NoiseSpec::clean(),
            seed: 0,
            registration_views: vec![0, 6],
            control_views: vec![2, 3, 4],
            sample_spacing_mm: 1.0,
            beads: None,
        }
    }
}

fn misclassify(class: u8, rng: &mut StdRng) -> u8 {
    let options: [u8; 2] = match class {
        1 => [2, 3],
        2 => [3, 1],
        3 => [2, 1],
        _ => [1, 2],
    };
    options[rng.random_range(0..2)]
}

/// Synthesizes contour observations of `mesh` posed at `true_pose` for
/// every ring view. Fails with `OutOfFrame` if any clean silhouette point
/// leaves the detector, so noise budgets stay interpretable.
pub fn generate_scene(
    mesh: &LabeledMesh,
    true_pose: &RigidPose,
    spec: &SceneSpec,
) -> Result<Scene, SynthError> {
    let cameras = spec.ring.views();
    for &idx in spec.registration_views.iter().chain(&spec.control_views) {
        if idx >= cameras.len() {
            return Err(SynthError::InvalidSpec(format!(
                "view index {idx} outside ring of {}",
                cameras.len()
            )));
        }
    }
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let mut views = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let samples = extract_silhouette(mesh, true_pose, cam, spec.sample_spacing_mm)
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        let clean: Vec<(Vector2<f64>, u8)> = samples
            .iter()
            .map(|s| {
                let px = cam.project(&true_pose.apply(&s.position_mm)).map_err(|_| {
                    SynthError::OutOfFrame {
                        view_id: cam.view_id.clone(),
                        size: IMAGE_SIZE_PX,
                    }
                })?;
                if px.x < 0.0 || px.x > IMAGE_SIZE_PX || px.y < 0.0 || px.y > IMAGE_SIZE_PX {
                    return Err(SynthError::OutOfFrame {
                        view_id: cam.view_id.clone(),
                        size: IMAGE_SIZE_PX,
                    });
                }
                Ok((px, s.class))
            })
            .collect::<Result<_, _>>()?;

        let n_clean = clean.len();
        let n_drop = (spec.noise.dropout_fraction * n_clean as f64).round() as usize;
        let mut keep: Vec<usize> = (0..n_clean).collect();
        for _ in 0..n_drop.min(n_clean) {
            let pick = rng.random_range(0..keep.len());
            keep.swap_remove(pick);
        }
        keep.sort_unstable();

        let mut noisy: Vec<(Vector2<f64>, u8)> = keep
            .iter()
            .map(|&i| {
                let (mut px, class) = clean[i];
                if spec.noise.gaussian_sigma_px > 0.0 {
                    let (nx, ny): (f64, f64) = (
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    );
                    px.x += spec.noise.gaussian_sigma_px * nx;
                    px.y += spec.noise.gaussian_sigma_px * ny;
                }
                (px, class)
            })
            .collect();

        let n_mis = (spec.noise.misclass_fraction * noisy.len() as f64).round() as usize;
        let mut idx: Vec<usize> = (0..noisy.len()).collect();
        for _ in 0..n_mis.min(idx.len()) {
            let pick = rng.random_range(0..idx.len());
            let i = idx.swap_remove(pick);
            noisy[i].1 = misclassify(noisy[i].1, &mut rng);
        }

        let n_spur = (spec.noise.spurious_fraction * n_clean as f64).round() as usize;
        for _ in 0..n_spur {
            let px = Vector2::new(
                rng.random_range(0.0..IMAGE_SIZE_PX),
                rng.random_range(0.0..IMAGE_SIZE_PX),
            );
            let class = rng.random_range(1..=3u8);
            noisy.push((px, class));
        }

        let mut contours = ViewContours::new();
        for (px, class) in &noisy {
            contours.entry(*class).or_default().push([px.x, px.y]);
        }

        let bead_detections = spec.beads.as_ref().map(|b| {
            let cage = FiducialModel::standard_cage();
            let (dets, _) = generate_bead_detections(
                &cage,
                cam,
                b.sigma_px,
                b.n_missing,
                b.n_spurious,
                &mut rng,
            );
            dets.iter().map(|p| [p.x, p.y]).collect()
        });

        views.push(SceneView {
            view_id: cam.view_id.clone(),
            intrinsics: cam.intrinsics.clone(),
            extrinsic: Some(cam.extrinsic.clone()),
            bead_detections,
            contours_px: contours,
        });
    }

    let id_of = |k: usize| cameras[k].view_id.clone();
    Ok(Scene {
        views,
        registration_views: spec.registration_views.iter().map(|&k| id_of(k)).collect(),
        control_views: spec.control_views.iter().map(|&k| id_of(k)).collect(),
        ground_truth_pose: Some(true_pose.clone()),
    })
}

/// Projects the bead cage into a view, drops `n_missing` beads, jitters
/// the rest, appends `n_spurious` uniform blobs, and shuffles. The second
/// return value gives the true bead id behind each detection.
pub fn generate_bead_detections(
    model: &FiducialModel,
    view: &CameraView,
    sigma_px: f64,
    n_missing: usize,
    n_spurious: usize,
    rng: &mut StdRng,
) -> (Vec<Vector2<f64>>, Vec<Option<u32>>) {
    let mut order: Vec<usize> = (0..model.beads.len()).collect();
    order.shuffle(rng);
    let dropped = &order[..n_missing.min(order.len())];
    let mut items: Vec<(Vector2<f64>, Option<u32>)> = Vec::new();
    for (i, bead) in model.beads.iter().enumerate() {
        if dropped.contains(&i) {
            continue;
        }
        let Ok(mut px) = view.project(&Vector3::from(bead.xyz_mm)) else {
            continue;
        };
        let (nx, ny): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        px.x += sigma_px * nx;
        px.y += sigma_px * ny;
        items.push((px, Some(bead.id)));
    }
    for _ in 0..n_spurious {
        items.push((
            Vector2::new(
                rng.random_range(0.0..IMAGE_SIZE_PX),
                rng.random_range(0.0..IMAGE_SIZE_PX),
            ),
            None,
        ));
    }
    items.shuffle(rng);
    (
        items.iter().map(|(p, _)| *p).collect(),
        items.iter().map(|(_, id)| *id).collect(),
    )
}

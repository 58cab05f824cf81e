//! View calibration from an unordered set of fiducial bead detections.
//!
//! The bead cage geometry is known in world coordinates but nothing says
//! which detection is which bead, detections may be missing, and spurious
//! blobs may be present. Calibration therefore enumerates (or samples)
//! detection-triple / bead-triple hypotheses, solves each with a
//! three-point pose solver, and keeps the hypothesis explaining the most
//! detections, then alternates pose refinement with re-matching.

use crate::batch::batch_map;
use crate::geometry::{CameraIntrinsics, GeometryError, RigidPose, IMAGE_SIZE_PX};
use crate::lm::{optimize_pose, LmOptions};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("need at least 4 detections, got {found}")]
    InsufficientDetections { found: usize },
    #[error("no pose explains 4 or more detections")]
    NoValidPose,
    #[error("the three world points are collinear")]
    CollinearPoints,
    #[error("no real pose is consistent with the three rays")]
    NoRealSolution,
}

/// One radio-opaque bead at a surveyed world position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bead {
    pub id: u32,
    pub xyz_mm: [f64; 3],
}

/// The fiducial cage: beads rigidly fixed in the world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiducialModel {
    pub beads: Vec<Bead>,
}

impl FiducialModel {
    /// 16 beads on two staggered rings about the x axis, with a fixed
    /// pseudo-random perturbation so no two bead triangles are congruent.
    /// The cage stays inside the shared field of view of a 750 mm camera
    /// ring with the standard detector.
    pub fn standard_cage() -> Self {
        let mut rng = StdRng::seed_from_u64(0x0ca9e);
        let mut beads = Vec::with_capacity(16);
        for ring in 0..2u32 {
            let x = if ring == 0 { -70.0 } else { 70.0 };
            for i in 0..8u32 {
                let angle = std::f64::consts::TAU * (i as f64 + 0.5 * ring as f64) / 8.0;
                let base = Vector3::new(x, 80.0 * angle.cos(), 80.0 * angle.sin());
                let jitter = Vector3::new(
                    rng.random_range(-8.0..8.0),
                    rng.random_range(-8.0..8.0),
                    rng.random_range(-8.0..8.0),
                );
                let p = base + jitter;
                beads.push(Bead {
                    id: ring * 8 + i,
                    xyz_mm: [p.x, p.y, p.z],
                });
            }
        }
        FiducialModel { beads }
    }

    pub fn position(&self, idx: usize) -> Vector3<f64> {
        Vector3::from(self.beads[idx].xyz_mm)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpOptions {
    /// A detection matches a projected bead only within this radius.
    pub inlier_threshold_px: f64,
    /// Enumerate every hypothesis up to this many detections, sample beyond.
    pub max_exhaustive_detections: usize,
    pub sampled_hypotheses: usize,
    pub rng_seed: u64,
    pub max_refine_rounds: usize,
}

impl Default for PnpOptions {
    fn default() -> Self {
        PnpOptions {
            inlier_threshold_px: 0.8,
            max_exhaustive_detections: 12,
            sampled_hypotheses: 200_000,
            rng_seed: 7,
            max_refine_rounds: 5,
        }
    }
}

/// A recovered view pose plus the detection-to-bead assignment behind it.
///
/// Invariant: under `extrinsic`, every matched detection lies within the
/// inlier threshold of its bead's projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub extrinsic: RigidPose,
    /// (detection index, bead id), sorted by detection index.
    pub matches: Vec<(u32, u32)>,
    pub mean_inlier_error_px: f64,
}

fn bearing(intr: &CameraIntrinsics, px: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(
        (px.x - intr.principal_point_px.x) / intr.focal_px,
        (px.y - intr.principal_point_px.y) / intr.focal_px,
        1.0,
    )
    .normalize()
}

fn project(
    intr: &CameraIntrinsics,
    pose: &RigidPose,
    world: &Vector3<f64>,
) -> Option<Vector2<f64>> {
    let cam = pose.apply(world);
    if cam.z <= 1e-9 {
        return None;
    }
    Some(Vector2::new(
        intr.focal_px * cam.x / cam.z + intr.principal_point_px.x,
        intr.focal_px * cam.y / cam.z + intr.principal_point_px.y,
    ))
}

// Ascending-coefficient polynomial product.
fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            out[i + j] += pi * qj;
        }
    }
    out
}

/// Real roots of a polynomial with ascending coefficients, via the
/// companion matrix of the trimmed monic polynomial plus Newton polish.
/// Roots of the monic quadratic x^2 + bx + c, with a small negative
/// discriminant forgiven so grazing double roots survive roundoff.
fn quadratic_roots(b: f64, c: f64) -> Vec<f64> {
    let mut disc = b * b - 4.0 * c;
    if disc < 0.0 {
        if disc > -1e-10 * (b * b + 4.0 * c.abs() + 1.0) {
            disc = 0.0;
        } else {
            return Vec::new();
        }
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        vec![0.0]
    } else {
        vec![q, c / q]
    }
}

/// Roots of the monic cubic x^3 + ax^2 + bx + c by depressing to
/// t^3 + pt + q and branching on its discriminant.
fn cubic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let shift = -a / 3.0;
    let disc = 0.25 * q * q + p * p * p / 27.0;
    // Near-zero discriminants go to the trig branch so near-double roots
    // are kept rather than collapsed into the single-real-root formula.
    let tol = 4.0 * f64::EPSILON * (0.25 * q * q + (p / 3.0).abs().powi(3)).max(1e-300);
    if disc > tol {
        let s = disc.sqrt();
        vec![(-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt() + shift]
    } else if p < 0.0 {
        let rho = (-p / 3.0).sqrt();
        let theta = ((-q / 2.0) / (rho * rho * rho)).clamp(-1.0, 1.0).acos();
        (0..3)
            .map(|k| 2.0 * rho * ((theta - std::f64::consts::TAU * k as f64) / 3.0).cos() + shift)
            .collect()
    } else {
        // disc <= 0 with p >= 0 forces p and q to vanish: a triple root.
        vec![shift]
    }
}

/// Roots of the monic quartic x^4 + ax^3 + bx^2 + cx + d by depressing
/// and factoring into two quadratics via the resolvent cubic.
fn quartic_roots(a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let a2 = a * a;
    let p = b - 3.0 * a2 / 8.0;
    let q = c - a * b / 2.0 + a2 * a / 8.0;
    let r = d - a * c / 4.0 + a2 * b / 16.0 - 3.0 * a2 * a2 / 256.0;
    let shift = -a / 4.0;
    let scale = 1.0 + p.abs() + r.abs();
    let mut ys = Vec::with_capacity(4);
    if q.abs() < 1e-12 * scale {
        for z in quadratic_roots(p, r) {
            if z > 0.0 {
                let s = z.sqrt();
                ys.push(s);
                ys.push(-s);
            } else if z > -1e-10 * scale {
                ys.push(0.0);
            }
        }
    } else {
        // (y^2 + ay + b)(y^2 - ay + g) with u = a^2 the largest root of
        // the resolvent; u > 0 exists because the resolvent is -q^2 at 0.
        let u = cubic_roots(2.0 * p, p * p - 4.0 * r, -q * q)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        if u.is_nan() || u <= 0.0 {
            return Vec::new();
        }
        let alpha = u.sqrt();
        let beta = (p + u - q / alpha) / 2.0;
        let gamma = (p + u + q / alpha) / 2.0;
        ys.extend(quadratic_roots(alpha, beta));
        ys.extend(quadratic_roots(-alpha, gamma));
    }
    ys.iter().map(|y| y + shift).collect()
}

/// Real roots of a polynomial with ascending coefficients, degree <= 4.
/// Closed forms produce the candidates; Newton against the original
/// polynomial polishes them, so the branch tolerances above only have to
/// land candidates near the truth, not on it.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let max_c = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if max_c == 0.0 {
        return Vec::new();
    }
    let mut c: Vec<f64> = coeffs.to_vec();
    while c.len() > 1 && c.last().unwrap().abs() < 1e-12 * max_c {
        c.pop();
    }
    let n = c.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    assert!(n <= 4, "no closed form for degree {n}");
    let lead = c[n];
    let m: Vec<f64> = c.iter().map(|v| v / lead).collect();
    let mut roots = match n {
        1 => vec![-m[0]],
        2 => quadratic_roots(m[1], m[0]),
        3 => cubic_roots(m[2], m[1], m[0]),
        _ => quartic_roots(m[3], m[2], m[1], m[0]),
    };

    let eval = |x: f64| -> (f64, f64) {
        // Horner for p(x) and p'(x).
        let mut p = 0.0;
        let mut dp = 0.0;
        for &ci in c.iter().rev() {
            dp = dp * x + p;
            p = p * x + ci;
        }
        (p, dp)
    };
    for x in roots.iter_mut() {
        for _ in 0..20 {
            let (p, dp) = eval(*x);
            if dp == 0.0 {
                break;
            }
            let step = p / dp;
            *x -= step;
            if step.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-9 * (1.0 + b.abs()));
    roots
}

/// Poses (world to camera) putting the three world points onto the three
/// camera-frame unit rays. Up to four solutions, all with positive depths.
pub fn solve_p3p(
    world: &[Vector3<f64>; 3],
    rays: &[Vector3<f64>; 3],
) -> Result<Vec<RigidPose>, CalibError> {
    let scale = world
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, c| m.max(c.abs()))
        .max(1.0);
    let cross = (world[1] - world[0]).cross(&(world[2] - world[0]));
    if cross.norm() <= 1e-9 * scale * scale {
        return Err(CalibError::CollinearPoints);
    }

    let f: Vec<Vector3<f64>> = rays.iter().map(|r| r.normalize()).collect();
    let a = (world[1] - world[2]).norm();
    let b = (world[0] - world[2]).norm();
    let c = (world[0] - world[1]).norm();
    let (a2, b2, c2) = (a * a, b * b, c * c);
    let cos_alpha = f[1].dot(&f[2]);
    let cos_beta = f[0].dot(&f[2]);
    let cos_gamma = f[0].dot(&f[1]);

    // With u = s2/s1 and v = s3/s1 the law-of-cosines system reduces to
    //   e1(u,v) = b2 u^2 - 2 b2 ca u v + (b2-a2) v^2 + 2 a2 cb v - a2 = 0
    //   e2(u,v) = b2 u^2 - 2 b2 cg u - c2 v^2 + 2 c2 cb v + (b2-c2) = 0
    // and e1 - e2 is linear in u:
    //   u = n(v) / d(v),  n quadratic, d linear.
    let e1 = |u: f64, v: f64| {
        b2 * u * u - 2.0 * b2 * cos_alpha * u * v + (b2 - a2) * v * v + 2.0 * a2 * cos_beta * v - a2
    };
    let e2 = |u: f64, v: f64| {
        b2 * u * u - 2.0 * b2 * cos_gamma * u - c2 * v * v + 2.0 * c2 * cos_beta * v + (b2 - c2)
    };
    let n_poly = [a2 + b2 - c2, -2.0 * (a2 - c2) * cos_beta, a2 - b2 - c2];
    let d_poly = [2.0 * b2 * cos_gamma, -2.0 * b2 * cos_alpha];

    // Substituting u into e2 and clearing d(v)^2 leaves a quartic in v:
    //   b2 n^2 - 2 b2 cg n d + (-c2 v^2 + 2 c2 cb v + b2 - c2) d^2 = 0.
    let q_poly = [b2 - c2, 2.0 * c2 * cos_beta, -c2];
    let mut quartic = poly_mul(&n_poly, &n_poly);
    for c_i in quartic.iter_mut() {
        *c_i *= b2;
    }
    let nd = poly_mul(&n_poly, &d_poly);
    let dd = poly_mul(&d_poly, &d_poly);
    let qdd = poly_mul(&q_poly, &dd);
    for (i, &c_i) in nd.iter().enumerate() {
        quartic[i] -= 2.0 * b2 * cos_gamma * c_i;
    }
    for (i, &c_i) in qdd.iter().enumerate() {
        quartic[i] += c_i;
    }

    let mut poses = Vec::new();
    for v0 in real_roots(&quartic) {
        if v0 <= 0.0 {
            continue;
        }
        // Candidate u from the linear elimination where safe, plus the two
        // roots of e2 as a quadratic in u to cover d(v) ~ 0.
        let mut candidates = Vec::new();
        let d_v = d_poly[0] + d_poly[1] * v0;
        if d_v.abs() > 1e-9 * b2 * (1.0 + v0.abs()) {
            candidates.push((n_poly[0] + n_poly[1] * v0 + n_poly[2] * v0 * v0) / d_v);
        }
        let disc = cos_gamma * cos_gamma - (b2 - c2 - c2 * v0 * v0 + 2.0 * c2 * cos_beta * v0) / b2;
        if disc >= 0.0 {
            candidates.push(cos_gamma + disc.sqrt());
            candidates.push(cos_gamma - disc.sqrt());
        }
        candidates.retain(|&u| u > 0.0 && e1(u, v0).abs() < 1e-5 * (a2 + b2 + c2));
        candidates.sort_by(|x, y| x.partial_cmp(y).unwrap());
        candidates.dedup_by(|x, y| (*x - *y).abs() < 1e-6 * (1.0 + y.abs()));

        for mut u in candidates {
            // Joint Newton on (e1, e2) wipes out root-finding error.
            let mut v = v0;
            for _ in 0..5 {
                let r1 = e1(u, v);
                let r2 = e2(u, v);
                let j11 = 2.0 * b2 * u - 2.0 * b2 * cos_alpha * v;
                let j12 = -2.0 * b2 * cos_alpha * u + 2.0 * (b2 - a2) * v + 2.0 * a2 * cos_beta;
                let j21 = 2.0 * b2 * u - 2.0 * b2 * cos_gamma;
                let j22 = -2.0 * c2 * v + 2.0 * c2 * cos_beta;
                let det = j11 * j22 - j12 * j21;
                if det.abs() < 1e-300 {
                    break;
                }
                u -= (r1 * j22 - r2 * j12) / det;
                v -= (r2 * j11 - r1 * j21) / det;
            }
            if !(u > 0.0 && v > 0.0) {
                continue;
            }
            let denom = 1.0 + v * v - 2.0 * v * cos_beta;
            if denom <= 1e-12 {
                continue;
            }
            let s1 = b / denom.sqrt();
            let depths = [s1, u * s1, v * s1];
            let cam: Vec<Vector3<f64>> = (0..3).map(|i| f[i] * depths[i]).collect();
            if let Some(pose) = rigid_from_three(world, &[cam[0], cam[1], cam[2]]) {
                poses.push(pose);
            }
        }
    }
    if poses.is_empty() {
        return Err(CalibError::NoRealSolution);
    }
    Ok(poses)
}

/// Least-squares rigid transform sending the `from` triple onto `to`.
fn rigid_from_three(from: &[Vector3<f64>; 3], to: &[Vector3<f64>; 3]) -> Option<RigidPose> {
    let cf = (from[0] + from[1] + from[2]) / 3.0;
    let ct = (to[0] + to[1] + to[2]) / 3.0;
    let mut h = Matrix3::<f64>::zeros();
    for i in 0..3 {
        h += (from[i] - cf) * (to[i] - ct).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * u.transpose();
    let translation = ct - rotation * cf;
    RigidPose::from_parts(rotation, translation).ok()
}

/// Greedy nearest matching between projected beads and detections inside
/// the threshold. Returns (detection, bead id) pairs sorted by detection
/// index, plus the mean matched distance.
fn match_beads(
    projected: &[Option<Vector2<f64>>],
    bead_ids: &[u32],
    detections: &[Vector2<f64>],
    threshold_px: f64,
) -> (Vec<(u32, u32)>, f64) {
    let mut pairs: Vec<(f64, u32, u32)> = Vec::new();
    for (bi, proj) in projected.iter().enumerate() {
        let Some(p) = proj else { continue };
        for (di, det) in detections.iter().enumerate() {
            let dist = (p - det).norm();
            if dist <= threshold_px {
                pairs.push((dist, bi as u32, di as u32));
            }
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut bead_used = vec![false; projected.len()];
    let mut det_used = vec![false; detections.len()];
    let mut matches = Vec::new();
    let mut err_sum = 0.0;
    for (dist, bi, di) in pairs {
        if bead_used[bi as usize] || det_used[di as usize] {
            continue;
        }
        bead_used[bi as usize] = true;
        det_used[di as usize] = true;
        matches.push((di, bead_ids[bi as usize]));
        err_sum += dist;
    }
    matches.sort_unstable();
    let mean = if matches.is_empty() {
        0.0
    } else {
        err_sum / matches.len() as f64
    };
    (matches, mean)
}

fn project_all(
    model: &FiducialModel,
    intr: &CameraIntrinsics,
    pose: &RigidPose,
) -> Vec<Option<Vector2<f64>>> {
    model
        .beads
        .iter()
        .map(|b| project(intr, pose, &Vector3::from(b.xyz_mm)))
        .collect()
}

/// Allocation-free hypothesis score: beads whose nearest detection lies
/// inside the threshold, without claiming detections exclusively. The
/// count is an upper bound on the one-to-one match count, which is fine
/// for ranking; the winner is re-scored with the exact matcher.
fn score_pose(
    model: &FiducialModel,
    intr: &CameraIntrinsics,
    pose: &RigidPose,
    detections: &[Vector2<f64>],
    threshold_px: f64,
) -> (u32, f64) {
    let mut count = 0u32;
    let mut sum = 0.0;
    for b in &model.beads {
        let Some(p) = project(intr, pose, &Vector3::from(b.xyz_mm)) else {
            continue;
        };
        let mut best = f64::INFINITY;
        for det in detections {
            let d2 = (p - det).norm_squared();
            if d2 < best {
                best = d2;
            }
        }
        let dist = best.sqrt();
        if dist <= threshold_px {
            count += 1;
            sum += dist;
        }
    }
    (count, if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Refines a pose on the matched pairs by Levenberg-Marquardt over pixel
/// reprojection residuals.
pub fn refine_pose_lm(
    model: &FiducialModel,
    detections: &[Vector2<f64>],
    matches: &[(u32, u32)],
    intr: &CameraIntrinsics,
    pose: &RigidPose,
) -> Result<RigidPose, GeometryError> {
    let id_to_idx = |id: u32| model.beads.iter().position(|b| b.id == id).unwrap();
    let pairs: Vec<(Vector2<f64>, Vector3<f64>)> = matches
        .iter()
        .map(|&(di, bid)| (detections[di as usize], model.position(id_to_idx(bid))))
        .collect();
    let residuals = |p: &RigidPose| -> Option<Vec<f64>> {
        let mut r = Vec::with_capacity(2 * pairs.len());
        for (det, world) in &pairs {
            let px = project(intr, p, world)?;
            r.push(px.x - det.x);
            r.push(px.y - det.y);
        }
        Some(r)
    };
    let opts = LmOptions {
        max_iters: 25,
        ..LmOptions::default()
    };
    match optimize_pose(pose, &residuals, &opts) {
        Ok(out) => Ok(out.pose),
        Err(_) => Ok(pose.clone()),
    }
}

// Decodes index -> ordered triple of distinct values in 0..m.
fn decode_permutation(idx: usize, m: usize) -> [u32; 3] {
    let per_first = (m - 1) * (m - 2);
    let first = idx / per_first;
    let rem = idx % per_first;
    let second_rank = rem / (m - 2);
    let third_rank = rem % (m - 2);
    let second = (0..m).filter(|&x| x != first).nth(second_rank).unwrap();
    let third = (0..m)
        .filter(|&x| x != first && x != second)
        .nth(third_rank)
        .unwrap();
    [first as u32, second as u32, third as u32]
}

/// Recovers a view's extrinsics from unordered bead detections.
///
/// Every combination of an (unordered) detection triple with an (ordered)
/// bead triple is a pose hypothesis; hypotheses are enumerated
/// exhaustively for small detection counts and sampled with a seeded
/// generator beyond that. The best-scoring hypothesis (most inliers, then
/// lowest mean error) is refined and re-matched to a fixed point.
pub fn blind_pnp(
    model: &FiducialModel,
    detections: &[Vector2<f64>],
    intr: &CameraIntrinsics,
    opts: &PnpOptions,
) -> Result<CalibrationResult, CalibError> {
    if detections.len() < 4 {
        return Err(CalibError::InsufficientDetections {
            found: detections.len(),
        });
    }
    let n_det = detections.len();
    let n_beads = model.beads.len();
    let bead_ids: Vec<u32> = model.beads.iter().map(|b| b.id).collect();

    // Hypotheses as (d0, d1, d2, b0, b1, b2) index tuples.
    let hypotheses: Vec<[u32; 6]> = if n_det <= opts.max_exhaustive_detections {
        let mut triples = Vec::new();
        for i in 0..n_det {
            for j in (i + 1)..n_det {
                for k in (j + 1)..n_det {
                    triples.push([i as u32, j as u32, k as u32]);
                }
            }
        }
        let perms = n_beads * (n_beads - 1) * (n_beads - 2);
        let mut hyps = Vec::with_capacity(triples.len() * perms);
        for t in &triples {
            for p in 0..perms {
                let b = decode_permutation(p, n_beads);
                hyps.push([t[0], t[1], t[2], b[0], b[1], b[2]]);
            }
        }
        hyps
    } else {
        let mut rng = StdRng::seed_from_u64(opts.rng_seed);
        let mut hyps = Vec::with_capacity(opts.sampled_hypotheses);
        while hyps.len() < opts.sampled_hypotheses {
            let mut d = [0usize; 3];
            d[0] = rng.random_range(0..n_det);
            loop {
                d[1] = rng.random_range(0..n_det);
                if d[1] != d[0] {
                    break;
                }
            }
            loop {
                d[2] = rng.random_range(0..n_det);
                if d[2] != d[0] && d[2] != d[1] {
                    break;
                }
            }
            d.sort_unstable();
            let mut b = [0usize; 3];
            b[0] = rng.random_range(0..n_beads);
            loop {
                b[1] = rng.random_range(0..n_beads);
                if b[1] != b[0] {
                    break;
                }
            }
            loop {
                b[2] = rng.random_range(0..n_beads);
                if b[2] != b[0] && b[2] != b[1] {
                    break;
                }
            }
            hyps.push([
                d[0] as u32,
                d[1] as u32,
                d[2] as u32,
                b[0] as u32,
                b[1] as u32,
                b[2] as u32,
            ]);
        }
        hyps
    };

    // Score every hypothesis: best (inliers, mean error) over its P3P
    // solutions. Scoring allocates nothing per hypothesis, and the
    // reduction is a deterministic sequential fold over the parallel map.
    let scores: Vec<(u32, f64, u8)> = batch_map(hypotheses.len(), |h| {
        let hyp = &hypotheses[h];
        let world = [
            model.position(hyp[3] as usize),
            model.position(hyp[4] as usize),
            model.position(hyp[5] as usize),
        ];
        let rays = [
            bearing(intr, &detections[hyp[0] as usize]),
            bearing(intr, &detections[hyp[1] as usize]),
            bearing(intr, &detections[hyp[2] as usize]),
        ];
        let Ok(poses) = solve_p3p(&world, &rays) else {
            return (0, f64::INFINITY, 0);
        };
        let mut best = (0u32, f64::INFINITY, 0u8);
        for (pi, pose) in poses.iter().enumerate() {
            let (count, mean) = score_pose(model, intr, pose, detections, opts.inlier_threshold_px);
            let cand = (count, mean, pi as u8);
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                best = cand;
            }
        }
        best
    });

    let mut winner: Option<(usize, u32, f64, u8)> = None;
    for (h, &(inl, mean, pi)) in scores.iter().enumerate() {
        let better = match winner {
            None => true,
            Some((_, wi, wm, _)) => inl > wi || (inl == wi && mean < wm),
        };
        if better {
            winner = Some((h, inl, mean, pi));
        }
    }
    let Some((h, inliers, _, pose_idx)) = winner else {
        return Err(CalibError::NoValidPose);
    };
    if inliers < 4 {
        return Err(CalibError::NoValidPose);
    }

    let hyp = &hypotheses[h];
    let world = [
        model.position(hyp[3] as usize),
        model.position(hyp[4] as usize),
        model.position(hyp[5] as usize),
    ];
    let rays = [
        bearing(intr, &detections[hyp[0] as usize]),
        bearing(intr, &detections[hyp[1] as usize]),
        bearing(intr, &detections[hyp[2] as usize]),
    ];
    let poses = solve_p3p(&world, &rays).map_err(|_| CalibError::NoValidPose)?;
    let mut pose = poses[pose_idx as usize].clone();
    let (mut matches, mut mean) = match_beads(
        &project_all(model, intr, &pose),
        &bead_ids,
        detections,
        opts.inlier_threshold_px,
    );

    // Alternate refinement and re-matching until the assignment is stable,
    // so the reported matches are valid under the reported pose.
    for _ in 0..opts.max_refine_rounds {
        let refined = refine_pose_lm(model, detections, &matches, intr, &pose)
            .unwrap_or_else(|_| pose.clone());
        let (new_matches, new_mean) = match_beads(
            &project_all(model, intr, &refined),
            &bead_ids,
            detections,
            opts.inlier_threshold_px,
        );
        if new_matches.len() < matches.len() {
            break;
        }
        let stable = new_matches == matches;
        pose = refined;
        matches = new_matches;
        mean = new_mean;
        if stable {
            break;
        }
    }
    if matches.len() < 4 {
        return Err(CalibError::NoValidPose);
    }
    Ok(CalibrationResult {
        extrinsic: pose,
        matches,
        mean_inlier_error_px: mean,
    })
}

/// Uniform random pixel inside the standard detector.
pub fn random_pixel(rng: &mut StdRng) -> Vector2<f64> {
    Vector2::new(
        rng.random_range(0.0..IMAGE_SIZE_PX),
        rng.random_range(0.0..IMAGE_SIZE_PX),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::euler_to_pose;

    fn random_view_pose(rng: &mut StdRng) -> RigidPose {
        // Camera somewhere on a loose ring, looking at the origin region.
        let pose = euler_to_pose(
            rng.random_range(-180.0..180.0),
            rng.random_range(-60.0..60.0),
            rng.random_range(-180.0..180.0),
            Vector3::new(
                rng.random_range(-40.0..40.0),
                rng.random_range(-40.0..40.0),
                rng.random_range(600.0..900.0),
            ),
        );
        pose
    }

    #[test]
    fn p3p_recovers_projected_poses_exactly() {
        let intr = CameraIntrinsics::standard(3289.5);
        let mut rng = StdRng::seed_from_u64(11);
        for trial in 0..100 {
            let truth = random_view_pose(&mut rng);
            let world: [Vector3<f64>; 3] = std::array::from_fn(|_| {
                Vector3::new(
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-100.0..100.0),
                )
            });
            let Some(px): Option<Vec<Vector2<f64>>> =
                world.iter().map(|w| project(&intr, &truth, w)).collect()
            else {
                continue;
            };
            let rays = [
                bearing(&intr, &px[0]),
                bearing(&intr, &px[1]),
                bearing(&intr, &px[2]),
            ];
            let poses = solve_p3p(&world, &rays).unwrap();
            let best = poses
                .iter()
                .map(|p| {
                    let rot = (p.rotation - truth.rotation).norm();
                    let tr = (p.translation_mm - truth.translation_mm).norm();
                    (rot + tr, p)
                })
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .unwrap();
            assert!(
                (best.1.rotation - truth.rotation).norm() < 1e-6,
                "trial {trial}: rotation defect {}",
                (best.1.rotation - truth.rotation).norm()
            );
            for (w, p) in world.iter().zip(&px) {
                let reproj = project(&intr, best.1, w).unwrap();
                assert!(
                    (reproj - p).norm() < 1e-6,
                    "trial {trial}: reprojection error {}",
                    (reproj - p).norm()
                );
            }
        }
    }

    #[test]
    fn p3p_rejects_collinear_points() {
        let world = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(10.0, 0.0, 0.0),
            Vector3::new(20.0, 0.0, 0.0),
        ];
        let rays = [
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.01, 0.0, 1.0).normalize(),
            Vector3::new(0.02, 0.0, 1.0).normalize(),
        ];
        assert!(matches!(
            solve_p3p(&world, &rays),
            Err(CalibError::CollinearPoints)
        ));
    }

    #[test]
    fn p3p_reports_infeasible_ray_geometry() {
        // Equilateral world triangle, but ray 3 is orthogonal to rays 1 and
        // 2, which forces equal depths for points 1 and 2; the nearly
        // parallel rays 1 and 2 then cannot realize the 100 mm separation.
        let world = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(100.0, 0.0, 0.0),
            Vector3::new(50.0, 86.60254037844386, 0.0),
        ];
        let rays = [
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1e-6, 0.0, 1.0).normalize(),
            Vector3::new(1.0, 0.0, 0.0),
        ];
        assert!(matches!(
            solve_p3p(&world, &rays),
            Err(CalibError::NoRealSolution)
        ));
    }

    fn cage_detections(
        model: &FiducialModel,
        intr: &CameraIntrinsics,
        pose: &RigidPose,
        rng: &mut StdRng,
        sigma_px: f64,
        missing: usize,
        spurious: usize,
    ) -> (Vec<Vector2<f64>>, Vec<Option<u32>>) {
        let view = crate::geometry::CameraView {
            view_id: "cal".into(),
            intrinsics: intr.clone(),
            extrinsic: pose.clone(),
        };
        crate::synth::generate_bead_detections(model, &view, sigma_px, missing, spurious, rng)
    }

    #[test]
    fn blind_pnp_recovers_a_clean_view() {
        let model = FiducialModel::standard_cage();
        let intr = CameraIntrinsics::standard(3289.5);
        let truth = euler_to_pose(30.0, 10.0, -20.0, Vector3::new(10.0, -20.0, 750.0));
        let mut rng = StdRng::seed_from_u64(3);
        let (dets, truth_ids) = cage_detections(&model, &intr, &truth, &mut rng, 0.0, 0, 0);
        let result = blind_pnp(&model, &dets, &intr, &PnpOptions::default()).unwrap();
        assert_eq!(result.matches.len(), 16);
        for &(di, bid) in &result.matches {
            assert_eq!(truth_ids[di as usize], Some(bid));
        }
        assert!(result.mean_inlier_error_px < 1e-6);
        assert!((result.extrinsic.rotation - truth.rotation).norm() < 1e-6);
        assert!((result.extrinsic.translation_mm - truth.translation_mm).norm() < 1e-3);
    }

    #[test]
    fn blind_pnp_handles_noise_missing_and_spurious() {
        let model = FiducialModel::standard_cage();
        let intr = CameraIntrinsics::standard(3289.5);
        let truth = euler_to_pose(-45.0, 5.0, 100.0, Vector3::new(-15.0, 25.0, 780.0));
        let mut rng = StdRng::seed_from_u64(12);
        let (dets, truth_ids) = cage_detections(&model, &intr, &truth, &mut rng, 0.3, 4, 3);
        assert_eq!(dets.len(), 15);
        let result = blind_pnp(&model, &dets, &intr, &PnpOptions::default()).unwrap();
        assert!(
            result.matches.len() >= 10,
            "only {} inliers",
            result.matches.len()
        );
        for &(di, bid) in &result.matches {
            assert_eq!(truth_ids[di as usize], Some(bid), "wrong assignment");
        }
        assert!(result.mean_inlier_error_px <= 0.8);
        assert!((result.extrinsic.translation_mm - truth.translation_mm).norm() < 2.0);
    }

    #[test]
    fn blind_pnp_is_permutation_invariant_and_deterministic() {
        let model = FiducialModel::standard_cage();
        let intr = CameraIntrinsics::standard(3289.5);
        let truth = euler_to_pose(120.0, -8.0, 40.0, Vector3::new(0.0, 5.0, 720.0));
        let mut rng = StdRng::seed_from_u64(9);
        let (dets, _) = cage_detections(&model, &intr, &truth, &mut rng, 0.2, 2, 1);

        let a = blind_pnp(&model, &dets, &intr, &PnpOptions::default()).unwrap();
        let b = blind_pnp(&model, &dets, &intr, &PnpOptions::default()).unwrap();
        assert_eq!(a, b);

        // Reversing the detection order renames detections but must not
        // change the recovered pose or the underlying assignment.
        let rev: Vec<Vector2<f64>> = dets.iter().rev().cloned().collect();
        let c = blind_pnp(&model, &rev, &intr, &PnpOptions::default()).unwrap();
        let n = dets.len() as u32;
        let mut remapped: Vec<(u32, u32)> = c
            .matches
            .iter()
            .map(|&(di, bid)| (n - 1 - di, bid))
            .collect();
        remapped.sort_unstable();
        assert_eq!(remapped, a.matches);
        assert!((c.extrinsic.rotation - a.extrinsic.rotation).norm() < 1e-9);
    }

    #[test]
    fn blind_pnp_refuses_thin_or_unexplainable_input() {
        let model = FiducialModel::standard_cage();
        let intr = CameraIntrinsics::standard(3289.5);
        let three = vec![
            Vector2::new(100.0, 100.0),
            Vector2::new(200.0, 300.0),
            Vector2::new(400.0, 150.0),
        ];
        assert!(matches!(
            blind_pnp(&model, &three, &intr, &PnpOptions::default()),
            Err(CalibError::InsufficientDetections { found: 3 })
        ));

        let mut rng = StdRng::seed_from_u64(42);
        let random: Vec<Vector2<f64>> = (0..4).map(|_| random_pixel(&mut rng)).collect();
        assert!(matches!(
            blind_pnp(&model, &random, &intr, &PnpOptions::default()),
            Err(CalibError::NoValidPose)
        ));
    }

    #[test]
    fn standard_cage_is_fixed_and_in_view_of_the_camera_ring() {
        let a = FiducialModel::standard_cage();
        let b = FiducialModel::standard_cage();
        assert_eq!(a, b);
        assert_eq!(a.beads.len(), 16);
        let intr = CameraIntrinsics::standard(3289.5);
        // Worst case over a dense sweep of ring angles; every bead must
        // project inside the detector from every ring position.
        for k in 0..72 {
            let angle = std::f64::consts::TAU * k as f64 / 72.0;
            let eye = Vector3::new(0.0, 750.0 * angle.cos(), 750.0 * angle.sin());
            let view = crate::geometry::CameraView::look_at(
                "ring",
                intr.clone(),
                eye,
                Vector3::zeros(),
                Vector3::x(),
            );
            for bead in &a.beads {
                let px = view.project(&Vector3::from(bead.xyz_mm)).unwrap();
                assert!(px.x > 0.0 && px.x < IMAGE_SIZE_PX);
                assert!(px.y > 0.0 && px.y < IMAGE_SIZE_PX);
            }
        }
    }
}

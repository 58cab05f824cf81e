//! Labeled triangle meshes and principal-axis segmentation.
//!
//! A `LabeledMesh` is a closed, consistently oriented triangle surface
//! with one class label per vertex: 0 means unlabeled, 1 is the
//! diaphysis, 2 and 3 the two condyles. Closedness (every edge shared
//! by exactly two triangles, traversed once in each direction) is
//! enforced at construction because silhouette extraction depends on it.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub const MAX_CLASS: u8 = 3;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("triangle {tri} references vertex {vertex} out of range ({count} vertices)")]
    IndexOutOfRange {
        tri: usize,
        vertex: u32,
        count: usize,
    },
    #[error("vertex {vertex} has class {class}, outside 0..=3")]
    InvalidClass { vertex: usize, class: u8 },
    #[error("class count {classes} does not match vertex count {vertices}")]
    ClassCountMismatch { classes: usize, vertices: usize },
    #[error("edge ({v0},{v1}) borders {count} triangles, expected exactly 2")]
    NonManifoldEdge { v0: u32, v1: u32, count: usize },
    #[error("edge ({v0},{v1}) traversed twice in the same direction: inconsistent orientation")]
    InconsistentOrientation { v0: u32, v1: u32 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("triangle {tri} repeats a vertex")]
    DegenerateTriangle { tri: usize },
}

/// An undirected interior edge and its two incident triangles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MeshEdge {
    /// Endpoint vertex indices, smaller first.
    pub v: [u32; 2],
    pub tris: [u32; 2],
}

#[derive(Debug, Clone)]
pub struct LabeledMesh {
    pub vertices: Vec<Vector3<f64>>,
    /// Per-vertex class label, same length as `vertices`.
    pub classes: Vec<u8>,
    pub triangles: Vec<[u32; 3]>,
    edges: Vec<MeshEdge>,
}

impl LabeledMesh {
    /// Validates and indexes a mesh. Rejects open or non-manifold
    /// surfaces and inconsistent winding.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        classes: Vec<u8>,
        triangles: Vec<[u32; 3]>,
    ) -> Result<Self, MeshError> {
        if classes.len() != vertices.len() {
            return Err(MeshError::ClassCountMismatch {
                classes: classes.len(),
                vertices: vertices.len(),
            });
        }
        for (i, c) in classes.iter().enumerate() {
            if *c > MAX_CLASS {
                return Err(MeshError::InvalidClass {
                    vertex: i,
                    class: *c,
                });
            }
        }
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v as usize >= n {
                    return Err(MeshError::IndexOutOfRange {
                        tri: t,
                        vertex: v,
                        count: n,
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::DegenerateTriangle { tri: t });
            }
        }

        // Per undirected edge: incident triangles and traversal
        // directions. A closed oriented surface traverses each edge
        // exactly once per direction.
        let mut adj: HashMap<(u32, u32), Vec<(u32, bool)>> = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                adj.entry(key).or_default().push((t as u32, a < b));
            }
        }
        let mut edges = Vec::with_capacity(adj.len());
        for (&(v0, v1), inc) in &adj {
            if inc.len() != 2 {
                return Err(MeshError::NonManifoldEdge {
                    v0,
                    v1,
                    count: inc.len(),
                });
            }
            if inc[0].1 == inc[1].1 {
                return Err(MeshError::InconsistentOrientation { v0, v1 });
            }
            edges.push(MeshEdge {
                v: [v0, v1],
                tris: [inc[0].0.min(inc[1].0), inc[0].0.max(inc[1].0)],
            });
        }
        // Deterministic edge order regardless of hash iteration.
        edges.sort();

        Ok(LabeledMesh {
            vertices,
            classes,
            triangles,
            edges,
        })
    }

    /// Interior edges with incident triangles, sorted by vertex pair.
    pub fn edges(&self) -> &[MeshEdge] {
        &self.edges
    }

    /// Same geometry with replaced labels.
    pub fn with_classes(&self, classes: Vec<u8>) -> Result<Self, MeshError> {
        if classes.len() != self.vertices.len() {
            return Err(MeshError::ClassCountMismatch {
                classes: classes.len(),
                vertices: self.vertices.len(),
            });
        }
        for (i, c) in classes.iter().enumerate() {
            if *c > MAX_CLASS {
                return Err(MeshError::InvalidClass {
                    vertex: i,
                    class: *c,
                });
            }
        }
        let mut m = self.clone();
        m.classes = classes;
        Ok(m)
    }

    pub fn fully_labeled(&self) -> bool {
        self.classes.iter().all(|&c| (1..=MAX_CLASS).contains(&c))
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for v in &self.vertices {
            c += v;
        }
        c / self.vertices.len().max(1) as f64
    }

    /// Non-unit normal of a triangle (counterclockwise winding points
    /// outward for a valid closed mesh).
    pub fn triangle_normal(&self, tri: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangles[tri];
        let (p, q, r) = (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        );
        (q - p).cross(&(r - p))
    }

    /// Signed enclosed volume; positive when triangles face outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let (a, b, c) = (
                    self.vertices[t[0] as usize],
                    self.vertices[t[1] as usize],
                    self.vertices[t[2] as usize],
                );
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Vertex covariance eigen-decomposition, eigenvalues descending.
    pub fn principal_axes(&self) -> ([f64; 3], [Vector3<f64>; 3]) {
        let c = self.centroid();
        let mut cov = Matrix3::zeros();
        for v in &self.vertices {
            let d = v - c;
            cov += d * d.transpose();
        }
        cov /= self.vertices.len().max(1) as f64;
        let eig = cov.symmetric_eigen();
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let vals = [
            eig.eigenvalues[idx[0]],
            eig.eigenvalues[idx[1]],
            eig.eigenvalues[idx[2]],
        ];
        let vecs = [
            canonical_sign(eig.eigenvectors.column(idx[0]).into_owned()),
            canonical_sign(eig.eigenvectors.column(idx[1]).into_owned()),
            canonical_sign(eig.eigenvectors.column(idx[2]).into_owned()),
        ];
        (vals, vecs)
    }

    /// First principal axis with a deterministic sign. Restart
    /// perturbations rotate about this axis through the centroid.
    pub fn principal_axis(&self) -> Vector3<f64> {
        self.principal_axes().1[0]
    }

    /// Sub-mesh of the triangles whose three vertices all carry class
    /// `class`, with vertices re-indexed. The result must itself be a
    /// closed surface, which holds when the substructure is a separate
    /// component (the synthetic phantom guarantees this).
    pub fn class_submesh(&self, class: u8) -> Result<LabeledMesh, MeshError> {
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut vertices = Vec::new();
        let mut classes = Vec::new();
        let mut triangles = Vec::new();
        for tri in &self.triangles {
            if tri.iter().all(|&v| self.classes[v as usize] == class) {
                let mut out = [0u32; 3];
                for (k, &v) in tri.iter().enumerate() {
                    let next = vertices.len() as u32;
                    let id = *remap.entry(v).or_insert_with(|| {
                        vertices.push(self.vertices[v as usize]);
                        classes.push(class);
                        next
                    });
                    out[k] = id;
                }
                triangles.push(out);
            }
        }
        if triangles.is_empty() {
            return Err(MeshError::DegenerateGeometry(format!(
                "no triangles with class {class}"
            )));
        }
        LabeledMesh::new(vertices, classes, triangles)
    }
}

/// Flips an eigenvector so its largest-magnitude component is positive.
fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let mut k = 0;
    for i in 1..3 {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        -v
    } else {
        v
    }
}

/// Oriented plane for overriding the condyle split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlane {
    pub point_mm: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// Labels a mesh into diaphysis (1) and two condyles (2, 3).
///
/// The mesh is cut orthogonal to its first principal axis at the vertex
/// centroid. The side reaching farther from the centroid is the shaft
/// and becomes class 1. The remaining distal vertices split into
/// classes 2 and 3 by the supplied plane, or by default by the sign of
/// their second-principal-component coordinate relative to the distal
/// centroid. With `keep_existing`, a fully labeled mesh passes through
/// unchanged.
pub fn segment_principal_axis(
    mesh: &LabeledMesh,
    split_plane: Option<&SplitPlane>,
    keep_existing: bool,
) -> Result<LabeledMesh, MeshError> {
    if keep_existing && mesh.fully_labeled() {
        return Ok(mesh.clone());
    }
    if mesh.vertices.len() < 4 {
        return Err(MeshError::DegenerateGeometry(format!(
            "{} vertices, need at least 4",
            mesh.vertices.len()
        )));
    }
    let (vals, vecs) = mesh.principal_axes();
    if vals[0] - vals[1] <= 1e-9 * vals[0].max(1.0) {
        return Err(MeshError::DegenerateGeometry(format!(
            "top two principal eigenvalues equal within tolerance ({:.6e} vs {:.6e})",
            vals[0], vals[1]
        )));
    }
    let centroid = mesh.centroid();
    let e1 = vecs[0];
    let coords: Vec<f64> = mesh
        .vertices
        .iter()
        .map(|v| (v - centroid).dot(&e1))
        .collect();
    let max_pos = coords.iter().cloned().fold(0.0_f64, f64::max);
    let max_neg = coords.iter().cloned().fold(0.0_f64, |m, c| m.max(-c));
    // The shaft is the side that extends farther from the cut.
    let shaft_positive = max_pos >= max_neg;

    let mut distal = Vec::new();
    let mut classes = vec![0u8; mesh.vertices.len()];
    for (i, &c) in coords.iter().enumerate() {
        let on_shaft = if shaft_positive { c > 0.0 } else { c <= 0.0 };
        if on_shaft {
            classes[i] = 1;
        } else {
            distal.push(i);
        }
    }
    if distal.is_empty() {
        return Err(MeshError::DegenerateGeometry(
            "no vertices on the distal side of the principal cut".into(),
        ));
    }

    let mut distal_centroid = Vector3::zeros();
    for &i in &distal {
        distal_centroid += mesh.vertices[i];
    }
    distal_centroid /= distal.len() as f64;

    for &i in &distal {
        let side = match split_plane {
            Some(p) => (mesh.vertices[i] - p.point_mm).dot(&p.normal),
            None => (mesh.vertices[i] - distal_centroid).dot(&vecs[1]),
        };
        classes[i] = if side > 0.0 { 2 } else { 3 };
    }
    mesh.with_classes(classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn tetrahedron() -> (Vec<Vector3<f64>>, Vec<u8>, Vec<[u32; 3]>) {
        let vertices = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let classes = vec![1, 1, 1, 1];
        let triangles = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        (vertices, classes, triangles)
    }

    #[test]
    fn tetrahedron_is_valid_and_outward() {
        let (v, c, t) = tetrahedron();
        let mesh = LabeledMesh::new(v, c, t).unwrap();
        assert_eq!(mesh.edges().len(), 6);
        assert!(mesh.signed_volume() > 0.0);
        assert!(mesh.fully_labeled());
    }

    #[test]
    fn open_surface_is_rejected() {
        let (v, c, mut t) = tetrahedron();
        t.pop();
        let err = LabeledMesh::new(v, c, t);
        assert!(matches!(err, Err(MeshError::NonManifoldEdge { .. })));
    }

    #[test]
    fn flipped_triangle_is_rejected() {
        let (v, c, mut t) = tetrahedron();
        t[3] = [2, 1, 3];
        let err = LabeledMesh::new(v, c, t);
        assert!(matches!(
            err,
            Err(MeshError::InconsistentOrientation { .. })
        ));
    }

    #[test]
    fn bad_index_and_bad_class_are_rejected() {
        let (v, c, mut t) = tetrahedron();
        t[0] = [0, 2, 9];
        assert!(matches!(
            LabeledMesh::new(v.clone(), c.clone(), t),
            Err(MeshError::IndexOutOfRange { .. })
        ));
        let (_, _, t) = tetrahedron();
        let bad = vec![1, 1, 4, 1];
        assert!(matches!(
            LabeledMesh::new(v, bad, t),
            Err(MeshError::InvalidClass {
                vertex: 2,
                class: 4
            })
        ));
    }

    #[test]
    fn regular_tetrahedron_has_no_unique_axis() {
        // All three covariance eigenvalues coincide for a regular
        // tetrahedron, so segmentation must refuse it.
        let s = 1.0 / 3.0_f64.sqrt();
        let vertices = vec![
            Vector3::new(s, s, s),
            Vector3::new(s, -s, -s),
            Vector3::new(-s, s, -s),
            Vector3::new(-s, -s, s),
        ];
        let triangles = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        let mesh = LabeledMesh::new(vertices, vec![0; 4], triangles).unwrap();
        assert!(matches!(
            segment_principal_axis(&mesh, None, false),
            Err(MeshError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn keep_existing_passes_labeled_mesh_through() {
        let (v, c, t) = tetrahedron();
        let mesh = LabeledMesh::new(v, c, t).unwrap();
        let out = segment_principal_axis(&mesh, None, true).unwrap();
        assert_eq!(out.classes, mesh.classes);
    }

    #[test]
    fn edge_table_is_sorted_and_complete() {
        let (v, c, t) = tetrahedron();
        let mesh = LabeledMesh::new(v, c, t).unwrap();
        let edges = mesh.edges();
        for w in edges.windows(2) {
            assert!(w[0] < w[1]);
        }
        // Euler: V - E + F = 2 for a closed genus-0 surface.
        assert_eq!(4 - edges.len() as i64 + 4, 2);
    }
}

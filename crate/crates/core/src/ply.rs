//! ASCII PLY reading and writing for labeled meshes.
//!
//! Vertices carry an integer `class` property (0 when unlabeled).
//! Binary PLY is refused outright rather than misparsed. The writer
//! emits shortest-roundtrip decimal floats, so write/read/write is
//! byte-stable.

use crate::mesh::{LabeledMesh, MeshError};
use nalgebra::Vector3;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a PLY file (missing 'ply' magic)")]
    NotPly,
    #[error("binary PLY is not supported; convert to ascii 1.0")]
    BinaryNotSupported,
    #[error("malformed PLY: {0}")]
    Malformed(String),
    #[error("face with {0} vertices; only triangles are supported")]
    NonTriangleFace(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

pub fn save_ply(mesh: &LabeledMesh, path: impl AsRef<Path>) -> Result<(), PlyError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ply(mesh, &mut f)?;
    Ok(())
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<LabeledMesh, PlyError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_ply(f)
}

pub fn write_ply<W: Write>(mesh: &LabeledMesh, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    writeln!(w, "property int class")?;
    writeln!(w, "element face {}", mesh.triangles.len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for (v, c) in mesh.vertices.iter().zip(&mesh.classes) {
        writeln!(w, "{} {} {} {}", v.x, v.y, v.z, c)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    Ok(())
}

#[derive(Default)]
struct Element {
    name: String,
    count: usize,
    /// (property name, is_list)
    properties: Vec<(String, bool)>,
}

pub fn read_ply<R: BufRead>(reader: R) -> Result<LabeledMesh, PlyError> {
    let mut lines = reader.lines();
    let magic = lines
        .next()
        .ok_or(PlyError::NotPly)?
        .map_err(PlyError::Io)?;
    if magic.trim() != "ply" {
        return Err(PlyError::NotPly);
    }

    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    loop {
        let line = lines
            .next()
            .ok_or_else(|| PlyError::Malformed("header ended before end_header".into()))?
            .map_err(PlyError::Io)?;
        let line = line.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("comment") | None => {}
            Some("format") => {
                match tok.next() {
                    Some("ascii") => format_seen = true,
                    Some(f) if f.starts_with("binary") => return Err(PlyError::BinaryNotSupported),
                    other => return Err(PlyError::Malformed(format!("unknown format {other:?}"))),
                };
            }
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| PlyError::Malformed("element without name".into()))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| PlyError::Malformed(format!("bad count for element {name}")))?;
                elements.push(Element {
                    name: name.into(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Malformed("property before element".into()))?;
                let ty = tok
                    .next()
                    .ok_or_else(|| PlyError::Malformed("property without type".into()))?;
                let is_list = ty == "list";
                // A list property has count and item types before the name.
                let name = if is_list { tok.nth(2) } else { tok.next() }
                    .ok_or_else(|| PlyError::Malformed("property without name".into()))?;
                el.properties.push((name.into(), is_list));
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(PlyError::Malformed(format!(
                    "unexpected header line '{other}'"
                )))
            }
        }
    }
    if !format_seen {
        return Err(PlyError::Malformed("header missing format line".into()));
    }

    let mut vertices = Vec::new();
    let mut classes = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();

    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let idx_of = |want: &str| el.properties.iter().position(|(n, _)| n == want);
                let (xi, yi, zi) = match (idx_of("x"), idx_of("y"), idx_of("z")) {
                    (Some(x), Some(y), Some(z)) => (x, y, z),
                    _ => {
                        return Err(PlyError::Malformed(
                            "vertex element missing x/y/z properties".into(),
                        ))
                    }
                };
                let ci = idx_of("class");
                for k in 0..el.count {
                    let line = lines
                        .next()
                        .ok_or_else(|| {
                            PlyError::Malformed(format!("file ends at vertex {k} of {}", el.count))
                        })?
                        .map_err(PlyError::Io)?;
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() < el.properties.len() {
                        return Err(PlyError::Malformed(format!(
                            "vertex {k}: {} fields, expected {}",
                            fields.len(),
                            el.properties.len()
                        )));
                    }
                    let get = |i: usize| -> Result<f64, PlyError> {
                        fields[i].parse().map_err(|_| {
                            PlyError::Malformed(format!("vertex {k}: bad number '{}'", fields[i]))
                        })
                    };
                    vertices.push(Vector3::new(get(xi)?, get(yi)?, get(zi)?));
                    let class = match ci {
                        Some(i) => fields[i].parse::<i64>().map_err(|_| {
                            PlyError::Malformed(format!("vertex {k}: bad class '{}'", fields[i]))
                        })?,
                        None => 0,
                    };
                    if !(0..=3).contains(&class) {
                        return Err(PlyError::Malformed(format!(
                            "vertex {k}: class {class} outside 0..=3"
                        )));
                    }
                    classes.push(class as u8);
                }
            }
            "face" => {
                for k in 0..el.count {
                    let line = lines
                        .next()
                        .ok_or_else(|| {
                            PlyError::Malformed(format!("file ends at face {k} of {}", el.count))
                        })?
                        .map_err(PlyError::Io)?;
                    let nums: Result<Vec<i64>, _> =
                        line.split_whitespace().map(|f| f.parse::<i64>()).collect();
                    let nums = nums
                        .map_err(|_| PlyError::Malformed(format!("face {k}: non-integer field")))?;
                    let [n, rest @ ..] = nums.as_slice() else {
                        return Err(PlyError::Malformed(format!("face {k}: empty line")));
                    };
                    if *n != 3 || rest.len() < 3 {
                        return Err(PlyError::NonTriangleFace(*n as usize));
                    }
                    let mut tri = [0u32; 3];
                    for (i, &v) in rest[..3].iter().enumerate() {
                        if v < 0 || v > u32::MAX as i64 {
                            return Err(PlyError::Malformed(format!(
                                "face {k}: vertex index {v} out of range"
                            )));
                        }
                        tri[i] = v as u32;
                    }
                    triangles.push(tri);
                }
            }
            _ => {
                // Unknown element: skip its rows.
                for _ in 0..el.count {
                    lines
                        .next()
                        .transpose()
                        .map_err(PlyError::Io)?
                        .ok_or_else(|| PlyError::Malformed("file truncated".into()))?;
                }
            }
        }
    }

    Ok(LabeledMesh::new(vertices, classes, triangles)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_phantom, PhantomSpec};

    #[test]
    fn roundtrip_preserves_everything_exactly() {
        let mesh = build_phantom(&PhantomSpec::standard()).unwrap();
        let mut buf = Vec::new();
        write_ply(&mesh, &mut buf).unwrap();
        let back = read_ply(buf.as_slice()).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.classes, mesh.classes);
        assert_eq!(back.triangles, mesh.triangles);
        // Second write is byte-identical.
        let mut buf2 = Vec::new();
        write_ply(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn binary_ply_is_refused() {
        let data = b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(
            read_ply(&data[..]),
            Err(PlyError::BinaryNotSupported)
        ));
    }

    #[test]
    fn non_ply_and_truncated_files_are_refused() {
        assert!(matches!(
            read_ply(&b"solid cube\n"[..]),
            Err(PlyError::NotPly)
        ));
        let data = b"ply\nformat ascii 1.0\nelement vertex 4\nproperty double x\nproperty double y\nproperty double z\nend_header\n0 0 0\n";
        assert!(matches!(read_ply(&data[..]), Err(PlyError::Malformed(_))));
    }

    #[test]
    fn missing_class_property_reads_as_unlabeled() {
        let data = b"ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 4\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 2 1\n3 0 1 3\n3 0 3 2\n3 1 2 3\n";
        let mesh = read_ply(&data[..]).unwrap();
        assert_eq!(mesh.classes, vec![0, 0, 0, 0]);
    }

    #[test]
    fn quad_faces_are_refused() {
        let data = b"ply\nformat ascii 1.0\nelement vertex 4\nproperty double x\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n4 0 1 2 3\n";
        assert!(matches!(
            read_ply(&data[..]),
            Err(PlyError::NonTriangleFace(4))
        ));
    }

    #[test]
    fn extra_properties_and_comments_are_tolerated() {
        let data = b"ply\ncomment made elsewhere\nformat ascii 1.0\nelement vertex 4\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty int class\nelement face 4\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255 1\n1 0 0 255 1\n0 1 0 0 2\n0 0 1 0 3\n3 0 2 1\n3 0 1 3\n3 0 3 2\n3 1 2 3\n";
        let mesh = read_ply(&data[..]).unwrap();
        assert_eq!(mesh.classes, vec![1, 1, 2, 3]);
    }

    #[test]
    fn open_mesh_fails_validation_on_load() {
        let data = b"ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        assert!(matches!(read_ply(&data[..]), Err(PlyError::Mesh(_))));
    }
}

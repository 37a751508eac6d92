//! Wavefront OBJ for triangle meshes: positions and triangular faces.
//! Normals, texture coordinates, groups and materials are skipped on read.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};

fn parse_error(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Resolves a face token (`7`, `7/2`, `7//3`, `-1`) to a zero-based index.
fn face_index(token: &str, count: usize, line: usize) -> Result<u32> {
    let head = token.split('/').next().unwrap_or("");
    let i: i64 = head
        .parse()
        .map_err(|_| parse_error(line, format!("bad face index {token:?}")))?;
    let resolved = match i {
        0 => return Err(parse_error(line, "face index 0 (OBJ indices start at 1)")),
        i if i > 0 => i - 1,
        i => count as i64 + i,
    };
    if resolved < 0 || resolved >= count as i64 {
        return Err(parse_error(line, format!("face index {i} out of range for {count} vertices")));
    }
    Ok(resolved as u32)
}

pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut tokens = content.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<&str> = tokens.collect();
                if !(3..=4).contains(&coords.len()) {
                    return Err(parse_error(line, format!("vertex needs 3 coordinates, got {}", coords.len())));
                }
                let mut p = [0f64; 3];
                for (k, c) in coords[..3].iter().enumerate() {
                    p[k] = c
                        .parse()
                        .map_err(|_| parse_error(line, format!("bad coordinate {c:?}")))?;
                    if !p[k].is_finite() {
                        return Err(parse_error(line, format!("non-finite coordinate {c:?}")));
                    }
                }
                vertices.push(Vec3::new(p[0], p[1], p[2]));
            }
            Some("f") => {
                let idx = tokens
                    .map(|t| face_index(t, vertices.len(), line))
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() != 3 {
                    return Err(parse_error(line, format!("only triangles are supported, face has {} vertices", idx.len())));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    if vertices.is_empty() {
        return Err(parse_error(text.lines().count().max(1), "no vertices"));
    }
    Ok(Mesh { vertices, faces })
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

/// Shortest decimal forms, so reading back gives the same `f64` values.
pub fn format_obj(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 40 + mesh.faces.len() * 20);
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    std::fs::write(path, format_obj(mesh)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reads_positions_and_triangles_skipping_the_rest() {
        let text = "# cube corner\nmtllib a.mtl\no thing\nv 0 0 0\nv 1 0 0 1.0\nvt 0.5 0.5\nvn 0 0 1\nv 0 1 0\ns off\nf 1/1/1 2//1 -1\n";
        let mesh = parse_obj(text).unwrap();
        assert_eq!(mesh.vertices, vec![Vec3::zeros(), Vec3::x(), Vec3::y()]);
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("v 0 0 0\nv 1 0\n", 2),
            ("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n", 5),
            ("v 0 0 0\nf 1 2 3\n", 2),
            ("v 0 0 0\nv 1 x 0\n", 2),
            ("v 0 0 0\nf 0 1 1\n", 2),
            ("v 0 0 nan\n", 1),
        ];
        for (text, want) in cases {
            match parse_obj(text) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(matches!(parse_obj("# nothing\n"), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn write_then_read_is_exact(
            points in prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), 3..40),
            picks in prop::collection::vec(prop::array::uniform3(0usize..1000), 0..30),
        ) {
            let n = points.len();
            let mesh = Mesh {
                vertices: points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(),
                faces: picks.iter().map(|f| f.map(|i| (i % n) as u32)).collect(),
            };
            let text = format_obj(&mesh);
            let back = parse_obj(&text).unwrap();
            prop_assert_eq!(&back, &mesh);
            prop_assert_eq!(format_obj(&back), text);
        }
    }
}

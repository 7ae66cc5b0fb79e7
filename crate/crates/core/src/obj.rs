//! Minimal Wavefront OBJ: `v x y z` and triangular `f i j k` (1-based).
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write followed by a read reproduces every coordinate bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

pub fn parse_obj(text: &str, path: &Path) -> Result<ObjMesh> {
    let mut mesh = ObjMesh::default();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        let Some(tag) = parts.next() else { continue };
        let loc = format!("line {lineno}");
        match tag {
            "v" => {
                let coords: Vec<&str> = parts.collect();
                if coords.len() < 3 {
                    return Err(Error::format(path, loc, "vertex needs 3 coordinates"));
                }
                let mut v = [0.0; 3];
                for (k, c) in coords.iter().take(3).enumerate() {
                    v[k] = c
                        .parse()
                        .map_err(|_| Error::format(path, &loc, format!("bad coordinate {c:?}")))?;
                }
                mesh.vertices.push(v);
            }
            "f" => {
                let idx: Vec<&str> = parts.collect();
                if idx.len() != 3 {
                    return Err(Error::format(path, loc, format!("expected triangle, got {} indices", idx.len())));
                }
                let mut f = [0usize; 3];
                for (k, tok) in idx.iter().enumerate() {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: usize = first
                        .parse()
                        .map_err(|_| Error::format(path, &loc, format!("bad face index {tok:?}")))?;
                    if i == 0 {
                        return Err(Error::format(path, &loc, "face indices are 1-based"));
                    }
                    f[k] = i - 1;
                }
                mesh.faces.push(f);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> Result<ObjMesh> {
    let text = std::fs::read_to_string(path)?;
    parse_obj(&text, path)
}

pub fn format_obj(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(vertices.len() * 40 + faces.len() * 20);
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(path: &Path, vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<()> {
    std::fs::write(path, format_obj(vertices, faces))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_slash_faces_and_comments() {
        let text = "# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0 # c\nvn 0 0 1\nf 1/1/1 2//1 3\n";
        let m = parse_obj(text, Path::new("t.obj")).unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn reports_line_of_bad_vertex() {
        let err = parse_obj("v 0 0 0\nv 1 x 0\n", Path::new("t.obj")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn float_formatting_round_trips() {
        let v = vec![[0.1, -1e-7, 123456.789012345], [f64::MIN_POSITIVE, 1.0 / 3.0, -0.0]];
        let m = parse_obj(&format_obj(&v, &[]), Path::new("t.obj")).unwrap();
        for (a, b) in v.iter().flatten().zip(m.vertices.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

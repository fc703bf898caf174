//! ASCII OBJ and binary little-endian PLY writers, plus an OBJ reader for
//! the subset written here.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::TriMesh;
use crate::error::{Error, Result};
use crate::Vec3;

/// `v`, `vn` and `f a//a b//b c//c` records with 1-based indices and six
/// decimals. The vertex normal index equals the vertex index.
pub fn obj_string(mesh: &TriMesh, name: &str) -> String {
    let mut out = String::new();
    writeln!(out, "o {name}").unwrap();
    for v in &mesh.vertices {
        writeln!(out, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z).unwrap();
    }
    for n in &mesh.normals {
        writeln!(out, "vn {:.6} {:.6} {:.6}", n.x, n.y, n.z).unwrap();
    }
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| i + 1);
        writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}").unwrap();
    }
    out
}

pub fn export_obj(mesh: &TriMesh, name: &str, path: &Path) -> Result<()> {
    fs::write(path, obj_string(mesh, name)).map_err(|e| Error::io(path, e))
}

fn parse_floats(rest: &[&str], line: usize) -> Result<Vec3> {
    if rest.len() != 3 {
        return Err(Error::format("obj", format!("line {line}: expected 3 coordinates")));
    }
    let mut v = [0.0; 3];
    for (slot, tok) in v.iter_mut().zip(rest) {
        *slot = tok
            .parse()
            .map_err(|_| Error::format("obj", format!("line {line}: bad number {tok:?}")))?;
    }
    Ok(Vec3::from(v))
}

/// Reads `v`, `vn` and triangular `f` records (`a`, `a//n` or `a/t/n`).
/// Other records are ignored.
pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut mesh = TriMesh::default();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.first() {
            Some(&"v") => mesh.vertices.push(parse_floats(&tokens[1..], i + 1)?),
            Some(&"vn") => mesh.normals.push(parse_floats(&tokens[1..], i + 1)?),
            Some(&"f") => {
                if tokens.len() != 4 {
                    return Err(Error::format("obj", format!("line {}: only triangles are supported", i + 1)));
                }
                let mut f = [0usize; 3];
                for (slot, tok) in f.iter_mut().zip(&tokens[1..]) {
                    let idx: usize = tok
                        .split('/')
                        .next()
                        .and_then(|s| s.parse().ok())
                        .filter(|&n| n >= 1)
                        .ok_or_else(|| Error::format("obj", format!("line {}: bad index {tok:?}", i + 1)))?;
                    *slot = idx - 1;
                }
                mesh.faces.push(f);
            }
            _ => {}
        }
    }
    mesh.validate_indices()?;
    Ok(mesh)
}

/// Binary little-endian PLY with positions, normals and 8-bit colors per
/// vertex and `uchar`/`int` face lists.
pub fn ply_bytes(mesh: &TriMesh, colors: &[[f64; 3]]) -> Result<Vec<u8>> {
    if colors.len() != mesh.vertices.len() || mesh.normals.len() != mesh.vertices.len() {
        return Err(Error::ShapeMismatch("ply colors or normals do not match vertices".into()));
    }
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    );
    let mut out = header.into_bytes();
    for ((v, n), c) in mesh.vertices.iter().zip(&mesh.normals).zip(colors) {
        for x in v.iter().chain(n.iter()) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out.extend(c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    for f in &mesh.faces {
        out.push(3);
        for &i in f {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn export_ply(mesh: &TriMesh, colors: &[[f64; 3]], path: &Path) -> Result<()> {
    fs::write(path, ply_bytes(mesh, colors)?).map_err(|e| Error::io(path, e))
}

//! ASCII geometry formats: OBJ meshes and XYZ point clouds.

use std::fmt::Write as _;
use std::path::Path;

use super::{Mesh, PointCloud};
use crate::{Error, Result};

/// Writes `v`/`f` records; indices are 1-based per the format.
pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut out = String::new();
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One `x y z` line per point.
pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in cloud.points() {
        writeln!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `v`/`f` records; faces beyond triangles are fan-split. Attribute
/// suffixes (`1/2/3`) on face indices are accepted and ignored.
pub fn read_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut mesh = Mesh::default();
    for (lineno, line) in text.lines().enumerate() {
        let err = |msg: String| Error::format(path, format!("line {}: {msg}", lineno + 1));
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("v") => {
                let mut v = [0.0f64; 3];
                for c in v.iter_mut() {
                    *c = fields
                        .next()
                        .and_then(|f| f.parse().ok())
                        .ok_or_else(|| err("bad vertex".into()))?;
                }
                mesh.vertices.push(v);
            }
            Some("f") => {
                let idx: Vec<u32> = fields
                    .map(|f| {
                        let head = f.split('/').next().unwrap_or(f);
                        head.parse::<u32>()
                            .map_err(|_| err(format!("bad face index `{f}`")))
                            .and_then(|i| {
                                if i == 0 || i as usize > mesh.vertices.len() {
                                    Err(err(format!("face index {i} out of range")))
                                } else {
                                    Ok(i - 1)
                                }
                            })
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err("face needs at least 3 indices".into()));
                }
                for k in 1..idx.len() - 1 {
                    mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(mesh)
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut coords = [0.0f64; 3];
        let mut fields = line.split_whitespace();
        for c in coords.iter_mut() {
            let field = fields
                .next()
                .ok_or_else(|| Error::format(path, format!("line {}: expected 3 coordinates", lineno + 1)))?;
            *c = field
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad number `{field}`", lineno + 1)))?;
        }
        points.push(coords);
    }
    if points.is_empty() {
        return Err(Error::format(path, "no points"));
    }
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.xyz");
        let cloud = PointCloud::new(vec![[0.1, 0.25, 0.3], [0.5, 0.625, 0.75]]).unwrap();
        write_xyz(&cloud, &path).unwrap();
        let back = read_xyz(&path).unwrap();
        assert_eq!(cloud.points(), back.points());
    }

    #[test]
    fn malformed_xyz_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        std::fs::write(&path, "0.1 0.2 oops\n").unwrap();
        assert!(matches!(read_xyz(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn obj_uses_one_based_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.obj");
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        write_obj(&mesh, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("f 1 2 3"));
    }
}

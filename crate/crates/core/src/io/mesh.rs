use std::fmt::Write as _;
use std::path::Path;

use super::{atomic_write, read_bytes};
use crate::error::{Error, Result};
use crate::types::{PointCloud, Rgb, TriangleMesh, Vec3};

/// Dispatches on `.obj` / `.ply`.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => read_obj(path),
        Some("ply") => read_ply_mesh(path),
        _ => Err(Error::parse(path, "mesh must be .obj or .ply")),
    }
}

/// OBJ with optional per-vertex colors (`v x y z r g b`).
pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut s = String::with_capacity(mesh.vertices().len() * 48 + mesh.faces().len() * 24);
    for (i, v) in mesh.vertices().iter().enumerate() {
        match mesh.colors() {
            Some(c) => {
                let [r, g, b] = c[i];
                writeln!(s, "v {} {} {} {r} {g} {b}", v.x, v.y, v.z).unwrap();
            }
            None => writeln!(s, "v {} {} {}", v.x, v.y, v.z).unwrap(),
        }
    }
    for f in mesh.faces() {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    atomic_write(path, s.as_bytes())
}

/// Reads vertices and faces; polygons are fan-triangulated, texture and
/// normal indices ignored, negative (relative) indices resolved.
pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::parse(path, "OBJ is not UTF-8"))?;
    let mut vertices = Vec::new();
    let mut colors: Vec<Rgb> = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let err = |m: &str| Error::parse(path, format!("line {}: {m}", lineno + 1));
        match it.next() {
            Some("v") => {
                let nums: Vec<f64> = it
                    .map(|t| t.parse::<f64>().map_err(|_| err("bad vertex coordinate")))
                    .collect::<Result<_>>()?;
                if nums.len() < 3 {
                    return Err(err("vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
                if nums.len() >= 6 {
                    colors.push([nums[3], nums[4], nums[5]]);
                }
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| err("bad face index"))?;
                        let n = vertices.len() as i64;
                        let resolved = if i < 0 { n + i } else { i - 1 };
                        if resolved < 0 || resolved >= n {
                            return Err(err("face index out of range"));
                        }
                        Ok(resolved as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err("face needs at least three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let colors = (!colors.is_empty() && colors.len() == vertices.len()).then_some(colors);
    TriangleMesh::new(vertices, faces, colors)
}

fn ply_header(s: &mut String, n_vertices: usize, colored: bool, n_faces: Option<usize>) {
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {n_vertices}").unwrap();
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if colored {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if let Some(nf) = n_faces {
        writeln!(s, "element face {nf}").unwrap();
        s.push_str("property list uchar int vertex_indices\n");
    }
    s.push_str("end_header\n");
}

fn write_ply_vertices(s: &mut String, points: &[Vec3], colors: Option<&[Rgb]>) {
    for (i, p) in points.iter().enumerate() {
        write!(s, "{} {} {}", p.x, p.y, p.z).unwrap();
        if let Some(c) = colors {
            let q = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
            write!(s, " {} {} {}", q(c[i][0]), q(c[i][1]), q(c[i][2])).unwrap();
        }
        s.push('\n');
    }
}

pub fn write_ply_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut s = String::new();
    ply_header(&mut s, mesh.vertices().len(), mesh.colors().is_some(), Some(mesh.faces().len()));
    write_ply_vertices(&mut s, mesh.vertices(), mesh.colors());
    for f in mesh.faces() {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    atomic_write(path, s.as_bytes())
}

pub fn write_ply_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut s = String::new();
    ply_header(&mut s, cloud.len(), cloud.colors().is_some(), None);
    write_ply_vertices(&mut s, cloud.points(), cloud.colors());
    atomic_write(path, s.as_bytes())
}

struct PlyData {
    points: Vec<Vec3>,
    colors: Option<Vec<Rgb>>,
    faces: Vec<[u32; 3]>,
}

fn parse_ply(path: &Path) -> Result<PlyData> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::parse(path, "PLY is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::parse(path, "missing ply magic"));
    }
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    for line in lines.by_ref() {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::parse(path, "only ASCII PLY is supported"));
            }
            ["element", "vertex", n] => {
                n_vertices = n.parse().map_err(|_| Error::parse(path, "bad vertex count"))?;
                in_vertex = true;
            }
            ["element", "face", n] => {
                n_faces = n.parse().map_err(|_| Error::parse(path, "bad face count"))?;
                in_vertex = false;
            }
            ["element", ..] => in_vertex = false,
            ["property", .., name] if in_vertex => props.push((*name).to_owned()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let pos = |name: &str| props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (pos("x"), pos("y"), pos("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::parse(path, "vertex element lacks x/y/z")),
    };
    let rgb = match (pos("red"), pos("green"), pos("blue")) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        _ => None,
    };
    let mut points = Vec::with_capacity(n_vertices);
    let mut colors = Vec::new();
    for _ in 0..n_vertices {
        let line = lines.next().ok_or_else(|| Error::parse(path, "truncated vertex list"))?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(path, "bad vertex value")))
            .collect::<Result<_>>()?;
        if v.len() < props.len() {
            return Err(Error::parse(path, "short vertex line"));
        }
        points.push(Vec3::new(v[xi], v[yi], v[zi]));
        if let Some((r, g, b)) = rgb {
            colors.push([v[r] / 255.0, v[g] / 255.0, v[b] / 255.0]);
        }
    }
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let line = lines.next().ok_or_else(|| Error::parse(path, "truncated face list"))?;
        let v: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| Error::parse(path, "bad face index")))
            .collect::<Result<_>>()?;
        let n = *v.first().ok_or_else(|| Error::parse(path, "empty face line"))? as usize;
        if n < 3 || v.len() < n + 1 {
            return Err(Error::parse(path, "face needs at least three indices"));
        }
        for k in 2..n {
            faces.push([v[1], v[k], v[k + 1]]);
        }
    }
    Ok(PlyData {
        points,
        colors: rgb.map(|_| colors),
        faces,
    })
}

pub fn read_ply_mesh(path: &Path) -> Result<TriangleMesh> {
    let d = parse_ply(path)?;
    TriangleMesh::new(d.points, d.faces, d.colors)
}

pub fn read_ply_points(path: &Path) -> Result<PointCloud> {
    let d = parse_ply(path)?;
    PointCloud::new(d.points, d.colors)
}

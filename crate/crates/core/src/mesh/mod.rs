//! Marching-cubes extraction over the active voxels, surface sampling, and
//! binary little-endian PLY I/O.

mod tables;

use std::collections::HashMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::Vec3;
use crate::tape::VoxelKey;
use crate::{Error, Result};
use tables::{mc_table, CUBE_EDGES};

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) =
            (self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]);
        (b - a).cross(c - a).norm() * 0.5
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }
}

/// Extracts the zero iso-surface over the active voxels with cells of size
/// `h` (which must divide the voxel size). Cells with any corner outside the
/// queryable region are skipped rather than extrapolated. Vertex ordering is
/// deterministic: voxels ascending, cells z-minor, table order within a cell.
pub fn marching_cubes(
    active: &[VoxelKey],
    voxel_size: f64,
    h: f64,
    query: &dyn Fn(Vec3) -> Option<f64>,
) -> Result<TriangleMesh> {
    if h <= 0.0 {
        return Err(Error::Parse("cell size must be positive".into()));
    }
    let per_axis = voxel_size / h;
    let n = per_axis.round() as i64;
    if n < 1 || (per_axis - n as f64).abs() > 1e-9 {
        return Err(Error::Parse(format!(
            "cell size {h} must divide the voxel size {voxel_size}"
        )));
    }

    let mut sorted: Vec<VoxelKey> = active.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    // corner-value memo on the global fine lattice
    let mut values: HashMap<[i64; 3], Option<f64>> = HashMap::new();
    let mut corner_value = |g: [i64; 3]| -> Option<f64> {
        if let Some(v) = values.get(&g) {
            return *v;
        }
        let p = Vec3::new(g[0] as f64 * h, g[1] as f64 * h, g[2] as f64 * h);
        let v = query(p);
        values.insert(g, v);
        v
    };

    let mut mesh = TriangleMesh::default();
    let mut vertex_of_edge: HashMap<([i64; 3], [i64; 3]), u32> = HashMap::new();
    let table = mc_table();

    for key in sorted {
        let base = [key[0] as i64 * n, key[1] as i64 * n, key[2] as i64 * n];
        for cx in 0..n {
            for cy in 0..n {
                for cz in 0..n {
                    let cell = [base[0] + cx, base[1] + cy, base[2] + cz];
                    let mut corner_g = [[0i64; 3]; 8];
                    let mut s = [0.0; 8];
                    let mut ok = true;
                    for ci in 0..8 {
                        let g = [
                            cell[0] + ((ci >> 2) & 1) as i64,
                            cell[1] + ((ci >> 1) & 1) as i64,
                            cell[2] + (ci & 1) as i64,
                        ];
                        corner_g[ci] = g;
                        match corner_value(g) {
                            Some(v) => s[ci] = v,
                            None => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if !ok {
                        continue;
                    }
                    let mut config = 0usize;
                    for ci in 0..8 {
                        if s[ci] < 0.0 {
                            config |= 1 << ci;
                        }
                    }
                    if table[config].is_empty() {
                        continue;
                    }
                    let mut edge_vertex = [u32::MAX; 12];
                    for tri in &table[config] {
                        let mut idx = [0u32; 3];
                        for (slot, &e) in tri.iter().enumerate() {
                            let e = e as usize;
                            if edge_vertex[e] == u32::MAX {
                                let (a, b) = CUBE_EDGES[e];
                                let (ga, gb) = (corner_g[a], corner_g[b]);
                                let ekey = if ga <= gb { (ga, gb) } else { (gb, ga) };
                                let vid = *vertex_of_edge.entry(ekey).or_insert_with(|| {
                                    let (sa, sb) = (s[a], s[b]);
                                    let t = if sa == sb { 0.5 } else { sa / (sa - sb) };
                                    let pa = Vec3::new(
                                        ga[0] as f64 * h,
                                        ga[1] as f64 * h,
                                        ga[2] as f64 * h,
                                    );
                                    let pb = Vec3::new(
                                        gb[0] as f64 * h,
                                        gb[1] as f64 * h,
                                        gb[2] as f64 * h,
                                    );
                                    mesh.vertices.push(pa + (pb - pa) * t);
                                    (mesh.vertices.len() - 1) as u32
                                });
                                edge_vertex[e] = vid;
                            }
                            idx[slot] = edge_vertex[e];
                        }
                        if idx[0] == idx[1] || idx[1] == idx[2] || idx[0] == idx[2] {
                            continue;
                        }
                        let (a, b, c) = (
                            mesh.vertices[idx[0] as usize],
                            mesh.vertices[idx[1] as usize],
                            mesh.vertices[idx[2] as usize],
                        );
                        if (b - a).cross(c - a).norm() == 0.0 {
                            continue;
                        }
                        mesh.triangles.push(idx);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Area-weighted uniform surface samples, deterministic under `seed`.
pub fn sample_mesh_points(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.gen_range(0.0..total);
        let t = cumulative.partition_point(|&c| c < r).min(mesh.triangles.len() - 1);
        let [ia, ib, ic] = mesh.triangles[t];
        let (a, b, c) = (
            mesh.vertices[ia as usize],
            mesh.vertices[ib as usize],
            mesh.vertices[ic as usize],
        );
        let r1: f64 = rng.gen_range(0.0..1.0);
        let r2: f64 = rng.gen_range(0.0..1.0);
        let sq = r1.sqrt();
        out.push(a * (1.0 - sq) + b * (sq * (1.0 - r2)) + c * (sq * r2));
    }
    Ok(out)
}

// ---- PLY ---------------------------------------------------------------------

/// Writes a binary little-endian PLY with float vertices and uchar-int faces.
pub fn save_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(
        f,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for v in &mesh.vertices {
        for c in [v.x, v.y, v.z] {
            f.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    for t in &mesh.triangles {
        f.write_all(&[3u8])?;
        for &i in t {
            f.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes a point set as a vertex-only PLY.
pub fn save_ply_points(path: &Path, points: &[Vec3]) -> Result<()> {
    let mesh = TriangleMesh { vertices: points.to_vec(), triangles: Vec::new() };
    save_ply(path, &mesh)
}

/// Reads the PLY subset this crate writes (binary LE, float or double
/// vertices, uchar-int faces). A mesh with zero faces is a point set.
pub fn load_ply(path: &Path) -> Result<TriangleMesh> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::Format("ply: missing end_header".into()))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format("ply: header is not utf-8".into()))?;

    let mut n_vertex = 0usize;
    let mut n_face = 0usize;
    let mut vertex_is_double = false;
    let mut in_vertex = false;
    let mut vertex_props = 0usize;
    for line in header.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] | ["end_header"] | ["comment", ..] => {}
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => {
                return Err(Error::Format(format!("ply: unsupported format {other}")));
            }
            ["element", "vertex", n] => {
                n_vertex = n.parse().map_err(|e| Error::Format(format!("ply: {e}")))?;
                in_vertex = true;
            }
            ["element", "face", n] => {
                n_face = n.parse().map_err(|e| Error::Format(format!("ply: {e}")))?;
                in_vertex = false;
            }
            ["element", other, _] => {
                return Err(Error::Format(format!("ply: unsupported element {other}")));
            }
            ["property", kind, _name] if in_vertex => {
                vertex_props += 1;
                if *kind == "double" {
                    vertex_is_double = true;
                } else if *kind != "float" {
                    return Err(Error::Format(format!("ply: unsupported vertex type {kind}")));
                }
            }
            ["property", "list", "uchar", "int", _] | ["property", "list", "uchar", "uint", _] => {}
            _ => {}
        }
    }
    if vertex_props < 3 {
        return Err(Error::Format("ply: vertex element needs x y z".into()));
    }
    let scalar = if vertex_is_double { 8 } else { 4 };
    let mut at = header_end;
    let need = n_vertex * vertex_props * scalar;
    if bytes.len() < at + need {
        return Err(Error::Format("ply: truncated vertex data".into()));
    }
    let mut vertices = Vec::with_capacity(n_vertex);
    for _ in 0..n_vertex {
        let mut comp = [0.0f64; 3];
        for c in comp.iter_mut() {
            *c = if vertex_is_double {
                f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
            } else {
                f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64
            };
            at += scalar;
        }
        at += (vertex_props - 3) * scalar;
        vertices.push(Vec3::new(comp[0], comp[1], comp[2]));
    }
    let mut triangles = Vec::with_capacity(n_face);
    for _ in 0..n_face {
        if at >= bytes.len() {
            return Err(Error::Format("ply: truncated face data".into()));
        }
        let cnt = bytes[at] as usize;
        at += 1;
        if cnt != 3 {
            return Err(Error::Format("ply: only triangle faces are supported".into()));
        }
        if bytes.len() < at + 12 {
            return Err(Error::Format("ply: truncated face data".into()));
        }
        let mut idx = [0u32; 3];
        for v in idx.iter_mut() {
            *v = i32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as u32;
            at += 4;
        }
        if idx.iter().any(|&i| i as usize >= n_vertex) {
            return Err(Error::Format("ply: face index out of range".into()));
        }
        triangles.push(idx);
    }
    Ok(TriangleMesh { vertices, triangles })
}

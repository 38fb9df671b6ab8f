//! Tetrahedral-grid surface extraction, mesh rendering and mesh I/O.
//!
//! The grid is a body-centered cubic lattice: `(r+1)³` cube corners followed
//! by `r³` cube centers. Each cube is split into six face pyramids, each
//! pyramid into two tetrahedra along the face diagonal through the face's
//! lowest-index corner, which keeps neighbouring cubes conforming.
//!
//! Marching tetrahedra, by number of inside (`s < 0`) vertices:
//!
//! | inside | output                                   |
//! |--------|------------------------------------------|
//! | 0, 4   | nothing (an all-zero tet is "outside")   |
//! | 1, 3   | one triangle on the three crossing edges |
//! | 2      | a quad on four edges, split in two       |
//!
//! Every case of the 16 sign patterns reduces to one of these rows.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::camera::{Camera, PoseDistribution, Vec3};
use crate::error::{config_err, shape_err, Error, Result};
use crate::features::Image;
use crate::fields::{FieldGrads, FieldSet, SparseGrad};
use crate::refine::{refine_loop, Block, BlockGrad, DiffusionSchedule, Refinable, RefineConfig, RefineTrace, ScoreProvider};

pub const DEFAULT_TET_RESOLUTION: usize = 96;
pub const DEFAULT_SURFACE_SAMPLES: usize = 10_000;
pub const BACKGROUND_GRAY: f64 = 128.0 / 255.0;
const MIN_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TetGrid {
    pub resolution: usize,
    pub vertices: Vec<Vec3>,
    pub tets: Vec<[u32; 4]>,
    pub sdf: Vec<f64>,
    pub deformation: Vec<Vec3>,
    /// Half the shortest incident lattice edge, per vertex.
    pub max_deformation: Vec<f64>,
}

fn signed_volume(p: [Vec3; 4]) -> f64 {
    (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&(p[3] - p[0])) / 6.0
}

pub fn init_tetgrid(resolution: usize, bounds: (Vec3, Vec3)) -> Result<TetGrid> {
    if resolution < 2 {
        return Err(config_err(format!("tet grid resolution must be >= 2, got {resolution}")));
    }
    let (lo, hi) = bounds;
    if (0..3).any(|a| !(hi[a] > lo[a])) {
        return Err(config_err("tet grid bounds are empty"));
    }
    let r = resolution;
    let n = r + 1;
    let step = (hi - lo) / r as f64;
    let corner = |i: usize, j: usize, k: usize| (i + n * (j + n * k)) as u32;
    let mut vertices = Vec::with_capacity(n * n * n + r * r * r);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                vertices.push(lo + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z));
            }
        }
    }
    let center_base = vertices.len();
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                vertices.push(lo + Vec3::new((i as f64 + 0.5) * step.x, (j as f64 + 0.5) * step.y, (k as f64 + 0.5) * step.z));
            }
        }
    }
    let mut tets = Vec::with_capacity(12 * r * r * r);
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                let c = (center_base + i + r * (j + r * k)) as u32;
                let v = |di: usize, dj: usize, dk: usize| corner(i + di, j + dj, k + dk);
                // faces as corner cycles starting at the face's lowest corner
                let faces = [
                    [v(0, 0, 0), v(0, 1, 0), v(0, 1, 1), v(0, 0, 1)],
                    [v(1, 0, 0), v(1, 1, 0), v(1, 1, 1), v(1, 0, 1)],
                    [v(0, 0, 0), v(1, 0, 0), v(1, 0, 1), v(0, 0, 1)],
                    [v(0, 1, 0), v(1, 1, 0), v(1, 1, 1), v(0, 1, 1)],
                    [v(0, 0, 0), v(1, 0, 0), v(1, 1, 0), v(0, 1, 0)],
                    [v(0, 0, 1), v(1, 0, 1), v(1, 1, 1), v(0, 1, 1)],
                ];
                for f in faces {
                    for t in [[f[0], f[1], f[2], c], [f[0], f[2], f[3], c]] {
                        let p = t.map(|x| vertices[x as usize]);
                        tets.push(if signed_volume(p) < 0.0 { [t[1], t[0], t[2], t[3]] } else { t });
                    }
                }
            }
        }
    }
    let mut max_deformation = vec![f64::INFINITY; vertices.len()];
    for t in &tets {
        for a in 0..4 {
            for b in a + 1..4 {
                let (ia, ib) = (t[a] as usize, t[b] as usize);
                let half = 0.5 * (vertices[ia] - vertices[ib]).norm();
                max_deformation[ia] = max_deformation[ia].min(half);
                max_deformation[ib] = max_deformation[ib].min(half);
            }
        }
    }
    let nv = vertices.len();
    Ok(TetGrid {
        resolution,
        vertices,
        tets,
        sdf: vec![0.0; nv],
        deformation: vec![Vec3::zeros(); nv],
        max_deformation,
    })
}

impl TetGrid {
    pub fn lattice_vertex_count(resolution: usize) -> usize {
        (resolution + 1).pow(3) + resolution.pow(3)
    }

    pub fn position(&self, i: usize) -> Vec3 {
        self.vertices[i] + self.deformation[i]
    }

    pub fn positions(&self) -> Vec<Vec3> {
        (0..self.vertices.len()).map(|i| self.position(i)).collect()
    }

    /// Samples the field's SDF at every deformed vertex.
    pub fn sample_sdf(&mut self, fields: &FieldSet) {
        let pos = self.positions();
        self.sdf = pos.par_iter().map(|p| fields.sdf(p)).collect();
    }

    pub fn set_sdf_fn(&mut self, f: impl Fn(&Vec3) -> f64 + Sync) {
        let pos = self.positions();
        self.sdf = pos.par_iter().map(&f).collect();
    }

    /// Scales every deformation back inside its allowed ball.
    pub fn clamp_deformation(&mut self) {
        for (d, &m) in self.deformation.iter_mut().zip(&self.max_deformation) {
            let n = d.norm();
            if n > m {
                *d *= m / n;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.sdf.len() != n || self.deformation.len() != n || self.max_deformation.len() != n {
            return Err(shape_err("tet grid per-vertex arrays disagree in length"));
        }
        if self.tets.iter().flatten().any(|&i| i as usize >= n) {
            return Err(shape_err("tet index out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_points(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.face_points(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.face_points(f);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Every undirected edge is used exactly twice, once in each direction.
    pub fn is_watertight(&self) -> bool {
        if self.faces.is_empty() {
            return false;
        }
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                *directed.entry((f[e], f[(e + 1) % 3])).or_default() += 1;
            }
        }
        directed.iter().all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut n = vec![Vec3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i as usize]);
            let fn_ = (b - a).cross(&(c - a));
            for &i in f {
                n[i as usize] += fn_;
            }
        }
        n.into_iter()
            .map(|v| if v.norm() > 0.0 { v.normalize() } else { v })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.faces.iter().flatten().any(|&i| i as usize >= n) {
            return Err(shape_err("face index out of range"));
        }
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(shape_err("vertex colors do not match vertex count"));
            }
        }
        Ok(())
    }

    /// Faces reordered so each starts at its smallest index and the list is
    /// sorted; makes meshes comparable regardless of extraction order.
    pub fn canonical_faces(&self) -> Vec<[u32; 3]> {
        let mut faces: Vec<[u32; 3]> = self.faces.iter().map(|f| rotate_min_first(*f)).collect();
        faces.sort_unstable();
        faces
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.vertices.iter().enumerate() {
            match &self.colors {
                Some(c) => {
                    let c = c[i];
                    writeln!(out, "v {} {} {} {} {} {}", v.x, v.y, v.z, c[0], c[1], c[2]).unwrap()
                }
                None => writeln!(out, "v {} {} {}", v.x, v.y, v.z).unwrap(),
            }
        }
        for n in self.vertex_normals() {
            writeln!(out, "vn {} {} {}", n.x, n.y, n.z).unwrap();
        }
        for f in &self.faces {
            let [a, b, c] = f.map(|i| i + 1);
            writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}").unwrap();
        }
        out
    }

    pub fn from_obj(text: &str) -> Result<TriMesh> {
        let mut vertices = Vec::new();
        let mut colors = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Format(format!("OBJ line {}: {what}", lineno + 1));
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let vals: Vec<f64> = it.map(|s| s.parse::<f64>().map_err(|_| bad("bad number"))).collect::<Result<_>>()?;
                    if vals.len() < 3 {
                        return Err(bad("vertex needs 3 coordinates"));
                    }
                    vertices.push(Vec3::new(vals[0], vals[1], vals[2]));
                    if vals.len() >= 6 {
                        colors.push([vals[3], vals[4], vals[5]]);
                    }
                }
                Some("f") => {
                    let n = vertices.len() as i64;
                    let idx: Vec<u32> = it
                        .map(|tok| {
                            let first = tok.split('/').next().unwrap_or("");
                            let i: i64 = first.parse().map_err(|_| bad("bad face index"))?;
                            let i = if i < 0 { n + i } else { i - 1 };
                            if i < 0 || i >= n {
                                return Err(bad("face index out of range"));
                            }
                            Ok(i as u32)
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad("face needs at least 3 vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let colors = (colors.len() == vertices.len() && !colors.is_empty()).then_some(colors);
        let mesh = TriMesh { vertices, faces, colors };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn to_ply(&self) -> Vec<u8> {
        let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
        writeln!(header, "element vertex {}", self.vertices.len()).unwrap();
        header.push_str("property float x\nproperty float y\nproperty float z\n");
        if self.colors.is_some() {
            header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        }
        writeln!(header, "element face {}", self.faces.len()).unwrap();
        header.push_str("property list uchar int vertex_indices\nend_header\n");
        let mut out = header.into_bytes();
        for (i, v) in self.vertices.iter().enumerate() {
            binio::put_f32s(&mut out, [v.x, v.y, v.z]);
            if let Some(c) = &self.colors {
                out.extend(c[i].map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
        for f in &self.faces {
            out.push(3);
            for &i in f {
                out.extend_from_slice(&(i as i32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = match path.extension().and_then(|e| e.to_str()) {
            Some("ply") => self.to_ply(),
            Some("obj") => self.to_obj().into_bytes(),
            _ => return Err(config_err(format!("unknown mesh format for {}", path.display()))),
        };
        binio::write_atomic(path, &bytes)
    }

    pub fn load_obj(path: &Path) -> Result<TriMesh> {
        let bytes = binio::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format("OBJ is not UTF-8".into()).at(path))?;
        TriMesh::from_obj(&text).map_err(|e| e.at(path))
    }
}

fn rotate_min_first(f: [u32; 3]) -> [u32; 3] {
    let m = (0..3).min_by_key(|&i| f[i]).unwrap();
    [f[m], f[(m + 1) % 3], f[(m + 2) % 3]]
}

/// Where an extracted vertex came from: `p_a + t·(p_b − p_a)` with
/// `t = s_a / (s_a − s_b)`; `a == b` for crossings exactly on a lattice vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexSource {
    pub a: u32,
    pub b: u32,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum WeldKey {
    Vertex(u32),
    Edge(u32, u32),
}

fn crossing(grid_sdf: &[f64], a: u32, b: u32) -> (WeldKey, VertexSource) {
    let (a, b) = (a.min(b), a.max(b));
    let (sa, sb) = (grid_sdf[a as usize], grid_sdf[b as usize]);
    let t = sa / (sa - sb);
    if t == 0.0 {
        (WeldKey::Vertex(a), VertexSource { a, b: a, t: 0.0 })
    } else if t == 1.0 {
        (WeldKey::Vertex(b), VertexSource { a: b, b, t: 0.0 })
    } else {
        (WeldKey::Edge(a, b), VertexSource { a, b, t })
    }
}

type LocalTri = [(WeldKey, VertexSource); 3];

fn tet_triangles(tet: &[u32; 4], sdf: &[f64], pos: &[Vec3]) -> Vec<LocalTri> {
    let inside: Vec<u32> = tet.iter().copied().filter(|&v| sdf[v as usize] < 0.0).collect();
    let outside: Vec<u32> = tet.iter().copied().filter(|&v| !(sdf[v as usize] < 0.0)).collect();
    let centroid = |vs: &[u32]| vs.iter().map(|&v| pos[v as usize]).sum::<Vec3>() / vs.len() as f64;
    let tris: Vec<LocalTri> = match inside.len() {
        1 | 3 => {
            let (lone, others) = if inside.len() == 1 { (inside[0], &outside) } else { (outside[0], &inside) };
            vec![[0, 1, 2].map(|k| crossing(sdf, lone, others[k]))]
        }
        2 => {
            let (a, b, c, d) = (inside[0], inside[1], outside[0], outside[1]);
            let q = [crossing(sdf, a, c), crossing(sdf, a, d), crossing(sdf, b, d), crossing(sdf, b, c)];
            // split along the diagonal touching the smallest key
            let m = (0..4).min_by_key(|&i| q[i].0).unwrap();
            let (p0, p1, p2, p3) = (q[m], q[(m + 1) % 4], q[(m + 2) % 4], q[(m + 3) % 4]);
            vec![[p0, p1, p2], [p0, p2, p3]]
        }
        _ => Vec::new(),
    };
    let dir = centroid(&outside) - centroid(&inside);
    let point = |s: &VertexSource| {
        let (pa, pb) = (pos[s.a as usize], pos[s.b as usize]);
        pa + (pb - pa) * s.t
    };
    tris.into_iter()
        .filter_map(|mut t| {
            let [p0, p1, p2] = [point(&t[0].1), point(&t[1].1), point(&t[2].1)];
            let n = (p1 - p0).cross(&(p2 - p0));
            if 0.5 * n.norm() < MIN_AREA {
                return None;
            }
            if n.dot(&dir) < 0.0 {
                t.swap(1, 2);
            }
            Some(t)
        })
        .collect()
}

/// Mesh plus the provenance of each vertex.
pub fn extract_with_sources(grid: &TetGrid) -> Result<(TriMesh, Vec<VertexSource>)> {
    grid.validate()?;
    let pos = grid.positions();
    let local: Vec<Vec<LocalTri>> = grid.tets.par_iter().map(|t| tet_triangles(t, &grid.sdf, &pos)).collect();
    let mut index: HashMap<WeldKey, u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut sources = Vec::new();
    let mut faces = Vec::new();
    for tri in local.iter().flatten() {
        let f = tri.map(|(key, src)| {
            *index.entry(key).or_insert_with(|| {
                let (pa, pb) = (pos[src.a as usize], pos[src.b as usize]);
                vertices.push(pa + (pb - pa) * src.t);
                sources.push(src);
                (vertices.len() - 1) as u32
            })
        });
        faces.push(rotate_min_first(f));
    }
    Ok((
        TriMesh {
            vertices,
            faces,
            colors: None,
        },
        sources,
    ))
}

pub fn marching_tetrahedra(grid: &TetGrid) -> Result<TriMesh> {
    Ok(extract_with_sources(grid)?.0)
}

/// Area-weighted surface samples with their face normals.
pub fn sample_surface_points(mesh: &TriMesh, n: usize, seed: u64) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.random_range(0.0..acc);
        let f = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let [a, b, c] = mesh.face_points(f);
        points.push(a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2));
        normals.push(mesh.face_normal(f));
    }
    Ok((points, normals))
}

/// Nearest hit of a ray with a triangle: `(t, u, v)` with the hit at
/// `(1−u−v)·a + u·b + v·c`.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: [Vec3; 3]) -> Option<(f64, f64, f64)> {
    let [a, b, c] = tri;
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some((t, u, v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub face: usize,
    pub t: f64,
    pub u: f64,
    pub v: f64,
}

const TILE: usize = 8;

/// Nearest triangle per pixel for a camera. Faces are binned into 8×8
/// pixel tiles by their projected bounding boxes.
pub fn raycast(mesh: &TriMesh, camera: &Camera) -> Vec<Option<Hit>> {
    let (w, h) = (camera.intrinsics.width as usize, camera.intrinsics.height as usize);
    let (tw, th) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); tw * th];
    for f in 0..mesh.faces.len() {
        let proj = mesh.face_points(f).map(|p| camera.project(&p));
        let (x0, x1, y0, y1) = if proj.iter().all(|p| p.depth > 0.0) {
            let xs = proj.map(|p| p.uv.x);
            let ys = proj.map(|p| p.uv.y);
            let lo = |v: [f64; 3]| v.iter().cloned().fold(f64::INFINITY, f64::min).floor() - 1.0;
            let hi = |v: [f64; 3]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
            (lo(xs), hi(xs), lo(ys), hi(ys))
        } else {
            (0.0, w as f64, 0.0, h as f64)
        };
        if x1 < 0.0 || y1 < 0.0 || x0 >= w as f64 || y0 >= h as f64 {
            continue;
        }
        let tx0 = (x0.max(0.0) as usize) / TILE;
        let tx1 = ((x1.min((w - 1) as f64)) as usize) / TILE;
        let ty0 = (y0.max(0.0) as usize) / TILE;
        let ty1 = ((y1.min((h - 1) as f64)) as usize) / TILE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tw + tx].push(f);
            }
        }
    }
    let origin = camera.position();
    (0..w * h)
        .into_par_iter()
        .map(|p| {
            let (x, y) = (p % w, p / w);
            let dir = camera.unproject_direction(x as f64, y as f64);
            let mut best: Option<Hit> = None;
            for &f in &bins[(y / TILE) * tw + x / TILE] {
                if let Some((t, u, v)) = ray_triangle(&origin, &dir, mesh.face_points(f)) {
                    if best.is_none_or(|b| t < b.t) {
                        best = Some(Hit { face: f, t, u, v });
                    }
                }
            }
            best
        })
        .collect()
}

fn resized(camera: &Camera, resolution: Option<u32>) -> Camera {
    match resolution {
        Some(r) => {
            let mut c = camera.clone();
            c.intrinsics = camera.intrinsics.rescaled(r, r);
            c
        }
        None => camera.clone(),
    }
}

/// Normal map, row-major RGB with normals mapped to `(n + 1) / 2` and a
/// gray background.
pub fn normal_map_values(mesh: &TriMesh, camera: &Camera) -> Vec<f64> {
    raycast(mesh, camera)
        .iter()
        .flat_map(|h| match h {
            Some(h) => {
                let n = mesh.face_normal(h.face);
                [(n.x + 1.0) / 2.0, (n.y + 1.0) / 2.0, (n.z + 1.0) / 2.0]
            }
            None => [BACKGROUND_GRAY; 3],
        })
        .collect()
}

pub fn render_normal_map(mesh: &TriMesh, camera: &Camera, resolution: Option<u32>) -> Result<Image> {
    let cam = resized(camera, resolution);
    let (w, h) = (cam.intrinsics.width as usize, cam.intrinsics.height as usize);
    Image::new(w, h, normal_map_values(mesh, &cam))
}

/// Gradient of `Σ upstream · normal_map` w.r.t. mesh vertex positions.
/// Only the hit triangle's vertices receive gradient; visibility changes
/// at silhouettes are ignored.
pub fn normal_map_backward(mesh: &TriMesh, camera: &Camera, upstream: &[f64]) -> Result<Vec<Vec3>> {
    let hits = raycast(mesh, camera);
    if upstream.len() != hits.len() * 3 {
        return Err(shape_err("normal-map gradient does not match the frame"));
    }
    let mut grads = vec![Vec3::zeros(); mesh.vertices.len()];
    for (p, hit) in hits.iter().enumerate() {
        let Some(hit) = hit else { continue };
        let g_n = Vec3::new(upstream[3 * p], upstream[3 * p + 1], upstream[3 * p + 2]) * 0.5;
        if g_n == Vec3::zeros() {
            continue;
        }
        let [v0, v1, v2] = mesh.faces[hit.face];
        let [a, b, c] = mesh.face_points(hit.face);
        let (e1, e2) = (b - a, c - a);
        let cr = e1.cross(&e2);
        let len = cr.norm();
        let n = cr / len;
        let g_c = (g_n - n * n.dot(&g_n)) / len;
        grads[v0 as usize] += (e1 - e2).cross(&g_c);
        grads[v1 as usize] += e2.cross(&g_c);
        grads[v2 as usize] += g_c.cross(&e1);
    }
    Ok(grads)
}

/// Pulls vertex-position gradients back to tet-grid sdf and deformation.
pub fn vertex_grads_to_grid(grid: &TetGrid, sources: &[VertexSource], vgrad: &[Vec3]) -> (SparseGrad, SparseGrad) {
    let mut g_sdf = SparseGrad::default();
    let mut g_def = SparseGrad::default();
    for (src, g) in sources.iter().zip(vgrad) {
        if *g == Vec3::zeros() {
            continue;
        }
        let (a, b) = (src.a as usize, src.b as usize);
        if a == b {
            for k in 0..3 {
                g_def.push(3 * a + k, g[k]);
            }
            continue;
        }
        let (pa, pb) = (grid.position(a), grid.position(b));
        let (sa, sb) = (grid.sdf[a], grid.sdf[b]);
        let d = sa - sb;
        let gd = g.dot(&(pb - pa));
        g_sdf.push(a, gd * (-sb / (d * d)));
        g_sdf.push(b, gd * (sa / (d * d)));
        for k in 0..3 {
            g_def.push(3 * a + k, (1.0 - src.t) * g[k]);
            g_def.push(3 * b + k, src.t * g[k]);
        }
    }
    g_sdf.coalesce();
    g_def.coalesce();
    (g_sdf, g_def)
}

fn checksum_f64s(values: impl Iterator<Item = f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Geometry phase target: the tet grid seen through its normal map.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryTarget {
    pub grid: TetGrid,
    pub resolution: Option<u32>,
}

impl Refinable for GeometryTarget {
    fn render(&self, camera: &Camera) -> Result<(usize, usize, Vec<f64>)> {
        let cam = resized(camera, self.resolution);
        let mesh = marching_tetrahedra(&self.grid)?;
        let (w, h) = (cam.intrinsics.width as usize, cam.intrinsics.height as usize);
        Ok((w, h, normal_map_values(&mesh, &cam)))
    }

    fn backward(&self, camera: &Camera, upstream: &[f64]) -> Result<Vec<BlockGrad>> {
        let cam = resized(camera, self.resolution);
        let (mesh, sources) = extract_with_sources(&self.grid)?;
        let vgrad = normal_map_backward(&mesh, &cam, upstream)?;
        let (g_sdf, g_def) = vertex_grads_to_grid(&self.grid, &sources, &vgrad);
        Ok(vec![
            BlockGrad {
                block: Block::TetSdf,
                grad: g_sdf,
            },
            BlockGrad {
                block: Block::Deformation,
                grad: g_def,
            },
        ])
    }

    fn apply(&mut self, block: Block, delta: &SparseGrad) {
        match block {
            Block::TetSdf => {
                for &(i, v) in &delta.entries {
                    self.grid.sdf[i] -= v;
                }
            }
            Block::Deformation => {
                for &(i, v) in &delta.entries {
                    self.grid.deformation[i / 3][i % 3] -= v;
                }
                self.grid.clamp_deformation();
            }
            _ => {}
        }
    }

    fn frozen_checksum(&self) -> u64 {
        checksum_f64s(self.grid.vertices.iter().flat_map(|v| [v.x, v.y, v.z]))
    }
}

/// Texture phase target: a fixed mesh colored by the field's texture
/// decoder at the visible surface point.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureTarget {
    pub mesh: TriMesh,
    pub fields: FieldSet,
    pub background: [f64; 3],
    pub resolution: Option<u32>,
}

impl TextureTarget {
    fn hit_point(&self, hit: &Hit) -> Vec3 {
        let [a, b, c] = self.mesh.face_points(hit.face);
        a * (1.0 - hit.u - hit.v) + b * hit.u + c * hit.v
    }

    /// Per-vertex colors from the texture decoder.
    pub fn colored_mesh(&self) -> TriMesh {
        let colors = self.mesh.vertices.par_iter().map(|v| self.fields.color(v)).collect();
        TriMesh {
            colors: Some(colors),
            ..self.mesh.clone()
        }
    }
}

impl Refinable for TextureTarget {
    fn render(&self, camera: &Camera) -> Result<(usize, usize, Vec<f64>)> {
        let cam = resized(camera, self.resolution);
        let hits = raycast(&self.mesh, &cam);
        let values = hits
            .par_iter()
            .flat_map_iter(|h| match h {
                Some(h) => self.fields.color(&self.hit_point(h)),
                None => self.background,
            })
            .collect();
        Ok((cam.intrinsics.width as usize, cam.intrinsics.height as usize, values))
    }

    fn backward(&self, camera: &Camera, upstream: &[f64]) -> Result<Vec<BlockGrad>> {
        let cam = resized(camera, self.resolution);
        let hits = raycast(&self.mesh, &cam);
        if upstream.len() != hits.len() * 3 {
            return Err(shape_err("texture gradient does not match the frame"));
        }
        let per_pixel: Vec<Option<FieldGrads>> = hits
            .par_iter()
            .enumerate()
            .map(|(p, h)| {
                let h = h.as_ref()?;
                let u = [upstream[3 * p], upstream[3 * p + 1], upstream[3 * p + 2]];
                let ev = self.fields.color_eval(&self.hit_point(h));
                let mut g = FieldGrads::new(self.fields.texture_param_count());
                self.fields.color_backward(&ev, u, &mut g);
                Some(g)
            })
            .collect();
        let mut total = FieldGrads::new(self.fields.texture_param_count());
        for g in per_pixel.iter().flatten() {
            total.accumulate(g);
        }
        total.coalesce();
        Ok(vec![
            BlockGrad {
                block: Block::Hash,
                grad: total.hash,
            },
            BlockGrad {
                block: Block::Texture,
                grad: SparseGrad {
                    entries: total.texture.into_iter().enumerate().collect(),
                },
            },
        ])
    }

    fn apply(&mut self, block: Block, delta: &SparseGrad) {
        let none = SparseGrad::default();
        match block {
            Block::Hash => self.fields.apply_step(&none, delta, &[]),
            Block::Texture => {
                let dense = delta.to_dense(self.fields.texture_param_count());
                self.fields.apply_step(&none, &none, &dense);
            }
            _ => {}
        }
    }

    fn frozen_checksum(&self) -> u64 {
        checksum_f64s(self.mesh.vertices.iter().flat_map(|v| [v.x, v.y, v.z])) ^ self.fields.geometry_checksum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshFinetuneConfig {
    pub tet_resolution: usize,
    pub geometry_iterations: usize,
    pub texture_iterations: usize,
    /// Square render size; 512 and 1024 are the standard presets.
    pub resolution: Option<u32>,
    pub background: [f64; 3],
    pub refine: RefineConfig,
}

impl Default for MeshFinetuneConfig {
    fn default() -> Self {
        MeshFinetuneConfig {
            tet_resolution: DEFAULT_TET_RESOLUTION,
            geometry_iterations: 100,
            texture_iterations: 100,
            resolution: Some(512),
            background: [1.0; 3],
            refine: RefineConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeshFinetuneResult {
    pub grid: TetGrid,
    pub fields: FieldSet,
    /// Final surface with per-vertex texture colors.
    pub mesh: TriMesh,
    pub geometry_trace: RefineTrace,
    pub texture_trace: RefineTrace,
}

/// Two-phase mesh refinement: tet-grid sdf and deformation through the
/// normal map, then texture parameters through mesh color renders with the
/// geometry frozen.
pub fn mesh_finetune(
    grid: TetGrid,
    fields: FieldSet,
    pre: &mut dyn ScoreProvider,
    lora: &mut dyn ScoreProvider,
    poses: &PoseDistribution,
    schedule: &DiffusionSchedule,
    config: &MeshFinetuneConfig,
) -> Result<MeshFinetuneResult> {
    let mut geo = GeometryTarget {
        grid,
        resolution: config.resolution,
    };
    let geo_cfg = RefineConfig {
        iterations: config.geometry_iterations,
        ..config.refine.clone()
    };
    let geometry_trace = refine_loop(&mut geo, pre, lora, poses, schedule, &geo_cfg)?;
    let mesh = marching_tetrahedra(&geo.grid)?;
    let mut tex = TextureTarget {
        mesh,
        fields,
        background: config.background,
        resolution: config.resolution,
    };
    let tex_cfg = RefineConfig {
        iterations: config.texture_iterations,
        seed: config.refine.seed.wrapping_add(1),
        ..config.refine.clone()
    };
    let texture_trace = refine_loop(&mut tex, pre, lora, poses, schedule, &tex_cfg)?;
    let mesh = tex.colored_mesh();
    Ok(MeshFinetuneResult {
        grid: geo.grid,
        fields: tex.fields,
        mesh,
        geometry_trace,
        texture_trace,
    })
}

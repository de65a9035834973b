//! Indexed triangle meshes, surface-point correspondence and midpoint subdivision.
//!
//! All meshes of a dataset share one face list, so a [`SurfacePoint`]
//! (face index plus barycentric weights) names the same semantic location on
//! the template and on every example.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face} references vertex {index} but mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("face {0} is degenerate (repeated vertex index)")]
    DegenerateFace(usize),
    #[error("face index {face} out of range ({count} faces)")]
    FaceOutOfRange { face: usize, count: usize },
    #[error("vertex {0} is not referenced by any face")]
    IsolatedVertex(usize),
    #[error("mesh has zero total area")]
    ZeroArea,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unsupported face with {arity} vertices (only triangles)")]
    Unsupported { line: usize, arity: usize },
    #[error("meshes do not share connectivity")]
    ConnectivityMismatch,
    #[error("mesh payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Indexed triangle surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

/// A location on a mesh surface: a face and convex barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub face: usize,
    pub bary: [f64; 3],
}

impl SurfacePoint {
    pub fn new(face: usize, bary: [f64; 3]) -> Self {
        Self { face, bary }
    }

    /// Corner `k` of `face`.
    pub fn corner(face: usize, k: usize) -> Self {
        let mut bary = [0.0; 3];
        bary[k] = 1.0;
        Self { face, bary }
    }

    pub fn is_valid(&self) -> bool {
        let s: f64 = self.bary.iter().sum();
        self.bary.iter().all(|b| *b >= 0.0 && b.is_finite()) && (s - 1.0).abs() <= 1e-9
    }
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let count = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &index in f {
                if index >= count {
                    return Err(MeshError::IndexOutOfRange { face: fi, index, count });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::DegenerateFace(fi));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Same connectivity, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self, MeshError> {
        if vertices.len() != self.vertices.len() {
            return Err(MeshError::ConnectivityMismatch);
        }
        Ok(Self { vertices, faces: self.faces.clone() })
    }

    pub fn same_connectivity(&self, other: &TriMesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.faces == other.faces
    }

    pub fn face_corners(&self, face: usize) -> Result<[Vec3; 3], MeshError> {
        let f = self
            .faces
            .get(face)
            .ok_or(MeshError::FaceOutOfRange { face, count: self.faces.len() })?;
        Ok([self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]])
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.face_corners(face).expect("face in range");
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bbox(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        if self.vertices.is_empty() {
            return 0.0;
        }
        let (lo, hi) = self.bbox();
        norm(sub(hi, lo))
    }

    /// Number of unique undirected edges.
    pub fn edge_count(&self) -> usize {
        self.edge_map().len()
    }

    fn edge_map(&self) -> HashMap<(usize, usize), usize> {
        let mut edges = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let next = edges.len();
                edges.entry(key).or_insert(next);
            }
        }
        edges
    }

    /// Position of a surface point: `b0*v0 + b1*v1 + b2*v2`.
    pub fn resolve(&self, sp: &SurfacePoint) -> Result<Vec3, MeshError> {
        let [a, b, c] = self.face_corners(sp.face)?;
        let w = sp.bary;
        Ok([
            w[0] * a[0] + w[1] * b[0] + w[2] * c[0],
            w[0] * a[1] + w[1] * b[1] + w[2] * c[1],
            w[0] * a[2] + w[1] * b[2] + w[2] * c[2],
        ])
    }

    /// Barycentric coordinates of `point` with respect to `face`.
    ///
    /// Solves the 2x2 normal equations in the face plane, which is the
    /// least-squares answer for points slightly off the plane.
    pub fn barycentric(&self, face: usize, point: Vec3) -> Result<[f64; 3], MeshError> {
        let [a, b, c] = self.face_corners(face)?;
        let e1 = sub(b, a);
        let e2 = sub(c, a);
        let d = sub(point, a);
        let (g11, g12, g22) = (dot(e1, e1), dot(e1, e2), dot(e2, e2));
        let (r1, r2) = (dot(e1, d), dot(e2, d));
        let det = g11 * g22 - g12 * g12;
        if det.abs() <= f64::EPSILON * g11 * g22 {
            return Err(MeshError::ZeroArea);
        }
        let u = (g22 * r1 - g12 * r2) / det;
        let v = (g11 * r2 - g12 * r1) / det;
        Ok([1.0 - u - v, u, v])
    }

    /// Area-weighted uniform samples on the surface.
    pub fn sample_uniform<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<SurfacePoint>, MeshError> {
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for f in 0..self.faces.len() {
            acc += self.face_area(f);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(MeshError::ZeroArea);
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let r = rng.random::<f64>() * acc;
            let face = cdf.partition_point(|c| *c <= r).min(cdf.len() - 1);
            let mut u = rng.random::<f64>();
            let mut v = rng.random::<f64>();
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            out.push(SurfacePoint { face, bary: [1.0 - u - v, u, v] });
        }
        Ok(out)
    }

    /// One corner sample per vertex, taken from its lowest-index incident face.
    pub fn vertex_samples(&self) -> Result<Vec<SurfacePoint>, MeshError> {
        let mut slot: Vec<Option<SurfacePoint>> = vec![None; self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            for (k, &v) in f.iter().enumerate() {
                if slot[v].is_none() {
                    slot[v] = Some(SurfacePoint::corner(fi, k));
                }
            }
        }
        slot.into_iter()
            .enumerate()
            .map(|(v, sp)| sp.ok_or(MeshError::IsolatedVertex(v)))
            .collect()
    }

    /// 1-to-4 midpoint subdivision. Original vertices keep their indices and
    /// positions; edge midpoints are appended in first-seen edge order.
    pub fn subdivide(&self) -> TriMesh {
        let mut vertices = self.vertices.clone();
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut faces = Vec::with_capacity(self.faces.len() * 4);
        for f in &self.faces {
            let mut m = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                m[k] = *midpoint.entry(key).or_insert_with(|| {
                    let (pa, pb) = (self.vertices[a], self.vertices[b]);
                    vertices.push([
                        0.5 * (pa[0] + pb[0]),
                        0.5 * (pa[1] + pb[1]),
                        0.5 * (pa[2] + pb[2]),
                    ]);
                    vertices.len() - 1
                });
            }
            // m[k] sits on edge (f[k], f[k+1])
            faces.push([f[0], m[0], m[2]]);
            faces.push([m[0], f[1], m[1]]);
            faces.push([m[2], m[1], f[2]]);
            faces.push([m[0], m[1], m[2]]);
        }
        TriMesh { vertices, faces }
    }

    pub fn subdivide_n(&self, levels: usize) -> TriMesh {
        let mut mesh = self.clone();
        for _ in 0..levels {
            mesh = mesh.subdivide();
        }
        mesh
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 48 + self.faces.len() * 24);
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.8e} {:.8e} {:.8e}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    /// Parse Wavefront OBJ text. Only `v` and `f` records are interpreted;
    /// `vt`/`vn` references in face corners (`1/2/3`) are accepted and dropped.
    pub fn from_obj_str(text: &str) -> Result<Self, MeshError> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            let mut tok = body.split_whitespace();
            match tok.next() {
                Some("v") => {
                    let mut p = [0.0; 3];
                    for slot in p.iter_mut() {
                        let t = tok.next().ok_or_else(|| MeshError::Parse {
                            line,
                            msg: "vertex needs 3 coordinates".into(),
                        })?;
                        *slot = t.parse().map_err(|_| MeshError::Parse {
                            line,
                            msg: format!("bad coordinate {t:?}"),
                        })?;
                    }
                    vertices.push(p);
                }
                Some("f") => {
                    let idx: Vec<&str> = tok.collect();
                    if idx.len() != 3 {
                        if idx.len() < 3 {
                            return Err(MeshError::Parse {
                                line,
                                msg: "face needs 3 vertices".into(),
                            });
                        }
                        return Err(MeshError::Unsupported { line, arity: idx.len() });
                    }
                    let mut f = [0usize; 3];
                    for (slot, t) in f.iter_mut().zip(&idx) {
                        let head = t.split('/').next().unwrap_or("");
                        let k: i64 = head.parse().map_err(|_| MeshError::Parse {
                            line,
                            msg: format!("bad face index {t:?}"),
                        })?;
                        let resolved = if k < 0 { vertices.len() as i64 + k } else { k - 1 };
                        if resolved < 0 {
                            return Err(MeshError::Parse {
                                line,
                                msg: format!("face index {k} out of range"),
                            });
                        }
                        *slot = resolved as usize;
                    }
                    faces.push(f);
                }
                _ => {}
            }
        }
        TriMesh::new(vertices, faces)
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        Self::from_obj_str(&fs::read_to_string(path)?)
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        fs::write(path, self.to_obj_string())?;
        Ok(())
    }

    /// Compact wire form: u32 vertex count, u32 face count, `3V` f32
    /// positions, `3F` u32 indices, all little-endian.
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 12 * (self.vertices.len() + self.faces.len()));
        out.extend_from_slice(&(self.vertices.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.faces.len() as u32).to_le_bytes());
        for v in &self.vertices {
            for c in v {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        for f in &self.faces {
            for &i in f {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, MeshError> {
        let word = |k: usize| -> [u8; 4] { bytes[4 * k..4 * k + 4].try_into().expect("4 bytes") };
        if bytes.len() < 8 {
            return Err(MeshError::Payload(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let nv = u32::from_le_bytes(word(0)) as usize;
        let nf = u32::from_le_bytes(word(1)) as usize;
        let expected = 8 + 12 * (nv + nf);
        if bytes.len() != expected {
            return Err(MeshError::Payload(format!(
                "{nv} vertices and {nf} faces need {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let vertices = (0..nv)
            .map(|i| {
                let c = |j| f32::from_le_bytes(word(2 + 3 * i + j)) as f64;
                [c(0), c(1), c(2)]
            })
            .collect();
        let base = 2 + 3 * nv;
        let faces = (0..nf)
            .map(|i| {
                let c = |j| u32::from_le_bytes(word(base + 3 * i + j)) as usize;
                [c(0), c(1), c(2)]
            })
            .collect();
        TriMesh::new(vertices, faces)
    }
}

/// Media type of [`TriMesh::to_payload`] bytes.
pub const PAYLOAD_CONTENT_TYPE: &str = "application/x-deform-mesh";

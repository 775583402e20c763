//! Indexed triangle meshes with per-corner UV coordinates.
//!
//! UV indices are independent of vertex indices (OBJ `v/vt` style), so one 3D
//! vertex may own several UV coordinates across chart boundaries.

use std::collections::HashMap;

use crate::{Error, Result, Vec2, Vec3};

/// Indexed triangle mesh. Positions are in meters, UVs in [0,1]^2.
///
/// `faces[i]` indexes into `vertices`; `face_uvs[i]` indexes into `uvs` and
/// carries the UV corner for the matching slot of `faces[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub uvs: Vec<Vec2>,
    pub face_uvs: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        uvs: Vec<Vec2>,
        face_uvs: Vec<[u32; 3]>,
    ) -> Result<Self> {
        let mesh = Mesh {
            vertices,
            faces,
            uvs,
            face_uvs,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Checks index ranges and the face/face_uv pairing.
    pub fn validate(&self) -> Result<()> {
        if !self.face_uvs.is_empty() && self.face_uvs.len() != self.faces.len() {
            return Err(Error::InvalidMesh(format!(
                "face_uvs count {} does not match face count {}",
                self.face_uvs.len(),
                self.faces.len()
            )));
        }
        let nv = self.vertices.len() as u32;
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= nv) {
                return Err(Error::InvalidMesh(format!(
                    "face {i} references vertex out of range (V={nv})"
                )));
            }
        }
        let nt = self.uvs.len() as u32;
        for (i, f) in self.face_uvs.iter().enumerate() {
            if f.iter().any(|&t| t >= nt) {
                return Err(Error::InvalidMesh(format!(
                    "face {i} references uv out of range (T={nt})"
                )));
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Number of distinct undirected edges.
    pub fn edge_count(&self) -> usize {
        collect_edges(&self.faces).len()
    }

    /// Euler characteristic V - E + F (2 for a closed connected genus-0 mesh).
    pub fn euler_characteristic(&self) -> i64 {
        self.vertex_count() as i64 - self.edge_count() as i64 + self.face_count() as i64
    }

    /// True when every edge is shared by exactly two faces.
    pub fn is_closed(&self) -> bool {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for e in face_edges(f) {
                *counts.entry(e).or_insert(0) += 1;
            }
        }
        counts.values().all(|&c| c == 2)
    }

    /// Axis-aligned bounding box as (min, max). Empty mesh yields zeros.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        if self.vertices.is_empty() {
            return (Vec3::zeros(), Vec3::zeros());
        }
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Mesh extent along +y (stature for a standing body).
    pub fn height(&self) -> f32 {
        let (lo, hi) = self.bounds();
        hi.y - lo.y
    }
}

fn face_edges(f: &[u32; 3]) -> [(u32, u32); 3] {
    let e = |a: u32, b: u32| if a < b { (a, b) } else { (b, a) };
    [e(f[0], f[1]), e(f[1], f[2]), e(f[2], f[0])]
}

/// Distinct undirected edges, sorted. The sort fixes midpoint numbering in
/// [`subdivide`] so outputs are bit-reproducible.
fn collect_edges(faces: &[[u32; 3]]) -> Vec<(u32, u32)> {
    let mut edges: Vec<(u32, u32)> = faces.iter().flat_map(face_edges).collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Splits every face into four by inserting edge midpoints (no smoothing).
///
/// Original vertex positions are unchanged and each midpoint is the exact
/// average of its edge endpoints; shared edges produce one shared midpoint.
/// The UV 2D mesh is subdivided by the same rule, with midpoints duplicated
/// across seams because UV edges are identified by uv-index pairs.
pub fn subdivide(mesh: &Mesh) -> Result<Mesh> {
    mesh.validate()?;

    let edges = collect_edges(&mesh.faces);
    let mut edge_index: HashMap<(u32, u32), u32> = HashMap::with_capacity(edges.len());
    let mut vertices = mesh.vertices.clone();
    for (i, &(a, b)) in edges.iter().enumerate() {
        edge_index.insert((a, b), (mesh.vertices.len() + i) as u32);
        vertices.push((mesh.vertices[a as usize] + mesh.vertices[b as usize]) * 0.5);
    }

    let has_uvs = !mesh.face_uvs.is_empty();
    let (mut uvs, uv_edge_index) = if has_uvs {
        let uv_edges = collect_edges(&mesh.face_uvs);
        let mut idx: HashMap<(u32, u32), u32> = HashMap::with_capacity(uv_edges.len());
        let mut uvs = mesh.uvs.clone();
        for (i, &(a, b)) in uv_edges.iter().enumerate() {
            idx.insert((a, b), (mesh.uvs.len() + i) as u32);
            uvs.push((mesh.uvs[a as usize] + mesh.uvs[b as usize]) * 0.5);
        }
        (uvs, idx)
    } else {
        (Vec::new(), HashMap::new())
    };
    if !has_uvs {
        uvs.clear();
    }

    let mid = |idx: &HashMap<(u32, u32), u32>, a: u32, b: u32| -> u32 {
        let key = if a < b { (a, b) } else { (b, a) };
        idx[&key]
    };

    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    let mut face_uvs = Vec::with_capacity(mesh.face_uvs.len() * 4);
    for (fi, f) in mesh.faces.iter().enumerate() {
        let [a, b, c] = *f;
        let ab = mid(&edge_index, a, b);
        let bc = mid(&edge_index, b, c);
        let ca = mid(&edge_index, c, a);
        faces.push([a, ab, ca]);
        faces.push([b, bc, ab]);
        faces.push([c, ca, bc]);
        faces.push([ab, bc, ca]);
        if has_uvs {
            let [ta, tb, tc] = mesh.face_uvs[fi];
            let tab = mid(&uv_edge_index, ta, tb);
            let tbc = mid(&uv_edge_index, tb, tc);
            let tca = mid(&uv_edge_index, tc, ta);
            face_uvs.push([ta, tab, tca]);
            face_uvs.push([tb, tbc, tab]);
            face_uvs.push([tc, tca, tbc]);
            face_uvs.push([tab, tbc, tca]);
        }
    }

    Ok(Mesh {
        vertices,
        faces,
        uvs,
        face_uvs,
    })
}

/// Area-weighted per-vertex unit normals.
///
/// Face normals are accumulated unnormalized (the cross product already
/// carries twice the face area as its magnitude), so zero-area faces drop out
/// of the weighting. Isolated or fully-degenerate vertices get a zero vector.
pub fn vertex_normals(mesh: &Mesh) -> Vec<Vec3> {
    let mut accum = vec![Vec3::zeros(); mesh.vertices.len()];
    for f in &mesh.faces {
        let p0 = mesh.vertices[f[0] as usize];
        let p1 = mesh.vertices[f[1] as usize];
        let p2 = mesh.vertices[f[2] as usize];
        let n = (p1 - p0).cross(&(p2 - p0));
        for &vi in f {
            accum[vi as usize] += n;
        }
    }
    for n in &mut accum {
        let len = n.norm();
        if len > 1e-20 {
            *n /= len;
        } else {
            *n = Vec3::zeros();
        }
    }
    accum
}

/// Sparse row-major operator with a fixed column count.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub rows: Vec<Vec<(u32, f32)>>,
    pub cols: usize,
}

impl SparseMatrix {
    /// y = A x for a per-vertex scalar field.
    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.cols);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j as usize]).sum())
            .collect()
    }

    /// y = A x applied per coordinate of a 3D field.
    pub fn apply_vec3(&self, x: &[Vec3]) -> Vec<Vec3> {
        assert_eq!(x.len(), self.cols);
        self.rows
            .iter()
            .map(|row| {
                let mut acc = Vec3::zeros();
                for &(j, w) in row {
                    acc += x[j as usize] * w;
                }
                acc
            })
            .collect()
    }

    /// y = A^T x.
    pub fn apply_transpose_vec3(&self, x: &[Vec3]) -> Vec<Vec3> {
        assert_eq!(x.len(), self.rows.len());
        let mut out = vec![Vec3::zeros(); self.cols];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[j as usize] += x[i] * w;
            }
        }
        out
    }
}

/// Uniform (graph) Laplacian: row i = vertex i minus the mean of its 1-ring.
/// Rows sum to zero; isolated vertices get an empty row.
pub fn uniform_laplacian(mesh: &Mesh) -> SparseMatrix {
    let n = mesh.vertices.len();
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n];
    for &(a, b) in &collect_edges(&mesh.faces) {
        neighbors[a as usize].push(b);
        neighbors[b as usize].push(a);
    }
    let rows = neighbors
        .into_iter()
        .enumerate()
        .map(|(i, mut ns)| {
            if ns.is_empty() {
                return Vec::new();
            }
            ns.sort_unstable();
            let w = -1.0 / ns.len() as f32;
            let mut row = vec![(i as u32, 1.0f32)];
            row.extend(ns.into_iter().map(|j| (j, w)));
            row
        })
        .collect();
    SparseMatrix { rows, cols: n }
}

/// Lat-long sphere of unit radius: `slices` segments around the y axis and
/// `stacks` bands from the +y pole to the -y pole, with a single shared
/// vertex at each pole. V = slices*(stacks-1) + 2, F = 2*slices*(stacks-1).
///
/// UVs use the equirectangular layout with pole vertices duplicated per
/// column, so the atlas exercises the v/vt seam machinery.
pub fn unit_sphere_mesh(slices: u32, stacks: u32) -> Mesh {
    assert!(slices >= 3 && stacks >= 2);
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();

    // Interior ring vertices; ring r is at polar angle theta = pi*r/stacks.
    vertices.push(Vec3::new(0.0, 1.0, 0.0)); // +y pole, index 0
    for r in 1..stacks {
        let theta = std::f32::consts::PI * r as f32 / stacks as f32;
        for s in 0..slices {
            let phi = 2.0 * std::f32::consts::PI * s as f32 / slices as f32;
            vertices.push(Vec3::new(
                theta.sin() * phi.cos(),
                theta.cos(),
                theta.sin() * phi.sin(),
            ));
        }
    }
    let south = vertices.len() as u32;
    vertices.push(Vec3::new(0.0, -1.0, 0.0));

    // UV grid: (slices+1) columns x (stacks+1) rows, row 0 at v=1 (+y pole).
    let uv_cols = slices + 1;
    for r in 0..=stacks {
        let v = 1.0 - r as f32 / stacks as f32;
        for s in 0..uv_cols {
            let u = s as f32 / slices as f32;
            uvs.push(Vec2::new(u, v));
        }
    }
    let uv_at = |r: u32, s: u32| r * uv_cols + s;
    let ring_vert = |r: u32, s: u32| 1 + (r - 1) * slices + (s % slices);

    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    for s in 0..slices {
        // North cap.
        faces.push([0, ring_vert(1, s + 1), ring_vert(1, s)]);
        face_uvs.push([uv_at(0, s), uv_at(1, s + 1), uv_at(1, s)]);
        // South cap.
        faces.push([south, ring_vert(stacks - 1, s), ring_vert(stacks - 1, s + 1)]);
        face_uvs.push([
            uv_at(stacks, s),
            uv_at(stacks - 1, s),
            uv_at(stacks - 1, s + 1),
        ]);
    }
    for r in 1..stacks - 1 {
        for s in 0..slices {
            let (a, b) = (ring_vert(r, s), ring_vert(r, s + 1));
            let (c, d) = (ring_vert(r + 1, s), ring_vert(r + 1, s + 1));
            let (ta, tb) = (uv_at(r, s), uv_at(r, s + 1));
            let (tc, td) = (uv_at(r + 1, s), uv_at(r + 1, s + 1));
            faces.push([a, b, c]);
            face_uvs.push([ta, tb, tc]);
            faces.push([b, d, c]);
            face_uvs.push([tb, td, tc]);
        }
    }

    Mesh {
        vertices,
        faces,
        uvs,
        face_uvs,
    }
}

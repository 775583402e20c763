//! Nearest-point-on-surface queries against a triangle mesh through a
//! bounding-volume hierarchy, with pseudonormal-signed distances.

use crate::mesh::Mesh;
use crate::{Error, Result, Vec3};
use std::collections::HashMap;

/// Result of one nearest-surface query.
#[derive(Debug, Clone, Copy)]
pub struct SurfacePoint {
    pub point: Vec3,
    pub face: usize,
    /// Unsigned distance, meters.
    pub distance: f32,
    /// Signed distance: positive outside (along the surface pseudonormal).
    pub signed: f32,
    /// Pseudonormal at the closest point (face, edge, or vertex normal).
    pub normal: Vec3,
    /// Closest point lies within 5 mm of an open boundary edge.
    pub near_boundary: bool,
}

/// Closest point on triangle abc to p (Ericson, Real-Time Collision
/// Detection, 5.1.5), via barycentric region classification.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return a + ab * t;
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return a + ac * t;
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * t;
    }

    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Vec3::from_element(f32::INFINITY),
            hi: Vec3::from_element(f32::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: Vec3) {
        self.lo = self.lo.inf(&p);
        self.hi = self.hi.sup(&p);
    }

    fn merge(&mut self, other: &Aabb) {
        self.lo = self.lo.inf(&other.lo);
        self.hi = self.hi.sup(&other.hi);
    }

    fn dist_sq(&self, p: Vec3) -> f32 {
        let mut d = 0.0;
        for i in 0..3 {
            let v = if p[i] < self.lo[i] {
                self.lo[i] - p[i]
            } else if p[i] > self.hi[i] {
                p[i] - self.hi[i]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug)]
struct Node {
    aabb: Aabb,
    /// Leaf: (first, count) into `order`; inner: (left, right) child ids.
    a: u32,
    b: u32,
    leaf: bool,
}

const LEAF_SIZE: usize = 8;
const BOUNDARY_MARGIN: f32 = 5e-3;

/// Static BVH over the faces of one mesh, plus the adjacency pseudonormals
/// needed for inside/outside classification.
#[derive(Debug)]
pub struct SurfaceBvh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    nodes: Vec<Node>,
    order: Vec<u32>,
    face_normals: Vec<Vec3>,
    /// Angle-weighted vertex pseudonormals.
    vertex_normals: Vec<Vec3>,
    /// Edge (lo,hi) -> averaged normal of its incident faces.
    edge_normals: HashMap<(u32, u32), Vec3>,
    /// Open edges as vertex index pairs.
    boundary_edges: Vec<(u32, u32)>,
}

impl SurfaceBvh {
    pub fn build(mesh: &Mesh) -> Result<SurfaceBvh> {
        mesh.validate()?;
        if mesh.face_count() == 0 {
            return Err(Error::InvalidMesh("surface has no faces".into()));
        }
        let vertices = mesh.vertices.clone();
        let faces = mesh.faces.clone();

        let mut face_normals = Vec::with_capacity(faces.len());
        for f in &faces {
            let (a, b, c) = (
                vertices[f[0] as usize],
                vertices[f[1] as usize],
                vertices[f[2] as usize],
            );
            let n = (b - a).cross(&(c - a));
            let len = n.norm();
            face_normals.push(if len > 1e-12 { n / len } else { Vec3::zeros() });
        }

        let mut vertex_normals = vec![Vec3::zeros(); vertices.len()];
        for (fi, f) in faces.iter().enumerate() {
            for k in 0..3 {
                let v = f[k] as usize;
                let p = vertices[v];
                let e0 = vertices[f[(k + 1) % 3] as usize] - p;
                let e1 = vertices[f[(k + 2) % 3] as usize] - p;
                let denom = e0.norm() * e1.norm();
                if denom <= 1e-12 {
                    continue;
                }
                let angle = (e0.dot(&e1) / denom).clamp(-1.0, 1.0).acos();
                vertex_normals[v] += face_normals[fi] * angle;
            }
        }
        for n in &mut vertex_normals {
            let len = n.norm();
            if len > 1e-12 {
                *n /= len;
            }
        }

        let mut edge_normals: HashMap<(u32, u32), Vec3> = HashMap::new();
        let mut edge_count: HashMap<(u32, u32), u32> = HashMap::new();
        for (fi, f) in faces.iter().enumerate() {
            for k in 0..3 {
                let (u, v) = (f[k], f[(k + 1) % 3]);
                let key = (u.min(v), u.max(v));
                *edge_normals.entry(key).or_insert_with(Vec3::zeros) += face_normals[fi];
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        for n in edge_normals.values_mut() {
            let len = n.norm();
            if len > 1e-12 {
                *n /= len;
            }
        }
        let mut boundary_edges: Vec<(u32, u32)> = edge_count
            .iter()
            .filter(|&(_, &c)| c != 2)
            .map(|(&e, _)| e)
            .collect();
        boundary_edges.sort_unstable();

        let centroids: Vec<Vec3> = faces
            .iter()
            .map(|f| {
                (vertices[f[0] as usize] + vertices[f[1] as usize] + vertices[f[2] as usize])
                    / 3.0
            })
            .collect();
        let boxes: Vec<Aabb> = faces
            .iter()
            .map(|f| {
                let mut b = Aabb::empty();
                for &vi in f {
                    b.grow(vertices[vi as usize]);
                }
                b
            })
            .collect();

        let mut order: Vec<u32> = (0..faces.len() as u32).collect();
        let mut nodes = Vec::new();
        build_node(&mut nodes, &mut order, 0, faces.len(), &centroids, &boxes);

        Ok(SurfaceBvh {
            vertices,
            faces,
            nodes,
            order,
            face_normals,
            vertex_normals,
            edge_normals,
            boundary_edges,
        })
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// True when the mesh has open boundary edges.
    pub fn has_boundary(&self) -> bool {
        !self.boundary_edges.is_empty()
    }

    /// Nearest surface point to `p` with signed distance.
    pub fn closest(&self, p: Vec3) -> SurfacePoint {
        let mut best_d2 = f32::INFINITY;
        let mut best_point = Vec3::zeros();
        let mut best_face = 0usize;

        let mut stack: Vec<u32> = vec![0];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.aabb.dist_sq(p) >= best_d2 {
                continue;
            }
            if node.leaf {
                for oi in node.a..node.a + node.b {
                    let fi = self.order[oi as usize] as usize;
                    let f = self.faces[fi];
                    let q = closest_point_on_triangle(
                        p,
                        self.vertices[f[0] as usize],
                        self.vertices[f[1] as usize],
                        self.vertices[f[2] as usize],
                    );
                    let d2 = (p - q).norm_squared();
                    // Strict < keeps the lowest face index on ties.
                    if d2 < best_d2 || (d2 == best_d2 && fi < best_face) {
                        best_d2 = d2;
                        best_point = q;
                        best_face = fi;
                    }
                }
            } else {
                let (l, r) = (node.a, node.b);
                let dl = self.nodes[l as usize].aabb.dist_sq(p);
                let dr = self.nodes[r as usize].aabb.dist_sq(p);
                // Visit the nearer child first (push it last).
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }

        let distance = best_d2.sqrt();
        let normal = self.pseudonormal(best_face, best_point);
        let to_p = p - best_point;
        let signed = if to_p.dot(&normal) >= 0.0 {
            distance
        } else {
            -distance
        };
        let near_boundary = self.near_boundary(best_point);
        SurfacePoint {
            point: best_point,
            face: best_face,
            distance,
            signed,
            normal,
            near_boundary,
        }
    }

    /// Pseudonormal at a point on a face: face normal in the interior,
    /// edge/vertex pseudonormal when the closest point lies on the border
    /// (the face normal alone gives the wrong sign there).
    fn pseudonormal(&self, fi: usize, q: Vec3) -> Vec3 {
        let f = self.faces[fi];
        let (a, b, c) = (
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        );
        let bary = barycentric(q, a, b, c);
        let eps = 1e-5;
        let on = [bary[0] > eps, bary[1] > eps, bary[2] > eps];
        match on.iter().filter(|&&x| x).count() {
            3 => self.face_normals[fi],
            2 => {
                let k = (0..3).find(|&k| !on[k]).unwrap();
                let (u, v) = (f[(k + 1) % 3], f[(k + 2) % 3]);
                let key = (u.min(v), u.max(v));
                self.edge_normals
                    .get(&key)
                    .copied()
                    .unwrap_or(self.face_normals[fi])
            }
            _ => {
                let k = (0..3).find(|&k| on[k]).unwrap_or(0);
                self.vertex_normals[f[k] as usize]
            }
        }
    }

    fn near_boundary(&self, q: Vec3) -> bool {
        self.boundary_edges.iter().any(|&(u, v)| {
            let a = self.vertices[u as usize];
            let b = self.vertices[v as usize];
            let ab = b - a;
            let t = ((q - a).dot(&ab) / ab.norm_squared().max(1e-20)).clamp(0.0, 1.0);
            (q - (a + ab * t)).norm() < BOUNDARY_MARGIN
        })
    }
}

fn barycentric(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> [f32; 3] {
    let v0 = b - a;
    let v1 = c - a;
    let v2 = p - a;
    let d00 = v0.dot(&v0);
    let d01 = v0.dot(&v1);
    let d11 = v1.dot(&v1);
    let d20 = v2.dot(&v0);
    let d21 = v2.dot(&v1);
    let denom = d00 * d11 - d01 * d01;
    if denom.abs() < 1e-20 {
        return [1.0, 0.0, 0.0];
    }
    let v = (d11 * d20 - d01 * d21) / denom;
    let w = (d00 * d21 - d01 * d20) / denom;
    [1.0 - v - w, v, w]
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [u32],
    first: usize,
    count: usize,
    centroids: &[Vec3],
    boxes: &[Aabb],
) -> u32 {
    let mut aabb = Aabb::empty();
    for &fi in &order[first..first + count] {
        aabb.merge(&boxes[fi as usize]);
    }
    let id = nodes.len() as u32;
    if count <= LEAF_SIZE {
        nodes.push(Node {
            aabb,
            a: first as u32,
            b: count as u32,
            leaf: true,
        });
        return id;
    }

    let mut cb = Aabb::empty();
    for &fi in &order[first..first + count] {
        cb.grow(centroids[fi as usize]);
    }
    let ext = cb.hi - cb.lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let slice = &mut order[first..first + count];
    slice.sort_unstable_by(|&x, &y| {
        centroids[x as usize][axis]
            .total_cmp(&centroids[y as usize][axis])
            .then(x.cmp(&y))
    });
    let half = count / 2;

    nodes.push(Node {
        aabb,
        a: 0,
        b: 0,
        leaf: false,
    });
    let left = build_node(nodes, order, first, half, centroids, boxes);
    let right = build_node(nodes, order, first + half, count - half, centroids, boxes);
    nodes[id as usize].a = left;
    nodes[id as usize].b = right;
    id
}

//! Parametric body: linear shape space over a template mesh plus a linear
//! blend skinning skeleton.
//!
//! The model is data driven so a converted real body model loads from the
//! same container; [`generate_stub_model`] builds a deterministic procedural
//! humanoid for self-contained use. Shape coefficients are unitless PCA-style
//! weights; after [`BodyModel::standardize_height`] they no longer change
//! stature, so height and shape are independent codes.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::mesh::{subdivide, vertex_normals, Mesh};
use crate::{Error, Mat3, Result, Vec2, Vec3};

pub const N_SHAPES: usize = 10;

/// Joint indices of the stub skeleton (K = 16). Parents always precede
/// children, so forward kinematics is a single left-to-right pass.
pub mod joint {
    pub const PELVIS: usize = 0;
    pub const CHEST: usize = 1;
    pub const NECK: usize = 2;
    pub const HEAD: usize = 3;
    pub const SHOULDER_L: usize = 4;
    pub const ELBOW_L: usize = 5;
    pub const WRIST_L: usize = 6;
    pub const SHOULDER_R: usize = 7;
    pub const ELBOW_R: usize = 8;
    pub const WRIST_R: usize = 9;
    pub const HIP_L: usize = 10;
    pub const KNEE_L: usize = 11;
    pub const ANKLE_L: usize = 12;
    pub const HIP_R: usize = 13;
    pub const KNEE_R: usize = 14;
    pub const ANKLE_R: usize = 15;

    pub const NAMES: [&str; 16] = [
        "pelvis",
        "chest",
        "neck",
        "head",
        "shoulder_l",
        "elbow_l",
        "wrist_l",
        "shoulder_r",
        "elbow_r",
        "wrist_r",
        "hip_l",
        "knee_l",
        "ankle_l",
        "hip_r",
        "knee_r",
        "ankle_r",
    ];
}

/// Shape coefficients, unitless. Synthesis samples within |beta_i| <= 5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams(pub [f32; N_SHAPES]);

impl ShapeParams {
    pub fn zeros() -> Self {
        ShapeParams([0.0; N_SHAPES])
    }

    /// Unit coefficient along axis `i` scaled by `v`.
    pub fn axis(i: usize, v: f32) -> Self {
        let mut b = [0.0; N_SHAPES];
        b[i] = v;
        ShapeParams(b)
    }

    pub fn from_slice(s: &[f32]) -> Result<Self> {
        if s.len() != N_SHAPES {
            return Err(Error::InvalidModel(format!(
                "expected {N_SHAPES} shape coefficients, got {}",
                s.len()
            )));
        }
        let mut b = [0.0; N_SHAPES];
        b.copy_from_slice(s);
        Ok(ShapeParams(b))
    }
}

/// Skeleton pose: one axis-angle rotation per joint (radians, local to the
/// parent) plus a root translation in meters applied after skinning.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub joint_rotations: Vec<Vec3>,
    pub root_translation: Vec3,
}

impl Pose {
    pub fn identity(n_joints: usize) -> Self {
        Pose {
            joint_rotations: vec![Vec3::zeros(); n_joints],
            root_translation: Vec3::zeros(),
        }
    }
}

/// Sparse row-major matrix in CSR form. Used for the joint regressor, whose
/// rows are convex weights over template vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub row_ptr: Vec<u32>,
    pub cols: Vec<u32>,
    pub vals: Vec<f32>,
    pub n_cols: usize,
}

impl CsrMatrix {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len().saturating_sub(1)
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (u32, f32)> + '_ {
        let lo = self.row_ptr[i] as usize;
        let hi = self.row_ptr[i + 1] as usize;
        self.cols[lo..hi]
            .iter()
            .copied()
            .zip(self.vals[lo..hi].iter().copied())
    }

    pub fn apply_points(&self, points: &[Vec3]) -> Vec<Vec3> {
        (0..self.n_rows())
            .map(|i| {
                let mut acc = Vec3::zeros();
                for (j, w) in self.row(i) {
                    acc += points[j as usize] * w;
                }
                acc
            })
            .collect()
    }
}

/// Template mesh, linear shape basis, and LBS skeleton.
///
/// `shape_basis` holds `N_SHAPES` per-vertex offset fields, field-major.
/// `skin_weights` is dense V x K row-major; rows are convex. `parents` is a
/// topologically ordered kinematic tree with `u32::MAX` marking the root.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub template: Mesh,
    pub shape_basis: Vec<Vec3>,
    pub joint_regressor: CsrMatrix,
    pub parents: Vec<u32>,
    pub skin_weights: Vec<f32>,
}

impl BodyModel {
    pub fn n_vertices(&self) -> usize {
        self.template.vertex_count()
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        let v = self.n_vertices();
        let k = self.n_joints();
        if self.shape_basis.len() != N_SHAPES * v {
            return Err(Error::InvalidModel(format!(
                "shape basis has {} entries, expected {}",
                self.shape_basis.len(),
                N_SHAPES * v
            )));
        }
        if self.skin_weights.len() != v * k {
            return Err(Error::InvalidModel("skin weight table size mismatch".into()));
        }
        for (vi, row) in self.skin_weights.chunks(k).enumerate() {
            let mut sum = 0.0f32;
            for &w in row {
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "vertex {vi} has negative or non-finite skin weight"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidModel(format!(
                    "skin weights of vertex {vi} sum to {sum}"
                )));
            }
        }
        if self.joint_regressor.n_rows() != k || self.joint_regressor.n_cols != v {
            return Err(Error::InvalidModel("joint regressor shape mismatch".into()));
        }
        for j in 0..k {
            let sum: f32 = self.joint_regressor.row(j).map(|(_, w)| w).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidModel(format!(
                    "joint regressor row {j} sums to {sum}"
                )));
            }
        }
        if self.parents.is_empty() || self.parents[0] != u32::MAX {
            return Err(Error::InvalidModel("joint 0 must be the root".into()));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p as usize >= j {
                return Err(Error::InvalidModel(format!(
                    "joint {j} has parent {p}; parents must precede children"
                )));
            }
        }
        Ok(())
    }

    /// T-pose mesh for the given coefficients: template + sum(beta_i basis_i).
    pub fn shape_mesh(&self, beta: &ShapeParams) -> Mesh {
        let v = self.n_vertices();
        let mut mesh = self.template.clone();
        for (i, &b) in beta.0.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            let field = &self.shape_basis[i * v..(i + 1) * v];
            for (p, d) in mesh.vertices.iter_mut().zip(field) {
                *p += d * b;
            }
        }
        mesh
    }

    /// Rest-pose joint locations: regressor applied to the shaped vertices.
    pub fn joint_positions(&self, beta: &ShapeParams) -> Vec<Vec3> {
        let shaped = self.shape_mesh(beta);
        self.joint_regressor.apply_points(&shaped.vertices)
    }

    /// World affine transform (A, b) per joint: x -> A x + b. Each joint
    /// rotates about its own rest location, composed down the tree. The root
    /// translation is not included; it is added after blending.
    pub fn pose_joint_transforms(
        &self,
        beta: &ShapeParams,
        pose: &Pose,
    ) -> Result<Vec<(Mat3, Vec3)>> {
        let k = self.n_joints();
        if pose.joint_rotations.len() != k {
            return Err(Error::InvalidModel(format!(
                "pose has {} joint rotations, model has {k} joints",
                pose.joint_rotations.len()
            )));
        }
        let joints = self.joint_positions(beta);
        let mut out: Vec<(Mat3, Vec3)> = Vec::with_capacity(k);
        for j in 0..k {
            let r = nalgebra::Rotation3::new(pose.joint_rotations[j]).into_inner();
            let local_b = joints[j] - r * joints[j];
            let (a, b) = if self.parents[j] == u32::MAX {
                (r, local_b)
            } else {
                let (pa, pb) = out[self.parents[j] as usize];
                (pa * r, pa * local_b + pb)
            };
            out.push((a, b));
        }
        Ok(out)
    }

    /// Linear blend skinning of the shaped mesh; topology and UVs unchanged.
    pub fn pose_mesh(&self, beta: &ShapeParams, pose: &Pose) -> Result<Mesh> {
        let mut mesh = self.shape_mesh(beta);
        mesh.vertices = self.pose_vertices(&mesh.vertices, beta, pose)?;
        Ok(mesh)
    }

    /// Skins arbitrary T-pose vertex positions (e.g. displaced detail
    /// vertices) with this model's weights. Joint transforms still come
    /// from the smooth shaped skeleton.
    pub fn pose_vertices(
        &self,
        vertices: &[Vec3],
        beta: &ShapeParams,
        pose: &Pose,
    ) -> Result<Vec<Vec3>> {
        if vertices.len() != self.n_vertices() {
            return Err(Error::InvalidModel(format!(
                "{} vertices for a model with {}",
                vertices.len(),
                self.n_vertices()
            )));
        }
        let transforms = self.pose_joint_transforms(beta, pose)?;
        let k = self.n_joints();
        Ok(vertices
            .iter()
            .enumerate()
            .map(|(vi, p)| {
                let row = &self.skin_weights[vi * k..(vi + 1) * k];
                let (a, b) = blend_transforms(row, &transforms);
                a * *p + b + pose.root_translation
            })
            .collect())
    }

    /// World-space joint locations under the given pose.
    pub fn posed_joints(&self, beta: &ShapeParams, pose: &Pose) -> Result<Vec<Vec3>> {
        let rest = self.joint_positions(beta);
        let transforms = self.pose_joint_transforms(beta, pose)?;
        Ok(rest
            .iter()
            .zip(&transforms)
            .map(|(j, (a, b))| a * j + b + pose.root_translation)
            .collect())
    }

    /// Removes the stature direction from every basis field so y-extent no
    /// longer depends on beta.
    ///
    /// The height derivative of field i is its y difference between the
    /// template's top and bottom extremal vertices; that multiple of a
    /// smooth unit-stature stretch field (linear in template y) is
    /// subtracted. This is an oblique projection, hence idempotent, and it
    /// leaves x/z components untouched.
    pub fn standardize_height(&self) -> BodyModel {
        let v = self.n_vertices();
        let (top, bot) = extremal_y_vertices(&self.template);
        let y_min = self.template.vertices[bot].y;
        let y_max = self.template.vertices[top].y;
        let span = y_max - y_min;
        let mut out = self.clone();
        if span <= 0.0 {
            return out;
        }
        for i in 0..N_SHAPES {
            let field = &mut out.shape_basis[i * v..(i + 1) * v];
            let delta = field[top].y - field[bot].y;
            if delta == 0.0 {
                continue;
            }
            for (d, p) in field.iter_mut().zip(&self.template.vertices) {
                d.y -= delta * (p.y - y_min) / span;
            }
        }
        out
    }
}

/// Blends per-joint affine transforms with the given weight row.
pub fn blend_transforms(weights: &[f32], transforms: &[(Mat3, Vec3)]) -> (Mat3, Vec3) {
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        a += transforms[j].0 * w;
        b += transforms[j].1 * w;
    }
    (a, b)
}

/// Indices of the template vertices with maximal and minimal y.
/// Ties resolve to the lowest index so the choice is deterministic.
pub fn extremal_y_vertices(mesh: &Mesh) -> (usize, usize) {
    let mut top = 0;
    let mut bot = 0;
    for (i, p) in mesh.vertices.iter().enumerate() {
        if p.y > mesh.vertices[top].y {
            top = i;
        }
        if p.y < mesh.vertices[bot].y {
            bot = i;
        }
    }
    (top, bot)
}

/// Subdivides the template once and extends basis, weights, and regressor.
///
/// Midpoint basis offsets and skin weights are endpoint averages, so
/// `shape_mesh` commutes with subdivision; the regressor keeps addressing
/// the original vertices, which stay at indices 0..V.
pub fn subdivide_model(model: &BodyModel) -> Result<BodyModel> {
    let v = model.n_vertices();
    let k = model.n_joints();
    let template = subdivide(&model.template)?;
    let v2 = template.vertex_count();

    // subdivide() appends midpoints of sorted edges after the originals;
    // recover each midpoint's endpoints from the face structure.
    let mut endpoints: Vec<(u32, u32)> = vec![(0, 0); v2 - v];
    {
        let mut edges: Vec<(u32, u32)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for f in &model.template.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let e = if a < b { (a, b) } else { (b, a) };
                if seen.insert(e) {
                    edges.push(e);
                }
            }
        }
        edges.sort_unstable();
        for (i, e) in edges.into_iter().enumerate() {
            endpoints[i] = e;
        }
    }

    let mut shape_basis = Vec::with_capacity(N_SHAPES * v2);
    for i in 0..N_SHAPES {
        let field = &model.shape_basis[i * v..(i + 1) * v];
        shape_basis.extend_from_slice(field);
        for &(a, b) in &endpoints {
            shape_basis.push((field[a as usize] + field[b as usize]) * 0.5);
        }
    }

    let mut skin_weights = Vec::with_capacity(v2 * k);
    skin_weights.extend_from_slice(&model.skin_weights);
    for &(a, b) in &endpoints {
        let ra = &model.skin_weights[a as usize * k..(a as usize + 1) * k];
        let rb = &model.skin_weights[b as usize * k..(b as usize + 1) * k];
        for j in 0..k {
            skin_weights.push((ra[j] + rb[j]) * 0.5);
        }
    }

    let mut regressor = model.joint_regressor.clone();
    regressor.n_cols = v2;

    let out = BodyModel {
        template,
        shape_basis,
        joint_regressor: regressor,
        parents: model.parents.clone(),
        skin_weights,
    };
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Binary container

const MAGIC: &[u8; 4] = b"BMDL";
const VERSION: u32 = 1;

fn push_u32s(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = u32>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_f32s(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the model to the `BMDL` container: magic, version, counts
/// (V, F, K, n_shapes, n_uv), then template vertices, faces, uvs, face uvs,
/// shape basis, joint regressor (nnz, row_ptr, cols, vals), parents, and
/// dense skin weights. All integers and floats are little-endian.
pub fn save_model<P: AsRef<Path>>(path: P, model: &BodyModel) -> Result<()> {
    model.validate()?;
    let v = model.n_vertices() as u32;
    let f = model.template.face_count() as u32;
    let k = model.n_joints() as u32;
    let n_uv = model.template.uvs.len() as u32;
    let nnz = model.joint_regressor.vals.len() as u32;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32s(&mut buf, [VERSION, v, f, k, N_SHAPES as u32, n_uv]);
    push_f32s(
        &mut buf,
        model.template.vertices.iter().flat_map(|p| [p.x, p.y, p.z]),
    );
    push_u32s(&mut buf, model.template.faces.iter().flatten().copied());
    push_f32s(&mut buf, model.template.uvs.iter().flat_map(|t| [t.x, t.y]));
    push_u32s(&mut buf, model.template.face_uvs.iter().flatten().copied());
    push_f32s(
        &mut buf,
        model.shape_basis.iter().flat_map(|d| [d.x, d.y, d.z]),
    );
    push_u32s(&mut buf, [nnz]);
    push_u32s(&mut buf, model.joint_regressor.row_ptr.iter().copied());
    push_u32s(&mut buf, model.joint_regressor.cols.iter().copied());
    push_f32s(&mut buf, model.joint_regressor.vals.iter().copied());
    push_u32s(&mut buf, model.parents.iter().copied());
    push_f32s(&mut buf, model.skin_weights.iter().copied());

    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    label: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::InvalidModel(format!(
                "{}: truncated at byte {}",
                self.label, self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_model<P: AsRef<Path>>(path: P) -> Result<BodyModel> {
    let data = std::fs::read(&path)?;
    let label = path.as_ref().display().to_string();
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        label: &label,
    };
    if cur.take(4)? != MAGIC {
        return Err(Error::InvalidModel(format!("{label}: bad magic")));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::InvalidModel(format!(
            "{label}: unsupported version {version}"
        )));
    }
    let v = cur.u32()? as usize;
    let f = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let n_shapes = cur.u32()? as usize;
    let n_uv = cur.u32()? as usize;
    if n_shapes != N_SHAPES {
        return Err(Error::InvalidModel(format!(
            "{label}: container has {n_shapes} shape fields, expected {N_SHAPES}"
        )));
    }
    const MAX_COUNT: usize = 100_000_000;
    if v > MAX_COUNT || f > MAX_COUNT || k > 4096 || n_uv > MAX_COUNT {
        return Err(Error::InvalidModel(format!("{label}: implausible counts")));
    }

    let vert_raw = cur.f32s(v * 3)?;
    let face_raw = cur.u32s(f * 3)?;
    let uv_raw = cur.f32s(n_uv * 2)?;
    let face_uv_raw = cur.u32s(f * 3)?;
    let basis_raw = cur.f32s(n_shapes * v * 3)?;
    let nnz = cur.u32()? as usize;
    if nnz > MAX_COUNT {
        return Err(Error::InvalidModel(format!("{label}: implausible nnz")));
    }
    let row_ptr = cur.u32s(k + 1)?;
    let cols = cur.u32s(nnz)?;
    let vals = cur.f32s(nnz)?;
    let parents = cur.u32s(k)?;
    let skin_weights = cur.f32s(v * k)?;
    if cur.pos != data.len() {
        return Err(Error::InvalidModel(format!(
            "{label}: {} trailing bytes",
            data.len() - cur.pos
        )));
    }
    if row_ptr.last().copied().unwrap_or(1) as usize != nnz {
        return Err(Error::InvalidModel(format!(
            "{label}: regressor row pointers do not end at nnz"
        )));
    }

    let template = Mesh::new(
        vert_raw
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect(),
        face_raw
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect(),
        uv_raw.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect(),
        face_uv_raw
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect(),
    )?;
    let model = BodyModel {
        template,
        shape_basis: basis_raw
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect(),
        joint_regressor: CsrMatrix {
            row_ptr,
            cols,
            vals,
            n_cols: v,
        },
        parents,
        skin_weights,
    };
    model.validate()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Procedural stub humanoid

/// Tube labels used while building the stub; recorded per vertex to drive
/// shape fields and skin weights.
const TUBE_TORSO: u8 = 0;
const TUBE_HEAD: u8 = 1;
const TUBE_ARM_L: u8 = 2;
const TUBE_ARM_R: u8 = 3;
const TUBE_LEG_L: u8 = 4;
const TUBE_LEG_R: u8 = 5;

#[derive(Clone, Copy)]
struct Rect {
    u0: f32,
    v0: f32,
    u1: f32,
    v1: f32,
}

impl Rect {
    fn cell(col: usize, row: usize) -> Rect {
        let m = 0.03;
        Rect {
            u0: col as f32 / 3.0 + m,
            v0: row as f32 / 3.0 + m,
            u1: (col + 1) as f32 / 3.0 - m,
            v1: (row + 1) as f32 / 3.0 - m,
        }
    }

    fn at(&self, fu: f32, fv: f32) -> Vec2 {
        Vec2::new(
            self.u0 + fu * (self.u1 - self.u0),
            self.v0 + fv * (self.v1 - self.v0),
        )
    }
}

struct Builder {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    uvs: Vec<Vec2>,
    face_uvs: Vec<[u32; 3]>,
    tube_of: Vec<u8>,
    axial: Vec<f32>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            vertices: Vec::new(),
            faces: Vec::new(),
            uvs: Vec::new(),
            face_uvs: Vec::new(),
            tube_of: Vec::new(),
            axial: Vec::new(),
        }
    }

    fn add_vertex(&mut self, p: Vec3, tube: u8, axial: f32) -> u32 {
        self.vertices.push(p);
        self.tube_of.push(tube);
        self.axial.push(axial);
        (self.vertices.len() - 1) as u32
    }

    /// Ring of `count` vertices at angle steps around `center`. `au x av`
    /// must point along the tube growth axis so rings are right-handed
    /// about it; bands between such rings then face outward.
    fn circle_ring(
        &mut self,
        center: Vec3,
        au: Vec3,
        av: Vec3,
        ru: f32,
        rv: f32,
        count: usize,
        tube: u8,
        axial: f32,
    ) -> Vec<u32> {
        (0..count)
            .map(|i| {
                let phi = 2.0 * std::f32::consts::PI * i as f32 / count as f32;
                let dir = au * phi.cos() * ru + av * phi.sin() * rv;
                self.add_vertex(center + dir, tube, axial)
            })
            .collect()
    }

    /// One chart row of `cols + 1` uv entries (last column duplicates the
    /// ring wrap) at height `fv` inside the chart rectangle.
    fn uv_row(&mut self, rect: &Rect, fv: f32, cols: usize) -> Vec<u32> {
        (0..=cols)
            .map(|i| {
                self.uvs.push(rect.at(i as f32 / cols as f32, fv));
                (self.uvs.len() - 1) as u32
            })
            .collect()
    }

    /// Quad band between ring `from` and the next ring `to` along the tube
    /// growth direction. Both rings must have equal length; uv rows carry
    /// one extra duplicated column.
    fn band(&mut self, from: &[u32], to: &[u32], uv_from: &[u32], uv_to: &[u32]) {
        let r = from.len();
        assert_eq!(to.len(), r);
        assert_eq!(uv_from.len(), r + 1);
        assert_eq!(uv_to.len(), r + 1);
        for i in 0..r {
            let j = (i + 1) % r;
            self.faces.push([from[i], from[j], to[j]]);
            self.face_uvs.push([uv_from[i], uv_from[i + 1], uv_to[i + 1]]);
            self.faces.push([from[i], to[j], to[i]]);
            self.face_uvs.push([uv_from[i], uv_to[i + 1], uv_to[i]]);
        }
    }

    /// Closes the end of a tube with a triangle fan to a pole vertex.
    fn cap(
        &mut self,
        ring: &[u32],
        uv_ring: &[u32],
        pole: Vec3,
        tube: u8,
        rect: &Rect,
        fv_ring: f32,
    ) {
        let r = ring.len();
        let pole_idx = self.add_vertex(pole, tube, 1.0);
        for i in 0..r {
            let j = (i + 1) % r;
            let fu = (i as f32 + 0.5) / r as f32;
            self.uvs.push(rect.at(fu, fv_ring + (1.0 - fv_ring)));
            let apex_uv = (self.uvs.len() - 1) as u32;
            self.faces.push([ring[i], ring[j], pole_idx]);
            self.face_uvs.push([uv_ring[i], uv_ring[i + 1], apex_uv]);
        }
    }
}

fn piecewise(points: &[(f32, f32)], t: f32) -> f32 {
    if t <= points[0].0 {
        return points[0].1;
    }
    for w in points.windows(2) {
        let (t0, v0) = w[0];
        let (t1, v1) = w[1];
        if t <= t1 {
            return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
        }
    }
    points[points.len() - 1].1
}

fn smoothstep(x: f32) -> f32 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Weights along a joint chain: station j owns the range after its position,
/// with a smoothstep handover centered at each interior station. Returns up
/// to two (joint, weight) pairs summing to 1.
fn chain_weights(stations: &[(usize, f32)], s: f32) -> Vec<(usize, f32)> {
    let n = stations.len();
    // Transition j covers moving from joint j-1 to joint j.
    let mut trans = vec![0.0f32; n];
    for j in 1..n {
        let left = stations[j].1 - stations[j - 1].1;
        let right = if j + 1 < n {
            stations[j + 1].1 - stations[j].1
        } else {
            (1.0 - stations[j].1).max(left)
        };
        let h = (0.4 * left.min(right)).max(1e-3);
        trans[j] = smoothstep((s - (stations[j].1 - h)) / (2.0 * h));
    }
    let mut out = Vec::new();
    for j in 0..n {
        let t_in = if j == 0 { 1.0 } else { trans[j] };
        let t_out = if j + 1 < n { trans[j + 1] } else { 0.0 };
        let w = t_in - t_out;
        if w > 0.0 {
            out.push((stations[j].0, w));
        }
    }
    out
}

struct TubeChain {
    stations: Vec<(usize, f32)>,
}

/// Deterministic procedural humanoid with `K = 16` joints and a 7-island UV
/// atlas (six tube charts and one patch for the shoulder junction triangle).
///
/// Topology: a torso tube whose bottom ring splits into two leg tubes along
/// a shared crotch chord, and whose top ring splits three ways into head and
/// arm tubes plus one closing triangle. The result is a single closed
/// genus-0 surface; junctions add no vertices.
pub fn generate_stub_model(seed: u64, v_target: usize) -> Result<BodyModel> {
    if v_target < 500 {
        return Err(Error::InvalidModel(format!(
            "v_target {v_target} below minimum 500"
        )));
    }

    // Baseline resolution gives roughly 664 vertices; ring sizes scale with
    // sqrt of the target and ring counts linearly with it.
    let scale = (v_target as f32 / 664.0).sqrt();
    let a = {
        let r = (8.0 * scale).round() as usize;
        (r + r % 2).max(6)
    };
    let torso_rings = ((8.0 * scale).round() as usize).max(4);
    let leg_rings = ((10.0 * scale).round() as usize).max(4);
    let arm_rings = ((8.0 * scale).round() as usize).max(4);
    let head_rings = ((7.0 * scale).round() as usize).max(3);

    let torso_ring_size = 3 * a;
    let half = torso_ring_size / 2;

    let ex = Vec3::x();
    let ey = Vec3::y();
    let ez = Vec3::z();
    let mut b = Builder::new();

    // Chart cells: torso, head, arm L, arm R, leg L, leg R, junction patch.
    let rect_torso = Rect::cell(0, 0);
    let rect_head = Rect::cell(1, 0);
    let rect_arm_l = Rect::cell(2, 0);
    let rect_arm_r = Rect::cell(0, 1);
    let rect_leg_l = Rect::cell(1, 1);
    let rect_leg_r = Rect::cell(2, 1);

    // Torso: elliptical rings from the hip line up to the shoulder line,
    // rings right-handed about +y (au x av = z x x = y).
    let y_hip = 0.80;
    let y_top = 1.45;
    let rx_profile = [(0.0, 0.155), (0.35, 0.125), (0.8, 0.155), (1.0, 0.150)];
    let rz_profile = [(0.0, 0.105), (0.35, 0.090), (0.8, 0.110), (1.0, 0.100)];
    let mut torso_ring_ids: Vec<Vec<u32>> = Vec::new();
    let mut torso_uv_rows: Vec<Vec<u32>> = Vec::new();
    for j in 0..torso_rings {
        let t = j as f32 / (torso_rings - 1) as f32;
        let y = y_hip + t * (y_top - y_hip);
        let ring = b.circle_ring(
            Vec3::new(0.0, y, 0.0),
            ez,
            ex,
            piecewise(&rz_profile, t),
            piecewise(&rx_profile, t),
            torso_ring_size,
            TUBE_TORSO,
            t,
        );
        let row = b.uv_row(&rect_torso, t, torso_ring_size);
        torso_ring_ids.push(ring);
        torso_uv_rows.push(row);
    }
    for j in 0..torso_rings - 1 {
        let (lo, hi) = (torso_ring_ids[j].clone(), torso_ring_ids[j + 1].clone());
        let (ul, uh) = (torso_uv_rows[j].clone(), torso_uv_rows[j + 1].clone());
        b.band(&lo, &hi, &ul, &uh);
    }
    let bottom_ring = torso_ring_ids[0].clone();
    let top_ring = torso_ring_ids[torso_rings - 1].clone();

    // Generic limb tube: junction ring (vertices owned by the parent), a run
    // of circular rings, and a pole cap. Returns each chart row's ring ids.
    struct LimbSpec {
        ring0: Vec<u32>,
        centers: Vec<Vec3>,
        radii: Vec<f32>,
        au: Vec3,
        av: Vec3,
        pole: Vec3,
        tube: u8,
        rect: Rect,
    }
    let build_limb = |b: &mut Builder, spec: LimbSpec| -> Vec<Vec<u32>> {
        let r = spec.ring0.len();
        let n_circ = spec.centers.len();
        let n_rows = n_circ + 2; // junction row + circles + apex
        let fv = |row: usize| row as f32 / (n_rows - 1) as f32;
        let mut rings = vec![spec.ring0.clone()];
        let mut rows = vec![b.uv_row(&spec.rect, 0.0, r)];
        for i in 0..n_circ {
            let axial = fv(i + 1);
            let ring = b.circle_ring(
                spec.centers[i],
                spec.au,
                spec.av,
                spec.radii[i],
                spec.radii[i],
                r,
                spec.tube,
                axial,
            );
            let row = b.uv_row(&spec.rect, axial, r);
            rings.push(ring);
            rows.push(row);
        }
        for i in 0..rings.len() - 1 {
            let (lo, hi) = (rings[i].clone(), rings[i + 1].clone());
            let (ul, uh) = (rows[i].clone(), rows[i + 1].clone());
            b.band(&lo, &hi, &ul, &uh);
        }
        let last_fv = fv(n_rows - 2);
        let (last_ring, last_row) = (rings[n_circ].clone(), rows[n_circ].clone());
        b.cap(&last_ring, &last_row, spec.pole, spec.tube, &spec.rect, last_fv);
        rings
    };

    // Pants junction: bottom ring splits at indices 0 (front) and half
    // (back). Children traverse their arc in reverse so their rings are
    // right-handed about -y; the crotch chord is each ring's wrap edge.
    let arc_left: Vec<u32> = (0..=half).map(|i| bottom_ring[i]).rev().collect();
    let arc_right: Vec<u32> = (half..torso_ring_size)
        .chain([0])
        .map(|i| bottom_ring[i])
        .rev()
        .collect();
    let leg_radius = [(0.0, 0.072), (0.45, 0.055), (0.65, 0.060), (1.0, 0.042)];
    let leg_centers = |x: f32| -> (Vec<Vec3>, Vec<f32>) {
        let mut cs = Vec::new();
        let mut rs = Vec::new();
        for i in 0..leg_rings {
            let t = i as f32 / (leg_rings - 1) as f32;
            cs.push(Vec3::new(x, 0.75 - t * (0.75 - 0.08), 0.0));
            rs.push(piecewise(&leg_radius, t));
        }
        (cs, rs)
    };
    let (cl, rl) = leg_centers(0.085);
    let leg_l_rings = build_limb(
        &mut b,
        LimbSpec {
            ring0: arc_left,
            centers: cl,
            radii: rl,
            au: ex,
            av: ez,
            pole: Vec3::new(0.085, 0.0, 0.0),
            tube: TUBE_LEG_L,
            rect: rect_leg_l,
        },
    );
    let (cr, rr) = leg_centers(-0.085);
    let leg_r_rings = build_limb(
        &mut b,
        LimbSpec {
            ring0: arc_right,
            centers: cr,
            radii: rr,
            au: ex,
            av: ez,
            pole: Vec3::new(-0.085, 0.0, 0.0),
            tube: TUBE_LEG_R,
            rect: rect_leg_r,
        },
    );

    // Shoulder junction: the top ring splits three ways at indices 0, a, 2a.
    // Children keep the parent traversal order; the three chords close with
    // one upward-facing triangle.
    let arc_a: Vec<u32> = (0..=a).map(|i| top_ring[i]).collect(); // front-left: arm L
    let arc_b: Vec<u32> = (a..=2 * a).map(|i| top_ring[i]).collect(); // back: head
    let arc_c: Vec<u32> = (2 * a..torso_ring_size)
        .chain([0])
        .map(|i| top_ring[i])
        .collect(); // front-right: arm R
    b.faces.push([top_ring[0], top_ring[a], top_ring[2 * a]]);
    {
        let r = Rect::cell(2, 2);
        let u0 = b.uvs.len() as u32;
        b.uvs.push(r.at(0.1, 0.1));
        b.uvs.push(r.at(0.9, 0.1));
        b.uvs.push(r.at(0.5, 0.9));
        b.face_uvs.push([u0, u0 + 1, u0 + 2]);
    }

    let arm_radius = [(0.0, 0.052), (0.5, 0.042), (1.0, 0.033)];
    let arm_centers = |sign: f32| -> (Vec<Vec3>, Vec<f32>) {
        let mut cs = Vec::new();
        let mut rs = Vec::new();
        for i in 0..arm_rings {
            let t = i as f32 / (arm_rings - 1) as f32;
            cs.push(Vec3::new(sign * (0.21 + t * (0.72 - 0.21)), 1.45, 0.0));
            rs.push(piecewise(&arm_radius, t));
        }
        (cs, rs)
    };
    let (ca, ra) = arm_centers(1.0);
    let arm_l_rings = build_limb(
        &mut b,
        LimbSpec {
            ring0: arc_a,
            centers: ca,
            radii: ra,
            au: ey,
            av: ez,
            pole: Vec3::new(0.80, 1.45, 0.0),
            tube: TUBE_ARM_L,
            rect: rect_arm_l,
        },
    );
    let (cb, rb) = arm_centers(-1.0);
    let arm_r_rings = build_limb(
        &mut b,
        LimbSpec {
            ring0: arc_c,
            centers: cb,
            radii: rb,
            au: ez,
            av: ey,
            pole: Vec3::new(-0.80, 1.45, 0.0),
            tube: TUBE_ARM_R,
            rect: rect_arm_r,
        },
    );

    let head_radius = [
        (0.0, 0.050),
        (0.2, 0.055),
        (0.45, 0.085),
        (0.75, 0.093),
        (1.0, 0.065),
    ];
    let mut hc = Vec::new();
    let mut hr = Vec::new();
    for i in 0..head_rings {
        let t = i as f32 / (head_rings - 1) as f32;
        hc.push(Vec3::new(0.0, 1.50 + t * (1.70 - 1.50), 0.0));
        hr.push(piecewise(&head_radius, t));
    }
    let head_rings_ids = build_limb(
        &mut b,
        LimbSpec {
            ring0: arc_b,
            centers: hc,
            radii: hr,
            au: ez,
            av: ex,
            pole: Vec3::new(0.0, 1.725, 0.0),
            tube: TUBE_HEAD,
            rect: rect_head,
        },
    );

    let n_verts = b.vertices.len();

    // Joint regressor: each joint is the uniform mean of one ring so joints
    // track shape changes and the root stays inside the hip ring's hull.
    let mut reg_rows: Vec<Vec<u32>> = vec![Vec::new(); 16];
    reg_rows[joint::PELVIS] = bottom_ring.clone();
    reg_rows[joint::CHEST] =
        torso_ring_ids[((torso_rings - 1) as f32 * 0.8).round() as usize].clone();
    reg_rows[joint::NECK] = head_rings_ids[1].clone();
    let head_mid = 1 + ((head_rings - 1) as f32 * 0.6).round() as usize;
    reg_rows[joint::HEAD] = head_rings_ids[head_mid].clone();
    let elbow_idx = 1 + ((arm_rings - 1) as f32 * 0.5).round() as usize;
    reg_rows[joint::SHOULDER_L] = arm_l_rings[1].clone();
    reg_rows[joint::ELBOW_L] = arm_l_rings[elbow_idx].clone();
    reg_rows[joint::WRIST_L] = arm_l_rings[arm_rings].clone();
    reg_rows[joint::SHOULDER_R] = arm_r_rings[1].clone();
    reg_rows[joint::ELBOW_R] = arm_r_rings[elbow_idx].clone();
    reg_rows[joint::WRIST_R] = arm_r_rings[arm_rings].clone();
    let knee_idx = 1 + ((leg_rings - 1) as f32 * 0.45).round() as usize;
    reg_rows[joint::HIP_L] = leg_l_rings[1].clone();
    reg_rows[joint::KNEE_L] = leg_l_rings[knee_idx].clone();
    reg_rows[joint::ANKLE_L] = leg_l_rings[leg_rings].clone();
    reg_rows[joint::HIP_R] = leg_r_rings[1].clone();
    reg_rows[joint::KNEE_R] = leg_r_rings[knee_idx].clone();
    reg_rows[joint::ANKLE_R] = leg_r_rings[leg_rings].clone();

    let mut row_ptr = vec![0u32];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for row in &reg_rows {
        let w = 1.0 / row.len() as f32;
        for &c in row {
            cols.push(c);
            vals.push(w);
        }
        row_ptr.push(cols.len() as u32);
    }
    let joint_regressor = CsrMatrix {
        row_ptr,
        cols,
        vals,
        n_cols: n_verts,
    };

    let parents = vec![
        u32::MAX,
        joint::PELVIS as u32,
        joint::CHEST as u32,
        joint::NECK as u32,
        joint::CHEST as u32,
        joint::SHOULDER_L as u32,
        joint::ELBOW_L as u32,
        joint::CHEST as u32,
        joint::SHOULDER_R as u32,
        joint::ELBOW_R as u32,
        joint::PELVIS as u32,
        joint::HIP_L as u32,
        joint::KNEE_L as u32,
        joint::PELVIS as u32,
        joint::HIP_R as u32,
        joint::KNEE_R as u32,
    ];

    // Skin weights: per tube, blend along the chain of that tube's joints.
    // Junction rings belong to the torso and sit at a chain endpoint, so the
    // field is continuous across junctions.
    let station = |row: usize, rows_m1: usize| row as f32 / rows_m1 as f32;
    let arm_rows = arm_rings + 1; // last row index (junction + circles + apex)
    let leg_rows = leg_rings + 1;
    let head_rows = head_rings + 1;
    let chains: [TubeChain; 6] = [
        TubeChain {
            stations: vec![(joint::PELVIS, 0.0), (joint::CHEST, 0.78)],
        },
        TubeChain {
            stations: vec![
                (joint::CHEST, 0.0),
                (joint::NECK, station(1, head_rows)),
                (joint::HEAD, station(head_mid, head_rows)),
            ],
        },
        TubeChain {
            stations: vec![
                (joint::CHEST, 0.0),
                (joint::SHOULDER_L, station(1, arm_rows)),
                (joint::ELBOW_L, station(elbow_idx, arm_rows)),
                (joint::WRIST_L, station(arm_rings, arm_rows)),
            ],
        },
        TubeChain {
            stations: vec![
                (joint::CHEST, 0.0),
                (joint::SHOULDER_R, station(1, arm_rows)),
                (joint::ELBOW_R, station(elbow_idx, arm_rows)),
                (joint::WRIST_R, station(arm_rings, arm_rows)),
            ],
        },
        TubeChain {
            stations: vec![
                (joint::PELVIS, 0.0),
                (joint::HIP_L, station(1, leg_rows)),
                (joint::KNEE_L, station(knee_idx, leg_rows)),
                (joint::ANKLE_L, station(leg_rings, leg_rows)),
            ],
        },
        TubeChain {
            stations: vec![
                (joint::PELVIS, 0.0),
                (joint::HIP_R, station(1, leg_rows)),
                (joint::KNEE_R, station(knee_idx, leg_rows)),
                (joint::ANKLE_R, station(leg_rings, leg_rows)),
            ],
        },
    ];
    let mut skin_weights = vec![0.0f32; n_verts * 16];
    for vi in 0..n_verts {
        let chain = &chains[b.tube_of[vi] as usize];
        for (j, w) in chain_weights(&chain.stations, b.axial[vi]) {
            skin_weights[vi * 16 + j] = w;
        }
    }

    // Shape fields: ten thickness atoms along the template surface normal,
    // with disjoint tube support or orthogonal harmonics on a shared tube,
    // so no coefficient mix can move vertices without visibly moving the
    // surface. Surface-tangential basis directions would leave beta
    // unrecoverable by scan fitting, and off-normal (e.g. tube-radial)
    // directions poke through offset surfaces wherever the surface tapers.
    // Field 0 also carries the stature stretch, field 1 a lateral sway.
    // Arm amplitudes stay small so hand-cap vertices, whose normals carry
    // y, cannot overtake the extremal vertices of the sampling box after
    // height standardization.
    let template = Mesh::new(b.vertices.clone(), b.faces, b.uvs, b.face_uvs)?;
    let normals = vertex_normals(&template);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f32::consts::TAU;
    let y_mid = 0.85;
    let phi_torso = rng.gen_range(0.0..tau);
    let phi_torso2 = rng.gen_range(0.0..tau);
    let phi_arm = rng.gen_range(0.0..tau);
    let phi_leg = rng.gen_range(0.0..tau);
    let torso = [TUBE_TORSO];
    let head = [TUBE_HEAD];
    let arms = [TUBE_ARM_L, TUBE_ARM_R];
    let legs = [TUBE_LEG_L, TUBE_LEG_R];
    // (tubes, harmonic frequency, phase; frequency 0 is a constant atom,
    // and the empty tube set marks the pure stature field). Girth and
    // stature stay in separate fields: a coupled field would force any
    // uniform-inflation fit to also mis-scale the body vertically.
    let empty: [u8; 0] = [];
    let atoms: [(&[u8], f32, f32); N_SHAPES] = [
        (&torso, 0.0, 0.0),
        (&torso, 1.0, phi_torso),
        (&torso, 1.0, phi_torso + tau / 4.0),
        (&empty, 0.0, phi_torso2),
        (&head, 0.0, 0.0),
        (&arms, 0.0, 0.0),
        (&arms, 1.0, phi_arm),
        (&legs, 0.0, 0.0),
        (&legs, 1.0, phi_leg),
        (&legs, 1.0, phi_leg + tau / 4.0),
    ];
    let mut shape_basis = vec![Vec3::zeros(); N_SHAPES * n_verts];
    for (i, (tubes, freq, phase)) in atoms.iter().enumerate() {
        let jitter = 1.0 + rng.gen_range(-0.15..0.15f32);
        if tubes.is_empty() {
            let stretch = 0.04 * jitter;
            for vi in 0..n_verts {
                let p = b.vertices[vi];
                shape_basis[i * n_verts + vi] = Vec3::new(0.0, stretch * (p.y - y_mid), 0.0);
            }
            continue;
        }
        let sway = if i == 1 { 0.012 } else { 0.0 };
        for vi in 0..n_verts {
            let tube = b.tube_of[vi];
            if tubes.contains(&tube) {
                let amp = if tube == TUBE_ARM_L || tube == TUBE_ARM_R {
                    0.008
                } else {
                    0.016
                };
                let s = b.axial[vi];
                let profile = if *freq == 0.0 {
                    1.0
                } else {
                    (tau * freq * s + phase).cos()
                };
                shape_basis[i * n_verts + vi] = normals[vi] * (amp * jitter * profile);
            }
            if sway > 0.0 {
                let p = b.vertices[vi];
                let yn = (p.y / 1.725).clamp(0.0, 1.0);
                shape_basis[i * n_verts + vi].x += sway * yn * yn;
            }
        }
    }

    let model = BodyModel {
        template,
        shape_basis,
        joint_regressor,
        parents,
        skin_weights,
    };
    model.validate()?;
    Ok(model)
}

/// Dominant-joint id per vertex (argmax skin weight), handy for masks.
pub fn dominant_joint(model: &BodyModel) -> Vec<usize> {
    let k = model.n_joints();
    model
        .skin_weights
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap_or(0)
        })
        .collect()
}

/// Total skin weight per vertex over a set of joints.
pub fn joint_weight_sum(model: &BodyModel, joints: &[usize]) -> Vec<f32> {
    let k = model.n_joints();
    model
        .skin_weights
        .chunks(k)
        .map(|row| joints.iter().map(|&j| row[j]).sum())
        .collect()
}

#[allow(dead_code)]
fn count_uv_islands(mesh: &Mesh) -> usize {
    let n = mesh.uvs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        let mut i = i;
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for f in &mesh.face_uvs {
        let a = find(&mut parent, f[0] as usize);
        for &x in &f[1..] {
            let rx = find(&mut parent, x as usize);
            parent[rx] = a;
        }
    }
    let mut used: Vec<usize> = mesh
        .face_uvs
        .iter()
        .flatten()
        .map(|&i| find(&mut parent, i as usize))
        .collect();
    used.sort_unstable();
    used.dedup();
    used.len()
}

#[allow(dead_code)]
fn signed_volume(mesh: &Mesh) -> f32 {
    let mut vol = 0.0f64;
    for f in &mesh.faces {
        let a = mesh.vertices[f[0] as usize];
        let b = mesh.vertices[f[1] as usize];
        let c = mesh.vertices[f[2] as usize];
        vol += (a.cross(&b).dot(&c) as f64) / 6.0;
    }
    vol as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::unit_sphere_mesh;
    use approx::assert_relative_eq;
    use std::collections::HashMap;

    fn stub() -> BodyModel {
        generate_stub_model(7, 664).unwrap()
    }

    #[test]
    fn stub_is_a_closed_oriented_genus_zero_surface() {
        let m = stub();
        let t = &m.template;
        assert!(t.is_closed());
        assert_eq!(t.euler_characteristic(), 2);
        // Consistent orientation: every directed edge appears exactly once.
        let mut seen = HashMap::new();
        for f in &t.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *seen.entry((a, b)).or_insert(0u32) += 1;
            }
        }
        assert!(seen.values().all(|&c| c == 1), "duplicated directed edge");
        assert!(signed_volume(t) > 0.01, "normals do not point outward");
    }

    #[test]
    fn stub_tracks_vertex_target() {
        let m = stub();
        let v = m.n_vertices() as f32;
        assert!((v - 664.0).abs() / 664.0 < 0.05, "got {v} vertices");
        let big = generate_stub_model(7, 1500).unwrap();
        let vb = big.n_vertices() as f32;
        assert!(vb > 1100.0 && vb < 2000.0, "got {vb} vertices");
        assert!(generate_stub_model(7, 400).is_err());
    }

    #[test]
    fn stub_is_deterministic_and_seed_sensitive() {
        let a = generate_stub_model(42, 700).unwrap();
        let b = generate_stub_model(42, 700).unwrap();
        assert_eq!(a, b);
        let c = generate_stub_model(43, 700).unwrap();
        assert_ne!(a.shape_basis, c.shape_basis);
    }

    #[test]
    fn stub_atlas_has_at_least_six_islands() {
        let m = stub();
        assert!(count_uv_islands(&m.template) >= 6);
        // All uvs inside the unit square.
        for t in &m.template.uvs {
            assert!(t.x >= 0.0 && t.x <= 1.0 && t.y >= 0.0 && t.y <= 1.0);
        }
    }

    #[test]
    fn shape_mesh_is_affine_in_beta() {
        let m = stub();
        assert_eq!(m.shape_mesh(&ShapeParams::zeros()), m.template);
        let a = ShapeParams([0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 0.0, 3.0, -2.0, 1.0]);
        let b = ShapeParams([1.0, 1.0, -1.0, 0.5, 0.0, 2.0, -1.5, 0.0, 1.0, -1.0]);
        let sum = ShapeParams(std::array::from_fn(|i| a.0[i] + b.0[i]));
        let ma = m.shape_mesh(&a);
        let mb = m.shape_mesh(&b);
        let ms = m.shape_mesh(&sum);
        for i in 0..m.n_vertices() {
            let lhs = ma.vertices[i] + mb.vertices[i] - m.template.vertices[i];
            assert_relative_eq!(lhs.x, ms.vertices[i].x, epsilon = 1e-5);
            assert_relative_eq!(lhs.y, ms.vertices[i].y, epsilon = 1e-5);
            assert_relative_eq!(lhs.z, ms.vertices[i].z, epsilon = 1e-5);
        }
    }

    #[test]
    fn joints_are_linear_in_beta_and_root_sits_in_hip_ring() {
        let m = stub();
        let a = ShapeParams::axis(2, 1.5);
        let b = ShapeParams::axis(7, -2.0);
        let sum = ShapeParams(std::array::from_fn(|i| a.0[i] + b.0[i]));
        let j0 = m.joint_positions(&ShapeParams::zeros());
        let ja = m.joint_positions(&a);
        let jb = m.joint_positions(&b);
        let js = m.joint_positions(&sum);
        for k in 0..16 {
            let lhs = ja[k] + jb[k] - j0[k];
            assert!((lhs - js[k]).norm() < 1e-5);
        }
        // The pelvis is the uniform mean of its support ring, hence inside
        // the ring's convex hull; check mean identity and bounding box.
        let support: Vec<Vec3> = m
            .joint_regressor
            .row(joint::PELVIS)
            .map(|(c, _)| m.template.vertices[c as usize])
            .collect();
        let mean = support.iter().sum::<Vec3>() / support.len() as f32;
        assert!((j0[joint::PELVIS] - mean).norm() < 1e-5);
        let (lo, hi) = support.iter().fold(
            (support[0], support[0]),
            |(lo, hi), p| (lo.inf(p), hi.sup(p)),
        );
        for c in 0..3 {
            assert!(j0[joint::PELVIS][c] >= lo[c] - 1e-6);
            assert!(j0[joint::PELVIS][c] <= hi[c] + 1e-6);
        }
    }

    #[test]
    fn identity_pose_is_identity_map() {
        let m = stub();
        let beta = ShapeParams::axis(0, 1.0);
        let shaped = m.shape_mesh(&beta);
        let posed = m.pose_mesh(&beta, &Pose::identity(16)).unwrap();
        for (a, b) in shaped.vertices.iter().zip(&posed.vertices) {
            assert!((a - b).norm() < 1e-5);
        }
    }

    #[test]
    fn root_rotation_is_rigid_about_root_joint() {
        let m = stub();
        let beta = ShapeParams::zeros();
        let root = m.joint_positions(&beta)[joint::PELVIS];
        let axis_angle = Vec3::new(0.3, 1.1, -0.4);
        let r = nalgebra::Rotation3::new(axis_angle).into_inner();
        let trans = Vec3::new(0.2, -0.1, 0.5);
        let mut pose = Pose::identity(16);
        pose.joint_rotations[joint::PELVIS] = axis_angle;
        pose.root_translation = trans;
        let posed = m.pose_mesh(&beta, &pose).unwrap();
        for (v, out) in m.template.vertices.iter().zip(&posed.vertices) {
            let expect = r * (v - root) + root + trans;
            assert!((out - expect).norm() < 1e-4, "{out:?} vs {expect:?}");
        }
    }

    #[test]
    fn elbow_bend_moves_only_its_chain() {
        let m = stub();
        let mut pose = Pose::identity(16);
        pose.joint_rotations[joint::ELBOW_L] = Vec3::new(0.0, 0.0, 1.0);
        let posed = m.pose_mesh(&ShapeParams::zeros(), &pose).unwrap();
        let k = m.n_joints();
        let mut moved_count = 0;
        for (vi, (a, b)) in m
            .template
            .vertices
            .iter()
            .zip(&posed.vertices)
            .enumerate()
        {
            let moved = (a - b).norm() > 1e-6;
            let support = m.skin_weights[vi * k + joint::ELBOW_L]
                + m.skin_weights[vi * k + joint::WRIST_L];
            if moved {
                moved_count += 1;
                assert!(support > 0.0, "vertex {vi} moved without chain weight");
            }
        }
        assert!(moved_count > 20, "elbow bend moved {moved_count} vertices");
    }

    #[test]
    fn height_standardization_freezes_stature() {
        let m = stub();
        let h0 = m.template.height();
        // The raw basis must actually change stature, otherwise the test
        // proves nothing.
        let mut raw_varies = false;
        for i in 0..N_SHAPES {
            let h = m.shape_mesh(&ShapeParams::axis(i, 2.0)).height();
            if (h - h0).abs() > 2e-3 {
                raw_varies = true;
            }
        }
        assert!(raw_varies, "raw stub basis has no stature component");

        let std = m.standardize_height();
        for i in 0..N_SHAPES {
            for v in [2.0f32, -2.0] {
                let h = std.shape_mesh(&ShapeParams::axis(i, v)).height();
                assert!(
                    (h - h0).abs() < 1e-3,
                    "field {i} scale {v}: height {h} vs {h0}"
                );
            }
        }
        // Random draws across the sampling box.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let beta = ShapeParams(std::array::from_fn(|_| rng.gen_range(-2.0..2.0)));
            let h = std.shape_mesh(&beta).height();
            assert!((h - h0).abs() < 1e-3);
        }
    }

    #[test]
    fn height_standardization_is_idempotent_and_preserves_xz() {
        let m = stub();
        let s1 = m.standardize_height();
        let s2 = s1.standardize_height();
        for (a, b) in s1.shape_basis.iter().zip(&s2.shape_basis) {
            assert!((a - b).norm() < 1e-6);
        }
        // x/z untouched; y changed exactly by delta_i times the stretch field.
        let v = m.n_vertices();
        let (top, bot) = extremal_y_vertices(&m.template);
        let y_min = m.template.vertices[bot].y;
        let span = m.template.vertices[top].y - y_min;
        for i in 0..N_SHAPES {
            let delta = m.shape_basis[i * v + top].y - m.shape_basis[i * v + bot].y;
            for vi in 0..v {
                let orig = m.shape_basis[i * v + vi];
                let std = s1.shape_basis[i * v + vi];
                assert_eq!(orig.x, std.x);
                assert_eq!(orig.z, std.z);
                let expect = orig.y - delta * (m.template.vertices[vi].y - y_min) / span;
                assert_relative_eq!(std.y, expect, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bmdl");
        let m = stub();
        save_model(&path, &m).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_container_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bmdl");
        let m = stub();
        save_model(&path, &m).unwrap();
        let data = std::fs::read(&path).unwrap();
        for cut in [3usize, 20, data.len() / 2, data.len() - 1] {
            let short = &data[..cut];
            let p2 = dir.path().join("cut.bmdl");
            std::fs::write(&p2, short).unwrap();
            assert!(load_model(&p2).is_err(), "cut at {cut} loaded");
        }
    }

    /// A container with real-body counts (V=6890, F=13776, K=24) loads, so
    /// converted assets with the standard resolution work unchanged.
    #[test]
    fn container_accepts_real_body_counts() {
        let mesh = unit_sphere_mesh(82, 85);
        assert_eq!(mesh.vertex_count(), 6890);
        assert_eq!(mesh.face_count(), 13776);
        let v = mesh.vertex_count();
        let k = 24;
        let mut parents = vec![0u32; k];
        parents[0] = u32::MAX;
        for (j, p) in parents.iter_mut().enumerate().skip(1) {
            *p = (j - 1) as u32;
        }
        let mut skin_weights = vec![0.0f32; v * k];
        for vi in 0..v {
            skin_weights[vi * k + vi % k] = 1.0;
        }
        let model = BodyModel {
            shape_basis: vec![Vec3::zeros(); N_SHAPES * v],
            joint_regressor: CsrMatrix {
                row_ptr: (0..=k as u32).collect(),
                cols: (0..k as u32).collect(),
                vals: vec![1.0; k],
                n_cols: v,
            },
            parents,
            skin_weights,
            template: mesh,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("real.bmdl");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.n_vertices(), 6890);
        assert_eq!(back.n_joints(), 24);
        assert_eq!(back, model);
    }

    #[test]
    fn subdivided_model_commutes_with_shaping() {
        let m = stub();
        let sub = subdivide_model(&m).unwrap();
        assert_eq!(sub.n_vertices(), m.n_vertices() + m.template.edge_count());
        let beta = ShapeParams([1.0, -0.5, 0.3, 2.0, -1.0, 0.8, 0.0, -2.0, 1.5, 0.4]);
        let a = sub.shape_mesh(&beta);
        let b = subdivide(&m.shape_mesh(&beta)).unwrap();
        for (x, y) in a.vertices.iter().zip(&b.vertices) {
            assert!((x - y).norm() < 1e-6);
        }
        // Posing the subdivided model works and keeps limbs attached.
        let mut pose = Pose::identity(16);
        pose.joint_rotations[joint::KNEE_R] = Vec3::new(0.8, 0.0, 0.0);
        let posed = sub.pose_mesh(&beta, &pose).unwrap();
        assert!(posed.is_closed());
    }

    #[test]
    fn chain_weights_are_convex_and_local() {
        let stations = vec![(0usize, 0.0f32), (3, 0.3), (5, 0.7), (9, 0.9)];
        for i in 0..=50 {
            let s = i as f32 / 50.0;
            let w = chain_weights(&stations, s);
            assert!(w.len() <= 2);
            let total: f32 = w.iter().map(|&(_, v)| v).sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-5);
            for &(_, v) in &w {
                assert!(v >= 0.0);
            }
        }
        assert_eq!(chain_weights(&stations, 0.0), vec![(0, 1.0)]);
        let end = chain_weights(&stations, 1.0);
        assert_eq!(end, vec![(9, 1.0)]);
    }
}

//! Staged scan registration: landmark triangulation, pose fit, asymmetric
//! shape fit, and free-form refinement on the subdivided mesh, plus the
//! unposing step that brings fitted offsets back to T-pose for baking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::body::{blend_transforms, BodyModel, Pose, ShapeParams, N_SHAPES};
use crate::camera::Camera;
use crate::closest::SurfaceBvh;
use crate::mesh::{uniform_laplacian, Mesh};
use crate::{Error, Mat3, Result, Vec2, Vec3};
use std::path::Path;

/// A surface to register against: arbitrary topology, meters.
#[derive(Debug, Clone)]
pub struct Scan {
    pub mesh: Mesh,
    pub colors: Option<Vec<Vec3>>,
}

impl Scan {
    pub fn new(mesh: Mesh, colors: Option<Vec<Vec3>>) -> Result<Scan> {
        mesh.validate()?;
        if let Some(c) = &colors {
            if c.len() != mesh.vertex_count() {
                return Err(Error::InvalidMesh(format!(
                    "{} colors for {} vertices",
                    c.len(),
                    mesh.vertex_count()
                )));
            }
        }
        Ok(Scan { mesh, colors })
    }

    /// Registration needs enough samples to constrain the stages.
    pub fn validate_for_registration(&self) -> Result<()> {
        if self.mesh.vertex_count() < 1000 {
            return Err(Error::Registration(format!(
                "scan has {} vertices; registration needs at least 1000",
                self.mesh.vertex_count()
            )));
        }
        Ok(())
    }
}

/// One 2D joint detection: (joint id, pixel x, pixel y, confidence).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub joint: usize,
    pub x: f32,
    pub y: f32,
    pub confidence: f32,
}

#[derive(Debug, Clone)]
pub struct LandmarkView {
    pub camera: Camera,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, Default)]
pub struct LandmarkObservations {
    pub views: Vec<LandmarkView>,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    focal: f32,
    principal: [f32; 2],
    width: usize,
    height: usize,
    rotation: [[f32; 3]; 3],
    translation: [f32; 3],
}

impl CameraJson {
    fn from_camera(c: &Camera) -> CameraJson {
        let r = &c.rotation;
        CameraJson {
            focal: c.focal,
            principal: [c.principal.x, c.principal.y],
            width: c.width,
            height: c.height,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }

    fn camera(&self) -> Camera {
        let r = &self.rotation;
        Camera {
            focal: self.focal,
            principal: Vec2::new(self.principal[0], self.principal[1]),
            width: self.width,
            height: self.height,
            rotation: Mat3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            translation: Vec3::new(self.translation[0], self.translation[1], self.translation[2]),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ViewJson {
    camera: CameraJson,
    keypoints: Vec<[f32; 4]>,
}

#[derive(Serialize, Deserialize)]
struct ObservationsJson {
    views: Vec<ViewJson>,
}

impl LandmarkObservations {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let doc = ObservationsJson {
            views: self
                .views
                .iter()
                .map(|v| ViewJson {
                    camera: CameraJson::from_camera(&v.camera),
                    keypoints: v
                        .keypoints
                        .iter()
                        .map(|k| [k.joint as f32, k.x, k.y, k.confidence])
                        .collect(),
                })
                .collect(),
        };
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &doc)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<LandmarkObservations> {
        let f = std::fs::File::open(path)?;
        let doc: ObservationsJson = serde_json::from_reader(std::io::BufReader::new(f))?;
        let views = doc
            .views
            .into_iter()
            .map(|v| {
                let camera = v.camera.camera();
                camera.validate()?;
                Ok(LandmarkView {
                    camera,
                    keypoints: v
                        .keypoints
                        .iter()
                        .map(|k| Keypoint {
                            joint: k[0] as usize,
                            x: k[1],
                            y: k[2],
                            confidence: k[3],
                        })
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LandmarkObservations { views })
    }
}

/// Projects known 3D joints into the given cameras with unit confidence;
/// joints behind a camera are omitted from that view.
pub fn observe_landmarks(joints: &[Vec3], cameras: &[Camera]) -> LandmarkObservations {
    let views = cameras
        .iter()
        .map(|camera| {
            let keypoints = joints
                .iter()
                .enumerate()
                .filter_map(|(j, p)| {
                    camera.project(*p).map(|(x, y, _)| Keypoint {
                        joint: j,
                        x,
                        y,
                        confidence: 1.0,
                    })
                })
                .collect();
            LandmarkView {
                camera: camera.clone(),
                keypoints,
            }
        })
        .collect();
    LandmarkObservations { views }
}

#[derive(Debug, Clone, Copy)]
pub struct TriangulatedJoint {
    pub position: Vec3,
    pub confidence: f32,
    pub valid: bool,
}

/// Per-joint confidence-weighted reprojection minimization: DLT gives the
/// start, Gauss-Newton polishes. Joints seen by fewer than two views with
/// positive confidence are flagged invalid.
pub fn triangulate_landmarks(obs: &LandmarkObservations) -> Result<Vec<TriangulatedJoint>> {
    if obs.views.is_empty() {
        return Err(Error::Registration("no landmark views".into()));
    }
    let n_joints = obs
        .views
        .iter()
        .flat_map(|v| v.keypoints.iter().map(|k| k.joint + 1))
        .max()
        .unwrap_or(0);
    if n_joints == 0 {
        return Err(Error::Registration("no keypoints in any view".into()));
    }

    let mut out = Vec::with_capacity(n_joints);
    for j in 0..n_joints {
        let mut sightings: Vec<(&Camera, Keypoint)> = Vec::new();
        for view in &obs.views {
            for k in &view.keypoints {
                if k.joint == j && k.confidence > 0.0 {
                    sightings.push((&view.camera, *k));
                }
            }
        }
        if sightings.len() < 2 {
            out.push(TriangulatedJoint {
                position: Vec3::zeros(),
                confidence: 0.0,
                valid: false,
            });
            continue;
        }

        let position = triangulate_one(&sightings);
        let confidence =
            sightings.iter().map(|(_, k)| k.confidence).sum::<f32>() / sightings.len() as f32;
        out.push(TriangulatedJoint {
            position,
            confidence,
            valid: true,
        });
    }

    if out.iter().all(|t| !t.valid) {
        return Err(Error::Registration("all joints invalid".into()));
    }
    Ok(out)
}

fn triangulate_one(sightings: &[(&Camera, Keypoint)]) -> Vec3 {
    // DLT: each view contributes two linear equations in X.
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    for (cam, k) in sightings {
        let w = k.confidence as f64;
        let r = cam.rotation.cast::<f64>();
        let t = cam.translation.cast::<f64>();
        let f = cam.focal as f64;
        let (cx, cy) = (cam.principal.x as f64, cam.principal.y as f64);
        let rows = [
            (r.row(0) * f + r.row(2) * (cx - k.x as f64), f * t.x + (cx - k.x as f64) * t.z),
            (r.row(1) * f + r.row(2) * (cy - k.y as f64), f * t.y + (cy - k.y as f64) * t.z),
        ];
        for (a, b) in rows {
            let a = a.transpose();
            ata += w * a * a.transpose();
            atb += w * a * (-b);
        }
    }
    let mut x = ata
        .lu()
        .solve(&atb)
        .unwrap_or_else(nalgebra::Vector3::zeros);

    // Gauss-Newton on the weighted pixel residuals.
    for _ in 0..20 {
        let mut jtj = nalgebra::Matrix3::<f64>::zeros();
        let mut jtr = nalgebra::Vector3::<f64>::zeros();
        for (cam, k) in sightings {
            let w = k.confidence as f64;
            let r = cam.rotation.cast::<f64>();
            let t = cam.translation.cast::<f64>();
            let pc = r * x + t;
            if pc.z <= 1e-6 {
                continue;
            }
            let f = cam.focal as f64;
            let u = f * pc.x / pc.z + cam.principal.x as f64;
            let v = f * pc.y / pc.z + cam.principal.y as f64;
            let du = (r.row(0) * (f / pc.z) - r.row(2) * (f * pc.x / (pc.z * pc.z))).transpose();
            let dv = (r.row(1) * (f / pc.z) - r.row(2) * (f * pc.y / (pc.z * pc.z))).transpose();
            jtj += w * (du * du.transpose() + dv * dv.transpose());
            jtr += w * (du * (u - k.x as f64) + dv * (v - k.y as f64));
        }
        match (jtj + nalgebra::Matrix3::identity() * 1e-12).lu().solve(&jtr) {
            Some(step) => {
                x -= step;
                if step.norm() < 1e-12 {
                    break;
                }
            }
            None => break,
        }
    }
    Vec3::new(x.x as f32, x.y as f32, x.z as f32)
}

/// Levenberg-Marquardt with a central-difference Jacobian. Steps are
/// accepted only when they lower the cost, so the trace is monotone.
pub(crate) struct LmResult {
    pub params: Vec<f32>,
    pub cost: f64,
    pub cost_trace: Vec<f64>,
}

pub(crate) fn levenberg_marquardt(
    init: &[f32],
    max_iters: usize,
    step_tol: f64,
    mut residuals: impl FnMut(&[f32]) -> Vec<f32>,
) -> LmResult {
    let n = init.len();
    let mut params = init.to_vec();
    let cost_of = |r: &[f32]| r.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
    let mut r = residuals(&params);
    let mut cost = cost_of(&r);
    let mut trace = vec![cost];
    let mut lambda = 1e-3f64;
    let h = 1e-3f32;

    for _ in 0..max_iters {
        let m = r.len();
        let mut jac = DMatrix::<f64>::zeros(m, n);
        for c in 0..n {
            let saved = params[c];
            params[c] = saved + h;
            let rp = residuals(&params);
            params[c] = saved - h;
            let rm = residuals(&params);
            params[c] = saved;
            for i in 0..m {
                jac[(i, c)] = (rp[i] as f64 - rm[i] as f64) / (2.0 * h as f64);
            }
        }
        let rv = DVector::<f64>::from_iterator(m, r.iter().map(|&x| x as f64));
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * rv;

        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = jtj.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 8.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let candidate: Vec<f32> = params
                .iter()
                .zip(step.iter())
                .map(|(&p, &d)| p + d as f32)
                .collect();
            let rc = residuals(&candidate);
            let cc = cost_of(&rc);
            if cc < cost {
                params = candidate;
                r = rc;
                cost = cc;
                trace.push(cost);
                lambda = (lambda * 0.4).max(1e-10);
                accepted = true;
                if step.norm() < step_tol {
                    return LmResult {
                        params,
                        cost,
                        cost_trace: trace,
                    };
                }
                break;
            }
            lambda *= 8.0;
        }
        if !accepted {
            break;
        }
    }
    LmResult {
        params,
        cost,
        cost_trace: trace,
    }
}

/// Gauge regularizer on joint rotations. Keeps unobserved leaf joints at
/// zero without biasing recoverable joints: at 1e-3 the pull is already
/// 1% of a leaf rotation on this skeleton, millimeters at the wrist.
pub const LAMBDA_POSE: f32 = 1e-4;

/// Fits joint rotations and root translation to triangulated joints with
/// the canonical-shape skeleton.
pub fn fit_pose(model: &BodyModel, joints3d: &[TriangulatedJoint]) -> Result<Pose> {
    fit_pose_with_shape(model, &ShapeParams::zeros(), joints3d)
}

/// Pose fit against the skeleton of a known shape; `fit_pose` is this with
/// beta = 0, and `register` re-runs it once the shape estimate exists.
pub fn fit_pose_with_shape(
    model: &BodyModel,
    beta: &ShapeParams,
    joints3d: &[TriangulatedJoint],
) -> Result<Pose> {
    let k = model.n_joints();
    if joints3d.len() > k {
        return Err(Error::Registration(format!(
            "{} joint targets for a {k}-joint model",
            joints3d.len()
        )));
    }
    if !joints3d.iter().any(|t| t.valid) {
        return Err(Error::Registration("no valid joint targets".into()));
    }

    let unpack = |p: &[f32]| -> Pose {
        let mut pose = Pose::identity(k);
        for j in 0..k {
            pose.joint_rotations[j] = Vec3::new(p[3 * j], p[3 * j + 1], p[3 * j + 2]);
        }
        pose.root_translation = Vec3::new(p[3 * k], p[3 * k + 1], p[3 * k + 2]);
        pose
    };

    let init = vec![0.0f32; 3 * k + 3];
    let sqrt_reg = LAMBDA_POSE.sqrt();
    let result = levenberg_marquardt(&init, 100, 1e-6, |p| {
        let pose = unpack(p);
        let mut res = Vec::with_capacity(3 * joints3d.len() + 3 * k);
        match model.posed_joints(beta, &pose) {
            Ok(joints) => {
                for (t, j) in joints3d.iter().zip(&joints) {
                    if !t.valid {
                        continue;
                    }
                    let w = t.confidence.sqrt();
                    let d = j - t.position;
                    res.extend_from_slice(&[w * d.x, w * d.y, w * d.z]);
                }
            }
            Err(_) => res.extend(std::iter::repeat(1e3).take(3 * joints3d.len())),
        }
        for &v in &p[..3 * k] {
            res.push(sqrt_reg * v);
        }
        res
    });
    debug_assert!(result.cost_trace.windows(2).all(|w| w[1] <= w[0]));
    debug_assert!(result.cost <= result.cost_trace[0]);
    Ok(unpack(&result.params))
}

#[derive(Debug, Clone, Copy)]
pub struct ShapeFitParams {
    /// Extra cost multiplier for model vertices outside the scan.
    pub w_out: f32,
    pub lambda_beta: f32,
    pub outer_iters: usize,
    /// Weight multiplier near open scan boundaries.
    pub boundary_downweight: f32,
}

impl Default for ShapeFitParams {
    fn default() -> Self {
        ShapeFitParams {
            // For representation ripple of spread s, the asymmetric
            // equilibrium sits ~1.05s inside the scan at w=10 and deeper as
            // w grows; 10 keeps roughly 19 in 20 fitted vertices inside a
            // uniform clothing shell.
            w_out: 10.0,
            // The tether must sit well below the data curvature of the
            // weakest basis atom (arms: ~200 vertices x (8 mm)^2 = 0.013
            // per unit beta) or recovered coefficients shrink visibly.
            lambda_beta: 1e-3,
            outer_iters: 20,
            boundary_downweight: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShapeFit {
    pub beta: ShapeParams,
    pub clamped: bool,
    /// Unsigned point-to-surface RMS at convergence, meters.
    pub rms: f32,
    /// Fraction of model vertices strictly inside the scan.
    pub inside_fraction: f32,
}

pub const BETA_LIMIT: f32 = 5.0;

/// ICP-style shape fit: correspondences and inside/outside weights are
/// refreshed each outer iteration, then a damped Gauss-Newton step runs on
/// the frozen asymmetric quadratic.
pub fn fit_shape(
    model: &BodyModel,
    pose: &Pose,
    scan: &SurfaceBvh,
    params: &ShapeFitParams,
) -> Result<ShapeFit> {
    let posed = |beta: &ShapeParams| -> Result<Vec<Vec3>> {
        model.pose_vertices(&model.shape_mesh(beta).vertices, beta, pose)
    };

    let mut beta = ShapeParams::zeros();
    let sqrt_reg = params.lambda_beta.sqrt();
    for _ in 0..params.outer_iters {
        let current = posed(&beta)?;
        let mut targets = Vec::with_capacity(current.len());
        let mut planes = Vec::with_capacity(current.len());
        let mut weights = Vec::with_capacity(current.len());
        for p in &current {
            let hit = scan.closest(*p);
            let mut w = if hit.signed > 0.0 { params.w_out } else { 1.0 };
            if hit.near_boundary {
                w *= params.boundary_downweight;
            }
            targets.push(hit.point);
            planes.push(hit.normal);
            weights.push(w.sqrt());
        }

        let before = beta.0;
        // Point-to-plane residuals: the scalar distance along the local
        // pseudonormal. Point-to-point targets would also charge the
        // tangential slide and stall well short of the scan.
        let result = levenberg_marquardt(&beta.0, 6, 1e-7, |b| {
            let cand = ShapeParams(b.try_into().unwrap());
            let mut res = Vec::with_capacity(targets.len() + N_SHAPES);
            match posed(&cand) {
                Ok(verts) => {
                    for (((v, q), n), w) in
                        verts.iter().zip(&targets).zip(&planes).zip(&weights)
                    {
                        res.push(w * (v - q).dot(n));
                    }
                }
                Err(_) => res.extend(std::iter::repeat(1e3).take(targets.len())),
            }
            for &v in b {
                res.push(sqrt_reg * v);
            }
            res
        });
        debug_assert!(result.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        beta = ShapeParams(result.params.try_into().unwrap());
        let step: f32 = beta
            .0
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt();
        if step < 1e-6 {
            break;
        }
    }

    let mut clamped = false;
    for b in &mut beta.0 {
        if b.abs() > BETA_LIMIT {
            *b = b.clamp(-BETA_LIMIT, BETA_LIMIT);
            clamped = true;
        }
    }

    let final_pose = posed(&beta)?;
    let mut sum_sq = 0.0f64;
    let mut inside = 0usize;
    for p in &final_pose {
        let hit = scan.closest(*p);
        sum_sq += (hit.distance as f64).powi(2);
        if hit.signed < 0.0 {
            inside += 1;
        }
    }
    Ok(ShapeFit {
        beta,
        clamped,
        rms: ((sum_sq / final_pose.len() as f64).sqrt()) as f32,
        inside_fraction: inside as f32 / final_pose.len() as f32,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct FreeformParams {
    /// Laplacian smoothness weight; the regularizer is a per-vertex mean so
    /// the weight keeps its meaning across subdivision levels.
    pub lambda_lap: f32,
    /// Offset magnitude tether, also a per-vertex mean.
    pub lambda_mag: f32,
    pub outer_iters: usize,
    pub cg_iters: usize,
    pub boundary_downweight: f32,
}

impl Default for FreeformParams {
    fn default() -> Self {
        FreeformParams {
            lambda_lap: 50.0,
            lambda_mag: 1.0,
            outer_iters: 6,
            cg_iters: 400,
            boundary_downweight: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FreeformFit {
    /// Offsets in T-pose on the subdivided topology (inverse-skinned).
    pub offsets: Vec<Vec3>,
    /// The same offsets in posed space, as optimized.
    pub posed_offsets: Vec<Vec3>,
    /// Point-to-surface RMS of the refined surface, meters.
    pub rms: f32,
}

fn conjugate_gradient(
    apply: impl Fn(&[Vec3]) -> Vec<Vec3>,
    b: &[Vec3],
    max_iters: usize,
) -> Vec<Vec3> {
    let dot = |a: &[Vec3], b: &[Vec3]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.dot(y) as f64)
            .sum::<f64>()
    };
    let mut x = vec![Vec3::zeros(); b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let b_norm = rs.sqrt().max(1e-30);
    for _ in 0..max_iters {
        if rs.sqrt() / b_norm < 1e-10 {
            break;
        }
        let ap = apply(&p);
        let alpha = rs / dot(&p, &ap).max(1e-30);
        for i in 0..x.len() {
            x[i] += p[i] * alpha as f32;
            r[i] -= ap[i] * alpha as f32;
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs.max(1e-30);
        for i in 0..p.len() {
            p[i] = r[i] + p[i] * beta as f32;
        }
        rs = rs_new;
    }
    x
}

/// Per-vertex offset refinement on the subdivided posed mesh, then inverse
/// LBS back to T-pose. The normal system ((W + lambda_mag/V) I +
/// lambda_lap/V LtL) o = W (q - v) is solved by conjugate gradients with
/// ICP correspondence refreshes in between.
pub fn fit_freeform(
    model: &BodyModel,
    pose: &Pose,
    beta: &ShapeParams,
    scan: &SurfaceBvh,
    params: &FreeformParams,
) -> Result<FreeformFit> {
    let sub = crate::body::subdivide_model(model)?;
    let t_vertices = sub.shape_mesh(beta).vertices;
    let posed_smooth = sub.pose_vertices(&t_vertices, beta, pose)?;
    let lap = uniform_laplacian(&sub.template);
    let v_count = posed_smooth.len();
    let mag = params.lambda_mag / v_count as f32;
    let smooth = params.lambda_lap / v_count as f32;

    let mut offsets = vec![Vec3::zeros(); v_count];
    for _ in 0..params.outer_iters {
        let mut rhs = Vec::with_capacity(v_count);
        let mut weights = Vec::with_capacity(v_count);
        for (v, o) in posed_smooth.iter().zip(&offsets) {
            let hit = scan.closest(v + o);
            let w = if hit.near_boundary {
                params.boundary_downweight
            } else {
                1.0
            };
            rhs.push((hit.point - v) * w);
            weights.push(w);
        }
        let apply = |x: &[Vec3]| -> Vec<Vec3> {
            let lx = lap.apply_vec3(x);
            let ltlx = lap.apply_transpose_vec3(&lx);
            x.iter()
                .zip(&ltlx)
                .zip(&weights)
                .map(|((xi, li), &w)| xi * (w + mag) + li * smooth)
                .collect()
        };
        let next = conjugate_gradient(apply, &rhs, params.cg_iters);
        let moved = next
            .iter()
            .zip(&offsets)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f32, f32::max);
        offsets = next;
        if moved < 1e-6 {
            break;
        }
    }

    // Inverse LBS per vertex: the blended linear part maps T-pose
    // directions to posed directions, so its inverse carries the fitted
    // offsets home. Re-posing then reproduces posed + offset exactly.
    let transforms = sub.pose_joint_transforms(beta, pose)?;
    let k = sub.n_joints();
    let mut unposed = Vec::with_capacity(v_count);
    for (vi, o) in offsets.iter().enumerate() {
        let row = &sub.skin_weights[vi * k..(vi + 1) * k];
        let (a, _) = blend_transforms(row, &transforms);
        let inv = a
            .cast::<f64>()
            .try_inverse()
            .unwrap_or_else(nalgebra::Matrix3::identity);
        let d = inv * o.cast::<f64>();
        unposed.push(Vec3::new(d.x as f32, d.y as f32, d.z as f32));
    }

    let mut sum_sq = 0.0f64;
    for (v, o) in posed_smooth.iter().zip(&offsets) {
        let hit = scan.closest(v + o);
        sum_sq += (hit.distance as f64).powi(2);
    }
    Ok(FreeformFit {
        offsets: unposed,
        posed_offsets: offsets,
        rms: (sum_sq / v_count as f64).sqrt() as f32,
    })
}

pub const MAX_OFFSET: f32 = 0.15;
pub const RMS_GATE: f32 = 8e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityReport {
    /// Final point-to-surface RMS, meters.
    pub residual_rms: f32,
    pub max_offset: f32,
    pub clamped_offsets: usize,
    pub beta_clamped: bool,
    pub accepted: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub beta: ShapeParams,
    pub pose: Pose,
    /// T-pose offsets on the subdivided topology, meters.
    pub offsets: Vec<Vec3>,
    pub report: QualityReport,
}

/// Runs the staged pipeline: triangulate, pose, shape, free-form. The pose
/// stage is refined once with the fitted shape so the skeleton the shape
/// stage assumed matches the one the offsets are skinned with. Instead of
/// manual curation there is an automatic gate: registrations with residual
/// RMS over 8 mm or clamped offsets are marked rejected.
pub fn register(
    model: &BodyModel,
    scan: &Scan,
    obs: &LandmarkObservations,
) -> Result<Registration> {
    scan.validate_for_registration()?;
    if obs.views.is_empty() {
        return Err(Error::Registration("no landmark observations".into()));
    }
    let bvh = SurfaceBvh::build(&scan.mesh)?;
    let joints = triangulate_landmarks(obs)?;

    let pose0 = fit_pose(model, &joints)?;
    let shape0 = fit_shape(model, &pose0, &bvh, &ShapeFitParams::default())?;
    let pose = fit_pose_with_shape(model, &shape0.beta, &joints)?;
    let shape = fit_shape(model, &pose, &bvh, &ShapeFitParams::default())?;
    let freeform = fit_freeform(model, &pose, &shape.beta, &bvh, &FreeformParams::default())?;

    let mut offsets = freeform.offsets;
    let mut clamped_offsets = 0usize;
    let mut max_offset = 0.0f32;
    for o in &mut offsets {
        let n = o.norm();
        if n > MAX_OFFSET {
            *o *= MAX_OFFSET / n;
            clamped_offsets += 1;
        }
        max_offset = max_offset.max(o.norm());
    }

    let mut reason = None;
    if freeform.rms > RMS_GATE {
        reason = Some(format!(
            "residual RMS {:.4} m exceeds {RMS_GATE} m",
            freeform.rms
        ));
    } else if clamped_offsets > 0 {
        reason = Some(format!("{clamped_offsets} offsets hit the 0.15 m clamp"));
    }
    let report = QualityReport {
        residual_rms: freeform.rms,
        max_offset,
        clamped_offsets,
        beta_clamped: shape.clamped,
        accepted: reason.is_none(),
        reason,
    };
    Ok(Registration {
        beta: shape.beta,
        pose,
        offsets,
        report,
    })
}

/// Evenly spaced azimuth ring of inward-looking cameras, the usual capture
/// rig for landmark observations.
pub fn ring_cameras(count: usize, target: Vec3, dist: f32, focal: f32) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let a = std::f32::consts::TAU * i as f32 / count as f32;
            // Slight elevation so the up vector never degenerates.
            let pos = target + Vec3::new(dist * a.sin(), 0.2, dist * a.cos());
            Camera::look_at(pos, target, Vec3::new(0.0, 1.0, 0.0), focal, 1024, 1024).unwrap()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{generate_stub_model, joint, subdivide_model};
    use crate::mesh::{subdivide, vertex_normals};
    use crate::synth::{make_wardrobe, pose_bank, WardrobeStyle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stub() -> BodyModel {
        generate_stub_model(7, 664).unwrap()
    }

    #[test]
    fn lm_cost_trace_is_monotone() {
        // Quartic bowl with a bad start.
        let result = levenberg_marquardt(&[3.0, -2.0], 50, 1e-10, |p| {
            vec![p[0] * p[0] - 1.0, p[1] + 0.5, 0.3 * (p[0] - 1.0) * p[1]]
        });
        for w in result.cost_trace.windows(2) {
            assert!(w[1] <= w[0], "cost rose from {} to {}", w[0], w[1]);
        }
        assert!(result.cost < 1e-4);
    }

    #[test]
    fn noiseless_triangulation_recovers_point() {
        let p = Vec3::new(0.21, 1.37, -0.06);
        let cams = ring_cameras(4, Vec3::new(0.0, 1.0, 0.0), 2.8, 900.0);
        let obs = observe_landmarks(&[p], &cams);
        let tri = triangulate_landmarks(&obs).unwrap();
        assert!(tri[0].valid);
        assert!((tri[0].position - p).norm() < 1e-5, "{}", (tri[0].position - p).norm());
    }

    #[test]
    fn single_view_joint_is_invalid() {
        let p = Vec3::new(0.0, 1.0, 0.0);
        let q = Vec3::new(0.1, 1.2, 0.0);
        let cams = ring_cameras(2, Vec3::new(0.0, 1.0, 0.0), 2.5, 800.0);
        let mut obs = observe_landmarks(&[p, q], &cams);
        // Joint 1 keeps only one sighting.
        obs.views[1].keypoints.retain(|k| k.joint != 1);
        let tri = triangulate_landmarks(&obs).unwrap();
        assert!(tri[0].valid);
        assert!(!tri[1].valid);

        // And with every joint starved, the call errors.
        let mut starved = observe_landmarks(&[p], &cams);
        starved.views.truncate(1);
        assert!(triangulate_landmarks(&starved).is_err());
    }

    #[test]
    fn noisy_triangulation_median_error_under_2cm() {
        let p = Vec3::new(0.1, 1.1, 0.2);
        let cams = ring_cameras(4, p, 3.0, 800.0);
        let clean = observe_landmarks(&[p], &cams);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut errors = Vec::with_capacity(100);
        for _ in 0..100 {
            let mut noisy = clean.clone();
            for view in &mut noisy.views {
                for k in &mut view.keypoints {
                    let (u1, u2): (f32, f32) = (rng.gen_range(1e-7..1.0), rng.gen());
                    let mag = (-2.0 * u1.ln()).sqrt();
                    k.x += mag * (std::f32::consts::TAU * u2).cos();
                    k.y += mag * (std::f32::consts::TAU * u2).sin();
                }
            }
            let tri = triangulate_landmarks(&noisy).unwrap();
            errors.push((tri[0].position - p).norm());
        }
        errors.sort_by(f32::total_cmp);
        let median = errors[50];
        assert!(median < 0.02, "median error {median}");
    }

    #[test]
    fn pose_fit_recovers_known_pose_joints() {
        let m = stub();
        let mut pose = pose_bank(m.n_joints())[1].clone();
        pose.root_translation = Vec3::new(0.1, -0.05, 0.2);
        let targets: Vec<TriangulatedJoint> = m
            .posed_joints(&ShapeParams::zeros(), &pose)
            .unwrap()
            .iter()
            .map(|&position| TriangulatedJoint {
                position,
                confidence: 1.0,
                valid: true,
            })
            .collect();
        let fitted = fit_pose(&m, &targets).unwrap();
        let recovered = m.posed_joints(&ShapeParams::zeros(), &fitted).unwrap();
        for (r, t) in recovered.iter().zip(&targets) {
            assert!(
                (r - t.position).norm() < 1e-3,
                "joint off by {}",
                (r - t.position).norm()
            );
        }
    }

    #[test]
    fn t_pose_targets_give_near_zero_rotations() {
        let m = stub();
        let targets: Vec<TriangulatedJoint> = m
            .posed_joints(&ShapeParams::zeros(), &Pose::identity(m.n_joints()))
            .unwrap()
            .iter()
            .map(|&position| TriangulatedJoint {
                position,
                confidence: 1.0,
                valid: true,
            })
            .collect();
        let fitted = fit_pose(&m, &targets).unwrap();
        let norm: f32 = fitted
            .joint_rotations
            .iter()
            .map(|r| r.norm_squared())
            .sum::<f32>()
            .sqrt();
        assert!(norm < 1e-2, "rotation norm {norm}");
    }

    #[test]
    fn pose_fit_is_equivariant_under_rigid_motion() {
        let m = stub();
        let pose = pose_bank(m.n_joints())[1].clone();
        let joints = m.posed_joints(&ShapeParams::zeros(), &pose).unwrap();
        let as_targets = |pts: &[Vec3]| -> Vec<TriangulatedJoint> {
            pts.iter()
                .map(|&position| TriangulatedJoint {
                    position,
                    confidence: 1.0,
                    valid: true,
                })
                .collect()
        };

        let base = fit_pose(&m, &as_targets(&joints)).unwrap();

        // Pure translation: same rotations, shifted root.
        let shift = Vec3::new(0.3, 0.1, -0.2);
        let moved: Vec<Vec3> = joints.iter().map(|j| j + shift).collect();
        let shifted = fit_pose(&m, &as_targets(&moved)).unwrap();
        for (a, b) in base.joint_rotations.iter().zip(&shifted.joint_rotations) {
            assert!((a - b).norm() < 1e-2);
        }
        assert!((shifted.root_translation - base.root_translation - shift).norm() < 1e-3);

        // Rotation about y: non-root rotations unchanged, joints reproduced.
        let angle = 0.5f32;
        let rot = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), angle).into_inner();
        let turned: Vec<Vec3> = joints.iter().map(|j| rot * j).collect();
        let fitted = fit_pose(&m, &as_targets(&turned)).unwrap();
        for (j, (a, b)) in base
            .joint_rotations
            .iter()
            .zip(&fitted.joint_rotations)
            .enumerate()
        {
            if j == joint::PELVIS {
                continue;
            }
            assert!((a - b).norm() < 2e-2, "joint {j} rotation changed");
        }
        let recovered = m.posed_joints(&ShapeParams::zeros(), &fitted).unwrap();
        for (r, t) in recovered.iter().zip(&turned) {
            assert!((r - t).norm() < 1e-3);
        }
    }

    #[test]
    fn shape_fit_recovers_known_beta() {
        let m = stub();
        let mut beta = ShapeParams::zeros();
        beta.0[0] = 0.8;
        beta.0[2] = -0.6;
        beta.0[5] = 0.4;
        beta.0[8] = -0.3;
        let pose = pose_bank(m.n_joints())[0].clone();
        // Subdivided so the scan clears the 1000-vertex floor and the
        // nearest-surface field is smooth.
        let sub = subdivide_model(&m).unwrap();
        let scan_mesh = {
            let mut mesh = sub.shape_mesh(&beta);
            mesh.vertices = sub.pose_vertices(&mesh.vertices, &beta, &pose).unwrap();
            mesh
        };
        let bvh = SurfaceBvh::build(&scan_mesh).unwrap();
        let fit = fit_shape(&m, &pose, &bvh, &ShapeFitParams::default()).unwrap();
        let err: f32 = fit
            .beta
            .0
            .iter()
            .zip(&beta.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt();
        assert!(
            err < 0.1,
            "beta error {err} at surface rms {}, got {:?}",
            fit.rms,
            fit.beta.0
        );
        assert!(!fit.clamped);
    }

    fn shell_scan(m: &BodyModel, pose: &Pose, offset: f32) -> SurfaceBvh {
        // Two extra subdivision rounds keep the chordal sag of the offset
        // surface well under a millimeter; on a coarse shell even a perfect
        // fit would sit "outside" the flat facets over convex limbs.
        let sub = subdivide_model(m).unwrap();
        let mut mesh = sub.shape_mesh(&ShapeParams::zeros());
        mesh.vertices = sub
            .pose_vertices(&mesh.vertices, &ShapeParams::zeros(), pose)
            .unwrap();
        let mut fine = subdivide(&subdivide(&mesh).unwrap()).unwrap();
        let normals = vertex_normals(&fine);
        for (v, n) in fine.vertices.iter_mut().zip(&normals) {
            *v += n * offset;
        }
        SurfaceBvh::build(&fine).unwrap()
    }

    #[test]
    fn asymmetric_fit_stays_inside_clothing_shell() {
        let m = stub();
        let pose = Pose::identity(m.n_joints());
        let bvh = shell_scan(&m, &pose, 0.02);

        let asym = fit_shape(&m, &pose, &bvh, &ShapeFitParams::default()).unwrap();
        assert!(
            asym.inside_fraction >= 0.95,
            "only {} inside at beta {:?} rms {}",
            asym.inside_fraction,
            asym.beta.0,
            asym.rms
        );

        let sym = fit_shape(
            &m,
            &pose,
            &bvh,
            &ShapeFitParams {
                w_out: 1.0,
                ..ShapeFitParams::default()
            },
        )
        .unwrap();
        assert!(
            sym.inside_fraction < asym.inside_fraction,
            "symmetric {} vs asymmetric {}",
            sym.inside_fraction,
            asym.inside_fraction
        );
    }

    #[test]
    fn freeform_zero_residual_gives_zero_offsets() {
        let m = stub();
        let pose = pose_bank(m.n_joints())[0].clone();
        let beta = ShapeParams::zeros();
        let sub = subdivide_model(&m).unwrap();
        let mut mesh = sub.shape_mesh(&beta);
        mesh.vertices = sub.pose_vertices(&mesh.vertices, &beta, &pose).unwrap();
        let bvh = SurfaceBvh::build(&mesh).unwrap();
        let fit = fit_freeform(&m, &pose, &beta, &bvh, &FreeformParams::default()).unwrap();
        let rms = (fit
            .posed_offsets
            .iter()
            .map(|o| o.norm_squared() as f64)
            .sum::<f64>()
            / fit.posed_offsets.len() as f64)
            .sqrt();
        assert!(rms < 1e-3, "offset rms {rms}");
    }

    fn sinusoid_field(mesh: &Mesh) -> Vec<Vec3> {
        let normals = vertex_normals(mesh);
        mesh.vertices
            .iter()
            .zip(&normals)
            .map(|(p, n)| n * (0.01 * (std::f32::consts::TAU * p.y / 0.1).sin()))
            .collect()
    }

    #[test]
    fn freeform_recovers_sinusoidal_detail() {
        let m = stub();
        let pose = pose_bank(m.n_joints())[0].clone();
        let beta = ShapeParams::zeros();
        let sub = subdivide_model(&m).unwrap();
        let smooth = sub.shape_mesh(&beta);
        let gt = sinusoid_field(&smooth);
        let mut mesh = smooth.clone();
        for (v, d) in mesh.vertices.iter_mut().zip(&gt) {
            *v += d;
        }
        mesh.vertices = sub.pose_vertices(&mesh.vertices, &beta, &pose).unwrap();
        let bvh = SurfaceBvh::build(&mesh).unwrap();
        let fit = fit_freeform(&m, &pose, &beta, &bvh, &FreeformParams::default()).unwrap();

        // Pearson correlation between recovered and ground-truth fields.
        let flat = |v: &[Vec3]| -> Vec<f64> {
            v.iter()
                .flat_map(|o| [o.x as f64, o.y as f64, o.z as f64])
                .collect()
        };
        let (a, b) = (flat(&fit.offsets), flat(&gt));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (x, y) in a.iter().zip(&b) {
            num += (x - ma) * (y - mb);
            da += (x - ma) * (x - ma);
            db += (y - mb) * (y - mb);
        }
        let corr = num / (da.sqrt() * db.sqrt()).max(1e-30);
        assert!(corr > 0.9, "correlation {corr}");

        // Inverse-LBS consistency: re-posing the unposed offsets lands on
        // the posed fitted surface.
        let t_detailed: Vec<Vec3> = sub
            .shape_mesh(&beta)
            .vertices
            .iter()
            .zip(&fit.offsets)
            .map(|(p, d)| p + d)
            .collect();
        let reposed = sub.pose_vertices(&t_detailed, &beta, &pose).unwrap();
        let posed_smooth = sub
            .pose_vertices(&sub.shape_mesh(&beta).vertices, &beta, &pose)
            .unwrap();
        let mut worst = 0.0f32;
        for ((r, v), o) in reposed.iter().zip(&posed_smooth).zip(&fit.posed_offsets) {
            worst = worst.max((r - (v + o)).norm());
        }
        assert!(worst < 1e-6, "repose consistency {worst}");
    }

    #[test]
    fn raising_lambda_lap_smooths_monotonically() {
        let m = stub();
        let pose = Pose::identity(m.n_joints());
        let beta = ShapeParams::zeros();
        let sub = subdivide_model(&m).unwrap();
        let smooth = sub.shape_mesh(&beta);
        let gt = sinusoid_field(&smooth);
        let mut mesh = smooth.clone();
        for (v, d) in mesh.vertices.iter_mut().zip(&gt) {
            *v += d;
        }
        let bvh = SurfaceBvh::build(&mesh).unwrap();
        let lap = uniform_laplacian(&sub.template);

        let mut last = f64::INFINITY;
        for lambda in [5.0, 50.0, 500.0, 5000.0] {
            let fit = fit_freeform(
                &m,
                &pose,
                &beta,
                &bvh,
                &FreeformParams {
                    lambda_lap: lambda,
                    ..FreeformParams::default()
                },
            )
            .unwrap();
            let lo = lap.apply_vec3(&fit.posed_offsets);
            let norm = lo.iter().map(|v| v.norm_squared() as f64).sum::<f64>().sqrt();
            assert!(norm < last, "lambda {lambda}: {norm} !< {last}");
            last = norm;
        }
    }

    #[test]
    fn observations_json_round_trip() {
        let cams = ring_cameras(2, Vec3::new(0.0, 1.0, 0.0), 2.5, 700.0);
        let obs = observe_landmarks(&[Vec3::new(0.1, 1.3, 0.0), Vec3::new(-0.2, 0.6, 0.1)], &cams);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.json");
        obs.save_json(&path).unwrap();
        let loaded = LandmarkObservations::load_json(&path).unwrap();
        assert_eq!(loaded.views.len(), obs.views.len());
        for (a, b) in loaded.views.iter().zip(&obs.views) {
            assert_eq!(a.keypoints, b.keypoints);
            assert!((a.camera.rotation - b.camera.rotation).norm() < 1e-6);
            assert!((a.camera.translation - b.camera.translation).norm() < 1e-6);
        }
    }

    #[test]
    fn register_end_to_end_round_trips_displacement_maps() {
        let m = stub();
        let atlas_res = 256;
        let wardrobe = make_wardrobe(&m, 31, &WardrobeStyle::default(), atlas_res).unwrap();
        let mut beta = ShapeParams::zeros();
        beta.0[1] = 0.7;
        beta.0[4] = -0.5;
        beta.0[7] = 0.4;
        let pose = pose_bank(m.n_joints())[1].clone();

        let sub = subdivide_model(&m).unwrap();
        let scan_mesh = {
            let mut mesh = subdivide(&m.shape_mesh(&beta)).unwrap();
            for (v, d) in mesh.vertices.iter_mut().zip(&wardrobe.displacements) {
                *v += d;
            }
            mesh.vertices = sub.pose_vertices(&mesh.vertices, &beta, &pose).unwrap();
            mesh
        };
        let scan = Scan::new(scan_mesh, None).unwrap();

        let joints = m.posed_joints(&beta, &pose).unwrap();
        let cams = ring_cameras(4, Vec3::new(0.0, 0.9, 0.0), 2.8, 800.0);
        let obs = observe_landmarks(&joints, &cams);

        let reg = register(&m, &scan, &obs).unwrap();
        assert!(
            reg.report.accepted,
            "rejected: {:?} rms {}",
            reg.report.reason, reg.report.residual_rms
        );

        // Round trip the registration through the displacement-map
        // representation: bake the registered detail, apply the maps back
        // onto the fitted body, repose, and compare against the scan. The
        // maps are compared in geometry rather than pixel space because the
        // fitted beta legitimately differs from the scan's under clothing
        // (the asymmetric fit parks the body inside the garments) and the
        // offsets absorb exactly that difference.
        let mut detailed = sub.shape_mesh(&reg.beta);
        for (v, d) in detailed.vertices.iter_mut().zip(&reg.offsets) {
            *v += d;
        }
        let lookup = crate::uv::build_uv_lookup(&detailed, atlas_res).unwrap();
        let (maps, _) =
            crate::uv::bake_shape_maps(&lookup, &m, &reg.beta, &detailed, MAX_OFFSET).unwrap();
        assert!(
            maps.displacement_map
                .mask
                .iter()
                .filter(|&&v| v > 0.5)
                .count()
                > 10_000
        );

        // Vertex-to-surface: vertex correspondence is not preserved by
        // surface fitting (vertices slide tangentially), the surface is.
        let rebuilt = crate::uv::apply_shape_maps(&m, &reg.beta, &maps, 1).unwrap();
        let posed = sub
            .pose_vertices(&rebuilt.mesh.vertices, &reg.beta, &reg.pose)
            .unwrap();
        let scan_bvh = SurfaceBvh::build(&scan.mesh).unwrap();
        let mut sum_sq = 0.0f64;
        for p in &posed {
            sum_sq += (scan_bvh.closest(*p).distance as f64).powi(2);
        }
        let rms = (sum_sq / posed.len() as f64).sqrt();
        assert!(rms < 3e-3, "displacement map round trip RMS {rms}");

        // Determinism of the whole pipeline.
        let again = register(&m, &scan, &obs).unwrap();
        assert_eq!(reg.beta.0, again.beta.0);
        assert_eq!(reg.offsets, again.offsets);
    }

    #[test]
    fn register_rejects_missing_observations() {
        let m = stub();
        let sub = subdivide_model(&m).unwrap();
        let scan = Scan::new(sub.template.clone(), None).unwrap();
        let err = register(&m, &scan, &LandmarkObservations::default()).unwrap_err();
        assert!(err.to_string().contains("observation"));

        // Too-small scans are rejected before any fitting.
        let small = Scan::new(m.template.clone(), None).unwrap();
        let cams = ring_cameras(2, Vec3::new(0.0, 1.0, 0.0), 2.5, 700.0);
        let obs = observe_landmarks(&[Vec3::new(0.0, 1.0, 0.0)], &cams);
        assert!(register(&m, &small, &obs).is_err());
    }
}

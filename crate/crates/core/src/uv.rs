//! UV-space machinery: per-pixel barycentric lookup tables, attribute
//! baking, and shape-map (normal + vector displacement) baking/application.
//!
//! Pixel convention throughout: pixel (x, y) covers the UV square
//! [x/res, (x+1)/res] x [y/res, (y+1)/res] with its center at
//! ((x+0.5)/res, (y+0.5)/res); the v axis runs with the row index. This
//! matches [`FloatMap::sample_bilinear`], so baking and sampling agree.

use crate::fmap::FloatMap;
use crate::mesh::{subdivide, vertex_normals, Mesh};
use crate::{BodyModel, Error, Result, ShapeParams, Vec2, Vec3};

/// Hard ceiling on baked displacement magnitude in meters; offsets beyond
/// it indicate registration failure and are clamped with a warning count.
pub const DEFAULT_MAX_DISPLACEMENT: f32 = 0.15;

/// Maps every atlas pixel to a surface point of one mesh.
///
/// A pixel is either unoccupied (`face == u32::MAX`) or stores the covering
/// face and the barycentric weights of its center in that face's UV
/// triangle.
#[derive(Debug, Clone)]
pub struct UvLookup {
    pub resolution: usize,
    pub face: Vec<u32>,
    pub bary: Vec<[f32; 3]>,
}

impl UvLookup {
    #[inline]
    pub fn occupied(&self, x: usize, y: usize) -> bool {
        self.face[y * self.resolution + x] != u32::MAX
    }

    pub fn occupied_fraction(&self) -> f32 {
        self.face.iter().filter(|&&f| f != u32::MAX).count() as f32 / self.face.len() as f32
    }
}

/// A pixel center must sit this far inside a UV triangle (in barycentric
/// units) before the face claims it exclusively; two such claims mean the
/// charts genuinely overlap. Shallower hits happen along shared chart-
/// internal edges and resolve by largest minimum weight, then face order.
const INTERIOR_MARGIN: f32 = 1e-3;

/// Rasterizes the 2D UV mesh at pixel centers.
///
/// Deterministic for any face order: contested edge pixels go to the face
/// covering the pixel center deepest, with the smaller index on exact ties.
pub fn build_uv_lookup(mesh: &Mesh, resolution: usize) -> Result<UvLookup> {
    if !(64..=2048).contains(&resolution) {
        return Err(Error::Atlas(format!(
            "resolution {resolution} outside 64..=2048"
        )));
    }
    mesh.validate()?;
    if mesh.face_uvs.is_empty() {
        return Err(Error::Atlas("mesh has no UV atlas".into()));
    }

    let res = resolution;
    let n = res * res;
    let mut face = vec![u32::MAX; n];
    let mut bary = vec![[0.0f32; 3]; n];
    let mut min_w = vec![f32::NEG_INFINITY; n];

    for (fi, t) in mesh.face_uvs.iter().enumerate() {
        let a = mesh.uvs[t[0] as usize];
        let b = mesh.uvs[t[1] as usize];
        let c = mesh.uvs[t[2] as usize];
        let area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        if area.abs() < 1e-12 {
            continue;
        }
        let lo_x = a.x.min(b.x).min(c.x);
        let hi_x = a.x.max(b.x).max(c.x);
        let lo_y = a.y.min(b.y).min(c.y);
        let hi_y = a.y.max(b.y).max(c.y);
        let px0 = ((lo_x * res as f32 - 0.5).floor().max(0.0)) as usize;
        let px1 = ((hi_x * res as f32 - 0.5).ceil().min((res - 1) as f32)) as usize;
        let py0 = ((lo_y * res as f32 - 0.5).floor().max(0.0)) as usize;
        let py1 = ((hi_y * res as f32 - 0.5).ceil().min((res - 1) as f32)) as usize;

        for py in py0..=py1 {
            for px in px0..=px1 {
                let p = Vec2::new((px as f32 + 0.5) / res as f32, (py as f32 + 0.5) / res as f32);
                let w0 = ((b.x - p.x) * (c.y - p.y) - (b.y - p.y) * (c.x - p.x)) / area;
                let w1 = ((c.x - p.x) * (a.y - p.y) - (c.y - p.y) * (a.x - p.x)) / area;
                let w2 = 1.0 - w0 - w1;
                let wm = w0.min(w1).min(w2);
                if wm < -1e-6 {
                    continue;
                }
                let idx = py * res + px;
                let prev = face[idx];
                if prev == u32::MAX {
                    face[idx] = fi as u32;
                    bary[idx] = [w0, w1, w2];
                    min_w[idx] = wm;
                    continue;
                }
                if wm > INTERIOR_MARGIN && min_w[idx] > INTERIOR_MARGIN {
                    return Err(Error::Atlas(format!(
                        "charts overlap: pixel ({px},{py}) center claimed by faces {prev} and {fi}"
                    )));
                }
                if wm > min_w[idx] || (wm == min_w[idx] && (fi as u32) < prev) {
                    face[idx] = fi as u32;
                    bary[idx] = [w0, w1, w2];
                    min_w[idx] = wm;
                }
            }
        }
    }

    Ok(UvLookup {
        resolution: res,
        face,
        bary,
    })
}

/// Interpolates per-vertex values into the atlas: occupied pixel =
/// sum(w_i * value[face vertex i]). `values` is flat, `channels` per vertex.
pub fn bake_attribute(
    lookup: &UvLookup,
    mesh: &Mesh,
    values: &[f32],
    channels: usize,
) -> Result<FloatMap> {
    if values.len() != mesh.vertex_count() * channels {
        return Err(Error::Atlas(format!(
            "value buffer holds {} floats, expected {} x {}",
            values.len(),
            mesh.vertex_count(),
            channels
        )));
    }
    let res = lookup.resolution;
    let mut out = FloatMap::new(res, res, channels);
    for y in 0..res {
        for x in 0..res {
            let idx = y * res + x;
            let fi = lookup.face[idx];
            if fi == u32::MAX {
                continue;
            }
            let f = mesh.faces[fi as usize];
            let w = lookup.bary[idx];
            let base = idx * channels;
            for c in 0..channels {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += w[k] * values[f[k] as usize * channels + c];
                }
                out.data[base + c] = acc;
            }
            out.mask[idx] = 1.0;
        }
    }
    Ok(out)
}

/// Convenience wrapper for 3D per-vertex fields.
pub fn bake_vec3(lookup: &UvLookup, mesh: &Mesh, values: &[Vec3]) -> Result<FloatMap> {
    let flat: Vec<f32> = values.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    bake_attribute(lookup, mesh, &flat, 3)
}

/// Atlas gutter that linearly extrapolates instead of copying.
///
/// Each empty pixel bordering an occupied one takes the unclamped
/// barycentric interpolation of a neighbor's rasterizing face, so a
/// per-vertex-linear field continues exactly across chart borders; a
/// constant-extension gutter would bias border samples by one texel of the
/// field's gradient. Gutter pixels inherit the source face, so later passes
/// still extrapolate from original chart planes.
fn extend_linear(
    map: &mut FloatMap,
    lookup: &UvLookup,
    mesh: &Mesh,
    values: &[f32],
    channels: usize,
    passes: usize,
) {
    let res = lookup.resolution;
    let mut src = lookup.face.clone();
    for _ in 0..passes {
        let snap_mask = map.mask.clone();
        let snap_src = src.clone();
        for y in 0..res {
            for x in 0..res {
                let idx = y * res + x;
                if snap_mask[idx] > 0.5 {
                    continue;
                }
                let p = Vec2::new((x as f32 + 0.5) / res as f32, (y as f32 + 0.5) / res as f32);
                // Deepest (least extrapolated) candidate face wins.
                let mut best: Option<(f32, u32, [f32; 3])> = None;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = x as i64 + dx;
                        let ny = y as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= res as i64 || ny >= res as i64 {
                            continue;
                        }
                        let n_idx = ny as usize * res + nx as usize;
                        if snap_mask[n_idx] <= 0.5 || snap_src[n_idx] == u32::MAX {
                            continue;
                        }
                        let fi = snap_src[n_idx];
                        let t = mesh.face_uvs[fi as usize];
                        let a = mesh.uvs[t[0] as usize];
                        let b = mesh.uvs[t[1] as usize];
                        let c = mesh.uvs[t[2] as usize];
                        let area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
                        if area.abs() < 1e-12 {
                            continue;
                        }
                        let w0 = ((b.x - p.x) * (c.y - p.y) - (b.y - p.y) * (c.x - p.x)) / area;
                        let w1 = ((c.x - p.x) * (a.y - p.y) - (c.y - p.y) * (a.x - p.x)) / area;
                        let w2 = 1.0 - w0 - w1;
                        let wm = w0.min(w1).min(w2);
                        if best.is_none() || wm > best.unwrap().0 {
                            best = Some((wm, fi, [w0, w1, w2]));
                        }
                    }
                }
                if let Some((_, fi, w)) = best {
                    let f = mesh.faces[fi as usize];
                    let base = idx * channels;
                    for c in 0..channels {
                        let mut acc = 0.0;
                        for k in 0..3 {
                            acc += w[k] * values[f[k] as usize * channels + c];
                        }
                        map.data[base + c] = acc;
                    }
                    map.mask[idx] = 1.0;
                    src[idx] = fi;
                }
            }
        }
    }
}

/// Detail stored as images in the shared atlas: per-pixel unit surface
/// normal and vector displacement, both in T-pose object space, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMaps {
    pub normal_map: FloatMap,
    pub displacement_map: FloatMap,
}

impl ShapeMaps {
    pub fn resolution(&self) -> usize {
        self.normal_map.width
    }

    /// Zero displacement and straight +z normals, fully occupied.
    pub fn neutral(resolution: usize) -> Self {
        ShapeMaps {
            normal_map: FloatMap::filled(resolution, resolution, &[0.0, 0.0, 1.0]),
            displacement_map: FloatMap::filled(resolution, resolution, &[0.0, 0.0, 0.0]),
        }
    }

    /// Writes `<stem>.normal.pfm` and `<stem>.disp.pfm` with mask sidecars.
    pub fn save(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        crate::fmap::save_pfm(dir.join(format!("{stem}.normal.pfm")), &self.normal_map)?;
        crate::fmap::save_pfm(dir.join(format!("{stem}.disp.pfm")), &self.displacement_map)
    }

    pub fn load(dir: &std::path::Path, stem: &str) -> Result<Self> {
        let normal_map = crate::fmap::load_pfm(dir.join(format!("{stem}.normal.pfm")))?;
        let displacement_map = crate::fmap::load_pfm(dir.join(format!("{stem}.disp.pfm")))?;
        if normal_map.width != displacement_map.width
            || normal_map.height != displacement_map.height
        {
            return Err(Error::InvalidMap(
                "normal and displacement maps disagree on size".into(),
            ));
        }
        Ok(ShapeMaps {
            normal_map,
            displacement_map,
        })
    }
}

/// Counters reported by [`bake_shape_maps`].
#[derive(Debug, Clone, Copy, Default)]
pub struct BakeStats {
    /// Vertices whose offset exceeded the clamp and were shortened.
    pub clamped_vertices: usize,
    /// Largest offset magnitude before clamping, meters.
    pub max_offset: f32,
}

/// Bakes the difference between a registered high-detail mesh and the
/// smooth shaped body into displacement and normal maps.
///
/// `hi_mesh` must be the base topology in T-pose, subdivided zero to two
/// times; the level is inferred from the vertex count. Offsets longer than
/// `max_displacement` are clamped and counted in the stats; interpolated
/// pixels are convex combinations of vertex offsets, so the clamp holds
/// pixelwise too.
pub fn bake_shape_maps(
    lookup: &UvLookup,
    base: &BodyModel,
    beta: &ShapeParams,
    hi_mesh: &Mesh,
    max_displacement: f32,
) -> Result<(ShapeMaps, BakeStats)> {
    let mut smooth = base.shape_mesh(beta);
    let mut level = 0;
    while smooth.vertex_count() != hi_mesh.vertex_count() && level < 3 {
        smooth = subdivide(&smooth)?;
        level += 1;
    }
    if smooth.vertex_count() != hi_mesh.vertex_count()
        || smooth.face_count() != hi_mesh.face_count()
    {
        return Err(Error::Atlas(format!(
            "high-detail mesh ({} vertices, {} faces) is not the base topology \
             subdivided 0..=2 times",
            hi_mesh.vertex_count(),
            hi_mesh.face_count()
        )));
    }

    let mut stats = BakeStats::default();
    let offsets: Vec<Vec3> = hi_mesh
        .vertices
        .iter()
        .zip(&smooth.vertices)
        .map(|(h, s)| {
            let d = h - s;
            let n = d.norm();
            stats.max_offset = stats.max_offset.max(n);
            if n > max_displacement {
                stats.clamped_vertices += 1;
                d * (max_displacement / n)
            } else {
                d
            }
        })
        .collect();
    let normals = vertex_normals(hi_mesh);

    let mut displacement_map = bake_vec3(lookup, hi_mesh, &offsets)?;
    let mut normal_map = bake_vec3(lookup, hi_mesh, &normals)?;
    // Two gutter passes keep bilinear lookups near chart borders and pole
    // wedges from landing on empty neighborhoods.
    let flat_offsets: Vec<f32> = offsets.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    let flat_normals: Vec<f32> = normals.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    extend_linear(&mut displacement_map, lookup, hi_mesh, &flat_offsets, 3, 2);
    extend_linear(&mut normal_map, lookup, hi_mesh, &flat_normals, 3, 2);
    // Extrapolation may overshoot in magnitude; the map never stores a
    // displacement larger than the largest clamped vertex offset.
    let cap = stats.max_offset.min(max_displacement);
    for i in 0..displacement_map.mask.len() {
        if displacement_map.mask[i] <= 0.5 {
            continue;
        }
        let d = &mut displacement_map.data[i * 3..i * 3 + 3];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if len > cap {
            let s = cap / len;
            d[0] *= s;
            d[1] *= s;
            d[2] *= s;
        }
    }
    for i in 0..normal_map.mask.len() {
        if normal_map.mask[i] <= 0.5 {
            continue;
        }
        let p = &mut normal_map.data[i * 3..i * 3 + 3];
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if n > 1e-6 {
            p[0] /= n;
            p[1] /= n;
            p[2] /= n;
        } else {
            p.copy_from_slice(&[0.0, 0.0, 1.0]);
        }
    }

    Ok((
        ShapeMaps {
            normal_map,
            displacement_map,
        },
        stats,
    ))
}

/// Smooth shaped mesh plus per-vertex detail sampled from maps.
#[derive(Debug, Clone)]
pub struct DetailedMesh {
    pub mesh: Mesh,
    /// Unit shading normals, one per vertex (sampled, falling back to the
    /// smooth surface normal where the maps are unoccupied).
    pub normals: Vec<Vec3>,
}

/// First UV coordinate assigned to each vertex, scanning faces in order.
/// Seam vertices have several UVs; any of them samples the same baked value
/// because baking is keyed on 3D vertex indices.
pub fn first_uv_per_vertex(mesh: &Mesh) -> Vec<Vec2> {
    let mut uv = vec![Vec2::new(-1.0, -1.0); mesh.vertex_count()];
    let mut found = vec![false; mesh.vertex_count()];
    for (f, t) in mesh.faces.iter().zip(&mesh.face_uvs) {
        for k in 0..3 {
            let vi = f[k] as usize;
            if !found[vi] {
                found[vi] = true;
                uv[vi] = mesh.uvs[t[k] as usize];
            }
        }
    }
    uv
}

/// Every distinct UV index owned by each vertex, in face-scan order.
/// Seam and pole vertices own several; sampling all of them and averaging
/// cancels the opposing half-pixel border biases of the adjacent charts.
pub fn uvs_per_vertex(mesh: &Mesh) -> Vec<Vec<u32>> {
    let mut owned: Vec<Vec<u32>> = vec![Vec::new(); mesh.vertex_count()];
    for (f, t) in mesh.faces.iter().zip(&mesh.face_uvs) {
        for k in 0..3 {
            let list = &mut owned[f[k] as usize];
            if !list.contains(&t[k]) {
                list.push(t[k]);
            }
        }
    }
    owned
}

/// Mask-weighted bilinear sample averaged over all the vertex's UVs.
pub fn sample_at_vertex(map: &FloatMap, mesh: &Mesh, owned: &[u32]) -> Option<Vec<f32>> {
    let mut acc = vec![0.0f32; map.channels];
    let mut hits = 0usize;
    for &ti in owned {
        let uv = mesh.uvs[ti as usize];
        if let Some(s) = map.sample_bilinear(uv.x, uv.y) {
            for (a, v) in acc.iter_mut().zip(&s) {
                *a += v;
            }
            hits += 1;
        }
    }
    if hits == 0 {
        return None;
    }
    for a in &mut acc {
        *a /= hits as f32;
    }
    Some(acc)
}

/// Displaces the (optionally subdivided) shaped body by the displacement
/// map and attaches sampled shading normals.
pub fn apply_shape_maps(
    base: &BodyModel,
    beta: &ShapeParams,
    maps: &ShapeMaps,
    subdivision_level: usize,
) -> Result<DetailedMesh> {
    if subdivision_level > 2 {
        return Err(Error::Atlas(format!(
            "subdivision level {subdivision_level} outside 0..=2"
        )));
    }
    let mut mesh = base.shape_mesh(beta);
    for _ in 0..subdivision_level {
        mesh = subdivide(&mesh)?;
    }
    let owned = uvs_per_vertex(&mesh);
    let smooth_normals = vertex_normals(&mesh);
    let mut offsets = vec![Vec3::zeros(); mesh.vertex_count()];
    let mut normals = smooth_normals.clone();
    for vi in 0..mesh.vertex_count() {
        if let Some(d) = sample_at_vertex(&maps.displacement_map, &mesh, &owned[vi]) {
            offsets[vi] = Vec3::new(d[0], d[1], d[2]);
        }
        if let Some(n) = sample_at_vertex(&maps.normal_map, &mesh, &owned[vi]) {
            let n = Vec3::new(n[0], n[1], n[2]);
            let len = n.norm();
            if len > 1e-6 {
                normals[vi] = n / len;
            }
        }
    }
    for (p, d) in mesh.vertices.iter_mut().zip(&offsets) {
        *p += d;
    }
    Ok(DetailedMesh { mesh, normals })
}

/// Fraction of mask-occupied pixels.
pub fn occupancy(map: &FloatMap) -> f32 {
    map.occupied_fraction()
}

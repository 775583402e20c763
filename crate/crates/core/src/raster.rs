//! Deterministic software rasterizer: pinhole projection, z-buffered
//! hidden-surface removal, perspective-correct interpolation, SH shading.
//!
//! Work splits over horizontal bands with independent z-buffers; per pixel
//! the winner is the smallest depth with face index as the tie-break, so
//! output is bit-identical for any band size or thread count.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::chart::PartChartTable;
use crate::fmap::FloatMap;
use crate::mesh::Mesh;
use crate::sh::{shade, SHLighting};
use crate::{Error, Result, Vec2, Vec3};

const BAND_ROWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlbedoMode {
    Uniform,
    VertexColors,
    Texture,
}

/// Where surface color comes from.
pub enum AlbedoSpec<'a> {
    Uniform(Vec3),
    /// One linear RGB color per mesh vertex.
    VertexColors(&'a [Vec3]),
    /// Sampled at the interpolated global UV; unoccupied texels fall back
    /// to mid gray.
    Texture(&'a FloatMap),
}

impl AlbedoSpec<'_> {
    fn mode(&self) -> AlbedoMode {
        match self {
            AlbedoSpec::Uniform(_) => AlbedoMode::Uniform,
            AlbedoSpec::VertexColors(_) => AlbedoMode::VertexColors,
            AlbedoSpec::Texture(_) => AlbedoMode::Texture,
        }
    }
}

/// Which passes to fill; depth always renders (it is the z-buffer).
#[derive(Debug, Clone, Copy)]
pub struct PassSet {
    pub color: bool,
    pub uv: bool,
    pub correspondence: bool,
}

impl Default for PassSet {
    fn default() -> Self {
        PassSet {
            color: true,
            uv: true,
            correspondence: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderPasses {
    /// Linear RGB; background black and unoccupied.
    pub color: FloatMap,
    /// View depth in meters; +inf on background.
    pub depth: FloatMap,
    /// Interpolated global UV of the surface.
    pub uv_pass: FloatMap,
    /// (part_id, u_part, v_part); part 0 = unmapped or background.
    pub correspondence: FloatMap,
    pub albedo_mode: AlbedoMode,
}

impl RenderPasses {
    /// Foreground = any pixel the z-buffer filled.
    pub fn foreground_count(&self) -> usize {
        self.depth.mask.iter().filter(|&&m| m > 0.5).count()
    }
}

struct BandBuffer {
    y0: usize,
    rows: usize,
    width: usize,
    z: Vec<f32>,
    face: Vec<u32>,
    weights: Vec<[f32; 3]>,
}

impl BandBuffer {
    fn new(y0: usize, rows: usize, width: usize) -> Self {
        BandBuffer {
            y0,
            rows,
            width,
            z: vec![f32::INFINITY; rows * width],
            face: vec![u32::MAX; rows * width],
            weights: vec![[0.0; 3]; rows * width],
        }
    }
}

/// Renders the mesh with per-vertex shading normals.
///
/// `normals` come from [`crate::mesh::vertex_normals`] for smooth bodies or
/// from an applied [`crate::uv::ShapeMaps`] for detailed ones. The
/// correspondence pass needs `table`.
pub fn rasterize(
    mesh: &Mesh,
    normals: &[Vec3],
    camera: &Camera,
    sh: &SHLighting,
    albedo: &AlbedoSpec,
    passes: PassSet,
    table: Option<&PartChartTable>,
) -> Result<RenderPasses> {
    camera.validate()?;
    if normals.len() != mesh.vertex_count() {
        return Err(Error::InvalidMesh(format!(
            "{} normals for {} vertices",
            normals.len(),
            mesh.vertex_count()
        )));
    }
    if let AlbedoSpec::VertexColors(c) = albedo {
        if c.len() != mesh.vertex_count() {
            return Err(Error::InvalidMesh(format!(
                "{} vertex colors for {} vertices",
                c.len(),
                mesh.vertex_count()
            )));
        }
    }
    if let AlbedoSpec::Texture(t) = albedo {
        if t.channels != 3 {
            return Err(Error::InvalidMap(format!(
                "albedo texture needs 3 channels, has {}",
                t.channels
            )));
        }
    }
    if passes.correspondence && table.is_none() {
        return Err(Error::Atlas(
            "correspondence pass requested without a part chart table".into(),
        ));
    }
    if !sh.is_finite() {
        return Err(Error::InvalidMap("lighting coefficients not finite".into()));
    }

    let (w, h) = (camera.width, camera.height);
    let projected: Vec<Option<(f32, f32, f32)>> =
        mesh.vertices.iter().map(|&p| camera.project(p)).collect();

    let n_bands = h.div_ceil(BAND_ROWS);
    let bands: Vec<BandBuffer> = (0..n_bands)
        .into_par_iter()
        .map(|bi| {
            let y0 = bi * BAND_ROWS;
            let rows = BAND_ROWS.min(h - y0);
            let mut band = BandBuffer::new(y0, rows, w);
            for (fi, f) in mesh.faces.iter().enumerate() {
                let (Some(a), Some(b), Some(c)) = (
                    projected[f[0] as usize],
                    projected[f[1] as usize],
                    projected[f[2] as usize],
                ) else {
                    continue;
                };
                fill_face(&mut band, fi as u32, a, b, c);
            }
            band
        })
        .collect();

    let mut out = RenderPasses {
        color: FloatMap::new(if passes.color { w } else { 0 }, if passes.color { h } else { 0 }, 3),
        depth: FloatMap::new(w, h, 1),
        uv_pass: FloatMap::new(if passes.uv { w } else { 0 }, if passes.uv { h } else { 0 }, 2),
        correspondence: FloatMap::new(
            if passes.correspondence { w } else { 0 },
            if passes.correspondence { h } else { 0 },
            3,
        ),
        albedo_mode: albedo.mode(),
    };
    out.depth.data.fill(f32::INFINITY);

    for band in &bands {
        for ry in 0..band.rows {
            let y = band.y0 + ry;
            for x in 0..w {
                let bidx = ry * band.width + x;
                let fi = band.face[bidx];
                if fi == u32::MAX {
                    continue;
                }
                let wgt = band.weights[bidx];
                let f = mesh.faces[fi as usize];
                let t = mesh.face_uvs[fi as usize];

                out.depth.set(x, y, &[band.z[bidx]]);

                let uv = {
                    let mut acc = Vec2::zeros();
                    for k in 0..3 {
                        acc += mesh.uvs[t[k] as usize] * wgt[k];
                    }
                    acc
                };
                if passes.uv {
                    out.uv_pass.set(x, y, &[uv.x, uv.y]);
                }
                if passes.color {
                    let mut n = Vec3::zeros();
                    for k in 0..3 {
                        n += normals[f[k] as usize] * wgt[k];
                    }
                    let len = n.norm();
                    if len > 1e-6 {
                        n /= len;
                    }
                    let base_color = match albedo {
                        AlbedoSpec::Uniform(c) => *c,
                        AlbedoSpec::VertexColors(cols) => {
                            let mut acc = Vec3::zeros();
                            for k in 0..3 {
                                acc += cols[f[k] as usize] * wgt[k];
                            }
                            acc
                        }
                        AlbedoSpec::Texture(tex) => match tex.sample_bilinear(uv.x, uv.y) {
                            Some(s) => Vec3::new(s[0], s[1], s[2]),
                            None => Vec3::new(0.5, 0.5, 0.5),
                        },
                    };
                    let c = shade(n, base_color, sh);
                    out.color.set(x, y, &[c.x, c.y, c.z]);
                }
                if passes.correspondence {
                    let px = match table.unwrap().locate(uv) {
                        Some((part, pu, pv)) => [part as f32, pu, pv],
                        None => [0.0, 0.0, 0.0],
                    };
                    out.correspondence.set(x, y, &px);
                }
            }
        }
    }
    Ok(out)
}

/// Rasterizes one face into a band buffer with screen-space barycentrics
/// and perspective-correct weights. Two-sided: either winding fills.
fn fill_face(
    band: &mut BandBuffer,
    fi: u32,
    a: (f32, f32, f32),
    b: (f32, f32, f32),
    c: (f32, f32, f32),
) {
    let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    if area.abs() < 1e-12 {
        return;
    }
    let w = band.width as f32;
    let lo_x = a.0.min(b.0).min(c.0).max(0.5);
    let hi_x = a.0.max(b.0).max(c.0).min(w - 0.5);
    if lo_x > hi_x {
        return;
    }
    let y_min = band.y0 as f32 + 0.5;
    let y_max = (band.y0 + band.rows - 1) as f32 + 0.5;
    let lo_y = a.1.min(b.1).min(c.1).max(y_min);
    let hi_y = a.1.max(b.1).max(c.1).min(y_max);
    if lo_y > hi_y {
        return;
    }
    let px0 = (lo_x - 0.5).floor() as usize;
    let px1 = (hi_x - 0.5).ceil() as usize;
    let py0 = (lo_y - 0.5).floor() as usize;
    let py1 = (hi_y - 0.5).ceil() as usize;

    for py in py0..=py1 {
        for px in px0..=px1.min(band.width - 1) {
            let p = (px as f32 + 0.5, py as f32 + 0.5);
            let l0 = ((b.0 - p.0) * (c.1 - p.1) - (b.1 - p.1) * (c.0 - p.0)) / area;
            let l1 = ((c.0 - p.0) * (a.1 - p.1) - (c.1 - p.1) * (a.0 - p.0)) / area;
            let l2 = 1.0 - l0 - l1;
            if l0 < -1e-6 || l1 < -1e-6 || l2 < -1e-6 {
                continue;
            }
            let zinv = l0 / a.2 + l1 / b.2 + l2 / c.2;
            if zinv <= 0.0 {
                continue;
            }
            let z = 1.0 / zinv;
            let bidx = (py - band.y0) * band.width + px;
            let better = z < band.z[bidx] || (z == band.z[bidx] && fi < band.face[bidx]);
            if !better {
                continue;
            }
            band.z[bidx] = z;
            band.face[bidx] = fi;
            band.weights[bidx] = [l0 / a.2 * z, l1 / b.2 * z, l2 / c.2 * z];
        }
    }
}

/// Boundary erosion + Gaussian UV jitter emulating an imperfect dense-
/// correspondence estimator. Zero noise reproduces the exact GT mapping.
#[derive(Debug, Clone, Copy)]
pub struct CorrNoise {
    /// Erosion passes: foreground pixels touching background (4-neighbor)
    /// are cleared, repeated this many times.
    pub erosion_px: usize,
    /// Std-dev of per-pixel Gaussian jitter on (u_part, v_part).
    pub jitter_sigma: f32,
    pub seed: u64,
}

/// Renders the per-pixel (part_id, u_part, v_part) image for a mesh, with
/// optional synthetic estimator noise. Rendering the naked shaped mesh
/// (zero displacement maps) gives the pose-only mapping variant; the
/// detailed mesh gives the scan-accurate variant.
pub fn synth_correspondence(
    mesh: &Mesh,
    normals: &[Vec3],
    camera: &Camera,
    table: &PartChartTable,
    noise: Option<CorrNoise>,
) -> Result<FloatMap> {
    let passes = rasterize(
        mesh,
        normals,
        camera,
        &SHLighting::black(),
        &AlbedoSpec::Uniform(Vec3::new(1.0, 1.0, 1.0)),
        PassSet {
            color: false,
            uv: false,
            correspondence: true,
        },
        Some(table),
    )?;
    let mut corr = passes.correspondence;
    let Some(noise) = noise else {
        return Ok(corr);
    };

    let (w, h) = (corr.width, corr.height);
    for _ in 0..noise.erosion_px {
        let snapshot = corr.mask.clone();
        for y in 0..h {
            for x in 0..w {
                if snapshot[y * w + x] <= 0.5 {
                    continue;
                }
                let at_border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
                let eroded = at_border
                    || snapshot[y * w + x - 1] <= 0.5
                    || snapshot[y * w + x + 1] <= 0.5
                    || snapshot[(y - 1) * w + x] <= 0.5
                    || snapshot[(y + 1) * w + x] <= 0.5;
                if eroded {
                    corr.mask[y * w + x] = 0.0;
                    let base = (y * w + x) * 3;
                    corr.data[base..base + 3].copy_from_slice(&[0.0, 0.0, 0.0]);
                }
            }
        }
    }

    if noise.jitter_sigma > 0.0 {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise.seed);
        // Box-Muller pairs, drawn only at foreground pixels in row-major
        // order so the stream is reproducible.
        let gauss = |rng: &mut rand_chacha::ChaCha8Rng| -> (f32, f32) {
            let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
            let u2: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let r = (-2.0 * u1.ln()).sqrt();
            (r * u2.cos(), r * u2.sin())
        };
        for y in 0..h {
            for x in 0..w {
                if corr.mask_at(x, y) <= 0.5 {
                    continue;
                }
                let (g1, g2) = gauss(&mut rng);
                let px = corr.get_mut(x, y);
                if px[0] < 0.5 {
                    continue;
                }
                px[1] = (px[1] + noise.jitter_sigma * g1).clamp(0.0, 1.0);
                px[2] = (px[2] + noise.jitter_sigma * g2).clamp(0.0, 1.0);
            }
        }
    }
    Ok(corr)
}

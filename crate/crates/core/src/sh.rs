//! Spherical-harmonic diffuse lighting: 9 real SH coefficients per color
//! channel, stored already convolved with the clamped-cosine lobe so shading
//! a normal is one polynomial evaluation.
//!
//! Direction convention: +y is up; an equirectangular environment row maps
//! to polar angle from +y and column to azimuth around it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fmap::FloatMap;
use crate::{Error, Result, Vec3};

/// Cosine-lobe convolution factors per band (l = 0, 1, 2).
const A_BAND: [f32; 3] = [
    std::f32::consts::PI,
    2.0 * std::f32::consts::PI / 3.0,
    std::f32::consts::PI / 4.0,
];

const BAND_OF: [usize; 9] = [0, 1, 1, 1, 2, 2, 2, 2, 2];

/// Real SH basis, bands l <= 2, order (0,0) (1,-1) (1,0) (1,1) (2,-2)
/// (2,-1) (2,0) (2,1) (2,2). Constants are the usual 0.282095, 0.488603,
/// 1.092548, 0.315392, 0.546274 at full precision.
pub fn sh_basis(d: Vec3) -> [f32; 9] {
    let (x, y, z) = (d.x, d.y, d.z);
    [
        0.282_094_79,
        0.488_602_51 * y,
        0.488_602_51 * z,
        0.488_602_51 * x,
        1.092_548_4 * x * y,
        1.092_548_4 * y * z,
        0.315_391_57 * (3.0 * z * z - 1.0),
        1.092_548_4 * x * z,
        0.546_274_2 * (x * x - y * y),
    ]
}

/// Irradiance-convolved SH lighting: `coeffs[channel][i] = A_l * L_li`.
#[derive(Debug, Clone, PartialEq)]
pub struct SHLighting {
    pub coeffs: [[f32; 9]; 3],
}

impl SHLighting {
    pub fn black() -> Self {
        SHLighting {
            coeffs: [[0.0; 9]; 3],
        }
    }

    /// Raw radiance coefficients L_lm (deconvolved), for oracles and
    /// band-limited reconstruction.
    pub fn radiance_coeffs(&self) -> [[f32; 9]; 3] {
        let mut out = self.coeffs;
        for ch in &mut out {
            for (i, v) in ch.iter_mut().enumerate() {
                *v /= A_BAND[BAND_OF[i]];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().flatten().all(|v| v.is_finite())
    }
}

/// Direction of an equirectangular texel center.
fn equirect_dir(x: usize, y: usize, w: usize, h: usize) -> Vec3 {
    let theta = std::f32::consts::PI * (y as f32 + 0.5) / h as f32;
    let phi = std::f32::consts::TAU * (x as f32 + 0.5) / w as f32;
    let s = theta.sin();
    Vec3::new(s * phi.cos(), theta.cos(), s * phi.sin())
}

/// Projects an equirectangular radiance image onto the 9 SH coefficients
/// with solid-angle weights, then folds in the cosine-lobe factors so
/// [`shade`] needs no further convolution.
pub fn project_env_to_sh(env: &FloatMap) -> Result<SHLighting> {
    if env.width == 0 || env.height == 0 {
        return Err(Error::InvalidMap("environment image is empty".into()));
    }
    if env.channels != 3 {
        return Err(Error::InvalidMap(format!(
            "environment needs 3 channels, has {}",
            env.channels
        )));
    }
    let (w, h) = (env.width, env.height);
    let d_theta = std::f32::consts::PI / h as f32;
    let d_phi = std::f32::consts::TAU / w as f32;
    let mut coeffs = [[0.0f64; 9]; 3];
    for y in 0..h {
        let theta = std::f32::consts::PI * (y as f32 + 0.5) / h as f32;
        let weight = (theta.sin() * d_theta * d_phi) as f64;
        for x in 0..w {
            let basis = sh_basis(equirect_dir(x, y, w, h));
            let px = env.get(x, y);
            for ch in 0..3 {
                let v = px[ch] as f64 * weight;
                for i in 0..9 {
                    coeffs[ch][i] += v * basis[i] as f64;
                }
            }
        }
    }
    let mut out = [[0.0f32; 9]; 3];
    for ch in 0..3 {
        for i in 0..9 {
            out[ch][i] = (coeffs[ch][i] * A_BAND[BAND_OF[i]] as f64) as f32;
        }
    }
    let sh = SHLighting { coeffs: out };
    if !sh.is_finite() {
        return Err(Error::InvalidMap("environment radiance not finite".into()));
    }
    Ok(sh)
}

/// Lambertian shading: per-channel 9-term irradiance polynomial times
/// albedo over pi, clamped at zero.
pub fn shade(normal: Vec3, albedo: Vec3, sh: &SHLighting) -> Vec3 {
    let basis = sh_basis(normal);
    let mut out = Vec3::zeros();
    for ch in 0..3 {
        let mut e = 0.0f32;
        for i in 0..9 {
            e += sh.coeffs[ch][i] * basis[i];
        }
        out[ch] = (albedo[ch] * e / std::f32::consts::PI).max(0.0);
    }
    out
}

/// Gauss-Legendre nodes and weights on [-1, 1], computed by Newton
/// iteration in f64.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0f64; n];
    let mut weights = vec![0.0f64; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Legendre P_n(x) and its derivative by upward recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        // Recompute derivative at the converged node for the weight.
        let mut p0 = 1.0;
        let mut p1 = x;
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn sh_basis_f64(x: f64, y: f64, z: f64) -> [f64; 9] {
    use std::f64::consts::PI;
    let c0 = 0.5 * (1.0 / PI).sqrt();
    let c1 = (3.0 / (4.0 * PI)).sqrt();
    let c2 = 0.5 * (15.0 / PI).sqrt();
    let c20 = 0.25 * (5.0 / PI).sqrt();
    let c22 = 0.25 * (15.0 / PI).sqrt();
    [
        c0,
        c1 * y,
        c1 * z,
        c1 * x,
        c2 * x * y,
        c2 * y * z,
        c20 * (3.0 * z * z - 1.0),
        c2 * x * z,
        c22 * (x * x - y * y),
    ]
}

/// Quadrature exact for band-limited (l <= 2) integrands: Gauss-Legendre 16
/// in cos(polar) x 32 uniform azimuth steps. Returns (x, y, z, weight).
fn sphere_quadrature() -> Vec<[f64; 4]> {
    let (nodes, weights) = gauss_legendre(16);
    let n_phi = 32;
    let d_phi = std::f64::consts::TAU / n_phi as f64;
    let mut q = Vec::with_capacity(16 * n_phi);
    for (ct, wt) in nodes.iter().zip(&weights) {
        let st = (1.0 - ct * ct).sqrt();
        for k in 0..n_phi {
            let phi = d_phi * (k as f64 + 0.5);
            q.push([st * phi.cos(), *ct, st * phi.sin(), wt * d_phi]);
        }
    }
    q
}

/// Rotates the lighting by `angle` about +y: evaluate the expansion on a
/// quadrature grid, rotate the sample directions, re-project. Exact for
/// band-limited input up to roundoff, no Wigner matrices involved.
pub fn rotate_sh_y(sh: &SHLighting, angle: f32) -> SHLighting {
    let sin_a = (angle as f64).sin();
    let cos_a = (angle as f64).cos();
    let mut coeffs = [[0.0f64; 9]; 3];
    for [x, y, z, w] in sphere_quadrature() {
        // Environment rotated by +angle sampled at d equals the original
        // sampled at R_y(-angle) d.
        let src = sh_basis_f64(cos_a * x - sin_a * z, y, sin_a * x + cos_a * z);
        let dst = sh_basis_f64(x, y, z);
        for ch in 0..3 {
            let mut val = 0.0f64;
            for i in 0..9 {
                val += sh.coeffs[ch][i] as f64 * src[i];
            }
            for i in 0..9 {
                coeffs[ch][i] += val * dst[i] * w;
            }
        }
    }
    let mut out = [[0.0f32; 9]; 3];
    for ch in 0..3 {
        for i in 0..9 {
            out[ch][i] = coeffs[ch][i] as f32;
        }
    }
    SHLighting { coeffs: out }
}

/// Seeded procedural HDR environment: low ambient plus one to three
/// directional lobes of random color, direction, and sharpness. A stand-in
/// for captured indoor panoramas; any equirect PFM loads the same way.
pub fn procedural_env(seed: u64, width: usize, height: usize) -> FloatMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ambient = Vec3::new(
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.05..0.3),
    );
    let n_lobes = rng.gen_range(1..=3);
    let mut lobes = Vec::with_capacity(n_lobes);
    for _ in 0..n_lobes {
        let z: f32 = rng.gen_range(-1.0..1.0);
        let phi: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let r = (1.0f32 - z * z).max(0.0).sqrt();
        let dir = Vec3::new(r * phi.cos(), z, r * phi.sin());
        let color = Vec3::new(
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..3.0),
        );
        let sharp: f32 = rng.gen_range(2.0..12.0);
        lobes.push((dir, color, sharp));
    }
    let mut env = FloatMap::new(width, height, 3);
    for y in 0..height {
        for x in 0..width {
            let d = equirect_dir(x, y, width, height);
            let mut radiance = ambient;
            for (dir, color, sharp) in &lobes {
                let c = d.dot(dir).max(0.0).powf(*sharp);
                radiance += color * c;
            }
            env.set(x, y, &[radiance.x, radiance.y, radiance.z]);
        }
    }
    env
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotate_y(v: Vec3, a: f32) -> Vec3 {
        let (s, c) = a.sin_cos();
        Vec3::new(c * v.x + s * v.z, v.y, -s * v.x + c * v.z)
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0f32),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n < 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn constant_environment_projects_to_dc_only() {
        let env = FloatMap::filled(128, 64, &[1.0, 1.0, 1.0]);
        let sh = project_env_to_sh(&env).unwrap();
        for ch in 0..3 {
            for i in 1..9 {
                assert!(sh.coeffs[ch][i].abs() < 1e-3, "coeff {i} = {}", sh.coeffs[ch][i]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = random_unit(&mut rng);
            let c = shade(n, Vec3::new(1.0, 1.0, 1.0), &sh);
            for ch in 0..3 {
                assert!((c[ch] - 1.0).abs() < 1e-3, "shade {c:?}");
            }
        }
    }

    #[test]
    fn upper_hemisphere_light_prefers_up_normals() {
        let mut env = FloatMap::new(64, 32, 3);
        for y in 0..32 {
            let v = if y < 16 { 4.0 } else { 0.05 };
            for x in 0..64 {
                env.set(x, y, &[v, v, v]);
            }
        }
        let sh = project_env_to_sh(&env).unwrap();
        let up = shade(Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 1.0, 1.0), &sh);
        let down = shade(Vec3::new(0.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 1.0), &sh);
        assert!(up.x > down.x, "up {} vs down {}", up.x, down.x);
    }

    #[test]
    fn zero_albedo_shades_black() {
        let sh = project_env_to_sh(&procedural_env(3, 64, 32)).unwrap();
        let c = shade(Vec3::new(0.0, 1.0, 0.0), Vec3::zeros(), &sh);
        assert_eq!(c, Vec3::zeros());
    }

    #[test]
    fn shading_is_clamped_nonnegative() {
        // A lighting vector with strong negative lobes still shades >= 0.
        let mut sh = SHLighting::black();
        sh.coeffs[0] = [0.1, -2.0, 1.5, -1.0, 0.8, -0.7, 0.9, -1.1, 0.6];
        sh.coeffs[1] = sh.coeffs[0];
        sh.coeffs[2] = sh.coeffs[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = random_unit(&mut rng);
            let c = shade(n, Vec3::new(1.0, 1.0, 1.0), &sh);
            assert!(c.x >= 0.0 && c.y >= 0.0 && c.z >= 0.0);
        }
    }

    #[test]
    fn empty_environment_is_rejected() {
        let env = FloatMap::new(0, 0, 3);
        assert!(project_env_to_sh(&env).is_err());
        let gray = FloatMap::new(8, 4, 1);
        assert!(project_env_to_sh(&gray).is_err());
    }

    #[test]
    fn shade_matches_cosine_quadrature_of_bandlimited_env() {
        let env = procedural_env(11, 128, 64);
        let sh = project_env_to_sh(&env).unwrap();
        let radiance = sh.radiance_coeffs();

        // Brute force: E(n) = integral of L_band(w) max(0, n.w) dw over a
        // dense sphere grid, channel 0.
        let (nodes, weights) = gauss_legendre(64);
        let n_phi = 128;
        let d_phi = std::f64::consts::TAU / n_phi as f64;
        let mut grid = Vec::new();
        for (ct, wt) in nodes.iter().zip(&weights) {
            let st = (1.0 - ct * ct).sqrt();
            for k in 0..n_phi {
                let phi = d_phi * (k as f64 + 0.5);
                let d = Vec3::new(
                    (st * phi.cos()) as f32,
                    *ct as f32,
                    (st * phi.sin()) as f32,
                );
                let basis = sh_basis(d);
                let mut l = 0.0f64;
                for i in 0..9 {
                    l += (radiance[0][i] * basis[i]) as f64;
                }
                grid.push((d, l * wt * d_phi));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut scale = 0.0f64;
        let mut cases = Vec::new();
        for _ in 0..1000 {
            let n = random_unit(&mut rng);
            let mut e = 0.0f64;
            for (d, lw) in &grid {
                let c = n.dot(d).max(0.0) as f64;
                e += lw * c;
            }
            let brute = e / std::f64::consts::PI;
            let fast = shade(n, Vec3::new(1.0, 1.0, 1.0), &sh).x as f64;
            scale = scale.max(brute.abs());
            cases.push((fast, brute));
        }
        for (fast, brute) in cases {
            assert!(
                (fast - brute).abs() < 0.01 * scale.max(1e-6),
                "shade {fast} vs quadrature {brute} (scale {scale})"
            );
        }
    }

    #[test]
    fn rotation_by_zero_and_full_turn_is_identity() {
        let sh = project_env_to_sh(&procedural_env(5, 64, 32)).unwrap();
        let r0 = rotate_sh_y(&sh, 0.0);
        let r2pi = rotate_sh_y(&sh, std::f32::consts::TAU);
        for ch in 0..3 {
            for i in 0..9 {
                assert!((r0.coeffs[ch][i] - sh.coeffs[ch][i]).abs() < 1e-6);
                assert!((r2pi.coeffs[ch][i] - sh.coeffs[ch][i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn rotated_lighting_shades_rotated_normals_identically() {
        let sh = project_env_to_sh(&procedural_env(9, 64, 32)).unwrap();
        let albedo = Vec3::new(0.8, 0.6, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = random_unit(&mut rng);
            let alpha: f32 = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
            let rotated = rotate_sh_y(&sh, alpha);
            let a = shade(rotate_y(n, alpha), albedo, &rotated);
            let b = shade(n, albedo, &sh);
            assert!((a - b).norm() < 1e-3, "equivariance broke: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (nodes, weights) = gauss_legendre(16);
        // x^k on [-1,1]: zero for odd k, 2/(k+1) for even k, up to degree 31.
        for k in 0..=31usize {
            let got: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * x.powi(k as i32))
                .sum();
            let want = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((got - want).abs() < 1e-12, "degree {k}: {got} vs {want}");
        }
    }

    #[test]
    fn procedural_env_is_deterministic_and_positive() {
        let a = procedural_env(42, 64, 32);
        let b = procedural_env(42, 64, 32);
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().all(|&v| v > 0.0 && v.is_finite()));
        let c = procedural_env(43, 64, 32);
        assert_ne!(a.data, c.data);
    }
}

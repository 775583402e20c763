//! 24-part body chart table: maps per-part (u,v) coordinates, as produced
//! by dense-correspondence estimators, into the single global UV atlas, and
//! back. Also hosts the partial-texture scatter and shape-map compositing.

use serde::{Deserialize, Serialize};

use crate::body::{dominant_joint, joint, BodyModel};
use crate::fmap::FloatMap;
use crate::mesh::Mesh;
use crate::uv::{ShapeMaps, UvLookup};
use crate::{Error, Result, Vec2};

pub const N_PARTS: usize = 24;

/// One part: a bilinear grid of control points in global UV. Row-major,
/// `grid[0]` columns (u direction) by `grid[1]` rows (v direction). The
/// grids built here are axis-aligned uniform rectangles, which is what the
/// closed-form inverse in [`PartChartTable::locate`] requires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartChart {
    pub part_id: u8,
    pub grid: [usize; 2],
    pub points: Vec<[f32; 2]>,
}

impl PartChart {
    fn rect(&self) -> ([f32; 2], [f32; 2]) {
        (self.points[0], *self.points.last().unwrap())
    }

    /// Bilinear interpolation of part coordinates into global UV.
    pub fn map(&self, u: f32, v: f32) -> Vec2 {
        let (gu, gv) = (self.grid[0], self.grid[1]);
        let x = u.clamp(0.0, 1.0) * (gu - 1) as f32;
        let y = v.clamp(0.0, 1.0) * (gv - 1) as f32;
        let ix = (x.floor() as usize).min(gu - 2);
        let iy = (y.floor() as usize).min(gv - 2);
        let fx = x - ix as f32;
        let fy = y - iy as f32;
        let p = |cx: usize, cy: usize| self.points[cy * gu + cx];
        let lerp = |a: [f32; 2], b: [f32; 2], t: f32| {
            [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
        };
        let top = lerp(p(ix, iy), p(ix + 1, iy), fx);
        let bot = lerp(p(ix, iy + 1), p(ix + 1, iy + 1), fx);
        let o = lerp(top, bot, fy);
        Vec2::new(o[0], o[1])
    }

    fn validate(&self) -> Result<()> {
        let (gu, gv) = (self.grid[0], self.grid[1]);
        if gu < 2 || gv < 2 {
            return Err(Error::Atlas(format!(
                "part {}: grid {}x{} below 2x2",
                self.part_id, gu, gv
            )));
        }
        if self.points.len() != gu * gv {
            return Err(Error::Atlas(format!(
                "part {}: {} control points, expected {}",
                self.part_id,
                self.points.len(),
                gu * gv
            )));
        }
        // Inversion relies on an axis-aligned monotone lattice.
        for cy in 0..gv {
            for cx in 0..gu {
                let p = self.points[cy * gu + cx];
                if cx > 0 && p[0] <= self.points[cy * gu + cx - 1][0] {
                    return Err(Error::Atlas(format!(
                        "part {}: u not increasing along rows",
                        self.part_id
                    )));
                }
                if cy > 0 {
                    let above = self.points[(cy - 1) * gu + cx];
                    if p[1] <= above[1] || (p[0] - above[0]).abs() > 1e-6 {
                        return Err(Error::Atlas(format!(
                            "part {}: lattice not axis-aligned",
                            self.part_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// The full per-part chart table; parts are disjoint rectangles of the
/// global atlas, four per body region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartChartTable {
    pub parts: Vec<PartChart>,
}

impl PartChartTable {
    pub fn validate(&self) -> Result<()> {
        if self.parts.len() != N_PARTS {
            return Err(Error::Atlas(format!(
                "{} parts, expected {N_PARTS}",
                self.parts.len()
            )));
        }
        let mut seen = [false; N_PARTS + 1];
        for p in &self.parts {
            if p.part_id == 0 || p.part_id as usize > N_PARTS {
                return Err(Error::Atlas(format!("part id {} outside 1..=24", p.part_id)));
            }
            if seen[p.part_id as usize] {
                return Err(Error::Atlas(format!("duplicate part id {}", p.part_id)));
            }
            seen[p.part_id as usize] = true;
            p.validate()?;
        }
        Ok(())
    }

    pub fn part(&self, part_id: u8) -> Option<&PartChart> {
        self.parts.iter().find(|p| p.part_id == part_id)
    }

    /// Global UV for a foreground correspondence sample. Background
    /// (part 0) and unknown ids give None.
    pub fn convert_densepose_uv(&self, part_id: u8, u: f32, v: f32) -> Option<Vec2> {
        self.part(part_id).map(|p| p.map(u, v))
    }

    /// Inverse lookup: which part rectangle holds this global UV, and at
    /// which part coordinates. First matching part wins on shared borders.
    pub fn locate(&self, global: Vec2) -> Option<(u8, f32, f32)> {
        for p in &self.parts {
            let (lo, hi) = p.rect();
            if global.x >= lo[0] && global.x <= hi[0] && global.y >= lo[1] && global.y <= hi[1] {
                let u = (global.x - lo[0]) / (hi[0] - lo[0]);
                let v = (global.y - lo[1]) / (hi[1] - lo[1]);
                return Some((p.part_id, u, v));
            }
        }
        None
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.validate()?;
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let table: PartChartTable = serde_json::from_reader(std::io::BufReader::new(f))?;
        table.validate()?;
        Ok(table)
    }
}

/// The six body regions, each owning one UV chart and four parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Torso,
    Head,
    ArmL,
    ArmR,
    LegL,
    LegR,
}

pub const REGIONS: [Region; 6] = [
    Region::Torso,
    Region::Head,
    Region::ArmL,
    Region::ArmR,
    Region::LegL,
    Region::LegR,
];

impl Region {
    pub fn joints(self) -> &'static [usize] {
        match self {
            Region::Torso => &[joint::PELVIS, joint::CHEST],
            Region::Head => &[joint::NECK, joint::HEAD],
            Region::ArmL => &[joint::SHOULDER_L, joint::ELBOW_L, joint::WRIST_L],
            Region::ArmR => &[joint::SHOULDER_R, joint::ELBOW_R, joint::WRIST_R],
            Region::LegL => &[joint::HIP_L, joint::KNEE_L, joint::ANKLE_L],
            Region::LegR => &[joint::HIP_R, joint::KNEE_R, joint::ANKLE_R],
        }
    }

    fn of_joint(j: usize) -> Region {
        for r in REGIONS {
            if r.joints().contains(&j) {
                return r;
            }
        }
        Region::Torso
    }

    /// First part id of this region's block of four.
    pub fn first_part(self) -> u8 {
        match self {
            Region::Torso => 1,
            Region::Head => 5,
            Region::ArmL => 9,
            Region::ArmR => 13,
            Region::LegL => 17,
            Region::LegR => 21,
        }
    }
}

/// Per-vertex region labels from the dominant skinning joint.
pub fn vertex_regions(model: &BodyModel) -> Vec<Region> {
    dominant_joint(model)
        .into_iter()
        .map(Region::of_joint)
        .collect()
}

fn uv_islands(mesh: &Mesh) -> Vec<usize> {
    let n = mesh.uvs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for t in &mesh.face_uvs {
        let a = find(&mut parent, t[0] as usize);
        let b = find(&mut parent, t[1] as usize);
        let c = find(&mut parent, t[2] as usize);
        parent[b] = a;
        parent[c] = a;
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Derives the 24-part table from a model's UV layout: each region's
/// largest chart rectangle is split into 2x2 parts with 3x3 grids.
pub fn build_part_table(model: &BodyModel) -> Result<PartChartTable> {
    let mesh = &model.template;
    let regions = vertex_regions(model);
    let island_of = uv_islands(mesh);

    // Vote each island's region from the faces that use it, then keep the
    // island with the most faces per region (the junction patch also votes
    // torso but loses to the tube chart).
    use std::collections::HashMap;
    let mut votes: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (f, t) in mesh.faces.iter().zip(&mesh.face_uvs) {
        let isl = island_of[t[0] as usize];
        let entry = votes.entry(isl).or_default();
        for k in 0..3 {
            let r = regions[f[k] as usize];
            *entry.entry(r as usize).or_default() += 1;
        }
    }
    let mut best: [Option<(usize, usize)>; 6] = [None; 6];
    for (isl, tally) in &votes {
        let (&region_idx, &count) = tally.iter().max_by_key(|(_, &c)| c).unwrap();
        if best[region_idx].map(|(_, c)| count > c).unwrap_or(true) {
            best[region_idx] = Some((*isl, count));
        }
    }

    let mut parts = Vec::with_capacity(N_PARTS);
    for region in REGIONS {
        let (isl, _) = best[region as usize].ok_or_else(|| {
            Error::Atlas(format!("no UV chart found for region {region:?}"))
        })?;
        let mut lo = [f32::INFINITY; 2];
        let mut hi = [f32::NEG_INFINITY; 2];
        for (i, uv) in mesh.uvs.iter().enumerate() {
            if island_of[i] != isl {
                continue;
            }
            lo[0] = lo[0].min(uv.x);
            lo[1] = lo[1].min(uv.y);
            hi[0] = hi[0].max(uv.x);
            hi[1] = hi[1].max(uv.y);
        }
        let mid = [(lo[0] + hi[0]) * 0.5, (lo[1] + hi[1]) * 0.5];
        let quads = [
            ([lo[0], lo[1]], [mid[0], mid[1]]),
            ([mid[0], lo[1]], [hi[0], mid[1]]),
            ([lo[0], mid[1]], [mid[0], hi[1]]),
            ([mid[0], mid[1]], [hi[0], hi[1]]),
        ];
        for (qi, (qlo, qhi)) in quads.iter().enumerate() {
            let mut points = Vec::with_capacity(9);
            for gy in 0..3 {
                for gx in 0..3 {
                    points.push([
                        qlo[0] + (qhi[0] - qlo[0]) * gx as f32 / 2.0,
                        qlo[1] + (qhi[1] - qlo[1]) * gy as f32 / 2.0,
                    ]);
                }
            }
            parts.push(PartChart {
                part_id: region.first_part() + qi as u8,
                grid: [3, 3],
                points,
            });
        }
    }
    let table = PartChartTable { parts };
    table.validate()?;
    Ok(table)
}

/// Scatters foreground pixels of a rendered view into the global atlas.
///
/// `corr` encodes per pixel (part_id, u_part, v_part) with part 0 as
/// background. Every foreground pixel writes the image color to the nearest
/// atlas pixel; collisions average (sum and count passes), untouched pixels
/// stay unoccupied.
pub fn build_partial_texture(
    image: &FloatMap,
    corr: &FloatMap,
    table: &PartChartTable,
    resolution: usize,
) -> Result<FloatMap> {
    if !(64..=2048).contains(&resolution) {
        return Err(Error::Atlas(format!(
            "resolution {resolution} outside 64..=2048"
        )));
    }
    if image.width != corr.width || image.height != corr.height {
        return Err(Error::InvalidMap(format!(
            "image {}x{} and correspondence {}x{} disagree",
            image.width, image.height, corr.width, corr.height
        )));
    }
    if corr.channels != 3 {
        return Err(Error::InvalidMap(
            "correspondence map must have 3 channels (part, u, v)".into(),
        ));
    }
    let c = image.channels;
    let mut sums = vec![0.0f64; resolution * resolution * c];
    let mut counts = vec![0u32; resolution * resolution];
    for y in 0..image.height {
        for x in 0..image.width {
            if corr.mask_at(x, y) <= 0.5 {
                continue;
            }
            let s = corr.get(x, y);
            let part = s[0].round();
            if part < 0.5 {
                continue;
            }
            let Some(global) = table.convert_densepose_uv(part as u8, s[1], s[2]) else {
                continue;
            };
            let px = ((global.x * resolution as f32 - 0.5).round())
                .clamp(0.0, (resolution - 1) as f32) as usize;
            let py = ((global.y * resolution as f32 - 0.5).round())
                .clamp(0.0, (resolution - 1) as f32) as usize;
            let idx = py * resolution + px;
            let color = image.get(x, y);
            for k in 0..c {
                sums[idx * c + k] += color[k] as f64;
            }
            counts[idx] += 1;
        }
    }
    let mut out = FloatMap::new(resolution, resolution, c);
    for idx in 0..counts.len() {
        if counts[idx] == 0 {
            continue;
        }
        let n = counts[idx] as f64;
        for k in 0..c {
            out.data[idx * c + k] = (sums[idx * c + k] / n) as f32;
        }
        out.mask[idx] = 1.0;
    }
    Ok(out)
}

/// Box blur of a mask with the given radius; a step edge becomes a linear
/// ramp 2*radius+1 pixels wide. Borders renormalize by the in-bounds window.
fn box_blur(mask: &[f32], w: usize, h: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return mask.to_vec();
    }
    let r = radius as i64;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0;
            for dx in -r..=r {
                let nx = x as i64 + dx;
                if nx >= 0 && nx < w as i64 {
                    acc += mask[y * w + nx as usize];
                    n += 1;
                }
            }
            tmp[y * w + x] = acc / n as f32;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0;
            for dy in -r..=r {
                let ny = y as i64 + dy;
                if ny >= 0 && ny < h as i64 {
                    acc += tmp[ny as usize * w + x];
                    n += 1;
                }
            }
            out[y * w + x] = acc / n as f32;
        }
    }
    out
}

fn blend_maps(
    target: &FloatMap,
    source: &FloatMap,
    weight: &[f32],
    renormalize: bool,
) -> FloatMap {
    let (w, h, c) = (target.width, target.height, target.channels);
    let mut out = FloatMap::new(w, h, c);
    for idx in 0..w * h {
        let f = weight[idx];
        let ws = f * source.mask[idx];
        let wt = (1.0 - f) * target.mask[idx];
        let total = ws + wt;
        if total <= 1e-12 {
            continue;
        }
        let mut px = vec![0.0f32; c];
        for k in 0..c {
            px[k] = (ws * source.data[idx * c + k] + wt * target.data[idx * c + k]) / total;
        }
        if renormalize {
            let n = px.iter().map(|v| v * v).sum::<f32>().sqrt();
            if n > 1e-6 {
                for v in &mut px {
                    *v /= n;
                }
            }
        }
        out.data[idx * c..idx * c + c].copy_from_slice(&px);
        out.mask[idx] = 1.0;
    }
    out
}

/// Splices source detail into target where the region mask is 1, with a
/// linear feather band (default width 4px) across the boundary. Pixels the
/// feathered mask does not touch keep the target maps bit-exact.
pub fn composite_maps(
    target: &ShapeMaps,
    source: &ShapeMaps,
    region_mask: &FloatMap,
    feather_px: usize,
) -> Result<ShapeMaps> {
    let res = target.resolution();
    if source.resolution() != res || region_mask.width != res || region_mask.height != res {
        return Err(Error::InvalidMap(
            "composite inputs disagree on resolution".into(),
        ));
    }
    if region_mask.channels != 1 {
        return Err(Error::InvalidMap("region mask must be single channel".into()));
    }
    let weight = box_blur(&region_mask.data, res, res, feather_px);
    Ok(ShapeMaps {
        displacement_map: blend_maps(
            &target.displacement_map,
            &source.displacement_map,
            &weight,
            false,
        ),
        normal_map: blend_maps(&target.normal_map, &source.normal_map, &weight, true),
    })
}

/// Bakes a binary per-vertex flag into a hard region mask (1 channel).
pub fn region_mask_from_flags(
    lookup: &UvLookup,
    mesh: &Mesh,
    flags: &[f32],
) -> Result<FloatMap> {
    let mut map = crate::uv::bake_attribute(lookup, mesh, flags, 1)?;
    for v in &mut map.data {
        *v = if *v > 0.5 { 1.0 } else { 0.0 };
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::generate_stub_model;
    use crate::uv::build_uv_lookup;

    fn stub_table() -> (BodyModel, PartChartTable) {
        let m = generate_stub_model(7, 664).unwrap();
        let t = build_part_table(&m).unwrap();
        (m, t)
    }

    #[test]
    fn stub_yields_24_unique_parts() {
        let (_, table) = stub_table();
        table.validate().unwrap();
        assert_eq!(table.parts.len(), 24);
    }

    #[test]
    fn table_json_round_trip() {
        let (_, table) = stub_table();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("parts.json");
        table.save_json(&path).unwrap();
        let back = PartChartTable::load_json(&path).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn forward_map_hits_grid_corners() {
        let (_, table) = stub_table();
        for p in &table.parts {
            let (lo, hi) = p.rect();
            let a = p.map(0.0, 0.0);
            let b = p.map(1.0, 1.0);
            assert!((a.x - lo[0]).abs() < 1e-6 && (a.y - lo[1]).abs() < 1e-6);
            assert!((b.x - hi[0]).abs() < 1e-6 && (b.y - hi[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn locate_inverts_forward_map() {
        let (_, table) = stub_table();
        for p in &table.parts {
            for &u in &[0.1f32, 0.5, 0.9] {
                for &v in &[0.1f32, 0.5, 0.9] {
                    let g = p.map(u, v);
                    let (pid, bu, bv) = table.locate(g).unwrap();
                    assert_eq!(pid, p.part_id);
                    assert!((bu - u).abs() < 1e-5 && (bv - v).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn part_centers_land_on_occupied_pixels() {
        let (m, table) = stub_table();
        let lookup = build_uv_lookup(&m.template, 256).unwrap();
        for p in &table.parts {
            let g = p.map(0.5, 0.5);
            let x = ((g.x * 256.0 - 0.5).round() as usize).min(255);
            let y = ((g.y * 256.0 - 0.5).round() as usize).min(255);
            assert!(
                lookup.occupied(x, y),
                "part {} center ({x},{y}) unoccupied",
                p.part_id
            );
        }
    }

    #[test]
    fn background_and_unknown_parts_convert_to_none() {
        let (_, table) = stub_table();
        assert!(table.convert_densepose_uv(0, 0.5, 0.5).is_none());
        assert!(table.convert_densepose_uv(25, 0.5, 0.5).is_none());
        assert!(table.convert_densepose_uv(7, 0.5, 0.5).is_some());
    }

    fn color_of(g: Vec2) -> [f32; 3] {
        [g.x, g.y, 0.25 + 0.5 * g.x * g.y]
    }

    #[test]
    fn scatter_reproduces_colors_at_hit_pixels() {
        let (_, table) = stub_table();
        // 24 parts x 5x5 interior samples, one image pixel each.
        let samples: Vec<(u8, f32, f32)> = table
            .parts
            .iter()
            .flat_map(|p| {
                (0..5).flat_map(move |i| {
                    (0..5).map(move |j| {
                        (p.part_id, 0.1 + 0.2 * i as f32, 0.1 + 0.2 * j as f32)
                    })
                })
            })
            .collect();
        let side = 32;
        assert!(samples.len() <= side * side);
        let mut image = FloatMap::new(side, side, 3);
        let mut corr = FloatMap::new(side, side, 3);
        for (i, &(part, u, v)) in samples.iter().enumerate() {
            let (x, y) = (i % side, i / side);
            let g = table.convert_densepose_uv(part, u, v).unwrap();
            image.set(x, y, &color_of(g));
            corr.set(x, y, &[part as f32, u, v]);
        }
        let res = 256;
        let map = build_partial_texture(&image, &corr, &table, res).unwrap();
        let mut checked = 0;
        let mut matched = 0;
        for &(part, u, v) in &samples {
            let g = table.convert_densepose_uv(part, u, v).unwrap();
            let px = ((g.x * res as f32 - 0.5).round() as usize).min(res - 1);
            let py = ((g.y * res as f32 - 0.5).round() as usize).min(res - 1);
            assert!(map.mask_at(px, py) > 0.5, "scatter missed pixel");
            let got = map.get(px, py);
            let want = color_of(g);
            checked += 1;
            if got
                .iter()
                .zip(&want)
                .all(|(a, b)| (a - b).abs() < 1e-4)
            {
                matched += 1;
            }
        }
        // Distinct samples can collide in one atlas pixel and average;
        // at this density nearly all survive exactly.
        assert!(
            matched as f32 >= 0.95 * checked as f32,
            "{matched}/{checked} colors survived"
        );
    }

    #[test]
    fn scatter_averages_collisions() {
        let (_, table) = stub_table();
        let mut image = FloatMap::new(2, 1, 3);
        let mut corr = FloatMap::new(2, 1, 3);
        image.set(0, 0, &[1.0, 0.0, 0.0]);
        image.set(1, 0, &[0.0, 1.0, 0.0]);
        corr.set(0, 0, &[3.0, 0.5, 0.5]);
        corr.set(1, 0, &[3.0, 0.5, 0.5]);
        let map = build_partial_texture(&image, &corr, &table, 128).unwrap();
        assert!((map.occupied_fraction() * (128.0 * 128.0) - 1.0).abs() < 0.5);
        let g = table.convert_densepose_uv(3, 0.5, 0.5).unwrap();
        let px = ((g.x * 128.0 - 0.5).round() as usize).min(127);
        let py = ((g.y * 128.0 - 0.5).round() as usize).min(127);
        assert_eq!(map.get(px, py), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn empty_correspondence_scatters_nothing() {
        let (_, table) = stub_table();
        let image = FloatMap::new(8, 8, 3);
        let corr = FloatMap::new(8, 8, 3);
        let map = build_partial_texture(&image, &corr, &table, 64).unwrap();
        assert_eq!(map.occupied_fraction(), 0.0);
    }

    fn two_fixture_maps(res: usize) -> (ShapeMaps, ShapeMaps) {
        let mut a = ShapeMaps::neutral(res);
        let mut b = ShapeMaps::neutral(res);
        for (i, v) in a.displacement_map.data.iter_mut().enumerate() {
            *v = (i % 7) as f32 * 0.01;
        }
        for (i, v) in b.displacement_map.data.iter_mut().enumerate() {
            *v = -((i % 5) as f32) * 0.02;
        }
        for px in b.normal_map.data.chunks_mut(3) {
            px.copy_from_slice(&[1.0, 0.0, 0.0]);
        }
        (a, b)
    }

    #[test]
    fn all_zero_mask_keeps_target_bit_exact() {
        let (target, source) = two_fixture_maps(64);
        let mask = FloatMap::filled(64, 64, &[0.0]);
        let out = composite_maps(&target, &source, &mask, 4).unwrap();
        assert_eq!(out.displacement_map.data, target.displacement_map.data);
        assert_eq!(out.normal_map.data, target.normal_map.data);
    }

    #[test]
    fn all_one_mask_takes_source_bit_exact() {
        let (target, source) = two_fixture_maps(64);
        let mask = FloatMap::filled(64, 64, &[1.0]);
        let out = composite_maps(&target, &source, &mask, 4).unwrap();
        assert_eq!(out.displacement_map.data, source.displacement_map.data);
        assert_eq!(out.normal_map.data, source.normal_map.data);
    }

    #[test]
    fn feather_blends_only_inside_band() {
        let res = 64;
        let (target, source) = two_fixture_maps(res);
        let mut mask = FloatMap::filled(res, res, &[0.0]);
        for y in 0..res {
            for x in 32..res {
                mask.set(x, y, &[1.0]);
            }
        }
        let feather = 4;
        let out = composite_maps(&target, &source, &mask, feather).unwrap();
        for y in 0..res {
            for x in 0..res {
                let idx = y * res + x;
                let d = &out.displacement_map.data[idx * 3..idx * 3 + 3];
                if x < 32 - feather {
                    assert_eq!(d, &target.displacement_map.data[idx * 3..idx * 3 + 3]);
                } else if x >= 32 + feather {
                    assert_eq!(d, &source.displacement_map.data[idx * 3..idx * 3 + 3]);
                }
                let n = &out.normal_map.data[idx * 3..idx * 3 + 3];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                assert!((len - 1.0).abs() < 1e-5);
            }
        }
        // The band itself interpolates monotonically on a scanline.
        let y = 10;
        let mut prev = 0.0;
        for x in (32 - feather)..(32 + feather) {
            let idx = y * res + x;
            let n = &out.normal_map.data[idx * 3..idx * 3 + 3];
            assert!(n[0] >= prev - 1e-6, "feather not monotone at {x}");
            prev = n[0];
        }
    }

    #[test]
    fn region_mask_thresholds_bake() {
        let m = generate_stub_model(7, 664).unwrap();
        let lookup = build_uv_lookup(&m.template, 128).unwrap();
        let regions = vertex_regions(&m);
        let flags: Vec<f32> = regions
            .iter()
            .map(|&r| if r == Region::Head { 1.0 } else { 0.0 })
            .collect();
        let mask = region_mask_from_flags(&lookup, &m.template, &flags).unwrap();
        assert!(mask.data.iter().all(|&v| v == 0.0 || v == 1.0));
        let ones = mask.data.iter().filter(|&&v| v == 1.0).count();
        assert!(ones > 100, "head region empty");
    }
}

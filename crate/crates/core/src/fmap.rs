//! Float image buffers and PFM serialization.
//!
//! [`FloatMap`] stores HWC f32 data plus a per-pixel occupancy mask. PFM
//! files use header `PF` (3 channels) or `Pf` (1 channel), a scale of -1.0
//! to mark little-endian floats, and bottom-up row order. The mask travels
//! in a single-channel sidecar next to the data file.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Row-major float image, `channels` interleaved per pixel, with an
/// occupancy mask (1.0 = valid). Pixel (0,0) is the top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub mask: Vec<f32>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        FloatMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            mask: vec![0.0; width * height],
        }
    }

    /// Fully occupied map with constant channel values.
    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let channels = value.len();
        let mut data = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        FloatMap {
            width,
            height,
            channels,
            data,
            mask: vec![1.0; width * height],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &[f32] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = self.index(x, y);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: &[f32]) {
        debug_assert_eq!(value.len(), self.channels);
        let i = self.index(x, y);
        self.data[i..i + self.channels].copy_from_slice(value);
        self.mask[y * self.width + x] = 1.0;
    }

    #[inline]
    pub fn mask_at(&self, x: usize, y: usize) -> f32 {
        self.mask[y * self.width + x]
    }

    pub fn occupied_fraction(&self) -> f32 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m > 0.5).count() as f32 / self.mask.len() as f32
    }

    /// Mask-weighted bilinear sample at continuous pixel coordinates
    /// (u,v in [0,1] map to the pixel-center grid). Returns None when all
    /// four neighbors are unoccupied; otherwise unoccupied neighbors are
    /// excluded from the weighting so chart borders do not bleed background.
    pub fn sample_bilinear(&self, u: f32, v: f32) -> Option<Vec<f32>> {
        let x = u * self.width as f32 - 0.5;
        let y = v * self.height as f32 - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut acc = vec![0.0f32; self.channels];
        let mut wsum = 0.0f32;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let px = x0 as i64 + dx;
                let py = y0 as i64 + dy;
                if px < 0 || py < 0 || px >= self.width as i64 || py >= self.height as i64 {
                    continue;
                }
                let (px, py) = (px as usize, py as usize);
                let m = self.mask_at(px, py);
                let w = wx * wy * m;
                if w <= 0.0 {
                    continue;
                }
                let p = self.get(px, py);
                for (a, &c) in acc.iter_mut().zip(p) {
                    *a += w * c;
                }
                wsum += w;
            }
        }
        if wsum <= 1e-12 {
            return None;
        }
        for a in &mut acc {
            *a /= wsum;
        }
        Some(acc)
    }

    /// Grows occupancy by one pixel per pass: each unoccupied pixel with at
    /// least one occupied 8-neighbor takes their average and becomes
    /// occupied. Each pass reads a snapshot, so results are order-free.
    /// Standard atlas gutter so bilinear samples near chart borders and
    /// pole wedges never come up empty.
    pub fn dilate(&mut self, passes: usize) {
        let (w, h, c) = (self.width, self.height, self.channels);
        for _ in 0..passes {
            let snap_mask = self.mask.clone();
            let snap_data = self.data.clone();
            for y in 0..h {
                for x in 0..w {
                    if snap_mask[y * w + x] > 0.5 {
                        continue;
                    }
                    let mut acc = vec![0.0f32; c];
                    let mut count = 0usize;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dx == 0 && dy == 0 {
                                continue;
                            }
                            let nx = x as i64 + dx;
                            let ny = y as i64 + dy;
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            let (nx, ny) = (nx as usize, ny as usize);
                            if snap_mask[ny * w + nx] <= 0.5 {
                                continue;
                            }
                            let base = (ny * w + nx) * c;
                            for (a, v) in acc.iter_mut().zip(&snap_data[base..base + c]) {
                                *a += v;
                            }
                            count += 1;
                        }
                    }
                    if count > 0 {
                        let base = (y * w + x) * c;
                        for (slot, a) in self.data[base..base + c].iter_mut().zip(&acc) {
                            *slot = a / count as f32;
                        }
                        self.mask[y * w + x] = 1.0;
                    }
                }
            }
        }
    }
}

fn mask_path(path: &Path) -> PathBuf {
    // data.pfm -> data.mask.pfm
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("map");
    path.with_file_name(format!("{stem}.mask.pfm"))
}

fn write_pfm_raw<W: Write>(
    writer: &mut W,
    width: usize,
    height: usize,
    channels: usize,
    data: &[f32],
) -> Result<()> {
    let tag = match channels {
        1 => "Pf",
        3 => "PF",
        n => {
            return Err(Error::InvalidMap(format!(
                "pfm supports 1 or 3 channels, got {n}"
            )))
        }
    };
    write!(writer, "{tag}\n{width} {height}\n-1.0\n")?;
    // Rows are stored bottom-up.
    for y in (0..height).rev() {
        let row = &data[y * width * channels..(y + 1) * width * channels];
        let mut bytes = Vec::with_capacity(row.len() * 4);
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        writer.write_all(&bytes)?;
    }
    Ok(())
}

fn read_pfm_raw<R: Read>(reader: R, label: &str) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut reader = BufReader::new(reader);
    let mut header = String::new();

    // Header tokens are whitespace-separated; read three lines worth.
    let err = |msg: &str| Error::Parse {
        path: label.to_string(),
        line: 0,
        msg: msg.to_string(),
    };
    for _ in 0..3 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(err("truncated header"));
        }
        header.push_str(&line);
    }
    let mut tokens = header.split_whitespace();
    let tag = tokens.next().ok_or_else(|| err("missing type tag"))?;
    let channels = match tag {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(err(&format!("unknown pfm tag '{other}'"))),
    };
    let width: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err("bad width"))?;
    let height: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err("bad height"))?;
    let scale: f32 = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err("bad scale"))?;
    if scale >= 0.0 {
        return Err(err("big-endian pfm is not supported"));
    }

    let count = width * height * channels;
    let mut bytes = vec![0u8; count * 4];
    reader.read_exact(&mut bytes).map_err(|_| err("truncated pixel data"))?;
    let mut data = vec![0.0f32; count];
    // File rows are bottom-up; flip into top-down order.
    let row_len = width * channels;
    for file_row in 0..height {
        let y = height - 1 - file_row;
        for i in 0..row_len {
            let o = (file_row * row_len + i) * 4;
            data[y * row_len + i] =
                f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        }
    }
    Ok((width, height, channels, data))
}

/// Writes `map` as PFM plus a `.mask.pfm` sidecar with the occupancy mask.
pub fn save_pfm<P: AsRef<Path>>(path: P, map: &FloatMap) -> Result<()> {
    let path = path.as_ref();
    let mut file = BufWriter::new(std::fs::File::create(path)?);
    write_pfm_raw(&mut file, map.width, map.height, map.channels, &map.data)?;
    let mut mfile = BufWriter::new(std::fs::File::create(mask_path(path))?);
    write_pfm_raw(&mut mfile, map.width, map.height, 1, &map.mask)?;
    Ok(())
}

/// Reads a PFM file; if the `.mask.pfm` sidecar exists it supplies the
/// occupancy mask, otherwise the map is treated as fully occupied.
pub fn load_pfm<P: AsRef<Path>>(path: P) -> Result<FloatMap> {
    let path = path.as_ref();
    let label = path.display().to_string();
    let (width, height, channels, data) = read_pfm_raw(std::fs::File::open(path)?, &label)?;
    let mpath = mask_path(path);
    let mask = if mpath.exists() {
        let mlabel = mpath.display().to_string();
        let (mw, mh, mc, mdata) = read_pfm_raw(std::fs::File::open(&mpath)?, &mlabel)?;
        if mw != width || mh != height || mc != 1 {
            return Err(Error::InvalidMap(format!(
                "mask sidecar {mlabel} shape ({mw},{mh},{mc}) does not match ({width},{height},1)"
            )));
        }
        mdata
    } else {
        vec![1.0; width * height]
    };
    Ok(FloatMap {
        width,
        height,
        channels,
        data,
        mask,
    })
}

/// 8-bit PNG preview. Values are mapped from [lo,hi] to [0,255]; 1-channel
/// maps render grayscale, 3-channel maps render RGB. Unoccupied pixels are
/// written black.
pub fn save_png_preview<P: AsRef<Path>>(path: P, map: &FloatMap, lo: f32, hi: f32) -> Result<()> {
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let quantize = |v: f32| ((v - lo) * scale).clamp(0.0, 255.0) as u8;
    let mut pixels = Vec::with_capacity(map.width * map.height * 3);
    for y in 0..map.height {
        for x in 0..map.width {
            if map.mask_at(x, y) <= 0.5 {
                pixels.extend_from_slice(&[0, 0, 0]);
                continue;
            }
            let p = map.get(x, y);
            match map.channels {
                1 => {
                    let g = quantize(p[0]);
                    pixels.extend_from_slice(&[g, g, g]);
                }
                _ => {
                    pixels.push(quantize(p[0]));
                    pixels.push(quantize(*p.get(1).unwrap_or(&0.0)));
                    pixels.push(quantize(*p.get(2).unwrap_or(&0.0)));
                }
            }
        }
    }
    let img = image::RgbImage::from_raw(map.width as u32, map.height as u32, pixels)
        .ok_or_else(|| Error::InvalidMap("png buffer size mismatch".into()))?;
    img.save(path.as_ref())
        .map_err(|e| Error::InvalidMap(format!("png encode: {e}")))?;
    Ok(())
}

/// 8-bit PNG of a linear RGB render, sRGB-encoded. Background (unoccupied)
/// pixels are black.
pub fn save_png_srgb<P: AsRef<Path>>(path: P, map: &FloatMap) -> Result<()> {
    if map.channels != 3 {
        return Err(Error::InvalidMap(format!(
            "srgb export needs 3 channels, map has {}",
            map.channels
        )));
    }
    let encode = |v: f32| {
        let v = v.clamp(0.0, 1.0);
        let s = if v <= 0.003_130_8 {
            12.92 * v
        } else {
            1.055 * v.powf(1.0 / 2.4) - 0.055
        };
        (s * 255.0 + 0.5) as u8
    };
    let mut pixels = Vec::with_capacity(map.width * map.height * 3);
    for y in 0..map.height {
        for x in 0..map.width {
            if map.mask_at(x, y) <= 0.5 {
                pixels.extend_from_slice(&[0, 0, 0]);
                continue;
            }
            let p = map.get(x, y);
            pixels.extend_from_slice(&[encode(p[0]), encode(p[1]), encode(p[2])]);
        }
    }
    let img = image::RgbImage::from_raw(map.width as u32, map.height as u32, pixels)
        .ok_or_else(|| Error::InvalidMap("png buffer size mismatch".into()))?;
    img.save(path.as_ref())
        .map_err(|e| Error::InvalidMap(format!("png encode: {e}")))?;
    Ok(())
}

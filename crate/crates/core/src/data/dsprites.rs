//! dSprites: 64×64 binary sprites over five factors (shape, scale,
//! orientation, x and y position).
//!
//! [`load_dsprites`] reads the published `.npz` archive. [`render_dsprites`]
//! rasterizes the same factor grid procedurally for use when the archive is
//! not available.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::npy::parse_npy_header;
use super::FactorDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DSPRITES_FACTORS: [&str; 5] = ["shape", "scale", "orientation", "pos_x", "pos_y"];
pub const DSPRITES_CARDINALITIES: [usize; 5] = [3, 6, 40, 32, 32];
/// Size of the full factor grid.
pub const DSPRITES_FULL_SIZE: usize = 737_280;
const SIDE: usize = 64;

/// Keep every `stride[k]`-th value of factor `k` (in [`DSPRITES_FACTORS`] order).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DspritesStride(pub [usize; 5]);

impl DspritesStride {
    pub const FULL: Self = Self([1; 5]);
    /// Halve scale and positions, keep every 4th orientation: 23,040 images.
    pub const DESK: Self = Self([1, 2, 4, 2, 2]);

    pub fn validate(&self) -> Result<()> {
        for (k, &s) in self.0.iter().enumerate() {
            if s == 0 || s > DSPRITES_CARDINALITIES[k] {
                return Err(Error::InvalidParameter(format!(
                    "stride {s} for {} must lie in 1..={}",
                    DSPRITES_FACTORS[k], DSPRITES_CARDINALITIES[k]
                )));
            }
        }
        Ok(())
    }

    /// Retained values per factor.
    pub fn cardinalities(&self) -> [usize; 5] {
        let mut out = [0; 5];
        for k in 0..5 {
            out[k] = DSPRITES_CARDINALITIES[k].div_ceil(self.0[k]);
        }
        out
    }

    pub fn size(&self) -> usize {
        self.cardinalities().iter().product()
    }

    /// Dense labels of a full-grid class vector, or `None` if dropped.
    fn keep(&self, classes: &[usize; 5]) -> Option<[usize; 5]> {
        let mut out = [0; 5];
        for k in 0..5 {
            if !classes[k].is_multiple_of(self.0[k]) {
                return None;
            }
            out[k] = classes[k] / self.0[k];
        }
        Some(out)
    }
}

impl Default for DspritesStride {
    fn default() -> Self {
        Self::DESK
    }
}

fn dataset(
    images: Vec<f32>,
    factors: Vec<usize>,
    stride: &DspritesStride,
) -> Result<FactorDataset> {
    let n = factors.len() / 5;
    let ds = FactorDataset {
        images: Tensor::new(&[n, SIDE * SIDE], images)?,
        height: SIDE,
        width: SIDE,
        channels: 1,
        factor_values: factors,
        factor_names: DSPRITES_FACTORS.iter().map(|s| s.to_string()).collect(),
        factor_cardinalities: stride.cardinalities().to_vec(),
    };
    ds.validate()?;
    Ok(ds)
}

fn zip_error(e: zip::result::ZipError) -> Error {
    match e {
        zip::result::ZipError::Io(io) => io_error(io),
        other => Error::Format(format!("dSprites archive: {other}")),
    }
}

fn io_error(e: std::io::Error) -> Error {
    if e.to_string().contains("checksum") {
        Error::Checksum(format!("dSprites archive: {e}"))
    } else {
        Error::Io(e)
    }
}

/// Read the published archive (`imgs` and `latents_classes` arrays), keeping
/// the strided factor grid. Images are streamed so the full array is never
/// held in memory.
pub fn load_dsprites(path: &Path, stride: &DspritesStride) -> Result<FactorDataset> {
    stride.validate()?;
    let file = File::open(path)?;
    let mut archive = zip::ZipArchive::new(BufReader::new(file)).map_err(zip_error)?;

    let classes = {
        let mut entry = archive.by_name("latents_classes.npy").map_err(zip_error)?;
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(io_error)?;
        let h = parse_npy_header(&bytes)?;
        if h.fortran_order || h.shape.len() != 2 || h.shape[1] != 6 {
            return Err(Error::Format(format!(
                "latents_classes has shape {:?}, expected (N, 6)",
                h.shape
            )));
        }
        let width = match h.descr.as_str() {
            "<i8" | "<u8" => 8,
            "<i4" | "<u4" => 4,
            d => {
                return Err(Error::Format(format!(
                    "latents_classes dtype {d} unsupported"
                )))
            }
        };
        let data = bytes
            .get(h.data_offset..h.data_offset + h.numel() * width)
            .ok_or_else(|| Error::Format("latents_classes is truncated".into()))?;
        let values: Vec<i64> = data
            .chunks_exact(width)
            .map(|c| match width {
                8 => i64::from_le_bytes(c.try_into().expect("8 bytes")),
                _ => i32::from_le_bytes(c.try_into().expect("4 bytes")) as i64,
            })
            .collect();
        values
    };
    let n = classes.len() / 6;

    // Column 0 is color, which has a single value; keep the other five.
    let mut keep = Vec::with_capacity(n);
    let mut factors = Vec::new();
    for row in classes.chunks_exact(6) {
        let mut c = [0usize; 5];
        for k in 0..5 {
            let v = row[k + 1];
            if v < 0 || v as usize >= DSPRITES_CARDINALITIES[k] {
                return Err(Error::Format(format!(
                    "factor {} has class {v} outside 0..{}",
                    DSPRITES_FACTORS[k], DSPRITES_CARDINALITIES[k]
                )));
            }
            c[k] = v as usize;
        }
        match stride.keep(&c) {
            Some(dense) => {
                keep.push(true);
                factors.extend_from_slice(&dense);
            }
            None => keep.push(false),
        }
    }

    let mut entry = archive.by_name("imgs.npy").map_err(zip_error)?;
    let mut head = vec![0u8; 10];
    entry.read_exact(&mut head).map_err(io_error)?;
    let hlen = if head[6] == 1 {
        u16::from_le_bytes([head[8], head[9]]) as usize
    } else {
        let mut extra = [0u8; 2];
        entry.read_exact(&mut extra).map_err(io_error)?;
        head.extend_from_slice(&extra);
        u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize
    };
    let mut rest = vec![0u8; hlen];
    entry.read_exact(&mut rest).map_err(io_error)?;
    head.extend_from_slice(&rest);
    let h = parse_npy_header(&head)?;
    if h.descr != "|u1" || h.shape != [n, SIDE, SIDE] || h.fortran_order {
        return Err(Error::Format(format!(
            "imgs has dtype {} and shape {:?}, expected |u1 ({n}, 64, 64)",
            h.descr, h.shape
        )));
    }
    let kept = keep.iter().filter(|&&k| k).count();
    let mut images = Vec::with_capacity(kept * SIDE * SIDE);
    let mut buf = vec![0u8; SIDE * SIDE];
    for &k in &keep {
        entry.read_exact(&mut buf).map_err(io_error)?;
        if k {
            for &p in &buf {
                if p > 1 {
                    return Err(Error::Format(format!("pixel value {p} is not binary")));
                }
                images.push(p as f32);
            }
        }
    }
    // Drain to the end so the CRC of the entry is verified.
    std::io::copy(&mut entry, &mut std::io::sink()).map_err(io_error)?;
    dataset(images, factors, stride)
}

/// Factor values on the continuous scale used for rendering.
fn factor_value(k: usize, class: usize) -> f64 {
    let card = DSPRITES_CARDINALITIES[k] as f64;
    let c = class as f64;
    match k {
        1 => 0.5 + 0.5 * c / (card - 1.0),
        2 => 2.0 * PI * c / (card - 1.0),
        _ => c / (card - 1.0),
    }
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        // square
        0 => u.abs() <= 1.0 && v.abs() <= 1.0,
        // ellipse, 2:1
        1 => u * u + 4.0 * v * v <= 1.0,
        // heart, pointing down in sprite coordinates
        _ => {
            let (x, y) = (1.1 * u, 1.1 * (0.25 - v));
            let t = x * x + y * y - 1.0;
            t * t * t - x * x * y * y * y <= 0.0
        }
    }
}

/// Rasterize one sprite from full-grid factor classes.
pub fn render_sprite(classes: &[usize; 5]) -> Vec<f32> {
    let shape = classes[0];
    let scale = factor_value(1, classes[1]);
    let theta = factor_value(2, classes[2]);
    let (px, py) = (factor_value(3, classes[3]), factor_value(4, classes[4]));
    // Half-extent of the largest sprite is 10 pixels; centers span 12..=52.
    let r = 10.0 * scale;
    let (cx, cy) = (12.0 + 40.0 * px, 12.0 + 40.0 * py);
    let (sin, cos) = theta.sin_cos();
    let mut img = vec![0.0f32; SIDE * SIDE];
    for row in 0..SIDE {
        for col in 0..SIDE {
            let (dx, dy) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
            let u = (cos * dx + sin * dy) / r;
            let v = (-sin * dx + cos * dy) / r;
            if inside(shape, u, v) {
                img[row * SIDE + col] = 1.0;
            }
        }
    }
    img
}

/// Procedurally rendered dSprites grid with the given stride, enumerated in
/// the archive's order (shape slowest, y position fastest).
pub fn render_dsprites(stride: &DspritesStride) -> Result<FactorDataset> {
    stride.validate()?;
    let card = stride.cardinalities();
    let n = stride.size();
    let mut images = Vec::with_capacity(n * SIDE * SIDE);
    let mut factors = Vec::with_capacity(n * 5);
    for s in 0..card[0] {
        for sc in 0..card[1] {
            for o in 0..card[2] {
                for x in 0..card[3] {
                    for y in 0..card[4] {
                        let dense = [s, sc, o, x, y];
                        let mut full = [0; 5];
                        for k in 0..5 {
                            full[k] = dense[k] * stride.0[k];
                        }
                        images.extend(render_sprite(&full));
                        factors.extend_from_slice(&dense);
                    }
                }
            }
        }
    }
    dataset(images, factors, stride)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_arithmetic() {
        assert_eq!(DspritesStride::FULL.size(), DSPRITES_FULL_SIZE);
        assert_eq!(DspritesStride::DESK.size(), 23_040);
        assert_eq!(DspritesStride([3, 6, 40, 32, 32]).size(), 1);
        assert_eq!(DspritesStride([1, 6, 40, 32, 32]).size(), 3);
        assert!(DspritesStride([0, 1, 1, 1, 1]).validate().is_err());
    }

    #[test]
    fn sprites_are_distinct_and_inside_the_frame() {
        let a = render_sprite(&[0, 5, 0, 0, 0]);
        let b = render_sprite(&[1, 5, 0, 0, 0]);
        let c = render_sprite(&[0, 5, 0, 31, 31]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        for img in [&a, &b, &c] {
            let on = img.iter().filter(|&&p| p == 1.0).count();
            assert!(on > 20, "sprite has {on} pixels");
            // border rows and columns stay empty
            for i in 0..SIDE {
                assert_eq!(img[i], 0.0);
                assert_eq!(img[(SIDE - 1) * SIDE + i], 0.0);
                assert_eq!(img[i * SIDE], 0.0);
            }
        }
        let small = render_sprite(&[0, 0, 0, 10, 10]).iter().sum::<f32>();
        let big = render_sprite(&[0, 5, 0, 10, 10]).iter().sum::<f32>();
        assert!(big > 3.0 * small);
    }

    #[test]
    fn degenerate_stride_keeps_one_image_per_shape() {
        let ds = render_dsprites(&DspritesStride([1, 6, 40, 32, 32])).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.factor_cardinalities, vec![3, 1, 1, 1, 1]);
        assert_eq!(ds.factors(2), &[2, 0, 0, 0, 0]);
    }
}

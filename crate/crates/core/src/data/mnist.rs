//! MNIST-format digits and the colored MNIST construction.
//!
//! Color assignment is uniform over white, red, green and blue. The grayscale
//! intensity is placed in the chosen channel (all three for white), and
//! images are flattened channel-major to `3 × 28 × 28 = 2352` values.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MNIST_SIDE: usize = 28;
const CACHE_MAGIC: &[u8; 8] = b"CMNIST\0\0";
const CACHE_VERSION: u32 = 1;

const DIGITS_IMAGES: &[u8] = include_bytes!("../../data/digits8x8-images.idx3-ubyte");
const DIGITS_LABELS: &[u8] = include_bytes!("../../data/digits8x8-labels.idx1-ubyte");

/// Grayscale 28×28 digits in [0, 1] with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistSource {
    /// `N × 784`, row-major.
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl MnistSource {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Read MNIST IDX image and label files.
    pub fn from_idx_files(images: &Path, labels: &Path) -> Result<Self> {
        Self::from_idx(&std::fs::read(images)?, &std::fs::read(labels)?)
    }

    /// Parse IDX images of any size, resampling to 28×28 when needed.
    pub fn from_idx(images: &[u8], labels: &[u8]) -> Result<Self> {
        let (n, rows, cols, pixels) = read_idx_images(images)?;
        let labels = read_idx_labels(labels)?;
        if labels.len() != n {
            return Err(Error::Format(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        let mut out = Vec::with_capacity(n * MNIST_SIDE * MNIST_SIDE);
        for img in pixels.chunks_exact(rows * cols) {
            let img: Vec<f32> = img.iter().map(|&p| p as f32 / 255.0).collect();
            if rows == MNIST_SIDE && cols == MNIST_SIDE {
                out.extend(img);
            } else {
                out.extend(resample_into_frame(&img, rows, cols));
            }
        }
        Ok(Self {
            images: out,
            labels,
        })
    }
}

/// The 1797 8×8 handwritten digits shipped with the crate, upsampled to 28×28.
pub fn bundled_digits() -> MnistSource {
    MnistSource::from_idx(DIGITS_IMAGES, DIGITS_LABELS).expect("bundled digits are well formed")
}

/// Bilinear resize into the central 20×20 box of a 28×28 frame, the layout
/// of MNIST digits.
fn resample_into_frame(img: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    const BOX: usize = 20;
    const PAD: usize = (MNIST_SIDE - BOX) / 2;
    let mut out = vec![0.0f32; MNIST_SIDE * MNIST_SIDE];
    let at = |r: isize, c: isize| -> f32 {
        if r < 0 || c < 0 || r as usize >= rows || c as usize >= cols {
            0.0
        } else {
            img[r as usize * cols + c as usize]
        }
    };
    for r in 0..BOX {
        for c in 0..BOX {
            let sr = (r as f64 + 0.5) * rows as f64 / BOX as f64 - 0.5;
            let sc = (c as f64 + 0.5) * cols as f64 / BOX as f64 - 0.5;
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = ((sr - r0) as f32, (sc - c0) as f32);
            let (r0, c0) = (r0 as isize, c0 as isize);
            let v = (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1))
                + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1));
            out[(r + PAD) * MNIST_SIDE + c + PAD] = v.clamp(0.0, 1.0);
        }
    }
    out
}

fn be_u32(bytes: &[u8], at: usize) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| Error::Format("IDX header is truncated".into()))
}

/// `(n, rows, cols, pixels)` from an IDX3 unsigned-byte file.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if be_u32(bytes, 0)? != 0x0803 {
        return Err(Error::Format("not an IDX3 unsigned-byte image file".into()));
    }
    let (n, rows, cols) = (be_u32(bytes, 4)?, be_u32(bytes, 8)?, be_u32(bytes, 12)?);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "IDX images: expected {} bytes, found {}",
            n * rows * cols,
            body.len()
        )));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if be_u32(bytes, 0)? != 0x0801 {
        return Err(Error::Format("not an IDX1 unsigned-byte label file".into()));
    }
    let n = be_u32(bytes, 4)?;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "IDX labels: expected {n}, found {}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Color {
    White = 0,
    Red = 1,
    Green = 2,
    Blue = 3,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::White, Color::Red, Color::Green, Color::Blue];

    fn channels(self) -> [bool; 3] {
        match self {
            Color::White => [true; 3],
            Color::Red => [true, false, false],
            Color::Green => [false, true, false],
            Color::Blue => [false, false, true],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColoredMnist {
    /// `N × 2352`, channel-major per image.
    pub inputs: Vec<f32>,
    pub digits: Vec<u8>,
    pub colors: Vec<Color>,
    pub seed: u64,
}

impl ColoredMnist {
    pub const DIM: usize = 3 * MNIST_SIDE * MNIST_SIDE;

    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    pub fn image(&self, n: usize) -> &[f32] {
        &self.inputs[n * Self::DIM..(n + 1) * Self::DIM]
    }
}

/// Colorize every digit with a color drawn uniformly from a generator seeded
/// by `seed`.
pub fn build_colored_mnist(source: &MnistSource, seed: u64) -> ColoredMnist {
    let mut rng = crate::training::train_rng(seed);
    let plane = MNIST_SIDE * MNIST_SIDE;
    let mut inputs = Vec::with_capacity(source.len() * ColoredMnist::DIM);
    let mut colors = Vec::with_capacity(source.len());
    for img in source.images.chunks_exact(plane) {
        let color = Color::ALL[rng.random_range(0..4)];
        for on in color.channels() {
            if on {
                inputs.extend_from_slice(img);
            } else {
                inputs.extend(std::iter::repeat_n(0.0, plane));
            }
        }
        colors.push(color);
    }
    ColoredMnist {
        inputs,
        digits: source.labels.clone(),
        colors,
        seed,
    }
}

/// Cache layout: magic, `u32` version, `u64` N, `u64` dims, `u64` seed, then
/// `N × dims` little-endian `f32`, `N` digit bytes and `N` color bytes.
pub fn write_colored_mnist_cache<W: Write>(mut w: W, data: &ColoredMnist) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    w.write_all(&(ColoredMnist::DIM as u64).to_le_bytes())?;
    w.write_all(&data.seed.to_le_bytes())?;
    let mut buf = Vec::with_capacity(data.inputs.len() * 4);
    for v in &data.inputs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.write_all(&data.digits)?;
    w.write_all(&data.colors.iter().map(|&c| c as u8).collect::<Vec<_>>())?;
    Ok(())
}

pub fn read_colored_mnist_cache(bytes: &[u8]) -> Result<ColoredMnist> {
    let bad = |msg: &str| Error::Format(format!("colored MNIST cache: {msg}"));
    if bytes.len() < 36 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    if u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) != CACHE_VERSION {
        return Err(bad("unsupported version"));
    }
    let (n, dims, seed) = (u64_at(12) as usize, u64_at(20) as usize, u64_at(28));
    if dims != ColoredMnist::DIM {
        return Err(bad("unexpected image size"));
    }
    let body = &bytes[36..];
    if body.len() != n * dims * 4 + 2 * n {
        return Err(bad("payload length does not match header"));
    }
    let (pix, labels) = body.split_at(n * dims * 4);
    let inputs = pix
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let colors = labels[n..]
        .iter()
        .map(|&c| {
            Color::ALL
                .get(c as usize)
                .copied()
                .ok_or_else(|| bad("bad color"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ColoredMnist {
        inputs,
        digits: labels[..n].to_vec(),
        colors,
        seed,
    })
}

//! PNG image grids with provenance text chunks.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{CliError, CliResult};

const PAD: usize = 1;
const PAD_VALUE: u8 = 128;

/// Geometry of one tile: channel-major `channels × height × width` values in
/// [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Lay out `tiles` row-major in a `rows × cols` grid separated by a 1-pixel
/// gray border. Returns `(width, height, interleaved pixels)`; grayscale for
/// one channel, RGB for three.
pub fn compose_grid(
    tiles: &[Vec<f64>],
    rows: usize,
    cols: usize,
    shape: TileShape,
) -> CliResult<(usize, usize, Vec<u8>)> {
    let TileShape {
        height: h,
        width: w,
        channels: c,
    } = shape;
    if c != 1 && c != 3 {
        return Err(CliError::Config(format!("cannot draw {c}-channel images")));
    }
    if tiles.len() != rows * cols || tiles.iter().any(|t| t.len() != c * h * w) {
        return Err(CliError::Config(
            "tile count or size does not match the grid".into(),
        ));
    }
    let gw = cols * (w + PAD) + PAD;
    let gh = rows * (h + PAD) + PAD;
    let mut px = vec![PAD_VALUE; gw * gh * c];
    for (i, tile) in tiles.iter().enumerate() {
        let (r0, c0) = ((i / cols) * (h + PAD) + PAD, (i % cols) * (w + PAD) + PAD);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = tile[ch * h * w + y * w + x];
                    px[((r0 + y) * gw + c0 + x) * c + ch] =
                        (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    Ok((gw, gh, px))
}

/// Write a grid PNG carrying `text` as tEXt chunks.
pub fn write_png_grid(
    path: &Path,
    tiles: &[Vec<f64>],
    rows: usize,
    cols: usize,
    shape: TileShape,
    text: &[(&str, String)],
) -> CliResult<()> {
    let (w, h, px) = compose_grid(tiles, rows, cols, shape)?;
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if shape.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.clone())?;
    }
    let mut writer = enc.write_header()?;
    writer.write_image_data(&px)?;
    writer.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_places_tiles_and_borders() {
        let shape = TileShape {
            height: 2,
            width: 2,
            channels: 1,
        };
        let tiles = vec![vec![0.0; 4], vec![1.0; 4]];
        let (w, h, px) = compose_grid(&tiles, 1, 2, shape).unwrap();
        assert_eq!((w, h), (7, 4));
        assert_eq!(px[0], PAD_VALUE);
        assert_eq!(px[w + 1], 0);
        assert_eq!(px[w + 4], 255);
        assert!(compose_grid(&tiles, 2, 2, shape).is_err());
    }

    #[test]
    fn rgb_channels_interleave() {
        let shape = TileShape {
            height: 1,
            width: 1,
            channels: 3,
        };
        let (_, _, px) = compose_grid(&[vec![1.0, 0.0, 0.5]], 1, 1, shape).unwrap();
        let centre = (3 + 1) * 3;
        assert_eq!(&px[centre..centre + 3], &[255, 0, 128]);
    }
}

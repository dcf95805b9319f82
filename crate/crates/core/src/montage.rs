//! Axial slice montages as binary PGM (P5) images: input | reconstruction |
//! anomaly | prediction, left to right, separated by one mid-gray column.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, Volume};

const SEPARATOR: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_pgm())?)
    }

    /// Parse a binary PGM with maxval 255.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::Format { kind: "PGM", reason: r.into() };
        let mut fields = Vec::with_capacity(4);
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ascii"))?.to_string());
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad("expected P5 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let pixels = bytes.get(i + 1..).ok_or_else(|| bad("missing raster"))?.to_vec();
        if pixels.len() != width * height {
            return Err(bad("raster length"));
        }
        Ok(Self { width, height, pixels })
    }
}

fn to_byte(v: f32, lo: f32, hi: f32) -> u8 {
    if !(hi > lo) || !v.is_finite() {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Axial slice `z` of each panel. Intensities use the window [-1, 1], the
/// anomaly map is scaled to its own slice maximum, the mask is 0/255.
pub fn montage(input: &Volume, recon: &Volume, anomaly: &Volume, prediction: &BinaryMask, z: usize) -> Result<Image> {
    let g = input.grid();
    for other in [recon.grid(), anomaly.grid(), prediction.grid()] {
        g.check_matches(other)?;
    }
    let [nx, ny, nz] = g.dims;
    if z >= nz {
        return Err(Error::InvalidArgument(format!("slice {z} outside depth {nz}")));
    }
    let peak = (0..nx * ny).map(|i| anomaly.get(i % nx, i / nx, z)).fold(0.0f32, f32::max);
    let width = 4 * nx + 3;
    let mut pixels = vec![SEPARATOR; width * ny];
    for y in 0..ny {
        for x in 0..nx {
            let row = y * width;
            pixels[row + x] = to_byte(input.get(x, y, z), -1.0, 1.0);
            pixels[row + nx + 1 + x] = to_byte(recon.get(x, y, z), -1.0, 1.0);
            pixels[row + 2 * (nx + 1) + x] = to_byte(anomaly.get(x, y, z), 0.0, peak);
            pixels[row + 3 * (nx + 1) + x] = if prediction.get(x, y, z) { 255 } else { 0 };
        }
    }
    Ok(Image { width, height: ny, pixels })
}

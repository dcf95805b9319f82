//! VOL1 little-endian volume container.
//!
//! ```text
//! "VOL1" | u8 dtype | u32 nx ny nz | f32 sx sy sz | f32 ox oy oz | payload (x-fastest)
//! ```
//! dtype 1 = f32 scalars, 2 = u8 mask, 3 = u32 label grid.

use std::io::{Read, Write};
use std::path::Path;

use super::{BinaryMask, Grid, Volume};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VOL1";
const HEADER_LEN: usize = 4 + 1 + 12 + 12 + 12;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 1,
            Payload::U8(_) => 2,
            Payload::U32(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolFile {
    pub grid: Grid,
    pub payload: Payload,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { kind: "VOL1", reason: reason.into() }
}

impl VolFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.payload.len() != self.grid.len() {
            return Err(Error::Shape("payload length does not match dims".into()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.grid.len());
        out.extend_from_slice(MAGIC);
        out.push(self.payload.dtype());
        for d in self.grid.dims {
            let d = u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in self.grid.spacing.iter().chain(&self.grid.origin) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("wrong magic"));
        }
        let dtype = bytes[4];
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let dims = [u32_at(5) as usize, u32_at(9) as usize, u32_at(13) as usize];
        let spacing = [f32_at(17), f32_at(21), f32_at(25)];
        let origin = [f32_at(29), f32_at(33), f32_at(37)];
        let grid = Grid::new(dims, spacing, origin).map_err(|e| bad(e.to_string()))?;
        let n = grid.len();
        let body = &bytes[HEADER_LEN..];
        let width = match dtype {
            1 | 3 => 4,
            2 => 1,
            other => return Err(bad(format!("unknown dtype {other}"))),
        };
        if body.len() != n * width {
            return Err(bad(format!("payload has {} bytes, expected {}", body.len(), n * width)));
        }
        let payload = match dtype {
            1 => Payload::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => Payload::U8(body.to_vec()),
            _ => Payload::U32(body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { grid, payload })
    }

    pub fn from_volume(v: &Volume) -> Self {
        Self { grid: *v.grid(), payload: Payload::F32(v.data().to_vec()) }
    }

    pub fn from_mask(m: &BinaryMask) -> Self {
        Self { grid: *m.grid(), payload: Payload::U8(m.data().to_vec()) }
    }

    pub fn from_labels(grid: Grid, labels: &[u32]) -> Self {
        Self { grid, payload: Payload::U32(labels.to_vec()) }
    }

    pub fn into_volume(self) -> Result<Volume> {
        match self.payload {
            Payload::F32(v) => Volume::new(self.grid, v),
            Payload::U8(v) => Volume::new(self.grid, v.into_iter().map(f32::from).collect()),
            Payload::U32(v) => Volume::new(self.grid, v.into_iter().map(|x| x as f32).collect()),
        }
    }

    /// Masks and label grids become masks (nonzero = 1); scalar volumes are rejected.
    pub fn into_mask(self) -> Result<BinaryMask> {
        match self.payload {
            Payload::U8(v) => BinaryMask::new(self.grid, v.into_iter().map(|x| (x != 0) as u8).collect()),
            Payload::U32(v) => BinaryMask::new(self.grid, v.into_iter().map(|x| (x != 0) as u8).collect()),
            Payload::F32(_) => Err(bad("expected a mask (dtype 2 or 3), found f32 volume")),
        }
    }
}

pub fn write_vol(path: impl AsRef<Path>, file: &VolFile) -> Result<()> {
    let bytes = file.encode()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_vol(path: impl AsRef<Path>) -> Result<VolFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    VolFile::decode(&bytes)
}

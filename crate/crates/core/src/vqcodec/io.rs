//! Codec checkpoints: NET1 blocks for the networks followed by a codebook
//! appendix.
//!
//! ```text
//! [NET1 encoder][NET1 decoder][NET1 discriminator]?   (absent for identity)
//! "VQCB"
//! u32 x8   identity, levels, latent_dim, K, width, gan, restart_every, initialized
//! f64 x2   commitment, gan_weight
//! u64      seed
//! f32      codes[K*D], u64 usage[K], u64 recent[K]
//! u8       1 if codebook Adam follows: u64 step, f32 m[K*D], f32 v[K*D]
//! f32      latent mean[D], latent std[D]
//! ```

use std::path::Path;

use super::{Codebook, Codec, CodecConfig, LatentStats, VqParts};
use crate::diffnet::{AdamState, NetCodec, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VQCB";

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { kind: "codec", reason: reason.into() }
}

fn put_reals(out: &mut Vec<u8>, xs: &[Real]) {
    xs.iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes()));
}

pub fn encode_codec(codec: &Codec, with_adam: bool) -> Vec<u8> {
    let mut out = Vec::new();
    let cfg = codec.config();
    if let Some(vq) = codec.parts() {
        NetCodec::encode(&vq.encoder, with_adam, &mut out);
        NetCodec::encode(&vq.decoder, with_adam, &mut out);
        if let Some(d) = &vq.discriminator {
            NetCodec::encode(d, with_adam, &mut out);
        }
    }
    out.extend_from_slice(MAGIC);
    let initialized = codec.parts().is_some_and(|v| v.initialized);
    let words = [
        cfg.identity as u32,
        cfg.levels as u32,
        cfg.latent_dim as u32,
        cfg.codebook_size as u32,
        cfg.width as u32,
        cfg.gan as u32,
        cfg.restart_every as u32,
        initialized as u32,
    ];
    words.iter().for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
    out.extend_from_slice(&cfg.commitment.to_le_bytes());
    out.extend_from_slice(&cfg.gan_weight.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    if let Some(vq) = codec.parts() {
        put_reals(&mut out, vq.codebook.codes());
        vq.codebook.usage().iter().for_each(|u| out.extend_from_slice(&u.to_le_bytes()));
        vq.recent.iter().for_each(|u| out.extend_from_slice(&u.to_le_bytes()));
        if with_adam {
            out.push(1);
            out.extend_from_slice(&vq.codebook_adam.step.to_le_bytes());
            put_reals(&mut out, &vq.codebook_adam.m);
            put_reals(&mut out, &vq.codebook_adam.v);
        } else {
            out.push(0);
        }
    }
    put_reals(&mut out, &codec.stats().mean);
    put_reals(&mut out, &codec.stats().std);
    out
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn reals(&mut self, n: usize) -> Result<Vec<Real>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real).collect())
    }
}

pub fn decode_codec(bytes: &[u8]) -> Result<Codec> {
    let mut pos = 0;
    let mut nets = Vec::new();
    while bytes.len() >= pos + 4 && &bytes[pos..pos + 4] == b"NET1" {
        let (net, used) = NetCodec::decode(&bytes[pos..])?;
        nets.push(net);
        pos += used;
    }
    let mut r = Reader { b: bytes, pos };
    if r.take(4)? != MAGIC {
        return Err(bad("missing codebook appendix"));
    }
    let mut w = [0u32; 8];
    for v in w.iter_mut() {
        *v = r.u32()?;
    }
    let cfg = CodecConfig {
        identity: w[0] != 0,
        levels: w[1] as usize,
        latent_dim: w[2] as usize,
        codebook_size: w[3] as usize,
        width: w[4] as usize,
        gan: w[5] != 0,
        restart_every: w[6] as usize,
        commitment: r.f64()?,
        gan_weight: r.f64()?,
        seed: r.u64()?,
    };
    let initialized = w[7] != 0;
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    let d = cfg.latent_dim;
    let vq = if cfg.identity {
        if !nets.is_empty() {
            return Err(bad("identity codec carries networks"));
        }
        None
    } else {
        let want = 2 + cfg.gan as usize;
        if nets.len() != want {
            return Err(bad(format!("expected {want} networks, found {}", nets.len())));
        }
        let k = cfg.codebook_size;
        let n = k.checked_mul(d).ok_or_else(|| bad("size overflow"))?;
        let mut codebook = Codebook::new(d, r.reals(n)?).map_err(|e| bad(e.to_string()))?;
        let usage = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        codebook.set_usage(usage)?;
        let recent = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let codebook_adam = match r.take(1)?[0] {
            0 => AdamState::zeros(n),
            1 => {
                let step = r.u64()?;
                AdamState { step, m: r.reals(n)?, v: r.reals(n)? }
            }
            f => return Err(bad(format!("bad adam flag {f}"))),
        };
        let mut it = nets.into_iter();
        let encoder = it.next().unwrap();
        let decoder = it.next().unwrap();
        let discriminator = it.next();
        if encoder.in_channels() != 1 || decoder.in_channels() != d {
            return Err(bad("network shapes disagree with the codec config"));
        }
        Some(VqParts { encoder, decoder, codebook, codebook_adam, discriminator, initialized, recent })
    };
    let stats = LatentStats { mean: r.reals(d)?, std: r.reals(d)? };
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let mut codec = Codec::from_parts(cfg, LatentStats::unit(d), vq);
    codec.set_stats(stats).map_err(|e| bad(e.to_string()))?;
    Ok(codec)
}

pub fn write_codec(path: impl AsRef<Path>, codec: &Codec, with_adam: bool) -> Result<()> {
    std::fs::write(path, encode_codec(codec, with_adam))?;
    Ok(())
}

pub fn read_codec(path: impl AsRef<Path>) -> Result<Codec> {
    decode_codec(&std::fs::read(path)?)
}

//! Architecture table for the three pipeline networks.
//!
//! | kind       | input                  | output                               |
//! |------------|------------------------|--------------------------------------|
//! | Denoiser   | `(D, x, y, z)` + t     | `(D, x, y, z)` noise estimate        |
//! | Encoder    | `(1, x, y, z)`         | `(D, x/2^L, y/2^L, z/2^L)`           |
//! | Decoder    | `(D, x, y, z)`         | `(1, x*2^L, y*2^L, z*2^L)`           |
//! | Classifier | `(D, x, y, z)` + t     | `(2, 1, 1, 1)` logits (healthy, unhealthy) |
//!
//! Spatial extents must be divisible by `2^levels`.

use super::graph::{Graph, GraphBuilder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Custom = 0,
    Denoiser = 1,
    Encoder = 2,
    Decoder = 3,
    Classifier = 4,
}

impl ArchKind {
    pub fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            0 => ArchKind::Custom,
            1 => ArchKind::Denoiser,
            2 => ArchKind::Encoder,
            3 => ArchKind::Decoder,
            4 => ArchKind::Classifier,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// latent / data channels
    pub channels: usize,
    /// base width
    pub width: usize,
    /// number of x2 resolution changes
    pub levels: usize,
}

impl ArchSpec {
    pub fn custom() -> Self {
        Self { kind: ArchKind::Custom, channels: 0, width: 0, levels: 0 }
    }

    pub fn denoiser(channels: usize, width: usize, levels: usize) -> Self {
        Self { kind: ArchKind::Denoiser, channels, width, levels }
    }

    pub fn encoder(latent_dim: usize, width: usize, levels: usize) -> Self {
        Self { kind: ArchKind::Encoder, channels: latent_dim, width, levels }
    }

    pub fn decoder(latent_dim: usize, width: usize, levels: usize) -> Self {
        Self { kind: ArchKind::Decoder, channels: latent_dim, width, levels }
    }

    pub fn classifier(channels: usize, width: usize, levels: usize) -> Self {
        Self { kind: ArchKind::Classifier, channels, width, levels }
    }

    fn width_at(&self, level: usize) -> usize {
        self.width * (1usize << level.min(1))
    }

    pub fn graph(&self) -> Result<Graph> {
        if self.kind != ArchKind::Custom && (self.channels == 0 || self.width == 0) {
            return Err(Error::InvalidArgument(format!("architecture {self:?} needs positive channels and width")));
        }
        Ok(match self.kind {
            ArchKind::Custom => return Err(Error::InvalidArgument("custom architectures carry their own graph".into())),
            ArchKind::Denoiser => self.denoiser_graph(),
            ArchKind::Encoder => self.encoder_graph(),
            ArchKind::Decoder => self.decoder_graph(),
            ArchKind::Classifier => self.classifier_graph(),
        })
    }

    fn denoiser_graph(&self) -> Graph {
        let mut b = GraphBuilder::new(self.channels);
        let x = b.input();
        let h = b.conv(x, self.width_at(0), 3, 1);
        let mut h = b.res_block(h, true);
        let mut skips = vec![h];
        for l in 1..=self.levels {
            let a = b.norm_act(h);
            let d = b.conv(a, self.width_at(l), 3, 2);
            h = b.res_block(d, true);
            skips.push(h);
        }
        skips.pop();
        for l in (1..=self.levels).rev() {
            let u = b.upsample(h);
            let u = b.conv(u, self.width_at(l - 1), 3, 1);
            let s = skips.pop().unwrap();
            let m = b.add(u, s);
            h = b.res_block(m, true);
        }
        let a = b.norm_act(h);
        b.conv_zero(a, self.channels, 3);
        b.finish()
    }

    fn encoder_graph(&self) -> Graph {
        let mut b = GraphBuilder::new(1);
        let x = b.input();
        let mut h = b.conv(x, self.width, 3, 1);
        for l in 1..=self.levels {
            let a = b.norm_act(h);
            h = b.conv(a, self.width * (1 << l), 3, 2);
            if l < self.levels {
                let a = b.norm_act(h);
                h = b.conv(a, self.width * (1 << l), 3, 1);
            }
        }
        let a = b.norm_act(h);
        b.conv(a, self.channels, 3, 1);
        b.finish()
    }

    fn decoder_graph(&self) -> Graph {
        let mut b = GraphBuilder::new(self.channels);
        let x = b.input();
        let top = self.width * (1 << self.levels);
        let mut h = b.conv(x, top, 3, 1);
        let a = b.norm_act(h);
        h = b.conv(a, top, 3, 1);
        for l in (0..self.levels).rev() {
            let w = (self.width * (1 << l)).max(4);
            let a = b.norm_act(h);
            let c = b.conv(a, w, 3, 1);
            h = b.upsample(c);
            if l > 0 {
                let a = b.norm_act(h);
                h = b.conv(a, w, 3, 1);
            }
        }
        let a = b.norm_act(h);
        b.conv(a, 1, 3, 1);
        b.finish()
    }

    fn classifier_graph(&self) -> Graph {
        let mut b = GraphBuilder::new(self.channels);
        let x = b.input();
        let h = b.conv(x, self.width_at(0), 3, 1);
        let mut h = b.res_block(h, true);
        for l in 1..=self.levels {
            let a = b.norm_act(h);
            let d = b.conv(a, self.width_at(l), 3, 2);
            h = b.res_block(d, true);
        }
        // no norm before pooling: per-channel normalisation would flatten the pooled means
        let a = b.silu(h);
        let p = b.global_pool(a);
        b.dense(p, 2, true);
        b.finish()
    }

    pub fn to_words(&self) -> [u32; 4] {
        [self.kind as u32, self.channels as u32, self.width as u32, self.levels as u32]
    }

    pub fn from_words(w: [u32; 4]) -> Option<Self> {
        Some(Self { kind: ArchKind::from_u32(w[0])?, channels: w[1] as usize, width: w[2] as usize, levels: w[3] as usize })
    }
}

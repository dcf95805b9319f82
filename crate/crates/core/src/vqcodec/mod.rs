//! Vector-quantized autoencoder that maps kidney patches to the latent grid
//! the diffusion model and the guidance classifier work in.
//!
//! The encoder is a strided conv stack (`levels` halvings), each latent site is
//! snapped to its nearest codebook entry, and the decoder maps codes back to
//! intensities in `[-1, 1]`. Training uses the usual VQ objective with a
//! straight-through estimator. An optional hinge-loss patch discriminator adds
//! an adversarial term.
//!
//! [`Codec::identity`] is a pass-through codec (one channel, no quantization)
//! so diffusion and guidance can run directly in voxel space.

mod codebook;
mod io;

pub use codebook::Codebook;
pub use io::{read_codec, write_codec};

use rand::seq::index::sample;
use rand::Rng as _;

use crate::diffnet::{adam_update, sum_grads, AdamState, ArchSpec, Graph, GraphBuilder, Network, Real, TensorGrid, TrainConfig};
use crate::error::{Error, Result};
use crate::volgrid::{Grid, Volume};
use crate::{par, rng};

const TAG_INIT: u64 = 0xC0DE_0001;
const TAG_RESTART: u64 = 0xC0DE_0002;
const TAG_BATCH: u64 = 0xC0DE_0003;

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub identity: bool,
    pub levels: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub width: usize,
    pub commitment: f64,
    /// Adversarial term from a 3-layer patch discriminator (hinge loss).
    pub gan: bool,
    pub gan_weight: f64,
    /// Codes unused for this many steps are re-seeded from encoder outputs; 0 disables.
    pub restart_every: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            identity: false,
            levels: 2,
            latent_dim: 8,
            codebook_size: 64,
            width: 8,
            commitment: 0.25,
            gan: false,
            gan_weight: 0.1,
            restart_every: 25,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identity {
            return Ok(());
        }
        if self.latent_dim == 0 || self.width == 0 || self.levels == 0 {
            return Err(Error::InvalidArgument("codec needs levels, latent_dim and width >= 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::InvalidArgument("codebook_size must be at least 2".into()));
        }
        if !(self.commitment >= 0.0) || !(self.gan_weight >= 0.0) {
            return Err(Error::InvalidArgument("commitment and gan_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Continuous latent values plus the nearest-code index of every site.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub values: TensorGrid,
    /// `None` for the identity codec.
    pub indices: Option<Vec<u32>>,
    /// Geometry of the volume this latent decodes to.
    pub source: Grid,
}

impl LatentGrid {
    pub fn shape(&self) -> [usize; 4] {
        self.values.shape()
    }
}

/// Per-channel affine map that brings latents to roughly unit scale for diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

impl LatentStats {
    pub fn unit(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CodecLosses {
    pub reconstruction: f64,
    pub codebook: f64,
    /// Already weighted by the commitment coefficient.
    pub commitment: f64,
    pub adversarial: Option<f64>,
    pub discriminator: Option<f64>,
}

impl CodecLosses {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment + self.adversarial.unwrap_or(0.0)
    }

    fn add(&mut self, o: &CodecLosses) {
        self.reconstruction += o.reconstruction;
        self.codebook += o.codebook;
        self.commitment += o.commitment;
        self.adversarial = o.adversarial.map(|a| a + self.adversarial.unwrap_or(0.0));
        self.discriminator = o.discriminator.map(|a| a + self.discriminator.unwrap_or(0.0));
    }

    fn scaled(mut self, k: f64) -> Self {
        self.reconstruction *= k;
        self.codebook *= k;
        self.commitment *= k;
        self.adversarial = self.adversarial.map(|a| a * k);
        self.discriminator = self.discriminator.map(|a| a * k);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct VqParts {
    pub encoder: Network,
    pub decoder: Network,
    pub codebook: Codebook,
    pub codebook_adam: AdamState,
    pub discriminator: Option<Network>,
    pub initialized: bool,
    /// usage since the last dead-code restart
    pub recent: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    cfg: CodecConfig,
    stats: LatentStats,
    vq: Option<VqParts>,
}

fn discriminator_graph(width: usize) -> Graph {
    let mut b = GraphBuilder::new(1);
    let x = b.input();
    let h = b.conv(x, width, 3, 2);
    let h = b.silu(h);
    let h = b.conv(h, 2 * width, 3, 2);
    let h = b.silu(h);
    b.conv(h, 1, 3, 1);
    b.finish()
}

struct SampleGrads {
    enc: Vec<Real>,
    dec: Vec<Real>,
    codes: Vec<Real>,
    disc: Option<Vec<Real>>,
    indices: Vec<u32>,
    latent: TensorGrid,
    losses: CodecLosses,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.identity {
            return Ok(Self::identity());
        }
        let enc_seed = rng::derive(cfg.seed, &[1]);
        let dec_seed = rng::derive(cfg.seed, &[2]);
        let encoder = Network::build(ArchSpec::encoder(cfg.latent_dim, cfg.width, cfg.levels), enc_seed)?;
        let decoder = Network::build(ArchSpec::decoder(cfg.latent_dim, cfg.width, cfg.levels), dec_seed)?;
        let discriminator = if cfg.gan {
            Some(Network::from_graph(ArchSpec::custom(), discriminator_graph(cfg.width), rng::derive(cfg.seed, &[3]))?)
        } else {
            None
        };
        let mut r = rng::stream(cfg.seed, &[4]);
        let codes = (0..cfg.codebook_size * cfg.latent_dim).map(|_| r.gen_range(-1.0..1.0) as Real).collect();
        let codebook = Codebook::new(cfg.latent_dim, codes)?;
        let n = cfg.codebook_size * cfg.latent_dim;
        Ok(Self {
            stats: LatentStats::unit(cfg.latent_dim),
            vq: Some(VqParts {
                encoder,
                decoder,
                codebook,
                codebook_adam: AdamState::zeros(n),
                discriminator,
                initialized: false,
                recent: vec![0; cfg.codebook_size],
            }),
            cfg,
        })
    }

    pub fn identity() -> Self {
        let cfg = CodecConfig { identity: true, levels: 0, latent_dim: 1, ..CodecConfig::default() };
        Self { cfg, stats: LatentStats::unit(1), vq: None }
    }

    pub(crate) fn from_parts(cfg: CodecConfig, stats: LatentStats, vq: Option<VqParts>) -> Self {
        Self { cfg, stats, vq }
    }

    pub(crate) fn parts(&self) -> Option<&VqParts> {
        self.vq.as_ref()
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn is_identity(&self) -> bool {
        self.vq.is_none()
    }

    pub fn levels(&self) -> usize {
        self.cfg.levels
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.vq.as_ref().map(|v| &v.codebook)
    }

    pub fn stats(&self) -> &LatentStats {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: LatentStats) -> Result<()> {
        let d = self.latent_dim();
        if stats.mean.len() != d || stats.std.len() != d || stats.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("latent stats must have latent_dim entries with std > 0".into()));
        }
        self.stats = stats;
        Ok(())
    }

    /// Training steps taken so far.
    pub fn step(&self) -> u64 {
        self.vq.as_ref().map_or(0, |v| v.encoder.adam().step)
    }

    /// Latent `(D, x, y, z)` shape for a volume of `dims`.
    pub fn latent_shape(&self, dims: [usize; 3]) -> Result<[usize; 4]> {
        let f = 1usize << self.cfg.levels;
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Shape(format!("volume dims {dims:?} are not divisible by {f}")));
        }
        Ok([self.cfg.latent_dim, dims[0] / f, dims[1] / f, dims[2] / f])
    }

    /// Continuous latent of `vol` (values expected in `[-1, 1]`).
    pub fn encode(&self, vol: &Volume) -> Result<LatentGrid> {
        self.latent_shape(vol.dims())?;
        let x = TensorGrid::from_volume(vol);
        match &self.vq {
            None => Ok(LatentGrid { values: x, indices: None, source: *vol.grid() }),
            Some(vq) => {
                let values = vq.encoder.forward(&x, None)?;
                let (_, idx) = vq.codebook.quantize(&values)?;
                Ok(LatentGrid { values, indices: Some(idx), source: *vol.grid() })
            }
        }
    }

    /// Replace every site by its nearest code. Identity codecs return the input.
    pub fn quantize(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        match &self.vq {
            None => Ok(latent.clone()),
            Some(vq) => quantize(&vq.codebook, latent),
        }
    }

    /// Quantize, decode and clamp to `[-1, 1]`.
    pub fn decode(&self, latent: &LatentGrid) -> Result<Volume> {
        let expect = self.latent_shape(latent.source.dims)?;
        if latent.values.shape() != expect {
            return Err(Error::Shape(format!("latent {:?} does not match codec shape {expect:?}", latent.values.shape())));
        }
        let y = match &self.vq {
            None => latent.values.clone(),
            Some(vq) => {
                let (q, _) = vq.codebook.quantize(&latent.values)?;
                vq.decoder.forward(&q, None)?
            }
        };
        y.map(|v| v.clamp(-1.0, 1.0)).to_volume(latent.source)
    }

    /// Latent values in diffusion space: per-channel `(v - mean) / std`.
    pub fn normalize(&self, latent: &LatentGrid) -> TensorGrid {
        let mut t = latent.values.clone();
        for c in 0..t.channels() {
            let (m, s) = (self.stats.mean[c], self.stats.std[c]);
            t.channel_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        t
    }

    /// Inverse of [`Codec::normalize`]; recomputes code indices.
    pub fn denormalize(&self, z: &TensorGrid, source: Grid) -> Result<LatentGrid> {
        let expect = self.latent_shape(source.dims)?;
        if z.shape() != expect {
            return Err(Error::Shape(format!("latent {:?} does not match codec shape {expect:?}", z.shape())));
        }
        let mut values = z.clone();
        for c in 0..values.channels() {
            let (m, s) = (self.stats.mean[c], self.stats.std[c]);
            values.channel_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
        }
        let indices = match &self.vq {
            None => None,
            Some(vq) => Some(vq.codebook.quantize(&values)?.1),
        };
        Ok(LatentGrid { values, indices, source })
    }

    /// Fit the per-channel latent normalisation on encoder outputs of `volumes`.
    pub fn fit_latent_stats(&mut self, volumes: &[Volume]) -> Result<()> {
        if self.is_identity() || volumes.is_empty() {
            return Ok(());
        }
        let lats = par::map(volumes, |v| self.encode(v)).into_iter().collect::<Result<Vec<_>>>()?;
        let d = self.latent_dim();
        let mut stats = LatentStats::unit(d);
        for c in 0..d {
            let vals = lats.iter().flat_map(|l| l.values.channel(c).iter().map(|&v| v as f64));
            let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
            for v in vals {
                n += 1.0;
                s += v;
                s2 += v * v;
            }
            let mean = s / n;
            let sd = (s2 / n - mean * mean).max(0.0).sqrt();
            stats.mean[c] = mean as Real;
            stats.std[c] = if sd > 1e-6 { sd as Real } else { 1.0 };
        }
        self.stats = stats;
        Ok(())
    }

    /// Seed the codebook with encoder outputs drawn from random sites of `batch`.
    fn init_codebook(&mut self, batch: &[Volume]) -> Result<()> {
        let seed = self.cfg.seed;
        let vq = self.vq.as_mut().expect("vq codec");
        let lats = par::map(batch, |v| vq.encoder.forward(&TensorGrid::from_volume(v), None))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut r = rng::stream(seed, &[TAG_INIT]);
        let (k, d) = (vq.codebook.len(), vq.codebook.dim());
        let sites = lats[0].sites();
        let total = sites * lats.len();
        let picks: Vec<usize> = if total >= k {
            sample(&mut r, total, k).into_vec()
        } else {
            (0..k).map(|_| r.gen_range(0..total)).collect()
        };
        for (j, p) in picks.into_iter().enumerate() {
            let (b, s) = (p / sites, p % sites);
            for c in 0..d {
                let jitter = if total >= k { 0.0 } else { 1e-3 * rng::normal_f32(&mut r) as Real };
                vq.codebook.codes_mut()[j * d + c] = lats[b].data()[c * sites + s] + jitter;
            }
        }
        vq.initialized = true;
        Ok(())
    }

    fn sample_grads(&self, vol: &Volume) -> Result<SampleGrads> {
        let vq = self.vq.as_ref().expect("vq codec");
        let beta = self.cfg.commitment;
        let x = TensorGrid::from_volume(vol);
        let te = vq.encoder.trace(&x, None)?;
        let z = te.output();
        let (q, indices) = vq.codebook.quantize(z)?;
        let td = vq.decoder.trace(&q, None)?;
        let y = td.output();
        let nvox = x.len() as f64;
        let mut losses = CodecLosses::default();
        let mut gy = TensorGrid::zeros(y.shape());
        for ((g, &a), &b) in gy.data_mut().iter_mut().zip(y.data()).zip(x.data()) {
            let d = a as f64 - b as f64;
            losses.reconstruction += d * d / nvox;
            *g = (2.0 * d / nvox) as Real;
        }
        let mut disc_grads = None;
        if let Some(disc) = &vq.discriminator {
            let w = self.cfg.gan_weight;
            let tf = disc.trace(y, None)?;
            let nd = tf.output().len() as f64;
            losses.adversarial = Some(-w * tf.output().mean());
            let mut scratch = vec![0.0 as Real; disc.param_count()];
            let gyd = disc.backprop(&tf, &TensorGrid::filled(tf.output().shape(), (-w / nd) as Real), &mut scratch)?;
            gy.add_assign(&gyd);
            // hinge loss on real and (detached) fake
            let tr = disc.trace(&x, None)?;
            let mut gd = vec![0.0 as Real; disc.param_count()];
            let mut dl = 0.0;
            let g_real = tr.output().map(|v| if v < 1.0 { (-1.0 / nd) as Real } else { 0.0 });
            let g_fake = tf.output().map(|v| if v > -1.0 { (1.0 / nd) as Real } else { 0.0 });
            dl += tr.output().data().iter().map(|&v| (1.0 - v as f64).max(0.0)).sum::<f64>() / nd;
            dl += tf.output().data().iter().map(|&v| (1.0 + v as f64).max(0.0)).sum::<f64>() / nd;
            disc.backprop(&tr, &g_real, &mut gd)?;
            disc.backprop(&tf, &g_fake, &mut gd)?;
            losses.discriminator = Some(dl);
            disc_grads = Some(gd);
        }
        let mut dec = vec![0.0 as Real; vq.decoder.param_count()];
        let gq = vq.decoder.backprop(&td, &gy, &mut dec)?;
        let m = z.len() as f64;
        let sites = z.sites();
        let d = vq.codebook.dim();
        let mut gz = gq;
        let mut codes = vec![0.0 as Real; vq.codebook.codes().len()];
        for c in 0..d {
            for s in 0..sites {
                let i = c * sites + s;
                let diff = z.data()[i] as f64 - q.data()[i] as f64;
                losses.codebook += diff * diff / m;
                gz.data_mut()[i] += (2.0 * beta * diff / m) as Real;
                codes[indices[s] as usize * d + c] -= (2.0 * diff / m) as Real;
            }
        }
        losses.commitment = beta * losses.codebook;
        let mut enc = vec![0.0 as Real; vq.encoder.param_count()];
        vq.encoder.backprop(&te, &gz, &mut enc)?;
        Ok(SampleGrads { enc, dec, codes, disc: disc_grads, indices, latent: z.clone(), losses })
    }

    /// One optimisation step on `batch`: reconstruction MSE + codebook +
    /// commitment (+ adversarial) loss, straight-through gradients, Adam.
    /// Returns batch-mean losses. A no-op for the identity codec.
    pub fn train_step(&mut self, batch: &[Volume], cfg: &TrainConfig) -> Result<CodecLosses> {
        if self.is_identity() {
            return Ok(CodecLosses::default());
        }
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        for v in batch {
            self.latent_shape(v.dims())?;
        }
        if !self.vq.as_ref().unwrap().initialized {
            self.init_codebook(batch)?;
        }
        let parts = par::map(batch, |v| self.sample_grads(v)).into_iter().collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut losses = CodecLosses::default();
        parts.iter().for_each(|p| losses.add(&p.losses));
        let restart_every = self.cfg.restart_every as u64;
        let seed = self.cfg.seed;
        let vq = self.vq.as_mut().unwrap();
        let (mut enc, mut dec, mut codes, mut disc) = (vec![], vec![], vec![], vec![]);
        let mut latents = Vec::with_capacity(parts.len());
        for p in parts {
            vq.codebook.record(&p.indices);
            p.indices.iter().for_each(|&i| vq.recent[i as usize] += 1);
            enc.push(p.enc);
            dec.push(p.dec);
            codes.push(p.codes);
            disc.extend(p.disc);
            latents.push(p.latent);
        }
        for (net, g) in [(&mut vq.encoder, enc), (&mut vq.decoder, dec)] {
            let n = net.param_count();
            net.accumulate(&sum_grads(g, n));
            net.scale_grads(inv as Real);
            net.adam_step(cfg);
        }
        if let Some(dnet) = vq.discriminator.as_mut() {
            let n = dnet.param_count();
            dnet.accumulate(&sum_grads(disc, n));
            dnet.scale_grads(inv as Real);
            dnet.adam_step(cfg);
        }
        let n = vq.codebook.codes().len();
        let mut gc = sum_grads(codes, n);
        gc.iter_mut().for_each(|g| *g *= inv as Real);
        adam_update(vq.codebook.codes_mut(), &mut gc, &mut vq.codebook_adam, cfg.learning_rate);
        let step = vq.encoder.adam().step;
        if restart_every > 0 && step % restart_every == 0 {
            restart_dead_codes(vq, &latents, rng::stream(seed, &[TAG_RESTART, step]));
        }
        Ok(losses.scaled(inv))
    }

    /// Run `cfg.budget` steps on random batches from `volumes`, then refit the
    /// latent normalisation (skipped for a zero budget). `on_step` sees the step number and batch losses.
    pub fn train(&mut self, volumes: &[Volume], cfg: &TrainConfig, mut on_step: impl FnMut(u64, &CodecLosses)) -> Result<Vec<CodecLosses>> {
        cfg.validate()?;
        if self.is_identity() {
            return Ok(vec![]);
        }
        if volumes.is_empty() && cfg.budget > 0 {
            return Err(Error::InvalidArgument("no training volumes".into()));
        }
        let mut log = Vec::with_capacity(cfg.budget);
        for _ in 0..cfg.budget {
            let step = self.step();
            let mut r = rng::stream(cfg.seed, &[TAG_BATCH, step]);
            let b = cfg.batch_size.min(volumes.len());
            let batch: Vec<Volume> = sample(&mut r, volumes.len(), b).into_iter().map(|i| volumes[i].clone()).collect();
            let l = self.train_step(&batch, cfg)?;
            on_step(step + 1, &l);
            log.push(l);
        }
        if cfg.budget > 0 {
            self.fit_latent_stats(volumes)?;
        }
        Ok(log)
    }
}

fn restart_dead_codes(vq: &mut VqParts, latents: &[TensorGrid], mut r: rng::Rng) {
    let d = vq.codebook.dim();
    let sites = latents[0].sites();
    for j in 0..vq.recent.len() {
        if vq.recent[j] > 0 {
            continue;
        }
        let b = r.gen_range(0..latents.len());
        let s = r.gen_range(0..sites);
        for c in 0..d {
            vq.codebook.codes_mut()[j * d + c] = latents[b].data()[c * sites + s];
            vq.codebook_adam.m[j * d + c] = 0.0;
            vq.codebook_adam.v[j * d + c] = 0.0;
        }
    }
    vq.recent.iter_mut().for_each(|u| *u = 0);
}

/// Codebook term `mean((sg(z) - e)^2)` and weighted commitment term
/// `beta * mean((z - sg(e))^2)` for a latent and its quantized values.
pub fn vq_loss_terms(z: &[Real], e: &[Real], beta: f64) -> (f64, f64) {
    let m = z.len().max(1) as f64;
    let cb = z.iter().zip(e).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / m;
    (cb, beta * cb)
}

/// Snap each site of `latent` to its nearest code (lowest index on ties).
pub fn quantize(codebook: &Codebook, latent: &LatentGrid) -> Result<LatentGrid> {
    if codebook.is_empty() {
        return Err(Error::InvalidArgument("empty codebook".into()));
    }
    let (values, idx) = codebook.quantize(&latent.values)?;
    Ok(LatentGrid { values, indices: Some(idx), source: latent.source })
}

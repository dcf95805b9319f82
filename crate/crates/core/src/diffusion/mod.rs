//! Forward noising, DDPM ancestral sampling, deterministic DDIM in both time
//! directions, classifier guidance, and the noise-then-denoise healthy
//! reconstruction used for anomaly maps.
//!
//! All per-element arithmetic runs in f64 and is rounded once on store.

pub mod analytic;
mod schedule;
mod train;

pub use schedule::{make_schedule, step_sequence, NoiseSchedule, ScheduleKind, BETA_END, BETA_START};
pub use train::{denoiser_loss, train_denoiser};

use crate::diffnet::{Network, Real, TensorGrid};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::volgrid::Volume;
use crate::vqcodec::Codec;

/// ε̂(x_t, t)
pub trait EpsModel: Sync {
    fn eps(&self, x: &TensorGrid, t: usize) -> Result<TensorGrid>;
}

/// ∇ₓ log p(healthy | x, t)
pub trait GuidanceModel: Sync {
    fn grad_log_healthy(&self, x: &TensorGrid, t: usize) -> Result<TensorGrid>;
}

impl EpsModel for Network {
    fn eps(&self, x: &TensorGrid, t: usize) -> Result<TensorGrid> {
        self.forward(x, Some(t))
    }
}

/// A guidance model with its strength `s`.
#[derive(Clone, Copy)]
pub struct Guidance<'a> {
    pub model: &'a dyn GuidanceModel,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Ddpm,
    Ddim,
}

impl SamplerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMode::Ddpm => "ddpm",
            SamplerMode::Ddim => "ddim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(SamplerMode::Ddpm),
            "ddim" => Ok(SamplerMode::Ddim),
            _ => Err(Error::InvalidArgument(format!("unknown sampler mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// noise level L
    pub level: usize,
    /// guidance strength s
    pub scale: f64,
    /// DDIM stride
    pub stride: usize,
    /// fixed-point refinement iterations per DDIM inversion step (0..=3)
    pub refine: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { mode: SamplerMode::Ddpm, level: 500, scale: 1600.0, stride: 20, refine: 0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.level > schedule.steps() {
            return Err(Error::InvalidArgument(format!("noise level {} exceeds T = {}", self.level, schedule.steps())));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument("guidance scale must be finite and >= 0".into()));
        }
        if self.stride == 0 || self.refine > 3 {
            return Err(Error::InvalidArgument("stride must be >= 1 and refine <= 3".into()));
        }
        Ok(())
    }
}

fn zip3(a: &TensorGrid, b: &TensorGrid, f: impl Fn(f64, f64) -> f64) -> Result<TensorGrid> {
    a.zip_map(b, |x, y| f(x as f64, y as f64) as Real)
}

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε
pub fn q_sample(x0: &TensorGrid, t: usize, eps: &TensorGrid, schedule: &NoiseSchedule) -> Result<TensorGrid> {
    schedule.check_t(t)?;
    if t == 0 {
        x0.check_same(eps)?;
        return Ok(x0.clone());
    }
    let (a, s) = (schedule.alpha_bar(t).sqrt(), schedule.noise_scale(t));
    zip3(x0, eps, |x, e| a * x + s * e)
}

/// ε̂ − s·√(1−ᾱ_t)·∇ log p(healthy)
pub fn guided_eps(eps: &TensorGrid, grad: &TensorGrid, scale: f64, t: usize, schedule: &NoiseSchedule) -> Result<TensorGrid> {
    guided_eps_at(eps, grad, scale, schedule.noise_scale(t))
}

/// [`guided_eps`] with √(1−ᾱ_t) given directly.
pub fn guided_eps_at(eps: &TensorGrid, grad: &TensorGrid, scale: f64, noise_scale: f64) -> Result<TensorGrid> {
    let k = scale * noise_scale;
    zip3(eps, grad, |e, g| e - k * g)
}

/// Noise prediction at (x, t), guided when a nonzero-strength guidance is given.
pub fn predict_eps(model: &dyn EpsModel, x: &TensorGrid, t: usize, schedule: &NoiseSchedule, guidance: Option<Guidance>) -> Result<TensorGrid> {
    let eps = model.eps(x, t)?;
    eps.check_same(x)?;
    match guidance {
        Some(g) if g.scale > 0.0 => {
            let grad = g.model.grad_log_healthy(x, t)?;
            guided_eps(&eps, &grad, g.scale, t, schedule)
        }
        _ => Ok(eps),
    }
}

/// DDPM ancestral step t → t−1.
pub fn ddpm_step(
    model: &dyn EpsModel,
    x: &TensorGrid,
    t: usize,
    schedule: &NoiseSchedule,
    guidance: Option<Guidance>,
    rng: &mut Rng,
) -> Result<TensorGrid> {
    if t == 0 {
        return Err(Error::InvalidArgument("ddpm_step needs t >= 1".into()));
    }
    schedule.check_t(t)?;
    let eps = predict_eps(model, x, t, schedule, guidance)?;
    let k = schedule.beta(t) / schedule.noise_scale(t);
    let ra = schedule.alpha(t).sqrt();
    let mean = zip3(x, &eps, |x, e| (x - k * e) / ra)?;
    let sigma = schedule.posterior_variance(t).sqrt();
    if t == 1 {
        return Ok(mean);
    }
    let mut out = mean;
    for v in out.data_mut() {
        *v = (*v as f64 + sigma * rng::normal_f32(rng) as f64) as Real;
    }
    Ok(out)
}

/// Generalised DDIM update with stochasticity η: returns the mean of
/// x_{t_prev} and its standard deviation. η = 0 is DDIM; η = 1 with
/// consecutive steps reproduces the DDPM posterior mean and variance.
pub fn eta_step(x: &TensorGrid, eps: &TensorGrid, t: usize, t_prev: usize, eta: f64, schedule: &NoiseSchedule) -> Result<(TensorGrid, f64)> {
    let (ab, ap) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let var = if t_prev == 0 || eta == 0.0 { 0.0 } else { eta * eta * (1.0 - ap) / (1.0 - ab) * (1.0 - ab / ap) };
    let dir = (1.0 - ap - var).max(0.0).sqrt();
    let (sa, sn, sp) = (ab.sqrt(), (1.0 - ab).sqrt(), ap.sqrt());
    let mean = zip3(x, eps, |x, e| sp * (x - sn * e) / sa + dir * e)?;
    Ok((mean, var.sqrt()))
}

/// Deterministic (η = 0) DDIM step t → t_prev.
pub fn ddim_step(
    model: &dyn EpsModel,
    x: &TensorGrid,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    guidance: Option<Guidance>,
) -> Result<TensorGrid> {
    schedule.check_t(t)?;
    if t_prev > t {
        return Err(Error::InvalidArgument(format!("ddim_step needs t_prev <= t, got {t_prev} > {t}")));
    }
    if t_prev == t {
        return Ok(x.clone());
    }
    let eps = predict_eps(model, x, t, schedule, guidance)?;
    Ok(eta_step(x, &eps, t, t_prev, 0.0, schedule)?.0)
}

/// One DDIM step run forwards in time, t_prev → t, with ε̂ taken at the
/// current point and time label `t`.
fn ddim_invert_step(model: &dyn EpsModel, x: &TensorGrid, t_prev: usize, t: usize, schedule: &NoiseSchedule, refine: usize) -> Result<TensorGrid> {
    let (ap, ab) = (schedule.alpha_bar(t_prev), schedule.alpha_bar(t));
    let (sp, snp, sa, sn) = (ap.sqrt(), (1.0 - ap).sqrt(), ab.sqrt(), (1.0 - ab).sqrt());
    let advance = |eps: &TensorGrid| zip3(x, eps, |x, e| sa * (x - snp * e) / sp + sn * e);
    let mut next = advance(&model.eps(x, t)?)?;
    for _ in 0..refine {
        next = advance(&model.eps(&next, t)?)?;
    }
    Ok(next)
}

/// Deterministically carry x0 to level L along the DDIM step sequence.
pub fn ddim_encode(model: &dyn EpsModel, x0: &TensorGrid, level: usize, schedule: &NoiseSchedule, stride: usize, refine: usize) -> Result<TensorGrid> {
    schedule.check_t(level)?;
    let seq = step_sequence(level, stride);
    let mut x = x0.clone();
    for w in seq.windows(2).rev() {
        x = ddim_invert_step(model, &x, w[1], w[0], schedule, refine)?;
    }
    Ok(x)
}

/// DDIM from level L back to 0 along the step sequence.
pub fn ddim_sample(model: &dyn EpsModel, x: &TensorGrid, level: usize, schedule: &NoiseSchedule, stride: usize, guidance: Option<Guidance>) -> Result<TensorGrid> {
    schedule.check_t(level)?;
    let mut x = x.clone();
    for w in step_sequence(level, stride).windows(2) {
        x = ddim_step(model, &x, w[0], w[1], schedule, guidance)?;
    }
    Ok(x)
}

/// DDPM ancestral sampling from level L back to 0.
pub fn ddpm_sample(model: &dyn EpsModel, x: &TensorGrid, level: usize, schedule: &NoiseSchedule, guidance: Option<Guidance>, rng: &mut Rng) -> Result<TensorGrid> {
    schedule.check_t(level)?;
    let mut x = x.clone();
    for t in (1..=level).rev() {
        x = ddpm_step(model, &x, t, schedule, guidance, rng)?;
    }
    Ok(x)
}

/// Healthy reconstruction of `x`: encode, noise to level L (DDIM inversion or
/// q_sample), denoise back with optional guidance, decode.
pub fn reconstruct_healthy(
    x: &Volume,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    codec: &Codec,
    denoiser: &dyn EpsModel,
    classifier: Option<&dyn GuidanceModel>,
) -> Result<Volume> {
    cfg.validate(schedule)?;
    let guidance = match (cfg.scale > 0.0, classifier) {
        (false, _) => None,
        (true, Some(model)) => Some(Guidance { model, scale: cfg.scale }),
        (true, None) => return Err(Error::MissingArtifact("guidance scale > 0 requires a classifier".into())),
    };
    let latent = codec.encode(x)?;
    if cfg.level == 0 {
        return codec.decode(&latent);
    }
    let z0 = codec.normalize(&latent);
    let z = match cfg.mode {
        SamplerMode::Ddim => {
            let zl = ddim_encode(denoiser, &z0, cfg.level, schedule, cfg.stride, cfg.refine)?;
            ddim_sample(denoiser, &zl, cfg.level, schedule, cfg.stride, guidance)?
        }
        SamplerMode::Ddpm => {
            let mut r = rng::seeded(cfg.seed);
            let noise = TensorGrid::new(z0.shape(), rng::normal_vec(&mut r, z0.len()).into_iter().map(|v| v as Real).collect())?;
            let zl = q_sample(&z0, cfg.level, &noise, schedule)?;
            ddpm_sample(denoiser, &zl, cfg.level, schedule, guidance, &mut r)?
        }
    };
    codec.decode(&codec.denormalize(&z, latent.source)?)
}

/// |x − x̂| voxelwise.
pub fn anomaly_map(x: &Volume, recon: &Volume) -> Result<Volume> {
    x.grid().check_matches(recon.grid())?;
    Volume::new(*x.grid(), x.data().iter().zip(recon.data()).map(|(a, b)| (a - b).abs()).collect())
}

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// β linear from 1e-4 to 0.02, endpoints inclusive.
    Linear,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// β, α and ᾱ indexed `1..=T`; index 0 holds ᾱ₀ = 1 (β₀ = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    let mut betas = vec![0.0; steps + 1];
    for (t, b) in betas.iter_mut().enumerate().skip(1) {
        *b = match kind {
            ScheduleKind::Linear if steps == 1 => BETA_START,
            ScheduleKind::Linear => BETA_START + (BETA_END - BETA_START) * (t - 1) as f64 / (steps - 1) as f64,
        };
    }
    let mut alpha_bars = vec![1.0; steps + 1];
    for t in 1..=steps {
        alpha_bars[t] = alpha_bars[t - 1] * (1.0 - betas[t]);
    }
    Ok(NoiseSchedule { kind, betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// T
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// √(1 − ᾱ_t)
    pub fn noise_scale(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }

    /// β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t, the DDPM posterior variance.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }
}

/// DDIM step sequence `L, L−stride, …, 0` (0 is always the last entry).
pub fn step_sequence(level: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut seq: Vec<usize> = (0..)
        .map(|k| level as i64 - (k * stride) as i64)
        .take_while(|&t| t > 0)
        .map(|t| t as usize)
        .collect();
    seq.push(0);
    seq
}

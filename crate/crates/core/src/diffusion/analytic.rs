//! Closed-form denoisers and guidance models used as test oracles.

use super::{EpsModel, GuidanceModel, NoiseSchedule};
use crate::diffnet::{Real, TensorGrid};
use crate::error::Result;

/// Optimal ε-predictor for data `x0 ~ N(mean, var·I)`.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub mean: f64,
    pub var: f64,
    pub schedule: NoiseSchedule,
}

impl GaussianOracle {
    /// E[x0 | x_t]
    pub fn posterior_mean(&self, x: f64, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        let gain = ab.sqrt() * self.var / (ab * self.var + 1.0 - ab);
        self.mean + gain * (x - ab.sqrt() * self.mean)
    }
}

impl EpsModel for GaussianOracle {
    fn eps(&self, x: &TensorGrid, t: usize) -> Result<TensorGrid> {
        let ab = self.schedule.alpha_bar(t);
        let s = (1.0 - ab).sqrt();
        Ok(x.map(|v| {
            let v = v as f64;
            ((v - ab.sqrt() * self.posterior_mean(v, t)) / s) as Real
        }))
    }
}

/// Predicts the noise that would carry a fixed reference image to `x_t`:
/// ε̂ = (x_t − √ᾱ_t·x_ref) / √(1 − ᾱ_t). Given `x_t` from `q_sample(x_ref, t, ε)`
/// it returns exactly ε, and every DDIM trajectory it drives ends at `x_ref`.
#[derive(Debug, Clone)]
pub struct ReferenceOracle {
    pub reference: TensorGrid,
    pub schedule: NoiseSchedule,
}

impl EpsModel for ReferenceOracle {
    fn eps(&self, x: &TensorGrid, t: usize) -> Result<TensorGrid> {
        let ab = self.schedule.alpha_bar(t);
        let s = (1.0 - ab).sqrt();
        x.zip_map(&self.reference, |a, r| ((a as f64 - ab.sqrt() * r as f64) / s) as Real)
    }
}

/// Returns the same ε̂ for every input.
#[derive(Debug, Clone)]
pub struct ConstantEps(pub TensorGrid);

impl EpsModel for ConstantEps {
    fn eps(&self, x: &TensorGrid, _t: usize) -> Result<TensorGrid> {
        self.0.check_same(x)?;
        Ok(self.0.clone())
    }
}

/// Two-class model with healthy logit `w·x + b` and unhealthy logit 0.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub weight: TensorGrid,
    pub bias: f64,
}

impl LinearClassifier {
    pub fn healthy_logit(&self, x: &TensorGrid) -> f64 {
        self.bias + self.weight.data().iter().zip(x.data()).map(|(&w, &v)| w as f64 * v as f64).sum::<f64>()
    }
}

impl GuidanceModel for LinearClassifier {
    /// ∇ log σ(ℓ) = (1 − σ(ℓ))·w
    fn grad_log_healthy(&self, x: &TensorGrid, _t: usize) -> Result<TensorGrid> {
        self.weight.check_same(x)?;
        let l = self.healthy_logit(x);
        let k = 1.0 / (1.0 + l.exp());
        Ok(self.weight.map(|w| (w as f64 * k) as Real))
    }
}

/// Gradient identically zero.
#[derive(Debug, Clone, Copy)]
pub struct FlatClassifier;

impl GuidanceModel for FlatClassifier {
    fn grad_log_healthy(&self, x: &TensorGrid, _t: usize) -> Result<TensorGrid> {
        Ok(TensorGrid::zeros(x.shape()))
    }
}

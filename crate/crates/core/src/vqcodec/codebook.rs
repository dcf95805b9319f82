use crate::diffnet::{Real, TensorGrid};
use crate::error::{Error, Result};

/// `K` codes of dimension `D`, stored row-major, with per-code usage counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    codes: Vec<Real>,
    usage: Vec<u64>,
}

impl Codebook {
    pub fn new(dim: usize, codes: Vec<Real>) -> Result<Self> {
        if dim == 0 || codes.len() % dim != 0 {
            return Err(Error::Shape(format!("{} code values do not split into rows of {dim}", codes.len())));
        }
        if codes.len() / dim < 2 {
            return Err(Error::InvalidArgument("a codebook needs at least two entries".into()));
        }
        if codes.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        let k = codes.len() / dim;
        Ok(Self { dim, codes, usage: vec![0; k] })
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn code(&self, j: usize) -> &[Real] {
        &self.codes[j * self.dim..(j + 1) * self.dim]
    }

    pub fn codes(&self) -> &[Real] {
        &self.codes
    }

    pub(crate) fn codes_mut(&mut self) -> &mut [Real] {
        &mut self.codes
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub(crate) fn set_usage(&mut self, usage: Vec<u64>) -> Result<()> {
        if usage.len() != self.len() {
            return Err(Error::Shape("usage counter length".into()));
        }
        self.usage = usage;
        Ok(())
    }

    pub fn record(&mut self, indices: &[u32]) {
        for &i in indices {
            self.usage[i as usize] += 1;
        }
    }

    /// Number of codes used at least once.
    pub fn used_codes(&self) -> usize {
        self.usage.iter().filter(|&&u| u > 0).count()
    }

    /// Nearest code by squared Euclidean distance; the lowest index wins ties.
    pub fn nearest(&self, v: &[Real]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.len() {
            let d: f64 = self.code(j).iter().zip(v).map(|(&c, &x)| (c as f64 - x as f64).powi(2)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    /// Snap every spatial site of a `(D, x, y, z)` grid to its nearest code.
    pub fn quantize(&self, latent: &TensorGrid) -> Result<(TensorGrid, Vec<u32>)> {
        if latent.channels() != self.dim {
            return Err(Error::Shape(format!("latent has {} channels, codebook dim is {}", latent.channels(), self.dim)));
        }
        let n = latent.sites();
        let mut out = TensorGrid::zeros(latent.shape());
        let mut idx = Vec::with_capacity(n);
        let mut v = vec![0.0 as Real; self.dim];
        for s in 0..n {
            for (c, slot) in v.iter_mut().enumerate() {
                *slot = latent.data()[c * n + s];
            }
            let (j, _) = self.nearest(&v);
            idx.push(j as u32);
            for c in 0..self.dim {
                out.data_mut()[c * n + s] = self.codes[j * self.dim + c];
            }
        }
        Ok((out, idx))
    }
}

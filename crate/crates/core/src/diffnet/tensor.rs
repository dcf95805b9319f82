use super::Real;
use crate::error::{Error, Result};
use crate::volgrid::{Grid, Volume};

/// Multi-channel voxel grid `(channels, nx, ny, nz)`, channel-major and
/// x-fastest within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    shape: [usize; 4],
    data: Vec<Real>,
}

impl TensorGrid {
    pub fn new(shape: [usize; 4], data: Vec<Real>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("tensor shape {shape:?} has a zero extent")));
        }
        if data.len() != n {
            return Err(Error::Shape(format!("tensor data length {} != {n}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], v: Real) -> Self {
        Self { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn sites(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[Real] {
        let s = self.sites();
        &self.data[c * s..(c + 1) * s]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [Real] {
        let s = self.sites();
        &mut self.data[c * s..(c + 1) * s]
    }

    /// Values at one spatial site across channels.
    pub fn site(&self, i: usize) -> Vec<Real> {
        let s = self.sites();
        (0..self.shape[0]).map(|c| self.data[c * s + i]).collect()
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> TensorGrid {
        TensorGrid { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &TensorGrid, f: impl Fn(Real, Real) -> Real) -> Result<TensorGrid> {
        self.check_same(other)?;
        Ok(TensorGrid {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &TensorGrid) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&self, k: Real) -> TensorGrid {
        self.map(|v| v * k)
    }

    pub fn check_same(&self, other: &TensorGrid) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn from_volume(v: &Volume) -> TensorGrid {
        let [nx, ny, nz] = v.dims();
        TensorGrid { shape: [1, nx, ny, nz], data: v.data().iter().map(|&x| x as Real).collect() }
    }

    /// Single-channel tensor to a volume on `grid`.
    pub fn to_volume(&self, grid: Grid) -> Result<Volume> {
        if self.shape[0] != 1 || self.spatial() != grid.dims {
            return Err(Error::Shape(format!(
                "tensor {:?} cannot become a volume of dims {:?}",
                self.shape, grid.dims
            )));
        }
        Volume::new(grid, self.data.iter().map(|&x| x as f32).collect())
    }
}

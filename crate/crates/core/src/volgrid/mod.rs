//! 3D voxel grids with physical geometry: resampling, intensity windowing,
//! patch extraction around regions of interest and re-composition of patch maps.

mod io;

pub use io::{read_vol, write_vol, Payload, VolFile};

use crate::error::{invalid, Error, Result};

/// Physical layout shared by volumes, masks and label grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    /// mm per voxel
    pub spacing: [f32; 3],
    /// mm
    pub origin: [f32; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], origin: [f32; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(invalid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(invalid(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: [usize; 3]) -> Self {
        Self { dims, spacing: [1.0; 3], origin: [0.0; 3] }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Physical position (mm) of a voxel center.
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let c = [x, y, z];
        std::array::from_fn(|a| self.origin[a] as f64 + c[a] as f64 * self.spacing[a] as f64)
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product()
    }

    /// Same dims and spacing (origin may differ).
    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn check_matches(&self, other: &Grid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "dims/spacing {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// Scalar voxel grid, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "data length {} != {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i}")));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: f32) -> Self {
        Self { data: vec![value; grid.len()], grid }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume { grid: self.grid, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.data.len() as f64
    }

    pub fn with_origin(mut self, origin: [f32; 3]) -> Self {
        self.grid.origin = origin;
        self
    }
}

/// Per-voxel {0,1} mask sharing [`Grid`] geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    grid: Grid,
    data: Vec<u8>,
}

impl Eq for Grid {}

impl BinaryMask {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "mask length {} != {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid("mask values must be 0 or 1"));
        }
        Ok(Self { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        Self { data: vec![0; grid.len()], grid }
    }

    pub fn full(grid: Grid) -> Self {
        Self { data: vec![1; grid.len()], grid }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut m = Self::empty(grid);
        let [nx, ny, nz] = grid.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if f(x, y, z) {
                        let i = grid.index(x, y, z);
                        m.data[i] = 1;
                    }
                }
            }
        }
        m
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.grid.index(x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.grid.index(x, y, z);
        self.data[i] = on as u8;
    }

    #[inline]
    pub fn is_set(&self, i: usize) -> bool {
        self.data[i] != 0
    }

    pub fn set_index(&mut self, i: usize, on: bool) {
        self.data[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask { grid: self.grid, data: self.data.iter().map(|&v| 1 - v).collect() }
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.grid.check_matches(&other.grid)?;
        Ok(BinaryMask {
            grid: self.grid,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        })
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.grid.check_matches(&other.grid)?;
        Ok(self.data.iter().zip(&other.data).filter(|(a, b)| **a & **b != 0).count())
    }

    pub fn to_volume(&self) -> Volume {
        Volume { grid: self.grid, data: self.data.iter().map(|&v| v as f32).collect() }
    }
}

/// Where a patch sits inside the full grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPlacement {
    pub offset: [usize; 3],
    pub patch_dims: [usize; 3],
}

impl PatchPlacement {
    pub fn fits(&self, full: [usize; 3]) -> bool {
        (0..3).all(|a| self.offset[a] + self.patch_dims[a] <= full[a])
    }

    /// Voxel extent of the placement as a mask on the full grid.
    pub fn mask(&self, grid: Grid) -> BinaryMask {
        BinaryMask::from_fn(grid, |x, y, z| {
            let c = [x, y, z];
            (0..3).all(|a| c[a] >= self.offset[a] && c[a] < self.offset[a] + self.patch_dims[a])
        })
    }
}

fn check_finite(vol: &Volume) -> Result<()> {
    match vol.data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("voxel {i}"))),
        None => Ok(()),
    }
}

fn resampled_dims(grid: &Grid, target_mm: f32) -> [usize; 3] {
    std::array::from_fn(|a| {
        let n = (grid.dims[a] as f64 * grid.spacing[a] as f64 / target_mm as f64).round();
        (n as usize).max(1)
    })
}

/// Corner-anchored source coordinate of output sample `i` of `n_out`, over `n_in`
/// input samples: first and last samples coincide.
#[inline]
fn source_coord(i: usize, n_out: usize, n_in: usize) -> f64 {
    if n_out <= 1 || n_in <= 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

fn axis_weights(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let u = source_coord(i, n_out, n_in);
            let i0 = (u.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling to `target_mm` isotropic spacing.
pub fn resample_isotropic(vol: &Volume, target_mm: f32) -> Result<Volume> {
    resample_to(vol, target_mm, None)
}

/// Trilinear resampling to an explicit output size. Output spacing keeps the
/// physical extent `dims * spacing` of the input.
pub fn resample_dims(vol: &Volume, dims: [usize; 3]) -> Result<Volume> {
    resample_to(vol, 0.0, Some(dims))
}

fn resample_to(vol: &Volume, target_mm: f32, dims: Option<[usize; 3]>) -> Result<Volume> {
    check_finite(vol)?;
    let src = vol.grid;
    let (out_dims, spacing) = match dims {
        Some(d) => {
            if d.iter().any(|&n| n == 0) {
                return Err(invalid("output dims must be positive"));
            }
            let sp = std::array::from_fn(|a| {
                (src.dims[a] as f64 * src.spacing[a] as f64 / d[a] as f64) as f32
            });
            (d, sp)
        }
        None => {
            if !(target_mm.is_finite() && target_mm > 0.0) {
                return Err(invalid(format!("target spacing must be positive, got {target_mm}")));
            }
            (resampled_dims(&src, target_mm), [target_mm; 3])
        }
    };
    let grid = Grid::new(out_dims, spacing, src.origin)?;
    let wx = axis_weights(out_dims[0], src.dims[0]);
    let wy = axis_weights(out_dims[1], src.dims[1]);
    let wz = axis_weights(out_dims[2], src.dims[2]);
    let plane = out_dims[0] * out_dims[1];
    let mut data = vec![0.0f32; grid.len()];
    crate::par::for_each_chunk_mut(&mut data, plane, |z, slab| {
        let (z0, z1, fz) = wz[z];
        for (y, &(y0, y1, fy)) in wy.iter().enumerate() {
            for (x, &(x0, x1, fx)) in wx.iter().enumerate() {
                let g = |xx, yy, zz| vol.get(xx, yy, zz) as f64;
                // Grid-aligned samples are copied exactly.
                let v = if fx == 0.0 && fy == 0.0 && fz == 0.0 {
                    g(x0, y0, z0)
                } else {
                    let c00 = g(x0, y0, z0) * (1.0 - fx) + g(x1, y0, z0) * fx;
                    let c10 = g(x0, y1, z0) * (1.0 - fx) + g(x1, y1, z0) * fx;
                    let c01 = g(x0, y0, z1) * (1.0 - fx) + g(x1, y0, z1) * fx;
                    let c11 = g(x0, y1, z1) * (1.0 - fx) + g(x1, y1, z1) * fx;
                    let c0 = c00 * (1.0 - fy) + c10 * fy;
                    let c1 = c01 * (1.0 - fy) + c11 * fy;
                    c0 * (1.0 - fz) + c1 * fz
                };
                slab[y * out_dims[0] + x] = v as f32;
            }
        }
    });
    Ok(Volume { grid, data })
}

/// Nearest-neighbour mask resampling (keeps values in {0,1}).
pub fn resample_mask_isotropic(mask: &BinaryMask, target_mm: f32) -> Result<BinaryMask> {
    if !(target_mm.is_finite() && target_mm > 0.0) {
        return Err(invalid(format!("target spacing must be positive, got {target_mm}")));
    }
    resample_mask_to(mask, resampled_dims(&mask.grid, target_mm), [target_mm; 3])
}

/// Nearest-neighbour mask resampling onto explicit dims, keeping physical extent.
pub fn resample_mask_dims(mask: &BinaryMask, dims: [usize; 3]) -> Result<BinaryMask> {
    let src = mask.grid;
    let sp = std::array::from_fn(|a| (src.dims[a] as f64 * src.spacing[a] as f64 / dims[a] as f64) as f32);
    resample_mask_to(mask, dims, sp)
}

fn resample_mask_to(mask: &BinaryMask, dims: [usize; 3], spacing: [f32; 3]) -> Result<BinaryMask> {
    let src = mask.grid;
    let grid = Grid::new(dims, spacing, src.origin)?;
    let near = |i: usize, a: usize| {
        (source_coord(i, dims[a], src.dims[a]).round() as usize).min(src.dims[a] - 1)
    };
    Ok(BinaryMask::from_fn(grid, |x, y, z| mask.get(near(x, 0), near(y, 1), near(z, 2))))
}

/// Clip to `[lo, hi]` and map affinely onto `[-1, 1]`.
pub fn normalize_intensity(vol: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(invalid(format!("intensity window requires lo < hi, got [{lo}, {hi}]")));
    }
    let scale = 2.0 / (hi as f64 - lo as f64);
    Ok(vol.map(|v| {
        let c = (v.clamp(lo, hi) as f64 - lo as f64) * scale - 1.0;
        (c as f32).clamp(-1.0, 1.0)
    }))
}

/// Cut a `size_mm` window centered on `center_mm`. The window is shifted (never
/// shrunk) to stay inside the grid.
pub fn extract_patch(vol: &Volume, center_mm: [f64; 3], size_mm: [f64; 3]) -> Result<(Volume, PatchPlacement)> {
    let placement = place_patch(&vol.grid, center_mm, size_mm)?;
    Ok((crop(vol, &placement), placement))
}

/// Compute the clamped window used by [`extract_patch`].
pub fn place_patch(grid: &Grid, center_mm: [f64; 3], size_mm: [f64; 3]) -> Result<PatchPlacement> {
    if size_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(invalid(format!("patch size must be positive, got {size_mm:?}")));
    }
    let mut offset = [0usize; 3];
    let mut patch_dims = [0usize; 3];
    for a in 0..3 {
        let sp = grid.spacing[a] as f64;
        let d = ((size_mm[a] / sp).round() as usize).max(1);
        if d > grid.dims[a] {
            return Err(invalid(format!(
                "patch of {d} voxels exceeds volume extent {} on axis {a}",
                grid.dims[a]
            )));
        }
        let c = (center_mm[a] - grid.origin[a] as f64) / sp;
        let corner = (c - (d as f64 - 1.0) / 2.0).round();
        let max_corner = (grid.dims[a] - d) as f64;
        offset[a] = corner.clamp(0.0, max_corner) as usize;
        patch_dims[a] = d;
    }
    Ok(PatchPlacement { offset, patch_dims })
}

/// Copy the voxels under `placement` into a new volume whose origin is the
/// physical position of the window corner.
pub fn crop(vol: &Volume, placement: &PatchPlacement) -> Volume {
    let g = vol.grid;
    let [ox, oy, oz] = placement.offset;
    let origin = std::array::from_fn(|a| g.origin[a] + placement.offset[a] as f32 * g.spacing[a]);
    let grid = Grid { dims: placement.patch_dims, spacing: g.spacing, origin };
    Volume::from_fn(grid, |x, y, z| vol.get(ox + x, oy + y, oz + z))
}

pub fn crop_mask(mask: &BinaryMask, placement: &PatchPlacement) -> BinaryMask {
    let g = mask.grid;
    let [ox, oy, oz] = placement.offset;
    let origin = std::array::from_fn(|a| g.origin[a] + placement.offset[a] as f32 * g.spacing[a]);
    let grid = Grid { dims: placement.patch_dims, spacing: g.spacing, origin };
    BinaryMask::from_fn(grid, |x, y, z| mask.get(ox + x, oy + y, oz + z))
}

/// Paste patch maps into a zero-initialised full grid. Overlaps keep the maximum.
pub fn compose_full_map(patches: &[(Volume, PatchPlacement)], full: Grid) -> Result<Volume> {
    let mut data = vec![0.0f32; full.len()];
    let mut covered = vec![false; full.len()];
    for (k, (patch, place)) in patches.iter().enumerate() {
        if patch.grid.spacing != full.spacing {
            return Err(Error::Geometry(format!(
                "patch {k} spacing {:?} != full spacing {:?}",
                patch.grid.spacing, full.spacing
            )));
        }
        if patch.grid.dims != place.patch_dims || !place.fits(full.dims) {
            return Err(Error::Geometry(format!("patch {k} placement {place:?} out of bounds")));
        }
        let [px, py, pz] = place.patch_dims;
        for z in 0..pz {
            for y in 0..py {
                for x in 0..px {
                    let i = full.index(place.offset[0] + x, place.offset[1] + y, place.offset[2] + z);
                    let v = patch.get(x, y, z);
                    if covered[i] {
                        data[i] = data[i].max(v);
                    } else {
                        data[i] = v;
                        covered[i] = true;
                    }
                }
            }
        }
    }
    Volume::new(full, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 3], spacing: [f32; 3]) -> Volume {
        Volume::from_fn(Grid::new(dims, spacing, [0.0; 3]).unwrap(), |x, y, z| {
            (x + 3 * y + 7 * z) as f32 * 0.1
        })
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Grid::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        let g = Grid::unit([2, 2, 2]);
        assert!(Volume::new(g, vec![0.0; 7]).is_err());
        assert!(Volume::new(g, vec![f32::NAN; 8]).is_err());
        assert!(BinaryMask::new(g, vec![2; 8]).is_err());
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let v = ramp([5, 4, 3], [1.0; 3]);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.data(), v.data());
        assert_eq!(r.dims(), v.dims());
    }

    #[test]
    fn resample_two_sample_line() {
        let g = Grid::new([2, 1, 1], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let v = Volume::new(g, vec![0.0, 10.0]).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), [4, 1, 1]);
        let want = [0.0, 10.0 / 3.0, 20.0 / 3.0, 10.0];
        for (a, b) in r.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert_eq!(r.spacing(), [1.0; 3]);
        assert_eq!(r.grid().origin, v.grid().origin);
    }

    #[test]
    fn resample_rejects_nonfinite_target() {
        let v = ramp([2, 2, 2], [1.0; 3]);
        assert!(resample_isotropic(&v, 0.0).is_err());
        assert!(resample_isotropic(&v, f32::NAN).is_err());
    }

    #[test]
    fn smooth_round_trip_error_small() {
        // quadratic phantom at 1.5 mm, resampled to 1 mm and back
        let g = Grid::new([20, 20, 16], [1.5; 3], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, |x, y, z| {
            let (x, y, z) = (x as f32 / 19.0, y as f32 / 19.0, z as f32 / 15.0);
            x * x + 0.5 * y * y - 0.3 * z * z + 0.2 * x * y
        });
        let up = resample_isotropic(&v, 1.0).unwrap();
        let back = resample_dims(&up, v.dims()).unwrap();
        let (lo, hi) = v.min_max();
        let mae: f64 = v.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
            / v.data().len() as f64;
        assert!(mae < 0.01 * (hi - lo) as f64, "mae {mae}");
    }

    #[test]
    fn mask_resampling_stays_binary() {
        let g = Grid::new([4, 4, 4], [2.0; 3], [0.0; 3]).unwrap();
        let m = BinaryMask::from_fn(g, |x, _, _| x >= 2);
        let r = resample_mask_isotropic(&m, 1.0).unwrap();
        assert_eq!(r.dims(), [8, 8, 8]);
        assert!(r.data().iter().all(|&v| v <= 1));
        assert!(r.get(7, 0, 0) && !r.get(0, 0, 0));
    }

    #[test]
    fn normalize_examples() {
        let g = Grid::unit([4, 1, 1]);
        let v = Volume::new(g, vec![-200.0, 50.0, 175.0, 1000.0]).unwrap();
        let n = normalize_intensity(&v, -200.0, 300.0).unwrap();
        assert_eq!(n.data()[0], -1.0);
        assert!((n.data()[1] - 0.0).abs() < 1e-6);
        assert!((n.data()[2] - 0.5).abs() < 1e-6);
        assert_eq!(n.data()[3], 1.0);
        assert!(normalize_intensity(&v, 1.0, 1.0).is_err());
        assert!(normalize_intensity(&v, 2.0, 1.0).is_err());
    }

    #[test]
    fn patch_full_extent_is_identity() {
        let v = ramp([6, 5, 4], [1.0; 3]);
        let center = [2.5, 2.0, 1.5];
        let (p, place) = extract_patch(&v, center, [6.0, 5.0, 4.0]).unwrap();
        assert_eq!(place.offset, [0, 0, 0]);
        assert_eq!(p.data(), v.data());
        let back = compose_full_map(&[(p, place)], *v.grid()).unwrap();
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn patch_near_boundary_is_shifted() {
        let v = ramp([10, 10, 10], [1.0; 3]);
        let (p, place) = extract_patch(&v, [0.0, 9.0, 5.0], [4.0, 4.0, 4.0]).unwrap();
        assert_eq!(place.patch_dims, [4, 4, 4]);
        assert_eq!(place.offset[0], 0);
        assert_eq!(place.offset[1], 6);
        // naive copy loop
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = v.get(place.offset[0] + x, place.offset[1] + y, place.offset[2] + z);
                    assert_eq!(p.get(x, y, z), want);
                }
            }
        }
        assert!(extract_patch(&v, [5.0; 3], [11.0, 4.0, 4.0]).is_err());
    }

    #[test]
    fn paper_patch_size_in_voxels() {
        let v = Volume::filled(Grid::unit([128, 128, 160]), 0.0);
        let (p, _) = extract_patch(&v, [64.0, 64.0, 80.0], [96.0, 96.0, 128.0]).unwrap();
        assert_eq!(p.dims(), [96, 96, 128]);
    }

    #[test]
    fn compose_max_rule_and_errors() {
        let full = Grid::unit([4, 1, 1]);
        let a = Volume::new(Grid::unit([2, 1, 1]), vec![0.1, 0.3]).unwrap();
        let b = Volume::new(Grid::unit([2, 1, 1]), vec![0.7, 0.2]).unwrap();
        let pa = PatchPlacement { offset: [0, 0, 0], patch_dims: [2, 1, 1] };
        let pb = PatchPlacement { offset: [1, 0, 0], patch_dims: [2, 1, 1] };
        let m = compose_full_map(&[(a.clone(), pa), (b.clone(), pb)], full).unwrap();
        assert_eq!(m.data(), &[0.1, 0.7, 0.2, 0.0]);
        let bad = Volume::new(Grid::new([2, 1, 1], [2.0; 3], [0.0; 3]).unwrap(), vec![0.0; 2]).unwrap();
        assert!(compose_full_map(&[(bad, pa)], full).is_err());
        let oob = PatchPlacement { offset: [3, 0, 0], patch_dims: [2, 1, 1] };
        assert!(compose_full_map(&[(a, oob)], full).is_err());
    }

    proptest! {
        #[test]
        fn resample_constant_stays_constant(c in -5.0f32..5.0, s in 0.5f32..3.0, t in 0.5f32..3.0) {
            let g = Grid::new([4, 3, 5], [s; 3], [0.0; 3]).unwrap();
            let v = Volume::filled(g, c);
            let r = resample_isotropic(&v, t).unwrap();
            prop_assert!(r.data().iter().all(|&x| (x - c).abs() <= 1e-5 * (1.0 + c.abs())));
            let back = resample_dims(&r, v.dims()).unwrap();
            prop_assert!(back.data().iter().all(|&x| (x - c).abs() <= 1e-5 * (1.0 + c.abs())));
        }

        #[test]
        fn normalize_bounded_and_monotone(a in -1000.0f32..1000.0, b in -1000.0f32..1000.0) {
            let v = Volume::new(Grid::unit([2, 1, 1]), vec![a, b]).unwrap();
            let n = normalize_intensity(&v, -200.0, 300.0).unwrap();
            prop_assert!(n.data().iter().all(|x| (-1.0..=1.0).contains(x)));
            if a <= b { prop_assert!(n.data()[0] <= n.data()[1]); }
        }

        #[test]
        fn compose_is_order_invariant(vals in proptest::collection::vec(0.0f32..1.0, 12), offs in proptest::collection::vec(0usize..3, 3)) {
            let full = Grid::unit([6, 1, 1]);
            let patches: Vec<_> = (0..3).map(|k| {
                let v = Volume::new(Grid::unit([4, 1, 1]), vals[4 * k..4 * k + 4].to_vec()).unwrap();
                (v, PatchPlacement { offset: [offs[k], 0, 0], patch_dims: [4, 1, 1] })
            }).collect();
            let fwd = compose_full_map(&patches, full).unwrap();
            let mut rev = patches.clone();
            rev.reverse();
            prop_assert_eq!(fwd, compose_full_map(&rev, full).unwrap());
        }
    }
}

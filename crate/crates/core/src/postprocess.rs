//! Anomaly map → lesion candidates: Otsu threshold, opening/closing, hole
//! filling, connected components and small-instance removal.

use std::collections::VecDeque;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, Grid, VolFile, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// face neighbours
    Six,
    /// face, edge and corner neighbours
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::InvalidArgument(format!("connectivity must be 6 or 26, got {n}"))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }

    fn offsets(self) -> Vec<[i64; 3]> {
        let mut v = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let n = dx.abs() + dy.abs() + dz.abs();
                    if n == 0 || (self == Connectivity::Six && n != 1) {
                        continue;
                    }
                    v.push([dx, dy, dz]);
                }
            }
        }
        v
    }
}

/// In-bounds neighbours of voxel `i`.
fn neighbours(grid: &Grid, i: usize, offsets: &[[i64; 3]], mut f: impl FnMut(usize)) {
    let [nx, ny, nz] = grid.dims;
    let [x, y, z] = grid.coords(i);
    for o in offsets {
        let (a, b, c) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
        if a >= 0 && b >= 0 && c >= 0 && (a as usize) < nx && (b as usize) < ny && (c as usize) < nz {
            f(grid.index(a as usize, b as usize, c as usize));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Otsu {
    pub threshold: f32,
    /// last bin of the lower class
    pub bin: usize,
    pub min: f32,
    pub max: f32,
}

/// Histogram of `values` over `[min, max]` with `bins` equal bins; the
/// maximum lands in the last bin.
pub fn histogram(values: &[f32], min: f32, max: f32, bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    let w = (max as f64 - min as f64) / bins as f64;
    for &v in values {
        let k = (((v as f64 - min as f64) / w).floor().max(0.0) as usize).min(bins - 1);
        h[k] += 1;
    }
    h
}

/// Cut index maximising the between-class variance of a histogram (classes
/// `0..=k` and `k+1..`), computed on bin indices with exact integer
/// arithmetic where it fits. Ties go to the lowest cut. `None` if every cut
/// leaves a class empty.
pub fn otsu_cut(hist: &[u64]) -> Option<usize> {
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    let s: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    // σ_b² ∝ (n1·s0 − n0·s1)² / (n0·n1)
    let mut best: Option<(usize, u128, u128, f64)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for k in 0..hist.len().saturating_sub(1) {
        n0 += hist[k] as u128;
        s0 += k as u128 * hist[k] as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = s - s0;
        let a = (n1 * s0).abs_diff(n0 * s1);
        let b = n0 * n1;
        let approx = (a as f64) * (a as f64) / b as f64;
        let better = match best {
            None => true,
            Some((_, ba, bb, bapprox)) => match (a.checked_mul(a).and_then(|x| x.checked_mul(bb)), ba.checked_mul(ba).and_then(|x| x.checked_mul(b))) {
                (Some(l), Some(r)) => l > r,
                _ => approx > bapprox,
            },
        };
        if better {
            best = Some((k, a, b, approx));
        }
    }
    best.map(|b| b.0)
}

/// Otsu threshold of `map` (restricted to `roi` if given). The threshold is the
/// upper edge of the winning cut bin, so `binarize` puts exactly the upper
/// class at or above it.
pub fn otsu_threshold(map: &Volume, roi: Option<&BinaryMask>, bins: usize) -> Result<Otsu> {
    if bins < 2 {
        return Err(Error::InvalidArgument("otsu needs at least 2 bins".into()));
    }
    let values: Vec<f32> = match roi {
        Some(m) => {
            map.grid().check_matches(m.grid())?;
            map.data().iter().zip(m.data()).filter(|(_, &b)| b != 0).map(|(&v, _)| v).collect()
        }
        None => map.data().to_vec(),
    };
    let (min, max) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() || !(max > min) {
        return Err(Error::DegenerateHistogram("map has fewer than two distinct values".into()));
    }
    let hist = histogram(&values, min, max, bins);
    let bin = otsu_cut(&hist).ok_or_else(|| Error::DegenerateHistogram("no valid cut".into()))?;
    let w = (max as f64 - min as f64) / bins as f64;
    let threshold = (min as f64 + (bin + 1) as f64 * w) as f32;
    Ok(Otsu { threshold, bin, min, max })
}

/// voxel ≥ threshold → 1
pub fn binarize(map: &Volume, threshold: f32) -> BinaryMask {
    let data = map.data().iter().map(|&v| (v >= threshold) as u8).collect();
    BinaryMask::new(*map.grid(), data).expect("same grid")
}

/// Erosion with the unit ball of `conn`; out-of-grid neighbours are ignored.
pub fn erode(mask: &BinaryMask, conn: Connectivity) -> BinaryMask {
    let g = *mask.grid();
    let off = conn.offsets();
    let mut out = BinaryMask::empty(g);
    for i in 0..g.len() {
        if mask.is_set(i) {
            let mut keep = true;
            neighbours(&g, i, &off, |j| keep &= mask.is_set(j));
            out.set_index(i, keep);
        }
    }
    out
}

/// Dilation with the unit ball of `conn`.
pub fn dilate(mask: &BinaryMask, conn: Connectivity) -> BinaryMask {
    let g = *mask.grid();
    let off = conn.offsets();
    let mut out = mask.clone();
    for i in 0..g.len() {
        if mask.is_set(i) {
            neighbours(&g, i, &off, |j| out.set_index(j, true));
        }
    }
    out
}

/// Opening (erode, dilate) followed by closing (dilate, erode), one iteration each.
pub fn open_close(mask: &BinaryMask, conn: Connectivity) -> BinaryMask {
    let opened = dilate(&erode(mask, conn), conn);
    erode(&dilate(&opened, conn), conn)
}

/// Set background regions that cannot reach the grid boundary.
pub fn fill_holes(mask: &BinaryMask, conn: Connectivity) -> BinaryMask {
    let g = *mask.grid();
    let [nx, ny, nz] = g.dims;
    let off = conn.offsets();
    let mut outside = vec![false; g.len()];
    let mut queue = VecDeque::new();
    for i in 0..g.len() {
        let [x, y, z] = g.coords(i);
        let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
        if border && !mask.is_set(i) {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        neighbours(&g, i, &off, |j| {
            if !outside[j] && !mask.is_set(j) {
                outside[j] = true;
                queue.push_back(j);
            }
        });
    }
    let data = outside.iter().map(|&o| (!o) as u8).collect();
    BinaryMask::new(g, data).expect("same grid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub voxels: usize,
    /// inclusive voxel bounds
    pub bbox_min: [usize; 3],
    pub bbox_max: [usize; 3],
    pub volume_mm3: f64,
    /// equivalent spherical diameter cbrt(6V/π)
    pub diameter_mm: f64,
}

pub fn equivalent_diameter(volume_mm3: f64) -> f64 {
    (6.0 * volume_mm3 / PI).cbrt()
}

/// Labelled instances; label `k` (1-based) describes `components[k-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    grid: Grid,
    labels: Vec<u32>,
    components: Vec<Component>,
}

impl ComponentSet {
    pub fn empty(grid: Grid) -> Self {
        Self { grid, labels: vec![0; grid.len()], components: vec![] }
    }

    /// Rebuild from a label grid; labels must be contiguous `1..=N`.
    pub fn from_labels(grid: Grid, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::Shape("label grid length".into()));
        }
        let n = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut set = Self { grid, labels, components: vec![] };
        set.components = set.measure(n);
        if set.components.iter().any(|c| c.voxels == 0) {
            return Err(Error::InvalidArgument("labels are not contiguous".into()));
        }
        Ok(set)
    }

    fn measure(&self, n: usize) -> Vec<Component> {
        let mut comps = vec![
            Component { voxels: 0, bbox_min: [usize::MAX; 3], bbox_max: [0; 3], volume_mm3: 0.0, diameter_mm: 0.0 };
            n
        ];
        for (i, &l) in self.labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let c = &mut comps[l as usize - 1];
            c.voxels += 1;
            let p = self.grid.coords(i);
            for a in 0..3 {
                c.bbox_min[a] = c.bbox_min[a].min(p[a]);
                c.bbox_max[a] = c.bbox_max[a].max(p[a]);
            }
        }
        let vv = self.grid.voxel_volume_mm3();
        for c in &mut comps {
            c.volume_mm3 = c.voxels as f64 * vv;
            c.diameter_mm = equivalent_diameter(c.volume_mm3);
        }
        comps
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Mask of component `id` (1-based).
    pub fn mask_of(&self, id: usize) -> BinaryMask {
        let data = self.labels.iter().map(|&l| (l as usize == id) as u8).collect();
        BinaryMask::new(self.grid, data).expect("same grid")
    }

    pub fn foreground(&self) -> BinaryMask {
        let data = self.labels.iter().map(|&l| (l != 0) as u8).collect();
        BinaryMask::new(self.grid, data).expect("same grid")
    }

    /// Voxel indices of every component, in label order.
    pub fn voxel_lists(&self) -> Vec<Vec<usize>> {
        let mut v = vec![Vec::new(); self.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                v[l as usize - 1].push(i);
            }
        }
        v
    }

    pub fn to_vol_file(&self) -> VolFile {
        VolFile::from_labels(self.grid, &self.labels)
    }
}

/// Label foreground components; labels follow the scan order of each
/// component's first voxel.
pub fn connected_components(mask: &BinaryMask, conn: Connectivity) -> ComponentSet {
    let g = *mask.grid();
    let off = conn.offsets();
    let mut labels = vec![0u32; g.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for i in 0..g.len() {
        if !mask.is_set(i) || labels[i] != 0 {
            continue;
        }
        next += 1;
        labels[i] = next;
        queue.push_back(i);
        while let Some(j) = queue.pop_front() {
            neighbours(&g, j, &off, |k| {
                if mask.is_set(k) && labels[k] == 0 {
                    labels[k] = next;
                    queue.push_back(k);
                }
            });
        }
    }
    let mut set = ComponentSet { grid: g, labels, components: vec![] };
    set.components = set.measure(next as usize);
    set
}

/// Keep components with at least `min_voxels` voxels AND an equivalent
/// diameter of at least `min_diameter_mm`; survivors are relabelled 1..M in
/// their original order.
pub fn filter_small(set: &ComponentSet, min_voxels: usize, min_diameter_mm: f64) -> ComponentSet {
    let mut remap = vec![0u32; set.len() + 1];
    let mut kept = Vec::new();
    for (k, c) in set.components.iter().enumerate() {
        if c.voxels >= min_voxels && c.diameter_mm >= min_diameter_mm {
            kept.push(c.clone());
            remap[k + 1] = kept.len() as u32;
        }
    }
    let labels = set.labels.iter().map(|&l| remap[l as usize]).collect();
    ComponentSet { grid: set.grid, labels, components: kept }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessConfig {
    pub bins: usize,
    pub morph_connectivity: Connectivity,
    pub component_connectivity: Connectivity,
    pub min_voxels: usize,
    pub min_diameter_mm: f64,
    /// Lower bound on the threshold in anomaly-map units. Otsu always splits a
    /// histogram in two, even one holding only reconstruction noise.
    pub min_threshold: f32,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            bins: 256,
            morph_connectivity: Connectivity::Six,
            component_connectivity: Connectivity::TwentySix,
            min_voxels: 20,
            min_diameter_mm: 3.0,
            min_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    /// `None` when the map was constant (degenerate histogram: nothing to split).
    pub threshold: Option<f32>,
    pub components: ComponentSet,
}

/// Threshold → open/close → fill holes → components → size filter.
pub fn extract_candidates(map: &Volume, roi: Option<&BinaryMask>, cfg: &PostprocessConfig) -> Result<Candidates> {
    let threshold = match otsu_threshold(map, roi, cfg.bins) {
        Ok(o) => o.threshold.max(cfg.min_threshold),
        Err(Error::DegenerateHistogram(_)) => return Ok(Candidates { threshold: None, components: ComponentSet::empty(*map.grid()) }),
        Err(e) => return Err(e),
    };
    let mut mask = binarize(map, threshold);
    if let Some(r) = roi {
        mask = BinaryMask::new(*mask.grid(), mask.data().iter().zip(r.data()).map(|(a, b)| a & b).collect())?;
    }
    let mask = fill_holes(&open_close(&mask, cfg.morph_connectivity), cfg.morph_connectivity);
    let comps = connected_components(&mask, cfg.component_connectivity);
    Ok(Candidates { threshold: Some(threshold), components: filter_small(&comps, cfg.min_voxels, cfg.min_diameter_mm) })
}

#[cfg(test)]
mod tests;

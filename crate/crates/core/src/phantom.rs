//! Procedural kidney phantoms with spherical lesions, noisy case-level labels and
//! an oracle for the kidney region of interest.
//!
//! Geometry, lesions, noise and labels are drawn from independent RNG streams, so
//! toggling lesions off leaves everything else bit-identical.

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::rng::{self, Rng};
use crate::volgrid::{BinaryMask, Grid, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Healthy,
    Unhealthy,
}

impl Label {
    pub fn flipped(self) -> Label {
        match self {
            Label::Healthy => Label::Unhealthy,
            Label::Unhealthy => Label::Healthy,
        }
    }

    /// 1 for unhealthy (the positive class in AUC computations).
    pub fn as_positive(self) -> u8 {
        matches!(self, Label::Unhealthy) as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Unhealthy => "unhealthy",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "healthy" | "0" => Some(Label::Healthy),
            "unhealthy" | "1" => Some(Label::Unhealthy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub grid_dims: [usize; 3],
    pub spacing_mm: f32,
    /// 1 or 2 kidneys per case.
    pub kidneys: usize,
    pub semi_axes_min_mm: [f32; 3],
    pub semi_axes_max_mm: [f32; 3],
    /// Random displacement of each kidney center around its nominal position.
    pub center_jitter_mm: f32,
    pub background_mean: f32,
    pub kidney_mean: f32,
    /// Magnitude of the lesion intensity offset from kidney tissue; the sign is
    /// drawn per lesion.
    pub lesion_contrast: f32,
    pub noise_sigma: f32,
    pub lesion_prob: f64,
    pub lesion_diameter_mm: (f32, f32),
    pub lesions_per_case: (usize, usize),
    pub label_flip_prob: f64,
    /// Gaussian smoothing applied after rendering, in voxels (0 disables).
    pub blur_sigma_vox: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_dims: [48, 48, 64],
            spacing_mm: 1.0,
            kidneys: 1,
            semi_axes_min_mm: [9.5, 9.5, 13.0],
            semi_axes_max_mm: [11.0, 11.0, 16.0],
            center_jitter_mm: 2.0,
            background_mean: -0.5,
            kidney_mean: 0.2,
            lesion_contrast: 0.6,
            noise_sigma: 0.03,
            lesion_prob: 0.5,
            lesion_diameter_mm: (8.0, 16.0),
            lesions_per_case: (1, 2),
            label_flip_prob: 0.15,
            blur_sigma_vox: 1.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_dims.iter().any(|&d| d == 0) || !(self.spacing_mm > 0.0) {
            return Err(invalid("phantom grid must have positive dims and spacing"));
        }
        if !(1..=2).contains(&self.kidneys) {
            return Err(invalid("kidneys must be 1 or 2"));
        }
        for a in 0..3 {
            let (lo, hi) = (self.semi_axes_min_mm[a], self.semi_axes_max_mm[a]);
            if !(lo > 0.0 && lo <= hi) {
                return Err(invalid(format!("semi-axis range {a} must satisfy 0 < min <= max")));
            }
        }
        if !(0.0..=1.0).contains(&self.lesion_prob) {
            return Err(invalid("lesion_prob must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.label_flip_prob) {
            return Err(invalid("label_flip_prob must be in [0, 1)"));
        }
        let (dlo, dhi) = self.lesion_diameter_mm;
        if !(dlo > 0.0 && dlo <= dhi) {
            return Err(invalid("lesion diameter range must be positive and ordered"));
        }
        let minor = 2.0 * self.semi_axes_min_mm.iter().cloned().fold(f32::INFINITY, f32::min);
        if dhi >= minor {
            return Err(invalid(format!(
                "lesion diameter {dhi} mm does not fit the kidney minor axis {minor} mm"
            )));
        }
        let (nlo, nhi) = self.lesions_per_case;
        if nlo == 0 || nlo > nhi {
            return Err(invalid("lesions_per_case must be a positive ordered range"));
        }
        for (name, v) in [
            ("background_mean", self.background_mean),
            ("kidney_mean", self.kidney_mean),
            ("kidney_mean + lesion_contrast", self.kidney_mean + self.lesion_contrast),
            ("kidney_mean - lesion_contrast", self.kidney_mean - self.lesion_contrast),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} = {v} outside [-1, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.blur_sigma_vox >= 0.0) {
            return Err(invalid("noise and blur sigmas must be non-negative"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid { dims: self.grid_dims, spacing: [self.spacing_mm; 3], origin: [0.0; 3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kidney {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Kidney {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center_mm[a]) / self.semi_axes_mm[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
    /// signed intensity offset relative to kidney tissue
    pub delta: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub id: String,
    pub image: Volume,
    pub kidneys: Vec<Kidney>,
    pub lesions: Vec<Lesion>,
    pub weak_label: Label,
    pub true_label: Label,
    /// Evaluation only.
    pub truth: BinaryMask,
}

impl LabeledCase {
    pub fn kidney_mask(&self) -> BinaryMask {
        kidney_mask(self.image.grid(), &self.kidneys)
    }
}

pub fn kidney_mask(grid: &Grid, kidneys: &[Kidney]) -> BinaryMask {
    BinaryMask::from_fn(*grid, |x, y, z| {
        let p = grid.position(x, y, z);
        kidneys.iter().any(|k| k.contains(p))
    })
}

const STREAM_GEOMETRY: u64 = 1;
const STREAM_LESIONS: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_LABEL: u64 = 4;
const STREAM_PRESENCE: u64 = 5;

/// Render one case. Deterministic in `(cfg, seed)`; `cfg.seed` is ignored here.
pub fn generate_case(cfg: &PhantomConfig, seed: u64) -> Result<LabeledCase> {
    generate_case_with(cfg, seed, None)
}

/// As [`generate_case`], optionally forcing lesion presence (balanced datasets).
pub fn generate_case_with(cfg: &PhantomConfig, seed: u64, force_lesions: Option<bool>) -> Result<LabeledCase> {
    cfg.validate()?;
    let grid = cfg.grid();
    let kidneys = place_kidneys(cfg, &mut rng::stream(seed, &[STREAM_GEOMETRY]));

    let has_lesions = force_lesions.unwrap_or_else(|| {
        let mut r = rng::stream(seed, &[STREAM_PRESENCE]);
        r.gen_bool(cfg.lesion_prob)
    });
    let lesions = if has_lesions {
        place_lesions(cfg, &grid, &kidneys, &mut rng::stream(seed, &[STREAM_LESIONS]))
    } else {
        Vec::new()
    };
    let true_label = if lesions.is_empty() { Label::Healthy } else { Label::Unhealthy };

    let truth = BinaryMask::from_fn(grid, |x, y, z| {
        let p = grid.position(x, y, z);
        lesions.iter().any(|l| in_sphere(p, l.center_mm, l.diameter_mm / 2.0))
    });

    let mut data = vec![cfg.background_mean; grid.len()];
    for (i, v) in data.iter_mut().enumerate() {
        let [x, y, z] = grid.coords(i);
        let p = grid.position(x, y, z);
        if kidneys.iter().any(|k| k.contains(p)) {
            *v = cfg.kidney_mean;
            if let Some(l) = lesions.iter().find(|l| in_sphere(p, l.center_mm, l.diameter_mm / 2.0)) {
                *v += l.delta;
            }
        }
    }
    if cfg.blur_sigma_vox > 0.0 {
        gaussian_blur(&mut data, grid.dims, cfg.blur_sigma_vox);
    }
    if cfg.noise_sigma > 0.0 {
        let mut r = rng::stream(seed, &[STREAM_NOISE]);
        for v in data.iter_mut() {
            *v += cfg.noise_sigma * rng::normal_f32(&mut r);
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));

    let weak_label = assign_weak_label(true_label, cfg.label_flip_prob, &mut rng::stream(seed, &[STREAM_LABEL]));
    Ok(LabeledCase {
        id: format!("case_{seed:06}"),
        image: Volume::new(grid, data)?,
        kidneys,
        lesions,
        weak_label,
        true_label,
        truth,
    })
}

/// Generate `n` cases with per-case seeds `cfg.seed + i`. With `balanced`, odd
/// indices carry lesions and even indices are healthy.
pub fn generate_dataset(cfg: &PhantomConfig, n: usize, balanced: bool) -> Result<Vec<LabeledCase>> {
    cfg.validate()?;
    crate::par::map_range(n, |i| {
        let force = balanced.then_some(i % 2 == 1);
        generate_case_with(cfg, cfg.seed.wrapping_add(i as u64), force)
    })
    .into_iter()
    .collect()
}

/// Kidney centroids known to the generator, left to right.
pub fn roi_center(case: &LabeledCase) -> Vec<[f64; 3]> {
    case.kidneys.iter().map(|k| k.center_mm).collect()
}

/// Report-style weak label: the true label, flipped with probability `flip_prob`.
pub fn assign_weak_label(true_label: Label, flip_prob: f64, rng: &mut Rng) -> Label {
    if flip_prob > 0.0 && rng.gen_bool(flip_prob.clamp(0.0, 1.0)) {
        true_label.flipped()
    } else {
        true_label
    }
}

fn in_sphere(p: [f64; 3], c: [f64; 3], r: f64) -> bool {
    (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r
}

fn place_kidneys(cfg: &PhantomConfig, r: &mut Rng) -> Vec<Kidney> {
    let g = cfg.grid();
    let extent: [f64; 3] = std::array::from_fn(|a| (g.dims[a] - 1) as f64 * g.spacing[a] as f64);
    let nominal_x: Vec<f64> = match cfg.kidneys {
        1 => vec![0.5],
        _ => vec![0.27, 0.73],
    };
    nominal_x
        .into_iter()
        .map(|fx| {
            let semi_axes_mm = std::array::from_fn(|a| {
                let (lo, hi) = (cfg.semi_axes_min_mm[a] as f64, cfg.semi_axes_max_mm[a] as f64);
                if hi > lo { r.gen_range(lo..=hi) } else { lo }
            });
            let jitter = cfg.center_jitter_mm as f64;
            let center_mm = std::array::from_fn(|a| {
                let base = if a == 0 { fx * extent[0] } else { 0.5 * extent[a] };
                let j = if jitter > 0.0 { r.gen_range(-jitter..=jitter) } else { 0.0 };
                base + j
            });
            Kidney { center_mm, semi_axes_mm }
        })
        .collect()
}

fn place_lesions(cfg: &PhantomConfig, grid: &Grid, kidneys: &[Kidney], r: &mut Rng) -> Vec<Lesion> {
    let (nlo, nhi) = cfg.lesions_per_case;
    let count = r.gen_range(nlo..=nhi);
    let mut out: Vec<Lesion> = Vec::with_capacity(count);
    let gap = 2.0 * grid.spacing.iter().cloned().fold(0.0f32, f32::max) as f64;
    for k in 0..count {
        let (dlo, dhi) = cfg.lesion_diameter_mm;
        let diameter = if dhi > dlo { r.gen_range(dlo as f64..=dhi as f64) } else { dlo as f64 };
        let delta = if r.gen_bool(0.5) { cfg.lesion_contrast } else { -cfg.lesion_contrast };
        let kidney = kidneys[r.gen_range(0..kidneys.len())];
        let radius = diameter / 2.0;
        let mut placed = None;
        for _ in 0..200 {
            let c: [f64; 3] = std::array::from_fn(|a| {
                let s = kidney.semi_axes_mm[a];
                kidney.center_mm[a] + r.gen_range(-s..=s)
            });
            let clear = out.iter().all(|l| {
                let d2: f64 = (0..3).map(|a| (c[a] - l.center_mm[a]).powi(2)).sum();
                d2.sqrt() > radius + l.diameter_mm / 2.0 + gap
            });
            if clear && sphere_inside(grid, &kidney, c, radius) {
                placed = Some(c);
                break;
            }
        }
        // The kidney center always fits (diameter < minor axis), so the first
        // lesion is never dropped.
        let center = match placed {
            Some(c) => c,
            None if k == 0 => kidney.center_mm,
            None => continue,
        };
        out.push(Lesion { center_mm: center, diameter_mm: diameter, delta });
    }
    out
}

/// Every voxel center of the ball lies inside the kidney and inside the grid.
fn sphere_inside(grid: &Grid, kidney: &Kidney, c: [f64; 3], r: f64) -> bool {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let sp = grid.spacing[a] as f64;
        let o = grid.origin[a] as f64;
        let l = ((c[a] - r - o) / sp).floor();
        let h = ((c[a] + r - o) / sp).ceil();
        if l < 0.0 || h > (grid.dims[a] - 1) as f64 {
            return false;
        }
        lo[a] = l as usize;
        hi[a] = h as usize;
    }
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let p = grid.position(x, y, z);
                if in_sphere(p, c, r) && !kidney.contains(p) {
                    return false;
                }
            }
        }
    }
    true
}

/// Separable Gaussian blur with replicate boundaries, `sigma` in voxels.
pub fn gaussian_blur(data: &mut [f32], dims: [usize; 3], sigma: f32) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = {
        let k: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f32 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    };
    let [nx, ny, nz] = dims;
    let strides = [1, nx, nx * ny];
    let mut tmp = vec![0.0f32; data.len()];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let st = strides[axis];
        for (i, out) in tmp.iter_mut().enumerate() {
            let c = [i % nx, (i / nx) % ny, i / (nx * ny)][axis] as isize;
            let base = i - c as usize * st;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let j = (c + k as isize - radius).clamp(0, n - 1) as usize;
                acc += w * data[base + j * st];
            }
            *out = acc;
        }
        data.copy_from_slice(&tmp);
        let _ = nz;
    }
}

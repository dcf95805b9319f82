//! Stage drivers behind the `ladet` tool. Each stage reads and writes plain
//! files under the configured `paths`:
//!
//! ```text
//! data/manifest.csv  data/images/<id>.vol  data/truth/<id>.vol
//! models/codec.ckpt  models/denoiser.net   models/classifier.net  models/*_train.csv
//! out/anomaly/  out/recon/  out/candidates/  out/montage/  out/detect.csv
//! out/report.csv  out/summary.csv  out/sweep.csv  out/best.cfg
//! ```

use std::path::{Path, PathBuf};

use crate::config::{PatchConfig, PipelineConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::volgrid::{extract_patch, resample_dims, resample_isotropic, PatchPlacement, Volume};

mod data;
mod detect;
mod eval;
mod train;

pub use data::{gen_data, load_cases, read_manifest, write_manifest, CaseRecord, MANIFEST};
pub use detect::{detect, detect_case, DetectContext, DetectSummary, Detection, LoadedModels};
pub use eval::{eval_dirs, read_instances, run_eval, sweep, EvalOutcome};
pub use train::{train_stage, Stage, StageSummary};

pub(crate) const TAG_PHANTOM: u64 = 0x11;
pub(crate) const TAG_CODEC: u64 = 0x21;
pub(crate) const TAG_CODEC_TRAIN: u64 = 0x22;
pub(crate) const TAG_DENOISER: u64 = 0x31;
pub(crate) const TAG_DENOISER_TRAIN: u64 = 0x32;
pub(crate) const TAG_CLASSIFIER: u64 = 0x41;
pub(crate) const TAG_CLASSIFIER_TRAIN: u64 = 0x42;
pub(crate) const TAG_SPLIT: u64 = 0x43;
pub(crate) const TAG_DETECT: u64 = 0x51;

pub fn stage_seed(cfg: &PipelineConfig, tag: u64) -> u64 {
    rng::derive(cfg.seed, &[tag])
}

/// FNV-1a; keys per-case sampler seeds by case id so a case gets the same noise
/// whatever else is in the run.
pub fn case_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone)]
pub struct ModelPaths {
    pub codec: PathBuf,
    pub denoiser: PathBuf,
    pub classifier: PathBuf,
}

impl ModelPaths {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self { codec: d.join("codec.ckpt"), denoiser: d.join("denoiser.net"), classifier: d.join("classifier.net") }
    }
}

pub(crate) fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{what} ({})", path.display())))
    }
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", path.display()))))
}

/// One kidney window at native and at working resolution.
#[derive(Debug, Clone)]
pub struct WorkPatch {
    pub native: Volume,
    pub work: Volume,
    pub placement: PatchPlacement,
}

fn at_spacing(vol: &Volume, mm: f32) -> Result<Volume> {
    if vol.spacing().iter().all(|&s| s == mm) {
        Ok(vol.clone())
    } else {
        resample_isotropic(vol, mm)
    }
}

/// Bring a working-resolution volume back onto `native`'s grid.
pub fn to_native(work: &Volume, native: &Volume) -> Result<Volume> {
    if work.grid().same_shape(native.grid()) && work.spacing() == native.spacing() {
        return Ok(work.clone().with_origin(native.grid().origin));
    }
    Ok(resample_dims(work, native.dims())?.with_origin(native.grid().origin))
}

pub fn work_patches(image: &Volume, centers: &[[f64; 3]], patch: &PatchConfig) -> Result<Vec<WorkPatch>> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument("case has no ROI centre".into()));
    }
    centers
        .iter()
        .map(|&c| {
            let (native, placement) = extract_patch(image, c, patch.size_mm)?;
            let work = at_spacing(&native, patch.work_spacing_mm)?;
            Ok(WorkPatch { native, work, placement })
        })
        .collect()
}

/// Sorted ids of the `<id>.vol` files in `dir`.
pub fn vol_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("cannot list {}: {e}", dir.display()))))?
    {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "vol") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests;

//! `detect`: healthy reconstruction, anomaly map and candidates per case.

use std::path::Path;

use super::data::{image_path, read_manifest};
use super::train::{load_codec, schedule};
use super::{case_key, ensure_dir, require, stage_seed, to_native, work_patches, ModelPaths, MANIFEST, TAG_DETECT};
use crate::classifier::Classifier;
use crate::config::{PatchConfig, PipelineConfig};
use crate::diffnet::{read_net, Network};
use crate::diffusion::{reconstruct_healthy, anomaly_map, EpsModel, GuidanceModel, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::montage::montage;
use crate::par;
use crate::postprocess::{extract_candidates, Candidates, PostprocessConfig};
use crate::rng;
use crate::volgrid::{compose_full_map, read_vol, write_vol, BinaryMask, VolFile, Volume};

/// Everything `detect_case` needs; models are shared read-only across cases.
#[derive(Clone, Copy)]
pub struct DetectContext<'a> {
    pub codec: &'a crate::vqcodec::Codec,
    pub denoiser: &'a dyn EpsModel,
    pub classifier: Option<&'a dyn GuidanceModel>,
    pub schedule: &'a NoiseSchedule,
    pub sampler: &'a SamplerConfig,
    pub patch: &'a PatchConfig,
    pub post: &'a PostprocessConfig,
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub anomaly: Volume,
    /// input with each kidney window replaced by its reconstruction
    pub recon: Volume,
    pub roi: BinaryMask,
    pub candidates: Candidates,
    /// axial slice through the first window's centre
    pub slice: usize,
}

/// Patch → working resolution → codec/diffusion → back to native → |x − x̂|,
/// composed over all windows and thresholded inside them. Window `k` samples
/// with seed `derive(seed, [k])`.
pub fn detect_case(image: &Volume, centers: &[[f64; 3]], ctx: &DetectContext, seed: u64) -> Result<Detection> {
    let full = *image.grid();
    let patches = work_patches(image, centers, ctx.patch)?;
    let mut maps = Vec::with_capacity(patches.len());
    let mut recon = image.data().to_vec();
    let mut roi = BinaryMask::empty(full);
    for (k, p) in patches.iter().enumerate() {
        let sampler = SamplerConfig { seed: rng::derive(seed, &[k as u64]), ..ctx.sampler.clone() };
        let r = reconstruct_healthy(&p.work, &sampler, ctx.schedule, ctx.codec, ctx.denoiser, ctx.classifier)?;
        let r = to_native(&r, &p.native)?;
        let [px, py, pz] = p.placement.patch_dims;
        let o = p.placement.offset;
        for z in 0..pz {
            for y in 0..py {
                for x in 0..px {
                    let i = full.index(o[0] + x, o[1] + y, o[2] + z);
                    recon[i] = r.get(x, y, z);
                    roi.set_index(i, true);
                }
            }
        }
        maps.push((anomaly_map(&p.native, &r)?, p.placement));
    }
    let anomaly = compose_full_map(&maps, full)?;
    let candidates = extract_candidates(&anomaly, Some(&roi), ctx.post)?;
    let first = patches[0].placement;
    Ok(Detection {
        anomaly,
        recon: Volume::new(full, recon)?,
        roi,
        candidates,
        slice: first.offset[2] + first.patch_dims[2] / 2,
    })
}

/// Checkpoints loaded for a detect or sweep run.
pub struct LoadedModels {
    pub codec: crate::vqcodec::Codec,
    pub denoiser: Network,
    pub classifier: Option<Classifier>,
    pub schedule: NoiseSchedule,
}

impl LoadedModels {
    /// The classifier is only required (and loaded) when guidance is on.
    pub fn load(cfg: &PipelineConfig, need_classifier: bool) -> Result<Self> {
        let paths = ModelPaths::new(&cfg.paths.models);
        let codec = load_codec(&paths)?;
        require(&paths.denoiser, "denoiser checkpoint; run `train denoiser` first")?;
        let denoiser = read_net(&paths.denoiser)?;
        if denoiser.in_channels() != codec.latent_dim() {
            return Err(Error::InvalidArgument("denoiser channels do not match the codec latent".into()));
        }
        let classifier = if need_classifier {
            require(&paths.classifier, "classifier checkpoint; run `train classifier` or set guidance_scale = 0")?;
            Some(Classifier::from_network(read_net(&paths.classifier)?, cfg.denoiser.timesteps)?)
        } else {
            None
        };
        Ok(Self { codec, denoiser, classifier, schedule: schedule(cfg)? })
    }

    pub fn context<'a>(&'a self, cfg: &'a PipelineConfig, sampler: &'a SamplerConfig) -> DetectContext<'a> {
        DetectContext {
            codec: &self.codec,
            denoiser: &self.denoiser,
            classifier: self.classifier.as_ref().map(|c| c as &dyn GuidanceModel),
            schedule: &self.schedule,
            sampler,
            patch: &cfg.patch,
            post: &cfg.post,
        }
    }
}

pub fn case_seed(cfg: &PipelineConfig, id: &str) -> u64 {
    rng::derive(stage_seed(cfg, TAG_DETECT), &[case_key(id)])
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectSummary {
    pub processed: Vec<String>,
    /// (case id, error message)
    pub failures: Vec<(String, String)>,
}

fn write_outputs(out: &Path, id: &str, image: &Volume, d: &Detection) -> Result<()> {
    write_vol(out.join("anomaly").join(format!("{id}.vol")), &VolFile::from_volume(&d.anomaly))?;
    write_vol(out.join("recon").join(format!("{id}.vol")), &VolFile::from_volume(&d.recon))?;
    write_vol(out.join("candidates").join(format!("{id}.vol")), &d.candidates.components.to_vol_file())?;
    let z = d.slice.min(image.dims()[2] - 1);
    montage(image, &d.recon, &d.anomaly, &d.candidates.components.foreground(), z)?
        .write_pgm(out.join("montage").join(format!("{id}.pgm")))
}

/// Run detection on `ids` (all manifest cases when `None`) and write the
/// per-case outputs under `cfg.paths.out`. A failing case is recorded in
/// `detect.csv` and the run goes on; missing checkpoints abort up front.
pub fn detect(cfg: &PipelineConfig, ids: Option<&[String]>) -> Result<DetectSummary> {
    let models = LoadedModels::load(cfg, cfg.sampler.scale > 0.0)?;
    let manifest = read_manifest(&cfg.paths.data.join(MANIFEST))?;
    let cases: Vec<_> = match ids {
        None => manifest.iter().map(|c| (c.id.clone(), Some(c))).collect(),
        Some(ids) => ids.iter().map(|id| (id.clone(), manifest.iter().find(|c| &c.id == id))).collect(),
    };
    let out = &cfg.paths.out;
    for sub in ["anomaly", "recon", "candidates", "montage"] {
        ensure_dir(&out.join(sub))?;
    }
    let ctx = models.context(cfg, &cfg.sampler);
    let results = par::map(&cases, |(id, rec)| -> (Result<Option<f32>>, usize) {
        let run = || -> Result<Detection> {
            let rec = rec.ok_or_else(|| Error::InvalidArgument("not in the manifest".into()))?;
            let p = image_path(&cfg.paths.data, id);
            require(&p, "case image")?;
            let image = read_vol(&p)?.into_volume()?;
            let d = detect_case(&image, &rec.roi_centers, &ctx, case_seed(cfg, id))?;
            write_outputs(out, id, &image, &d)?;
            Ok(d)
        };
        match run() {
            Ok(d) => (Ok(d.candidates.threshold), d.candidates.components.len()),
            Err(e) => (Err(e), 0),
        }
    });
    let mut summary = DetectSummary::default();
    let mut w = csv::Writer::from_path(out.join("detect.csv"))?;
    w.write_record(["case_id", "status", "threshold", "candidates", "error"])?;
    for ((id, _), (res, n)) in cases.iter().zip(results) {
        match res {
            Ok(t) => {
                let t = t.map_or("N/A".to_string(), |t| format!("{t:.6}"));
                w.write_record([id.as_str(), "ok", &t, &n.to_string(), ""])?;
                summary.processed.push(id.clone());
            }
            Err(e) => {
                w.write_record([id.as_str(), "failed", "N/A", "0", &e.to_string()])?;
                summary.failures.push((id.clone(), e.to_string()));
            }
        }
    }
    w.flush()?;
    Ok(summary)
}

//! Run configuration: a flat sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [sampler]
//! mode = ddpm
//! noise_level = 500
//! ```
//! Lists are whitespace or comma separated. Unknown sections and keys are
//! errors, as are repeated keys.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffnet::TrainConfig;
use crate::diffusion::{SamplerConfig, SamplerMode};
use crate::error::{Error, Result};
use crate::phantom::PhantomConfig;
use crate::postprocess::{Connectivity, PostprocessConfig};
use crate::vqcodec::CodecConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// cases written by gen-data
    pub cases: usize,
    /// alternate healthy / unhealthy instead of drawing lesion presence
    pub balanced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchConfig {
    pub size_mm: [f64; 3],
    /// resampling applied to each patch before the codec
    pub work_spacing_mm: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub width: usize,
    pub levels: usize,
    /// diffusion length T
    pub timesteps: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSection {
    pub width: usize,
    pub levels: usize,
    pub max_t: usize,
    /// share of cases held out for validation AUC
    pub val_fraction: f64,
    /// epochs in `train.budget`
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub iou: f64,
    pub bin_edges_cm: Vec<f64>,
    /// false for detection-only predictions (DSC reported as N/A)
    pub segmentation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub levels: Vec<usize>,
    pub scales: Vec<f64>,
    /// 0 uses every case with reference lesions
    pub max_cases: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub data: PathBuf,
    pub models: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// 0 = all available threads
    pub workers: usize,
    pub phantom: PhantomConfig,
    pub data: DataConfig,
    pub patch: PatchConfig,
    pub codec: CodecConfig,
    pub codec_train: TrainConfig,
    pub denoiser: DenoiserConfig,
    pub classifier: ClassifierSection,
    pub sampler: SamplerConfig,
    pub post: PostprocessConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            phantom: PhantomConfig::default(),
            data: DataConfig { cases: 40, balanced: false },
            patch: PatchConfig { size_mm: [32.0, 32.0, 48.0], work_spacing_mm: 2.0 },
            codec: CodecConfig { levels: 1, width: 16, ..CodecConfig::default() },
            codec_train: TrainConfig { learning_rate: 2e-3, batch_size: 4, budget: 1500, patience: 5, seed: 0 },
            denoiser: DenoiserConfig {
                width: 16,
                levels: 1,
                timesteps: 1000,
                train: TrainConfig { learning_rate: 2e-3, batch_size: 8, budget: 1000, patience: 5, seed: 0 },
            },
            classifier: ClassifierSection {
                width: 8,
                levels: 1,
                max_t: 500,
                val_fraction: 0.25,
                train: TrainConfig { learning_rate: 1e-3, batch_size: 8, budget: 30, patience: 8, seed: 0 },
            },
            sampler: SamplerConfig::default(),
            post: PostprocessConfig { min_threshold: 0.2, ..PostprocessConfig::default() },
            eval: EvalConfig { iou: 0.2, bin_edges_cm: vec![2.0, 4.0, 7.0], segmentation: true },
            sweep: SweepConfig { levels: vec![500], scales: vec![1600.0, 1800.0], max_cases: 0 },
            paths: Paths { data: "data".into(), models: "models".into(), out: "out".into() },
        }
    }
}

fn cfg_err(line: usize, msg: impl std::fmt::Display) -> Error {
    if line == 0 {
        Error::Config(msg.to_string())
    } else {
        Error::Config(format!("line {line}: {msg}"))
    }
}

fn scalar<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.trim().parse::<T>().map_err(|_| format!("cannot parse {v:?}"))
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).map(scalar).collect()
}

fn array<T: FromStr + Copy + Default, const N: usize>(v: &str) -> std::result::Result<[T; N], String> {
    let items: Vec<T> = list(v)?;
    if items.len() != N {
        return Err(format!("expected {N} values, got {}", items.len()));
    }
    let mut out = [T::default(); N];
    out.copy_from_slice(&items);
    Ok(out)
}

fn pair<T: FromStr + Copy + Default>(v: &str) -> std::result::Result<(T, T), String> {
    let [a, b] = array::<T, 2>(v)?;
    Ok((a, b))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true/false, got {v:?}")),
    }
}

fn connectivity(v: &str) -> std::result::Result<Connectivity, String> {
    Connectivity::from_count(scalar(v)?).map_err(|e| e.to_string())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seen = HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let no = no + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| cfg_err(no, "unterminated section header"))?.trim();
                if !SECTIONS.contains(&name) {
                    return Err(cfg_err(no, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| cfg_err(no, "expected key = value"))?;
            let key = key.trim();
            if section.is_empty() {
                return Err(cfg_err(no, format!("key {key:?} outside any section")));
            }
            if !seen.insert(format!("{section}.{key}")) {
                return Err(cfg_err(no, format!("duplicate key {section}.{key}")));
            }
            cfg.set(&section, key, value.trim()).map_err(|m| cfg_err(no, format!("{section}.{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Assign one key. Used by the parser and by command-line overrides.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let ph = &mut self.phantom;
        match (section, key) {
            ("global", "seed") => self.seed = scalar(v)?,
            ("global", "workers") => self.workers = scalar(v)?,

            ("phantom", "grid_dims") => ph.grid_dims = array(v)?,
            ("phantom", "spacing_mm") => ph.spacing_mm = scalar(v)?,
            ("phantom", "kidneys") => ph.kidneys = scalar(v)?,
            ("phantom", "semi_axes_min_mm") => ph.semi_axes_min_mm = array(v)?,
            ("phantom", "semi_axes_max_mm") => ph.semi_axes_max_mm = array(v)?,
            ("phantom", "center_jitter_mm") => ph.center_jitter_mm = scalar(v)?,
            ("phantom", "background_mean") => ph.background_mean = scalar(v)?,
            ("phantom", "kidney_mean") => ph.kidney_mean = scalar(v)?,
            ("phantom", "lesion_contrast") => ph.lesion_contrast = scalar(v)?,
            ("phantom", "noise_sigma") => ph.noise_sigma = scalar(v)?,
            ("phantom", "lesion_prob") => ph.lesion_prob = scalar(v)?,
            ("phantom", "lesion_diameter_mm") => ph.lesion_diameter_mm = pair(v)?,
            ("phantom", "lesions_per_case") => ph.lesions_per_case = pair(v)?,
            ("phantom", "label_flip_prob") => ph.label_flip_prob = scalar(v)?,
            ("phantom", "blur_sigma_vox") => ph.blur_sigma_vox = scalar(v)?,

            ("data", "cases") => self.data.cases = scalar(v)?,
            ("data", "balanced") => self.data.balanced = boolean(v)?,

            ("patch", "size_mm") => self.patch.size_mm = array(v)?,
            ("patch", "work_spacing_mm") => self.patch.work_spacing_mm = scalar(v)?,

            ("codec", "identity") => self.codec.identity = boolean(v)?,
            ("codec", "levels") => self.codec.levels = scalar(v)?,
            ("codec", "latent_dim") => self.codec.latent_dim = scalar(v)?,
            ("codec", "codebook_size") => self.codec.codebook_size = scalar(v)?,
            ("codec", "width") => self.codec.width = scalar(v)?,
            ("codec", "commitment") => self.codec.commitment = scalar(v)?,
            ("codec", "gan") => self.codec.gan = boolean(v)?,
            ("codec", "gan_weight") => self.codec.gan_weight = scalar(v)?,
            ("codec", "restart_every") => self.codec.restart_every = scalar(v)?,
            ("codec", k) => set_train(&mut self.codec_train, k, v)?,

            ("denoiser", "width") => self.denoiser.width = scalar(v)?,
            ("denoiser", "levels") => self.denoiser.levels = scalar(v)?,
            ("denoiser", "timesteps") => self.denoiser.timesteps = scalar(v)?,
            ("denoiser", k) => set_train(&mut self.denoiser.train, k, v)?,

            ("classifier", "width") => self.classifier.width = scalar(v)?,
            ("classifier", "levels") => self.classifier.levels = scalar(v)?,
            ("classifier", "max_t") => self.classifier.max_t = scalar(v)?,
            ("classifier", "val_fraction") => self.classifier.val_fraction = scalar(v)?,
            ("classifier", k) => set_train(&mut self.classifier.train, k, v)?,

            ("sampler", "mode") => {
                self.sampler.mode = SamplerMode::parse(v).map_err(|e| e.to_string())?
            }
            ("sampler", "noise_level") => self.sampler.level = scalar(v)?,
            ("sampler", "guidance_scale") => self.sampler.scale = scalar(v)?,
            ("sampler", "stride") => self.sampler.stride = scalar(v)?,
            ("sampler", "refine") => self.sampler.refine = scalar(v)?,

            ("postprocess", "bins") => self.post.bins = scalar(v)?,
            ("postprocess", "morph_connectivity") => self.post.morph_connectivity = connectivity(v)?,
            ("postprocess", "component_connectivity") => self.post.component_connectivity = connectivity(v)?,
            ("postprocess", "min_voxels") => self.post.min_voxels = scalar(v)?,
            ("postprocess", "min_diameter_mm") => self.post.min_diameter_mm = scalar(v)?,
            ("postprocess", "min_threshold") => self.post.min_threshold = scalar(v)?,

            ("eval", "iou") => self.eval.iou = scalar(v)?,
            ("eval", "bin_edges_cm") => self.eval.bin_edges_cm = list(v)?,
            ("eval", "segmentation") => self.eval.segmentation = boolean(v)?,

            ("sweep", "noise_levels") => self.sweep.levels = list(v)?,
            ("sweep", "guidance_scales") => self.sweep.scales = list(v)?,
            ("sweep", "max_cases") => self.sweep.max_cases = scalar(v)?,

            ("paths", "data") => self.paths.data = v.into(),
            ("paths", "models") => self.paths.models = v.into(),
            ("paths", "out") => self.paths.out = v.into(),

            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if !self.codec.identity {
            self.codec.validate()?;
        }
        for (name, t) in [("codec", &self.codec_train), ("denoiser", &self.denoiser.train), ("classifier", &self.classifier.train)] {
            t.validate().map_err(|e| Error::Config(format!("[{name}] {e}")))?;
        }
        if self.patch.size_mm.iter().any(|&s| !(s > 0.0)) || !(self.patch.work_spacing_mm > 0.0) {
            return Err(Error::Config("patch size and work spacing must be positive".into()));
        }
        if self.denoiser.timesteps == 0 || self.denoiser.width == 0 || self.classifier.width == 0 {
            return Err(Error::Config("denoiser/classifier need positive width and timesteps".into()));
        }
        if self.sampler.level > self.denoiser.timesteps {
            return Err(Error::Config(format!(
                "noise level {} exceeds timesteps {}",
                self.sampler.level, self.denoiser.timesteps
            )));
        }
        if let Some(&l) = self.sweep.levels.iter().find(|&&l| l > self.denoiser.timesteps) {
            return Err(Error::Config(format!("sweep noise level {l} exceeds timesteps")));
        }
        if !(0.0..1.0).contains(&self.classifier.val_fraction) {
            return Err(Error::Config("classifier.val_fraction must be in [0, 1)".into()));
        }
        if !(self.eval.iou > 0.0 && self.eval.iou <= 1.0) {
            return Err(Error::Config("eval.iou must be in (0, 1]".into()));
        }
        crate::evalkit::bins_from_edges(&self.eval.bin_edges_cm).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Render in the same format `parse` reads; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let p = &self.phantom;
        let mut s = String::new();
        let mut sec = |name: &str, kv: Vec<(&str, String)>| {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        sec("global", vec![("seed", self.seed.to_string()), ("workers", self.workers.to_string())]);
        sec(
            "phantom",
            vec![
                ("grid_dims", join(&p.grid_dims)),
                ("spacing_mm", p.spacing_mm.to_string()),
                ("kidneys", p.kidneys.to_string()),
                ("semi_axes_min_mm", join(&p.semi_axes_min_mm)),
                ("semi_axes_max_mm", join(&p.semi_axes_max_mm)),
                ("center_jitter_mm", p.center_jitter_mm.to_string()),
                ("background_mean", p.background_mean.to_string()),
                ("kidney_mean", p.kidney_mean.to_string()),
                ("lesion_contrast", p.lesion_contrast.to_string()),
                ("noise_sigma", p.noise_sigma.to_string()),
                ("lesion_prob", p.lesion_prob.to_string()),
                ("lesion_diameter_mm", join(&[p.lesion_diameter_mm.0, p.lesion_diameter_mm.1])),
                ("lesions_per_case", join(&[p.lesions_per_case.0, p.lesions_per_case.1])),
                ("label_flip_prob", p.label_flip_prob.to_string()),
                ("blur_sigma_vox", p.blur_sigma_vox.to_string()),
            ],
        );
        sec("data", vec![("cases", self.data.cases.to_string()), ("balanced", self.data.balanced.to_string())]);
        sec(
            "patch",
            vec![("size_mm", join(&self.patch.size_mm)), ("work_spacing_mm", self.patch.work_spacing_mm.to_string())],
        );
        let c = &self.codec;
        let mut kv = vec![
            ("identity", c.identity.to_string()),
            ("levels", c.levels.to_string()),
            ("latent_dim", c.latent_dim.to_string()),
            ("codebook_size", c.codebook_size.to_string()),
            ("width", c.width.to_string()),
            ("commitment", c.commitment.to_string()),
            ("gan", c.gan.to_string()),
            ("gan_weight", c.gan_weight.to_string()),
            ("restart_every", c.restart_every.to_string()),
        ];
        kv.extend(train_kv(&self.codec_train));
        sec("codec", kv);
        let d = &self.denoiser;
        let mut kv =
            vec![("width", d.width.to_string()), ("levels", d.levels.to_string()), ("timesteps", d.timesteps.to_string())];
        kv.extend(train_kv(&d.train));
        sec("denoiser", kv);
        let k = &self.classifier;
        let mut kv = vec![
            ("width", k.width.to_string()),
            ("levels", k.levels.to_string()),
            ("max_t", k.max_t.to_string()),
            ("val_fraction", k.val_fraction.to_string()),
        ];
        kv.extend(train_kv(&k.train));
        sec("classifier", kv);
        let sm = &self.sampler;
        sec(
            "sampler",
            vec![
                ("mode", sm.mode.as_str().to_string()),
                ("noise_level", sm.level.to_string()),
                ("guidance_scale", sm.scale.to_string()),
                ("stride", sm.stride.to_string()),
                ("refine", sm.refine.to_string()),
            ],
        );
        let pp = &self.post;
        sec(
            "postprocess",
            vec![
                ("bins", pp.bins.to_string()),
                ("morph_connectivity", pp.morph_connectivity.count().to_string()),
                ("component_connectivity", pp.component_connectivity.count().to_string()),
                ("min_voxels", pp.min_voxels.to_string()),
                ("min_diameter_mm", pp.min_diameter_mm.to_string()),
                ("min_threshold", pp.min_threshold.to_string()),
            ],
        );
        sec(
            "eval",
            vec![
                ("iou", self.eval.iou.to_string()),
                ("bin_edges_cm", join(&self.eval.bin_edges_cm)),
                ("segmentation", self.eval.segmentation.to_string()),
            ],
        );
        sec(
            "sweep",
            vec![
                ("noise_levels", join(&self.sweep.levels)),
                ("guidance_scales", join(&self.sweep.scales)),
                ("max_cases", self.sweep.max_cases.to_string()),
            ],
        );
        sec(
            "paths",
            vec![
                ("data", self.paths.data.display().to_string()),
                ("models", self.paths.models.display().to_string()),
                ("out", self.paths.out.display().to_string()),
            ],
        );
        s
    }
}

const SECTIONS: [&str; 12] =
    ["global", "phantom", "data", "patch", "codec", "denoiser", "classifier", "sampler", "postprocess", "eval", "sweep", "paths"];

fn set_train(t: &mut TrainConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "lr" => t.learning_rate = scalar(v)?,
        "batch_size" => t.batch_size = scalar(v)?,
        "budget" => t.budget = scalar(v)?,
        "patience" => t.patience = scalar(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

fn train_kv(t: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("lr", t.learning_rate.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("budget", t.budget.to_string()),
        ("patience", t.patience.to_string()),
    ]
}

//! `train codec | denoiser | classifier`.

use std::path::PathBuf;

use rand::seq::SliceRandom;

use super::{
    ensure_dir, load_cases, require, stage_seed, work_patches, ModelPaths, TAG_CLASSIFIER, TAG_CLASSIFIER_TRAIN,
    TAG_CODEC, TAG_CODEC_TRAIN, TAG_DENOISER, TAG_DENOISER_TRAIN, TAG_SPLIT,
};
use crate::classifier::{train_classifier, Classifier, ClassifierTrainConfig, LabeledLatent};
use crate::config::PipelineConfig;
use crate::diffnet::{read_net, write_net, ArchKind, ArchSpec, Network, TensorGrid, TrainConfig};
use crate::diffusion::{make_schedule, train_denoiser, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::phantom::Label;
use crate::rng;
use crate::vqcodec::{read_codec, write_codec, Codec, CodecConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Codec,
    Denoiser,
    Classifier,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::Denoiser => "denoiser",
            Stage::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "codec" => Ok(Stage::Codec),
            "denoiser" => Ok(Stage::Denoiser),
            "classifier" => Ok(Stage::Classifier),
            _ => Err(Error::InvalidArgument(format!("unknown training stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// optimizer steps after this run (classifier: epochs run)
    pub steps: u64,
    pub final_loss: Option<f64>,
}

pub fn schedule(cfg: &PipelineConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.denoiser.timesteps, ScheduleKind::Linear)
}

pub(crate) fn codec_config(cfg: &PipelineConfig) -> CodecConfig {
    CodecConfig { seed: stage_seed(cfg, TAG_CODEC), ..cfg.codec.clone() }
}

fn seeded_train(t: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..t.clone() }
}

pub(crate) fn load_codec(paths: &ModelPaths) -> Result<Codec> {
    require(&paths.codec, "codec checkpoint; run `train codec` first")?;
    read_codec(&paths.codec)
}

/// Working-resolution patches of every manifest case, with the case's weak label.
fn training_patches(cfg: &PipelineConfig) -> Result<Vec<(usize, Label, crate::volgrid::Volume)>> {
    let cases = load_cases(&cfg.paths.data, None)?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument("the manifest lists no cases".into()));
    }
    let mut out = Vec::new();
    for (k, (rec, image)) in cases.iter().enumerate() {
        for p in work_patches(image, &rec.roi_centers, &cfg.patch)? {
            out.push((k, rec.weak_label, p.work));
        }
    }
    Ok(out)
}

fn latents(codec: &Codec, vols: &[&crate::volgrid::Volume]) -> Result<Vec<TensorGrid>> {
    crate::par::map(vols, |v| codec.encode(v).map(|l| codec.normalize(&l))).into_iter().collect()
}

fn write_log(path: &PathBuf, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Train one stage. With `resume` an existing checkpoint is loaded and its
/// optimizer state and step counter carried on; otherwise training starts from
/// the seeded initialization. A zero budget writes the initialization.
pub fn train_stage(cfg: &PipelineConfig, stage: Stage, resume: bool) -> Result<StageSummary> {
    let paths = ModelPaths::new(&cfg.paths.models);
    ensure_dir(&cfg.paths.models)?;
    let log = cfg.paths.models.join(format!("{}_train.csv", stage.as_str()));
    match stage {
        Stage::Codec => {
            let mut codec = if resume && paths.codec.is_file() { read_codec(&paths.codec)? } else { Codec::new(codec_config(cfg))? };
            let tc = seeded_train(&cfg.codec_train, stage_seed(cfg, TAG_CODEC_TRAIN));
            let vols: Vec<_> = if tc.budget > 0 { training_patches(cfg)?.into_iter().map(|p| p.2).collect() } else { vec![] };
            let mut rows = Vec::new();
            let losses = codec.train(&vols, &tc, |step, l| {
                rows.push(vec![
                    step.to_string(),
                    format!("{:.6}", l.reconstruction),
                    format!("{:.6}", l.codebook),
                    format!("{:.6}", l.commitment),
                    format!("{:.6}", l.total()),
                ]);
            })?;
            write_codec(&paths.codec, &codec, true)?;
            write_log(&log, &["step", "reconstruction", "codebook", "commitment", "total"], rows)?;
            Ok(StageSummary {
                stage,
                checkpoint: paths.codec,
                log,
                steps: codec.step(),
                final_loss: losses.last().map(|l| l.total()),
            })
        }
        Stage::Denoiser => {
            let codec = load_codec(&paths)?;
            let sched = schedule(cfg)?;
            let channels = codec.latent_dim();
            let mut net = if resume && paths.denoiser.is_file() {
                let n = read_net(&paths.denoiser)?;
                if n.spec().kind != ArchKind::Denoiser || n.in_channels() != channels {
                    return Err(Error::InvalidArgument("existing denoiser checkpoint does not fit the codec".into()));
                }
                n
            } else {
                Network::build(ArchSpec::denoiser(channels, cfg.denoiser.width, cfg.denoiser.levels), stage_seed(cfg, TAG_DENOISER))?
            };
            let tc = seeded_train(&cfg.denoiser.train, stage_seed(cfg, TAG_DENOISER_TRAIN));
            let mut rows = Vec::new();
            let losses = if tc.budget > 0 {
                let patches = training_patches(cfg)?;
                let healthy: Vec<_> = patches.iter().filter(|p| p.1 == Label::Healthy).map(|p| &p.2).collect();
                if healthy.is_empty() {
                    return Err(Error::InvalidArgument("no weakly healthy cases to train the denoiser on".into()));
                }
                let data = latents(&codec, &healthy)?;
                train_denoiser(&mut net, &data, &sched, &tc, None, |step, l| {
                    rows.push(vec![step.to_string(), format!("{l:.6}")]);
                })?
            } else {
                vec![]
            };
            write_net(&paths.denoiser, &net, true)?;
            write_log(&log, &["step", "loss"], rows)?;
            Ok(StageSummary { stage, checkpoint: paths.denoiser, log, steps: net.adam().step, final_loss: losses.last().copied() })
        }
        Stage::Classifier => {
            let codec = load_codec(&paths)?;
            let sched = schedule(cfg)?;
            let k = &cfg.classifier;
            let steps = cfg.denoiser.timesteps;
            let mut clf = if resume && paths.classifier.is_file() {
                Classifier::from_network(read_net(&paths.classifier)?, steps)?
            } else {
                Classifier::new(codec.latent_dim(), k.width, k.levels, steps, stage_seed(cfg, TAG_CLASSIFIER))?
            };
            let mut report = None;
            if k.train.budget > 0 {
                let patches = training_patches(cfg)?;
                let vols: Vec<_> = patches.iter().map(|p| &p.2).collect();
                let zs = latents(&codec, &vols)?;
                // split by case so both patches of a case land on the same side
                let n_cases = patches.iter().map(|p| p.0).max().map_or(0, |m| m + 1);
                let mut order: Vec<usize> = (0..n_cases).collect();
                order.shuffle(&mut rng::stream(cfg.seed, &[TAG_SPLIT]));
                let n_val = (n_cases as f64 * k.val_fraction).floor() as usize;
                let val_cases = &order[..n_val];
                let (mut train, mut val) = (Vec::new(), Vec::new());
                for (p, z) in patches.iter().zip(zs) {
                    let item = LabeledLatent { z, label: p.1 };
                    if val_cases.contains(&p.0) { val.push(item) } else { train.push(item) }
                }
                let tc = ClassifierTrainConfig {
                    train: seeded_train(&k.train, stage_seed(cfg, TAG_CLASSIFIER_TRAIN)),
                    max_t: k.max_t,
                };
                report = Some(train_classifier(&mut clf, &train, &val, &sched, &tc)?);
            }
            write_net(&paths.classifier, clf.network(), true)?;
            match &report {
                Some(r) => r.write_csv(&log)?,
                None => write_log(&log, &["epoch", "loss", "val_auc"], [])?,
            }
            Ok(StageSummary {
                stage,
                checkpoint: paths.classifier,
                log,
                steps: report.as_ref().map_or(0, |r| r.epochs.len() as u64),
                final_loss: report.as_ref().and_then(|r| r.epochs.last().map(|e| e.loss)),
            })
        }
    }
}

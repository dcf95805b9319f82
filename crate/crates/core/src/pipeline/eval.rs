//! `eval` over prediction / reference directories, and the (L, s) sweep.

use std::path::Path;

use super::data::{read_manifest, truth_path, image_path};
use super::detect::{case_seed, detect_case, LoadedModels};
use super::{ensure_dir, vol_ids, MANIFEST};
use crate::config::PipelineConfig;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::evalkit::{bins_from_edges, evaluate, score_case, sweep as run_sweep, CaseInput, DetectionReport, SweepResult};
use crate::postprocess::{connected_components, ComponentSet, Connectivity};
use crate::volgrid::{read_vol, Payload};

/// Instances from a VOL1 file: label grids keep their instances (relabelled
/// to `1..=N` in label order), masks are split into connected components.
pub fn read_instances(path: &Path, conn: Connectivity) -> Result<ComponentSet> {
    let f = read_vol(path)?;
    match f.payload {
        Payload::U32(labels) => {
            let mut used: Vec<u32> = labels.iter().copied().filter(|&l| l != 0).collect();
            used.sort_unstable();
            used.dedup();
            let compact = labels
                .iter()
                .map(|&l| if l == 0 { 0 } else { used.binary_search(&l).unwrap() as u32 + 1 })
                .collect();
            ComponentSet::from_labels(f.grid, compact)
        }
        Payload::U8(_) => Ok(connected_components(&f.into_mask()?, conn)),
        Payload::F32(_) => Err(Error::Format { kind: "VOL1", reason: format!("{} holds scalars, not a mask", path.display()) }),
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: DetectionReport,
    /// reference cases without a prediction file, scored as empty predictions
    pub missing_predictions: Vec<String>,
}

/// Score every reference case in `ref_dir` against `pred_dir`. A prediction
/// with no reference is an error; a missing prediction counts as empty.
pub fn eval_dirs(cfg: &PipelineConfig, pred_dir: &Path, ref_dir: &Path) -> Result<EvalOutcome> {
    let refs = vol_ids(ref_dir)?;
    let preds = if pred_dir.is_dir() { vol_ids(pred_dir)? } else { vec![] };
    let orphans: Vec<&String> = preds.iter().filter(|p| refs.binary_search(p).is_err()).collect();
    if !orphans.is_empty() {
        let list = orphans.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        return Err(Error::InvalidArgument(format!("predictions without a reference: {list}")));
    }
    let conn = cfg.post.component_connectivity;
    let mut missing = Vec::new();
    let mut cases = Vec::with_capacity(refs.len());
    for id in &refs {
        let reference = read_instances(&ref_dir.join(format!("{id}.vol")), conn)?;
        let pred = if preds.binary_search(id).is_ok() {
            let p = read_instances(&pred_dir.join(format!("{id}.vol")), conn)?;
            reference.grid().check_matches(p.grid())?;
            p
        } else {
            missing.push(id.clone());
            ComponentSet::empty(*reference.grid())
        };
        cases.push(CaseInput { case_id: id.clone(), pred, reference, segmentation: cfg.eval.segmentation });
    }
    let bins = bins_from_edges(&cfg.eval.bin_edges_cm)?;
    Ok(EvalOutcome { report: evaluate(&cases, &bins, cfg.eval.iou)?, missing_predictions: missing })
}

/// `eval_dirs` plus report.csv / summary.csv under `cfg.paths.out`.
pub fn run_eval(cfg: &PipelineConfig, pred_dir: &Path, ref_dir: &Path) -> Result<EvalOutcome> {
    let outcome = eval_dirs(cfg, pred_dir, ref_dir)?;
    ensure_dir(&cfg.paths.out)?;
    outcome.report.write_files(&cfg.paths.out)?;
    Ok(outcome)
}

/// Mean DSC over manifest cases that carry lesions for every (L, s) in the
/// sweep grid. Writes sweep.csv and best.cfg (this config with the winning
/// cell) under `cfg.paths.out`.
pub fn sweep(cfg: &PipelineConfig) -> Result<(SweepResult, PipelineConfig)> {
    let guided = cfg.sweep.scales.iter().any(|&s| s > 0.0);
    let models = LoadedModels::load(cfg, guided)?;
    let data = &cfg.paths.data;
    let mut records: Vec<_> = read_manifest(&data.join(MANIFEST))?.into_iter().filter(|c| c.lesions > 0).collect();
    if cfg.sweep.max_cases > 0 {
        records.truncate(cfg.sweep.max_cases);
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("no cases with lesions to sweep on".into()));
    }
    let conn = cfg.post.component_connectivity;
    let cases = records
        .iter()
        .map(|r| {
            let image = read_vol(image_path(data, &r.id))?.into_volume()?;
            let truth = read_vol(truth_path(data, &r.id))?.into_mask()?;
            Ok((r, image, connected_components(&truth, conn)))
        })
        .collect::<Result<Vec<_>>>()?;
    let result = run_sweep(cfg.sampler.mode.as_str(), &cfg.sweep.levels, &cfg.sweep.scales, |cell| {
        let sampler = SamplerConfig { level: cell.level, scale: cell.scale, ..cfg.sampler.clone() };
        let ctx = models.context(cfg, &sampler);
        cases
            .iter()
            .map(|(r, image, reference)| {
                let d = detect_case(image, &r.roi_centers, &ctx, case_seed(cfg, &r.id))?;
                let input = CaseInput {
                    case_id: r.id.clone(),
                    pred: d.candidates.components,
                    reference: reference.clone(),
                    segmentation: true,
                };
                Ok(score_case(&input, cfg.eval.iou)?.dsc.unwrap_or(0.0))
            })
            .collect()
    })?;
    let best = result.best;
    let mut chosen = cfg.clone();
    chosen.sampler.level = best.level;
    chosen.sampler.scale = best.scale;
    ensure_dir(&cfg.paths.out)?;
    result.write_csv(std::fs::File::create(cfg.paths.out.join("sweep.csv"))?)?;
    std::fs::write(cfg.paths.out.join("best.cfg"), chosen.to_text())?;
    Ok((result, chosen))
}

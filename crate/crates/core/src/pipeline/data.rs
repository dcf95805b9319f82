//! Dataset generation and the case manifest.

use std::path::Path;

use super::{ensure_dir, stage_seed, TAG_PHANTOM};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::phantom::{generate_case_with, roi_center, Label, PhantomConfig};
use crate::volgrid::{read_vol, write_vol, VolFile, Volume};
use crate::par;

pub const MANIFEST: &str = "manifest.csv";
const HEADER: [&str; 6] = ["case_id", "seed", "weak_label", "true_label", "lesions", "roi_centers_mm"];

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub seed: u64,
    pub weak_label: Label,
    pub true_label: Label,
    pub lesions: usize,
    /// one kidney centroid per ROI
    pub roi_centers: Vec<[f64; 3]>,
}

pub fn image_path(data: &Path, id: &str) -> std::path::PathBuf {
    data.join("images").join(format!("{id}.vol"))
}

pub fn truth_path(data: &Path, id: &str) -> std::path::PathBuf {
    data.join("truth").join(format!("{id}.vol"))
}

fn centers_text(c: &[[f64; 3]]) -> String {
    c.iter().map(|p| format!("{} {} {}", p[0], p[1], p[2])).collect::<Vec<_>>().join(";")
}

fn parse_centers(s: &str) -> Option<Vec<[f64; 3]>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let v: Vec<f64> = p.split_whitespace().map(|x| x.parse().ok()).collect::<Option<_>>()?;
            (v.len() == 3).then(|| [v[0], v[1], v[2]])
        })
        .collect()
}

pub fn write_manifest(path: &Path, cases: &[CaseRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for c in cases {
        w.write_record([
            c.id.clone(),
            c.seed.to_string(),
            c.weak_label.as_str().into(),
            c.true_label.as_str().into(),
            c.lesions.to_string(),
            centers_text(&c.roi_centers),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<CaseRecord>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(format!("case manifest ({})", path.display())));
    }
    let bad = |row: usize, what: &str| Error::Format { kind: "manifest", reason: format!("row {row}: bad {what}") };
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != HEADER.len() {
            return Err(bad(row, "column count"));
        }
        out.push(CaseRecord {
            id: rec[0].to_string(),
            seed: rec[1].parse().map_err(|_| bad(row, "seed"))?,
            weak_label: Label::parse(&rec[2]).ok_or_else(|| bad(row, "weak_label"))?,
            true_label: Label::parse(&rec[3]).ok_or_else(|| bad(row, "true_label"))?,
            lesions: rec[4].parse().map_err(|_| bad(row, "lesions"))?,
            roi_centers: parse_centers(&rec[5]).ok_or_else(|| bad(row, "roi_centers_mm"))?,
        });
    }
    Ok(out)
}

/// Write `n` phantom cases (image, truth mask, manifest row) under
/// `cfg.paths.data`. Case `i` uses seed `derive(seed) + i`.
pub fn gen_data(cfg: &PipelineConfig, n: usize) -> Result<Vec<CaseRecord>> {
    let dir = &cfg.paths.data;
    ensure_dir(&dir.join("images"))?;
    ensure_dir(&dir.join("truth"))?;
    let pc = PhantomConfig { seed: stage_seed(cfg, TAG_PHANTOM), ..cfg.phantom.clone() };
    pc.validate()?;
    let balanced = cfg.data.balanced;
    let records = par::map_range(n, |i| -> Result<CaseRecord> {
        let seed = pc.seed.wrapping_add(i as u64);
        let case = generate_case_with(&pc, seed, balanced.then_some(i % 2 == 1))?;
        write_vol(image_path(dir, &case.id), &VolFile::from_volume(&case.image))?;
        write_vol(truth_path(dir, &case.id), &VolFile::from_mask(&case.truth))?;
        Ok(CaseRecord {
            id: case.id.clone(),
            seed,
            weak_label: case.weak_label,
            true_label: case.true_label,
            lesions: case.lesions.len(),
            roi_centers: roi_center(&case),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    write_manifest(&dir.join(MANIFEST), &records)?;
    Ok(records)
}

/// Manifest rows with their images, optionally restricted to `ids` (in that order).
pub fn load_cases(data: &Path, ids: Option<&[String]>) -> Result<Vec<(CaseRecord, Volume)>> {
    let all = read_manifest(&data.join(MANIFEST))?;
    let picked: Vec<CaseRecord> = match ids {
        None => all,
        Some(ids) => ids
            .iter()
            .map(|id| {
                all.iter()
                    .find(|c| &c.id == id)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("case {id} is not in the manifest")))
            })
            .collect::<Result<_>>()?,
    };
    picked
        .into_iter()
        .map(|c| {
            let p = image_path(data, &c.id);
            if !p.is_file() {
                return Err(Error::MissingArtifact(format!("image for {} ({})", c.id, p.display())));
            }
            let v = read_vol(&p)?.into_volume()?;
            Ok((c, v))
        })
        .collect()
}

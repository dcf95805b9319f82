//! Lesion-level scoring: overlap metrics, IoU matching, per-case detection
//! metrics, size-stratified tables and the (L, s) sweep.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par;
use crate::postprocess::ComponentSet;
use crate::volgrid::BinaryMask;

pub use crate::classifier::auc;

/// A lesion counts as found once IoU reaches this.
pub const IOU_THRESHOLD: f64 = 0.2;

/// 2|A∩B| / (|A|+|B|); two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    if union == 0 {
        return Err(Error::InvalidArgument("iou of two empty masks".into()));
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    /// 1-based component ids
    pub pred: usize,
    pub reference: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchTable {
    pub matches: Vec<Match>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_ref: Vec<usize>,
}

impl MatchTable {
    pub fn tp(&self) -> usize {
        self.matches.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_pred.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_ref.len()
    }

    pub fn ref_matched(&self, id: usize) -> bool {
        self.matches.iter().any(|m| m.reference == id)
    }
}

/// IoU of every overlapping (pred, ref) pair, keyed by 1-based ids.
pub fn pairwise_iou(pred: &ComponentSet, reference: &ComponentSet) -> Result<Vec<Match>> {
    pred.grid().check_matches(reference.grid())?;
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &r) in pred.labels().iter().zip(reference.labels()) {
        if p != 0 && r != 0 {
            *inter.entry((p, r)).or_default() += 1;
        }
    }
    let mut out: Vec<Match> = inter
        .into_iter()
        .map(|((p, r), n)| {
            let (p, r) = (p as usize, r as usize);
            let union = pred.components()[p - 1].voxels + reference.components()[r - 1].voxels - n;
            Match { pred: p, reference: r, iou: n as f64 / union as f64 }
        })
        .collect();
    out.sort_by(|a, b| (a.pred, a.reference).cmp(&(b.pred, b.reference)));
    Ok(out)
}

/// Greedy one-to-one matching by descending IoU over pairs with IoU ≥ `thr`.
/// Equal IoUs resolve towards the lower pred id, then the lower ref id.
pub fn match_lesions(pred: &ComponentSet, reference: &ComponentSet, thr: f64) -> Result<MatchTable> {
    let mut pairs: Vec<Match> = pairwise_iou(pred, reference)?.into_iter().filter(|m| m.iou >= thr).collect();
    pairs.sort_by(|a, b| b.iou.total_cmp(&a.iou).then((a.pred, a.reference).cmp(&(b.pred, b.reference))));
    let mut pred_used = vec![false; pred.len() + 1];
    let mut ref_used = vec![false; reference.len() + 1];
    let mut matches = vec![];
    for m in pairs {
        if !pred_used[m.pred] && !ref_used[m.reference] {
            pred_used[m.pred] = true;
            ref_used[m.reference] = true;
            matches.push(m);
        }
    }
    Ok(MatchTable {
        matches,
        unmatched_pred: (1..=pred.len()).filter(|&i| !pred_used[i]).collect(),
        unmatched_ref: (1..=reference.len()).filter(|&i| !ref_used[i]).collect(),
    })
}

/// Lesion-size bin on equivalent diameter in cm; upper edge inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeBin {
    pub lower_cm: f64,
    pub upper_cm: f64,
}

impl SizeBin {
    pub fn contains(&self, d_cm: f64) -> bool {
        (d_cm > self.lower_cm || (self.lower_cm == 0.0 && d_cm >= 0.0)) && d_cm <= self.upper_cm
    }

    pub fn label(&self) -> String {
        if self.lower_cm == 0.0 {
            format!("<={}", self.upper_cm)
        } else if self.upper_cm.is_infinite() {
            format!(">{}", self.lower_cm)
        } else {
            format!("{}-{}", self.lower_cm, self.upper_cm)
        }
    }
}

impl fmt::Display for SizeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

pub fn default_bins() -> Vec<SizeBin> {
    bins_from_edges(&[2.0, 4.0, 7.0]).expect("static edges")
}

/// Bins `(0, e0], (e0, e1], …, (e_last, ∞)` from increasing positive edges.
pub fn bins_from_edges(edges: &[f64]) -> Result<Vec<SizeBin>> {
    if edges.iter().any(|e| !e.is_finite() || *e <= 0.0) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("bin edges {edges:?} must be positive and increasing")));
    }
    let mut lo = 0.0;
    let mut out = vec![];
    for &e in edges.iter().chain(std::iter::once(&f64::INFINITY)) {
        out.push(SizeBin { lower_cm: lo, upper_cm: e });
        lo = e;
    }
    Ok(out)
}

/// Prediction and reference instances for one case. `segmentation` is false
/// for detection-only inputs, which carry no meaningful DSC.
#[derive(Debug, Clone)]
pub struct CaseInput {
    pub case_id: String,
    pub pred: ComponentSet,
    pub reference: ComponentSet,
    pub segmentation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseScore {
    pub case_id: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub dsc: Option<f64>,
}

impl CaseScore {
    /// 0 when there are no predictions.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// None when the case has no reference lesions.
    pub fn recall(&self) -> Option<f64> {
        (self.tp + self.fn_ > 0).then(|| ratio(self.tp, self.tp + self.fn_))
    }

    pub fn f1(&self) -> Option<f64> {
        self.recall().map(|r| f1(self.precision(), r))
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    /// sample standard deviation, 0 for a single value
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// cases contributing (bins: cases retained by the exclusion rule)
    pub n: usize,
    pub dsc: Option<MeanSd>,
    pub precision: Option<MeanSd>,
    pub recall: Option<MeanSd>,
    pub f1: Option<MeanSd>,
}

pub fn summarize(scores: &[CaseScore]) -> Summary {
    let p: Vec<f64> = scores.iter().map(|c| c.precision()).collect();
    let r: Vec<f64> = scores.iter().filter_map(|c| c.recall()).collect();
    let f: Vec<f64> = scores.iter().filter_map(|c| c.f1()).collect();
    let d: Vec<f64> = scores.iter().filter_map(|c| c.dsc).collect();
    Summary { n: scores.len(), dsc: MeanSd::of(&d), precision: MeanSd::of(&p), recall: MeanSd::of(&r), f1: MeanSd::of(&f) }
}

/// Unstratified per-case scores.
pub fn score_case(case: &CaseInput, thr: f64) -> Result<CaseScore> {
    let table = match_lesions(&case.pred, &case.reference, thr)?;
    let dsc = if case.segmentation { Some(dice(&case.pred.foreground(), &case.reference.foreground())?) } else { None };
    Ok(CaseScore { case_id: case.case_id.clone(), tp: table.tp(), fp: table.fp(), fn_: table.fn_(), dsc })
}

pub fn detection_metrics(cases: &[CaseInput], thr: f64) -> Result<(Vec<CaseScore>, Summary)> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no cases to score".into()));
    }
    let scores = par::map(cases, |c| score_case(c, thr)).into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(&scores);
    Ok((scores, summary))
}

/// Per-bin score of one case, or None when the case has no reference lesion
/// in the bin.
///
/// Matching is done once on the whole case. Kept references are those whose
/// size falls in the bin; false positives are unmatched predictions whose own
/// size falls in the bin. DSC (segmentation inputs) compares the kept
/// references with the predictions counted in the bin.
pub fn score_case_in_bin(case: &CaseInput, table: &MatchTable, bin: &SizeBin) -> Result<Option<CaseScore>> {
    let in_bin = |set: &ComponentSet, id: usize| bin.contains(set.components()[id - 1].diameter_mm / 10.0);
    let kept: Vec<usize> = (1..=case.reference.len()).filter(|&r| in_bin(&case.reference, r)).collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let tp_pairs: Vec<&Match> = table.matches.iter().filter(|m| kept.contains(&m.reference)).collect();
    let fp_ids: Vec<usize> = table.unmatched_pred.iter().copied().filter(|&p| in_bin(&case.pred, p)).collect();
    let dsc = if case.segmentation {
        let ref_mask = labels_mask(&case.reference, &kept);
        let pred_ids: Vec<usize> = tp_pairs.iter().map(|m| m.pred).chain(fp_ids.iter().copied()).collect();
        Some(dice(&labels_mask(&case.pred, &pred_ids), &ref_mask)?)
    } else {
        None
    };
    Ok(Some(CaseScore {
        case_id: case.case_id.clone(),
        tp: tp_pairs.len(),
        fp: fp_ids.len(),
        fn_: kept.len() - tp_pairs.len(),
        dsc,
    }))
}

fn labels_mask(set: &ComponentSet, ids: &[usize]) -> BinaryMask {
    let mut keep = vec![false; set.len() + 1];
    for &i in ids {
        keep[i] = true;
    }
    let data = set.labels().iter().map(|&l| (l != 0 && keep[l as usize]) as u8).collect();
    BinaryMask::new(*set.grid(), data).expect("same grid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinReport {
    pub bin: SizeBin,
    pub cases: Vec<CaseScore>,
    pub summary: Summary,
}

pub fn stratified_eval(cases: &[CaseInput], bins: &[SizeBin], thr: f64) -> Result<Vec<BinReport>> {
    let tables = par::map(cases, |c| match_lesions(&c.pred, &c.reference, thr)).into_iter().collect::<Result<Vec<_>>>()?;
    bins.iter()
        .map(|bin| {
            let mut scores = vec![];
            for (case, table) in cases.iter().zip(&tables) {
                if let Some(s) = score_case_in_bin(case, table, bin)? {
                    scores.push(s);
                }
            }
            let summary = summarize(&scores);
            Ok(BinReport { bin: *bin, cases: scores, summary })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub cases: Vec<CaseScore>,
    pub summary: Summary,
    pub bins: Vec<BinReport>,
}

pub fn evaluate(cases: &[CaseInput], bins: &[SizeBin], thr: f64) -> Result<DetectionReport> {
    let (scores, summary) = detection_metrics(cases, thr)?;
    let bins = stratified_eval(cases, bins, thr)?;
    Ok(DetectionReport { cases: scores, summary, bins })
}

const NA: &str = "N/A";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |v| format!("{v:.6}"))
}

fn fmt_ms(v: &Option<MeanSd>) -> [String; 2] {
    match v {
        Some(m) => [format!("{:.6}", m.mean), format!("{:.6}", m.sd)],
        None => [NA.into(), NA.into()],
    }
}

pub const REPORT_HEADER: [&str; 9] = ["case_id", "bin", "TP", "FP", "FN", "precision", "recall", "f1", "dsc"];
pub const SUMMARY_HEADER: [&str; 10] =
    ["bin", "n", "dsc_mean", "dsc_sd", "precision_mean", "precision_sd", "recall_mean", "recall_sd", "f1_mean", "f1_sd"];

impl DetectionReport {
    /// Per-case rows: bin "all" for the unstratified scores, then one block
    /// per size bin.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(REPORT_HEADER)?;
        let rows = self.cases.iter().map(|c| ("all".to_string(), c));
        let binned = self.bins.iter().flat_map(|b| b.cases.iter().map(move |c| (b.bin.label(), c)));
        for (bin, c) in rows.chain(binned) {
            out.write_record([
                c.case_id.clone(),
                bin,
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                format!("{:.6}", c.precision()),
                fmt_opt(c.recall()),
                fmt_opt(c.f1()),
                fmt_opt(c.dsc),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Mean and sd per metric with case counts, overall and per bin.
    pub fn write_summary_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SUMMARY_HEADER)?;
        let all = std::iter::once(("all".to_string(), &self.summary));
        for (bin, s) in all.chain(self.bins.iter().map(|b| (b.bin.label(), &b.summary))) {
            let mut rec = vec![bin, s.n.to_string()];
            for m in [&s.dsc, &s.precision, &s.recall, &s.f1] {
                rec.extend(fmt_ms(m));
            }
            out.write_record(rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_files(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        self.write_summary_csv(std::fs::File::create(dir.join("summary.csv"))?)
    }
}

/// One grid point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub level: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub dsc: MeanSd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub mode: String,
    pub rows: Vec<SweepRow>,
    pub best: SweepCell,
}

/// Argmax of mean DSC; equal means go to the smaller L, then the smaller s.
/// NaN means never win.
pub fn select_best(rows: &[SweepRow]) -> Option<SweepCell> {
    let mut order: Vec<&SweepRow> = rows.iter().collect();
    order.sort_by(|a, b| a.cell.level.cmp(&b.cell.level).then(a.cell.scale.total_cmp(&b.cell.scale)));
    let mut best: Option<&SweepRow> = None;
    for r in order {
        if r.dsc.mean.is_nan() {
            continue;
        }
        if best.map_or(true, |b| r.dsc.mean > b.dsc.mean) {
            best = Some(r);
        }
    }
    best.map(|r| r.cell)
}

/// Evaluate every (L, s) cell with `run`, which returns per-case DSC values.
/// Cells run concurrently; `run` must derive any randomness from the cell.
pub fn sweep<F>(mode: &str, levels: &[usize], scales: &[f64], run: F) -> Result<SweepResult>
where
    F: Fn(SweepCell) -> Result<Vec<f64>> + Sync + Send,
{
    if levels.is_empty() || scales.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    let cells: Vec<SweepCell> =
        levels.iter().flat_map(|&level| scales.iter().map(move |&scale| SweepCell { level, scale })).collect();
    let results = par::map(&cells, |&c| run(c));
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, r) in cells.into_iter().zip(results) {
        let dsc = r?;
        let dsc = MeanSd::of(&dsc)
            .ok_or_else(|| Error::InvalidArgument(format!("sweep cell L={} s={} scored no cases", cell.level, cell.scale)))?;
        rows.push(SweepRow { cell, dsc });
    }
    let best = select_best(&rows).ok_or_else(|| Error::NonFinite("every sweep cell scored NaN".into()))?;
    Ok(SweepResult { mode: mode.to_string(), rows, best })
}

pub const SWEEP_HEADER: [&str; 5] = ["mode", "L", "s", "mean_dsc", "sd_dsc"];

impl SweepResult {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SWEEP_HEADER)?;
        for r in &self.rows {
            out.write_record([
                self.mode.clone(),
                r.cell.level.to_string(),
                r.cell.scale.to_string(),
                format!("{:.6}", r.dsc.mean),
                format!("{:.6}", r.dsc.sd),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;

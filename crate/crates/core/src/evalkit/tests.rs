use super::*;
use crate::postprocess::{connected_components, Connectivity};
use crate::rng;
use crate::volgrid::Grid;
use rand::Rng as _;

fn set_from(grid: Grid, f: impl Fn(usize, usize, usize) -> u32) -> ComponentSet {
    let labels = (0..grid.len())
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            f(x, y, z)
        })
        .collect();
    ComponentSet::from_labels(grid, labels).unwrap()
}

fn line_mask(n: usize, range: std::ops::Range<usize>) -> BinaryMask {
    BinaryMask::from_fn(Grid::unit([n, 1, 1]), |x, _, _| range.contains(&x))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn dice_examples() {
    let a = line_mask(10, 0..4);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &line_mask(10, 5..9)).unwrap(), 0.0);
    assert_eq!(dice(&a, &line_mask(10, 2..6)).unwrap(), 0.5);
    let e = BinaryMask::empty(Grid::unit([10, 1, 1]));
    assert_eq!(dice(&e, &e).unwrap(), 1.0);
    assert!(dice(&a, &line_mask(11, 0..4)).is_err());
}

#[test]
fn iou_examples() {
    let a = line_mask(20, 0..8);
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    assert_eq!(iou(&a, &line_mask(20, 10..18)).unwrap(), 0.0);
    assert!(close(iou(&a, &line_mask(20, 5..13)).unwrap(), 3.0 / 13.0));
    let e = BinaryMask::empty(Grid::unit([20, 1, 1]));
    assert!(iou(&e, &e).is_err());
}

#[test]
fn matching_examples() {
    let g = Grid::unit([30, 1, 1]);
    let reference = set_from(g, |x, _, _| (x < 10) as u32);
    let same = match_lesions(&reference, &reference, IOU_THRESHOLD).unwrap();
    assert_eq!((same.tp(), same.fp(), same.fn_()), (1, 0, 0));

    let two = set_from(g, |x, _, _| if x < 5 { 1 } else if (7..10).contains(&x) { 2 } else { 0 });
    let t = match_lesions(&two, &reference, IOU_THRESHOLD).unwrap();
    assert_eq!(t.matches, vec![Match { pred: 1, reference: 1, iou: 0.5 }]);
    assert_eq!(t.unmatched_pred, vec![2]);
    assert!(t.unmatched_ref.is_empty());

    // IoU of exactly 0.2 counts
    let r = set_from(g, |x, _, _| (x < 5) as u32);
    let p = set_from(g, |x, _, _| (x == 4) as u32);
    let t = match_lesions(&p, &r, 0.2).unwrap();
    assert_eq!(t.matches[0].iou, 0.2);
    assert_eq!(t.tp(), 1);
}

#[test]
fn detection_metric_examples() {
    let s = CaseScore { case_id: "a".into(), tp: 1, fp: 1, fn_: 1, dsc: None };
    assert_eq!((s.precision(), s.recall(), s.f1()), (0.5, Some(0.5), Some(0.5)));
    let miss = CaseScore { case_id: "b".into(), tp: 0, fp: 0, fn_: 2, dsc: None };
    assert_eq!((miss.precision(), miss.recall(), miss.f1()), (0.0, Some(0.0), Some(0.0)));
    let healthy = CaseScore { case_id: "c".into(), tp: 0, fp: 0, fn_: 0, dsc: None };
    assert_eq!(healthy.recall(), None);

    let g = Grid::unit([30, 1, 1]);
    let r = set_from(g, |x, _, _| if x < 5 { 1 } else if (10..15).contains(&x) { 2 } else { 0 });
    let cases: Vec<CaseInput> = (0..3)
        .map(|i| CaseInput { case_id: format!("c{i}"), pred: r.clone(), reference: r.clone(), segmentation: true })
        .collect();
    let (_, sum) = detection_metrics(&cases, IOU_THRESHOLD).unwrap();
    for m in [sum.dsc, sum.precision, sum.recall, sum.f1] {
        let m = m.unwrap();
        assert_eq!((m.mean, m.sd, m.n), (1.0, 0.0, 3));
    }
    let none: Vec<CaseInput> =
        cases.iter().map(|c| CaseInput { pred: ComponentSet::empty(g), ..c.clone() }).collect();
    let (_, sum) = detection_metrics(&none, IOU_THRESHOLD).unwrap();
    assert_eq!(sum.precision.unwrap().mean, 0.0);
    assert_eq!(sum.recall.unwrap().mean, 0.0);
    assert_eq!(sum.f1.unwrap().mean, 0.0);
    assert!(detection_metrics(&[], IOU_THRESHOLD).is_err());
}

#[test]
fn bins_partition_and_labels() {
    let bins = default_bins();
    let labels: Vec<String> = bins.iter().map(|b| b.label()).collect();
    assert_eq!(labels, ["<=2", "2-4", "4-7", ">7"]);
    for d in [0.0, 0.5, 2.0, 2.0001, 4.0, 6.9, 7.0, 7.01, 100.0] {
        assert_eq!(bins.iter().filter(|b| b.contains(d)).count(), 1, "{d}");
    }
    assert!(bins[0].contains(2.0) && bins[3].contains(7.01) && !bins[3].contains(7.0));
    assert!(bins_from_edges(&[2.0, 2.0]).is_err());
}

/// 10 mm voxels: a k-voxel lesion has diameter 10·cbrt(6k/π) mm, so
/// 1 → 1.24 cm, 8 → 2.48, 27 → 3.72, 64 → 4.96, 216 → 7.44.
fn fixture() -> Vec<CaseInput> {
    let g = Grid::new([20, 20, 20], [10.0; 3], [0.0; 3]).unwrap();
    let boxed = |p: [usize; 3], lo: [usize; 3], n: [usize; 3]| (0..3).all(|a| p[a] >= lo[a] && p[a] < lo[a] + n[a]);
    let a_ref = set_from(g, |x, y, z| {
        if [x, y, z] == [0, 0, 0] {
            1
        } else if boxed([x, y, z], [5, 5, 5], [4; 3]) {
            2
        } else {
            0
        }
    });
    let a_pred = set_from(g, |x, y, z| boxed([x, y, z], [5, 5, 5], [4; 3]) as u32);
    let b_ref = set_from(g, |x, y, z| boxed([x, y, z], [2, 2, 2], [2; 3]) as u32);
    let b_pred = set_from(g, |x, y, z| {
        if boxed([x, y, z], [3, 2, 2], [2; 3]) {
            1
        } else if [x, y, z] == [15, 15, 15] {
            2
        } else {
            0
        }
    });
    let c_ref = set_from(g, |x, y, z| {
        if boxed([x, y, z], [1, 1, 1], [3; 3]) {
            1
        } else if boxed([x, y, z], [10, 10, 10], [6; 3]) {
            2
        } else {
            0
        }
    });
    // shifted by two: 9 shared of 45, IoU exactly 0.2
    let c_pred = set_from(g, |x, y, z| boxed([x, y, z], [3, 1, 1], [3; 3]) as u32);
    vec![
        CaseInput { case_id: "A".into(), pred: a_pred, reference: a_ref, segmentation: true },
        CaseInput { case_id: "B".into(), pred: b_pred, reference: b_ref, segmentation: true },
        CaseInput { case_id: "C".into(), pred: c_pred, reference: c_ref, segmentation: true },
    ]
}

fn prf(s: &CaseScore) -> (usize, usize, usize, f64, Option<f64>, Option<f64>) {
    (s.tp, s.fp, s.fn_, s.precision(), s.recall(), s.f1())
}

#[test]
fn stratified_fixture_matches_hand_table() {
    let cases = fixture();
    let rep = evaluate(&cases, &default_bins(), IOU_THRESHOLD).unwrap();
    let two3 = 2.0 / 3.0;
    assert_eq!(prf(&rep.cases[0]), (1, 0, 1, 1.0, Some(0.5), Some(two3)));
    assert_eq!(prf(&rep.cases[1]), (1, 1, 0, 0.5, Some(1.0), Some(two3)));
    assert_eq!(prf(&rep.cases[2]), (1, 0, 1, 1.0, Some(0.5), Some(two3)));
    assert_eq!(rep.cases[0].dsc, Some(128.0 / 129.0));
    assert_eq!(rep.cases[1].dsc, Some(8.0 / 17.0));
    assert_eq!(rep.cases[2].dsc, Some(18.0 / 270.0));

    let p = rep.summary.precision.unwrap();
    assert!(close(p.mean, 2.5 / 3.0) && close(p.sd, (1.0f64 / 12.0).sqrt()));

    let ids = |b: &BinReport| b.cases.iter().map(|c| c.case_id.clone()).collect::<Vec<_>>();
    let [b2, b4, b7, bx] = &rep.bins[..] else { panic!() };
    assert_eq!(ids(b2), ["A"]);
    assert_eq!(prf(&b2.cases[0]), (0, 0, 1, 0.0, Some(0.0), Some(0.0)));
    // B's single-voxel false positive sits in the smallest bin, but B has no reference there
    assert_eq!(ids(b4), ["B", "C"]);
    assert_eq!(prf(&b4.cases[0]), (1, 0, 0, 1.0, Some(1.0), Some(1.0)));
    assert_eq!(prf(&b4.cases[1]), (1, 0, 0, 1.0, Some(1.0), Some(1.0)));
    assert_eq!(ids(b7), ["A"]);
    assert_eq!(prf(&b7.cases[0]), (1, 0, 0, 1.0, Some(1.0), Some(1.0)));
    assert_eq!(ids(bx), ["C"]);
    assert_eq!(prf(&bx.cases[0]), (0, 0, 1, 0.0, Some(0.0), Some(0.0)));
    assert_eq!([b2.summary.n, b4.summary.n, b7.summary.n, bx.summary.n], [1, 2, 1, 1]);
    let r4 = b4.summary.recall.unwrap();
    assert_eq!((r4.mean, r4.sd), (1.0, 0.0));

    let total: usize = rep.bins.iter().flat_map(|b| &b.cases).map(|c| c.tp + c.fn_).sum();
    assert_eq!(total, cases.iter().map(|c| c.reference.len()).sum::<usize>());
}

#[test]
fn single_bin_equals_unstratified() {
    let cases = fixture();
    let one = vec![SizeBin { lower_cm: 0.0, upper_cm: f64::INFINITY }];
    let rep = evaluate(&cases, &one, IOU_THRESHOLD).unwrap();
    let strat: Vec<_> = rep.bins[0].cases.iter().map(|c| (c.tp, c.fp, c.fn_)).collect();
    let flat: Vec<_> = rep.cases.iter().map(|c| (c.tp, c.fp, c.fn_)).collect();
    assert_eq!(strat, flat);
    assert_eq!(rep.bins[0].summary.recall, rep.summary.recall);
}

#[test]
fn report_csv_layout_and_detection_only() {
    let mut cases = fixture();
    for c in &mut cases {
        c.segmentation = false;
    }
    let rep = evaluate(&cases, &default_bins(), IOU_THRESHOLD).unwrap();
    let mut buf = vec![];
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "case_id,bin,TP,FP,FN,precision,recall,f1,dsc");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 + 5);
    assert!(rows.iter().all(|r| r.ends_with(",N/A")));
    assert_eq!(rows[1], "B,all,1,1,0,0.500000,1.000000,0.666667,N/A");

    let mut buf = vec![];
    rep.write_summary_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], SUMMARY_HEADER.join(","));
    assert!(lines[2].starts_with("<=2,1,N/A,N/A,"));
    assert!(lines[3].starts_with("2-4,2,"));
}

#[test]
fn auc_pair_count_example() {
    let a = auc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap();
    assert_eq!(a, 0.75);
}

fn row(level: usize, scale: f64, mean: f64) -> SweepRow {
    SweepRow { cell: SweepCell { level, scale }, dsc: MeanSd { mean, sd: 0.0, n: 1 } }
}

#[test]
fn sweep_selection_and_ties() {
    let rows = vec![row(500, 1800.0, 0.3), row(300, 1800.0, 0.3), row(300, 1600.0, 0.3), row(700, 0.0, 0.1)];
    assert_eq!(select_best(&rows), Some(SweepCell { level: 300, scale: 1600.0 }));
    let rows = vec![row(500, 1800.0, f64::NAN), row(700, 0.0, 0.1)];
    assert_eq!(select_best(&rows), Some(SweepCell { level: 700, scale: 0.0 }));

    let single = sweep("ddim", &[500], &[1800.0], |_| Ok(vec![0.2, 0.4])).unwrap();
    assert_eq!(single.best, SweepCell { level: 500, scale: 1800.0 });
    assert!(close(single.rows[0].dsc.mean, 0.3));

    // a score function that ignores s ties every column; the smaller s wins
    let r = sweep("ddpm", &[500, 250], &[1800.0, 1600.0, 1600.0], |c| Ok(vec![c.level as f64 / 1000.0])).unwrap();
    assert_eq!(r.best, SweepCell { level: 500, scale: 1600.0 });
    assert_eq!(r.rows[1].dsc, r.rows[2].dsc);
    let mut buf = vec![];
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("mode,L,s,mean_dsc,sd_dsc\nddpm,500,1800,0.500000,0.000000\n"));
    assert!(sweep("ddpm", &[], &[1.0], |_| Ok(vec![1.0])).is_err());
}

// ---- brute-force cross-checks on tiny grids ----

fn voxel_sets(set: &ComponentSet) -> Vec<Vec<usize>> {
    (1..=set.len()).map(|id| (0..set.grid().len()).filter(|&i| set.labels()[i] as usize == id).collect()).collect()
}

fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|v| b.contains(v)).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Greedy matching re-derived from voxel sets.
fn oracle_greedy(p: &[Vec<usize>], r: &[Vec<usize>], thr: f64) -> Vec<(usize, usize)> {
    let mut cand = vec![];
    for (i, a) in p.iter().enumerate() {
        for (j, b) in r.iter().enumerate() {
            let v = set_iou(a, b);
            if v >= thr {
                cand.push((v, i + 1, j + 1));
            }
        }
    }
    cand.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut out: Vec<(usize, usize)> = vec![];
    for (_, i, j) in cand {
        if out.iter().all(|&(a, b)| a != i && b != j) {
            out.push((i, j));
        }
    }
    out
}

/// Largest number of matched pairs over every one-to-one assignment.
fn oracle_optimal(p: &[Vec<usize>], r: &[Vec<usize>], thr: f64) -> usize {
    fn go(i: usize, used: &mut Vec<bool>, ok: &dyn Fn(usize, usize) -> bool, np: usize) -> usize {
        if i == np {
            return 0;
        }
        let mut best = go(i + 1, used, ok, np);
        for j in 0..used.len() {
            if !used[j] && ok(i, j) {
                used[j] = true;
                best = best.max(1 + go(i + 1, used, ok, np));
                used[j] = false;
            }
        }
        best
    }
    let ok = |i: usize, j: usize| set_iou(&p[i], &r[j]) >= thr;
    go(0, &mut vec![false; r.len()], &ok, p.len())
}

fn random_set(r: &mut rng::Rng, g: Grid) -> ComponentSet {
    loop {
        let density = r.gen_range(0.05..0.4);
        let m = BinaryMask::from_fn(g, |_, _, _| r.gen_bool(density));
        let cs = connected_components(&m, Connectivity::TwentySix);
        if cs.len() <= 3 {
            return cs;
        }
    }
}

#[test]
fn metrics_agree_with_brute_force_on_tiny_grids() {
    let mut r = rng::seeded(11);
    let mut deviations = 0;
    for trial in 0..400 {
        let n = 2 + trial % 3;
        let g = Grid::unit([n, n, n]);
        let p = random_set(&mut r, g);
        let q = random_set(&mut r, g);
        let (pa, qa) = (p.foreground(), q.foreground());
        let (sp, sq) = (voxel_sets(&p), voxel_sets(&q));

        let inter = (0..g.len()).filter(|&i| pa.is_set(i) && qa.is_set(i)).count();
        let total = pa.count() + qa.count();
        let want = if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 };
        assert_eq!(dice(&pa, &qa).unwrap(), want);

        for m in pairwise_iou(&p, &q).unwrap() {
            assert_eq!(m.iou, set_iou(&sp[m.pred - 1], &sq[m.reference - 1]));
            assert_eq!(m.iou, iou(&p.mask_of(m.pred), &q.mask_of(m.reference)).unwrap());
        }

        let t = match_lesions(&p, &q, IOU_THRESHOLD).unwrap();
        let got: Vec<(usize, usize)> = t.matches.iter().map(|m| (m.pred, m.reference)).collect();
        assert_eq!(got, oracle_greedy(&sp, &sq, IOU_THRESHOLD));
        assert_eq!(t.tp() + t.fp(), p.len());
        assert_eq!(t.tp() + t.fn_(), q.len());
        let best = oracle_optimal(&sp, &sq, IOU_THRESHOLD);
        assert!(t.tp() <= best);
        if t.tp() < best {
            deviations += 1;
            eprintln!("greedy matched {} of an optimal {best} on trial {trial}", t.tp());
        }
    }
    eprintln!("greedy/optimal deviations: {deviations} of 400");
}

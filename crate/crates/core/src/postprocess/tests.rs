use super::*;
use crate::rng;
use proptest::prelude::*;
use rand::Rng as _;

fn mask_from(dims: [usize; 3], f: impl FnMut(usize, usize, usize) -> bool) -> BinaryMask {
    BinaryMask::from_fn(Grid::unit(dims), f)
}

fn cube(dims: [usize; 3], lo: usize, hi: usize) -> BinaryMask {
    mask_from(dims, |x, y, z| (lo..=hi).contains(&x) && (lo..=hi).contains(&y) && (lo..=hi).contains(&z))
}

/// Between-class variance of every cut from bin-centre values, brute force.
fn oracle_cut(hist: &[u64]) -> usize {
    let centre = |i: usize| i as f64 + 0.5;
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in 0..hist.len() - 1 {
        let (lo, hi) = hist.split_at(k + 1);
        let n0: f64 = lo.iter().map(|&c| c as f64).sum();
        let n1: f64 = hi.iter().map(|&c| c as f64).sum();
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let m0 = lo.iter().enumerate().map(|(i, &c)| c as f64 * centre(i)).sum::<f64>() / n0;
        let m1 = hi.iter().enumerate().map(|(i, &c)| c as f64 * centre(i + k + 1)).sum::<f64>() / n1;
        let n = n0 + n1;
        let v = (n0 / n) * (n1 / n) * (m0 - m1).powi(2);
        if v > best.1 * (1.0 + 1e-12) {
            best = (k, v);
        }
    }
    best.0
}

#[test]
fn otsu_two_level_example() {
    let v = Volume::new(Grid::unit([5, 1, 1]), vec![0.0, 0.0, 0.0, 10.0, 10.0]).unwrap();
    let o = otsu_threshold(&v, None, 256).unwrap();
    assert!(o.threshold > 0.0 && o.threshold < 10.0);
    let hist = histogram(v.data(), 0.0, 10.0, 256);
    assert_eq!(o.bin, oracle_cut(&hist));
    assert_eq!(binarize(&v, o.threshold).data(), &[0, 0, 0, 1, 1]);
}

#[test]
fn otsu_matches_brute_force_on_random_histograms() {
    let mut r = rng::seeded(5);
    for _ in 0..50 {
        let bins = r.gen_range(2..40);
        let hist: Vec<u64> = (0..bins).map(|_| if r.gen_bool(0.3) { 0 } else { r.gen_range(0..500) }).collect();
        if hist.iter().filter(|&&c| c > 0).count() < 2 {
            continue;
        }
        assert_eq!(otsu_cut(&hist), Some(oracle_cut(&hist)), "{hist:?}");
    }
}

#[test]
fn otsu_separates_clusters_and_is_affine_invariant() {
    let mut r = rng::seeded(6);
    let vals: Vec<f32> = (0..2000)
        .map(|i| if i % 3 == 0 { 5.0 + rng::normal_f32(&mut r) * 0.5 } else { 1.0 + rng::normal_f32(&mut r) * 0.5 })
        .collect();
    let v = Volume::new(Grid::unit([2000, 1, 1]), vals).unwrap();
    let o = otsu_threshold(&v, None, 256).unwrap();
    assert!(o.threshold > 1.0 && o.threshold < 5.0);
    let w = v.map(|x| 2.0 * x + 3.0);
    let ow = otsu_threshold(&w, None, 256).unwrap();
    assert_eq!(ow.bin, o.bin);
    assert_eq!(binarize(&v, o.threshold), binarize(&w, ow.threshold));
}

#[test]
fn otsu_degenerate_and_roi() {
    let g = Grid::unit([4, 1, 1]);
    let flat = Volume::filled(g, 0.3);
    assert!(matches!(otsu_threshold(&flat, None, 256), Err(Error::DegenerateHistogram(_))));
    let v = Volume::new(g, vec![0.0, 1.0, 5.0, 5.0]).unwrap();
    let roi = BinaryMask::new(g, vec![0, 0, 1, 1]).unwrap();
    assert!(otsu_threshold(&v, Some(&roi), 256).is_err());
    let roi = BinaryMask::new(g, vec![0, 1, 1, 1]).unwrap();
    let o = otsu_threshold(&v, Some(&roi), 256).unwrap();
    assert_eq!((o.min, o.max), (1.0, 5.0));
}

#[test]
fn binarize_edges() {
    let v = Volume::new(Grid::unit([3, 1, 1]), vec![0.1, 0.5, 0.9]).unwrap();
    assert!(binarize(&v, 1.0).is_empty());
    assert_eq!(binarize(&v, 0.0).count(), 3);
    assert_eq!(binarize(&v, 0.5).data(), &[0, 1, 1]);
}

#[test]
fn morphology_fixtures() {
    let dims = [9, 9, 9];
    let empty = BinaryMask::empty(Grid::unit(dims));
    assert_eq!(open_close(&empty, Connectivity::Six), empty);
    let c = cube(dims, 2, 6);
    assert_eq!(open_close(&c, Connectivity::TwentySix), c);
    // the cross element shaves edges off a cube but keeps its core
    let shaved = open_close(&c, Connectivity::Six);
    assert!(shaved.count() < c.count() && shaved.get(4, 4, 4) && !shaved.get(2, 2, 2));
    let mut dot = empty.clone();
    dot.set(4, 4, 4, true);
    assert!(open_close(&dot, Connectivity::Six).is_empty());
    let mut both = c.clone();
    both.set(8, 0, 0, true);
    assert_eq!(open_close(&both, Connectivity::TwentySix), c);
}

#[test]
fn hole_fill_fixtures() {
    let dims = [9, 9, 9];
    let solid = cube(dims, 2, 6);
    let shell = mask_from(dims, |x, y, z| solid.get(x, y, z) && !((3..=5).contains(&x) && (3..=5).contains(&y) && (3..=5).contains(&z)));
    assert_eq!(shell.count(), 125 - 27);
    assert_eq!(fill_holes(&shell, Connectivity::Six), solid);
    assert_eq!(fill_holes(&solid, Connectivity::Six), solid);
    // a cavity opened to the boundary stays open
    let tube = mask_from(dims, |x, y, _| (x, y) != (4, 4) && (3..=5).contains(&x) && (3..=5).contains(&y));
    assert_eq!(fill_holes(&tube, Connectivity::Six), tube);
}

#[test]
fn component_connectivity_fixtures() {
    let mut m = BinaryMask::empty(Grid::unit([3, 3, 3]));
    m.set(0, 0, 0, true);
    m.set(1, 1, 1, true);
    assert_eq!(connected_components(&m, Connectivity::TwentySix).len(), 1);
    assert_eq!(connected_components(&m, Connectivity::Six).len(), 2);
    assert!(connected_components(&BinaryMask::empty(Grid::unit([3, 3, 3])), Connectivity::TwentySix).is_empty());
}

#[test]
fn component_labels_follow_scan_order() {
    let mut m = BinaryMask::empty(Grid::unit([6, 1, 1]));
    for x in [0, 1, 3, 5] {
        m.set(x, 0, 0, true);
    }
    let cs = connected_components(&m, Connectivity::TwentySix);
    assert_eq!(cs.labels(), &[1, 1, 0, 2, 0, 3]);
    assert_eq!(cs.components()[0].voxels, 2);
    assert_eq!(cs.components()[0].bbox_max, [1, 0, 0]);
    assert_eq!(ComponentSet::from_labels(*cs.grid(), cs.labels().to_vec()).unwrap(), cs);
    assert!(ComponentSet::from_labels(*cs.grid(), vec![1, 0, 0, 3, 0, 0]).is_err());
    assert_eq!(cs.foreground(), m);
}

fn line(n: usize, spacing: f32) -> BinaryMask {
    let g = Grid::new([n + 2, 1, 1], [spacing; 3], [0.0; 3]).unwrap();
    BinaryMask::from_fn(g, |x, _, _| x >= 1 && x <= n)
}

#[test]
fn filter_small_boundaries() {
    let cs19 = connected_components(&line(19, 1.0), Connectivity::TwentySix);
    assert!(filter_small(&cs19, 20, 3.0).is_empty());
    let cs20 = connected_components(&line(20, 1.0), Connectivity::TwentySix);
    let d = cs20.components()[0].diameter_mm;
    assert!((d - (6.0 * 20.0 / std::f64::consts::PI).cbrt()).abs() < 1e-12 && (d - 3.37).abs() < 0.005);
    assert_eq!(filter_small(&cs20, 20, 3.0).len(), 1);
    let cs30 = connected_components(&line(30, 0.5), Connectivity::TwentySix);
    let c = &cs30.components()[0];
    assert!((c.volume_mm3 - 3.75).abs() < 1e-12 && (c.diameter_mm - 1.93).abs() < 0.005);
    assert!(filter_small(&cs30, 20, 3.0).is_empty());
}

#[test]
fn filter_small_keeps_survivors_intact() {
    let mut m = cube([12, 12, 12], 1, 4);
    m.set(8, 8, 8, true);
    let big = cube([12, 12, 12], 6, 10);
    let m = m.union(&big).unwrap();
    let cs = connected_components(&m, Connectivity::Six);
    let f = filter_small(&cs, 20, 3.0);
    assert!(f.len() <= cs.len());
    assert_eq!(f.len(), 2);
    assert_eq!(f.mask_of(1), cube([12, 12, 12], 1, 4));
    assert_eq!(f.mask_of(2), big);
}

#[test]
fn extract_candidates_finds_blob() {
    let g = Grid::unit([16, 16, 16]);
    let mut r = rng::seeded(3);
    let map = Volume::from_fn(g, |x, y, z| {
        let d2 = (x as f32 - 8.0).powi(2) + (y as f32 - 8.0).powi(2) + (z as f32 - 8.0).powi(2);
        (if d2 <= 9.0 { 0.8 } else { 0.05 }) + 0.02 * rng::normal_f32(&mut r).abs()
    });
    let c = extract_candidates(&map, None, &PostprocessConfig::default()).unwrap();
    assert_eq!(c.components.len(), 1);
    let flat = extract_candidates(&Volume::filled(g, 0.0), None, &PostprocessConfig::default()).unwrap();
    assert!(flat.threshold.is_none() && flat.components.is_empty());
    let floored = PostprocessConfig { min_threshold: 0.9, ..PostprocessConfig::default() };
    assert!(extract_candidates(&map, None, &floored).unwrap().components.is_empty());
}

fn arb_mask() -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(prop::bool::weighted(0.45), 6 * 5 * 4)
        .prop_map(|v| BinaryMask::new(Grid::unit([6, 5, 4]), v.into_iter().map(|b| b as u8).collect()).unwrap())
}

proptest! {
    #[test]
    fn erosion_dilation_duality(m in arb_mask()) {
        for c in [Connectivity::Six, Connectivity::TwentySix] {
            prop_assert_eq!(erode(&m, c), dilate(&m.complement(), c).complement());
        }
    }

    #[test]
    fn hole_fill_idempotent(m in arb_mask()) {
        let f = fill_holes(&m, Connectivity::Six);
        prop_assert_eq!(fill_holes(&f, Connectivity::Six), f.clone());
        prop_assert_eq!(m.intersection_count(&f).unwrap(), m.count());
    }

    #[test]
    fn components_partition_foreground(m in arb_mask()) {
        let cs = connected_components(&m, Connectivity::TwentySix);
        prop_assert_eq!(cs.foreground(), m.clone());
        prop_assert_eq!(cs.components().iter().map(|c| c.voxels).sum::<usize>(), m.count());
        let f = filter_small(&cs, 3, 0.0);
        prop_assert!(f.len() <= cs.len());
    }
}

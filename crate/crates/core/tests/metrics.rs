use std::time::Instant;

use fedseg::image::Mask;
use fedseg::metrics::{
    assd, dice, hausdorff, hausdorff_with, hd95, iou, percentile, squared_distance_map, summarize,
    Metric, MetricRecord, PointSet,
};
use fedseg::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let style = rng.gen_range(0..3);
    let p = rng.gen_range(0.02..0.6);
    let (y0, y1) = (rng.gen_range(0..h), rng.gen_range(0..h));
    let (x0, x1) = (rng.gen_range(0..w), rng.gen_range(0..w));
    Mask::from_fn(h, w, |y, x| match style {
        0 => rng.gen_bool(p),
        1 => (y0.min(y1)..=y0.max(y1)).contains(&y) && (x0.min(x1)..=x0.max(x1)).contains(&x),
        _ => {
            let inside =
                (y0.min(y1)..=y0.max(y1)).contains(&y) && (x0.min(x1)..=x0.max(x1)).contains(&x);
            inside ^ rng.gen_bool(p / 4.0)
        }
    })
}

fn nonempty(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    loop {
        let m = random_mask(rng, h, w);
        if !m.is_empty() {
            return m;
        }
    }
}

fn brute_directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let dy = y as f64 - v as f64;
                    let dx = x as f64 - u as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Boundary by definition: foreground with a 4-neighbour outside the mask or on the border.
fn brute_boundary(m: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = m.dims();
    m.points()
        .into_iter()
        .filter(|&(y, x)| {
            y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !m.get(y - 1, x)
                || !m.get(y + 1, x)
                || !m.get(y, x - 1)
                || !m.get(y, x + 1)
        })
        .collect()
}

fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let r = q * (v.len() - 1) as f64;
    let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
    v[lo] * (1.0 - (r - lo as f64)) + v[hi] * (r - lo as f64)
}

#[test]
fn oracle_agreement_on_1000_random_masks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let g = nonempty(&mut rng, h, w);
        let p = nonempty(&mut rng, h, w);
        let (gp, pp) = (g.points(), p.points());
        let inter = gp.iter().filter(|&&(y, x)| p.get(y, x)).count();
        let d = dice(&g, &p).unwrap();
        let j = iou(&g, &p).unwrap();
        assert_eq!(d, 2.0 * inter as f64 / (gp.len() + pp.len()) as f64);
        assert_eq!(j, inter as f64 / (gp.len() + pp.len() - inter) as f64);
        assert!((j - d / (2.0 - d)).abs() <= 1e-12);

        let a = brute_directed(&gp, &pp);
        let b = brute_directed(&pp, &gp);
        let hd = a.iter().chain(&b).copied().fold(0.0, f64::max);
        assert!((hausdorff(&g, &p).unwrap() - hd).abs() <= 1e-9);
        let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
        assert!((hd95(&g, &p).unwrap() - quantile(pooled, 0.95)).abs() <= 1e-9);

        let (gb, pb) = (brute_boundary(&g), brute_boundary(&p));
        let sa = brute_directed(&gb, &pb);
        let sb = brute_directed(&pb, &gb);
        let expected =
            (sa.iter().sum::<f64>() + sb.iter().sum::<f64>()) / (sa.len() + sb.len()) as f64;
        assert!((assd(&g, &p).unwrap() - expected).abs() <= 1e-9);
        let hb = sa.iter().chain(&sb).copied().fold(0.0, f64::max);
        assert!((hausdorff_with(&g, &p, PointSet::Boundary).unwrap() - hb).abs() <= 1e-9);
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn distance_map_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..=20), rng.gen_range(1..=20));
        let m = nonempty(&mut rng, h, w);
        let map = squared_distance_map(&m);
        let pts = m.points();
        for y in 0..h {
            for x in 0..w {
                let best = pts
                    .iter()
                    .map(|&(v, u)| {
                        ((y as i64 - v as i64).pow(2) + (x as i64 - u as i64).pow(2)) as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(map[y * w + x], best);
            }
        }
    }
}

#[test]
fn identical_masks_are_perfect() {
    let m = Mask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..5).contains(&x));
    assert_eq!(dice(&m, &m).unwrap(), 1.0);
    assert_eq!(iou(&m, &m).unwrap(), 1.0);
    assert_eq!(hausdorff(&m, &m).unwrap(), 0.0);
    assert_eq!(hd95(&m, &m).unwrap(), 0.0);
    assert_eq!(assd(&m, &m).unwrap(), 0.0);
}

#[test]
fn disjoint_masks_score_zero_overlap() {
    let a = Mask::from_fn(4, 4, |y, _| y == 0);
    let b = Mask::from_fn(4, 4, |y, _| y == 3);
    assert_eq!(dice(&a, &b).unwrap(), 0.0);
    assert_eq!(iou(&a, &b).unwrap(), 0.0);
    assert_eq!(hausdorff(&a, &b).unwrap(), 3.0);
}

#[test]
fn single_pixel_shift() {
    let a = Mask::from_fn(5, 5, |y, x| y == 2 && x == 1);
    let b = Mask::from_fn(5, 5, |y, x| y == 2 && x == 4);
    assert_eq!(hausdorff(&a, &b).unwrap(), 3.0);
    assert_eq!(assd(&a, &b).unwrap(), 3.0);
}

#[test]
fn empty_masks() {
    let e = Mask::new(4, 4);
    let m = Mask::from_fn(4, 4, |y, x| y == x);
    assert_eq!(dice(&e, &e).unwrap(), 1.0);
    assert_eq!(iou(&e, &e).unwrap(), 1.0);
    assert_eq!(dice(&e, &m).unwrap(), 0.0);
    assert!(matches!(hausdorff(&e, &m), Err(Error::UndefinedMetric(_))));
    assert!(matches!(hd95(&m, &e), Err(Error::UndefinedMetric(_))));
    assert!(matches!(assd(&e, &e), Err(Error::UndefinedMetric(_))));
    let r = MetricRecord::score(7, &m, &e).unwrap();
    assert_eq!(r.dice, 0.0);
    assert!(r.hd.is_none() && r.hd95.is_none() && r.assd.is_none());
}

#[test]
fn shape_mismatch_is_rejected() {
    let a = Mask::new(3, 4);
    let b = Mask::new(4, 3);
    assert!(matches!(dice(&a, &b), Err(Error::Dimension(_))));
}

#[test]
fn percentile_interpolates() {
    let mut v = vec![4.0, 1.0, 3.0, 2.0];
    assert_eq!(percentile(&mut v, 50.0), 2.5);
    assert_eq!(percentile(&mut v, 0.0), 1.0);
    assert_eq!(percentile(&mut v, 100.0), 4.0);
    assert!((percentile(&mut v, 95.0) - 3.85).abs() < 1e-12);
}

#[test]
fn summary_skips_undefined_distances() {
    let m = Mask::from_fn(4, 4, |y, x| y == x);
    let e = Mask::new(4, 4);
    let records = vec![
        MetricRecord::score(0, &m, &m).unwrap(),
        MetricRecord::score(1, &m, &e).unwrap(),
        MetricRecord::score(2, &m, &m).unwrap(),
    ];
    let summary = summarize(&records);
    let hd = summary.iter().find(|s| s.metric == Metric::Hd).unwrap();
    assert_eq!((hd.count, hd.skipped), (2, 1));
    let d = summary.iter().find(|s| s.metric == Metric::Dice).unwrap();
    assert_eq!((d.count, d.median), (3, 1.0));
}

fn mask_strategy() -> impl Strategy<Value = (Mask, Mask)> {
    (2usize..16, 2usize..16).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(any::<bool>(), h * w),
            proptest::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(a, b)| {
                let to = |v: Vec<bool>| {
                    Mask::from_vec(h, w, v.into_iter().map(u8::from).collect()).unwrap()
                };
                (to(a), to(b))
            })
    })
}

proptest! {
    #[test]
    fn metrics_are_symmetric_and_bounded((g, p) in mask_strategy()) {
        let d = dice(&g, &p).unwrap();
        let j = iou(&g, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert!(j <= d);
        prop_assert_eq!(d, dice(&p, &g).unwrap());
        prop_assert_eq!(j, iou(&p, &g).unwrap());
        if !g.is_empty() && !p.is_empty() {
            let hd = hausdorff(&g, &p).unwrap();
            let h95 = hd95(&g, &p).unwrap();
            prop_assert_eq!(hd, hausdorff(&p, &g).unwrap());
            prop_assert!((h95 - hd95(&p, &g).unwrap()).abs() < 1e-12);
            prop_assert!((assd(&g, &p).unwrap() - assd(&p, &g).unwrap()).abs() < 1e-12);
            prop_assert!(h95 <= hd + 1e-12 && h95 >= 0.0);
        }
    }

    #[test]
    fn translation_invariance((g, p) in mask_strategy(), dy in 0usize..4, dx in 0usize..4) {
        prop_assume!(!g.is_empty() && !p.is_empty());
        let (h, w) = g.dims();
        // shift into a larger canvas so that no pixel falls off the grid
        let shift = |m: &Mask| Mask::from_fn(h + 8, w + 8, |y, x| {
            y >= dy + 4 && x >= dx + 4 && y - dy - 4 < h && x - dx - 4 < w && m.get(y - dy - 4, x - dx - 4)
        });
        let pad = |m: &Mask| Mask::from_fn(h + 8, w + 8, |y, x| {
            (4..h + 4).contains(&y) && (4..w + 4).contains(&x) && m.get(y - 4, x - 4)
        });
        let (a, b) = (pad(&g), pad(&p));
        let (sa, sb) = (shift(&g), shift(&p));
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&sa, &sb).unwrap());
        prop_assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&sa, &sb).unwrap());
        prop_assert!((hd95(&a, &b).unwrap() - hd95(&sa, &sb).unwrap()).abs() < 1e-12);
        prop_assert!((assd(&a, &b).unwrap() - assd(&sa, &sb).unwrap()).abs() < 1e-12);
    }
}

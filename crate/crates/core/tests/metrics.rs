use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sweepforge::metrics::*;
use sweepforge::raster::{write_png8, Image2};
use sweepforge::Error;

/// All-pairs ASSD straight from the definition.
fn brute_assd(a: &Mask2D, b: &Mask2D) -> f64 {
    let pts = |m: &Mask2D| -> Vec<(f64, f64)> {
        let (w, h) = m.shape();
        let on = |u: isize, v: isize| u >= 0 && v >= 0 && (u as usize) < w && (v as usize) < h && *m.mask.get(u as usize, v as usize);
        let mut out = Vec::new();
        for v in 0..h as isize {
            for u in 0..w as isize {
                if on(u, v) && !(on(u - 1, v) && on(u + 1, v) && on(u, v - 1) && on(u, v + 1)) {
                    out.push((u as f64, v as f64));
                }
            }
        }
        out
    };
    let (pa, pb) = (pts(a), pts(b));
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min)
    };
    let total: f64 = pa.iter().map(|p| nearest(p, &pb)).sum::<f64>() + pb.iter().map(|q| nearest(q, &pa)).sum::<f64>();
    total / (pa.len() + pb.len()) as f64 * a.spacing
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask2D {
    let density = rng.gen_range(0.05..0.7);
    loop {
        let m = Mask2D::from_fn(w, h, 0.5, |_, _| rng.gen_bool(density)).unwrap();
        if !m.is_empty() {
            return m;
        }
    }
}

#[test]
fn assd_matches_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let (a, b) = (random_mask(&mut rng, w, h), random_mask(&mut rng, w, h));
        assert_abs_diff_eq!(assd(&a, &b).unwrap(), brute_assd(&a, &b), epsilon = 1e-9);
    }
}

#[test]
fn shifted_square_dice() {
    let a = Mask2D::from_fn(8, 8, 1.0, |u, v| (2..4).contains(&u) && (2..4).contains(&v)).unwrap();
    let b = Mask2D::from_fn(8, 8, 1.0, |u, v| (3..5).contains(&u) && (2..4).contains(&v)).unwrap();
    assert_eq!(dice(&a, &b).unwrap(), 0.5);
}

proptest! {
    #[test]
    fn metrics_are_symmetric(seed in any::<u64>(), w in 1usize..24, h in 1usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_mask(&mut rng, w, h), random_mask(&mut rng, w, h));
        let d = dice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        let s = assd(&a, &b).unwrap();
        prop_assert!(s >= 0.0);
        prop_assert!((s - assd(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_translation_invariant(seed in any::<u64>(), du in 0usize..6, dv in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // masks confined to a 12x12 window inside a larger canvas so the
        // shift never clips them against the image border
        let inner = |rng: &mut ChaCha8Rng| -> Vec<bool> { (0..144).map(|_| rng.gen_bool(0.4)).collect() };
        let (ia, ib) = (inner(&mut rng), inner(&mut rng));
        prop_assume!(ia.iter().any(|&x| x) && ib.iter().any(|&x| x));
        let place = |bits: &[bool], ou: usize, ov: usize| {
            Mask2D::from_fn(26, 26, 0.5, |u, v| {
                (ou + 1..ou + 13).contains(&u) && (ov + 1..ov + 13).contains(&v) && bits[(v - ov - 1) * 12 + (u - ou - 1)]
            })
            .unwrap()
        };
        let (a0, b0) = (place(&ia, 0, 0), place(&ib, 0, 0));
        let (a1, b1) = (place(&ia, du, dv), place(&ib, du, dv));
        prop_assert_eq!(dice(&a0, &b0).unwrap(), dice(&a1, &b1).unwrap());
        prop_assert!((assd(&a0, &b0).unwrap() - assd(&a1, &b1).unwrap()).abs() < 1e-9);
    }
}

fn write_mask(dir: &std::path::Path, name: &str, w: usize, h: usize, on: impl Fn(usize, usize) -> bool) {
    write_png8(&dir.join(name), &Image2::from_fn(w, h, |u, v| if on(u, v) { 1 } else { 0 })).unwrap();
}

#[test]
fn evaluate_identical_dirs() {
    let (pred, gt) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [pred.path(), gt.path()] {
        write_mask(dir, "a.png", 20, 20, |u, v| u < 5 && v < 7);
        write_mask(dir, "b.png", 20, 20, |u, v| (u + v) % 7 == 0);
        write_mask(dir, "empty.png", 20, 20, |_, _| false);
    }
    let eval = evaluate_dirs(pred.path(), gt.path(), 0.5).unwrap();
    assert_eq!(eval.rows.iter().map(|r| r.slice.as_str()).collect::<Vec<_>>(), ["a.png", "b.png", "empty.png"]);
    let dice = eval.summary.dice.as_ref().unwrap();
    assert_eq!(dice.median, 1.0);
    assert_eq!(eval.summary.assd_mm.as_ref().unwrap().median, 0.0);
    assert_eq!(eval.rows[2].dice, 1.0);
    assert_eq!(eval.rows[2].assd_mm, None);
    assert_eq!(eval.summary.assd_undefined, 1);

    let out = tempfile::tempdir().unwrap();
    write_evaluation(&eval, out.path()).unwrap();
    let csv = std::fs::read_to_string(out.path().join(METRICS_CSV)).unwrap();
    assert!(csv.starts_with("slice,dice,assd_mm,assd_defined\n"));
    assert!(csv.contains("empty.png,1,,false"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.path().join(SUMMARY_JSON)).unwrap()).unwrap();
    assert_eq!(summary["assd_undefined"], 1);
}

#[test]
fn evaluate_reports_name_differences() {
    let (pred, gt) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_mask(pred.path(), "a.png", 4, 4, |_, _| true);
    write_mask(pred.path(), "p.png", 4, 4, |_, _| true);
    write_mask(gt.path(), "a.png", 4, 4, |_, _| true);
    write_mask(gt.path(), "g.png", 4, 4, |_, _| true);
    match evaluate_dirs(pred.path(), gt.path(), 0.5) {
        Err(Error::NameMismatch { only_pred, only_gt }) => {
            assert_eq!(only_pred, ["p.png"]);
            assert_eq!(only_gt, ["g.png"]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

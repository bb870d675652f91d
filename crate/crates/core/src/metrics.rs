//! 2D segmentation metrics: Dice and average symmetric surface distance
//! (ASSD) in mm, plus directory-level evaluation with median/IQR summaries.
//!
//! Boundary pixels are foreground pixels with at least one background
//! 4-neighbour; the image border counts as background. Quartiles use linear
//! interpolation between order statistics (type 7).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_gray_png, GrayPng, Image2};
use crate::volume::quantile_sorted;

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Mask2D {
    pub mask: Image2<bool>,
    /// Pixel spacing, mm.
    pub spacing: f64,
}

impl Mask2D {
    pub fn new(mask: Image2<bool>, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidArgument(format!("pixel spacing must be > 0, got {spacing}")));
        }
        Ok(Self { mask, spacing })
    }

    pub fn from_fn(width: usize, height: usize, spacing: f64, f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        Self::new(Image2::from_fn(width, height, f), spacing)
    }

    /// `(width, height)`.
    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn boundary(&self) -> Image2<bool> {
        let (w, h) = self.shape();
        let m = &self.mask;
        Image2::from_fn(w, h, |u, v| {
            *m.get(u, v)
                && (u == 0 || v == 0 || u + 1 == w || v + 1 == h
                    || !*m.get(u - 1, v)
                    || !*m.get(u + 1, v)
                    || !*m.get(u, v - 1)
                    || !*m.get(u, v + 1))
        })
    }
}

fn check_shapes(a: &Mask2D, b: &Mask2D) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(a: &Mask2D, b: &Mask2D) -> Result<f64> {
    check_shapes(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.mask.data().iter().zip(b.mask.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// 1D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut found = f[0].is_finite();
    for q in 1..n {
        if !f[q].is_finite() {
            continue;
        }
        if !found {
            v[0] = q;
            found = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !found {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in pixels²) from every pixel to the
/// nearest `true` pixel of `sites`.
pub fn squared_distance_transform(sites: &Image2<bool>) -> Image2<f64> {
    let (w, h) = sites.shape();
    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut grid: Vec<f64> = sites
        .data()
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    for col in 0..w {
        for row in 0..h {
            f[row] = grid[row * w + col];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for row in 0..h {
            grid[row * w + col] = out[row];
        }
    }
    for row in 0..h {
        f[..w].copy_from_slice(&grid[row * w..(row + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[row * w..(row + 1) * w].copy_from_slice(&out[..w]);
    }
    Image2::from_vec(w, h, grid).expect("sized to shape")
}

/// Average symmetric surface distance in mm.
pub fn assd(a: &Mask2D, b: &Mask2D) -> Result<f64> {
    check_shapes(a, b)?;
    if a.is_empty() {
        return Err(Error::UndefinedSurfaceDistance("first"));
    }
    if b.is_empty() {
        return Err(Error::UndefinedSurfaceDistance("second"));
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let (da, db) = (squared_distance_transform(&ba), squared_distance_transform(&bb));
    let sum_to = |from: &Image2<bool>, dist: &Image2<f64>| -> (f64, usize) {
        from.data()
            .iter()
            .zip(dist.data())
            .filter(|(&on, _)| on)
            .fold((0.0, 0), |(s, n), (_, d)| (s + d.sqrt(), n + 1))
    };
    let (sa, na) = sum_to(&ba, &db);
    let (sb, nb) = sum_to(&bb, &da);
    Ok((sa + sb) / (na + nb) as f64 * a.spacing)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub slice: String,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub assd_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

impl Spread {
    /// Median and quartiles of `values`; `None` when empty.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile_sorted(&sorted, 0.25), quantile_sorted(&sorted, 0.75));
        Some(Self {
            count: sorted.len(),
            median: quantile_sorted(&sorted, 0.5),
            q1,
            q3,
            iqr: q3 - q1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub slices: usize,
    pub dice: Option<Spread>,
    pub assd_mm: Option<Spread>,
    pub assd_undefined: usize,
    pub spacing_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rows: Vec<SliceMetrics>,
    pub summary: Summary,
}

pub fn summarize(rows: &[SliceMetrics], spacing: f64) -> Summary {
    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let assd: Vec<f64> = rows.iter().filter_map(|r| r.assd_mm).collect();
    Summary {
        slices: rows.len(),
        dice: Spread::of(&dice),
        assd_mm: Spread::of(&assd),
        assd_undefined: rows.len() - assd.len(),
        spacing_mm: spacing,
    }
}

pub fn evaluate_pair(name: &str, pred: &Mask2D, gt: &Mask2D) -> Result<SliceMetrics> {
    let dice = dice(pred, gt)?;
    let assd_mm = match assd(pred, gt) {
        Ok(d) => Some(d),
        Err(Error::UndefinedSurfaceDistance(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SliceMetrics {
        slice: name.to_string(),
        dice,
        assd_mm,
    })
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.insert(name);
        }
    }
    Ok(names)
}

/// Read a mask PNG (8- or 16-bit); any non-zero pixel is foreground.
pub fn read_mask(path: &Path, spacing: f64) -> Result<Mask2D> {
    let mask = match read_gray_png(path)? {
        GrayPng::Eight(img) => img.map(|&v| v != 0),
        GrayPng::Sixteen(img) => img.map(|&v| v != 0),
    };
    Mask2D::new(mask, spacing)
}

/// Compare every PNG in `pred_dir` with the same-named PNG in `gt_dir`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, spacing: f64) -> Result<Evaluation> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidArgument(format!("pixel spacing must be > 0, got {spacing}")));
    }
    let pred = png_names(pred_dir)?;
    let gt = png_names(gt_dir)?;
    if pred != gt {
        return Err(Error::NameMismatch {
            only_pred: pred.difference(&gt).cloned().collect(),
            only_gt: gt.difference(&pred).cloned().collect(),
        });
    }
    let names: Vec<String> = pred.into_iter().collect();
    let rows = names
        .par_iter()
        .map(|name| {
            let p = read_mask(&pred_dir.join(name), spacing)?;
            let g = read_mask(&gt_dir.join(name), spacing)?;
            evaluate_pair(name, &p, &g)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&rows, spacing);
    Ok(Evaluation { rows, summary })
}

pub fn metrics_csv(rows: &[SliceMetrics]) -> String {
    let mut out = String::from("slice,dice,assd_mm,assd_defined\n");
    for r in rows {
        let assd = r.assd_mm.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.slice, r.dice, assd, r.assd_mm.is_some());
    }
    out
}

/// Write `metrics.csv` and `summary.json` into `out_dir`.
pub fn write_evaluation(eval: &Evaluation, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join(METRICS_CSV);
    std::fs::write(&csv, metrics_csv(&eval.rows)).map_err(|e| Error::io(&csv, e))?;
    let summary = out_dir.join(SUMMARY_JSON);
    let text = serde_json::to_string_pretty(&eval.summary).expect("summary serializes");
    std::fs::write(&summary, text).map_err(|e| Error::io(&summary, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> Mask2D {
        Mask2D::from_fn(w, h, 1.0, |u, v| on.contains(&(u, v))).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = mask(6, 6, &[(1, 1), (2, 1), (1, 2), (2, 2)]);
        let b = mask(6, 6, &[(2, 1), (3, 1), (2, 2), (3, 2)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &mask(6, 6, &[(5, 5)])).unwrap(), 0.0);
        assert_eq!(dice(&mask(6, 6, &[]), &mask(6, 6, &[])).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(6, 6, &[])).unwrap(), 0.0);
        assert!(matches!(dice(&a, &mask(5, 6, &[])), Err(Error::ShapeMismatch(..))));
    }

    #[test]
    fn assd_hand_cases() {
        let a = Mask2D::from_fn(10, 10, 0.5, |u, v| (u, v) == (2, 4)).unwrap();
        let b = Mask2D::from_fn(10, 10, 0.5, |u, v| (u, v) == (5, 4)).unwrap();
        assert_abs_diff_eq!(assd(&a, &b).unwrap(), 1.5, epsilon = 1e-12);
        assert_eq!(assd(&a, &a).unwrap(), 0.0);
        let empty = mask(10, 10, &[]);
        let err = assd(&a, &empty).unwrap_err().to_string();
        assert!(err.contains("undefined surface distance"), "{err}");
    }

    #[test]
    fn boundary_uses_four_neighbours_and_border() {
        let full = Mask2D::from_fn(5, 5, 1.0, |_, _| true).unwrap();
        let b = full.boundary();
        assert_eq!(b.data().iter().filter(|&&x| x).count(), 16);
        let block = Mask2D::from_fn(7, 7, 1.0, |u, v| (1..6).contains(&u) && (1..6).contains(&v)).unwrap();
        assert!(!*block.boundary().get(3, 3));
        assert!(*block.boundary().get(1, 1));
        assert_eq!(block.boundary().data().iter().filter(|&&x| x).count(), 16);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let sites = Image2::from_fn(9, 7, |u, v| (u * 7 + v * 3) % 11 == 0);
        let dt = squared_distance_transform(&sites);
        for v in 0..7 {
            for u in 0..9 {
                let mut best = f64::INFINITY;
                for sv in 0..7 {
                    for su in 0..9 {
                        if *sites.get(su, sv) {
                            let d = (su as f64 - u as f64).powi(2) + (sv as f64 - v as f64).powi(2);
                            best = best.min(d);
                        }
                    }
                }
                assert_eq!(*dt.get(u, v), best, "({u}, {v})");
            }
        }
        let none = squared_distance_transform(&Image2::filled(3, 3, false));
        assert!(none.data().iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn quartile_summary() {
        let rows: Vec<SliceMetrics> = [0.2, 0.5, 0.8]
            .iter()
            .enumerate()
            .map(|(i, &d)| SliceMetrics {
                slice: format!("s{i}.png"),
                dice: d,
                assd_mm: (i != 1).then_some(1.0),
            })
            .collect();
        let s = summarize(&rows, 0.5);
        let dice = s.dice.unwrap();
        assert_abs_diff_eq!(dice.median, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(dice.iqr, 0.3, epsilon = 1e-12);
        assert_eq!(s.assd_undefined, 1);
        assert_eq!(s.assd_mm.unwrap().count, 2);
    }

    #[test]
    fn csv_format() {
        let rows = vec![
            SliceMetrics {
                slice: "a.png".into(),
                dice: 1.0,
                assd_mm: None,
            },
            SliceMetrics {
                slice: "b.png".into(),
                dice: 0.5,
                assd_mm: Some(1.5),
            },
        ];
        assert_eq!(
            metrics_csv(&rows),
            "slice,dice,assd_mm,assd_defined\na.png,1,,false\nb.png,0.5,1.5,true\n"
        );
    }
}

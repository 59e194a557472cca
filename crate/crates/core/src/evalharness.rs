//! Pixel- and image-level precision, recall and F1, and directory-level
//! evaluation reports.
//!
//! # Pairing rules
//!
//! A prediction `<stem><pred_suffix>.png` pairs with the ground truth
//! `<stem><gt_suffix>.png` when it exists. With the CoMoFoD layout enabled,
//! a prediction stem `NNN_F` or `NNN_F_<ATTACK><level>` falls back to the
//! shared mask `NNN_B.png`, and rows are grouped by category: `F` for the
//! plain forgery, otherwise `<ATTACK><level>` with attacks `JC` (levels 1-9)
//! and `IB`, `NA`, `BC`, `CR`, `CA` (levels 1-3), 25 categories in all.
//!
//! Masks are binarized at 8-bit value > 127. Images whose ground truth has no
//! positive pixel count as pristine: they enter image-level metrics only.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_argument, Error, Result};
use crate::imaging::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        Self { precision, recall, f1: f1(precision, recall) }
    }

    /// Component-wise arithmetic mean.
    pub fn mean(items: &[Prf]) -> Prf {
        if items.is_empty() {
            return Prf::default();
        }
        let n = items.len() as f64;
        Prf {
            precision: items.iter().map(|m| m.precision).sum::<f64>() / n,
            recall: items.iter().map(|m| m.recall).sum::<f64>() / n,
            f1: items.iter().map(|m| m.f1).sum::<f64>() / n,
        }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// `(tp, fp, fn, tn)` over pixels, positives at value >= 0.5.
pub fn confusion(pred: &Mask, gt: &Mask) -> Result<(usize, usize, usize, usize)> {
    if pred.size() != gt.size() {
        return Err(invalid_argument(format!("prediction {:?} and ground truth {:?} differ in size", pred.size(), gt.size())));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= 0.5, g >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok((tp, fp, fn_, tn))
}

/// Per-image pixel metrics; `None` when the ground truth has no positive
/// pixel and the image is excluded from pixel-level means.
pub fn pixel_metrics(pred: &Mask, gt: &Mask) -> Result<Option<Prf>> {
    let (tp, fp, fn_, _) = confusion(pred, gt)?;
    if tp + fn_ == 0 {
        return Ok(None);
    }
    Ok(Some(Prf::from_counts(tp, fp, fn_)))
}

/// Binary classification metrics over `(verdict, is_forged)` pairs.
pub fn image_metrics(results: &[(bool, bool)]) -> Result<Prf> {
    if results.is_empty() {
        return Err(invalid_argument("image metrics need at least one image"));
    }
    let tp = results.iter().filter(|&&(v, f)| v && f).count();
    let fp = results.iter().filter(|&&(v, f)| v && !f).count();
    let fn_ = results.iter().filter(|&&(v, f)| !v && f).count();
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// CoMoFoD category of a file stem: `F`, `JC1`..`JC9`, or `IB|NA|BC|CR|CA` 1..3.
pub fn comofod_category(stem: &str) -> Option<String> {
    let mut parts = stem.split('_');
    let id = parts.next()?;
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_digit()) || parts.next()? != "F" {
        return None;
    }
    match parts.next() {
        None => Some("F".to_string()),
        Some(attack) => {
            if parts.next().is_some() || attack.len() < 3 {
                return None;
            }
            let (kind, level) = attack.split_at(2);
            let level: u32 = level.parse().ok()?;
            let max = match kind {
                "JC" => 9,
                "IB" | "NA" | "BC" | "CR" | "CA" => 3,
                _ => return None,
            };
            (1..=max).contains(&level).then(|| attack.to_string())
        }
    }
}

pub fn comofod_categories() -> Vec<String> {
    let mut out = vec!["F".to_string()];
    out.extend((1..=9).map(|l| format!("JC{l}")));
    for kind in ["IB", "NA", "BC", "CR", "CA"] {
        out.extend((1..=3).map(|l| format!("{kind}{l}")));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLayout {
    pub pred_suffix: String,
    pub gt_suffix: String,
    pub comofod: bool,
    /// Image-level verdict: positive pixels above this fraction of the area.
    pub verdict_fraction: f64,
}

impl Default for EvalLayout {
    fn default() -> Self {
        Self { pred_suffix: String::new(), gt_suffix: String::new(), comofod: false, verdict_fraction: 0.002 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub name: String,
    pub category: Option<String>,
    pub forged: bool,
    pub verdict: bool,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub paired: usize,
    pub forged: usize,
    pub pristine: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pixel: Prf,
    pub image: Prf,
    pub counts: Counts,
    pub categories: BTreeMap<String, Prf>,
    pub rows: Vec<ImageRow>,
    pub unmatched_predictions: Vec<String>,
    pub unmatched_ground_truth: Vec<String>,
}

impl MetricReport {
    /// Builds a report from already paired rows.
    pub fn from_rows(rows: Vec<ImageRow>) -> Result<Self> {
        let prf = |r: &ImageRow| Prf { precision: r.precision.unwrap(), recall: r.recall.unwrap(), f1: r.f1.unwrap() };
        let forged: Vec<&ImageRow> = rows.iter().filter(|r| r.forged).collect();
        let pixel = Prf::mean(&forged.iter().map(|r| prf(r)).collect::<Vec<_>>());
        let image = image_metrics(&rows.iter().map(|r| (r.verdict, r.forged)).collect::<Vec<_>>())?;
        let mut grouped: BTreeMap<String, Vec<Prf>> = BTreeMap::new();
        for r in &forged {
            if let Some(c) = &r.category {
                grouped.entry(c.clone()).or_default().push(prf(r));
            }
        }
        Ok(Self {
            pixel,
            image,
            counts: Counts { paired: rows.len(), forged: forged.len(), pristine: rows.len() - forged.len() },
            categories: grouped.into_iter().map(|(k, v)| (k, Prf::mean(&v))).collect(),
            rows,
            unmatched_predictions: Vec::new(),
            unmatched_ground_truth: Vec::new(),
        })
    }

    /// Writes `report.json` and `per_image.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)?)?;
        let csv_path = dir.join("per_image.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok((json, csv_path))
    }
}

/// Per-image row for one prediction/ground-truth pair.
pub fn evaluate_pair(name: &str, pred: &Mask, gt: &Mask, layout: &EvalLayout) -> Result<ImageRow> {
    let metrics = pixel_metrics(pred, gt)?;
    let (h, w) = pred.size();
    let verdict = pred.count_positive() as f64 > layout.verdict_fraction * (h * w) as f64;
    Ok(ImageRow {
        name: name.to_string(),
        category: if layout.comofod { comofod_category(name) } else { None },
        forged: metrics.is_some(),
        verdict,
        precision: metrics.map(|m| m.precision),
        recall: metrics.map(|m| m.recall),
        f1: metrics.map(|m| m.f1),
    })
}

fn png_stems(dir: &Path, suffix: &str) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) != Some(true) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(base) = stem.strip_suffix(suffix) {
                out.insert(base.to_string());
            }
        }
    }
    Ok(out)
}

fn comofod_mask_stem(stem: &str) -> Option<String> {
    comofod_category(stem).map(|_| format!("{}_B", stem.split('_').next().unwrap()))
}

/// Pairs every prediction with its ground truth and computes both metric
/// levels. Unpaired files are listed and left out of the means.
pub fn evaluate_dataset(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>, layout: &EvalLayout) -> Result<MetricReport> {
    let (pred_dir, gt_dir) = (pred_dir.as_ref(), gt_dir.as_ref());
    let preds = png_stems(pred_dir, &layout.pred_suffix)?;
    let gts = png_stems(gt_dir, &layout.gt_suffix)?;
    let mut used = BTreeSet::new();
    let mut rows = Vec::new();
    let mut unmatched_predictions = Vec::new();
    for stem in &preds {
        let gt_stem = if gts.contains(stem) {
            Some(stem.clone())
        } else if layout.comofod {
            comofod_mask_stem(stem).filter(|s| gts.contains(s))
        } else {
            None
        };
        let Some(gt_stem) = gt_stem else {
            unmatched_predictions.push(format!("{stem}{}.png", layout.pred_suffix));
            continue;
        };
        let pred = Mask::load_binary(pred_dir.join(format!("{stem}{}.png", layout.pred_suffix)))?;
        let gt = Mask::load_binary(gt_dir.join(format!("{gt_stem}{}.png", layout.gt_suffix)))?;
        rows.push(evaluate_pair(stem, &pred, &gt, layout)?);
        used.insert(gt_stem);
    }
    if rows.is_empty() {
        return Err(Error::EmptyPairing { pred_dir: pred_dir.to_path_buf(), gt_dir: gt_dir.to_path_buf() });
    }
    let mut report = MetricReport::from_rows(rows)?;
    report.unmatched_predictions = unmatched_predictions;
    report.unmatched_ground_truth =
        gts.difference(&used).map(|s| format!("{s}{}.png", layout.gt_suffix)).collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(n: usize, on: &[usize]) -> Mask {
        let mut bits = vec![false; n * n];
        on.iter().for_each(|&i| bits[i] = true);
        Mask::from_bools(n, n, &bits)
    }

    #[test]
    fn hand_example() {
        // 60 true positives, 20 false positives, 40 false negatives.
        let pred = mask_with(20, &(0..80).collect::<Vec<_>>());
        let gt = mask_with(20, &(0..60).chain(100..140).collect::<Vec<_>>());
        let m = pixel_metrics(&pred, &gt).unwrap().unwrap();
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn degenerate_conventions() {
        let gt = mask_with(8, &[3, 4]);
        assert_eq!(pixel_metrics(&gt, &gt).unwrap().unwrap(), Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(pixel_metrics(&mask_with(8, &[]), &gt).unwrap().unwrap(), Prf::default());
        assert_eq!(pixel_metrics(&gt, &mask_with(8, &[])).unwrap(), None);
        assert!(pixel_metrics(&gt, &mask_with(4, &[])).is_err());
    }

    #[test]
    fn image_level_arithmetic() {
        let mut v = vec![(true, true); 4];
        v.push((false, true));
        v.push((true, false));
        v.extend(vec![(false, false); 4]);
        let m = image_metrics(&v).unwrap();
        assert!((m.precision - 0.8).abs() < 1e-12 && (m.recall - 0.8).abs() < 1e-12 && (m.f1 - 0.8).abs() < 1e-12);
        assert!(image_metrics(&[]).is_err());
    }

    #[test]
    fn comofod_grammar_has_25_categories() {
        let cats = comofod_categories();
        assert_eq!(cats.len(), 25);
        assert!(cats.iter().all(|c| comofod_category(&format!("001_F_{c}")).as_deref() == Some(c.as_str())
            || c == "F"));
        assert_eq!(comofod_category("001_F").as_deref(), Some("F"));
        assert_eq!(comofod_category("001_F_JC10"), None);
        assert_eq!(comofod_category("001_F_BC4"), None);
        assert_eq!(comofod_category("001_B"), None);
        assert_eq!(comofod_category("abc_F"), None);
    }

    #[test]
    fn mean_of_rows() {
        let rows = vec![
            ImageRow { name: "a".into(), category: None, forged: true, verdict: true, precision: Some(1.0), recall: Some(1.0), f1: Some(1.0) },
            ImageRow { name: "b".into(), category: None, forged: true, verdict: true, precision: Some(0.5), recall: Some(0.5), f1: Some(0.5) },
        ];
        let r = MetricReport::from_rows(rows).unwrap();
        assert!((r.pixel.f1 - 0.75).abs() < 1e-12);
    }
}

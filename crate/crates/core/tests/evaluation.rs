use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use approx::assert_relative_eq;
use msn::evalharness::{evaluate_dataset, EvalLayout};
use msn::imaging::Mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn write_gray(path: &Path, width: u32, height: u32, depth: png::BitDepth, bits: &[bool]) {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path).unwrap()), width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut data = Vec::new();
    for row in bits.chunks(width as usize) {
        match depth {
            png::BitDepth::One => {
                let mut packed = vec![0u8; (width as usize).div_ceil(8)];
                for (x, &b) in row.iter().enumerate() {
                    if b {
                        packed[x / 8] |= 0x80 >> (x % 8);
                    }
                }
                data.extend(packed);
            }
            png::BitDepth::Eight => data.extend(row.iter().map(|&b| if b { 255u8 } else { 0 })),
            png::BitDepth::Sixteen => {
                for &b in row {
                    data.extend(if b { [0xff, 0xff] } else { [0, 0] });
                }
            }
            _ => unreachable!(),
        }
    }
    enc.write_header().unwrap().write_image_data(&data).unwrap();
}

#[test]
fn mask_bit_depth_does_not_change_the_mask() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, h) = (37u32, 19u32);
    let bits: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.4)).collect();
    let expected = Mask::from_bools(h as usize, w as usize, &bits);
    for (name, depth) in [("one", png::BitDepth::One), ("eight", png::BitDepth::Eight), ("sixteen", png::BitDepth::Sixteen)] {
        let path = dir.path().join(format!("{name}.png"));
        write_gray(&path, w, h, depth, &bits);
        assert_eq!(Mask::load_binary(&path).unwrap(), expected, "{name}-bit mask");
    }
}

#[test]
fn dataset_report_matches_brute_force_counts() {
    let pred_dir = tempfile::tempdir().unwrap();
    let gt_dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 64usize;
    let (mut f1s, mut precisions, mut recalls) = (Vec::new(), Vec::new(), Vec::new());
    let (mut itp, mut ifp, mut ifn) = (0usize, 0usize, 0usize);
    for k in 0..100 {
        let pd = rng.gen_range(0.0..0.05);
        let gd = if k % 5 == 0 { 0.0 } else { rng.gen_range(0.0..0.5) };
        let pred: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(pd)).collect();
        let gt: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(gd)).collect();
        let depth = if k % 2 == 0 { png::BitDepth::One } else { png::BitDepth::Eight };
        write_gray(&pred_dir.path().join(format!("im{k:03}.png")), n as u32, n as u32, depth, &pred);
        write_gray(&gt_dir.path().join(format!("im{k:03}.png")), n as u32, n as u32, png::BitDepth::Eight, &gt);

        let tp = pred.iter().zip(&gt).filter(|(p, g)| **p && **g).count();
        let fp = pred.iter().zip(&gt).filter(|(p, g)| **p && !**g).count();
        let fn_ = pred.iter().zip(&gt).filter(|(p, g)| !**p && **g).count();
        let forged = gt.iter().any(|&g| g);
        let verdict = pred.iter().filter(|&&p| p).count() as f64 > 0.002 * (n * n) as f64;
        if forged {
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = tp as f64 / (tp + fn_) as f64;
            precisions.push(p);
            recalls.push(r);
            f1s.push(if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 });
        }
        match (verdict, forged) {
            (true, true) => itp += 1,
            (true, false) => ifp += 1,
            (false, true) => ifn += 1,
            _ => {}
        }
    }
    let report = evaluate_dataset(pred_dir.path(), gt_dir.path(), &EvalLayout::default()).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(report.counts.paired, 100);
    assert_eq!(report.counts.forged, f1s.len());
    assert_relative_eq!(report.pixel.f1, mean(&f1s), epsilon = 1e-12);
    assert_relative_eq!(report.pixel.precision, mean(&precisions), epsilon = 1e-12);
    assert_relative_eq!(report.pixel.recall, mean(&recalls), epsilon = 1e-12);
    assert_relative_eq!(report.image.precision, itp as f64 / (itp + ifp) as f64, epsilon = 1e-12);
    assert_relative_eq!(report.image.recall, itp as f64 / (itp + ifn) as f64, epsilon = 1e-12);

    let row_mean = mean(&report.rows.iter().filter_map(|r| r.f1).collect::<Vec<_>>());
    assert_relative_eq!(report.pixel.f1, row_mean, epsilon = 1e-12);
}

#[test]
fn comofod_names_pair_with_their_shared_mask() {
    let pred_dir = tempfile::tempdir().unwrap();
    let gt_dir = tempfile::tempdir().unwrap();
    let mut gt = Mask::zeros(8, 8);
    gt.set(1, 1, 1.0);
    gt.save_png(gt_dir.path().join("001_B.png")).unwrap();
    for stem in ["001_F", "001_F_JC3", "001_F_NA2", "002_F"] {
        gt.save_png(pred_dir.path().join(format!("{stem}.png"))).unwrap();
    }
    let layout = EvalLayout { comofod: true, ..EvalLayout::default() };
    let report = evaluate_dataset(pred_dir.path(), gt_dir.path(), &layout).unwrap();
    assert_eq!(report.counts.paired, 3);
    assert_eq!(report.unmatched_predictions, vec!["002_F.png".to_string()]);
    let categories: Vec<&str> = report.categories.keys().map(String::as_str).collect();
    assert_eq!(categories, ["F", "JC3", "NA2"]);
}

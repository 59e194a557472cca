use msn::forgegen::{forge, forge_shape_decoupled, ForgeConfig};
use msn::imaging::{Image, Mask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn texture(n: usize, phase: f32) -> Image {
    Image::from_fn(n, n, |r, c| {
        let (y, x) = (r as f32 / n as f32, c as f32 / n as f32);
        [
            0.5 + 0.5 * (17.0 * x + phase).sin() * (11.0 * y).cos(),
            0.5 + 0.5 * (23.0 * x * y + phase).sin(),
            (x + y) / 2.0,
        ]
    })
}

/// An axis-aligned ellipse with a notch, so the shape has no rotational symmetry.
fn blob(n: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> Mask {
    let mut m = Mask::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let (dy, dx) = ((r as f64 + 0.5 - cy) / ry, (c as f64 + 0.5 - cx) / rx);
            let notch = dy < 0.0 && dx > 0.0 && dx < 0.4;
            if dy * dy + dx * dx <= 1.0 && !notch {
                m.set(r, c, 1.0);
            }
        }
    }
    m
}

fn bbox(m: &Mask) -> (usize, usize, usize, usize) {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) >= 0.5 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    (r0, r1, c0, c1)
}

#[test]
fn fixed_seed_gives_identical_records() {
    let img = texture(128, 0.3);
    let obj = blob(128, 40.0, 40.0, 20.0, 28.0);
    let run = || forge(&img, &obj, &ForgeConfig::default(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.image, b.image);
    assert_eq!(a.mask, b.mask);
    assert_eq!((a.rotation_angle, a.scale_factor, a.target_origin), (b.rotation_angle, b.scale_factor, b.target_origin));
}

#[test]
fn disjoint_mask_is_about_twice_the_object_at_unit_scale() {
    let img = texture(192, 1.0);
    let obj = blob(192, 50.0, 50.0, 24.0, 32.0);
    let mut checked = 0;
    for seed in 0..20 {
        let rec = forge(&img, &obj, &ForgeConfig { scale_range: (1.0, 1.0), ..ForgeConfig::default() }, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        if !rec.disjoint {
            continue;
        }
        let ratio = rec.mask.count_positive() as f64 / rec.target_area as f64;
        assert!((1.5..=2.1).contains(&ratio), "seed {seed}: ratio {ratio}");
        assert_eq!(rec.mask.count_positive(), rec.source_area + rec.target_area);
        checked += 1;
    }
    assert!(checked >= 10);
}

/// The donor footprint pushed through rotation `angle` (counter-clockwise)
/// and `scale` about its box centre, sampled at nearest pixels onto the
/// enclosing canvas.
fn reference_footprint(donor: &[bool], h: usize, w: usize, angle: f64, scale: f64) -> (Vec<bool>, usize, usize) {
    let t = angle.to_radians();
    let corners = [(0.0, 0.0), (0.0, w as f64), (h as f64, 0.0), (h as f64, w as f64)];
    let rotated: Vec<(f64, f64)> = corners
        .iter()
        .map(|&(y, x)| {
            let (y, x) = (y - h as f64 / 2.0, x - w as f64 / 2.0);
            (scale * (-x * t.sin() + y * t.cos()), scale * (x * t.cos() + y * t.sin()))
        })
        .collect();
    let span = |f: fn(&(f64, f64)) -> f64| {
        let v: Vec<f64> = rotated.iter().map(f).collect();
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    };
    let (oh, ow) = (span(|p| p.0).ceil() as usize, span(|p| p.1).ceil() as usize);
    let mut out = vec![false; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let (y, x) = (r as f64 + 0.5 - oh as f64 / 2.0, c as f64 + 0.5 - ow as f64 / 2.0);
            // Inverse of the forward map above.
            let sx = (x * t.cos() - y * t.sin()) / scale + w as f64 / 2.0;
            let sy = (x * t.sin() + y * t.cos()) / scale + h as f64 / 2.0;
            if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
                out[r * ow + c] = donor[sy as usize * w + sx as usize];
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn shape_decoupled_target_matches_independently_transformed_boundary() {
    let content = texture(256, 2.0);
    let donor = blob(256, 120.0, 100.0, 30.0, 40.0);
    let (r0, r1, c0, c1) = bbox(&donor);
    let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
    let donor_bits: Vec<bool> = (0..h * w).map(|k| donor.get(r0 + k / w, c0 + k % w) >= 0.5).collect();
    let mut checked = 0;
    for (seed, (angle, scale)) in [(30.0, 1.0), (37.0, 1.1), (200.0, 0.85), (300.0, 1.2)].into_iter().enumerate() {
        let cfg = ForgeConfig::fixed(angle, scale);
        let rec = forge_shape_decoupled(&donor, &content, &cfg, &mut ChaCha8Rng::seed_from_u64(seed as u64)).unwrap();
        assert!(rec.shape_decoupled);
        if !rec.disjoint {
            continue;
        }
        let (expected, oh, ow) = reference_footprint(&donor_bits, h, w, angle, scale);
        let (sy, sx) = rec.source_origin;
        let (ty, tx) = rec.target_origin;
        let in_source = |y: usize, x: usize| {
            y >= sy && x >= sx && y < sy + h && x < sx + w && donor_bits[(y - sy) * w + (x - sx)]
        };
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..256 {
            for x in 0..256 {
                let got = rec.mask.get(y, x) >= 0.5 && !in_source(y, x);
                let want = y >= ty && x >= tx && y < ty + oh && x < tx + ow && expected[(y - ty) * ow + (x - tx)];
                inter += (got && want) as usize;
                union += (got || want) as usize;
            }
        }
        let iou = inter as f64 / union as f64;
        assert!(iou >= 0.95, "angle {angle} scale {scale}: IoU {iou}");
        checked += 1;
    }
    assert!(checked >= 3);
}

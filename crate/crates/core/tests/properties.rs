use approx::abs_diff_eq;
use msn::decoder::{upsample_to_mask, ProbabilityGrid};
use msn::detector::postprocess;
use msn::detector::PostprocessConfig;
use msn::encoder::FeatureMap;
use msn::evalharness::pixel_metrics;
use msn::forgegen::direction_bin;
use msn::imaging::{map_mask_back, rotate_mask, GeomTransform, Mask, Rotation};
use msn::similarity::{neighborhood_stack, reshape_to_maps, similarity_matrix, Side};
use proptest::prelude::*;

fn features(grid: usize, dim: usize) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-1.0f32..1.0, grid * grid * dim).prop_map(move |v| FeatureMap::new(grid, dim, v).unwrap())
}

fn mask(n: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), n * n).prop_map(move |b| Mask::from_bools(n, n, &b))
}

proptest! {
    #[test]
    fn normalize_is_idempotent(f in (1usize..6, 1usize..10).prop_flat_map(|(g, d)| features(g, d))) {
        let once = f.normalize();
        let twice = once.normalize();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!(abs_diff_eq!(a, b, epsilon = 1e-6));
        }
        for i in 0..f.grid() {
            for j in 0..f.grid() {
                let norm: f32 = once.cell(i, j).iter().map(|v| v * v).sum::<f32>().sqrt();
                prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn self_similarity_is_symmetric_with_unit_peaks(f in (1usize..6, 2usize..10).prop_flat_map(|(g, d)| features(g, d))) {
        let f = f.normalize();
        let s = similarity_matrix(&f, &f, 1.0).unwrap();
        let n = s.cells();
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(s.get(a, b), s.get(b, a));
                prop_assert!((-1.0 - 1e-5..=1.0 + 1e-5).contains(&s.get(a, b)));
            }
        }
        let maps = reshape_to_maps(&s, Side::Rows);
        let g = f.grid();
        for i in 0..g {
            for j in 0..g {
                let map = maps.map(i, j);
                let own = map[i * g + j];
                if f.cell(i, j).iter().any(|&v| v != 0.0) {
                    prop_assert!((own - 1.0).abs() < 1e-5);
                    prop_assert!(map.iter().all(|&v| v <= own + 1e-6));
                }
            }
        }
    }

    #[test]
    fn rows_and_cols_sides_are_transposes(
        (fa, fb) in (1usize..5, 1usize..8).prop_flat_map(|(g, d)| (features(g, d), features(g, d)))
    ) {
        let (fa, fb) = (fa.normalize(), fb.normalize());
        let s = similarity_matrix(&fa, &fb, 1.0).unwrap();
        let rows = reshape_to_maps(&s, Side::Rows);
        let cols = reshape_to_maps(&s, Side::Cols);
        let g = fa.grid();
        for a in 0..g * g {
            for b in 0..g * g {
                prop_assert_eq!(rows.map(a / g, a % g)[b], cols.map(b / g, b % g)[a]);
            }
        }
        let stack = neighborhood_stack(&rows, 0, 0).unwrap();
        prop_assert_eq!(stack.len(), 9 * g * g);
    }

    #[test]
    fn rotation_inverse_restores_masks(m in (1usize..20).prop_flat_map(mask), turns in 0i64..4) {
        let r = Rotation::from_quarter_turns(turns);
        let back = map_mask_back(&rotate_mask(&m, r).unwrap(), GeomTransform::Rotation(r), m.height()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn pixel_f1_matches_count_formula((p, g) in (1usize..24).prop_flat_map(|n| (mask(n), mask(n)))) {
        let tp = p.bits().iter().zip(g.bits()).filter(|(a, b)| **a && *b).count();
        let fp = p.bits().iter().zip(g.bits()).filter(|(a, b)| **a && !*b).count();
        let fn_ = p.bits().iter().zip(g.bits()).filter(|(a, b)| !**a && *b).count();
        match pixel_metrics(&p, &g).unwrap() {
            None => prop_assert_eq!(tp + fn_, 0),
            Some(m) => {
                let f = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
                prop_assert!((m.f1 - f).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&m.f1));
            }
        }
    }

    #[test]
    fn direction_bins_are_half_open_quarters(angle in -720.0f64..720.0) {
        let bin = direction_bin(angle);
        let centre = bin.degrees() as f64;
        let offset = (angle - centre + 180.0).rem_euclid(360.0) - 180.0;
        prop_assert!((-45.0..45.0).contains(&offset), "angle {angle} landed in {bin}");
    }

    #[test]
    fn constant_grids_upsample_to_constants(v in 0.0f32..=1.0, grid in 1usize..6, k in 1usize..5) {
        let g = ProbabilityGrid::new(grid, vec![v; grid * grid], GeomTransform::IDENTITY).unwrap();
        let m = upsample_to_mask(&g, grid * k).unwrap();
        prop_assert!(m.data().iter().all(|&x| (x - v).abs() < 1e-6));
    }

    #[test]
    fn postprocess_output_is_a_binary_subset_of_the_threshold(m in (8usize..40).prop_flat_map(|n| {
        prop::collection::vec(0.0f32..1.0, n * n).prop_map(move |v| Mask::new(n, n, v).unwrap())
    })) {
        let post = PostprocessConfig { min_component_fraction: 0.01, ..PostprocessConfig::default() };
        let (binary, areas, verdict) = postprocess(&m, &post);
        prop_assert!(binary.is_binary());
        let raw = m.threshold(post.threshold).bits();
        prop_assert!(binary.bits().iter().zip(&raw).all(|(b, r)| !*b || *r));
        prop_assert_eq!(areas.iter().sum::<usize>(), binary.count_positive());
        let area = (m.height() * m.width()) as f64;
        prop_assert_eq!(verdict, binary.count_positive() as f64 > post.verdict_fraction * area);
    }
}

#[test]
fn direction_bin_boundaries() {
    assert_eq!(direction_bin(44.999), Rotation::R0);
    assert_eq!(direction_bin(45.0), Rotation::R90);
    assert_eq!(direction_bin(-45.0), Rotation::R0);
    assert_eq!(direction_bin(-45.001), Rotation::R270);
    assert_eq!(direction_bin(315.0), Rotation::R0);
    assert_eq!(direction_bin(225.0), Rotation::R270);
}

use flim_core::markers::{
    extract_patches, load_markers, rasterize_strokes, save_markers, MarkerPixel, MarkerSet, Stroke,
};
use flim_core::Raster;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_raster(rng: &mut ChaCha8Rng, h: usize, w: usize, m: usize) -> Raster {
    Raster::from_fn(h, w, m, |_, _, _| rng.random_range(-1.0..1.0))
}

#[test]
fn interior_patch_equals_direct_indexing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rep = random_raster(&mut rng, 9, 11, 2);
    let markers = MarkerSet::new("r", 11, 9, [MarkerPixel { x: 6, y: 4, label: 1 }]).unwrap();
    let sets = extract_patches(&rep, &markers, 3).unwrap();
    let patch = &sets.class(1)[0];
    let mut oracle = Vec::new();
    for y in 3..=5 {
        for x in 5..=7 {
            for b in 0..2 {
                oracle.push(rep.data()[(y * 11 + x) * 2 + b]);
            }
        }
    }
    assert_eq!(patch.values, oracle);
}

#[test]
fn patch_center_is_the_marked_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rep = random_raster(&mut rng, 8, 8, 3);
    let pixels: Vec<MarkerPixel> = (0..8)
        .map(|i| MarkerPixel { x: i, y: (i * 3) % 8, label: 1 + (i % 2) as u16 })
        .collect();
    let markers = MarkerSet::new("r", 8, 8, pixels).unwrap();
    for k in [1, 3, 5, 7] {
        let sets = extract_patches(&rep, &markers, k).unwrap();
        let c = (k - 1) / 2;
        for p in sets.iter() {
            let off = (c * k + c) * 3;
            let (x, y) = (p.source.x as usize, p.source.y as usize);
            assert_eq!(&p.values[off..off + 3], rep.pixel(y, x));
        }
    }
}

#[test]
fn patch_count_equals_marker_count_over_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let strokes_a = [
        Stroke { id: 1, points: vec![[1.0, 1.0], [8.0, 1.0]], radius: 0.0, label: 1 },
        Stroke { id: 2, points: vec![[5.0, 6.0]], radius: 2.0, label: 2 },
    ];
    let strokes_b = [Stroke { id: 1, points: vec![[0.0, 9.0], [9.0, 0.0]], radius: 1.0, label: 2 }];
    let ma = rasterize_strokes("a", &strokes_a, 10, 10).unwrap();
    let mb = rasterize_strokes("b", &strokes_b, 10, 10).unwrap();
    let mut total = 0;
    let mut per_class = [0usize; 2];
    for m in [&ma, &mb] {
        let rep = random_raster(&mut rng, 10, 10, 1);
        let sets = extract_patches(&rep, m, 3).unwrap();
        total += sets.total();
        per_class[0] += sets.class(1).len();
        per_class[1] += sets.class(2).len();
    }
    assert_eq!(total, ma.len() + mb.len());
    let counts = |l| ma.counts().get(&l).copied().unwrap_or(0) + mb.counts().get(&l).copied().unwrap_or(0);
    assert_eq!(per_class, [counts(1), counts(2)]);
}

#[test]
fn out_of_bounds_file_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tsv");
    let m = MarkerSet::new("img", 20, 20, [MarkerPixel { x: 15, y: 2, label: 1 }]).unwrap();
    save_markers(&path, &m).unwrap();
    let loaded = load_markers(&path).unwrap();
    assert!(loaded.validate_against(20, 20).is_ok());
    assert!(loaded.validate_against(10, 10).is_err());
}

fn marker_sets() -> impl Strategy<Value = MarkerSet> {
    (1u32..40, 1u32..40)
        .prop_flat_map(|(w, h)| {
            (
                Just(w),
                Just(h),
                proptest::collection::btree_map((0..w, 0..h), 1u16..5, 0..60),
            )
        })
        .prop_map(|(w, h, px)| {
            MarkerSet::new(
                "prop_img",
                w,
                h,
                px.into_iter().map(|((x, y), label)| MarkerPixel { x, y, label }),
            )
            .unwrap()
        })
}

proptest! {
    #[test]
    fn save_load_round_trip(m in marker_sets()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        save_markers(&path, &m).unwrap();
        prop_assert_eq!(load_markers(&path).unwrap(), m);
    }

    #[test]
    fn rasterized_pixels_lie_within_radius(
        x0 in -5.0f64..25.0, y0 in -5.0f64..25.0,
        x1 in -5.0f64..25.0, y1 in -5.0f64..25.0,
        r in 0.0f64..3.0,
    ) {
        let stroke = Stroke { id: 1, points: vec![[x0, y0], [x1, y1]], radius: r, label: 1 };
        let reach = r.max(0.5);
        let dist = |px: f64, py: f64| {
            let (dx, dy) = (x1 - x0, y1 - y0);
            let len2 = dx * dx + dy * dy;
            let t = if len2 == 0.0 { 0.0 } else { (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0) };
            (px - x0 - t * dx).powi(2) + (py - y0 - t * dy).powi(2)
        };
        match rasterize_strokes("s", &[stroke], 20, 20) {
            Ok(m) => {
                let mut expected = 0;
                for y in 0..20 {
                    for x in 0..20 {
                        if dist(x as f64, y as f64) <= reach * reach + 1e-9 {
                            expected += 1;
                        }
                    }
                }
                prop_assert_eq!(m.len(), expected);
            }
            Err(_) => {
                let any = (0..20).any(|y| (0..20).any(|x| dist(x as f64, y as f64) <= reach * reach + 1e-9));
                prop_assert!(!any);
            }
        }
    }
}

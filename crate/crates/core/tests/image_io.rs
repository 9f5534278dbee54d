use std::fs;
use std::path::Path;

use flim_core::image_io::{load_dataset, load_image, rgb_to_lab, BandRanges, MANIFEST_FILE};
use flim_core::FlimError;

const LAB_TOL: f64 = 1e-3;

fn reference_colors() -> Vec<([u8; 3], [f64; 3])> {
    include_str!("data/lab_reference.tsv")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let rgb = [f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap()];
            let lab = [f[3].parse().unwrap(), f[4].parse().unwrap(), f[5].parse().unwrap()];
            (rgb, lab)
        })
        .collect()
}

#[test]
fn lab_matches_reference_grid() {
    let colors = reference_colors();
    assert_eq!(colors.len(), 100);
    for (rgb, want) in colors {
        let got = rgb_to_lab(rgb);
        for c in 0..3 {
            assert!(
                (got[c] - want[c]).abs() <= LAB_TOL,
                "{rgb:?}: channel {c} got {} want {}",
                got[c],
                want[c]
            );
        }
    }
}

fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)))
        .save(path)
        .unwrap();
}

#[test]
fn load_image_shape_and_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grad.png");
    write_png(&path, 7, 5, |x, y| [(x * 36) as u8, (y * 60) as u8, 255]);
    let img = load_image(&path, &BandRanges::default()).unwrap();
    assert_eq!(img.id, "grad");
    assert_eq!((img.height(), img.width(), img.bands()), (5, 7, 3));
    assert!(img.raster.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let white = dir.path().join("white.png");
    write_png(&white, 2, 2, |_, _| [255, 255, 255]);
    let img = load_image(&white, &BandRanges::default()).unwrap();
    let px = img.raster.pixel(1, 1);
    assert!((px[0] - 1.0).abs() < 1e-6);
    assert!((px[1] - 128.0 / 255.0).abs() < 1e-5);
    assert!((px[2] - 128.0 / 255.0).abs() < 1e-5);
}

#[test]
fn unsupported_formats_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bmp = dir.path().join("x.bmp");
    fs::write(&bmp, b"BM not really a bitmap").unwrap();
    assert!(matches!(load_image(&bmp, &BandRanges::default()), Err(FlimError::Format(_))));

    let gray = dir.path().join("gray.png");
    image::GrayImage::from_pixel(3, 3, image::Luma([10])).save(&gray).unwrap();
    assert!(matches!(load_image(&gray, &BandRanges::default()), Err(FlimError::Format(_))));
}

#[test]
fn directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("1/a.png"), 4, 4, |_, _| [1, 2, 3]);
    write_png(&dir.path().join("2/b.png"), 4, 4, |_, _| [4, 5, 6]);
    let index = load_dataset(dir.path()).unwrap();
    assert_eq!(index.entries.len(), 2);
    assert_eq!(index.classes, 2);
    assert_eq!(index.get("b").unwrap().label, 2);
}

#[test]
fn empty_directory_is_a_layout_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(FlimError::Layout(_))));
}

#[test]
fn manifest_with_conflicting_duplicate() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("img/a.png"), 4, 4, |_, _| [0, 0, 0]);
    write_png(&dir.path().join("img/b.png"), 4, 4, |_, _| [0, 0, 0]);
    fs::write(
        dir.path().join(MANIFEST_FILE),
        "a\timg/a.png\t1\nb\timg/b.png\t2\na\timg/b.png\t2\n",
    )
    .unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(FlimError::DuplicateId(_))));

    fs::write(dir.path().join(MANIFEST_FILE), "a\timg/a.png\t1\nb\timg/b.png\t2\n").unwrap();
    let index = load_dataset(dir.path()).unwrap();
    let images = index
        .load_images(&["a".to_string(), "b".to_string()], &BandRanges::default())
        .unwrap();
    assert_eq!(images.len(), 2);
}

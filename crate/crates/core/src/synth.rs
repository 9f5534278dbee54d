//! Seeded two-class texture tiles with scripted markers.
//!
//! Class 1 tiles carry oriented stripes, class 2 tiles carry round blobs. Both
//! classes share jittered foreground and background colors.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FlimError, Result};
use crate::image_io::{BandRanges, Image};
use crate::markers::{rasterize_strokes, save_markers, MarkerSet, Stroke};
use crate::seed::derive_seed;

pub const STRIPES: u16 = 1;
pub const BLOBS: u16 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub id: String,
    pub label: u16,
    pub size: usize,
    /// Interleaved 8-bit RGB.
    pub rgb: Vec<u8>,
    /// Strokes a user would draw on this tile.
    pub strokes: Vec<Stroke>,
}

impl Tile {
    pub fn image(&self) -> Image {
        Image::from_rgb8(self.id.clone(), self.size, self.size, &self.rgb, &BandRanges::default())
            .expect("tile buffer matches its size")
    }

    pub fn markers(&self) -> MarkerSet {
        rasterize_strokes(self.id.clone(), &self.strokes, self.size as u32, self.size as u32)
            .expect("scripted strokes hit the tile")
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.size as u32, self.size as u32, self.rgb.clone())
            .expect("tile buffer matches its size");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| FlimError::io(path, std::io::Error::other(e.to_string())))
    }
}

fn jittered(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    base.map(|v| v + rng.random_range(-15.0..15.0))
}

const BACKGROUND: [f64; 3] = [60.0, 85.0, 50.0];
const FOREGROUND: [f64; 3] = [175.0, 160.0, 110.0];

/// Generates one tile of class `label` deterministically from `seed`.
pub fn tile(id: impl Into<String>, label: u16, size: usize, seed: u64) -> Tile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = jittered(&mut rng, BACKGROUND);
    let fg = jittered(&mut rng, FOREGROUND);
    let s = size as f64;
    let center = (s - 1.0) / 2.0;
    let mut strokes = Vec::new();
    let intensity: Box<dyn Fn(f64, f64) -> f64> = match label {
        STRIPES => {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(6.0..10.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let (c, sn) = (theta.cos(), theta.sin());
            // a stroke across the stripes, through the tile center
            let half = s * 0.3;
            strokes.push(Stroke {
                id: 1,
                points: vec![
                    [center - half * c, center - half * sn],
                    [center + half * c, center + half * sn],
                ],
                radius: 1.0,
                label: STRIPES,
            });
            Box::new(move |x: f64, y: f64| {
                0.5 + 0.5 * ((x * c + y * sn) * std::f64::consts::TAU / period + phase).sin()
            })
        }
        _ => {
            let n = rng.random_range(4..8);
            let blobs: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.random_range(6.0..s - 6.0),
                        rng.random_range(6.0..s - 6.0),
                        rng.random_range(3.0..6.0),
                    )
                })
                .collect();
            for (i, &(bx, by, _)) in blobs.iter().take(3).enumerate() {
                strokes.push(Stroke {
                    id: i as u32 + 1,
                    points: vec![[bx.round(), by.round()]],
                    radius: 2.0,
                    label: BLOBS,
                });
            }
            Box::new(move |x: f64, y: f64| {
                blobs
                    .iter()
                    .map(|&(bx, by, r)| (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * r * r)).exp())
                    .fold(0.0, f64::max)
            })
        }
    };
    let mut rgb = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let v = intensity(x as f64, y as f64);
            for ch in 0..3 {
                let noise = rng.random_range(-12.0..12.0);
                let val = bg[ch] * (1.0 - v) + fg[ch] * v + noise;
                rgb.push(val.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Tile {
        id: id.into(),
        label,
        size,
        rgb,
        strokes,
    }
}

/// `per_class` tiles of each class, alternating classes, ids `{prefix}{index:04}`.
pub fn tiles(prefix: &str, per_class: usize, size: usize, seed: u64) -> Vec<Tile> {
    (0..2 * per_class)
        .map(|i| {
            let label = if i % 2 == 0 { STRIPES } else { BLOBS };
            tile(format!("{prefix}{i:04}"), label, size, derive_seed(seed, i as u64))
        })
        .collect()
}

/// Writes `tiles` as `<root>/<label>/<id>.png` plus, for the first
/// `marked_per_class` tiles of each class, `<root>/markers/<id>.tsv`.
pub fn write_dataset(root: &Path, tiles: &[Tile], marked_per_class: usize) -> Result<Vec<String>> {
    let markers_dir = root.join("markers");
    fs::create_dir_all(&markers_dir).map_err(|e| FlimError::io(&markers_dir, e))?;
    let mut marked = Vec::new();
    let mut per_class = [0usize; 2];
    for t in tiles {
        let dir = root.join(t.label.to_string());
        fs::create_dir_all(&dir).map_err(|e| FlimError::io(&dir, e))?;
        t.write_png(&dir.join(format!("{}.png", t.id)))?;
        let slot = &mut per_class[usize::from(t.label) - 1];
        if *slot < marked_per_class {
            *slot += 1;
            save_markers(&markers_dir.join(format!("{}.tsv", t.id)), &t.markers())?;
            marked.push(t.id.clone());
        }
    }
    Ok(marked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_are_deterministic_and_marked() {
        let a = tile("a", STRIPES, 32, 7);
        assert_eq!(a, tile("a", STRIPES, 32, 7));
        assert_ne!(a.rgb, tile("a", STRIPES, 32, 8).rgb);
        assert!(a.markers().counts()[&STRIPES] > 10);
        let b = tile("b", BLOBS, 32, 7);
        assert_eq!(b.markers().max_label(), BLOBS);
    }
}

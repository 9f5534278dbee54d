//! Image loading, sRGB to CIE L\*a\*b\* conversion and dataset indexing.
//!
//! Every raw image is converted to L\*a\*b\* (D65, sRGB companding) and each
//! band is mapped affinely to `[0, 1]` with fixed ranges, so marker statistics
//! are comparable across images.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result};
use crate::raster::Raster;

/// sRGB (linear) to XYZ matrix, IEC 61966-2-1.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// D65 reference white as the image of sRGB white under [`SRGB_TO_XYZ`].
const WHITE: [f64; 3] = [
    SRGB_TO_XYZ[0][0] + SRGB_TO_XYZ[0][1] + SRGB_TO_XYZ[0][2],
    SRGB_TO_XYZ[1][0] + SRGB_TO_XYZ[1][1] + SRGB_TO_XYZ[1][2],
    SRGB_TO_XYZ[2][0] + SRGB_TO_XYZ[2][1] + SRGB_TO_XYZ[2][2],
];

#[inline]
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts an 8-bit sRGB triple to CIE L\*a\*b\* under D65.
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(f64::from(c) / 255.0));
    let mut f = [0.0; 3];
    for (i, row) in SRGB_TO_XYZ.iter().enumerate() {
        let v = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = lab_f(v / WHITE[i]);
    }
    [
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    ]
}

/// Per-band affine ranges used to map L\*a\*b\* values into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRanges {
    pub ranges: [(f64, f64); 3],
}

impl Default for BandRanges {
    fn default() -> Self {
        BandRanges {
            ranges: [(0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0)],
        }
    }
}

impl BandRanges {
    /// Maps Lab values into `[0, 1]`, clamping anything outside the ranges.
    pub fn normalize(&self, lab: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, (lo, hi)) in self.ranges.iter().enumerate() {
            out[i] = ((lab[i] - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
        out
    }

    pub fn denormalize(&self, unit: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, (lo, hi)) in self.ranges.iter().enumerate() {
            out[i] = lo + unit[i] * (hi - lo);
        }
        out
    }
}

/// A normalized L\*a\*b\* image (or any `[0, 1]` multi-band raster).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: String,
    pub raster: Raster,
}

impl Image {
    pub fn height(&self) -> usize {
        self.raster.height()
    }

    pub fn width(&self) -> usize {
        self.raster.width()
    }

    pub fn bands(&self) -> usize {
        self.raster.bands()
    }

    /// Builds an image from interleaved 8-bit RGB samples.
    pub fn from_rgb8(
        id: impl Into<String>,
        width: usize,
        height: usize,
        rgb: &[u8],
        ranges: &BandRanges,
    ) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(FlimError::Format(format!(
                "expected {} RGB bytes, got {}",
                width * height * 3,
                rgb.len()
            )));
        }
        let mut data = Vec::with_capacity(rgb.len());
        for px in rgb.chunks_exact(3) {
            let lab = ranges.normalize(rgb_to_lab([px[0], px[1], px[2]]));
            data.extend(lab.iter().map(|&v| v as f32));
        }
        Ok(Image {
            id: id.into(),
            raster: Raster::from_vec(height, width, 3, data)?,
        })
    }

    /// Flattened `(y, x, band)` values, the input-space vector used for projection.
    pub fn to_vector(&self) -> Vec<f32> {
        self.raster.data().to_vec()
    }
}

fn image_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Decodes an 8-bit RGB PNG or JPEG and converts it to a normalized Lab image.
pub fn load_image(path: &Path, ranges: &BandRanges) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| FlimError::io(path, e))?;
    decode_image(image_id_from_path(path), &bytes, ranges)
}

/// Decodes in-memory PNG/JPEG bytes; see [`load_image`].
pub fn decode_image(id: impl Into<String>, bytes: &[u8], ranges: &BandRanges) -> Result<Image> {
    let format = image::guess_format(bytes)
        .map_err(|e| FlimError::Format(format!("unrecognized image data: {e}")))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(FlimError::Format(format!(
            "{format:?} is not an accepted input format (PNG or JPEG only)"
        )));
    }
    let decoded = image::load_from_memory_with_format(bytes, format).map_err(|e| {
        FlimError::Io {
            path: PathBuf::new(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
        }
    })?;
    match decoded {
        image::DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            Image::from_rgb8(id, w as usize, h as usize, buf.as_raw(), ranges)
        }
        other => Err(FlimError::Format(format!(
            "expected a 3-channel 8-bit raster, got {:?}",
            other.color()
        ))),
    }
}

/// One dataset image with its 1-based class label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub classes: u16,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

fn is_accepted_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

impl DatasetIndex {
    fn from_entries(root: PathBuf, entries: Vec<DatasetEntry>) -> Result<Self> {
        let mut by_id: BTreeMap<String, DatasetEntry> = BTreeMap::new();
        for entry in entries {
            if entry.label == 0 {
                return Err(FlimError::Layout(format!(
                    "image `{}` has label 0; labels are 1-based",
                    entry.id
                )));
            }
            match by_id.get(&entry.id) {
                Some(prev) if *prev != entry => return Err(FlimError::DuplicateId(entry.id)),
                Some(_) => {}
                None => {
                    by_id.insert(entry.id.clone(), entry);
                }
            }
        }
        let classes = by_id.values().map(|e| e.label).max().unwrap_or(0);
        let distinct: std::collections::BTreeSet<u16> = by_id.values().map(|e| e.label).collect();
        if distinct.len() < 2 {
            return Err(FlimError::Layout(format!(
                "found {} class(es) under {}; at least 2 are required",
                distinct.len(),
                root.display()
            )));
        }
        Ok(DatasetIndex {
            root,
            entries: by_id.into_values().collect(),
            classes,
        })
    }

    pub fn get(&self, id: &str) -> Option<&DatasetEntry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// Loads the listed images in parallel, preserving order.
    pub fn load_images(&self, ids: &[String], ranges: &BandRanges) -> Result<Vec<Image>> {
        ids.par_iter()
            .map(|id| {
                let entry = self
                    .get(id)
                    .ok_or_else(|| FlimError::Layout(format!("unknown image id `{id}`")))?;
                let mut img = load_image(&entry.path, ranges)?;
                img.id = entry.id.clone();
                Ok(img)
            })
            .collect()
    }
}

/// Indexes a dataset directory.
///
/// `<root>/manifest.tsv` (`id<TAB>path<TAB>label`, paths relative to the root)
/// takes precedence; otherwise every `<root>/<label>/<id>.png|jpg` is indexed.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    let manifest = root.join(MANIFEST_FILE);
    if manifest.is_file() {
        return load_manifest(root, &manifest);
    }
    let dir = fs::read_dir(root).map_err(|e| FlimError::io(root, e))?;
    let mut entries = Vec::new();
    for class_dir in dir {
        let class_dir = class_dir.map_err(|e| FlimError::io(root, e))?;
        let path = class_dir.path();
        if !path.is_dir() {
            continue;
        }
        let Some(label) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse::<u16>().ok())
            .filter(|&l| l > 0)
        else {
            continue;
        };
        for file in fs::read_dir(&path).map_err(|e| FlimError::io(&path, e))? {
            let file = file.map_err(|e| FlimError::io(&path, e))?.path();
            if file.is_file() && is_accepted_image(&file) {
                let id = image_id_from_path(&file);
                let entry = DatasetEntry {
                    id: id.clone(),
                    path: file,
                    label,
                };
                if entries.iter().any(|e: &DatasetEntry| e.id == id) {
                    return Err(FlimError::DuplicateId(id));
                }
                entries.push(entry);
            }
        }
    }
    if entries.is_empty() {
        return Err(FlimError::Layout(format!(
            "no class directories with images under {}",
            root.display()
        )));
    }
    DatasetIndex::from_entries(root.to_path_buf(), entries)
}

fn load_manifest(root: &Path, manifest: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(manifest).map_err(|e| FlimError::io(manifest, e))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(FlimError::Parse {
                line: n + 1,
                message: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let label = fields[2].trim().parse::<u16>().map_err(|e| FlimError::Parse {
            line: n + 1,
            message: format!("bad label `{}`: {e}", fields[2]),
        })?;
        entries.push(DatasetEntry {
            id: fields[0].to_string(),
            path: root.join(fields[1]),
            label,
        });
    }
    if entries.is_empty() {
        return Err(FlimError::Layout(format!("{} lists no images", manifest.display())));
    }
    DatasetIndex::from_entries(root.to_path_buf(), entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black_reference_points() {
        let w = rgb_to_lab([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 1e-3 && w[1].abs() < 1e-3 && w[2].abs() < 1e-3);
        let b = rgb_to_lab([0, 0, 0]);
        assert!(b.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn normalization_round_trip_and_clamp() {
        let r = BandRanges::default();
        for lab in [[50.0, 10.0, -20.0], [0.0, -128.0, 127.0], [99.9, 0.0, 0.0]] {
            let back = r.denormalize(r.normalize(lab));
            for i in 0..3 {
                assert!((back[i] - lab[i]).abs() < 1e-6);
            }
        }
        assert_eq!(r.normalize([120.0, -200.0, 300.0]), [1.0, 0.0, 1.0]);
    }

    #[test]
    fn white_and_black_pixels_map_to_unit_range() {
        let r = BandRanges::default();
        let img = Image::from_rgb8("t", 2, 1, &[255, 255, 255, 0, 0, 0], &r).unwrap();
        let w = img.raster.pixel(0, 0);
        assert!((w[0] - 1.0).abs() < 1e-6);
        assert!((w[1] - 128.0 / 255.0).abs() < 1e-5 && (w[2] - 128.0 / 255.0).abs() < 1e-5);
        let b = img.raster.pixel(0, 1);
        assert!(b[0].abs() < 1e-6);
        assert!((b[1] - 128.0 / 255.0).abs() < 1e-5);
    }

    #[test]
    fn rgb_buffer_length_is_checked() {
        let r = BandRanges::default();
        assert!(matches!(
            Image::from_rgb8("t", 2, 2, &[0; 5], &r),
            Err(FlimError::Format(_))
        ));
    }
}

//! User-drawn markers and the labeled patch sets extracted around them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result};
use crate::raster::Raster;

/// A labeled marker pixel; `label` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MarkerPixel {
    pub x: u32,
    pub y: u32,
    pub label: u16,
}

/// A brush stroke in image pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub id: u32,
    pub points: Vec<[f64; 2]>,
    pub radius: f64,
    pub label: u16,
}

/// Marker pixels of one image, sorted by `(y, x)` and free of duplicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSet {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pixels: Vec<MarkerPixel>,
    /// Stroke ids that produced the pixels, when rasterized from strokes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stroke_ids: Option<Vec<u32>>,
}

impl MarkerSet {
    /// Validates and canonicalizes a pixel list. Exact duplicates collapse;
    /// the same pixel with two labels is rejected.
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        pixels: impl IntoIterator<Item = MarkerPixel>,
    ) -> Result<Self> {
        let mut by_pos: BTreeMap<(u32, u32), u16> = BTreeMap::new();
        for p in pixels {
            if p.label == 0 {
                return Err(FlimError::InvalidMarkers(format!(
                    "pixel ({}, {}) has label 0; labels are 1-based",
                    p.x, p.y
                )));
            }
            if p.x >= width || p.y >= height {
                return Err(FlimError::InvalidMarkers(format!(
                    "pixel ({}, {}) outside a {width}x{height} image",
                    p.x, p.y
                )));
            }
            if let Some(prev) = by_pos.insert((p.y, p.x), p.label) {
                if prev != p.label {
                    return Err(FlimError::InvalidMarkers(format!(
                        "pixel ({}, {}) carries labels {prev} and {}",
                        p.x, p.y, p.label
                    )));
                }
            }
        }
        Ok(MarkerSet {
            image_id: image_id.into(),
            width,
            height,
            pixels: by_pos
                .into_iter()
                .map(|((y, x), label)| MarkerPixel { x, y, label })
                .collect(),
            stroke_ids: None,
        })
    }

    pub fn pixels(&self) -> &[MarkerPixel] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn max_label(&self) -> u16 {
        self.pixels.iter().map(|p| p.label).max().unwrap_or(0)
    }

    /// Marker pixel count per label.
    pub fn counts(&self) -> BTreeMap<u16, usize> {
        let mut counts = BTreeMap::new();
        for p in &self.pixels {
            *counts.entry(p.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn validate_against(&self, width: usize, height: usize) -> Result<()> {
        if self.width as usize != width || self.height as usize != height {
            return Err(FlimError::DimMismatch(format!(
                "markers for `{}` were drawn on a {}x{} image, representation is {width}x{height}",
                self.image_id, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Serializes to the `#flim-markers v1` text format.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#flim-markers v1 image={} width={} height={}\n",
            self.image_id, self.width, self.height
        );
        for p in &self.pixels {
            let _ = writeln!(out, "{}\t{}\t{}", p.x, p.y, p.label);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split('\n').enumerate();
        let (_, header) = lines.next().ok_or(FlimError::Parse {
            line: 1,
            message: "empty marker file".into(),
        })?;
        let (image_id, width, height) = parse_header(header.trim_end_matches('\r'))?;
        let mut seen: BTreeMap<(u32, u32), u16> = BTreeMap::new();
        for (n, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| FlimError::Parse {
                line: n + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!(
                    "expected `x<TAB>y<TAB>label`, found {} field(s)",
                    fields.len()
                )));
            }
            let x: u32 = fields[0]
                .parse()
                .map_err(|e| err(format!("column 1: bad x `{}`: {e}", fields[0])))?;
            let y: u32 = fields[1]
                .parse()
                .map_err(|e| err(format!("column 2: bad y `{}`: {e}", fields[1])))?;
            let label: u16 = fields[2]
                .parse()
                .map_err(|e| err(format!("column 3: bad label `{}`: {e}", fields[2])))?;
            if label == 0 {
                return Err(err("column 3: label 0 is invalid; labels are 1-based".into()));
            }
            if x >= width || y >= height {
                return Err(err(format!(
                    "pixel ({x}, {y}) outside the {width}x{height} image"
                )));
            }
            if let Some(prev) = seen.insert((y, x), label) {
                if prev != label {
                    return Err(err(format!(
                        "pixel ({x}, {y}) already has label {prev}"
                    )));
                }
            }
        }
        Ok(MarkerSet {
            image_id,
            width,
            height,
            pixels: seen
                .into_iter()
                .map(|((y, x), label)| MarkerPixel { x, y, label })
                .collect(),
            stroke_ids: None,
        })
    }
}

fn parse_header(line: &str) -> Result<(String, u32, u32)> {
    let err = |message: String| FlimError::Parse { line: 1, message };
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#flim-markers") || parts.next() != Some("v1") {
        return Err(err("missing `#flim-markers v1` header".into()));
    }
    let (mut id, mut width, mut height) = (None, None, None);
    for kv in parts {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| err(format!("malformed header field `{kv}`")))?;
        match key {
            "image" => id = Some(value.to_string()),
            "width" => {
                width = Some(value.parse().map_err(|e| err(format!("bad width: {e}")))?)
            }
            "height" => {
                height = Some(value.parse().map_err(|e| err(format!("bad height: {e}")))?)
            }
            _ => return Err(err(format!("unknown header field `{key}`"))),
        }
    }
    match (id, width, height) {
        (Some(id), Some(w), Some(h)) => Ok((id, w, h)),
        _ => Err(err("header needs image, width and height".into())),
    }
}

pub fn save_markers(path: &Path, markers: &MarkerSet) -> Result<()> {
    fs::write(path, markers.to_text()).map_err(|e| FlimError::io(path, e))
}

pub fn load_markers(path: &Path) -> Result<MarkerSet> {
    let text = fs::read_to_string(path).map_err(|e| FlimError::io(path, e))?;
    MarkerSet::parse(&text)
}

/// Squared distance from `(px, py)` to the segment `a..b`.
fn dist2_to_segment(px: f64, py: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    (px - cx).powi(2) + (py - cy).powi(2)
}

/// Rasterizes brush strokes into marker pixels.
///
/// A pixel belongs to a stroke when its center lies within `max(radius, 0.5)`
/// of the polyline, so radius-0 strokes produce 8-connected one-pixel lines.
/// Pixels outside the image are clipped. Later strokes overwrite earlier
/// labels.
pub fn rasterize_strokes(
    image_id: impl Into<String>,
    strokes: &[Stroke],
    width: u32,
    height: u32,
) -> Result<MarkerSet> {
    let mut labels: BTreeMap<(u32, u32), u16> = BTreeMap::new();
    let mut used = Vec::new();
    for stroke in strokes {
        if stroke.label == 0 {
            return Err(FlimError::InvalidMarkers(format!(
                "stroke {} has label 0; labels are 1-based",
                stroke.id
            )));
        }
        if stroke.points.is_empty() {
            continue;
        }
        let r = stroke.radius.max(0.5);
        let r2 = r * r;
        let segments: Vec<([f64; 2], [f64; 2])> = if stroke.points.len() == 1 {
            vec![(stroke.points[0], stroke.points[0])]
        } else {
            stroke.points.windows(2).map(|w| (w[0], w[1])).collect()
        };
        let mut touched = false;
        for (a, b) in segments {
            let x0 = (a[0].min(b[0]) - r).floor().max(0.0);
            let x1 = (a[0].max(b[0]) + r).ceil().min(f64::from(width) - 1.0);
            let y0 = (a[1].min(b[1]) - r).floor().max(0.0);
            let y1 = (a[1].max(b[1]) + r).ceil().min(f64::from(height) - 1.0);
            if x1 < x0 || y1 < y0 {
                continue;
            }
            for y in y0 as u32..=y1 as u32 {
                for x in x0 as u32..=x1 as u32 {
                    if dist2_to_segment(f64::from(x), f64::from(y), a, b) <= r2 + 1e-9 {
                        labels.insert((y, x), stroke.label);
                        touched = true;
                    }
                }
            }
        }
        if touched {
            used.push(stroke.id);
        }
    }
    if labels.is_empty() {
        return Err(FlimError::EmptyStroke);
    }
    Ok(MarkerSet {
        image_id: image_id.into(),
        width,
        height,
        pixels: labels
            .into_iter()
            .map(|((y, x), label)| MarkerPixel { x, y, label })
            .collect(),
        stroke_ids: Some(used),
    })
}

/// Where a patch was taken from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub image_id: String,
    pub x: u32,
    pub y: u32,
}

/// A `k x k x m` window, stored `(dy, dx, band)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Vec<f32>,
    pub label: u16,
    pub source: PatchSource,
}

/// Reads the zero-padded `k x k` window centered at `(y, x)` into `out`.
pub fn read_window(rep: &Raster, y: usize, x: usize, k: usize, out: &mut Vec<f32>) {
    let half = (k / 2) as isize;
    let bands = rep.bands();
    out.clear();
    for dy in -half..=half {
        let yy = y as isize + dy;
        for dx in -half..=half {
            let xx = x as isize + dx;
            if yy < 0 || xx < 0 || yy as usize >= rep.height() || xx as usize >= rep.width() {
                out.extend(std::iter::repeat_n(0.0, bands));
            } else {
                out.extend_from_slice(rep.pixel(yy as usize, xx as usize));
            }
        }
    }
}

pub(crate) fn check_patch_size(k: usize, height: usize, width: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) || k > 2 * height.min(width) {
        return Err(FlimError::BadPatchSize { k, height, width });
    }
    Ok(())
}

/// Per-class patch sets; `classes[i]` holds the patches labeled `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSets {
    pub k: usize,
    pub bands: usize,
    classes: Vec<Vec<Patch>>,
}

impl PatchSets {
    pub fn new(k: usize, bands: usize) -> Self {
        PatchSets {
            k,
            bands,
            classes: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.k * self.k * self.bands
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Patches of 1-based class `label`.
    pub fn class(&self, label: u16) -> &[Patch] {
        self.classes
            .get(usize::from(label).wrapping_sub(1))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Patch> + Clone {
        self.classes.iter().flatten()
    }

    pub fn push(&mut self, patch: Patch) -> Result<()> {
        if patch.values.len() != self.dim() {
            return Err(FlimError::DimMismatch(format!(
                "patch of {} values in a set of {}x{}x{} patches",
                patch.values.len(),
                self.k,
                self.k,
                self.bands
            )));
        }
        let idx = usize::from(patch.label)
            .checked_sub(1)
            .ok_or_else(|| FlimError::InvalidMarkers("patch label 0".into()))?;
        if self.classes.len() <= idx {
            self.classes.resize_with(idx + 1, Vec::new);
        }
        self.classes[idx].push(patch);
        Ok(())
    }

    /// Merges another image's patch sets into this one.
    pub fn extend(&mut self, other: PatchSets) -> Result<()> {
        if other.k != self.k || other.bands != self.bands {
            return Err(FlimError::DimMismatch(format!(
                "cannot merge {}x{}x{} patches into {}x{}x{}",
                other.k, other.k, other.bands, self.k, self.k, self.bands
            )));
        }
        for patch in other.classes.into_iter().flatten() {
            self.push(patch)?;
        }
        Ok(())
    }
}

/// Extracts one zero-padded `k x k` patch per marker pixel, grouped by label.
pub fn extract_patches(rep: &Raster, markers: &MarkerSet, k: usize) -> Result<PatchSets> {
    check_patch_size(k, rep.height(), rep.width())?;
    markers.validate_against(rep.width(), rep.height())?;
    let mut sets = PatchSets::new(k, rep.bands());
    let mut buf = Vec::with_capacity(k * k * rep.bands());
    for p in markers.pixels() {
        read_window(rep, p.y as usize, p.x as usize, k, &mut buf);
        sets.push(Patch {
            values: buf.clone(),
            label: p.label,
            source: PatchSource {
                image_id: markers.image_id.clone(),
                x: p.x,
                y: p.y,
            },
        })?;
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(x: u32, y: u32, label: u16) -> MarkerPixel {
        MarkerPixel { x, y, label }
    }

    fn stroke(points: &[[f64; 2]], radius: f64, label: u16) -> Stroke {
        Stroke {
            id: 0,
            points: points.to_vec(),
            radius,
            label,
        }
    }

    #[test]
    fn single_point_radius_zero_is_one_pixel() {
        let m = rasterize_strokes("a", &[stroke(&[[3.0, 4.0]], 0.0, 1)], 10, 10).unwrap();
        assert_eq!(m.pixels(), &[px(3, 4, 1)]);
    }

    #[test]
    fn horizontal_segment_radius_zero() {
        let m = rasterize_strokes("a", &[stroke(&[[2.0, 5.0], [4.0, 5.0]], 0.0, 2)], 10, 10)
            .unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.pixels().iter().all(|p| p.y == 5 && p.label == 2));
    }

    #[test]
    fn disc_matches_brute_force_scan() {
        let m = rasterize_strokes("a", &[stroke(&[[5.0, 5.0]], 2.0, 1)], 10, 10).unwrap();
        let mut brute = 0;
        for y in 0..10i32 {
            for x in 0..10i32 {
                if (x - 5).pow(2) + (y - 5).pow(2) <= 4 {
                    brute += 1;
                }
            }
        }
        assert_eq!(m.len(), brute);
    }

    #[test]
    fn later_strokes_win_and_off_image_is_clipped() {
        let strokes = [
            Stroke {
                id: 1,
                points: vec![[0.0, 0.0], [3.0, 0.0]],
                radius: 0.0,
                label: 1,
            },
            Stroke {
                id: 2,
                points: vec![[1.0, 0.0]],
                radius: 0.0,
                label: 2,
            },
        ];
        let m = rasterize_strokes("a", &strokes, 3, 3).unwrap();
        assert_eq!(m.pixels(), &[px(0, 0, 1), px(1, 0, 2), px(2, 0, 1)]);
        assert_eq!(m.stroke_ids, Some(vec![1, 2]));
        assert!(matches!(
            rasterize_strokes("a", &[stroke(&[[50.0, 50.0]], 1.0, 1)], 3, 3),
            Err(FlimError::EmptyStroke)
        ));
    }

    #[test]
    fn marker_text_round_trip() {
        let m = MarkerSet::new("img_7", 8, 6, [px(1, 2, 1), px(7, 5, 2), px(0, 0, 1)]).unwrap();
        assert_eq!(MarkerSet::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn parse_rejects_label_zero_and_out_of_bounds() {
        let zero = "#flim-markers v1 image=a width=4 height=4\n1\t1\t0\n";
        assert!(matches!(MarkerSet::parse(zero), Err(FlimError::Parse { line: 2, .. })));
        let oob = "#flim-markers v1 image=a width=4 height=4\n1\t1\t1\n4\t0\t1\n";
        assert!(matches!(MarkerSet::parse(oob), Err(FlimError::Parse { line: 3, .. })));
        assert!(matches!(
            MarkerSet::parse("x\ty\tlabel\n"),
            Err(FlimError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn conflicting_labels_rejected() {
        assert!(MarkerSet::new("a", 4, 4, [px(1, 1, 1), px(1, 1, 2)]).is_err());
        assert_eq!(MarkerSet::new("a", 4, 4, [px(1, 1, 1), px(1, 1, 1)]).unwrap().len(), 1);
    }

    #[test]
    fn identity_window_and_corner_padding() {
        let rep = Raster::from_fn(4, 5, 2, |y, x, b| (y * 10 + x) as f32 + b as f32 * 0.5);
        let m = MarkerSet::new("a", 5, 4, [px(2, 3, 1)]).unwrap();
        let sets = extract_patches(&rep, &m, 1).unwrap();
        assert_eq!(sets.class(1)[0].values, rep.pixel(3, 2).to_vec());

        let corner = MarkerSet::new("a", 5, 4, [px(0, 0, 1)]).unwrap();
        let sets = extract_patches(&rep, &corner, 3).unwrap();
        let v = &sets.class(1)[0].values;
        // first row and first column of the 3x3 window fall outside
        for (i, chunk) in v.chunks(2).enumerate() {
            let (dy, dx) = (i / 3, i % 3);
            if dy == 0 || dx == 0 {
                assert_eq!(chunk, &[0.0, 0.0]);
            } else {
                assert_eq!(chunk, rep.pixel(dy - 1, dx - 1));
            }
        }
    }

    #[test]
    fn counts_per_class() {
        let rep = Raster::zeros(10, 10, 3);
        let pix = (0..5)
            .map(|i| px(i, 0, 1))
            .chain((0..3).map(|i| px(i, 9, 2)));
        let m = MarkerSet::new("a", 10, 10, pix).unwrap();
        let sets = extract_patches(&rep, &m, 3).unwrap();
        assert_eq!(sets.class(1).len(), 5);
        assert_eq!(sets.class(2).len(), 3);
        assert_eq!(sets.total(), m.len());
    }

    #[test]
    fn bad_patch_sizes() {
        let rep = Raster::zeros(3, 4, 1);
        let m = MarkerSet::new("a", 4, 3, [px(0, 0, 1)]).unwrap();
        for k in [0, 2, 4, 7] {
            assert!(matches!(
                extract_patches(&rep, &m, k),
                Err(FlimError::BadPatchSize { .. })
            ));
        }
        assert!(extract_patches(&rep, &m, 5).is_ok());
    }
}

//! Layer configuration, forward pass and layer-at-a-time network learning.
//!
//! A layer runs marker-based standardization fused with convolution, then
//! ReLU, max-pooling and an optional frozen per-channel normalization. While
//! filters are being learned every layer keeps the input's spatial size, so
//! the marker coordinates drawn on the input image index every layer's output.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result};
use crate::filters::{learn_filters, split_filters, FilterBank, STD_FLOOR};
use crate::image_io::Image;
use crate::markers::{check_patch_size, extract_patches, read_window, MarkerSet, PatchSets};
use crate::raster::Raster;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// Valid pooling with the configured stride.
    #[default]
    Strided,
    /// Stride 1 with zero padding; output keeps the input size.
    DimensionPreserving,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterCount {
    PerClass(Vec<usize>),
    Total(usize),
}

impl FilterCount {
    /// Filters per class for a problem with `classes` classes.
    pub fn per_class(&self, classes: usize) -> Result<Vec<usize>> {
        match self {
            FilterCount::Total(total) => Ok(split_filters(*total, classes)),
            FilterCount::PerClass(counts) if counts.len() >= classes => Ok(counts.clone()),
            FilterCount::PerClass(counts) => Err(FlimError::Config(format!(
                "filters_per_class lists {} classes but markers use {classes}",
                counts.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayerSpecDoc", into = "LayerSpecDoc")]
pub struct LayerSpec {
    pub patch_size: usize,
    pub filters: FilterCount,
    pub pool_window: usize,
    pub pool_stride: usize,
    /// Pooling used at feature-extraction time.
    pub pool_mode: PoolMode,
    /// Apply stride-1 padded pooling while learning the next layer (otherwise skip pooling).
    pub pool_during_learning: bool,
    pub batch_norm: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerSpecDoc {
    patch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filters_per_class: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    total_filters: Option<usize>,
    pool_window: usize,
    pool_stride: usize,
    #[serde(default)]
    pool_mode: PoolMode,
    #[serde(default = "default_true")]
    pool_during_learning: bool,
    batch_norm: bool,
}

impl TryFrom<LayerSpecDoc> for LayerSpec {
    type Error = FlimError;

    fn try_from(doc: LayerSpecDoc) -> Result<Self> {
        let filters = match (doc.filters_per_class, doc.total_filters) {
            (Some(per), None) => FilterCount::PerClass(per),
            (None, Some(total)) => FilterCount::Total(total),
            _ => {
                return Err(FlimError::Config(
                    "a layer needs exactly one of filters_per_class or total_filters".into(),
                ))
            }
        };
        let spec = LayerSpec {
            patch_size: doc.patch_size,
            filters,
            pool_window: doc.pool_window,
            pool_stride: doc.pool_stride,
            pool_mode: doc.pool_mode,
            pool_during_learning: doc.pool_during_learning,
            batch_norm: doc.batch_norm,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<LayerSpec> for LayerSpecDoc {
    fn from(spec: LayerSpec) -> Self {
        let (filters_per_class, total_filters) = match spec.filters {
            FilterCount::PerClass(p) => (Some(p), None),
            FilterCount::Total(t) => (None, Some(t)),
        };
        LayerSpecDoc {
            patch_size: spec.patch_size,
            filters_per_class,
            total_filters,
            pool_window: spec.pool_window,
            pool_stride: spec.pool_stride,
            pool_mode: spec.pool_mode,
            pool_during_learning: spec.pool_during_learning,
            batch_norm: spec.batch_norm,
        }
    }
}

impl LayerSpec {
    /// Single convolutional layer: 60 filters of 7x7, 3x3 max-pool with stride 4, batch norm.
    pub fn coconut_default() -> Self {
        LayerSpec {
            patch_size: 7,
            filters: FilterCount::Total(60),
            pool_window: 3,
            pool_stride: 4,
            pool_mode: PoolMode::Strided,
            pool_during_learning: true,
            batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(FlimError::Config(format!(
                "patch_size must be odd, got {}",
                self.patch_size
            )));
        }
        if self.pool_window == 0 || self.pool_stride == 0 {
            return Err(FlimError::Config("pool_window and pool_stride must be >= 1".into()));
        }
        let total = match &self.filters {
            FilterCount::PerClass(p) => p.iter().sum(),
            FilterCount::Total(t) => *t,
        };
        if total == 0 {
            return Err(FlimError::Config("a layer needs at least one filter".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default = "default_bands")]
    pub input_bands: usize,
    pub layers: Vec<LayerSpec>,
}

fn default_bands() -> usize {
    3
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            input_bands: 3,
            layers: vec![LayerSpec::coconut_default()],
        }
    }
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NetworkSpec =
            serde_json::from_str(text).map_err(|e| FlimError::Config(e.to_string()))?;
        if spec.layers.is_empty() {
            return Err(FlimError::Config("network config has no layers".into()));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FlimError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec serializes")
    }
}

/// Frozen per-channel normalization applied after pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputNorm {
    pub mean: Vec<f32>,
    /// Already floored at [`STD_FLOOR`].
    pub std: Vec<f32>,
}

impl OutputNorm {
    pub fn apply(&self, rep: &mut Raster) {
        let c = rep.bands();
        for px in rep.data_mut().chunks_exact_mut(c) {
            for ((v, m), s) in px.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Per-channel statistics over every pixel of every map.
pub fn fit_output_norm(features: &[Raster]) -> Result<OutputNorm> {
    let first = features
        .first()
        .ok_or_else(|| FlimError::EmptyInput("no feature maps to fit a normalization on".into()))?;
    let c = first.bands();
    let mut sum = vec![0.0f64; c];
    let mut count = 0usize;
    for f in features {
        if f.bands() != c {
            return Err(FlimError::DimMismatch(format!(
                "feature maps with {} and {c} channels",
                f.bands()
            )));
        }
        for px in f.data().chunks_exact(c) {
            for (s, &v) in sum.iter_mut().zip(px) {
                *s += f64::from(v);
            }
        }
        count += f.height() * f.width();
    }
    if count == 0 {
        return Err(FlimError::EmptyInput("feature maps have no pixels".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0f64; c];
    for f in features {
        for px in f.data().chunks_exact(c) {
            for ((acc, &v), m) in var.iter_mut().zip(px).zip(&mean) {
                let d = f64::from(v) - m;
                *acc += d * d;
            }
        }
    }
    Ok(OutputNorm {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: var
            .iter()
            .map(|&v| ((v / count as f64).sqrt() as f32).max(STD_FLOOR as f32))
            .collect(),
    })
}

/// Same-size convolution with fused marker-based standardization:
/// `out(p, j) = standardize(P(p)) . F_j`, zero padding outside the input.
pub fn conv_forward(rep: &Raster, bank: &FilterBank) -> Result<Raster> {
    bank.validate()?;
    if rep.bands() != bank.bands {
        return Err(FlimError::DimMismatch(format!(
            "representation has {} bands, filters expect {}",
            rep.bands(),
            bank.bands
        )));
    }
    check_patch_size(bank.k, rep.height(), rep.width())?;
    let (h, w, nf) = (rep.height(), rep.width(), bank.num_filters());
    let dim = bank.dim();
    let mut out = Raster::zeros(h, w, nf);
    out.data_mut()
        .par_chunks_mut(w * nf)
        .enumerate()
        .for_each(|(y, row)| {
            let mut window = Vec::with_capacity(dim);
            let mut z = vec![0.0f64; dim];
            for x in 0..w {
                read_window(rep, y, x, bank.k, &mut window);
                for (((zv, &v), m), s) in z.iter_mut().zip(&window).zip(&bank.stats.mean).zip(&bank.stats.std) {
                    *zv = (f64::from(v) - m) / s;
                }
                let px = &mut row[x * nf..(x + 1) * nf];
                for (j, o) in px.iter_mut().enumerate() {
                    let acc: f64 = z
                        .iter()
                        .zip(bank.filter(j))
                        .map(|(&a, &b)| a * f64::from(b))
                        .sum();
                    *o = acc as f32;
                }
            }
        });
    Ok(out)
}

pub fn relu(rep: &Raster) -> Raster {
    let mut out = rep.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(rep: &mut Raster) {
    for v in rep.data_mut() {
        *v = v.max(0.0);
    }
}

/// Output side length of strided valid pooling.
pub fn pooled_len(len: usize, window: usize, stride: usize) -> usize {
    (len - window) / stride + 1
}

pub fn max_pool(rep: &Raster, window: usize, stride: usize, mode: PoolMode) -> Result<Raster> {
    let (h, w, c) = (rep.height(), rep.width(), rep.bands());
    if window == 0 || stride == 0 || window > h.min(w) {
        return Err(FlimError::BadWindow {
            window,
            stride,
            height: h,
            width: w,
        });
    }
    let (oh, ow, step, offset) = match mode {
        PoolMode::Strided => (pooled_len(h, window, stride), pooled_len(w, window, stride), stride, 0),
        PoolMode::DimensionPreserving => (h, w, 1, (window as isize - 1) / 2),
    };
    let mut out = Raster::zeros(oh, ow, c);
    out.data_mut()
        .par_chunks_mut(ow * c)
        .enumerate()
        .for_each(|(oy, row)| {
            let y0 = (oy * step) as isize - offset;
            for ox in 0..ow {
                let x0 = (ox * step) as isize - offset;
                let px = &mut row[ox * c..(ox + 1) * c];
                px.fill(f32::NEG_INFINITY);
                for dy in 0..window as isize {
                    for dx in 0..window as isize {
                        for (b, o) in px.iter_mut().enumerate() {
                            *o = o.max(rep.get_padded(y0 + dy, x0 + dx, b));
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Layer activations with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub raster: Raster,
    pub image_id: String,
    /// 1-based index of the producing layer.
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerModel {
    pub spec: LayerSpec,
    pub bank: FilterBank,
    pub output_norm: Option<OutputNorm>,
}

impl LayerModel {
    /// Convolution, ReLU and pooling with the extraction-time pooling mode.
    fn pooled(&self, rep: &Raster) -> Result<Raster> {
        let mut a = conv_forward(rep, &self.bank)?;
        relu_in_place(&mut a);
        max_pool(&a, self.spec.pool_window, self.spec.pool_stride, self.spec.pool_mode)
    }

    /// Extraction-time forward: strided pooling plus the frozen normalization.
    pub fn forward(&self, rep: &Raster) -> Result<Raster> {
        let mut out = self.pooled(rep)?;
        if let Some(norm) = &self.output_norm {
            norm.apply(&mut out);
        }
        Ok(out)
    }

    /// Learning-time forward: same spatial size as the input, no output normalization.
    pub fn forward_preserving(&self, rep: &Raster) -> Result<Raster> {
        let mut a = conv_forward(rep, &self.bank)?;
        relu_in_place(&mut a);
        if self.spec.pool_during_learning {
            let window = self.spec.pool_window.min(a.height()).min(a.width());
            a = max_pool(&a, window, 1, PoolMode::DimensionPreserving)?;
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub input_bands: usize,
    pub layers: Vec<LayerModel>,
}

impl NetworkModel {
    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.bank.classes.iter())
            .map(|&c| usize::from(c))
            .max()
            .unwrap_or(0)
    }

    fn check_input(&self, rep: &Raster) -> Result<()> {
        if rep.bands() != self.input_bands {
            return Err(FlimError::DimMismatch(format!(
                "image has {} bands, network expects {}",
                rep.bands(),
                self.input_bands
            )));
        }
        Ok(())
    }

    /// Extraction-mode outputs of every layer.
    pub fn layer_outputs(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        self.check_input(&image.raster)?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = image.raster.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer.forward(&current)?;
            outputs.push(FeatureMap {
                raster: current.clone(),
                image_id: image.id.clone(),
                layer: i + 1,
            });
        }
        Ok(outputs)
    }

    /// Final extraction-mode map of an image.
    pub fn final_map(&self, image: &Image) -> Result<FeatureMap> {
        self.check_input(&image.raster)?;
        let mut current = image.raster.clone();
        for layer in &self.layers {
            current = layer.forward(&current)?;
        }
        Ok(FeatureMap {
            raster: current,
            image_id: image.id.clone(),
            layer: self.layers.len(),
        })
    }

    /// Flattened `(y, x, channel)` output of the last layer.
    pub fn extract_features(&self, image: &Image) -> Result<Vec<f32>> {
        Ok(self.final_map(image)?.raster.into_vec())
    }

    pub fn extract_all(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        images.par_iter().map(|img| self.extract_features(img)).collect()
    }

    /// ReLU activations of layer `layer` (1-based) at input resolution, with
    /// every earlier layer run in dimension-preserving mode.
    pub fn activation_map(&self, image: &Image, layer: usize) -> Result<Raster> {
        self.check_input(&image.raster)?;
        if layer == 0 || layer > self.layers.len() {
            return Err(FlimError::Config(format!(
                "layer {layer} out of range 1..={}",
                self.layers.len()
            )));
        }
        let mut current = image.raster.clone();
        for l in &self.layers[..layer - 1] {
            current = l.forward_preserving(&current)?;
        }
        let mut a = conv_forward(&current, &self.layers[layer - 1].bank)?;
        relu_in_place(&mut a);
        Ok(a)
    }

    /// Refits every layer's output normalization on `images`, in layer order.
    pub fn fit_output_norms(&mut self, images: &[Image]) -> Result<()> {
        if images.is_empty() {
            return Err(FlimError::EmptyInput("no images to fit output normalization".into()));
        }
        let mut current: Vec<Raster> = images.iter().map(|i| i.raster.clone()).collect();
        for r in &current {
            self.check_input(r)?;
        }
        for layer in &mut self.layers {
            let mut outs: Vec<Raster> = current
                .par_iter()
                .map(|r| layer.pooled(r))
                .collect::<Result<_>>()?;
            layer.output_norm = if layer.spec.batch_norm {
                let norm = fit_output_norm(&outs)?;
                for o in &mut outs {
                    norm.apply(o);
                }
                Some(norm)
            } else {
                None
            };
            current = outs;
        }
        Ok(())
    }
}

/// Learns every layer's filters from markers, one layer at a time, then fits
/// the output normalizations on `norm_set` (the marked images when empty).
pub fn learn_network(
    selected: &[(Image, MarkerSet)],
    norm_set: &[Image],
    spec: &NetworkSpec,
    seed: u64,
) -> Result<NetworkModel> {
    if selected.is_empty() {
        return Err(FlimError::InsufficientMarkers("no marked images selected".into()));
    }
    if spec.layers.is_empty() {
        return Err(FlimError::Config("network spec has no layers".into()));
    }
    let mut classes = 0usize;
    let mut counts: Vec<usize> = Vec::new();
    for (img, markers) in selected {
        if img.bands() != spec.input_bands {
            return Err(FlimError::DimMismatch(format!(
                "image `{}` has {} bands, spec expects {}",
                img.id,
                img.bands(),
                spec.input_bands
            )));
        }
        if markers.image_id != img.id {
            return Err(FlimError::InvalidMarkers(format!(
                "markers for `{}` paired with image `{}`",
                markers.image_id, img.id
            )));
        }
        markers.validate_against(img.width(), img.height())?;
        for (label, n) in markers.counts() {
            let idx = usize::from(label) - 1;
            if counts.len() <= idx {
                counts.resize(idx + 1, 0);
            }
            counts[idx] += n;
        }
        classes = classes.max(usize::from(markers.max_label()));
    }
    if counts.iter().filter(|&&n| n > 0).count() < 2 {
        return Err(FlimError::InsufficientMarkers(
            "markers must cover at least two classes".into(),
        ));
    }

    let mut reps: Vec<Raster> = selected.iter().map(|(img, _)| img.raster.clone()).collect();
    let mut layers: Vec<LayerModel> = Vec::with_capacity(spec.layers.len());
    for (li, layer_spec) in spec.layers.iter().enumerate() {
        layer_spec.validate()?;
        let per_class = layer_spec.filters.per_class(classes)?;
        for (i, &k_i) in per_class.iter().enumerate() {
            let have = counts.get(i).copied().unwrap_or(0);
            if k_i > have {
                return Err(FlimError::InsufficientMarkers(format!(
                    "layer {}: class {} has {have} marker pixel(s) but needs {k_i} filters",
                    li + 1,
                    i + 1
                )));
            }
        }
        let mut patches = PatchSets::new(layer_spec.patch_size, reps[0].bands());
        for (rep, (_, markers)) in reps.iter().zip(selected) {
            patches.extend(extract_patches(rep, markers, layer_spec.patch_size)?)?;
        }
        let bank = learn_filters(&patches, &per_class, derive_seed(seed, li as u64))?;
        let model = LayerModel {
            spec: layer_spec.clone(),
            bank,
            output_norm: None,
        };
        if li + 1 < spec.layers.len() {
            reps = reps
                .par_iter()
                .map(|r| model.forward_preserving(r))
                .collect::<Result<_>>()?;
        }
        layers.push(model);
    }

    let mut model = NetworkModel {
        input_bands: spec.input_bands,
        layers,
    };
    if norm_set.is_empty() {
        let own: Vec<Image> = selected.iter().map(|(img, _)| img.clone()).collect();
        model.fit_output_norms(&own)?;
    } else {
        model.fit_output_norms(norm_set)?;
    }
    Ok(model)
}

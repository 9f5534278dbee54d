//! Marker-based normalization and filter estimation by patch clustering.
//!
//! Patches around marker pixels are standardized with the componentwise mean
//! and standard deviation of all marker patches. Each class's standardized
//! patches are clustered with K-means, and every centroid, scaled to unit
//! norm, becomes one convolution filter.

use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result};
use crate::kmeans::{kmeans, KMeansParams};
use crate::markers::PatchSets;
use crate::seed::derive_seed;

/// Lower bound applied to every standard deviation component.
pub const STD_FLOOR: f64 = 1e-4;

/// Componentwise mean and (population) standard deviation over marker patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerStats {
    pub k: usize,
    pub bands: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MarkerStats {
    pub fn dim(&self) -> usize {
        self.k * self.k * self.bands
    }

    /// `(patch - mean) / std`, componentwise.
    pub fn standardize(&self, patch: &[f32]) -> Vec<f32> {
        patch
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| ((f64::from(v) - m) / s) as f32)
            .collect()
    }

    /// Number of components whose deviation was raised to [`STD_FLOOR`].
    pub fn floored_components(&self) -> usize {
        self.std.iter().filter(|&&s| s <= STD_FLOOR).count()
    }

    fn from_patches<'a>(
        k: usize,
        bands: usize,
        patches: impl Iterator<Item = &'a [f32]> + Clone,
    ) -> Self {
        let dim = k * k * bands;
        let mut sum = vec![0.0f64; dim];
        let mut n = 0usize;
        for p in patches.clone() {
            for (s, &v) in sum.iter_mut().zip(p) {
                *s += f64::from(v);
            }
            n += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0f64; dim];
        for p in patches {
            for ((acc, &v), m) in var.iter_mut().zip(p).zip(&mean) {
                let d = f64::from(v) - m;
                *acc += d * d;
            }
        }
        MarkerStats {
            k,
            bands,
            mean,
            std: var
                .iter()
                .map(|&v| (v / n as f64).sqrt().max(STD_FLOOR))
                .collect(),
        }
    }
}

/// Marker-based normalization statistics over every patch regardless of class.
pub fn compute_marker_stats(patches: &PatchSets) -> Result<MarkerStats> {
    if patches.total() < 2 {
        return Err(FlimError::TooFewPatches {
            needed: 2,
            got: patches.total(),
        });
    }
    Ok(MarkerStats::from_patches(
        patches.k,
        patches.bands,
        patches.iter().map(|p| p.values.as_slice()),
    ))
}

/// A layer's unit-norm filters together with the statistics they were learned under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub k: usize,
    pub bands: usize,
    /// `num_filters * k * k * bands` values, one filter per row.
    pub filters: Vec<f32>,
    /// Source class of each filter.
    pub classes: Vec<u16>,
    pub stats: MarkerStats,
}

impl FilterBank {
    pub fn dim(&self) -> usize {
        self.k * self.k * self.bands
    }

    pub fn num_filters(&self) -> usize {
        self.classes.len()
    }

    pub fn filter(&self, j: usize) -> &[f32] {
        let d = self.dim();
        &self.filters[j * d..(j + 1) * d]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.filters.len() != d * self.classes.len()
            || self.stats.mean.len() != d
            || self.stats.std.len() != d
            || self.stats.k != self.k
            || self.stats.bands != self.bands
        {
            return Err(FlimError::DimMismatch(format!(
                "inconsistent filter bank: k={} bands={} filters={} classes={}",
                self.k,
                self.bands,
                self.filters.len(),
                self.classes.len()
            )));
        }
        Ok(())
    }
}

/// Splits `total` filters across `classes` as evenly as possible, remainder
/// going to the lower class indices.
pub fn split_filters(total: usize, classes: usize) -> Vec<usize> {
    if classes == 0 {
        return Vec::new();
    }
    let base = total / classes;
    let extra = total % classes;
    (0..classes).map(|i| base + usize::from(i < extra)).collect()
}

fn unit_or_canonical(centroid: &[f64], class: u16, index: usize) -> Vec<f32> {
    let norm = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        centroid.iter().map(|v| (v / norm) as f32).collect()
    } else {
        log::warn!(
            "filter {index} of class {class} has a zero centroid; using the canonical unit vector"
        );
        let v = (1.0 / (centroid.len() as f64).sqrt()) as f32;
        vec![v; centroid.len()]
    }
}

/// Learns one filter bank from labeled marker patches.
///
/// `filters_per_class[i]` filters come from class `i + 1`. Classes with a zero
/// count are skipped, but their patches still contribute to the statistics.
pub fn learn_filters(
    patch_sets: &PatchSets,
    filters_per_class: &[usize],
    seed: u64,
) -> Result<FilterBank> {
    if patch_sets.total() == 0 {
        return Err(FlimError::TooFewPatches { needed: 1, got: 0 });
    }
    if filters_per_class.iter().sum::<usize>() == 0 {
        return Err(FlimError::BadK("the bank needs at least one filter".into()));
    }
    if patch_sets.num_classes() > filters_per_class.len() {
        return Err(FlimError::BadK(format!(
            "markers carry {} classes but filter counts cover {}",
            patch_sets.num_classes(),
            filters_per_class.len()
        )));
    }
    let stats = MarkerStats::from_patches(
        patch_sets.k,
        patch_sets.bands,
        patch_sets.iter().map(|p| p.values.as_slice()),
    );
    let dim = patch_sets.dim();
    let mut filters = Vec::new();
    let mut classes = Vec::new();
    for (i, &k_i) in filters_per_class.iter().enumerate() {
        if k_i == 0 {
            continue;
        }
        let label = (i + 1) as u16;
        let members = patch_sets.class(label);
        if k_i > members.len() {
            return Err(FlimError::BadK(format!(
                "class {label}: {k_i} filters requested from {} patch(es)",
                members.len()
            )));
        }
        let mut points = Vec::with_capacity(members.len() * dim);
        for p in members {
            points.extend(stats.standardize(&p.values));
        }
        let result = kmeans(&points, dim, &KMeansParams::new(k_i, derive_seed(seed, i as u64)))?;
        for j in 0..k_i {
            filters.extend(unit_or_canonical(result.centroid(j), label, j));
            classes.push(label);
        }
    }
    Ok(FilterBank {
        k: patch_sets.k,
        bands: patch_sets.bands,
        filters,
        classes,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markers::{Patch, PatchSource};

    fn sets_1d(values: &[(f32, u16)]) -> PatchSets {
        let mut s = PatchSets::new(1, 1);
        for (i, &(v, label)) in values.iter().enumerate() {
            s.push(Patch {
                values: vec![v],
                label,
                source: PatchSource {
                    image_id: "t".into(),
                    x: i as u32,
                    y: 0,
                },
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn two_point_stats() {
        let stats = compute_marker_stats(&sets_1d(&[(0.0, 1), (2.0, 1)])).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn identical_patches_floor_sigma() {
        let stats = compute_marker_stats(&sets_1d(&[(0.3, 1), (0.3, 2), (0.3, 1)])).unwrap();
        assert_eq!(stats.std, vec![STD_FLOOR]);
        assert_eq!(stats.standardize(&[0.3]), vec![0.0]);
        assert_eq!(stats.floored_components(), 1);
    }

    #[test]
    fn stats_need_two_patches() {
        assert!(matches!(
            compute_marker_stats(&sets_1d(&[(1.0, 1)])),
            Err(FlimError::TooFewPatches { .. })
        ));
    }

    #[test]
    fn single_patch_falls_back_to_canonical_filter() {
        let bank = learn_filters(&sets_1d(&[(0.7, 1)]), &[1], 0).unwrap();
        assert_eq!(bank.filters, vec![1.0]);
    }

    #[test]
    fn opposite_class_filters_in_one_dimension() {
        // mean 0, population std sqrt(2.5); class means -1.5 and +1.5
        let sets = sets_1d(&[(-2.0, 1), (-1.0, 1), (1.0, 2), (2.0, 2)]);
        let bank = learn_filters(&sets, &[1, 1], 5).unwrap();
        assert_eq!(bank.classes, vec![1, 2]);
        assert!((bank.stats.std[0] - 2.5f64.sqrt()).abs() < 1e-6);
        assert!((bank.filters[0] + 1.0).abs() < 1e-6);
        assert!((bank.filters[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn per_class_k_is_checked() {
        let sets = sets_1d(&[(1.0, 1), (2.0, 2)]);
        assert!(matches!(learn_filters(&sets, &[2, 1], 0), Err(FlimError::BadK(_))));
        assert!(matches!(learn_filters(&sets, &[1], 0), Err(FlimError::BadK(_))));
    }

    #[test]
    fn even_split_remainder_to_lower_classes() {
        assert_eq!(split_filters(60, 2), vec![30, 30]);
        assert_eq!(split_filters(7, 3), vec![3, 2, 2]);
        assert_eq!(split_filters(1, 2), vec![1, 0]);
    }
}

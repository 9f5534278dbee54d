//! Feature learning from image markers.
//!
//! Convolutional filters are estimated from a handful of user-marked images:
//! patches around marker pixels are standardized with their own statistics,
//! clustered per class with K-means, and the unit-norm centroids become the
//! filters. No backpropagation is involved. Extracted features then feed a
//! linear SVM or a small MLP, and exact t-SNE projections support choosing
//! which images to mark.

pub mod classifier;
pub mod codec;
pub mod error;
pub mod filters;
pub mod image_io;
pub mod kmeans;
pub mod markers;
pub mod network;
pub mod projection;
pub mod raster;
pub mod seed;
pub mod synth;

pub use error::{FlimError, Result};
pub use filters::{compute_marker_stats, learn_filters, FilterBank, MarkerStats};
pub use image_io::{load_dataset, load_image, rgb_to_lab, BandRanges, DatasetIndex, Image};
pub use kmeans::{kmeans, KMeansParams, KMeansResult};
pub use markers::{extract_patches, rasterize_strokes, MarkerPixel, MarkerSet, PatchSets, Stroke};
pub use network::{
    conv_forward, fit_output_norm, learn_network, max_pool, relu, FeatureMap, LayerSpec,
    NetworkModel, NetworkSpec, PoolMode,
};
pub use projection::{tsne, Embedding2D, TsneParams};
pub use raster::Raster;

//! Python module `flim`: image conversion, marker rasterization, network
//! learning and feature extraction, linear SVMs, metrics and t-SNE.

use std::collections::BTreeMap;
use std::path::PathBuf;

use flim_core::classifier::{evaluate as evaluate_labels, SvmClassifier, SvmConfig};
use flim_core::codec;
use flim_core::image_io::{load_dataset, load_image, BandRanges, Image};
use flim_core::markers::{load_markers, rasterize_strokes, MarkerSet, Stroke};
use flim_core::network::{learn_network, NetworkModel, NetworkSpec};
use flim_core::projection::{tsne as run_tsne, TsneParams};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(flim, FlimError, PyValueError, "Raised for every library error; the first argument is the error kind.");

fn to_py(e: flim_core::FlimError) -> PyErr {
    FlimError::new_err((e.kind(), e.to_string()))
}

/// Converts one sRGB pixel to CIE Lab (D65).
#[pyfunction]
fn rgb_to_lab(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let [l, a, bb] = flim_core::rgb_to_lab([r, g, b]);
    (l, a, bb)
}

/// Rasterizes a JSON list of strokes into sorted `(x, y, label)` pixels.
#[pyfunction]
fn rasterize(image_id: &str, strokes_json: &str, width: u32, height: u32) -> PyResult<Vec<(u32, u32, u16)>> {
    let strokes: Vec<Stroke> = serde_json::from_str(strokes_json)
        .map_err(|e| FlimError::new_err(("SchemaError", e.to_string())))?;
    let markers = rasterize_strokes(image_id, &strokes, width, height).map_err(to_py)?;
    Ok(markers.pixels().iter().map(|p| (p.x, p.y, p.label)).collect())
}

fn marker_files(dir: &PathBuf) -> PyResult<Vec<MarkerSet>> {
    let entries = std::fs::read_dir(dir).map_err(|e| FlimError::new_err(("IoError", format!("{}: {e}", dir.display()))))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_markers(p).map_err(to_py)).collect()
}

/// A learned multi-layer network.
#[pyclass(frozen)]
struct Network {
    model: NetworkModel,
}

#[pymethods]
impl Network {
    /// Learns a network from the `.tsv` marker files in `markers_dir`, taking
    /// images from the class-per-directory dataset at `dataset`.
    /// `norm_ids` selects the images used to fit output normalization.
    #[staticmethod]
    #[pyo3(signature = (dataset, markers_dir, config_json=None, seed=0, norm_ids=None))]
    fn learn(
        py: Python<'_>,
        dataset: PathBuf,
        markers_dir: PathBuf,
        config_json: Option<&str>,
        seed: u64,
        norm_ids: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let spec = match config_json {
            Some(text) => NetworkSpec::from_json(text).map_err(to_py)?,
            None => NetworkSpec::default(),
        };
        let markers = marker_files(&markers_dir)?;
        py.detach(|| {
            let index = load_dataset(&dataset)?;
            let ranges = BandRanges::default();
            let open = |id: &str| -> flim_core::Result<Image> {
                let entry = index
                    .get(id)
                    .ok_or_else(|| flim_core::FlimError::Layout(format!("image `{id}` is not in the dataset")))?;
                let mut img = load_image(&index.root.join(&entry.path), &ranges)?;
                img.id = id.to_string();
                Ok(img)
            };
            let selected = markers
                .into_iter()
                .map(|m| Ok((open(&m.image_id)?, m)))
                .collect::<flim_core::Result<Vec<_>>>()?;
            let norm = norm_ids
                .unwrap_or_default()
                .iter()
                .map(|id| open(id))
                .collect::<flim_core::Result<Vec<_>>>()?;
            learn_network(&selected, &norm, &spec, seed)
        })
        .map(|model| Network { model })
        .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = codec::read_file(&path).map_err(to_py)?;
        Ok(Network {
            model: codec::decode_network(&bytes).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        codec::write_file(&path, &codec::encode_network(&self.model)).map_err(to_py)
    }

    /// Filters per layer.
    fn filters(&self) -> Vec<usize> {
        self.model.layers.iter().map(|l| l.bank.num_filters()).collect()
    }

    /// Feature vector of the image file at `path`.
    fn extract(&self, py: Python<'_>, path: PathBuf) -> PyResult<Vec<f32>> {
        py.detach(|| {
            let img = load_image(&path, &BandRanges::default())?;
            self.model.extract_features(&img)
        })
        .map_err(to_py)
    }

    /// Feature vectors of several image files, in order.
    fn extract_many(&self, py: Python<'_>, paths: Vec<PathBuf>) -> PyResult<Vec<Vec<f32>>> {
        py.detach(|| {
            let ranges = BandRanges::default();
            let images = paths
                .iter()
                .map(|p| load_image(p, &ranges))
                .collect::<flim_core::Result<Vec<_>>>()?;
            self.model.extract_all(&images)
        })
        .map_err(to_py)
    }
}

/// One-vs-rest linear SVM.
#[pyclass(frozen)]
struct Svm {
    clf: SvmClassifier,
}

#[pymethods]
impl Svm {
    #[staticmethod]
    #[pyo3(signature = (features, labels, c=0.01))]
    fn train(py: Python<'_>, features: Vec<Vec<f32>>, labels: Vec<u16>, c: f64) -> PyResult<Self> {
        let config = SvmConfig { c, ..SvmConfig::default() };
        py.detach(|| SvmClassifier::train(&features, &labels, &config))
            .map(|clf| Svm { clf })
            .map_err(to_py)
    }

    fn predict(&self, features: Vec<Vec<f32>>) -> Vec<u16> {
        features.iter().map(|x| self.clf.predict(x)).collect()
    }

    #[getter]
    fn classes(&self) -> Vec<u16> {
        self.clf.classes.clone()
    }
}

/// Precision, recall and f-score of `positive`, plus macro averages.
#[pyfunction]
#[pyo3(signature = (pred, truth, positive=1))]
fn evaluate<'py>(py: Python<'py>, pred: Vec<u16>, truth: Vec<u16>, positive: u16) -> PyResult<Bound<'py, PyDict>> {
    let m = evaluate_labels(&pred, &truth, positive).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("f_score", m.f_score)?;
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("zero_division", m.zero_division)?;
    d.set_item("macro_f_score", m.macro_f_score)?;
    let c = m.confusion;
    let confusion: BTreeMap<&str, usize> = [("tp", c.tp), ("fp", c.fp), ("fn", c.fn_), ("tn", c.tn)].into();
    d.set_item("confusion", confusion)?;
    Ok(d)
}

/// Exact t-SNE; returns one `(x, y)` per input vector.
#[pyfunction]
#[pyo3(signature = (vectors, perplexity=None, iterations=1000, seed=0))]
fn tsne(py: Python<'_>, vectors: Vec<Vec<f32>>, perplexity: Option<f64>, iterations: usize, seed: u64) -> PyResult<Vec<(f64, f64)>> {
    let ids: Vec<String> = (0..vectors.len()).map(|i| i.to_string()).collect();
    let mut params = TsneParams {
        iterations,
        seed,
        ..TsneParams::default()
    }
    .fit_to(vectors.len());
    if let Some(p) = perplexity {
        params.perplexity = p;
    }
    let emb = py.detach(|| run_tsne(&vectors, &ids, &params)).map_err(to_py)?;
    Ok(emb.points.iter().map(|p| (p[0], p[1])).collect())
}

/// Writes a synthetic stripes-vs-blobs dataset; returns the marked image ids.
#[pyfunction]
#[pyo3(signature = (out, per_class=20, size=64, seed=0, marked_per_class=2))]
fn synth(out: PathBuf, per_class: usize, size: usize, seed: u64, marked_per_class: usize) -> PyResult<Vec<String>> {
    let tiles = flim_core::synth::tiles("tile", per_class, size, seed);
    flim_core::synth::write_dataset(&out, &tiles, marked_per_class).map_err(to_py)
}

#[pymodule]
fn flim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FlimError", m.py().get_type::<FlimError>())?;
    m.add_class::<Network>()?;
    m.add_class::<Svm>()?;
    m.add_function(wrap_pyfunction!(rgb_to_lab, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(tsne, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}

//! Pipeline stages shared by the CLI and the HTTP service.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use flim_core::classifier::{
    evaluate, format_table, train_mlp, Classifier, ClassifierKind, Metrics, MetricsSummary,
    SvmClassifier, SvmConfig, TrainConfig, DEFAULT_HIDDEN,
};
use flim_core::codec;
use flim_core::image_io::{BandRanges, DatasetIndex, Image};
use flim_core::markers::{load_markers, MarkerSet};
use flim_core::network::{learn_network, NetworkModel, NetworkSpec};
use flim_core::seed::derive_seed;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Result, ServiceError};
use crate::project::{check_id, write_atomic, Splits};

/// Images decoded at once while extracting features.
const EXTRACT_CHUNK: usize = 256;

pub fn load_images(index: &DatasetIndex, ids: &[String]) -> Result<Vec<Image>> {
    for id in ids {
        if index.get(id).is_none() {
            return Err(ServiceError::NotFound(format!("image `{id}` is not in the dataset")));
        }
    }
    Ok(index.load_images(ids, &BandRanges::default())?)
}

/// Reads every `<id>.tsv` marker file of `dir`, keyed by image id.
pub fn load_marker_dir(dir: &Path) -> Result<BTreeMap<String, MarkerSet>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| ServiceError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("tsv"))
        .collect();
    paths.sort();
    for p in paths {
        let m = load_markers(&p)?;
        if out.insert(m.image_id.clone(), m).is_some() {
            return Err(ServiceError::Validation(format!(
                "{}: a second marker file for the same image",
                p.display()
            )));
        }
    }
    if out.is_empty() {
        return Err(ServiceError::Validation(format!("no marker files in {}", dir.display())));
    }
    Ok(out)
}

/// Learns a network from the marked images; output norms are fitted on `norm_ids`.
pub fn learn(
    index: &DatasetIndex,
    markers: &BTreeMap<String, MarkerSet>,
    norm_ids: &[String],
    spec: &NetworkSpec,
    seed: u64,
) -> Result<NetworkModel> {
    let ids: Vec<String> = markers.keys().cloned().collect();
    let images = load_images(index, &ids)?;
    let selected: Vec<(Image, MarkerSet)> = images
        .into_iter()
        .zip(markers.values().cloned())
        .collect();
    let norm_set = load_images(index, norm_ids)?;
    Ok(learn_network(&selected, &norm_set, spec, seed)?)
}

/// Writes `network.bin`, `spec.json` and per-layer filter banks (binary and JSON).
pub fn save_model(dir: &Path, model: &NetworkModel) -> Result<()> {
    write_atomic(&dir.join("network.bin"), &codec::encode_network(model))?;
    let spec = NetworkSpec {
        input_bands: model.input_bands,
        layers: model.layers.iter().map(|l| l.spec.clone()).collect(),
    };
    write_atomic(&dir.join("spec.json"), spec.to_json().as_bytes())?;
    for (i, layer) in model.layers.iter().enumerate() {
        let n = i + 1;
        write_atomic(&dir.join(format!("layer{n}.fb")), &codec::encode_filter_bank(&layer.bank))?;
        write_atomic(
            &dir.join(format!("layer{n}.json")),
            codec::filter_bank_json(&layer.bank).as_bytes(),
        )?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<NetworkModel> {
    Ok(codec::decode_network(&codec::read_file(&dir.join("network.bin"))?)?)
}

/// Feature rows with the ids and labels of their images.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub split: String,
    pub ids: Vec<String>,
    pub labels: Vec<u16>,
    pub rows: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureManifest {
    v: u32,
    split: String,
    n: usize,
    dim: usize,
    ids: Vec<String>,
    labels: Vec<u16>,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        self.rows.first().map(Vec::len).unwrap_or(0)
    }

    /// `features.bin` plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("features.bin"), &codec::encode_features(&self.rows))?;
        let manifest = FeatureManifest {
            v: 1,
            split: self.split.clone(),
            n: self.rows.len(),
            dim: self.dim(),
            ids: self.ids.clone(),
            labels: self.labels.clone(),
        };
        write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| ServiceError::io(&path, e))?;
        let manifest: FeatureManifest = serde_json::from_str(&text)?;
        let rows = codec::decode_features(&codec::read_file(&dir.join("features.bin"))?)?;
        if rows.len() != manifest.ids.len() || manifest.labels.len() != manifest.ids.len() {
            return Err(ServiceError::Validation(format!(
                "{}: manifest lists {} images but the matrix has {} rows",
                dir.display(),
                manifest.ids.len(),
                rows.len()
            )));
        }
        Ok(FeatureSet {
            split: manifest.split,
            ids: manifest.ids,
            labels: manifest.labels,
            rows,
        })
    }
}

pub fn extract(model: &NetworkModel, index: &DatasetIndex, split: &str, ids: &[String]) -> Result<FeatureSet> {
    let mut rows = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EXTRACT_CHUNK) {
        let images = load_images(index, chunk)?;
        rows.extend(model.extract_all(&images)?);
    }
    let labels = ids.iter().map(|id| index.get(id).expect("checked by load_images").label).collect();
    Ok(FeatureSet {
        split: split.to_string(),
        ids: ids.to_vec(),
        labels,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: default_hidden(),
            train: TrainConfig::default(),
        }
    }
}

/// Classifier choice and hyperparameters, e.g. `{"kind": "svm", "c": 0.01}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClassifierConfig {
    Svm(SvmConfig),
    Mlp(MlpConfig),
}

impl ClassifierConfig {
    pub fn default_for(kind: ClassifierKind) -> Self {
        match kind {
            ClassifierKind::Svm => ClassifierConfig::Svm(SvmConfig::default()),
            ClassifierKind::Mlp => ClassifierConfig::Mlp(MlpConfig::default()),
        }
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            ClassifierConfig::Svm(_) => ClassifierKind::Svm,
            ClassifierConfig::Mlp(_) => ClassifierKind::Mlp,
        }
    }
}

pub fn train_classifier(feats: &FeatureSet, config: &ClassifierConfig) -> Result<Classifier> {
    if feats.rows.is_empty() {
        return Err(ServiceError::Validation("no training features".into()));
    }
    Ok(match config {
        ClassifierConfig::Svm(c) => Classifier::Svm(SvmClassifier::train(&feats.rows, &feats.labels, c)?),
        ClassifierConfig::Mlp(c) => {
            let (model, history) = train_mlp(&feats.rows, &feats.labels, &c.hidden, &c.train)?;
            log::info!("mlp final training loss {:?}", history.last());
            Classifier::Mlp(model)
        }
    })
}

/// `classifier.bin` plus `manifest.json` with the kind and configuration.
pub fn save_classifier(dir: &Path, clf: &Classifier, config: &ClassifierConfig) -> Result<()> {
    write_atomic(&dir.join("classifier.bin"), &codec::encode_classifier(clf))?;
    let manifest = json!({ "v": 1, "input_dim": clf.input_dim(), "config": config });
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_classifier(dir: &Path) -> Result<Classifier> {
    Ok(codec::decode_classifier(&codec::read_file(&dir.join("classifier.bin"))?)?)
}

pub fn evaluate_on(clf: &Classifier, feats: &FeatureSet, positive: u16) -> Result<Metrics> {
    if clf.input_dim() != feats.dim() {
        return Err(ServiceError::Validation(format!(
            "classifier expects {} features, got {}",
            clf.input_dim(),
            feats.dim()
        )));
    }
    let pred = clf.predict_all(&feats.rows);
    Ok(evaluate(&pred, &feats.labels, positive)?)
}

/// Metrics document written by `flim eval`.
pub fn metrics_json(split: &str, metrics: &Metrics) -> serde_json::Value {
    let summary = MetricsSummary::from_runs(std::slice::from_ref(metrics));
    json!({
        "v": 1,
        "split": split,
        "metrics": metrics,
        "table": format_table(&[("FLIM", &summary)]),
    })
}

pub fn to_pretty(value: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("json value serializes");
    s.push('\n');
    s.into_bytes()
}

pub struct RunAllOptions {
    pub dataset: PathBuf,
    pub markers: PathBuf,
    pub spec: NetworkSpec,
    pub classifier: ClassifierConfig,
    pub splits: usize,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
    pub positive: u16,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRun {
    pub split: usize,
    pub seed: u64,
    pub test: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAllSummary {
    pub v: u32,
    pub kind: ClassifierKind,
    pub seed: u64,
    pub runs: Vec<SplitRun>,
    pub summary: MetricsSummary,
    pub table: String,
}

/// Repeats split → learn → extract → train → evaluate over `splits` seeded
/// splits. Marked images always go to the training split.
pub fn run_all(opts: &RunAllOptions) -> Result<RunAllSummary> {
    if opts.splits == 0 {
        return Err(ServiceError::Validation("--splits must be at least 1".into()));
    }
    let index = flim_core::load_dataset(&opts.dataset)?;
    let markers = load_marker_dir(&opts.markers)?;
    let ids: Vec<String> = index.ids().map(str::to_string).collect();
    let marked: Vec<String> = markers.keys().cloned().collect();
    let mut runs = Vec::with_capacity(opts.splits);
    for i in 0..opts.splits {
        let split_seed = derive_seed(opts.seed, i as u64);
        let splits = Splits::with_forced_train(&ids, &marked, opts.train, opts.val, split_seed)?;
        if splits.test.is_empty() {
            return Err(ServiceError::Validation("the test split is empty".into()));
        }
        let dir = opts.out.join(format!("split{}", i + 1));
        write_atomic(&dir.join("splits.json"), &to_pretty(&serde_json::to_value(&splits)?))?;
        let model = learn(&index, &markers, &splits.train, &opts.spec, split_seed)?;
        save_model(&dir.join("model"), &model)?;
        let train = extract(&model, &index, "train", &splits.train)?;
        let test = extract(&model, &index, "test", &splits.test)?;
        let clf = train_classifier(&train, &opts.classifier)?;
        save_classifier(&dir.join("clf"), &clf, &opts.classifier)?;
        let test_metrics = evaluate_on(&clf, &test, opts.positive)?;
        let val_metrics = if splits.val.is_empty() {
            None
        } else {
            let val = extract(&model, &index, "val", &splits.val)?;
            Some(evaluate_on(&clf, &val, opts.positive)?)
        };
        write_atomic(&dir.join("metrics.json"), &to_pretty(&metrics_json("test", &test_metrics)))?;
        log::info!("split {}: test f-score {:.4}", i + 1, test_metrics.f_score);
        runs.push(SplitRun {
            split: i + 1,
            seed: split_seed,
            test: test_metrics,
            val: val_metrics,
        });
    }
    let tests: Vec<Metrics> = runs.iter().map(|r| r.test.clone()).collect();
    let summary = MetricsSummary::from_runs(&tests);
    let name = match opts.classifier.kind() {
        ClassifierKind::Svm => "FLIM+SVM",
        ClassifierKind::Mlp => "FLIM+MLP",
    };
    let result = RunAllSummary {
        v: 1,
        kind: opts.classifier.kind(),
        seed: opts.seed,
        runs,
        table: format_table(&[(name, &summary)]),
        summary,
    };
    write_atomic(&opts.out.join("summary.json"), &to_pretty(&serde_json::to_value(&result)?))?;
    Ok(result)
}

/// Checks that every marker file refers to a selected image.
pub fn check_markers_selected(markers: &BTreeMap<String, MarkerSet>, selected: &[String]) -> Result<()> {
    if selected.is_empty() {
        return Err(ServiceError::Validation(
            "no images selected for marking; run `flim select` first".into(),
        ));
    }
    for id in markers.keys() {
        check_id(id)?;
        if !selected.contains(id) {
            return Err(ServiceError::Validation(format!(
                "markers reference image `{id}`, which is not among the selected images"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_config_json() {
        let svm: ClassifierConfig = serde_json::from_str(r#"{"kind": "svm", "c": 0.5}"#).unwrap();
        assert_eq!(svm, ClassifierConfig::Svm(SvmConfig { c: 0.5, ..SvmConfig::default() }));
        let mlp: ClassifierConfig =
            serde_json::from_str(r#"{"kind": "mlp", "hidden": [8], "train": {"epochs": 3}}"#).unwrap();
        match mlp {
            ClassifierConfig::Mlp(c) => {
                assert_eq!(c.hidden, vec![8]);
                assert_eq!(c.train.epochs, 3);
                assert_eq!(c.train.batch_size, 64);
            }
            other => panic!("{other:?}"),
        }
        assert!(serde_json::from_str::<ClassifierConfig>(r#"{"kind": "svm", "gamma": 1}"#).is_err());
        assert!(serde_json::from_str::<ClassifierConfig>(r#"{"kind": "rf"}"#).is_err());
    }

    #[test]
    fn markers_outside_selection_are_rejected() {
        let m = MarkerSet::new("x", 4, 4, [flim_core::MarkerPixel { x: 0, y: 0, label: 1 }]).unwrap();
        let markers = BTreeMap::from([("x".to_string(), m)]);
        assert!(check_markers_selected(&markers, &[]).is_err());
        assert!(check_markers_selected(&markers, &["y".into()]).is_err());
        assert!(check_markers_selected(&markers, &["x".into()]).is_ok());
    }
}

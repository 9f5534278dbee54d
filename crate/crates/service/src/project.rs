//! On-disk project: dataset reference, splits, selected images, markers,
//! learned model, classifier and metrics history.
//!
//! Layout of a project directory:
//!
//! ```text
//! project.json          versioned manifest (splits, selection, config, metrics)
//! strokes/<id>.json     stroke payloads exactly as received
//! markers/<id>.tsv      rasterized marker sets
//! model/network.bin     learned network
//! clf/classifier.bin    trained classifier
//! feats/<split>/        extracted features
//! thumbs/<id>.png       cached thumbnails
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use flim_core::classifier::{Classifier, ClassifierKind, Metrics};
use flim_core::codec;
use flim_core::markers::{load_markers, save_markers, MarkerSet};
use flim_core::network::{NetworkModel, NetworkSpec};
use flim_core::{load_dataset, DatasetIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const PROJECT_FILE: &str = "project.json";
const SCHEMA_VERSION: u32 = 1;

/// Disjoint train/validation/test id lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    /// Seeded random split; whatever is not in train or val is test.
    pub fn random(ids: &[String], train: usize, val: usize, seed: u64) -> Result<Self> {
        Self::with_forced_train(ids, &[], train, val, seed)
    }

    /// Like [`Splits::random`], but `forced` ids always land in train.
    pub fn with_forced_train(
        ids: &[String],
        forced: &[String],
        train: usize,
        val: usize,
        seed: u64,
    ) -> Result<Self> {
        let all: BTreeSet<&String> = ids.iter().collect();
        if all.len() != ids.len() {
            return Err(ServiceError::Validation("duplicate image ids".into()));
        }
        if train + val > ids.len() {
            return Err(ServiceError::Validation(format!(
                "train {train} + val {val} exceeds the {} available images",
                ids.len()
            )));
        }
        let forced: BTreeSet<&String> = forced.iter().collect();
        if let Some(missing) = forced.iter().find(|id| !all.contains(*id)) {
            return Err(ServiceError::NotFound(format!("image `{missing}` is not in the dataset")));
        }
        if forced.len() > train {
            return Err(ServiceError::Validation(format!(
                "{} marked images do not fit a train split of {train}",
                forced.len()
            )));
        }
        let mut rest: Vec<String> = all
            .iter()
            .filter(|id| !forced.contains(*id))
            .map(|id| (*id).clone())
            .collect();
        rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let take = train - forced.len();
        let mut train_ids: Vec<String> = forced.iter().map(|id| (*id).clone()).collect();
        train_ids.extend(rest.drain(..take));
        let mut val_ids: Vec<String> = rest.drain(..val).collect();
        train_ids.sort();
        val_ids.sort();
        rest.sort();
        Ok(Splits {
            seed,
            train: train_ids,
            val: val_ids,
            test: rest,
        })
    }

    pub fn get(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(ServiceError::Validation(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }

    pub fn contains(&self, split: &str, id: &str) -> bool {
        self.get(split)
            .map(|ids| ids.binary_search_by(|x| x.as_str().cmp(id)).is_ok())
            .unwrap_or(false)
    }
}

/// Which parts of a project to write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Parts {
    pub annotations: bool,
    pub model: bool,
    pub classifier: bool,
}

impl Parts {
    pub const ALL: Parts = Parts {
        annotations: true,
        model: true,
        classifier: true,
    };
    pub const MANIFEST: Parts = Parts {
        annotations: false,
        model: false,
        classifier: false,
    };
    pub const ANNOTATIONS: Parts = Parts {
        annotations: true,
        ..Parts::MANIFEST
    };
}

/// One classifier evaluation kept in the project history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: ClassifierKind,
    pub split: String,
    pub metrics: Metrics,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectDoc {
    v: u32,
    dataset: PathBuf,
    positive_class: u16,
    splits: Option<Splits>,
    selected: Vec<String>,
    network: Option<NetworkSpec>,
    metrics_history: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectState {
    pub dataset: PathBuf,
    pub positive_class: u16,
    pub splits: Option<Splits>,
    /// Images chosen for marking, kept sorted.
    pub selected: Vec<String>,
    /// Stroke payloads exactly as uploaded.
    pub strokes: BTreeMap<String, String>,
    pub markers: BTreeMap<String, MarkerSet>,
    pub network: Option<NetworkSpec>,
    pub model: Option<NetworkModel>,
    pub classifier: Option<Classifier>,
    pub metrics_history: Vec<MetricsRecord>,
}

pub(crate) fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && !id.contains(['/', '\\', '\0']);
    if ok {
        Ok(())
    } else {
        Err(ServiceError::Validation(format!("`{id}` is not a usable image id")))
    }
}

/// Writes through a temporary sibling so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ServiceError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| ServiceError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ServiceError::io(path, e))
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| ServiceError::io(dir, e))? {
        let path = entry.map_err(|e| ServiceError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(ServiceError::io(path, e)),
    }
}

impl ProjectState {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        ProjectState {
            dataset: dataset.into(),
            positive_class: 1,
            splits: None,
            selected: Vec::new(),
            strokes: BTreeMap::new(),
            markers: BTreeMap::new(),
            network: None,
            model: None,
            classifier: None,
            metrics_history: Vec::new(),
        }
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(PROJECT_FILE).is_file()
    }

    pub fn dataset_index(&self) -> Result<DatasetIndex> {
        Ok(load_dataset(&self.dataset)?)
    }

    pub fn splits(&self) -> Result<&Splits> {
        self.splits
            .as_ref()
            .ok_or_else(|| ServiceError::Validation("the project has no splits yet; run `flim split`".into()))
    }

    /// Replaces the selection. Every id must belong to the training split.
    pub fn select(&mut self, ids: &[String]) -> Result<()> {
        let splits = self.splits()?;
        for id in ids {
            if !splits.contains("train", id) {
                return Err(ServiceError::Validation(format!(
                    "image `{id}` is not in the training split"
                )));
            }
        }
        let set: BTreeSet<String> = ids.iter().cloned().collect();
        self.selected = set.into_iter().collect();
        Ok(())
    }

    /// Adds one image to the selection (no-op when already selected).
    pub fn select_one(&mut self, id: &str) -> Result<()> {
        if self.selected.iter().any(|s| s == id) {
            return Ok(());
        }
        let mut ids = self.selected.clone();
        ids.push(id.to_string());
        self.select(&ids)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_parts(dir, Parts::ALL)
    }

    /// Persists only the selected parts; the manifest is always written.
    pub fn save_parts(&self, dir: &Path, parts: Parts) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
        if parts.annotations {
            self.save_annotations(dir)?;
        }
        if parts.model {
            let model_path = dir.join("model").join("network.bin");
            match &self.model {
                Some(m) => write_atomic(&model_path, &codec::encode_network(m))?,
                None => remove_if_exists(&model_path)?,
            }
        }
        if parts.classifier {
            let clf_path = dir.join("clf").join("classifier.bin");
            match &self.classifier {
                Some(c) => write_atomic(&clf_path, &codec::encode_classifier(c))?,
                None => remove_if_exists(&clf_path)?,
            }
        }
        let doc = ProjectDoc {
            v: SCHEMA_VERSION,
            dataset: self.dataset.clone(),
            positive_class: self.positive_class,
            splits: self.splits.clone(),
            selected: self.selected.clone(),
            network: self.network.clone(),
            metrics_history: self.metrics_history.clone(),
        };
        let json = serde_json::to_string_pretty(&doc)?;
        write_atomic(&dir.join(PROJECT_FILE), json.as_bytes())
    }

    fn save_annotations(&self, dir: &Path) -> Result<()> {
        let strokes_dir = dir.join("strokes");
        for (id, path) in files_with_ext(&strokes_dir, "json")? {
            if !self.strokes.contains_key(&id) {
                remove_if_exists(&path)?;
            }
        }
        for (id, payload) in &self.strokes {
            check_id(id)?;
            write_atomic(&strokes_dir.join(format!("{id}.json")), payload.as_bytes())?;
        }
        let markers_dir = dir.join("markers");
        for (id, path) in files_with_ext(&markers_dir, "tsv")? {
            if !self.markers.contains_key(&id) {
                remove_if_exists(&path)?;
            }
        }
        for (id, m) in &self.markers {
            check_id(id)?;
            fs::create_dir_all(&markers_dir).map_err(|e| ServiceError::io(&markers_dir, e))?;
            save_markers(&markers_dir.join(format!("{id}.tsv")), m)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PROJECT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| ServiceError::io(&path, e))?;
        let doc: ProjectDoc = serde_json::from_str(&text)?;
        if doc.v != SCHEMA_VERSION {
            return Err(ServiceError::Validation(format!(
                "unsupported project schema version {}",
                doc.v
            )));
        }
        let mut strokes = BTreeMap::new();
        for (id, p) in files_with_ext(&dir.join("strokes"), "json")? {
            let text = fs::read_to_string(&p).map_err(|e| ServiceError::io(&p, e))?;
            strokes.insert(id, text);
        }
        let mut markers = BTreeMap::new();
        for (id, p) in files_with_ext(&dir.join("markers"), "tsv")? {
            markers.insert(id, load_markers(&p)?);
        }
        let model_path = dir.join("model").join("network.bin");
        let model = if model_path.exists() {
            Some(codec::decode_network(&codec::read_file(&model_path)?)?)
        } else {
            None
        };
        let clf_path = dir.join("clf").join("classifier.bin");
        let classifier = if clf_path.exists() {
            Some(codec::decode_classifier(&codec::read_file(&clf_path)?)?)
        } else {
            None
        };
        Ok(ProjectState {
            dataset: doc.dataset,
            positive_class: doc.positive_class,
            splits: doc.splits,
            selected: doc.selected,
            strokes,
            markers,
            network: doc.network,
            model,
            classifier,
            metrics_history: doc.metrics_history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:02}")).collect()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = Splits::random(&ids(10), 4, 4, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (4, 4, 2));
        let all: BTreeSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(s, Splits::random(&ids(10), 4, 4, 3).unwrap());
        assert!(Splits::random(&ids(10), 8, 3, 3).is_err());
    }

    #[test]
    fn forced_ids_land_in_train() {
        let forced = vec!["img07".to_string(), "img02".to_string()];
        for seed in 0..20 {
            let s = Splits::with_forced_train(&ids(12), &forced, 3, 4, seed).unwrap();
            assert!(s.contains("train", "img07") && s.contains("train", "img02"));
            assert_eq!(s.train.len(), 3);
        }
        let missing = vec!["nope".to_string()];
        assert!(matches!(
            Splits::with_forced_train(&ids(5), &missing, 2, 1, 0),
            Err(ServiceError::NotFound(_))
        ));
    }

    #[test]
    fn selection_must_come_from_train() {
        let mut p = ProjectState::new("/data");
        assert!(p.select(&["img00".into()]).is_err());
        p.splits = Some(Splits::random(&ids(6), 3, 1, 1).unwrap());
        let train = p.splits.as_ref().unwrap().train.clone();
        let val = p.splits.as_ref().unwrap().val.clone();
        p.select(&[train[1].clone(), train[0].clone()]).unwrap();
        assert_eq!(p.selected, vec![train[0].clone(), train[1].clone()]);
        assert!(p.select(&[val[0].clone()]).is_err());
    }

    #[test]
    fn ids_used_as_file_names() {
        assert!(check_id("tile_001").is_ok());
        for bad in ["", "..", "a/b", "c\\d"] {
            assert!(check_id(bad).is_err());
        }
    }
}

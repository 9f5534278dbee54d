//! HTTP API over a [`ProjectState`]. Reads run concurrently; every mutation
//! goes through the state's write lock and is persisted before the lock is
//! released. Learning, projections and classifier training run as polled
//! background jobs.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use flim_core::classifier::Classifier;
use flim_core::image_io::DatasetIndex;
use flim_core::markers::{rasterize_strokes, MarkerSet, Stroke};
use flim_core::network::NetworkSpec;
use flim_core::projection::{tsne, TsneParams};
use flim_core::FlimError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::error::{Result, ServiceError};
use crate::pipeline::{self, ClassifierConfig, FeatureSet};
use crate::project::{MetricsRecord, Parts, ProjectState};

const THUMBNAIL_SIZE: u32 = 128;
const SPLITS: [&str; 3] = ["train", "val", "test"];

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Io { .. } | ServiceError::Core(FlimError::Io { .. }) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::BAD_REQUEST,
        };
        (status, Json(self.to_json())).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Learn,
    Projection,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub v: u32,
    pub id: u64,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    pub message: String,
    pub error: Option<Value>,
    pub result: Option<Value>,
    /// Projection key (`space/split`) for projection jobs.
    #[serde(skip)]
    key: Option<String>,
}

#[derive(Default)]
struct Jobs {
    next: u64,
    all: BTreeMap<u64, Job>,
}

struct CachedProjection {
    generation: u64,
    doc: Value,
}

pub struct AppState {
    project_dir: PathBuf,
    index: DatasetIndex,
    project: RwLock<ProjectState>,
    jobs: Mutex<Jobs>,
    projections: Mutex<BTreeMap<String, CachedProjection>>,
    /// Bumped whenever the model or classifier changes.
    generation: Mutex<u64>,
}

pub type Shared = Arc<AppState>;

impl AppState {
    pub fn new(project: ProjectState, project_dir: PathBuf) -> Result<Self> {
        let index = project.dataset_index()?;
        Ok(AppState {
            project_dir,
            index,
            project: RwLock::new(project),
            jobs: Mutex::new(Jobs::default()),
            projections: Mutex::new(BTreeMap::new()),
            generation: Mutex::new(0),
        })
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, ProjectState> {
        self.project.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, ProjectState> {
        self.project.write().unwrap_or_else(|e| e.into_inner())
    }

    fn generation(&self) -> u64 {
        *self.generation.lock().unwrap()
    }

    fn bump_generation(&self) {
        *self.generation.lock().unwrap() += 1;
        self.projections.lock().unwrap().clear();
    }

    fn check_image(&self, id: &str) -> Result<()> {
        if self.index.get(id).is_none() {
            return Err(ServiceError::NotFound(format!("unknown image `{id}`")));
        }
        Ok(())
    }

    fn feature_dir(&self, split: &str) -> PathBuf {
        self.project_dir.join("feats").join(split)
    }

    pub fn job(&self, id: u64) -> Option<Job> {
        self.jobs.lock().unwrap().all.get(&id).cloned()
    }

    fn running(&self, kinds: &[JobKind]) -> Option<Job> {
        self.jobs
            .lock()
            .unwrap()
            .all
            .values()
            .find(|j| j.status == JobStatus::Running && kinds.contains(&j.kind))
            .cloned()
    }

    fn set_progress(&self, id: u64, progress: f64, message: &str) {
        if let Some(job) = self.jobs.lock().unwrap().all.get_mut(&id) {
            job.progress = progress;
            job.message = message.to_string();
        }
    }
}

/// Registers a job, unless `conflicts` already has a running member.
fn start_job(
    shared: &Shared,
    kind: JobKind,
    conflicts: &[JobKind],
    key: Option<String>,
    work: impl FnOnce(&Shared, u64) -> Result<Value> + Send + 'static,
) -> Result<u64> {
    let id = {
        let mut jobs = shared.jobs.lock().unwrap();
        if let Some(other) = jobs
            .all
            .values()
            .find(|j| j.status == JobStatus::Running && conflicts.contains(&j.kind))
        {
            return Err(ServiceError::Conflict(format!(
                "job {} ({:?}) is still running",
                other.id, other.kind
            )));
        }
        jobs.next += 1;
        let id = jobs.next;
        jobs.all.insert(
            id,
            Job {
                v: 1,
                id,
                kind,
                status: JobStatus::Running,
                progress: 0.0,
                message: "started".into(),
                error: None,
                result: None,
                key,
            },
        );
        id
    };
    let shared = shared.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = work(&shared, id);
        let mut jobs = shared.jobs.lock().unwrap();
        let job = jobs.all.get_mut(&id).expect("job registered");
        match outcome {
            Ok(result) => {
                job.status = JobStatus::Done;
                job.progress = 1.0;
                job.message = "done".into();
                job.result = Some(result);
            }
            Err(e) => {
                log::warn!("job {id} failed: {e}");
                job.status = JobStatus::Failed;
                job.message = e.to_string();
                job.error = Some(e.to_json()["error"].clone());
            }
        }
    });
    Ok(id)
}

fn accepted(id: u64) -> Response {
    (
        StatusCode::ACCEPTED,
        Json(json!({ "v": 1, "job": id, "status_url": format!("/api/jobs/{id}") })),
    )
        .into_response()
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn encode_png(img: &image::RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ServiceError::Validation(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

fn decode_rgb(path: &FsPath) -> Result<image::RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| ServiceError::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| ServiceError::Core(FlimError::Format(format!("{}: {e}", path.display()))))?;
    Ok(img.to_rgb8())
}

/// Legend colors: class 1 cyan, class 2 orange, then a fixed palette.
fn class_color(label: u16) -> &'static str {
    const PALETTE: [&str; 8] = [
        "#00ffff", "#ff8c00", "#7fff00", "#ff00ff", "#1e90ff", "#ffd700", "#dc143c", "#a9a9a9",
    ];
    PALETTE[(usize::from(label).max(1) - 1) % PALETTE.len()]
}

async fn list_images(
    State(shared): State<Shared>,
    Query(q): Query<BTreeMap<String, String>>,
) -> Result<Json<Value>> {
    let st = shared.read();
    let split = q.get("split").map(String::as_str);
    let ids: Vec<&str> = match (split, &st.splits) {
        (Some(name), Some(s)) => s.get(name)?.iter().map(String::as_str).collect(),
        (Some(name), None) => {
            return Err(ServiceError::Validation(format!("no splits yet, cannot list `{name}`")))
        }
        (None, _) => shared.index.ids().collect(),
    };
    let split_of = |id: &str| {
        st.splits
            .as_ref()
            .and_then(|s| SPLITS.iter().find(|n| s.contains(n, id)).copied())
    };
    let images: Vec<Value> = ids
        .iter()
        .map(|&id| {
            let e = shared.index.get(id).expect("split ids come from the dataset");
            json!({
                "id": id,
                "label": e.label,
                "split": split_of(id),
                "selected": st.selected.iter().any(|s| s == id),
                "marked": st.markers.contains_key(id),
                "thumbnail": format!("/api/images/{id}/thumbnail"),
                "raw": format!("/api/images/{id}/raw"),
            })
        })
        .collect();
    let classes: Vec<Value> = (1..=shared.index.classes)
        .map(|c| json!({ "label": c, "color": class_color(c), "positive": c == st.positive_class }))
        .collect();
    Ok(Json(json!({ "v": 1, "classes": classes, "images": images })))
}

async fn raw_image(State(shared): State<Shared>, Path(id): Path<String>) -> Result<Response> {
    shared.check_image(&id)?;
    let path = shared.index.root.join(&shared.index.get(&id).unwrap().path);
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = tokio::task::spawn_blocking(move || -> Result<Vec<u8>> {
        if is_png {
            std::fs::read(&path).map_err(|e| ServiceError::io(&path, e))
        } else {
            encode_png(&decode_rgb(&path)?)
        }
    })
    .await
    .expect("blocking task")?;
    Ok(png_response(bytes))
}

async fn thumbnail(State(shared): State<Shared>, Path(id): Path<String>) -> Result<Response> {
    shared.check_image(&id)?;
    crate::project::check_id(&id)?;
    let cached = shared.project_dir.join("thumbs").join(format!("{id}.png"));
    let source = shared.index.root.join(&shared.index.get(&id).unwrap().path);
    let bytes = tokio::task::spawn_blocking(move || -> Result<Vec<u8>> {
        if let Ok(bytes) = std::fs::read(&cached) {
            return Ok(bytes);
        }
        let img = decode_rgb(&source)?;
        let (w, h) = img.dimensions();
        let scale = f64::from(THUMBNAIL_SIZE) / f64::from(w.max(h));
        let thumb = if scale < 1.0 {
            let tw = ((f64::from(w) * scale).round() as u32).max(1);
            let th = ((f64::from(h) * scale).round() as u32).max(1);
            image::imageops::thumbnail(&img, tw, th)
        } else {
            img
        };
        let bytes = encode_png(&thumb)?;
        crate::project::write_atomic(&cached, &bytes)?;
        Ok(bytes)
    })
    .await
    .expect("blocking task")?;
    Ok(png_response(bytes))
}

/// Stroke payload exchanged with the UI.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrokePayload {
    pub v: u32,
    pub image_id: String,
    pub strokes: Vec<Stroke>,
}

fn parse_payload(shared: &AppState, id: &str, body: &[u8]) -> Result<StrokePayload> {
    let payload: StrokePayload = serde_json::from_slice(body)?;
    if payload.v != 1 {
        return Err(ServiceError::Validation(format!("unsupported payload version {}", payload.v)));
    }
    if payload.image_id != id {
        return Err(ServiceError::Validation(format!(
            "payload is for `{}` but was sent to `{id}`",
            payload.image_id
        )));
    }
    for s in &payload.strokes {
        if s.label == 0 || s.label > shared.index.classes {
            return Err(ServiceError::Validation(format!(
                "stroke {} has label {}; classes are 1..={}",
                s.id, s.label, shared.index.classes
            )));
        }
        if !(s.radius.is_finite() && s.radius >= 0.0) {
            return Err(ServiceError::Validation(format!("stroke {} has radius {}", s.id, s.radius)));
        }
        if s.points.is_empty() || s.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ServiceError::Validation(format!("stroke {} has no valid points", s.id)));
        }
    }
    Ok(payload)
}

fn image_dims(shared: &AppState, id: &str) -> Result<(u32, u32)> {
    let path = shared.index.root.join(&shared.index.get(id).unwrap().path);
    image::image_dimensions(&path)
        .map_err(|e| ServiceError::Core(FlimError::Format(format!("{}: {e}", path.display()))))
}

fn rasterize(shared: &AppState, payload: &StrokePayload) -> Result<Option<MarkerSet>> {
    if payload.strokes.is_empty() {
        return Ok(None);
    }
    let (w, h) = image_dims(shared, &payload.image_id)?;
    Ok(Some(rasterize_strokes(payload.image_id.clone(), &payload.strokes, w, h)?))
}

async fn put_markers(State(shared): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>> {
    shared.check_image(&id)?;
    let payload = parse_payload(&shared, &id, &body)?;
    let text = std::str::from_utf8(&body)
        .map_err(|_| ServiceError::Validation("payload is not UTF-8".into()))?
        .to_string();
    let markers = rasterize(&shared, &payload)?;
    let mut st = shared.write();
    st.select_one(&id)?;
    st.strokes.insert(id.clone(), text);
    let summary = match markers {
        Some(m) => {
            let s = json!({ "pixels": m.len(), "counts": m.counts(), "stroke_ids": m.stroke_ids });
            st.markers.insert(id.clone(), m);
            s
        }
        None => {
            st.markers.remove(&id);
            json!({ "pixels": 0, "counts": {}, "stroke_ids": [] })
        }
    };
    st.save_parts(&shared.project_dir, Parts::ANNOTATIONS)?;
    Ok(Json(json!({
        "v": 1,
        "image_id": id,
        "pixels": summary["pixels"],
        "counts": summary["counts"],
        "stroke_ids": summary["stroke_ids"],
    })))
}

async fn get_markers(State(shared): State<Shared>, Path(id): Path<String>) -> Result<Response> {
    shared.check_image(&id)?;
    let st = shared.read();
    let payload = st
        .strokes
        .get(&id)
        .ok_or_else(|| ServiceError::NotFound(format!("no markers saved for `{id}`")))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], payload.clone()).into_response())
}

async fn rasterize_echo(State(shared): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>> {
    shared.check_image(&id)?;
    let payload = parse_payload(&shared, &id, &body)?;
    let (w, h) = image_dims(&shared, &id)?;
    let pixels = match rasterize(&shared, &payload)? {
        Some(m) => m.pixels().to_vec(),
        None => Vec::new(),
    };
    Ok(Json(json!({ "v": 1, "image_id": id, "width": w, "height": h, "pixels": pixels })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionPayload {
    v: u32,
    ids: Vec<String>,
}

async fn get_selection(State(shared): State<Shared>) -> Json<Value> {
    Json(json!({ "v": 1, "selected": shared.read().selected }))
}

async fn put_selection(State(shared): State<Shared>, body: Bytes) -> Result<Json<Value>> {
    let payload: SelectionPayload = serde_json::from_slice(&body)?;
    if payload.v != 1 {
        return Err(ServiceError::Validation(format!("unsupported payload version {}", payload.v)));
    }
    for id in &payload.ids {
        shared.check_image(id)?;
    }
    let mut st = shared.write();
    st.select(&payload.ids)?;
    st.save_parts(&shared.project_dir, Parts::MANIFEST)?;
    Ok(Json(json!({ "v": 1, "selected": st.selected })))
}

fn learn_job(shared: &Shared, job: u64, spec: NetworkSpec, seed: u64) -> Result<Value> {
    let (markers, train, splits) = {
        let st = shared.read();
        let markers: BTreeMap<String, MarkerSet> = st
            .markers
            .iter()
            .filter(|(id, _)| st.selected.contains(id))
            .map(|(id, m)| (id.clone(), m.clone()))
            .collect();
        let splits = st.splits()?.clone();
        (markers, splits.train.clone(), splits)
    };
    if markers.is_empty() {
        return Err(ServiceError::Validation("no marked images selected".into()));
    }
    shared.set_progress(job, 0.05, "learning filters");
    let model = pipeline::learn(&shared.index, &markers, &train, &spec, seed)?;
    for (i, split) in SPLITS.iter().enumerate() {
        shared.set_progress(job, 0.5 + 0.15 * i as f64, &format!("extracting {split} features"));
        let ids = splits.get(split)?;
        pipeline::extract(&model, &shared.index, split, ids)?.save(&shared.feature_dir(split))?;
    }
    let layers: Vec<Value> = model
        .layers
        .iter()
        .map(|l| json!({ "filters": l.bank.num_filters(), "patch_size": l.bank.k, "bands": l.bank.bands }))
        .collect();
    {
        let mut st = shared.write();
        st.network = Some(spec);
        st.model = Some(model);
        st.classifier = None;
        st.save_parts(
            &shared.project_dir,
            Parts {
                model: true,
                classifier: true,
                ..Parts::MANIFEST
            },
        )?;
    }
    shared.bump_generation();
    Ok(json!({ "layers": layers }))
}

async fn post_learn(
    State(shared): State<Shared>,
    Query(q): Query<BTreeMap<String, String>>,
    body: Bytes,
) -> Result<Response> {
    let spec = if body.iter().all(u8::is_ascii_whitespace) {
        NetworkSpec::default()
    } else {
        let text = std::str::from_utf8(&body)
            .map_err(|_| ServiceError::Validation("config is not UTF-8".into()))?;
        NetworkSpec::from_json(text)?
    };
    for layer in &spec.layers {
        layer.validate()?;
    }
    let seed = match q.get("seed") {
        Some(s) => s
            .parse()
            .map_err(|_| ServiceError::Validation(format!("bad seed `{s}`")))?,
        None => 0,
    };
    shared.read().splits()?;
    let id = start_job(
        &shared,
        JobKind::Learn,
        &[JobKind::Learn, JobKind::Classifier],
        None,
        move |s, job| learn_job(s, job, spec, seed),
    )?;
    Ok(accepted(id))
}

async fn get_job(State(shared): State<Shared>, Path(id): Path<String>) -> Result<Json<Job>> {
    id.parse::<u64>()
        .ok()
        .and_then(|n| shared.job(n))
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown job `{id}`")))
}

fn evaluation_split(st: &ProjectState) -> Result<&'static str> {
    let s = st.splits()?;
    Ok(if !s.val.is_empty() {
        "val"
    } else {
        "test"
    })
}

fn classifier_job(shared: &Shared, job: u64, config: ClassifierConfig) -> Result<Value> {
    let (split, positive) = {
        let st = shared.read();
        (evaluation_split(&st)?, st.positive_class)
    };
    shared.set_progress(job, 0.05, "loading features");
    let train = FeatureSet::load(&shared.feature_dir("train"))?;
    shared.set_progress(job, 0.2, "training");
    let clf = pipeline::train_classifier(&train, &config)?;
    shared.set_progress(job, 0.8, &format!("evaluating on {split}"));
    let feats = FeatureSet::load(&shared.feature_dir(split))?;
    let metrics = pipeline::evaluate_on(&clf, &feats, positive)?;
    let doc = pipeline::metrics_json(split, &metrics);
    {
        let mut st = shared.write();
        st.metrics_history.push(MetricsRecord {
            kind: config.kind(),
            split: split.to_string(),
            metrics,
        });
        st.classifier = Some(clf);
        st.save_parts(
            &shared.project_dir,
            Parts {
                classifier: true,
                ..Parts::MANIFEST
            },
        )?;
    }
    shared.bump_generation();
    Ok(doc)
}

async fn post_classifier(State(shared): State<Shared>, body: Bytes) -> Result<Response> {
    let config: ClassifierConfig = if body.iter().all(u8::is_ascii_whitespace) {
        ClassifierConfig::default_for(flim_core::classifier::ClassifierKind::Svm)
    } else {
        serde_json::from_slice(&body)?
    };
    if let ClassifierConfig::Mlp(c) = &config {
        c.train.validate()?;
    }
    if shared.read().model.is_none() || !shared.feature_dir("train").join("manifest.json").exists() {
        return Err(ServiceError::NotFound("no features yet; run a learn job first".into()));
    }
    let id = start_job(
        &shared,
        JobKind::Classifier,
        &[JobKind::Learn, JobKind::Classifier],
        None,
        move |s, job| classifier_job(s, job, config),
    )?;
    Ok(accepted(id))
}

async fn get_metrics(State(shared): State<Shared>) -> Result<Json<Value>> {
    let st = shared.read();
    let last = st
        .metrics_history
        .last()
        .ok_or_else(|| ServiceError::NotFound("no classifier has been evaluated yet".into()))?;
    let mut doc = pipeline::metrics_json(&last.split, &last.metrics);
    doc["kind"] = json!(last.kind);
    doc["history"] = json!(st.metrics_history.len());
    Ok(Json(doc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Space {
    Input,
    Layer(usize),
    Classifier,
}

impl Space {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(Space::Input),
            "classifier" => Ok(Space::Classifier),
            _ => s
                .strip_prefix("layer")
                .and_then(|n| n.parse().ok())
                .filter(|&n| n >= 1)
                .map(Space::Layer)
                .ok_or_else(|| {
                    ServiceError::Validation(format!(
                        "unknown space `{s}` (expected input, layer<n> or classifier)"
                    ))
                }),
        }
    }
}

fn projection_vectors(shared: &AppState, space: Space, split: &str, ids: &[String]) -> Result<Vec<Vec<f32>>> {
    match space {
        Space::Input => Ok(pipeline::load_images(&shared.index, ids)?
            .iter()
            .map(|i| i.to_vector())
            .collect()),
        Space::Layer(n) => {
            let model = shared
                .read()
                .model
                .clone()
                .ok_or_else(|| ServiceError::NotFound("no model learned yet".into()))?;
            let images = pipeline::load_images(&shared.index, ids)?;
            images
                .iter()
                .map(|img| {
                    let outs = model.layer_outputs(img)?;
                    Ok(outs[n - 1].raster.data().to_vec())
                })
                .collect()
        }
        Space::Classifier => {
            let feats = FeatureSet::load(&shared.feature_dir(split))?;
            let st = shared.read();
            let clf = st
                .classifier
                .as_ref()
                .ok_or_else(|| ServiceError::NotFound("no classifier trained yet".into()))?;
            Ok(feats
                .rows
                .iter()
                .map(|x| match clf {
                    Classifier::Mlp(m) => m.last_hidden(x).iter().map(|&v| v as f32).collect(),
                    Classifier::Svm(s) => s.models.iter().map(|m| m.decision(x) as f32).collect(),
                })
                .collect())
        }
    }
}

fn projection_job(shared: &Shared, job: u64, space: Space, space_name: String, split: String, key: String) -> Result<Value> {
    let generation = shared.generation();
    let ids = shared.read().splits()?.get(&split)?.to_vec();
    shared.set_progress(job, 0.1, "computing vectors");
    let vectors = projection_vectors(shared, space, &split, &ids)?;
    shared.set_progress(job, 0.3, "running t-SNE");
    let params = TsneParams::default().fit_to(vectors.len());
    let emb = tsne(&vectors, &ids, &params)?;
    let doc = json!({
        "v": 1,
        "space": space_name,
        "split": split,
        "points": emb.export(|id| shared.index.get(id).map(|e| e.label)),
        "kl_divergence": emb.kl_history.last(),
    });
    shared.projections.lock().unwrap().insert(
        key,
        CachedProjection {
            generation,
            doc: doc.clone(),
        },
    );
    Ok(json!({ "points": ids.len() }))
}

async fn get_projection(
    State(shared): State<Shared>,
    Query(q): Query<BTreeMap<String, String>>,
) -> Result<Response> {
    let space_name = q.get("space").cloned().unwrap_or_else(|| "input".into());
    let space = Space::parse(&space_name)?;
    let split = q.get("split").cloned().unwrap_or_else(|| "train".into());
    {
        let st = shared.read();
        st.splits()?.get(&split)?;
        match space {
            Space::Layer(n) => {
                let model = st
                    .model
                    .as_ref()
                    .ok_or_else(|| ServiceError::NotFound("no model learned yet".into()))?;
                if n > model.layers.len() {
                    return Err(ServiceError::Validation(format!(
                        "layer {n} out of range 1..={}",
                        model.layers.len()
                    )));
                }
            }
            Space::Classifier if st.classifier.is_none() => {
                return Err(ServiceError::NotFound("no classifier trained yet".into()));
            }
            _ => {}
        }
    }
    let key = format!("{space_name}/{split}");
    if let Some(c) = shared.projections.lock().unwrap().get(&key) {
        if c.generation == shared.generation() {
            return Ok(Json(c.doc.clone()).into_response());
        }
    }
    if let Some(job) = shared.running(&[JobKind::Projection]) {
        if job.key.as_deref() == Some(key.as_str()) {
            return Ok(accepted(job.id));
        }
    }
    let job_key = key.clone();
    let id = start_job(
        &shared,
        JobKind::Projection,
        &[JobKind::Projection],
        Some(key),
        move |s, job| projection_job(s, job, space, space_name, split, job_key),
    )?;
    Ok(accepted(id))
}

/// Maps `[0, 1]` to a black-red-yellow-white ramp.
fn heat(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let ch = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(t), ch(t - 1.0), ch(t - 2.0)]
}

async fn activation(
    State(shared): State<Shared>,
    Path((id, layer)): Path<(String, String)>,
    Query(q): Query<BTreeMap<String, String>>,
) -> Result<Response> {
    shared.check_image(&id)?;
    let layer: usize = layer
        .parse()
        .map_err(|_| ServiceError::Validation(format!("bad layer `{layer}`")))?;
    let channel: usize = match q.get("channel") {
        Some(c) => c
            .parse()
            .map_err(|_| ServiceError::Validation(format!("bad channel `{c}`")))?,
        None => 0,
    };
    let model = shared
        .read()
        .model
        .clone()
        .ok_or_else(|| ServiceError::NotFound("no model learned yet".into()))?;
    if layer == 0 || layer > model.layers.len() {
        return Err(ServiceError::Validation(format!(
            "layer {layer} out of range 1..={}",
            model.layers.len()
        )));
    }
    let filters = model.layers[layer - 1].bank.num_filters();
    if channel >= filters {
        return Err(ServiceError::Validation(format!(
            "channel {channel} out of range 0..{filters}"
        )));
    }
    let shared2 = shared.clone();
    let bytes = tokio::task::spawn_blocking(move || -> Result<Vec<u8>> {
        let image = pipeline::load_images(&shared2.index, std::slice::from_ref(&id))?.remove(0);
        let act = model.activation_map(&image, layer)?;
        let plane = act.band_plane(channel);
        let (lo, hi) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let img = image::RgbImage::from_fn(act.width() as u32, act.height() as u32, |x, y| {
            let v = plane[y as usize * act.width() + x as usize];
            image::Rgb(heat(if span > 0.0 { (v - lo) / span } else { 0.0 }))
        });
        encode_png(&img)
    })
    .await
    .expect("blocking task")?;
    Ok(png_response(bytes))
}

async fn misclassified(
    State(shared): State<Shared>,
    Query(q): Query<BTreeMap<String, String>>,
) -> Result<Json<Value>> {
    let split = q.get("split").cloned().unwrap_or_else(|| "val".into());
    shared.read().splits()?.get(&split)?;
    if shared.read().classifier.is_none() {
        return Err(ServiceError::NotFound("no classifier trained yet".into()));
    }
    let shared2 = shared.clone();
    let items = tokio::task::spawn_blocking(move || -> Result<Vec<Value>> {
        let feats = FeatureSet::load(&shared2.feature_dir(&split))?;
        let st = shared2.read();
        let clf = st
            .classifier
            .as_ref()
            .ok_or_else(|| ServiceError::NotFound("no classifier trained yet".into()))?;
        let pred = clf.predict_all(&feats.rows);
        Ok(feats
            .ids
            .iter()
            .zip(pred.iter().zip(&feats.labels))
            .filter(|(_, (p, t))| p != t)
            .map(|(id, (p, t))| json!({ "id": id, "predicted": p, "truth": t }))
            .collect())
    })
    .await
    .expect("blocking task")?;
    let split = q.get("split").cloned().unwrap_or_else(|| "val".into());
    Ok(Json(json!({ "v": 1, "split": split, "items": items })))
}

async fn placeholder_index() -> Html<&'static str> {
    Html("<!doctype html><title>flim</title><p>UI assets are not installed; the JSON API lives under <code>/api</code>.</p>\n")
}

async fn api_not_found() -> ServiceError {
    ServiceError::NotFound("no such endpoint".into())
}

pub fn router(shared: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/images", get(list_images))
        .route("/api/images/{id}/raw", get(raw_image))
        .route("/api/images/{id}/thumbnail", get(thumbnail))
        .route("/api/projection", get(get_projection))
        .route("/api/markers/{id}", get(get_markers).put(put_markers))
        .route("/api/markers/{id}/rasterize", post(rasterize_echo))
        .route("/api/selection", get(get_selection).put(put_selection))
        .route("/api/learn", post(post_learn))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/classifier", post(post_classifier))
        .route("/api/metrics", get(get_metrics))
        .route("/api/activations/{id}/layer/{n}", get(activation))
        .route("/api/misclassified", get(misclassified))
        .route("/api/{*rest}", get(api_not_found))
        .with_state(shared);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(placeholder_index)),
    }
}

pub async fn serve(
    project: ProjectState,
    project_dir: PathBuf,
    static_dir: Option<PathBuf>,
    host: &str,
    port: u16,
) -> Result<()> {
    let shared = Arc::new(AppState::new(project, project_dir)?);
    let app = router(shared, static_dir);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|_| ServiceError::Validation(format!("bad listen address {host}:{port}")))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::io(FsPath::new(&addr.to_string()), e))?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::io(FsPath::new("server"), e))
}

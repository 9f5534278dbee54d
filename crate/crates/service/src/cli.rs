use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use flim_core::classifier::{ClassifierKind, SvmConfig};
use flim_core::network::NetworkSpec;
use flim_core::projection::{tsne, TsneParams};
use flim_core::synth;
use serde_json::json;

use crate::error::{Result, ServiceError};
use crate::pipeline::{self, ClassifierConfig, FeatureSet, MlpConfig, RunAllOptions};
use crate::project::{write_atomic, ProjectState, Splits};
use crate::server;

#[derive(Debug, Parser)]
#[command(name = "flim", version, about = "Learn convolutional filters from image markers")]
pub struct Cli {
    /// Project directory holding splits, selection, markers and models.
    #[arg(long, global = true, env = "FLIM_PROJECT", default_value = "flim-project")]
    pub project: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create seeded train/val/test splits of a dataset.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Class reported as positive by the metrics.
        #[arg(long, default_value_t = 1)]
        positive: u16,
    },
    /// Choose the training images to mark.
    Select {
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<String>,
    },
    /// t-SNE projection of a split's images.
    Project {
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Learn the network from markers of the selected images.
    Learn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        markers: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract feature vectors for a split.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on extracted features.
    TrainClf {
        #[arg(long)]
        kind: ClassifierKind,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        options: ClassifierOptions,
    },
    /// Evaluate a classifier on extracted features.
    Eval {
        #[arg(long)]
        clf: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the project's positive class, or 1 without a project.
        #[arg(long)]
        positive: Option<u16>,
    },
    /// Full pipeline over several random splits, reporting mean and std.
    RunAll {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        markers: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        splits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 2000)]
        val: usize,
        #[arg(long, default_value = "svm")]
        kind: ClassifierKind,
        #[arg(long, default_value_t = 1)]
        positive: u16,
        #[command(flatten)]
        options: ClassifierOptions,
    },
    /// Write a synthetic two-class texture dataset with scripted markers.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 150)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        marked_per_class: usize,
    },
    /// Serve the HTTP API and the UI assets.
    Serve {
        #[arg(long, env = "FLIM_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory of built UI assets served from `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ClassifierOptions {
    /// JSON classifier config; overrides the flags below.
    #[arg(long = "clf-config")]
    pub clf_config: Option<PathBuf>,
    /// SVM regularization.
    #[arg(long, default_value_t = 0.01)]
    pub c: f64,
    /// MLP hidden widths.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "clf-seed")]
    pub clf_seed: Option<u64>,
}

impl ClassifierOptions {
    fn config(&self, kind: ClassifierKind) -> Result<ClassifierConfig> {
        if let Some(path) = &self.clf_config {
            let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
            let config: ClassifierConfig = serde_json::from_str(&text)?;
            if config.kind() != kind {
                return Err(ServiceError::Validation(format!(
                    "{} describes a different classifier than --kind",
                    path.display()
                )));
            }
            return Ok(config);
        }
        Ok(match kind {
            ClassifierKind::Svm => ClassifierConfig::Svm(SvmConfig {
                c: self.c,
                ..SvmConfig::default()
            }),
            ClassifierKind::Mlp => {
                let mut c = MlpConfig::default();
                if let Some(h) = &self.hidden {
                    c.hidden = h.clone();
                }
                if let Some(v) = self.epochs {
                    c.train.epochs = v;
                }
                if let Some(v) = self.lr {
                    c.train.learning_rate = v;
                }
                if let Some(v) = self.batch_size {
                    c.train.batch_size = v;
                }
                if let Some(v) = self.clf_seed {
                    c.train.seed = v;
                }
                ClassifierConfig::Mlp(c)
            }
        })
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn open_project(dir: &Path) -> Result<ProjectState> {
    if !ProjectState::exists(dir) {
        return Err(ServiceError::NotFound(format!(
            "no project at {}; run `flim split` first",
            dir.display()
        )));
    }
    ProjectState::load(dir)
}

fn load_spec(path: &Path) -> Result<NetworkSpec> {
    Ok(NetworkSpec::load(path)?)
}

pub fn run(cli: Cli) -> Result<()> {
    let project_dir = cli.project;
    match cli.command {
        Command::Split {
            dataset,
            train,
            val,
            seed,
            positive,
        } => {
            let dataset = dataset.canonicalize().map_err(|e| ServiceError::io(&dataset, e))?;
            let index = flim_core::load_dataset(&dataset)?;
            let ids: Vec<String> = index.ids().map(str::to_string).collect();
            let splits = Splits::random(&ids, train, val, seed)?;
            let mut state = if ProjectState::exists(&project_dir) {
                ProjectState::load(&project_dir)?
            } else {
                ProjectState::new(&dataset)
            };
            state.dataset = dataset;
            state.positive_class = positive;
            state.selected.retain(|id| splits.contains("train", id));
            state.splits = Some(splits);
            state.save(&project_dir)?;
            let s = state.splits()?;
            print_json(&json!({
                "v": 1,
                "train": s.train.len(),
                "val": s.val.len(),
                "test": s.test.len(),
                "seed": seed,
            }));
        }
        Command::Select { ids } => {
            let mut state = open_project(&project_dir)?;
            let index = state.dataset_index()?;
            if let Some(missing) = ids.iter().find(|id| index.get(id).is_none()) {
                return Err(ServiceError::NotFound(format!("image `{missing}` is not in the dataset")));
            }
            state.select(&ids)?;
            state.save(&project_dir)?;
            print_json(&json!({ "v": 1, "selected": state.selected }));
        }
        Command::Project {
            split,
            out,
            perplexity,
            iterations,
            seed,
        } => {
            let state = open_project(&project_dir)?;
            let index = state.dataset_index()?;
            let ids = state.splits()?.get(&split)?.to_vec();
            let images = pipeline::load_images(&index, &ids)?;
            let vectors: Vec<Vec<f32>> = images.iter().map(|i| i.to_vector()).collect();
            let params = TsneParams {
                perplexity,
                iterations,
                seed,
                ..TsneParams::default()
            };
            let emb = tsne(&vectors, &ids, &params)?;
            let doc = json!({
                "v": 1,
                "space": "input",
                "split": split,
                "points": emb.export(|id| index.get(id).map(|e| e.label)),
                "kl_divergence": emb.kl_history.last(),
            });
            write_atomic(&out, &pipeline::to_pretty(&doc))?;
        }
        Command::Learn {
            config,
            markers,
            out,
            seed,
        } => {
            let state = open_project(&project_dir)?;
            let spec = load_spec(&config)?;
            let marker_sets = pipeline::load_marker_dir(&markers)?;
            pipeline::check_markers_selected(&marker_sets, &state.selected)?;
            let index = state.dataset_index()?;
            let train = state.splits()?.train.clone();
            let model = pipeline::learn(&index, &marker_sets, &train, &spec, seed)?;
            pipeline::save_model(&out, &model)?;
            print_json(&json!({
                "v": 1,
                "layers": model.layers.iter().map(|l| json!({
                    "filters": l.bank.num_filters(),
                    "patch_size": l.bank.k,
                    "bands": l.bank.bands,
                })).collect::<Vec<_>>(),
            }));
        }
        Command::Extract { model, split, out } => {
            let state = open_project(&project_dir)?;
            let index = state.dataset_index()?;
            let ids = state.splits()?.get(&split)?.to_vec();
            let model = pipeline::load_model(&model)?;
            let feats = pipeline::extract(&model, &index, &split, &ids)?;
            feats.save(&out)?;
            print_json(&json!({ "v": 1, "split": split, "n": feats.rows.len(), "dim": feats.dim() }));
        }
        Command::TrainClf {
            kind,
            feats,
            out,
            options,
        } => {
            let config = options.config(kind)?;
            let feats = FeatureSet::load(&feats)?;
            let clf = pipeline::train_classifier(&feats, &config)?;
            pipeline::save_classifier(&out, &clf, &config)?;
            print_json(&json!({ "v": 1, "kind": kind, "input_dim": clf.input_dim() }));
        }
        Command::Eval {
            clf,
            feats,
            out,
            positive,
        } => {
            let positive = match positive {
                Some(p) => p,
                None if ProjectState::exists(&project_dir) => ProjectState::load(&project_dir)?.positive_class,
                None => 1,
            };
            let clf = pipeline::load_classifier(&clf)?;
            let feats = FeatureSet::load(&feats)?;
            let metrics = pipeline::evaluate_on(&clf, &feats, positive)?;
            let doc = pipeline::metrics_json(&feats.split, &metrics);
            write_atomic(&out, &pipeline::to_pretty(&doc))?;
            print!("{}", doc["table"].as_str().unwrap_or_default());
        }
        Command::RunAll {
            dataset,
            markers,
            config,
            out,
            splits,
            seed,
            train,
            val,
            kind,
            positive,
            options,
        } => {
            let spec = match config {
                Some(p) => load_spec(&p)?,
                None => NetworkSpec::default(),
            };
            let summary = pipeline::run_all(&RunAllOptions {
                dataset,
                markers,
                spec,
                classifier: options.config(kind)?,
                splits,
                train,
                val,
                seed,
                positive,
                out,
            })?;
            print!("{}", summary.table);
        }
        Command::Synth {
            out,
            per_class,
            size,
            seed,
            marked_per_class,
        } => {
            let tiles = synth::tiles("tile", per_class, size, seed);
            let marked = synth::write_dataset(&out, &tiles, marked_per_class)?;
            print_json(&json!({ "v": 1, "images": tiles.len(), "marked": marked }));
        }
        Command::Serve {
            port,
            host,
            static_dir,
        } => {
            let state = open_project(&project_dir)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| ServiceError::io(Path::new("tokio"), e))?;
            runtime.block_on(server::serve(state, project_dir, static_dir, &host, port))?;
        }
    }
    Ok(())
}

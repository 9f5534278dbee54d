//! Classifiers trained on extracted features, and their evaluation.

pub mod metrics;
pub mod mlp;
pub mod svm;

use serde::{Deserialize, Serialize};

pub use metrics::{evaluate, format_table, Confusion, MeanStd, Metrics, MetricsSummary};
pub use mlp::{train_mlp, MlpModel, TrainConfig, DEFAULT_HIDDEN};
pub use svm::{train_svm, train_svm_traced, LinearSvmModel, SvmClassifier, SvmConfig, SvmTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Svm,
    Mlp,
}

impl std::str::FromStr for ClassifierKind {
    type Err = crate::error::FlimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "svm" => Ok(ClassifierKind::Svm),
            "mlp" => Ok(ClassifierKind::Mlp),
            other => Err(crate::error::FlimError::Config(format!(
                "unknown classifier kind `{other}` (expected svm or mlp)"
            ))),
        }
    }
}

/// A trained classifier of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Svm(SvmClassifier),
    Mlp(MlpModel),
}

impl Classifier {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Svm(_) => ClassifierKind::Svm,
            Classifier::Mlp(_) => ClassifierKind::Mlp,
        }
    }

    pub fn predict(&self, x: &[f32]) -> u16 {
        match self {
            Classifier::Svm(m) => m.predict(x),
            Classifier::Mlp(m) => m.predict(x),
        }
    }

    pub fn predict_all(&self, xs: &[Vec<f32>]) -> Vec<u16> {
        use rayon::prelude::*;
        xs.par_iter().map(|x| self.predict(x)).collect()
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Classifier::Svm(m) => m.dim(),
            Classifier::Mlp(m) => m.input_dim(),
        }
    }
}

//! Classifiers used by the framework: a CART decision tree (the interpretable
//! model), a 1-D CNN (the high-capacity reference) and seeded random search.

mod cnn;
mod search;
mod tree;

pub use cnn::{
    cnn_gradient_check, train_cnn, Activation, CnnDocument, CnnHyperparams, CnnModel, ConvSpec, GradientCheck,
    LayerDocument, TrainOptions, TrainingTrace,
};
pub use search::{
    desk_cnn_space, wide_cnn_space, random_search, Dimension, HyperparamSpace, Hyperparams, ParamValue, SearchOutcome,
    Trial,
};
pub use tree::{
    accuracy, predict_tree, train_tree, tree_importance, tune_tree_depth, Criterion, DecisionTree, DepthSearch, Split,
    TreeNode, TreeParams, DEFAULT_DEPTH_GRID,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training data is empty")]
    EmptyData,
    #[error("training data holds a single class; nothing to separate")]
    DegenerateData,
    #[error("expected {expected} features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("network shape: {0}")]
    ShapeError(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("hyperparameters: {0}")]
    InvalidHyperparams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    DecisionTree,
    Cnn,
}

impl ModelKind {
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::DecisionTree => "DT",
            ModelKind::Cnn => "1-D Conv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModelReport {
    pub kind: ModelKind,
    pub hyperparams: Hyperparams,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub seed: u64,
}

/// Fraction of `predictions` equal to `labels`.
pub(crate) fn fraction_correct(predictions: impl Iterator<Item = usize>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions.zip(labels).filter(|(p, l)| p == *l).count();
    correct as f64 / labels.len() as f64
}

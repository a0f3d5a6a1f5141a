//! End tasks on encoded vectors: linear classification and retrieval.

mod metrics;
mod svm;

pub use metrics::{accuracy, average_precision, classification_map, mean_ap, rank_database, Ranking, Relevance};
pub use svm::{classify, train_classifier, train_classifier_weighted, LinearClassifier, Predictions, SvmParams};

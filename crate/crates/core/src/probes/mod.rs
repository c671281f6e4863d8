//! Supervised probes on MLP outputs and their evaluation metrics.

pub mod family;
pub mod fitness;
pub mod metrics;
pub mod split;

pub use family::{family_split, train_family_probe, FamilyProbe, FamilySplit, LogisticConfig};
pub use fitness::{
    cross_validate, fold_reports_csv, train_fitness_probe, FitTrace, FitnessProbe,
    FitnessProbeConfig, FoldReport,
};
pub use metrics::{f1, pearson, spearman};
pub use split::{assign_folds, fold_split, FoldSplit, SplitScheme, N_FOLDS};

use crate::tensor::Tensor;

/// Token-mean of a `T x d` tensor as a feature vector.
pub fn mean_pool(t: &Tensor) -> Vec<f32> {
    t.mean_rows().into_data()
}

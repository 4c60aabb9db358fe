//! Evaluation harness: downstream classifier, membership inference, utility
//! metrics, the curvature-vulnerability analysis and the sensitivity probe.

pub mod classifier;
pub mod metrics;
pub mod mia;
pub mod probe;
pub mod vulnerability;

pub use classifier::{train_downstream, Arch, ClassifierConfig, DownstreamClassifier};
pub use metrics::{diversity_from_probabilities, frechet_distance};
pub use mia::{attack_features, mia_attack, AttackModel, MiaConfig, MiaReport};
pub use probe::{loss_sensitivity_probe, ProbeReport};
pub use vulnerability::{curvature_vulnerability_report, spearman, VulnerabilityReport};

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub test_accuracy: f64,
    pub frechet: f64,
    pub diversity: f64,
}

/// Fréchet distance between `a` and `b` in the penultimate feature space of
/// `extractor`.
pub fn frechet_feature_distance(extractor: &DownstreamClassifier, a: &LabeledDataset, b: &LabeledDataset) -> Result<f64> {
    frechet_distance(&extractor.features(&a.images)?, &extractor.features(&b.images)?)
}

pub fn diversity_score(clf: &DownstreamClassifier, set: &LabeledDataset) -> Result<f64> {
    diversity_from_probabilities(&clf.probabilities(&set.images)?)
}

/// Utility of a classifier trained on published data: its accuracy on the
/// original test split, plus metrics of the published set under a frozen
/// extractor trained on the originals.
pub fn utility_report(
    downstream: &DownstreamClassifier,
    extractor: &DownstreamClassifier,
    original: &LabeledDataset,
    published: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<UtilityReport> {
    Ok(UtilityReport {
        test_accuracy: downstream.accuracy(test)?,
        frechet: frechet_feature_distance(extractor, original, published)?,
        diversity: diversity_score(extractor, published)?,
    })
}

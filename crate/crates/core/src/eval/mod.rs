//! Onset, captioning and distribution metrics.

pub mod cider;
pub mod classifier;
pub mod fed;
pub mod onsets;
pub mod report;

pub use cider::{cider, cider_items};
pub use classifier::{class_kl, class_kl_posteriors, kl_divergence, ClassifierConfig, KindClassifier};
pub use fed::frechet_embedding_distance;
pub use onsets::{
    detect_onsets, detect_onsets_with, onset_ap, onset_ap_with, onset_count_accuracy, onset_count_match, OnsetConfig,
    OnsetList,
};
pub use report::{config_hash, MetricReport};

//! Evaluation: classification against the vocabulary, per-point semantic
//! metrics and instance-level mAP.

mod classify;
mod instance;
mod semantic;

use serde::{Deserialize, Serialize};

pub use classify::{classify, top1_accuracy, top1_predictions, topk_predictions, Scoring};
pub use instance::{
    class_ap, headline_thresholds, instance_map, make_tertiles, region_iou, ApIntegration,
    InstanceMetrics, Tertile, TertileSplit,
};
pub use semantic::{semantic_metrics, SemanticAccumulator, SemanticMetrics};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Default size of the global Top-k prediction pool.
pub const DEFAULT_TOPK: usize = 600;

/// The support of an instance: an explicit sorted point-id set, or a
/// reference to a ground-truth instance when masks are taken as given.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Points(Vec<u64>),
    Instance(u64),
}

impl Region {
    /// Sorts and deduplicates point ids.
    pub fn points(mut ids: Vec<u64>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Region::Points(ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub instance_id: u64,
    pub class_id: i64,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub region: Region,
    pub class_id: i64,
    pub confidence: f64,
}

/// The metrics document written by evaluation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub fusion: String,
    pub scoring: Scoring,
    pub ap_integration: ApIntegration,
    pub instances: usize,
    pub top1_accuracy: f64,
    pub semantic: Option<SemanticMetrics>,
    pub instance_top1: Option<InstanceMetrics>,
    pub instance_topk: Option<InstanceMetrics>,
}

//! Fusing a dataset with a chosen strategy and scoring it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::FusionStrategy;
use crate::data::{select_eval_views, ClassVocabulary, Dataset, InstanceRecord};
use crate::error::{Error, Result};
use crate::metrics::{
    instance_map, make_tertiles, top1_accuracy, top1_predictions, topk_predictions, ApIntegration,
    GroundTruthInstance, MetricsReport, Region, Scoring, SemanticAccumulator,
    METRICS_SCHEMA_VERSION,
};
use crate::model::{fuse_many, Parameters};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Semantic,
    Instance,
    Both,
}

impl std::str::FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(EvalTask::Semantic),
            "instance" => Ok(EvalTask::Instance),
            "both" => Ok(EvalTask::Both),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Best-visibility views fed to fusion per instance.
    pub views: usize,
    pub topk: usize,
    pub task: EvalTask,
    pub ap_integration: ApIntegration,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            views: 5,
            topk: crate::metrics::DEFAULT_TOPK,
            task: EvalTask::Both,
            ap_integration: ApIntegration::Raw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedRecord {
    pub instance_id: u64,
    pub descriptor: Vec<f64>,
}

fn eval_views(r: &InstanceRecord, k: usize) -> Tensor {
    let views = select_eval_views(r, k);
    let d = views[0].descriptor.len();
    let data = views.iter().flat_map(|v| v.descriptor.iter().copied()).collect();
    Tensor::matrix(views.len(), d, data)
}

/// Fuses every instance from its `views` best-visibility views.
pub fn fuse_dataset(
    dataset: &Dataset,
    strategy: FusionStrategy,
    params: Option<&Parameters>,
    views: usize,
) -> Result<Vec<FusedRecord>> {
    if views == 0 {
        return Err(Error::Config("views must be ≥ 1".into()));
    }
    let inputs: Vec<Tensor> = dataset.instances().iter().map(|r| eval_views(r, views)).collect();
    let fused = match (strategy, params) {
        (FusionStrategy::Learned, Some(p)) => {
            fuse_many(p, &inputs.iter().collect::<Vec<_>>(), 64)?
        }
        (FusionStrategy::Learned, None) => {
            return Err(Error::Config("learned fusion requires a checkpoint".into()))
        }
        (s, _) => inputs.iter().map(|t| s.apply(t)).collect::<Result<_>>()?,
    };
    Ok(dataset
        .instances()
        .iter()
        .zip(fused)
        .map(|(r, descriptor)| FusedRecord {
            instance_id: r.instance_id,
            descriptor,
        })
        .collect())
}

/// Sigmoid scoring with the learned scalars, raw cosine for baselines.
pub fn scoring_for(strategy: FusionStrategy, params: Option<&Parameters>) -> Scoring {
    match (strategy, params) {
        (FusionStrategy::Learned, Some(p)) => Scoring::Sigmoid {
            t: p.temperature(),
            b: p.bias(),
        },
        _ => Scoring::Cosine,
    }
}

/// Metrics for fused descriptors against the dataset's own labels. Masks are
/// the ground-truth instances themselves, so semantic metrics weight each
/// instance by its point count.
pub fn evaluate_fused(
    dataset: &Dataset,
    fused: &[FusedRecord],
    vocab: &ClassVocabulary,
    scoring: Scoring,
    fusion: &str,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    dataset.check_vocabulary(vocab)?;
    let by_id: std::collections::HashMap<u64, &FusedRecord> =
        fused.iter().map(|f| (f.instance_id, f)).collect();
    let mut ids = Vec::with_capacity(dataset.len());
    let mut descs = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    for r in dataset.instances() {
        let f = by_id.get(&r.instance_id).ok_or_else(|| {
            Error::Data(format!("no fused descriptor for instance {}", r.instance_id))
        })?;
        ids.push(r.instance_id);
        descs.push(f.descriptor.clone());
        labels.push(r.class_id);
    }
    let accuracy = top1_accuracy(&descs, &labels, vocab, scoring)?;
    let top1 = top1_predictions(&ids, &descs, vocab, scoring)?;

    let semantic = if matches!(opts.task, EvalTask::Semantic | EvalTask::Both) {
        let mut acc = SemanticAccumulator::default();
        for (r, p) in dataset.instances().iter().zip(&top1) {
            acc.add(r.class_id, p.class_id, r.point_count);
        }
        Some(acc.finish()?)
    } else {
        None
    };
    let (instance_top1, instance_topk) = if matches!(opts.task, EvalTask::Instance | EvalTask::Both) {
        let split = make_tertiles(&vocab.frequencies())?;
        let gts: Vec<GroundTruthInstance> = dataset
            .instances()
            .iter()
            .map(|r| GroundTruthInstance {
                instance_id: r.instance_id,
                class_id: r.class_id,
                region: Region::Instance(r.instance_id),
            })
            .collect();
        let topk = topk_predictions(&ids, &descs, vocab, scoring, opts.topk)?;
        (
            Some(instance_map(&top1, &gts, &split, opts.ap_integration)?),
            Some(instance_map(&topk, &gts, &split, opts.ap_integration)?),
        )
    } else {
        (None, None)
    };
    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        fusion: fusion.to_string(),
        scoring,
        ap_integration: opts.ap_integration,
        instances: dataset.len(),
        top1_accuracy: accuracy,
        semantic,
        instance_top1,
        instance_topk,
    })
}

pub fn write_fused(path: &Path, fused: &[FusedRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for f in fused {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_fused(path: &Path) -> Result<Vec<FusedRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

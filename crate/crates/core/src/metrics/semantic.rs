use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticMetrics {
    pub iou: BTreeMap<i64, f64>,
    pub acc: BTreeMap<i64, f64>,
    pub miou: f64,
    pub macc: f64,
    pub f_iou: f64,
    pub f_acc: f64,
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

/// Point-weighted confusion counts. Instances can be added as a whole with
/// their point count, which is equivalent to labelling every point.
#[derive(Default)]
pub struct SemanticAccumulator {
    counts: BTreeMap<i64, Counts>,
    gt_points: BTreeMap<i64, u64>,
}

impl SemanticAccumulator {
    pub fn add(&mut self, gt: i64, pred: i64, points: u64) {
        *self.gt_points.entry(gt).or_insert(0) += points;
        if gt == pred {
            self.counts.entry(gt).or_default().tp += points;
        } else {
            self.counts.entry(gt).or_default().fn_ += points;
            self.counts.entry(pred).or_default().fp += points;
        }
    }

    pub fn finish(&self) -> Result<SemanticMetrics> {
        let total: u64 = self.gt_points.values().sum();
        if total == 0 {
            return Err(Error::Empty("ground-truth points"));
        }
        let mut out = SemanticMetrics {
            iou: BTreeMap::new(),
            acc: BTreeMap::new(),
            miou: 0.0,
            macc: 0.0,
            f_iou: 0.0,
            f_acc: 0.0,
        };
        for (&class, &points) in self.gt_points.iter().filter(|(_, &p)| p > 0) {
            let c = self.counts[&class];
            let iou = c.tp as f64 / (c.tp + c.fp + c.fn_) as f64;
            let acc = c.tp as f64 / (c.tp + c.fn_) as f64;
            let share = points as f64 / total as f64;
            out.iou.insert(class, iou);
            out.acc.insert(class, acc);
            out.f_iou += share * iou;
            out.f_acc += share * acc;
        }
        let n = out.iou.len() as f64;
        out.miou = out.iou.values().sum::<f64>() / n;
        out.macc = out.acc.values().sum::<f64>() / n;
        Ok(out)
    }
}

/// Per-class IoU and accuracy from per-point labels; means run over the
/// classes present in the ground truth.
pub fn semantic_metrics(gt: &[i64], pred: &[i64]) -> Result<SemanticMetrics> {
    if gt.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} ground-truth labels for {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    let mut acc = SemanticAccumulator::default();
    for (&g, &p) in gt.iter().zip(pred) {
        acc.add(g, p, 1);
    }
    acc.finish()
}

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{GroundTruthInstance, Prediction, Region};
use crate::error::{Error, Result};

/// How precision at each true positive is integrated into AP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApIntegration {
    /// Mean over ground-truth instances of the raw precision at the rank where
    /// each was matched; unmatched instances contribute zero.
    #[default]
    Raw,
    /// Same, with precision first made non-increasing from the right.
    Interpolated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tertile {
    Head,
    Common,
    Tail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TertileSplit {
    pub assignment: BTreeMap<i64, Tertile>,
}

/// Sorts classes by descending frequency (ties by class id) and cuts them
/// into three contiguous groups, larger groups first.
pub fn make_tertiles(class_freqs: &BTreeMap<i64, u64>) -> Result<TertileSplit> {
    let n = class_freqs.len();
    if n < 3 {
        return Err(Error::Contract(format!("tertiles need ≥ 3 classes, got {n}")));
    }
    let mut classes: Vec<(i64, u64)> = class_freqs.iter().map(|(&c, &f)| (c, f)).collect();
    classes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let head = n.div_ceil(3);
    let common = (n - head).div_ceil(2);
    let assignment = classes
        .iter()
        .enumerate()
        .map(|(i, &(c, _))| {
            let t = if i < head {
                Tertile::Head
            } else if i < head + common {
                Tertile::Common
            } else {
                Tertile::Tail
            };
            (c, t)
        })
        .collect();
    Ok(TertileSplit { assignment })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    /// Mean over τ ∈ {0.50, 0.55, …, 0.95}.
    pub map: f64,
    pub map50: f64,
    pub map25: f64,
    pub map_head: Option<f64>,
    pub map_common: Option<f64>,
    pub map_tail: Option<f64>,
    /// Per-class AP averaged over the headline thresholds.
    pub per_class: BTreeMap<i64, f64>,
}

pub fn headline_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub fn region_iou(a: &Region, b: &Region) -> Result<f64> {
    match (a, b) {
        (Region::Instance(x), Region::Instance(y)) => Ok(if x == y { 1.0 } else { 0.0 }),
        (Region::Points(p), Region::Points(q)) => {
            let (mut i, mut j, mut inter) = (0, 0, 0usize);
            while i < p.len() && j < q.len() {
                match p[i].cmp(&q[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        inter += 1;
                        i += 1;
                        j += 1;
                    }
                }
            }
            let union = p.len() + q.len() - inter;
            Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
        }
        _ => Err(Error::Contract(
            "cannot compare a point-set region with an instance reference".into(),
        )),
    }
}

/// AP of one class at one overlap threshold. Predictions are visited by
/// descending confidence (stable for ties); each takes the unmatched ground
/// truth of its class with the highest IoU (ties to the lower instance id)
/// and counts as a true positive iff that IoU reaches `tau`.
pub fn class_ap(
    preds: &[Prediction],
    gts: &[GroundTruthInstance],
    class_id: i64,
    tau: f64,
    integration: ApIntegration,
) -> Result<f64> {
    let mut gt: Vec<&GroundTruthInstance> = gts.iter().filter(|g| g.class_id == class_id).collect();
    gt.sort_by_key(|g| g.instance_id);
    if gt.is_empty() {
        return Err(Error::Contract(format!("class {class_id} has no ground truth")));
    }
    let mut ps: Vec<&Prediction> = preds.iter().filter(|p| p.class_id == class_id).collect();
    ps.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut matched = vec![false; gt.len()];
    let mut precisions = Vec::new();
    let mut tp = 0usize;
    for (rank, p) in ps.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gt.iter().enumerate() {
            if matched[k] {
                continue;
            }
            let iou = region_iou(&p.region, &g.region)?;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        if let Some((k, iou)) = best {
            if iou >= tau && iou > 0.0 {
                matched[k] = true;
                tp += 1;
                precisions.push(tp as f64 / (rank + 1) as f64);
            }
        }
    }
    if integration == ApIntegration::Interpolated {
        for i in (0..precisions.len().saturating_sub(1)).rev() {
            precisions[i] = precisions[i].max(precisions[i + 1]);
        }
    }
    Ok(precisions.iter().sum::<f64>() / gt.len() as f64)
}

/// mAP over the classes present in the ground truth. `split` doubles as the
/// closed evaluation vocabulary: any other class id is rejected.
pub fn instance_map(
    preds: &[Prediction],
    gts: &[GroundTruthInstance],
    split: &TertileSplit,
    integration: ApIntegration,
) -> Result<InstanceMetrics> {
    for (what, class) in preds
        .iter()
        .map(|p| ("prediction", p.class_id))
        .chain(gts.iter().map(|g| ("ground truth", g.class_id)))
    {
        if !split.assignment.contains_key(&class) {
            return Err(Error::Data(format!("{what} class {class} not in vocabulary")));
        }
    }
    if let Some(p) = preds.iter().find(|p| !p.confidence.is_finite()) {
        return Err(Error::Contract(format!(
            "non-finite confidence for class {}",
            p.class_id
        )));
    }
    let classes: BTreeSet<i64> = gts.iter().map(|g| g.class_id).collect();
    if classes.is_empty() {
        return Err(Error::Empty("ground-truth instances"));
    }
    let mean_over = |tau: f64| -> Result<f64> {
        let mut s = 0.0;
        for &c in &classes {
            s += class_ap(preds, gts, c, tau, integration)?;
        }
        Ok(s / classes.len() as f64)
    };
    let taus = headline_thresholds();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let mut s = 0.0;
        for &tau in &taus {
            s += class_ap(preds, gts, c, tau, integration)?;
        }
        per_class.insert(c, s / taus.len() as f64);
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    let tertile_mean = |t: Tertile| {
        let vals: Vec<f64> = per_class
            .iter()
            .filter(|(c, _)| split.assignment[c] == t)
            .map(|(_, &v)| v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(InstanceMetrics {
        map,
        map50: mean_over(0.5)?,
        map25: mean_over(0.25)?,
        map_head: tertile_mean(Tertile::Head),
        map_common: tertile_mean(Tertile::Common),
        map_tail: tertile_mean(Tertile::Tail),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(range: std::ops::Range<u64>) -> Region {
        Region::Points(range.collect())
    }

    fn split(classes: &[i64]) -> TertileSplit {
        let mut f: BTreeMap<i64, u64> = classes.iter().map(|&c| (c, 1)).collect();
        for extra in 100..103 {
            f.entry(extra).or_insert(0);
        }
        make_tertiles(&f).unwrap()
    }

    #[test]
    fn hand_computed_ap_is_seven_twelfths() {
        let gts = vec![
            GroundTruthInstance { instance_id: 1, class_id: 0, region: pts(0..10) },
            GroundTruthInstance { instance_id: 2, class_id: 0, region: pts(10..20) },
        ];
        let preds = vec![
            Prediction { region: pts(30..40), class_id: 0, confidence: 0.9 },
            Prediction { region: pts(0..10), class_id: 0, confidence: 0.8 },
            Prediction { region: pts(10..20), class_id: 0, confidence: 0.7 },
        ];
        let ap = class_ap(&preds, &gts, 0, 0.5, ApIntegration::Raw).unwrap();
        assert!((ap - 7.0 / 12.0).abs() < 1e-15);
        let interp = class_ap(&preds, &gts, 0, 0.5, ApIntegration::Interpolated).unwrap();
        assert!((interp - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts: Vec<GroundTruthInstance> = (0..4)
            .map(|i| GroundTruthInstance {
                instance_id: i,
                class_id: (i % 2) as i64,
                region: Region::Instance(i),
            })
            .collect();
        let preds: Vec<Prediction> = gts
            .iter()
            .map(|g| Prediction { region: g.region.clone(), class_id: g.class_id, confidence: 0.5 })
            .collect();
        let s = split(&[0, 1]);
        let m = instance_map(&preds, &gts, &s, ApIntegration::Raw).unwrap();
        assert_eq!((m.map, m.map50, m.map25), (1.0, 1.0, 1.0));
        let m = instance_map(&[], &gts, &s, ApIntegration::Raw).unwrap();
        assert_eq!(m.map, 0.0);
    }

    #[test]
    fn unknown_class_rejected() {
        let gts = vec![GroundTruthInstance { instance_id: 0, class_id: 0, region: Region::Instance(0) }];
        let preds = vec![Prediction { region: Region::Instance(0), class_id: 55, confidence: 1.0 }];
        assert!(instance_map(&preds, &gts, &split(&[0]), ApIntegration::Raw).is_err());
    }

    #[test]
    fn tertile_sizes() {
        let f: BTreeMap<i64, u64> = [10, 9, 8, 3, 2, 1].iter().enumerate().map(|(i, &v)| (i as i64, v)).collect();
        let s = make_tertiles(&f).unwrap();
        assert_eq!(s.assignment[&1], Tertile::Head);
        assert_eq!(s.assignment[&2], Tertile::Common);
        assert_eq!(s.assignment[&4], Tertile::Tail);
        let seven: BTreeMap<i64, u64> = (0..7).map(|c| (c, 5)).collect();
        let s = make_tertiles(&seven).unwrap();
        let count = |t| s.assignment.values().filter(|&&x| x == t).count();
        assert_eq!((count(Tertile::Head), count(Tertile::Common), count(Tertile::Tail)), (3, 2, 2));
        assert_eq!(s.assignment[&0], Tertile::Head);
        assert_eq!(s.assignment[&6], Tertile::Tail);
        assert!(make_tertiles(&(0..2).map(|c| (c, 1)).collect()).is_err());
    }

    #[test]
    fn lowering_a_false_positive_never_hurts() {
        let gts = vec![GroundTruthInstance { instance_id: 1, class_id: 0, region: pts(0..10) }];
        let mut preds = vec![
            Prediction { region: pts(50..60), class_id: 0, confidence: 0.9 },
            Prediction { region: pts(0..10), class_id: 0, confidence: 0.5 },
        ];
        let before = class_ap(&preds, &gts, 0, 0.5, ApIntegration::Raw).unwrap();
        preds[0].confidence = 0.1;
        let after = class_ap(&preds, &gts, 0, 0.5, ApIntegration::Raw).unwrap();
        assert!(after >= before);
        assert_eq!(after, 1.0);
    }
}

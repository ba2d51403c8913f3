use serde::{Deserialize, Serialize};

use super::{Prediction, Region};
use crate::data::ClassVocabulary;
use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid_scalar};

/// How a similarity `s = F·y` becomes a confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scoring {
    /// `sigmoid(t·s + b)`, used for the learned model.
    Sigmoid { t: f64, b: f64 },
    /// Raw cosine, used for the naive baselines.
    Cosine,
}

impl Scoring {
    pub fn confidence(&self, s: f64) -> f64 {
        match *self {
            Scoring::Sigmoid { t, b } => sigmoid_scalar(t * s + b),
            Scoring::Cosine => s,
        }
    }
}

fn rank_desc(a: &(i64, f64), b: &(i64, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// All classes ranked by descending confidence, ties by ascending class id.
pub fn classify(fused: &[f64], vocab: &ClassVocabulary, scoring: Scoring) -> Result<Vec<(i64, f64)>> {
    if vocab.is_empty() {
        return Err(Error::Empty("vocabulary"));
    }
    if fused.len() != vocab.dim() {
        return Err(Error::Data(format!(
            "descriptor dimension {} differs from vocabulary dimension {}",
            fused.len(),
            vocab.dim()
        )));
    }
    let mut ranked: Vec<(i64, f64)> = vocab
        .entries()
        .iter()
        .map(|e| (e.class_id, scoring.confidence(dot(fused, &e.embedding))))
        .collect();
    ranked.sort_by(rank_desc);
    Ok(ranked)
}

/// One argmax prediction per instance.
pub fn top1_predictions(
    instance_ids: &[u64],
    fused: &[Vec<f64>],
    vocab: &ClassVocabulary,
    scoring: Scoring,
) -> Result<Vec<Prediction>> {
    check_lengths(instance_ids, fused)?;
    instance_ids
        .iter()
        .zip(fused)
        .map(|(&id, f)| {
            let (class_id, confidence) = classify(f, vocab, scoring)?[0];
            Ok(Prediction {
                region: Region::Instance(id),
                class_id,
                confidence,
            })
        })
        .collect()
}

/// The `k` globally most confident (instance, class) pairs. Ties go to the
/// earlier instance, then the lower class id.
pub fn topk_predictions(
    instance_ids: &[u64],
    fused: &[Vec<f64>],
    vocab: &ClassVocabulary,
    scoring: Scoring,
    k: usize,
) -> Result<Vec<Prediction>> {
    check_lengths(instance_ids, fused)?;
    let mut all: Vec<(usize, i64, f64)> = Vec::new();
    for (i, f) in fused.iter().enumerate() {
        for (class_id, confidence) in classify(f, vocab, scoring)? {
            all.push((i, class_id, confidence));
        }
    }
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    all.truncate(k);
    Ok(all
        .into_iter()
        .map(|(i, class_id, confidence)| Prediction {
            region: Region::Instance(instance_ids[i]),
            class_id,
            confidence,
        })
        .collect())
}

/// Fraction of instances whose top-1 class is the true class.
pub fn top1_accuracy(
    fused: &[Vec<f64>],
    labels: &[i64],
    vocab: &ClassVocabulary,
    scoring: Scoring,
) -> Result<f64> {
    if fused.is_empty() || fused.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} descriptors for {} labels",
            fused.len(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for (f, &y) in fused.iter().zip(labels) {
        if classify(f, vocab, scoring)?[0].0 == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

fn check_lengths(ids: &[u64], fused: &[Vec<f64>]) -> Result<()> {
    if ids.len() != fused.len() {
        return Err(Error::Contract(format!(
            "{} instance ids for {} descriptors",
            ids.len(),
            fused.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClassEntry;

    fn vocab(rows: &[(i64, [f64; 3])]) -> ClassVocabulary {
        ClassVocabulary::new(
            rows.iter()
                .map(|(c, e)| ClassEntry {
                    class_id: *c,
                    name: c.to_string(),
                    frequency: 1,
                    embedding: e.to_vec(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn matching_prototype_scores_one_half() {
        let v = vocab(&[(0, [1.0, 0.0, 0.0]), (1, [0.0, 1.0, 0.0]), (2, [0.0, 0.0, 1.0])]);
        let r = classify(&[0.0, 1.0, 0.0], &v, Scoring::Sigmoid { t: 10.0, b: -10.0 }).unwrap();
        assert_eq!(r[0].0, 1);
        assert!((r[0].1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lower_class_id() {
        let v = vocab(&[(4, [1.0, 0.0, 0.0]), (2, [1.0, 0.0, 0.0])]);
        let r = classify(&[1.0, 0.0, 0.0], &v, Scoring::Cosine).unwrap();
        assert_eq!(r[0].0, 2);
    }

    #[test]
    fn topk_capacity_and_single() {
        let v = vocab(&[(0, [1.0, 0.0, 0.0]), (1, [0.0, 1.0, 0.0]), (2, [0.0, 0.0, 1.0])]);
        let f = vec![vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]];
        let all = topk_predictions(&[10, 11], &f, &v, Scoring::Cosine, 600).unwrap();
        assert_eq!(all.len(), 6);
        let one = topk_predictions(&[10, 11], &f, &v, Scoring::Cosine, 1).unwrap();
        assert_eq!(one[0].region, Region::Instance(11));
        assert_eq!(one[0].class_id, 2);
        let top1 = top1_predictions(&[10, 11], &f, &v, Scoring::Cosine).unwrap();
        assert_eq!(top1.len(), 2);
        assert_eq!(top1[0].class_id, 1);
        assert!(classify(&[1.0, 0.0, 0.0], &vocab(&[]), Scoring::Cosine).is_err());
    }
}

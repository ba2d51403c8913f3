use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassVocabulary, Dataset, InstanceRecord, ViewObservation};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub views_in: usize,
    /// Unseen target views per instance; 0 when the multiview loss is off.
    pub views_target: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            views_in: 5,
            views_target: 5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.views_in == 0 {
            return Err(Error::Config(
                "batch_size and views_in must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// Indices into the dataset and into each drawn instance's view list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub instances: Vec<usize>,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// `1 / frequency(class)` per instance.
pub fn instance_weights(dataset: &Dataset, vocab: &ClassVocabulary) -> Result<Vec<f64>> {
    dataset
        .instances()
        .iter()
        .map(|r| {
            let entry = vocab
                .get(r.class_id)
                .ok_or_else(|| Error::Data(format!("class {} missing from vocabulary", r.class_id)))?;
            if entry.frequency == 0 {
                return Err(Error::Data(format!(
                    "class {} has zero train frequency",
                    r.class_id
                )));
            }
            Ok(1.0 / entry.frequency as f64)
        })
        .collect()
}

/// Draws instances with replacement proportional to `weights`, then splits
/// views into inputs and unseen targets.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    weights: &[f64],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if weights.len() != dataset.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} instances",
            weights.len(),
            dataset.len()
        )));
    }
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::Data(format!("invalid sampling weights: {e}")))?;
    let per = cfg.views_in + cfg.views_target;
    let mut batch = Batch {
        instances: Vec::with_capacity(cfg.batch_size),
        inputs: Vec::with_capacity(cfg.batch_size),
        targets: Vec::with_capacity(cfg.batch_size),
    };
    for _ in 0..cfg.batch_size {
        let idx = dist.sample(rng);
        let nv = dataset.instances()[idx].views.len();
        let chosen: Vec<usize> = if nv >= per {
            let mut all: Vec<usize> = (0..nv).collect();
            let (picked, _) = all.partial_shuffle(rng, per);
            picked.to_vec()
        } else {
            (0..per).map(|_| rng.random_range(0..nv)).collect()
        };
        batch.instances.push(idx);
        batch.inputs.push(chosen[..cfg.views_in].to_vec());
        batch.targets.push(chosen[cfg.views_in..].to_vec());
    }
    Ok(batch)
}

/// Top-`k` views by descending visibility, ties by ascending view id.
pub fn select_eval_views(instance: &InstanceRecord, k: usize) -> Vec<&ViewObservation> {
    let mut views: Vec<&ViewObservation> = instance.views.iter().collect();
    views.sort_by(|a, b| {
        b.visibility
            .total_cmp(&a.visibility)
            .then(a.view_id.cmp(&b.view_id))
    });
    views.truncate(k);
    views
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClassEntry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(id: u64, class: i64, visibilities: &[f64]) -> InstanceRecord {
        InstanceRecord {
            instance_id: id,
            class_id: class,
            point_count: 1,
            views: visibilities
                .iter()
                .enumerate()
                .map(|(i, &v)| ViewObservation {
                    view_id: i as u32,
                    visibility: v,
                    descriptor: vec![1.0, 0.0],
                })
                .collect(),
        }
    }

    fn vocab(freqs: &[(i64, u64)]) -> ClassVocabulary {
        ClassVocabulary::new(
            freqs
                .iter()
                .map(|&(c, f)| ClassEntry {
                    class_id: c,
                    name: format!("c{c}"),
                    frequency: f,
                    embedding: vec![1.0, 0.0],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn eval_view_selection() {
        let r = instance(0, 0, &[3.0, 9.0, 1.0]);
        let ids: Vec<u32> = select_eval_views(&r, 2).iter().map(|v| v.view_id).collect();
        assert_eq!(ids, vec![1, 0]);
        let flat = instance(0, 0, &[1.0; 6]);
        let ids: Vec<u32> = select_eval_views(&flat, 3).iter().map(|v| v.view_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(select_eval_views(&r, 10).len(), 3);
    }

    #[test]
    fn inverse_frequency_gives_equal_class_mass() {
        let ds = Dataset::new(
            2,
            vec![
                instance(0, 0, &[1.0]),
                instance(1, 0, &[1.0]),
                instance(2, 0, &[1.0]),
                instance(3, 1, &[1.0]),
            ],
        )
        .unwrap();
        let v = vocab(&[(0, 3), (1, 1)]);
        let w = instance_weights(&ds, &v).unwrap();
        let mass_a: f64 = w[..3].iter().sum();
        assert!((mass_a - w[3]).abs() < 1e-15);
        assert!(instance_weights(&ds, &vocab(&[(0, 3), (1, 0)])).is_err());
    }

    #[test]
    fn exact_view_count_uses_every_view() {
        let ds = Dataset::new(2, vec![instance(0, 0, &[1.0; 10])]).unwrap();
        let cfg = SamplerConfig {
            batch_size: 4,
            views_in: 5,
            views_target: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&ds, &[1.0], &cfg, &mut rng).unwrap();
        for (i, t) in b.inputs.iter().zip(&b.targets) {
            let mut all: Vec<usize> = i.iter().chain(t).copied().collect();
            all.sort();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn short_view_lists_sample_with_replacement() {
        let ds = Dataset::new(2, vec![instance(0, 0, &[1.0; 3])]).unwrap();
        let cfg = SamplerConfig {
            batch_size: 8,
            views_in: 5,
            views_target: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&ds, &[1.0], &cfg, &mut rng).unwrap();
        for (i, t) in b.inputs.iter().zip(&b.targets) {
            assert_eq!(i.len(), 5);
            assert_eq!(t.len(), 5);
            assert!(i.iter().chain(t).all(|&v| v < 3));
        }
    }

    #[test]
    fn replay_is_identical() {
        let ds = Dataset::new(
            2,
            (0..5).map(|i| instance(i, 0, &[1.0; 12])).collect(),
        )
        .unwrap();
        let cfg = SamplerConfig {
            batch_size: 16,
            ..Default::default()
        };
        let w = vec![1.0; 5];
        let a = sample_batch(&ds, &w, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_batch(&ds, &w, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(sample_batch(&Dataset::new(2, vec![]).unwrap(), &[], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}

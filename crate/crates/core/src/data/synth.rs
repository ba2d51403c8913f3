//! Synthetic instances whose views carry complementary parts of a class.
//!
//! Each class owns `parts_per_class` orthonormal part vectors and its
//! prototype is their normalized sum. View `v` of an instance shows only part
//! `v mod parts_per_class`, plus a distractor direction shared by every view
//! and Gaussian noise. The distractor is a random mixture of the class
//! prototypes, so averaging views keeps it while a fusion model can learn to
//! remove it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassEntry, ClassVocabulary, Dataset, InstanceRecord, ViewObservation};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub instances_per_class: usize,
    pub views_per_instance: usize,
    pub descriptor_dim: usize,
    pub parts_per_class: usize,
    pub noise_std: f64,
    pub distractor_strength: f64,
    /// Ratio between the largest and smallest class size; 1 is balanced.
    /// Class `c` gets `instances_per_class · imbalance^(−c/(C−1))` instances.
    pub imbalance: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            instances_per_class: 100,
            views_per_instance: 12,
            descriptor_dim: 256,
            parts_per_class: 4,
            noise_std: 0.3,
            distractor_strength: 0.5,
            imbalance: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.instances_per_class == 0
            || self.views_per_instance == 0
            || self.descriptor_dim == 0
            || self.parts_per_class == 0
        {
            return Err(Error::Config("synthetic sizes must be ≥ 1".into()));
        }
        if self.descriptor_dim < self.parts_per_class * self.num_classes {
            return Err(Error::Config(format!(
                "descriptor_dim {} cannot hold {} orthonormal parts ({} classes × {} parts)",
                self.descriptor_dim,
                self.parts_per_class * self.num_classes,
                self.num_classes,
                self.parts_per_class
            )));
        }
        if !(self.noise_std >= 0.0) || !(self.distractor_strength >= 0.0) || !(self.imbalance >= 1.0)
        {
            return Err(Error::Config(
                "noise_std and distractor_strength must be ≥ 0, imbalance ≥ 1".into(),
            ));
        }
        Ok(())
    }

    pub fn class_size(&self, class: usize) -> usize {
        if self.num_classes == 1 || self.imbalance == 1.0 {
            return self.instances_per_class;
        }
        let frac = class as f64 / (self.num_classes - 1) as f64;
        let n = self.instances_per_class as f64 * self.imbalance.powf(-frac);
        (n.round() as usize).max(1)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Modified Gram-Schmidt; random Gaussian rows are independent with
/// probability 1, a degenerate draw is re-drawn.
fn orthonormal_rows(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, d);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        if l2_normalize(&mut v) > 1e-8 {
            basis.push(v);
        }
    }
    basis
}

/// Generates a dataset and its vocabulary; frequencies are the class counts.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<(Dataset, ClassVocabulary)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, p, d) = (cfg.num_classes, cfg.parts_per_class, cfg.descriptor_dim);
    let parts = orthonormal_rows(&mut rng, c * p, d);
    let prototypes: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let mut y = vec![0.0; d];
            for part in &parts[k * p..(k + 1) * p] {
                y.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            }
            l2_normalize(&mut y);
            y
        })
        .collect();
    let mut g = vec![0.0; d];
    for y in &prototypes {
        let w: f64 = rng.sample(StandardNormal);
        g.iter_mut().zip(y).for_each(|(a, b)| *a += w * b);
    }
    l2_normalize(&mut g);

    let mut instances = Vec::new();
    let mut entries = Vec::with_capacity(c);
    for (k, y) in prototypes.iter().enumerate() {
        let size = cfg.class_size(k);
        for _ in 0..size {
            let views = (0..cfg.views_per_instance)
                .map(|v| {
                    let part = &parts[k * p + v % p];
                    let eps = gaussian(&mut rng, d);
                    let mut desc: Vec<f64> = (0..d)
                        .map(|j| part[j] + cfg.distractor_strength * g[j] + cfg.noise_std * eps[j])
                        .collect();
                    if l2_normalize(&mut desc) == 0.0 {
                        desc = part.clone();
                    }
                    ViewObservation {
                        view_id: v as u32,
                        visibility: rng.random::<f64>(),
                        descriptor: desc,
                    }
                })
                .collect();
            instances.push(InstanceRecord {
                instance_id: instances.len() as u64,
                class_id: k as i64,
                point_count: rng.random_range(100..=1000),
                views,
            });
        }
        entries.push(ClassEntry {
            class_id: k as i64,
            name: format!("class_{k:03}"),
            frequency: size as u64,
            embedding: y.clone(),
        });
    }
    Ok((
        Dataset::new(d, instances)?,
        ClassVocabulary::new(entries)?,
    ))
}

/// Deterministic per-class split: a `test_fraction` share of each class
/// (rounded, at least one instance left for training) goes to the test set.
/// The returned vocabulary carries train-split frequencies.
pub fn split_holdout(
    dataset: &Dataset,
    vocab: &ClassVocabulary,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, ClassVocabulary)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} must lie in [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_ids = std::collections::HashSet::new();
    for class in dataset.class_counts().keys() {
        let mut ids: Vec<u64> = dataset
            .instances()
            .iter()
            .filter(|r| r.class_id == *class)
            .map(|r| r.instance_id)
            .collect();
        ids.shuffle(&mut rng);
        let n_test = ((ids.len() as f64 * test_fraction).round() as usize).min(ids.len() - 1);
        test_ids.extend(ids.into_iter().take(n_test));
    }
    let train = dataset.subset(|r| !test_ids.contains(&r.instance_id));
    let test = dataset.subset(|r| test_ids.contains(&r.instance_id));
    let vocab = vocab.with_frequencies_from(&train);
    Ok((train, test, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_classes: 4,
            instances_per_class: 5,
            views_per_instance: 6,
            descriptor_dim: 16,
            parts_per_class: 3,
            ..Default::default()
        }
    }

    #[test]
    fn degenerate_config_reproduces_prototypes() {
        let cfg = SynthConfig {
            parts_per_class: 1,
            noise_std: 0.0,
            distractor_strength: 0.0,
            ..small()
        };
        let (ds, vocab) = gen_synthetic(&cfg).unwrap();
        for r in ds.instances() {
            let y = vocab.embedding(r.class_id).unwrap();
            for v in &r.views {
                assert_eq!(v.descriptor.as_slice(), y);
            }
        }
    }

    #[test]
    fn counts_and_frequencies() {
        let (ds, vocab) = gen_synthetic(&small()).unwrap();
        assert_eq!(ds.len(), 20);
        assert!(ds.instances().iter().all(|r| r.views.len() == 6));
        assert!(vocab.entries().iter().all(|e| e.frequency == 5));
    }

    #[test]
    fn parts_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = orthonormal_rows(&mut rng, 6, 8);
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&rows[i], &rows[j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let write = || {
            let (ds, _) = gen_synthetic(&small()).unwrap();
            let mut buf = Vec::new();
            ds.write_to(&mut buf).unwrap();
            buf
        };
        assert_eq!(write(), write());
    }

    #[test]
    fn infeasible_dimension_rejected() {
        let cfg = SynthConfig {
            descriptor_dim: 11,
            ..small()
        };
        assert!(matches!(gen_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn imbalance_shrinks_later_classes() {
        let cfg = SynthConfig {
            instances_per_class: 100,
            imbalance: 10.0,
            ..small()
        };
        assert_eq!(cfg.class_size(0), 100);
        assert_eq!(cfg.class_size(3), 10);
    }

    #[test]
    fn holdout_split_is_per_class_and_deterministic() {
        let (ds, vocab) = gen_synthetic(&small()).unwrap();
        let (train, test, v) = split_holdout(&ds, &vocab, 0.4, 7).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        assert!(v.entries().iter().all(|e| e.frequency == 3));
        let (train2, _, _) = split_holdout(&ds, &vocab, 0.4, 7).unwrap();
        assert_eq!(train, train2);
    }
}

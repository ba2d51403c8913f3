//! Non-learned fusion of per-view descriptors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    #[serde(rename = "avg")]
    AvgPool,
    #[serde(rename = "l1med")]
    L1Medoid,
    #[serde(rename = "cosmed")]
    CosSimMedoid,
    Learned,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::AvgPool => "avg",
            FusionStrategy::L1Medoid => "l1med",
            FusionStrategy::CosSimMedoid => "cosmed",
            FusionStrategy::Learned => "learned",
        }
    }

    /// Applies a non-learned strategy; `Learned` needs model parameters.
    pub fn apply(self, descriptors: &Tensor) -> Result<Vec<f64>> {
        match self {
            FusionStrategy::AvgPool => avg_pool(descriptors),
            FusionStrategy::L1Medoid => l1_medoid(descriptors),
            FusionStrategy::CosSimMedoid => cos_sim_medoid(descriptors),
            FusionStrategy::Learned => Err(Error::Config(
                "learned fusion requires a checkpoint".into(),
            )),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(FusionStrategy::AvgPool),
            "l1med" => Ok(FusionStrategy::L1Medoid),
            "cosmed" => Ok(FusionStrategy::CosSimMedoid),
            "learned" => Ok(FusionStrategy::Learned),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

fn nonempty(descriptors: &Tensor) -> Result<()> {
    if descriptors.is_empty() || descriptors.rows() == 0 {
        Err(Error::Empty("fusion input views"))
    } else {
        Ok(())
    }
}

/// Component-wise mean, re-normalized to unit length.
pub fn avg_pool(descriptors: &Tensor) -> Result<Vec<f64>> {
    nonempty(descriptors)?;
    let (n, d) = descriptors.dims2();
    if n == 1 {
        return Ok(descriptors.row(0).to_vec());
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(descriptors.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    if (1..n).all(|i| descriptors.row(i) == descriptors.row(0)) {
        return Ok(descriptors.row(0).to_vec());
    }
    if l2_normalize(&mut mean) == 0.0 {
        return Err(Error::Contract("views cancel out; mean is zero".into()));
    }
    Ok(mean)
}

/// Index of the row minimizing the summed score, lowest index on ties.
fn argmin_total(n: usize, score: impl Fn(usize, usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_total = f64::INFINITY;
    for i in 0..n {
        let total: f64 = (0..n).map(|j| score(i, j)).sum();
        if total < best_total {
            best_total = total;
            best = i;
        }
    }
    best
}

pub fn l1_medoid_index(descriptors: &Tensor) -> Result<usize> {
    nonempty(descriptors)?;
    Ok(argmin_total(descriptors.rows(), |i, j| {
        descriptors
            .row(i)
            .iter()
            .zip(descriptors.row(j))
            .map(|(a, b)| (a - b).abs())
            .sum()
    }))
}

pub fn cos_sim_medoid_index(descriptors: &Tensor) -> Result<usize> {
    nonempty(descriptors)?;
    Ok(argmin_total(descriptors.rows(), |i, j| {
        -descriptors
            .row(i)
            .iter()
            .zip(descriptors.row(j))
            .map(|(a, b)| a * b)
            .sum::<f64>()
    }))
}

/// The view with the least total L1 distance to all views.
pub fn l1_medoid(descriptors: &Tensor) -> Result<Vec<f64>> {
    Ok(descriptors.row(l1_medoid_index(descriptors)?).to_vec())
}

/// The view with the greatest total cosine similarity to all views.
pub fn cos_sim_medoid(descriptors: &Tensor) -> Result<Vec<f64>> {
    Ok(descriptors.row(cos_sim_medoid_index(descriptors)?).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn avg_pool_examples() {
        let out = avg_pool(&m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!((out[0] - 0.70711).abs() < 1e-5 && (out[1] - 0.70711).abs() < 1e-5);
        let single = m(&[&[0.6, 0.8]]);
        assert_eq!(avg_pool(&single).unwrap(), vec![0.6, 0.8]);
        let same = m(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        assert_eq!(avg_pool(&same).unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn medoid_examples() {
        let v = [0.6, 0.8];
        let w = [1.0, 0.0];
        assert_eq!(l1_medoid(&m(&[&v, &v, &w])).unwrap(), v.to_vec());
        let line = m(&[&[0.0], &[1.0], &[10.0]]);
        assert_eq!(l1_medoid(&line).unwrap(), vec![1.0]);
        let same = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(cos_sim_medoid_index(&same).unwrap(), 0);
        let set = m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(cos_sim_medoid(&set).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn degenerate_inputs() {
        let opposite = m(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert!(avg_pool(&opposite).is_err());
        assert!("median".parse::<FusionStrategy>().is_err());
        assert_eq!("cosmed".parse::<FusionStrategy>().unwrap(), FusionStrategy::CosSimMedoid);
    }
}

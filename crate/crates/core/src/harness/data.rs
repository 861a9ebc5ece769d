use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SengError};
use crate::optimizer::{Dataset, TargetData};

/// Two Gaussian blobs with unit covariance and means `±μ·𝟙/√dim`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    /// Distance of each mean from the origin.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_test: 256,
            dim: 16,
            separation: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationData {
    pub train: Dataset,
    pub test: Dataset,
    pub classes: usize,
}

impl ClassificationData {
    pub fn input_dim(&self) -> usize {
        self.train.inputs.first().map_or(0, Vec::len)
    }
}

fn blobs(n: usize, dim: usize, mu: f64, rng: &mut ChaCha8Rng) -> Dataset {
    let shift = mu / (dim as f64).sqrt();
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 0 { 1.0 } else { -1.0 };
        inputs.push(
            (0..dim)
                .map(|_| sign * shift + rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        labels.push(label);
    }
    Dataset {
        inputs,
        targets: TargetData::Classes(labels),
    }
}

/// Balanced two-class data; labels alternate so every prefix is balanced.
pub fn synthetic_classification(spec: &SyntheticSpec) -> Result<ClassificationData> {
    if spec.n_train < 2 || spec.dim == 0 {
        return Err(SengError::Parameter(
            "synthetic data needs at least two samples and one feature".into(),
        ));
    }
    if !spec.separation.is_finite() {
        return Err(SengError::Parameter("separation must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = blobs(spec.n_train, spec.dim, spec.separation, &mut rng);
    let test = blobs(spec.n_test, spec.dim, spec.separation, &mut rng);
    Ok(ClassificationData {
        train,
        test,
        classes: 2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_balance() {
        let d = synthetic_classification(&SyntheticSpec::default()).unwrap();
        assert_eq!(d.train.len(), 512);
        assert_eq!(d.input_dim(), 16);
        let TargetData::Classes(labels) = &d.train.targets else {
            panic!("class targets expected")
        };
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 256);
    }

    #[test]
    fn class_means_point_opposite_ways() {
        let spec = SyntheticSpec {
            n_train: 4000,
            separation: 2.0,
            ..Default::default()
        };
        let d = synthetic_classification(&spec).unwrap();
        let mean0: f64 = d.train.inputs.iter().step_by(2).map(|x| x.iter().sum::<f64>()).sum::<f64>() / 2000.0;
        // E[Σ x] = √dim·μ = 8, sd of the estimate √(16/2000) ≈ 0.09
        assert!((mean0 - 8.0).abs() < 0.5, "{mean0}");
    }

    #[test]
    fn seeded() {
        let a = synthetic_classification(&SyntheticSpec::default()).unwrap();
        let b = synthetic_classification(&SyntheticSpec::default()).unwrap();
        assert_eq!(a, b);
    }
}

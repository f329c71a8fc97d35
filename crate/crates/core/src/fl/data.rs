use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::FlError;

/// Labeled points in `dim` dimensions, stored row-major. Labels are 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self, FlError> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(FlError::BadDataset);
        }
        if labels.iter().any(|y| *y != 0.0 && *y != 1.0) || features.iter().any(|v| !v.is_finite()) {
            return Err(FlError::BadDataset);
        }
        Ok(Dataset { dim, features, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.features.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Per-feature mean over all points.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, _) in self.iter() {
            m.iter_mut().zip(x).for_each(|(m, x)| *m += x);
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn concat(parts: &[Dataset]) -> Result<Dataset, FlError> {
        let dim = parts.first().ok_or(FlError::EmptyDataset)?.dim;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim != dim {
                return Err(FlError::BadDataset);
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(dim, features, labels)
    }
}

/// Two unit-variance Gaussian classes whose means are `class_separation`
/// apart along the diagonal direction. Each seed also shifts the whole
/// shard by a random offset orthogonal to that direction, so shards from
/// different seeds have distinct means but share the Bayes boundary.
/// Labels alternate 1, 0, 1, ...
pub fn synth_dataset(seed: u64, n: usize, dim: usize, class_separation: f64) -> Dataset {
    assert!(dim >= 1, "dimension must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = vec![1.0 / (dim as f64).sqrt(); dim];

    let raw: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let along: f64 = raw.iter().zip(&axis).map(|(r, a)| r * a).sum();
    let shift: Vec<f64> = raw.iter().zip(&axis).map(|(r, a)| r - along * a).collect();

    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 { 1.0 } else { 0.0 };
        let sign = if label == 1.0 { 0.5 } else { -0.5 };
        for k in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(sign * class_separation * axis[k] + shift[k] + noise);
        }
        labels.push(label);
    }
    Dataset { dim, features, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::logistic::{accuracy, initial_parameters, local_train};

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_dataset(3, 50, 2, 2.0), synth_dataset(3, 50, 2, 2.0));
        assert_ne!(synth_dataset(3, 50, 2, 2.0), synth_dataset(4, 50, 2, 2.0));
    }

    #[test]
    fn zero_separation_is_chance() {
        let mut total = 0.0;
        for seed in 0..10 {
            let train = synth_dataset(seed, 200, 2, 0.0);
            let test = synth_dataset(seed + 1000, 1000, 2, 0.0);
            let p = local_train(&initial_parameters(2), &train, 50, 0.1).unwrap();
            total += accuracy(&p, &test).unwrap();
        }
        let mean = total / 10.0;
        assert!((mean - 0.5).abs() <= 0.05, "mean accuracy {mean}");
    }

    #[test]
    fn shards_have_distinct_means() {
        let shards: Vec<Dataset> = (1..=3).map(|s| synth_dataset(s, 200, 2, 4.0)).collect();
        let means: Vec<Vec<f64>> = shards.iter().map(Dataset::mean).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let dist: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 0.2, "shards {i},{j} too close: {dist}");
            }
        }
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        assert_eq!(Dataset::new(2, vec![1.0], vec![1.0]), Err(FlError::BadDataset));
        assert_eq!(Dataset::new(1, vec![1.0], vec![0.5]), Err(FlError::BadDataset));
        assert_eq!(Dataset::new(0, vec![], vec![]), Err(FlError::BadDataset));
    }
}

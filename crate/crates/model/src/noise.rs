//! Uniform label noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Probability that a label is replaced.
    pub rate: f64,
    pub seed: u64,
}

/// Replaces each label with probability `rate` by one of the other
/// `classes - 1` classes, chosen uniformly.
pub fn inject_label_noise(labels: &[usize], classes: usize, cfg: &NoiseConfig) -> Result<Vec<usize>, ModelError> {
    if classes < 2 {
        return Err(ModelError::Config("label noise needs at least two classes".into()));
    }
    if !(0.0..=1.0).contains(&cfg.rate) {
        return Err(ModelError::Config(format!("noise rate {} outside [0, 1]", cfg.rate)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(labels
        .iter()
        .map(|&l| {
            if rng.gen::<f64>() < cfg.rate {
                let w = rng.gen_range(0..classes - 1);
                if w >= l {
                    w + 1
                } else {
                    w
                }
            } else {
                l
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
        let cfg = NoiseConfig { rate: 0.0, seed: 1 };
        assert_eq!(inject_label_noise(&labels, 3, &cfg).unwrap(), labels);
    }

    #[test]
    fn binary_full_rate_flips_everything() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let cfg = NoiseConfig { rate: 1.0, seed: 1 };
        let noisy = inject_label_noise(&labels, 2, &cfg).unwrap();
        assert!(noisy.iter().zip(&labels).all(|(a, b)| a != b));
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = NoiseConfig { rate: 0.5, seed: 1 };
        assert!(inject_label_noise(&[0], 1, &cfg).is_err());
        assert!(inject_label_noise(&[3], 3, &cfg).is_err());
        assert!(inject_label_noise(&[0], 3, &NoiseConfig { rate: 1.5, seed: 1 }).is_err());
    }
}

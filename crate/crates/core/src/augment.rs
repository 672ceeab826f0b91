//! Same-label mixup in embedding space.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub alpha: f64,
    pub beta: f64,
    pub virtual_count: usize,
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "Beta parameters must be positive, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// A mixed embedding `λ z_i + (1 − λ) z_j` of two same-label sources.
/// `omega` and `omega_bar` are filled in by calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualSample {
    pub z: Vec<f64>,
    pub label: usize,
    pub lambda: f64,
    /// Indices into the embedding sequence the sample was drawn from.
    pub sources: (usize, usize),
    pub omega: f64,
    pub omega_bar: f64,
}

pub fn sample_beta(alpha: f64, beta: f64, rng: &mut impl Rng) -> Result<f64> {
    let dist = Beta::new(alpha, beta)
        .map_err(|e| Error::Config(format!("Beta({alpha}, {beta}): {e}")))?;
    Ok(dist.sample(rng).clamp(0.0, 1.0))
}

/// Draw `config.virtual_count` samples with λ ~ Beta(α, β).
pub fn generate_virtual_batch(
    embeddings: &[(Vec<f64>, usize)],
    num_classes: usize,
    config: &MixupConfig,
    rng: &mut impl Rng,
) -> Result<Vec<VirtualSample>> {
    config.validate()?;
    let dist = Beta::new(config.alpha, config.beta)
        .map_err(|e| Error::Config(format!("Beta({}, {}): {e}", config.alpha, config.beta)))?;
    generate_with_lambda(embeddings, num_classes, config.virtual_count, rng, |r| {
        dist.sample(r).clamp(0.0, 1.0)
    })
}

/// Mixup with a caller-supplied λ source. A class is chosen with
/// probability N_k / N, then both sources uniformly (with replacement)
/// within it.
pub fn generate_with_lambda<R: Rng>(
    embeddings: &[(Vec<f64>, usize)],
    num_classes: usize,
    count: usize,
    rng: &mut R,
    mut lambda: impl FnMut(&mut R) -> f64,
) -> Result<Vec<VirtualSample>> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, (_, y)) in embeddings.iter().enumerate() {
        if *y >= num_classes {
            return Err(Error::Training(format!("label {y} outside 0..{num_classes}")));
        }
        members[*y].push(i);
    }
    if let Some(k) = members.iter().position(Vec::is_empty) {
        return Err(Error::Training(format!("class {k} has no training embeddings")));
    }
    let n = embeddings.len();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        // Uniform over all embeddings ⇒ class k with probability N_k / N.
        let label = embeddings[rng.random_range(0..n)].1;
        let pool = &members[label];
        let i = pool[rng.random_range(0..pool.len())];
        let j = pool[rng.random_range(0..pool.len())];
        let lam = lambda(rng);
        let z = embeddings[i]
            .0
            .iter()
            .zip(&embeddings[j].0)
            .map(|(a, b)| lam * a + (1.0 - lam) * b)
            .collect();
        out.push(VirtualSample {
            z,
            label,
            lambda: lam,
            sources: (i, j),
            omega: 1.0,
            omega_bar: 1.0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Vec<(Vec<f64>, usize)> {
        vec![
            (vec![0.0, 0.0], 0),
            (vec![2.0, 6.0], 0),
            (vec![5.0, -1.0], 1),
            (vec![1.0, 1.0], 2),
            (vec![-1.0, 3.0], 2),
            (vec![4.0, 4.0], 2),
        ]
    }

    #[test]
    fn beta_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_beta(2.0, 2.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        let (a, b) = (2.0f64, 2.0f64);
        assert!((mean - a / (a + b)).abs() < 0.01, "mean {mean}");
        assert!((var - a * b / ((a + b).powi(2) * (a + b + 1.0))).abs() < 0.005, "var {var}");
        assert!(draws.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_beta(0.0, 1.0, &mut rng).is_err());
        let cfg = MixupConfig { alpha: 2.0, beta: -1.0, virtual_count: 3 };
        assert!(matches!(generate_virtual_batch(&toy(), 3, &cfg, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn lambda_one_reproduces_first_source() {
        let data = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in generate_with_lambda(&data, 3, 200, &mut rng, |_| 1.0).unwrap() {
            assert_eq!(s.z, data[s.sources.0].0);
        }
    }

    #[test]
    fn lambda_half_midpoint() {
        let data = vec![(vec![0.0, 0.0], 0), (vec![2.0, 6.0], 0)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = generate_with_lambda(&data, 1, 400, &mut rng, |_| 0.5).unwrap();
        let mixed = samples.iter().find(|s| s.sources.0 != s.sources.1).unwrap();
        assert_eq!(mixed.z, vec![1.0, 3.0]);
    }

    #[test]
    fn samples_are_pure_and_on_segment() {
        let data = toy();
        let cfg = MixupConfig { alpha: 2.0, beta: 3.0, virtual_count: 500 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in generate_virtual_batch(&data, 3, &cfg, &mut rng).unwrap() {
            let (i, j) = s.sources;
            assert_eq!(data[i].1, s.label);
            assert_eq!(data[j].1, s.label);
            assert!((0.0..=1.0).contains(&s.lambda));
            for (c, zc) in s.z.iter().enumerate() {
                let expected = s.lambda * data[i].0[c] + (1.0 - s.lambda) * data[j].0[c];
                assert!((zc - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_frequencies_follow_counts() {
        let data = toy();
        let cfg = MixupConfig { alpha: 2.0, beta: 2.0, virtual_count: 100_000 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = generate_virtual_batch(&data, 3, &cfg, &mut rng).unwrap();
        let mut freq = [0usize; 3];
        for s in &samples {
            freq[s.label] += 1;
        }
        for (k, expected) in [2.0 / 6.0, 1.0 / 6.0, 3.0 / 6.0].iter().enumerate() {
            let got = freq[k] as f64 / samples.len() as f64;
            assert!((got - expected).abs() < 0.01, "class {k}: {got} vs {expected}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = MixupConfig { alpha: 2.0, beta: 1.0, virtual_count: 50 };
        let a = generate_virtual_batch(&toy(), 3, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_virtual_batch(&toy(), 3, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_class_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = generate_with_lambda(&toy(), 4, 5, &mut rng, |_| 0.5).unwrap_err();
        assert!(err.to_string().contains("class 3"));
    }
}

//! Synthetic clustered data for experiments and tests.
//!
//! Cluster centers and members live in a low-dimensional latent space that
//! a random linear map embeds into the output dimension; isotropic noise is
//! then added in the full space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataio::VectorDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub base_count: usize,
    pub query_count: usize,
    pub dim: usize,
    pub clusters: usize,
    pub latent_dim: usize,
    /// Standard deviation of cluster centers per latent coordinate.
    pub center_scale: f64,
    /// Standard deviation of members around their center per latent
    /// coordinate.
    pub cluster_spread: f64,
    /// Standard deviation of the full-space noise per coordinate.
    pub noise: f64,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            base_count: 10_000,
            query_count: 100,
            dim: 128,
            clusters: 64,
            latent_dim: 32,
            center_scale: 1.0,
            cluster_spread: 1.0,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.clusters == 0 || self.latent_dim == 0 {
            return Err(Error::Config("dim, clusters and latent_dim must be positive".into()));
        }
        for (name, v) in [
            ("center_scale", self.center_scale),
            ("cluster_spread", self.cluster_spread),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

/// Returns `(base, queries)`; both sets are drawn from the same mixture with
/// clusters chosen uniformly per point.
pub fn gaussian_mixture(cfg: &MixtureConfig) -> Result<(VectorDataset, VectorDataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (dim, latent) = (cfg.dim, cfg.latent_dim);
    let embed: Vec<f64> = (0..dim * latent)
        .map(|_| unit.sample(&mut rng) / (latent as f64).sqrt())
        .collect();
    let centers: Vec<f64> = (0..cfg.clusters * latent)
        .map(|_| unit.sample(&mut rng) * cfg.center_scale)
        .collect();
    let pick = Uniform::new(0, cfg.clusters).expect("cluster range");
    let mut sample = |n: usize| -> Result<VectorDataset> {
        let mut values = Vec::with_capacity(n * dim);
        let mut z = vec![0.0; latent];
        for _ in 0..n {
            let c = pick.sample(&mut rng);
            for (l, zl) in z.iter_mut().enumerate() {
                *zl = centers[c * latent + l] + unit.sample(&mut rng) * cfg.cluster_spread;
            }
            for r in 0..dim {
                let row = &embed[r * latent..(r + 1) * latent];
                let x: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                values.push((x + unit.sample(&mut rng) * cfg.noise) as f32);
            }
        }
        VectorDataset::new(n, dim, values)
    };
    let base = sample(cfg.base_count)?;
    let queries = sample(cfg.query_count)?;
    Ok((base, queries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let cfg = MixtureConfig {
            base_count: 50,
            query_count: 5,
            dim: 16,
            latent_dim: 4,
            clusters: 3,
            ..MixtureConfig::default()
        };
        let (b, q) = gaussian_mixture(&cfg).unwrap();
        assert_eq!((b.count(), b.dim(), q.count()), (50, 16, 5));
        assert_eq!(gaussian_mixture(&cfg).unwrap().0, b);
    }
}

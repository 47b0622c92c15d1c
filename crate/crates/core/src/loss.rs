//! Inhomogeneous neighborhood-relationship preserving loss.
//!
//! For a batch of `B` points the loss is
//! `(1/B^2) * sum_ij w_ij * | ||f(x_i) - f(x_j)|| - ||x_i - x_j|| |`
//! with `w_ij = min(alpha, max(beta, -ln(d_ij / boundary)))`, `d_ij` being
//! the original-space distance. Close pairs get weights up to `alpha`; pairs
//! farther apart than `boundary` get the floor `beta`. Weights depend only on
//! the original space and carry no gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::VectorDataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Number of sampled pairs used by default to estimate `boundary`.
pub const DEFAULT_BOUNDARY_PAIRS: usize = 1_000_000;

/// At or below this many points `estimate_boundary` averages all pairs.
pub const EXACT_BOUNDARY_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight cap.
    pub alpha: f64,
    /// Weight floor.
    pub beta: f64,
    /// Mean pairwise distance in the original space.
    pub boundary: f64,
    /// Square the distance gap instead of taking its absolute value.
    #[serde(default)]
    pub squared_gap: bool,
}

impl LossConfig {
    pub fn new(boundary: f64) -> Self {
        LossConfig {
            alpha: 2.0,
            beta: 0.01,
            boundary,
            squared_gap: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta && self.beta < self.alpha) {
            return Err(Error::Config(format!(
                "need 0 < beta < alpha, got beta = {}, alpha = {}",
                self.beta, self.alpha
            )));
        }
        if !(self.boundary > 0.0 && self.boundary.is_finite()) {
            return Err(Error::Config(format!(
                "boundary must be positive, got {}",
                self.boundary
            )));
        }
        Ok(())
    }
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean Euclidean distance between two distinct points: exact over all pairs
/// for up to [`EXACT_BOUNDARY_LIMIT`] points, otherwise over `num_pairs`
/// uniformly sampled unordered pairs.
pub fn estimate_boundary(dataset: &VectorDataset, num_pairs: usize, seed: u64) -> Result<f64> {
    let n = dataset.count();
    if n < 2 {
        return Err(Error::Degenerate(format!("need at least 2 points, got {n}")));
    }
    if num_pairs == 0 {
        return Err(Error::InvalidArgument("num_pairs must be at least 1".into()));
    }
    let mean = if n <= EXACT_BOUNDARY_LIMIT {
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += distance(dataset.row(i), dataset.row(j));
            }
        }
        total / (n * (n - 1) / 2) as f64
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for _ in 0..num_pairs {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            total += distance(dataset.row(i), dataset.row(j));
        }
        total / num_pairs as f64
    };
    if mean <= 0.0 {
        return Err(Error::Degenerate(
            "all points are identical; the mean pairwise distance is 0".into(),
        ));
    }
    Ok(mean)
}

/// `min(alpha, max(beta, -ln(d / boundary)))`; `d = 0` maps to `alpha`.
pub fn pair_weight(d: f64, cfg: &LossConfig) -> f64 {
    let w = -(d / cfg.boundary).ln();
    cfg.alpha.min(cfg.beta.max(w))
}

/// Original-space distances and their weights for every ordered pair of a
/// batch, row-major `B x B`. Diagonal weights are 0.
#[derive(Debug, Clone)]
pub struct PairTargets<T> {
    pub batch: usize,
    pub distances: Vec<T>,
    pub weights: Vec<T>,
}

pub fn pair_targets<T: Scalar>(original: &Tensor<T>, cfg: &LossConfig) -> Result<PairTargets<T>> {
    let s = original.shape();
    if s.len() != 2 {
        return Err(Error::Shape {
            op: "pair_targets",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    let (b, d) = (s[0], s[1]);
    let v = original.data();
    let mut distances = vec![T::zero(); b * b];
    let mut weights = vec![T::zero(); b * b];
    for i in 0..b {
        for j in i + 1..b {
            let dist = v[i * d..(i + 1) * d]
                .iter()
                .zip(&v[j * d..(j + 1) * d])
                .map(|(&x, &y)| {
                    let c = x.as_f64() - y.as_f64();
                    c * c
                })
                .sum::<f64>()
                .sqrt();
            let w = T::lit(pair_weight(dist, cfg));
            let dist = T::lit(dist);
            distances[i * b + j] = dist;
            distances[j * b + i] = dist;
            weights[i * b + j] = w;
            weights[j * b + i] = w;
        }
    }
    Ok(PairTargets {
        batch: b,
        distances,
        weights,
    })
}

/// Records the loss of `compressed` (`B x d_out`) against precomputed
/// targets on `tape`.
pub fn inrp_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    compressed: Var,
    targets: PairTargets<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let b = targets.batch;
    if tape.value(compressed).shape().first() != Some(&b) {
        return Err(Error::Shape {
            op: "inrp_loss",
            lhs: tape.value(compressed).shape().to_vec(),
            rhs: vec![b],
        });
    }
    let dist = tape.pairwise_distances(compressed)?;
    let scale = T::lit(1.0 / (b * b) as f64);
    tape.weighted_gap(dist, targets.distances, targets.weights, scale, cfg.squared_gap)
}

/// Loss of a batch: `original` is `B x d_in`, `compressed` is `B x d_out`.
pub fn batch_inrp_loss<T: Scalar>(original: &Tensor<T>, compressed: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    cfg.validate()?;
    let b = original.shape()[0];
    if compressed.shape()[0] != b {
        return Err(Error::Shape {
            op: "batch_inrp_loss",
            lhs: original.shape().to_vec(),
            rhs: compressed.shape().to_vec(),
        });
    }
    if b < 2 {
        return Err(Error::InvalidArgument(format!("batch of {b} has no pairs")));
    }
    let targets = pair_targets(original, cfg)?;
    let mut tape = Tape::new();
    let c = tape.leaf(compressed.clone());
    let loss = inrp_loss_graph(&mut tape, c, targets, cfg)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss of compressed rows against original rows, evaluated in `f64`.
pub fn dataset_inrp_loss(original: &VectorDataset, compressed: &VectorDataset, cfg: &LossConfig) -> Result<f64> {
    let to64 = |d: &VectorDataset| {
        Tensor::new(
            &[d.count(), d.dim()],
            d.values().iter().map(|&v| f64::from(v)).collect(),
        )
    };
    batch_inrp_loss(&to64(original)?, &to64(compressed)?, cfg)
}

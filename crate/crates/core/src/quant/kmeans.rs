use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::VectorDataset;
use crate::error::{Error, Result};
use crate::metric::l2_squared;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: VectorDataset,
    pub assignments: Vec<u32>,
    /// Sum of squared distances to the assigned centroid, recorded after
    /// each assignment step.
    pub inertia: Vec<f64>,
}

/// Index and squared distance of the closest centroid (lower index on ties).
pub fn nearest_centroid(centroids: &VectorDataset, x: &[f32]) -> (u32, f32) {
    let mut best = (0u32, f32::INFINITY);
    for (c, row) in centroids.rows().enumerate() {
        let d = l2_squared(x, row);
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

/// First `k` points with pairwise distinct values in a seeded random order.
/// When the data has fewer than `k` distinct values the remaining slots
/// repeat the first chosen point.
fn init_centroids(data: &VectorDataset, k: usize, seed: u64) -> Vec<f32> {
    let mut order: Vec<usize> = (0..data.count()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut out = Vec::with_capacity(k * data.dim());
    let mut chosen = 0;
    for i in order {
        if chosen == k {
            break;
        }
        let row = data.row(i);
        if seen.insert(row.iter().map(|x| x.to_bits()).collect()) {
            out.extend_from_slice(row);
            chosen += 1;
        }
    }
    let first = out[..data.dim()].to_vec();
    while chosen < k {
        out.extend_from_slice(&first);
        chosen += 1;
    }
    out
}

/// Lloyd's algorithm. Stops early once assignments no longer change.
/// Clusters left empty are moved onto the point farthest from its centroid.
pub fn kmeans(data: &VectorDataset, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    let (n, dim) = (data.count(), data.dim());
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..={n}")));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    let mut centroids = VectorDataset::new(k, dim, init_centroids(data, k, seed))?;
    let mut assignments = vec![u32::MAX; n];
    let mut inertia = Vec::with_capacity(iters);
    for _ in 0..iters {
        let nearest: Vec<(u32, f32)> = (0..n)
            .into_par_iter()
            .map(|i| nearest_centroid(&centroids, data.row(i)))
            .collect();
        let total: f64 = nearest.iter().map(|&(_, d)| f64::from(d)).sum();
        if let Some(&prev) = inertia.last() {
            debug_assert!(total <= prev * (1.0 + 1e-5) + 1e-12, "k-means inertia rose from {prev} to {total}");
        }
        inertia.push(total);
        let changed = nearest.iter().zip(&assignments).any(|(a, &b)| a.0 != b);
        for (a, &(c, _)) in assignments.iter_mut().zip(&nearest) {
            *a = c;
        }
        if !changed {
            break;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c as usize] += 1;
            for (s, &x) in sums[c as usize * dim..(c as usize + 1) * dim].iter_mut().zip(data.row(i)) {
                *s += f64::from(x);
            }
        }
        let mut values = centroids.into_values();
        let mut far: Vec<usize> = (0..n).collect();
        // Farthest first, lower id on ties.
        far.sort_by(|&a, &b| nearest[b].1.total_cmp(&nearest[a].1).then(a.cmp(&b)));
        let mut far = far.into_iter();
        for c in 0..k {
            let dst = &mut values[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                for (v, s) in dst.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *v = (s / counts[c] as f64) as f32;
                }
            } else if let Some(p) = far.next() {
                dst.copy_from_slice(data.row(p));
            }
        }
        centroids = VectorDataset::new(k, dim, values)?;
    }
    Ok(KMeans {
        centroids,
        assignments,
        inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn k_equals_count_gives_zero_inertia() {
        let data = VectorDataset::from_rows(&[[0.0f32, 1.0], [3.0, 2.0], [-1.0, 5.0]]).unwrap();
        let km = kmeans(&data, 3, 5, 0).unwrap();
        assert_eq!(*km.inertia.last().unwrap(), 0.0);
    }

    #[test]
    fn one_cluster_is_the_mean() {
        let data = VectorDataset::from_rows(&[[0.0f32, 1.0], [3.0, 2.0], [-1.0, 6.0]]).unwrap();
        let km = kmeans(&data, 1, 3, 0).unwrap();
        assert!((km.centroids.row(0)[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((km.centroids.row(0)[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_too_many_clusters() {
        let data = VectorDataset::from_rows(&[[0.0f32]]).unwrap();
        assert!(kmeans(&data, 2, 1, 0).is_err());
    }

    #[test]
    fn inertia_non_increasing() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f32> = (0..2000 * 4).map(|_| r.random()).collect();
        let data = VectorDataset::new(2000, 4, v).unwrap();
        let km = kmeans(&data, 16, 25, 1).unwrap();
        assert!(km.inertia.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6)));
    }
}

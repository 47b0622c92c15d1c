use ccst::eval::{brute_force_knn, recall_at, Recall};
use ccst::hnsw::{HnswConfig, HnswIndex};
use ccst::VectorDataset;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(seed: u64, count: usize, dim: usize) -> VectorDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VectorDataset::new(count, dim, (0..count * dim).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn cfg(m: usize, efc: usize, seed: u64) -> HnswConfig {
    HnswConfig {
        m,
        ef_construction: efc,
        seed,
        ..HnswConfig::default()
    }
}

fn exact(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn build_respects_invariants(seed in any::<u64>(), count in 1usize..150, m in 2usize..8) {
        let idx = HnswIndex::build(uniform(seed, count, 4), cfg(m, 24, seed)).unwrap();
        prop_assert!(idx.check_invariants().is_ok());
        for node in 0..count as u32 {
            for layer in 0..=idx.level(node) {
                let cap = if layer == 0 { 2 * m } else { m };
                prop_assert!(idx.neighbors(node, layer).len() <= cap);
            }
        }
    }
}

#[test]
fn wide_beam_matches_brute_force_on_200_points() {
    let base = uniform(1, 200, 8);
    let queries = uniform(2, 20, 8);
    let idx = HnswIndex::build(base.clone(), cfg(6, 40, 3)).unwrap();
    let (res, _) = idx.search_batch(&queries, 10, 200).unwrap();
    let gt = brute_force_knn(&base, &queries, 10).unwrap();
    for q in 0..20 {
        assert_eq!(res.ids(q), gt.ids(q));
    }
}

#[test]
fn k_beyond_count_saturates() {
    let idx = HnswIndex::build(uniform(4, 12, 3), cfg(4, 16, 0)).unwrap();
    let out = idx.search(&[0.5, 0.5, 0.5], 50, 50).unwrap();
    assert_eq!(out.len(), 12);
    assert!(out.windows(2).all(|w| w[0].1 <= w[1].1));
}

#[test]
fn same_seed_same_graph() {
    let data = uniform(5, 300, 6);
    let a = HnswIndex::build(data.clone(), cfg(5, 30, 9)).unwrap();
    let b = HnswIndex::build(data, cfg(5, 30, 9)).unwrap();
    for n in 0..300u32 {
        assert_eq!(a.level(n), b.level(n));
        for l in 0..=a.level(n) {
            assert_eq!(a.neighbors(n, l), b.neighbors(n, l));
        }
    }
}

#[test]
fn attaching_build_vectors_changes_nothing() {
    let data = uniform(6, 400, 8);
    let queries = uniform(7, 25, 8);
    let plain = HnswIndex::build(data.clone(), cfg(6, 40, 1)).unwrap();
    let mut attached = plain.clone();
    attached.attach_search_vectors(data).unwrap();
    assert_eq!(plain.search_batch(&queries, 10, 30).unwrap().0, attached.search_batch(&queries, 10, 30).unwrap().0);
}

#[test]
fn attached_space_reports_exact_full_distances() {
    let full = uniform(8, 500, 16);
    let small: Vec<f32> = full.rows().flat_map(|r| r[..4].to_vec()).collect();
    let small = VectorDataset::new(500, 4, small).unwrap();
    let mut idx = HnswIndex::build(small, cfg(6, 40, 2)).unwrap();
    idx.attach_search_vectors(full.clone()).unwrap();
    assert_eq!(idx.search_dim(), 16);
    let queries = uniform(9, 10, 16);
    for q in queries.rows() {
        let out = idx.search(q, 10, 40).unwrap();
        assert!(out.windows(2).all(|w| (w[0].1, w[0].0) <= (w[1].1, w[1].0)));
        for (id, d) in out {
            assert!((d - exact(q, full.row(id as usize))).abs() <= 1e-5 * d.max(1.0));
        }
    }
    assert!(idx.search(&[0.0; 4], 5, 10).is_err());
}

#[test]
fn save_load_roundtrip() {
    let data = uniform(10, 250, 5);
    let idx = HnswIndex::build(data.clone(), cfg(5, 30, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.hnsw");
    idx.save(&path).unwrap();
    let back = HnswIndex::load(&path, data, None).unwrap();
    assert_eq!(back.entry_point(), idx.entry_point());
    assert_eq!(back.build_stats(), idx.build_stats());
    let q = uniform(11, 8, 5);
    assert_eq!(idx.search_batch(&q, 5, 20).unwrap().0, back.search_batch(&q, 5, 20).unwrap().0);
    assert!(HnswIndex::load(&path, uniform(12, 249, 5), None).is_err());
}

#[test]
fn recall_is_monotone_in_ef_on_10k_random_points() {
    let base = uniform(13, 10_000, 16);
    let queries = uniform(14, 50, 16);
    let idx = HnswIndex::build(base.clone(), cfg(16, 100, 0)).unwrap();
    let gt = brute_force_knn(&base, &queries, 100).unwrap();
    let recalls: Vec<f64> = [100, 200, 400, 800]
        .iter()
        .map(|&ef| recall_at(&idx.search_batch(&queries, 100, ef).unwrap().0, &gt, Recall::Overlap(100)).unwrap())
        .collect();
    assert!(recalls.windows(2).all(|w| w[1] >= w[0]), "{recalls:?}");
}

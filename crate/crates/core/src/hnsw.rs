//! Hierarchical navigable small world graph.
//!
//! The graph is built from one set of vectors (the build space) and may be
//! searched against a second, id-aligned set of a different dimension (the
//! search space). Building on compressed vectors and searching with the
//! full ones keeps construction cheap while ranking with exact distances.
//! When a search space is attached it is used on every layer.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::dataio::{NeighborLists, VectorDataset};
use crate::error::{Error, Result};
use crate::metric::{l2_squared, Scored};

pub const HNSW_MAGIC: [u8; 4] = *b"HNS1";
const HNSW_VERSION: u32 = 1;
const NO_ENTRY: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HnswConfig {
    /// Neighbor cap on upper layers; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search_default: usize,
    /// Level multiplier; `None` means `1 / ln(m)`.
    pub level_lambda: Option<f64>,
    pub seed: u64,
}

impl Default for HnswConfig {
    fn default() -> Self {
        HnswConfig {
            m: 48,
            ef_construction: 512,
            ef_search_default: 100,
            level_lambda: None,
            seed: 0,
        }
    }
}

impl HnswConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("m must be at least 2, got {}", self.m)));
        }
        if self.ef_construction < self.m {
            return Err(Error::Config(format!(
                "ef_construction ({}) must be at least m ({})",
                self.ef_construction, self.m
            )));
        }
        if self.ef_search_default == 0 {
            return Err(Error::Config("ef_search_default must be positive".into()));
        }
        if let Some(l) = self.level_lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("level_lambda must be positive, got {l}")));
            }
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.level_lambda.unwrap_or(1.0 / (self.m as f64).ln())
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

/// Distance work done by a build or a search.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub distance_computations: u64,
    /// Scalar multiplications inside distance computations
    /// (`dimension` per distance).
    pub multiply_ops: u64,
    /// Nodes whose distance to the query was evaluated (searches only).
    pub visited_nodes: u64,
}

impl DistanceStats {
    fn add(&mut self, other: &DistanceStats) {
        self.distance_computations += other.distance_computations;
        self.multiply_ops += other.multiply_ops;
        self.visited_nodes += other.visited_nodes;
    }
}

struct Visited {
    bits: Vec<u64>,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited {
            bits: vec![0; n.div_ceil(64)],
        }
    }

    /// Marks `id`; returns false if it was already marked.
    #[inline]
    fn insert(&mut self, id: u32) -> bool {
        let (w, b) = (id as usize / 64, id % 64);
        let fresh = self.bits[w] & (1 << b) == 0;
        self.bits[w] |= 1 << b;
        fresh
    }
}

/// Distance source with work counters.
struct Space<'a> {
    vectors: &'a VectorDataset,
    stats: DistanceStats,
}

impl<'a> Space<'a> {
    fn new(vectors: &'a VectorDataset) -> Self {
        Space {
            vectors,
            stats: DistanceStats::default(),
        }
    }

    #[inline]
    fn query_to(&mut self, q: &[f32], id: u32) -> f32 {
        self.stats.distance_computations += 1;
        self.stats.multiply_ops += q.len() as u64;
        l2_squared(q, self.vectors.row(id as usize))
    }

    #[inline]
    fn between(&mut self, a: u32, b: u32) -> f32 {
        let v = self.vectors;
        self.query_to(v.row(a as usize), b)
    }
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    config: HnswConfig,
    levels: Vec<u8>,
    /// `links[node][layer]`
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
    max_level: usize,
    build_vectors: VectorDataset,
    search_vectors: Option<VectorDataset>,
    build_stats: DistanceStats,
}

fn search_layer(
    graph: &[Vec<Vec<u32>>],
    space: &mut Space<'_>,
    query: &[f32],
    entry: &[Scored],
    ef: usize,
    layer: usize,
    visited: &mut Visited,
) -> Vec<Scored> {
    let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
    let mut found: BinaryHeap<Scored> = BinaryHeap::new();
    for &e in entry {
        if visited.insert(e.id) {
            candidates.push(Reverse(e));
            found.push(e);
        }
    }
    while found.len() > ef {
        found.pop();
    }
    while let Some(Reverse(c)) = candidates.pop() {
        if found.len() >= ef {
            if let Some(worst) = found.peek() {
                if c > *worst {
                    break;
                }
            }
        }
        for &n in &graph[c.id as usize][layer] {
            if !visited.insert(n) {
                continue;
            }
            space.stats.visited_nodes += 1;
            let s = Scored {
                dist: space.query_to(query, n),
                id: n,
            };
            if found.len() < ef || s < *found.peek().expect("found is non-empty") {
                candidates.push(Reverse(s));
                found.push(s);
                if found.len() > ef {
                    found.pop();
                }
            }
        }
    }
    found.into_sorted_vec()
}

/// Heuristic neighbor selection: walk candidates nearest-first and keep one
/// only if it is closer to the base than to every neighbor kept so far.
fn select_neighbors(space: &mut Space<'_>, candidates: &[Scored], limit: usize) -> Vec<Scored> {
    let mut kept: Vec<Scored> = Vec::with_capacity(limit);
    for &c in candidates {
        if kept.len() >= limit {
            break;
        }
        let mut good = true;
        for r in &kept {
            if space.between(c.id, r.id) < c.dist {
                good = false;
                break;
            }
        }
        if good {
            kept.push(c);
        }
    }
    kept
}

impl HnswIndex {
    /// Inserts every vector in id order.
    pub fn build(vectors: VectorDataset, config: HnswConfig) -> Result<Self> {
        config.validate()?;
        let n = vectors.count();
        if n == 0 {
            return Err(Error::InvalidArgument("cannot build an index over zero vectors".into()));
        }
        if n >= NO_ENTRY as usize {
            return Err(Error::InvalidArgument(format!("too many vectors: {n}")));
        }
        let lambda = config.lambda();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let levels: Vec<u8> = (0..n)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                ((-u.ln() * lambda).floor() as usize).min(u8::MAX as usize) as u8
            })
            .collect();
        let mut links: Vec<Vec<Vec<u32>>> = levels
            .iter()
            .map(|&l| vec![Vec::new(); l as usize + 1])
            .collect();

        let mut space = Space::new(&vectors);
        let mut entry = 0u32;
        let mut max_level = levels[0] as usize;
        for q in 1..n as u32 {
            let level = levels[q as usize] as usize;
            let query = vectors.row(q as usize);
            let mut eps = vec![Scored {
                dist: space.query_to(query, entry),
                id: entry,
            }];
            for layer in (level + 1..=max_level).rev() {
                let mut visited = Visited::new(n);
                eps = search_layer(&links, &mut space, query, &eps, 1, layer, &mut visited);
            }
            for layer in (0..=level.min(max_level)).rev() {
                let mut visited = Visited::new(n);
                let w = search_layer(
                    &links,
                    &mut space,
                    query,
                    &eps,
                    config.ef_construction,
                    layer,
                    &mut visited,
                );
                let chosen = select_neighbors(&mut space, &w, config.m);
                links[q as usize][layer] = chosen.iter().map(|s| s.id).collect();
                let cap = config.cap(layer);
                for s in &chosen {
                    let e = s.id as usize;
                    links[e][layer].push(q);
                    if links[e][layer].len() > cap {
                        let mut cands: Vec<Scored> = links[e][layer]
                            .iter()
                            .map(|&id| Scored {
                                dist: space.between(e as u32, id),
                                id,
                            })
                            .collect();
                        cands.sort();
                        let kept = select_neighbors(&mut space, &cands, cap);
                        links[e][layer] = kept.iter().map(|s| s.id).collect();
                    }
                }
                eps = w;
            }
            if level > max_level {
                max_level = level;
                entry = q;
            }
        }
        let mut build_stats = space.stats;
        build_stats.visited_nodes = 0;
        Ok(HnswIndex {
            config,
            levels,
            links,
            entry,
            max_level,
            build_vectors: vectors,
            search_vectors: None,
            build_stats,
        })
    }

    pub fn config(&self) -> &HnswConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn entry_point(&self) -> u32 {
        self.entry
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn level(&self, node: u32) -> usize {
        self.levels[node as usize] as usize
    }

    /// Neighbors of `node` on `layer` (empty above the node's level).
    pub fn neighbors(&self, node: u32, layer: usize) -> &[u32] {
        self.links[node as usize]
            .get(layer)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn build_stats(&self) -> DistanceStats {
        self.build_stats
    }

    pub fn build_vectors(&self) -> &VectorDataset {
        &self.build_vectors
    }

    pub fn search_vectors(&self) -> Option<&VectorDataset> {
        self.search_vectors.as_ref()
    }

    /// Dimension queries must have.
    pub fn search_dim(&self) -> usize {
        self.active().dim()
    }

    fn active(&self) -> &VectorDataset {
        self.search_vectors.as_ref().unwrap_or(&self.build_vectors)
    }

    /// Scores every later search against `vectors`, which must be id-aligned
    /// with the build vectors. The graph is not changed.
    pub fn attach_search_vectors(&mut self, vectors: VectorDataset) -> Result<()> {
        if vectors.count() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "search vectors hold {} points but the index has {}",
                vectors.count(),
                self.len()
            )));
        }
        self.search_vectors = Some(vectors);
        Ok(())
    }

    pub fn detach_search_vectors(&mut self) -> Option<VectorDataset> {
        self.search_vectors.take()
    }

    /// Up to `k` `(id, euclidean distance)` pairs, nearest first. The layer-0
    /// beam is `max(ef, k)` wide.
    pub fn search(&self, query: &[f32], k: usize, ef: usize) -> Result<Vec<(u32, f32)>> {
        self.search_with_stats(query, k, ef).map(|(r, _)| r)
    }

    pub fn search_with_stats(&self, query: &[f32], k: usize, ef: usize) -> Result<(Vec<(u32, f32)>, DistanceStats)> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let vectors = self.active();
        if query.len() != vectors.dim() {
            return Err(Error::DimMismatch {
                expected: vectors.dim(),
                actual: query.len(),
            });
        }
        let n = self.len();
        let mut space = Space::new(vectors);
        let mut eps = vec![Scored {
            dist: space.query_to(query, self.entry),
            id: self.entry,
        }];
        space.stats.visited_nodes += 1;
        for layer in (1..=self.max_level).rev() {
            let mut visited = Visited::new(n);
            eps = search_layer(&self.links, &mut space, query, &eps, 1, layer, &mut visited);
        }
        let mut visited = Visited::new(n);
        let found = search_layer(&self.links, &mut space, query, &eps, ef.max(k), 0, &mut visited);
        let out = found.iter().take(k).map(|s| (s.id, s.dist.sqrt())).collect();
        Ok((out, space.stats))
    }

    /// Searches every query in parallel; rows are independent so the output
    /// does not depend on the thread count.
    pub fn search_batch(&self, queries: &VectorDataset, k: usize, ef: usize) -> Result<(NeighborLists, DistanceStats)> {
        let rows = (0..queries.count())
            .into_par_iter()
            .map(|q| self.search_with_stats(queries.row(q), k, ef))
            .collect::<Result<Vec<_>>>()?;
        let mut total = DistanceStats::default();
        let mut lists = Vec::with_capacity(rows.len());
        for (r, s) in rows {
            total.add(&s);
            lists.push(r);
        }
        Ok((NeighborLists::from_rows(lists), total))
    }

    /// Structural invariants: degree caps, valid ids, no self loops, entry at
    /// the top level.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.len();
        let bad = |msg: String| Err(Error::Degenerate(msg));
        if self.entry as usize >= n || self.level(self.entry) != self.max_level {
            return bad(format!("entry point {} is not on the top level", self.entry));
        }
        for (node, layers) in self.links.iter().enumerate() {
            if layers.len() != self.levels[node] as usize + 1 {
                return bad(format!("node {node} has {} layers", layers.len()));
            }
            for (layer, nb) in layers.iter().enumerate() {
                if nb.len() > self.config.cap(layer) {
                    return bad(format!("node {node} exceeds the degree cap on layer {layer}"));
                }
                for &x in nb {
                    if x as usize >= n || x as usize == node || self.level(x) < layer {
                        return bad(format!("node {node} has an invalid link {x} on layer {layer}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Saves the graph only; vectors are supplied again on load.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let c = &self.config;
        let mut e = Encoder::new(&HNSW_MAGIC, HNSW_VERSION);
        e.usize32(c.m);
        e.usize32(c.ef_construction);
        e.usize32(c.ef_search_default);
        e.f64(c.lambda());
        e.u64(c.seed);
        e.usize32(self.len());
        e.usize32(self.build_vectors.dim());
        e.u32(self.entry);
        e.usize32(self.max_level);
        e.u64(self.build_stats.distance_computations);
        e.u64(self.build_stats.multiply_ops);
        e.bytes(&self.levels);
        for layer in 0..=self.max_level {
            let mut offsets = Vec::with_capacity(self.len() + 1);
            let mut ids = Vec::new();
            offsets.push(0u32);
            for node in 0..self.len() as u32 {
                ids.extend_from_slice(self.neighbors(node, layer));
                offsets.push(ids.len() as u32);
            }
            e.u32s(&offsets);
            e.usize32(ids.len());
            e.u32s(&ids);
        }
        e.write_to(path.as_ref())
    }

    /// Loads a graph saved by [`HnswIndex::save`] and binds it to `build`
    /// (and optionally `search`) vectors.
    pub fn load(path: impl AsRef<Path>, build: VectorDataset, search: Option<VectorDataset>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = crate::codec::read_file(path)?;
        let mut d = Decoder::open(path, &bytes, &HNSW_MAGIC, HNSW_VERSION)?;
        let config = HnswConfig {
            m: d.usize32()?,
            ef_construction: d.usize32()?,
            ef_search_default: d.usize32()?,
            level_lambda: Some(d.f64()?),
            seed: d.u64()?,
        };
        config.validate().map_err(|e| d.err(format!("invalid config: {e}")))?;
        let count = d.usize32()?;
        let dim = d.usize32()?;
        let entry = d.u32()?;
        let max_level = d.usize32()?;
        let build_stats = DistanceStats {
            distance_computations: d.u64()?,
            multiply_ops: d.u64()?,
            visited_nodes: 0,
        };
        if count == 0 {
            return Err(d.err("index has no nodes"));
        }
        let levels = d.bytes(count)?.to_vec();
        if max_level > u8::MAX as usize {
            return Err(d.err(format!("top level {max_level} out of range")));
        }
        let mut links: Vec<Vec<Vec<u32>>> = levels
            .iter()
            .map(|&l| vec![Vec::new(); l as usize + 1])
            .collect();
        for layer in 0..=max_level {
            let offsets = d.u32s(count + 1)?;
            let id_count = d.usize32()?;
            let ids = d.u32s(id_count)?;
            if offsets[count] as usize != ids.len() {
                return Err(d.err(format!("malformed adjacency for layer {layer}")));
            }
            for node in 0..count {
                let (a, b) = (offsets[node] as usize, offsets[node + 1] as usize);
                if a > b || b > ids.len() {
                    return Err(d.err(format!("malformed adjacency offsets for layer {layer}")));
                }
                if a == b {
                    continue;
                }
                if (levels[node] as usize) < layer {
                    return Err(d.err(format!("node {node} has links above its level")));
                }
                links[node][layer] = ids[a..b].to_vec();
            }
        }
        d.finish()?;
        if build.count() != count || build.dim() != dim {
            return Err(Error::InvalidArgument(format!(
                "index was built over {count} vectors of dimension {dim}, got {} of dimension {}",
                build.count(),
                build.dim()
            )));
        }
        let mut index = HnswIndex {
            config,
            levels,
            links,
            entry,
            max_level,
            build_vectors: build,
            search_vectors: None,
            build_stats,
        };
        index
            .check_invariants()
            .map_err(|e| Error::format(path, 0, format!("corrupt graph: {e}")))?;
        if let Some(s) = search {
            index.attach_search_vectors(s)?;
        }
        Ok(index)
    }
}

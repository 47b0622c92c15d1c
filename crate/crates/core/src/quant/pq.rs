use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use crate::codec::{read_file, Decoder, Encoder};
use crate::dataio::{NeighborLists, VectorDataset};
use crate::error::{Error, Result};
use crate::metric::{l2_squared, Scored, TopK};

/// Centroids per subquantizer (8-bit codes).
pub const PQ_CENTROIDS: usize = 256;

pub const PQ_MAGIC: [u8; 4] = *b"PQC1";
const PQ_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PqConfig {
    /// Number of subquantizers; must divide the vector dimension.
    pub m: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for PqConfig {
    fn default() -> Self {
        PqConfig { m: 8, iters: 25, seed: 0 }
    }
}

/// `m` codebooks of 256 centroids, one per contiguous subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    dim: usize,
    m: usize,
    /// `m x 256 x sub_dim`
    centroids: Vec<f32>,
}

impl PqCodebook {
    /// Runs k-means in every subspace. With fewer than 256 training points
    /// the spare centroids repeat existing ones; lookups prefer the lower
    /// code so the repeats are never emitted.
    pub fn train(data: &VectorDataset, cfg: &PqConfig) -> Result<Self> {
        let (n, dim) = (data.count(), data.dim());
        if cfg.m == 0 || dim == 0 || dim % cfg.m != 0 {
            return Err(Error::InvalidArgument(format!(
                "m = {} does not divide the dimension {dim}",
                cfg.m
            )));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("cannot train on zero vectors".into()));
        }
        let sub = dim / cfg.m;
        let k = PQ_CENTROIDS.min(n);
        let books = (0..cfg.m)
            .map(|j| {
                let part: Vec<f32> = data.rows().flat_map(|r| r[j * sub..(j + 1) * sub].iter().copied()).collect();
                let part = VectorDataset::new(n, sub, part)?;
                let km = kmeans(&part, k, cfg.iters.max(1), cfg.seed.wrapping_add(j as u64))?;
                let mut c = km.centroids.into_values();
                let first = c[..sub].to_vec();
                while c.len() < PQ_CENTROIDS * sub {
                    c.extend_from_slice(&first);
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PqCodebook {
            dim,
            m: cfg.m,
            centroids: books.concat(),
        })
    }

    pub fn from_centroids(dim: usize, m: usize, centroids: Vec<f32>) -> Result<Self> {
        if m == 0 || !dim.is_multiple_of(m) || centroids.len() != dim * PQ_CENTROIDS || centroids.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("malformed PQ codebook".into()));
        }
        Ok(PqCodebook { dim, m, centroids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.m
    }

    pub fn centroid(&self, sub: usize, code: u8) -> &[f32] {
        let s = self.sub_dim();
        let start = (sub * PQ_CENTROIDS + code as usize) * s;
        &self.centroids[start..start + s]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: d,
            });
        }
        Ok(())
    }

    /// `count x m` codes, row-major.
    pub fn encode(&self, data: &VectorDataset) -> Result<Vec<u8>> {
        if data.is_empty() {
            return Ok(Vec::new());
        }
        self.check_dim(data.dim())?;
        let m = self.m;
        let mut codes = vec![0u8; data.count() * m];
        codes
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, c)| self.encode_nearest(data.row(i), c));
        Ok(codes)
    }

    fn encode_nearest(&self, x: &[f32], out: &mut [u8]) {
        let s = self.sub_dim();
        for (j, o) in out.iter_mut().enumerate() {
            let xs = &x[j * s..(j + 1) * s];
            let mut best = (0usize, f32::INFINITY);
            for c in 0..PQ_CENTROIDS {
                let d = l2_squared(xs, self.centroid(j, c as u8));
                if d < best.1 {
                    best = (c, d);
                }
            }
            *o = best.0 as u8;
        }
    }

    pub fn decode(&self, codes: &[u8]) -> Result<VectorDataset> {
        if !codes.len().is_multiple_of(self.m) {
            return Err(Error::InvalidArgument(format!(
                "{} code bytes do not form rows of {}",
                codes.len(),
                self.m
            )));
        }
        let mut values = Vec::with_capacity(codes.len() / self.m * self.dim);
        for row in codes.chunks(self.m) {
            for (j, &c) in row.iter().enumerate() {
                values.extend_from_slice(self.centroid(j, c));
            }
        }
        VectorDataset::new(codes.len() / self.m, self.dim, values)
    }

    /// `m x 256` squared distances from the query's subvectors to every
    /// centroid.
    pub fn distance_table(&self, query: &[f32]) -> Result<Vec<f32>> {
        self.check_dim(query.len())?;
        let s = self.sub_dim();
        let mut table = vec![0.0f32; self.m * PQ_CENTROIDS];
        for j in 0..self.m {
            let q = &query[j * s..(j + 1) * s];
            for c in 0..PQ_CENTROIDS {
                table[j * PQ_CENTROIDS + c] = l2_squared(q, self.centroid(j, c as u8));
            }
        }
        Ok(table)
    }

    /// Squared distance between the query behind `table` and the vector
    /// that `code` reconstructs.
    #[inline]
    pub fn adc_distance(&self, table: &[f32], code: &[u8]) -> f32 {
        let mut d = 0.0f32;
        for (j, &c) in code.iter().enumerate() {
            d += table[j * PQ_CENTROIDS + c as usize];
        }
        d
    }

    /// Exhaustive ADC scan of `codes`; `ids[i]` names the i-th code row.
    pub(crate) fn scan(&self, table: &[f32], codes: &[u8], ids: impl Iterator<Item = u32>, top: &mut TopK) {
        for (code, id) in codes.chunks_exact(self.m).zip(ids) {
            top.push(Scored {
                dist: self.adc_distance(table, code),
                id,
            });
        }
    }

    pub(crate) fn write(&self, e: &mut Encoder) {
        e.usize32(self.dim);
        e.usize32(self.m);
        e.f32s(&self.centroids);
    }

    pub(crate) fn read(d: &mut Decoder<'_>) -> Result<Self> {
        let dim = d.usize32()?;
        let m = d.usize32()?;
        if m == 0 || dim == 0 || dim % m != 0 {
            return Err(d.err(format!("invalid PQ layout: dim {dim}, m {m}")));
        }
        let centroids = d.f32s(dim * PQ_CENTROIDS)?;
        PqCodebook::from_centroids(dim, m, centroids).map_err(|e| d.err(e.to_string()))
    }
}

/// Flat PQ index: every vector's code scanned with ADC.
#[derive(Debug, Clone, PartialEq)]
pub struct PqIndex {
    codebook: PqCodebook,
    codes: Vec<u8>,
}

impl PqIndex {
    pub fn build(data: &VectorDataset, cfg: &PqConfig) -> Result<Self> {
        let codebook = PqCodebook::train(data, cfg)?;
        let codes = codebook.encode(data)?;
        Ok(PqIndex { codebook, codes })
    }

    pub fn from_parts(codebook: PqCodebook, codes: Vec<u8>) -> Result<Self> {
        if !codes.len().is_multiple_of(codebook.m()) {
            return Err(Error::InvalidArgument("code length is not a multiple of m".into()));
        }
        Ok(PqIndex { codebook, codes })
    }

    pub fn codebook(&self) -> &PqCodebook {
        &self.codebook
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.codebook.m()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Top `k` by ADC distance; reported distances are square roots.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<(u32, f32)>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let table = self.codebook.distance_table(query)?;
        let mut top = TopK::new(k);
        self.codebook.scan(&table, &self.codes, 0u32.., &mut top);
        Ok(top.into_sorted().iter().map(|s| (s.id, s.dist.sqrt())).collect())
    }

    pub fn search_batch(&self, queries: &VectorDataset, k: usize) -> Result<NeighborLists> {
        let rows = (0..queries.count())
            .into_par_iter()
            .map(|q| self.search(queries.row(q), k))
            .collect::<Result<Vec<_>>>()?;
        Ok(NeighborLists::from_rows(rows))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut e = Encoder::new(&PQ_MAGIC, PQ_VERSION);
        self.codebook.write(&mut e);
        e.usize32(self.len());
        e.bytes(&self.codes);
        e.write_to(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let mut d = Decoder::open(path, &bytes, &PQ_MAGIC, PQ_VERSION)?;
        let codebook = PqCodebook::read(&mut d)?;
        let n = d.usize32()?;
        let codes = d.bytes(n * codebook.m())?.to_vec();
        d.finish()?;
        Ok(PqIndex { codebook, codes })
    }
}

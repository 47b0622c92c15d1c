//! Readers and writers for the `.fvecs` / `.bvecs` / `.ivecs` formats used by
//! the standard ANN benchmarks, and seeded query splits.
//!
//! Every record is a little-endian `i32` dimension followed by that many
//! payload elements (`f32`, `u8` or `i32`). All records in a file share one
//! dimension.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f32` feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorDataset {
    count: usize,
    dim: usize,
    values: Vec<f32>,
}

impl VectorDataset {
    pub fn new(count: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != count * dim {
            return Err(Error::InvalidArgument(format!(
                "{} values cannot form a {count}x{dim} dataset",
                values.len()
            )));
        }
        if count > 0 && dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value at row {}, column {}",
                i / dim,
                i % dim
            )));
        }
        Ok(VectorDataset { count, dim, values })
    }

    /// An empty dataset. Its dimension is unknown (reported as 0) unless given.
    pub fn empty(dim: usize) -> Self {
        VectorDataset {
            count: 0,
            dim,
            values: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Ok(Self::empty(0));
        };
        let dim = first.as_ref().len();
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has dimension {} but row 0 has {dim}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, values)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        let dim = self.dim.max(1);
        self.values.chunks_exact(dim).take(self.count)
    }

    /// Rows `indices`, in the order given.
    pub fn select(&self, indices: &[usize]) -> VectorDataset {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        VectorDataset {
            count: indices.len(),
            dim: self.dim,
            values,
        }
    }

    pub fn scaled(&self, c: f32) -> VectorDataset {
        VectorDataset {
            count: self.count,
            dim: self.dim,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// k nearest-neighbor ids per query, optionally with their distances.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborLists {
    query_count: usize,
    k: usize,
    ids: Vec<u32>,
    distances: Option<Vec<f32>>,
}

impl NeighborLists {
    pub fn new(query_count: usize, k: usize, ids: Vec<u32>, distances: Option<Vec<f32>>) -> Result<Self> {
        if ids.len() != query_count * k {
            return Err(Error::InvalidArgument(format!(
                "{} ids cannot form {query_count} rows of {k}",
                ids.len()
            )));
        }
        if let Some(d) = &distances {
            if d.len() != ids.len() {
                return Err(Error::InvalidArgument(
                    "distances and ids differ in length".into(),
                ));
            }
        }
        Ok(NeighborLists {
            query_count,
            k,
            ids,
            distances,
        })
    }

    /// Builds lists from ragged rows by truncating every row to the shortest
    /// row length.
    pub fn from_rows(rows: Vec<Vec<(u32, f32)>>) -> Self {
        let k = rows.iter().map(Vec::len).min().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * k);
        let mut dists = Vec::with_capacity(rows.len() * k);
        for r in &rows {
            for &(id, d) in &r[..k] {
                ids.push(id);
                dists.push(d);
            }
        }
        NeighborLists {
            query_count: rows.len(),
            k,
            ids,
            distances: Some(dists),
        }
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ids(&self, q: usize) -> &[u32] {
        &self.ids[q * self.k..(q + 1) * self.k]
    }

    pub fn distances(&self, q: usize) -> Option<&[f32]> {
        self.distances
            .as_ref()
            .map(|d| &d[q * self.k..(q + 1) * self.k])
    }

    pub fn all_ids(&self) -> &[u32] {
        &self.ids
    }

    /// Checks that every id is below `base_count` and distances are sorted.
    pub fn validate(&self, base_count: usize) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&id| id as usize >= base_count) {
            return Err(Error::InvalidArgument(format!(
                "neighbor id {bad} out of range for {base_count} base vectors"
            )));
        }
        for q in 0..self.query_count {
            if let Some(d) = self.distances(q) {
                if d.windows(2).any(|w| w[0] > w[1]) {
                    return Err(Error::InvalidArgument(format!(
                        "distances of query {q} are not sorted"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Payload {
    F32,
    U8,
    I32,
}

impl Payload {
    fn width(self) -> usize {
        match self {
            Payload::U8 => 1,
            Payload::F32 | Payload::I32 => 4,
        }
    }
}

/// Splits a vecs byte stream into (dim, records) without interpreting the
/// payload.
fn parse_records<'a>(path: &Path, bytes: &'a [u8], payload: Payload) -> Result<(usize, Vec<&'a [u8]>)> {
    let mut records = Vec::new();
    let mut dim = None;
    let mut pos = 0usize;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            return Err(Error::format(path, pos as u64, "truncated dimension header"));
        }
        let d = i32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        if d <= 0 {
            return Err(Error::format(path, pos as u64, format!("invalid dimension {d}")));
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(first) if first != d => {
                return Err(Error::format(
                    path,
                    pos as u64,
                    format!("record dimension {d} differs from first record dimension {first}"),
                ))
            }
            _ => {}
        }
        let len = d * payload.width();
        let start = pos + 4;
        if bytes.len() - start < len {
            return Err(Error::format(
                path,
                pos as u64,
                format!(
                    "truncated record: needs {len} payload bytes, {} available",
                    bytes.len() - start
                ),
            ));
        }
        records.push(&bytes[start..start + len]);
        pos = start + len;
    }
    Ok((dim.unwrap_or(0), records))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_fvecs(path: impl AsRef<Path>) -> Result<VectorDataset> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (dim, records) = parse_records(path, &bytes, Payload::F32)?;
    let mut values = Vec::with_capacity(records.len() * dim);
    for (r, rec) in records.iter().enumerate() {
        for (c, chunk) in rec.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                let offset = (r * (4 + 4 * dim) + 4 + 4 * c) as u64;
                return Err(Error::format(path, offset, "non-finite value"));
            }
            values.push(v);
        }
    }
    Ok(VectorDataset {
        count: records.len(),
        dim,
        values,
    })
}

/// Reads 8-bit vectors, widening every component to `f32`.
pub fn read_bvecs(path: impl AsRef<Path>) -> Result<VectorDataset> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (dim, records) = parse_records(path, &bytes, Payload::U8)?;
    let values = records
        .iter()
        .flat_map(|rec| rec.iter().map(|&b| f32::from(b)))
        .collect();
    Ok(VectorDataset {
        count: records.len(),
        dim,
        values,
    })
}

pub fn read_ivecs(path: impl AsRef<Path>) -> Result<NeighborLists> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (k, records) = parse_records(path, &bytes, Payload::I32)?;
    let mut ids = Vec::with_capacity(records.len() * k);
    for (r, rec) in records.iter().enumerate() {
        for (c, chunk) in rec.chunks_exact(4).enumerate() {
            let v = i32::from_le_bytes(chunk.try_into().unwrap());
            if v < 0 {
                let offset = (r * (4 + 4 * k) + 4 + 4 * c) as u64;
                return Err(Error::format(path, offset, format!("negative id {v}")));
            }
            ids.push(v as u32);
        }
    }
    Ok(NeighborLists {
        query_count: records.len(),
        k,
        ids,
        distances: None,
    })
}

/// Reads `.fvecs` or `.bvecs` according to the file extension.
pub fn read_vectors(path: impl AsRef<Path>) -> Result<VectorDataset> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("bvecs") => read_bvecs(path),
        _ => read_fvecs(path),
    }
}

fn header(dim: usize) -> [u8; 4] {
    i32::try_from(dim)
        .expect("dimension exceeds i32 range")
        .to_le_bytes()
}

pub fn write_fvecs(dataset: &VectorDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(dataset.count * (4 + 4 * dataset.dim));
    for row in dataset.rows() {
        out.extend_from_slice(&header(dataset.dim));
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_ivecs(lists: &NeighborLists, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(lists.query_count * (4 + 4 * lists.k));
    for q in 0..lists.query_count {
        out.extend_from_slice(&header(lists.k));
        for &id in lists.ids(q) {
            out.extend_from_slice(&(id as i32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Holds out `query_count` seeded random rows as queries. Both halves keep the
/// original row order.
pub fn split_queries(
    dataset: &VectorDataset,
    query_count: usize,
    seed: u64,
) -> Result<(VectorDataset, VectorDataset)> {
    if query_count == 0 || query_count >= dataset.count {
        return Err(Error::InvalidArgument(format!(
            "query count {query_count} must be in 1..{}",
            dataset.count
        )));
    }
    let mut perm: Vec<usize> = (0..dataset.count).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut queries = perm[..query_count].to_vec();
    let mut base = perm[query_count..].to_vec();
    queries.sort_unstable();
    base.sort_unstable();
    Ok((dataset.select(&base), dataset.select(&queries)))
}

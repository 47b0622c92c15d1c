use std::path::Path;

use rayon::prelude::*;

use crate::codec::{read_file, Decoder, Encoder};
use crate::dataio::{NeighborLists, VectorDataset};
use crate::error::{Error, Result};
use crate::metric::{Scored, TopK};

pub const SQ_MAGIC: [u8; 4] = *b"SQP1";
const SQ_VERSION: u32 = 1;

/// Per-dimension affine map of `[min, max]` onto the codes `0..=255`.
#[derive(Debug, Clone, PartialEq)]
pub struct SqParams {
    min: Vec<f32>,
    max: Vec<f32>,
    /// Squared step `((max - min) / 255)^2` per dimension.
    step_sq: Vec<f32>,
}

impl SqParams {
    pub fn train(data: &VectorDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("cannot train on zero vectors".into()));
        }
        let dim = data.dim();
        let mut min = vec![f32::INFINITY; dim];
        let mut max = vec![f32::NEG_INFINITY; dim];
        for row in data.rows() {
            for (j, &x) in row.iter().enumerate() {
                min[j] = min[j].min(x);
                max[j] = max[j].max(x);
            }
        }
        Self::from_bounds(min, max)
    }

    pub fn from_bounds(min: Vec<f32>, max: Vec<f32>) -> Result<Self> {
        if min.len() != max.len() || min.is_empty() {
            return Err(Error::InvalidArgument("bounds must be non-empty and equally long".into()));
        }
        if min.iter().zip(&max).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidArgument("every dimension needs finite min <= max".into()));
        }
        let step_sq = min
            .iter()
            .zip(&max)
            .map(|(&a, &b)| {
                let s = (f64::from(b) - f64::from(a)) / 255.0;
                (s * s) as f32
            })
            .collect();
        Ok(SqParams { min, max, step_sq })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn min(&self) -> &[f32] {
        &self.min
    }

    pub fn max(&self) -> &[f32] {
        &self.max
    }

    /// Rounds to the nearest code and clamps; constant dimensions encode
    /// to 0.
    pub fn encode_one(&self, x: &[f32], out: &mut [u8]) {
        for j in 0..self.dim() {
            let (lo, hi) = (f64::from(self.min[j]), f64::from(self.max[j]));
            out[j] = if hi > lo {
                ((f64::from(x[j]) - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
        }
    }

    pub fn encode(&self, data: &VectorDataset) -> Result<Vec<u8>> {
        if data.is_empty() {
            return Ok(Vec::new());
        }
        if data.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: data.dim(),
            });
        }
        let mut codes = vec![0u8; data.count() * self.dim()];
        codes
            .par_chunks_mut(self.dim())
            .enumerate()
            .for_each(|(i, c)| self.encode_one(data.row(i), c));
        Ok(codes)
    }

    pub fn decode(&self, codes: &[u8]) -> Result<VectorDataset> {
        let dim = self.dim();
        if !codes.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument("code length is not a multiple of the dimension".into()));
        }
        let values = codes
            .chunks(dim)
            .flat_map(|row| {
                row.iter().enumerate().map(|(j, &c)| {
                    let (lo, hi) = (f64::from(self.min[j]), f64::from(self.max[j]));
                    (lo + f64::from(c) * (hi - lo) / 255.0) as f32
                })
            })
            .collect();
        VectorDataset::new(codes.len() / dim, dim, values)
    }

    /// Squared distance between the decoded vectors of two codes, computed
    /// from integer code differences.
    #[inline]
    pub fn distance(&self, a: &[u8], b: &[u8]) -> f32 {
        let mut d = 0.0f32;
        for j in 0..a.len() {
            let diff = i32::from(a[j]) - i32::from(b[j]);
            d += (diff * diff) as f32 * self.step_sq[j];
        }
        d
    }
}

/// Flat index over 8-bit codes. Queries are encoded with the same map and
/// compared code to code.
#[derive(Debug, Clone, PartialEq)]
pub struct SqIndex {
    params: SqParams,
    codes: Vec<u8>,
}

impl SqIndex {
    pub fn build(data: &VectorDataset) -> Result<Self> {
        let params = SqParams::train(data)?;
        let codes = params.encode(data)?;
        Ok(SqIndex { params, codes })
    }

    pub fn params(&self) -> &SqParams {
        &self.params
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.params.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<(u32, f32)>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let dim = self.params.dim();
        if query.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: query.len(),
            });
        }
        let mut q = vec![0u8; dim];
        self.params.encode_one(query, &mut q);
        let mut top = TopK::new(k);
        for (i, code) in self.codes.chunks_exact(dim).enumerate() {
            top.push(Scored {
                dist: self.params.distance(&q, code),
                id: i as u32,
            });
        }
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
        let mut e = Encoder::new(&SQ_MAGIC, SQ_VERSION);
        e.usize32(self.params.dim());
        e.f32s(&self.params.min);
        e.f32s(&self.params.max);
        e.usize32(self.len());
        e.bytes(&self.codes);
        e.write_to(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let mut d = Decoder::open(path, &bytes, &SQ_MAGIC, SQ_VERSION)?;
        let dim = d.usize32()?;
        let min = d.f32s(dim)?;
        let max = d.f32s(dim)?;
        let params = SqParams::from_bounds(min, max).map_err(|e| d.err(e.to_string()))?;
        let n = d.usize32()?;
        let codes = d.bytes(n * dim)?.to_vec();
        d.finish()?;
        Ok(SqIndex { params, codes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_range_is_identity() {
        let data = VectorDataset::from_rows(&[[0.0f32], [255.0], [17.0], [200.0]]).unwrap();
        let p = SqParams::train(&data).unwrap();
        assert_eq!(p.encode(&data).unwrap(), vec![0, 255, 17, 200]);
    }

    #[test]
    fn constant_dimension_encodes_to_zero() {
        let data = VectorDataset::from_rows(&[[3.0f32, 1.0], [3.0, 2.0]]).unwrap();
        let p = SqParams::train(&data).unwrap();
        let codes = p.encode(&data).unwrap();
        assert_eq!((codes[0], codes[2]), (0, 0));
        assert_eq!(p.decode(&codes).unwrap().row(0)[0], 3.0);
    }

    #[test]
    fn bounds_validated() {
        assert!(SqParams::from_bounds(vec![1.0], vec![0.0]).is_err());
    }
}

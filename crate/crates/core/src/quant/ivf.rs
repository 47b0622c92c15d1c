use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::pq::{PqCodebook, PqConfig};
use crate::codec::{read_file, Decoder, Encoder};
use crate::dataio::{NeighborLists, VectorDataset};
use crate::error::{Error, Result};
use crate::metric::{l2_squared, Scored, TopK};

pub const IVF_MAGIC: [u8; 4] = *b"IVF1";
const IVF_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvfConfig {
    pub nlist: usize,
    pub coarse_iters: usize,
    pub pq: PqConfig,
    pub nprobe_default: usize,
}

impl Default for IvfConfig {
    fn default() -> Self {
        IvfConfig {
            nlist: 8,
            coarse_iters: 25,
            pq: PqConfig::default(),
            nprobe_default: 1,
        }
    }
}

/// Inverted file: coarse k-means lists holding PQ codes of the raw vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    coarse: VectorDataset,
    codebook: PqCodebook,
    ids: Vec<Vec<u32>>,
    codes: Vec<Vec<u8>>,
}

impl IvfIndex {
    pub fn build(data: &VectorDataset, cfg: &IvfConfig) -> Result<Self> {
        if cfg.nlist == 0 || cfg.nlist > data.count() {
            return Err(Error::InvalidArgument(format!(
                "nlist = {} must lie in 1..={}",
                cfg.nlist,
                data.count()
            )));
        }
        let km = kmeans(data, cfg.nlist, cfg.coarse_iters.max(1), cfg.pq.seed ^ 0x9e37_79b9)?;
        let codebook = PqCodebook::train(data, &cfg.pq)?;
        let all = codebook.encode(data)?;
        let m = codebook.m();
        let mut ids = vec![Vec::new(); cfg.nlist];
        let mut codes = vec![Vec::new(); cfg.nlist];
        let assign: Vec<u32> = (0..data.count())
            .into_par_iter()
            .map(|i| super::kmeans::nearest_centroid(&km.centroids, data.row(i)).0)
            .collect();
        for (i, &l) in assign.iter().enumerate() {
            ids[l as usize].push(i as u32);
            codes[l as usize].extend_from_slice(&all[i * m..(i + 1) * m]);
        }
        Ok(IvfIndex {
            coarse: km.centroids,
            codebook,
            ids,
            codes,
        })
    }

    pub fn nlist(&self) -> usize {
        self.coarse.count()
    }

    pub fn codebook(&self) -> &PqCodebook {
        &self.codebook
    }

    pub fn list_ids(&self, list: usize) -> &[u32] {
        &self.ids[list]
    }

    pub fn len(&self) -> usize {
        self.ids.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scans the `nprobe` lists whose centroids are nearest to the query.
    pub fn search(&self, query: &[f32], k: usize, nprobe: usize) -> Result<Vec<(u32, f32)>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::InvalidArgument(format!(
                "nprobe = {nprobe} must lie in 1..={}",
                self.nlist()
            )));
        }
        let table = self.codebook.distance_table(query)?;
        let mut lists: Vec<Scored> = self
            .coarse
            .rows()
            .enumerate()
            .map(|(i, c)| Scored {
                dist: l2_squared(query, c),
                id: i as u32,
            })
            .collect();
        lists.sort();
        let mut top = TopK::new(k);
        for l in &lists[..nprobe] {
            let l = l.id as usize;
            self.codebook.scan(&table, &self.codes[l], self.ids[l].iter().copied(), &mut top);
        }
        Ok(top.into_sorted().iter().map(|s| (s.id, s.dist.sqrt())).collect())
    }

    pub fn search_batch(&self, queries: &VectorDataset, k: usize, nprobe: usize) -> Result<NeighborLists> {
        let rows = (0..queries.count())
            .into_par_iter()
            .map(|q| self.search(queries.row(q), k, nprobe))
            .collect::<Result<Vec<_>>>()?;
        Ok(NeighborLists::from_rows(rows))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut e = Encoder::new(&IVF_MAGIC, IVF_VERSION);
        self.codebook.write(&mut e);
        e.usize32(self.nlist());
        e.f32s(self.coarse.values());
        for (ids, codes) in self.ids.iter().zip(&self.codes) {
            e.usize32(ids.len());
            e.u32s(ids);
            e.bytes(codes);
        }
        e.write_to(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let mut d = Decoder::open(path, &bytes, &IVF_MAGIC, IVF_VERSION)?;
        let codebook = PqCodebook::read(&mut d)?;
        let nlist = d.usize32()?;
        if nlist == 0 {
            return Err(d.err("index has no lists"));
        }
        let coarse = VectorDataset::new(nlist, codebook.dim(), d.f32s(nlist * codebook.dim())?)
            .map_err(|e| d.err(e.to_string()))?;
        let mut ids = Vec::with_capacity(nlist);
        let mut codes = Vec::with_capacity(nlist);
        for _ in 0..nlist {
            let n = d.usize32()?;
            ids.push(d.u32s(n)?);
            codes.push(d.bytes(n * codebook.m())?.to_vec());
        }
        d.finish()?;
        let total: usize = ids.iter().map(Vec::len).sum();
        let mut seen = vec![false; total];
        for &id in ids.iter().flatten() {
            match seen.get_mut(id as usize) {
                Some(s) if !*s => *s = true,
                _ => return Err(Error::format(path, 0, format!("id {id} is missing or repeated"))),
            }
        }
        Ok(IvfIndex {
            coarse,
            codebook,
            ids,
            codes,
        })
    }
}

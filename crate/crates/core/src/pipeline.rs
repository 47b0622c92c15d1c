//! The commands behind the `ccst` binary.
//!
//! Every command reads its inputs from files, writes its artifacts to files
//! and records a manifest with the tool version, a hash of the effective
//! configuration and hashes of every input and output. Nothing
//! time-dependent goes into an artifact unless timing is asked for, so
//! reruns with the same inputs and seed produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{peek_magic, read_file, Decoder, Encoder};
use crate::dataio::{read_ivecs, read_vectors, write_fvecs, write_ivecs, NeighborLists, VectorDataset};
use crate::error::{Error, Result};
use crate::eval::{brute_force_knn, format_jsonl, format_table, measure_qps, RecallReport};
use crate::hnsw::{HnswConfig, HnswIndex, HNSW_MAGIC};
use crate::loss::{estimate_boundary, LossConfig, DEFAULT_BOUNDARY_PAIRS};
use crate::model::{load_checkpoint, load_checkpoint_expect, save_checkpoint, CcstModel, Mode, ModelConfig, ModelState};
use crate::quant::{IvfConfig, IvfIndex, PqConfig, PqIndex, SqIndex};
use crate::synth::{gaussian_mixture, MixtureConfig};
use crate::train::{compress_dataset, train_with, TrainConfig, TrainReport};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const FLAT_MAGIC: [u8; 4] = *b"FLT1";
const FLAT_VERSION: u32 = 1;

/// Architecture overrides; unset fields take the defaults of
/// [`ModelConfig::new`]. `d_out` falls back to `d_in / compression_factor`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_out: Option<usize>,
    pub compression_factor: Option<usize>,
    pub n_projections: Option<usize>,
    pub stages: Option<usize>,
    pub encoders_per_stage: Option<Vec<usize>>,
    pub heads: Option<usize>,
    pub qk_dim: Option<usize>,
    pub v_dim: Option<usize>,
    pub mlp_expansion: Option<usize>,
}

impl ModelSection {
    pub fn resolve(&self, d_in: usize, seed: u64) -> Result<ModelConfig> {
        let d_out = match (self.d_out, self.compression_factor) {
            (Some(d), _) => d,
            (None, Some(f)) if f > 0 && d_in.is_multiple_of(f) => d_in / f,
            (None, Some(f)) => {
                return Err(Error::Config(format!(
                    "compression factor {f} does not divide the input dimension {d_in}"
                )))
            }
            (None, None) => (d_in / 4).max(1),
        };
        let mut c = ModelConfig::new(d_in, d_out);
        if let Some(h) = self.heads {
            c.heads = h;
            c.v_dim = (d_out / h.max(1)).max(1);
            c.qk_dim = (c.v_dim / 2).max(1);
        }
        if let Some(v) = self.n_projections {
            c.n_projections = v;
        }
        if let Some(v) = self.stages {
            c.stages = v;
            if self.encoders_per_stage.is_none() {
                c.encoders_per_stage = vec![2; v];
            }
        }
        if let Some(v) = &self.encoders_per_stage {
            c.encoders_per_stage = v.clone();
        }
        if let Some(v) = self.qk_dim {
            c.qk_dim = v;
        }
        if let Some(v) = self.v_dim {
            c.v_dim = v;
        }
        if let Some(v) = self.mlp_expansion {
            c.mlp_expansion = v;
        }
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    /// Mean pairwise distance; estimated from the training data when unset.
    pub boundary: Option<f64>,
    pub boundary_pairs: usize,
    pub squared_gap: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            alpha: 2.0,
            beta: 0.01,
            boundary: None,
            boundary_pairs: DEFAULT_BOUNDARY_PAIRS,
            squared_gap: false,
        }
    }
}

impl LossSection {
    pub fn resolve(&self, data: &VectorDataset, seed: u64) -> Result<LossConfig> {
        let boundary = match self.boundary {
            Some(b) => b,
            None => estimate_boundary(data, self.boundary_pairs, seed)?,
        };
        let cfg = LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            boundary,
            squared_gap: self.squared_gap,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    #[default]
    Hnsw,
    Pq,
    Ivfadc,
    Sq,
    Flat,
}

impl std::str::FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hnsw" => Ok(IndexKind::Hnsw),
            "pq" => Ok(IndexKind::Pq),
            "ivfadc" => Ok(IndexKind::Ivfadc),
            "sq" => Ok(IndexKind::Sq),
            "flat" => Ok(IndexKind::Flat),
            _ => Err(Error::InvalidArgument(format!(
                "unknown index kind '{s}' (expected hnsw, pq, ivfadc, sq or flat)"
            ))),
        }
    }
}

impl IndexKind {
    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Hnsw => "hnsw",
            IndexKind::Pq => "pq",
            IndexKind::Ivfadc => "ivfadc",
            IndexKind::Sq => "sq",
            IndexKind::Flat => "flat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub kind: IndexKind,
    pub hnsw: HnswConfig,
    pub pq: PqConfig,
    pub ivf: IvfConfig,
}

impl Default for IndexSection {
    fn default() -> Self {
        IndexSection {
            kind: IndexKind::Hnsw,
            hnsw: HnswConfig::default(),
            pq: PqConfig::default(),
            ivf: IvfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub k: usize,
    pub ef_search: Vec<usize>,
    pub nprobe: Vec<usize>,
    /// Measure queries per second. Timings differ between runs, so reports
    /// are only reproducible with this off.
    pub timing: bool,
    pub qps_repetitions: usize,
    /// Use an existing checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    pub compress_batch: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            k: 100,
            ef_search: vec![100, 200],
            nprobe: vec![1, 2, 4, 8],
            timing: true,
            qps_repetitions: 1,
            checkpoint: None,
            compress_batch: 1024,
        }
    }
}

/// Everything a run needs. The top-level `seed` replaces the seeds of all
/// sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub base: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainConfig,
    pub index: IndexSection,
    pub bench: BenchSection,
    /// Generates the base and query sets when `base` is unset.
    pub synth: Option<MixtureConfig>,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the top-level seed into every seeded section.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.index.hnsw.seed = self.seed;
        self.index.pq.seed = self.seed;
        self.index.ivf.pq.seed = self.seed;
        if let Some(s) = &mut self.synth {
            s.seed = self.seed;
        }
    }

    pub fn sha256(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory given".into()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

/// Run record written next to the artifacts of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config_sha256: String) -> Self {
        Manifest {
            tool: "ccst".into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            config_sha256,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.outputs.insert(name, file_sha256(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `<output>.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Exact index: the raw vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    pub vectors: VectorDataset,
}

impl FlatIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut e = Encoder::new(&FLAT_MAGIC, FLAT_VERSION);
        e.usize32(self.vectors.count());
        e.usize32(self.vectors.dim());
        e.f32s(self.vectors.values());
        e.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut d = Decoder::open(path, &bytes, &FLAT_MAGIC, FLAT_VERSION)?;
        let n = d.usize32()?;
        let dim = d.usize32()?;
        let values = d.f32s(n * dim)?;
        d.finish()?;
        let vectors = VectorDataset::new(n, dim, values).map_err(|e| Error::format(path, 0, e.to_string()))?;
        Ok(FlatIndex { vectors })
    }
}

pub struct TrainOutcome {
    pub model: ModelState,
    pub report: TrainReport,
    pub loss: LossConfig,
    pub checkpoint: PathBuf,
}

fn train_on(cfg: &PipelineConfig, base: &VectorDataset, dir: &Path, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let model_cfg = cfg.model.resolve(base.dim(), cfg.seed)?;
    let loss = cfg.loss.resolve(base, cfg.seed)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.batch_size = train_cfg.batch_size.min(base.count());
    let mut model = CcstModel::<f32>::init(model_cfg)?;
    let every = train_cfg.checkpoint_every;
    let report = train_with(&mut model, base, &loss, &train_cfg, |rec, m| {
        log(&format!("epoch {} lr {:e} loss {:e}", rec.epoch, rec.lr, rec.mean_loss));
        if every > 0 && (rec.epoch + 1) % every == 0 {
            let mut snapshot = m.clone();
            snapshot.set_mode(Mode::Infer);
            save_checkpoint(&snapshot, dir.join(format!("checkpoint-epoch{:05}.ccst", rec.epoch + 1)))?;
        }
        Ok(())
    })?;
    let checkpoint = dir.join("model.ccst");
    save_checkpoint(&model, &checkpoint)?;
    report.write(dir.join("train_report.tsv"))?;
    Ok(TrainOutcome {
        model,
        report,
        loss,
        checkpoint,
    })
}

/// Loads the base and query sets named by the config, or generates them.
fn load_data(cfg: &PipelineConfig) -> Result<(VectorDataset, Option<VectorDataset>)> {
    match (&cfg.base, &cfg.synth) {
        (Some(b), _) => {
            let base = read_vectors(b)?;
            let queries = cfg.queries.as_ref().map(read_vectors).transpose()?;
            Ok((base, queries))
        }
        (None, Some(s)) => {
            let (b, q) = gaussian_mixture(s)?;
            Ok((b, Some(q)))
        }
        (None, None) => Err(Error::Config("config names neither a base set nor a synthetic mixture".into())),
    }
}

/// Trains a compressor and writes `model.ccst`, `train_report.tsv` and
/// `manifest.json` into the output directory.
pub fn cmd_train(cfg: &PipelineConfig, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let dir = cfg.out_dir()?.to_path_buf();
    if cfg.base.is_none() && cfg.synth.is_none() {
        return Err(Error::Config("train needs a base set".into()));
    }
    let (base, _) = load_data(cfg)?;
    ensure_dir(&dir)?;
    let outcome = train_on(cfg, &base, &dir, log)?;
    let mut m = Manifest::new("train", cfg.sha256());
    if let Some(b) = &cfg.base {
        m.input(b)?;
    }
    m.output(&outcome.checkpoint)?;
    m.output(&dir.join("train_report.tsv"))?;
    m.write(&dir.join("manifest.json"))?;
    Ok(outcome)
}

pub fn cmd_compress(checkpoint: &Path, input: &Path, output: &Path, batch_size: usize) -> Result<VectorDataset> {
    let model = load_checkpoint(checkpoint)?;
    let data = read_vectors(input)?;
    let model = if data.is_empty() {
        model
    } else {
        load_checkpoint_expect(checkpoint, data.dim(), None)?
    };
    let out = compress_dataset(&model, &data, batch_size)?;
    write_fvecs(&out, output)?;
    let cfg_hash = sha256_hex(format!("batch_size={batch_size}").as_bytes());
    let mut m = Manifest::new("compress", cfg_hash);
    m.input(checkpoint)?;
    m.input(input)?;
    m.output(output)?;
    m.write(&manifest_path(output))?;
    Ok(out)
}

pub fn cmd_gt(base: &Path, queries: &Path, k: usize, output: &Path) -> Result<NeighborLists> {
    let b = read_vectors(base)?;
    let q = read_vectors(queries)?;
    let gt = brute_force_knn(&b, &q, k)?;
    write_ivecs(&gt, output)?;
    let mut m = Manifest::new("gt", sha256_hex(format!("k={k}").as_bytes()));
    m.input(base)?;
    m.input(queries)?;
    m.output(output)?;
    m.write(&manifest_path(output))?;
    Ok(gt)
}

/// Builds an index of `section.kind` over `vectors`. For HNSW,
/// `search_vectors` (id-aligned, any dimension) is checked here and must be
/// supplied again at search time; the graph itself is built from
/// `vectors` only.
pub fn cmd_build(
    section: &IndexSection,
    vectors: &Path,
    search_vectors: Option<&Path>,
    output: &Path,
) -> Result<()> {
    let data = read_vectors(vectors)?;
    let search = search_vectors.map(read_vectors).transpose()?;
    if let Some(s) = &search {
        if section.kind != IndexKind::Hnsw {
            return Err(Error::InvalidArgument(
                "separate search vectors are only supported by hnsw".into(),
            ));
        }
        if s.count() != data.count() {
            return Err(Error::InvalidArgument(format!(
                "search vectors hold {} points but the build vectors hold {}",
                s.count(),
                data.count()
            )));
        }
    }
    build_index(section, &data, output)?;
    let mut m = Manifest::new(
        "build",
        sha256_hex(serde_json::to_string(section).expect("section serializes").as_bytes()),
    );
    m.input(vectors)?;
    if let Some(p) = search_vectors {
        m.input(p)?;
    }
    m.output(output)?;
    m.write(&manifest_path(output))
}

fn build_index(section: &IndexSection, data: &VectorDataset, output: &Path) -> Result<()> {
    match section.kind {
        IndexKind::Hnsw => HnswIndex::build(data.clone(), section.hnsw.clone())?.save(output),
        IndexKind::Pq => PqIndex::build(data, &section.pq)?.save(output),
        IndexKind::Ivfadc => IvfIndex::build(data, &section.ivf)?.save(output),
        IndexKind::Sq => SqIndex::build(data)?.save(output),
        IndexKind::Flat => FlatIndex { vectors: data.clone() }.save(output),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchParams {
    pub ef: Option<usize>,
    pub nprobe: Option<usize>,
}

/// A loaded index of any kind.
pub enum AnyIndex {
    Hnsw(Box<HnswIndex>),
    Pq(PqIndex),
    Ivf(IvfIndex),
    Sq(SqIndex),
    Flat(FlatIndex),
}

impl AnyIndex {
    /// Detects the kind from the file magic. HNSW files hold only the graph
    /// and need their build vectors (and optionally search vectors).
    pub fn open(path: &Path, vectors: Option<VectorDataset>, search_vectors: Option<VectorDataset>) -> Result<Self> {
        let magic = peek_magic(path)?;
        if magic == HNSW_MAGIC {
            let build = vectors.ok_or_else(|| {
                Error::InvalidArgument("an hnsw index needs its build vectors (--vectors)".into())
            })?;
            return Ok(AnyIndex::Hnsw(Box::new(HnswIndex::load(path, build, search_vectors)?)));
        }
        if search_vectors.is_some() {
            return Err(Error::InvalidArgument(
                "separate search vectors are only supported by hnsw".into(),
            ));
        }
        match &magic {
            b"PQC1" => Ok(AnyIndex::Pq(PqIndex::load(path)?)),
            b"IVF1" => Ok(AnyIndex::Ivf(IvfIndex::load(path)?)),
            b"SQP1" => Ok(AnyIndex::Sq(SqIndex::load(path)?)),
            b"FLT1" => Ok(AnyIndex::Flat(FlatIndex::load(path)?)),
            _ => Err(Error::format(path, 0, format!("unknown index magic {magic:?}"))),
        }
    }

    pub fn kind(&self) -> IndexKind {
        match self {
            AnyIndex::Hnsw(_) => IndexKind::Hnsw,
            AnyIndex::Pq(_) => IndexKind::Pq,
            AnyIndex::Ivf(_) => IndexKind::Ivfadc,
            AnyIndex::Sq(_) => IndexKind::Sq,
            AnyIndex::Flat(_) => IndexKind::Flat,
        }
    }

    /// Parameter echo for reports, e.g. `ef=100`.
    pub fn describe(&self, p: SearchParams) -> String {
        match self {
            AnyIndex::Hnsw(h) => format!("ef={}", p.ef.unwrap_or(h.config().ef_search_default)),
            AnyIndex::Ivf(_) => format!("nprobe={}", p.nprobe.unwrap_or(1)),
            _ => String::new(),
        }
    }

    pub fn search_one(&self, query: &[f32], k: usize, p: SearchParams) -> Result<Vec<(u32, f32)>> {
        match self {
            AnyIndex::Hnsw(h) => h.search(query, k, p.ef.unwrap_or(h.config().ef_search_default)),
            AnyIndex::Pq(i) => i.search(query, k),
            AnyIndex::Ivf(i) => i.search(query, k, p.nprobe.unwrap_or(i.nlist().min(1))),
            AnyIndex::Sq(i) => i.search(query, k),
            AnyIndex::Flat(f) => {
                let q = VectorDataset::from_rows(&[query])?;
                let r = brute_force_knn(&f.vectors, &q, k)?;
                Ok(r.ids(0).iter().copied().zip(r.distances(0).unwrap_or(&[]).iter().copied()).collect())
            }
        }
    }

    pub fn search_batch(&self, queries: &VectorDataset, k: usize, p: SearchParams) -> Result<NeighborLists> {
        match self {
            AnyIndex::Hnsw(h) => Ok(h.search_batch(queries, k, p.ef.unwrap_or(h.config().ef_search_default))?.0),
            AnyIndex::Pq(i) => i.search_batch(queries, k),
            AnyIndex::Ivf(i) => i.search_batch(queries, k, p.nprobe.unwrap_or(1)),
            AnyIndex::Sq(i) => i.search_batch(queries, k),
            AnyIndex::Flat(f) => brute_force_knn(&f.vectors, queries, k),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_search(
    index: &Path,
    queries: &Path,
    k: usize,
    params: SearchParams,
    vectors: Option<&Path>,
    search_vectors: Option<&Path>,
    output: &Path,
) -> Result<NeighborLists> {
    let v = vectors.map(read_vectors).transpose()?;
    let s = search_vectors.map(read_vectors).transpose()?;
    let idx = AnyIndex::open(index, v, s)?;
    let q = read_vectors(queries)?;
    let res = idx.search_batch(&q, k, params)?;
    write_ivecs(&res, output)?;
    let cfg = format!("k={k} {}", idx.describe(params));
    let mut m = Manifest::new("search", sha256_hex(cfg.as_bytes()));
    m.input(index)?;
    m.input(queries)?;
    for p in vectors.iter().chain(search_vectors.iter()) {
        m.input(p)?;
    }
    m.output(output)?;
    m.write(&manifest_path(output))?;
    Ok(res)
}

/// Scores result lists against ground truth; writes a JSON line to
/// `jsonl_out` when given.
pub fn cmd_eval(results: &Path, gt: &Path, label: &str, params: &str, jsonl_out: Option<&Path>) -> Result<RecallReport> {
    let r = read_ivecs(results)?;
    let g = read_ivecs(gt)?;
    let report = RecallReport::compute(label, params, None, &r, &g)?;
    if let Some(p) = jsonl_out {
        write_text(p, &format_jsonl(std::slice::from_ref(&report)))?;
    }
    Ok(report)
}

/// End to end: ground truth, compressor (trained or loaded), compression,
/// the configured index over the original and over the compressed vectors,
/// and a recall table over the search parameter sweep.
pub fn cmd_bench(cfg: &PipelineConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<RecallReport>> {
    let dir = cfg.out_dir()?.to_path_buf();
    let (base, queries) = load_data(cfg)?;
    let queries = queries.ok_or_else(|| Error::Config("bench needs a query set".into()))?;
    ensure_dir(&dir)?;
    let b = &cfg.bench;
    let k = b.k.min(base.count());
    let gt = match &cfg.ground_truth {
        Some(p) => read_ivecs(p)?,
        None => brute_force_knn(&base, &queries, k)?,
    };
    let model = match &b.checkpoint {
        Some(p) => load_checkpoint_expect(p, base.dim(), None)?,
        None => train_on(cfg, &base, &dir, log)?.model,
    };
    let factor = base.dim() as f64 / model.config().d_out as f64;
    let cbase = compress_dataset(&model, &base, b.compress_batch)?;
    let cqueries = compress_dataset(&model, &queries, b.compress_batch)?;
    log("compressed base and queries");

    let kind = cfg.index.kind;
    let mut reports = Vec::new();
    let mut run = |idx: &AnyIndex, q: &VectorDataset, cf: f64, label: &str| -> Result<()> {
        let sweep: Vec<SearchParams> = match kind {
            IndexKind::Hnsw => b.ef_search.iter().map(|&e| SearchParams { ef: Some(e), nprobe: None }).collect(),
            IndexKind::Ivfadc => b
                .nprobe
                .iter()
                .filter(|&&n| n <= cfg.index.ivf.nlist)
                .map(|&n| SearchParams { ef: None, nprobe: Some(n) })
                .collect(),
            _ => vec![SearchParams::default()],
        };
        for p in sweep {
            let res = idx.search_batch(q, k, p)?;
            let mut rep = RecallReport::compute(label, idx.describe(p), Some(cf), &res, &gt)?;
            if b.timing {
                let qps = measure_qps(
                    |x| {
                        let _ = idx.search_one(x, k, p);
                    },
                    q,
                    b.qps_repetitions.max(1),
                )?;
                rep = rep.with_qps(qps);
            }
            log(&format!("{label} {} done", rep.params));
            reports.push(rep);
        }
        Ok(())
    };

    let full = open_built(&cfg.index, &base, None)?;
    run(&full, &queries, 1.0, kind.name())?;
    drop(full);
    if kind == IndexKind::Hnsw {
        let split = open_built(&cfg.index, &cbase, Some(base.clone()))?;
        run(&split, &queries, factor, "hnsw-split")?;
    }
    let compressed = open_built(&cfg.index, &cbase, None)?;
    run(&compressed, &cqueries, factor, &format!("{}-compressed", kind.name()))?;

    let table = format_table(&reports);
    write_text(&dir.join("bench_report.txt"), &table)?;
    write_text(&dir.join("bench_report.jsonl"), &format_jsonl(&reports))?;
    let mut m = Manifest::new("bench", cfg.sha256());
    for p in [&cfg.base, &cfg.queries, &cfg.ground_truth, &b.checkpoint].into_iter().flatten() {
        m.input(p)?;
    }
    if b.checkpoint.is_none() {
        m.output(&dir.join("model.ccst"))?;
        m.output(&dir.join("train_report.tsv"))?;
    }
    m.output(&dir.join("bench_report.txt"))?;
    m.output(&dir.join("bench_report.jsonl"))?;
    m.write(&dir.join("manifest.json"))?;
    Ok(reports)
}

fn open_built(section: &IndexSection, data: &VectorDataset, search: Option<VectorDataset>) -> Result<AnyIndex> {
    Ok(match section.kind {
        IndexKind::Hnsw => {
            let mut h = HnswIndex::build(data.clone(), section.hnsw.clone())?;
            if let Some(s) = search {
                h.attach_search_vectors(s)?;
            }
            AnyIndex::Hnsw(Box::new(h))
        }
        IndexKind::Pq => AnyIndex::Pq(PqIndex::build(data, &section.pq)?),
        IndexKind::Ivfadc => AnyIndex::Ivf(IvfIndex::build(data, &section.ivf)?),
        IndexKind::Sq => AnyIndex::Sq(SqIndex::build(data)?),
        IndexKind::Flat => AnyIndex::Flat(FlatIndex { vectors: data.clone() }),
    })
}

/// Writes a synthetic mixture as two fvecs files.
pub fn cmd_synth(cfg: &MixtureConfig, base_out: &Path, queries_out: &Path) -> Result<()> {
    let (b, q) = gaussian_mixture(cfg)?;
    write_fvecs(&b, base_out)?;
    write_fvecs(&q, queries_out)?;
    let mut m = Manifest::new(
        "synth",
        sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes()),
    );
    m.output(base_out)?;
    m.output(queries_out)?;
    m.write(&manifest_path(base_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_section_defaults_to_quarter_width() {
        let c = ModelSection::default().resolve(128, 3).unwrap();
        assert_eq!((c.d_in, c.d_out, c.seed), (128, 32, 3));
        let s = ModelSection {
            compression_factor: Some(3),
            ..ModelSection::default()
        };
        assert!(s.resolve(128, 0).is_err());
    }

    #[test]
    fn seed_propagates() {
        let mut c = PipelineConfig {
            seed: 9,
            synth: Some(MixtureConfig::default()),
            ..PipelineConfig::default()
        };
        c.propagate_seed();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.index.hnsw.seed, 9);
        assert_eq!(c.synth.unwrap().seed, 9);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"index": {"kind": "ivfadc"}}"#).unwrap();
        assert_eq!(c.index.kind, IndexKind::Ivfadc);
    }
}

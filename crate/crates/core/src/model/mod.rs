//! The compression network.
//!
//! An input `x` is cast into `n` low-dimensional spaces by a bank of
//! projection matrices initialized as sparse random projections. The
//! projected vectors, preceded by a compression token computed from `x`
//! itself, form a token sequence that runs through `stages` groups of
//! transformer encoders. Between stages a linear map of `x` is added onto the
//! compression token; after the last stage the compression token goes
//! through a final linear head to give `f(x)`.
//!
//! There is no position embedding and no learned class token: the sequence
//! is order-free apart from the compression token sitting at index 0.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_expect, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::VectorDataset;
use crate::error::{Error, Result};
use crate::tensor::{BatchNormConfig, BnMode, RunningStats, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub n_projections: usize,
    pub stages: usize,
    pub encoders_per_stage: Vec<usize>,
    pub heads: usize,
    /// Per-head query/key width.
    pub qk_dim: usize,
    /// Per-head value width; `heads * v_dim == d_out`.
    pub v_dim: usize,
    pub mlp_expansion: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    /// Start every encoder as the identity: the attention output projection
    /// and the scale of the MLP's last batch norm begin at zero.
    #[serde(default = "default_true")]
    pub zero_init_residual: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Default architecture for a `d_in -> d_out` compressor: 8 projections,
    /// two stages of two encoders, 4 heads (fewer if 4 does not divide
    /// `d_out`), value width `d_out / heads` and query/key width half of that.
    pub fn new(d_in: usize, d_out: usize) -> Self {
        let heads = [4, 2, 1].into_iter().find(|h| d_out.is_multiple_of(*h)).unwrap_or(1);
        let v_dim = (d_out / heads).max(1);
        ModelConfig {
            d_in,
            d_out,
            n_projections: 8,
            stages: 2,
            encoders_per_stage: vec![2, 2],
            heads,
            qk_dim: (v_dim / 2).max(1),
            v_dim,
            mlp_expansion: 2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            seed: 0,
            zero_init_residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_in == 0 || self.d_out == 0 {
            return bad("d_in and d_out must be positive".into());
        }
        if self.n_projections == 0 {
            return bad("n_projections must be at least 1".into());
        }
        if self.stages == 0 || self.encoders_per_stage.len() != self.stages {
            return bad(format!(
                "stages = {} needs exactly that many encoder counts, got {:?}",
                self.stages, self.encoders_per_stage
            ));
        }
        if self.encoders_per_stage.contains(&0) {
            return bad("every stage needs at least one encoder".into());
        }
        if self.heads == 0 || self.heads * self.v_dim != self.d_out {
            return bad(format!(
                "heads ({}) x v_dim ({}) must equal d_out ({})",
                self.heads, self.v_dim, self.d_out
            ));
        }
        if self.qk_dim == 0 || self.qk_dim > self.v_dim {
            return bad(format!(
                "qk_dim ({}) must be in 1..=v_dim ({})",
                self.qk_dim, self.v_dim
            ));
        }
        if self.mlp_expansion != 2 {
            return bad(format!("mlp_expansion is fixed at 2, got {}", self.mlp_expansion));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Sparsity parameter of the projection-bank initialization, `sqrt(d_in)`.
    pub fn sparsity(&self) -> f64 {
        (self.d_in as f64).sqrt()
    }

    pub fn bn(&self) -> BatchNormConfig {
        BatchNormConfig {
            eps: self.bn_eps,
            momentum: self.bn_momentum,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    weight: usize,
    bias: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct AbnIds {
    linear: LinearIds,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    query: usize,
    key: usize,
    value: usize,
}

#[derive(Debug, Clone)]
struct EncoderIds {
    heads: Vec<HeadIds>,
    out: LinearIds,
    mlp_up: AbnIds,
    mlp_down: AbnIds,
}

#[derive(Debug, Clone)]
struct Layout {
    projections: Vec<usize>,
    compression: AbnIds,
    linear_a: LinearIds,
    linear_b: LinearIds,
    stages: Vec<Vec<EncoderIds>>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    SparseRandom,
    Uniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Registry {
    params: Vec<ParamSpec>,
    bn: Vec<(String, usize)>,
}

impl Registry {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.params.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> LinearIds {
        let weight = self.add(
            format!("{name}.weight"),
            &[fan_in, fan_out],
            Init::Uniform { fan_in, fan_out },
        );
        let bias = bias.then(|| self.add(format!("{name}.bias"), &[fan_out], Init::Zeros));
        LinearIds { weight, bias }
    }

    fn abn(&mut self, name: &str, fan_in: usize, fan_out: usize) -> AbnIds {
        let linear = self.linear(&format!("{name}.linear"), fan_in, fan_out, true);
        let gamma = self.add(format!("{name}.bn.gamma"), &[fan_out], Init::Ones);
        let beta = self.add(format!("{name}.bn.beta"), &[fan_out], Init::Zeros);
        self.bn.push((format!("{name}.bn"), fan_out));
        AbnIds {
            linear,
            gamma,
            beta,
            stats: self.bn.len() - 1,
        }
    }
}

fn layout_for(cfg: &ModelConfig) -> (Layout, Registry) {
    let mut r = Registry::default();
    let (d_in, d) = (cfg.d_in, cfg.d_out);
    let projections = (0..cfg.n_projections)
        .map(|i| r.add(format!("projection.{i}"), &[d_in, d], Init::SparseRandom))
        .collect();
    let compression = r.abn("compression", d_in, d);
    let linear_a = r.linear("linear_a", d_in, d, true);
    let linear_b = r.linear("linear_b", d, d, true);
    let hidden = cfg.mlp_expansion * d;
    let stages = cfg
        .encoders_per_stage
        .iter()
        .enumerate()
        .map(|(s, &count)| {
            (0..count)
                .map(|e| {
                    let p = format!("stage.{s}.encoder.{e}");
                    let heads = (0..cfg.heads)
                        .map(|h| HeadIds {
                            query: r.add(
                                format!("{p}.head.{h}.query"),
                                &[d, cfg.qk_dim],
                                Init::Uniform { fan_in: d, fan_out: cfg.qk_dim },
                            ),
                            key: r.add(
                                format!("{p}.head.{h}.key"),
                                &[d, cfg.qk_dim],
                                Init::Uniform { fan_in: d, fan_out: cfg.qk_dim },
                            ),
                            value: r.add(
                                format!("{p}.head.{h}.value"),
                                &[d, cfg.v_dim],
                                Init::Uniform { fan_in: d, fan_out: cfg.v_dim },
                            ),
                        })
                        .collect();
                    let out = r.linear(&format!("{p}.attn_out"), cfg.heads * cfg.v_dim, d, true);
                    let mlp_up = r.abn(&format!("{p}.mlp_up"), d, hidden);
                    let mlp_down = r.abn(&format!("{p}.mlp_down"), hidden, d);
                    EncoderIds {
                        heads,
                        out,
                        mlp_up,
                        mlp_down,
                    }
                })
                .collect()
        })
        .collect();
    if cfg.zero_init_residual {
        for spec in &mut r.params {
            if spec.name.ends_with(".attn_out.weight") || spec.name.ends_with(".mlp_down.bn.gamma") {
                spec.init = Init::Zeros;
            }
        }
    }
    (
        Layout {
            projections,
            compression,
            linear_a,
            linear_b,
            stages,
        },
        r,
    )
}

/// Batch-norm behaviour for one forward pass.
pub enum BnPass<'a, T> {
    Train(&'a mut [RunningStats<T>]),
    Infer(&'a [RunningStats<T>]),
}

impl<T> BnPass<'_, T> {
    fn mode(&mut self, i: usize) -> BnMode<'_, T> {
        match self {
            BnPass::Train(s) => BnMode::Train(&mut s[i]),
            BnPass::Infer(s) => BnMode::Infer(&s[i]),
        }
    }
}

/// Parameter counts by part of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub projection_bank: usize,
    pub compression_module: usize,
    pub linear_a: usize,
    pub linear_b: usize,
    /// Q/K/V matrices plus the attention output projection, all encoders.
    pub attention: usize,
    /// MLP linear weights of one encoder, excluding biases and BN affine.
    pub mlp_weights_per_encoder: usize,
    /// Everything in the MLPs of all encoders, biases and BN affine included.
    pub mlp: usize,
    pub position_embedding: usize,
    pub total: usize,
}

/// Output of one attention block with the per-head attention weights.
pub struct AttentionOutput<T> {
    pub output: Tensor<T>,
    pub weights: Vec<Tensor<T>>,
}

/// Parameters, batch-norm running statistics and mode of a compressor.
#[derive(Debug, Clone)]
pub struct CcstModel<T> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    bn_stats: Vec<RunningStats<T>>,
    mode: Mode,
}

/// The state trained and checkpointed by the tool.
pub type ModelState = CcstModel<f32>;

/// Draws one entry of the sparse random projection: `+-sqrt(s / d_out)` each
/// with probability `1 / 2s`, else 0, with `s = sqrt(d_in)`.
pub fn sparse_projection_entry(rng: &mut impl Rng, d_in: usize, d_out: usize) -> f64 {
    let s = (d_in as f64).sqrt();
    let magnitude = (s / d_out as f64).sqrt();
    let u: f64 = rng.random();
    let p = 1.0 / (2.0 * s);
    if u < p {
        -magnitude
    } else if u < 2.0 * p {
        magnitude
    } else {
        0.0
    }
}

/// A standalone `d_in x d_out` sparse random projection matrix.
pub fn sparse_random_projection(d_in: usize, d_out: usize, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..d_in * d_out)
        .map(|_| sparse_projection_entry(&mut rng, d_in, d_out) as f32)
        .collect();
    Tensor::new(&[d_in, d_out], data)
}

/// `x W` for every row of `dataset`.
pub fn project_dataset(dataset: &VectorDataset, matrix: &Tensor<f32>) -> Result<VectorDataset> {
    let (d_in, d_out) = (matrix.shape()[0], matrix.shape()[1]);
    if dataset.is_empty() {
        return Ok(VectorDataset::empty(d_out));
    }
    if dataset.dim() != d_in {
        return Err(Error::DimMismatch {
            expected: d_in,
            actual: dataset.dim(),
        });
    }
    let mut out = vec![0.0f32; dataset.count() * d_out];
    f32::gemm(
        dataset.count(),
        d_in,
        d_out,
        1.0,
        dataset.values(),
        d_in as isize,
        1,
        matrix.data(),
        d_out as isize,
        1,
        0.0,
        &mut out,
        d_out as isize,
        1,
    );
    VectorDataset::new(dataset.count(), d_out, out)
}

impl<T: Scalar> CcstModel<T> {
    /// Fresh model; deterministic in `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, registry) = layout_for(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::with_capacity(registry.params.len());
        let mut params = Vec::with_capacity(registry.params.len());
        for spec in registry.params {
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::SparseRandom => (0..n)
                    .map(|_| T::lit(sparse_projection_entry(&mut rng, config.d_in, config.d_out)))
                    .collect(),
                Init::Uniform { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n)
                        .map(|_| T::lit(rng.random_range(-limit..limit)))
                        .collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            names.push(spec.name);
            params.push(Tensor::new(&spec.shape, data)?);
        }
        let bn_names = registry.bn.iter().map(|(n, _)| n.clone()).collect();
        let bn_stats = registry.bn.iter().map(|&(_, f)| RunningStats::new(f)).collect();
        Ok(CcstModel {
            config,
            layout,
            names,
            params,
            bn_names,
            bn_stats,
            mode: Mode::Infer,
        })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match the
    /// layout implied by `config`.
    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<(String, Tensor<T>)>,
        bn: Vec<(String, RunningStats<T>)>,
    ) -> Result<Self> {
        let mut model = Self::init_shapes(config)?;
        if params.len() != model.params.len() || bn.len() != model.bn_stats.len() {
            return Err(Error::Config(format!(
                "expected {} parameters and {} batch-norm layers, found {} and {}",
                model.params.len(),
                model.bn_stats.len(),
                params.len(),
                bn.len()
            )));
        }
        for (i, (name, t)) in params.into_iter().enumerate() {
            if name != model.names[i] || t.shape() != model.params[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    model.names[i],
                    model.params[i].shape(),
                    t.shape()
                )));
            }
            model.params[i] = t;
        }
        for (i, (name, s)) in bn.into_iter().enumerate() {
            if name != model.bn_names[i] || s.mean.len() != model.bn_stats[i].mean.len() {
                return Err(Error::Config(format!(
                    "batch-norm layer {i}: expected {}, found {name}",
                    model.bn_names[i]
                )));
            }
            model.bn_stats[i] = s;
        }
        Ok(model)
    }

    fn init_shapes(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, registry) = layout_for(&config);
        Ok(CcstModel {
            names: registry.params.iter().map(|p| p.name.clone()).collect(),
            params: registry
                .params
                .iter()
                .map(|p| Tensor::zeros(&p.shape))
                .collect(),
            bn_names: registry.bn.iter().map(|(n, _)| n.clone()).collect(),
            bn_stats: registry.bn.iter().map(|&(_, f)| RunningStats::new(f)).collect(),
            config,
            layout,
            mode: Mode::Infer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn bn_stats(&self) -> &[RunningStats<T>] {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.bn_stats
    }

    pub(crate) fn bn_stats_mut_vec(&mut self) -> &mut Vec<RunningStats<T>> {
        &mut self.bn_stats
    }

    /// Projection matrix `i` of the bank, `d_in x d_out`.
    pub fn projection(&self, i: usize) -> &Tensor<T> {
        &self.params[self.layout.projections[i]]
    }

    pub fn projection_mut(&mut self, i: usize) -> &mut Tensor<T> {
        let id = self.layout.projections[i];
        &mut self.params[id]
    }

    pub fn cast<U: Scalar>(&self) -> CcstModel<U> {
        CcstModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            bn_names: self.bn_names.clone(),
            bn_stats: self.bn_stats.iter().map(RunningStats::cast).collect(),
            mode: self.mode,
        }
    }

    /// Puts every parameter on `tape` as a leaf, in storage order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.len() != 2 || s[1] != self.config.d_in {
            return Err(Error::Shape {
                op: "forward",
                lhs: s.to_vec(),
                rhs: vec![self.config.d_in],
            });
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape<T>, vars: &[Var], ids: LinearIds, x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[ids.weight])?;
        match ids.bias {
            Some(b) => tape.add_row(y, vars[b]),
            None => Ok(y),
        }
    }

    /// linear -> ReLU -> batch norm
    fn linear_abn(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        ids: AbnIds,
        x: Var,
        bn: &mut BnPass<'_, T>,
    ) -> Result<Var> {
        let y = self.linear(tape, vars, ids.linear, x)?;
        let y = tape.relu(y)?;
        tape.batchnorm(y, vars[ids.gamma], vars[ids.beta], bn.mode(ids.stats), self.config.bn())
    }

    /// `B x d_in` to the `B x n x d_out` sequence of projected tokens.
    pub fn project_tokens_graph(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let parts = self
            .layout
            .projections
            .iter()
            .map(|&p| tape.matmul(x, vars[p]))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_tokens(&parts)
    }

    fn attention_graph(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        enc: &EncoderIds,
        tokens: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = tape.value(tokens).shape().to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let cfg = &self.config;
        let flat = tape.reshape(tokens, &[b * t, d])?;
        let scale = T::lit(1.0 / (cfg.qk_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(enc.heads.len());
        let mut weights = Vec::with_capacity(enc.heads.len());
        for h in &enc.heads {
            let q = tape.matmul(flat, vars[h.query])?;
            let q = tape.reshape(q, &[b, t, cfg.qk_dim])?;
            let k = tape.matmul(flat, vars[h.key])?;
            let k = tape.reshape(k, &[b, t, cfg.qk_dim])?;
            let v = tape.matmul(flat, vars[h.value])?;
            let v = tape.reshape(v, &[b, t, cfg.v_dim])?;
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax_rows(scores)?;
            outs.push(tape.bmm(attn, v, false)?);
            weights.push(attn);
        }
        let cat = tape.concat_features(&outs)?;
        let cat = tape.reshape(cat, &[b * t, cfg.heads * cfg.v_dim])?;
        let proj = self.linear(tape, vars, enc.out, cat)?;
        let proj = tape.reshape(proj, &[b, t, d])?;
        Ok((tape.add(tokens, proj)?, weights))
    }

    fn encoder_graph(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        enc: &EncoderIds,
        tokens: Var,
        bn: &mut BnPass<'_, T>,
    ) -> Result<Var> {
        let (tokens, _) = self.attention_graph(tape, vars, enc, tokens)?;
        let shape = tape.value(tokens).shape().to_vec();
        let flat = tape.reshape(tokens, &[shape[0] * shape[1], shape[2]])?;
        let hidden = self.linear_abn(tape, vars, enc.mlp_up, flat, bn)?;
        let out = self.linear_abn(tape, vars, enc.mlp_down, hidden, bn)?;
        let out = tape.reshape(out, &shape)?;
        tape.add(tokens, out)
    }

    /// Records the full forward pass of `x` (`B x d_in`) on `tape` and returns
    /// the `B x d_out` output node.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        mut bn: BnPass<'_, T>,
    ) -> Result<Var> {
        self.check_batch(tape.value(x))?;
        let cp = self.linear_abn(tape, vars, self.layout.compression, x, &mut bn)?;
        let projected = self.project_tokens_graph(tape, vars, x)?;
        let mut tokens = tape.concat_tokens(&[cp, projected])?;
        let mut refresh = None;
        let last = self.layout.stages.len() - 1;
        for (s, stage) in self.layout.stages.iter().enumerate() {
            for enc in stage {
                tokens = self.encoder_graph(tape, vars, enc, tokens, &mut bn)?;
            }
            if s < last {
                let a = match refresh {
                    Some(a) => a,
                    None => {
                        let a = self.linear(tape, vars, self.layout.linear_a, x)?;
                        refresh = Some(a);
                        a
                    }
                };
                tokens = tape.add_token(tokens, a, 0)?;
            }
        }
        let cp = tape.slice_token(tokens, 0)?;
        self.linear(tape, vars, self.layout.linear_b, cp)
    }

    /// Inference with running batch-norm statistics; each output row depends
    /// only on its input row.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(batch.clone());
        let y = self.forward_graph(&mut tape, &vars, x, BnPass::Infer(&self.bn_stats))?;
        Ok(tape.value(y).clone())
    }

    /// Forward pass in `mode`. Train mode normalizes with batch statistics
    /// (so needs at least two rows) and updates the running statistics.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Infer => self.infer(batch),
            Mode::Train => {
                self.check_batch(batch)?;
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape);
                let x = tape.leaf(batch.clone());
                let mut stats = std::mem::take(&mut self.bn_stats);
                let y = self.forward_graph(&mut tape, &vars, x, BnPass::Train(&mut stats));
                self.bn_stats = stats;
                Ok(tape.value(y?).clone())
            }
        }
    }

    /// The projected tokens `[x W^1, ..., x W^n]` as `B x n x d_out`.
    pub fn project_tokens(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(batch.clone());
        let y = self.project_tokens_graph(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }

    /// Runs the attention block (with its residual) of encoder `encoder` in
    /// stage `stage` on `tokens` (`B x T x d_out`).
    pub fn attention(&self, stage: usize, encoder: usize, tokens: &Tensor<T>) -> Result<AttentionOutput<T>> {
        let enc = self
            .layout
            .stages
            .get(stage)
            .and_then(|s| s.get(encoder))
            .ok_or_else(|| Error::InvalidArgument(format!("no encoder {encoder} in stage {stage}")))?;
        let s = tokens.shape();
        if s.len() != 3 || s[2] != self.config.d_out {
            return Err(Error::Shape {
                op: "attention",
                lhs: s.to_vec(),
                rhs: vec![self.config.d_out],
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(tokens.clone());
        let (out, weights) = self.attention_graph(&mut tape, &vars, enc, x)?;
        Ok(AttentionOutput {
            output: tape.value(out).clone(),
            weights: weights.iter().map(|&w| tape.value(w).clone()).collect(),
        })
    }

    pub fn count_params(&self) -> ParamCounts {
        let size = |i: usize| self.params[i].numel();
        let lin = |l: LinearIds| size(l.weight) + l.bias.map_or(0, size);
        let abn = |a: AbnIds| lin(a.linear) + size(a.gamma) + size(a.beta);
        let mut attention = 0;
        let mut mlp = 0;
        let mut mlp_weights_per_encoder = 0;
        for enc in self.layout.stages.iter().flatten() {
            attention += enc
                .heads
                .iter()
                .map(|h| size(h.query) + size(h.key) + size(h.value))
                .sum::<usize>()
                + lin(enc.out);
            mlp += abn(enc.mlp_up) + abn(enc.mlp_down);
            mlp_weights_per_encoder = size(enc.mlp_up.linear.weight) + size(enc.mlp_down.linear.weight);
        }
        ParamCounts {
            projection_bank: self.layout.projections.iter().map(|&p| size(p)).sum(),
            compression_module: abn(self.layout.compression),
            linear_a: lin(self.layout.linear_a),
            linear_b: lin(self.layout.linear_b),
            attention,
            mlp_weights_per_encoder,
            mlp,
            position_embedding: self
                .names
                .iter()
                .zip(&self.params)
                .filter(|(n, _)| n.contains("position"))
                .map(|(_, p)| p.numel())
                .sum(),
            total: self.params.iter().map(Tensor::numel).sum(),
        }
    }
}

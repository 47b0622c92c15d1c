//! Checkpoint file: magic `CCST`, `u32` version, the model configuration,
//! a name/shape/offset table, little-endian `f32` payload and a CRC-32.
//!
//! Configuration block: `d_in`, `d_out`, `n_projections`, `stages`,
//! `heads`, `qk_dim`, `v_dim`, `mlp_expansion` as `u32`; one `u32` encoder
//! count per stage; `bn_eps` and `bn_momentum` as `f64`; `seed` as `u64`.
//!
//! Table: `u32` entry count, then per entry a length-prefixed UTF-8 name,
//! `u32` rank, `u32` extents and a `u64` offset (in `f32` elements) into the
//! payload. Batch-norm running statistics are stored as rank-1 entries named
//! `<layer>.running_mean` / `<layer>.running_var` after the parameters.
//! The payload is preceded by its `u64` element count.

use std::path::Path;

use crate::codec::{read_file, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor};

use super::{CcstModel, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCST";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &CcstModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cfg = model.config();
    let mut enc = Encoder::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    for v in [
        cfg.d_in,
        cfg.d_out,
        cfg.n_projections,
        cfg.stages,
        cfg.heads,
        cfg.qk_dim,
        cfg.v_dim,
        cfg.mlp_expansion,
    ] {
        enc.usize32(v);
    }
    for &n in &cfg.encoders_per_stage {
        enc.usize32(n);
    }
    enc.f64(cfg.bn_eps);
    enc.f64(cfg.bn_momentum);
    enc.u64(cfg.seed);
    enc.u32(u32::from(cfg.zero_init_residual));

    let mut entries: Vec<(String, &[usize], &[f32])> = model
        .param_names()
        .iter()
        .zip(model.params())
        .map(|(n, t)| (n.clone(), t.shape(), t.data()))
        .collect();
    let stat_shapes: Vec<[usize; 1]> = model.bn_stats().iter().map(|s| [s.mean.len()]).collect();
    for ((name, stats), shape) in model.bn_names().iter().zip(model.bn_stats()).zip(&stat_shapes) {
        entries.push((format!("{name}.running_mean"), shape, &stats.mean));
        entries.push((format!("{name}.running_var"), shape, &stats.var));
    }

    enc.usize32(entries.len());
    let mut offset = 0u64;
    for (name, shape, data) in &entries {
        enc.str(name);
        enc.usize32(shape.len());
        for &d in *shape {
            enc.usize32(d);
        }
        enc.u64(offset);
        offset += data.len() as u64;
    }
    enc.u64(offset);
    for (_, _, data) in &entries {
        enc.f32s(data);
    }
    enc.write_to(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CcstModel<f32>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut dec = Decoder::open(path, &bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut head = [0usize; 8];
    for h in head.iter_mut() {
        *h = dec.usize32()?;
    }
    let [d_in, d_out, n_projections, stages, heads, qk_dim, v_dim, mlp_expansion] = head;
    if stages > 1 << 16 {
        return Err(dec.err(format!("implausible stage count {stages}")));
    }
    let encoders_per_stage = (0..stages)
        .map(|_| dec.usize32())
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        d_in,
        d_out,
        n_projections,
        stages,
        encoders_per_stage,
        heads,
        qk_dim,
        v_dim,
        mlp_expansion,
        bn_eps: dec.f64()?,
        bn_momentum: dec.f64()?,
        seed: dec.u64()?,
        zero_init_residual: dec.u32()? != 0,
    };
    config.validate()?;

    let count = dec.usize32()?;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = dec.str()?;
        let rank = dec.usize32()?;
        if !(1..=3).contains(&rank) {
            return Err(dec.err(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| dec.usize32())
            .collect::<Result<Vec<_>>>()?;
        let offset = dec.u64()? as usize;
        table.push((name, shape, offset));
    }
    let total = dec.u64()? as usize;
    let payload = dec.f32s(total)?;
    dec.finish()?;

    let mut tensors = Vec::with_capacity(table.len());
    for (name, shape, offset) in table {
        let n: usize = shape.iter().product();
        let data = payload
            .get(offset..offset + n)
            .ok_or_else(|| Error::format(path, 0, format!("tensor {name} exceeds the payload")))?;
        tensors.push((name, Tensor::new(&shape, data.to_vec())?));
    }

    let template = CcstModel::<f32>::init_shapes(config.clone())?;
    let n_params = template.param_names().len();
    if tensors.len() != n_params + 2 * template.bn_names().len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, configuration implies {}",
            tensors.len(),
            n_params + 2 * template.bn_names().len()
        )));
    }
    let stats_part = tensors.split_off(n_params);
    let mut bn = Vec::with_capacity(stats_part.len() / 2);
    for (pair, name) in stats_part.chunks_exact(2).zip(template.bn_names()) {
        let (mean_name, mean) = &pair[0];
        let (var_name, var) = &pair[1];
        if *mean_name != format!("{name}.running_mean") || *var_name != format!("{name}.running_var") {
            return Err(Error::Config(format!(
                "expected running statistics of {name}, found {mean_name} / {var_name}"
            )));
        }
        bn.push((
            name.clone(),
            RunningStats {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
            },
        ));
    }
    CcstModel::from_parts(config, tensors, bn)
}

/// Loads a checkpoint and checks its input dimension (and output dimension,
/// when given) against what the caller needs.
pub fn load_checkpoint_expect(
    path: impl AsRef<Path>,
    d_in: usize,
    d_out: Option<usize>,
) -> Result<CcstModel<f32>> {
    let model = load_checkpoint(path.as_ref())?;
    let cfg = model.config();
    if cfg.d_in != d_in {
        return Err(Error::Config(format!(
            "{}: checkpoint expects d_in = {}, requested d_in = {d_in}",
            path.as_ref().display(),
            cfg.d_in
        )));
    }
    if let Some(d) = d_out {
        if cfg.d_out != d {
            return Err(Error::Config(format!(
                "{}: checkpoint produces d_out = {}, requested d_out = {d}",
                path.as_ref().display(),
                cfg.d_out
            )));
        }
    }
    Ok(model)
}

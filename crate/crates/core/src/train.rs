//! AdamW with a polynomial learning-rate schedule, the training loop and
//! batch compression with a trained model.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::VectorDataset;
use crate::error::{Error, Result};
use crate::loss::{dataset_inrp_loss, inrp_loss_graph, pair_targets, LossConfig};
use crate::model::{BnPass, Mode, ModelState};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Points (taken from the front of the dataset) used for the final
    /// evaluation loss.
    pub eval_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2400,
            batch_size: 1024,
            lr0: 1e-4,
            poly_power: 0.9,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            eval_points: 2048,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if self.eval_points < 2 {
            return Err(Error::Config("eval_points must be at least 2".into()));
        }
        Ok(())
    }
}

/// `lr0 * (1 - epoch / epochs) ^ poly_power`
pub fn poly_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    Ok(cfg.lr0 * (1.0 - epoch as f64 / cfg.epochs as f64).powf(cfg.poly_power))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(params: &[Tensor<T>], cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `p <- p - lr*wd*p`, then the bias-corrected Adam update.
    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.first[i].len() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = gv.as_f64();
                let mut x = pv.as_f64();
                x -= lr * self.weight_decay * x;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                x -= lr * mhat / (vhat.sqrt() + self.eps);
                *pv = T::lit(x);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Loss of the trained model in infer mode over the first `eval_points`
    /// training rows, as one batch, in `f64`.
    pub final_eval_loss: f64,
    pub eval_points: usize,
}

impl TrainReport {
    /// One tab-separated `epoch lr mean_loss` record per line, then the final
    /// evaluation loss as a comment line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch\tlr\tmean_loss\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{}\t{:e}\t{:e}", r.epoch, r.lr, r.mean_loss);
        }
        let _ = writeln!(
            s,
            "# final_eval_loss={:e} eval_points={}",
            self.final_eval_loss, self.eval_points
        );
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn gather(dataset: &VectorDataset, rows: &[usize]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(rows.len() * dataset.dim());
    for &r in rows {
        data.extend_from_slice(dataset.row(r));
    }
    Tensor::new(&[rows.len(), dataset.dim()], data)
}

/// Runs one optimization step on `rows` and returns the batch loss.
fn train_step(
    model: &mut ModelState,
    opt: &mut AdamW,
    batch: &Tensor<f32>,
    loss_cfg: &LossConfig,
    lr: f64,
) -> Result<f64> {
    let targets = pair_targets(batch, loss_cfg)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = tape.leaf(batch.clone());
    let mut stats = std::mem::take(model.bn_stats_mut_vec());
    let out = model.forward_graph(&mut tape, &vars, x, BnPass::Train(&mut stats));
    *model.bn_stats_mut_vec() = stats;
    let loss = inrp_loss_graph(&mut tape, out?, targets, loss_cfg)?;
    let value = f64::from(tape.value(loss).data()[0]);
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.take(v)).collect();
    opt.step(model.params_mut(), &grads, lr)?;
    Ok(value)
}

pub fn train(
    model: &mut ModelState,
    dataset: &VectorDataset,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, dataset, loss_cfg, cfg, |_, _| Ok(()))
}

/// Training loop with a per-epoch callback (used for periodic checkpoints
/// and progress output).
pub fn train_with(
    model: &mut ModelState,
    dataset: &VectorDataset,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelState) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if dataset.dim() != model.config().d_in {
        return Err(Error::DimMismatch {
            expected: model.config().d_in,
            actual: dataset.dim(),
        });
    }
    if dataset.count() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "dataset of {} points is smaller than one batch of {}",
            dataset.count(),
            cfg.batch_size
        )));
    }
    model.set_mode(Mode::Train);
    let mut opt = AdamW::new(model.params(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.count()).collect();
    let batches = dataset.count() / cfg.batch_size;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for b in 0..batches {
            let rows = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch = gather(dataset, rows)?;
            let loss = match train_step(model, &mut opt, &batch, loss_cfg, lr) {
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch, batch: b }),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            total += loss;
        }
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: total / batches as f64,
        };
        on_epoch(&record, model)?;
        records.push(record);
    }
    model.set_mode(Mode::Infer);

    let eval_points = cfg.eval_points.min(dataset.count());
    let head: Vec<usize> = (0..eval_points).collect();
    let eval_set = dataset.select(&head);
    let compressed = compress_dataset(model, &eval_set, cfg.batch_size)?;
    let final_eval_loss = dataset_inrp_loss(&eval_set, &compressed, loss_cfg)?;
    Ok(TrainReport {
        epochs: records,
        final_eval_loss,
        eval_points,
    })
}

/// Compresses every row of `dataset` with an infer-mode model. Output rows
/// do not depend on how the dataset is cut into batches.
pub fn compress_dataset(model: &ModelState, dataset: &VectorDataset, batch_size: usize) -> Result<VectorDataset> {
    if model.mode() != Mode::Infer {
        return Err(Error::InvalidArgument(
            "compress_dataset needs a model in infer mode".into(),
        ));
    }
    let d_out = model.config().d_out;
    if dataset.is_empty() {
        return Ok(VectorDataset::empty(d_out));
    }
    if dataset.dim() != model.config().d_in {
        return Err(Error::DimMismatch {
            expected: model.config().d_in,
            actual: dataset.dim(),
        });
    }
    let batch_size = batch_size.max(1);
    let dim = dataset.dim();
    let chunks: Vec<&[f32]> = dataset.values().chunks(batch_size * dim).collect();
    let outputs = chunks
        .into_par_iter()
        .map(|chunk| {
            let t = Tensor::new(&[chunk.len() / dim, dim], chunk.to_vec())?;
            Ok(model.infer(&t)?.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f32> = outputs.into_iter().flatten().collect();
    VectorDataset::new(dataset.count(), d_out, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(poly_lr(0, &cfg).unwrap(), 1e-4);
        let last = poly_lr(2399, &cfg).unwrap();
        assert!((last - 1e-4 * (1.0f64 / 2400.0).powf(0.9)).abs() < 1e-20);
        assert!(poly_lr(2400, &cfg).is_err());
        let lrs: Vec<f64> = (0..cfg.epochs).map(|e| poly_lr(e, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_gradient_fixed_point_and_decay() {
        let mut cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = vec![Tensor::new(&[2], vec![1.5f64, -2.0]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        let mut opt = AdamW::new(&p, &cfg);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.5, -2.0]);

        cfg.weight_decay = 0.01;
        let mut opt = AdamW::new(&p, &cfg);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.5 * (1.0 - 0.1 * 0.01), -2.0 * (1.0 - 0.1 * 0.01)]);
    }

    #[test]
    fn first_step_closed_form() {
        // t = 1, g = 1: m = 1 - b1, v = 1 - b2, both bias corrections give 1,
        // so the update is lr / (1 + eps) after the decay term.
        let cfg = TrainConfig::default();
        let (lr, p0) = (1e-3, 0.75f64);
        let mut p = vec![Tensor::new(&[1], vec![p0]).unwrap()];
        let g = vec![Tensor::new(&[1], vec![1.0]).unwrap()];
        let mut opt = AdamW::new(&p, &cfg);
        opt.step(&mut p, &g, lr).unwrap();
        let expected = p0 - lr * cfg.weight_decay * p0 - lr * 1.0 / (1.0 + cfg.adam_eps);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_zero_epochs() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

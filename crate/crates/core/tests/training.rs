use ccst::loss::{estimate_boundary, pair_weight};
use ccst::synth::{gaussian_mixture, MixtureConfig};
use ccst::train::{compress_dataset, poly_lr, train, train_with};
use ccst::{CcstModel, LossConfig, Mode, ModelConfig, TrainConfig, VectorDataset};

fn smoke_data() -> VectorDataset {
    let cfg = MixtureConfig {
        base_count: 1000,
        query_count: 1,
        dim: 64,
        clusters: 16,
        latent_dim: 16,
        seed: 5,
        ..MixtureConfig::default()
    };
    gaussian_mixture(&cfg).unwrap().0
}

fn smoke_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 100,
        lr0: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn fresh() -> CcstModel<f32> {
    let mut cfg = ModelConfig::new(64, 16);
    cfg.seed = 4;
    CcstModel::init(cfg).unwrap()
}

fn row_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Independent evaluation of the loss over all ordered pairs of `n` rows.
fn oracle_loss(orig: &VectorDataset, comp: &VectorDataset, n: usize, cfg: &LossConfig) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = row_dist(orig.row(i), orig.row(j));
            let w = (-(d / cfg.boundary).ln()).clamp(cfg.beta, cfg.alpha);
            total += w * (row_dist(comp.row(i), comp.row(j)) - d).abs();
        }
    }
    total / (n * n) as f64
}

/// Mean weighted distortion over close pairs of held-out points.
fn close_pair_distortion(model: &CcstModel<f32>, held: &VectorDataset, cfg: &LossConfig) -> f64 {
    let mut m = model.clone();
    m.set_mode(Mode::Infer);
    let c = compress_dataset(&m, held, 256).unwrap();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..held.count() {
        for j in i + 1..held.count() {
            let d = row_dist(held.row(i), held.row(j));
            if d < cfg.boundary / std::f64::consts::E {
                sum += pair_weight(d, cfg) * (row_dist(c.row(i), c.row(j)) - d).abs();
                count += 1;
            }
        }
    }
    assert!(count > 0);
    sum / count as f64
}

#[test]
fn smoke_training_reduces_loss_and_is_reproducible() {
    let data = smoke_data();
    let before = data.clone();
    let loss = LossConfig::new(estimate_boundary(&data, 20_000, 0).unwrap());

    let mut a = fresh();
    let init = a.clone();
    let ra = train(&mut a, &data, &loss, &smoke_config(30)).unwrap();
    assert_eq!(data, before);
    assert_eq!(ra.epochs.len(), 30);
    assert!(ra.epochs[29].mean_loss < ra.epochs[0].mean_loss);

    let mut b = fresh();
    let rb = train(&mut b, &data, &loss, &smoke_config(30)).unwrap();
    let curve = |r: &ccst::TrainReport| r.epochs.iter().map(|e| e.mean_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(curve(&ra), curve(&rb));
    assert_eq!(a.params(), b.params());

    let compressed = compress_dataset(&a, &data, 128).unwrap();
    let n = data.count().min(ra.eval_points);
    let oracle = oracle_loss(&data, &compressed, n, &loss);
    assert!((oracle - ra.final_eval_loss).abs() < 1e-5, "{oracle} vs {}", ra.final_eval_loss);

    let held = smoke_holdout();
    let d_init = close_pair_distortion(&init, &held, &loss);
    let d_trained = close_pair_distortion(&a, &held, &loss);
    assert!(d_trained < d_init, "{d_trained} vs {d_init}");
}

/// Extra points from the same mixture as the smoke data.
fn smoke_holdout() -> VectorDataset {
    let cfg = MixtureConfig {
        base_count: 1000,
        query_count: 300,
        dim: 64,
        clusters: 16,
        latent_dim: 16,
        seed: 5,
        ..MixtureConfig::default()
    };
    gaussian_mixture(&cfg).unwrap().1
}

#[test]
fn learning_rate_strictly_decreases() {
    let cfg = smoke_config(50);
    let lrs: Vec<f64> = (0..50).map(|e| poly_lr(e, &cfg).unwrap()).collect();
    assert_eq!(lrs[0], cfg.lr0);
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn epoch_callback_sees_every_epoch() {
    let data = smoke_data();
    let loss = LossConfig::new(estimate_boundary(&data, 5_000, 0).unwrap());
    let mut m = fresh();
    let mut seen = Vec::new();
    train_with(&mut m, &data, &loss, &smoke_config(3), |rec, _| {
        seen.push(rec.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(m.mode(), Mode::Infer);
}

#[test]
fn rejects_dimension_mismatch_and_small_datasets() {
    let data = smoke_data();
    let loss = LossConfig::new(1.0);
    let mut wrong = CcstModel::<f32>::init(ModelConfig::new(32, 8)).unwrap();
    assert!(train(&mut wrong, &data, &loss, &smoke_config(1)).is_err());
    let tiny = data.select(&(0..50).collect::<Vec<_>>());
    let mut m = fresh();
    assert!(train(&mut m, &tiny, &loss, &smoke_config(1)).is_err());
}

//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ccst::eval::{brute_force_knn, distortion_interval, jl_min_epsilon, recall_at, Recall};
use ccst::hnsw::{HnswConfig, HnswIndex};
use ccst::loss::{batch_inrp_loss, estimate_boundary, inrp_loss_graph, pair_targets, pair_weight, DEFAULT_BOUNDARY_PAIRS};
use ccst::model::{project_dataset, sparse_random_projection, BnPass};
use ccst::quant::{IvfConfig, IvfIndex, PqCodebook, PqConfig, PqIndex, SqIndex};
use ccst::synth::{gaussian_mixture, MixtureConfig};
use ccst::tensor::{finite_diff_check, Tape, Tensor};
use ccst::train::{compress_dataset, train};
use ccst::{CcstModel, LossConfig, ModelConfig, NeighborLists, TrainConfig, VectorDataset};

type Outcome = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gaussian_rows(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> VectorDataset {
    let v = (0..count * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    VectorDataset::new(count, dim, v).unwrap()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut cfg = ModelConfig::new(32, 8);
    cfg.n_projections = 4;
    cfg.stages = 2;
    cfg.encoders_per_stage = vec![1, 1];
    cfg.heads = 2;
    cfg.v_dim = 4;
    cfg.qk_dim = 2;
    cfg.seed = 3;
    cfg.zero_init_residual = false;
    let model = CcstModel::<f64>::init(cfg).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[16, 32], |_| rng.random::<f64>() * 2.0 - 1.0);
    let ds = VectorDataset::new(16, 32, x.data().iter().map(|&v| v as f32).collect()).map_err(err)?;
    let lc = LossConfig::new(estimate_boundary(&ds, 120, 0).map_err(err)?);
    let targets = pair_targets(&x, &lc).map_err(err)?;

    let eval = |params: &[Tensor<f64>], with_grad: bool| -> ccst::Result<(f64, Vec<Tensor<f64>>)> {
        let mut m = model.clone();
        for (p, q) in m.params_mut().iter_mut().zip(params) {
            *p = q.clone();
        }
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let mut stats = m.bn_stats().to_vec();
        let out = m.forward_graph(&mut tape, &vars, xv, BnPass::Train(&mut stats))?;
        let l = inrp_loss_graph(&mut tape, out, targets.clone(), &lc)?;
        let v = tape.value(l).data()[0];
        if !with_grad {
            return Ok((v, Vec::new()));
        }
        let mut g = tape.backward(l)?;
        Ok((v, vars.iter().map(|&v| g.take(v)).collect()))
    };
    let (_, grads) = eval(model.params(), true).map_err(err)?;
    let report = finite_diff_check(|p| Ok(eval(p, false)?.0), model.params(), &grads, 1e-5, 1e-4).map_err(err)?;
    let elapsed = start.elapsed();
    let ok = report.passed() && report.per_param.len() == model.params().len() && elapsed < Duration::from_secs(120);
    Ok((
        ok,
        format!(
            "{} tensors, max rel error {:.2e}, {:.1}s",
            report.per_param.len(),
            report.max_rel_error(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn projection_law() -> Outcome {
    let (d_in, d_out) = (256, 64);
    let mut zeros = 0usize;
    let mut total = 0usize;
    let mut worst_seed_dev = 0f64;
    let mut bad_values = 0usize;
    let mut ratio_sum = 0f64;
    let mut ratio_n = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..50 {
        let w = sparse_random_projection(d_in, d_out, seed).map_err(err)?;
        let z = w.data().iter().filter(|&&v| v == 0.0).count();
        worst_seed_dev = worst_seed_dev.max((z as f64 / w.numel() as f64 - 15.0 / 16.0).abs());
        zeros += z;
        total += w.numel();
        bad_values += w.data().iter().filter(|&&v| v != 0.0 && v != 0.5 && v != -0.5).count();
        let xs = gaussian_rows(&mut rng, 20, d_in);
        let ys = gaussian_rows(&mut rng, 20, d_in);
        let px = project_dataset(&xs, &w).map_err(err)?;
        let py = project_dataset(&ys, &w).map_err(err)?;
        for i in 0..20 {
            let sq = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>();
            ratio_sum += sq(px.row(i), py.row(i)) / sq(xs.row(i), ys.row(i));
            ratio_n += 1;
        }
    }
    let frac = zeros as f64 / total as f64;
    let ratio = ratio_sum / ratio_n as f64;
    let ok = (frac - 15.0 / 16.0).abs() <= 0.01 && worst_seed_dev <= 0.01 && bad_values == 0 && (0.95..=1.05).contains(&ratio);
    Ok((
        ok,
        format!("zero fraction {frac:.4}, off-grid entries {bad_values}, mean distance ratio {ratio:.4} over {ratio_n} pairs"),
    ))
}

fn jl_example() -> Outcome {
    let eps = jl_min_epsilon(1e6, 480).ok_or("no epsilon below 1")?;
    let a = distortion_interval(1.177, 0.63).map_err(err)?;
    let b = distortion_interval(1.5615, 0.63).map_err(err)?;
    let close = |x: f64, y: f64| (x - y).abs() <= 5e-4;
    let ok = (eps - 0.63).abs() <= 0.005 && close(a.0, 0.7160) && close(a.1, 1.5027) && close(b.0, 0.9498) && close(b.1, 1.9936);
    Ok((
        ok,
        format!("epsilon {eps:.4}, [{:.4}, {:.4}], [{:.4}, {:.4}]", a.0, a.1, b.0, b.1),
    ))
}

fn weight_curve() -> Outcome {
    let cfg = LossConfig::new(3.7);
    let e = std::f64::consts::E;
    let cases = [(3.7, 0.01), (3.7 / e, 1.0), (3.7 / e.powi(3), 2.0), (7.4, 0.01)];
    let worst = cases
        .iter()
        .map(|&(d, w)| (pair_weight(d, &cfg) - w).abs())
        .fold(0.0, f64::max);
    Ok((worst <= 1e-9, format!("max deviation {worst:.1e}")))
}

fn oracle_loss(x: &[Vec<f64>], y: &[Vec<f64>], boundary: f64) -> f64 {
    let b = x.len();
    let dist = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            let d = dist(&x[i], &x[j]);
            let w = (-(d / boundary).ln()).clamp(0.01, 2.0);
            total += w * (dist(&y[i], &y[j]) - d).abs();
        }
    }
    total / (b * b) as f64
}

fn loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0f64;
    for _ in 0..20 {
        let xs: Vec<Vec<f64>> = (0..32).map(|_| (0..24).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..32).map(|_| (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).collect();
        let boundary = 0.5 + rng.random::<f64>() * 2.0;
        let xt = Tensor::new(&[32, 24], xs.concat()).map_err(err)?;
        let yt = Tensor::new(&[32, 6], ys.concat()).map_err(err)?;
        let got = batch_inrp_loss(&xt, &yt, &LossConfig::new(boundary)).map_err(err)?;
        let want = oracle_loss(&xs, &ys, boundary);
        worst = worst.max((got - want).abs() / want.abs());
    }
    let xt = Tensor::from_fn(&[32, 24], |i| (i as f64 * 0.37).sin());
    let identity = batch_inrp_loss(&xt, &xt, &LossConfig::new(1.0)).map_err(err)?;
    Ok((
        worst < 1e-6 && identity == 0.0,
        format!("max relative deviation {worst:.1e}, identity loss {identity}"),
    ))
}

/// The 10k-point mixture, its trained compression and shared indexes.
struct Task {
    base: VectorDataset,
    queries: VectorDataset,
    gt: NeighborLists,
    cbase: VectorDataset,
    cqueries: VectorDataset,
    train_secs: f64,
    epochs: usize,
}

const TASK_EPOCHS: usize = 10;

fn task() -> ccst::Result<Task> {
    let (base, queries) = gaussian_mixture(&MixtureConfig::default())?;
    let gt = brute_force_knn(&base, &queries, 100)?;
    let mut mc = ModelConfig::new(base.dim(), base.dim() / 4);
    mc.seed = 1;
    let mut model = CcstModel::<f32>::init(mc)?;
    let loss = LossConfig::new(estimate_boundary(&base, DEFAULT_BOUNDARY_PAIRS, 0)?);
    let tc = TrainConfig {
        epochs: TASK_EPOCHS,
        batch_size: 128,
        lr0: 1e-3,
        seed: 0,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    train(&mut model, &base, &loss, &tc)?;
    let train_secs = start.elapsed().as_secs_f64();
    let cbase = compress_dataset(&model, &base, 1024)?;
    let cqueries = compress_dataset(&model, &queries, 1024)?;
    Ok(Task {
        base,
        queries,
        gt,
        cbase,
        cqueries,
        train_secs,
        epochs: TASK_EPOCHS,
    })
}

fn training_efficacy(t: &Task) -> Outcome {
    let w = sparse_random_projection(t.base.dim(), t.cbase.dim(), 7).map_err(err)?;
    let sb = project_dataset(&t.base, &w).map_err(err)?;
    let sq = project_dataset(&t.queries, &w).map_err(err)?;
    let srp = recall_at(&brute_force_knn(&sb, &sq, 10).map_err(err)?, &t.gt, Recall::OneAt(10)).map_err(err)?;
    let trained = recall_at(&brute_force_knn(&t.cbase, &t.cqueries, 10).map_err(err)?, &t.gt, Recall::OneAt(10)).map_err(err)?;
    Ok((
        trained >= srp + 0.10 && t.epochs <= 100,
        format!(
            "1@10 trained {trained:.3} vs SRP {srp:.3} after {} epochs ({:.0}s)",
            t.epochs, t.train_secs
        ),
    ))
}

fn hnsw_oracle(t: &Task, full: &HnswIndex) -> Outcome {
    let n = t.base.count();
    let (exact, _) = full.search_batch(&t.queries, 100, n).map_err(err)?;
    let at_count = recall_at(&exact, &t.gt, Recall::Overlap(100)).map_err(err)?;
    let mut sweep = Vec::new();
    for ef in [100, 200, 400] {
        let (res, _) = full.search_batch(&t.queries, 100, ef).map_err(err)?;
        sweep.push(recall_at(&res, &t.gt, Recall::Overlap(100)).map_err(err)?);
    }
    let monotone = sweep.windows(2).all(|w| w[1] >= w[0]);
    Ok((
        at_count == 1.0 && monotone,
        format!(
            "100@100 at ef={n}: {at_count:.4}; ef 100/200/400: {:.4}/{:.4}/{:.4}",
            sweep[0], sweep[1], sweep[2]
        ),
    ))
}

fn split_protocol(t: &Task, full: &HnswIndex) -> Outcome {
    let mut split = HnswIndex::build(t.cbase.clone(), HnswConfig::default()).map_err(err)?;
    split.attach_search_vectors(t.base.clone()).map_err(err)?;
    let ef = HnswConfig::default().ef_search_default;
    let (rf, _) = full.search_batch(&t.queries, 10, ef).map_err(err)?;
    let (rs, _) = split.search_batch(&t.queries, 10, ef).map_err(err)?;
    let full_recall = recall_at(&rf, &t.gt, Recall::OneAt(10)).map_err(err)?;
    let split_recall = recall_at(&rs, &t.gt, Recall::OneAt(10)).map_err(err)?;
    let ratio = full.build_stats().multiply_ops as f64 / split.build_stats().multiply_ops as f64;
    Ok((
        split_recall >= full_recall - 0.02 && ratio >= 2.0,
        format!("1@10 split {split_recall:.3} vs full {full_recall:.3}; construction multiplies {ratio:.2}x fewer"),
    ))
}

fn quantizer_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let data = gaussian_rows(&mut rng, 2000, 32);
    let pq_cfg = PqConfig { m: 8, iters: 10, seed: 1 };
    let cb = PqCodebook::train(&data, &pq_cfg).map_err(err)?;
    let codes = cb.encode(&data).map_err(err)?;
    let recon = cb.decode(&codes).map_err(err)?;
    let queries = gaussian_rows(&mut rng, 1000, 32);
    let mut worst_adc = 0f64;
    for qi in 0..1000 {
        let row = rng.random_range(0..data.count());
        let q = queries.row(qi);
        let table = cb.distance_table(q).map_err(err)?;
        let adc = cb.adc_distance(&table, &codes[row * 8..(row + 1) * 8]) as f64;
        let exact: f64 = q.iter().zip(recon.row(row)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        worst_adc = worst_adc.max((adc - exact).abs() / exact);
    }

    let mut exact_recon = true;
    for distinct in [200usize, 256] {
        let points = gaussian_rows(&mut rng, distinct, 16);
        let rows: Vec<&[f32]> = (0..3 * distinct).map(|i| points.row(i % distinct)).collect();
        let dup = VectorDataset::from_rows(&rows).map_err(err)?;
        let cb = PqCodebook::train(&dup, &PqConfig { m: 4, iters: 10, seed: 2 }).map_err(err)?;
        let back = cb.decode(&cb.encode(&dup).map_err(err)?).map_err(err)?;
        exact_recon &= back.values() == dup.values();
    }

    let ivf_cfg = IvfConfig {
        nlist: 8,
        pq: pq_cfg.clone(),
        ..IvfConfig::default()
    };
    let ivf = IvfIndex::build(&data, &ivf_cfg).map_err(err)?;
    let flat = PqIndex::from_parts(ivf.codebook().clone(), ivf.codebook().encode(&data).map_err(err)?).map_err(err)?;
    let mut identical = true;
    for qi in 0..100 {
        let a = ivf.search(queries.row(qi), 100, 8).map_err(err)?;
        let b = flat.search(queries.row(qi), 100).map_err(err)?;
        identical &= a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.to_bits() == y.1.to_bits());
    }
    Ok((
        worst_adc < 1e-4 && exact_recon && identical,
        format!("ADC max rel error {worst_adc:.1e}; exact reconstruction {exact_recon}; IVF nprobe=nlist equals flat {identical}"),
    ))
}

fn sq_fusion(t: &Task) -> Outcome {
    let float = recall_at(&brute_force_knn(&t.cbase, &t.cqueries, 10).map_err(err)?, &t.gt, Recall::OneAt(10)).map_err(err)?;
    let sq = SqIndex::build(&t.cbase).map_err(err)?;
    let quant = recall_at(&sq.search_batch(&t.cqueries, 10).map_err(err)?, &t.gt, Recall::OneAt(10)).map_err(err)?;
    Ok((
        quant >= float - 0.02,
        format!("1@10 8-bit {quant:.3} vs float {float:.3}"),
    ))
}

fn ccst(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ccst"))
        .args(args)
        .current_dir(dir)
        .env("CCST_THREADS", "1")
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!("ccst {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn pipeline_run(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(err)?;
    }
    std::fs::create_dir_all(dir).map_err(err)?;
    let config = serde_json::json!({
        "out_dir": dir.join("train"),
        "seed": 11,
        "synth": { "base_count": 1500, "query_count": 20, "dim": 32, "clusters": 8, "latent_dim": 8 },
        "model": { "d_out": 8 },
        "train": { "epochs": 3, "batch_size": 128, "lr0": 1e-3, "checkpoint_every": 2 },
        "index": { "hnsw": { "m": 8, "ef_construction": 40 }, "ivf": { "nlist": 4 } },
        "bench": { "k": 10, "ef_search": [20, 40], "nprobe": [1, 4], "timing": false }
    });
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config).unwrap()).map_err(err)?;
    ccst(dir, &["synth", "--config", "config.json", "--base-out", "base.fvecs", "--queries-out", "queries.fvecs", "--count", "1500", "--queries", "20", "--dim", "32", "--clusters", "8", "--seed", "11"])?;
    ccst(dir, &["train", "--config", "config.json", "--base", "base.fvecs"])?;
    let ckpt = "train/model.ccst";
    ccst(dir, &["compress", "--checkpoint", ckpt, "--input", "base.fvecs", "--output", "cbase.fvecs"])?;
    ccst(dir, &["compress", "--checkpoint", ckpt, "--input", "queries.fvecs", "--output", "cqueries.fvecs"])?;
    ccst(dir, &["gt", "--base", "base.fvecs", "--queries", "queries.fvecs", "--k", "10", "--output", "gt.ivecs"])?;
    for kind in ["hnsw", "pq", "ivfadc", "sq", "flat"] {
        let index = format!("{kind}.idx");
        let results = format!("{kind}.ivecs");
        ccst(dir, &["build", "--config", "config.json", "--kind", kind, "--vectors", "cbase.fvecs", "--output", &index])?;
        let mut search = vec!["search", "--index", &index, "--queries", "cqueries.fvecs", "--k", "10", "--output", &results];
        if kind == "hnsw" {
            search.extend(["--vectors", "cbase.fvecs"]);
        }
        ccst(dir, &search)?;
        ccst(dir, &["eval", "--results", &results, "--gt", "gt.ivecs", "--label", kind, "--jsonl", &format!("{kind}.jsonl")])?;
    }
    ccst(dir, &["build", "--config", "config.json", "--vectors", "cbase.fvecs", "--search-vectors", "base.fvecs", "--output", "split.idx"])?;
    ccst(dir, &["search", "--index", "split.idx", "--queries", "queries.fvecs", "--k", "10", "--vectors", "cbase.fvecs", "--search-vectors", "base.fvecs", "--output", "split.ivecs"])?;
    ccst(dir, &["bench", "--config", "config.json", "--base", "base.fvecs", "--queries", "queries.fvecs", "--out", "bench", "--no-timing"])?;

    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(files)
}

fn cli_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let dir = tmp.path().join("run");
    let first = pipeline_run(&dir)?;
    let second = pipeline_run(&dir)?;
    let differing: Vec<String> = first
        .iter()
        .filter(|(p, bytes)| second.get(*p) != Some(bytes))
        .map(|(p, _)| p.display().to_string())
        .collect();
    let same_set = first.keys().eq(second.keys());
    let has = |name: &str| first.keys().any(|p| p.ends_with(name));
    let covered = ["model.ccst", "checkpoint-epoch00002.ccst", "hnsw.idx", "ivfadc.idx", "bench_report.txt", "manifest.json"]
        .iter()
        .all(|n| has(n));
    Ok((
        differing.is_empty() && same_set && covered,
        if differing.is_empty() {
            format!("{} files byte-identical across two runs", first.len())
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    ))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradient_check()),
        ("projection initialization law", projection_law()),
        ("JL example values", jl_example()),
        ("INRP weight curve", weight_curve()),
        ("loss oracle equivalence", loss_oracle()),
    ];
    match task() {
        Ok(t) => {
            results.push(("training efficacy", training_efficacy(&t)));
            match HnswIndex::build(t.base.clone(), HnswConfig::default()) {
                Ok(full) => {
                    results.push(("HNSW oracle equivalence", hnsw_oracle(&t, &full)));
                    results.push(("split protocol", split_protocol(&t, &full)));
                }
                Err(e) => {
                    results.push(("HNSW oracle equivalence", Err(err(&e))));
                    results.push(("split protocol", Err(err(&e))));
                }
            }
            results.push(("ADC/PQ/IVF exactness", quantizer_exactness()));
            results.push(("SQ fusion", sq_fusion(&t)));
        }
        Err(e) => {
            for name in ["training efficacy", "HNSW oracle equivalence", "split protocol"] {
                results.push((name, Err(err(&e))));
            }
            results.push(("ADC/PQ/IVF exactness", quantizer_exactness()));
            results.push(("SQ fusion", Err(err(&e))));
        }
    }
    results.push(("CLI reproducibility", cli_reproducibility()));

    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        let (ok, detail) = match outcome {
            Ok((ok, d)) => (*ok, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!("{} criterion {:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

use ccst::tensor::{finite_diff_check, BatchNormConfig, BnMode, RunningStats, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Values bounded away from zero so ReLU kinks stay out of reach of h.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = 0.05 + rng.random::<f64>();
        if rng.random::<bool>() { v } else { -v }
    })
}

/// Reduces the op output to a scalar through a fixed random probe, then
/// compares analytic and numeric gradients for every input.
fn check(seed: u64, inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Tape<f64>, &[Var]) -> ccst::Result<Var>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let eval = |params: &[Tensor<f64>], probe: Option<&Tensor<f64>>| -> ccst::Result<(f64, Vec<Tensor<f64>>, usize)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = op(&mut tape, &vars)?;
        let n = tape.value(out).numel();
        let Some(probe) = probe else {
            return Ok((0.0, Vec::new(), n));
        };
        let flat = tape.reshape(out, &[1, n])?;
        let pv = tape.leaf(probe.clone());
        let dot = tape.matmul(flat, pv)?;
        let s = tape.sum(dot)?;
        let v = tape.value(s).data()[0];
        let mut g = tape.backward(s)?;
        Ok((v, vars.iter().map(|&v| g.take(v)).collect(), n))
    };
    let (_, _, n) = eval(&inputs, None).unwrap();
    let probe = random(&mut rng, &[n, 1]);
    let (_, grads, _) = eval(&inputs, Some(&probe)).unwrap();
    let report = finite_diff_check(|p| Ok(eval(p, Some(&probe))?.0), &inputs, &grads, 1e-5, 1e-4).unwrap();
    report.max_rel_error()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul_add_scale_gradients(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, &[n, k]), random(&mut rng, &[k, m]), random(&mut rng, &[n, m])];
        let err = check(seed, inputs, |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let q = t.add(p, v[2])?;
            t.scale(q, -1.7)
        });
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn add_row_and_relu_gradients(seed in any::<u64>(), b in 1usize..4, t_ in 1usize..4, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![away_from_zero(&mut rng, &[b, t_, d]), Tensor::zeros(&[d])];
        let err = check(seed, inputs, |t, v| {
            let a = t.add_row(v[0], v[1])?;
            t.relu(a)
        });
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn token_plumbing_gradients(seed in any::<u64>(), b in 1usize..4, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, &[b, d]), random(&mut rng, &[b, 2, d]), random(&mut rng, &[b, d])];
        let err = check(seed, inputs, |t, v| {
            let cat = t.concat_tokens(&[v[0], v[1]])?;
            let bumped = t.add_token(cat, v[2], 1)?;
            let last = t.slice_token(bumped, 2)?;
            let first = t.slice_token(bumped, 1)?;
            t.concat_features(&[first, last, v[2]])
        });
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_and_bmm_gradients(seed in any::<u64>(), b in 1usize..3, tt in 1usize..4, s in 1usize..4, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, &[b, tt, k]), random(&mut rng, &[b, s, k]), random(&mut rng, &[b, s, k])];
        let err = check(seed, inputs, |t, v| {
            let scores = t.bmm(v[0], v[1], true)?;
            let w = t.softmax_rows(scores)?;
            t.bmm(w, v[2], false)
        });
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn batchnorm_train_gradients(seed in any::<u64>(), n in 4usize..10, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, &[n, d]), random(&mut rng, &[d]), random(&mut rng, &[d])];
        let err = check(seed, inputs, |t, v| {
            let mut stats = RunningStats::new(d);
            t.batchnorm(v[0], v[1], v[2], BnMode::Train(&mut stats), BatchNormConfig::default())
        });
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn distance_and_weighted_gap_gradients(seed in any::<u64>(), b in 2usize..6, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<f64> = (0..b * b).map(|_| 3.0 + rng.random::<f64>()).collect();
        let weights: Vec<f64> = (0..b * b).map(|_| rng.random::<f64>()).collect();
        let inputs = vec![random(&mut rng, &[b, d])];
        let err = check(seed, inputs, |t, v| {
            let dist = t.pairwise_distances(v[0])?;
            t.weighted_gap(dist, targets.clone(), weights.clone(), 0.25, false)
        });
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..8), 1..6)) {
        let width = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().cycle().take(width).copied()).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[rows.len(), width], data).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        for row in tape.value(s).data().chunks(width) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_output_is_standardized(seed in any::<u64>(), n in 16usize..40, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[n, d], |_| rng.random::<f64>() * 10.0 - 3.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let g = tape.leaf(Tensor::full(&[d], 1.0));
        let b = tape.leaf(Tensor::zeros(&[d]));
        let mut stats = RunningStats::new(d);
        let cfg = BatchNormConfig { eps: 0.0, ..BatchNormConfig::default() };
        let y = tape.batchnorm(xv, g, b, BnMode::Train(&mut stats), cfg).unwrap();
        let v = tape.value(y).data();
        for f in 0..d {
            let col: Vec<f64> = (0..n).map(|i| v[i * d + f]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn backward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let a = tape.leaf(random(&mut rng, &[6, 5]));
    let w = tape.leaf(random(&mut rng, &[5, 3]));
    let h = tape.matmul(a, w).unwrap();
    let r = tape.relu(h).unwrap();
    let s = tape.softmax_rows(r).unwrap();
    let l = tape.sum(s).unwrap();
    let g1 = tape.backward(l).unwrap();
    let g2 = tape.backward(l).unwrap();
    for v in [a, w] {
        let (x, y) = (g1.get(v), g2.get(v));
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1, 3], vec![0.0f64, -1.0, 2.0]).unwrap());
    let r = tape.relu(x).unwrap();
    let l = tape.sum(r).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).data(), &[0.0, 0.0, 1.0]);
}

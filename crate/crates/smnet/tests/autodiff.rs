//! Oracle-backed tests for the reverse-mode core: f64 reference
//! implementations, finite-difference gradient checks, and the SGD
//! momentum recurrence.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smnet::autodiff::{
    sgd_momentum_step, NormStats, ParameterStore, PoolMode, Tape, Tensor2D, Var,
};

fn tensor(rows: usize, cols: usize, v: &[f32]) -> Tensor2D {
    Tensor2D::new(rows, cols, v.to_vec()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    let v: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor2D::new(rows, cols, v).unwrap()
}

// ---------------------------------------------------------------------------
// f64 reference implementations (independent of the tape)
// ---------------------------------------------------------------------------

mod oracle {
    /// out = x·w + bias, all f64.
    pub fn linear(x: &[f64], w: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = b[j];
                for p in 0..k {
                    acc += x[i * k + p] * w[p * m + j];
                }
                out[i * m + j] = acc;
            }
        }
        out
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| v.max(0.0)).collect()
    }

    /// Train-mode feature norm over rows with epsilon 1e-5.
    pub fn feature_norm(x: &[f64], gamma: &[f64], beta: &[f64], n: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for j in 0..d {
            let mean: f64 = (0..n).map(|r| x[r * d + j]).sum::<f64>() / n as f64;
            let var: f64 =
                (0..n).map(|r| (x[r * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for r in 0..n {
                out[r * d + j] = gamma[j] * (x[r * d + j] - mean) * inv + beta[j];
            }
        }
        out
    }

    pub fn mse(p: &[f64], t: &[f64]) -> f64 {
        p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
    }

    /// Central finite differences of `f` at `x`.
    pub fn grad_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    }
}

fn max_rel_err(analytic: &[f32], reference: &[f64]) -> f64 {
    let scale = reference
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a as f64 - r).abs() / scale)
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

#[test]
fn linear_identity_case() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor2D::identity(2));
    let w = tape.leaf(&Tensor2D::identity(2));
    let b = tape.leaf(&Tensor2D::zeros(1, 2));
    let out = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(out).values(), Tensor2D::identity(2).values());
}

#[test]
fn linear_direct_evaluation() {
    let mut tape = Tape::new();
    let x = tape.leaf(&tensor(1, 2, &[1.0, 2.0]));
    let w = tape.leaf(&tensor(2, 1, &[1.0, 1.0]));
    let b = tape.leaf(&tensor(1, 1, &[3.0]));
    let out = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(out).values(), &[6.0]);
}

#[test]
fn linear_shape_mismatch_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor2D::zeros(2, 3));
    let w = tape.leaf(&Tensor2D::zeros(4, 2));
    let b = tape.leaf(&Tensor2D::zeros(1, 2));
    assert!(tape.linear(x, w, b).is_err());
}

#[test]
fn linear_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, 4, 3);
    let w0 = random_tensor(&mut rng, 3, 2);
    let b0 = Tensor2D::zeros(1, 2);
    // Scalar target: mean of all outputs via mean_rows + ones-weight linear.
    // d(mean)/dW_pq = (1/N) Σ_i x_ip — the columnwise input sums, scaled.
    let mut tape = Tape::new();
    let xi = tape.leaf(&x);
    let wi = tape.leaf(&w0);
    let bi = tape.leaf(&b0);
    let out = tape.linear(xi, wi, bi).unwrap();
    let pooled = tape.mean_rows(out);
    let ones = tape.leaf(&tensor(2, 1, &[1.0, 1.0]));
    let zb = tape.leaf(&Tensor2D::zeros(1, 1));
    let s = tape.linear(pooled, ones, zb).unwrap();
    tape.backward(s).unwrap();
    let grad = tape.grad(wi).unwrap().to_vec();
    // closed form: columnwise input sums / 4 (mean over 4 rows), same for
    // both output columns
    for p in 0..3 {
        let col_sum: f32 = (0..4).map(|i| x.get(i, p)).sum();
        for q in 0..2 {
            let expect = col_sum / 4.0;
            assert!(
                (grad[p * 2 + q] - expect).abs() < 1e-6,
                "grad[{p},{q}]={} expected {expect}",
                grad[p * 2 + q]
            );
        }
    }
    // f64 finite-difference oracle
    let xf: Vec<f64> = x.values().iter().map(|&v| v as f64).collect();
    let f = |wv: &[f64]| -> f64 {
        let out = oracle::linear(&xf, wv, &[0.0, 0.0], 4, 3, 2);
        out.iter().sum::<f64>() / out.len() as f64 * 2.0 // mean_rows then ·[1,1]
    };
    let w64: Vec<f64> = w0.values().iter().map(|&v| v as f64).collect();
    let fd = oracle::grad_fd(f, &w64, 1e-5);
    assert!(max_rel_err(&grad, &fd) < 1e-6, "rel err {}", max_rel_err(&grad, &fd));
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

#[test]
fn relu_definition() {
    let mut tape = Tape::new();
    let x = tape.leaf(&tensor(1, 3, &[-1.0, 0.0, 2.0]));
    let out = tape.relu(x);
    assert_eq!(tape.value(out).values(), &[0.0, 0.0, 2.0]);
}

#[test]
fn relu_all_negative_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&tensor(1, 3, &[-1.0, -2.0, -0.5]));
    let out = tape.relu(x);
    let target = tape.leaf(&tensor(1, 3, &[1.0, 1.0, 1.0]));
    let loss = tape.mse_loss(out, target).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.value(out).values(), &[0.0, 0.0, 0.0]);
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn relu_gradient_matches_finite_differences() {
    for x0 in [0.3f32, -0.3] {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(1, 1, &[x0]));
        let out = tape.relu(x);
        let target = tape.leaf(&tensor(1, 1, &[1.0]));
        let loss = tape.mse_loss(out, target).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap()[0];
        let f = |v: &[f64]| oracle::mse(&oracle::relu(v), &[1.0]);
        let fd = oracle::grad_fd(f, &[x0 as f64], 1e-6)[0];
        let rel = (g as f64 - fd).abs() / fd.abs().max(1e-12);
        assert!(rel < 1e-6, "x={x0}: analytic {g}, fd {fd}");
    }
}

// ---------------------------------------------------------------------------
// feature_norm
// ---------------------------------------------------------------------------

#[test]
fn feature_norm_eval_constant_column_gives_beta() {
    let mut tape = Tape::new();
    let x = tape.leaf(&tensor(3, 1, &[5.0, 5.0, 5.0]));
    let gamma = tape.leaf(&tensor(1, 1, &[2.0]));
    let beta = tape.leaf(&tensor(1, 1, &[0.7]));
    let stats = NormStats { mean: vec![5.0], var: vec![1.0] };
    let (out, batch) = tape.feature_norm(x, gamma, beta, &stats, false).unwrap();
    assert!(batch.is_none());
    for &v in tape.value(out).values() {
        assert!((v - 0.7).abs() < 1e-5);
    }
}

#[test]
fn feature_norm_train_standardizes_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = random_tensor(&mut rng, 16, 4);
    let mut tape = Tape::new();
    let x = tape.leaf(&x0);
    let gamma = tape.leaf(&tensor(1, 4, &[1.0; 4]));
    let beta = tape.leaf(&Tensor2D::zeros(1, 4));
    let stats = NormStats::new(4);
    let (out, batch) = tape.feature_norm(x, gamma, beta, &stats, true).unwrap();
    let (bm, bv) = batch.unwrap();
    assert_eq!(bm.len(), 4);
    assert_eq!(bv.len(), 4);
    let o = tape.value(out);
    for j in 0..4 {
        let mean: f64 = (0..16).map(|r| o.get(r, j) as f64).sum::<f64>() / 16.0;
        let var: f64 =
            (0..16).map(|r| (o.get(r, j) as f64 - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6, "col {j} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "col {j} var {var}"); // eps shrinks var slightly
    }
}

#[test]
fn feature_norm_running_stats_momentum_update() {
    let mut stats = NormStats::new(2);
    stats.update(&[1.0, 2.0], &[4.0, 8.0]);
    assert_eq!(stats.mean, vec![0.1, 0.2]);
    assert!((stats.var[0] - (0.9 + 0.4)).abs() < 1e-6);
    assert!((stats.var[1] - (0.9 + 0.8)).abs() < 1e-6);
}

#[test]
fn feature_norm_gamma_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = random_tensor(&mut rng, 8, 4);
    let g0 = random_tensor(&mut rng, 1, 4);
    let t0 = random_tensor(&mut rng, 8, 4);
    let mut tape = Tape::new();
    let x = tape.leaf(&x0);
    let gamma = tape.leaf(&g0);
    let beta = tape.leaf(&Tensor2D::zeros(1, 4));
    let stats = NormStats::new(4);
    let (out, _) = tape.feature_norm(x, gamma, beta, &stats, true).unwrap();
    let target = tape.leaf(&t0);
    let loss = tape.mse_loss(out, target).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(gamma).unwrap().to_vec();

    let xf: Vec<f64> = x0.values().iter().map(|&v| v as f64).collect();
    let tf: Vec<f64> = t0.values().iter().map(|&v| v as f64).collect();
    let f = |gv: &[f64]| {
        let out = oracle::feature_norm(&xf, gv, &[0.0; 4], 8, 4);
        oracle::mse(&out, &tf)
    };
    let g64: Vec<f64> = g0.values().iter().map(|&v| v as f64).collect();
    let fd = oracle::grad_fd(f, &g64, 1e-5);
    assert!(max_rel_err(&analytic, &fd) < 1e-4, "rel err {}", max_rel_err(&analytic, &fd));
}

// ---------------------------------------------------------------------------
// segment_pool
// ---------------------------------------------------------------------------

#[test]
fn segment_pool_mean_single_segment() {
    let mut tape = Tape::new();
    let x = tape.leaf(&tensor(2, 1, &[1.0, 3.0]));
    let out = tape
        .segment_pool(x, Arc::new(vec![0, 0]), 1, PoolMode::Mean)
        .unwrap();
    assert_eq!(tape.value(out).values(), &[2.0]);
}

#[test]
fn segment_pool_max_routes_gradient_to_argmax() {
    let mut tape = Tape::new();
    let x = tape.leaf(&tensor(2, 1, &[1.0, 3.0]));
    let out = tape
        .segment_pool(x, Arc::new(vec![0, 0]), 1, PoolMode::Max)
        .unwrap();
    assert_eq!(tape.value(out).values(), &[3.0]);
    let target = tape.leaf(&tensor(1, 1, &[0.0]));
    let loss = tape.mse_loss(out, target).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    assert_eq!(g[0], 0.0);
    assert!(g[1] != 0.0);
}

#[test]
fn segment_pool_empty_segment_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(&tensor(2, 1, &[1.0, 3.0]));
    assert!(tape
        .segment_pool(x, Arc::new(vec![0, 0]), 2, PoolMode::Mean)
        .is_err());
}

#[test]
fn segment_pool_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = random_tensor(&mut rng, 10, 4);
    let segs: Vec<u32> = (0..10).map(|_| rng.gen_range(0..3)).collect();
    // guarantee non-empty segments
    let mut segs = segs;
    segs[0] = 0;
    segs[1] = 1;
    segs[2] = 2;
    for mode in [PoolMode::Max, PoolMode::Mean] {
        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let out = tape.segment_pool(x, Arc::new(segs.clone()), 3, mode).unwrap();
        for s in 0..3usize {
            for j in 0..4 {
                let members: Vec<f32> = (0..10)
                    .filter(|&r| segs[r] as usize == s)
                    .map(|r| x0.get(r, j))
                    .collect();
                let expect = match mode {
                    PoolMode::Max => members.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
                    PoolMode::Mean => {
                        members.iter().map(|&v| v as f64).sum::<f64>() as f32
                            / members.len() as f32
                    }
                };
                let got = tape.value(out).get(s, j);
                assert!((got - expect).abs() < 1e-6, "seg {s} col {j}: {got} vs {expect}");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// mse
// ---------------------------------------------------------------------------

#[test]
fn mse_zero_when_equal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_tensor(&mut rng, 3, 5);
    let mut tape = Tape::new();
    let a = tape.leaf(&p);
    let b = tape.leaf(&p);
    let loss = tape.mse_loss(a, b).unwrap();
    assert_eq!(tape.value(loss).values(), &[0.0]);
}

#[test]
fn mse_two_element_example() {
    let mut tape = Tape::new();
    let p = tape.leaf(&tensor(1, 2, &[1.0, 0.0]));
    let t = tape.leaf(&tensor(1, 2, &[0.0, 0.0]));
    let loss = tape.mse_loss(p, t).unwrap();
    assert_eq!(tape.value(loss).values(), &[0.5]);
}

#[test]
fn mse_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p0 = random_tensor(&mut rng, 2, 3);
    let t0 = random_tensor(&mut rng, 2, 3);
    let mut tape = Tape::new();
    let p = tape.leaf(&p0);
    let t = tape.leaf(&t0);
    let loss = tape.mse_loss(p, t).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(p).unwrap().to_vec();
    let tf: Vec<f64> = t0.values().iter().map(|&v| v as f64).collect();
    let f = |pv: &[f64]| oracle::mse(pv, &tf);
    let p64: Vec<f64> = p0.values().iter().map(|&v| v as f64).collect();
    let fd = oracle::grad_fd(f, &p64, 1e-6);
    assert!(max_rel_err(&analytic, &fd) < 1e-6);
}

// ---------------------------------------------------------------------------
// composed-graph gradient check and input immutability
// ---------------------------------------------------------------------------

/// Runs linear → relu → feature_norm → segment_pool(mean) → mse on the given
/// weight values and returns (loss_f64, weight grad).
fn composed_graph(
    x0: &Tensor2D,
    wv: &[f32],
    t0: &Tensor2D,
    want_grad: bool,
) -> (f64, Vec<f32>) {
    let mut tape = Tape::new();
    let x = tape.leaf(x0);
    let w = tape.leaf(&tensor(3, 4, wv));
    let b = tape.leaf(&Tensor2D::zeros(1, 4));
    let lin = tape.linear(x, w, b).unwrap();
    let act = tape.relu(lin);
    let gamma = tape.leaf(&tensor(1, 4, &[1.0; 4]));
    let beta = tape.leaf(&Tensor2D::zeros(1, 4));
    let stats = NormStats::new(4);
    let (normed, _) = tape.feature_norm(act, gamma, beta, &stats, true).unwrap();
    let segs = Arc::new(vec![0u32, 0, 1, 1, 2, 2]);
    let pooled = tape.segment_pool(normed, segs, 3, PoolMode::Mean).unwrap();
    let t = tape.leaf(t0);
    let loss = tape.mse_loss(pooled, t).unwrap();
    let lf = tape.mse_f64(pooled, t);
    if !want_grad {
        return (lf, Vec::new());
    }
    tape.backward(loss).unwrap();
    (lf, tape.grad(w).unwrap().to_vec())
}

#[test]
fn composed_graph_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x0 = random_tensor(&mut rng, 6, 3);
    let w0 = random_tensor(&mut rng, 3, 4);
    let t0 = random_tensor(&mut rng, 3, 4);
    let (_, analytic) = composed_graph(&x0, w0.values(), &t0, true);
    // f64 reference of the same graph, differenced at h = 1e-4
    let xf: Vec<f64> = x0.values().iter().map(|&v| v as f64).collect();
    let tf: Vec<f64> = t0.values().iter().map(|&v| v as f64).collect();
    let f = |wv: &[f64]| -> f64 {
        let lin = oracle::linear(&xf, wv, &[0.0; 4], 6, 3, 4);
        let act = oracle::relu(&lin);
        let normed = oracle::feature_norm(&act, &[1.0; 4], &[0.0; 4], 6, 4);
        let mut pooled = vec![0.0f64; 3 * 4];
        for s in 0..3 {
            for j in 0..4 {
                pooled[s * 4 + j] =
                    (normed[(2 * s) * 4 + j] + normed[(2 * s + 1) * 4 + j]) / 2.0;
            }
        }
        oracle::mse(&pooled, &tf)
    };
    let w64: Vec<f64> = w0.values().iter().map(|&v| v as f64).collect();
    let fd = oracle::grad_fd(f, &w64, 1e-4);
    let rel = max_rel_err(&analytic, &fd);
    assert!(rel < 1e-3, "max rel err {rel}");
}

#[test]
fn backward_does_not_mutate_user_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = random_tensor(&mut rng, 4, 3);
    let snapshot = x0.clone();
    let t0 = random_tensor(&mut rng, 4, 3);
    let mut tape = Tape::new();
    let x = tape.leaf(&x0);
    let out = tape.relu(x);
    let t = tape.leaf(&t0);
    let loss = tape.mse_loss(out, t).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(x0, snapshot);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = random_tensor(&mut rng, 6, 3);
    let w0 = random_tensor(&mut rng, 3, 4);
    let t0 = random_tensor(&mut rng, 3, 4);
    let (l1, g1) = composed_graph(&x0, w0.values(), &t0, true);
    let (l2, g2) = composed_graph(&x0, w0.values(), &t0, true);
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

#[test]
fn sgd_zero_gradient_leaves_params_unchanged() {
    let mut store = ParameterStore::new();
    store.insert("w", tensor(1, 2, &[1.0, -2.0])).unwrap();
    store.accumulate_grad("w", &[0.0, 0.0]).unwrap();
    sgd_momentum_step(&mut store, 0.1, 0.9).unwrap();
    assert_eq!(store.get("w").unwrap().values(), &[1.0, -2.0]);
}

#[test]
fn sgd_single_step() {
    let mut store = ParameterStore::new();
    store.insert("w", tensor(1, 1, &[1.0])).unwrap();
    store.accumulate_grad("w", &[0.5]).unwrap();
    sgd_momentum_step(&mut store, 0.1, 0.9).unwrap();
    assert!((store.get("w").unwrap().values()[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-7);
}

#[test]
fn sgd_two_steps_hand_unrolled_recurrence() {
    // constant grad g: step1 = lr·g, step2 = lr·(1 + momentum)·g
    let g = 0.4f32;
    let mut store = ParameterStore::new();
    store.insert("w", tensor(1, 1, &[2.0])).unwrap();
    store.accumulate_grad("w", &[g]).unwrap();
    sgd_momentum_step(&mut store, 0.1, 0.9).unwrap();
    store.accumulate_grad("w", &[g]).unwrap();
    sgd_momentum_step(&mut store, 0.1, 0.9).unwrap();
    let expect = 2.0 - 0.1 * g - 0.1 * 1.9 * g;
    assert!((store.get("w").unwrap().values()[0] - expect).abs() < 1e-6);
}

#[test]
fn sgd_missing_gradient_errors() {
    let mut store = ParameterStore::new();
    store.insert("w", tensor(1, 1, &[1.0])).unwrap();
    assert!(sgd_momentum_step(&mut store, 0.1, 0.9).is_err());
}

#[test]
fn sgd_skips_buffers() {
    let mut store = ParameterStore::new();
    store.insert("w", tensor(1, 1, &[1.0])).unwrap();
    store.insert_buffer("n.running_mean", tensor(1, 1, &[5.0])).unwrap();
    store.accumulate_grad("w", &[1.0]).unwrap();
    sgd_momentum_step(&mut store, 0.1, 0.9).unwrap();
    assert_eq!(store.get("n.running_mean").unwrap().values(), &[5.0]);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParameterStore::new();
    store.insert("layer0.weight", random_tensor(&mut rng, 4, 3)).unwrap();
    store.insert("layer0.bias", random_tensor(&mut rng, 1, 3)).unwrap();
    store
        .insert_buffer("norm0.running_mean", random_tensor(&mut rng, 1, 3))
        .unwrap();
    // give momentum buffers non-trivial content
    store.accumulate_grad("layer0.weight", &vec![0.25; 12]).unwrap();
    store.accumulate_grad("layer0.bias", &vec![-0.5; 3]).unwrap();
    sgd_momentum_step(&mut store, 0.1, 0.9).unwrap();

    let mut buf = Vec::new();
    store.save(&mut buf).unwrap();
    let loaded = ParameterStore::load(buf.as_slice()).unwrap();
    let mut buf2 = Vec::new();
    loaded.save(&mut buf2).unwrap();
    assert_eq!(buf, buf2);
    assert_eq!(
        store.get("layer0.weight").unwrap().values(),
        loaded.get("layer0.weight").unwrap().values()
    );
}

#[test]
fn checkpoint_bad_magic_rejected() {
    let buf = b"XXXX\x00\x00\x00\x00".to_vec();
    assert!(ParameterStore::load(buf.as_slice()).is_err());
}

// ---------------------------------------------------------------------------
// kernel conv / gather / interpolate / concat smoke-level oracles
// ---------------------------------------------------------------------------

#[test]
fn gather_concat_interpolate_round_out_the_op_set() {
    let mut tape = Tape::new();
    let x = tape.leaf(&tensor(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let g = tape.gather_rows(x, Arc::new(vec![2, 0])).unwrap();
    assert_eq!(tape.value(g).values(), &[5.0, 6.0, 1.0, 2.0]);
    let c = tape.concat_cols(g, g).unwrap();
    assert_eq!(tape.value(c).values(), &[5.0, 6.0, 5.0, 6.0, 1.0, 2.0, 1.0, 2.0]);
    let w = Arc::new(vec![vec![(0u32, 0.25f32), (1, 0.75)]]);
    let i = tape.interpolate_rows(g, w).unwrap();
    assert!((tape.value(i).get(0, 0) - (0.25 * 5.0 + 0.75 * 1.0)).abs() < 1e-6);
    let m = tape.mean_rows(x);
    assert_eq!(tape.value(m).values(), &[3.0, 4.0]);
}

#[test]
fn gather_and_interpolate_gradients_check_out() {
    let x0 = tensor(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let t0 = tensor(2, 2, &[0.0, 0.0, 0.0, 0.0]);
    let run = |xv: &[f32]| -> (f64, Vec<f32>) {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(3, 2, xv));
        let g = tape.gather_rows(x, Arc::new(vec![2, 0])).unwrap();
        let w = Arc::new(vec![
            vec![(0u32, 0.25f32), (1, 0.75)],
            vec![(1u32, 1.0f32)],
        ]);
        let i = tape.interpolate_rows(g, w).unwrap();
        let t = tape.leaf(&t0);
        let loss = tape.mse_loss(i, t).unwrap();
        let lf = tape.mse_f64(i, t);
        tape.backward(loss).unwrap();
        (lf, tape.grad(x).unwrap().to_vec())
    };
    let (_, analytic) = run(x0.values());
    // the loss is exactly quadratic in x, so a wide central difference has
    // no truncation error and suppresses f32 rounding noise
    let h = 0.05f32;
    for i in 0..6 {
        let mut xp = x0.values().to_vec();
        xp[i] += h;
        let (up, _) = run(&xp);
        xp[i] -= 2.0 * h;
        let (dn, _) = run(&xp);
        let fd = (up - dn) / (2.0 * h as f64);
        assert!(
            (analytic[i] as f64 - fd).abs() < 1e-4,
            "idx {i}: {} vs {fd}",
            analytic[i]
        );
    }
}

//! Scratch harness for desk-benchmark tuning. Not part of the deliverable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smnet::autodiff::Tensor2D;
use smnet::model::*;
use smnet::pointcloud::PointCloud;
use smnet::sim::*;

fn env_f64(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn env_usize(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn env_str(k: &str, d: &str) -> String {
    std::env::var(k).unwrap_or_else(|_| d.to_string())
}

fn make_samples(
    n: usize,
    surrogate: &Surrogate,
    density: usize,
    master: u64,
    model: &SMNet,
    pp: &PreprocessParams,
) -> Vec<PreparedSample> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = sample_seed(master, i as u32);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let control: Vec<f64> =
                (0..36).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let cloud = surrogate.simulate(&control, density, seed.wrapping_add(1)).unwrap();
            let (clean, _) = preprocess_cloud(&cloud, pp).unwrap();
            let geometry = model.prepare_sample(&clean).unwrap();
            let target =
                Tensor2D::new(1, 36, control.iter().map(|&v| v as f32).collect()).unwrap();
            PreparedSample { id: i as u32, geometry, target, control }
        })
        .collect()
}

/// Grid-binned displacement features from the normalized cloud.
fn lls_features(cloud: &PointCloud, g: usize) -> Vec<f64> {
    let refs = cloud.reference_points().expect("refs");
    let pts = cloud.points();
    let mut sums = vec![0.0f64; g * g * 3];
    let mut counts = vec![0usize; g * g];
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in refs {
        for a in 0..2 {
            lo[a] = lo[a].min(r[a]);
            hi[a] = hi[a].max(r[a]);
        }
    }
    for (p, r) in pts.iter().zip(refs) {
        let gx = (((r[0] - lo[0]) / (hi[0] - lo[0] + 1e-12) * g as f64) as usize).min(g - 1);
        let gy = (((r[1] - lo[1]) / (hi[1] - lo[1] + 1e-12) * g as f64) as usize).min(g - 1);
        let cell = gy * g + gx;
        counts[cell] += 1;
        for a in 0..3 {
            sums[cell * 3 + a] += p[a] - r[a];
        }
    }
    let mut feat = Vec::with_capacity(g * g * 3 + 1);
    for c in 0..g * g {
        let n = counts[c].max(1) as f64;
        for a in 0..3 {
            feat.push(sums[c * 3 + a] / n);
        }
    }
    feat.push(1.0);
    feat
}

/// Least squares via normal equations + Cholesky.
fn lls_fit(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len();
    let m = y[0].len();
    let mut xtx = vec![0.0f64; d * d];
    let mut xty = vec![0.0f64; d * m];
    for i in 0..n {
        for a in 0..d {
            let xa = x[i][a];
            if xa == 0.0 {
                continue;
            }
            for b in a..d {
                xtx[a * d + b] += xa * x[i][b];
            }
            for k in 0..m {
                xty[a * m + k] += xa * y[i][k];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtx[a * d + b] = xtx[b * d + a];
        }
        xtx[a * d + a] += 1e-8; // ridge
    }
    // Cholesky xtx = L Lᵀ
    let mut l = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = xtx[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                l[i * d + i] = s.max(1e-12).sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    // solve L Lᵀ W = Xᵀy column by column
    let mut w = vec![vec![0.0f64; m]; d];
    for k in 0..m {
        let mut z = vec![0.0f64; d];
        for i in 0..d {
            let mut s = xty[i * m + k];
            for j in 0..i {
                s -= l[i * d + j] * z[j];
            }
            z[i] = s / l[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = z[i];
            for j in i + 1..d {
                s -= l[j * d + i] * w[j][k];
            }
            w[i][k] = s / l[i * d + i];
        }
    }
    w
}

fn r2(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let n = truth.len();
    let m = truth[0].len();
    let mut mean = vec![0.0; m];
    for t in truth {
        for k in 0..m {
            mean[k] += t[k] / n as f64;
        }
    }
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for i in 0..n {
        for k in 0..m {
            ss_res += (pred[i][k] - truth[i][k]).powi(2);
            ss_tot += (truth[i][k] - mean[k]).powi(2);
        }
    }
    1.0 - ss_res / ss_tot
}

fn main() {
    let n_train = env_usize("N_TRAIN", 200);
    let n_test = env_usize("N_TEST", 50);
    let epochs = env_usize("EPOCHS", 10);
    let lr = env_f64("LR", 0.01) as f32;
    let momentum = env_f64("MOM", 0.9) as f32;
    let batch = env_usize("BATCH", 8);
    let density = env_usize("DENSITY", 24);
    let kind = env_str("KIND", "smnet");
    let fc: Vec<usize> = env_str("FC", "32")
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let fp1 = env_usize("FP1", 32);
    let do_lls = env_usize("LLS", 0);

    let mut spec = SurrogateSpec::default_for(Mechanism::ThermalLike);
    spec.amplitude = env_f64("AMP", spec.amplitude);
    let layout = ActuatorLayout::plate36();
    let surrogate = Surrogate::new(spec, layout);
    let pp = PreprocessParams { interior_cell: None, voxel_cell: None, n_points: 512, seed: 0 };

    let mut config = SMNetConfig::preset("desk").unwrap();
    config.kind = ModelKind::parse(&kind).unwrap();
    config.fc_widths = fc;
    config.pointnet.fp_widths[1] = vec![fp1];
    let model = SMNet::new(config.clone()).unwrap();

    if env_usize("GRADPROBE", 0) == 1 {
        let samples = make_samples(8, &surrogate, density, 42, &model, &pp);
        // train-mode prediction spread across samples
        let mut preds: Vec<Vec<f32>> = Vec::new();
        for s in &samples {
            let (fwd, pred) = model.forward_cached(&s.geometry, true).unwrap();
            preds.push(fwd.tape.value(pred).values().to_vec());
        }
        let m = preds[0].len();
        let mut spread = 0.0f64;
        for k in 0..m {
            let mean: f64 = preds.iter().map(|p| p[k] as f64).sum::<f64>() / 8.0;
            spread += preds.iter().map(|p| (p[k] as f64 - mean).powi(2)).sum::<f64>() / 8.0;
        }
        eprintln!("train-mode pred variance (mean over dims): {:.6}", spread / m as f64);
        // per-layer gradient norms for one sample
        let s = &samples[0];
        let (mut fwd, pred) = model.forward_cached(&s.geometry, true).unwrap();
        let target = fwd.constant(&s.target);
        let loss = fwd.tape.mse_loss(pred, target).unwrap();
        let collected = fwd.backward_collect(loss).unwrap();
        for (name, g) in &collected.grads {
            let l2: f64 = g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            eprintln!("{name:28} |g| {l2:.3e}");
        }
        return;
    }

    if env_usize("PROBE", 0) == 1 {
        let zero = vec![0.0; 36];
        let big: Vec<f64> = (0..36).map(|i| if i % 2 == 0 { 0.9 } else { -0.9 }).collect();
        for (name, c) in [("zero", &zero), ("big", &big)] {
            let cloud = surrogate.simulate(c, density, 99).unwrap();
            let (clean, _) = preprocess_cloud(&cloud, &pp).unwrap();
            let pred = model.forward(&clean).unwrap();
            eprintln!("{name}: pred[0..6] = {:?}", &pred[..6]);
        }
        return;
    }

    let t0 = std::time::Instant::now();
    let train = make_samples(n_train, &surrogate, density, 42, &model, &pp);
    let test = make_samples(n_test, &surrogate, density, 4242, &model, &pp);
    eprintln!("prep: {:.1}s", t0.elapsed().as_secs_f64());

    if do_lls == 1 {
        let g = env_usize("LLS_GRID", 12);
        let xtr: Vec<Vec<f64>> =
            train.iter().map(|s| lls_features(&s.geometry.clouds[0], g)).collect();
        let xte: Vec<Vec<f64>> =
            test.iter().map(|s| lls_features(&s.geometry.clouds[0], g)).collect();
        let ytr: Vec<Vec<f64>> = train.iter().map(|s| s.control.clone()).collect();
        let yte: Vec<Vec<f64>> = test.iter().map(|s| s.control.clone()).collect();
        let w = lls_fit(&xtr, &ytr);
        let predict = |x: &Vec<f64>| -> Vec<f64> {
            (0..36)
                .map(|k| x.iter().enumerate().map(|(a, &v)| v * w[a][k]).sum())
                .collect()
        };
        let ptr: Vec<Vec<f64>> = xtr.iter().map(predict).collect();
        let pte: Vec<Vec<f64>> = xte.iter().map(predict).collect();
        eprintln!("LLS grid {g}: train R2 {:.4}  test R2 {:.4}", r2(&ptr, &ytr), r2(&pte, &yte));
        if env_usize("LLS_ONLY", 0) == 1 {
            return;
        }
    }

    let mut model = model;
    if env_usize("SHALLOW", 0) == 1 {
        // minimal trainable reference: relu(W [x,y,z,1]) → mean pool → linear
        let h = env_usize("WIDTH", 128);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut w = vec![0.0f32; 4 * h];
        for j in 0..h {
            w[j] = rng.gen_range(-2.0f32..2.0);
            w[h + j] = rng.gen_range(-2.0f32..2.0);
            w[2 * h + j] = rng.gen_range(-2.0f32..2.0);
            w[3 * h + j] = rng.gen_range(-1.0f32..1.0);
        }
        let mut v = vec![0.0f32; h * 36];
        for x in v.iter_mut() {
            *x = rng.gen_range(-0.1f32..0.1);
        }
        let mut bias = vec![0.0f32; 36];
        let (mut mw, mut mv, mut mb) =
            (vec![0.0f32; 4 * h], vec![0.0f32; h * 36], vec![0.0f32; 36]);
        let pts_of = |s: &PreparedSample| -> Vec<[f32; 4]> {
            s.geometry.clouds[0]
                .points()
                .iter()
                .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32, 1.0])
                .collect()
        };
        let xtr: Vec<Vec<[f32; 4]>> = train.iter().map(|s| pts_of(s)).collect();
        let xte: Vec<Vec<[f32; 4]>> = test.iter().map(|s| pts_of(s)).collect();
        let fwd_pool = |pts: &[[f32; 4]], w: &[f32]| -> (Vec<f32>, Vec<Vec<f32>>) {
            let mut pooled = vec![0.0f32; h];
            let mut acts = Vec::with_capacity(pts.len());
            for p in pts {
                let mut row = vec![0.0f32; h];
                for j in 0..h {
                    let a = w[j] * p[0] + w[h + j] * p[1] + w[2 * h + j] * p[2] + w[3 * h + j];
                    if a > 0.0 {
                        row[j] = a;
                        pooled[j] += a;
                    }
                }
                acts.push(row);
            }
            let inv = 1.0 / pts.len() as f32;
            for x in pooled.iter_mut() {
                *x *= inv;
            }
            (pooled, acts)
        };
        let mut nmean = vec![0.0f32; h];
        let mut nstd = vec![1.0f32; h];
        let poolnorm = env_usize("POOLNORM", 0) == 1;
        for epoch in 0..epochs {
            if poolnorm {
                // refresh embedding normalizers from the train set
                let (mut s1, mut s2) = (vec![0.0f64; h], vec![0.0f64; h]);
                for pts in &xtr {
                    let (pooled, _) = fwd_pool(pts, &w);
                    for j in 0..h {
                        s1[j] += pooled[j] as f64;
                        s2[j] += (pooled[j] as f64).powi(2);
                    }
                }
                for j in 0..h {
                    let m = s1[j] / n_train as f64;
                    nmean[j] = m as f32;
                    nstd[j] = ((s2[j] / n_train as f64 - m * m).max(0.0) + 1e-4).sqrt() as f32;
                }
            }
            let mut order: Vec<usize> = (0..n_train).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let mut ep_loss = 0.0f64;
            for chunk in order.chunks(batch) {
                let (mut gw, mut gv, mut gb) =
                    (vec![0.0f32; 4 * h], vec![0.0f32; h * 36], vec![0.0f32; 36]);
                for &i in chunk {
                    let pts = &xtr[i];
                    let (pooled, acts) = fwd_pool(pts, &w);
                    let pn: Vec<f32> =
                        (0..h).map(|j| (pooled[j] - nmean[j]) / nstd[j]).collect();
                    let mut dpred = vec![0.0f32; 36];
                    for k in 0..36 {
                        let pred: f32 =
                            (0..h).map(|j| pn[j] * v[j * 36 + k]).sum::<f32>() + bias[k];
                        let err = pred - train[i].control[k] as f32;
                        ep_loss += (err * err) as f64;
                        dpred[k] = 2.0 * err / 36.0;
                    }
                    let mut dpooled = vec![0.0f32; h];
                    for j in 0..h {
                        for k in 0..36 {
                            gv[j * 36 + k] += pn[j] * dpred[k];
                            dpooled[j] += v[j * 36 + k] * dpred[k] / nstd[j];
                        }
                    }
                    for k in 0..36 {
                        gb[k] += dpred[k];
                    }
                    let inv = 1.0 / pts.len() as f32;
                    for (p, row) in pts.iter().zip(&acts) {
                        for j in 0..h {
                            if row[j] > 0.0 {
                                let d = dpooled[j] * inv;
                                gw[j] += d * p[0];
                                gw[h + j] += d * p[1];
                                gw[2 * h + j] += d * p[2];
                                gw[3 * h + j] += d;
                            }
                        }
                    }
                }
                let s = 1.0 / chunk.len() as f32;
                for (p, (g, m)) in [
                    (&mut w, (&gw, &mut mw)),
                    (&mut v, (&gv, &mut mv)),
                    (&mut bias, (&gb, &mut mb)),
                ] {
                    for ((pi, &gi), mi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()) {
                        *mi = momentum * *mi + gi * s;
                        *pi -= lr * *mi;
                    }
                }
            }
            // test R²
            let preds: Vec<Vec<f64>> = xte
                .iter()
                .map(|pts| {
                    let (pooled, _) = fwd_pool(pts, &w);
                    let pn: Vec<f32> =
                        (0..h).map(|j| (pooled[j] - nmean[j]) / nstd[j]).collect();
                    (0..36)
                        .map(|k| {
                            ((0..h).map(|j| pn[j] * v[j * 36 + k]).sum::<f32>() + bias[k]) as f64
                        })
                        .collect()
                })
                .collect();
            let yte: Vec<Vec<f64>> = test.iter().map(|s| s.control.clone()).collect();
            eprintln!(
                "epoch {epoch:2}  train_mse {:.4}  test R2 {:.4}",
                ep_loss / (n_train * 36) as f64,
                r2(&preds, &yte)
            );
        }
        return;
    }
    if env_usize("RAWPROBE", 0) == 1 {
        // pooled relu(W [x,y,z,1]) random features: is the signal linearly
        // decodable from one shallow position-modulated layer + average pool?
        let width = env_usize("WIDTH", 256);
        let zscale = env_f64("ZSCALE", 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: Vec<[f64; 4]> = (0..width)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0) * zscale,
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let feats = |s: &PreparedSample| -> Vec<f64> {
            let pts = s.geometry.clouds[0].points();
            let mut pooled = vec![0.0f64; width + 1];
            for p in pts {
                for (j, wj) in w.iter().enumerate() {
                    let v = wj[0] * p[0] + wj[1] * p[1] + wj[2] * p[2] + wj[3];
                    if v > 0.0 {
                        pooled[j] += v;
                    }
                }
            }
            for v in pooled.iter_mut() {
                *v /= pts.len() as f64;
            }
            pooled[width] = 1.0;
            pooled
        };
        let xtr: Vec<Vec<f64>> = train.iter().map(feats).collect();
        let xte: Vec<Vec<f64>> = test.iter().map(feats).collect();
        let ytr: Vec<Vec<f64>> = train.iter().map(|s| s.control.clone()).collect();
        let yte: Vec<Vec<f64>> = test.iter().map(|s| s.control.clone()).collect();
        let w2 = lls_fit(&xtr, &ytr);
        let predict = |x: &Vec<f64>| -> Vec<f64> {
            (0..36)
                .map(|k| x.iter().enumerate().map(|(a, &v)| v * w2[a][k]).sum())
                .collect()
        };
        let ptr: Vec<Vec<f64>> = xtr.iter().map(predict).collect();
        let pte: Vec<Vec<f64>> = xte.iter().map(predict).collect();
        eprintln!(
            "raw probe width {width}: train R2 {:.4}  test R2 {:.4}",
            r2(&ptr, &ytr),
            r2(&pte, &yte)
        );
        return;
    }
    if env_usize("POOLLLS", 0) == 1 {
        // linear probe: calibrated eval-mode pooled features → controls
        let cal = TrainConfig {
            batch_size: batch,
            epochs: 0,
            lr,
            momentum,
            shuffle_seed: 42,
            checkpoint_every: 0,
            checkpoint_dir: None,
        };
        model.train(&train, &[], &cal).unwrap();
        let feats = |s: &PreparedSample| -> Vec<f64> {
            let mut e = model.embed(&s.geometry).unwrap();
            e.push(1.0);
            e
        };
        let xtr: Vec<Vec<f64>> = train.iter().map(feats).collect();
        let xte: Vec<Vec<f64>> = test.iter().map(feats).collect();
        let mut fvar = 0.0f64;
        let d = xtr[0].len() - 1;
        for k in 0..d {
            let mean: f64 = xtr.iter().map(|x| x[k]).sum::<f64>() / xtr.len() as f64;
            fvar += xtr.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / xtr.len() as f64;
        }
        eprintln!("pooled feature variance (mean over {d} dims): {:.6}", fvar / d as f64);
        let ytr: Vec<Vec<f64>> = train.iter().map(|s| s.control.clone()).collect();
        let yte: Vec<Vec<f64>> = test.iter().map(|s| s.control.clone()).collect();
        let w = lls_fit(&xtr, &ytr);
        let predict = |x: &Vec<f64>| -> Vec<f64> {
            (0..36)
                .map(|k| x.iter().enumerate().map(|(a, &v)| v * w[a][k]).sum())
                .collect()
        };
        let ptr: Vec<Vec<f64>> = xtr.iter().map(predict).collect();
        let pte: Vec<Vec<f64>> = xte.iter().map(predict).collect();
        eprintln!("pooled probe: train R2 {:.4}  test R2 {:.4}", r2(&ptr, &ytr), r2(&pte, &yte));
        return;
    }
    if env_usize("STEPS", 0) == 1 {
        use smnet::autodiff::sgd_momentum_step;
        // calibrate running stats via a zero-epoch train call
        let cal = TrainConfig {
            batch_size: batch,
            epochs: 0,
            lr,
            momentum,
            shuffle_seed: 42,
            checkpoint_every: 0,
            checkpoint_dir: None,
        };
        model.train(&train, &[], &cal).unwrap();
        let p = model.predict(&train[0].geometry).unwrap();
        eprintln!("post-cal eval pred[0..4] {:?}", &p[..4]);
        let (fwd, pred) = model.forward_cached(&train[0].geometry, true).unwrap();
        let v = fwd.tape.value(pred);
        eprintln!("post-cal train pred[0..4] {:?}", &v.values()[..4]);
        for (b, chunk) in train.chunks(batch).take(40).enumerate() {
            model.params.clear_grads();
            let mut loss_sum = 0.0;
            let mut gmax = 0.0f64;
            for s in chunk {
                let (mut fwd, pred) = model.forward_cached(&s.geometry, true).unwrap();
                let t = fwd.constant(&s.target);
                let loss = fwd.tape.mse_loss(pred, t).unwrap();
                loss_sum += fwd.tape.value(loss).get(0, 0) as f64;
                let cg = fwd.backward_collect(loss).unwrap();
                for (n, g) in &cg.grads {
                    let m = g.iter().map(|v| v.abs() as f64).fold(0.0, f64::max);
                    if m > gmax {
                        gmax = m;
                        if m > 100.0 {
                            eprintln!("  big grad {n}: {m:.2e}");
                        }
                    }
                }
                cg.apply(&mut model.params).unwrap();
            }
            model.params.scale_grads(1.0 / chunk.len() as f32);
            sgd_momentum_step(&mut model.params, lr, momentum).unwrap();
            eprintln!("batch {b:3}  loss {:.4}  gmax {gmax:.3e}", loss_sum / chunk.len() as f64);
        }
        return;
    }
    let cfg = TrainConfig {
        batch_size: batch,
        epochs,
        lr,
        momentum,
        shuffle_seed: 42,
        checkpoint_every: 0,
        checkpoint_dir: None,
    };
    let t0 = std::time::Instant::now();
    let history = model.train(&train, &test, &cfg).unwrap();
    for h in &history {
        eprintln!(
            "epoch {:2}  train_mse {:.4}  test_mse {:?}  test_r2 {:?}",
            h.epoch, h.train_mse, h.test_mse, h.test_r2
        );
    }
    eprintln!("train: {:.1}s", t0.elapsed().as_secs_f64());
}

use std::sync::Arc;

use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{AutodiffError, Result, Tensor2D};

const NORM_EPS: f32 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

/// Running normalization statistics for one feature_norm site.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl NormStats {
    pub fn new(width: usize) -> Self {
        Self { mean: vec![0.0; width], var: vec![1.0; width] }
    }

    /// Folds fresh batch statistics in with momentum 0.1.
    pub fn update(&mut self, batch_mean: &[f32], batch_var: &[f32]) {
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = 0.9 * *r + 0.1 * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = 0.9 * *r + 0.1 * b;
        }
    }
}

/// Precomputed neighborhood geometry for one kernel point convolution.
///
/// Output row `q` aggregates input rows `neighbors[offsets[q]..offsets[q+1]]`,
/// each weighted per kernel point by the matching slice of `correlations`
/// (`k_points` values per neighbor pair, kernel-major within the pair).
#[derive(Debug, Clone)]
pub struct KernelConvGeometry {
    pub n_out: usize,
    pub n_in: usize,
    pub k_points: usize,
    pub offsets: Vec<usize>,
    pub neighbors: Vec<u32>,
    pub correlations: Vec<f32>,
}

enum Op {
    Leaf,
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    FeatureNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        // x̂ and 1/√(σ²+ε). `batch` marks that the statistics came from
        // this input, so the backward differentiates through them; with
        // external (running) statistics the backward is a per-column rescale.
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch: bool,
    },
    SegmentPool {
        input: Var,
        segments: Arc<Vec<u32>>,
        mode: PoolMode,
        // Max: argmax input row per (segment, col). Mean: member counts.
        argmax: Vec<u32>,
        counts: Vec<u32>,
    },
    KernelConv {
        features: Var,
        weights: Vec<Var>,
        geom: Arc<KernelConvGeometry>,
        // Saved per-kernel weighted neighbor sums, k_points × (n_out·d_in).
        gathered: Vec<f32>,
    },
    ConcatCols {
        left: Var,
        right: Var,
    },
    GatherRows {
        input: Var,
        rows: Arc<Vec<u32>>,
    },
    /// out[q] = Σ (w, src) weights[q] · in[src]; weights are constants.
    InterpolateRows {
        input: Var,
        weights: Arc<Vec<Vec<(u32, f32)>>>,
    },
    MeanRows {
        input: Var,
    },
    MseLoss {
        pred: Var,
        truth: Var,
    },
}

struct Node {
    value: Tensor2D,
    grad: Option<Vec<f32>>,
    op: Op,
}

/// Records a forward computation and replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    /// Copies a tensor onto the tape as a leaf; the original is never mutated.
    pub fn leaf(&mut self, tensor: &Tensor2D) -> Var {
        self.push(tensor.clone(), Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor2D {
        &self.nodes[var.0].value
    }

    /// Gradient of the last backward() target w.r.t. `var`, if any.
    pub fn grad(&self, var: Var) -> Option<&[f32]> {
        self.nodes[var.0].grad.as_deref()
    }

    fn shape(&self, var: Var) -> (usize, usize) {
        let t = &self.nodes[var.0].value;
        (t.rows(), t.cols())
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d_in) = self.shape(input);
        let (wr, d_out) = self.shape(weight);
        let (br, bc) = self.shape(bias);
        if wr != d_in || br != 1 || bc != d_out {
            return Err(AutodiffError::Dimension(format!(
                "linear: input {n}x{d_in}, weight {wr}x{d_out}, bias {br}x{bc}"
            )));
        }
        let mut out = matmul(
            self.nodes[input.0].value.values(),
            self.nodes[weight.0].value.values(),
            n,
            d_in,
            d_out,
        );
        let b = self.nodes[bias.0].value.values();
        for r in 0..n {
            for (j, &bv) in b.iter().enumerate() {
                out[r * d_out + j] += bv;
            }
        }
        let value = Tensor2D::new(n, d_out, out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let (n, d) = self.shape(input);
        let out: Vec<f32> = self.nodes[input.0]
            .value
            .values()
            .iter()
            .map(|&v| v.max(0.0))
            .collect();
        let value = Tensor2D::new(n, d, out).expect("relu preserves finiteness");
        self.push(value, Op::Relu { input })
    }

    /// Per-feature standardization over the row axis with learned scale/shift.
    ///
    /// Train mode standardizes by this input's own per-column statistics and
    /// returns them so the caller can fold them into its running stats
    /// (momentum 0.1); with `use_running` it standardizes by the running
    /// statistics instead (batch-renormalization style) while still returning
    /// the observed ones. Eval mode uses `stats` and returns nothing.
    pub fn feature_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &NormStats,
        train: bool,
        use_running: bool,
    ) -> Result<(Var, Option<(Vec<f32>, Vec<f32>)>)> {
        let (n, d) = self.shape(input);
        let (gr, gc) = self.shape(gamma);
        if gr != 1 || gc != d || self.shape(beta) != (1, d) {
            return Err(AutodiffError::Dimension(format!(
                "feature_norm: input width {d}, gamma {gr}x{gc}"
            )));
        }
        if n == 0 {
            return Err(AutodiffError::Dimension("feature_norm: empty input".into()));
        }
        if stats.mean.len() != d {
            return Err(AutodiffError::Dimension(format!(
                "feature_norm: running stats width {} vs input {d}",
                stats.mean.len()
            )));
        }
        let x = self.nodes[input.0].value.values();
        let batch = if train {
            let mut bmean = vec![0.0f64; d];
            for r in 0..n {
                for j in 0..d {
                    bmean[j] += x[r * d + j] as f64;
                }
            }
            for m in bmean.iter_mut() {
                *m /= n as f64;
            }
            let mut bvar = vec![0.0f64; d];
            for r in 0..n {
                for j in 0..d {
                    let c = x[r * d + j] as f64 - bmean[j];
                    bvar[j] += c * c;
                }
            }
            for v in bvar.iter_mut() {
                *v /= n as f64;
            }
            Some((
                bmean.iter().map(|&v| v as f32).collect::<Vec<_>>(),
                bvar.iter().map(|&v| v as f32).collect::<Vec<_>>(),
            ))
        } else {
            None
        };
        // Train mode normalizes by the freshly observed statistics (the
        // standard batch-norm forward); `use_running` sites and eval mode
        // normalize by the running ones.
        let own_stats = train && !use_running;
        let (mean, var): (Vec<f32>, Vec<f32>) = if own_stats {
            let (m, v) = batch.clone().expect("train mode measured stats");
            (m, v)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f32> =
            var.iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.nodes[gamma.0].value.values().to_vec();
        let b = self.nodes[beta.0].value.values().to_vec();
        let mut xhat = vec![0.0f32; n * d];
        let mut out = vec![0.0f32; n * d];
        for r in 0..n {
            for j in 0..d {
                let h = (x[r * d + j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor2D::new(n, d, out)?;
        let var_id = self.push(
            value,
            Op::FeatureNorm { input, gamma, beta, xhat, inv_std, batch: own_stats },
        );
        Ok((var_id, batch))
    }

    /// Per-segment max or mean reduction over rows.
    pub fn segment_pool(
        &mut self,
        input: Var,
        segments: Arc<Vec<u32>>,
        n_segments: usize,
        mode: PoolMode,
    ) -> Result<Var> {
        let (n, d) = self.shape(input);
        if segments.len() != n {
            return Err(AutodiffError::Dimension(format!(
                "segment_pool: {n} rows vs {} segment ids",
                segments.len()
            )));
        }
        let mut counts = vec![0u32; n_segments];
        for &s in segments.iter() {
            if s as usize >= n_segments {
                return Err(AutodiffError::Dimension(format!(
                    "segment id {s} out of range 0..{n_segments}"
                )));
            }
            counts[s as usize] += 1;
        }
        if let Some(s) = counts.iter().position(|&c| c == 0) {
            return Err(AutodiffError::EmptySegment(s));
        }
        let x = self.nodes[input.0].value.values();
        let mut out = vec![0.0f32; n_segments * d];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Max => {
                argmax = vec![u32::MAX; n_segments * d];
                let mut best = vec![f32::NEG_INFINITY; n_segments * d];
                for r in 0..n {
                    let s = segments[r] as usize;
                    for j in 0..d {
                        let v = x[r * d + j];
                        // first index wins ties
                        if v > best[s * d + j] {
                            best[s * d + j] = v;
                            argmax[s * d + j] = r as u32;
                        }
                    }
                }
                out.copy_from_slice(&best);
            }
            PoolMode::Mean => {
                let mut acc = vec![0.0f64; n_segments * d];
                for r in 0..n {
                    let s = segments[r] as usize;
                    for j in 0..d {
                        acc[s * d + j] += x[r * d + j] as f64;
                    }
                }
                for s in 0..n_segments {
                    for j in 0..d {
                        out[s * d + j] = (acc[s * d + j] / counts[s] as f64) as f32;
                    }
                }
            }
        }
        let value = Tensor2D::new(n_segments, d, out)?;
        Ok(self.push(value, Op::SegmentPool { input, segments, mode, argmax, counts }))
    }

    /// Kernel point convolution over precomputed geometry.
    ///
    /// out[q] = Σ_k ( Σ_{i ∈ N(q)} h_{k,i} · f_i ) · W_k
    pub fn kernel_conv(
        &mut self,
        features: Var,
        weights: &[Var],
        geom: Arc<KernelConvGeometry>,
    ) -> Result<Var> {
        let (n_in, d_in) = self.shape(features);
        if n_in != geom.n_in {
            return Err(AutodiffError::Dimension(format!(
                "kernel_conv: {n_in} feature rows vs geometry {}",
                geom.n_in
            )));
        }
        if weights.len() != geom.k_points {
            return Err(AutodiffError::Dimension(format!(
                "kernel_conv: {} weight matrices vs {} kernel points",
                weights.len(),
                geom.k_points
            )));
        }
        let (_, d_out) = self.shape(weights[0]);
        for &w in weights {
            if self.shape(w) != (d_in, d_out) {
                return Err(AutodiffError::Dimension(
                    "kernel_conv: inconsistent weight shapes".into(),
                ));
            }
        }
        let k = geom.k_points;
        let f = self.nodes[features.0].value.values();
        // gathered[k][q] = Σ_i h_{k,i} f_i
        let mut gathered = vec![0.0f32; k * geom.n_out * d_in];
        for q in 0..geom.n_out {
            let lo = geom.offsets[q];
            let hi = geom.offsets[q + 1];
            for (pair, &i) in geom.neighbors[lo..hi].iter().enumerate() {
                let hrow = &geom.correlations[(lo + pair) * k..(lo + pair + 1) * k];
                let frow = &f[i as usize * d_in..(i as usize + 1) * d_in];
                for (kk, &h) in hrow.iter().enumerate() {
                    if h == 0.0 {
                        continue;
                    }
                    let dst =
                        &mut gathered[(kk * geom.n_out + q) * d_in..][..d_in];
                    for (g, &fv) in dst.iter_mut().zip(frow) {
                        *g += h * fv;
                    }
                }
            }
        }
        let mut out = vec![0.0f64; geom.n_out * d_out];
        for kk in 0..k {
            let s = &gathered[kk * geom.n_out * d_in..(kk + 1) * geom.n_out * d_in];
            let w = self.nodes[weights[kk].0].value.values();
            let part = matmul(s, w, geom.n_out, d_in, d_out);
            for (o, &p) in out.iter_mut().zip(&part) {
                *o += p as f64;
            }
        }
        let out: Vec<f32> = out.into_iter().map(|v| v as f32).collect();
        let value = Tensor2D::new(geom.n_out, d_out, out)?;
        Ok(self.push(
            value,
            Op::KernelConv { features, weights: weights.to_vec(), geom, gathered },
        ))
    }

    pub fn concat_cols(&mut self, left: Var, right: Var) -> Result<Var> {
        let (nl, dl) = self.shape(left);
        let (nr, dr) = self.shape(right);
        if nl != nr {
            return Err(AutodiffError::Dimension(format!(
                "concat_cols: {nl} vs {nr} rows"
            )));
        }
        let l = self.nodes[left.0].value.values();
        let r = self.nodes[right.0].value.values();
        let mut out = Vec::with_capacity(nl * (dl + dr));
        for row in 0..nl {
            out.extend_from_slice(&l[row * dl..(row + 1) * dl]);
            out.extend_from_slice(&r[row * dr..(row + 1) * dr]);
        }
        let value = Tensor2D::new(nl, dl + dr, out)?;
        Ok(self.push(value, Op::ConcatCols { left, right }))
    }

    pub fn gather_rows(&mut self, input: Var, rows: Arc<Vec<u32>>) -> Result<Var> {
        let (n, d) = self.shape(input);
        let x = self.nodes[input.0].value.values();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows.iter() {
            if r as usize >= n {
                return Err(AutodiffError::Dimension(format!(
                    "gather_rows: row {r} out of {n}"
                )));
            }
            out.extend_from_slice(&x[r as usize * d..(r as usize + 1) * d]);
        }
        let value = Tensor2D::new(rows.len(), d, out)?;
        Ok(self.push(value, Op::GatherRows { input, rows }))
    }

    /// Fixed-weight row interpolation (weights are not differentiated).
    pub fn interpolate_rows(
        &mut self,
        input: Var,
        weights: Arc<Vec<Vec<(u32, f32)>>>,
    ) -> Result<Var> {
        let (n, d) = self.shape(input);
        let x = self.nodes[input.0].value.values();
        let mut out = vec![0.0f32; weights.len() * d];
        for (q, terms) in weights.iter().enumerate() {
            for &(src, w) in terms {
                if src as usize >= n {
                    return Err(AutodiffError::Dimension(format!(
                        "interpolate_rows: row {src} out of {n}"
                    )));
                }
                let s = &x[src as usize * d..(src as usize + 1) * d];
                let o = &mut out[q * d..(q + 1) * d];
                for (ov, &sv) in o.iter_mut().zip(s) {
                    *ov += w * sv;
                }
            }
        }
        let value = Tensor2D::new(weights.len(), d, out)?;
        Ok(self.push(value, Op::InterpolateRows { input, weights }))
    }

    /// Column means, 1×D.
    pub fn mean_rows(&mut self, input: Var) -> Var {
        let (n, d) = self.shape(input);
        let x = self.nodes[input.0].value.values();
        let mut acc = vec![0.0f64; d];
        for r in 0..n {
            for j in 0..d {
                acc[j] += x[r * d + j] as f64;
            }
        }
        let out: Vec<f32> = acc.iter().map(|&v| (v / n as f64) as f32).collect();
        let value = Tensor2D::new(1, d, out).expect("mean preserves finiteness");
        self.push(value, Op::MeanRows { input })
    }

    /// L = (1/(B·D)) Σ (pred − truth)², as a 1×1 tensor.
    pub fn mse_loss(&mut self, pred: Var, truth: Var) -> Result<Var> {
        let sp = self.shape(pred);
        let st = self.shape(truth);
        if sp != st {
            return Err(AutodiffError::Dimension(format!(
                "mse_loss: {sp:?} vs {st:?}"
            )));
        }
        let p = self.nodes[pred.0].value.values();
        let t = self.nodes[truth.0].value.values();
        let mut acc = 0.0f64;
        for (&pv, &tv) in p.iter().zip(t) {
            let d = pv as f64 - tv as f64;
            acc += d * d;
        }
        let loss = (acc / p.len() as f64) as f32;
        let value = Tensor2D::new(1, 1, vec![loss])?;
        Ok(self.push(value, Op::MseLoss { pred, truth }))
    }

    /// MSE between two recorded values, accumulated and returned in f64.
    /// Finite-difference harnesses read this to avoid the f32 quantization
    /// of the recorded loss node.
    pub fn mse_f64(&self, pred: Var, truth: Var) -> f64 {
        let p = self.nodes[pred.0].value.values();
        let t = self.nodes[truth.0].value.values();
        let mut acc = 0.0f64;
        for (&pv, &tv) in p.iter().zip(t) {
            let d = pv as f64 - tv as f64;
            acc += d * d;
        }
        acc / p.len() as f64
    }

    fn add_grad(&mut self, var: Var, delta: &[f32]) {
        let (n, d) = self.shape(var);
        let g = self.nodes[var.0]
            .grad
            .get_or_insert_with(|| vec![0.0; n * d]);
        for (gv, &dv) in g.iter_mut().zip(delta) {
            *gv += dv;
        }
    }

    /// Backpropagates from a 1×1 target through the whole tape.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        let (r, c) = self.shape(target);
        if (r, c) != (1, 1) {
            return Err(AutodiffError::Dimension(format!(
                "backward target must be scalar, got {r}x{c}"
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[target.0].grad = Some(vec![1.0]);
        for idx in (0..=target.0).rev() {
            let Some(out_grad) = self.nodes[idx].grad.clone() else {
                continue;
            };
            // Take the op out of the node so gradient writes elsewhere on
            // the tape do not conflict with the borrow.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::Linear { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let (n, d_in) = self.shape(input);
                    let (_, d_out) = self.shape(weight);
                    let d_in_grad = matmul_nt(
                        &out_grad,
                        self.nodes[weight.0].value.values(),
                        n,
                        d_out,
                        d_in,
                    );
                    self.add_grad(input, &d_in_grad);
                    let d_w = matmul_tn(
                        self.nodes[input.0].value.values(),
                        &out_grad,
                        n,
                        d_in,
                        d_out,
                    );
                    self.add_grad(weight, &d_w);
                    let mut d_b = vec![0.0f64; d_out];
                    for rr in 0..n {
                        for j in 0..d_out {
                            d_b[j] += out_grad[rr * d_out + j] as f64;
                        }
                    }
                    let d_b: Vec<f32> = d_b.iter().map(|&v| v as f32).collect();
                    self.add_grad(bias, &d_b);
                }
                Op::Relu { input } => {
                    let input = *input;
                    let d: Vec<f32> = self.nodes[input.0]
                        .value
                        .values()
                        .iter()
                        .zip(&out_grad)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.add_grad(input, &d);
                }
                Op::FeatureNorm { input, gamma, beta, xhat, inv_std, batch } => {
                    let (input, gamma, beta, batch) = (*input, *gamma, *beta, *batch);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let (n, d) = self.shape(input);
                    let g = self.nodes[gamma.0].value.values().to_vec();
                    let mut d_gamma = vec![0.0f64; d];
                    let mut d_beta = vec![0.0f64; d];
                    for rr in 0..n {
                        for j in 0..d {
                            d_gamma[j] +=
                                (out_grad[rr * d + j] * xhat[rr * d + j]) as f64;
                            d_beta[j] += out_grad[rr * d + j] as f64;
                        }
                    }
                    let mut d_x = vec![0.0f32; n * d];
                    if batch {
                        // statistics came from this input: full batch-norm
                        // backward through mean and variance
                        let inv_n = 1.0 / n as f64;
                        for rr in 0..n {
                            for j in 0..d {
                                let dh = (out_grad[rr * d + j] * g[j]) as f64;
                                let h = xhat[rr * d + j] as f64;
                                d_x[rr * d + j] = (inv_std[j] as f64
                                    * (dh - inv_n * (d_beta[j] * g[j] as f64)
                                        - h * inv_n * (d_gamma[j] * g[j] as f64)))
                                    as f32;
                            }
                        }
                    } else {
                        // external statistics are constants: per-column rescale
                        for rr in 0..n {
                            for j in 0..d {
                                d_x[rr * d + j] =
                                    out_grad[rr * d + j] * g[j] * inv_std[j];
                            }
                        }
                    }
                    self.add_grad(input, &d_x);
                    let d_gamma: Vec<f32> =
                        d_gamma.iter().map(|&v| v as f32).collect();
                    let d_beta: Vec<f32> = d_beta.iter().map(|&v| v as f32).collect();
                    self.add_grad(gamma, &d_gamma);
                    self.add_grad(beta, &d_beta);
                }
                Op::SegmentPool { input, segments, mode, argmax, counts } => {
                    let input = *input;
                    let mode = *mode;
                    let segments = Arc::clone(segments);
                    let argmax = argmax.clone();
                    let counts = counts.clone();
                    let (n, d) = self.shape(input);
                    let n_segments = counts.len();
                    let mut d_x = vec![0.0f32; n * d];
                    match mode {
                        PoolMode::Max => {
                            for s in 0..n_segments {
                                for j in 0..d {
                                    let r = argmax[s * d + j] as usize;
                                    d_x[r * d + j] += out_grad[s * d + j];
                                }
                            }
                        }
                        PoolMode::Mean => {
                            for r in 0..n {
                                let s = segments[r] as usize;
                                let inv = 1.0 / counts[s] as f32;
                                for j in 0..d {
                                    d_x[r * d + j] += out_grad[s * d + j] * inv;
                                }
                            }
                        }
                    }
                    self.add_grad(input, &d_x);
                }
                Op::KernelConv { features, weights, geom, gathered } => {
                    let features = *features;
                    let weights = weights.clone();
                    let geom = Arc::clone(geom);
                    let gathered = gathered.clone();
                    let (_, d_in) = self.shape(features);
                    let (_, d_out) = self.shape(weights[0]);
                    let k = geom.k_points;
                    // dW_k = gathered_kᵀ · dOut
                    for (kk, &w) in weights.iter().enumerate() {
                        let s = &gathered
                            [kk * geom.n_out * d_in..(kk + 1) * geom.n_out * d_in];
                        let d_w = matmul_tn(s, &out_grad, geom.n_out, d_in, d_out);
                        self.add_grad(w, &d_w);
                    }
                    // d gathered_k = dOut · W_kᵀ, then scatter through h back
                    // to the feature rows.
                    let mut d_f = vec![0.0f32; geom.n_in * d_in];
                    for (kk, &w) in weights.iter().enumerate() {
                        let d_s = matmul_nt(
                            &out_grad,
                            self.nodes[w.0].value.values(),
                            geom.n_out,
                            d_out,
                            d_in,
                        );
                        for q in 0..geom.n_out {
                            let lo = geom.offsets[q];
                            let hi = geom.offsets[q + 1];
                            let dsq = &d_s[q * d_in..(q + 1) * d_in];
                            for (pair, &i) in
                                geom.neighbors[lo..hi].iter().enumerate()
                            {
                                let h = geom.correlations[(lo + pair) * k + kk];
                                if h == 0.0 {
                                    continue;
                                }
                                let dst =
                                    &mut d_f[i as usize * d_in..][..d_in];
                                for (dv, &sv) in dst.iter_mut().zip(dsq) {
                                    *dv += h * sv;
                                }
                            }
                        }
                    }
                    self.add_grad(features, &d_f);
                }
                Op::ConcatCols { left, right } => {
                    let (left, right) = (*left, *right);
                    let (n, dl) = self.shape(left);
                    let (_, dr) = self.shape(right);
                    let d = dl + dr;
                    let mut d_l = vec![0.0f32; n * dl];
                    let mut d_r = vec![0.0f32; n * dr];
                    for rr in 0..n {
                        d_l[rr * dl..(rr + 1) * dl]
                            .copy_from_slice(&out_grad[rr * d..rr * d + dl]);
                        d_r[rr * dr..(rr + 1) * dr]
                            .copy_from_slice(&out_grad[rr * d + dl..(rr + 1) * d]);
                    }
                    self.add_grad(left, &d_l);
                    self.add_grad(right, &d_r);
                }
                Op::GatherRows { input, rows } => {
                    let input = *input;
                    let rows = Arc::clone(rows);
                    let (n, d) = self.shape(input);
                    let mut d_x = vec![0.0f32; n * d];
                    for (q, &r) in rows.iter().enumerate() {
                        let dst = &mut d_x[r as usize * d..(r as usize + 1) * d];
                        for (dv, &gv) in dst.iter_mut().zip(&out_grad[q * d..]) {
                            *dv += gv;
                        }
                    }
                    self.add_grad(input, &d_x);
                }
                Op::InterpolateRows { input, weights } => {
                    let input = *input;
                    let weights = Arc::clone(weights);
                    let (n, d) = self.shape(input);
                    let mut d_x = vec![0.0f32; n * d];
                    for (q, terms) in weights.iter().enumerate() {
                        let gq = &out_grad[q * d..(q + 1) * d];
                        for &(src, w) in terms {
                            let dst =
                                &mut d_x[src as usize * d..(src as usize + 1) * d];
                            for (dv, &gv) in dst.iter_mut().zip(gq) {
                                *dv += w * gv;
                            }
                        }
                    }
                    self.add_grad(input, &d_x);
                }
                Op::MeanRows { input } => {
                    let input = *input;
                    let (n, d) = self.shape(input);
                    let inv = 1.0 / n as f32;
                    let mut d_x = vec![0.0f32; n * d];
                    for rr in 0..n {
                        for j in 0..d {
                            d_x[rr * d + j] = out_grad[j] * inv;
                        }
                    }
                    self.add_grad(input, &d_x);
                }
                Op::MseLoss { pred, truth } => {
                    let (pred, truth) = (*pred, *truth);
                    let (n, d) = self.shape(pred);
                    let scale = out_grad[0] * 2.0 / (n * d) as f32;
                    let p = self.nodes[pred.0].value.values();
                    let t = self.nodes[truth.0].value.values();
                    let d_p: Vec<f32> =
                        p.iter().zip(t).map(|(&pv, &tv)| scale * (pv - tv)).collect();
                    let d_t: Vec<f32> = d_p.iter().map(|&v| -v).collect();
                    self.add_grad(pred, &d_p);
                    self.add_grad(truth, &d_t);
                }
            }
            self.nodes[idx].op = op;
        }
        Ok(())
    }
}

//! Network building blocks: kernel point convolution, set abstraction,
//! feature propagation, pooling, and the fully connected head.
//!
//! Parameters live in a [`ParameterStore`] under dotted names
//! (`{prefix}.weight`, `{prefix}.norm.gamma`, `{prefix}.w03`, ...). A
//! [`Forward`] records one sample's computation on a fresh tape, remembers
//! which parameters it touched, and harvests their gradients after backward.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    AutodiffError, KernelConvGeometry, NormStats, ParameterStore, PoolMode, Result, Tape,
    Tensor2D, Var,
};
use crate::pointcloud::{
    ball_query_group, dist2, farthest_point_sample, NeighborhoodIndex, Point3, PointCloud,
};

// ---------------------------------------------------------------------------
// kernel point sets
// ---------------------------------------------------------------------------

/// Fixed kernel point positions with the correlation bandwidth; the K
/// trainable Din×Dout weight matrices live in the parameter store.
#[derive(Debug, Clone)]
pub struct KernelPointSet {
    pub radius: f64,
    pub sigma: f64,
    pub points: Vec<Point3>,
}

impl KernelPointSet {
    pub fn new(k: usize, radius: f64, sigma: f64, seed: u64) -> Self {
        Self { radius, sigma, points: init_kernel_points(k, radius, seed) }
    }
}

/// Linear correlation h = max(0, 1 − ‖y − x̃_k‖/σ).
pub fn kpconv_correlation(y: Point3, kernel_point: Point3, sigma: f64) -> f64 {
    (1.0 - dist2(y, kernel_point).sqrt() / sigma).max(0.0)
}

/// One kernel point at the origin, the rest spread through the ball of
/// radius `r` by 1000 iterations of pairwise repulsion with a decaying step,
/// projected back into the ball. Deterministic per seed.
pub fn init_kernel_points(k: usize, r: f64, seed: u64) -> Vec<Point3> {
    use rand::SeedableRng;
    let mut points = vec![[0.0; 3]];
    if k == 1 {
        return points;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while points.len() < k {
        let p = [
            rng.gen_range(-r..r),
            rng.gen_range(-r..r),
            rng.gen_range(-r..r),
        ];
        if dist2(p, [0.0; 3]) <= r * r {
            points.push(p);
        }
    }
    for iter in 0..1000 {
        let step = r * (0.05 * (1.0 - iter as f64 / 1000.0) + 0.002);
        let snapshot = points.clone();
        for (i, p) in points.iter_mut().enumerate().skip(1) {
            let mut force = [0.0f64; 3];
            for (j, q) in snapshot.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d2 = dist2(*p, *q).max(1e-12);
                let d = d2.sqrt();
                for a in 0..3 {
                    force[a] += (p[a] - q[a]) / (d * d2);
                }
            }
            let norm = (force[0] * force[0] + force[1] * force[1] + force[2] * force[2])
                .sqrt()
                .max(1e-12);
            for a in 0..3 {
                p[a] += step * force[a] / norm;
            }
            let len2 = dist2(*p, [0.0; 3]);
            if len2 > r * r {
                let s = r / len2.sqrt();
                for a in p.iter_mut() {
                    *a *= s;
                }
            }
        }
    }
    points
}

/// Radius-r neighborhoods of each output point over the input cloud with
/// per-pair kernel correlations (kernel-major). Points with an empty
/// neighborhood fall back to their single nearest input point.
pub fn build_kpconv_geometry(
    out_points: &[Point3],
    in_points: &[Point3],
    kernel: &KernelPointSet,
    index: &NeighborhoodIndex,
) -> KernelConvGeometry {
    let k = kernel.points.len();
    let mut offsets = Vec::with_capacity(out_points.len() + 1);
    let mut neighbors = Vec::new();
    let mut correlations = Vec::new();
    offsets.push(0);
    for &x in out_points {
        let mut nbrs = index.radius_query(x, kernel.radius);
        if nbrs.is_empty() {
            nbrs = index.k_nearest(x, 1);
        }
        let row_start = correlations.len();
        for &i in &nbrs {
            let p = in_points[i];
            let y = [p[0] - x[0], p[1] - x[1], p[2] - x[2]];
            neighbors.push(i as u32);
            for kp in &kernel.points {
                correlations.push(kpconv_correlation(y, *kp, kernel.sigma) as f32);
            }
        }
        // normalize each output row's total influence to 1 so the output
        // scale is independent of the local point density
        let total: f32 = correlations[row_start..].iter().sum();
        if total > 1e-12 {
            for c in &mut correlations[row_start..] {
                *c /= total;
            }
        }
        offsets.push(neighbors.len());
    }
    KernelConvGeometry {
        n_out: out_points.len(),
        n_in: in_points.len(),
        k_points: k,
        offsets,
        neighbors,
        correlations,
    }
}

// ---------------------------------------------------------------------------
// parameter initialization
// ---------------------------------------------------------------------------

fn uniform_tensor(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor2D {
    let values = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect();
    Tensor2D::new(rows, cols, values).expect("finite init").with_grad()
}

pub fn init_linear(
    params: &mut ParameterStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = (6.0 / d_in as f64).sqrt();
    params.insert(&format!("{prefix}.weight"), uniform_tensor(d_in, d_out, bound, rng))?;
    params.insert(&format!("{prefix}.bias"), Tensor2D::zeros(1, d_out).with_grad())?;
    Ok(())
}

pub fn init_feature_norm(params: &mut ParameterStore, prefix: &str, d: usize) -> Result<()> {
    let ones = Tensor2D::new(1, d, vec![1.0; d]).expect("finite");
    params.insert(&format!("{prefix}.gamma"), ones.clone().with_grad())?;
    params.insert(&format!("{prefix}.beta"), Tensor2D::zeros(1, d).with_grad())?;
    params.insert_buffer(&format!("{prefix}.running_mean"), Tensor2D::zeros(1, d))?;
    params.insert_buffer(&format!("{prefix}.running_var"), ones)?;
    Ok(())
}

pub fn init_kpconv(
    params: &mut ParameterStore,
    prefix: &str,
    k: usize,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = (6.0 / (k * d_in) as f64).sqrt();
    for kk in 0..k {
        params.insert(&format!("{prefix}.w{kk:02}"), uniform_tensor(d_in, d_out, bound, rng))?;
    }
    Ok(())
}

/// Shared MLP blocks: linear → feature_norm → relu per width. When
/// `norm_last` is false the final block is linear → relu only; stages whose
/// output feeds a global average pool must not end in a per-sample
/// normalization, or the pooled statistics become input-independent.
pub fn init_mlp(
    params: &mut ParameterStore,
    prefix: &str,
    d_in: usize,
    widths: &[usize],
    norm_last: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut d = d_in;
    for (i, &w) in widths.iter().enumerate() {
        init_linear(params, &format!("{prefix}.{i}"), d, w, rng)?;
        if norm_last || i + 1 < widths.len() {
            init_feature_norm(params, &format!("{prefix}.{i}.norm"), w)?;
        }
        d = w;
    }
    Ok(())
}

/// Hidden linear+relu layers then a final identity-activation linear.
pub fn init_fc_head(
    params: &mut ParameterStore,
    prefix: &str,
    d_in: usize,
    widths: &[usize],
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut d = d_in;
    for (i, &w) in widths.iter().enumerate() {
        init_linear(params, &format!("{prefix}.{i}"), d, w, rng)?;
        d = w;
    }
    init_linear(params, &format!("{prefix}.out"), d, out_dim, rng)
}

// ---------------------------------------------------------------------------
// forward context
// ---------------------------------------------------------------------------

/// One sample's forward pass: a tape plus the parameter leaves it touched
/// and the batch-norm statistics it observed.
pub struct Forward {
    pub tape: Tape,
    pub train: bool,
    leaves: HashMap<String, Var>,
    norm_batches: Vec<(String, Vec<f32>, Vec<f32>)>,
    /// Batch-level statistics that norm sites read instead of the stored
    /// running ones; how gradient passes see the current batch's statistics.
    stat_overrides: Option<Arc<HashMap<String, NormStats>>>,
}

impl Forward {
    pub fn new(train: bool) -> Self {
        Self {
            tape: Tape::new(),
            train,
            leaves: HashMap::new(),
            norm_batches: Vec::new(),
            stat_overrides: None,
        }
    }

    pub fn with_stat_overrides(train: bool, overrides: Arc<HashMap<String, NormStats>>) -> Self {
        let mut fwd = Self::new(train);
        fwd.stat_overrides = Some(overrides);
        fwd
    }

    /// Leaf for a named parameter, cached so repeated use shares gradients.
    pub fn param(&mut self, params: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let v = self.tape.leaf(params.get(name)?);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, tensor: &Tensor2D) -> Var {
        self.tape.leaf(tensor)
    }

    pub fn linear(&mut self, params: &ParameterStore, input: Var, prefix: &str) -> Result<Var> {
        let w = self.param(params, &format!("{prefix}.weight"))?;
        let b = self.param(params, &format!("{prefix}.bias"))?;
        self.tape.linear(input, w, b)
    }

    /// Standardizes by the stat-override entry for this site when present
    /// (training passes supply the current batch's statistics), falling back
    /// to the stored running statistics. The statistics are constants to the
    /// backward pass; train mode records the input's observed per-column
    /// statistics so the caller can fold them into the running averages.
    pub fn feature_norm(
        &mut self,
        params: &ParameterStore,
        input: Var,
        prefix: &str,
    ) -> Result<Var> {
        let gamma = self.param(params, &format!("{prefix}.gamma"))?;
        let beta = self.param(params, &format!("{prefix}.beta"))?;
        let stats = match self.stat_overrides.as_ref().and_then(|o| o.get(prefix)) {
            Some(s) => s.clone(),
            None => NormStats {
                mean: params.get(&format!("{prefix}.running_mean"))?.values().to_vec(),
                var: params.get(&format!("{prefix}.running_var"))?.values().to_vec(),
            },
        };
        let (out, batch) =
            self.tape.feature_norm(input, gamma, beta, &stats, self.train, true)?;
        if let Some((mean, var)) = batch {
            self.norm_batches.push((prefix.to_string(), mean, var));
        }
        Ok(out)
    }

    /// Mirrors `init_mlp`: `norm_last = false` leaves the final block
    /// un-normalized (see the note there).
    pub fn mlp(
        &mut self,
        params: &ParameterStore,
        input: Var,
        prefix: &str,
        n_blocks: usize,
        norm_last: bool,
    ) -> Result<Var> {
        let mut x = input;
        for i in 0..n_blocks {
            x = self.linear(params, x, &format!("{prefix}.{i}"))?;
            if norm_last || i + 1 < n_blocks {
                x = self.feature_norm(params, x, &format!("{prefix}.{i}.norm"))?;
            }
            x = self.tape.relu(x);
        }
        Ok(x)
    }

    pub fn kpconv(
        &mut self,
        params: &ParameterStore,
        features: Var,
        prefix: &str,
        geom: Arc<KernelConvGeometry>,
    ) -> Result<Var> {
        let weights: Vec<Var> = (0..geom.k_points)
            .map(|kk| self.param(params, &format!("{prefix}.w{kk:02}")))
            .collect::<Result<_>>()?;
        self.tape.kernel_conv(features, &weights, geom)
    }

    pub fn fc_head(
        &mut self,
        params: &ParameterStore,
        pooled: Var,
        prefix: &str,
        n_hidden: usize,
    ) -> Result<Var> {
        let mut x = pooled;
        for i in 0..n_hidden {
            x = self.linear(params, x, &format!("{prefix}.{i}"))?;
            x = self.tape.relu(x);
        }
        self.linear(params, x, &format!("{prefix}.out"))
    }

    /// Batch statistics observed by this pass's feature_norm sites.
    pub fn into_norm_batches(self) -> Vec<(String, Vec<f32>, Vec<f32>)> {
        self.norm_batches
    }

    /// Runs backward from `loss` and hands back the touched parameters'
    /// gradients (sorted by name) plus the observed batch statistics, for
    /// callers that apply updates in their own order (e.g. data-parallel
    /// batches with ordered reduction).
    pub fn backward_collect(mut self, loss: Var) -> Result<CollectedGrads> {
        self.tape.backward(loss)?;
        let mut grads: Vec<(String, Vec<f32>)> = self
            .leaves
            .iter()
            .filter_map(|(name, &var)| self.tape.grad(var).map(|g| (name.clone(), g.to_vec())))
            .collect();
        grads.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(CollectedGrads { grads, norm_batches: self.norm_batches })
    }

    /// Runs backward from `loss`, adds parameter gradients into the store,
    /// and folds observed batch statistics into the running stats
    /// (momentum 0.1).
    pub fn backward_and_accumulate(self, loss: Var, params: &mut ParameterStore) -> Result<()> {
        self.backward_collect(loss)?.apply(params)
    }
}

/// Per-sample backward products awaiting ordered application.
pub struct CollectedGrads {
    pub grads: Vec<(String, Vec<f32>)>,
    pub norm_batches: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl CollectedGrads {
    /// Accumulates the gradients only; normalization statistics are
    /// batch-aggregated separately (see `NormStatAggregator`).
    pub fn apply_grads(&self, params: &mut ParameterStore) -> Result<()> {
        for (name, g) in &self.grads {
            params.accumulate_grad(name, g)?;
        }
        Ok(())
    }

    pub fn apply(self, params: &mut ParameterStore) -> Result<()> {
        self.apply_grads(params)?;
        for (prefix, mean, var) in self.norm_batches {
            let mut stats = NormStats {
                mean: params.get(&format!("{prefix}.running_mean"))?.values().to_vec(),
                var: params.get(&format!("{prefix}.running_var"))?.values().to_vec(),
            };
            stats.update(&mean, &var);
            *params.get_mut(&format!("{prefix}.running_mean"))? =
                Tensor2D::new(1, stats.mean.len(), stats.mean)?;
            *params.get_mut(&format!("{prefix}.running_var"))? =
                Tensor2D::new(1, stats.var.len(), stats.var)?;
        }
        Ok(())
    }
}

/// Combines per-sample normalization statistics into batch-level ones via
/// the law of total variance. Per-sample variances alone badly underestimate
/// the spread of features that are near-constant within a sample but differ
/// across samples, which is exactly where the regression signal lives.
#[derive(Default)]
pub struct NormStatAggregator {
    acc: HashMap<String, (Vec<f64>, Vec<f64>, Vec<f64>, f64)>,
}

impl NormStatAggregator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, norm_batches: &[(String, Vec<f32>, Vec<f32>)]) {
        for (prefix, mean, var) in norm_batches {
            let slot = self.acc.entry(prefix.clone()).or_insert_with(|| {
                (vec![0.0; mean.len()], vec![0.0; var.len()], vec![0.0; mean.len()], 0.0)
            });
            for (j, (&m, &v)) in mean.iter().zip(var).enumerate() {
                slot.0[j] += m as f64;
                slot.1[j] += v as f64;
                slot.2[j] += (m as f64) * (m as f64);
            }
            slot.3 += 1.0;
        }
    }

    /// Batch mean and total variance (within-sample + between-sample) per
    /// site, sorted by name for deterministic application order.
    pub fn totals(self) -> Vec<(String, Vec<f32>, Vec<f32>)> {
        let mut out: Vec<(String, Vec<f32>, Vec<f32>)> = self
            .acc
            .into_iter()
            .map(|(prefix, (sum_m, sum_v, sum_m2, n))| {
                let mean: Vec<f32> = sum_m.iter().map(|&s| (s / n) as f32).collect();
                let var: Vec<f32> = sum_v
                    .iter()
                    .zip(&sum_m2)
                    .zip(&sum_m)
                    .map(|((&sv, &sm2), &sm)| {
                        let m = sm / n;
                        ((sv / n + sm2 / n - m * m).max(0.0)) as f32
                    })
                    .collect();
                (prefix, mean, var)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// Folds batch-level statistics into the stored running statistics.
pub fn update_running_stats(
    params: &mut ParameterStore,
    totals: Vec<(String, Vec<f32>, Vec<f32>)>,
) -> Result<()> {
    for (prefix, mean, var) in totals {
        let mut stats = NormStats {
            mean: params.get(&format!("{prefix}.running_mean"))?.values().to_vec(),
            var: params.get(&format!("{prefix}.running_var"))?.values().to_vec(),
        };
        stats.update(&mean, &var);
        *params.get_mut(&format!("{prefix}.running_mean"))? =
            Tensor2D::new(1, stats.mean.len(), stats.mean)?;
        *params.get_mut(&format!("{prefix}.running_var"))? =
            Tensor2D::new(1, stats.var.len(), stats.var)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PointNet++ layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SetAbstractionConfig {
    pub n_centroids: usize,
    pub radius: f64,
    pub max_group: usize,
    pub mlp_widths: Vec<usize>,
}

pub fn init_set_abstraction(
    params: &mut ParameterStore,
    prefix: &str,
    d_features: usize,
    cfg: &SetAbstractionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_mlp(params, prefix, 3 + d_features, &cfg.mlp_widths, true, rng)
}

/// Parameter-free part of set abstraction: FPS centroids, ball groups,
/// recentred coordinates, and segment wiring. Reusable across epochs.
#[derive(Debug, Clone)]
pub struct SaGrouping {
    pub n_centroids: usize,
    pub n_blocks: usize,
    pub rows: Vec<u32>,
    pub segments: Vec<u32>,
    pub recentred: Tensor2D,
    pub sub_cloud: PointCloud,
}

impl SaGrouping {
    pub fn build(cloud: &PointCloud, cfg: &SetAbstractionConfig, fps_start: usize) -> Result<Self> {
        let centroids = farthest_point_sample(cloud, cfg.n_centroids, fps_start)
            .map_err(|e| AutodiffError::Dimension(e.to_string()))?;
        let cell = cfg.radius.max(1e-6);
        let index = NeighborhoodIndex::build(cloud.points(), cell)
            .map_err(|e| AutodiffError::Dimension(e.to_string()))?;
        let groups = ball_query_group(cloud, &centroids, cfg.radius, cfg.max_group, &index);

        let mut rows = Vec::new();
        let mut segments = Vec::new();
        let mut recentred = Vec::new();
        for (s, group) in groups.iter().enumerate() {
            let c = cloud.points()[centroids[s]];
            for &i in group {
                rows.push(i as u32);
                segments.push(s as u32);
                let p = cloud.points()[i];
                recentred.extend_from_slice(&[
                    (p[0] - c[0]) as f32,
                    (p[1] - c[1]) as f32,
                    (p[2] - c[2]) as f32,
                ]);
            }
        }
        let recentred = Tensor2D::new(rows.len(), 3, recentred)?;
        let sub_cloud = cloud
            .select(&centroids)
            .map_err(|e| AutodiffError::Dimension(e.to_string()))?;
        Ok(Self {
            n_centroids: cfg.n_centroids,
            n_blocks: cfg.mlp_widths.len(),
            rows,
            segments,
            recentred,
            sub_cloud,
        })
    }

    /// Shared MLP over the grouped rows, then per-group max pooling.
    pub fn apply(
        &self,
        fwd: &mut Forward,
        params: &ParameterStore,
        features: Var,
        prefix: &str,
    ) -> Result<Var> {
        let coords = fwd.constant(&self.recentred);
        let gathered = fwd.tape.gather_rows(features, Arc::new(self.rows.clone()))?;
        let grouped = fwd.tape.concat_cols(coords, gathered)?;
        let hidden = fwd.mlp(params, grouped, prefix, self.n_blocks, true)?;
        fwd.tape.segment_pool(
            hidden,
            Arc::new(self.segments.clone()),
            self.n_centroids,
            PoolMode::Max,
        )
    }
}

/// FPS centroid selection, ball grouping, recentred-coordinate + feature
/// MLP, and per-group max pooling. `fps_start` indexes the first centroid.
pub fn set_abstraction(
    fwd: &mut Forward,
    params: &ParameterStore,
    cloud: &PointCloud,
    features: Var,
    cfg: &SetAbstractionConfig,
    prefix: &str,
    fps_start: usize,
) -> Result<(PointCloud, Var)> {
    let grouping = SaGrouping::build(cloud, cfg, fps_start)?;
    let pooled = grouping.apply(fwd, params, features, prefix)?;
    Ok((grouping.sub_cloud, pooled))
}

/// 3-NN inverse-square-distance weights (fewer neighbors if the coarse
/// cloud is smaller); rows sum to 1.
pub fn interpolation_weights(fine: &[Point3], coarse: &[Point3]) -> Vec<Vec<(u32, f32)>> {
    const EPS: f64 = 1e-8;
    let k = coarse.len().min(3);
    fine.iter()
        .map(|&p| {
            let mut dists: Vec<(f64, usize)> = coarse
                .iter()
                .enumerate()
                .map(|(i, &q)| (dist2(p, q), i))
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            dists.truncate(k);
            let raw: Vec<f64> = dists.iter().map(|&(d2, _)| 1.0 / (d2 + EPS)).collect();
            let total: f64 = raw.iter().sum();
            dists
                .iter()
                .zip(&raw)
                .map(|(&(_, i), &w)| (i as u32, (w / total) as f32))
                .collect()
        })
        .collect()
}

pub fn init_feature_propagation(
    params: &mut ParameterStore,
    prefix: &str,
    d_coarse: usize,
    d_skip: usize,
    widths: &[usize],
    norm_last: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_mlp(params, prefix, d_coarse + d_skip, widths, norm_last, rng)
}

/// Interpolates coarse features onto the fine cloud, concatenates the skip
/// features, and applies the shared MLP.
pub fn feature_propagation(
    fwd: &mut Forward,
    params: &ParameterStore,
    coarse_cloud: &PointCloud,
    coarse_features: Var,
    fine_cloud: &PointCloud,
    skip_features: Var,
    prefix: &str,
    n_blocks: usize,
    norm_last: bool,
) -> Result<Var> {
    let weights = interpolation_weights(fine_cloud.points(), coarse_cloud.points());
    let interp = fwd.tape.interpolate_rows(coarse_features, Arc::new(weights))?;
    let merged = fwd.tape.concat_cols(interp, skip_features)?;
    fwd.mlp(params, merged, prefix, n_blocks, norm_last)
}

/// Column means over all points: global average pooling.
pub fn global_average_pool(fwd: &mut Forward, features: Var) -> Var {
    fwd.tape.mean_rows(features)
}

//! SMNet assembly: KPConv U-Net trunk → coordinate concatenation →
//! PointNet++ trunk → global average pooling → fully connected head, plus
//! the two single-trunk ablations, training, evaluation, checkpointing, and
//! inference on raw clouds.
//!
//! Per-sample graph structure (voxel pyramid, KPConv neighborhoods, FPS
//! groupings, interpolation weights) depends only on the input cloud, so it
//! is precomputed once per sample ([`SampleGeometry`]) and reused across
//! epochs.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{
    sgd_momentum_step, AutodiffError, KernelConvGeometry, NormStats, ParameterStore, Tensor2D,
    Var,
};
use crate::layers::{
    build_kpconv_geometry, init_fc_head, init_feature_propagation, init_kpconv,
    init_feature_norm, init_set_abstraction, interpolation_weights, update_running_stats,
    CollectedGrads, Forward, NormStatAggregator,
    KernelPointSet, SaGrouping, SetAbstractionConfig,
};
use crate::metrics::{regression_metrics, MetricsError, RegressionMetrics};
use crate::pointcloud::{
    center_and_normalize, random_downsample, read_cloud, remove_interior_points,
    voxel_average_downsample, CloudError, NeighborhoodIndex, Point3, PointCloud, TransformRecord,
};
use crate::sim::{DatasetManifest, SimError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("expected {want} points, got {got}")]
    WrongPointCount { got: usize, want: usize },
    #[error("point {index} at coordinate {value} outside the [-0.6, 0.6] guard band; input must be normalized")]
    NotNormalized { index: usize, value: f64 },
    #[error("only {got} points after cleaning but the model needs {need}; use a smaller n_points or a denser input cloud")]
    TooFewPoints { got: usize, need: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}, lr {lr}")]
    Diverged { epoch: usize, batch: usize, lr: f32 },
    #[error("empty evaluation set")]
    EmptySet,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Smnet,
    KpconvOnly,
    PointnetOnly,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Smnet => "smnet",
            ModelKind::KpconvOnly => "kpconv-only",
            ModelKind::PointnetOnly => "pointnet-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smnet" => Ok(ModelKind::Smnet),
            "kpconv-only" => Ok(ModelKind::KpconvOnly),
            "pointnet-only" => Ok(ModelKind::PointnetOnly),
            other => Err(ModelError::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// KPConv U-Net trunk: three encoder levels over a voxel pyramid with
/// doubling cell size and radius, two decoder levels with skip connections.
#[derive(Debug, Clone)]
pub struct KpconvPlan {
    pub k_points: usize,
    /// correlation bandwidth as a multiple of each layer's radius
    pub sigma_factor: f64,
    pub base_radius: f64,
    pub base_cell: f64,
    pub enc_widths: [usize; 3],
    pub dec_widths: [usize; 2],
}

/// PointNet++ trunk: two set-abstraction levels and two feature-propagation
/// levels back to full resolution.
#[derive(Debug, Clone)]
pub struct PointnetPlan {
    pub sa: [SetAbstractionConfig; 2],
    pub fp_widths: [Vec<usize>; 2],
}

#[derive(Debug, Clone)]
pub struct SMNetConfig {
    pub kind: ModelKind,
    pub preset: String,
    pub n_points: usize,
    pub out_dim: usize,
    pub seed: u64,
    pub kpconv: KpconvPlan,
    pub pointnet: PointnetPlan,
    pub fc_widths: Vec<usize>,
}

/// Input feature width: coordinates plus a constant one.
const D_IN: usize = 4;

impl SMNetConfig {
    /// Named presets. `desk` is sized for minutes-scale CPU runs; the others
    /// mirror the published problem scales.
    pub fn preset(name: &str) -> Result<Self> {
        let desk = Self {
            kind: ModelKind::Smnet,
            preset: name.to_string(),
            n_points: 512,
            out_dim: 36,
            seed: 42,
            kpconv: KpconvPlan {
                k_points: 7,
                sigma_factor: 1.5,
                base_radius: 0.12,
                base_cell: 0.15,
                enc_widths: [8, 12, 16],
                dec_widths: [12, 6],
            },
            pointnet: PointnetPlan {
                sa: [
                    SetAbstractionConfig {
                        n_centroids: 64,
                        radius: 0.2,
                        max_group: 16,
                        mlp_widths: vec![16, 32],
                    },
                    SetAbstractionConfig {
                        n_centroids: 16,
                        radius: 0.4,
                        max_group: 16,
                        mlp_widths: vec![32, 64],
                    },
                ],
                fp_widths: [vec![32], vec![32]],
            },
            fc_widths: vec![32],
        };
        let paper = |n_points: usize, out_dim: usize| Self {
            kind: ModelKind::Smnet,
            preset: name.to_string(),
            n_points,
            out_dim,
            seed: 42,
            kpconv: KpconvPlan {
                k_points: 15,
                sigma_factor: 1.5,
                base_radius: 0.08,
                base_cell: 0.1,
                enc_widths: [32, 64, 128],
                dec_widths: [64, 6],
            },
            pointnet: PointnetPlan {
                sa: [
                    SetAbstractionConfig {
                        n_centroids: 256,
                        radius: 0.2,
                        max_group: 32,
                        mlp_widths: vec![64, 128],
                    },
                    SetAbstractionConfig {
                        n_centroids: 64,
                        radius: 0.4,
                        max_group: 32,
                        mlp_widths: vec![128, 256],
                    },
                ],
                fp_widths: [vec![128], vec![128]],
            },
            fc_widths: vec![512, 256],
        };
        match name {
            "desk" => Ok(desk),
            "ionic2d" => Ok(paper(1024, 36)),
            "ionic3d" => Ok(paper(2048, 216)),
            "thermal3d" => Ok(paper(2048, 152)),
            "pneumatic3d" => Ok(paper(2048, 216)),
            other => Err(ModelError::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Feature width entering the PointNet++ trunk.
    pub fn pointnet_in_width(&self) -> usize {
        match self.kind {
            // coordinates concatenated with the KPConv output features
            ModelKind::Smnet => 3 + self.kpconv.dec_widths[1],
            ModelKind::PointnetOnly => D_IN,
            ModelKind::KpconvOnly => 0,
        }
    }

    fn pooled_width(&self) -> usize {
        match self.kind {
            ModelKind::KpconvOnly => self.kpconv.dec_widths[1],
            _ => *self.pointnet.fp_widths[1].last().expect("fp widths non-empty"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 {
            return Err(ModelError::Config("out_dim must be ≥ 1".into()));
        }
        if self.n_points == 0 {
            return Err(ModelError::Config("n_points must be ≥ 1".into()));
        }
        if self.kpconv.k_points == 0 || self.kpconv.base_radius <= 0.0 || self.kpconv.base_cell <= 0.0
        {
            return Err(ModelError::Config("kpconv plan has a non-positive field".into()));
        }
        for w in self
            .pointnet
            .fp_widths
            .iter()
            .chain(self.pointnet.sa.iter().map(|s| &s.mlp_widths))
        {
            if w.is_empty() {
                return Err(ModelError::Config("empty MLP width list".into()));
            }
        }
        Ok(())
    }

    /// Writes the versioned `key = value` form.
    pub fn save_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("version = 1\n");
        out.push_str(&format!("preset = {}\n", self.preset));
        out.push_str(&format!("kind = {}\n", self.kind.name()));
        out.push_str(&format!("n_points = {}\n", self.n_points));
        out.push_str(&format!("out_dim = {}\n", self.out_dim));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("kp.k_points = {}\n", self.kpconv.k_points));
        out.push_str(&format!("kp.sigma_factor = {}\n", self.kpconv.sigma_factor));
        out.push_str(&format!("kp.base_radius = {}\n", self.kpconv.base_radius));
        out.push_str(&format!("kp.base_cell = {}\n", self.kpconv.base_cell));
        out.push_str(&format!("kp.enc_widths = {}\n", join(&self.kpconv.enc_widths)));
        out.push_str(&format!("kp.dec_widths = {}\n", join(&self.kpconv.dec_widths)));
        for (i, sa) in self.pointnet.sa.iter().enumerate() {
            out.push_str(&format!("pn.sa{i}.n_centroids = {}\n", sa.n_centroids));
            out.push_str(&format!("pn.sa{i}.radius = {}\n", sa.radius));
            out.push_str(&format!("pn.sa{i}.max_group = {}\n", sa.max_group));
            out.push_str(&format!("pn.sa{i}.mlp_widths = {}\n", join(&sa.mlp_widths)));
        }
        for (i, w) in self.pointnet.fp_widths.iter().enumerate() {
            out.push_str(&format!("pn.fp{i}.widths = {}\n", join(w)));
        }
        out.push_str(&format!("fc.widths = {}\n", join(&self.fc_widths)));
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut kv: HashMap<String, String> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ModelError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| -> Result<String> {
            kv.get(key)
                .cloned()
                .ok_or_else(|| ModelError::Config(format!("missing key {key:?}")))
        };
        let version = get("version")?;
        if version != "1" {
            return Err(ModelError::Config(format!("unsupported config version {version}")));
        }
        let num = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|e| ModelError::Config(format!("{key}: {e}")))
        };
        let real = |key: &str| -> Result<f64> {
            get(key)?.parse().map_err(|e| ModelError::Config(format!("{key}: {e}")))
        };
        let list = |key: &str| -> Result<Vec<usize>> {
            get(key)?
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| ModelError::Config(format!("{key}: {e}"))))
                .collect()
        };
        let fixed = |key: &str, n: usize| -> Result<Vec<usize>> {
            let v = list(key)?;
            if v.len() != n {
                return Err(ModelError::Config(format!("{key}: expected {n} entries")));
            }
            Ok(v)
        };
        let enc = fixed("kp.enc_widths", 3)?;
        let dec = fixed("kp.dec_widths", 2)?;
        let sa = |i: usize| -> Result<SetAbstractionConfig> {
            Ok(SetAbstractionConfig {
                n_centroids: num(&format!("pn.sa{i}.n_centroids"))?,
                radius: real(&format!("pn.sa{i}.radius"))?,
                max_group: num(&format!("pn.sa{i}.max_group"))?,
                mlp_widths: list(&format!("pn.sa{i}.mlp_widths"))?,
            })
        };
        let config = Self {
            kind: ModelKind::parse(&get("kind")?)?,
            preset: get("preset")?,
            n_points: num("n_points")?,
            out_dim: num("out_dim")?,
            seed: get("seed")?.parse().map_err(|e| ModelError::Config(format!("seed: {e}")))?,
            kpconv: KpconvPlan {
                k_points: num("kp.k_points")?,
                sigma_factor: real("kp.sigma_factor")?,
                base_radius: real("kp.base_radius")?,
                base_cell: real("kp.base_cell")?,
                enc_widths: [enc[0], enc[1], enc[2]],
                dec_widths: [dec[0], dec[1]],
            },
            pointnet: PointnetPlan {
                sa: [sa(0)?, sa(1)?],
                fp_widths: [list("pn.fp0.widths")?, list("pn.fp1.widths")?],
            },
            fc_widths: list("fc.widths")?,
        };
        config.validate()?;
        Ok(config)
    }
}

fn join(widths: &[usize]) -> String {
    widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

// ---------------------------------------------------------------------------
// per-sample geometry cache
// ---------------------------------------------------------------------------

/// Everything about one preprocessed cloud that the forward pass needs but
/// that does not depend on parameters: the voxel pyramid, the five KPConv
/// neighborhoods, the FPS groupings, and all interpolation weights.
pub struct SampleGeometry {
    pub clouds: [PointCloud; 3],
    /// enc0, enc1, enc2, dec0, dec1
    kp_geoms: [Arc<KernelConvGeometry>; 5],
    sa: [SaGrouping; 2],
    /// coarse→fine weights for the two U-Net decoder levels
    unet_interp: [Arc<Vec<Vec<(u32, f32)>>>; 2],
    /// coarse→fine weights for the two feature-propagation levels
    fp_interp: [Arc<Vec<Vec<(u32, f32)>>>; 2],
    coords: Tensor2D,
    feats_in: Tensor2D,
}

/// Index of the lexicographically smallest point; used as the FPS start so
/// centroid selection does not depend on input point order.
fn lexmin_index(points: &[Point3]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        if p.iter().partial_cmp(points[best].iter()) == Some(std::cmp::Ordering::Less) {
            best = i;
        }
    }
    best
}

impl SampleGeometry {
    pub fn build(
        config: &SMNetConfig,
        kernels: &[KernelPointSet; 5],
        cloud: &PointCloud,
    ) -> Result<Self> {
        if cloud.len() != config.n_points {
            return Err(ModelError::WrongPointCount { got: cloud.len(), want: config.n_points });
        }
        for (i, p) in cloud.points().iter().enumerate() {
            if let Some(&v) = p.iter().find(|v| v.abs() > 0.6) {
                return Err(ModelError::NotNormalized { index: i, value: v });
            }
        }
        let plan = &config.kpconv;
        let c0 = cloud.clone();
        let c1 = voxel_average_downsample(&c0, plan.base_cell)?;
        let c2 = voxel_average_downsample(&c1, 2.0 * plan.base_cell)?;
        let r = [plan.base_radius, 2.0 * plan.base_radius, 4.0 * plan.base_radius];
        let idx0 = NeighborhoodIndex::build(c0.points(), r[0])?;
        let idx0w = NeighborhoodIndex::build(c0.points(), r[1])?;
        let idx1 = NeighborhoodIndex::build(c1.points(), r[1])?;
        let idx1w = NeighborhoodIndex::build(c1.points(), r[2])?;
        let kp_geoms = [
            Arc::new(build_kpconv_geometry(c0.points(), c0.points(), &kernels[0], &idx0)),
            Arc::new(build_kpconv_geometry(c1.points(), c0.points(), &kernels[1], &idx0w)),
            Arc::new(build_kpconv_geometry(c2.points(), c1.points(), &kernels[2], &idx1w)),
            Arc::new(build_kpconv_geometry(c1.points(), c1.points(), &kernels[3], &idx1)),
            Arc::new(build_kpconv_geometry(c0.points(), c0.points(), &kernels[4], &idx0)),
        ];
        let unet_interp = [
            Arc::new(interpolation_weights(c1.points(), c2.points())),
            Arc::new(interpolation_weights(c0.points(), c1.points())),
        ];
        let sa0 = SaGrouping::build(&c0, &config.pointnet.sa[0], lexmin_index(c0.points()))?;
        let sa1 = SaGrouping::build(
            &sa0.sub_cloud,
            &config.pointnet.sa[1],
            lexmin_index(sa0.sub_cloud.points()),
        )?;
        let fp_interp = [
            Arc::new(interpolation_weights(sa0.sub_cloud.points(), sa1.sub_cloud.points())),
            Arc::new(interpolation_weights(c0.points(), sa0.sub_cloud.points())),
        ];
        let n = c0.len();
        let mut coords = Vec::with_capacity(n * 3);
        let mut feats = Vec::with_capacity(n * D_IN);
        for p in c0.points() {
            coords.extend(p.iter().map(|&v| v as f32));
            feats.extend(p.iter().map(|&v| v as f32));
            feats.push(1.0);
        }
        Ok(Self {
            clouds: [c0, c1, c2],
            kp_geoms,
            sa: [sa0, sa1],
            unet_interp,
            fp_interp,
            coords: Tensor2D::new(n, 3, coords)?,
            feats_in: Tensor2D::new(n, D_IN, feats)?,
        })
    }
}

// ---------------------------------------------------------------------------
// the model
// ---------------------------------------------------------------------------

pub struct SMNet {
    pub config: SMNetConfig,
    pub params: ParameterStore,
    kernels: [KernelPointSet; 5],
}

fn build_kernels(config: &SMNetConfig) -> [KernelPointSet; 5] {
    let plan = &config.kpconv;
    let radii = [
        plan.base_radius,
        2.0 * plan.base_radius,
        4.0 * plan.base_radius,
        2.0 * plan.base_radius,
        plan.base_radius,
    ];
    std::array::from_fn(|i| {
        KernelPointSet::new(
            plan.k_points,
            radii[i],
            plan.sigma_factor * radii[i],
            config.seed.wrapping_add(0x6b70 + i as u64),
        )
    })
}

impl SMNet {
    pub fn new(config: SMNetConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let plan = &config.kpconv;
        if config.kind != ModelKind::PointnetOnly {
            let [w0, w1, w2] = plan.enc_widths;
            let [d0, d1] = plan.dec_widths;
            let k = plan.k_points;
            let layers = [
                ("kp.enc0", D_IN, w0),
                ("kp.enc1", w0, w1),
                ("kp.enc2", w1, w2),
                ("kp.dec0", w2 + w1, d0),
                ("kp.dec1", d0 + w0, d1),
            ];
            for (prefix, din, dout) in layers {
                init_kpconv(&mut params, prefix, k, din, dout, &mut rng)?;
                // a trunk ending at the global pool must not end normalized
                if !(config.kind == ModelKind::KpconvOnly && prefix == "kp.dec1") {
                    init_feature_norm(&mut params, &format!("{prefix}.norm"), dout)?;
                }
            }
        }
        if config.kind != ModelKind::KpconvOnly {
            let feat_w = config.pointnet_in_width();
            let pn = &config.pointnet;
            init_set_abstraction(&mut params, "pn.sa0", feat_w, &pn.sa[0], &mut rng)?;
            let sa0_out = *pn.sa[0].mlp_widths.last().expect("non-empty");
            init_set_abstraction(&mut params, "pn.sa1", sa0_out, &pn.sa[1], &mut rng)?;
            let sa1_out = *pn.sa[1].mlp_widths.last().expect("non-empty");
            init_feature_propagation(&mut params, "pn.fp0", sa1_out, sa0_out, &pn.fp_widths[0], true, &mut rng)?;
            let fp0_out = *pn.fp_widths[0].last().expect("non-empty");
            // fp1 feeds the global pool: no norm on its last block
            init_feature_propagation(&mut params, "pn.fp1", fp0_out, feat_w, &pn.fp_widths[1], false, &mut rng)?;
        }
        // whitens the pooled embedding so the head regression is
        // well-conditioned; running statistics only (one row per pass)
        init_feature_norm(&mut params, "pool.norm", config.pooled_width())?;
        init_fc_head(
            &mut params,
            "fc",
            config.pooled_width(),
            &config.fc_widths,
            config.out_dim,
            &mut rng,
        )?;
        let kernels = build_kernels(&config);
        Ok(Self { config, params, kernels })
    }

    /// Rebuilds a model from its config and a saved parameter file. Kernel
    /// point positions are regenerated from the config seed, so the
    /// parameter file alone completes the checkpoint.
    pub fn load(config: SMNetConfig, params_path: &Path) -> Result<Self> {
        config.validate()?;
        let params = ParameterStore::load_file(params_path)?;
        let kernels = build_kernels(&config);
        Ok(Self { config, params, kernels })
    }

    pub fn save_params(&self, path: &Path) -> Result<()> {
        self.params.save_file(path)?;
        Ok(())
    }

    pub fn prepare_sample(&self, cloud: &PointCloud) -> Result<SampleGeometry> {
        SampleGeometry::build(&self.config, &self.kernels, cloud)
    }

    fn kp_block(
        &self,
        fwd: &mut Forward,
        features: Var,
        prefix: &str,
        geom: &Arc<KernelConvGeometry>,
    ) -> Result<Var> {
        let x = fwd.kpconv(&self.params, features, prefix, Arc::clone(geom))?;
        let x = fwd.feature_norm(&self.params, x, &format!("{prefix}.norm"))?;
        Ok(fwd.tape.relu(x))
    }

    /// KPConv U-Net over the voxel pyramid; returns per-point features on
    /// the full-resolution cloud.
    fn kpconv_trunk(&self, fwd: &mut Forward, geom: &SampleGeometry, feats: Var) -> Result<Var> {
        let e0 = self.kp_block(fwd, feats, "kp.enc0", &geom.kp_geoms[0])?;
        let e1 = self.kp_block(fwd, e0, "kp.enc1", &geom.kp_geoms[1])?;
        let e2 = self.kp_block(fwd, e1, "kp.enc2", &geom.kp_geoms[2])?;
        let up1 = fwd.tape.interpolate_rows(e2, Arc::clone(&geom.unet_interp[0]))?;
        let d0_in = fwd.tape.concat_cols(up1, e1)?;
        let d0 = self.kp_block(fwd, d0_in, "kp.dec0", &geom.kp_geoms[3])?;
        let up0 = fwd.tape.interpolate_rows(d0, Arc::clone(&geom.unet_interp[1]))?;
        let d1_in = fwd.tape.concat_cols(up0, e0)?;
        if self.config.kind == ModelKind::KpconvOnly {
            // dec1 feeds the global pool directly: skip the norm
            let x = fwd.kpconv(&self.params, d1_in, "kp.dec1", Arc::clone(&geom.kp_geoms[4]))?;
            return Ok(fwd.tape.relu(x));
        }
        self.kp_block(fwd, d1_in, "kp.dec1", &geom.kp_geoms[4])
    }

    /// PointNet++ trunk: two set abstractions down, two feature
    /// propagations back up; returns per-point features.
    fn pointnet_trunk(&self, fwd: &mut Forward, geom: &SampleGeometry, feats: Var) -> Result<Var> {
        let f1 = geom.sa[0].apply(fwd, &self.params, feats, "pn.sa0")?;
        let f2 = geom.sa[1].apply(fwd, &self.params, f1, "pn.sa1")?;
        let up1 = fwd.tape.interpolate_rows(f2, Arc::clone(&geom.fp_interp[0]))?;
        let m1 = fwd.tape.concat_cols(up1, f1)?;
        let g1 = fwd.mlp(&self.params, m1, "pn.fp0", self.config.pointnet.fp_widths[0].len(), true)?;
        let up0 = fwd.tape.interpolate_rows(g1, Arc::clone(&geom.fp_interp[1]))?;
        let m0 = fwd.tape.concat_cols(up0, feats)?;
        Ok(fwd.mlp(&self.params, m0, "pn.fp1", self.config.pointnet.fp_widths[1].len(), false)?)
    }

    /// Trunk selection, global average pool, and the pooled-embedding norm.
    fn pooled_embedding(&self, fwd: &mut Forward, geom: &SampleGeometry) -> Result<Var> {
        let feats = fwd.constant(&geom.feats_in);
        let pooled = match self.config.kind {
            ModelKind::KpconvOnly => {
                let trunk = self.kpconv_trunk(fwd, geom, feats)?;
                fwd.tape.mean_rows(trunk)
            }
            ModelKind::PointnetOnly => {
                let trunk = self.pointnet_trunk(fwd, geom, feats)?;
                fwd.tape.mean_rows(trunk)
            }
            ModelKind::Smnet => {
                let kp_out = self.kpconv_trunk(fwd, geom, feats)?;
                let coords = fwd.constant(&geom.coords);
                let fused = fwd.tape.concat_cols(coords, kp_out)?;
                let trunk = self.pointnet_trunk(fwd, geom, fused)?;
                fwd.tape.mean_rows(trunk)
            }
        };
        Ok(fwd.feature_norm(&self.params, pooled, "pool.norm")?)
    }

    /// Records one forward pass on a fresh tape, normalizing by the stored
    /// running statistics. Train mode additionally measures each norm site's
    /// input statistics for the running updates.
    pub fn forward_cached(&self, geom: &SampleGeometry, train: bool) -> Result<(Forward, Var)> {
        self.forward_on(Forward::new(train), geom)
    }

    /// Gradient-pass forward: norm sites read the shared batch statistics.
    fn forward_batch(
        &self,
        geom: &SampleGeometry,
        overrides: Arc<HashMap<String, NormStats>>,
    ) -> Result<(Forward, Var)> {
        self.forward_on(Forward::with_stat_overrides(false, overrides), geom)
    }

    fn forward_on(&self, mut fwd: Forward, geom: &SampleGeometry) -> Result<(Forward, Var)> {
        let pooled = self.pooled_embedding(&mut fwd, geom)?;
        let pred = fwd.fc_head(&self.params, pooled, "fc", self.config.fc_widths.len())?;
        Ok((fwd, pred))
    }

    /// Eval-mode prediction for a preprocessed, count-matched cloud.
    pub fn forward(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let geom = self.prepare_sample(cloud)?;
        self.predict(&geom)
    }

    /// Eval-mode pooled embedding (the fc head's input) — the model's
    /// fixed-length representation of one cloud.
    pub fn embed(&self, geom: &SampleGeometry) -> Result<Vec<f64>> {
        let mut fwd = Forward::new(false);
        let pooled = self.pooled_embedding(&mut fwd, geom)?;
        Ok(fwd.tape.value(pooled).values().iter().map(|&v| v as f64).collect())
    }

    pub fn predict(&self, geom: &SampleGeometry) -> Result<Vec<f64>> {
        let (fwd, pred) = self.forward_cached(geom, false)?;
        Ok(fwd.tape.value(pred).values().iter().map(|&v| v as f64).collect())
    }

    /// Full inference chain on a raw cloud: preprocessing then forward.
    /// Returns the raw (unclamped) prediction and the normalization record.
    pub fn predict_control(
        &self,
        cloud: &PointCloud,
        pp: &PreprocessParams,
    ) -> Result<(Vec<f64>, TransformRecord)> {
        let (clean, record) = preprocess_cloud(cloud, pp)?;
        let prediction = self.forward(&clean)?;
        Ok((prediction, record))
    }
}

/// Clamp for feeding predictions back into the simulators, which reject
/// out-of-range controls. Stored predictions stay raw.
pub fn clamp_control(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| v.clamp(-1.0, 1.0)).collect()
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PreprocessParams {
    pub interior_cell: Option<f64>,
    pub voxel_cell: Option<f64>,
    pub n_points: usize,
    pub seed: u64,
}

/// Interior removal → voxel averaging → random downsample to `n_points` →
/// center/normalize into [-0.5, 0.5].
pub fn preprocess_cloud(
    cloud: &PointCloud,
    pp: &PreprocessParams,
) -> Result<(PointCloud, TransformRecord)> {
    let mut c = cloud.clone();
    if let Some(cell) = pp.interior_cell {
        c = remove_interior_points(&c, cell)?;
    }
    if let Some(cell) = pp.voxel_cell {
        c = voxel_average_downsample(&c, cell)?;
    }
    if c.len() < pp.n_points {
        return Err(ModelError::TooFewPoints { got: c.len(), need: pp.n_points });
    }
    let c = random_downsample(&c, pp.n_points, pp.seed)?;
    let (c, record) = center_and_normalize(&c)?;
    Ok((c, record))
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

pub struct PreparedSample {
    pub id: u32,
    pub geometry: SampleGeometry,
    pub target: Tensor2D,
    pub control: Vec<f64>,
}

pub struct PreparedDataset {
    pub train: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

/// Loads, preprocesses, and precomputes geometry for every sample in the
/// manifest's train/test split. Parallel across samples.
pub fn prepare_dataset(
    model: &SMNet,
    manifest: &DatasetManifest,
    dir: &Path,
    pp: &PreprocessParams,
) -> Result<PreparedDataset> {
    if manifest.control_dim != model.config.out_dim {
        return Err(ModelError::Config(format!(
            "dataset control_dim {} does not match model out_dim {}",
            manifest.control_dim, model.config.out_dim
        )));
    }
    let by_id: HashMap<u32, &crate::sim::SampleEntry> =
        manifest.samples.iter().map(|s| (s.id, s)).collect();
    let prepare_ids = |ids: &[u32]| -> Result<Vec<PreparedSample>> {
        ids.par_iter()
            .map(|id| {
                let entry = by_id
                    .get(id)
                    .ok_or_else(|| ModelError::Config(format!("split references unknown sample {id}")))?;
                let cloud = read_cloud(&dir.join(&entry.file))?;
                let (clean, _) = preprocess_cloud(&cloud, pp)?;
                let geometry = model.prepare_sample(&clean)?;
                let target = Tensor2D::new(
                    1,
                    entry.control.len(),
                    entry.control.iter().map(|&v| v as f32).collect(),
                )?;
                Ok(PreparedSample { id: *id, geometry, target, control: entry.control.clone() })
            })
            .collect()
    };
    Ok(PreparedDataset {
        train: prepare_ids(&manifest.split.train)?,
        test: prepare_ids(&manifest.split.test)?,
    })
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub shuffle_seed: u64,
    /// checkpoint every this many epochs; 0 disables
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 600,
            lr: 0.1,
            momentum: 0.9,
            shuffle_seed: 1,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: Option<f64>,
    pub test_mae: Option<f64>,
    pub test_r2: Option<f64>,
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,train_mse,test_mse,test_mae,test_r2")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.epoch,
            r.train_mse,
            opt(r.test_mse),
            opt(r.test_mae),
            opt(r.test_r2)
        )?;
    }
    Ok(())
}

pub struct EvalReport {
    pub pooled: RegressionMetrics,
    /// mean absolute error per output dimension
    pub per_dim_mae: Vec<f64>,
    /// per-dimension R²; NaN for constant-truth dimensions
    pub per_dim_r2: Vec<f64>,
    pub predictions: Vec<Vec<f64>>,
    pub truths: Vec<Vec<f64>>,
}

impl SMNet {
    /// Seeds the running normalization statistics from actual activations
    /// before the first optimizer step. The pooled-embedding norm reads the
    /// running stats even in training mode, so a fresh model's (0, 1)
    /// placeholders would otherwise feed the head badly mis-scaled features;
    /// eval-mode passes need sane stats at every site from epoch 0.
    /// A site's statistics depend on every normalizer upstream of it, so the
    /// sites are calibrated one at a time in tape (depth) order: each
    /// assignment is measured with all shallower sites already settled.
    /// Deterministic: fixed sample prefix.
    fn calibrate_norms(&mut self, samples: &[PreparedSample]) -> Result<()> {
        let k = samples.len().min(16);
        let (probe, _) = self.forward_cached(&samples[0].geometry, true)?;
        let mut site_order: Vec<String> = Vec::new();
        for (prefix, _, _) in probe.into_norm_batches() {
            if !site_order.contains(&prefix) {
                site_order.push(prefix);
            }
        }
        for site in &site_order {
            let mut agg = NormStatAggregator::new();
            for sample in &samples[..k] {
                let (fwd, _) = self.forward_cached(&sample.geometry, true)?;
                agg.add(&fwd.into_norm_batches());
            }
            for (prefix, mean, var) in agg.totals() {
                if &prefix != site {
                    continue;
                }
                *self.params.get_mut(&format!("{prefix}.running_mean"))? =
                    Tensor2D::new(1, mean.len(), mean)?;
                *self.params.get_mut(&format!("{prefix}.running_var"))? =
                    Tensor2D::new(1, var.len(), var)?;
            }
        }
        Ok(())
    }

    pub fn train(
        &mut self,
        train_set: &[PreparedSample],
        test_set: &[PreparedSample],
        cfg: &TrainConfig,
    ) -> Result<Vec<EpochRecord>> {
        if train_set.is_empty() {
            return Err(ModelError::EmptySet);
        }
        self.calibrate_norms(train_set)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0f64;
            for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
                let diverged = |e: ModelError| match e {
                    // non-finite parameters are a divergence, not a bug
                    ModelError::Autodiff(AutodiffError::NonFinite(_)) => {
                        ModelError::Diverged { epoch, batch: batch_idx, lr: cfg.lr }
                    }
                    other => other,
                };
                // measurement pass: per-sample activation statistics under
                // the current weights, combined across the batch
                let measured: Vec<Vec<(String, Vec<f32>, Vec<f32>)>> = batch
                    .par_iter()
                    .map(|&i| {
                        let (fwd, _) = self.forward_cached(&train_set[i].geometry, true)?;
                        Ok(fwd.into_norm_batches())
                    })
                    .collect::<Result<_>>()
                    .map_err(diverged)?;
                let mut stat_agg = NormStatAggregator::new();
                for m in &measured {
                    stat_agg.add(m);
                }
                let totals = stat_agg.totals();
                // running statistics (eval-mode normalizers) track the batch
                // statistics with momentum 0.1
                update_running_stats(&mut self.params, totals.clone())?;
                let overrides = Arc::new(
                    totals
                        .into_iter()
                        .map(|(p, mean, var)| (p, NormStats { mean, var }))
                        .collect::<HashMap<_, _>>(),
                );
                if std::env::var("SMNET_TRACE").is_ok() && batch_idx == 0 {
                    if let Some(s) = overrides.get("pool.norm") {
                        eprintln!("ovr pool.norm mean {:?} var {:?}", &s.mean[..4], &s.var[..4]);
                    }
                    let em = self.params.get("pool.norm.running_mean")?.values().to_vec();
                    let ev = self.params.get("pool.norm.running_var")?.values().to_vec();
                    eprintln!("ema pool.norm mean {:?} var {:?}", &em[..4], &ev[..4]);
                    let (fwd, pred) = self
                        .forward_batch(&train_set[batch[0]].geometry, Arc::clone(&overrides))?;
                    eprintln!("grad-pass pred {:?}", &fwd.tape.value(pred).values()[..4]);
                    let (fwd2, pred2) = self.forward_cached(&train_set[batch[0]].geometry, false)?;
                    eprintln!("eval pred {:?}", &fwd2.tape.value(pred2).values()[..4]);
                }
                // gradient pass: every sample normalized by the shared batch
                // statistics, as in batch normalization over stacked clouds
                self.params.clear_grads();
                let results: Vec<(f64, CollectedGrads)> = batch
                    .par_iter()
                    .map(|&i| {
                        let sample = &train_set[i];
                        let (mut fwd, pred) =
                            self.forward_batch(&sample.geometry, Arc::clone(&overrides))?;
                        let truth = fwd.constant(&sample.target);
                        let loss = fwd.tape.mse_loss(pred, truth)?;
                        let loss_value = fwd.tape.value(loss).get(0, 0) as f64;
                        Ok((loss_value, fwd.backward_collect(loss)?))
                    })
                    .collect::<Result<_>>()
                    .map_err(diverged)?;
                let trace = std::env::var("SMNET_TRACE").is_ok();
                let mut batch_loss = 0.0;
                for (loss_value, grads) in results {
                    if !loss_value.is_finite() {
                        return Err(ModelError::Diverged { epoch, batch: batch_idx, lr: cfg.lr });
                    }
                    if trace {
                        batch_loss += loss_value;
                        for (n, g) in &grads.grads {
                            let m = g.iter().map(|v| v.abs() as f64).fold(0.0, f64::max);
                            if m > 50.0 {
                                eprintln!("  big grad {n}: {m:.2e}");
                            }
                        }
                    }
                    loss_sum += loss_value;
                    grads.apply_grads(&mut self.params)?;
                }
                if trace {
                    eprintln!("batch {batch_idx}: loss {:.4}", batch_loss / batch.len() as f64);
                }
                self.params.scale_grads(1.0 / batch.len() as f32);
                sgd_momentum_step(&mut self.params, cfg.lr, cfg.momentum)?;
            }
            let train_mse = loss_sum / train_set.len() as f64;
            let (test_mse, test_mae, test_r2) = if test_set.is_empty() {
                (None, None, None)
            } else {
                let report = self.evaluate(test_set)?;
                (Some(report.pooled.mse), Some(report.pooled.mae), Some(report.pooled.r2))
            };
            history.push(EpochRecord { epoch, train_mse, test_mse, test_mae, test_r2 });
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                if let Some(dir) = &cfg.checkpoint_dir {
                    std::fs::create_dir_all(dir)?;
                    self.save_params(&dir.join(format!("checkpoint_{:04}.params", epoch + 1)))?;
                }
            }
        }
        Ok(history)
    }

    /// Pooled and per-dimension regression metrics over an evaluation set.
    pub fn evaluate(&self, set: &[PreparedSample]) -> Result<EvalReport> {
        if set.is_empty() {
            return Err(ModelError::EmptySet);
        }
        let predictions: Vec<Vec<f64>> =
            set.par_iter().map(|s| self.predict(&s.geometry)).collect::<Result<_>>()?;
        let truths: Vec<Vec<f64>> = set.iter().map(|s| s.control.clone()).collect();
        let pooled = regression_metrics(&predictions, &truths)?;
        let dims = truths[0].len();
        let n = set.len() as f64;
        let mut per_dim_mae = vec![0.0f64; dims];
        let mut mean_truth = vec![0.0f64; dims];
        for t in &truths {
            for (m, &v) in mean_truth.iter_mut().zip(t) {
                *m += v / n;
            }
        }
        let mut sse = vec![0.0f64; dims];
        let mut sst = vec![0.0f64; dims];
        for (p, t) in predictions.iter().zip(&truths) {
            for d in 0..dims {
                per_dim_mae[d] += (p[d] - t[d]).abs() / n;
                sse[d] += (p[d] - t[d]).powi(2);
                sst[d] += (t[d] - mean_truth[d]).powi(2);
            }
        }
        let per_dim_r2 = sse
            .iter()
            .zip(&sst)
            .map(|(&e, &t)| if t > 0.0 { 1.0 - e / t } else { f64::NAN })
            .collect();
        Ok(EvalReport { pooled, per_dim_mae, per_dim_r2, predictions, truths })
    }
}

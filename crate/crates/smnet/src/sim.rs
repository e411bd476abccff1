//! Analytic surrogate forward models: deterministic maps from a control
//! vector to a deformed surface point cloud, plus dataset generation.
//!
//! Three mechanism families with increasing actuator coupling:
//! thermal-like (compact per-cell bumps), ionic-like (signed bending bumps
//! with mild overlap), and pneumatic-like (lattice-smoothed control with wide
//! bumps). All are linear in the control vector, so an independent
//! least-squares fit can cross-check any learned inverse model.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pointcloud::{dist2, write_pcd1, Point3, PointCloud};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("control length {got} does not match layout control_dim {want}")]
    ControlLength { got: usize, want: usize },
    #[error("control[{index}] = {value} outside [-1, 1]")]
    ControlRange { index: usize, value: f64 },
    #[error("sample {id}: {source}")]
    Sample { id: u32, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

type Result<T> = std::result::Result<T, SimError>;

pub type ControlVector = Vec<f64>;

const CELLS_PER_EDGE: usize = 6;
const CELL: f64 = 1.0 / CELLS_PER_EDGE as f64;

// ---------------------------------------------------------------------------
// layouts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Plate,
    CubeIndependent,
    CubeShared,
}

/// One actuator cell: its center on the undeformed surface, the outward
/// surface normal there, and the control index driving it.
#[derive(Debug, Clone)]
pub struct ActuatorCell {
    pub center: Point3,
    pub normal: [f64; 3],
    pub control: usize,
}

/// Actuator array on the undeformed surface. The plate spans [-0.5, 0.5]² at
/// z = 0; cubes span [-0.5, 0.5]³. The shared-cell cube assigns one control
/// per surface voxel of the 6×6×6 grid (152 of them), so edge and corner
/// cells on adjacent faces move together.
#[derive(Debug, Clone)]
pub struct ActuatorLayout {
    pub topology: Topology,
    pub cells: Vec<ActuatorCell>,
    pub control_dim: usize,
}

/// (outward normal, fixed axis, fixed value, u axis, v axis) per cube face.
const CUBE_FACES: [([f64; 3], usize, f64, usize, usize); 6] = [
    ([0.0, 0.0, 1.0], 2, 0.5, 0, 1),
    ([0.0, 0.0, -1.0], 2, -0.5, 0, 1),
    ([1.0, 0.0, 0.0], 0, 0.5, 1, 2),
    ([-1.0, 0.0, 0.0], 0, -0.5, 1, 2),
    ([0.0, 1.0, 0.0], 1, 0.5, 0, 2),
    ([0.0, -1.0, 0.0], 1, -0.5, 0, 2),
];

fn cell_coord(i: usize) -> f64 {
    -0.5 + (i as f64 + 0.5) * CELL
}

fn surface_voxel(p: Point3) -> [usize; 3] {
    let mut v = [0usize; 3];
    for a in 0..3 {
        v[a] = (((p[a] + 0.5) * CELLS_PER_EDGE as f64).floor() as i64)
            .clamp(0, CELLS_PER_EDGE as i64 - 1) as usize;
    }
    v
}

impl ActuatorLayout {
    pub fn plate36() -> Self {
        let mut cells = Vec::with_capacity(36);
        for i in 0..CELLS_PER_EDGE {
            for j in 0..CELLS_PER_EDGE {
                cells.push(ActuatorCell {
                    center: [cell_coord(j), cell_coord(i), 0.0],
                    normal: [0.0, 0.0, 1.0],
                    control: cells.len(),
                });
            }
        }
        Self { topology: Topology::Plate, control_dim: cells.len(), cells }
    }

    fn cube_cells() -> Vec<(Point3, [f64; 3])> {
        let mut out = Vec::with_capacity(216);
        for &(normal, fixed, value, ua, va) in &CUBE_FACES {
            for i in 0..CELLS_PER_EDGE {
                for j in 0..CELLS_PER_EDGE {
                    let mut c = [0.0; 3];
                    c[fixed] = value;
                    c[ua] = cell_coord(j);
                    c[va] = cell_coord(i);
                    out.push((c, normal));
                }
            }
        }
        out
    }

    /// 216 independently driven face cells.
    pub fn cube216() -> Self {
        let cells = Self::cube_cells()
            .into_iter()
            .enumerate()
            .map(|(k, (center, normal))| ActuatorCell { center, normal, control: k })
            .collect::<Vec<_>>();
        Self { topology: Topology::CubeIndependent, control_dim: cells.len(), cells }
    }

    /// 152 controls: face cells sharing a surface voxel share one control.
    pub fn cube152() -> Self {
        let raw = Self::cube_cells();
        let mut voxels: Vec<[usize; 3]> = raw.iter().map(|&(c, _)| surface_voxel(c)).collect();
        let mut distinct = voxels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let index_of = |v: &[usize; 3]| distinct.binary_search(v).expect("voxel present");
        let cells = raw
            .into_iter()
            .zip(voxels.drain(..))
            .map(|((center, normal), v)| ActuatorCell { center, normal, control: index_of(&v) })
            .collect();
        Self { topology: Topology::CubeShared, control_dim: distinct.len(), cells }
    }

    pub fn by_topology(t: Topology) -> Self {
        match t {
            Topology::Plate => Self::plate36(),
            Topology::CubeIndependent => Self::cube216(),
            Topology::CubeShared => Self::cube152(),
        }
    }

    /// Mean of each control's cell centers; used by the pneumatic stencil.
    fn control_positions(&self) -> Vec<Point3> {
        let mut sums = vec![[0.0f64; 3]; self.control_dim];
        let mut counts = vec![0usize; self.control_dim];
        for c in &self.cells {
            for a in 0..3 {
                sums[c.control][a] += c.center[a];
            }
            counts[c.control] += 1;
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64])
            .collect()
    }

    /// Anchor points: bounding-box corners (4 for the plate, 8 for cubes) or
    /// the surface center (plate center; bottom-face center for cubes).
    fn anchor_points(&self, rule: AnchorRule) -> Vec<Point3> {
        match (rule, self.topology) {
            (AnchorRule::CenterFixed, Topology::Plate) => vec![[0.0, 0.0, 0.0]],
            (AnchorRule::CenterFixed, _) => vec![[0.0, 0.0, -0.5]],
            (AnchorRule::CornersFixed, Topology::Plate) => vec![
                [-0.5, -0.5, 0.0],
                [-0.5, 0.5, 0.0],
                [0.5, -0.5, 0.0],
                [0.5, 0.5, 0.0],
            ],
            (AnchorRule::CornersFixed, _) => {
                let mut out = Vec::with_capacity(8);
                for &x in &[-0.5, 0.5] {
                    for &y in &[-0.5, 0.5] {
                        for &z in &[-0.5, 0.5] {
                            out.push([x, y, z]);
                        }
                    }
                }
                out
            }
        }
    }

    fn faces(&self) -> Vec<([f64; 3], usize, f64, usize, usize)> {
        match self.topology {
            Topology::Plate => vec![([0.0, 0.0, 1.0], 2, 0.0, 0, 1)],
            _ => CUBE_FACES.to_vec(),
        }
    }
}

// ---------------------------------------------------------------------------
// surrogate spec
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    ThermalLike,
    IonicLike,
    PneumaticLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorRule {
    CornersFixed,
    CenterFixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub mechanism: Mechanism,
    /// peak displacement scale, ~15% of body size by default
    pub amplitude: f64,
    /// base influence radius; defaults to half a cell
    pub radius: f64,
    /// pneumatic smoothing width across the cell lattice
    pub coupling_width: f64,
    pub anchor: AnchorRule,
}

impl SurrogateSpec {
    pub fn default_for(mechanism: Mechanism) -> Self {
        let anchor = match mechanism {
            Mechanism::ThermalLike => AnchorRule::CenterFixed,
            _ => AnchorRule::CornersFixed,
        };
        Self {
            mechanism,
            amplitude: 0.15,
            radius: 0.5 * CELL,
            coupling_width: 1.5 * CELL,
            anchor,
        }
    }
}

/// Smooth compact bump: 1 at r = 0, 0 with zero slope at r = radius.
fn bump(r: f64, radius: f64) -> f64 {
    if r >= radius {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * r / radius).cos())
    }
}

// ---------------------------------------------------------------------------
// surrogate model
// ---------------------------------------------------------------------------

/// Prepared surrogate: layout plus precomputed smoothing stencil and kernel
/// normalization, reusable across many `simulate` calls.
pub struct Surrogate {
    pub spec: SurrogateSpec,
    pub layout: ActuatorLayout,
    anchors: Vec<Point3>,
    /// sup over the surface of Σ_i |K_i|; kernels are divided by this so the
    /// mechanism is 1-Lipschitz in the effective control (∞ norms)
    kernel_norm: f64,
    /// row-normalized smoothing stencil (pneumatic only), row-major
    stencil: Option<Vec<f64>>,
}

impl Surrogate {
    pub fn new(spec: SurrogateSpec, layout: ActuatorLayout) -> Self {
        let anchors = layout.anchor_points(spec.anchor);
        let stencil = match spec.mechanism {
            Mechanism::PneumaticLike => Some(build_stencil(&layout, spec.coupling_width)),
            _ => None,
        };
        let mut s = Self { spec, layout, anchors, kernel_norm: 1.0, stencil };
        s.kernel_norm = s.measure_kernel_norm();
        s
    }

    fn kernel_radius(&self) -> f64 {
        match self.spec.mechanism {
            Mechanism::ThermalLike => self.spec.radius,
            Mechanism::IonicLike => 1.5 * self.spec.radius,
            Mechanism::PneumaticLike => 2.0 * self.spec.radius,
        }
    }

    fn sum_abs_kernels(&self, p: Point3) -> f64 {
        let radius = self.kernel_radius();
        let r2max = radius * radius;
        let mut total = vec![0.0f64; self.layout.control_dim];
        for cell in &self.layout.cells {
            let d2 = dist2(p, cell.center);
            if d2 >= r2max {
                continue;
            }
            let r = d2.sqrt();
            let k = match self.spec.mechanism {
                Mechanism::ThermalLike | Mechanism::PneumaticLike => bump(r, radius),
                Mechanism::IonicLike => {
                    bump(r, radius) * (std::f64::consts::PI * r / radius).cos()
                }
            };
            total[cell.control] += k;
        }
        total.iter().map(|k| k.abs()).sum()
    }

    /// Dense probe of sup_p Σ|K_i(p)| over the surface, including all cell
    /// centers, with a small safety factor for the overlapping mechanisms.
    fn measure_kernel_norm(&self) -> f64 {
        let mut sup = 0.0f64;
        for cell in &self.layout.cells {
            sup = sup.max(self.sum_abs_kernels(cell.center));
        }
        let probe = 4 * CELLS_PER_EDGE * CELLS_PER_EDGE; // 96 per face edge
        for &(_, fixed, value, ua, va) in &self.layout.faces() {
            for i in 0..=probe {
                for j in 0..=probe {
                    let mut p = [0.0; 3];
                    p[fixed] = value;
                    p[ua] = -0.5 + j as f64 / probe as f64;
                    p[va] = -0.5 + i as f64 / probe as f64;
                    sup = sup.max(self.sum_abs_kernels(p));
                }
            }
        }
        match self.spec.mechanism {
            Mechanism::ThermalLike => sup.max(1.0),
            _ => sup * 1.001,
        }
    }

    pub fn anchor_factor(&self, p: Point3) -> f64 {
        let radius = 1.5 * CELL;
        self.anchors
            .iter()
            .map(|&a| 1.0 - bump(dist2(p, a).sqrt(), radius))
            .product()
    }

    /// Lattice-smoothed control for the pneumatic mechanism; identity for
    /// the others.
    pub fn effective_control(&self, u: &[f64]) -> Vec<f64> {
        match &self.stencil {
            None => u.to_vec(),
            Some(s) => {
                let n = self.layout.control_dim;
                (0..n)
                    .map(|i| (0..n).map(|j| s[i * n + j] * u[j]).sum())
                    .collect()
            }
        }
    }

    pub fn stencil_row_sums(&self) -> Option<Vec<f64>> {
        let n = self.layout.control_dim;
        self.stencil
            .as_ref()
            .map(|s| (0..n).map(|i| (0..n).map(|j| s[i * n + j]).sum()).collect())
    }

    /// Scalar displacement along the local outward normal at `p` for an
    /// already-smoothed control.
    pub fn displacement(&self, p: Point3, u_eff: &[f64]) -> f64 {
        let radius = self.kernel_radius();
        let r2max = radius * radius;
        let mut sum = 0.0;
        for cell in &self.layout.cells {
            let d2 = dist2(p, cell.center);
            if d2 >= r2max {
                continue;
            }
            let r = d2.sqrt();
            let k = match self.spec.mechanism {
                Mechanism::ThermalLike | Mechanism::PneumaticLike => bump(r, radius),
                Mechanism::IonicLike => {
                    bump(r, radius) * (std::f64::consts::PI * r / radius).cos()
                }
            };
            sum += u_eff[cell.control] * k;
        }
        self.anchor_factor(p) * self.spec.amplitude * sum / self.kernel_norm
    }

    fn validate(&self, control: &[f64]) -> Result<()> {
        if control.len() != self.layout.control_dim {
            return Err(SimError::ControlLength {
                got: control.len(),
                want: self.layout.control_dim,
            });
        }
        for (i, &v) in control.iter().enumerate() {
            if !(-1.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(SimError::ControlRange { index: i, value: v });
            }
        }
        Ok(())
    }

    /// Samples the undeformed surface on a jittered density×density grid per
    /// face and displaces each sample along its face normal. The output
    /// carries the undeformed samples as reference points.
    pub fn simulate(&self, control: &[f64], density: usize, seed: u64) -> Result<PointCloud> {
        self.validate(control)?;
        let u_eff = self.effective_control(control);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step = 1.0 / density as f64;
        let mut undeformed = Vec::new();
        let mut deformed = Vec::new();
        for &(normal, fixed, value, ua, va) in &self.layout.faces() {
            for i in 0..density {
                for j in 0..density {
                    let ju: f64 = rng.gen();
                    let jv: f64 = rng.gen();
                    let mut p = [0.0; 3];
                    p[fixed] = value;
                    p[ua] = -0.5 + (j as f64 + ju) * step;
                    p[va] = -0.5 + (i as f64 + jv) * step;
                    let d = self.displacement(p, &u_eff);
                    let q = [p[0] + d * normal[0], p[1] + d * normal[1], p[2] + d * normal[2]];
                    undeformed.push(p);
                    deformed.push(q);
                }
            }
        }
        Ok(PointCloud::with_reference(deformed, Some(undeformed)).expect("finite by construction"))
    }
}

fn build_stencil(layout: &ActuatorLayout, width: f64) -> Vec<f64> {
    let pos = layout.control_positions();
    let n = pos.len();
    let mut s = vec![0.0f64; n * n];
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            let w = bump(dist2(pos[i], pos[j]).sqrt(), width);
            s[i * n + j] = w;
            row_sum += w;
        }
        for j in 0..n {
            s[i * n + j] /= row_sum;
        }
    }
    s
}

/// One-call convenience wrapper around [`Surrogate`].
pub fn simulate(
    control: &[f64],
    spec: &SurrogateSpec,
    layout: &ActuatorLayout,
    density: usize,
    seed: u64,
) -> Result<PointCloud> {
    Surrogate::new(spec.clone(), layout.clone()).simulate(control, density, seed)
}

// ---------------------------------------------------------------------------
// linearity probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LinearityReport {
    /// max |simulate(u1+u2) − simulate(u1) − simulate(u2) + undeformed| over
    /// all sample coordinates
    pub superposition_max_err: f64,
    /// pneumatic smoothing row sums (each should be 1); empty otherwise
    pub stencil_row_sums: Vec<f64>,
}

pub fn linearity_probe(spec: &SurrogateSpec, layout: &ActuatorLayout) -> Result<LinearityReport> {
    let surrogate = Surrogate::new(spec.clone(), layout.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(7_031);
    let dim = layout.control_dim;
    let u1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let u2: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
    let density = 12;
    let seed = 11;
    let a = surrogate.simulate(&u1, density, seed)?;
    let b = surrogate.simulate(&u2, density, seed)?;
    let ab = surrogate.simulate(&sum, density, seed)?;
    let base = surrogate.simulate(&vec![0.0; dim], density, seed)?;
    let mut max_err = 0.0f64;
    for i in 0..a.len() {
        for axis in 0..3 {
            let lhs = ab.points()[i][axis];
            let rhs = a.points()[i][axis] + b.points()[i][axis] - base.points()[i][axis];
            max_err = max_err.max((lhs - rhs).abs());
        }
    }
    Ok(LinearityReport {
        superposition_max_err: max_err,
        stencil_row_sums: surrogate.stencil_row_sums().unwrap_or_default(),
    })
}

// ---------------------------------------------------------------------------
// dataset generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: u32,
    pub seed: u64,
    pub control: Vec<f64>,
    pub file: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec_hash: String,
    pub spec: SurrogateSpec,
    pub topology: Topology,
    pub control_dim: usize,
    pub density: usize,
    /// sampling assumption for the randomized controls
    pub control_distribution: String,
    pub samples: Vec<SampleEntry>,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub preprocessing: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| SimError::Manifest(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| SimError::Manifest(e.to_string()))
    }
}

/// Stable per-sample seed from the master seed and sample id.
pub fn sample_seed(master_seed: u64, id: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(id.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn spec_hash(spec: &SurrogateSpec, topology: Topology, density: usize) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("serializable"));
    h.update(serde_json::to_vec(&topology).expect("serializable"));
    h.update(density.to_le_bytes());
    format!("{:x}", h.finalize())
}

/// Draws uniform controls in [-1, 1]^dim, simulates each sample, writes the
/// clouds as PCD1 files plus a manifest.json, and splits 80/20 train/test.
/// Regeneration with the same master seed is bit-identical.
pub fn generate_dataset(
    n_samples: u32,
    spec: &SurrogateSpec,
    layout: &ActuatorLayout,
    density: usize,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir)?;
    let surrogate = Surrogate::new(spec.clone(), layout.clone());
    let mut samples = Vec::with_capacity(n_samples as usize);
    for id in 0..n_samples {
        let seed = sample_seed(master_seed, id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let control: Vec<f64> = (0..layout.control_dim)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        let cloud = surrogate.simulate(&control, density, seed.wrapping_add(1))?;
        let file = format!("sample_{id:05}.pcd1");
        write_pcd1(&cloud, &out_dir.join(&file))
            .map_err(|e| SimError::Sample { id, source: std::io::Error::other(e.to_string()) })?;
        samples.push(SampleEntry { id, seed, control, file });
    }
    let n_train = (n_samples as usize * 4) / 5;
    let split = Split {
        train: (0..n_train as u32).collect(),
        test: (n_train as u32..n_samples).collect(),
    };
    let manifest = DatasetManifest {
        spec_hash: spec_hash(spec, layout.topology, density),
        spec: spec.clone(),
        topology: layout.topology,
        control_dim: layout.control_dim,
        density,
        control_distribution: "uniform[-1,1] (assumed)".to_string(),
        samples,
        split,
        preprocessing: None,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

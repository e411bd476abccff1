//! Point-cloud container, preprocessing pipeline, and sampling primitives.
//!
//! Geometry is carried in f64; the model boundary converts to f32.

mod io;
mod spatial;

pub use io::{read_cloud, read_pcd1, read_ply, read_xyz, write_pcd1, write_xyz};
pub use spatial::{NeighborhoodIndex, VoxelGrid};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type Point3 = [f64; 3];

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("empty point cloud")]
    Empty,
    #[error("non-finite coordinate in point {0}")]
    NonFinite(usize),
    #[error("reference length {0} does not match point count {1}")]
    ReferenceMismatch(usize, usize),
    #[error("cell size must be positive, got {0}")]
    BadCellSize(f64),
    #[error("all points classified as interior (cell size {0} too large?)")]
    AllInterior(f64),
    #[error("requested {0} points from a cloud of {1}")]
    NotEnoughPoints(usize, usize),
    #[error("cloud has zero extent along every axis")]
    ZeroExtent,
    #[error("sample index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CloudError>;

/// Ordered list of 3D points, optionally paired with the pre-deformation
/// position of each point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    reference_points: Option<Vec<Point3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        Self::with_reference(points, None)
    }

    pub fn with_reference(
        points: Vec<Point3>,
        reference_points: Option<Vec<Point3>>,
    ) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(CloudError::NonFinite(i));
            }
        }
        if let Some(r) = &reference_points {
            if r.len() != points.len() {
                return Err(CloudError::ReferenceMismatch(r.len(), points.len()));
            }
            for (i, p) in r.iter().enumerate() {
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(CloudError::NonFinite(i));
                }
            }
        }
        Ok(Self { points, reference_points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn reference_points(&self) -> Option<&[Point3]> {
        self.reference_points.as_deref()
    }

    /// Sub-cloud at the given indices (reference rows follow along).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut points = Vec::with_capacity(indices.len());
        for &i in indices {
            points.push(*self.points.get(i).ok_or(CloudError::IndexOutOfRange(i))?);
        }
        let reference = match &self.reference_points {
            Some(r) => Some(indices.iter().map(|&i| r[i]).collect()),
            None => None,
        };
        PointCloud::with_reference(points, reference)
    }

    pub fn bounding_box(&self) -> Result<(Point3, Point3)> {
        if self.points.is_empty() {
            return Err(CloudError::Empty);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Ok((lo, hi))
    }
}

/// Stored translation/rotation/scale of [`center_and_normalize`], invertible.
///
/// Forward map: p' = scale · R · (p − translation_pre) ... concretely
/// p' = scale · (R·p − center), so `invert` recovers p exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformRecord {
    pub rotation: [[f64; 3]; 3],
    pub center: Point3,
    pub scale: f64,
}

impl TransformRecord {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((self.rotation[i][j] - e).abs());
            }
            dev = dev.max(self.center[i].abs());
        }
        dev.max((self.scale - 1.0).abs()) <= tol
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = rotate(&self.rotation, p);
        [
            self.scale * (r[0] - self.center[0]),
            self.scale * (r[1] - self.center[1]),
            self.scale * (r[2] - self.center[2]),
        ]
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        let q = [
            p[0] / self.scale + self.center[0],
            p[1] / self.scale + self.center[1],
            p[2] / self.scale + self.center[2],
        ];
        // Rᵀ undoes the rotation
        [
            self.rotation[0][0] * q[0] + self.rotation[1][0] * q[1] + self.rotation[2][0] * q[2],
            self.rotation[0][1] * q[0] + self.rotation[1][1] * q[1] + self.rotation[2][1] * q[2],
            self.rotation[0][2] * q[0] + self.rotation[1][2] * q[1] + self.rotation[2][2] * q[2],
        ]
    }
}

fn rotate(r: &[[f64; 3]; 3], p: Point3) -> Point3 {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

pub fn dist2(a: Point3, b: Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Keeps only points whose voxel has at least one empty 6-neighbor voxel.
pub fn remove_interior_points(cloud: &PointCloud, cell_size: f64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(CloudError::Empty);
    }
    let grid = VoxelGrid::build(cloud.points(), cell_size)?;
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let c = grid.cell_of(cloud.points()[i]);
            grid.has_empty_face_neighbor(c)
        })
        .collect();
    if keep.is_empty() {
        return Err(CloudError::AllInterior(cell_size));
    }
    cloud.select(&keep)
}

/// One output point per occupied voxel: the mean of its members.
/// Cells are emitted in sorted cell-index order, so output is deterministic.
pub fn voxel_average_downsample(cloud: &PointCloud, cell_size: f64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(CloudError::Empty);
    }
    let grid = VoxelGrid::build(cloud.points(), cell_size)?;
    let mut points = Vec::new();
    let mut reference = cloud.reference_points().map(|_| Vec::new());
    for (_, members) in grid.cells_sorted() {
        let inv = 1.0 / members.len() as f64;
        let mut acc = [0.0f64; 3];
        for &i in members {
            for a in 0..3 {
                acc[a] += cloud.points()[i][a];
            }
        }
        points.push([acc[0] * inv, acc[1] * inv, acc[2] * inv]);
        if let (Some(out), Some(refs)) = (&mut reference, cloud.reference_points()) {
            let mut racc = [0.0f64; 3];
            for &i in members {
                for a in 0..3 {
                    racc[a] += refs[i][a];
                }
            }
            out.push([racc[0] * inv, racc[1] * inv, racc[2] * inv]);
        }
    }
    PointCloud::with_reference(points, reference)
}

/// Uniform subset without replacement, deterministic per seed.
pub fn random_downsample(cloud: &PointCloud, n_target: usize, seed: u64) -> Result<PointCloud> {
    if n_target > cloud.len() {
        return Err(CloudError::NotEnoughPoints(n_target, cloud.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..cloud.len()).collect();
    let (picked, _) = indices.partial_shuffle(&mut rng, n_target);
    let mut picked = picked.to_vec();
    picked.sort_unstable();
    cloud.select(&picked)
}

/// Centers on the bounding-box midpoint, aligns the dominant axes of the
/// reference (when present) with the coordinate axes, and scales uniformly so
/// the longest axis extent is exactly 1. All output coordinates land in
/// [-0.5, 0.5].
pub fn center_and_normalize(cloud: &PointCloud) -> Result<(PointCloud, TransformRecord)> {
    if cloud.len() < 2 {
        return Err(CloudError::Empty);
    }
    let rotation = match cloud.reference_points() {
        Some(refs) => alignment_rotation(refs),
        None => TransformRecord::identity().rotation,
    };
    // bbox of the rotated cloud
    let rotated: Vec<Point3> = cloud.points().iter().map(|&p| rotate(&rotation, p)).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &rotated {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
    if extent <= 0.0 {
        return Err(CloudError::ZeroExtent);
    }
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let record = TransformRecord { rotation, center, scale: 1.0 / extent };
    let points: Vec<Point3> = cloud.points().iter().map(|&p| record.apply(p)).collect();
    let reference = cloud
        .reference_points()
        .map(|refs| refs.iter().map(|&p| record.apply(p)).collect());
    Ok((PointCloud::with_reference(points, reference)?, record))
}

/// Principal axes of the reference snapped to the nearest signed coordinate
/// permutation; pre-aligned data yields the exact identity.
fn alignment_rotation(refs: &[Point3]) -> [[f64; 3]; 3] {
    let n = refs.len() as f64;
    let mut mean = [0.0f64; 3];
    for p in refs {
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = [[0.0f64; 3]; 3];
    for p in refs {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    // Already axis-aligned references (the synthetic pipeline) must map to
    // the exact identity; this also sidesteps the degenerate-eigenvalue case
    // where in-plane eigenvectors of a flat reference are arbitrary.
    let max_diag = cov[0][0].max(cov[1][1]).max(cov[2][2]).max(1e-300);
    let max_off = cov[0][1].abs().max(cov[0][2].abs()).max(cov[1][2].abs());
    if max_off / max_diag < 1e-3 {
        return TransformRecord::identity().rotation;
    }
    let eigvecs = jacobi_eigenvectors(cov);
    // Snap each eigenvector to its dominant unused coordinate axis. The
    // resulting signed permutation applied to Vᵀ is the alignment rotation.
    let mut used = [false; 3];
    let mut rot = [[0.0f64; 3]; 3];
    for k in 0..3 {
        let col = [eigvecs[0][k], eigvecs[1][k], eigvecs[2][k]];
        let mut axis = 0;
        let mut best = -1.0;
        for a in 0..3 {
            if !used[a] && col[a].abs() > best {
                best = col[a].abs();
                axis = a;
            }
        }
        used[axis] = true;
        let sign = if col[axis] >= 0.0 { 1.0 } else { -1.0 };
        // row `axis` of R is ±(eigenvector k)ᵀ, so R maps it onto e_axis
        for j in 0..3 {
            rot[axis][j] = sign * eigvecs[j][k];
        }
    }
    // keep it a proper rotation
    if det3(&rot) < 0.0 {
        for v in rot[2].iter_mut() {
            *v = -*v;
        }
    }
    // already axis-aligned (up to jitter) → snap to the exact signed permutation
    let near_axis = rot
        .iter()
        .flatten()
        .all(|&v| v.abs() < 1e-6 || (v.abs() - 1.0).abs() < 1e-6);
    if near_axis {
        for row in rot.iter_mut() {
            for v in row.iter_mut() {
                *v = if v.abs() < 1e-6 { 0.0 } else { v.signum() };
            }
        }
    }
    rot
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Cyclic Jacobi sweeps for a symmetric 3×3; returns eigenvectors as columns
/// ordered by descending eigenvalue.
fn jacobi_eigenvectors(mut a: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..32 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off < 1e-14 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for k in 0..3 {
                let vkp = v[k][p];
                let vkq = v[k][q];
                v[k][p] = c * vkp - s * vkq;
                v[k][q] = s * vkp + c * vkq;
            }
        }
    }
    // order columns by descending eigenvalue
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let mut out = [[0.0f64; 3]; 3];
    for (k, &src) in order.iter().enumerate() {
        for r in 0..3 {
            out[r][k] = v[r][src];
        }
    }
    out
}

/// Greedy max-min farthest point sampling; ties break to the lowest index.
pub fn farthest_point_sample(
    cloud: &PointCloud,
    n_samples: usize,
    start_index: usize,
) -> Result<Vec<usize>> {
    let n = cloud.len();
    if n_samples == 0 || n_samples > n {
        return Err(CloudError::NotEnoughPoints(n_samples, n));
    }
    if start_index >= n {
        return Err(CloudError::IndexOutOfRange(start_index));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(n_samples);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start_index;
    selected.push(current);
    for _ in 1..n_samples {
        let cp = pts[current];
        for (i, d) in min_d2.iter_mut().enumerate() {
            let nd = dist2(pts[i], cp);
            if nd < *d {
                *d = nd;
            }
        }
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// For each centroid, up to `max_group` point indices within `radius`,
/// nearest first. A group always contains at least the centroid itself.
pub fn ball_query_group(
    cloud: &PointCloud,
    centroids: &[usize],
    radius: f64,
    max_group: usize,
    index: &NeighborhoodIndex,
) -> Vec<Vec<usize>> {
    let pts = cloud.points();
    centroids
        .iter()
        .map(|&c| {
            let mut hits = index.radius_query(pts[c], radius);
            hits.sort_by(|&a, &b| {
                let da = dist2(pts[a], pts[c]);
                let db = dist2(pts[b], pts[c]);
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            });
            hits.truncate(max_group);
            if hits.is_empty() {
                hits.push(c);
            }
            hits
        })
        .collect()
}

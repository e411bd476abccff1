//! Similarity metrics between point clouds, pooled regression scores,
//! per-cell error maps, and the normal-angle-variance surface complexity
//! measure.
//!
//! All variances and standard deviations are population (1/n) quantities.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::pointcloud::{dist2, NeighborhoodIndex, Point3, PointCloud};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("r2 is undefined: truth has zero variance in every dimension")]
    ConstantTruth,
    #[error("point {index} lies {distance:.3e} outside the reference bounding box")]
    OutOfBounds { index: usize, distance: f64 },
    #[error("empty grid cell at ({row}, {col}) on face '{face}'; use a coarser grid")]
    EmptyCell { face: String, row: usize, col: usize },
    #[error("degenerate height grid: {0}")]
    DegenerateGrid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// Per-point nearest distances from `source` to `target` with their mean.
#[derive(Debug, Clone)]
pub struct NearestDistanceProfile {
    pub distances: Vec<f64>,
    pub mean: f64,
}

/// Directed nearest-neighbor distances, accelerated by a spatial hash.
pub fn nearest_distances(source: &PointCloud, target: &PointCloud) -> Result<NearestDistanceProfile> {
    if source.is_empty() || target.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let (lo, hi) = target.bounding_box().expect("non-empty");
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
    // cell on the order of the mean spacing keeps ring searches short
    let cell = (extent / (target.len() as f64).cbrt()).max(1e-9);
    let index = NeighborhoodIndex::build(target.points(), cell).expect("non-empty");
    let distances: Vec<f64> = source
        .points()
        .iter()
        .map(|&p| {
            let nn = index.k_nearest(p, 1)[0];
            dist2(p, target.points()[nn]).sqrt()
        })
        .collect();
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    Ok(NearestDistanceProfile { distances, mean })
}

/// Sum of the two directed mean squared nearest distances.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let ab = nearest_distances(a, b)?;
    let ba = nearest_distances(b, a)?;
    let mean_sq = |p: &NearestDistanceProfile| {
        p.distances.iter().map(|d| d * d).sum::<f64>() / p.distances.len() as f64
    };
    Ok(mean_sq(&ab) + mean_sq(&ba))
}

/// Population standard deviation of the directed nearest distances a → b.
pub fn distance_stddev(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let profile = nearest_distances(a, b)?;
    let n = profile.distances.len() as f64;
    let var = profile
        .distances
        .iter()
        .map(|d| (d - profile.mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(var.sqrt())
}

/// Symmetric Hausdorff distance: the worst nearest distance in either
/// direction.
pub fn hausdorff_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let ab = nearest_distances(a, b)?;
    let ba = nearest_distances(b, a)?;
    let max = |p: &NearestDistanceProfile| p.distances.iter().fold(0.0f64, |m, &d| m.max(d));
    Ok(max(&ab).max(max(&ba)))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
}

/// Pooled MSE, MAE, and R² over all matrix entries. R² uses per-dimension
/// (column) means for the total sum of squares; columns with constant truth
/// contribute nothing to it, and an all-constant truth is an error.
pub fn regression_metrics(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<RegressionMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} prediction rows vs {} truth rows",
            pred.len(),
            truth.len()
        )));
    }
    let cols = truth[0].len();
    if pred.iter().chain(truth).any(|r| r.len() != cols) {
        return Err(MetricsError::ShapeMismatch("ragged rows".into()));
    }
    if truth.len() < 2 {
        return Err(MetricsError::ShapeMismatch("r2 needs at least 2 rows".into()));
    }
    let n = (truth.len() * cols) as f64;
    let mut ss_res = 0.0;
    let mut abs_sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        for (x, y) in p.iter().zip(t) {
            ss_res += (x - y) * (x - y);
            abs_sum += (x - y).abs();
        }
    }
    let mut ss_tot = 0.0;
    for c in 0..cols {
        let mean = truth.iter().map(|r| r[c]).sum::<f64>() / truth.len() as f64;
        ss_tot += truth.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>();
    }
    if ss_tot == 0.0 {
        return Err(MetricsError::ConstantTruth);
    }
    Ok(RegressionMetrics {
        mse: ss_res / n,
        mae: abs_sum / n,
        r2: 1.0 - ss_res / ss_tot,
    })
}

pub const ERROR_MAP_RESOLUTION: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapLayout {
    Plate,
    UnfoldedCube,
}

/// One face of an error map: mean error and occupancy count per cell.
#[derive(Debug, Clone)]
pub struct FaceGrid {
    pub name: &'static str,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
}

impl FaceGrid {
    fn new(name: &'static str) -> Self {
        let n = ERROR_MAP_RESOLUTION * ERROR_MAP_RESOLUTION;
        Self { name, values: vec![0.0; n], counts: vec![0; n] }
    }

    pub fn at(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * ERROR_MAP_RESOLUTION + col;
        if self.counts[i] == 0 {
            None
        } else {
            Some(self.values[i])
        }
    }
}

#[derive(Debug, Clone)]
pub struct ErrorMap {
    pub layout: MapLayout,
    pub faces: Vec<FaceGrid>,
}

impl ErrorMap {
    pub fn total_count(&self) -> usize {
        self.faces.iter().map(|f| f.counts.iter().sum::<usize>()).sum()
    }
}

const CUBE_FACES: [&str; 6] = ["top", "bottom", "+x", "-x", "+y", "-y"];
const BBOX_TOL: f64 = 1e-6;

/// Bins each error by its point's reference (pre-deformation) position into a
/// 30×30 grid per face and averages within cells.
pub fn build_error_map(reference: &PointCloud, errors: &[f64], layout: MapLayout) -> Result<ErrorMap> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    if errors.len() != reference.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} errors for {} points",
            errors.len(),
            reference.len()
        )));
    }
    let (lo, hi) = reference.bounding_box().expect("non-empty");
    for (i, p) in reference.points().iter().enumerate() {
        let outside = (0..3)
            .map(|a| (lo[a] - p[a]).max(p[a] - hi[a]).max(0.0))
            .fold(0.0f64, f64::max);
        if outside > BBOX_TOL {
            return Err(MetricsError::OutOfBounds { index: i, distance: outside });
        }
    }

    let mut faces: Vec<FaceGrid> = match layout {
        MapLayout::Plate => vec![FaceGrid::new("plate")],
        MapLayout::UnfoldedCube => CUBE_FACES.iter().map(|n| FaceGrid::new(n)).collect(),
    };
    let mut sums = vec![vec![0.0f64; ERROR_MAP_RESOLUTION * ERROR_MAP_RESOLUTION]; faces.len()];

    for (p, &e) in reference.points().iter().zip(errors) {
        let (face, u, v) = match layout {
            MapLayout::Plate => (0usize, axis_fraction(p[0], lo[0], hi[0]), axis_fraction(p[1], lo[1], hi[1])),
            MapLayout::UnfoldedCube => cube_face_coords(*p, lo, hi),
        };
        let col = cell_of_fraction(u);
        let row = cell_of_fraction(v);
        let idx = row * ERROR_MAP_RESOLUTION + col;
        sums[face][idx] += e;
        faces[face].counts[idx] += 1;
    }
    for (face, sums) in faces.iter_mut().zip(&sums) {
        for (i, &s) in sums.iter().enumerate() {
            if face.counts[i] > 0 {
                face.values[i] = s / face.counts[i] as f64;
            }
        }
    }
    Ok(ErrorMap { layout, faces })
}

fn axis_fraction(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn cell_of_fraction(f: f64) -> usize {
    ((f * ERROR_MAP_RESOLUTION as f64) as usize).min(ERROR_MAP_RESOLUTION - 1)
}

/// Picks the cube face whose plane is closest to the point, breaking ties in
/// the fixed face order, and returns in-face fractional coordinates.
fn cube_face_coords(p: Point3, lo: Point3, hi: Point3) -> (usize, f64, f64) {
    // (face index, plane axis, plane value, u axis, v axis)
    let planes = [
        (0usize, 2usize, hi[2], 0usize, 1usize), // top
        (1, 2, lo[2], 0, 1),                     // bottom
        (2, 0, hi[0], 1, 2),                     // +x
        (3, 0, lo[0], 1, 2),                     // -x
        (4, 1, hi[1], 0, 2),                     // +y
        (5, 1, lo[1], 0, 2),                     // -y
    ];
    let best = planes
        .iter()
        .min_by(|a, b| {
            let da = (p[a.1] - a.2).abs();
            let db = (p[b.1] - b.2).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    let (face, _, _, ua, va) = *best;
    (
        face,
        axis_fraction(p[ua], lo[ua], hi[ua]),
        axis_fraction(p[va], lo[va], hi[va]),
    )
}

/// CSV export: one section per face, each introduced by a header row naming
/// the face; empty cells are written as "nan". Face order unfolds the cube
/// with the upper face first.
pub fn write_error_map_csv(map: &ErrorMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for face in &map.faces {
        writeln!(w, "{}", face.name)?;
        for row in 0..ERROR_MAP_RESOLUTION {
            let cells: Vec<String> = (0..ERROR_MAP_RESOLUTION)
                .map(|col| match face.at(row, col) {
                    Some(v) => format!("{v}"),
                    None => "nan".to_string(),
                })
                .collect();
            writeln!(w, "{}", cells.join(","))?;
        }
    }
    Ok(())
}

/// Regular n×n height field z(x, y) with row spacing `spacing[1]` (y) and
/// column spacing `spacing[0]` (x).
#[derive(Debug, Clone)]
pub struct HeightGrid {
    pub n: usize,
    pub spacing: [f64; 2],
    pub heights: Vec<f64>,
}

impl HeightGrid {
    pub fn new(n: usize, spacing: [f64; 2], heights: Vec<f64>) -> Result<Self> {
        if n < 3 {
            return Err(MetricsError::DegenerateGrid(format!("n = {n} < 3")));
        }
        if heights.len() != n * n {
            return Err(MetricsError::DegenerateGrid(format!(
                "{} heights for an {n}×{n} grid",
                heights.len()
            )));
        }
        if !(spacing[0] > 0.0 && spacing[1] > 0.0) {
            return Err(MetricsError::DegenerateGrid("non-positive spacing".into()));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(MetricsError::DegenerateGrid("non-finite height".into()));
        }
        Ok(Self { n, spacing, heights })
    }

    fn z(&self, row: usize, col: usize) -> f64 {
        self.heights[row * self.n + col]
    }

    /// Unit normals n = (−∂z/∂x, −∂z/∂y, 1)/‖·‖ from central differences in
    /// the interior and one-sided differences at the borders.
    pub fn normals(&self) -> Vec<[f64; 3]> {
        let n = self.n;
        let mut out = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                let gx = match col {
                    0 => (self.z(row, 1) - self.z(row, 0)) / self.spacing[0],
                    c if c == n - 1 => (self.z(row, c) - self.z(row, c - 1)) / self.spacing[0],
                    c => (self.z(row, c + 1) - self.z(row, c - 1)) / (2.0 * self.spacing[0]),
                };
                let gy = match row {
                    0 => (self.z(1, col) - self.z(0, col)) / self.spacing[1],
                    r if r == n - 1 => (self.z(r, col) - self.z(r - 1, col)) / self.spacing[1],
                    r => (self.z(r + 1, col) - self.z(r - 1, col)) / (2.0 * self.spacing[1]),
                };
                let norm = (gx * gx + gy * gy + 1.0).sqrt();
                out.push([-gx / norm, -gy / norm, 1.0 / norm]);
            }
        }
        out
    }
}

/// Population variance (radians²) of the angles each vertex normal forms
/// with its +x and +y neighbor normals. Vertices on the last column lack a
/// +x neighbor and contribute no x angle; likewise for the last row in y.
pub fn surface_complexity(grid: &HeightGrid) -> Result<f64> {
    let n = grid.n;
    let normals = grid.normals();
    let angle = |a: [f64; 3], b: [f64; 3]| -> f64 {
        let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        dot.clamp(-1.0, 1.0).acos()
    };
    let mut angles = Vec::with_capacity(2 * n * (n - 1));
    for row in 0..n {
        for col in 0..n {
            let here = normals[row * n + col];
            if col + 1 < n {
                angles.push(angle(here, normals[row * n + col + 1]));
            }
            if row + 1 < n {
                angles.push(angle(here, normals[(row + 1) * n + col]));
            }
        }
    }
    let m = angles.len() as f64;
    let mean = angles.iter().sum::<f64>() / m;
    Ok(angles.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceFaces {
    Plate,
    Cube,
}

/// Re-grids the cloud into per-face height fields (mean height per cell) and
/// averages `surface_complexity` across faces. Every grid cell must receive
/// at least one point.
pub fn complexity_from_cloud(cloud: &PointCloud, faces: SurfaceFaces, n: usize) -> Result<f64> {
    if cloud.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let (lo, hi) = cloud.bounding_box().expect("non-empty");
    let face_defs: Vec<(&'static str, usize, usize, usize, bool)> = match faces {
        // (name, u axis, v axis, height axis, take upper half)
        SurfaceFaces::Plate => vec![("plate", 0, 1, 2, true)],
        SurfaceFaces::Cube => vec![
            ("top", 0, 1, 2, true),
            ("bottom", 0, 1, 2, false),
            ("+x", 1, 2, 0, true),
            ("-x", 1, 2, 0, false),
            ("+y", 0, 2, 1, true),
            ("-y", 0, 2, 1, false),
        ],
    };
    let mut total = 0.0;
    for &(name, ua, va, ha, upper) in &face_defs {
        let mid = 0.5 * (lo[ha] + hi[ha]);
        let members: Vec<&Point3> = match faces {
            SurfaceFaces::Plate => cloud.points().iter().collect(),
            SurfaceFaces::Cube => cloud
                .points()
                .iter()
                .filter(|p| {
                    // the half of the surface nearer this face, restricted to
                    // points whose closest plane is this one
                    let on_side = if upper { p[ha] >= mid } else { p[ha] <= mid };
                    let d_face = if upper { hi[ha] - p[ha] } else { p[ha] - lo[ha] };
                    let mut d_other = f64::INFINITY;
                    for a in 0..3 {
                        if a == ha {
                            continue;
                        }
                        d_other = d_other.min(hi[a] - p[a]).min(p[a] - lo[a]);
                    }
                    on_side && d_face <= d_other
                })
                .collect(),
        };
        if members.is_empty() {
            return Err(MetricsError::EmptyCell { face: name.to_string(), row: 0, col: 0 });
        }
        let mut flo = [f64::INFINITY; 2];
        let mut fhi = [f64::NEG_INFINITY; 2];
        for p in &members {
            for (k, &a) in [ua, va].iter().enumerate() {
                flo[k] = flo[k].min(p[a]);
                fhi[k] = fhi[k].max(p[a]);
            }
        }
        let mut sums = vec![0.0f64; n * n];
        let mut counts = vec![0usize; n * n];
        for p in &members {
            let cu = ((axis_fraction(p[ua], flo[0], fhi[0]) * n as f64) as usize).min(n - 1);
            let cv = ((axis_fraction(p[va], flo[1], fhi[1]) * n as f64) as usize).min(n - 1);
            sums[cv * n + cu] += p[ha];
            counts[cv * n + cu] += 1;
        }
        let mut heights = vec![0.0f64; n * n];
        for i in 0..n * n {
            if counts[i] == 0 {
                return Err(MetricsError::EmptyCell {
                    face: name.to_string(),
                    row: i / n,
                    col: i % n,
                });
            }
            heights[i] = sums[i] / counts[i] as f64;
        }
        let spacing = [
            ((fhi[0] - flo[0]) / (n - 1) as f64).max(1e-12),
            ((fhi[1] - flo[1]) / (n - 1) as f64).max(1e-12),
        ];
        let grid = HeightGrid::new(n, spacing, heights)?;
        total += surface_complexity(&grid)?;
    }
    Ok(total / face_defs.len() as f64)
}

/// Full metric report for JSON export; absent metrics stay out of the file.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chamfer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stddev: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hausdorff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complexity: Option<f64>,
}

impl MetricsReport {
    /// Divides every present metric by the largest present value, for
    /// bar-chart style comparisons normalized to 1.
    pub fn max_normalized(&self) -> Self {
        let fields = [self.mse, self.mae, self.r2, self.chamfer, self.stddev, self.hausdorff, self.complexity];
        let max = fields
            .iter()
            .flatten()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        if max == 0.0 {
            return self.clone();
        }
        let scale = |v: Option<f64>| v.map(|x| x / max);
        Self {
            mse: scale(self.mse),
            mae: scale(self.mae),
            r2: scale(self.r2),
            chamfer: scale(self.chamfer),
            stddev: scale(self.stddev),
            hausdorff: scale(self.hausdorff),
            complexity: scale(self.complexity),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, self).map_err(|e| MetricsError::Io(e.into()))?;
        Ok(())
    }
}

//! Voxel grid and spatial-hash neighbor queries.

use std::collections::HashMap;

use super::{dist2, CloudError, Point3, Result};

pub type CellIndex = [i64; 3];

/// Occupancy map from integer cells to member point indices.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    cell_size: f64,
    origin: Point3,
    cells: HashMap<CellIndex, Vec<usize>>,
}

impl VoxelGrid {
    pub fn build(points: &[Point3], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(CloudError::BadCellSize(cell_size));
        }
        if points.is_empty() {
            return Err(CloudError::Empty);
        }
        // anchored at the world origin so cell boundaries don't depend on the
        // cloud extent; this makes voxel averaging idempotent
        let origin = [0.0; 3];
        let mut grid = Self { cell_size, origin, cells: HashMap::new() };
        for (i, &p) in points.iter().enumerate() {
            let c = grid.cell_of(p);
            grid.cells.entry(c).or_default().push(i);
        }
        Ok(grid)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cell_of(&self, p: Point3) -> CellIndex {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = ((p[a] - self.origin[a]) / self.cell_size).floor() as i64;
        }
        c
    }

    pub fn occupied(&self, c: CellIndex) -> bool {
        self.cells.contains_key(&c)
    }

    /// True when any of the six face-adjacent voxels is empty.
    pub fn has_empty_face_neighbor(&self, c: CellIndex) -> bool {
        const FACES: [[i64; 3]; 6] = [
            [1, 0, 0],
            [-1, 0, 0],
            [0, 1, 0],
            [0, -1, 0],
            [0, 0, 1],
            [0, 0, -1],
        ];
        FACES
            .iter()
            .any(|d| !self.occupied([c[0] + d[0], c[1] + d[1], c[2] + d[2]]))
    }

    /// Cells with their members, in sorted cell-index order.
    pub fn cells_sorted(&self) -> Vec<(CellIndex, &Vec<usize>)> {
        let mut out: Vec<_> = self.cells.iter().map(|(&k, v)| (k, v)).collect();
        out.sort_unstable_by_key(|&(k, _)| k);
        out
    }
}

/// Spatial hash supporting exact radius queries and k-nearest queries.
/// Read-only after construction.
#[derive(Debug, Clone)]
pub struct NeighborhoodIndex {
    points: Vec<Point3>,
    cell_size: f64,
    origin: Point3,
    cells: HashMap<CellIndex, Vec<usize>>,
}

impl NeighborhoodIndex {
    /// `cell_size` should be on the order of the typical query radius.
    pub fn build(points: &[Point3], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(CloudError::BadCellSize(cell_size));
        }
        if points.is_empty() {
            return Err(CloudError::Empty);
        }
        let mut origin = [f64::INFINITY; 3];
        for p in points {
            for a in 0..3 {
                origin[a] = origin[a].min(p[a]);
            }
        }
        let mut cells: HashMap<CellIndex, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            let c = cell_index(p, &origin, cell_size);
            cells.entry(c).or_default().push(i);
        }
        Ok(Self { points: points.to_vec(), cell_size, origin, cells })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exactly the indices within Euclidean distance `radius` of `q`
    /// (inclusive), in ascending index order.
    pub fn radius_query(&self, q: Point3, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let reach = (radius / self.cell_size).ceil() as i64;
        let cq = cell_index(&q, &self.origin, self.cell_size);
        let mut hits = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let c = [cq[0] + dx, cq[1] + dy, cq[2] + dz];
                    if let Some(members) = self.cells.get(&c) {
                        for &i in members {
                            if dist2(self.points[i], q) <= r2 {
                                hits.push(i);
                            }
                        }
                    }
                }
            }
        }
        hits.sort_unstable();
        hits
    }

    /// Up to `k` nearest indices to `q`, nearest first; ties break to the
    /// lower index.
    pub fn k_nearest(&self, q: Point3, k: usize) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let cq = cell_index(&q, &self.origin, self.cell_size);
        let mut best: Vec<(f64, usize)> = Vec::new();
        let mut ring = 0i64;
        loop {
            let mut any_cell = false;
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let c = [cq[0] + dx, cq[1] + dy, cq[2] + dz];
                        if let Some(members) = self.cells.get(&c) {
                            any_cell = true;
                            for &i in members {
                                best.push((dist2(self.points[i], q), i));
                            }
                        }
                    }
                }
            }
            let _ = any_cell;
            best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            best.truncate(k.max(1) * 4);
            // Points in unvisited rings are at least (ring) cells away; once
            // the k-th best beats that bound, no farther ring can improve it.
            let ring_bound = ring as f64 * self.cell_size;
            let done = best.len() >= k && best[k - 1].0.sqrt() <= ring_bound;
            let exhausted = ring as usize > self.max_ring();
            if done {
                break;
            }
            if exhausted {
                // distant query relative to the occupied extent: the ring walk
                // can't reach the data, so finish with a full scan
                if best.len() < k.min(self.points.len()) {
                    best = self
                        .points
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| (dist2(p, q), i))
                        .collect();
                    best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                }
                break;
            }
            ring += 1;
        }
        best.truncate(k);
        best.into_iter().map(|(_, i)| i).collect()
    }

    fn max_ring(&self) -> usize {
        // conservative cap: enough rings to cover the whole occupied extent
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for c in self.cells.keys() {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        (0..3).map(|a| (hi[a] - lo[a]).unsigned_abs() as usize).max().unwrap_or(0) + 2
    }
}

fn cell_index(p: &Point3, origin: &Point3, cell_size: f64) -> CellIndex {
    let mut c = [0i64; 3];
    for a in 0..3 {
        c[a] = ((p[a] - origin[a]) / cell_size).floor() as i64;
    }
    c
}

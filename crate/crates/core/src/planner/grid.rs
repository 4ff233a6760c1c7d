//! Voxel occupancy map, obstacle primitives and ray traversal.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::PlanError;
use crate::model::WorldPoint;

/// Integer voxel coordinates. May lie outside the grid.
pub type Cell = [i64; 3];

/// Static obstacle primitives, rasterized into the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Obstacle {
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
    /// Vertical cylinder.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
    /// Capsule around a segment, e.g. a power line.
    Segment {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
    },
}

impl Obstacle {
    /// Euclidean distance from `p` to the solid; 0 inside.
    pub fn distance(&self, p: &WorldPoint) -> f64 {
        match self {
            Obstacle::Box { min, max } => {
                let d = Vector3::from_fn(|i, _| (min[i] - p[i]).max(p[i] - max[i]).max(0.0));
                d.norm()
            }
            Obstacle::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let radial = ((p.x - center[0]).hypot(p.y - center[1]) - radius).max(0.0);
                let vertical = (z_min - p.z).max(p.z - z_max).max(0.0);
                radial.hypot(vertical)
            }
            Obstacle::Segment { a, b, radius } => {
                let a = Vector3::from(*a);
                let ab = Vector3::from(*b) - a;
                let len2 = ab.norm_squared();
                let u = if len2 > 0.0 {
                    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                ((p - (a + ab * u)).norm() - radius).max(0.0)
            }
        }
    }

    /// Axis-aligned bounds of the solid.
    pub fn aabb(&self) -> (WorldPoint, WorldPoint) {
        match self {
            Obstacle::Box { min, max } => (Vector3::from(*min), Vector3::from(*max)),
            Obstacle::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => (
                Vector3::new(center[0] - radius, center[1] - radius, *z_min),
                Vector3::new(center[0] + radius, center[1] + radius, *z_max),
            ),
            Obstacle::Segment { a, b, radius } => {
                let a = Vector3::from(*a);
                let b = Vector3::from(*b);
                let r = Vector3::repeat(*radius);
                (a.inf(&b) - r, a.sup(&b) + r)
            }
        }
    }
}

/// Distance to the nearest obstacle, `f64::INFINITY` without obstacles.
pub fn nearest_obstacle_distance(obstacles: &[Obstacle], p: &WorldPoint) -> f64 {
    obstacles
        .iter()
        .map(|o| o.distance(p))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    origin: WorldPoint,
    cell_size: f64,
    dims: [usize; 3],
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(origin: WorldPoint, cell_size: f64, dims: [usize; 3]) -> Result<Self, PlanError> {
        if !(cell_size > 0.0) || dims.contains(&0) {
            return Err(PlanError::InvalidGrid);
        }
        Ok(Self {
            origin,
            cell_size,
            dims,
            occupied: vec![false; dims[0] * dims[1] * dims[2]],
        })
    }

    /// Grid covering `[origin, origin + size]`.
    pub fn from_extent(origin: WorldPoint, size: Vector3<f64>, cell_size: f64) -> Result<Self, PlanError> {
        if !(cell_size > 0.0) {
            return Err(PlanError::InvalidGrid);
        }
        let dims = [0, 1, 2].map(|i| (size[i] / cell_size).round().max(0.0) as usize);
        Self::new(origin, cell_size, dims)
    }

    pub fn origin(&self) -> WorldPoint {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn index(&self, c: Cell) -> Option<usize> {
        if self.in_bounds(c) {
            let [x, y, z] = c.map(|v| v as usize);
            Some((z * self.dims[1] + y) * self.dims[0] + x)
        } else {
            None
        }
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        (0..3).all(|i| c[i] >= 0 && (c[i] as usize) < self.dims[i])
    }

    /// Out-of-bounds cells count as occupied.
    pub fn is_occupied(&self, c: Cell) -> bool {
        self.index(c).is_none_or(|i| self.occupied[i])
    }

    pub fn is_free(&self, c: Cell) -> bool {
        !self.is_occupied(c)
    }

    pub fn set(&mut self, c: Cell, occupied: bool) {
        if let Some(i) = self.index(c) {
            self.occupied[i] = occupied;
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn cell_of(&self, p: &WorldPoint) -> Cell {
        [0, 1, 2].map(|i| ((p[i] - self.origin[i]) / self.cell_size).floor() as i64)
    }

    pub fn center(&self, c: Cell) -> WorldPoint {
        Vector3::from_fn(|i, _| self.origin[i] + (c[i] as f64 + 0.5) * self.cell_size)
    }

    /// World-space bounds of an inclusive cell range.
    pub fn range_bounds(&self, lo: Cell, hi: Cell) -> (WorldPoint, WorldPoint) {
        (
            Vector3::from_fn(|i, _| self.origin[i] + lo[i] as f64 * self.cell_size),
            Vector3::from_fn(|i, _| self.origin[i] + (hi[i] + 1) as f64 * self.cell_size),
        )
    }

    /// Clamps a point's cell into the grid.
    pub fn clamp_cell(&self, c: Cell) -> Cell {
        [0, 1, 2].map(|i| c[i].clamp(0, self.dims[i] as i64 - 1))
    }

    /// Cell range overlapping the world box `[min - pad, max + pad]`, clipped to the grid.
    fn cells_near(&self, min: &WorldPoint, max: &WorldPoint, pad: f64) -> Option<(Cell, Cell)> {
        let lo = self.cell_of(&(min - Vector3::repeat(pad)));
        let hi = self.cell_of(&(max + Vector3::repeat(pad)));
        if (0..3).any(|i| hi[i] < 0 || lo[i] >= self.dims[i] as i64) {
            return None;
        }
        Some((self.clamp_cell(lo), self.clamp_cell(hi)))
    }

    fn for_each_in(lo: Cell, hi: Cell, mut f: impl FnMut(Cell)) {
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    f([x, y, z]);
                }
            }
        }
    }

    /// True iff every cell of the inclusive range is inside the grid and free.
    pub fn range_free(&self, lo: Cell, hi: Cell) -> bool {
        if (0..3).any(|i| lo[i] > hi[i]) {
            return true;
        }
        if !self.in_bounds(lo) || !self.in_bounds(hi) {
            return false;
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    if self.is_occupied([x, y, z]) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Marks every cell whose center lies within `radius` of `p`.
    pub fn mark_sphere(&mut self, p: &WorldPoint, radius: f64) {
        let Some((lo, hi)) = self.cells_near(p, p, radius) else {
            return;
        };
        let r2 = radius * radius;
        Self::for_each_in(lo, hi, |c| {
            if (self.center(c) - p).norm_squared() <= r2 {
                self.set(c, true);
            }
        });
    }

    /// Marks cells that may contain a point within `clearance` of the obstacle.
    /// The test is conservative: a free cell is entirely farther than `clearance`.
    pub fn rasterize(&mut self, obstacle: &Obstacle, clearance: f64) {
        let half_diag = 0.5 * self.cell_size * 3f64.sqrt();
        let reach = clearance + half_diag;
        let (min, max) = obstacle.aabb();
        let Some((lo, hi)) = self.cells_near(&min, &max, reach) else {
            return;
        };
        Self::for_each_in(lo, hi, |c| {
            if obstacle.distance(&self.center(c)) <= reach {
                self.set(c, true);
            }
        });
    }

    pub fn with_obstacles(mut self, obstacles: &[Obstacle], clearance: f64) -> Self {
        for o in obstacles {
            self.rasterize(o, clearance);
        }
        self
    }

    /// Visits the cells pierced by segment `a → b` in order (face-connected),
    /// stopping early when `visit` returns `false`. Returns whether the walk completed.
    pub fn traverse(&self, a: &WorldPoint, b: &WorldPoint, mut visit: impl FnMut(Cell) -> bool) -> bool {
        let mut cell = self.cell_of(a);
        let end = self.cell_of(b);
        let dir = b - a;
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for i in 0..3 {
            if dir[i] > 0.0 {
                step[i] = 1;
                let boundary = self.origin[i] + (cell[i] + 1) as f64 * self.cell_size;
                t_max[i] = (boundary - a[i]) / dir[i];
                t_delta[i] = self.cell_size / dir[i];
            } else if dir[i] < 0.0 {
                step[i] = -1;
                let boundary = self.origin[i] + cell[i] as f64 * self.cell_size;
                t_max[i] = (boundary - a[i]) / dir[i];
                t_delta[i] = -self.cell_size / dir[i];
            }
        }
        let budget: i64 = (0..3).map(|i| (end[i] - cell[i]).abs()).sum::<i64>() + 1;
        for _ in 0..=budget {
            if !visit(cell) {
                return false;
            }
            if cell == end {
                break;
            }
            let axis = (0..3)
                .min_by(|&i, &j| t_max[i].total_cmp(&t_max[j]))
                .unwrap_or(0);
            if t_max[axis] > 1.0 {
                break;
            }
            cell[axis] += step[axis];
            t_max[axis] += t_delta[axis];
        }
        true
    }

    /// Face-connected cells pierced by a segment.
    pub fn segment_cells(&self, a: &WorldPoint, b: &WorldPoint) -> Vec<Cell> {
        let mut out = Vec::new();
        self.traverse(a, b, |c| {
            out.push(c);
            true
        });
        out
    }

    /// True iff no in-bounds occupied cell is pierced by the segment.
    pub fn segment_clear(&self, a: &WorldPoint, b: &WorldPoint) -> bool {
        self.traverse(a, b, |c| !(self.in_bounds(c) && self.is_occupied(c)))
    }

    /// Same as [`segment_clear`](Self::segment_clear) but out-of-bounds cells block.
    pub fn segment_free(&self, a: &WorldPoint, b: &WorldPoint) -> bool {
        self.traverse(a, b, |c| self.is_free(c))
    }

    /// Logical OR of two grids with identical geometry.
    pub fn union_with(&mut self, other: &OccupancyGrid) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.occupied.iter_mut().zip(&other.occupied) {
            *a |= *b;
        }
    }
}

//! Safe corridor: a chain of overlapping axis-aligned free boxes along a path.

use super::grid::{Cell, OccupancyGrid};
use super::PlanError;
use crate::model::WorldPoint;

/// Inclusive cell range plus its world-space bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorridorBox {
    pub lo: Cell,
    pub hi: Cell,
    pub min: WorldPoint,
    pub max: WorldPoint,
}

impl CorridorBox {
    fn from_cells(grid: &OccupancyGrid, lo: Cell, hi: Cell) -> Self {
        let (min, max) = grid.range_bounds(lo, hi);
        Self { lo, hi, min, max }
    }

    pub fn contains(&self, p: &WorldPoint) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_cell(&self, c: Cell) -> bool {
        (0..3).all(|i| c[i] >= self.lo[i] && c[i] <= self.hi[i])
    }

    /// World-space intersection, if it has positive volume.
    pub fn overlap(&self, other: &CorridorBox) -> Option<(WorldPoint, WorldPoint)> {
        let min = self.min.sup(&other.min);
        let max = self.max.inf(&other.max);
        (0..3).all(|i| min[i] < max[i]).then_some((min, max))
    }

    pub fn project(&self, p: &WorldPoint, margin: f64) -> WorldPoint {
        WorldPoint::from_fn(|i, _| {
            let lo = self.min[i] + margin;
            let hi = self.max[i] - margin;
            if lo <= hi {
                p[i].clamp(lo, hi)
            } else {
                0.5 * (self.min[i] + self.max[i])
            }
        })
    }

    pub fn distance(&self, p: &WorldPoint) -> f64 {
        (self.project(p, 0.0) - p).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corridor {
    pub boxes: Vec<CorridorBox>,
}

impl Corridor {
    pub fn contains(&self, p: &WorldPoint) -> bool {
        self.boxes.iter().any(|b| b.contains(p))
    }

    /// Closest point of the corridor to `p` and the index of its box.
    pub fn nearest(&self, p: &WorldPoint) -> Option<(usize, WorldPoint)> {
        self.boxes
            .iter()
            .enumerate()
            .map(|(i, b)| (i, b.project(p, 0.0)))
            .min_by(|a, b| (a.1 - p).norm().total_cmp(&(b.1 - p).norm()))
    }
}

/// Dense face-connected cell sequence along a polyline.
pub fn path_cells(path: &[WorldPoint], grid: &OccupancyGrid) -> Vec<Cell> {
    let mut out: Vec<Cell> = Vec::new();
    match path {
        [] => {}
        [p] => out.push(grid.cell_of(p)),
        _ => {
            for w in path.windows(2) {
                for c in grid.segment_cells(&w[0], &w[1]) {
                    if out.last() != Some(&c) {
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}

fn grown(lo: Cell, hi: Cell, c: Cell) -> (Cell, Cell) {
    (
        [0, 1, 2].map(|i| lo[i].min(c[i])),
        [0, 1, 2].map(|i| hi[i].max(c[i])),
    )
}

/// Checks only the cells the grown box adds, slab by slab.
fn growth_free(grid: &OccupancyGrid, lo: Cell, hi: Cell, nlo: Cell, nhi: Cell) -> bool {
    let (mut clo, mut chi) = (lo, hi);
    for axis in 0..3 {
        if nlo[axis] < clo[axis] {
            let mut slab_lo = clo;
            let mut slab_hi = chi;
            slab_lo[axis] = nlo[axis];
            slab_hi[axis] = clo[axis] - 1;
            if !grid.range_free(slab_lo, slab_hi) {
                return false;
            }
            clo[axis] = nlo[axis];
        }
        if nhi[axis] > chi[axis] {
            let mut slab_lo = clo;
            let mut slab_hi = chi;
            slab_lo[axis] = chi[axis] + 1;
            slab_hi[axis] = nhi[axis];
            if !grid.range_free(slab_lo, slab_hi) {
                return false;
            }
            chi[axis] = nhi[axis];
        }
    }
    true
}

/// Pushes each face outward one layer at a time, up to `margin` layers per face.
fn inflate(grid: &OccupancyGrid, mut lo: Cell, mut hi: Cell, margin: i64) -> (Cell, Cell) {
    let mut budget = [[margin; 2]; 3];
    loop {
        let mut progressed = false;
        for axis in 0..3 {
            for side in 0..2 {
                if budget[axis][side] == 0 {
                    continue;
                }
                let (mut slab_lo, mut slab_hi) = (lo, hi);
                if side == 0 {
                    slab_lo[axis] = lo[axis] - 1;
                    slab_hi[axis] = lo[axis] - 1;
                } else {
                    slab_lo[axis] = hi[axis] + 1;
                    slab_hi[axis] = hi[axis] + 1;
                }
                if grid.range_free(slab_lo, slab_hi) {
                    if side == 0 {
                        lo[axis] -= 1;
                    } else {
                        hi[axis] += 1;
                    }
                    budget[axis][side] -= 1;
                    progressed = true;
                } else {
                    budget[axis][side] = 0;
                }
            }
        }
        if !progressed {
            return (lo, hi);
        }
    }
}

/// Greedy box chain: each box swallows path cells while it stays free, is then
/// inflated by up to `margin_cells` layers, and the next box starts at the last
/// swallowed cell so consecutive boxes share it.
pub fn build_corridor(path: &[WorldPoint], grid: &OccupancyGrid, margin_cells: i64) -> Result<Corridor, PlanError> {
    let cells = path_cells(path, grid);
    if cells.is_empty() {
        return Err(PlanError::EmptyPath);
    }
    if cells.iter().any(|&c| grid.is_occupied(c)) {
        return Err(PlanError::PathBlocked);
    }
    let mut boxes = Vec::new();
    let mut i = 0;
    loop {
        let (mut lo, mut hi) = (cells[i], cells[i]);
        let mut j = i + 1;
        while j < cells.len() {
            let (nlo, nhi) = grown(lo, hi, cells[j]);
            if !growth_free(grid, lo, hi, nlo, nhi) {
                break;
            }
            lo = nlo;
            hi = nhi;
            j += 1;
        }
        let (lo, hi) = inflate(grid, lo, hi, margin_cells);
        boxes.push(CorridorBox::from_cells(grid, lo, hi));
        if j >= cells.len() {
            break;
        }
        i = j - 1;
    }
    Ok(Corridor { boxes })
}

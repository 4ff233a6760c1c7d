//! Grid-graph search: 26-connected A* with line-of-sight shortcutting.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use super::grid::{Cell, OccupancyGrid};
use super::PlanError;
use crate::formation::ReferenceTrajectory;
use crate::model::WorldPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    /// Hard cap on node expansions before giving up.
    pub max_expansions: usize,
    /// Goal snapping radius, in cells.
    pub goal_search_cells: i64,
    /// Replace the staircase by line-of-sight shortcuts.
    pub shortcut: bool,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            max_expansions: 400_000,
            goal_search_cells: 20,
            shortcut: true,
        }
    }
}

#[derive(Copy, Clone, PartialEq)]
struct Open {
    f: f64,
    g: f64,
    cell: Cell,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on f, ties prefer deeper nodes, then cell order for determinism
        other
            .f
            .total_cmp(&self.f)
            .then(self.g.total_cmp(&other.g))
            .then(other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist(a: Cell, b: Cell) -> f64 {
    let d = [0, 1, 2].map(|i| (a[i] - b[i]) as f64);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// A move is allowed only when every cell in its bounding box is free,
/// so diagonal steps never clip an occupied corner.
fn move_free(grid: &OccupancyGrid, from: Cell, to: Cell) -> bool {
    let lo = [0, 1, 2].map(|i| from[i].min(to[i]));
    let hi = [0, 1, 2].map(|i| from[i].max(to[i]));
    grid.range_free(lo, hi)
}

/// Free cell nearest to `target`, searching shells of growing radius.
pub fn nearest_free_cell(grid: &OccupancyGrid, target: Cell, max_radius: i64) -> Option<Cell> {
    let target = grid.clamp_cell(target);
    if grid.is_free(target) {
        return Some(target);
    }
    for r in 1..=max_radius {
        let mut best: Option<(i64, Cell)> = None;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    let c = [target[0] + dx, target[1] + dy, target[2] + dz];
                    if grid.is_free(c) {
                        let d2 = dx * dx + dy * dy + dz * dz;
                        if best.is_none_or(|(b, _)| d2 < b) {
                            best = Some((d2, c));
                        }
                    }
                }
            }
        }
        if let Some((d2, c)) = best {
            // a cell in a later shell can still be closer than the shell's best
            let reach = (d2 as f64).sqrt().ceil() as i64;
            let mut best = (d2, c);
            for rr in r + 1..=reach.min(max_radius) {
                for dz in -rr..=rr {
                    for dy in -rr..=rr {
                        for dx in -rr..=rr {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != rr {
                                continue;
                            }
                            let c = [target[0] + dx, target[1] + dy, target[2] + dz];
                            let d2 = dx * dx + dy * dy + dz * dz;
                            if d2 < best.0 && grid.is_free(c) {
                                best = (d2, c);
                            }
                        }
                    }
                }
            }
            return Some(best.1);
        }
    }
    None
}

/// Shortest 26-connected cell path between two free cells.
pub fn astar(grid: &OccupancyGrid, start: Cell, goal: Cell, max_expansions: usize) -> Result<Vec<Cell>, PlanError> {
    if grid.is_occupied(start) {
        return Err(PlanError::StartOccupied);
    }
    if grid.is_occupied(goal) {
        return Err(PlanError::NoPath);
    }
    let mut open = BinaryHeap::new();
    let mut g_cost: HashMap<Cell, f64> = HashMap::new();
    let mut parent: HashMap<Cell, Cell> = HashMap::new();
    g_cost.insert(start, 0.0);
    open.push(Open {
        f: dist(start, goal),
        g: 0.0,
        cell: start,
    });
    let mut expansions = 0;
    while let Some(Open { g, cell, .. }) = open.pop() {
        if g > g_cost.get(&cell).copied().unwrap_or(f64::INFINITY) {
            continue;
        }
        if cell == goal {
            let mut path = vec![cell];
            let mut c = cell;
            while let Some(&p) = parent.get(&c) {
                path.push(p);
                c = p;
            }
            path.reverse();
            return Ok(path);
        }
        expansions += 1;
        if expansions > max_expansions {
            return Err(PlanError::SearchExhausted);
        }
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let next = [cell[0] + dx, cell[1] + dy, cell[2] + dz];
                    if !move_free(grid, cell, next) {
                        continue;
                    }
                    let ng = g + ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                    if ng < g_cost.get(&next).copied().unwrap_or(f64::INFINITY) {
                        g_cost.insert(next, ng);
                        parent.insert(next, cell);
                        open.push(Open {
                            f: ng + dist(next, goal),
                            g: ng,
                            cell: next,
                        });
                    }
                }
            }
        }
    }
    Err(PlanError::NoPath)
}

/// Greedy string pulling: keep the farthest vertex still visible through free cells.
pub fn shortcut(grid: &OccupancyGrid, cells: &[Cell]) -> Vec<Cell> {
    if cells.len() <= 2 {
        return cells.to_vec();
    }
    let mut out = vec![cells[0]];
    let mut anchor = 0;
    while anchor < cells.len() - 1 {
        let a = grid.center(cells[anchor]);
        let mut next = anchor + 1;
        for j in (anchor + 2..cells.len()).rev() {
            if grid.segment_free(&a, &grid.center(cells[j])) {
                next = j;
                break;
            }
        }
        out.push(cells[next]);
        anchor = next;
    }
    out
}

/// Collision-free path from `start` to the free cell nearest `goal`.
/// Vertices are cell centers; a single vertex means start and goal share a cell.
pub fn plan_path_to(
    start: &WorldPoint,
    goal: &WorldPoint,
    grid: &OccupancyGrid,
    cfg: &PathConfig,
) -> Result<Vec<WorldPoint>, PlanError> {
    let s = grid.cell_of(start);
    if grid.is_occupied(s) {
        return Err(PlanError::StartOccupied);
    }
    let g = nearest_free_cell(grid, grid.cell_of(goal), cfg.goal_search_cells).ok_or(PlanError::NoPath)?;
    let mut cells = astar(grid, s, g, cfg.max_expansions)?;
    if cfg.shortcut {
        cells = shortcut(grid, &cells);
    }
    Ok(cells.into_iter().map(|c| grid.center(c)).collect())
}

/// Path toward the endpoint of a reference trajectory.
pub fn plan_path(
    start: &WorldPoint,
    reference: &ReferenceTrajectory,
    grid: &OccupancyGrid,
    cfg: &PathConfig,
) -> Result<Vec<WorldPoint>, PlanError> {
    let goal = reference.last().ok_or(PlanError::EmptyReference)?.1.position;
    plan_path_to(start, &goal, grid, cfg)
}

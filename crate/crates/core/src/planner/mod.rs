//! Receding-horizon trajectory planning: grid search, safe corridor, tracking optimizer.

pub mod corridor;
pub mod grid;
pub mod optimize;
pub mod path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::HumanEstimate;
use crate::formation::{
    horizon_references, predict_human_trajectory, FormationError, HeadingSource, HorizonConfig, ReferenceTrajectory,
};
use crate::gesture::FormationSet;
use crate::model::WorldPoint;

pub use corridor::{build_corridor, Corridor, CorridorBox};
pub use grid::{nearest_obstacle_distance, Cell, Obstacle, OccupancyGrid};
pub use optimize::{
    optimize_trajectory, DynamicLimits, Optimized, PlanSample, PlannedTrajectory, TrackerConfig, TrackerDiagnostic,
};
pub use path::{plan_path, plan_path_to, PathConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanError {
    #[error("grid needs a positive cell size and non-empty dimensions")]
    InvalidGrid,
    #[error("dynamic limits must be positive")]
    InvalidLimits,
    #[error("start cell is occupied")]
    StartOccupied,
    #[error("no path to the goal")]
    NoPath,
    #[error("path search exceeded its expansion budget")]
    SearchExhausted,
    #[error("path is empty")]
    EmptyPath,
    #[error("path crosses an occupied cell")]
    PathBlocked,
    #[error("reference trajectory is empty")]
    EmptyReference,
    #[error("plan has no samples")]
    EmptyPlan,
    #[error("plan samples are not uniformly spaced")]
    NonUniformPlan,
    #[error("unknown uav index {0}")]
    UnknownUav(usize),
    #[error("reference generation failed: {0}")]
    Reference(String),
}

impl From<FormationError> for PlanError {
    fn from(e: FormationError) -> Self {
        PlanError::Reference(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub horizon: HorizonConfig,
    pub tracker: TrackerConfig,
    pub path: PathConfig,
    /// Teammate inflation radius, meters.
    pub gamma_dis: f64,
    /// Keep-out radius around the predicted worker, meters; 0 disables it.
    pub human_clearance: f64,
    /// Corridor boxes grow this far past the path, meters.
    pub corridor_margin: f64,
    pub limits: DynamicLimits,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        let horizon = HorizonConfig::default();
        Self {
            horizon,
            tracker: TrackerConfig {
                duration: horizon.horizon,
                ..TrackerConfig::default()
            },
            path: PathConfig::default(),
            gamma_dis: 2.5,
            human_clearance: 2.0,
            corridor_margin: 4.0,
            limits: DynamicLimits::default(),
        }
    }
}

/// Marks every cell whose center is within `gamma_dis` of a teammate sample
/// timestamped inside `window`.
pub fn inflate_teammates(
    grid: &OccupancyGrid,
    teammates: &[&PlannedTrajectory],
    gamma_dis: f64,
    window: (f64, f64),
) -> OccupancyGrid {
    let mut out = grid.clone();
    for plan in teammates {
        for s in plan.samples() {
            if s.t >= window.0 - 1e-9 && s.t <= window.1 + 1e-9 {
                out.mark_sphere(&s.state.position, gamma_dis);
            }
        }
    }
    out
}

/// Everything one UAV's planner reads. Plans and states are indexed like `params`.
#[derive(Debug, Clone, Copy)]
pub struct WorldSnapshot<'a> {
    pub t: f64,
    pub estimate: &'a HumanEstimate,
    pub heading: HeadingSource,
    pub params: &'a FormationSet,
    pub grid: &'a OccupancyGrid,
    /// Latest published plan per UAV.
    pub plans: &'a [Option<PlannedTrajectory>],
    /// Current kinematic state per UAV.
    pub states: &'a [PlanSample],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplanOutcome {
    pub plan: PlannedTrajectory,
    pub reference: Option<ReferenceTrajectory>,
    /// Set when the plan is a braking fallback.
    pub failure: Option<PlanError>,
    pub tracker: Option<TrackerDiagnostic>,
}

fn leader_plan_as_reference(plan: &PlannedTrajectory, times: &[f64]) -> Option<ReferenceTrajectory> {
    ReferenceTrajectory::new(times.iter().map(|&t| (t, plan.sample_at(t).state)).collect()).ok()
}

/// Frees the cells around `p` that are free in `base`, plus the cell holding `p`.
fn carve_start(grid: &mut OccupancyGrid, base: &OccupancyGrid, p: &WorldPoint) {
    let c = grid.cell_of(p);
    grid.set(c, false);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                if base.in_bounds(n) && base.is_free(n) {
                    grid.set(n, false);
                }
            }
        }
    }
}

/// One receding-horizon planning cycle for `uav`:
/// references → teammate inflation → path → corridor → tracking.
/// Any failure yields a braking plan with the error recorded.
pub fn replan_tick(uav: usize, snap: &WorldSnapshot, cfg: &PlannerConfig) -> Result<ReplanOutcome, PlanError> {
    let start = *snap.states.get(uav).ok_or(PlanError::UnknownUav(uav))?;
    if uav >= snap.params.0.len() {
        return Err(PlanError::UnknownUav(uav));
    }
    let pred = predict_human_trajectory(snap.estimate, &cfg.horizon, snap.heading);
    let look_at: Vec<(f64, WorldPoint)> = std::iter::once((snap.estimate.last_update_time, snap.estimate.position()))
        .chain(pred.iter().map(|(t, h)| (*t, h.position)))
        .collect();
    let fallback = |failure: PlanError, reference: Option<ReferenceTrajectory>| ReplanOutcome {
        plan: PlannedTrajectory::braking(&start, &cfg.limits, &cfg.tracker, &look_at),
        reference,
        failure: Some(failure),
        tracker: None,
    };

    let times: Vec<f64> = pred.iter().map(|(t, _)| *t).collect();
    let leader_plan = if uav == 0 {
        None
    } else {
        snap.plans.first().and_then(|p| p.as_ref()).and_then(|p| leader_plan_as_reference(p, &times))
    };
    let refs = match horizon_references(&pred, leader_plan.as_ref(), snap.params) {
        Ok(r) => r,
        Err(e) => return Ok(fallback(e.into(), None)),
    };
    let reference = refs[uav].clone();

    let teammates: Vec<&PlannedTrajectory> = snap
        .plans
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != uav)
        .filter_map(|(_, p)| p.as_ref())
        .collect();
    let window = (snap.t, snap.t + cfg.tracker.duration);
    let mut grid = inflate_teammates(snap.grid, &teammates, cfg.gamma_dis, window);
    if cfg.human_clearance > 0.0 {
        for (_, p) in &look_at {
            grid.mark_sphere(p, cfg.human_clearance);
        }
    }
    let p0 = start.state.position;
    if grid.is_occupied(grid.cell_of(&p0)) {
        carve_start(&mut grid, snap.grid, &p0);
    }

    let path = match plan_path(&p0, &reference, &grid, &cfg.path) {
        Ok(p) => p,
        Err(e) => return Ok(fallback(e, Some(reference))),
    };
    let margin = (cfg.corridor_margin / grid.cell_size()).round() as i64;
    let corridor = match build_corridor(&path, &grid, margin) {
        Ok(c) => c,
        Err(e) => return Ok(fallback(e, Some(reference))),
    };
    match optimize_trajectory(&corridor, &reference, &cfg.limits, &start, &cfg.tracker, &look_at) {
        Ok(out) => Ok(ReplanOutcome {
            plan: out.plan,
            reference: Some(reference),
            failure: None,
            tracker: out.diagnostic,
        }),
        Err(e) => Ok(fallback(e, Some(reference))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UavState;
    use nalgebra::Vector3;

    fn grid() -> OccupancyGrid {
        OccupancyGrid::new(Vector3::new(-30.0, -30.0, 0.0), 0.5, [120, 120, 40]).unwrap()
    }

    fn still_plan(p: WorldPoint, t0: f64) -> PlannedTrajectory {
        PlannedTrajectory::new(
            (0..=40)
                .map(|k| PlanSample {
                    t: t0 + 0.1 * k as f64,
                    state: UavState::new(p, 0.0, 0.0),
                    velocity: Vector3::zeros(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn no_teammates_leaves_grid_unchanged() {
        let g = grid();
        assert_eq!(inflate_teammates(&g, &[], 2.5, (0.0, 4.0)), g);
    }

    #[test]
    fn teammate_ball_matches_brute_force() {
        let g = grid();
        let plan = still_plan(WorldPoint::zeros(), 0.0);
        let out = inflate_teammates(&g, &[&plan], 2.5, (0.0, 4.0));
        let [nx, ny, nz] = g.dims();
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    let c = [x, y, z];
                    assert_eq!(out.is_occupied(c), g.center(c).norm() <= 2.5, "{c:?}");
                }
            }
        }
    }

    #[test]
    fn teammate_outside_grid_or_window_is_ignored() {
        let g = grid();
        let far = still_plan(Vector3::new(100.0, 0.0, 5.0), 0.0);
        assert_eq!(inflate_teammates(&g, &[&far], 2.5, (0.0, 4.0)), g);
        let late = still_plan(WorldPoint::zeros(), 10.0);
        assert_eq!(inflate_teammates(&g, &[&late], 2.5, (0.0, 4.0)), g);
    }
}

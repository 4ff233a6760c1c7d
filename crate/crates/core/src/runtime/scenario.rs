//! Scenario files: JSON with degrees at the boundary, validated into [`Scenario`].

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::EstimatorConfig;
use crate::formation::{HeadingSource, HorizonConfig};
use crate::gesture::{
    DetectorEmulatorModel, FormationSet, GestureFilterConfig, GestureMap, ParamDelta, ParamTarget,
};
use crate::model::{azimuth, elevation, FormationParams, ParamLimits, UavState, WorldPoint};
use crate::planner::{DynamicLimits, Obstacle, OccupancyGrid, PathConfig, PlannerConfig, TrackerConfig};
use crate::world::{GestureInterval, HeadingPolicy, HumanMotionScript, Interpolation, WorldConfig, Waypoint};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid scenario at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid scenario: {0}")]
    Invariant(String),
}

fn invariant(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invariant(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Leader,
    Follower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UavFile {
    pub name: String,
    pub role: Role,
    pub beta_deg: f64,
    pub gamma_deg: f64,
    pub d: f64,
    pub start: [f64; 3],
    /// Defaults to facing the worker's first position.
    #[serde(default)]
    pub heading_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointFile {
    pub t: f64,
    pub position: [f64; 3],
    #[serde(default)]
    pub heading_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanFile {
    #[serde(default = "default_height")]
    pub height: f64,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default)]
    pub heading_policy: HeadingPolicy,
    pub waypoints: Vec<WaypointFile>,
    #[serde(default)]
    pub gestures: Vec<GestureInterval>,
}

fn default_height() -> f64 {
    1.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldFile {
    pub origin: [f64; 3],
    pub size: [f64; 3],
    pub cell_size: f64,
    /// Extra keep-out distance around obstacles when planning, meters.
    pub obstacle_clearance: f64,
    pub obstacles: Vec<Obstacle>,
}

impl Default for WorldFile {
    fn default() -> Self {
        Self {
            origin: [-30.0, -30.0, 0.0],
            size: [60.0, 60.0, 20.0],
            cell_size: 0.5,
            obstacle_clearance: 0.75,
            obstacles: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsFile {
    pub v_max: f64,
    pub a_max: f64,
    pub heading_rate_deg: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub gamma_min_deg: f64,
    pub gamma_max_deg: f64,
}

impl Default for LimitsFile {
    fn default() -> Self {
        let dl = DynamicLimits::default();
        let pl = ParamLimits::default();
        Self {
            v_max: dl.v_max,
            a_max: dl.a_max,
            heading_rate_deg: dl.heading_rate_max.to_degrees(),
            d_min: pl.d_min,
            d_max: pl.d_max,
            gamma_min_deg: pl.gamma_min.to_degrees(),
            gamma_max_deg: pl.gamma_max.to_degrees(),
        }
    }
}

/// How planners obtain the worker heading over the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
#[derive(Default)]
pub enum HeadingFile {
    /// Heading of the first waypoint, held constant.
    #[default]
    Initial,
    Fixed { heading_deg: f64 },
    MotionDirection { min_speed: f64 },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerFile {
    pub horizon: f64,
    pub horizon_dt: f64,
    pub replan_hz: f64,
    pub gamma_dis: f64,
    pub human_clearance: f64,
    pub corridor_margin: f64,
    pub tracker_gain: f64,
    pub max_expansions: usize,
    pub heading: HeadingFile,
}

impl Default for PlannerFile {
    fn default() -> Self {
        let p = PlannerConfig::default();
        Self {
            horizon: p.horizon.horizon,
            horizon_dt: p.horizon.dt,
            replan_hz: 5.0,
            gamma_dis: p.gamma_dis,
            human_clearance: p.human_clearance,
            corridor_margin: p.corridor_margin,
            tracker_gain: p.tracker.gain,
            max_expansions: p.path.max_expansions,
            heading: HeadingFile::default(),
        }
    }
}

/// Gesture map entry; angle deltas in degrees, distance deltas in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GestureMapEntry {
    pub id: u32,
    pub target: ParamTarget,
    pub delta: f64,
}

/// Operator request in boundary units (degrees for angles, meters for distances).
/// Exactly one of `delta` and `absolute` must be given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestFile {
    pub t: f64,
    pub target: ParamTarget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absolute: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub world: WorldFile,
    pub uavs: Vec<UavFile>,
    pub human: HumanFile,
    #[serde(default)]
    pub sensing: WorldConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub gesture_filter: GestureFilterConfig,
    #[serde(default)]
    pub detector: DetectorEmulatorModel,
    #[serde(default)]
    pub gesture_map: Option<Vec<GestureMapEntry>>,
    #[serde(default)]
    pub limits: LimitsFile,
    #[serde(default)]
    pub planner: PlannerFile,
    #[serde(default)]
    pub operator_requests: Vec<RequestFile>,
}

fn default_duration() -> f64 {
    180.0
}

fn default_dt() -> f64 {
    0.1
}

/// Validated scenario in internal units (radians, seconds, meters). Index 0 is the leader.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    pub dt: f64,
    pub grid_origin: WorldPoint,
    pub grid_size: Vector3<f64>,
    pub cell_size: f64,
    pub obstacle_clearance: f64,
    pub obstacles: Vec<Obstacle>,
    pub uav_names: Vec<String>,
    pub params: FormationSet,
    pub param_limits: ParamLimits,
    pub start_states: Vec<UavState>,
    pub script: HumanMotionScript,
    pub world: WorldConfig,
    pub estimator: EstimatorConfig,
    pub gesture_filter: GestureFilterConfig,
    pub detector: DetectorEmulatorModel,
    pub gesture_map: GestureMap,
    pub planner: PlannerConfig,
    pub replan_every: u64,
    pub heading: HeadingSource,
    pub requests: Vec<RequestFile>,
}

/// Converts a boundary-unit amount for `target` to internal units.
pub fn to_internal(target: ParamTarget, value: f64) -> f64 {
    if target.is_angle() {
        value.to_radians()
    } else {
        value
    }
}

/// Inverse of [`to_internal`].
pub fn to_boundary(target: ParamTarget, value: f64) -> f64 {
    if target.is_angle() {
        value.to_degrees()
    } else {
        value
    }
}

fn finite3(what: &str, v: &[f64; 3]) -> Result<WorldPoint, ScenarioError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(Vector3::from(*v))
    } else {
        Err(invariant(format!("{what} must be finite")))
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Self::from_file(file)
    }

    pub fn from_file(f: ScenarioFile) -> Result<Self, ScenarioError> {
        if !(f.dt > 0.0) {
            return Err(invariant("dt must be positive"));
        }
        if !(f.duration > 0.0) {
            return Err(invariant("duration must be positive"));
        }
        if f.uavs.is_empty() {
            return Err(invariant("at least one uav required"));
        }
        if f.uavs.iter().filter(|u| u.role == Role::Leader).count() != 1 {
            return Err(invariant("exactly one leader required"));
        }
        let w = &f.world;
        if !(w.cell_size > 0.0) || w.size.iter().any(|s| !(*s > 0.0)) {
            return Err(invariant("world size and cell size must be positive"));
        }
        if !(w.obstacle_clearance >= 0.0) {
            return Err(invariant("obstacle clearance must be non-negative"));
        }

        let lim = &f.limits;
        let dynamic = DynamicLimits {
            v_max: lim.v_max,
            a_max: lim.a_max,
            heading_rate_max: lim.heading_rate_deg.to_radians(),
        };
        dynamic.validate().map_err(|e| invariant(e.to_string()))?;
        let param_limits = ParamLimits {
            d_min: lim.d_min,
            d_max: lim.d_max,
            gamma_min: lim.gamma_min_deg.to_radians(),
            gamma_max: lim.gamma_max_deg.to_radians(),
        };
        if !(param_limits.d_min > 0.0 && param_limits.d_min <= param_limits.d_max)
            || !(param_limits.gamma_min <= param_limits.gamma_max)
        {
            return Err(invariant("parameter limits must be ordered with d_min > 0"));
        }

        let waypoints = f
            .human
            .waypoints
            .iter()
            .map(|w| {
                Ok(Waypoint {
                    t: w.t,
                    position: finite3("waypoint position", &w.position)?,
                    heading: crate::model::wrap(w.heading_deg.to_radians()),
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        let script = HumanMotionScript::new(
            waypoints,
            f.human.interpolation,
            f.human.heading_policy,
            f.human.gestures.clone(),
            f.human.height,
        )
        .map_err(|e| invariant(e.to_string()))?;
        let first_human = script.waypoints()[0];

        // leader first, followers keep file order
        let mut ordered: Vec<&UavFile> = f.uavs.iter().filter(|u| u.role == Role::Leader).collect();
        ordered.extend(f.uavs.iter().filter(|u| u.role == Role::Follower));
        let mut params = Vec::new();
        let mut starts = Vec::new();
        for u in &ordered {
            if !(u.d > 0.0) {
                return Err(invariant(format!("uav `{}`: d must be positive", u.name)));
            }
            let p = FormationParams::from_degrees(u.beta_deg, u.gamma_deg, u.d);
            if param_limits.clamp(p) != FormationParams::new(crate::model::wrap(p.beta), p.gamma, p.distance) {
                return Err(invariant(format!("uav `{}`: parameters outside limits", u.name)));
            }
            params.push(p);
            let pos = finite3("uav start", &u.start)?;
            let to_human = first_human.position - pos;
            let heading = u.heading_deg.map_or_else(|| azimuth(&to_human), f64::to_radians);
            starts.push(UavState::new(pos, heading, elevation(&to_human)));
        }

        f.sensing.sensor.validate().map_err(|e| invariant(e.to_string()))?;
        f.gesture_filter.validate().map_err(invariant)?;
        f.detector.validate().map_err(|e| invariant(e.to_string()))?;
        let gesture_map = match &f.gesture_map {
            None => GestureMap::default(),
            Some(entries) => GestureMap(
                entries
                    .iter()
                    .map(|e| {
                        (
                            e.id,
                            ParamDelta {
                                target: e.target,
                                delta: to_internal(e.target, e.delta),
                            },
                        )
                    })
                    .collect(),
            ),
        };

        let pf = &f.planner;
        if !(pf.replan_hz > 0.0) || !(pf.horizon > 0.0) || !(pf.horizon_dt > 0.0) {
            return Err(invariant("planner rates and horizon must be positive"));
        }
        if !(pf.gamma_dis > 0.0) {
            return Err(invariant("gamma_dis must be positive"));
        }
        let replan_every = ((1.0 / pf.replan_hz) / f.dt).round().max(1.0) as u64;
        let planner = PlannerConfig {
            horizon: HorizonConfig {
                horizon: pf.horizon,
                dt: pf.horizon_dt,
            },
            tracker: TrackerConfig {
                dt: f.dt,
                duration: pf.horizon,
                gain: pf.tracker_gain,
                ..TrackerConfig::default()
            },
            path: PathConfig {
                max_expansions: pf.max_expansions,
                ..PathConfig::default()
            },
            gamma_dis: pf.gamma_dis,
            human_clearance: pf.human_clearance,
            corridor_margin: pf.corridor_margin,
            limits: dynamic,
        };
        let heading = match pf.heading {
            HeadingFile::Initial => HeadingSource::Fixed(first_human.heading),
            HeadingFile::Fixed { heading_deg } => HeadingSource::Fixed(heading_deg.to_radians()),
            HeadingFile::MotionDirection { min_speed } => HeadingSource::MotionDirection {
                fallback: first_human.heading,
                min_speed,
            },
        };

        for (i, r) in f.operator_requests.iter().enumerate() {
            if r.delta.is_some() == r.absolute.is_some() {
                return Err(invariant(format!(
                    "operator request {i}: exactly one of delta and absolute required"
                )));
            }
            if !(r.t >= 0.0) || r.t > f.duration {
                return Err(invariant(format!("operator request {i}: time outside run")));
            }
            if !r.target.is_valid_for(ordered.len()) {
                return Err(invariant(format!("operator request {i}: unknown uav index")));
            }
        }

        Ok(Scenario {
            name: f.name.clone(),
            seed: f.seed,
            duration: f.duration,
            dt: f.dt,
            grid_origin: Vector3::from(w.origin),
            grid_size: Vector3::from(w.size),
            cell_size: w.cell_size,
            obstacle_clearance: w.obstacle_clearance,
            obstacles: w.obstacles.clone(),
            uav_names: ordered.iter().map(|u| u.name.clone()).collect(),
            params: FormationSet(params),
            param_limits,
            start_states: starts,
            script,
            world: f.sensing.clone(),
            estimator: f.estimator,
            gesture_filter: f.gesture_filter,
            detector: f.detector.clone(),
            gesture_map,
            planner,
            replan_every,
            heading,
            requests: f.operator_requests.clone(),
        })
    }

    pub fn ticks(&self) -> u64 {
        (self.duration / self.dt).round() as u64
    }

    /// Grid used by the planners: obstacles grown by the clearance.
    pub fn planning_grid(&self) -> OccupancyGrid {
        self.empty_grid().with_obstacles(&self.obstacles, self.obstacle_clearance)
    }

    /// Grid used for line of sight: obstacles only.
    pub fn visibility_grid(&self) -> OccupancyGrid {
        self.empty_grid().with_obstacles(&self.obstacles, 0.0)
    }

    fn empty_grid(&self) -> OccupancyGrid {
        OccupancyGrid::from_extent(self.grid_origin, self.grid_size, self.cell_size)
            .expect("validated grid geometry")
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    Scenario::from_json(&std::fs::read_to_string(path)?)
}

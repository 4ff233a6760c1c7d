//! Deterministic world: scripted worker, UAV plant, synthetic camera/stereo/UWB sensors.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::BoundingBox;
use crate::model::{wrap, CameraIntrinsics, CameraPose, HumanState, UavState, WorldPoint};
use crate::planner::{DynamicLimits, OccupancyGrid, PlannedTrajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("script needs at least one waypoint")]
    EmptyScript,
    #[error("waypoint times must be strictly increasing (index {0})")]
    NonIncreasingWaypoints(usize),
    #[error("gesture interval {0} ends before it starts")]
    InvalidGestureInterval(usize),
    #[error("{what} must be in [0, 1], got {value}")]
    Probability { what: &'static str, value: f64 },
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("plan count {plans} does not match uav count {uavs}")]
    PlanCount { plans: usize, uavs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
    /// Piecewise constant: stay at a waypoint until the next one's time.
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadingPolicy {
    #[default]
    Scripted,
    /// Direction of travel; scripted heading while standing still.
    MotionDirection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub t: f64,
    pub position: WorldPoint,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    /// Half-open `[start, end)`.
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GestureInterval {
    pub start: f64,
    pub end: f64,
    pub id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanMotionScript {
    waypoints: Vec<Waypoint>,
    pub interpolation: Interpolation,
    pub heading_policy: HeadingPolicy,
    pub gestures: Vec<GestureInterval>,
    /// Body height in meters; the position is the body center.
    pub height: f64,
}

impl HumanMotionScript {
    pub fn new(
        waypoints: Vec<Waypoint>,
        interpolation: Interpolation,
        heading_policy: HeadingPolicy,
        gestures: Vec<GestureInterval>,
        height: f64,
    ) -> Result<Self, WorldError> {
        if waypoints.is_empty() {
            return Err(WorldError::EmptyScript);
        }
        if let Some(i) = waypoints.windows(2).position(|w| !(w[1].t > w[0].t)) {
            return Err(WorldError::NonIncreasingWaypoints(i + 1));
        }
        if let Some(i) = gestures.iter().position(|g| !(g.end >= g.start)) {
            return Err(WorldError::InvalidGestureInterval(i));
        }
        if !(height > 0.0) {
            return Err(WorldError::NonPositive {
                what: "human height",
                value: height,
            });
        }
        Ok(Self {
            waypoints,
            interpolation,
            heading_policy,
            gestures,
            height,
        })
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    /// Gesture being performed at `t`, 0 when none.
    pub fn active_gesture(&self, t: f64) -> u32 {
        self.gestures
            .iter()
            .find(|g| t >= g.start && t < g.end)
            .map_or(0, |g| g.id)
    }
}

/// Worker pose at `t`, clamped to the script span.
pub fn step_human(script: &HumanMotionScript, t: f64) -> HumanState {
    let w = &script.waypoints;
    let first = &w[0];
    let last = &w[w.len() - 1];
    if t <= first.t || w.len() == 1 {
        return HumanState::stationary(first.position, first.heading);
    }
    if t >= last.t {
        return HumanState::stationary(last.position, last.heading);
    }
    let i = w.partition_point(|p| p.t <= t) - 1;
    let (a, b) = (&w[i], &w[i + 1]);
    let (position, velocity) = match script.interpolation {
        Interpolation::Linear => {
            let u = (t - a.t) / (b.t - a.t);
            let v = (b.position - a.position) / (b.t - a.t);
            (a.position + (b.position - a.position) * u, v)
        }
        Interpolation::Hold => (a.position, Vector3::zeros()),
    };
    let heading = match script.heading_policy {
        HeadingPolicy::MotionDirection if velocity.x.hypot(velocity.y) > 1e-9 => velocity.y.atan2(velocity.x),
        _ => a.heading,
    };
    HumanState::new(position, velocity, heading)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorModel {
    /// Gaussian noise on each bbox edge, pixels.
    pub bbox_pixel_sigma: f64,
    pub stereo_probability: f64,
    pub stereo_range: f64,
    pub stereo_samples: usize,
    pub stereo_sigma: f64,
    /// Chance that a single depth sample hits the background.
    pub stereo_outlier_probability: f64,
    pub uwb_probability: f64,
    pub uwb_range: f64,
    pub uwb_sigma: f64,
    /// Full cone angle of the camera field of view; degrees on the wire.
    #[serde(rename = "fov_deg", with = "crate::model::degrees")]
    pub fov: f64,
    /// bbox width over height.
    pub bbox_aspect: f64,
    /// Windows with no camera detections at all.
    pub blackouts: Vec<TimeWindow>,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            bbox_pixel_sigma: 1.0,
            stereo_probability: 0.8,
            stereo_range: 12.0,
            stereo_samples: 25,
            stereo_sigma: 0.2,
            stereo_outlier_probability: 0.1,
            uwb_probability: 0.7,
            uwb_range: 40.0,
            uwb_sigma: 0.1,
            fov: 90f64.to_radians(),
            bbox_aspect: 0.4,
            blackouts: Vec::new(),
        }
    }
}

impl SensorModel {
    pub fn noiseless() -> Self {
        Self {
            bbox_pixel_sigma: 0.0,
            stereo_probability: 1.0,
            stereo_sigma: 0.0,
            stereo_outlier_probability: 0.0,
            uwb_probability: 1.0,
            uwb_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        for (what, value) in [
            ("stereo probability", self.stereo_probability),
            ("stereo outlier probability", self.stereo_outlier_probability),
            ("uwb probability", self.uwb_probability),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(WorldError::Probability { what, value });
            }
        }
        for (what, value) in [
            ("stereo range", self.stereo_range),
            ("uwb range", self.uwb_range),
            ("fov", self.fov),
            ("bbox aspect", self.bbox_aspect),
        ] {
            if !(value > 0.0) {
                return Err(WorldError::NonPositive { what, value });
            }
        }
        for (what, value) in [
            ("bbox pixel sigma", self.bbox_pixel_sigma),
            ("stereo sigma", self.stereo_sigma),
            ("uwb sigma", self.uwb_sigma),
        ] {
            if !(value >= 0.0) {
                return Err(WorldError::NonPositive { what, value });
            }
        }
        Ok(())
    }
}

/// Inside the view cone and not blocked by an occupied cell.
pub fn visibility(cam: &CameraPose, target: &WorldPoint, grid: &OccupancyGrid, fov: f64) -> bool {
    let to = target - cam.position;
    let dist = to.norm();
    if dist < 1e-9 {
        return false;
    }
    let cos = (cam.optical_axis().dot(&to) / dist).clamp(-1.0, 1.0);
    cos.acos() <= 0.5 * fov && grid.segment_clear(&cam.position, target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorReading {
    pub bbox: Option<BoundingBox>,
    pub stereo_samples: Option<Vec<f64>>,
    pub uwb: Option<f64>,
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).map_or(0.0, |n| n.sample(rng))
    } else {
        0.0
    }
}

/// Projects the worker as a camera-facing billboard of the given height, then
/// builds a box of the given aspect, perturbed and rounded to whole pixels and
/// clipped to the image.
fn project_bbox(cam: &CameraPose, human: &HumanState, height: f64, model: &SensorModel, rng: &mut ChaCha8Rng) -> Option<BoundingBox> {
    let k = &cam.intrinsics;
    let c = cam.world_to_camera(&human.position);
    let half = Vector3::new(0.0, 0.5 * height, 0.0);
    let (_, vt) = k.project(&(c - half))?;
    let (_, vb) = k.project(&(c + half))?;
    let (uc, vc) = k.project(&c)?;
    let h = vb - vt;
    let w = model.bbox_aspect * h;
    let mut edge = |x: f64| (x + gauss(rng, model.bbox_pixel_sigma)).round();
    let bbox = BoundingBox {
        u_min: edge(uc - 0.5 * w).max(0.0),
        v_min: edge(vc - 0.5 * h).max(0.0),
        u_max: edge(uc + 0.5 * w).min(k.width),
        v_max: edge(vc + 0.5 * h).min(k.height),
    };
    (bbox.width() > 0.0 && bbox.height() > 0.0 && {
        let (u, v) = bbox.center();
        k.contains(u, v)
    })
    .then_some(bbox)
}

/// One frame of synthetic perception from `cam`.
pub fn sense(
    cam: &CameraPose,
    human: &HumanState,
    height: f64,
    model: &SensorModel,
    grid: &OccupancyGrid,
    camera_up: bool,
    rng: &mut ChaCha8Rng,
) -> SensorReading {
    let range = (human.position - cam.position).norm();
    let visible = camera_up && visibility(cam, &human.position, grid, model.fov);
    let bbox = if visible { project_bbox(cam, human, height, model, rng) } else { None };
    let stereo_samples = if bbox.is_some() && range <= model.stereo_range && rng.gen::<f64>() < model.stereo_probability {
        let samples = (0..model.stereo_samples.max(1))
            .map(|_| {
                if rng.gen::<f64>() < model.stereo_outlier_probability {
                    rng.gen_range(0.5..model.stereo_range.max(1.0))
                } else {
                    range + gauss(rng, model.stereo_sigma)
                }
            })
            .collect();
        Some(samples)
    } else {
        None
    };
    let uwb = (range <= model.uwb_range && rng.gen::<f64>() < model.uwb_probability)
        .then(|| (range + gauss(rng, model.uwb_sigma)).max(0.01));
    SensorReading {
        bbox,
        stereo_samples,
        uwb,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavBody {
    pub state: UavState,
    pub velocity: Vector3<f64>,
}

impl UavBody {
    pub fn at_rest(state: UavState) -> Self {
        Self {
            state,
            velocity: Vector3::zeros(),
        }
    }
}

fn clamp_norm(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Chases the plan sample at `t + dt` with clamped acceleration and speed.
/// Without a plan the vehicle brakes toward its current position.
pub fn step_uav(body: &UavBody, plan: Option<&PlannedTrajectory>, t: f64, dt: f64, limits: &DynamicLimits) -> Result<UavBody, WorldError> {
    if !(dt > 0.0) {
        return Err(WorldError::NonPositiveDt(dt));
    }
    let p = body.state.position;
    let (target, h_des, p_des) = match plan {
        Some(plan) => {
            let s = plan.sample_at(t + dt);
            (s.state.position, s.state.heading, s.state.pitch)
        }
        None => (p, body.state.heading, body.state.pitch),
    };
    let v_des = (target - p) / dt;
    let acc = clamp_norm((v_des - body.velocity) / dt, limits.a_max);
    let v = clamp_norm(body.velocity + acc * dt, limits.v_max);
    let step = limits.heading_rate_max * dt;
    let heading = wrap(body.state.heading + wrap(h_des - body.state.heading).clamp(-step, step));
    let pitch = body.state.pitch + (p_des - body.state.pitch).clamp(-step, step);
    Ok(UavBody {
        state: UavState::new(p + v * dt, heading, pitch),
        velocity: v,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct WorldConfig {
    pub sensor: SensorModel,
    pub intrinsics: CameraIntrinsics,
    /// Followers also run the perception pipeline.
    pub follower_sensing: bool,
}


/// What one UAV perceived this tick.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorBundle {
    pub uav: usize,
    pub camera: CameraPose,
    pub reading: SensorReading,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub t: f64,
    pub tick: u64,
    pub human: HumanState,
    pub uavs: Vec<UavBody>,
    /// Obstacles rasterized without clearance, for line of sight.
    pub grid: OccupancyGrid,
    rng: ChaCha8Rng,
}

impl WorldState {
    pub fn new(script: &HumanMotionScript, uavs: Vec<UavBody>, grid: OccupancyGrid, seed: u64) -> Self {
        Self {
            t: 0.0,
            tick: 0,
            human: step_human(script, 0.0),
            uavs,
            grid,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Advances time by `dt`: worker, then UAVs along their plans, then sensing.
/// Time is kept as `tick · dt` so it never drifts.
pub fn world_tick(
    world: &mut WorldState,
    plans: &[Option<PlannedTrajectory>],
    script: &HumanMotionScript,
    cfg: &WorldConfig,
    limits: &DynamicLimits,
    dt: f64,
) -> Result<Vec<SensorBundle>, WorldError> {
    if !(dt > 0.0) {
        return Err(WorldError::NonPositiveDt(dt));
    }
    if plans.len() != world.uavs.len() {
        return Err(WorldError::PlanCount {
            plans: plans.len(),
            uavs: world.uavs.len(),
        });
    }
    let t0 = world.t;
    let tick = world.tick + 1;
    let t = tick as f64 * dt;
    for (body, plan) in world.uavs.iter_mut().zip(plans) {
        *body = step_uav(body, plan.as_ref(), t0, t - t0, limits)?;
    }
    world.human = step_human(script, t);
    world.t = t;
    world.tick = tick;

    let camera_up = !cfg.sensor.blackouts.iter().any(|w| w.contains(t));
    let mut out = Vec::new();
    for (i, body) in world.uavs.iter().enumerate() {
        if i > 0 && !cfg.follower_sensing {
            continue;
        }
        let camera = CameraPose::for_uav(&body.state, cfg.intrinsics);
        let reading = sense(&camera, &world.human, script.height, &cfg.sensor, &world.grid, camera_up, &mut world.rng);
        out.push(SensorBundle { uav: i, camera, reading });
    }
    Ok(out)
}

//! Corridor-constrained reference tracking with a clamped double integrator.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::corridor::{Corridor, CorridorBox};
use super::PlanError;
use crate::formation::ReferenceTrajectory;
use crate::model::{azimuth, elevation, wrap, UavState, WorldPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicLimits {
    /// Speed bound, m/s.
    pub v_max: f64,
    /// Acceleration bound, m/s².
    pub a_max: f64,
    /// Heading and pitch slew bound, rad/s.
    pub heading_rate_max: f64,
}

impl Default for DynamicLimits {
    fn default() -> Self {
        Self {
            v_max: 5.0,
            a_max: 3.5,
            heading_rate_max: 90f64.to_radians(),
        }
    }
}

impl DynamicLimits {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.v_max > 0.0 && self.a_max > 0.0 && self.heading_rate_max > 0.0 {
            Ok(())
        } else {
            Err(PlanError::InvalidLimits)
        }
    }

    /// Per-axis bounds whose combination never exceeds the norm bounds.
    fn per_axis(&self) -> (f64, f64) {
        let s = 3f64.sqrt();
        (self.v_max / s, self.a_max / s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanSample {
    pub t: f64,
    pub state: UavState,
    pub velocity: Vector3<f64>,
}

/// Uniformly spaced plan samples; velocity `k` is the displacement from `k-1` over `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedTrajectory {
    samples: Vec<PlanSample>,
}

impl PlannedTrajectory {
    pub fn new(samples: Vec<PlanSample>) -> Result<Self, PlanError> {
        if samples.is_empty() {
            return Err(PlanError::EmptyPlan);
        }
        if samples.len() >= 2 {
            let dt = samples[1].t - samples[0].t;
            if !(dt > 0.0) || samples.windows(2).any(|w| ((w[1].t - w[0].t) - dt).abs() > 1e-9) {
                return Err(PlanError::NonUniformPlan);
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[PlanSample] {
        &self.samples
    }

    pub fn first(&self) -> &PlanSample {
        &self.samples[0]
    }

    pub fn last(&self) -> &PlanSample {
        &self.samples[self.samples.len() - 1]
    }

    pub fn start_time(&self) -> f64 {
        self.first().t
    }

    pub fn end_time(&self) -> f64 {
        self.last().t
    }

    /// Sample at `t`; clamped at the ends, linear in between.
    pub fn sample_at(&self, t: f64) -> PlanSample {
        let s = &self.samples;
        if t <= s[0].t || s.len() == 1 {
            return PlanSample { t, ..s[0] };
        }
        if t >= self.end_time() {
            let last = *self.last();
            return PlanSample {
                t,
                velocity: Vector3::zeros(),
                ..last
            };
        }
        let i = s.partition_point(|x| x.t <= t) - 1;
        let (a, b) = (&s[i], &s[i + 1]);
        let u = (t - a.t) / (b.t - a.t);
        if u < 1e-9 {
            return PlanSample { t, ..*a };
        }
        let heading = a.state.heading + wrap(b.state.heading - a.state.heading) * u;
        let pitch = a.state.pitch + (b.state.pitch - a.state.pitch) * u;
        PlanSample {
            t,
            state: UavState::new(a.state.position + (b.state.position - a.state.position) * u, heading, pitch),
            velocity: b.velocity,
        }
    }

    pub fn position_at(&self, t: f64) -> WorldPoint {
        self.sample_at(t).state.position
    }

    /// Largest finite-difference speed and acceleration, the latter seeded by `v0`.
    pub fn max_rates(&self, v0: &Vector3<f64>) -> (f64, f64) {
        let mut v_prev = *v0;
        let (mut vm, mut am) = (0.0f64, 0.0f64);
        for w in self.samples.windows(2) {
            let dt = w[1].t - w[0].t;
            let v = (w[1].state.position - w[0].state.position) / dt;
            vm = vm.max(v.norm());
            am = am.max(((v - v_prev) / dt).norm());
            v_prev = v;
        }
        (vm, am)
    }

    /// Decelerates to rest in place at the acceleration bound while keeping the
    /// camera on `look_at`.
    pub fn braking(start: &PlanSample, limits: &DynamicLimits, cfg: &TrackerConfig, look_at: &[(f64, WorldPoint)]) -> Self {
        let (_, a_ax) = limits.per_axis();
        let mut samples = vec![*start];
        let mut cur = *start;
        for k in 1..=cfg.steps() {
            let t = start.t + k as f64 * cfg.dt;
            let v = cur.velocity.map(|vi| vi - vi.signum() * vi.abs().min(a_ax * cfg.dt));
            let p = cur.state.position + v * cfg.dt;
            let (h, pi) = aim(&cur.state, &p, look_at_point(look_at, t), None, limits, cfg.dt);
            cur = PlanSample {
                t,
                state: UavState::new(p, h, pi),
                velocity: v,
            };
            samples.push(cur);
        }
        Self { samples }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Plan sample spacing, seconds.
    pub dt: f64,
    /// Plan length, seconds.
    pub duration: f64,
    /// Proportional gain on position error, 1/s.
    pub gain: f64,
    /// Keep-in distance for targets inside boxes, meters.
    pub target_margin: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            duration: 4.0,
            gain: 1.2,
            target_margin: 0.25,
        }
    }
}

impl TrackerConfig {
    pub fn steps(&self) -> usize {
        ((self.duration / self.dt).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerDiagnostic {
    /// Start was outside the first box; the plan steers back into it.
    StartOutsideCorridor,
    /// Some axis had no velocity keeping it inside its box; it braked instead.
    ContainmentRelaxed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimized {
    pub plan: PlannedTrajectory,
    pub diagnostic: Option<TrackerDiagnostic>,
}

/// Largest speed toward a wall `room` away that can still stop in time,
/// given one step of travel before braking.
fn brake_speed(room: f64, a: f64, dt: f64) -> f64 {
    if room <= 0.0 {
        0.0
    } else {
        a * (-dt + (dt * dt + 2.0 * room / a).sqrt())
    }
}

/// Position and velocity can stop inside `[lo, hi]` on this axis.
fn can_stop(x: f64, v: f64, lo: f64, hi: f64, a: f64) -> bool {
    let need = v * v / (2.0 * a);
    x >= lo - 1e-12 && x <= hi + 1e-12 && if v > 0.0 { need <= hi - x + 1e-12 } else { need <= x - lo + 1e-12 }
}

fn can_stop_in(b: &CorridorBox, p: &WorldPoint, v: &Vector3<f64>, a: f64) -> bool {
    (0..3).all(|i| can_stop(p[i], v[i], b.min[i], b.max[i], a))
}

struct Axis {
    x: f64,
    v: f64,
    target: f64,
    v_ff: f64,
    lo: f64,
    hi: f64,
}

/// One tracking step on one axis. Returns the new velocity and whether the
/// containment constraint could be honoured.
fn axis_step(ax: &Axis, v_ax: f64, a_ax: f64, gain: f64, dt: f64) -> (f64, bool) {
    let e = ax.target - ax.x;
    let approach = (gain * e.abs()).min((2.0 * a_ax * e.abs()).sqrt());
    let v_des = (ax.v_ff + e.signum() * approach).clamp(-v_ax, v_ax);
    let lo_v = (ax.v - a_ax * dt).max(-v_ax).max(-brake_speed(ax.x - ax.lo, a_ax, dt));
    let hi_v = (ax.v + a_ax * dt).min(v_ax).min(brake_speed(ax.hi - ax.x, a_ax, dt));
    if lo_v <= hi_v {
        (v_des.clamp(lo_v, hi_v), true)
    } else {
        (ax.v - ax.v.signum() * ax.v.abs().min(a_ax * dt), false)
    }
}

fn look_at_point(look_at: &[(f64, WorldPoint)], t: f64) -> Option<WorldPoint> {
    let first = look_at.first()?;
    if t <= first.0 || look_at.len() == 1 {
        return Some(first.1);
    }
    let last = look_at.last()?;
    if t >= last.0 {
        return Some(last.1);
    }
    let i = look_at.partition_point(|(ts, _)| *ts <= t) - 1;
    let (t0, a) = look_at[i];
    let (t1, b) = look_at[i + 1];
    Some(a + (b - a) * ((t - t0) / (t1 - t0)))
}

/// Slews heading and pitch toward the target point (or a fallback orientation).
fn aim(
    cur: &UavState,
    p: &WorldPoint,
    target: Option<WorldPoint>,
    fallback: Option<(f64, f64)>,
    limits: &DynamicLimits,
    dt: f64,
) -> (f64, f64) {
    let desired = match target {
        Some(q) if (q - p).norm() > 1e-6 => Some((azimuth(&(q - p)), elevation(&(q - p)))),
        _ => fallback,
    };
    let Some((h_des, p_des)) = desired else {
        return (cur.heading, cur.pitch);
    };
    let step = limits.heading_rate_max * dt;
    let dh = wrap(h_des - cur.heading).clamp(-step, step);
    let dp = (p_des - cur.pitch).clamp(-step, step);
    (wrap(cur.heading + dh), cur.pitch + dp)
}

/// Tracks `reference` inside the corridor from `start`.
///
/// The position is a per-axis double integrator with velocity and acceleration
/// clamped to `limits / √3`. Each step keeps a braking distance to the walls of the
/// active box, so the trajectory never leaves it; the active box advances once
/// the state is inside the next box with a stoppable velocity. Intermediate boxes
/// aim for the centre of the next overlap; the last box aims for the reference
/// projected into it, with reference velocity as feed-forward.
pub fn optimize_trajectory(
    corridor: &Corridor,
    reference: &ReferenceTrajectory,
    limits: &DynamicLimits,
    start: &PlanSample,
    cfg: &TrackerConfig,
    look_at: &[(f64, WorldPoint)],
) -> Result<Optimized, PlanError> {
    limits.validate()?;
    if corridor.boxes.is_empty() {
        return Err(PlanError::EmptyPath);
    }
    if reference.is_empty() {
        return Err(PlanError::EmptyReference);
    }
    let (v_ax, a_ax) = limits.per_axis();
    let dt = cfg.dt;
    let boxes = &corridor.boxes;
    let mut diagnostic = None;
    let mut active = 0;
    if !boxes[0].contains(&start.state.position) {
        diagnostic = Some(TrackerDiagnostic::StartOutsideCorridor);
        active = corridor.nearest(&start.state.position).map_or(0, |(i, _)| i);
    }
    let ref_at = |t: f64| reference.position_extrapolated(t).unwrap_or(start.state.position);
    let ref_orientation = |t: f64| {
        let s = reference.samples();
        let i = s.partition_point(|(ts, _)| *ts <= t).saturating_sub(1);
        (s[i].1.heading, s[i].1.pitch)
    };

    let mut cur = *start;
    let mut samples = vec![cur];
    for k in 1..=cfg.steps() {
        let t = start.t + k as f64 * dt;
        while active + 1 < boxes.len() && can_stop_in(&boxes[active + 1], &cur.state.position, &cur.velocity, a_ax) {
            active += 1;
        }
        let b = &boxes[active];
        let (target, v_ff) = if active + 1 < boxes.len() {
            let (omin, omax) = b.overlap(&boxes[active + 1]).unwrap_or((b.min, b.max));
            ((omin + omax) * 0.5, Vector3::zeros())
        } else {
            // error is measured now; feed-forward carries the reference to the next step
            let r_now = ref_at(t - dt);
            let r_next = ref_at(t);
            let proj = b.project(&r_now, cfg.target_margin);
            let proj_next = b.project(&r_next, cfg.target_margin);
            (proj, (proj_next - proj) / dt)
        };
        let mut v = Vector3::zeros();
        for i in 0..3 {
            let x = cur.state.position[i];
            let ax = Axis {
                x,
                v: cur.velocity[i],
                target: target[i],
                v_ff: v_ff[i],
                // a start outside the box may only move back toward it
                lo: b.min[i].min(x),
                hi: b.max[i].max(x),
            };
            let (vi, ok) = axis_step(&ax, v_ax, a_ax, cfg.gain, dt);
            if !ok && diagnostic.is_none() {
                diagnostic = Some(TrackerDiagnostic::ContainmentRelaxed);
            }
            v[i] = vi;
        }
        let p = cur.state.position + v * dt;
        let (h, pi) = aim(&cur.state, &p, look_at_point(look_at, t), Some(ref_orientation(t)), limits, dt);
        cur = PlanSample {
            t,
            state: UavState::new(p, h, pi),
            velocity: v,
        };
        samples.push(cur);
    }
    Ok(Optimized {
        plan: PlannedTrajectory { samples },
        diagnostic,
    })
}

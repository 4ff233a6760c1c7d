//! Leader and follower reference states relative to the worker, applied
//! along the prediction horizon.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::HumanEstimate;
use crate::gesture::FormationSet;
use crate::model::{wrap, FormationParams, HumanState, UavState, WorldPoint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormationError {
    #[error("reference samples must be strictly increasing and uniformly spaced")]
    NonUniformSamples,
    #[error("leader plan is not aligned with the human prediction at sample {0}")]
    Misaligned(usize),
    #[error("empty prediction")]
    Empty,
}

/// Uniformly spaced `(t, state)` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    samples: Vec<(f64, UavState)>,
}

impl ReferenceTrajectory {
    pub fn new(samples: Vec<(f64, UavState)>) -> Result<Self, FormationError> {
        if samples.len() >= 2 {
            let step = samples[1].0 - samples[0].0;
            if !(step > 0.0) {
                return Err(FormationError::NonUniformSamples);
            }
            for w in samples.windows(2) {
                if ((w[1].0 - w[0].0) - step).abs() > 1e-9 * step.max(1.0) {
                    return Err(FormationError::NonUniformSamples);
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, UavState)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> Option<&(f64, UavState)> {
        self.samples.last()
    }

    /// Position at `t`, linearly interpolated and clamped to the ends.
    pub fn position_at(&self, t: f64) -> Option<WorldPoint> {
        let s = &self.samples;
        let first = s.first()?;
        if t <= first.0 {
            return Some(first.1.position);
        }
        let last = s.last()?;
        if t >= last.0 {
            return Some(last.1.position);
        }
        let i = s.partition_point(|(ts, _)| *ts <= t) - 1;
        let (t0, a) = s[i];
        let (t1, b) = s[i + 1];
        let u = (t - t0) / (t1 - t0);
        Some(a.position + (b.position - a.position) * u)
    }

    /// Like [`position_at`](Self::position_at) but continues the end segments linearly.
    pub fn position_extrapolated(&self, t: f64) -> Option<WorldPoint> {
        let s = &self.samples;
        if s.len() < 2 {
            return self.position_at(t);
        }
        let n = s.len();
        let (a, b) = if t < s[0].0 {
            (&s[0], &s[1])
        } else if t > s[n - 1].0 {
            (&s[n - 2], &s[n - 1])
        } else {
            return self.position_at(t);
        };
        let u = (t - a.0) / (b.0 - a.0);
        Some(a.1.position + (b.1.position - a.1.position) * u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    /// Lookahead, seconds.
    pub horizon: f64,
    /// Sample spacing, seconds.
    pub dt: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            horizon: 4.0,
            dt: 0.2,
        }
    }
}

impl HorizonConfig {
    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }
}

/// How the worker heading `φ_H` is obtained over the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadingSource {
    Fixed(f64),
    /// `atan2(v_y, v_x)` of the estimated velocity; `fallback` below `min_speed`.
    MotionDirection { fallback: f64, min_speed: f64 },
}

impl HeadingSource {
    pub fn resolve(&self, velocity: &nalgebra::Vector3<f64>) -> f64 {
        match *self {
            Self::Fixed(h) => wrap(h),
            Self::MotionDirection {
                fallback,
                min_speed,
            } => {
                if velocity.x.hypot(velocity.y) >= min_speed {
                    velocity.y.atan2(velocity.x)
                } else {
                    wrap(fallback)
                }
            }
        }
    }
}

/// Desired leader state:
/// `p = p_H − d·[cos(φ_H−β)cos γ, sin(φ_H−β)cos γ, −sin γ]`, `φ = φ_H − β`, `ξ = −γ`.
pub fn leader_reference(h: &HumanState, prm: &FormationParams) -> UavState {
    let az = h.heading - prm.beta;
    let (sa, ca) = az.sin_cos();
    let (sg, cg) = prm.gamma.sin_cos();
    let offset = WorldPoint::new(ca * cg, sa * cg, -sg) * prm.distance;
    UavState::new(h.position - offset, az, -prm.gamma)
}

/// Desired follower state, with angles relative to the leader's heading and pitch:
/// `p = p_H − d·[cos(φ_L−β)cos(γ−ξ_L), sin(φ_L−β)cos(γ−ξ_L), sin(ξ_L−γ)]`,
/// `φ = φ_L − β`, `ξ = ξ_L − γ`.
pub fn follower_reference(h: &HumanState, leader: &UavState, prm: &FormationParams) -> UavState {
    let az = leader.heading - prm.beta;
    let el = leader.pitch - prm.gamma;
    let (sa, ca) = az.sin_cos();
    let (se, ce) = el.sin_cos();
    let offset = WorldPoint::new(ca * ce, sa * ce, se) * prm.distance;
    UavState::new(h.position - offset, az, el)
}

/// Constant-velocity extrapolation of the filter mean at `dt` steps,
/// starting one step after the estimate time.
pub fn predict_human_trajectory(
    est: &HumanEstimate,
    hz: &HorizonConfig,
    heading: HeadingSource,
) -> Vec<(f64, HumanState)> {
    let p = est.position();
    let v = est.velocity();
    let phi = heading.resolve(&v);
    (1..=hz.steps())
        .map(|k| {
            let tau = k as f64 * hz.dt;
            (
                est.last_update_time + tau,
                HumanState::new(p + v * tau, v, phi),
            )
        })
        .collect()
}

/// Applies the leader and follower equations to every predicted pose.
///
/// Followers use the leader's planned pose at the same timestamp; without a
/// plan the leader's own references are used. Output is indexed like `params`.
pub fn horizon_references(
    pred: &[(f64, HumanState)],
    leader_plan: Option<&ReferenceTrajectory>,
    params: &FormationSet,
) -> Result<Vec<ReferenceTrajectory>, FormationError> {
    if pred.is_empty() || params.is_empty() {
        return Err(FormationError::Empty);
    }
    let leader_refs: Vec<(f64, UavState)> = pred
        .iter()
        .map(|(t, h)| (*t, leader_reference(h, params.leader())))
        .collect();
    let leader_states: &[(f64, UavState)] = match leader_plan {
        Some(plan) => {
            if plan.len() != pred.len() {
                return Err(FormationError::Misaligned(plan.len().min(pred.len())));
            }
            for (k, ((tp, _), (th, _))) in plan.samples().iter().zip(pred).enumerate() {
                if (tp - th).abs() > 1e-9 {
                    return Err(FormationError::Misaligned(k));
                }
            }
            plan.samples()
        }
        None => &leader_refs,
    };
    let mut out = Vec::with_capacity(params.len());
    out.push(ReferenceTrajectory::new(leader_refs.clone())?);
    for i in 1..params.len() {
        let prm = params.get(i);
        let samples = pred
            .iter()
            .zip(leader_states)
            .map(|((t, h), (_, l))| (*t, follower_reference(h, l, prm)))
            .collect();
        out.push(ReferenceTrajectory::new(samples)?);
    }
    Ok(out)
}

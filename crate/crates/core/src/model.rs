//! Shared frames, angle conventions and domain types.
//!
//! World frame is ENU (x east, y north, z up). Headings are measured
//! counter-clockwise from +x. A camera pitch `ξ` is the elevation of the
//! optical axis, so `ξ < 0` means the camera looks down.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point (or displacement) in the world frame, meters.
pub type WorldPoint = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite value for {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("rotation matrix is not a proper rotation (orthonormality error {0:e})")]
    NotARotation(f64),
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> Result<f64, ModelError> {
    if !a.is_finite() {
        return Err(ModelError::NonFinite { what: "angle", value: a });
    }
    Ok(wrap(a))
}

/// Infallible variant of [`wrap_angle`] for values already known to be finite.
pub(crate) fn wrap(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    if r <= -PI {
        r += TAU;
    }
    r
}

/// Unit vector of a camera with heading `heading` and elevation `pitch`.
pub fn boresight(heading: f64, pitch: f64) -> Vector3<f64> {
    let (sh, ch) = heading.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    Vector3::new(ch * cp, sh * cp, sp)
}

/// Azimuth (CCW from +x) of a world-frame vector's horizontal projection.
pub fn azimuth(v: &Vector3<f64>) -> f64 {
    v.y.atan2(v.x)
}

/// Elevation of a world-frame vector above the horizontal plane.
pub fn elevation(v: &Vector3<f64>) -> f64 {
    v.z.atan2(v.x.hypot(v.y))
}

pub(crate) fn ensure_finite(what: &'static str, p: &WorldPoint) -> Result<(), ModelError> {
    for &c in p.iter() {
        if !c.is_finite() {
            return Err(ModelError::NonFinite { what, value: c });
        }
    }
    Ok(())
}

/// Pose of a UAV and its camera: `[p, φ, ξ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub position: WorldPoint,
    pub heading: f64,
    pub pitch: f64,
}

impl UavState {
    /// Builds a state, wrapping the heading and clamping pitch to `[-π/2, π/2]`.
    pub fn new(position: WorldPoint, heading: f64, pitch: f64) -> Self {
        Self {
            position,
            heading: wrap(heading),
            pitch: pitch.clamp(-FRAC_PI_2, FRAC_PI_2),
        }
    }

    pub fn boresight(&self) -> Vector3<f64> {
        boresight(self.heading, self.pitch)
    }
}

/// Observable state of the worker: `[p, φ_H]` plus velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanState {
    pub position: WorldPoint,
    pub velocity: Vector3<f64>,
    pub heading: f64,
}

impl HumanState {
    pub fn new(position: WorldPoint, velocity: Vector3<f64>, heading: f64) -> Self {
        Self {
            position,
            velocity,
            heading: wrap(heading),
        }
    }

    pub fn stationary(position: WorldPoint, heading: f64) -> Self {
        Self::new(position, Vector3::zeros(), heading)
    }
}

/// Adaptive observation parameters of one UAV: angles in radians, distance in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormationParams {
    pub beta: f64,
    pub gamma: f64,
    pub distance: f64,
}

impl FormationParams {
    pub fn new(beta: f64, gamma: f64, distance: f64) -> Self {
        Self { beta, gamma, distance }
    }

    pub fn from_degrees(beta_deg: f64, gamma_deg: f64, distance: f64) -> Self {
        Self::new(beta_deg.to_radians(), gamma_deg.to_radians(), distance)
    }
}

/// Operating envelope for the adaptive parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamLimits {
    pub d_min: f64,
    pub d_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for ParamLimits {
    fn default() -> Self {
        Self {
            d_min: 4.0,
            d_max: 15.0,
            gamma_min: (-10.0f64).to_radians(),
            gamma_max: 45.0f64.to_radians(),
        }
    }
}

impl ParamLimits {
    /// Clamps distance and vertical angle into the envelope and wraps β.
    pub fn clamp(&self, p: FormationParams) -> FormationParams {
        FormationParams {
            beta: wrap(p.beta),
            gamma: p.gamma.clamp(self.gamma_min, self.gamma_max),
            distance: p.distance.clamp(self.d_min, self.d_max),
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            focal: 600.0,
            cx: 640.0,
            cy: 360.0,
            width: 1280.0,
            height: 720.0,
        }
    }
}

impl CameraIntrinsics {
    /// Projects a camera-frame point; `None` when it is not in front of the camera.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<(f64, f64)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some((
            self.focal * p_cam.x / p_cam.z + self.cx,
            self.focal * p_cam.y / p_cam.z + self.cy,
        ))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        (0.0..=self.width).contains(&u) && (0.0..=self.height).contains(&v)
    }
}

/// Camera pose in the world: `rotation` maps camera-frame vectors to the world
/// frame. The optical axis is the camera z-axis, x points right and y down in
/// the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub position: WorldPoint,
    pub intrinsics: CameraIntrinsics,
}

impl CameraPose {
    pub fn new(
        rotation: Matrix3<f64>,
        position: WorldPoint,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self, ModelError> {
        ensure_finite("camera position", &position)?;
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if !(ortho < 1e-9) || (det - 1.0).abs() > 1e-9 {
            return Err(ModelError::NotARotation(ortho.max((det - 1.0).abs())));
        }
        Ok(Self {
            rotation,
            position,
            intrinsics,
        })
    }

    /// Camera looking along `boresight(heading, pitch)` with a level horizon.
    pub fn from_orientation(
        position: WorldPoint,
        heading: f64,
        pitch: f64,
        intrinsics: CameraIntrinsics,
    ) -> Self {
        let z = boresight(heading, pitch);
        let (sh, ch) = heading.sin_cos();
        let x = Vector3::new(sh, -ch, 0.0);
        let y = z.cross(&x);
        Self {
            rotation: Matrix3::from_columns(&[x, y, z]),
            position,
            intrinsics,
        }
    }

    pub fn for_uav(state: &UavState, intrinsics: CameraIntrinsics) -> Self {
        Self::from_orientation(state.position, state.heading, state.pitch, intrinsics)
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn world_to_camera(&self, p: &WorldPoint) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.position)
    }
}

/// Serde adapter storing radians as degrees.
pub mod degrees {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rad: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(rad.to_degrees())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d).map(f64::to_radians)
    }
}

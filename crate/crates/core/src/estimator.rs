//! Worker position/velocity estimation.
//!
//! A constant-velocity Kalman filter over `x = [p, v]` (6 states) that observes
//! position only. Each measurement is built from the direction through the
//! bounding-box center and the most reliable available range:
//! UWB before stereo before apparent size.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CameraPose, WorldPoint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("bounding box has zero area")]
    DegenerateBox,
    #[error("bounding box center ({0:.1}, {1:.1}) lies outside the image")]
    BoxOutsideImage(f64, f64),
    #[error("direction vector is not unit length (norm {0})")]
    NonUnitDirection(f64),
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
}

/// Process noise standard deviations; `Q = diag(σp², σv²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoiseConfig {
    pub sigma_p: [f64; 3],
    pub sigma_v: [f64; 3],
}

impl Default for ProcessNoiseConfig {
    fn default() -> Self {
        Self {
            sigma_p: [0.1; 3],
            sigma_v: [0.1; 3],
        }
    }
}

impl ProcessNoiseConfig {
    pub fn matrix(&self) -> Matrix6<f64> {
        let [px, py, pz] = self.sigma_p;
        let [vx, vy, vz] = self.sigma_v;
        Matrix6::from_diagonal(&Vector6::new(
            px * px,
            py * py,
            pz * pz,
            vx * vx,
            vy * vy,
            vz * vz,
        ))
    }
}

/// Camera-frame measurement noise for each range source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementNoiseConfig {
    /// Lateral uncertainty of the bbox-center direction, meters at the measured range.
    pub sigma_xy: f64,
    pub sigma_z_uwb: f64,
    pub sigma_z_stereo: f64,
    pub sigma_z_apparent: f64,
}

impl Default for MeasurementNoiseConfig {
    fn default() -> Self {
        Self {
            sigma_xy: 0.05,
            sigma_z_uwb: 0.1,
            sigma_z_stereo: 0.3,
            sigma_z_apparent: 0.6,
        }
    }
}

impl MeasurementNoiseConfig {
    pub fn sigma_z(&self, source: DistanceSource) -> f64 {
        match source {
            DistanceSource::Uwb => self.sigma_z_uwb,
            DistanceSource::Stereo => self.sigma_z_stereo,
            DistanceSource::Apparent => self.sigma_z_apparent,
        }
    }

    /// Camera-frame covariance `diag(σxy², σxy², σz²)` for a source.
    pub fn camera_covariance(&self, source: DistanceSource) -> Matrix3<f64> {
        let sz = self.sigma_z(source);
        Matrix3::from_diagonal(&Vector3::new(
            self.sigma_xy * self.sigma_xy,
            self.sigma_xy * self.sigma_xy,
            sz * sz,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DistanceSource {
    Uwb,
    Stereo,
    Apparent,
}

/// Range candidates available at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceSources {
    pub uwb: Option<f64>,
    pub stereo: Option<f64>,
    pub apparent: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedDistance {
    pub distance: f64,
    /// World-frame covariance `R Σ_source Rᵀ`.
    pub covariance: Matrix3<f64>,
    pub source: DistanceSource,
}

/// Position observation in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub z: WorldPoint,
    pub covariance: Matrix3<f64>,
    pub source: DistanceSource,
}

/// Pixel rectangle `[u_min, u_max] × [v_min, v_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl BoundingBox {
    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.u_min + self.u_max),
            0.5 * (self.v_min + self.v_max),
        )
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }
}

/// Gaussian belief over `[p, v]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumanEstimate {
    pub mean: Vector6<f64>,
    pub covariance: Matrix6<f64>,
    /// Simulation time the belief refers to, seconds.
    pub last_update_time: f64,
}

impl HumanEstimate {
    pub fn position(&self) -> WorldPoint {
        self.mean.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.mean.fixed_rows::<3>(3).into_owned()
    }

    pub fn position_covariance(&self) -> Matrix3<f64> {
        self.covariance.fixed_view::<3, 3>(0, 0).into_owned()
    }
}

/// Constant-velocity transition `F = [[I, Δt·I], [0, I]]`.
pub fn transition(dt: f64) -> Matrix6<f64> {
    let mut f = Matrix6::identity();
    f[(0, 3)] = dt;
    f[(1, 4)] = dt;
    f[(2, 5)] = dt;
    f
}

pub fn kf_predict(
    est: &HumanEstimate,
    dt: f64,
    q: &ProcessNoiseConfig,
) -> Result<HumanEstimate, EstimatorError> {
    if !(dt > 0.0) {
        return Err(EstimatorError::NonPositiveDt(dt));
    }
    let f = transition(dt);
    let p = f * est.covariance * f.transpose() + q.matrix();
    Ok(HumanEstimate {
        mean: f * est.mean,
        covariance: symmetrize(&p),
        last_update_time: est.last_update_time + dt,
    })
}

/// Linear update with `H = [I₃ 0₃]`, Joseph-form covariance.
pub fn kf_update(est: &HumanEstimate, m: &Measurement) -> Result<HumanEstimate, EstimatorError> {
    let (innovation, s_inv) = innovation(est, m)?;
    let p = &est.covariance;
    // K = P Hᵀ S⁻¹ ; P Hᵀ is the first three columns of P.
    let pht = p.fixed_view::<6, 3>(0, 0).into_owned();
    let gain = pht * s_inv;
    let mut i_kh = Matrix6::identity();
    let mut block = i_kh.fixed_view_mut::<6, 3>(0, 0);
    block -= &gain;
    let cov = i_kh * p * i_kh.transpose() + gain * m.covariance * gain.transpose();
    Ok(HumanEstimate {
        mean: est.mean + gain * innovation,
        covariance: symmetrize(&cov),
        last_update_time: est.last_update_time,
    })
}

fn innovation(
    est: &HumanEstimate,
    m: &Measurement,
) -> Result<(Vector3<f64>, Matrix3<f64>), EstimatorError> {
    let s = est.position_covariance() + m.covariance;
    let s_inv = s
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(EstimatorError::SingularInnovation)?;
    if !s_inv.iter().all(|v| v.is_finite()) {
        return Err(EstimatorError::SingularInnovation);
    }
    Ok((m.z - est.position(), s_inv))
}

/// Squared Mahalanobis distance of a measurement from the predicted position.
pub fn mahalanobis_sq(est: &HumanEstimate, m: &Measurement) -> Result<f64, EstimatorError> {
    let (nu, s_inv) = innovation(est, m)?;
    Ok((nu.transpose() * s_inv * nu)[(0, 0)])
}

fn symmetrize(p: &Matrix6<f64>) -> Matrix6<f64> {
    (p + p.transpose()) * 0.5
}

/// Camera-frame unit vector through the bounding-box center.
pub fn direction_from_bbox(
    cam: &CameraPose,
    bbox: &BoundingBox,
) -> Result<Vector3<f64>, EstimatorError> {
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(EstimatorError::DegenerateBox);
    }
    let k = &cam.intrinsics;
    let (u, v) = bbox.center();
    if !k.contains(u, v) {
        return Err(EstimatorError::BoxOutsideImage(u, v));
    }
    let ray = Vector3::new((u - k.cx) / k.focal, (v - k.cy) / k.focal, 1.0);
    Ok(ray.normalize())
}

/// Monocular range from a known physical height: `d = f · H / h_px`.
pub fn apparent_distance(
    bbox_height: f64,
    human_height: f64,
    focal: f64,
) -> Result<f64, EstimatorError> {
    for (what, value) in [
        ("bbox height", bbox_height),
        ("human height", human_height),
        ("focal length", focal),
    ] {
        if !(value > 0.0) {
            return Err(EstimatorError::NonPositive { what, value });
        }
    }
    Ok(focal * human_height / bbox_height)
}

/// Median of the finite depth samples inside the box.
pub fn stereo_distance(depth_samples: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = depth_samples
        .iter()
        .copied()
        .filter(|d| d.is_finite())
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Picks the most reliable range (UWB, then stereo, then apparent) and the
/// matching world-frame covariance. `None` means no update this tick.
pub fn select_distance(
    src: &DistanceSources,
    cam: &CameraPose,
    noise: &MeasurementNoiseConfig,
) -> Option<SelectedDistance> {
    let (distance, source) = match (src.uwb, src.stereo, src.apparent) {
        (Some(d), _, _) => (d, DistanceSource::Uwb),
        (None, Some(d), _) => (d, DistanceSource::Stereo),
        (None, None, Some(d)) => (d, DistanceSource::Apparent),
        (None, None, None) => return None,
    };
    let r = &cam.rotation;
    Some(SelectedDistance {
        distance,
        covariance: r * noise.camera_covariance(source) * r.transpose(),
        source,
    })
}

/// `z = R (d · d̂) + p`.
pub fn build_measurement(
    cam: &CameraPose,
    distance: f64,
    direction: &Vector3<f64>,
) -> Result<WorldPoint, EstimatorError> {
    let n = direction.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(EstimatorError::NonUnitDirection(n));
    }
    if !(distance > 0.0) {
        return Err(EstimatorError::NonPositive {
            what: "distance",
            value: distance,
        });
    }
    Ok(cam.rotation * (direction * distance) + cam.position)
}

/// Constructs the world-frame measurement for one camera frame, if any range is available.
pub fn measurement_from_detection(
    cam: &CameraPose,
    bbox: &BoundingBox,
    sources: &DistanceSources,
    noise: &MeasurementNoiseConfig,
) -> Result<Option<Measurement>, EstimatorError> {
    let direction = direction_from_bbox(cam, bbox)?;
    let Some(sel) = select_distance(sources, cam, noise) else {
        return Ok(None);
    };
    let z = build_measurement(cam, sel.distance, &direction)?;
    Ok(Some(Measurement {
        z,
        covariance: sel.covariance,
        source: sel.source,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub process: ProcessNoiseConfig,
    #[serde(default)]
    pub measurement: MeasurementNoiseConfig,
    /// Initial velocity standard deviation, m/s.
    #[serde(default = "default_v_init")]
    pub initial_velocity_sigma: f64,
    /// Optional χ² gate on the squared Mahalanobis distance; off by default.
    #[serde(default)]
    pub gate: Option<f64>,
}

fn default_v_init() -> f64 {
    1.0
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            process: ProcessNoiseConfig::default(),
            measurement: MeasurementNoiseConfig::default(),
            initial_velocity_sigma: default_v_init(),
            gate: None,
        }
    }
}

/// What a camera saw in one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraObservation {
    pub camera: CameraPose,
    pub bbox: Option<BoundingBox>,
    pub sources: DistanceSources,
}

/// One filter step: predict, then update iff a box and at least one range exist.
pub fn estimate_tick(
    est: &HumanEstimate,
    dt: f64,
    bbox: Option<&BoundingBox>,
    cam: &CameraPose,
    sources: &DistanceSources,
    cfg: &EstimatorConfig,
) -> Result<HumanEstimate, EstimatorError> {
    let predicted = kf_predict(est, dt, &cfg.process)?;
    let Some(bbox) = bbox else {
        return Ok(predicted);
    };
    match measurement_from_detection(cam, bbox, sources, &cfg.measurement)? {
        Some(m) => apply_measurement(&predicted, &m, cfg),
        None => Ok(predicted),
    }
}

fn apply_measurement(
    est: &HumanEstimate,
    m: &Measurement,
    cfg: &EstimatorConfig,
) -> Result<HumanEstimate, EstimatorError> {
    if let Some(threshold) = cfg.gate {
        if mahalanobis_sq(est, m)? > threshold {
            return Ok(*est);
        }
    }
    kf_update(est, m)
}

/// Belief seeded from a first measurement: zero velocity,
/// `diag(σz², σz², σz², σv0², σv0², σv0²)`.
pub fn initial_estimate(m: &Measurement, t: f64, cfg: &EstimatorConfig) -> HumanEstimate {
    let sz = cfg.measurement.sigma_z(m.source);
    let sv = cfg.initial_velocity_sigma;
    let mut mean = Vector6::zeros();
    mean.fixed_rows_mut::<3>(0).copy_from(&m.z);
    HumanEstimate {
        mean,
        covariance: Matrix6::from_diagonal(&Vector6::new(
            sz * sz,
            sz * sz,
            sz * sz,
            sv * sv,
            sv * sv,
            sv * sv,
        )),
        last_update_time: t,
    }
}

/// Stateful wrapper that owns the belief and handles initialization.
#[derive(Debug, Clone)]
pub struct HumanEstimator {
    pub config: EstimatorConfig,
    estimate: Option<HumanEstimate>,
}

impl HumanEstimator {
    pub fn new(config: EstimatorConfig) -> Self {
        Self {
            config,
            estimate: None,
        }
    }

    pub fn estimate(&self) -> Option<&HumanEstimate> {
        self.estimate.as_ref()
    }

    /// Advances the belief to `now` and folds in every observation, in order.
    /// Returns the number of measurements applied.
    pub fn tick(
        &mut self,
        now: f64,
        observations: &[CameraObservation],
    ) -> Result<usize, EstimatorError> {
        let mut current = match self.estimate {
            Some(est) if now > est.last_update_time => {
                Some(kf_predict(&est, now - est.last_update_time, &self.config.process)?)
            }
            other => other,
        };
        let mut applied = 0;
        for obs in observations {
            let Some(bbox) = obs.bbox.as_ref() else {
                continue;
            };
            let Some(m) =
                measurement_from_detection(&obs.camera, bbox, &obs.sources, &self.config.measurement)?
            else {
                continue;
            };
            current = Some(match current {
                None => initial_estimate(&m, now, &self.config),
                Some(est) => apply_measurement(&est, &m, &self.config)?,
            });
            applied += 1;
        }
        self.estimate = current;
        Ok(applied)
    }
}

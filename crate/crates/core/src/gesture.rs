//! Gesture post-processing: turns a noisy per-frame gesture-id stream into
//! confirmed formation-parameter commands.
//!
//! The filter keeps the most recent valid (non-zero) detections, drops the
//! ones older than the staleness threshold, and confirms the dominant id once
//! its share of the window reaches the ratio threshold. After a confirmation
//! the window is cleared and no new command is accepted for the debounce delay.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FormationParams, ParamLimits};

/// Detector output for one frame. `id == 0` is a human without a gesture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GestureDetection {
    pub id: u32,
    pub t: f64,
}

impl GestureDetection {
    pub fn is_valid(&self) -> bool {
        self.id != 0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GestureError {
    #[error("time went backwards: {now} < {previous}")]
    TimeRegression { now: f64, previous: f64 },
    #[error("detection at {t} is newer than the update time {now}")]
    FutureDetection { t: f64, now: f64 },
    #[error("invalid detector model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GestureFilterConfig {
    /// Number of most recent valid detections considered (K).
    #[serde(default = "default_window")]
    pub window: usize,
    /// Detections older than this are discarded, seconds.
    #[serde(default = "default_staleness")]
    pub staleness: f64,
    /// Dominant-gesture ratio needed for a confirmation.
    #[serde(default = "default_ratio")]
    pub ratio_threshold: f64,
    /// Minimum time between two confirmations, seconds.
    #[serde(default = "default_debounce")]
    pub debounce: f64,
    /// Minimum number of valid detections before a confirmation can happen.
    /// `None` means the full window.
    #[serde(default)]
    pub min_detections: Option<usize>,
}

fn default_window() -> usize {
    20
}
fn default_staleness() -> f64 {
    20.0
}
fn default_ratio() -> f64 {
    0.8
}
fn default_debounce() -> f64 {
    5.0
}

impl Default for GestureFilterConfig {
    fn default() -> Self {
        Self {
            window: default_window(),
            staleness: default_staleness(),
            ratio_threshold: default_ratio(),
            debounce: default_debounce(),
            min_detections: None,
        }
    }
}

impl GestureFilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window < 1 {
            return Err("gesture_filter.window must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.ratio_threshold) {
            return Err("gesture_filter.ratio_threshold must be in [0, 1]".into());
        }
        if !(self.staleness > 0.0 && self.debounce > 0.0) {
            return Err("gesture_filter.staleness and debounce must be > 0".into());
        }
        if let Some(m) = self.min_detections {
            if m < 1 || m > self.window {
                return Err("gesture_filter.min_detections must be in [1, window]".into());
            }
        }
        Ok(())
    }

    fn min_fill(&self) -> usize {
        self.min_detections.unwrap_or(self.window).clamp(1, self.window)
    }
}

/// Result of one filter iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterOutput {
    pub confirmed: Option<u32>,
    /// Unique most frequent id in the window (before any clearing).
    pub dominant: Option<u32>,
    /// Dominant count over window size; 0 for an empty window.
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct GestureFilter {
    pub config: GestureFilterConfig,
    window: VecDeque<GestureDetection>,
    last_command_time: Option<f64>,
    last_update: Option<f64>,
}

impl GestureFilter {
    pub fn new(config: GestureFilterConfig) -> Self {
        Self {
            config,
            window: VecDeque::with_capacity(config.window),
            last_command_time: None,
            last_update: None,
        }
    }

    pub fn window(&self) -> impl Iterator<Item = &GestureDetection> {
        self.window.iter()
    }

    pub fn last_command_time(&self) -> Option<f64> {
        self.last_command_time
    }

    pub fn update(
        &mut self,
        det: Option<GestureDetection>,
        now: f64,
    ) -> Result<FilterOutput, GestureError> {
        if let Some(previous) = self.last_update {
            if now < previous {
                return Err(GestureError::TimeRegression { now, previous });
            }
        }
        if let Some(d) = det {
            if d.t > now {
                return Err(GestureError::FutureDetection { t: d.t, now });
            }
        }
        self.last_update = Some(now);

        let cutoff = now - self.config.staleness;
        self.window.retain(|d| d.t >= cutoff);

        if let Some(d) = det.filter(GestureDetection::is_valid) {
            if d.t >= cutoff {
                self.window.push_back(d);
            }
            while self.window.len() > self.config.window {
                self.window.pop_front();
            }
        }

        let (dominant, ratio) = dominant_gesture(self.window.iter().map(|d| d.id));
        let debounced = self
            .last_command_time
            .is_none_or(|last| now - last >= self.config.debounce);
        let confirmed = match dominant {
            Some(id)
                if self.window.len() >= self.config.min_fill()
                    && ratio >= self.config.ratio_threshold
                    && debounced =>
            {
                self.last_command_time = Some(now);
                self.window.clear();
                Some(id)
            }
            _ => None,
        };
        Ok(FilterOutput {
            confirmed,
            dominant,
            ratio,
        })
    }
}

/// Most frequent id and its share. Ties yield no dominant id.
pub fn dominant_gesture(ids: impl Iterator<Item = u32>) -> (Option<u32>, f64) {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    let mut total = 0usize;
    for id in ids {
        *counts.entry(id).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return (None, 0.0);
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let ratio = best as f64 / total as f64;
    let mut leaders = counts.iter().filter(|(_, &c)| c == best);
    let first = leaders.next().map(|(&id, _)| id);
    if leaders.next().is_some() {
        (None, ratio)
    } else {
        (first, ratio)
    }
}

// ---------------------------------------------------------------------------
// Detector emulator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEmulatorModel {
    /// Row-stochastic matrix: `confusion[true][detected]`.
    pub confusion: Vec<Vec<f64>>,
    pub detection_rate: f64,
    /// Output rate of the gesture classifier, Hz.
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_frame_rate() -> f64 {
    3.0
}

impl Default for DetectorEmulatorModel {
    fn default() -> Self {
        Self::noiseless(5)
    }
}

impl DetectorEmulatorModel {
    /// Identity confusion over ids `0..n`, every frame detected.
    pub fn noiseless(n: usize) -> Self {
        let confusion = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            confusion,
            detection_rate: 1.0,
            frame_rate_hz: default_frame_rate(),
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GestureError> {
        let n = self.confusion.len();
        if n == 0 {
            return Err(GestureError::InvalidModel("empty confusion matrix".into()));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            if row.len() != n {
                return Err(GestureError::InvalidModel(format!("row {i} is not length {n}")));
            }
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(GestureError::InvalidModel(format!("row {i} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(GestureError::InvalidModel(format!("row {i} sums to {s}")));
            }
        }
        if !(0.0..=1.0).contains(&self.detection_rate) {
            return Err(GestureError::InvalidModel("detection_rate outside [0, 1]".into()));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(GestureError::InvalidModel("frame_rate_hz must be > 0".into()));
        }
        Ok(())
    }
}

/// Stochastic stand-in for the vision gesture classifier.
#[derive(Debug, Clone)]
pub struct DetectorEmulator {
    model: DetectorEmulatorModel,
    rng: ChaCha8Rng,
    next_frame: f64,
}

impl DetectorEmulator {
    pub fn new(model: DetectorEmulatorModel) -> Result<Self, GestureError> {
        model.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(model.rng_seed),
            model,
            next_frame: f64::NEG_INFINITY,
        })
    }

    pub fn model(&self) -> &DetectorEmulatorModel {
        &self.model
    }

    /// True once per classifier period; the first call always fires.
    pub fn frame_due(&mut self, t: f64) -> bool {
        if t + 1e-9 < self.next_frame {
            return false;
        }
        let period = 1.0 / self.model.frame_rate_hz;
        self.next_frame = if self.next_frame.is_finite() {
            let mut next = self.next_frame + period;
            while next <= t + 1e-9 {
                next += period;
            }
            next
        } else {
            t + period
        };
        true
    }

    /// Samples one classifier output. `true_id` outside the matrix is reported as 0.
    pub fn emulate(&mut self, true_id: u32, t: f64) -> Option<GestureDetection> {
        let detected: f64 = self.rng.gen();
        let pick: f64 = self.rng.gen();
        if detected >= self.model.detection_rate {
            return None;
        }
        let row = self.model.confusion.get(true_id as usize)?;
        let mut acc = 0.0;
        let mut id = row.len() - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if pick < acc {
                id = j;
                break;
            }
        }
        Some(GestureDetection { id: id as u32, t })
    }
}

// ---------------------------------------------------------------------------
// Parameter commands
// ---------------------------------------------------------------------------

/// Which adaptive parameter a command addresses. Follower indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParamTarget {
    LeaderBeta,
    LeaderGamma,
    LeaderD,
    FollowerBeta(usize),
    FollowerGamma(usize),
    FollowerD(usize),
    /// Distance of every follower.
    FollowersD,
    /// Distance of every UAV.
    AllD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamField {
    Beta,
    Gamma,
    Distance,
}

impl ParamTarget {
    pub fn field(&self) -> ParamField {
        match self {
            Self::LeaderBeta | Self::FollowerBeta(_) => ParamField::Beta,
            Self::LeaderGamma | Self::FollowerGamma(_) => ParamField::Gamma,
            _ => ParamField::Distance,
        }
    }

    pub fn is_angle(&self) -> bool {
        self.field() != ParamField::Distance
    }

    /// Roster indices (0 = leader) this target touches.
    pub fn indices(&self, n_uavs: usize) -> Vec<usize> {
        match *self {
            Self::LeaderBeta | Self::LeaderGamma | Self::LeaderD => vec![0],
            Self::FollowerBeta(i) | Self::FollowerGamma(i) | Self::FollowerD(i) => {
                if i >= 1 && i < n_uavs {
                    vec![i]
                } else {
                    vec![]
                }
            }
            Self::FollowersD => (1..n_uavs).collect(),
            Self::AllD => (0..n_uavs).collect(),
        }
    }

    pub fn is_valid_for(&self, n_uavs: usize) -> bool {
        !self.indices(n_uavs).is_empty()
    }
}

/// Incremental change of one parameter (radians or meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamDelta {
    pub target: ParamTarget,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorRequest {
    Delta(ParamDelta),
    Absolute { target: ParamTarget, value: f64 },
}

impl OperatorRequest {
    pub fn target(&self) -> ParamTarget {
        match self {
            Self::Delta(d) => d.target,
            Self::Absolute { target, .. } => *target,
        }
    }
}

/// Adaptive parameters of the whole roster; index 0 is the leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationSet(pub Vec<FormationParams>);

impl FormationSet {
    pub fn leader(&self) -> &FormationParams {
        &self.0[0]
    }

    pub fn get(&self, i: usize) -> &FormationParams {
        &self.0[i]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Gesture id → parameter increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureMap(pub BTreeMap<u32, ParamDelta>);

impl Default for GestureMap {
    fn default() -> Self {
        let beta = 30f64.to_radians();
        let gamma = 5f64.to_radians();
        let entries = [
            (1, ParamTarget::LeaderBeta, -beta),
            (2, ParamTarget::LeaderBeta, beta),
            (3, ParamTarget::LeaderGamma, -gamma),
            (4, ParamTarget::LeaderGamma, gamma),
        ];
        Self(
            entries
                .into_iter()
                .map(|(id, target, delta)| (id, ParamDelta { target, delta }))
                .collect(),
        )
    }
}

/// Looks up the increment for a confirmed gesture; `None` is a no-op.
pub fn map_gesture(id: u32, map: &GestureMap) -> Option<ParamDelta> {
    map.0.get(&id).copied()
}

/// Applies a delta or absolute request, then clamps into `limits`.
/// Targets naming a UAV outside the roster leave the set unchanged.
pub fn apply_operator_request(
    params: &FormationSet,
    req: &OperatorRequest,
    limits: &ParamLimits,
) -> FormationSet {
    let mut out = params.clone();
    let target = req.target();
    for i in target.indices(params.len()) {
        let p = &mut out.0[i];
        let slot = match target.field() {
            ParamField::Beta => &mut p.beta,
            ParamField::Gamma => &mut p.gamma,
            ParamField::Distance => &mut p.distance,
        };
        match req {
            OperatorRequest::Delta(d) => *slot += d.delta,
            OperatorRequest::Absolute { value, .. } => *slot = *value,
        }
        *p = limits.clamp(*p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(id: u32, t: f64) -> Option<GestureDetection> {
        Some(GestureDetection { id, t })
    }

    #[test]
    fn confirms_at_ratio_threshold() {
        let mut f = GestureFilter::new(GestureFilterConfig::default());
        let mut t = 0.0;
        let mut out = FilterOutput::default();
        for i in 0..20 {
            t += 0.1;
            out = f.update(det(if i % 7 == 3 { 4 } else { 2 }, t), t).unwrap();
            if i < 19 {
                assert_eq!(out.confirmed, None);
            }
        }
        // 17× id 2, 3× id 4 → 0.85
        assert!((out.ratio - 0.85).abs() < 1e-12);
        assert_eq!(out.confirmed, Some(2));
        assert_eq!(f.window().count(), 0);
    }

    #[test]
    fn below_ratio_does_not_confirm() {
        let mut f = GestureFilter::new(GestureFilterConfig::default());
        let mut t = 0.0;
        for i in 0..20 {
            t += 0.1;
            let out = f.update(det(if i < 15 { 2 } else { 4 }, t), t).unwrap();
            assert_eq!(out.confirmed, None);
            if i == 19 {
                assert!((out.ratio - 0.75).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn debounce_blocks_second_command() {
        let cfg = GestureFilterConfig {
            min_detections: Some(1),
            ..Default::default()
        };
        let mut f = GestureFilter::new(cfg);
        assert_eq!(f.update(det(2, 10.0), 10.0).unwrap().confirmed, Some(2));
        assert_eq!(f.update(det(2, 12.0), 12.0).unwrap().confirmed, None);
        assert_eq!(f.update(det(2, 14.9), 14.9).unwrap().confirmed, None);
        assert_eq!(f.update(None, 15.0).unwrap().confirmed, Some(2));
    }

    #[test]
    fn ties_do_not_confirm() {
        let cfg = GestureFilterConfig {
            window: 4,
            ratio_threshold: 0.5,
            ..Default::default()
        };
        let mut f = GestureFilter::new(cfg);
        for (i, id) in [1, 2, 1, 2].into_iter().enumerate() {
            let out = f.update(det(id, i as f64), i as f64).unwrap();
            assert_eq!(out.confirmed, None);
        }
        assert_eq!(dominant_gesture([1, 2, 1, 2].into_iter()), (None, 0.5));
    }

    #[test]
    fn null_gestures_never_enter_window() {
        let mut f = GestureFilter::new(GestureFilterConfig::default());
        for i in 0..50 {
            f.update(det(0, i as f64 * 0.1), i as f64 * 0.1).unwrap();
        }
        assert_eq!(f.window().count(), 0);
    }

    #[test]
    fn stale_entries_are_dropped() {
        let cfg = GestureFilterConfig {
            window: 3,
            ..Default::default()
        };
        let mut f = GestureFilter::new(cfg);
        f.update(det(1, 0.0), 0.0).unwrap();
        f.update(det(1, 1.0), 1.0).unwrap();
        f.update(None, 20.5).unwrap();
        assert_eq!(f.window().count(), 1);
        f.update(None, 21.5).unwrap();
        assert_eq!(f.window().count(), 0);
    }

    #[test]
    fn rejects_time_regression() {
        let mut f = GestureFilter::new(GestureFilterConfig::default());
        f.update(None, 5.0).unwrap();
        assert!(matches!(
            f.update(None, 4.0),
            Err(GestureError::TimeRegression { .. })
        ));
        assert!(matches!(
            f.update(det(1, 6.0), 5.5),
            Err(GestureError::FutureDetection { .. })
        ));
    }

    #[test]
    fn emulator_noiseless_and_silent() {
        let mut e = DetectorEmulator::new(DetectorEmulatorModel::noiseless(5)).unwrap();
        assert_eq!(e.emulate(2, 1.0), Some(GestureDetection { id: 2, t: 1.0 }));
        let mut silent = DetectorEmulator::new(DetectorEmulatorModel {
            detection_rate: 0.0,
            ..DetectorEmulatorModel::noiseless(5)
        })
        .unwrap();
        assert!((0..100).all(|i| silent.emulate(2, i as f64).is_none()));
    }

    #[test]
    fn emulator_confusion_rate() {
        let mut model = DetectorEmulatorModel::noiseless(3);
        model.confusion[1] = vec![0.1, 0.8, 0.1];
        model.rng_seed = 42;
        let mut e = DetectorEmulator::new(model).unwrap();
        let n = 10_000;
        let hits = (0..n)
            .filter(|&i| e.emulate(1, i as f64).map(|d| d.id) == Some(1))
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.8).abs() < 0.02, "{rate}");
    }

    #[test]
    fn emulator_rejects_bad_rows() {
        let mut model = DetectorEmulatorModel::noiseless(3);
        model.confusion[2] = vec![0.5, 0.4, 0.0];
        assert!(DetectorEmulator::new(model).is_err());
    }

    #[test]
    fn frame_clock_fires_at_rate() {
        let mut e = DetectorEmulator::new(DetectorEmulatorModel::noiseless(3)).unwrap();
        let fired = (0..100).filter(|&k| e.frame_due(k as f64 * 0.1)).count();
        // 10 s at 3 Hz
        assert!((29..=31).contains(&fired), "{fired}");
    }

    #[test]
    fn gesture_mapping() {
        let map = GestureMap::default();
        let d = map_gesture(2, &map).unwrap();
        assert_eq!(d.target, ParamTarget::LeaderBeta);
        assert!((d.delta - 30f64.to_radians()).abs() < 1e-15);
        let d = map_gesture(3, &map).unwrap();
        assert_eq!(d.target, ParamTarget::LeaderGamma);
        assert!((d.delta + 5f64.to_radians()).abs() < 1e-15);
        assert!(map_gesture(0, &map).is_none());
    }

    #[test]
    fn requests_add_replace_and_clamp() {
        let limits = ParamLimits::default();
        let set = FormationSet(vec![FormationParams::from_degrees(90.0, 11.0, 10.0)]);
        let req = |delta| OperatorRequest::Delta(ParamDelta {
            target: ParamTarget::LeaderD,
            delta,
        });
        assert_eq!(apply_operator_request(&set, &req(2.0), &limits).leader().distance, 12.0);
        assert_eq!(apply_operator_request(&set, &req(20.0), &limits).leader().distance, 15.0);
        let abs = OperatorRequest::Absolute {
            target: ParamTarget::LeaderD,
            value: 12.0,
        };
        assert_eq!(apply_operator_request(&set, &abs, &limits).leader().distance, 12.0);
        let id1 = OperatorRequest::Delta(map_gesture(1, &GestureMap::default()).unwrap());
        let beta = apply_operator_request(&set, &id1, &limits).leader().beta;
        assert!((beta - 60f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn group_targets() {
        let limits = ParamLimits::default();
        let set = FormationSet(vec![FormationParams::from_degrees(0.0, 0.0, 8.0); 3]);
        let req = OperatorRequest::Delta(ParamDelta {
            target: ParamTarget::FollowersD,
            delta: 1.0,
        });
        let out = apply_operator_request(&set, &req, &limits);
        assert_eq!(
            out.0.iter().map(|p| p.distance).collect::<Vec<_>>(),
            vec![8.0, 9.0, 9.0]
        );
        let bogus = OperatorRequest::Delta(ParamDelta {
            target: ParamTarget::FollowerD(7),
            delta: 1.0,
        });
        assert_eq!(apply_operator_request(&set, &bogus, &limits), set);
        assert!(!ParamTarget::FollowerD(0).is_valid_for(3));
    }

    #[test]
    fn target_wire_names() {
        assert_eq!(serde_json::to_string(&ParamTarget::LeaderBeta).unwrap(), "\"LEADER_BETA\"");
        assert_eq!(
            serde_json::to_string(&ParamTarget::FollowerD(2)).unwrap(),
            "{\"FOLLOWER_D\":2}"
        );
    }
}

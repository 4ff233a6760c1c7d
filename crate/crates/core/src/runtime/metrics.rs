//! Per-tick metrics, command events, CSV output and run summaries.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::gesture::ParamTarget;
use crate::model::{azimuth, elevation, wrap, HumanState, UavState, WorldPoint};
use crate::planner::{nearest_obstacle_distance, Obstacle};
use crate::gesture::FormationSet;

/// `f64` on the wire with non-finite values as `"inf"`, `"-inf"` or `"nan"`,
/// which plain JSON numbers cannot carry.
pub mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("expected a number, got {other:?}"))),
            },
        }
    }
}

pub const CSV_HEADER: &str =
    "t,uav_id,d_t,d_o,d_m_min,beta_ref_deg,beta_act_deg,gamma_ref_deg,gamma_act_deg,g_gt,g_d,g_f,f_d,est_err_m";

/// One row per UAV per tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub t: f64,
    pub uav_id: usize,
    pub d_t: f64,
    #[serde(with = "extended_f64")]
    pub d_o: f64,
    #[serde(with = "extended_f64")]
    pub d_m_min: f64,
    pub beta_ref_deg: f64,
    pub beta_act_deg: f64,
    pub gamma_ref_deg: f64,
    pub gamma_act_deg: f64,
    pub g_gt: u32,
    pub g_d: u32,
    pub g_f: u32,
    pub f_d: f64,
    /// NaN before the first estimate.
    #[serde(with = "extended_f64")]
    pub est_err_m: f64,
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

impl MetricsSample {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.3},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            self.uav_id,
            num(self.d_t),
            num(self.d_o),
            num(self.d_m_min),
            num(self.beta_ref_deg),
            num(self.beta_act_deg),
            num(self.gamma_ref_deg),
            num(self.gamma_act_deg),
            self.g_gt,
            self.g_d,
            self.g_f,
            num(self.f_d),
            num(self.est_err_m),
        )
    }
}

/// Observation angles realised by `uav`, inverting the reference equations.
/// The leader is measured against the worker heading, followers against the
/// leader's heading and pitch.
pub fn actual_angles(uav: &UavState, human: &HumanState, frame: Option<&UavState>) -> (f64, f64) {
    let to_human: WorldPoint = human.position - uav.position;
    let az = azimuth(&to_human);
    let el = elevation(&to_human);
    match frame {
        None => (wrap(human.heading - az), -el),
        Some(leader) => (wrap(leader.heading - az), leader.pitch - el),
    }
}

/// Everything `metrics_sample` reads about one tick.
#[derive(Debug, Clone, Copy)]
pub struct MetricsInput<'a> {
    pub t: f64,
    pub human: &'a HumanState,
    pub uavs: &'a [UavState],
    pub params: &'a FormationSet,
    pub obstacles: &'a [Obstacle],
    pub estimate: Option<WorldPoint>,
    pub g_gt: u32,
    pub g_d: u32,
    pub g_f: u32,
    pub f_d: f64,
}

pub fn metrics_sample(m: &MetricsInput, uav_id: usize) -> MetricsSample {
    let u = &m.uavs[uav_id];
    let frame = if uav_id == 0 { None } else { Some(&m.uavs[0]) };
    let (beta, gamma) = actual_angles(u, m.human, frame);
    let d_m_min = m
        .uavs
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != uav_id)
        .map(|(_, o)| (o.position - u.position).norm())
        .fold(f64::INFINITY, f64::min);
    let p = m.params.get(uav_id);
    MetricsSample {
        t: m.t,
        uav_id,
        d_t: (m.human.position - u.position).norm(),
        d_o: nearest_obstacle_distance(m.obstacles, &u.position),
        d_m_min,
        beta_ref_deg: p.beta.to_degrees(),
        beta_act_deg: beta.to_degrees(),
        gamma_ref_deg: p.gamma.to_degrees(),
        gamma_act_deg: gamma.to_degrees(),
        g_gt: m.g_gt,
        g_d: m.g_d,
        g_f: m.g_f,
        f_d: m.f_d,
        est_err_m: m.estimate.map_or(f64::NAN, |e| (e - m.human.position).norm()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommandSource {
    WorkerGesture,
    Operator,
}

/// Parameter change in boundary units (degrees for angles, meters for distances).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommandPayload {
    Gesture { id: u32, target: ParamTarget, delta: f64 },
    Delta { target: ParamTarget, delta: f64 },
    Absolute { target: ParamTarget, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandStatus {
    Confirmed,
    /// Confirmed gesture with no mapping, or a request naming an unknown UAV.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandEvent {
    pub t: f64,
    pub source: CommandSource,
    pub payload: CommandPayload,
    pub status: CommandStatus,
}

/// Receives the run's output streams.
pub trait MetricsSink {
    fn sample(&mut self, s: &MetricsSample) -> io::Result<()>;
    fn event(&mut self, e: &CommandEvent) -> io::Result<()>;
}

/// CSV rows to one writer, JSON lines of events to another.
pub struct CsvSink<M: Write, E: Write> {
    metrics: M,
    events: E,
    header_written: bool,
}

impl<M: Write, E: Write> CsvSink<M, E> {
    pub fn new(metrics: M, events: E) -> Self {
        Self {
            metrics,
            events,
            header_written: false,
        }
    }

    pub fn into_inner(self) -> (M, E) {
        (self.metrics, self.events)
    }
}

impl<M: Write, E: Write> MetricsSink for CsvSink<M, E> {
    fn sample(&mut self, s: &MetricsSample) -> io::Result<()> {
        if !self.header_written {
            writeln!(self.metrics, "{CSV_HEADER}")?;
            self.header_written = true;
        }
        writeln!(self.metrics, "{}", s.csv_row())
    }

    fn event(&mut self, e: &CommandEvent) -> io::Result<()> {
        let line = serde_json::to_string(e).map_err(io::Error::other)?;
        writeln!(self.events, "{line}")
    }
}

/// Collects everything in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub samples: Vec<MetricsSample>,
    pub events: Vec<CommandEvent>,
}

impl MetricsSink for MemorySink {
    fn sample(&mut self, s: &MetricsSample) -> io::Result<()> {
        self.samples.push(*s);
        Ok(())
    }

    fn event(&mut self, e: &CommandEvent) -> io::Result<()> {
        self.events.push(*e);
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn sample(&mut self, _: &MetricsSample) -> io::Result<()> {
        Ok(())
    }

    fn event(&mut self, _: &CommandEvent) -> io::Result<()> {
        Ok(())
    }
}

/// A tick where some stage failed and a fallback was used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickFault {
    pub t: f64,
    pub uav_id: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ticks: u64,
    pub duration: f64,
    #[serde(with = "extended_f64")]
    pub min_d_m: f64,
    #[serde(with = "extended_f64")]
    pub min_d_o: f64,
    #[serde(with = "extended_f64")]
    pub min_d_t: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    pub gesture_commands: usize,
    pub operator_commands: usize,
    /// Gestures performed, and how many of them were executed while still held.
    pub gestures_performed: usize,
    pub gestures_propagated: usize,
    /// `None` when no gesture was performed.
    pub success_rate: Option<f64>,
    pub fault_count: usize,
    /// First faults, capped.
    pub faults: Vec<TickFault>,
}

/// A gesture held over `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerformedGesture {
    pub id: u32,
    pub start: f64,
    pub end: f64,
}

/// Fraction of performed gestures whose command was confirmed while the gesture was held.
pub fn success_rate(performed: &[PerformedGesture], events: &[CommandEvent]) -> (usize, Option<f64>) {
    let hits = performed
        .iter()
        .filter(|g| {
            events.iter().any(|e| {
                matches!(e.payload, CommandPayload::Gesture { id, .. } if id == g.id) && e.t >= g.start && e.t <= g.end
            })
        })
        .count();
    let rate = (!performed.is_empty()).then(|| hits as f64 / performed.len() as f64);
    (hits, rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::{follower_reference, leader_reference};
    use crate::model::FormationParams;
    use nalgebra::Vector3;

    #[test]
    fn non_finite_metrics_survive_json() {
        let s = MetricsSample {
            t: 0.1,
            uav_id: 0,
            d_t: 3.0,
            d_o: f64::INFINITY,
            d_m_min: f64::NEG_INFINITY,
            beta_ref_deg: 90.0,
            beta_act_deg: 90.0,
            gamma_ref_deg: 11.0,
            gamma_act_deg: 11.0,
            g_gt: 0,
            g_d: 0,
            g_f: 0,
            f_d: 0.0,
            est_err_m: f64::NAN,
        };
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains(r#""d_o":"inf""#), "{text}");
        let back: MetricsSample = serde_json::from_str(&text).unwrap();
        assert_eq!(back.csv_row(), s.csv_row());
        assert!(serde_json::from_str::<MetricsSample>(&text.replace(r#""inf""#, r#""far""#)).is_err());
    }

    #[test]
    fn angles_invert_the_references() {
        let h = HumanState::stationary(Vector3::new(1.0, -2.0, 0.9), 0.7);
        let lp = FormationParams::from_degrees(90.0, 11.0, 10.0);
        let fp = FormationParams::from_degrees(-60.0, 5.0, 8.0);
        let l = leader_reference(&h, &lp);
        let f = follower_reference(&h, &l, &fp);
        let (b, g) = actual_angles(&l, &h, None);
        assert!((b - lp.beta).abs() < 1e-9 && (g - lp.gamma).abs() < 1e-9);
        let (b, g) = actual_angles(&f, &h, Some(&l));
        assert!((b - fp.beta).abs() < 1e-9 && (g - fp.gamma).abs() < 1e-9);
    }

    #[test]
    fn hand_geometry() {
        // worker facing +y, UAV due east at the same height: β = 90° − 180° = −90°
        let h = HumanState::stationary(Vector3::zeros(), std::f64::consts::FRAC_PI_2);
        let u = UavState::new(Vector3::new(5.0, 0.0, 5.0), 0.0, 0.0);
        let (b, g) = actual_angles(&u, &h, None);
        assert!((b.to_degrees() + 90.0).abs() < 1e-9);
        assert!((g.to_degrees() - 45.0).abs() < 1e-9);
    }

    #[test]
    fn csv_formatting() {
        let s = MetricsSample {
            t: 0.1,
            uav_id: 2,
            d_t: 1.0,
            d_o: f64::INFINITY,
            d_m_min: 2.5,
            beta_ref_deg: 90.0,
            beta_act_deg: 89.5,
            gamma_ref_deg: 11.0,
            gamma_act_deg: 10.0,
            g_gt: 2,
            g_d: 0,
            g_f: 2,
            f_d: 0.85,
            est_err_m: f64::NAN,
        };
        assert_eq!(
            s.csv_row(),
            "0.100,2,1.000000,inf,2.500000,90.000000,89.500000,11.000000,10.000000,2,0,2,0.850000,nan"
        );
        assert_eq!(CSV_HEADER.split(',').count(), s.csv_row().split(',').count());
    }

    #[test]
    fn success_requires_confirmation_while_held() {
        let g = [
            PerformedGesture { id: 2, start: 10.0, end: 20.0 },
            PerformedGesture { id: 3, start: 30.0, end: 40.0 },
        ];
        let ev = |t, id| CommandEvent {
            t,
            source: CommandSource::WorkerGesture,
            payload: CommandPayload::Gesture {
                id,
                target: ParamTarget::LeaderBeta,
                delta: 30.0,
            },
            status: CommandStatus::Confirmed,
        };
        assert_eq!(success_rate(&g, &[ev(15.0, 2), ev(41.0, 3)]), (1, Some(0.5)));
        assert_eq!(success_rate(&[], &[]), (0, None));
    }
}

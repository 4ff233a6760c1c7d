//! Wire protocol: one JSON object per WebSocket text message, tagged by `type`.
//!
//! Client → server: `hello`, `gesture_inject`, `operator_request`.
//! Server → client: `hello`, `snapshot`, `delta`, `confirm`, `error`.
//! Angles are degrees, distances meters, times seconds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{CommandEvent, MetricsSample};
use super::scenario::to_internal;
use crate::gesture::{OperatorRequest, ParamDelta, ParamTarget};
use crate::planner::Obstacle;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed frame at `{path}`: {message}")]
    Malformed { path: String, message: String },
    #[error("invalid request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientRole {
    Controller,
    Observer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientFrame {
    Hello {
        version: u32,
        role: ClientRole,
    },
    /// The worker starts (`on`) or stops performing gesture `id`.
    GestureInject {
        id: u32,
        on: bool,
        /// Apply at this tick instead of the next one.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at_tick: Option<u64>,
    },
    /// Exactly one of `delta` and `absolute`.
    OperatorRequest {
        target: ParamTarget,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        absolute: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at_tick: Option<u64>,
    },
}

/// A command for the simulation loop, in internal units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Control {
    Gesture { id: u32, on: bool },
    Operator(OperatorRequest),
}

impl ClientFrame {
    /// The control carried by the frame and its requested tick; `None` for `hello`.
    pub fn control(&self) -> Result<Option<(Control, Option<u64>)>, ProtocolError> {
        match *self {
            ClientFrame::Hello { .. } => Ok(None),
            ClientFrame::GestureInject { id, on, at_tick } => Ok(Some((Control::Gesture { id, on }, at_tick))),
            ClientFrame::OperatorRequest {
                target,
                delta,
                absolute,
                at_tick,
            } => {
                let req = match (delta, absolute) {
                    (Some(d), None) if d.is_finite() => OperatorRequest::Delta(ParamDelta {
                        target,
                        delta: to_internal(target, d),
                    }),
                    (None, Some(v)) if v.is_finite() => OperatorRequest::Absolute {
                        target,
                        value: to_internal(target, v),
                    },
                    _ => {
                        return Err(ProtocolError::Invalid(
                            "exactly one finite `delta` or `absolute` required".into(),
                        ))
                    }
                };
                Ok(Some((Control::Operator(req), at_tick)))
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HelloBody {
    version: u32,
    role: ClientRole,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GestureBody {
    id: u32,
    on: bool,
    #[serde(default)]
    at_tick: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OperatorBody {
    target: ParamTarget,
    #[serde(default)]
    delta: Option<f64>,
    #[serde(default)]
    absolute: Option<f64>,
    #[serde(default)]
    at_tick: Option<u64>,
}

fn body<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T, ProtocolError> {
    serde_path_to_error::deserialize(v).map_err(|e| ProtocolError::Malformed {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Parses a client frame; errors carry the offending field path.
pub fn decode_client(text: &str) -> Result<ClientFrame, ProtocolError> {
    let malformed = |path: &str, message: String| ProtocolError::Malformed {
        path: path.into(),
        message,
    };
    let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| malformed(".", e.to_string()))?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| malformed(".", "frame must be a JSON object".into()))?;
    let ty = match obj.remove("type") {
        Some(serde_json::Value::String(s)) => s,
        _ => return Err(malformed("type", "missing or not a string".into())),
    };
    match ty.as_str() {
        "hello" => body::<HelloBody>(v).map(|b| ClientFrame::Hello {
            version: b.version,
            role: b.role,
        }),
        "gesture_inject" => body::<GestureBody>(v).map(|b| ClientFrame::GestureInject {
            id: b.id,
            on: b.on,
            at_tick: b.at_tick,
        }),
        "operator_request" => body::<OperatorBody>(v).map(|b| ClientFrame::OperatorRequest {
            target: b.target,
            delta: b.delta,
            absolute: b.absolute,
            at_tick: b.at_tick,
        }),
        other => Err(malformed("type", format!("unknown frame type `{other}`"))),
    }
}

pub fn encode_client(frame: &ClientFrame) -> String {
    serde_json::to_string(frame).expect("client frames always serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamsView {
    pub beta_deg: f64,
    pub gamma_deg: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavTelemetry {
    pub name: String,
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub heading_deg: f64,
    pub pitch_deg: f64,
    pub params: ParamsView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanTelemetry {
    pub position: [f64; 3],
    pub heading_deg: f64,
    /// Gesture currently performed, 0 for none.
    pub gesture: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub tick: u64,
    pub t: f64,
    pub human: HumanTelemetry,
    pub estimate: Option<[f64; 3]>,
    pub uavs: Vec<UavTelemetry>,
    pub metrics: Vec<MetricsSample>,
}

/// Parts of the world that never change during a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticWorld {
    pub name: String,
    pub dt: f64,
    pub duration: f64,
    pub grid_origin: [f64; 3],
    pub grid_size: [f64; 3],
    pub cell_size: f64,
    pub gamma_dis: f64,
    pub obstacles: Vec<Obstacle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    InvalidRequest,
    VersionMismatch,
    HelloRequired,
    ControllerConflict,
    NotController,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Hello {
        version: u32,
        role: ClientRole,
    },
    Snapshot {
        version: u32,
        world: StaticWorld,
        state: Telemetry,
    },
    Delta {
        state: Telemetry,
    },
    Confirm {
        tick: u64,
        event: CommandEvent,
        params: Vec<ParamsView>,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

pub fn encode_server(frame: &ServerFrame) -> String {
    serde_json::to_string(frame).expect("server frames always serialize")
}

pub fn decode_server(text: &str) -> Result<ServerFrame, ProtocolError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| ProtocolError::Malformed {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_frames_round_trip() {
        let frames = [
            ClientFrame::Hello {
                version: PROTOCOL_VERSION,
                role: ClientRole::Controller,
            },
            ClientFrame::GestureInject {
                id: 4,
                on: true,
                at_tick: Some(12),
            },
            ClientFrame::OperatorRequest {
                target: ParamTarget::FollowerD(2),
                delta: None,
                absolute: Some(12.0),
                at_tick: None,
            },
        ];
        for f in frames {
            assert_eq!(decode_client(&encode_client(&f)).unwrap(), f);
        }
    }

    #[test]
    fn wire_shape() {
        let f = decode_client(r#"{"type":"operator_request","target":"LEADER_BETA","delta":30}"#).unwrap();
        let (c, at) = f.control().unwrap().unwrap();
        assert_eq!(at, None);
        match c {
            Control::Operator(OperatorRequest::Delta(d)) => {
                assert!((d.delta - std::f64::consts::FRAC_PI_6).abs() < 1e-15)
            }
            other => panic!("{other:?}"),
        }
        let f = decode_client(r#"{"type":"operator_request","target":"LEADER_D","absolute":12}"#).unwrap();
        assert!(matches!(
            f.control().unwrap().unwrap().0,
            Control::Operator(OperatorRequest::Absolute { value, .. }) if value == 12.0
        ));
    }

    #[test]
    fn malformed_frames_name_the_problem() {
        match decode_client(r#"{"type":"gesture_inject","id":"four","on":true}"#) {
            Err(ProtocolError::Malformed { path, .. }) => assert_eq!(path, "id"),
            other => panic!("{other:?}"),
        }
        assert!(decode_client("not json").is_err());
        assert!(decode_client(r#"{"type":"launch_missiles"}"#).is_err());
        let both = decode_client(r#"{"type":"operator_request","target":"LEADER_D","delta":1,"absolute":2}"#).unwrap();
        assert!(matches!(both.control(), Err(ProtocolError::Invalid(_))));
    }
}

//! The closed loop: commands → planning → world → estimation → gestures → metrics.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{
    metrics_sample, success_rate, CommandEvent, CommandPayload, CommandSource, CommandStatus, MetricsInput,
    MetricsSample, MetricsSink, PerformedGesture, RunSummary, TickFault,
};
use super::protocol::{
    decode_client, encode_client, ClientFrame, Control, HumanTelemetry, ParamsView, ProtocolError, StaticWorld,
    Telemetry, UavTelemetry, PROTOCOL_VERSION,
};
use super::scenario::{to_boundary, Scenario};
use crate::estimator::{apparent_distance, stereo_distance, CameraObservation, DistanceSources, HumanEstimator};
use crate::gesture::{
    apply_operator_request, map_gesture, DetectorEmulator, FilterOutput, FormationSet, GestureError, GestureFilter,
    OperatorRequest,
};
use crate::planner::{replan_tick, OccupancyGrid, PlanSample, PlannedTrajectory, WorldSnapshot};
use crate::world::{world_tick, SensorBundle, UavBody, WorldError, WorldState};

const MAX_LOGGED_FAULTS: usize = 50;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Gesture(#[from] GestureError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("sink failed: {0}")]
    Sink(#[from] io::Error),
    #[error("command script: {0}")]
    Script(String),
}

/// Applied commands, replayable through [`replay`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandScript {
    pub version: u32,
    /// Raw frames; each is decoded with the wire decoder on replay.
    pub frames: Vec<serde_json::Value>,
}

/// What one tick produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub tick: u64,
    pub t: f64,
    pub samples: Vec<MetricsSample>,
    pub events: Vec<CommandEvent>,
    pub faults: Vec<TickFault>,
}

struct Pending {
    tick: u64,
    control: Control,
}

pub struct Session {
    scenario: Scenario,
    world: WorldState,
    planning_grid: OccupancyGrid,
    estimator: HumanEstimator,
    filter: GestureFilter,
    detector: DetectorEmulator,
    params: FormationSet,
    plans: Vec<Option<PlannedTrajectory>>,
    pending: Vec<Pending>,
    log: Vec<ClientFrame>,
    injected: Option<u32>,
    last_detected: u32,
    last_filter: FilterOutput,
    open_gesture: Option<(u32, f64)>,
    performed: Vec<PerformedGesture>,
    events: Vec<CommandEvent>,
    faults: Vec<TickFault>,
    fault_count: usize,
    latest: Vec<MetricsSample>,
    min_d_m: f64,
    min_d_o: f64,
    min_d_t: f64,
    max_speed: f64,
    max_accel: f64,
}

impl Session {
    pub fn new(scenario: Scenario) -> Result<Self, SessionError> {
        let uavs = scenario.start_states.iter().map(|s| UavBody::at_rest(*s)).collect();
        let world = WorldState::new(&scenario.script, uavs, scenario.visibility_grid(), scenario.seed);
        let mut detector_model = scenario.detector.clone();
        detector_model.rng_seed = detector_model.rng_seed.wrapping_add(scenario.seed);
        let n = scenario.start_states.len();
        Ok(Self {
            planning_grid: scenario.planning_grid(),
            estimator: HumanEstimator::new(scenario.estimator),
            filter: GestureFilter::new(scenario.gesture_filter),
            detector: DetectorEmulator::new(detector_model)?,
            params: scenario.params.clone(),
            plans: vec![None; n],
            pending: Vec::new(),
            log: Vec::new(),
            injected: None,
            last_detected: 0,
            last_filter: FilterOutput::default(),
            open_gesture: None,
            performed: Vec::new(),
            events: Vec::new(),
            faults: Vec::new(),
            fault_count: 0,
            latest: Vec::new(),
            min_d_m: f64::INFINITY,
            min_d_o: f64::INFINITY,
            min_d_t: f64::INFINITY,
            max_speed: 0.0,
            max_accel: 0.0,
            world,
            scenario,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn tick(&self) -> u64 {
        self.world.tick
    }

    pub fn time(&self) -> f64 {
        self.world.t
    }

    pub fn params(&self) -> &FormationSet {
        &self.params
    }

    pub fn plans(&self) -> &[Option<PlannedTrajectory>] {
        &self.plans
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn estimate(&self) -> Option<&crate::estimator::HumanEstimate> {
        self.estimator.estimate()
    }

    pub fn events(&self) -> &[CommandEvent] {
        &self.events
    }

    pub fn is_finished(&self) -> bool {
        self.world.tick >= self.scenario.ticks()
    }

    /// Queues a client command. It takes effect at the start of tick `at_tick`,
    /// or of the next tick when absent or already past.
    pub fn submit(&mut self, frame: &ClientFrame) -> Result<(), ProtocolError> {
        let Some((control, at)) = frame.control()? else {
            return Ok(());
        };
        if let Control::Operator(req) = control {
            if !req.target().is_valid_for(self.params.len()) {
                return Err(ProtocolError::Invalid(format!("no uav for target {:?}", req.target())));
            }
        }
        let tick = at.map_or(self.world.tick, |t| t.max(self.world.tick));
        let mut logged = frame.clone();
        match &mut logged {
            ClientFrame::GestureInject { at_tick, .. } | ClientFrame::OperatorRequest { at_tick, .. } => {
                *at_tick = Some(tick)
            }
            ClientFrame::Hello { .. } => {}
        }
        self.log.push(logged);
        // stable: equal ticks keep submission order
        let idx = self.pending.partition_point(|p| p.tick <= tick);
        self.pending.insert(idx, Pending { tick, control });
        Ok(())
    }

    /// Queues every frame of a recorded script through the wire decoder.
    pub fn submit_script(&mut self, script: &CommandScript) -> Result<(), SessionError> {
        if script.version != PROTOCOL_VERSION {
            return Err(SessionError::Script(format!(
                "protocol version {} not supported",
                script.version
            )));
        }
        for v in &script.frames {
            self.submit(&decode_client(&v.to_string())?)?;
        }
        Ok(())
    }

    /// Every accepted command with the tick it applies at.
    pub fn command_script(&self) -> CommandScript {
        CommandScript {
            version: PROTOCOL_VERSION,
            frames: self
                .log
                .iter()
                .map(|f| serde_json::from_str(&encode_client(f)).expect("frames are valid JSON"))
                .collect(),
        }
    }

    fn fault(&mut self, uav_id: Option<usize>, reason: String, out: &mut Vec<TickFault>) {
        let f = TickFault {
            t: self.world.t,
            uav_id,
            reason,
        };
        self.fault_count += 1;
        if self.faults.len() < MAX_LOGGED_FAULTS {
            self.faults.push(f.clone());
        }
        out.push(f);
    }

    fn true_gesture(&self, t: f64) -> u32 {
        self.injected.unwrap_or_else(|| self.scenario.script.active_gesture(t))
    }

    fn apply_controls(&mut self, events: &mut Vec<CommandEvent>) {
        let due = self.pending.partition_point(|p| p.tick <= self.world.tick);
        let controls: Vec<Control> = self.pending.drain(..due).map(|p| p.control).collect();
        for c in controls {
            match c {
                Control::Gesture { id, on: true } => self.injected = Some(id),
                Control::Gesture { id, on: false } => {
                    if self.injected == Some(id) {
                        self.injected = None;
                    }
                }
                Control::Operator(req) => {
                    let payload = match req {
                        OperatorRequest::Delta(d) => CommandPayload::Delta {
                            target: d.target,
                            delta: to_boundary(d.target, d.delta),
                        },
                        OperatorRequest::Absolute { target, value } => CommandPayload::Absolute {
                            target,
                            value: to_boundary(target, value),
                        },
                    };
                    self.params = apply_operator_request(&self.params, &req, &self.scenario.param_limits);
                    events.push(CommandEvent {
                        t: self.world.t,
                        source: CommandSource::Operator,
                        payload,
                        status: CommandStatus::Confirmed,
                    });
                }
            }
        }
    }

    fn current_states(&self) -> Vec<PlanSample> {
        self.world
            .uavs
            .iter()
            .map(|b| PlanSample {
                t: self.world.t,
                state: b.state,
                velocity: b.velocity,
            })
            .collect()
    }

    fn replan(&mut self, faults: &mut Vec<TickFault>) {
        let states = self.current_states();
        let cfg = self.scenario.planner;
        let Some(estimate) = self.estimator.estimate().copied() else {
            for (i, s) in states.iter().enumerate() {
                self.plans[i] = Some(PlannedTrajectory::braking(s, &cfg.limits, &cfg.tracker, &[]));
            }
            return;
        };
        for i in 0..states.len() {
            let snap = WorldSnapshot {
                t: self.world.t,
                estimate: &estimate,
                heading: self.scenario.heading,
                params: &self.params,
                grid: &self.planning_grid,
                plans: &self.plans,
                states: &states,
            };
            match replan_tick(i, &snap, &cfg) {
                Ok(out) => {
                    if let Some(e) = out.failure {
                        self.fault(Some(i), format!("planner: {e}"), faults);
                    }
                    self.plans[i] = Some(out.plan);
                }
                Err(e) => {
                    self.fault(Some(i), format!("planner: {e}"), faults);
                    self.plans[i] = Some(PlannedTrajectory::braking(&states[i], &cfg.limits, &cfg.tracker, &[]));
                }
            }
        }
    }

    fn observations(&self, bundles: &[SensorBundle]) -> Vec<CameraObservation> {
        bundles
            .iter()
            .map(|b| {
                let apparent = b.reading.bbox.as_ref().and_then(|bb| {
                    apparent_distance(bb.height(), self.scenario.script.height, b.camera.intrinsics.focal).ok()
                });
                CameraObservation {
                    camera: b.camera,
                    bbox: b.reading.bbox,
                    sources: DistanceSources {
                        uwb: b.reading.uwb,
                        stereo: b.reading.stereo_samples.as_deref().and_then(stereo_distance),
                        apparent,
                    },
                }
            })
            .collect()
    }

    fn track_performed(&mut self, t: f64) {
        let g = self.true_gesture(t);
        let open = self.open_gesture.map(|(id, _)| id).unwrap_or(0);
        if g != open {
            if let Some((id, start)) = self.open_gesture.take() {
                self.performed.push(PerformedGesture { id, start, end: t });
            }
            if g != 0 {
                self.open_gesture = Some((g, t));
            }
        }
    }

    /// Advances one tick. Stage failures are logged as faults and the loop goes on.
    pub fn step(&mut self) -> Result<TickOutput, SessionError> {
        let mut events = Vec::new();
        let mut faults = Vec::new();
        if self.world.tick == 0 {
            self.track_performed(0.0);
        }
        self.apply_controls(&mut events);
        if self.world.tick.is_multiple_of(self.scenario.replan_every) {
            self.replan(&mut faults);
        }

        let prev: Vec<UavBody> = self.world.uavs.clone();
        let bundles = world_tick(
            &mut self.world,
            &self.plans,
            &self.scenario.script,
            &self.scenario.world,
            &self.scenario.planner.limits,
            self.scenario.dt,
        )?;
        let t = self.world.t;

        let obs = self.observations(&bundles);
        if let Err(e) = self.estimator.tick(t, &obs) {
            self.fault(None, format!("estimator: {e}"), &mut faults);
        }

        self.track_performed(t);
        let gesture = self.true_gesture(t);
        let leader_sees = bundles.first().is_some_and(|b| b.uav == 0 && b.reading.bbox.is_some());
        let mut detection = None;
        if self.detector.frame_due(t) {
            detection = if leader_sees { self.detector.emulate(gesture, t) } else { None };
            self.last_detected = detection.map_or(0, |d| d.id);
        }
        self.last_filter = self.filter.update(detection, t)?;
        if let Some(id) = self.last_filter.confirmed {
            if let Some(delta) = map_gesture(id, &self.scenario.gesture_map) {
                self.params = apply_operator_request(&self.params, &OperatorRequest::Delta(delta), &self.scenario.param_limits);
                events.push(CommandEvent {
                    t,
                    source: CommandSource::WorkerGesture,
                    payload: CommandPayload::Gesture {
                        id,
                        target: delta.target,
                        delta: to_boundary(delta.target, delta.delta),
                    },
                    status: CommandStatus::Confirmed,
                });
            }
        }

        let states: Vec<_> = self.world.uavs.iter().map(|b| b.state).collect();
        let input = MetricsInput {
            t,
            human: &self.world.human,
            uavs: &states,
            params: &self.params,
            obstacles: &self.scenario.obstacles,
            estimate: self.estimator.estimate().map(|e| e.position()),
            g_gt: gesture,
            g_d: self.last_detected,
            g_f: self.last_filter.dominant.unwrap_or(0),
            f_d: self.last_filter.ratio,
        };
        let samples: Vec<MetricsSample> = (0..states.len()).map(|i| metrics_sample(&input, i)).collect();
        for (s, (b, p)) in samples.iter().zip(self.world.uavs.iter().zip(&prev)) {
            self.min_d_m = self.min_d_m.min(s.d_m_min);
            self.min_d_o = self.min_d_o.min(s.d_o);
            self.min_d_t = self.min_d_t.min(s.d_t);
            self.max_speed = self.max_speed.max(b.velocity.norm());
            self.max_accel = self.max_accel.max((b.velocity - p.velocity).norm() / self.scenario.dt);
        }
        self.events.extend(events.iter().copied());
        self.latest = samples.clone();
        Ok(TickOutput {
            tick: self.world.tick,
            t,
            samples,
            events,
            faults,
        })
    }

    pub fn summary(&self) -> RunSummary {
        let mut performed = self.performed.clone();
        if let Some((id, start)) = self.open_gesture {
            performed.push(PerformedGesture {
                id,
                start,
                end: self.world.t,
            });
        }
        let (hits, rate) = success_rate(&performed, &self.events);
        let count = |src| self.events.iter().filter(|e| e.source == src).count();
        RunSummary {
            ticks: self.world.tick,
            duration: self.world.t,
            min_d_m: self.min_d_m,
            min_d_o: self.min_d_o,
            min_d_t: self.min_d_t,
            max_speed: self.max_speed,
            max_accel: self.max_accel,
            gesture_commands: count(CommandSource::WorkerGesture),
            operator_commands: count(CommandSource::Operator),
            gestures_performed: performed.len(),
            gestures_propagated: hits,
            success_rate: rate,
            fault_count: self.fault_count,
            faults: self.faults.clone(),
        }
    }

    pub fn static_world(&self) -> StaticWorld {
        let s = &self.scenario;
        StaticWorld {
            name: s.name.clone(),
            dt: s.dt,
            duration: s.duration,
            grid_origin: s.grid_origin.into(),
            grid_size: s.grid_size.into(),
            cell_size: s.cell_size,
            gamma_dis: s.planner.gamma_dis,
            obstacles: s.obstacles.clone(),
        }
    }

    pub fn params_view(&self) -> Vec<ParamsView> {
        self.params
            .0
            .iter()
            .map(|p| ParamsView {
                beta_deg: p.beta.to_degrees(),
                gamma_deg: p.gamma.to_degrees(),
                d: p.distance,
            })
            .collect()
    }

    pub fn telemetry(&self) -> Telemetry {
        let params = self.params_view();
        Telemetry {
            tick: self.world.tick,
            t: self.world.t,
            human: HumanTelemetry {
                position: self.world.human.position.into(),
                heading_deg: self.world.human.heading.to_degrees(),
                gesture: self.true_gesture(self.world.t),
            },
            estimate: self.estimator.estimate().map(|e| e.position().into()),
            uavs: self
                .world
                .uavs
                .iter()
                .enumerate()
                .map(|(i, b)| UavTelemetry {
                    name: self.scenario.uav_names[i].clone(),
                    position: b.state.position.into(),
                    velocity: b.velocity.into(),
                    heading_deg: b.state.heading.to_degrees(),
                    pitch_deg: b.state.pitch.to_degrees(),
                    params: params[i],
                })
                .collect(),
            metrics: self.latest.clone(),
        }
    }
}

/// Scenario operator requests as wire frames pinned to their ticks.
pub fn scripted_frames(scenario: &Scenario) -> Vec<ClientFrame> {
    scenario
        .requests
        .iter()
        .map(|r| ClientFrame::OperatorRequest {
            target: r.target,
            delta: r.delta,
            absolute: r.absolute,
            at_tick: Some((r.t / scenario.dt - 1e-9).ceil().max(0.0) as u64),
        })
        .collect()
}

fn drive(session: &mut Session, sink: &mut dyn MetricsSink) -> Result<RunSummary, SessionError> {
    while !session.is_finished() {
        let out = session.step()?;
        for s in &out.samples {
            sink.sample(s)?;
        }
        for e in &out.events {
            sink.event(e)?;
        }
    }
    Ok(session.summary())
}

/// Runs the scenario to completion. Its scripted requests travel through the
/// wire encoder and decoder, exactly like live or replayed commands.
pub fn run(scenario: Scenario, sink: &mut dyn MetricsSink) -> Result<(RunSummary, CommandScript), SessionError> {
    let frames = scripted_frames(&scenario);
    let mut session = Session::new(scenario)?;
    for f in &frames {
        session.submit(&decode_client(&encode_client(f))?)?;
    }
    let summary = drive(&mut session, sink)?;
    Ok((summary, session.command_script()))
}

/// Re-executes a recorded command script; the scenario's own requests are not used.
pub fn replay(
    scenario: Scenario,
    script: &CommandScript,
    sink: &mut dyn MetricsSink,
) -> Result<RunSummary, SessionError> {
    let mut session = Session::new(scenario)?;
    session.submit_script(script)?;
    drive(&mut session, sink)
}

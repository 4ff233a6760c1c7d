//! Live session over WebSocket: one controller, any number of observers.

use std::collections::BTreeMap;
use std::io::{self, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use super::metrics::RunSummary;
use super::protocol::{
    decode_client, encode_server, ClientFrame, ClientRole, ErrorCode, ProtocolError, ServerFrame, PROTOCOL_VERSION,
};
use super::scenario::Scenario;
use super::session::{scripted_frames, CommandScript, Session, SessionError};

const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: String,
    /// Simulated seconds per wall-clock second; 0 runs unthrottled.
    pub rtf: f64,
    /// Send a `delta` every this many ticks.
    pub telemetry_every: u64,
    /// Hold the clock until a controller has said hello.
    pub wait_for_controller: bool,
    /// Stop serving once the scenario ends.
    pub exit_when_finished: bool,
    /// Write the applied command script here when the session ends.
    pub record: Option<PathBuf>,
    /// Commands queued before any client connects, replacing the scenario's
    /// own scripted requests.
    pub replay: Option<CommandScript>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8765".into(),
            rtf: 1.0,
            telemetry_every: 1,
            wait_for_controller: false,
            exit_when_finished: false,
            record: None,
            replay: None,
        }
    }
}

enum Inbound {
    Connected { id: u64, out: Sender<String> },
    Text { id: u64, text: String },
    Disconnected { id: u64 },
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    sim: Option<JoinHandle<Result<(RunSummary, CommandScript), SessionError>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Waits for the simulation thread, which ends on `stop` or, with
    /// `exit_when_finished`, at the end of the scenario.
    pub fn join(mut self) -> Result<(RunSummary, CommandScript), SessionError> {
        let result = self
            .sim
            .take()
            .expect("joined once")
            .join()
            .unwrap_or_else(|_| Err(SessionError::Script("simulation thread panicked".into())));
        self.stop.store(true, Ordering::SeqCst);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        result
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// Binds `cfg.addr` and runs the session on background threads.
pub fn serve(scenario: Scenario, cfg: ServeConfig) -> io::Result<ServerHandle> {
    let mut session = Session::new(scenario).map_err(io::Error::other)?;
    match &cfg.replay {
        Some(script) => session.submit_script(script).map_err(io::Error::other)?,
        None => {
            for f in scripted_frames(session.scenario()) {
                session.submit(&f).map_err(io::Error::other)?;
            }
        }
    }
    let listener = TcpListener::bind(&cfg.addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = channel();

    let acceptor = {
        let stop = stop.clone();
        thread::spawn(move || accept_loop(listener, tx, stop))
    };
    let sim = {
        let stop = stop.clone();
        thread::spawn(move || sim_loop(session, rx, cfg, stop))
    };
    Ok(ServerHandle {
        addr,
        stop,
        sim: Some(sim),
        acceptor: Some(acceptor),
    })
}

fn accept_loop(listener: TcpListener, tx: Sender<Inbound>, stop: Arc<AtomicBool>) {
    let mut next_id = 0u64;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let (tx, stop) = (tx.clone(), stop.clone());
                let id = next_id;
                next_id += 1;
                thread::spawn(move || connection(id, stream, tx, stop));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(_) => thread::sleep(POLL),
        }
    }
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn connection(id: u64, stream: TcpStream, tx: Sender<Inbound>, stop: Arc<AtomicBool>) {
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let Ok(mut ws) = tungstenite::accept(stream) else {
        return;
    };
    if ws.get_ref().set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    let (out_tx, out_rx) = channel();
    if tx.send(Inbound::Connected { id, out: out_tx }).is_err() {
        return;
    }
    pump(id, &mut ws, &tx, &out_rx, &stop);
    let _ = ws.close(None);
    let _ = ws.flush();
    let _ = tx.send(Inbound::Disconnected { id });
}

fn pump(id: u64, ws: &mut WebSocket<TcpStream>, tx: &Sender<Inbound>, out: &Receiver<String>, stop: &AtomicBool) {
    loop {
        loop {
            match out.try_recv() {
                Ok(text) => {
                    if ws.send(Message::text(text)).is_err() {
                        return;
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return,
            }
        }
        if stop.load(Ordering::SeqCst) {
            return;
        }
        match ws.read() {
            Ok(Message::Text(t)) => {
                if tx.send(Inbound::Text { id, text: t.to_string() }).is_err() {
                    return;
                }
            }
            Ok(Message::Close(_)) => return,
            Ok(_) => {}
            Err(e) if would_block(&e) => {}
            Err(_) => return,
        }
    }
}

struct Client {
    out: Sender<String>,
    role: Option<ClientRole>,
}

struct Hub {
    clients: BTreeMap<u64, Client>,
    controller: Option<u64>,
}

impl Hub {
    fn send(&self, id: u64, frame: &ServerFrame) {
        if let Some(c) = self.clients.get(&id) {
            let _ = c.out.send(encode_server(frame));
        }
    }

    fn error(&self, id: u64, code: ErrorCode, message: impl Into<String>) {
        self.send(
            id,
            &ServerFrame::Error {
                code,
                message: message.into(),
            },
        );
    }

    fn broadcast(&self, frame: &ServerFrame) {
        let text = encode_server(frame);
        for c in self.clients.values().filter(|c| c.role.is_some()) {
            let _ = c.out.send(text.clone());
        }
    }

    fn handle(&mut self, session: &mut Session, id: u64, text: &str) {
        let frame = match decode_client(text) {
            Ok(f) => f,
            Err(e) => return self.error(id, ErrorCode::Malformed, e.to_string()),
        };
        let role = self.clients.get(&id).and_then(|c| c.role);
        match (&frame, role) {
            (ClientFrame::Hello { version, role: wanted }, _) => {
                if *version != PROTOCOL_VERSION {
                    return self.error(
                        id,
                        ErrorCode::VersionMismatch,
                        format!("server speaks version {PROTOCOL_VERSION}"),
                    );
                }
                if *wanted == ClientRole::Controller && self.controller.is_some_and(|c| c != id) {
                    return self.error(id, ErrorCode::ControllerConflict, "another client holds control");
                }
                if *wanted == ClientRole::Controller {
                    self.controller = Some(id);
                } else if self.controller == Some(id) {
                    self.controller = None;
                }
                if let Some(c) = self.clients.get_mut(&id) {
                    c.role = Some(*wanted);
                }
                self.send(
                    id,
                    &ServerFrame::Hello {
                        version: PROTOCOL_VERSION,
                        role: *wanted,
                    },
                );
                self.send(
                    id,
                    &ServerFrame::Snapshot {
                        version: PROTOCOL_VERSION,
                        world: session.static_world(),
                        state: session.telemetry(),
                    },
                );
            }
            (_, None) => self.error(id, ErrorCode::HelloRequired, "send hello first"),
            (_, Some(ClientRole::Observer)) => self.error(id, ErrorCode::NotController, "observers cannot send commands"),
            (_, Some(ClientRole::Controller)) => match session.submit(&frame) {
                Ok(()) => {}
                Err(ProtocolError::Malformed { .. }) => self.error(id, ErrorCode::Malformed, "malformed"),
                Err(e) => self.error(id, ErrorCode::InvalidRequest, e.to_string()),
            },
        }
    }
}

fn write_record(session: &Session, path: &Option<PathBuf>) {
    if let Some(p) = path {
        if let Ok(text) = serde_json::to_string_pretty(&session.command_script()) {
            let _ = std::fs::write(p, text);
        }
    }
}

fn sim_loop(
    mut session: Session,
    rx: Receiver<Inbound>,
    cfg: ServeConfig,
    stop: Arc<AtomicBool>,
) -> Result<(RunSummary, CommandScript), SessionError> {
    let mut hub = Hub {
        clients: BTreeMap::new(),
        controller: None,
    };
    let dt = session.scenario().dt;
    let every = cfg.telemetry_every.max(1);
    let mut clock: Option<(Instant, u64)> = None;
    let mut recorded = false;
    while !stop.load(Ordering::SeqCst) {
        loop {
            match rx.try_recv() {
                Ok(Inbound::Connected { id, out }) => {
                    hub.clients.insert(id, Client { out, role: None });
                }
                Ok(Inbound::Text { id, text }) => hub.handle(&mut session, id, &text),
                Ok(Inbound::Disconnected { id }) => {
                    hub.clients.remove(&id);
                    if hub.controller == Some(id) {
                        hub.controller = None;
                    }
                }
                Err(_) => break,
            }
        }
        if session.is_finished() {
            if !recorded {
                write_record(&session, &cfg.record);
                recorded = true;
            }
            if cfg.exit_when_finished {
                break;
            }
            thread::sleep(POLL);
            continue;
        }
        if cfg.wait_for_controller && hub.controller.is_none() && clock.is_none() {
            thread::sleep(POLL);
            continue;
        }
        let (start, tick0) = *clock.get_or_insert((Instant::now(), session.tick()));
        let out = session.step()?;
        for e in &out.events {
            hub.broadcast(&ServerFrame::Confirm {
                tick: out.tick,
                event: *e,
                params: session.params_view(),
            });
        }
        if out.tick % every == 0 {
            hub.broadcast(&ServerFrame::Delta {
                state: session.telemetry(),
            });
        }
        if cfg.rtf > 0.0 {
            let due = start + Duration::from_secs_f64((out.tick - tick0) as f64 * dt / cfg.rtf);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
        }
    }
    if !recorded {
        write_record(&session, &cfg.record);
    }
    // dropping the hub closes every outbound channel, which ends the connection threads
    drop(hub);
    Ok((session.summary(), session.command_script()))
}

//! Scenario loading, the closed-loop session, metrics, and the live service.

pub mod metrics;
pub mod protocol;
pub mod scenario;
pub mod server;
pub mod session;

pub use metrics::{CommandEvent, CommandPayload, CommandSource, CommandStatus, CsvSink, CSV_HEADER, MemorySink, MetricsSample, MetricsSink, NullSink, RunSummary};
pub use scenario::{load_scenario, Scenario, ScenarioError};
pub use server::{serve, ServeConfig, ServerHandle};
pub use session::{replay, run, CommandScript, Session, SessionError};

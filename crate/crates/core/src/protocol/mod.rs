//! Federated rounds: bucketing, client upload, server aggregation,
//! broadcast, decryption and model update over a simulated transport.

pub mod bucket;
pub mod client;
pub mod config;
pub mod message;
pub mod overflow;
pub mod server;
pub mod sim;
pub mod transport;

pub use bucket::Bucketing;
pub use client::{Aggregate, ClientState, RoundContext, UploadTrace};
pub use config::{BaselineError, ClipSchedule, DatasetSpec, Mode, RunConfig, Seeds};
pub use message::{
    BroadcastMessage, Payload, UploadMessage, WireContext, BROADCAST_HEADER_BYTES,
    UPLOAD_HEADER_BYTES,
};
pub use overflow::{
    baseline_lwe_encrypt, measure_overflow, sample_lwe_error, wrap_centered, wrap_levels,
};
pub use server::{server_aggregate, ServerState};
pub use sim::{
    write_metrics_csv, Evaluation, RoundMetrics, RunSummary, Simulation, METRICS_HEADER,
};
pub use transport::{ByteTally, Endpoint, Envelope, LogEntry, MessageKind, Transport};

//! Deterministic discrete-event simulation of a device fleet and its cloud.

mod events;
mod metrics;
pub mod protocol;
mod sim;

pub use events::EventQueue;
pub use metrics::{collect_fleet_metrics, FleetMetrics, GroupMetrics};
pub use protocol::{decode_message, decode_prefix, encode_message, DecodeError, Message, MessageKind, OtaAck, SegmentMetrics};
pub use sim::{
    run_fleet, run_sim, AdaptationRound, Candidate, CandidateSource, DecisionRecord, DeviceReport, DeviceSpec, Envelope, EvolutionSource, FleetReport,
    FleetRun, FleetSpec, ScheduleSpec, TemporalSummary, CLOUD_ID,
};

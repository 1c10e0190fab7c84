//! Piece-level swarm simulator.

mod bitmap;
mod config;
mod engine;
mod trace;

pub use bitmap::Bitmap;
pub use config::{ArrivalProcess, CapacitySpec, PieceSelection, ScenarioConfig, SeedMode, DEFAULT_PIECE_SIZE};
pub use engine::{
    run, snapshot_state, Flow, LeecherSummary, PeerStatus, RunMetadata, RunTotals, SimRun, Simulator,
    CAPACITY_TOLERANCE,
};
pub use trace::{Detail, EventKind, EventTrace, PeerSnapshot, Snapshot, Source, TraceRecord};

//! Deterministic discrete-event simulator of the mobile input-to-display
//! path.
//!
//! The pipeline model has five stages: input hardware, a per-application
//! event manager, the application itself, a per-application buffer manager,
//! and the display subsystem with its periodic sync pulse. Path designs plug
//! different event- and buffer-manager policies into that skeleton:
//!
//! * `legacy` — both managers synchronize with the sync pulse; no frame
//!   drops, no tearing, long latency.
//! * `presto-jitt` — events are delivered just in time for the resulting
//!   frame to make the next refresh, using a predicted drawing time;
//!   delayed frames may be dropped (never two in a row).
//! * `presto-jitt-par` — additionally lets the application write in place
//!   into the buffer being scanned out when the dirty region stays inside a
//!   small rectangle around the touch point and the write beats the scan.
//! * `presto-jitt-jep` — idealized partial-update variant: the display takes
//!   only the declared dirty region and updates in-display memory before the
//!   panel externalizes those rows.
//! * `vsync-off` — no pulse gating at all; swaps mid-scan and tears anywhere.
//!
//! A path manager binds designs to applications and can switch them at run
//! time without mixing any event across two designs.

pub mod config;
pub mod display;
pub mod domain;
pub mod engine;
pub mod input;
pub mod metrics;
pub mod pathmgr;
pub mod paths;
pub mod rng;
pub mod sim;

pub use config::{ScenarioConfig, SwitchSpec};
pub use domain::{
    AppModel, BufferState, DirtyModel, DirtyRegion, DisplayConfig, GraphicsBuffer, InputEvent,
    LatencyRecord, TAppDist, TouchSample,
};
pub use engine::{Engine, EngineError, SimTime};
pub use input::{InputHardwareModel, PredictorHorizon, TraceGenConfig};
pub use metrics::{LatencyStats, RunReport, StageMeans};
pub use paths::{JittConfig, ParConfig, PathDesign, PathKind, PredictorMode, PredictorState};
pub use rng::RandomStream;
pub use sim::{RunOutcome, Simulation};

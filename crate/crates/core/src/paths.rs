//! The pluggable path designs: the legacy vsync-synchronized path, the
//! just-in-time-trigger family (plain, position-aware rendering, just-enough
//! pixels) and the vsync-off baseline. This module holds the pure policy
//! decisions; `sim` wires them into the engine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::display::{next_pass, scanout_reach_time};
use crate::domain::{DirtyRegion, DisplayConfig, DomainError};
use crate::engine::SimTime;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("buffer manager invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Canonical path design names.
pub const LEGACY: &str = "legacy";
pub const PRESTO_JITT: &str = "presto-jitt";
pub const PRESTO_JITT_PAR: &str = "presto-jitt-par";
pub const PRESTO_JITT_JEP: &str = "presto-jitt-jep";
pub const VSYNC_OFF: &str = "vsync-off";

/// Behavior family of a path design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Legacy,
    Jitt,
    JittPar,
    JittJep,
    VsyncOff,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JittConfig {
    /// Predicted buffer ownership transfer time.
    pub t_out_pred_us: u64,
}

impl Default for JittConfig {
    fn default() -> Self {
        JittConfig { t_out_pred_us: 3_500 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ParConfig {
    pub rect_w: u32,
    pub rect_h: u32,
    /// Safety margin subtracted from the scanout-arrival deadline.
    pub guard_us: u64,
    /// Probability that a frame with changes outside the rectangle goes
    /// undetected. Dirty detection is otherwise exact; the sampling fraction
    /// of a real detector is report metadata only.
    pub detect_false_negative_prob: f64,
    pub sampled_fraction: f64,
}

impl Default for ParConfig {
    fn default() -> Self {
        ParConfig {
            rect_w: 200,
            rect_h: 200,
            guard_us: 0,
            detect_false_negative_prob: 0.0,
            sampled_fraction: 0.01,
        }
    }
}

/// One registered path design.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathDesign {
    pub name: String,
    pub kind: PathKind,
    /// Event delivery offset after the sync pulse (legacy only).
    #[serde(default)]
    pub em_offset_us: u64,
    /// Actual buffer ownership transfer duration for pulse/latch transfers.
    #[serde(default = "default_t_out")]
    pub t_out_us: u64,
    #[serde(default)]
    pub jitt: JittConfig,
    #[serde(default)]
    pub par: ParConfig,
}

fn default_t_out() -> u64 {
    3_500
}

impl PathDesign {
    pub fn new(name: &str, kind: PathKind) -> PathDesign {
        PathDesign {
            name: name.to_string(),
            kind,
            em_offset_us: 0,
            t_out_us: 3_500,
            jitt: JittConfig::default(),
            par: ParConfig::default(),
        }
    }

    /// The five built-in designs under their canonical names.
    pub fn builtin(name: &str) -> Option<PathDesign> {
        let kind = match name {
            LEGACY => PathKind::Legacy,
            PRESTO_JITT => PathKind::Jitt,
            PRESTO_JITT_PAR => PathKind::JittPar,
            PRESTO_JITT_JEP => PathKind::JittJep,
            VSYNC_OFF => PathKind::VsyncOff,
            _ => return None,
        };
        let mut d = PathDesign::new(name, kind);
        if kind == PathKind::VsyncOff {
            d.t_out_us = 0;
        }
        Some(d)
    }

    pub fn uses_jitt_trigger(&self) -> bool {
        matches!(self.kind, PathKind::Jitt | PathKind::JittPar | PathKind::JittJep)
    }
}

/// Prediction mode over the T_app window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PredictorMode {
    Mean,
    MeanPlusKsigma { k: f64 },
    WindowMax,
}

/// Tracks the recent T_app history; predicts per the configured mode.
#[derive(Clone, Debug)]
pub struct PredictorState {
    window: Vec<u64>,
    capacity: usize,
    mode: PredictorMode,
    prior_us: u64,
    frozen: bool,
}

pub const PREDICTOR_WINDOW: usize = 32;

impl PredictorState {
    pub fn new(mode: PredictorMode, prior_us: u64) -> PredictorState {
        PredictorState {
            window: Vec::with_capacity(PREDICTOR_WINDOW),
            capacity: PREDICTOR_WINDOW,
            mode,
            prior_us,
            frozen: false,
        }
    }

    /// Fills the window with a constant, as if warmed up on it.
    pub fn preseed(&mut self, value_us: u64) {
        self.window.clear();
        self.window.resize(self.capacity, value_us);
    }

    /// A frozen predictor ignores further observations (scripted scenarios).
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn update(&mut self, observed_us: u64) {
        debug_assert!(observed_us > 0);
        if self.frozen {
            return;
        }
        if self.window.len() == self.capacity {
            self.window.remove(0);
        }
        self.window.push(observed_us);
    }

    /// Predicted T_app. The prior holds until the window is full.
    pub fn predict(&self) -> u64 {
        if self.window.len() < self.capacity {
            return self.prior_us.max(1);
        }
        let n = self.window.len() as f64;
        let mean = self.window.iter().sum::<u64>() as f64 / n;
        let us = match self.mode {
            PredictorMode::Mean => mean,
            PredictorMode::MeanPlusKsigma { k } => {
                let var = self
                    .window
                    .iter()
                    .map(|&x| {
                        let d = x as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / (n - 1.0);
                mean + k * var.sqrt()
            }
            PredictorMode::WindowMax => *self.window.iter().max().unwrap() as f64,
        };
        (us + 0.5).floor().max(1.0) as u64
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }
}

/// Per-refresh-cycle bookkeeping for the drop rule and the report.
#[derive(Clone, Copy, Debug, Default)]
pub struct CycleFlags {
    pub delivered: bool,
    pub filled: bool,
    pub latched: bool,
    pub dropped: bool,
}

#[derive(Clone, Debug, Default)]
pub struct CycleLedger {
    pub cycles: Vec<CycleFlags>,
    /// A drop happened in the previous latch cycle.
    pub dropped_prev_cycle: bool,
    pub underpredictions: u64,
    pub produced_frames: u64,
    pub dropped_frames: u64,
    pub par_requests: u64,
    pub par_grants: u64,
    pub tearing_count: u64,
}

impl CycleLedger {
    pub fn flags_mut(&mut self, cycle: u64) -> &mut CycleFlags {
        let idx = cycle as usize;
        if self.cycles.len() <= idx {
            self.cycles.resize(idx + 1, CycleFlags::default());
        }
        &mut self.cycles[idx]
    }

    pub fn no_consecutive_drops(&self) -> bool {
        self.cycles.windows(2).all(|w| !(w[0].dropped && w[1].dropped))
    }
}

/// Event delivery instant of the legacy path for a pulse.
pub fn legacy_delivery_time(t_pulse: SimTime, offset_us: u64) -> SimTime {
    t_pulse.add_us(offset_us)
}

/// Expected-arrival schedule: anchor of the last observed arrival plus an
/// EWMA gap estimate.
#[derive(Clone, Copy, Debug)]
pub struct ArrivalSchedule {
    pub anchor: SimTime,
    pub gap_us: f64,
}

impl ArrivalSchedule {
    /// Expected arrival instant of the last event no later than `deadline`.
    /// None when even the anchor lies past the deadline.
    pub fn last_arrival_before(&self, deadline: SimTime) -> Option<SimTime> {
        if self.anchor > deadline {
            return None;
        }
        let span = deadline.delta_us(self.anchor) as f64;
        let k = (span / self.gap_us).floor();
        Some(self.anchor.add_us((k * self.gap_us).round() as u64))
    }
}

/// Trigger instant for the event manager: the expected arrival of the last
/// event that still leaves `T'_app + T'_out` before the refresh. Falls back
/// to the deadline itself when no arrival is expected by then; the caller
/// skips the frame if the buffer is empty at the trigger.
pub fn jitt_trigger_time(
    t_refresh: SimTime,
    t_app_pred_us: u64,
    t_out_pred_us: u64,
    arrivals: &ArrivalSchedule,
) -> SimTime {
    let deadline = t_refresh.sub_us(t_app_pred_us + t_out_pred_us);
    arrivals.last_arrival_before(deadline).unwrap_or(deadline)
}

/// Latch decision of the just-in-time buffer manager.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatchDecision {
    /// Nothing filled; the display keeps the previous frame.
    None,
    /// Latch this buffer.
    Latch { buffer: usize },
    /// Drop the older delayed buffer and latch the newer one.
    DropAndLatch { drop: usize, latch: usize },
}

/// Picks the buffer to latch at `t_refresh - T'_out`.
///
/// Two filled buffers mean the previous cycle underpredicted. The older one
/// is dropped unless the previous cycle already dropped, in which case the
/// delay propagates: the older latches and the newer waits.
pub fn jitt_latch(filled: &[usize], dropped_prev_cycle: bool) -> Result<LatchDecision, PathError> {
    match filled {
        [] => Ok(LatchDecision::None),
        [one] => Ok(LatchDecision::Latch { buffer: *one }),
        [older, newer] => {
            if dropped_prev_cycle {
                Ok(LatchDecision::Latch { buffer: *older })
            } else {
                Ok(LatchDecision::DropAndLatch { drop: *older, latch: *newer })
            }
        }
        more => Err(PathError::Invariant(format!(
            "{} filled buffers at latch; the pool is mismanaged",
            more.len()
        ))),
    }
}

/// Outcome of a position-aware buffer request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParDecision {
    /// Write in place into the busy_disp buffer; the scan of the rect's rows
    /// is expected at `row_deadline`.
    GrantInPlace { row_deadline: SimTime },
    /// Fall back to the free-buffer path.
    Deny,
}

/// The rectangle around the latest touch point within which in-place writes
/// are allowed, clamped to the screen.
pub fn par_rect(touch: (u32, u32), par: &ParConfig, display: &DisplayConfig) -> DirtyRegion {
    let (tx, ty) = touch;
    let hw = (par.rect_w / 2) as i64;
    let hh = (par.rect_h / 2) as i64;
    let x0 = tx as i64 - hw;
    let y0 = ty as i64 - hh;
    DirtyRegion::rect(
        x0.max(0),
        y0.max(0),
        (x0 + par.rect_w as i64).min(display.w as i64),
        (y0 + par.rect_h as i64).min(display.h as i64),
        display.w,
        display.h,
    )
    .unwrap_or_else(|_| DirtyRegion::rect(0, 0, 1, 1, display.w, display.h).unwrap())
}

/// Grants an in-place write iff nothing changed outside the touch rectangle,
/// the predicted dirty region fits inside it, and the application is expected
/// to finish before scanout next reaches the rectangle's top row.
#[allow(clippy::too_many_arguments)]
pub fn par_decide(
    latest_touch: (u32, u32),
    predicted_dirty: &DirtyRegion,
    outside_change: bool,
    t_app_pred_us: u64,
    par: &ParConfig,
    display: &DisplayConfig,
    now: SimTime,
) -> Result<ParDecision, DomainError> {
    if outside_change || predicted_dirty.full_frame {
        return Ok(ParDecision::Deny);
    }
    let rect = par_rect(latest_touch, par, display);
    if !rect.contains(predicted_dirty) {
        return Ok(ParDecision::Deny);
    }
    let finish = now.add_us(t_app_pred_us + par.guard_us);
    let row_deadline = next_pass(finish, rect.y0, display)?;
    // next_pass(finish) >= finish by construction; a strict race requires the
    // write (plus guard) to end before the scan reaches the top row.
    if finish < row_deadline {
        Ok(ParDecision::GrantInPlace { row_deadline })
    } else {
        Ok(ParDecision::Deny)
    }
}

/// Whether a filled frame makes the in-progress refresh under just-enough
/// pixels: accepted iff it was filled strictly before scanout reaches the
/// dirty region's first row this cycle.
pub fn jep_submit(
    dirty: &DirtyRegion,
    filled_at: SimTime,
    t_pulse: SimTime,
    display: &DisplayConfig,
) -> Result<bool, DomainError> {
    if dirty.full_frame && filled_at > t_pulse {
        return Ok(false);
    }
    let reach = t_pulse.add_us(scanout_reach_time(dirty.y0, display)?);
    Ok(filled_at < reach)
}

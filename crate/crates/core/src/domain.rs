//! Shared domain types: touch events, graphics buffers, display geometry,
//! application models and per-event latency records.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("invalid buffer transition {from:?} -> {to:?}")]
    IllegalTransition { from: BufferState, to: BufferState },
    #[error("{0}")]
    Invalid(String),
}

/// One physical touch sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TouchSample {
    pub seq: u64,
    pub t_physical: SimTime,
    pub x: u32,
    pub y: u32,
}

/// A touch sample after the input hardware: `t_device` is when the driver
/// hands it to the event manager.
#[derive(Clone, Copy, Debug)]
pub struct InputEvent {
    pub sample: TouchSample,
    pub t_device: SimTime,
}

/// Ownership states of a graphics buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferState {
    Free,
    BusyApp,
    Filled,
    BusyDisp,
}

/// Accepts exactly the legal ownership machine:
/// free -> busy_app -> filled -> busy_disp -> free, plus the in-place write
/// into a busy_disp buffer when `par_flag` is set.
pub fn validate_buffer_transition(
    from: BufferState,
    to: BufferState,
    par_flag: bool,
) -> Result<(), DomainError> {
    use BufferState::*;
    let ok = matches!(
        (from, to),
        (Free, BusyApp) | (BusyApp, Filled) | (Filled, BusyDisp) | (BusyDisp, Free)
    ) || (par_flag && from == BusyDisp && to == BusyDisp);
    if ok {
        Ok(())
    } else {
        Err(DomainError::IllegalTransition { from, to })
    }
}

/// Inclusive-exclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirtyRegion {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub full_frame: bool,
}

impl DirtyRegion {
    pub fn full(w: u32, h: u32) -> DirtyRegion {
        DirtyRegion { x0: 0, y0: 0, x1: w, y1: h, full_frame: true }
    }

    /// Rectangle clamped to the screen; empty input is rejected.
    pub fn rect(x0: i64, y0: i64, x1: i64, y1: i64, w: u32, h: u32) -> Result<DirtyRegion, DomainError> {
        let cx0 = x0.clamp(0, w as i64) as u32;
        let cy0 = y0.clamp(0, h as i64) as u32;
        let cx1 = x1.clamp(0, w as i64) as u32;
        let cy1 = y1.clamp(0, h as i64) as u32;
        if cx0 >= cx1 || cy0 >= cy1 {
            return Err(DomainError::Invalid(format!(
                "empty dirty region ({x0},{y0})..({x1},{y1})"
            )));
        }
        Ok(DirtyRegion { x0: cx0, y0: cy0, x1: cx1, y1: cy1, full_frame: false })
    }

    pub fn contains(&self, other: &DirtyRegion) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

/// Panel geometry and scanout timing.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DisplayConfig {
    /// Width in pixels.
    pub w: u32,
    /// Height in pixels (scan direction is top-down by rows).
    pub h: u32,
    /// Refresh period in microseconds.
    pub t_sync_us: u64,
    /// Pixel externalization rate in pixels per second.
    pub scan_rate_px_s: f64,
}

impl Default for DisplayConfig {
    fn default() -> Self {
        DisplayConfig { w: 1440, h: 2560, t_sync_us: 16_667, scan_rate_px_s: 221e6 }
    }
}

impl DisplayConfig {
    /// Active scanout must fit the refresh period. A 1% slack absorbs
    /// profiled pixel rates that land a hair past the period.
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.w == 0 || self.h == 0 {
            return Err(DomainError::Invalid("display.w/h must be positive".into()));
        }
        if self.t_sync_us == 0 {
            return Err(DomainError::Invalid("display.t_sync_us must be positive".into()));
        }
        if !(self.scan_rate_px_s > 0.0) {
            return Err(DomainError::Invalid("display.scan_rate_px_s must be positive".into()));
        }
        let active_us = (self.w as f64) * (self.h as f64) / self.scan_rate_px_s * 1e6;
        if active_us > self.t_sync_us as f64 * 1.01 {
            return Err(DomainError::Invalid(format!(
                "display: active scanout {active_us:.0}us does not fit t_sync {}us",
                self.t_sync_us
            )));
        }
        Ok(())
    }
}

/// How the application dirties pixels each frame.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DirtyModel {
    /// Bounding box of the segment between consecutive drawn positions,
    /// inflated by the brush radius.
    Brush { radius_px: u32 },
    FullFrame,
}

/// Distribution of the application drawing time T_app.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TAppDist {
    Constant { us: u64 },
    TruncNormal { mean_us: f64, sigma_us: f64 },
    /// ln-space parameters.
    LogNormal { mu_ln: f64, sigma_ln: f64 },
    /// Scripted per-frame values, cycled when `repeat` is set.
    Sequence { values_us: Vec<u64>, repeat: bool },
}

/// Per-application workload model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AppModel {
    pub app_id: String,
    pub t_app: TAppDist,
    pub dirty_model: DirtyModel,
    /// Probability per frame that pixels outside the brush rectangle also change.
    #[serde(default)]
    pub outside_change_prob: f64,
}

impl AppModel {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.app_id.is_empty() {
            return Err(DomainError::Invalid("app_id must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.outside_change_prob) {
            return Err(DomainError::Invalid(format!(
                "apps[{}].outside_change_prob out of [0,1]",
                self.app_id
            )));
        }
        match &self.t_app {
            TAppDist::Constant { us } if *us == 0 => {
                Err(DomainError::Invalid(format!("apps[{}].t_app must be positive", self.app_id)))
            }
            TAppDist::Sequence { values_us, .. } if values_us.is_empty() => {
                Err(DomainError::Invalid(format!("apps[{}].t_app sequence is empty", self.app_id)))
            }
            _ => Ok(()),
        }
    }
}

/// Per-event stage timestamps. All timestamps are absolute simulation time;
/// when every stage is present they are non-decreasing in field order and the
/// end-to-end latency decomposes exactly into consecutive stage deltas.
#[derive(Clone, Debug)]
pub struct LatencyRecord {
    pub seq: u64,
    pub app_id: String,
    pub t_physical: SimTime,
    pub t_device: SimTime,
    pub t_delivered: SimTime,
    pub t_draw_start: SimTime,
    pub t_draw_end: SimTime,
    pub t_ownership: SimTime,
    pub t_externalized: SimTime,
    pub path_tag: String,
    pub frame_seq: u64,
    /// Transfer duration charged to this frame (zero for in-place writes).
    pub t_out_us: u64,
    pub touch_y: u32,
    pub dropped: bool,
    pub torn: bool,
}

impl LatencyRecord {
    pub fn end_to_end_us(&self) -> u64 {
        self.t_externalized.delta_us(self.t_physical)
    }

    /// (T_input, wait_delivery, T_app, wait_ownership, T_out, T_disp) in us.
    /// Sums exactly to `end_to_end_us`.
    pub fn decompose(&self) -> [u64; 6] {
        let t_input = self.t_device.delta_us(self.t_physical);
        let wait_delivery = self.t_delivered.delta_us(self.t_device);
        let t_app = self.t_draw_end.delta_us(self.t_delivered);
        let own_gap = self.t_ownership.delta_us(self.t_draw_end);
        let t_out = self.t_out_us.min(own_gap);
        let wait_ownership = own_gap - t_out;
        let t_disp = self.t_externalized.delta_us(self.t_ownership);
        [t_input, wait_delivery, t_app, wait_ownership, t_out, t_disp]
    }

    pub fn check_monotone(&self) -> Result<(), DomainError> {
        let ts = [
            self.t_physical,
            self.t_device,
            self.t_delivered,
            self.t_draw_start,
            self.t_draw_end,
            self.t_ownership,
            self.t_externalized,
        ];
        if ts.windows(2).all(|w| w[0] <= w[1]) {
            Ok(())
        } else {
            Err(DomainError::Invalid(format!("record {} timestamps not monotone: {ts:?}", self.seq)))
        }
    }
}

/// One buffer slot of an application's pool.
#[derive(Clone, Debug)]
pub struct GraphicsBuffer {
    pub id: usize,
    pub state: BufferState,
    pub frame_seq: u64,
    pub par_write: bool,
    pub fill_start: SimTime,
    pub fill_end: SimTime,
}

/// Fixed-size buffer pool enforcing the ownership machine and conservation.
pub struct BufferPool {
    buffers: Vec<GraphicsBuffer>,
}

impl BufferPool {
    pub fn new(size: usize) -> BufferPool {
        assert!(size >= 2, "buffer pool needs at least two slots");
        BufferPool {
            buffers: (0..size)
                .map(|id| GraphicsBuffer {
                    id,
                    state: BufferState::Free,
                    frame_seq: 0,
                    par_write: false,
                    fill_start: SimTime::ZERO,
                    fill_end: SimTime::ZERO,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn get(&self, id: usize) -> &GraphicsBuffer {
        &self.buffers[id]
    }

    pub fn count(&self, state: BufferState) -> usize {
        self.buffers.iter().filter(|b| b.state == state).count()
    }

    /// Lowest-id free buffer, if any.
    pub fn find_free(&self) -> Option<usize> {
        self.buffers.iter().find(|b| b.state == BufferState::Free).map(|b| b.id)
    }

    /// Filled buffers ordered by frame sequence.
    pub fn filled_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .buffers
            .iter()
            .filter(|b| b.state == BufferState::Filled)
            .map(|b| b.id)
            .collect();
        ids.sort_by_key(|&id| self.buffers[id].frame_seq);
        ids
    }

    pub fn busy_disp_id(&self) -> Option<usize> {
        self.buffers.iter().find(|b| b.state == BufferState::BusyDisp).map(|b| b.id)
    }

    pub fn transition(
        &mut self,
        id: usize,
        to: BufferState,
        par_flag: bool,
    ) -> Result<(), DomainError> {
        let from = self.buffers[id].state;
        validate_buffer_transition(from, to, par_flag)?;
        if to == BufferState::BusyDisp && !(par_flag && from == BufferState::BusyDisp) {
            // At most one busy_disp per application at any instant.
            if self.busy_disp_id().is_some() {
                return Err(DomainError::Invalid(format!(
                    "buffer {id}: a busy_disp buffer already exists"
                )));
            }
        }
        self.buffers[id].state = to;
        self.buffers[id].par_write = par_flag && to == BufferState::BusyDisp;
        Ok(())
    }

    pub fn set_fill(&mut self, id: usize, frame_seq: u64, start: SimTime, end: SimTime) {
        let b = &mut self.buffers[id];
        b.frame_seq = frame_seq;
        b.fill_start = start;
        b.fill_end = end;
    }

    /// Drop-recovery action of the just-in-time buffer manager: a delayed
    /// filled buffer goes straight back to free without being scanned out.
    /// This is the one sanctioned bypass of the filled->busy_disp->free walk.
    pub fn drop_filled(&mut self, id: usize) -> Result<(), DomainError> {
        if self.buffers[id].state != BufferState::Filled {
            return Err(DomainError::Invalid(format!(
                "buffer {id} cannot be dropped from {:?}",
                self.buffers[id].state
            )));
        }
        self.buffers[id].state = BufferState::Free;
        self.buffers[id].par_write = false;
        Ok(())
    }

    /// |free|+|busy_app|+|filled|+|busy_disp| always equals the pool size;
    /// states partition the pool, so this checks the partition is sane.
    pub fn conservation_holds(&self) -> bool {
        use BufferState::*;
        self.count(Free) + self.count(BusyApp) + self.count(Filled) + self.count(BusyDisp)
            == self.buffers.len()
    }
}

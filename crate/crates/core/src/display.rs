//! Scanout timing model: sync pulses, sequential row externalization and
//! tearing detection.
//!
//! The panel is scanned top-down at a fixed pixel rate; row `y` is reached
//! `y*W/scan_rate` after the pulse and blanking fills the remainder of the
//! refresh period. The first pulse fires at t=0.

use crate::domain::{DirtyRegion, DisplayConfig, DomainError};
use crate::engine::SimTime;

/// Microseconds after a sync pulse at which scanout reaches row `y`.
///
/// Pixel-rate model, `floor(y*W/scan_rate)` in integer microseconds. When
/// the active region exactly fills the period this equals `t_sync*y/H`.
pub fn scanout_reach_time(y: u32, cfg: &DisplayConfig) -> Result<u64, DomainError> {
    if y > cfg.h {
        return Err(DomainError::Invalid(format!("row {y} out of range 0..={}", cfg.h)));
    }
    let us = (y as f64) * (cfg.w as f64) / cfg.scan_rate_px_s * 1e6;
    Ok(us.floor() as u64)
}

/// Pulse time of refresh cycle `n`.
pub fn pulse_at(cycle: u64, cfg: &DisplayConfig) -> SimTime {
    SimTime(cycle * cfg.t_sync_us)
}

/// Cycle index containing time `t` (pulses at multiples of t_sync).
pub fn cycle_of(t: SimTime, cfg: &DisplayConfig) -> u64 {
    t.us() / cfg.t_sync_us
}

/// Externalization instant of row `y` for a frame latched into cycle whose
/// pulse is `t_pulse`.
pub fn externalize(t_pulse: SimTime, y: u32, cfg: &DisplayConfig) -> Result<SimTime, DomainError> {
    Ok(t_pulse.add_us(scanout_reach_time(y, cfg)?))
}

/// First instant at or after `t` at which scanout passes row `y`.
///
/// Content written into the externalizing buffer by `t` becomes visible at
/// this pass.
pub fn next_pass(t: SimTime, y: u32, cfg: &DisplayConfig) -> Result<SimTime, DomainError> {
    let reach = scanout_reach_time(y, cfg)?;
    let base_cycle = cycle_of(t, cfg);
    let candidate = pulse_at(base_cycle, cfg).add_us(reach);
    if candidate >= t {
        Ok(candidate)
    } else {
        Ok(pulse_at(base_cycle + 1, cfg).add_us(reach))
    }
}

/// True when a write into the externalizing buffer raced with the scanout of
/// its dirty rows: the write was still in progress when the scan entered the
/// region.
pub fn tearing_check(
    write_start: SimTime,
    write_end: SimTime,
    dirty: &DirtyRegion,
    t_pulse: SimTime,
    cfg: &DisplayConfig,
) -> Result<bool, DomainError> {
    let enter = t_pulse.add_us(scanout_reach_time(dirty.y0, cfg)?);
    let leave = t_pulse.add_us(scanout_reach_time(dirty.y1, cfg)?);
    Ok(write_end > enter && write_start < leave)
}

/// One application's contribution to a composed cycle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComposedLayer {
    pub app_index: usize,
    pub frame_seq: u64,
    pub dirty: DirtyRegion,
    /// Stacking position from config; higher wins on overlap.
    pub z_order: u32,
}

/// Composes at most one latched buffer per app into a single scanout source.
/// Composition is instantaneous; per-app dirty regions are retained so
/// externalization timing stays per-app. Layers sort by z then app index.
pub fn compose(mut layers: Vec<ComposedLayer>) -> Vec<ComposedLayer> {
    layers.sort_by_key(|l| (l.z_order, l.app_index));
    layers
}

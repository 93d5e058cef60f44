//! The scenario runner: per-application pipelines (event manager, executor,
//! buffer pool, display slot) driven by the discrete-event engine, plus the
//! comparison front-end.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig, TraceSpec};
use crate::display::{cycle_of, next_pass, pulse_at, scanout_reach_time, tearing_check};
use crate::domain::{
    BufferPool, BufferState, DirtyModel, DirtyRegion, DisplayConfig, DomainError, InputEvent,
    LatencyRecord, TAppDist, TouchSample,
};
use crate::engine::{Engine, EngineError, SimTime};
use crate::input::{apply_input_hardware, gen_linear_trace, load_trace, TraceGenConfig};
use crate::metrics::{finalize_report, write_event_csv, RunReport};
use crate::pathmgr::{PathManager, SwitchRecord};
use crate::paths::{
    jitt_latch, par_decide, par_rect, CycleLedger, LatchDecision, ParDecision, PathDesign,
    PathKind, PredictorState,
};
use crate::rng::RandomStream;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] crate::input::TraceError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<DomainError> for SimError {
    fn from(e: DomainError) -> Self {
        SimError::Invariant(e.to_string())
    }
}

impl From<crate::paths::PathError> for SimError {
    fn from(e: crate::paths::PathError) -> Self {
        SimError::Invariant(e.to_string())
    }
}

impl From<crate::pathmgr::PathMgrError> for SimError {
    fn from(e: crate::pathmgr::PathMgrError) -> Self {
        SimError::Invariant(e.to_string())
    }
}

/// Engine payloads.
#[derive(Clone, Debug)]
enum Ev {
    Pulse,
    Arrival { app: usize, idx: usize },
    /// Event-manager fallback trigger; `gen` invalidates stale deadlines.
    EmDeadline { app: usize, em_uid: u64, gen: u64 },
    /// Legacy delivery tick at pulse + offset.
    LegacyDeliver { app: usize, em_uid: u64 },
    DrawDone { app: usize, frame: u64 },
    /// Just-in-time latch point of one refresh cycle.
    Latch { app: usize, cycle: u64 },
    Switch { idx: usize },
}

/// One event-manager instance. During a path switch the old instance keeps
/// the drained events; arrivals go to the live (last) instance.
struct EmInstance {
    uid: u64,
    design: PathDesign,
    epoch: u64,
    queue: VecDeque<usize>,
    gen: u64,
    is_drain: bool,
    /// Scan cycle already served by a delivery; the trigger fires at most
    /// once per target refresh.
    served_cycle: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FrameState {
    Drawing,
    Filled,
    /// Ownership recorded (latched, queued, written in place, or dropped).
    Owned,
}

struct Frame {
    seq: u64,
    epoch: u64,
    path_tag: String,
    kind: PathKind,
    t_out_us: u64,
    events: Vec<usize>,
    t_delivered: SimTime,
    t_draw_start: SimTime,
    t_draw_end: SimTime,
    buffer: usize,
    par_in_place: bool,
    drawn: (u32, u32),
    dirty: DirtyRegion,
    /// Missed its intended slot iff draw_end > this (None: no prediction).
    miss_if_after: Option<SimTime>,
    /// Pulse of the cycle a granted in-place write races against.
    grant_pulse: Option<SimTime>,
    state: FrameState,
    owned_via: Option<PathKind>,
    torn: bool,
}

struct PendingDelivery {
    events: Vec<usize>,
    t_delivered: SimTime,
    design: PathDesign,
    epoch: u64,
}

struct QueuedFrame {
    frame: u64,
    buffer: Option<usize>,
    scan_cycle: u64,
}

struct DisplaySlot {
    frame: u64,
    buffer: Option<usize>,
    kind: PathKind,
}

/// Camera-style observation at one refresh: interpolated pen position and
/// the newest visible drawn head.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CameraRow {
    pub t_us: u64,
    pub pen_y: f64,
    pub head_y: Option<f64>,
}

struct AppState {
    app_id: String,
    t_app: TAppDist,
    dirty_model: DirtyModel,
    outside_change_prob: f64,
    events: Vec<InputEvent>,
    ems: Vec<EmInstance>,
    em_uid_ctr: u64,
    epoch: u64,
    history: Vec<TouchSample>,
    pending: VecDeque<PendingDelivery>,
    drawing: Option<u64>,
    blocked: bool,
    frames: Vec<Frame>,
    pool: BufferPool,
    predictor: PredictorState,
    ledger: CycleLedger,
    display: Option<DisplaySlot>,
    disp_queue: VecDeque<QueuedFrame>,
    head_timeline: Vec<(SimTime, u32, u32)>,
    camera: Vec<CameraRow>,
    camera_cursor: usize,
    records: Vec<Option<LatencyRecord>>,
    resolved: usize,
    t_app_stream: RandomStream,
    outside_stream: RandomStream,
    seq_idx: usize,
    frame_ctr: u64,
    last_drawn: Option<(u32, u32)>,
    last_arrival: Option<SimTime>,
    ewma_gap_us: f64,
    new_path_owned: bool,
}

impl AppState {
    fn live_em(&mut self) -> &mut EmInstance {
        self.ems.last_mut().expect("live event manager")
    }

    fn em_by_uid(&mut self, uid: u64) -> Option<&mut EmInstance> {
        self.ems.iter_mut().find(|e| e.uid == uid)
    }

    fn drain_complete(&self) -> bool {
        let drains_empty = self.ems.iter().filter(|e| e.is_drain).all(|e| e.queue.is_empty());
        let old_frames_owned = self
            .frames
            .iter()
            .filter(|f| f.epoch < self.epoch)
            .all(|f| f.state == FrameState::Owned);
        let old_pending = self.pending.iter().any(|p| p.epoch < self.epoch);
        drains_empty && old_frames_owned && !old_pending
    }

    fn pipeline_idle(&self) -> bool {
        self.ems.iter().all(|e| e.queue.is_empty())
            && self.pending.is_empty()
            && self.drawing.is_none()
            && self.frames.iter().all(|f| f.state == FrameState::Owned)
    }

    fn jitt_design(&self) -> Option<&PathDesign> {
        self.ems
            .iter()
            .rev()
            .map(|e| &e.design)
            .find(|d| d.uses_jitt_trigger())
    }
}

/// Per-application results of one run.
pub struct AppOutcome {
    pub app_id: String,
    pub design_label: String,
    pub report: RunReport,
    pub records: Vec<LatencyRecord>,
    pub incomplete_events: u64,
    pub camera: Vec<CameraRow>,
    /// Mean gap/velocity latency over the camera log.
    pub direct_latency_us: Option<f64>,
    pub no_consecutive_drop_cycles: bool,
}

pub struct RunOutcome {
    pub config_digest: String,
    pub master_seed: u64,
    pub apps: Vec<AppOutcome>,
    pub switches: Vec<SwitchRecord>,
    pub observed_cycles: u64,
}

/// Full scenario simulation. Single-threaded per run; independent runs share
/// nothing mutable.
pub struct Simulation {
    cfg: ScenarioConfig,
    display: DisplayConfig,
    apps: Vec<AppState>,
    mgr: PathManager,
    horizon_us: u64,
}

impl Simulation {
    pub fn run(cfg: &ScenarioConfig) -> Result<RunOutcome, SimError> {
        Self::run_with_traces(cfg, None)
    }

    /// Runs with externally supplied traces (keyed by app order) instead of
    /// the configured trace specs.
    pub fn run_with_traces(
        cfg: &ScenarioConfig,
        traces: Option<Vec<Vec<TouchSample>>>,
    ) -> Result<RunOutcome, SimError> {
        cfg.validate()?;
        let mut sim = Self::build(cfg, traces)?;
        sim.execute()
    }

    fn build(cfg: &ScenarioConfig, traces: Option<Vec<Vec<TouchSample>>>) -> Result<Simulation, SimError> {
        let display = cfg.display;
        let mut mgr = PathManager::new(&cfg.default_path);
        for design in &cfg.paths {
            mgr.register_path(design.clone(), true)
                .map_err(|e| SimError::Invariant(e.to_string()))?;
        }

        let mut apps = Vec::with_capacity(cfg.apps.len());
        for (i, app_cfg) in cfg.apps.iter().enumerate() {
            let preference = cfg
                .bindings
                .iter()
                .find(|b| b.app_id == app_cfg.app_id)
                .map(|b| b.path.as_str())
                .unwrap_or(&cfg.default_path);
            let current = mgr.bind_at_launch(&app_cfg.app_id, preference)?.current_path.clone();
            let design = mgr.resolve(&current).clone();

            let samples = match (&traces, &app_cfg.trace) {
                (Some(t), _) => t.get(i).cloned().ok_or_else(|| {
                    SimError::Invariant(format!("no injected trace for app {}", app_cfg.app_id))
                })?,
                (None, TraceSpec::Generate { speed_mm_s, speed_sigma_mm_s, dpi }) => {
                    let gen_cfg = TraceGenConfig {
                        duration_s: cfg.run.duration_s,
                        speed_mm_s: *speed_mm_s,
                        speed_sigma_mm_s: *speed_sigma_mm_s,
                        dpi: *dpi,
                        sample_rate_hz: cfg.input.sample_rate_hz,
                    };
                    let mut stream = RandomStream::derive(
                        cfg.run.master_seed,
                        &format!("app/{}/trace", app_cfg.app_id),
                    );
                    gen_linear_trace(&gen_cfg, &display, &mut stream)?
                }
                (None, TraceSpec::File { path }) => load_trace(path, &display)?,
            };
            let mut hw_stream = RandomStream::derive(
                cfg.run.master_seed,
                &format!("app/{}/input-hw", app_cfg.app_id),
            );
            let events = apply_input_hardware(&samples, &cfg.input, &mut hw_stream);

            let mut predictor =
                PredictorState::new(cfg.prediction.t_app_mode, cfg.prediction.t_app_prior_us);
            if let Some(seed) = cfg.prediction.t_app_preseed_us {
                predictor.preseed(seed);
            }
            if cfg.prediction.freeze {
                predictor.freeze();
            }

            let n_events = events.len();
            apps.push(AppState {
                app_id: app_cfg.app_id.clone(),
                t_app: app_cfg.t_app.clone(),
                dirty_model: app_cfg.dirty_model,
                outside_change_prob: app_cfg.outside_change_prob,
                events,
                ems: vec![EmInstance {
                    uid: 0,
                    design,
                    epoch: 0,
                    queue: VecDeque::new(),
                    gen: 0,
                    is_drain: false,
                    served_cycle: None,
                }],
                em_uid_ctr: 1,
                epoch: 0,
                history: Vec::new(),
                pending: VecDeque::new(),
                drawing: None,
                blocked: false,
                frames: Vec::new(),
                pool: BufferPool::new(app_cfg.buffer_pool),
                predictor,
                ledger: CycleLedger::default(),
                display: None,
                disp_queue: VecDeque::new(),
                head_timeline: Vec::new(),
                camera: Vec::new(),
                camera_cursor: 0,
                records: vec![None; n_events],
                resolved: 0,
                t_app_stream: RandomStream::derive(
                    cfg.run.master_seed,
                    &format!("app/{}/t-app", app_cfg.app_id),
                ),
                outside_stream: RandomStream::derive(
                    cfg.run.master_seed,
                    &format!("app/{}/outside", app_cfg.app_id),
                ),
                seq_idx: 0,
                frame_ctr: 0,
                last_drawn: None,
                last_arrival: None,
                ewma_gap_us: 1e6 / cfg.input.sample_rate_hz,
                new_path_owned: false,
            });
        }

        let horizon_us = (cfg.run.duration_s * 1e6) as u64;
        Ok(Simulation { cfg: cfg.clone(), display, apps, mgr, horizon_us })
    }

    fn execute(&mut self) -> Result<RunOutcome, SimError> {
        let mut engine: Engine<Ev> = Engine::new();
        engine.schedule(SimTime::ZERO, "pulse", Ev::Pulse)?;
        for (a, app) in self.apps.iter().enumerate() {
            for (idx, ev) in app.events.iter().enumerate() {
                engine.schedule(ev.t_device, "arrival", Ev::Arrival { app: a, idx })?;
            }
        }
        for (idx, sw) in self.cfg.switches.iter().enumerate() {
            engine.schedule(SimTime(sw.t_us), "switch", Ev::Switch { idx })?;
        }

        let last_device = self
            .apps
            .iter()
            .flat_map(|a| a.events.last())
            .map(|e| e.t_device.us())
            .max()
            .unwrap_or(0);
        let t_sync = self.display.t_sync_us;
        let mut end = SimTime(last_device.max(self.horizon_us) + 8 * t_sync);
        let cap = end.add_us(2_000_000);
        loop {
            while let Some((t, _tag, ev)) = engine.pop_until(end) {
                self.handle(&mut engine, t, ev)?;
            }
            let resolved = self.apps.iter().all(|a| a.resolved == a.records.len());
            let switches_done =
                self.apps.iter().all(|a| self.mgr.in_flight(&a.app_id).is_none());
            if (resolved && switches_done) || end >= cap {
                break;
            }
            end = end.add_us(10 * t_sync).min(cap);
        }

        self.finish()
    }

    fn handle(&mut self, engine: &mut Engine<Ev>, t: SimTime, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Pulse => self.on_pulse(engine, t),
            Ev::Arrival { app, idx } => self.on_arrival(engine, t, app, idx),
            Ev::EmDeadline { app, em_uid, gen } => self.on_em_deadline(engine, t, app, em_uid, gen),
            Ev::LegacyDeliver { app, em_uid } => self.on_legacy_deliver(engine, t, app, em_uid),
            Ev::DrawDone { app, frame } => self.on_draw_done(engine, t, app, frame),
            Ev::Latch { app, cycle } => self.on_latch(engine, t, app, cycle),
            Ev::Switch { idx } => self.on_switch(engine, t, idx),
        }
    }

    fn next_pulse_at_or_after(&self, t: SimTime) -> SimTime {
        let ts = self.display.t_sync_us;
        SimTime(t.us().div_ceil(ts) * ts)
    }

    // ------------------------------------------------------------------
    // Pulse
    // ------------------------------------------------------------------

    fn on_pulse(&mut self, engine: &mut Engine<Ev>, t: SimTime) -> Result<(), SimError> {
        let cycle = cycle_of(t, &self.display);
        engine.schedule(t.add_us(self.display.t_sync_us), "pulse", Ev::Pulse)?;

        for a in 0..self.apps.len() {
            self.promote_display(a, cycle)?;
            self.legacy_transfer(a, t, cycle)?;
            self.schedule_legacy_delivers(engine, a, t)?;
            self.schedule_jitt_cycle(engine, a, t, cycle)?;
            self.camera_sample(a, t);
            self.retry_blocked(engine, a, t)?;
            self.maybe_complete_switch(engine, a, t)?;
        }
        Ok(())
    }

    /// Moves a queued frame onto the panel, releasing the replaced buffer.
    fn promote_display(&mut self, a: usize, cycle: u64) -> Result<(), SimError> {
        let app = &mut self.apps[a];
        let due = app.disp_queue.front().map(|q| q.scan_cycle <= cycle).unwrap_or(false);
        if due {
            let q = app.disp_queue.pop_front().unwrap();
            if let Some(slot) = &app.display {
                if let Some(b) = slot.buffer {
                    app.pool.transition(b, BufferState::Free, false)?;
                }
            }
            if let Some(b) = q.buffer {
                app.pool.transition(b, BufferState::BusyDisp, false)?;
            }
            let kind = app.frames[q.frame as usize].kind;
            app.display = Some(DisplaySlot { frame: q.frame, buffer: q.buffer, kind });
        } else if let Some(slot) = &app.display {
            // Under just-enough pixels the panel reads from in-display
            // memory, so the front buffer releases once its scan cycle ends;
            // other designs retain it until a replacement arrives because
            // in-place writes target it.
            let live_jep = app
                .ems
                .last()
                .map(|e| e.design.kind == PathKind::JittJep)
                .unwrap_or(false);
            if slot.kind == PathKind::JittJep || live_jep {
                if let Some(b) = slot.buffer {
                    app.pool.transition(b, BufferState::Free, false)?;
                    app.display.as_mut().unwrap().buffer = None;
                }
            }
        }
        debug_assert!(app.pool.conservation_holds());
        Ok(())
    }

    /// Legacy buffer manager: one ownership transfer per pulse, oldest frame
    /// first; the frame is scanned out starting at the next pulse.
    fn legacy_transfer(&mut self, a: usize, t: SimTime, cycle: u64) -> Result<(), SimError> {
        let drain_complete = self.apps[a].drain_complete();
        let epoch = self.apps[a].epoch;
        let candidate = {
            let app = &self.apps[a];
            app.frames
                .iter()
                .filter(|f| {
                    f.state == FrameState::Filled
                        && f.kind == PathKind::Legacy
                        && (f.epoch < epoch || drain_complete)
                })
                .map(|f| f.seq)
                .min()
        };
        let Some(fseq) = candidate else { return Ok(()) };
        let t_out = self.apps[a].frames[fseq as usize].t_out_us;
        let own_done = t.add_us(t_out);
        let scan_pulse = self.next_pulse_at_or_after(SimTime(own_done.us() + 1));
        let scan_cycle = cycle_of(scan_pulse, &self.display);
        debug_assert!(scan_cycle > cycle);
        self.record_ownership(a, fseq, own_done, ExtRule::AtPulse(scan_pulse), scan_cycle, false)?;
        let buffer = self.apps[a].frames[fseq as usize].buffer;
        self.apps[a].disp_queue.push_back(QueuedFrame {
            frame: fseq,
            buffer: Some(buffer),
            scan_cycle,
        });
        Ok(())
    }

    fn schedule_legacy_delivers(
        &mut self,
        engine: &mut Engine<Ev>,
        a: usize,
        t: SimTime,
    ) -> Result<(), SimError> {
        let ticks: Vec<(u64, u64)> = self.apps[a]
            .ems
            .iter()
            .filter(|em| em.design.kind == PathKind::Legacy)
            .map(|em| (em.uid, em.design.em_offset_us))
            .collect();
        for (uid, offset) in ticks {
            engine.schedule(
                t.add_us(offset),
                "legacy_deliver",
                Ev::LegacyDeliver { app: a, em_uid: uid },
            )?;
        }
        Ok(())
    }

    /// Schedules this cycle's latch point and the event-manager fallback for
    /// just-in-time designs.
    fn schedule_jitt_cycle(
        &mut self,
        engine: &mut Engine<Ev>,
        a: usize,
        t: SimTime,
        cycle: u64,
    ) -> Result<(), SimError> {
        let Some(design) = self.apps[a].jitt_design().cloned() else { return Ok(()) };
        let next_refresh = pulse_at(cycle + 1, &self.display);
        let latch_t = next_refresh.sub_us(design.jitt.t_out_pred_us);
        if latch_t >= t {
            engine.schedule(latch_t, "latch", Ev::Latch { app: a, cycle })?;
        }
        // Fallback trigger in case arrivals stop before the deadline.
        let live_is_jitt = {
            let app = &self.apps[a];
            app.ems.last().map(|e| e.design.uses_jitt_trigger()).unwrap_or(false)
        };
        if live_is_jitt {
            let (uid, gen) = {
                let app = &mut self.apps[a];
                let em = app.live_em();
                (em.uid, em.gen)
            };
            if let Some(deadline) = self.current_deadline(a, t)? {
                if deadline >= t {
                    engine.schedule(
                        deadline,
                        "em_deadline",
                        Ev::EmDeadline { app: a, em_uid: uid, gen },
                    )?;
                }
            }
        }
        // Drain event managers still flush on their own deadlines.
        let drains: Vec<(u64, u64, u64)> = self.apps[a]
            .ems
            .iter()
            .filter(|e| e.is_drain && e.design.uses_jitt_trigger() && !e.queue.is_empty())
            .map(|e| (e.uid, e.gen, e.design.jitt.t_out_pred_us))
            .collect();
        for (uid, gen, t_out_pred) in drains {
            let t_app_pred = self.apps[a].predictor.predict();
            let deadline = next_refresh.sub_us(t_app_pred + t_out_pred);
            if deadline >= t {
                engine.schedule(deadline, "em_deadline", Ev::EmDeadline { app: a, em_uid: uid, gen })?;
            }
        }
        Ok(())
    }

    fn camera_sample(&mut self, a: usize, t: SimTime) {
        if t.us() > self.horizon_us {
            return;
        }
        let app = &mut self.apps[a];
        let pen_y = interp_pen_y(&app.events, t);
        while app.camera_cursor < app.head_timeline.len()
            && app.head_timeline[app.camera_cursor].0 <= t
        {
            app.camera_cursor += 1;
        }
        let head_y = if app.camera_cursor > 0 {
            Some(app.head_timeline[app.camera_cursor - 1].2 as f64)
        } else {
            None
        };
        app.camera.push(CameraRow { t_us: t.us(), pen_y, head_y });
    }

    // ------------------------------------------------------------------
    // Arrivals and deliveries
    // ------------------------------------------------------------------

    fn on_arrival(
        &mut self,
        engine: &mut Engine<Ev>,
        t: SimTime,
        a: usize,
        idx: usize,
    ) -> Result<(), SimError> {
        {
            let app = &mut self.apps[a];
            if let Some(prev) = app.last_arrival {
                let gap = t.delta_us(prev) as f64;
                app.ewma_gap_us = 0.9 * app.ewma_gap_us + 0.1 * gap;
            }
            app.last_arrival = Some(t);
            app.live_em().queue.push_back(idx);
        }
        let kind = self.apps[a].ems.last().unwrap().design.kind;
        match kind {
            PathKind::Legacy => {}
            PathKind::VsyncOff => {
                let idle = self.apps[a].drawing.is_none() && self.apps[a].pending.is_empty();
                if idle {
                    let uid = self.apps[a].ems.last().unwrap().uid;
                    self.deliver(engine, a, uid, t)?;
                }
            }
            PathKind::Jitt | PathKind::JittPar | PathKind::JittJep => {
                let Some(deadline) = self.current_deadline(a, t)? else { return Ok(()) };
                let gap = self.apps[a].ewma_gap_us;
                if t.us() as f64 + gap > deadline.us() as f64 {
                    let uid = self.apps[a].ems.last().unwrap().uid;
                    self.deliver(engine, a, uid, t)?;
                } else {
                    let (uid, gen) = {
                        let em = self.apps[a].ems.last().unwrap();
                        (em.uid, em.gen)
                    };
                    engine.schedule(
                        deadline,
                        "em_deadline",
                        Ev::EmDeadline { app: a, em_uid: uid, gen },
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Deadline by which the live event manager must deliver so the frame
    /// makes its target: the next refresh for plain just-in-time designs, or
    /// the next scanout pass over the touch region for in-place designs.
    fn current_deadline(&mut self, a: usize, now: SimTime) -> Result<Option<SimTime>, SimError> {
        let t_app_pred = self.apps[a].predictor.predict();
        let app = &self.apps[a];
        let Some(em) = app.ems.last() else { return Ok(None) };
        let design = &em.design;
        let touch = em
            .queue
            .back()
            .map(|&i| (app.events[i].sample.x, app.events[i].sample.y))
            .or_else(|| app.history.last().map(|s| (s.x, s.y)));
        let served = em.served_cycle;
        let jitt_deadline = |t_out_pred: u64| -> SimTime {
            let earliest = now.add_us(t_app_pred + t_out_pred);
            let mut target = self.next_pulse_at_or_after(earliest);
            if let Some(served) = served {
                let min_pulse = pulse_at(served + 1, &self.display);
                if target < min_pulse {
                    target = min_pulse;
                }
            }
            target.sub_us(t_app_pred + t_out_pred)
        };
        let deadline = match design.kind {
            PathKind::Legacy | PathKind::VsyncOff => return Ok(None),
            PathKind::Jitt => jitt_deadline(design.jitt.t_out_pred_us),
            PathKind::JittPar => {
                let in_place_possible = app
                    .display
                    .as_ref()
                    .map(|s| s.buffer.is_some())
                    .unwrap_or(false)
                    && app.disp_queue.is_empty()
                    && self.mgr.in_flight(&app.app_id).is_none()
                    && matches!(app.dirty_model, DirtyModel::Brush { .. });
                match (in_place_possible, touch) {
                    (true, Some(touch)) => {
                        let rect = par_rect(touch, &design.par, &self.display);
                        let earliest = now.add_us(t_app_pred + design.par.guard_us);
                        let mut pass = next_pass(earliest, rect.y0, &self.display)?;
                        if let Some(served) = served {
                            while cycle_of(pass, &self.display) <= served {
                                let next_cycle = cycle_of(pass, &self.display) + 1;
                                pass = pulse_at(next_cycle, &self.display)
                                    .add_us(scanout_reach_time(rect.y0, &self.display)?);
                            }
                        }
                        pass.sub_us(t_app_pred + design.par.guard_us)
                    }
                    _ => jitt_deadline(design.jitt.t_out_pred_us),
                }
            }
            PathKind::JittJep => {
                let y0_est = match (self.apps[a].dirty_model, touch) {
                    (DirtyModel::Brush { radius_px }, Some((_, ty))) => {
                        ty.saturating_sub(radius_px + 24)
                    }
                    _ => 0,
                };
                let earliest = now.add_us(t_app_pred);
                let mut pass = next_pass(earliest, y0_est, &self.display)?;
                if let Some(served) = served {
                    while cycle_of(pass, &self.display) <= served {
                        let next_cycle = cycle_of(pass, &self.display) + 1;
                        pass = pulse_at(next_cycle, &self.display)
                            .add_us(scanout_reach_time(y0_est, &self.display)?);
                    }
                }
                pass.sub_us(t_app_pred)
            }
        };
        Ok(Some(deadline.max(now)))
    }

    fn on_em_deadline(
        &mut self,
        engine: &mut Engine<Ev>,
        t: SimTime,
        a: usize,
        em_uid: u64,
        gen: u64,
    ) -> Result<(), SimError> {
        let valid = {
            let app = &mut self.apps[a];
            match app.em_by_uid(em_uid) {
                Some(em) => em.gen == gen && !em.queue.is_empty(),
                None => false,
            }
        };
        if valid {
            self.deliver(engine, a, em_uid, t)?;
        }
        Ok(())
    }

    fn on_legacy_deliver(
        &mut self,
        engine: &mut Engine<Ev>,
        t: SimTime,
        a: usize,
        em_uid: u64,
    ) -> Result<(), SimError> {
        let has_events = {
            let app = &mut self.apps[a];
            app.em_by_uid(em_uid).map(|em| !em.queue.is_empty()).unwrap_or(false)
        };
        if has_events {
            self.deliver(engine, a, em_uid, t)?;
        }
        Ok(())
    }

    fn deliver(&mut self, engine: &mut Engine<Ev>, a: usize, em_uid: u64, t: SimTime) -> Result<(), SimError> {
        let t_app_pred = self.apps[a].predictor.predict();
        let pd = {
            let app = &mut self.apps[a];
            let Some(em) = app.em_by_uid(em_uid) else { return Ok(()) };
            if em.queue.is_empty() {
                return Ok(());
            }
            em.gen += 1;
            let events: Vec<usize> = em.queue.drain(..).collect();
            PendingDelivery {
                events,
                t_delivered: t,
                design: em.design.clone(),
                epoch: em.epoch,
            }
        };
        if pd.design.uses_jitt_trigger() {
            let target_cycle = match pd.design.kind {
                PathKind::JittPar | PathKind::JittJep => {
                    let earliest =
                        t.add_us(t_app_pred + pd.design.par.guard_us);
                    let y_top = pd
                        .events
                        .last()
                        .map(|&i| {
                            let ty = self.apps[a].events[i].sample.y;
                            match (pd.design.kind, self.apps[a].dirty_model) {
                                (PathKind::JittPar, _) => {
                                    par_rect((0, ty), &pd.design.par, &self.display).y0
                                }
                                (_, DirtyModel::Brush { radius_px }) => {
                                    ty.saturating_sub(radius_px + 24)
                                }
                                _ => 0,
                            }
                        })
                        .unwrap_or(0);
                    cycle_of(next_pass(earliest, y_top, &self.display)?, &self.display)
                }
                _ => {
                    let earliest = t.add_us(t_app_pred + pd.design.jitt.t_out_pred_us);
                    cycle_of(self.next_pulse_at_or_after(earliest), &self.display)
                }
            };
            let app = &mut self.apps[a];
            if let Some(em) = app.em_by_uid(em_uid) {
                em.served_cycle = Some(em.served_cycle.map_or(target_cycle, |s| s.max(target_cycle)));
            }
        }
        let cycle = cycle_of(t, &self.display);
        self.apps[a].ledger.flags_mut(cycle).delivered = true;
        self.apps[a].pending.push_back(pd);
        self.try_start_executor(engine, a, t)?;
        Ok(())
    }

    // ------------------------------------------------------------------
    // Drawing
    // ------------------------------------------------------------------

    fn try_start_executor(&mut self, engine: &mut Engine<Ev>, a: usize, t: SimTime) -> Result<(), SimError> {
        while self.apps[a].drawing.is_none() && !self.apps[a].pending.is_empty() {
            if !self.begin_frame(engine, a, t)? {
                self.apps[a].blocked = true;
                break;
            }
        }
        Ok(())
    }

    fn retry_blocked(&mut self, engine: &mut Engine<Ev>, a: usize, t: SimTime) -> Result<(), SimError> {
        if self.apps[a].blocked && self.apps[a].pool.find_free().is_some() {
            self.apps[a].blocked = false;
            self.try_start_executor(engine, a, t)?;
        }
        Ok(())
    }

    fn sample_t_app(&mut self, a: usize) -> u64 {
        let app = &mut self.apps[a];
        let us = match &app.t_app {
            TAppDist::Constant { us } => *us as f64,
            TAppDist::TruncNormal { mean_us, sigma_us } => {
                app.t_app_stream.trunc_normal(*mean_us, *sigma_us)
            }
            TAppDist::LogNormal { mu_ln, sigma_ln } => app.t_app_stream.log_normal(*mu_ln, *sigma_ln),
            TAppDist::Sequence { values_us, repeat } => {
                let idx = if *repeat {
                    app.seq_idx % values_us.len()
                } else {
                    app.seq_idx.min(values_us.len() - 1)
                };
                values_us[idx] as f64
            }
        };
        app.seq_idx += 1;
        (us.max(1.0) + 0.5).floor() as u64
    }

    /// Starts drawing the front pending delivery. Returns false when no free
    /// buffer is available (the executor blocks until one frees).
    fn begin_frame(&mut self, engine: &mut Engine<Ev>, a: usize, now: SimTime) -> Result<bool, SimError> {
        let horizon = self.cfg.prediction.horizon_us;
        let t_app_pred = self.apps[a].predictor.predict();
        let t_app_actual = self.sample_t_app(a);

        // Position and dirty region of this frame.
        let (drawn, dirty, outside, latest_touch) = {
            let app = &mut self.apps[a];
            let pd = app.pending.front().expect("pending delivery");
            for &idx in &pd.events {
                let s = app.events[idx].sample;
                match app.history.binary_search_by_key(&s.seq, |h| h.seq) {
                    Ok(_) => {}
                    Err(pos) => app.history.insert(pos, s),
                }
            }
            if app.history.len() > 8 {
                let cut = app.history.len() - 8;
                app.history.drain(..cut);
            }
            let latest = *app.history.last().expect("history after delivery");
            let drawn = crate::input::predict_touch(&app.history, horizon, &self.display);
            let prev = app.last_drawn.unwrap_or(drawn);
            let (dirty, outside) = match app.dirty_model {
                DirtyModel::Brush { radius_px } => {
                    let r = radius_px as i64;
                    let x0 = (drawn.0 as i64).min(prev.0 as i64) - r;
                    let y0 = (drawn.1 as i64).min(prev.1 as i64) - r;
                    let x1 = (drawn.0 as i64).max(prev.0 as i64) + r + 1;
                    let y1 = (drawn.1 as i64).max(prev.1 as i64) + r + 1;
                    let rect = DirtyRegion::rect(x0, y0, x1, y1, self.display.w, self.display.h)
                        .map_err(|e| SimError::Invariant(e.to_string()))?;
                    let outside = app.outside_stream.bernoulli(app.outside_change_prob);
                    (rect, outside)
                }
                DirtyModel::FullFrame => (DirtyRegion::full(self.display.w, self.display.h), true),
            };
            (drawn, dirty, outside, (latest.x, latest.y))
        };

        let (design, epoch, t_delivered, kind) = {
            let pd = self.apps[a].pending.front().unwrap();
            (pd.design.clone(), pd.epoch, pd.t_delivered, pd.design.kind)
        };

        // Buffer acquisition; position-aware designs may write in place into
        // the buffer being scanned out.
        let mut par_in_place = false;
        let mut grant_pulse = None;
        let mut miss_if_after = None;
        let buffer;
        let in_place_possible = kind == PathKind::JittPar
            && self.apps[a].display.as_ref().map(|s| s.buffer.is_some()).unwrap_or(false)
            && self.apps[a].disp_queue.is_empty()
            && self.mgr.in_flight(&self.apps[a].app_id).is_none();
        if in_place_possible {
            self.apps[a].ledger.par_requests += 1;
            let detect_miss = outside
                && self.apps[a]
                    .outside_stream
                    .bernoulli(design.par.detect_false_negative_prob);
            let outside_eff = outside && !detect_miss;
            let decision = par_decide(
                latest_touch,
                &dirty,
                outside_eff,
                t_app_pred,
                &design.par,
                &self.display,
                now,
            )?;
            match decision {
                ParDecision::GrantInPlace { row_deadline } => {
                    self.apps[a].ledger.par_grants += 1;
                    let b = self.apps[a].display.as_ref().unwrap().buffer.unwrap();
                    self.apps[a].pool.transition(b, BufferState::BusyDisp, true)?;
                    buffer = Some(b);
                    par_in_place = true;
                    grant_pulse =
                        Some(pulse_at(cycle_of(row_deadline, &self.display), &self.display));
                    miss_if_after = Some(row_deadline.sub_us(design.par.guard_us + 1));
                }
                ParDecision::Deny => {
                    buffer = self.apps[a].pool.find_free();
                }
            }
        } else {
            buffer = self.apps[a].pool.find_free();
        }
        let Some(buffer) = buffer else { return Ok(false) };
        if !par_in_place {
            self.apps[a].pool.transition(buffer, BufferState::BusyApp, false)?;
            miss_if_after = match kind {
                PathKind::Jitt | PathKind::JittPar => {
                    let earliest = now.add_us(t_app_pred + design.jitt.t_out_pred_us);
                    let target = self.next_pulse_at_or_after(earliest);
                    Some(target.sub_us(design.jitt.t_out_pred_us))
                }
                PathKind::JittJep => {
                    let y0_est = dirty.y0;
                    let earliest = now.add_us(t_app_pred);
                    let pass = next_pass(earliest, y0_est, &self.display)?;
                    Some(pass.sub_us(1))
                }
                PathKind::Legacy | PathKind::VsyncOff => None,
            };
        }

        let pd = self.apps[a].pending.pop_front().unwrap();
        let fseq = self.apps[a].frame_ctr;
        self.apps[a].frame_ctr += 1;
        let draw_end = now.add_us(t_app_actual);
        self.apps[a].pool.set_fill(buffer, fseq, now, draw_end);
        self.apps[a].frames.push(Frame {
            seq: fseq,
            epoch,
            path_tag: design.name.clone(),
            kind,
            t_out_us: if par_in_place { 0 } else { design.t_out_us },
            events: pd.events,
            t_delivered,
            t_draw_start: now,
            t_draw_end: draw_end,
            buffer,
            par_in_place,
            drawn,
            dirty,
            miss_if_after,
            grant_pulse,
            state: FrameState::Drawing,
            owned_via: None,
            torn: false,
        });
        self.apps[a].last_drawn = Some(drawn);
        self.apps[a].drawing = Some(fseq);
        engine.schedule(draw_end, "draw_done", Ev::DrawDone { app: a, frame: fseq })?;
        Ok(true)
    }

    /// busy_app -> filled; counts the produced frame.
    fn complete_fill(&mut self, a: usize, fseq: u64, t: SimTime) -> Result<(), SimError> {
        let app = &mut self.apps[a];
        let frame = &mut app.frames[fseq as usize];
        debug_assert_eq!(frame.state, FrameState::Drawing);
        app.pool.transition(frame.buffer, BufferState::Filled, false)?;
        frame.state = FrameState::Filled;
        app.ledger.produced_frames += 1;
        let cycle = cycle_of(t, &self.display);
        app.ledger.flags_mut(cycle).filled = true;
        Ok(())
    }

    fn on_draw_done(&mut self, engine: &mut Engine<Ev>, t: SimTime, a: usize, fseq: u64) -> Result<(), SimError> {
        let (kind, par_in_place, state, miss_if_after, t_draw_start) = {
            let f = &self.apps[a].frames[fseq as usize];
            (f.kind, f.par_in_place, f.state, f.miss_if_after, f.t_draw_start)
        };
        let t_app_actual = t.delta_us(t_draw_start);
        self.apps[a].predictor.update(t_app_actual.max(1));
        if let Some(deadline) = miss_if_after {
            if t > deadline {
                self.apps[a].ledger.underpredictions += 1;
            }
        }

        if par_in_place {
            self.finish_par_frame(a, fseq, t)?;
        } else {
            if state == FrameState::Drawing {
                self.complete_fill(a, fseq, t)?;
            }
            // In-place designs take the display slot immediately, which must
            // not happen ahead of frames still draining under the previous
            // design; such frames stay filled until the drain finishes.
            let deferred = {
                let f = &self.apps[a].frames[fseq as usize];
                matches!(kind, PathKind::JittJep | PathKind::VsyncOff)
                    && f.epoch == self.apps[a].epoch
                    && !self.apps[a].drain_complete()
            };
            if !deferred {
                match kind {
                    PathKind::Legacy | PathKind::Jitt | PathKind::JittPar => {
                        // Picked up by the pulse transfer / latch point.
                    }
                    PathKind::JittJep => self.jep_submit_frame(a, fseq, t)?,
                    PathKind::VsyncOff => self.vsync_off_swap(a, fseq, t)?,
                }
            }
        }

        self.apps[a].drawing = None;
        // Vsync-off delivers events buffered while the application was busy.
        let deliver_now = {
            let app = &self.apps[a];
            let em = app.ems.last().unwrap();
            em.design.kind == PathKind::VsyncOff && !em.queue.is_empty()
        };
        if deliver_now {
            let uid = self.apps[a].ems.last().unwrap().uid;
            self.deliver(engine, a, uid, t)?;
        }
        self.try_start_executor(engine, a, t)?;
        self.maybe_complete_switch(engine, a, t)?;
        Ok(())
    }

    /// In-place write finished: the content becomes visible as the scan next
    /// passes each dirty row; tearing when the write raced into the rows.
    fn finish_par_frame(&mut self, a: usize, fseq: u64, t: SimTime) -> Result<(), SimError> {
        let grant_pulse = self.apps[a].frames[fseq as usize].grant_pulse.expect("grant pulse");
        let (t0, dirty) = {
            let f = &self.apps[a].frames[fseq as usize];
            (f.t_draw_start, f.dirty)
        };
        let torn = tearing_check(t0, t, &dirty, grant_pulse, &self.display)?;
        {
            let app = &mut self.apps[a];
            let frame = &mut app.frames[fseq as usize];
            frame.torn = torn;
            frame.state = FrameState::Filled; // momentarily, for accounting
            app.ledger.produced_frames += 1;
            if torn {
                app.ledger.tearing_count += 1;
            }
            let cycle = cycle_of(t, &self.display);
            app.ledger.flags_mut(cycle).filled = true;
            // The buffer is already the display's; the slot now shows this
            // frame's content.
            if let Some(slot) = app.display.as_mut() {
                slot.frame = fseq;
            }
        }
        let shown_at = next_pass(t, self.apps[a].frames[fseq as usize].drawn.1, &self.display)?;
        let scan_cycle = cycle_of(shown_at, &self.display);
        self.record_ownership(a, fseq, t, ExtRule::NextPassAfter(t), scan_cycle, false)?;
        Ok(())
    }

    /// Just-enough-pixels submission at fill time.
    fn jep_submit_frame(&mut self, a: usize, fseq: u64, t: SimTime) -> Result<(), SimError> {
        let cycle = cycle_of(t, &self.display);
        let pulse = pulse_at(cycle, &self.display);
        let dirty = self.apps[a].frames[fseq as usize].dirty;
        let accepted = crate::paths::jep_submit(&dirty, t, pulse, &self.display)?;
        if accepted {
            // The display takes the dirty region into in-display memory now;
            // the buffer cycles straight back to the pool unless the panel
            // still holds another buffer.
            let buffer = self.apps[a].frames[fseq as usize].buffer;
            let may_own = self.apps[a].pool.busy_disp_id().is_none();
            if may_own {
                self.apps[a].pool.transition(buffer, BufferState::BusyDisp, false)?;
                self.apps[a].pool.transition(buffer, BufferState::Free, false)?;
                let drawn = self.apps[a].frames[fseq as usize].drawn;
                let shown_at = next_pass(t, drawn.1, &self.display)?;
                let scan_cycle = cycle_of(shown_at, &self.display);
                let kind = self.apps[a].frames[fseq as usize].kind;
                self.apps[a].display = Some(DisplaySlot { frame: fseq, buffer: None, kind });
                self.record_ownership(a, fseq, t, ExtRule::NextPassAfter(t), scan_cycle, false)?;
                return Ok(());
            }
        }
        // Queued for the next refresh: the in-display update happens at the
        // pulse and the rows externalize during that cycle.
        let next = pulse_at(cycle + 1, &self.display);
        let buffer = self.apps[a].frames[fseq as usize].buffer;
        self.record_ownership(a, fseq, next, ExtRule::AtPulse(next), cycle + 1, false)?;
        self.apps[a].disp_queue.push_back(QueuedFrame {
            frame: fseq,
            buffer: Some(buffer),
            scan_cycle: cycle + 1,
        });
        Ok(())
    }

    /// Immediate swap, even mid-scan. Tearing flagged when the scan position
    /// is inside the dirty rows at the swap instant.
    fn vsync_off_swap(&mut self, a: usize, fseq: u64, t: SimTime) -> Result<(), SimError> {
        let cycle = cycle_of(t, &self.display);
        let pulse = pulse_at(cycle, &self.display);
        let dirty = self.apps[a].frames[fseq as usize].dirty;
        let torn = tearing_check(t, t, &dirty, pulse, &self.display)?;
        {
            let app = &mut self.apps[a];
            if let Some(slot) = &app.display {
                if let Some(b) = slot.buffer {
                    app.pool.transition(b, BufferState::Free, false)?;
                }
            }
            let buffer = app.frames[fseq as usize].buffer;
            app.pool.transition(buffer, BufferState::BusyDisp, false)?;
            let frame = &mut app.frames[fseq as usize];
            frame.torn = torn;
            if torn {
                app.ledger.tearing_count += 1;
            }
            let kind = frame.kind;
            app.display = Some(DisplaySlot { frame: fseq, buffer: Some(buffer), kind });
        }
        let drawn_y = self.apps[a].frames[fseq as usize].drawn.1;
        let shown_at = next_pass(t, drawn_y, &self.display)?;
        let scan_cycle = cycle_of(shown_at, &self.display);
        self.record_ownership(a, fseq, t, ExtRule::NextPassAfter(t), scan_cycle, false)?;
        if self.apps[a].blocked {
            // Swap freed a buffer.
            self.apps[a].blocked = false;
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Latch (just-in-time buffer manager)
    // ------------------------------------------------------------------

    fn on_latch(&mut self, engine: &mut Engine<Ev>, t: SimTime, a: usize, cycle: u64) -> Result<(), SimError> {
        // A frame completing exactly at the latch point counts as filled; its
        // draw-done bookkeeping runs right after this event.
        let claim = {
            let app = &self.apps[a];
            app.drawing.and_then(|fs| {
                let f = &app.frames[fs as usize];
                (f.t_draw_end == t
                    && !f.par_in_place
                    && matches!(f.kind, PathKind::Jitt | PathKind::JittPar))
                .then_some(fs)
            })
        };
        if let Some(fs) = claim {
            self.complete_fill(a, fs, t)?;
        }

        let epoch = self.apps[a].epoch;
        let drain_complete = self.apps[a].drain_complete();
        let mut candidates: Vec<u64> = self.apps[a]
            .frames
            .iter()
            .filter(|f| {
                f.state == FrameState::Filled
                    && matches!(f.kind, PathKind::Jitt | PathKind::JittPar)
                    && (f.epoch < epoch || drain_complete)
            })
            .map(|f| f.seq)
            .collect();
        candidates.sort_unstable();
        if candidates.is_empty() {
            // No latch this cycle; a cycle without a drop re-arms the rule.
            self.apps[a].ledger.dropped_prev_cycle = false;
            return Ok(());
        }

        let ids: Vec<usize> = candidates.iter().map(|&s| s as usize).collect();
        let decision = jitt_latch(&ids, self.apps[a].ledger.dropped_prev_cycle)?;
        let next_refresh = pulse_at(cycle + 1, &self.display);
        match decision {
            LatchDecision::None => {
                self.apps[a].ledger.dropped_prev_cycle = false;
            }
            LatchDecision::Latch { buffer: fseq } => {
                self.latch_frame(a, fseq as u64, t, next_refresh)?;
                self.apps[a].ledger.dropped_prev_cycle = false;
            }
            LatchDecision::DropAndLatch { drop, latch } => {
                self.latch_frame(a, latch as u64, t, next_refresh)?;
                self.drop_frame(a, drop as u64, t, next_refresh)?;
                self.apps[a].ledger.dropped_prev_cycle = true;
                self.apps[a].ledger.flags_mut(cycle).dropped = true;
            }
        }
        self.retry_blocked(engine, a, t)?;
        self.maybe_complete_switch(engine, a, t)?;
        Ok(())
    }

    fn latch_frame(&mut self, a: usize, fseq: u64, t: SimTime, next_refresh: SimTime) -> Result<(), SimError> {
        let t_out = self.apps[a].frames[fseq as usize].t_out_us;
        let own_done = t.add_us(t_out);
        let scan_pulse = self.next_pulse_at_or_after(own_done);
        let scan_cycle = cycle_of(scan_pulse, &self.display);
        debug_assert!(scan_pulse >= next_refresh || own_done <= next_refresh);
        self.record_ownership(a, fseq, own_done, ExtRule::AtPulse(scan_pulse), scan_cycle, false)?;
        let buffer = self.apps[a].frames[fseq as usize].buffer;
        self.apps[a].disp_queue.push_back(QueuedFrame { frame: fseq, buffer: Some(buffer), scan_cycle });
        Ok(())
    }

    /// Drop recovery: the delayed frame's buffer frees immediately and its
    /// events are attributed to the newer frame externalized in its place.
    fn drop_frame(&mut self, a: usize, fseq: u64, t: SimTime, next_refresh: SimTime) -> Result<(), SimError> {
        {
            let app = &mut self.apps[a];
            let buffer = app.frames[fseq as usize].buffer;
            app.pool.drop_filled(buffer)?;
            app.ledger.dropped_frames += 1;
        }
        let own_done = t.add_us(self.apps[a].frames[fseq as usize].t_out_us);
        let scan_cycle = cycle_of(next_refresh, &self.display);
        self.record_ownership(a, fseq, own_done, ExtRule::AtPulse(next_refresh), scan_cycle, true)?;
        Ok(())
    }

    // ------------------------------------------------------------------
    // Ownership, externalization and records
    // ------------------------------------------------------------------

    fn record_ownership(
        &mut self,
        a: usize,
        fseq: u64,
        t_ownership: SimTime,
        ext: ExtRule,
        scan_cycle: u64,
        dropped: bool,
    ) -> Result<(), SimError> {
        let (events, torn, path_tag, t_out_us, kind, epoch, drawn, t_delivered, t_draw_start, t_draw_end) = {
            let f = &self.apps[a].frames[fseq as usize];
            (
                f.events.clone(),
                f.torn,
                f.path_tag.clone(),
                f.t_out_us,
                f.kind,
                f.epoch,
                f.drawn,
                f.t_delivered,
                f.t_draw_start,
                f.t_draw_end,
            )
        };
        for idx in events {
            let ev = self.apps[a].events[idx];
            let t_ext = match ext {
                ExtRule::AtPulse(p) => p.add_us(scanout_reach_time(ev.sample.y, &self.display)?),
                ExtRule::NextPassAfter(t) => next_pass(t, ev.sample.y, &self.display)?,
            };
            let record = LatencyRecord {
                seq: ev.sample.seq,
                app_id: self.apps[a].app_id.clone(),
                t_physical: ev.sample.t_physical,
                t_device: ev.t_device,
                t_delivered,
                t_draw_start,
                t_draw_end,
                t_ownership,
                t_externalized: t_ext,
                path_tag: path_tag.clone(),
                frame_seq: fseq,
                t_out_us,
                touch_y: ev.sample.y,
                dropped,
                torn,
            };
            record.check_monotone().map_err(|e| SimError::Invariant(e.to_string()))?;
            if self.apps[a].records[idx].is_none() {
                self.apps[a].resolved += 1;
            }
            self.apps[a].records[idx] = Some(record);
        }
        {
            let app = &mut self.apps[a];
            let frame = &mut app.frames[fseq as usize];
            frame.state = FrameState::Owned;
            frame.owned_via = Some(kind);
            if !dropped {
                let head_at = match ext {
                    ExtRule::AtPulse(p) => {
                        p.add_us(scanout_reach_time(drawn.1, &self.display).unwrap_or(0))
                    }
                    ExtRule::NextPassAfter(t) => next_pass(t, drawn.1, &self.display)
                        .unwrap_or_else(|_| t),
                };
                app.head_timeline.push((head_at, drawn.0, drawn.1));
                app.ledger.flags_mut(scan_cycle).latched = true;
            }
            if epoch == app.epoch {
                app.new_path_owned = true;
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Path switching
    // ------------------------------------------------------------------

    fn on_switch(&mut self, engine: &mut Engine<Ev>, t: SimTime, idx: usize) -> Result<(), SimError> {
        let spec = self.cfg.switches[idx].clone();
        let a = self
            .apps
            .iter()
            .position(|x| x.app_id == spec.app_id)
            .ok_or_else(|| SimError::Invariant(format!("switch for unknown app {}", spec.app_id)))?;
        self.mgr.apply_path(&spec.app_id, &spec.path, t)?;
        self.start_pending_switches(a, t)?;
        let _ = engine;
        Ok(())
    }

    fn start_pending_switches(&mut self, a: usize, t: SimTime) -> Result<(), SimError> {
        loop {
            let app_id = self.apps[a].app_id.clone();
            let Some(rec) = self.mgr.start_next(&app_id, t) else { return Ok(()) };
            let design = self.mgr.resolve(&rec.to).clone();
            let idle = self.apps[a].pipeline_idle();
            {
                let app = &mut self.apps[a];
                app.epoch += 1;
                app.new_path_owned = false;
                // Freeze the live event manager as the drain; new arrivals
                // bind to the incoming design.
                if let Some(live) = app.ems.last_mut() {
                    live.is_drain = true;
                    live.gen += 1;
                }
                let uid = app.em_uid_ctr;
                app.em_uid_ctr += 1;
                let epoch = app.epoch;
                app.ems.push(EmInstance {
                    uid,
                    design,
                    epoch,
                    queue: VecDeque::new(),
                    gen: 0,
                    is_drain: false,
                    served_cycle: None,
                });
                app.ems.retain(|e| !e.is_drain || !e.queue.is_empty());
            }
            if idle {
                self.mgr.complete(&self.apps[a].app_id, t);
                continue;
            }
            // Drain deadlines for a frozen jitt event manager are scheduled
            // from the next pulse.
            return Ok(());
        }
    }

    /// Frames of an in-place design that finished drawing mid-drain take the
    /// display slot as soon as the drain is done.
    fn flush_deferred_in_place(&mut self, a: usize, t: SimTime) -> Result<(), SimError> {
        loop {
            let next = {
                let app = &self.apps[a];
                app.frames
                    .iter()
                    .filter(|f| {
                        f.state == FrameState::Filled
                            && matches!(f.kind, PathKind::JittJep | PathKind::VsyncOff)
                    })
                    .map(|f| (f.seq, f.kind))
                    .min_by_key(|(seq, _)| *seq)
            };
            match next {
                Some((fseq, PathKind::VsyncOff)) => self.vsync_off_swap(a, fseq, t)?,
                Some((fseq, PathKind::JittJep)) => self.jep_submit_frame(a, fseq, t)?,
                _ => return Ok(()),
            }
        }
    }

    fn maybe_complete_switch(&mut self, engine: &mut Engine<Ev>, a: usize, t: SimTime) -> Result<(), SimError> {
        let app_id = self.apps[a].app_id.clone();
        if self.mgr.in_flight(&app_id).is_none() {
            return Ok(());
        }
        if !self.apps[a].drain_complete() {
            return Ok(());
        }
        self.flush_deferred_in_place(a, t)?;
        self.retry_blocked(engine, a, t)?;
        let done = {
            let app = &self.apps[a];
            app.new_path_owned || app.pipeline_idle()
        };
        if done {
            self.mgr.complete(&app_id, t);
            self.apps[a].ems.retain(|e| !e.is_drain);
            self.start_pending_switches(a, t)?;
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Finalization
    // ------------------------------------------------------------------

    fn finish(&mut self) -> Result<RunOutcome, SimError> {
        let observed_cycles = self.horizon_us / self.display.t_sync_us;
        let mut apps = Vec::with_capacity(self.apps.len());
        for app in &mut self.apps {
            let mut records: Vec<LatencyRecord> = Vec::with_capacity(app.records.len());
            let mut incomplete = 0u64;
            for r in &app.records {
                match r {
                    Some(rec) => records.push(rec.clone()),
                    None => incomplete += 1,
                }
            }
            records.sort_by_key(|r| r.seq);
            let design_label = self
                .cfg
                .bindings
                .iter()
                .find(|b| b.app_id == app.app_id)
                .map(|b| b.path.clone())
                .unwrap_or_else(|| self.cfg.default_path.clone());
            let report = finalize_report(
                &app.app_id,
                &design_label,
                &records,
                &app.ledger,
                &self.display,
                observed_cycles,
                0.01,
            );
            let direct = direct_estimate(&app.camera, &app.events);
            apps.push(AppOutcome {
                app_id: app.app_id.clone(),
                design_label,
                report,
                records,
                incomplete_events: incomplete,
                camera: std::mem::take(&mut app.camera),
                direct_latency_us: direct,
                no_consecutive_drop_cycles: app.ledger.no_consecutive_drops(),
            });
        }
        Ok(RunOutcome {
            config_digest: self.cfg.digest(),
            master_seed: self.cfg.run.master_seed,
            apps,
            switches: self.mgr.switch_records().to_vec(),
            observed_cycles,
        })
    }
}

#[derive(Clone, Copy)]
enum ExtRule {
    /// Frame latched for the cycle starting at this pulse.
    AtPulse(SimTime),
    /// In-place content: visible at the first scan pass after this instant.
    NextPassAfter(SimTime),
}

/// Pen position at `t`, linearly interpolated between physical samples.
fn interp_pen_y(events: &[InputEvent], t: SimTime) -> f64 {
    if events.is_empty() {
        return 0.0;
    }
    let pos = events.partition_point(|e| e.sample.t_physical <= t);
    if pos == 0 {
        return events[0].sample.y as f64;
    }
    if pos >= events.len() {
        return events[events.len() - 1].sample.y as f64;
    }
    let a = events[pos - 1].sample;
    let b = events[pos].sample;
    let span = b.t_physical.delta_us(a.t_physical) as f64;
    if span == 0.0 {
        return b.y as f64;
    }
    let frac = t.delta_us(a.t_physical) as f64 / span;
    a.y as f64 + (b.y as f64 - a.y as f64) * frac
}

/// Camera-style latency estimate: the spatial gap between the pen and the
/// drawn line head, divided by the pen velocity, averaged over steady
/// mid-stroke frames.
pub fn direct_estimate(camera: &[CameraRow], events: &[InputEvent]) -> Option<f64> {
    if camera.len() < 3 || events.len() < 3 {
        return None;
    }
    // Nominal speed from the physical trace.
    let mut steps: Vec<f64> = events
        .windows(2)
        .map(|w| {
            let dy = (w[1].sample.y as f64 - w[0].sample.y as f64).abs();
            let dt = w[1].sample.t_physical.delta_us(w[0].sample.t_physical) as f64;
            if dt > 0.0 {
                dy / dt
            } else {
                0.0
            }
        })
        .collect();
    steps.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let nominal_v = steps[steps.len() / 2];
    if nominal_v <= 0.0 {
        return None;
    }

    let mut sum = 0.0;
    let mut n = 0u64;
    let mut prev_v = 0.0;
    for k in 1..camera.len() {
        let dt = (camera[k].t_us - camera[k - 1].t_us) as f64;
        if dt <= 0.0 {
            continue;
        }
        let v = (camera[k].pen_y - camera[k - 1].pen_y) / dt;
        let steady = v.abs() >= 0.5 * nominal_v && prev_v * v > 0.0;
        prev_v = v;
        if !steady {
            continue;
        }
        let Some(head) = camera[k].head_y else { continue };
        let gap = camera[k].pen_y - head;
        if gap * v < 0.0 {
            continue;
        }
        sum += gap / v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// One row of the design comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub design: String,
    pub horizon_us: u64,
    pub mean_latency_us: f64,
    pub reduction_vs_first_us: f64,
    pub drop_rate: f64,
    pub underprediction_rate: f64,
    pub tearing_count: u64,
    pub direct_latency_us: Option<f64>,
}

/// Runs the scenario once per design (and optionally per prediction
/// horizon), rebinding every application, with the same trace and seed, so
/// any cross-design difference is attributable to the path design alone.
pub fn compare(
    cfg: &ScenarioConfig,
    designs: &[String],
    horizons_us: &[u64],
) -> Result<Vec<ComparisonRow>, SimError> {
    let horizons = if horizons_us.is_empty() { vec![cfg.prediction.horizon_us] } else { horizons_us.to_vec() };
    let mut rows = Vec::new();
    let mut first_mean: Option<f64> = None;
    for design in designs {
        for &h in &horizons {
            let mut c = cfg.clone();
            c.bindings = c
                .apps
                .iter()
                .map(|a| crate::config::BindingSpec { app_id: a.app_id.clone(), path: design.clone() })
                .collect();
            c.prediction.horizon_us = h;
            let outcome = Simulation::run(&c)?;
            let mean = mean_latency(&outcome);
            let direct = outcome.apps.iter().filter_map(|a| a.direct_latency_us).fold(
                (0.0, 0u32),
                |(s, k), v| (s + v, k + 1),
            );
            let baseline = *first_mean.get_or_insert(mean);
            rows.push(ComparisonRow {
                design: design.clone(),
                horizon_us: h,
                mean_latency_us: mean,
                reduction_vs_first_us: baseline - mean,
                drop_rate: agg_rate(&outcome, |r| (r.dropped_frames, r.produced_frames)),
                underprediction_rate: agg_rate(&outcome, |r| (r.underpredictions, r.produced_frames)),
                tearing_count: outcome.apps.iter().map(|a| a.report.tearing_count).sum(),
                direct_latency_us: (direct.1 > 0).then(|| direct.0 / direct.1 as f64),
            });
        }
    }
    Ok(rows)
}

fn mean_latency(outcome: &RunOutcome) -> f64 {
    let mut sum = 0.0;
    let mut n = 0u64;
    for app in &outcome.apps {
        for r in &app.records {
            sum += r.end_to_end_us() as f64;
            n += 1;
        }
    }
    if n > 0 {
        sum / n as f64
    } else {
        0.0
    }
}

fn agg_rate(outcome: &RunOutcome, f: impl Fn(&RunReport) -> (u64, u64)) -> f64 {
    let (mut num, mut den) = (0u64, 0u64);
    for app in &outcome.apps {
        let (x, y) = f(&app.report);
        num += x;
        den += y;
    }
    if den > 0 {
        num as f64 / den as f64
    } else {
        0.0
    }
}

/// Serializable report document written by the front-end.
#[derive(Serialize)]
pub struct ReportDoc<'a> {
    pub master_seed: u64,
    pub config_digest: &'a str,
    pub observed_cycles: u64,
    pub apps: Vec<&'a RunReport>,
    pub incomplete_events: u64,
    pub switches: &'a [SwitchRecord],
    pub switch_delay_mean_us: Option<f64>,
    pub switch_delay_sigma_us: Option<f64>,
    pub switch_delay_max_us: Option<u64>,
}

/// Writes `report.json` plus one `events-<app>.csv` per application.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    let delays: Vec<u64> = outcome.switches.iter().filter_map(|s| s.delay_us()).collect();
    let (mean, sigma, max) = if delays.is_empty() {
        (None, None, None)
    } else {
        let n = delays.len() as f64;
        let m = delays.iter().sum::<u64>() as f64 / n;
        let var = delays.iter().map(|&d| (d as f64 - m).powi(2)).sum::<f64>() / n;
        (Some(m), Some(var.sqrt()), delays.iter().max().copied())
    };
    let doc = ReportDoc {
        master_seed: outcome.master_seed,
        config_digest: &outcome.config_digest,
        observed_cycles: outcome.observed_cycles,
        apps: outcome.apps.iter().map(|a| &a.report).collect(),
        incomplete_events: outcome.apps.iter().map(|a| a.incomplete_events).sum(),
        switches: &outcome.switches,
        switch_delay_mean_us: mean,
        switch_delay_sigma_us: sigma,
        switch_delay_max_us: max,
    };
    let json = serde_json::to_string_pretty(&doc).expect("report serializes");
    std::fs::write(dir.join("report.json"), json.as_bytes())?;
    for app in &outcome.apps {
        let file = std::fs::File::create(dir.join(format!("events-{}.csv", app.app_id)))?;
        let mut w = std::io::BufWriter::new(file);
        write_event_csv(&app.records, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

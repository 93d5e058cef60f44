//! Path-manager control plane: the design registry, per-application
//! bindings, and asynchronous path switching with integrity bookkeeping.
//!
//! An input event only ever experiences one path design. At the moment a
//! switch is requested, events already buffered in the event manager drain
//! under the current design; arrivals after that boundary carry the new
//! design's tag. A switch completes when the first new-path frame is latched,
//! or immediately when the pipeline is idle.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::paths::PathDesign;

#[derive(Debug, Error, PartialEq)]
pub enum PathMgrError {
    #[error("path {0} is already registered")]
    DuplicatePath(String),
    #[error("app {0} is already bound; use apply_path to change designs")]
    AlreadyBound(String),
    #[error("app {0} is not bound")]
    NotBound(String),
}

/// Completion ticket for an asynchronous switch.
pub type Ticket = u64;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub ticket: Ticket,
    pub app_id: String,
    pub from: String,
    pub to: String,
    pub t_requested_us: u64,
    /// When the drain boundary was snapshotted (equals the request time
    /// unless the switch sat behind another in-flight switch).
    pub t_started_us: Option<u64>,
    pub t_completed_us: Option<u64>,
}

impl SwitchRecord {
    pub fn delay_us(&self) -> Option<u64> {
        self.t_completed_us.map(|done| done - self.t_requested_us)
    }
}

/// Binding of one application to its current design plus in-flight switches.
#[derive(Clone, Debug)]
pub struct PathBinding {
    pub app_id: String,
    pub current_path: String,
    pub in_flight: Option<Ticket>,
    queued: VecDeque<Ticket>,
}

/// Registry plus bindings; the simulation drives drain and completion.
pub struct PathManager {
    designs: Vec<PathDesign>,
    default_path: String,
    bindings: Vec<PathBinding>,
    switches: Vec<SwitchRecord>,
}

impl PathManager {
    /// Starts with the built-in designs registered under their canonical
    /// names. `default_path` is the fallback for unknown preferences.
    pub fn new(default_path: &str) -> PathManager {
        let designs = [
            crate::paths::LEGACY,
            crate::paths::PRESTO_JITT,
            crate::paths::PRESTO_JITT_PAR,
            crate::paths::PRESTO_JITT_JEP,
            crate::paths::VSYNC_OFF,
        ]
        .iter()
        .map(|n| PathDesign::builtin(n).expect("builtin design"))
        .collect();
        PathManager {
            designs,
            default_path: default_path.to_string(),
            bindings: Vec::new(),
            switches: Vec::new(),
        }
    }

    /// Registers a design; replaces a built-in of the same name, rejects a
    /// duplicate user registration.
    pub fn register_path(&mut self, design: PathDesign, replace_builtin: bool) -> Result<(), PathMgrError> {
        if let Some(existing) = self.designs.iter_mut().find(|d| d.name == design.name) {
            if replace_builtin {
                *existing = design;
                return Ok(());
            }
            return Err(PathMgrError::DuplicatePath(design.name));
        }
        self.designs.push(design);
        Ok(())
    }

    /// Resolves a name, falling back to the default design.
    pub fn resolve(&self, name: &str) -> &PathDesign {
        self.designs
            .iter()
            .find(|d| d.name == name)
            .unwrap_or_else(|| self.resolve_default())
    }

    pub fn is_registered(&self, name: &str) -> bool {
        self.designs.iter().any(|d| d.name == name)
    }

    fn resolve_default(&self) -> &PathDesign {
        self.designs
            .iter()
            .find(|d| d.name == self.default_path)
            .unwrap_or(&self.designs[0])
    }

    /// Creates the launch-time binding. The binding lasts until an explicit
    /// apply_path; a second launch of the same app is a caller bug.
    pub fn bind_at_launch(&mut self, app_id: &str, preference: &str) -> Result<&PathBinding, PathMgrError> {
        if self.bindings.iter().any(|b| b.app_id == app_id) {
            return Err(PathMgrError::AlreadyBound(app_id.to_string()));
        }
        let path = if self.is_registered(preference) {
            preference.to_string()
        } else {
            self.resolve_default().name.clone()
        };
        self.bindings.push(PathBinding {
            app_id: app_id.to_string(),
            current_path: path,
            in_flight: None,
            queued: VecDeque::new(),
        });
        Ok(self.bindings.last().unwrap())
    }

    pub fn binding(&self, app_id: &str) -> Result<&PathBinding, PathMgrError> {
        self.bindings
            .iter()
            .find(|b| b.app_id == app_id)
            .ok_or_else(|| PathMgrError::NotBound(app_id.to_string()))
    }

    fn binding_mut(&mut self, app_id: &str) -> Result<&mut PathBinding, PathMgrError> {
        self.bindings
            .iter_mut()
            .find(|b| b.app_id == app_id)
            .ok_or_else(|| PathMgrError::NotBound(app_id.to_string()))
    }

    /// Records an asynchronous switch request. Unregistered targets fall back
    /// to the default design. Overlapping requests queue after the in-flight
    /// one. Returns the ticket; the caller starts it via [`Self::start_next`].
    pub fn apply_path(&mut self, app_id: &str, path_name: &str, now: SimTime) -> Result<Ticket, PathMgrError> {
        let target = if self.is_registered(path_name) {
            path_name.to_string()
        } else {
            self.resolve_default().name.clone()
        };
        let from = self.binding(app_id)?.current_path.clone();
        let ticket = self.switches.len() as Ticket;
        self.switches.push(SwitchRecord {
            ticket,
            app_id: app_id.to_string(),
            from,
            to: target,
            t_requested_us: now.us(),
            t_started_us: None,
            t_completed_us: None,
        });
        self.binding_mut(app_id)?.queued.push_back(ticket);
        Ok(ticket)
    }

    /// Starts the next queued switch when none is in flight. The returned
    /// record tells the caller which design the new arrivals bind to; the
    /// drain boundary snapshot is taken at this instant.
    pub fn start_next(&mut self, app_id: &str, now: SimTime) -> Option<SwitchRecord> {
        let binding = self.binding_mut(app_id).ok()?;
        if binding.in_flight.is_some() {
            return None;
        }
        let ticket = binding.queued.pop_front()?;
        binding.in_flight = Some(ticket);
        let to = self.switches[ticket as usize].to.clone();
        // The record's `from` was fixed at request time; re-anchor it to the
        // path actually current when the switch starts.
        let current = self.binding(app_id).unwrap().current_path.clone();
        let rec = &mut self.switches[ticket as usize];
        rec.from = current;
        rec.t_started_us = Some(now.us());
        self.binding_mut(app_id).unwrap().current_path = to;
        Some(self.switches[ticket as usize].clone())
    }

    /// Marks the in-flight switch complete.
    pub fn complete(&mut self, app_id: &str, now: SimTime) -> Option<SwitchRecord> {
        let binding = self.binding_mut(app_id).ok()?;
        let ticket = binding.in_flight.take()?;
        let rec = &mut self.switches[ticket as usize];
        rec.t_completed_us = Some(now.us());
        Some(rec.clone())
    }

    pub fn in_flight(&self, app_id: &str) -> Option<Ticket> {
        self.binding(app_id).ok().and_then(|b| b.in_flight)
    }

    pub fn has_queued(&self, app_id: &str) -> bool {
        self.binding(app_id).map(|b| !b.queued.is_empty()).unwrap_or(false)
    }

    pub fn switch_records(&self) -> &[SwitchRecord] {
        &self.switches
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{PathKind, LEGACY, PRESTO_JITT};

    #[test]
    fn registry_resolves_and_rejects_duplicates() {
        let mut mgr = PathManager::new(LEGACY);
        assert!(mgr.is_registered(PRESTO_JITT));
        let custom = PathDesign::new("custom-fast", PathKind::Jitt);
        mgr.register_path(custom.clone(), false).unwrap();
        assert_eq!(mgr.resolve("custom-fast").name, "custom-fast");
        assert_eq!(
            mgr.register_path(custom, false).unwrap_err(),
            PathMgrError::DuplicatePath("custom-fast".into())
        );
        // Unknown names fall back to the default design.
        assert_eq!(mgr.resolve("no-such-path").name, LEGACY);
    }

    #[test]
    fn launch_binding_uses_preference_or_default() {
        let mut mgr = PathManager::new(LEGACY);
        let b = mgr.bind_at_launch("ink", PRESTO_JITT).unwrap();
        assert_eq!(b.current_path, PRESTO_JITT);
        let b = mgr.bind_at_launch("notes", "missing-design").unwrap();
        assert_eq!(b.current_path, LEGACY);
        assert_eq!(
            mgr.bind_at_launch("ink", LEGACY).unwrap_err(),
            PathMgrError::AlreadyBound("ink".into())
        );
    }

    #[test]
    fn switches_queue_behind_the_in_flight_one() {
        let mut mgr = PathManager::new(LEGACY);
        mgr.bind_at_launch("ink", LEGACY).unwrap();
        let t1 = mgr.apply_path("ink", PRESTO_JITT, SimTime(1_000)).unwrap();
        let t2 = mgr.apply_path("ink", LEGACY, SimTime(2_000)).unwrap();
        assert_ne!(t1, t2);

        let started = mgr.start_next("ink", SimTime(1_000)).unwrap();
        assert_eq!(started.ticket, t1);
        assert_eq!(mgr.binding("ink").unwrap().current_path, PRESTO_JITT);
        // Second request stays queued while the first is in flight.
        assert!(mgr.start_next("ink", SimTime(1_500)).is_none());

        let done = mgr.complete("ink", SimTime(20_000)).unwrap();
        assert_eq!(done.delay_us(), Some(19_000));

        let started = mgr.start_next("ink", SimTime(20_000)).unwrap();
        assert_eq!(started.ticket, t2);
        assert_eq!(started.from, PRESTO_JITT);
        assert_eq!(mgr.binding("ink").unwrap().current_path, LEGACY);
        mgr.complete("ink", SimTime(21_000)).unwrap();
        assert!(mgr.start_next("ink", SimTime(21_000)).is_none());
    }
}

//! Legacy path integration: the simulated pipeline must reproduce the
//! analytical coarse-grain latency model and the phase-quantization noise
//! floor exactly.

use i2dsim_core::display::scanout_reach_time;
use i2dsim_core::engine::SimTime;
use i2dsim_core::metrics::eq1_coarse_latency;
use i2dsim_core::paths::PathKind;
use i2dsim_core::sim::Simulation;
use i2dsim_core::{PathDesign, ScenarioConfig, TAppDist, TouchSample};

fn legacy_cfg(duration_s: f64, seed: u64, offset_us: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::single_app(
        "ink",
        TAppDist::Constant { us: 4_070 },
        "legacy",
        duration_s,
        seed,
    );
    let mut legacy = PathDesign::new("legacy", PathKind::Legacy);
    legacy.em_offset_us = offset_us;
    cfg.paths = vec![legacy];
    cfg
}

/// Mean coarse-grain component (waiting attributable to pulse
/// synchronization and the atomic buffer) of completed records.
fn mean_coarse(records: &[i2dsim_core::LatencyRecord], display: &i2dsim_core::DisplayConfig) -> f64 {
    let mut sum = 0.0;
    for r in records {
        let [_, wait_delivery, _, wait_ownership, _, t_disp] = r.decompose();
        let reach = scanout_reach_time(r.touch_y, display).unwrap();
        sum += (wait_delivery + wait_ownership + t_disp - reach) as f64;
    }
    sum / records.len() as f64
}

#[test]
fn legacy_mean_coarse_latency_matches_analytical_model() {
    let cfg = legacy_cfg(150.0, 11, 7_500);
    let outcome = Simulation::run(&cfg).unwrap();
    let app = &outcome.apps[0];
    assert_eq!(app.incomplete_events, 0);
    assert!(app.records.len() >= 10_000);

    let coarse = mean_coarse(&app.records, &cfg.display);
    let expected = eq1_coarse_latency(16_667, 4_070, 3_500, 7_500) as f64;
    assert!(
        (coarse - expected).abs() <= 1_000.0,
        "coarse {coarse:.0}us vs analytical {expected:.0}us"
    );

    // No drops, no tearing on the legacy path.
    assert_eq!(app.report.dropped_frames, 0);
    assert_eq!(app.report.tearing_count, 0);
}

#[test]
fn legacy_decomposition_is_exact_and_pulse_aligned() {
    let cfg = legacy_cfg(5.0, 3, 7_500);
    let outcome = Simulation::run(&cfg).unwrap();
    let app = &outcome.apps[0];
    assert!(!app.records.is_empty());
    for r in &app.records {
        r.check_monotone().unwrap();
        let parts = r.decompose();
        assert_eq!(parts.iter().sum::<u64>(), r.end_to_end_us(), "seq {}", r.seq);
        // Deliveries happen at pulse + offset; ownership transfers begin at
        // pulses.
        assert_eq!(r.t_delivered.us() % 16_667, 7_500, "delivery of {}", r.seq);
        assert_eq!((r.t_ownership.us() - r.t_out_us) % 16_667, 0, "ownership of {}", r.seq);
        assert_eq!(r.t_out_us, 3_500);
        assert_eq!(r.path_tag, "legacy");
    }
}

#[test]
fn legacy_latency_sigma_equals_input_phase_quantization() {
    // Constant stages and a fixed touch row leave the pulse-phase wait as the
    // only variance source. The oracle computes each event's wait directly
    // from its arrival phase.
    let mut cfg = legacy_cfg(0.0, 5, 7_500);
    cfg.run.duration_s = 100.0;
    cfg.input.hw_latency_sigma_us = 0.0;
    let period = 8_333u64;
    let n = 12_000usize;
    let trace: Vec<TouchSample> = (0..n)
        .map(|k| TouchSample {
            seq: k as u64,
            t_physical: SimTime(k as u64 * period),
            x: ((100 + k) % 1_200) as u32,
            y: 1_000,
        })
        .collect();
    let outcome = Simulation::run_with_traces(&cfg, Some(vec![trace.clone()])).unwrap();
    let app = &outcome.apps[0];
    assert_eq!(app.records.len(), n);

    let t_sync = 16_667i64;
    let offset = 7_500i64;
    let waits: Vec<i64> = trace
        .iter()
        .map(|s| {
            let arrival = s.t_physical.us() as i64 + 28_000;
            (offset - arrival).rem_euclid(t_sync)
        })
        .collect();
    let mean_wait = waits.iter().sum::<i64>() as f64 / n as f64;
    let var_wait =
        waits.iter().map(|&w| (w as f64 - mean_wait).powi(2)).sum::<f64>() / n as f64;

    let stats = app.report.latency.as_ref().unwrap();
    let stages = app.report.stages.as_ref().unwrap();
    assert!((stages.wait_delivery_us - mean_wait).abs() < 0.5);
    assert!(
        (stats.sigma_us - var_wait.sqrt()).abs() < 0.5,
        "sigma {} vs oracle {}",
        stats.sigma_us,
        var_wait.sqrt()
    );
}

#[test]
fn legacy_total_latency_is_insensitive_to_t_app() {
    // All waiting is pulse-aligned, so a faster application only shifts time
    // between drawing and waiting.
    let mut fast = legacy_cfg(20.0, 9, 7_500);
    fast.apps[0].t_app = TAppDist::Constant { us: 1_000 };
    let mut slow = legacy_cfg(20.0, 9, 7_500);
    slow.apps[0].t_app = TAppDist::Constant { us: 5_000 };
    let fast_mean =
        Simulation::run(&fast).unwrap().apps[0].report.latency.as_ref().unwrap().mean_us;
    let slow_mean =
        Simulation::run(&slow).unwrap().apps[0].report.latency.as_ref().unwrap().mean_us;
    assert!(
        (fast_mean - slow_mean).abs() < 200.0,
        "fast {fast_mean:.0} vs slow {slow_mean:.0}"
    );
}

//! Latency decomposition, the analytical coarse-grain latency model, the two
//! latency estimators and aggregate run reports.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DisplayConfig, LatencyRecord};
use crate::paths::CycleLedger;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("record {0} was dropped before externalization")]
    NoExternalization(u64),
    #[error("{0}")]
    Invalid(String),
}

/// Average latency added by the coarse-grained legacy path:
/// `2.5*t_sync - (t_app + t_out) - offset`, in microseconds.
///
/// Integer arithmetic (floor on the half period). Negative results are
/// reported as-is; they signal `t_app + t_out` exceeding the model's window.
pub fn eq1_coarse_latency(t_sync_us: u64, t_app_us: u64, t_out_us: u64, offset_us: u64) -> i64 {
    let coarse = (5 * t_sync_us as i64) / 2;
    coarse - (t_app_us as i64 + t_out_us as i64) - offset_us as i64
}

/// The three-part indirect estimate for one record: a calibrated input
/// hardware constant, the software-logged span from driver to ownership
/// transfer, and the scan position term `t_sync*y/H`.
pub fn indirect_latency(
    record: &LatencyRecord,
    hw_const_us: u64,
    display: &DisplayConfig,
) -> Result<(u64, u64, u64, u64), MetricsError> {
    if record.dropped {
        return Err(MetricsError::NoExternalization(record.seq));
    }
    let part1 = hw_const_us;
    let part2 = record.t_ownership.delta_us(record.t_device);
    let part3 = display.t_sync_us * record.touch_y as u64 / display.h as u64;
    Ok((part1, part2, part3, part1 + part2 + part3))
}

/// Latency from a visible gap: `gap / velocity`, in microseconds.
pub fn direct_latency(gap_mm: f64, velocity_mm_s: f64) -> Result<f64, MetricsError> {
    if velocity_mm_s <= 0.0 {
        return Err(MetricsError::Invalid(format!("velocity {velocity_mm_s} must be positive")));
    }
    Ok(gap_mm / velocity_mm_s * 1e6)
}

/// Latency statistics over completed events, in microseconds.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub sigma_us: f64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
    pub min_us: u64,
    pub max_us: u64,
}

/// Mean per-stage decomposition; sums to the mean end-to-end latency.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct StageMeans {
    pub t_input_us: f64,
    pub wait_delivery_us: f64,
    pub t_app_us: f64,
    pub wait_ownership_us: f64,
    pub t_out_us: f64,
    pub t_disp_us: f64,
}

/// Aggregate report of one application under one path design.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub app_id: String,
    pub design: String,
    pub event_count: u64,
    pub completed_events: u64,
    pub dropped_events: u64,
    pub latency: Option<LatencyStats>,
    pub stages: Option<StageMeans>,
    pub displayed_fps: f64,
    pub produced_frames: u64,
    pub dropped_frames: u64,
    pub drop_rate: f64,
    pub underpredictions: u64,
    pub underprediction_rate: f64,
    pub tearing_count: u64,
    pub par_requests: u64,
    pub par_grants: u64,
    pub par_grant_rate: f64,
    /// Fraction of a frame a sampling dirty detector would scan; metadata.
    pub dirty_sampled_fraction: f64,
}

/// Nearest-rank percentile over a sorted slice.
pub fn percentile_nearest_rank(sorted: &[u64], pct: f64) -> u64 {
    assert!(!sorted.is_empty());
    let n = sorted.len() as f64;
    let rank = (pct / 100.0 * n).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Aggregates per-event records and the cycle ledger into a report.
/// With zero completed events the statistics are null but counts remain.
pub fn finalize_report(
    app_id: &str,
    design: &str,
    records: &[LatencyRecord],
    ledger: &CycleLedger,
    display: &DisplayConfig,
    observed_cycles: u64,
    dirty_sampled_fraction: f64,
) -> RunReport {
    let completed: Vec<&LatencyRecord> = records.iter().collect();
    let event_count = records.len() as u64;
    let dropped_events = records.iter().filter(|r| r.dropped).count() as u64;

    let (latency, stages) = if completed.is_empty() {
        (None, None)
    } else {
        let mut lats: Vec<u64> = completed.iter().map(|r| r.end_to_end_us()).collect();
        lats.sort_unstable();
        let n = lats.len() as f64;
        let mean = lats.iter().sum::<u64>() as f64 / n;
        let var = lats
            .iter()
            .map(|&x| {
                let d = x as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let stats = LatencyStats {
            mean_us: mean,
            sigma_us: var.sqrt(),
            p50_us: percentile_nearest_rank(&lats, 50.0),
            p95_us: percentile_nearest_rank(&lats, 95.0),
            p99_us: percentile_nearest_rank(&lats, 99.0),
            min_us: lats[0],
            max_us: *lats.last().unwrap(),
        };
        let mut sums = [0u64; 6];
        for r in &completed {
            let parts = r.decompose();
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
        }
        let means = StageMeans {
            t_input_us: sums[0] as f64 / n,
            wait_delivery_us: sums[1] as f64 / n,
            t_app_us: sums[2] as f64 / n,
            wait_ownership_us: sums[3] as f64 / n,
            t_out_us: sums[4] as f64 / n,
            t_disp_us: sums[5] as f64 / n,
        };
        (Some(stats), Some(means))
    };

    let shown_frames = ledger.produced_frames - ledger.dropped_frames;
    let window_s = (observed_cycles * display.t_sync_us) as f64 / 1e6;
    RunReport {
        app_id: app_id.to_string(),
        design: design.to_string(),
        event_count,
        completed_events: completed.len() as u64,
        dropped_events,
        latency,
        stages,
        displayed_fps: if window_s > 0.0 { shown_frames as f64 / window_s } else { 0.0 },
        produced_frames: ledger.produced_frames,
        dropped_frames: ledger.dropped_frames,
        drop_rate: if ledger.produced_frames > 0 {
            ledger.dropped_frames as f64 / ledger.produced_frames as f64
        } else {
            0.0
        },
        underpredictions: ledger.underpredictions,
        underprediction_rate: if ledger.produced_frames > 0 {
            ledger.underpredictions as f64 / ledger.produced_frames as f64
        } else {
            0.0
        },
        tearing_count: ledger.tearing_count,
        par_requests: ledger.par_requests,
        par_grants: ledger.par_grants,
        par_grant_rate: if ledger.par_requests > 0 {
            ledger.par_grants as f64 / ledger.par_requests as f64
        } else {
            0.0
        },
        dirty_sampled_fraction,
    }
}

pub const EVENT_CSV_HEADER: &str =
    "seq,t_physical,t_device,t_delivered,t_draw_start,t_draw_end,t_ownership,t_externalized,path,frame,dropped,torn";

/// Writes per-event records in the fixed CSV field order.
pub fn write_event_csv<W: Write>(records: &[LatencyRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{EVENT_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.seq,
            r.t_physical.us(),
            r.t_device.us(),
            r.t_delivered.us(),
            r.t_draw_start.us(),
            r.t_draw_end.us(),
            r.t_ownership.us(),
            r.t_externalized.us(),
            r.path_tag,
            r.frame_seq,
            r.dropped as u8,
            r.torn as u8,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SimTime;

    #[test]
    fn eq1_examples() {
        // Typical constants with the 7.5 ms trigger optimization deducted.
        assert_eq!(eq1_coarse_latency(16_667, 4_070, 3_500, 7_500), 26_597);
        assert_eq!(eq1_coarse_latency(16_667, 4_070, 3_500, 0), 34_097);
        // Cancellation: t_app + t_out equal to the whole coarse window.
        assert_eq!(eq1_coarse_latency(16_668, 20_000, 21_670, 0), 0);
        // Negative results are reported as-is.
        assert!(eq1_coarse_latency(16_667, 30_000, 30_000, 0) < 0);
    }

    fn record(y: u32, dropped: bool) -> LatencyRecord {
        LatencyRecord {
            seq: 0,
            app_id: "a".into(),
            t_physical: SimTime(0),
            t_device: SimTime(28_000),
            t_delivered: SimTime(30_000),
            t_draw_start: SimTime(30_000),
            t_draw_end: SimTime(34_000),
            t_ownership: SimTime(42_000),
            t_externalized: SimTime(50_000),
            path_tag: "legacy".into(),
            frame_seq: 0,
            t_out_us: 3_500,
            touch_y: y,
            dropped,
            torn: false,
        }
    }

    #[test]
    fn indirect_latency_parts() {
        let display = DisplayConfig::default();
        let r = record(1_280, false);
        let (p1, p2, p3, total) = indirect_latency(&r, 28_000, &display).unwrap();
        assert_eq!(p1, 28_000);
        assert_eq!(p2, 14_000);
        assert_eq!(p3, 8_333);
        assert_eq!(total, 50_333);
        // y = 0 contributes nothing; y = H contributes a full period.
        let r0 = record(0, false);
        assert_eq!(indirect_latency(&r0, 28_000, &display).unwrap().2, 0);
        let rh = record(2_560, false);
        assert_eq!(indirect_latency(&rh, 28_000, &display).unwrap().2, 16_667);
        // Dropped records have no externalization to estimate.
        assert!(indirect_latency(&record(0, true), 28_000, &display).is_err());
    }

    #[test]
    fn direct_latency_examples() {
        // A 20 mm gap at ~244 mm/s is the canonical 82 ms illustration.
        let us = direct_latency(20.0, 244.0).unwrap();
        assert!((us / 1_000.0 - 82.0).abs() < 0.1);
        assert_eq!(direct_latency(0.0, 100.0).unwrap(), 0.0);
        let us = direct_latency(6.8, 68.0).unwrap();
        assert!((us - 100_000.0).abs() < 1e-6);
        assert!(direct_latency(1.0, 0.0).is_err());
    }

    #[test]
    fn percentile_nearest_rank_rule() {
        let v = [10, 20, 30, 40];
        assert_eq!(percentile_nearest_rank(&v, 50.0), 20);
        assert_eq!(percentile_nearest_rank(&v, 95.0), 40);
        assert_eq!(percentile_nearest_rank(&v, 1.0), 10);
    }

    #[test]
    fn empty_run_reports_counts_with_null_statistics() {
        let ledger = CycleLedger { produced_frames: 4, dropped_frames: 4, ..Default::default() };
        let report =
            finalize_report("a", "presto-jitt", &[], &ledger, &DisplayConfig::default(), 60, 0.01);
        assert_eq!(report.drop_rate, 1.0);
        assert!(report.latency.is_none());
        assert!(report.stages.is_none());
        assert_eq!(report.displayed_fps, 0.0);
    }

    #[test]
    fn stage_means_sum_to_mean_latency() {
        let records = vec![record(100, false), record(2_000, false)];
        let report = finalize_report(
            "a",
            "legacy",
            &records,
            &CycleLedger::default(),
            &DisplayConfig::default(),
            10,
            0.01,
        );
        let stages = report.stages.unwrap();
        let sum = stages.t_input_us
            + stages.wait_delivery_us
            + stages.t_app_us
            + stages.wait_ownership_us
            + stages.t_out_us
            + stages.t_disp_us;
        assert!((sum - report.latency.unwrap().mean_us).abs() < 1.0);
    }

    #[test]
    fn event_csv_has_fixed_header_and_flags() {
        let mut out = Vec::new();
        write_event_csv(&[record(5, false)], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), EVENT_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "0,0,28000,30000,30000,34000,42000,50000,legacy,0,0,0");
    }
}

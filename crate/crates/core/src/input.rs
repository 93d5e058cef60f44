//! Trace generation and ingestion, the input-hardware latency model, and
//! touch prediction.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DisplayConfig, InputEvent, TouchSample};
use crate::engine::SimTime;
use crate::rng::{round_half_up, RandomStream};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace config: {0}")]
    Config(String),
    #[error("trace parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Latency between a physical touch and the driver handing the event over.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InputHardwareModel {
    pub sample_rate_hz: f64,
    pub hw_latency_mean_us: u64,
    /// Truncated at +-3 sigma.
    pub hw_latency_sigma_us: f64,
}

impl Default for InputHardwareModel {
    fn default() -> Self {
        InputHardwareModel {
            sample_rate_hz: 120.0,
            hw_latency_mean_us: 28_000,
            hw_latency_sigma_us: 500.0,
        }
    }
}

impl InputHardwareModel {
    /// Sample period in integer microseconds.
    pub fn period_us(&self) -> u64 {
        round_half_up(1e6 / self.sample_rate_hz)
    }
}

/// Prediction horizon, bounded to the supported range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorHorizon(pub u64);

impl PredictorHorizon {
    pub const MAX_US: u64 = 32_000;

    pub fn new(us: u64) -> Result<PredictorHorizon, TraceError> {
        if us > Self::MAX_US {
            return Err(TraceError::Config(format!(
                "prediction horizon {us}us exceeds {}us",
                Self::MAX_US
            )));
        }
        Ok(PredictorHorizon(us))
    }
}

/// Parameters of the synthetic drawing trace: vertical sweep strokes
/// end-to-end in portrait orientation, x fixed mid-screen, per-stroke speed
/// drawn from a truncated normal.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TraceGenConfig {
    pub duration_s: f64,
    pub speed_mm_s: f64,
    pub speed_sigma_mm_s: f64,
    pub dpi: f64,
    pub sample_rate_hz: f64,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        TraceGenConfig {
            duration_s: 150.0,
            speed_mm_s: 68.0,
            speed_sigma_mm_s: 12.0,
            dpi: 493.0,
            sample_rate_hz: 120.0,
        }
    }
}

/// Generates the sweep trace. Each stroke runs one full screen height; the
/// per-sample step is the stroke speed converted to pixels per sample.
pub fn gen_linear_trace(
    cfg: &TraceGenConfig,
    display: &DisplayConfig,
    stream: &mut RandomStream,
) -> Result<Vec<TouchSample>, TraceError> {
    if cfg.duration_s <= 0.0 {
        return Err(TraceError::Config("duration must be positive".into()));
    }
    if cfg.speed_mm_s <= 0.0 {
        return Err(TraceError::Config("speed must be positive".into()));
    }
    if cfg.dpi <= 0.0 {
        return Err(TraceError::Config("dpi must be positive".into()));
    }
    if cfg.sample_rate_hz <= 0.0 {
        return Err(TraceError::Config("sample rate must be positive".into()));
    }
    let period = round_half_up(1e6 / cfg.sample_rate_hz);
    let count = (cfg.duration_s * cfg.sample_rate_hz).round() as u64;
    let x = display.w / 2;
    let max_y = (display.h - 1) as i64;

    let mut samples = Vec::with_capacity(count as usize);
    let mut y: i64 = 0;
    let mut dir: i64 = 1;
    let mut step = stroke_step(cfg, stream);
    for seq in 0..count {
        samples.push(TouchSample {
            seq,
            t_physical: SimTime(seq * period),
            x,
            y: y as u32,
        });
        y += dir * step;
        if y >= max_y {
            y = max_y;
            dir = -1;
            step = stroke_step(cfg, stream);
        } else if y <= 0 {
            y = 0;
            dir = 1;
            step = stroke_step(cfg, stream);
        }
    }
    Ok(samples)
}

/// Integer pixels per sample for one stroke.
fn stroke_step(cfg: &TraceGenConfig, stream: &mut RandomStream) -> i64 {
    let speed = stream.trunc_normal(cfg.speed_mm_s, cfg.speed_sigma_mm_s).max(1.0);
    let px_per_s = speed / 25.4 * cfg.dpi;
    (round_half_up(px_per_s / cfg.sample_rate_hz) as i64).max(1)
}

/// Applies the hardware latency model. Delivery order is preserved by
/// clamping each t_device to be strictly greater than the previous one.
pub fn apply_input_hardware(
    samples: &[TouchSample],
    model: &InputHardwareModel,
    stream: &mut RandomStream,
) -> Vec<InputEvent> {
    let latencies = (0..samples.len())
        .map(|_| {
            round_half_up(
                stream
                    .trunc_normal(model.hw_latency_mean_us as f64, model.hw_latency_sigma_us)
                    .max(0.0),
            )
        })
        .collect::<Vec<_>>();
    apply_with_latencies(samples, &latencies)
}

/// Core of [`apply_input_hardware`] with explicit per-sample latencies.
pub fn apply_with_latencies(samples: &[TouchSample], latency_us: &[u64]) -> Vec<InputEvent> {
    let mut out = Vec::with_capacity(samples.len());
    let mut prev: Option<SimTime> = None;
    for (s, lat) in samples.iter().zip(latency_us) {
        let mut t = s.t_physical.add_us(*lat);
        if let Some(p) = prev {
            if t <= p {
                t = p.add_us(1);
            }
        }
        prev = Some(t);
        out.push(InputEvent { sample: *s, t_device: t });
    }
    out
}

/// Linear extrapolation from the last two samples, clamped to the screen.
/// With fewer than two samples the last known position is returned.
pub fn predict_touch(history: &[TouchSample], horizon_us: u64, display: &DisplayConfig) -> (u32, u32) {
    match history {
        [] => (display.w / 2, 0),
        [only] => (only.x, only.y),
        [.., a, b] => {
            let dt = b.t_physical.delta_us(a.t_physical) as f64;
            if dt == 0.0 || horizon_us == 0 {
                return (b.x, b.y);
            }
            let vx = (b.x as f64 - a.x as f64) / dt;
            let vy = (b.y as f64 - a.y as f64) / dt;
            let px = (b.x as f64 + vx * horizon_us as f64).round();
            let py = (b.y as f64 + vy * horizon_us as f64).round();
            (
                px.clamp(0.0, (display.w - 1) as f64) as u32,
                py.clamp(0.0, (display.h - 1) as f64) as u32,
            )
        }
    }
}

const TRACE_HEADER: &str = "t_us,x,y";

/// Writes the fixed `t_us,x,y` CSV schema.
pub fn write_trace<W: Write>(samples: &[TouchSample], mut w: W) -> Result<(), TraceError> {
    writeln!(w, "{TRACE_HEADER}")?;
    for s in samples {
        writeln!(w, "{},{},{}", s.t_physical.us(), s.x, s.y)?;
    }
    Ok(())
}

pub fn save_trace(samples: &[TouchSample], path: &Path) -> Result<(), TraceError> {
    let file = std::fs::File::create(path)?;
    write_trace(samples, std::io::BufWriter::new(file))
}

/// Parses the `t_us,x,y` schema, validating strict timestamp monotonicity and
/// screen bounds. Errors carry the 1-based line number.
pub fn read_trace<R: Read>(r: R, display: &DisplayConfig) -> Result<Vec<TouchSample>, TraceError> {
    let reader = BufReader::new(r);
    let mut samples = Vec::new();
    let mut prev_t: Option<u64> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if idx == 0 {
            if line.trim() != TRACE_HEADER {
                return Err(TraceError::Parse {
                    line: lineno,
                    msg: format!("expected header '{TRACE_HEADER}', got '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next_field = |name: &str| {
            fields
                .next()
                .ok_or_else(|| TraceError::Parse { line: lineno, msg: format!("missing {name}") })
        };
        let t: u64 = parse_field(next_field("t_us")?, "t_us", lineno)?;
        let x: u32 = parse_field(next_field("x")?, "x", lineno)?;
        let y: u32 = parse_field(next_field("y")?, "y", lineno)?;
        if let Some(p) = prev_t {
            if t <= p {
                return Err(TraceError::Parse {
                    line: lineno,
                    msg: format!("t_us {t} not strictly increasing (previous {p})"),
                });
            }
        }
        if x >= display.w || y >= display.h {
            return Err(TraceError::Parse {
                line: lineno,
                msg: format!("({x},{y}) outside {}x{}", display.w, display.h),
            });
        }
        prev_t = Some(t);
        samples.push(TouchSample { seq: samples.len() as u64, t_physical: SimTime(t), x, y });
    }
    Ok(samples)
}

pub fn load_trace(path: &Path, display: &DisplayConfig) -> Result<Vec<TouchSample>, TraceError> {
    let file = std::fs::File::open(path)?;
    read_trace(file, display)
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T, TraceError> {
    s.trim()
        .parse()
        .map_err(|_| TraceError::Parse { line, msg: format!("invalid {name} value '{s}'") })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn display() -> DisplayConfig {
        DisplayConfig::default()
    }

    fn stream() -> RandomStream {
        RandomStream::derive(99, "trace-test")
    }

    #[test]
    fn trace_has_duration_times_rate_samples() {
        let cfg = TraceGenConfig::default();
        let t = gen_linear_trace(&cfg, &display(), &mut stream()).unwrap();
        assert_eq!(t.len(), 18_000);
    }

    #[test]
    fn one_second_trace_is_120_samples_at_fixed_period() {
        let cfg = TraceGenConfig { duration_s: 1.0, speed_sigma_mm_s: 0.0, ..Default::default() };
        let t = gen_linear_trace(&cfg, &display(), &mut stream()).unwrap();
        assert_eq!(t.len(), 120);
        for pair in t.windows(2) {
            assert_eq!(pair[1].t_physical.delta_us(pair[0].t_physical), 8_333);
        }
        assert!(t.iter().all(|s| s.x == 720));
    }

    #[test]
    fn per_sample_step_matches_speed_conversion() {
        // 68 mm/s at 493 dpi is 1319.8 px/s; 11 px per sample at 120 Hz.
        let cfg = TraceGenConfig { duration_s: 1.0, speed_sigma_mm_s: 0.0, ..Default::default() };
        let t = gen_linear_trace(&cfg, &display(), &mut stream()).unwrap();
        let px_per_s = 68.0 / 25.4 * 493.0;
        assert_eq!(round_half_up(px_per_s / 120.0), 11);
        assert_eq!(t[1].y - t[0].y, 11);
    }

    #[test]
    fn strokes_bounce_at_screen_edges() {
        let cfg = TraceGenConfig { duration_s: 10.0, speed_sigma_mm_s: 0.0, ..Default::default() };
        let t = gen_linear_trace(&cfg, &display(), &mut stream()).unwrap();
        let max = t.iter().map(|s| s.y).max().unwrap();
        assert_eq!(max, 2_559);
        assert!(t.iter().all(|s| s.y < 2_560));
        // Direction reverses after hitting the bottom.
        let peak = t.iter().position(|s| s.y == 2_559).unwrap();
        assert!(t[peak + 1].y < 2_559);
    }

    #[test]
    fn invalid_generator_config_is_rejected() {
        let cfg = TraceGenConfig { dpi: 0.0, ..Default::default() };
        assert!(gen_linear_trace(&cfg, &display(), &mut stream()).is_err());
    }

    #[test]
    fn hardware_latency_constant_sigma_zero() {
        let samples = vec![
            TouchSample { seq: 0, t_physical: SimTime(0), x: 720, y: 0 },
            TouchSample { seq: 1, t_physical: SimTime(8_333), x: 720, y: 11 },
        ];
        let model = InputHardwareModel { hw_latency_sigma_us: 0.0, ..Default::default() };
        let evs = apply_input_hardware(&samples, &model, &mut stream());
        assert_eq!(evs[0].t_device, SimTime(28_000));
        assert_eq!(evs[1].t_device, SimTime(36_333));

        let zero = InputHardwareModel {
            hw_latency_mean_us: 0,
            hw_latency_sigma_us: 0.0,
            ..Default::default()
        };
        let evs = apply_input_hardware(&samples, &zero, &mut stream());
        assert_eq!(evs[0].t_device, evs[0].sample.t_physical);
        assert_eq!(evs[1].t_device, evs[1].sample.t_physical);
    }

    #[test]
    fn delivery_order_is_preserved_by_clamping() {
        let samples = vec![
            TouchSample { seq: 0, t_physical: SimTime(0), x: 0, y: 0 },
            TouchSample { seq: 1, t_physical: SimTime(8_333), x: 0, y: 11 },
            TouchSample { seq: 2, t_physical: SimTime(16_666), x: 0, y: 22 },
        ];
        // Spec example draws 28_500 then 27_400: the second still lands later
        // (36_733 > 28_500), so no clamp fires.
        let evs = apply_with_latencies(&samples, &[28_500, 27_400, 27_000]);
        assert_eq!(evs[1].t_device, SimTime(35_733));
        assert!(evs[1].t_device > evs[0].t_device);
        // A draw short enough to invert order is clamped to previous + 1.
        let evs = apply_with_latencies(&samples, &[28_500, 19_000, 28_000]);
        assert_eq!(evs[1].t_device, SimTime(28_501));
        assert_eq!(evs[2].t_device, SimTime(44_666));
        assert!(evs.windows(2).all(|w| w[0].t_device < w[1].t_device));
    }

    #[test]
    fn prediction_extrapolates_linearly() {
        let hist = vec![
            TouchSample { seq: 0, t_physical: SimTime(0), x: 720, y: 100 },
            TouchSample { seq: 1, t_physical: SimTime(8_333), x: 720, y: 111 },
        ];
        let (x, y) = predict_touch(&hist, 16_667, &display());
        assert_eq!((x, y), (720, 133));
        // Horizon zero keeps the last position.
        assert_eq!(predict_touch(&hist, 0, &display()), (720, 111));
        // Stationary history predicts in place for any horizon.
        let still = vec![
            TouchSample { seq: 0, t_physical: SimTime(0), x: 64, y: 500 },
            TouchSample { seq: 1, t_physical: SimTime(8_333), x: 64, y: 500 },
        ];
        assert_eq!(predict_touch(&still, 32_000, &display()), (64, 500));
        // Fallback below two samples.
        let one = vec![TouchSample { seq: 0, t_physical: SimTime(0), x: 9, y: 9 }];
        assert_eq!(predict_touch(&one, 10_000, &display()), (9, 9));
    }

    #[test]
    fn prediction_clamps_to_screen() {
        let hist = vec![
            TouchSample { seq: 0, t_physical: SimTime(0), x: 720, y: 2_400 },
            TouchSample { seq: 1, t_physical: SimTime(8_333), x: 720, y: 2_550 },
        ];
        let (_, y) = predict_touch(&hist, 32_000, &display());
        assert_eq!(y, 2_559);
    }

    #[test]
    fn constant_velocity_prediction_has_zero_error() {
        // Grounding for the orthogonality scenarios: predicting h ahead on a
        // constant-step trace matches the true position at t+h.
        let cfg = TraceGenConfig { duration_s: 1.0, speed_sigma_mm_s: 0.0, ..Default::default() };
        let t = gen_linear_trace(&cfg, &display(), &mut stream()).unwrap();
        let h = 16_666; // exactly two sample periods
        for i in 1..40 {
            let (_, py) = predict_touch(&t[..=i], h, &display());
            let truth = t[i + 2].y;
            assert!((py as i64 - truth as i64).abs() <= 1, "i={i} py={py} truth={truth}");
        }
    }

    #[test]
    fn trace_roundtrip_and_parse_errors() {
        let d = display();
        let text = "t_us,x,y\n0,720,0\n8333,720,11\n";
        let t = read_trace(text.as_bytes(), &d).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].y, 11);

        let mut out = Vec::new();
        write_trace(&t, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);

        // Duplicate timestamp reported at its line.
        let bad = "t_us,x,y\n100,1,1\n100,1,2\n";
        match read_trace(bad.as_bytes(), &d) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        // Exclusive coordinate bound.
        let oob = "t_us,x,y\n0,720,2560\n";
        assert!(read_trace(oob.as_bytes(), &d).is_err());

        let no_header = "0,720,0\n";
        assert!(read_trace(no_header.as_bytes(), &d).is_err());
    }
}

//! Scenario configuration: a single JSON document describing the display,
//! the input model, applications, path designs, bindings, scheduled path
//! switches, prediction settings and run parameters.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{AppModel, DirtyModel, DisplayConfig, TAppDist};
use crate::input::{InputHardwareModel, PredictorHorizon};
use crate::paths::{PathDesign, PredictorMode};

#[derive(Debug, Error)]
#[error("config: {field}: {msg}")]
pub struct ConfigError {
    pub field: String,
    pub msg: String,
}

impl ConfigError {
    pub fn new(field: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError { field: field.to_string(), msg: msg.into() }
    }
}

/// Where an application's touch trace comes from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSpec {
    /// Synthetic sweep trace; duration and sample rate come from the run and
    /// input sections.
    Generate { speed_mm_s: f64, speed_sigma_mm_s: f64, dpi: f64 },
    /// Load a `t_us,x,y` CSV.
    File { path: PathBuf },
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec::Generate { speed_mm_s: 68.0, speed_sigma_mm_s: 12.0, dpi: 493.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AppConfig {
    pub app_id: String,
    pub t_app: TAppDist,
    #[serde(default = "default_dirty_model")]
    pub dirty_model: DirtyModel,
    #[serde(default)]
    pub outside_change_prob: f64,
    #[serde(default)]
    pub trace: TraceSpec,
    #[serde(default = "default_pool")]
    pub buffer_pool: usize,
    #[serde(default)]
    pub z_order: u32,
}

fn default_dirty_model() -> DirtyModel {
    DirtyModel::Brush { radius_px: 8 }
}

fn default_pool() -> usize {
    3
}

impl AppConfig {
    pub fn model(&self) -> AppModel {
        AppModel {
            app_id: self.app_id.clone(),
            t_app: self.t_app.clone(),
            dirty_model: self.dirty_model,
            outside_change_prob: self.outside_change_prob,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BindingSpec {
    pub app_id: String,
    pub path: String,
}

/// One scheduled `apply_path(app, path)` call.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwitchSpec {
    pub t_us: u64,
    pub app_id: String,
    pub path: String,
}

/// Touch prediction plus the drawing-time predictor settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionConfig {
    /// Touch prediction horizon applied by the application when drawing.
    #[serde(default)]
    pub horizon_us: u64,
    #[serde(default = "default_mode")]
    pub t_app_mode: PredictorMode,
    /// Prediction used before the window holds 32 observations.
    #[serde(default = "default_prior")]
    pub t_app_prior_us: u64,
    /// Warm-start the window with a constant.
    #[serde(default)]
    pub t_app_preseed_us: Option<u64>,
    /// Freeze the predictor at its preseed (scripted experiments).
    #[serde(default)]
    pub freeze: bool,
}

fn default_mode() -> PredictorMode {
    PredictorMode::Mean
}

fn default_prior() -> u64 {
    8_000
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            horizon_us: 0,
            t_app_mode: default_mode(),
            t_app_prior_us: default_prior(),
            t_app_preseed_us: None,
            freeze: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub duration_s: f64,
    pub master_seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { duration_s: 150.0, master_seed: 1, out_dir: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub display: DisplayConfig,
    #[serde(default)]
    pub input: InputHardwareModel,
    pub apps: Vec<AppConfig>,
    /// Extra or overriding designs; the five built-ins are always registered.
    #[serde(default)]
    pub paths: Vec<PathDesign>,
    /// Fallback design for unknown preferences.
    #[serde(default = "default_path_name")]
    pub default_path: String,
    #[serde(default)]
    pub bindings: Vec<BindingSpec>,
    #[serde(default)]
    pub switches: Vec<SwitchSpec>,
    #[serde(default)]
    pub prediction: PredictionConfig,
    #[serde(default)]
    pub run: RunConfig,
}

fn default_path_name() -> String {
    crate::paths::LEGACY.to_string()
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<ScenarioConfig, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)
            .map_err(|e| ConfigError::new("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.display.validate().map_err(|e| ConfigError::new("display", e.to_string()))?;
        if self.input.sample_rate_hz <= 0.0 {
            return Err(ConfigError::new("input.sample_rate_hz", "must be positive"));
        }
        if self.input.hw_latency_sigma_us < 0.0 {
            return Err(ConfigError::new("input.hw_latency_sigma_us", "must be non-negative"));
        }
        if self.apps.is_empty() {
            return Err(ConfigError::new("apps", "at least one application required"));
        }
        let mut seen = BTreeSet::new();
        for (i, app) in self.apps.iter().enumerate() {
            let field = format!("apps[{i}]");
            app.model().validate().map_err(|e| ConfigError::new(&field, e.to_string()))?;
            if !seen.insert(app.app_id.clone()) {
                return Err(ConfigError::new(&field, format!("duplicate app_id {}", app.app_id)));
            }
            if app.buffer_pool < 2 {
                return Err(ConfigError::new(
                    &format!("{field}.buffer_pool"),
                    "needs at least two buffers",
                ));
            }
            if let TraceSpec::Generate { speed_mm_s, dpi, .. } = &app.trace {
                if *speed_mm_s <= 0.0 {
                    return Err(ConfigError::new(
                        &format!("{field}.trace.speed_mm_s"),
                        "must be positive",
                    ));
                }
                if *dpi <= 0.0 {
                    return Err(ConfigError::new(&format!("{field}.trace.dpi"), "must be positive"));
                }
            }
        }
        let mut names: BTreeSet<&str> = BTreeSet::new();
        for (i, p) in self.paths.iter().enumerate() {
            if p.name.is_empty() {
                return Err(ConfigError::new(&format!("paths[{i}].name"), "must be non-empty"));
            }
            if !names.insert(p.name.as_str()) {
                return Err(ConfigError::new(
                    &format!("paths[{i}].name"),
                    format!("duplicate path name {}", p.name),
                ));
            }
            if p.em_offset_us >= self.display.t_sync_us {
                return Err(ConfigError::new(
                    &format!("paths[{i}].em_offset_us"),
                    "delivery offset must be below the refresh period",
                ));
            }
        }
        PredictorHorizon::new(self.prediction.horizon_us)
            .map_err(|e| ConfigError::new("prediction.horizon_us", e.to_string()))?;
        if self.run.duration_s <= 0.0 {
            return Err(ConfigError::new("run.duration_s", "must be positive"));
        }
        for (i, b) in self.bindings.iter().enumerate() {
            if !self.apps.iter().any(|a| a.app_id == b.app_id) {
                return Err(ConfigError::new(
                    &format!("bindings[{i}].app_id"),
                    format!("unknown app {}", b.app_id),
                ));
            }
        }
        for (i, s) in self.switches.iter().enumerate() {
            if !self.apps.iter().any(|a| a.app_id == s.app_id) {
                return Err(ConfigError::new(
                    &format!("switches[{i}].app_id"),
                    format!("unknown app {}", s.app_id),
                ));
            }
        }
        Ok(())
    }

    /// Scenario with one drawing application, used as a base by tests.
    pub fn single_app(
        app_id: &str,
        t_app: TAppDist,
        path: &str,
        duration_s: f64,
        seed: u64,
    ) -> ScenarioConfig {
        ScenarioConfig {
            display: DisplayConfig::default(),
            input: InputHardwareModel::default(),
            apps: vec![AppConfig {
                app_id: app_id.to_string(),
                t_app,
                dirty_model: default_dirty_model(),
                outside_change_prob: 0.0,
                trace: TraceSpec::default(),
                buffer_pool: 3,
                z_order: 0,
            }],
            paths: Vec::new(),
            default_path: default_path_name(),
            bindings: vec![BindingSpec { app_id: app_id.to_string(), path: path.to_string() }],
            switches: Vec::new(),
            prediction: PredictionConfig::default(),
            run: RunConfig { duration_s, master_seed: seed, out_dir: None },
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

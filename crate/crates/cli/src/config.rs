//! Run configuration: module defaults overlaid with a JSON file.

use drivesim::diffusion::{make_schedule, Architecture, NoiseSchedule, ScheduleKind, TrainConfig};
use drivesim::meshalign::DEFAULT_LAMBDA;
use drivesim::metrics::{VimsConfig, DEFAULT_K, DEFAULT_ROTATION_WEIGHT, OCCLUSION_THRESHOLD};
use drivesim::raster::RenderConfig;
use drivesim::splatfit::FitConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub lateral_range: f64,
    pub vertical_range: f64,
    pub heading_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshPairs {
    pub probability: f64,
    pub lighting: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Training {
    pub steps: usize,
    pub step_size: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rotation_weight: f64,
    pub occlusion_threshold: f64,
    pub osr_k: usize,
    pub clip_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub render: RenderConfig,
    pub fit: FitConfig,
    pub perturbation: Perturbation,
    pub mesh_pairs: MeshPairs,
    pub schedule: Schedule,
    pub architecture: Architecture,
    pub training: Training,
    pub lambda: f64,
    pub metrics: Metrics,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            render: RenderConfig::default(),
            fit: FitConfig::default(),
            perturbation: Perturbation {
                lateral_range: 0.0,
                vertical_range: 0.0,
                heading_range: 0.3,
            },
            mesh_pairs: MeshPairs {
                probability: 0.5,
                lighting: 0.1,
            },
            schedule: Schedule {
                steps: 100,
                beta_start: 1e-4,
                beta_end: 0.02,
                kind: ScheduleKind::Linear,
            },
            architecture: Architecture::default(),
            training: Training {
                steps: t.steps,
                step_size: t.step_size,
                batch: t.batch,
            },
            lambda: DEFAULT_LAMBDA,
            metrics: Metrics {
                rotation_weight: DEFAULT_ROTATION_WEIGHT,
                occlusion_threshold: OCCLUSION_THRESHOLD,
                osr_k: DEFAULT_K,
                clip_window: 4,
            },
        }
    }
}

impl RunConfig {
    pub fn noise_schedule(&self) -> Result<NoiseSchedule, String> {
        let s = &self.schedule;
        make_schedule(s.steps, s.beta_start, s.beta_end, s.kind).map_err(|e| e.to_string())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.training.steps,
            step_size: self.training.step_size,
            batch: self.training.batch,
            seed,
        }
    }

    pub fn vims(&self) -> VimsConfig {
        VimsConfig {
            rotation_weight: self.metrics.rotation_weight,
            occlusion_threshold: self.metrics.occlusion_threshold,
        }
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn merge(base: &mut Value, over: Value) -> Result<(), String> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v).map_err(|e| format!("{k}.{e}"))?,
                    None => return Err(format!("{k}: unknown key")),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

/// Defaults overlaid with `path`. A run record is accepted too, in which
/// case its `config` member is used.
pub fn load(path: Option<&Path>) -> Result<RunConfig, String> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut over: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if over.get("tool").and_then(Value::as_str) == Some(crate::record::TOOL) {
        over = over.get("config").cloned().ok_or_else(|| format!("{}: run record without config", path.display()))?;
    }
    let mut base = serde_json::to_value(RunConfig::default()).expect("config serializes");
    merge(&mut base, over).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_value(base).map_err(|e| format!("{}: {e}", path.display()))
}

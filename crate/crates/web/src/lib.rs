//! Browser bindings for the platform-safety demo page.
//!
//! Three operations are exported: replaying a built-in scenario through the
//! full pipeline, the camera height model, and the efficiency metric. The
//! plain Rust functions behind them return `String` errors so they can be
//! tested natively; the exported wrappers convert to `JsError`.

use railguard::clock::FrozenClock;
use railguard::compute_efficiency;
use railguard::geometry::{estimate_height, CameraModel};
use railguard::pipeline::{PipelineConfig, SafetyPipeline};
use railguard::scenario::{builtin_scenario, builtin_scenarios, encode_scenario};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// A scenario replayed through the pipeline, one JSON view per frame.
#[wasm_bindgen]
pub struct StationReplay {
    width: u32,
    height: u32,
    zones: Value,
    frames: Vec<Value>,
}

impl StationReplay {
    pub fn load(name: &str) -> Result<Self, String> {
        let spec = builtin_scenario(name).ok_or_else(|| format!("unknown scenario '{name}'"))?;
        let config = PipelineConfig::station();
        let zones = serde_json::to_value(&config.zones).map_err(|e| e.to_string())?;
        let (_, tensors, _) = encode_scenario(&spec, &config.decode).map_err(|e| e.to_string())?;
        // no monotonic clock on wasm32
        let mut pipeline =
            SafetyPipeline::with_clock(config, Box::new(FrozenClock)).map_err(|e| e.to_string())?;
        let mut frames = Vec::with_capacity(tensors.len());
        for t in &tensors {
            let r = pipeline.process_frame(t).map_err(|e| e.to_string())?;
            let alerts: Vec<Value> = r
                .alerts
                .iter()
                .map(|a| {
                    let b = &a.detection.bbox;
                    json!({"zone": a.zone, "severity": a.severity, "box": [b.x1, b.y1, b.x2, b.y2]})
                })
                .collect();
            frames.push(json!({
                "frame": r.frame_index,
                "state": r.train_state,
                "occupancy": r.observation.occupancy,
                "detections": r.detections,
                "alerts": alerts,
            }));
        }
        Ok(Self {
            width: spec.image_width,
            height: spec.image_height,
            zones,
            frames,
        })
    }

    pub fn frame(&self, index: usize) -> Option<&Value> {
        self.frames.get(index)
    }
}

#[wasm_bindgen]
impl StationReplay {
    #[wasm_bindgen(constructor)]
    pub fn new(scenario: &str) -> Result<StationReplay, JsError> {
        Self::load(scenario).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[wasm_bindgen(js_name = frameCount)]
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// `[{"name","kind","polygon"}]`
    #[wasm_bindgen(js_name = zonesJson)]
    pub fn zones_json(&self) -> String {
        self.zones.to_string()
    }

    /// `{"frame","state","occupancy","detections","alerts"}`, or `null` past the end.
    #[wasm_bindgen(js_name = frameJson)]
    pub fn frame_json(&self, index: usize) -> String {
        self.frame(index)
            .map_or_else(|| "null".into(), Value::to_string)
    }
}

/// Built-in scenario names, comma separated.
#[wasm_bindgen(js_name = scenarioNames)]
pub fn scenario_names() -> String {
    builtin_scenarios()
        .into_iter()
        .map(|s| s.name)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn height_m(camera_height_m: f64, ground_hit_m: f64, head_dist_m: f64) -> Result<f64, String> {
    // z0 does not enter the ray form; any positive value validates
    let cam = CameraModel::new(camera_height_m, 1.0).map_err(|e| e.to_string())?;
    estimate_height(&cam, ground_hit_m, head_dist_m).map_err(|e| e.to_string())
}

/// Person height from the camera height and the two ground distances.
#[wasm_bindgen(js_name = estimateHeight)]
pub fn estimate_height_js(
    camera_height_m: f64,
    ground_hit_m: f64,
    head_dist_m: f64,
) -> Result<f64, JsError> {
    height_m(camera_height_m, ground_hit_m, head_dist_m).map_err(|e| JsError::new(&e))
}

/// Accuracy (percent) per millisecond-watt.
#[wasm_bindgen]
pub fn efficiency(accuracy_pct: f64, latency_ms: f64, power_w: f64) -> Result<f64, JsError> {
    compute_efficiency(accuracy_pct, latency_ms, power_w).map_err(|e| JsError::new(&e.to_string()))
}

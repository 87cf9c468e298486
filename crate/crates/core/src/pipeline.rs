//! Per-frame orchestration: decode, NMS, class split, train FSM, zone tests
//! and severity-graded alerts.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, MonotonicClock};
use crate::geometry::{ground_point, CameraModel, HeightQuery, Zone, ZoneKind};
use crate::scenario::station_zones;
use crate::tensor_io::{InferenceBackend, RawTensorSet, TensorStreamHeader};
use crate::train_state::{FsmConfig, TrainObservation, TrainState, TrainStateMachine, Transition};
use crate::yolox::{
    decode_all, filter_class, nms, write_detections_json, DecodeConfig, DecodeError, Detection,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config must contain exactly one {kind} zone, found {found}")]
    ZoneCount { kind: &'static str, found: usize },
    #[error("config is missing a {0} zone")]
    MissingZone(&'static str),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Caution,
    Warning,
    Critical,
}

impl Severity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Severity::Caution => "CAUTION",
            Severity::Warning => "WARNING",
            Severity::Critical => "CRITICAL",
        }
    }
}

/// Severity of a DANGER-zone intrusion for each train state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct SeverityTable {
    pub off: Severity,
    #[serde(rename = "IN")]
    pub in_: Severity,
    pub on: Severity,
    pub out: Severity,
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self {
            off: Severity::Caution,
            in_: Severity::Critical,
            on: Severity::Warning,
            out: Severity::Warning,
        }
    }
}

impl SeverityTable {
    /// `None` for zones that never alert (RISK, MONITOR).
    pub fn grade(&self, state: TrainState, zone_kind: ZoneKind) -> Option<Severity> {
        if zone_kind != ZoneKind::Danger {
            return None;
        }
        Some(match state {
            TrainState::Off => self.off,
            TrainState::In => self.in_,
            TrainState::On => self.on,
            TrainState::Out => self.out,
        })
    }
}

/// Grading with the default table.
pub fn severity_for(state: TrainState, zone_kind: ZoneKind) -> Option<Severity> {
    SeverityTable::default().grade(state, zone_kind)
}

fn default_camera() -> CameraModel {
    CameraModel {
        camera_height_m: 3.0,
        optical_axis_ground_m: 8.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub decode: DecodeConfig,
    pub zones: Vec<Zone>,
    #[serde(default = "default_camera")]
    pub camera: CameraModel,
    #[serde(default)]
    pub fsm: FsmConfig,
    #[serde(default)]
    pub severity: SeverityTable,
}

impl PipelineConfig {
    /// Configuration matching the built-in synthetic station scenes.
    pub fn station() -> Self {
        Self {
            decode: DecodeConfig::station(),
            zones: station_zones(),
            camera: default_camera(),
            fsm: FsmConfig::default(),
            severity: SeverityTable::default(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let count = |k: ZoneKind| self.zones.iter().filter(|z| z.kind == k).count();
        match count(ZoneKind::Risk) {
            0 => return Err(ConfigError::MissingZone("RISK")),
            1 => {}
            n => {
                return Err(ConfigError::ZoneCount {
                    kind: "RISK",
                    found: n,
                })
            }
        }
        if count(ZoneKind::Danger) == 0 {
            return Err(ConfigError::MissingZone("DANGER"));
        }
        for z in &self.zones {
            z.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.decode.validate().map_err(ConfigError::Invalid)?;
        self.fsm.validate().map_err(ConfigError::Invalid)?;
        self.camera
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn risk_zone(&self) -> &Zone {
        self.zones
            .iter()
            .find(|z| z.kind == ZoneKind::Risk)
            .expect("validated config has a RISK zone")
    }

    /// Checks a stream header against the decoder's class count and strides.
    pub fn check_stream(&self, header: &TensorStreamHeader) -> Result<(), ConfigError> {
        if header.num_classes != self.decode.num_classes || header.strides != self.decode.strides {
            return Err(ConfigError::Invalid(format!(
                "stream has {} classes and strides {:?}, config expects {} classes and strides {:?}",
                header.num_classes, header.strides, self.decode.num_classes, self.decode.strides
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlertEvent {
    pub frame_index: u32,
    pub zone: String,
    pub train_state: TrainState,
    pub severity: Severity,
    pub detection: Detection,
    pub est_height_m: Option<f64>,
}

impl AlertEvent {
    /// `{"frame","zone","state","severity","box","score","height_m"?}`
    pub fn to_jsonl(&self) -> String {
        let b = &self.detection.bbox;
        let mut s = format!(
            "{{\"frame\":{},\"zone\":{},\"state\":\"{}\",\"severity\":\"{}\",\"box\":[{:.6},{:.6},{:.6},{:.6}],\"score\":{:.6}",
            self.frame_index,
            serde_json::to_string(&self.zone).expect("string serializes"),
            self.train_state,
            self.severity.as_str(),
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            self.detection.score
        );
        if let Some(h) = self.est_height_m {
            let _ = write!(s, ",\"height_m\":{h:.6}");
        }
        s.push('}');
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageLatency {
    pub decode_ms: f64,
    pub nms_ms: f64,
    pub geometry_ms: f64,
    pub fsm_ms: f64,
}

impl StageLatency {
    pub fn max(&self) -> f64 {
        self.decode_ms
            .max(self.nms_ms)
            .max(self.geometry_ms)
            .max(self.fsm_ms)
    }

    pub fn total(&self) -> f64 {
        self.decode_ms + self.nms_ms + self.geometry_ms + self.fsm_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame_index: u32,
    pub detections: Vec<Detection>,
    pub observation: TrainObservation,
    pub train_state: TrainState,
    pub transition: Option<Transition>,
    pub alerts: Vec<AlertEvent>,
    pub latency: StageLatency,
}

impl FrameResult {
    /// Result record; the `detections` field makes it readable as a
    /// detection JSON Lines stream.
    pub fn to_jsonl(&self) -> String {
        let mut s = format!(
            "{{\"frame\":{},\"state\":\"{}\",\"detections\":",
            self.frame_index, self.train_state
        );
        write_detections_json(&mut s, &self.detections);
        let l = &self.latency;
        let _ = write!(
            s,
            ",\"alerts\":{},\"latency_ms\":{{\"decode\":{:.6},\"nms\":{:.6},\"geometry\":{:.6},\"fsm\":{:.6}}}}}",
            self.alerts.len(),
            l.decode_ms,
            l.nms_ms,
            l.geometry_ms,
            l.fsm_ms
        );
        s
    }
}

#[derive(Debug, Error)]
#[error("frame {frame_index}: {source}")]
pub struct FrameError {
    pub frame_index: u32,
    #[source]
    pub source: DecodeError,
}

impl FrameError {
    pub fn to_jsonl(&self) -> String {
        serde_json::json!({"frame": self.frame_index, "error": self.source.to_string()}).to_string()
    }
}

/// Maps a person detection to the metric inputs of the height model.
/// Pixel-to-metric calibration is camera specific, so none is built in.
pub trait HeightProbe: Send {
    fn query(&self, detection: &Detection) -> Option<HeightQuery>;
}

/// The per-platform pipeline: configuration plus the train state it carries
/// from frame to frame.
pub struct SafetyPipeline {
    config: PipelineConfig,
    fsm: TrainStateMachine,
    clock: Box<dyn Clock + Send>,
    height_probe: Option<Box<dyn HeightProbe>>,
}

impl SafetyPipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, ConfigError> {
        Self::with_clock(config, Box::new(MonotonicClock::new()))
    }

    pub fn with_clock(
        config: PipelineConfig,
        clock: Box<dyn Clock + Send>,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            fsm: TrainStateMachine::new(config.fsm),
            config,
            clock,
            height_probe: None,
        })
    }

    pub fn set_height_probe(&mut self, probe: Box<dyn HeightProbe>) {
        self.height_probe = Some(probe);
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn train_state(&self) -> TrainState {
        self.fsm.state()
    }

    pub fn process_frame(&mut self, frame: &RawTensorSet) -> Result<FrameResult, FrameError> {
        let cfg = &self.config;
        let t0 = self.clock.now_ms();
        let raw = decode_all(frame, &cfg.decode).map_err(|source| FrameError {
            frame_index: frame.frame_index,
            source,
        })?;
        let t1 = self.clock.now_ms();
        let detections = nms(&raw, cfg.decode.nms_iou_threshold);
        let t2 = self.clock.now_ms();

        let trains = filter_class(&detections, cfg.decode.train_class_id);
        let observation = self.fsm.observe(&trains, cfg.risk_zone());
        let transition = self.fsm.step(frame.frame_index, &observation);
        let state = self.fsm.state();
        let t3 = self.clock.now_ms();

        let mut alerts = Vec::new();
        for person in filter_class(&detections, cfg.decode.person_class_id) {
            let foot = ground_point(&person);
            let mut monitored = false;
            let mut alerted = false;
            for zone in cfg.zones.iter().filter(|z| z.contains(foot)) {
                match cfg.severity.grade(state, zone.kind) {
                    // one alert per person, attributed to the first DANGER zone hit
                    Some(severity) if !alerted => {
                        alerted = true;
                        let est_height_m = self
                            .height_probe
                            .as_ref()
                            .and_then(|p| p.query(&person))
                            .and_then(|q| q.estimate(&cfg.camera).ok());
                        alerts.push(AlertEvent {
                            frame_index: frame.frame_index,
                            zone: zone.name.clone(),
                            train_state: state,
                            severity,
                            detection: person,
                            est_height_m,
                        });
                    }
                    None if zone.kind == ZoneKind::Monitor => monitored = true,
                    _ => {}
                }
            }
            if monitored {
                log::debug!(
                    "frame {}: person at ({:.1}, {:.1}) in monitor area",
                    frame.frame_index,
                    foot.x,
                    foot.y
                );
            }
        }
        let t4 = self.clock.now_ms();

        Ok(FrameResult {
            frame_index: frame.frame_index,
            detections,
            observation,
            train_state: state,
            transition,
            alerts,
            latency: StageLatency {
                decode_ms: (t1 - t0).max(0.0),
                nms_ms: (t2 - t1).max(0.0),
                fsm_ms: (t3 - t2).max(0.0),
                geometry_ms: (t4 - t3).max(0.0),
            },
        })
    }
}

/// Optional JSON Lines writers for a run.
#[derive(Default)]
pub struct Sinks<'a> {
    pub alerts: Option<&'a mut dyn Write>,
    pub transitions: Option<&'a mut dyn Write>,
    pub results: Option<&'a mut dyn Write>,
}

impl Sinks<'_> {
    fn emit(sink: &mut Option<&mut dyn Write>, line: &str) -> io::Result<()> {
        if let Some(w) = sink.as_mut() {
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        for w in [&mut self.alerts, &mut self.transitions, &mut self.results]
            .into_iter()
            .flatten()
        {
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub frames_processed: u64,
    pub alerts_emitted: u64,
    pub errors: u64,
    pub final_state: TrainState,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sink write failed after {} frames: {source}", .summary.frames_processed)]
    Sink {
        summary: RunSummary,
        #[source]
        source: io::Error,
    },
}

/// Drains `backend` through `pipeline`. Frames that fail to decode, and
/// backend read errors, are counted and skipped.
pub fn run_pipeline(
    backend: &mut dyn InferenceBackend,
    pipeline: &mut SafetyPipeline,
    sinks: &mut Sinks<'_>,
) -> Result<RunSummary, RunError> {
    pipeline.config.check_stream(backend.header())?;
    let mut summary = RunSummary {
        final_state: pipeline.train_state(),
        ..RunSummary::default()
    };
    let sink_err = |summary: &RunSummary, source| RunError::Sink {
        summary: *summary,
        source,
    };
    while let Some(item) = backend.next_frame() {
        let frame = match item {
            Ok(f) => f,
            Err(e) => {
                log::warn!("backend {}: {e}", backend.descriptor());
                summary.errors += 1;
                continue;
            }
        };
        match pipeline.process_frame(&frame) {
            Ok(result) => {
                summary.frames_processed += 1;
                summary.final_state = result.train_state;
                let write = |sinks: &mut Sinks<'_>| -> io::Result<()> {
                    if let Some(t) = &result.transition {
                        Sinks::emit(&mut sinks.transitions, &t.to_jsonl())?;
                    }
                    for a in &result.alerts {
                        Sinks::emit(&mut sinks.alerts, &a.to_jsonl())?;
                    }
                    Sinks::emit(&mut sinks.results, &result.to_jsonl())
                };
                summary.alerts_emitted += result.alerts.len() as u64;
                write(sinks).map_err(|e| sink_err(&summary, e))?;
            }
            Err(e) => {
                log::warn!("{e}");
                summary.errors += 1;
                Sinks::emit(&mut sinks.results, &e.to_jsonl())
                    .map_err(|e| sink_err(&summary, e))?;
            }
        }
    }
    sinks.flush().map_err(|e| sink_err(&summary, e))?;
    Ok(summary)
}

//! Train-platform safety monitoring on top of YOLOX detector outputs.
//!
//! Raw head tensors are decoded and filtered with NMS, a train-state machine
//! tracks the platform's risk zone, and people whose footprint falls in a
//! danger zone raise alerts graded by the train state. A benchmark harness
//! measures end-to-end latency and accuracy-per-watt efficiency, and a
//! scenario generator produces deterministic tensor streams with ground truth.

// `!(x > 0.0)` guards reject NaN as well as non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod clock;
pub mod geometry;
pub mod pipeline;
pub mod scenario;
pub mod tensor_io;
pub mod train_state;
pub mod verify;
pub mod yolox;

pub use bench::{compute_efficiency, evaluate_run, EvalResult, LatencyStats};
pub use geometry::{estimate_height, point_in_zone, CameraModel, Zone, ZoneKind};
pub use pipeline::{AlertEvent, PipelineConfig, SafetyPipeline, Severity};
pub use tensor_io::{InferenceBackend, PlaybackBackend, RawTensorSet, TensorStreamHeader};
pub use train_state::{TrainState, TrainStateMachine};
pub use yolox::{decode_all, iou, nms, BoundingBox, DecodeConfig, Detection};

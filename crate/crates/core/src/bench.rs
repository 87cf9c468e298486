//! Detection accuracy against ground truth, latency statistics and the
//! power-normalized efficiency metric.
//!
//! Accuracy is the Jaccard index `TP / (TP + FP + FN)` at a fixed IoU
//! threshold. Efficiency is `accuracy_pct / (latency_ms * power_w)`, which
//! reproduces published edge-accelerator comparisons to three decimals.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::pipeline::{SafetyPipeline, StageLatency};
use crate::scenario::GroundTruthFrame;
use crate::tensor_io::InferenceBackend;
use crate::yolox::{iou, Detection};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("frame alignment: {0}")]
    Alignment(String),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.true_positives += o.true_positives;
        self.false_positives += o.false_positives;
        self.false_negatives += o.false_negatives;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou_threshold: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalResult {
    pub fn from_counts(c: MatchCounts, iou_threshold: f64) -> Self {
        let (tp, fp, fn_) = (c.true_positives, c.false_positives, c.false_negatives);
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            accuracy: ratio(tp, tp + fp + fn_),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            iou_threshold,
        }
    }
}

/// Greedy matching: predictions in descending score order each claim the
/// unmatched same-class ground-truth box with the highest IoU, if that IoU
/// reaches `iou_threshold`.
pub fn match_detections(
    pred: &[Detection],
    gt: &GroundTruthFrame,
    iou_threshold: f64,
    class_id: u32,
) -> MatchCounts {
    let mut preds: Vec<&Detection> = pred.iter().filter(|d| d.class_id == class_id).collect();
    preds.sort_by(|a, b| b.score.total_cmp(&a.score));
    let truths: Vec<_> = gt
        .objects
        .iter()
        .filter(|o| o.class_id == class_id)
        .collect();
    let mut taken = vec![false; truths.len()];
    let mut tp = 0;
    for p in &preds {
        let best = truths
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(i, t)| (i, iou(&p.bbox, &t.bbox)))
            .filter(|&(_, v)| v >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, _)) = best {
            taken[i] = true;
            tp += 1;
        }
    }
    MatchCounts {
        true_positives: tp,
        false_positives: preds.len() as u64 - tp,
        false_negatives: truths.len() as u64 - tp,
    }
}

/// Detections for one frame, as found in detection or result JSON Lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFrame {
    pub frame: u32,
    #[serde(default)]
    pub detections: Vec<Detection>,
}

/// Parses detection JSON Lines; blank lines are skipped.
pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionFrame>, BenchError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| BenchError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

/// Sums matches over a run. An empty prediction stream scores every ground
/// truth object as missed; otherwise both streams must list the same frame
/// indices in the same order.
pub fn evaluate_run(
    pred: &[PredictionFrame],
    gt: &[GroundTruthFrame],
    iou_threshold: f64,
    class_id: u32,
) -> Result<EvalResult, BenchError> {
    let mut total = MatchCounts::default();
    if pred.is_empty() {
        for g in gt {
            total += match_detections(&[], g, iou_threshold, class_id);
        }
        return Ok(EvalResult::from_counts(total, iou_threshold));
    }
    if pred.len() != gt.len() {
        return Err(BenchError::Alignment(format!(
            "{} prediction frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.frame != g.frame_index {
            return Err(BenchError::Alignment(format!(
                "prediction frame {} paired with ground-truth frame {}",
                p.frame, g.frame_index
            )));
        }
        total += match_detections(&p.detections, g, iou_threshold, class_id);
    }
    Ok(EvalResult::from_counts(total, iou_threshold))
}

/// `accuracy_pct / (latency_ms * power_w)`
pub fn compute_efficiency(
    accuracy_pct: f64,
    latency_ms: f64,
    power_w: f64,
) -> Result<f64, BenchError> {
    if !(latency_ms > 0.0) {
        return Err(BenchError::Domain(format!(
            "latency {latency_ms} ms must be positive"
        )));
    }
    if !(power_w > 0.0) {
        return Err(BenchError::Domain(format!(
            "power {power_w} W must be positive"
        )));
    }
    Ok(accuracy_pct / (latency_ms * power_w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub sample_count: usize,
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 * n)` (1-based).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p * n as f64 / 100.0).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self, BenchError> {
        if samples.is_empty() {
            return Err(BenchError::InsufficientSamples("no latency samples".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50_ms: nearest_rank(&sorted, 50.0),
            p95_ms: nearest_rank(&sorted, 95.0),
            p99_ms: nearest_rank(&sorted, 99.0),
            min_ms: sorted[0],
            max_ms: sorted[sorted.len() - 1],
            sample_count: sorted.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRecord {
    pub frame_index: u32,
    pub end_to_end_ms: f64,
    pub stages: StageLatency,
}

pub const CSV_HEADER: &str = "frame,end_to_end_ms,decode_ms,nms_ms,geometry_ms,fsm_ms";

pub fn write_bench_csv<W: Write>(w: &mut W, records: &[BenchRecord]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        let s = &r.stages;
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.frame_index, r.end_to_end_ms, s.decode_ms, s.nms_ms, s.geometry_ms, s.fsm_ms
        )?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRun {
    pub stats: LatencyStats,
    /// Post-warmup frames only.
    pub records: Vec<BenchRecord>,
    /// Detections for every successfully processed frame, warmup included.
    pub predictions: Vec<PredictionFrame>,
    pub errors: u64,
}

/// Times each frame from the backend request to the end of `process_frame`,
/// so backend inference time (or a playback delay) is part of end-to-end
/// latency. The first `warmup_frames` frames are excluded from the stats.
pub fn measure_latency(
    backend: &mut dyn InferenceBackend,
    pipeline: &mut SafetyPipeline,
    warmup_frames: usize,
    clock: &mut dyn Clock,
) -> Result<LatencyRun, BenchError> {
    pipeline
        .config()
        .check_stream(backend.header())
        .map_err(|e| BenchError::Domain(e.to_string()))?;
    let mut samples = Vec::new();
    let mut records = Vec::new();
    let mut predictions = Vec::new();
    let mut errors = 0;
    let mut seen = 0usize;
    loop {
        let start = clock.now_ms();
        let Some(item) = backend.next_frame() else {
            break;
        };
        let outcome = item
            .map_err(|e| e.to_string())
            .and_then(|f| pipeline.process_frame(&f).map_err(|e| e.to_string()));
        let end = clock.now_ms();
        let index = seen;
        seen += 1;
        let result = match outcome {
            Ok(r) => r,
            Err(e) => {
                log::warn!("bench frame {index}: {e}");
                errors += 1;
                continue;
            }
        };
        predictions.push(PredictionFrame {
            frame: result.frame_index,
            detections: result.detections.clone(),
        });
        if index < warmup_frames {
            continue;
        }
        let e2e = end - start;
        samples.push(e2e);
        records.push(BenchRecord {
            frame_index: result.frame_index,
            end_to_end_ms: e2e,
            stages: result.latency,
        });
    }
    if samples.is_empty() {
        return Err(BenchError::InsufficientSamples(format!(
            "{seen} frames with {warmup_frames} warmup leaves no measured frame"
        )));
    }
    Ok(LatencyRun {
        stats: LatencyStats::from_samples(&samples)?,
        records,
        predictions,
        errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    /// Jaccard accuracy as a fraction in [0, 1], when known.
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub latency: LatencyStats,
    pub power_w: f64,
    /// Latency quoted from elsewhere that replaces the measured mean in
    /// the efficiency figure.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reported_latency_ms: Option<f64>,
    /// `100 * accuracy / (latency * power)`, when accuracy is known.
    pub efficiency: Option<f64>,
}

impl BenchSummary {
    pub fn new(
        accuracy: Option<f64>,
        precision: Option<f64>,
        recall: Option<f64>,
        latency: LatencyStats,
        power_w: f64,
    ) -> Result<Self, BenchError> {
        let efficiency = match accuracy {
            Some(a) => Some(compute_efficiency(100.0 * a, latency.mean_ms, power_w)?),
            None if !(power_w > 0.0) => {
                return Err(BenchError::Domain(format!(
                    "power {power_w} W must be positive"
                )));
            }
            None => None,
        };
        Ok(Self {
            accuracy,
            precision,
            recall,
            latency,
            power_w,
            reported_latency_ms: None,
            efficiency,
        })
    }

    /// Recomputes efficiency against `latency_ms` instead of the measured mean.
    pub fn with_reported_latency(mut self, latency_ms: f64) -> Result<Self, BenchError> {
        if !(latency_ms > 0.0) {
            return Err(BenchError::Domain(format!(
                "latency {latency_ms} ms must be positive"
            )));
        }
        if let Some(a) = self.accuracy {
            self.efficiency = Some(compute_efficiency(100.0 * a, latency_ms, self.power_w)?);
        }
        self.reported_latency_ms = Some(latency_ms);
        Ok(self)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Human-readable one-line summary of a latency distribution.
pub fn describe(stats: &LatencyStats) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "n={} mean={:.3}ms p50={:.3}ms p95={:.3}ms p99={:.3}ms min={:.3}ms max={:.3}ms",
        stats.sample_count,
        stats.mean_ms,
        stats.p50_ms,
        stats.p95_ms,
        stats.p99_ms,
        stats.min_ms,
        stats.max_ms
    );
    s
}

//! Self-checks behind `railguard verify`.
//!
//! Each check compares the implementation against an independent reference
//! (brute-force NMS, analytic crossing intervals, hand-counted fixtures,
//! published efficiency figures) and reports pass or fail with detail.

use std::collections::BTreeSet;
use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{
    compute_efficiency, evaluate_run, measure_latency, LatencyStats, PredictionFrame,
};
use crate::clock::{FrozenClock, MonotonicClock, ScriptedClock};
use crate::geometry::{estimate_height, estimate_height_axial, CameraModel, ZoneKind};
use crate::pipeline::{run_pipeline, PipelineConfig, SafetyPipeline, Severity, Sinks};
use crate::scenario::{
    builtin_scenario, encode_objects_to_tensors, encode_scenario, GroundTruthFrame,
    GroundTruthObject, ScenarioSpec,
};
use crate::tensor_io::{PlaybackBackend, RawTensorSet, TensorStreamHeader};
use crate::train_state::{step_fsm, FsmConfig, FsmCounters, TrainObservation, TrainState};
use crate::yolox::{decode_all, iou, nms, BoundingBox, DecodeConfig, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
    /// Cannot be checked on this machine; covered by other checks.
    NotApplicable,
}

#[derive(Debug, Clone)]
pub struct CriterionReport {
    pub id: u8,
    pub title: &'static str,
    pub outcome: Outcome,
    pub detail: String,
    pub elapsed: Duration,
}

impl CriterionReport {
    pub fn passed(&self) -> bool {
        self.outcome != Outcome::Fail
    }
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::NotApplicable => "N/A ",
        };
        write!(
            f,
            "[{tag}] criterion {}: {} ({:.0} ms) {}",
            self.id,
            self.title,
            self.elapsed.as_secs_f64() * 1e3,
            self.detail
        )
    }
}

fn timed(
    id: u8,
    title: &'static str,
    check: impl FnOnce() -> Result<String, String>,
) -> CriterionReport {
    let t = Instant::now();
    let (outcome, detail) = match check() {
        Ok(d) => (Outcome::Pass, d),
        Err(d) => (Outcome::Fail, d),
    };
    CriterionReport {
        id,
        title,
        outcome,
        detail,
        elapsed: t.elapsed(),
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub const EFFICIENCY_TOLERANCE: f64 = 0.001;

/// Efficiency reproduces both published accelerator rows.
pub fn efficiency_rows() -> CriterionReport {
    timed(
        1,
        "efficiency reproduces Jetson Orin Nano and Hailo-8 rows",
        || {
            let rows = [
                ("Jetson Orin Nano", 61.661, 54.174, 9.1, 0.125),
                ("Hailo-8", 70.791, 20.878, 10.737, 0.316),
            ];
            let mut detail = Vec::new();
            for (name, acc, lat, pow, expected) in rows {
                let e = compute_efficiency(acc, lat, pow).map_err(|e| e.to_string())?;
                ensure((e - expected).abs() <= EFFICIENCY_TOLERANCE, || {
                    format!("{name}: {e:.4} vs {expected} +/- {EFFICIENCY_TOLERANCE}")
                })?;
                detail.push(format!("{name}={e:.4}"));
            }
            Ok(detail.join(" "))
        },
    )
}

pub fn hardware_claims() -> CriterionReport {
    CriterionReport {
        id: 2,
        title: "accelerator accuracy/latency deltas",
        outcome: Outcome::NotApplicable,
        detail: "needs Hailo-8 and Jetson Orin Nano hardware; substituted by criteria 3-9".into(),
        elapsed: Duration::ZERO,
    }
}

/// Per-class suppression-flag NMS over the global score ranking.
fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .total_cmp(&dets[i].score)
            .then(dets[i].class_id.cmp(&dets[j].class_id))
            .then(i.cmp(&j))
    });
    let mut suppressed = vec![false; dets.len()];
    for (a, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        for &j in &order[a + 1..] {
            if dets[j].class_id == dets[i].class_id && iou(&dets[i].bbox, &dets[j].bbox) > thr {
                suppressed[j] = true;
            }
        }
    }
    order
        .into_iter()
        .filter(|&i| !suppressed[i])
        .map(|i| dets[i])
        .collect()
}

pub const NMS_INSTANCES: usize = 1000;

pub fn nms_oracle() -> CriterionReport {
    timed(3, "greedy NMS equals brute-force reference", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let thresholds = [0.3, 0.45, 0.6];
        for case in 0..NMS_INSTANCES {
            let n = rng.random_range(0..=20);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0));
                    let (w, h) = (rng.random_range(2.0..30.0), rng.random_range(2.0..30.0));
                    Detection {
                        bbox: BoundingBox::new(x, y, x + w, y + h),
                        // coarse scores so ties are exercised
                        score: f64::from(rng.random_range(0..=20u32)) / 20.0,
                        class_id: rng.random_range(0..3),
                    }
                })
                .collect();
            let thr = thresholds[case % 3];
            let got = nms(&dets, thr);
            ensure(got == brute_force_nms(&dets, thr), || {
                format!("instance {case} (n={n}, thr={thr}) differs")
            })?;
        }
        Ok(format!("{NMS_INSTANCES} instances"))
    })
}

fn random_frame(rng: &mut ChaCha8Rng, index: u32) -> GroundTruthFrame {
    // distinct 32 px tiles cannot share a cell at any stride
    let n = rng.random_range(1..=8);
    let mut tiles = BTreeSet::new();
    while tiles.len() < n {
        tiles.insert((rng.random_range(0..10u32), rng.random_range(0..8u32)));
    }
    let objects = tiles
        .into_iter()
        .enumerate()
        .map(|(i, (tx, ty))| {
            let cx = (tx as f64 + rng.random_range(0.05..0.95)) * 32.0;
            let cy = (ty as f64 + rng.random_range(0.05..0.95)) * 32.0;
            let w = rng
                .random_range(6.0..90.0f64)
                .min(2.0 * cx)
                .min(2.0 * (320.0 - cx));
            let h = rng
                .random_range(6.0..90.0f64)
                .min(2.0 * cy)
                .min(2.0 * (256.0 - cy));
            GroundTruthObject {
                class_id: rng.random_range(0..2),
                bbox: BoundingBox::from_center(cx, cy, w, h),
                actor_id: i,
                score_level: rng.random_range(0.35..=1.0),
            }
        })
        .collect();
    GroundTruthFrame {
        frame_index: index,
        objects,
    }
}

pub const ROUND_TRIP_FRAMES: u32 = 100;
pub const ROUND_TRIP_MIN_IOU: f64 = 0.99;
pub const ROUND_TRIP_SCORE_TOL: f64 = 1e-5;

pub fn encode_decode_round_trip() -> CriterionReport {
    timed(4, "encode/decode round trip", || {
        let cfg = DecodeConfig::station();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut objects = 0;
        let mut worst_iou: f64 = 1.0;
        let mut worst_score: f64 = 0.0;
        for f in 0..ROUND_TRIP_FRAMES {
            let gt = random_frame(&mut rng, f);
            let tensors =
                encode_objects_to_tensors(&gt, &cfg, 320, 256).map_err(|e| e.to_string())?;
            let dets = decode_all(&tensors, &cfg).map_err(|e| e.to_string())?;
            ensure(dets.len() == gt.objects.len(), || {
                format!(
                    "frame {f}: {} detections for {} objects",
                    dets.len(),
                    gt.objects.len()
                )
            })?;
            for o in &gt.objects {
                let best = dets
                    .iter()
                    .filter(|d| d.class_id == o.class_id)
                    .max_by(|a, b| iou(&a.bbox, &o.bbox).total_cmp(&iou(&b.bbox, &o.bbox)))
                    .ok_or_else(|| format!("frame {f}: object {} not recovered", o.actor_id))?;
                let v = iou(&best.bbox, &o.bbox);
                let ds = (best.score - o.score_level).abs();
                ensure(
                    v >= ROUND_TRIP_MIN_IOU && ds <= ROUND_TRIP_SCORE_TOL,
                    || {
                        format!(
                            "frame {f}: object {} iou {v:.5} score error {ds:.2e}",
                            o.actor_id
                        )
                    },
                )?;
                worst_iou = worst_iou.min(v);
                worst_score = worst_score.max(ds);
                objects += 1;
            }
        }
        Ok(format!(
            "{objects} objects, min iou {worst_iou:.6}, max score error {worst_score:.1e}"
        ))
    })
}

pub const FSM_TRACES: usize = 10_000;

/// Approach, stop, depart, gone.
pub fn canonical_trace() -> Vec<TrainObservation> {
    let moving = TrainObservation {
        present: true,
        displacement_px: 6.0,
        occupancy: 0.6,
    };
    let stopped = TrainObservation {
        displacement_px: 0.0,
        occupancy: 0.9,
        ..moving
    };
    let mut t = vec![TrainObservation::ABSENT; 4];
    t.extend(std::iter::repeat_n(moving, 12));
    t.extend(std::iter::repeat_n(stopped, 10));
    t.extend(std::iter::repeat_n(moving, 12));
    t.extend(std::iter::repeat_n(TrainObservation::ABSENT, 8));
    t
}

pub fn fsm_closure_and_cycle() -> CriterionReport {
    timed(5, "train FSM closure and OFF-IN-ON-OUT-OFF cycle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trace_no in 0..FSM_TRACES {
            let cfg = FsmConfig {
                stationary_eps_px: 2.0,
                confirm_frames: rng.random_range(1..=6),
            };
            let mut state = TrainState::ALL[rng.random_range(0..4)];
            let mut counters = FsmCounters::default();
            for _ in 0..rng.random_range(1..60) {
                let obs = if rng.random_bool(0.3) {
                    TrainObservation::ABSENT
                } else {
                    TrainObservation {
                        present: true,
                        displacement_px: rng.random_range(0.0..5.0),
                        occupancy: rng.random_range(0.0..=1.0),
                    }
                };
                let (next, c) = step_fsm(state, &obs, &cfg, counters);
                ensure(state.can_transition_to(next), || {
                    format!("trace {trace_no}: undeclared transition {state} -> {next}")
                })?;
                state = next;
                counters = c;
            }
        }
        let cfg = FsmConfig::default();
        let mut state = TrainState::Off;
        let mut counters = FsmCounters::default();
        let mut visited = vec![state];
        for obs in canonical_trace() {
            (state, counters) = step_fsm(state, &obs, &cfg, counters);
            if visited.last() != Some(&state) {
                visited.push(state);
            }
        }
        let expected = [
            TrainState::Off,
            TrainState::In,
            TrainState::On,
            TrainState::Out,
            TrainState::Off,
        ];
        ensure(visited == expected, || {
            format!("canonical trace visited {visited:?}")
        })?;
        Ok(format!("{FSM_TRACES} traces; canonical cycle {visited:?}"))
    })
}

pub fn height_model() -> CriterionReport {
    timed(
        6,
        "height model: both forms agree and stay in [0, Hc]",
        || {
            let cam = CameraModel::new(3.0, 5.0).map_err(|e| e.to_string())?;
            let h = estimate_height(&cam, 3.0, 1.5).map_err(|e| e.to_string())?;
            ensure(h == 1.5, || format!("(Hc=3, a=3, b=1.5) gave {h}"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut worst: f64 = 0.0;
            for _ in 0..10_000 {
                let hc = rng.random_range(0.5..10.0);
                let z0 = rng.random_range(0.5..50.0);
                let cam = CameraModel::new(hc, z0).map_err(|e| e.to_string())?;
                let a = rng.random_range(0.1..50.0);
                let b = a * rng.random_range(0.0..=1.0);
                let z = (z0 * (b / a)).min(z0);
                let h1 = estimate_height(&cam, a, b).map_err(|e| e.to_string())?;
                let h2 = estimate_height_axial(&cam, z).map_err(|e| e.to_string())?;
                let rel = (h1 - h2).abs() / hc;
                worst = worst.max(rel);
                ensure(rel <= 1e-12, || {
                    format!("forms disagree: {h1} vs {h2} (Hc={hc})")
                })?;
                ensure((0.0..=hc).contains(&h1) && (0.0..=hc).contains(&h2), || {
                    format!("height {h1}/{h2} outside [0, {hc}]")
                })?;
            }
            Ok(format!(
                "10000 samples, max relative disagreement {worst:.1e}"
            ))
        },
    )
}

/// Frames in which some person actor's footprint lies inside the horizontal
/// strip `y_lo <= y2 <= y_hi`, solved per linear waypoint segment.
pub fn analytic_crossing_frames(
    spec: &ScenarioSpec,
    person_class: u32,
    y_lo: f64,
    y_hi: f64,
) -> BTreeSet<u32> {
    let mut frames = BTreeSet::new();
    for actor in spec.actors.iter().filter(|a| a.class_id == person_class) {
        let foot = |w: &crate::scenario::Waypoint| w.center_y + w.h / 2.0;
        let wps = &actor.waypoints;
        if wps.len() == 1 {
            let y = foot(&wps[0]);
            if (y_lo..=y_hi).contains(&y) {
                frames.insert(wps[0].frame);
            }
        }
        for seg in wps.windows(2) {
            let (fa, fb) = (seg[0].frame as f64, seg[1].frame as f64);
            let (ya, yb) = (foot(&seg[0]), foot(&seg[1]));
            let (lo, hi) = if ya == yb {
                if (y_lo..=y_hi).contains(&ya) {
                    (fa, fb)
                } else {
                    continue;
                }
            } else {
                let at = |y: f64| fa + (y - ya) * (fb - fa) / (yb - ya);
                let (p, q) = (at(y_lo), at(y_hi));
                (p.min(q).max(fa), p.max(q).min(fb))
            };
            if lo > hi {
                continue;
            }
            for f in (lo.ceil() as u32)..=(hi.floor() as u32) {
                frames.insert(f);
            }
        }
    }
    frames
}

fn alert_frames(name: &str) -> Result<(Vec<(u32, Severity)>, u64), String> {
    let cfg = PipelineConfig::station();
    let spec = builtin_scenario(name).ok_or_else(|| format!("no scenario {name}"))?;
    let (header, frames, _) = encode_scenario(&spec, &cfg.decode).map_err(|e| e.to_string())?;
    let mut backend = PlaybackBackend::from_frames(header, frames, 1, Duration::ZERO)
        .map_err(|e| e.to_string())?;
    let mut pipeline =
        SafetyPipeline::with_clock(cfg, Box::new(FrozenClock)).map_err(|e| e.to_string())?;
    let mut sink = Vec::new();
    let mut sinks = Sinks {
        alerts: Some(&mut sink),
        ..Sinks::default()
    };
    let summary =
        run_pipeline(&mut backend, &mut pipeline, &mut sinks).map_err(|e| e.to_string())?;
    let text = String::from_utf8(sink).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let frame = v["frame"].as_u64().ok_or("alert without frame")? as u32;
        let severity: Severity =
            serde_json::from_value(v["severity"].clone()).map_err(|e| e.to_string())?;
        out.push((frame, severity));
    }
    Ok((out, summary.alerts_emitted))
}

pub fn scenario_fidelity() -> CriterionReport {
    timed(
        7,
        "crossing alerts on the analytic interval; empty platform silent",
        || {
            let cfg = PipelineConfig::station();
            let danger = cfg
                .zones
                .iter()
                .find(|z| z.kind == ZoneKind::Danger)
                .ok_or("no DANGER zone")?;
            let ys: Vec<f64> = danger.polygon.iter().map(|p| p[1]).collect();
            let (y_lo, y_hi) = (
                ys.iter().cloned().fold(f64::MAX, f64::min),
                ys.iter().cloned().fold(f64::MIN, f64::max),
            );
            let spec = builtin_scenario("crossing_during_approach").ok_or("missing scenario")?;
            let expected = analytic_crossing_frames(&spec, cfg.decode.person_class_id, y_lo, y_hi);
            let (lo, hi) = match (expected.first(), expected.last()) {
                (Some(&a), Some(&b)) => (a, b),
                _ => return Err("analytic crossing interval is empty".into()),
            };
            let (alerts, _) = alert_frames("crossing_during_approach")?;
            ensure(!alerts.is_empty(), || "no alerts".into())?;
            for &(f, sev) in &alerts {
                ensure(sev == Severity::Critical, || {
                    format!("frame {f}: {sev:?}, expected CRITICAL")
                })?;
                ensure(f + 1 >= lo && f <= hi + 1, || {
                    format!("alert at frame {f} outside [{lo}, {hi}] +/- 1")
                })?;
            }
            let alerted: BTreeSet<u32> = alerts.iter().map(|a| a.0).collect();
            for f in lo + 1..hi {
                ensure(alerted.contains(&f), || {
                    format!("no alert at crossing frame {f}")
                })?;
            }
            let (empty, n) = alert_frames("empty_platform")?;
            ensure(empty.is_empty() && n == 0, || {
                format!("empty_platform raised {n} alerts")
            })?;
            Ok(format!(
            "analytic crossing frames {lo}..={hi}; CRITICAL alerts at {:?}..={:?}; empty_platform 0 alerts",
            alerted.first().unwrap(),
            alerted.last().unwrap()
        ))
        },
    )
}

/// 10 frames: 0-6 exact hits, 7-8 a false alarm on an empty scene,
/// 9 a missed person.
pub fn planted_eval_fixture() -> (Vec<PredictionFrame>, Vec<GroundTruthFrame>) {
    let bx = BoundingBox::new(10.0, 10.0, 50.0, 90.0);
    let person = |bbox, score| Detection {
        bbox,
        score,
        class_id: 0,
    };
    (0..10u32)
        .map(|f| {
            let (dets, truth) = match f {
                0..=6 => (vec![person(bx, 0.9)], vec![bx]),
                7 | 8 => (
                    vec![person(BoundingBox::new(200.0, 10.0, 240.0, 90.0), 0.6)],
                    vec![],
                ),
                _ => (vec![], vec![bx]),
            };
            let objects = truth
                .into_iter()
                .map(|bbox| GroundTruthObject {
                    class_id: 0,
                    bbox,
                    actor_id: 0,
                    score_level: 1.0,
                })
                .collect();
            (
                PredictionFrame {
                    frame: f,
                    detections: dets,
                },
                GroundTruthFrame {
                    frame_index: f,
                    objects,
                },
            )
        })
        .unzip()
}

pub fn evaluation_arithmetic() -> CriterionReport {
    timed(
        8,
        "evaluation arithmetic on the 7 TP / 2 FP / 1 FN fixture",
        || {
            let (pred, gt) = planted_eval_fixture();
            let r = evaluate_run(&pred, &gt, 0.5, 0).map_err(|e| e.to_string())?;
            let counts = (r.true_positives, r.false_positives, r.false_negatives);
            ensure(counts == (7, 2, 1), || format!("counts {counts:?}"))?;
            ensure(
                r.accuracy == 0.7 && r.precision == 7.0 / 9.0 && r.recall == 7.0 / 8.0,
                || {
                    format!(
                        "accuracy {} precision {} recall {}",
                        r.accuracy, r.precision, r.recall
                    )
                },
            )?;
            Ok(format!(
                "accuracy {} precision {:.6} recall {}",
                r.accuracy, r.precision, r.recall
            ))
        },
    )
}

pub const DELAY_MS: u64 = 20;
pub const P50_CEILING_MS: f64 = 40.0;

pub fn latency_harness() -> CriterionReport {
    timed(
        9,
        "latency harness: playback delay and nearest-rank percentiles",
        || {
            let cfg = PipelineConfig::station();
            let header =
                TensorStreamHeader::new(cfg.decode.num_classes, 320, 256, cfg.decode.strides);
            let background = |n: u32| -> Vec<RawTensorSet> {
                (0..n)
                    .map(|i| RawTensorSet::filled(&header, i, -20.0))
                    .collect()
            };

            let mut backend = PlaybackBackend::from_frames(
                header,
                background(11),
                1,
                Duration::from_millis(DELAY_MS),
            )
            .map_err(|e| e.to_string())?;
            let mut pipeline = SafetyPipeline::new(cfg.clone()).map_err(|e| e.to_string())?;
            let run = measure_latency(&mut backend, &mut pipeline, 1, &mut MonotonicClock::new())
                .map_err(|e| e.to_string())?;
            let p50 = run.stats.p50_ms;
            ensure((DELAY_MS as f64..=P50_CEILING_MS).contains(&p50), || {
                format!("p50 {p50:.3} ms outside [{DELAY_MS}, {P50_CEILING_MS}]")
            })?;

            let scripted = |lat: &[f64]| -> Result<LatencyStats, String> {
                let mut b = PlaybackBackend::from_frames(
                    header,
                    background(lat.len() as u32),
                    1,
                    Duration::ZERO,
                )
                .map_err(|e| e.to_string())?;
                let mut p = SafetyPipeline::with_clock(cfg.clone(), Box::new(FrozenClock))
                    .map_err(|e| e.to_string())?;
                let mut clock = ScriptedClock::from_latencies(lat);
                Ok(measure_latency(&mut b, &mut p, 0, &mut clock)
                    .map_err(|e| e.to_string())?
                    .stats)
            };
            let flat = scripted(&[10.0, 10.0, 10.0])?;
            ensure(flat.mean_ms == 10.0 && flat.p50_ms == 10.0, || {
                format!("constant samples gave {flat:?}")
            })?;
            let seq: Vec<f64> = (1..=100).map(f64::from).collect();
            let s = scripted(&seq)?;
            ensure((s.p50_ms, s.p95_ms, s.p99_ms) == (50.0, 95.0, 99.0), || {
                format!(
                    "1..100 gave p50 {} p95 {} p99 {}",
                    s.p50_ms, s.p95_ms, s.p99_ms
                )
            })?;
            Ok(format!(
                "delayed p50 {p50:.3} ms; scripted 1..100 p95 = {}",
                s.p95_ms
            ))
        },
    )
}

pub fn run_all() -> Vec<CriterionReport> {
    vec![
        efficiency_rows(),
        hardware_claims(),
        nms_oracle(),
        encode_decode_round_trip(),
        fsm_closure_and_cycle(),
        height_model(),
        scenario_fidelity(),
        evaluation_arithmetic(),
        latency_harness(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossing_interval_by_hand() {
        // walker: y2 = 195 - 8 (f - 20) on 20..30, 115 on 30..40, 115 + 8 (f - 40) on 40..50
        let spec = builtin_scenario("crossing_during_approach").unwrap();
        let frames = analytic_crossing_frames(&spec, 0, 100.0, 130.0);
        assert_eq!(frames, (29..=41).collect());
    }
}

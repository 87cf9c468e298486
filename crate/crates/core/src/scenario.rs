//! Scripted station scenes: ground-truth generation and the decoder-inverse
//! tensor encoder used to drive the pipeline without a detector.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Zone, ZoneKind};
use crate::tensor_io::{RawTensorSet, TensorStreamHeader, LEVELS};
use crate::yolox::{BoundingBox, DecodeConfig};

/// Logit written to every cell and class that carries no object.
pub const BACKGROUND_LOGIT: f32 = -20.0;
const MAX_LOGIT: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Spec(String),
    #[error("actor {actor}: waypoints not sorted by frame at index {index}")]
    UnsortedWaypoints { actor: usize, index: usize },
    #[error("frame {frame}: two objects encode to stride {stride} cell (x={x}, y={y})")]
    Collision {
        frame: u32,
        stride: u32,
        x: u32,
        y: u32,
    },
    #[error("frame {frame}: object {object} has non-positive size")]
    Unrepresentable { frame: u32, object: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub frame: u32,
    pub center_x: f64,
    pub center_y: f64,
    pub w: f64,
    pub h: f64,
}

impl Waypoint {
    pub fn new(frame: u32, center_x: f64, center_y: f64, w: f64, h: f64) -> Self {
        Self {
            frame,
            center_x,
            center_y,
            w,
            h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub class_id: u32,
    pub waypoints: Vec<Waypoint>,
    /// Fused detector score the encoder plants for this actor, in (0, 1].
    pub score_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    pub duration_frames: u32,
    pub image_width: u32,
    pub image_height: u32,
    pub actors: Vec<Actor>,
    #[serde(default)]
    pub seed: u64,
    /// Uniform center jitter in pixels, drawn from the seeded generator.
    #[serde(default)]
    pub jitter_px: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub actor_id: usize,
    pub score_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub frame_index: u32,
    pub objects: Vec<GroundTruthObject>,
}

/// On-disk ground truth document written by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub scenario: String,
    pub image_width: u32,
    pub image_height: u32,
    pub frames: Vec<GroundTruthFrame>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let spec_err = |m: String| Err(ScenarioError::Spec(m));
        if self.duration_frames == 0 {
            return spec_err("duration_frames must be positive".into());
        }
        if self.image_width == 0 || self.image_height == 0 {
            return spec_err("image dimensions must be positive".into());
        }
        if !(self.jitter_px >= 0.0 && self.jitter_px.is_finite()) {
            return spec_err(format!(
                "jitter_px {} must be a non-negative number",
                self.jitter_px
            ));
        }
        let (iw, ih) = (self.image_width as f64, self.image_height as f64);
        for (a, actor) in self.actors.iter().enumerate() {
            if !(actor.score_level > 0.0 && actor.score_level <= 1.0) {
                return spec_err(format!(
                    "actor {a}: score_level {} outside (0, 1]",
                    actor.score_level
                ));
            }
            if actor.waypoints.is_empty() {
                return spec_err(format!("actor {a} has no waypoints"));
            }
            for (i, w) in actor.waypoints.iter().enumerate() {
                if i > 0 && actor.waypoints[i - 1].frame >= w.frame {
                    return Err(ScenarioError::UnsortedWaypoints { actor: a, index: i });
                }
                let b = BoundingBox::from_center(w.center_x, w.center_y, w.w, w.h);
                let inside = b.is_valid() && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= iw && b.y2 <= ih;
                if !(w.w > 0.0 && w.h > 0.0) || !inside {
                    return spec_err(format!(
                        "actor {a} waypoint {i}: box {:?} must have positive size and lie within the {}x{} image",
                        b, self.image_width, self.image_height
                    ));
                }
            }
        }
        Ok(())
    }
}

fn interpolate(waypoints: &[Waypoint], frame: u32) -> Option<Waypoint> {
    let first = waypoints.first()?;
    let last = waypoints.last()?;
    if frame < first.frame || frame > last.frame {
        return None;
    }
    let k = waypoints.partition_point(|w| w.frame <= frame);
    let a = waypoints[k - 1];
    if a.frame == frame || k == waypoints.len() {
        return Some(a);
    }
    let b = waypoints[k];
    let t = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
    let lerp = |p: f64, q: f64| p + (q - p) * t;
    Some(Waypoint {
        frame,
        center_x: lerp(a.center_x, b.center_x),
        center_y: lerp(a.center_y, b.center_y),
        w: lerp(a.w, b.w),
        h: lerp(a.h, b.h),
    })
}

/// Expands a scenario into per-frame ground truth. Pure and seed-deterministic.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Vec<GroundTruthFrame>, ScenarioError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (iw, ih) = (spec.image_width as f64, spec.image_height as f64);
    let frames = (0..spec.duration_frames)
        .map(|frame_index| {
            let objects = spec
                .actors
                .iter()
                .enumerate()
                .filter_map(|(actor_id, actor)| {
                    let wp = interpolate(&actor.waypoints, frame_index)?;
                    let (mut cx, mut cy) = (wp.center_x, wp.center_y);
                    if spec.jitter_px > 0.0 {
                        cx += rng.random_range(-spec.jitter_px..=spec.jitter_px);
                        cy += rng.random_range(-spec.jitter_px..=spec.jitter_px);
                        cx = cx.clamp(wp.w / 2.0, iw - wp.w / 2.0);
                        cy = cy.clamp(wp.h / 2.0, ih - wp.h / 2.0);
                    }
                    Some(GroundTruthObject {
                        class_id: actor.class_id,
                        bbox: BoundingBox::from_center(cx, cy, wp.w, wp.h).clip(iw, ih),
                        actor_id,
                        score_level: actor.score_level,
                    })
                })
                .collect();
            GroundTruthFrame {
                frame_index,
                objects,
            }
        })
        .collect();
    Ok(frames)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln().clamp(-MAX_LOGIT, MAX_LOGIT)
}

/// Stride level whose cells best fit a box: the one minimizing
/// `|ln(sqrt(w*h) / (4*stride))|`, ties to the finer level.
pub fn encode_level(strides: &[u32; LEVELS], w: f64, h: f64) -> usize {
    let size = (w * h).sqrt();
    let cost = |s: u32| (size / (4.0 * s as f64)).ln().abs();
    (0..LEVELS).fold(0, |best, l| {
        if cost(strides[l]) < cost(strides[best]) {
            l
        } else {
            best
        }
    })
}

/// Inverse of `decode_all`: plants each object in the cell holding its
/// center, at the level chosen by [`encode_level`], so that decoding yields
/// the same box with fused score `score_level`.
pub fn encode_objects_to_tensors(
    frame: &GroundTruthFrame,
    config: &DecodeConfig,
    image_width: u32,
    image_height: u32,
) -> Result<RawTensorSet, ScenarioError> {
    let mut header = TensorStreamHeader::new(
        config.num_classes,
        image_width,
        image_height,
        config.strides,
    );
    header.frame_count = 1;
    header
        .validate()
        .map_err(|e| ScenarioError::Spec(e.to_string()))?;
    let mut out = RawTensorSet::filled(&header, frame.frame_index, BACKGROUND_LOGIT);
    let mut used = HashSet::new();
    for (i, obj) in frame.objects.iter().enumerate() {
        let (w, h) = (obj.bbox.width(), obj.bbox.height());
        if !(w > 0.0 && h > 0.0) {
            return Err(ScenarioError::Unrepresentable {
                frame: frame.frame_index,
                object: i,
            });
        }
        if obj.class_id >= config.num_classes {
            return Err(ScenarioError::Spec(format!(
                "object {i} class {} >= num_classes {}",
                obj.class_id, config.num_classes
            )));
        }
        let level = encode_level(&config.strides, w, h);
        let stride = config.strides[level];
        let s = stride as f64;
        let tensor = &mut out.outputs[level];
        let (cx, cy) = obj.bbox.center();
        let gx = ((cx / s).floor().max(0.0) as u32).min(tensor.grid_w - 1);
        let gy = ((cy / s).floor().max(0.0) as u32).min(tensor.grid_h - 1);
        if !used.insert((level, gx, gy)) {
            return Err(ScenarioError::Collision {
                frame: frame.frame_index,
                stride,
                x: gx,
                y: gy,
            });
        }
        let half = logit(obj.score_level.sqrt()) as f32;
        let cell = tensor.cell_mut(gy, gx);
        cell[0] = (cx / s - gx as f64) as f32;
        cell[1] = (cy / s - gy as f64) as f32;
        cell[2] = (w / s).ln() as f32;
        cell[3] = (h / s).ln() as f32;
        cell[4] = half;
        cell[5 + obj.class_id as usize] = half;
    }
    Ok(out)
}

/// Encodes a whole scenario into a stream header, tensor frames and ground truth.
pub fn encode_scenario(
    spec: &ScenarioSpec,
    config: &DecodeConfig,
) -> Result<(TensorStreamHeader, Vec<RawTensorSet>, Vec<GroundTruthFrame>), ScenarioError> {
    let gt = generate_scenario(spec)?;
    let mut header = TensorStreamHeader::new(
        config.num_classes,
        spec.image_width,
        spec.image_height,
        config.strides,
    );
    header.frame_count = gt.len() as u32;
    let frames = gt
        .iter()
        .map(|f| encode_objects_to_tensors(f, config, spec.image_width, spec.image_height))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((header, frames, gt))
}

pub const STATION_WIDTH: u32 = 320;
pub const STATION_HEIGHT: u32 = 256;
/// Platform-edge strip: footprints with y in [100, 130] are over the yellow line.
pub const YELLOW_LINE_Y: (f64, f64) = (100.0, 130.0);

/// Zones of the synthetic station view: tracks across the top (RISK), the
/// yellow-line strip below them (DANGER), and the platform (MONITOR).
pub fn station_zones() -> Vec<Zone> {
    let w = STATION_WIDTH as f64;
    vec![
        Zone::rect("track", ZoneKind::Risk, 0.0, 20.0, w, YELLOW_LINE_Y.0),
        Zone::rect(
            "yellow_line",
            ZoneKind::Danger,
            0.0,
            YELLOW_LINE_Y.0,
            w,
            YELLOW_LINE_Y.1,
        ),
        Zone::rect(
            "platform",
            ZoneKind::Monitor,
            0.0,
            YELLOW_LINE_Y.1,
            w,
            STATION_HEIGHT as f64,
        ),
    ]
}

const PERSON: u32 = 0;
const TRAIN: u32 = 1;

/// Train enters from the right at frame 10, stops at frames 40-70, leaves to
/// the left and is gone after frame 100.
fn train_cycle() -> Actor {
    Actor {
        class_id: TRAIN,
        waypoints: vec![
            Waypoint::new(10, 305.0, 60.0, 30.0, 70.0),
            Waypoint::new(40, 160.0, 60.0, 280.0, 70.0),
            Waypoint::new(70, 160.0, 60.0, 280.0, 70.0),
            Waypoint::new(100, 15.0, 60.0, 30.0, 70.0),
        ],
        score_level: 0.9,
    }
}

fn walker(score_level: f64, waypoints: &[(u32, f64, f64)]) -> Actor {
    Actor {
        class_id: PERSON,
        waypoints: waypoints
            .iter()
            .map(|&(f, x, y)| Waypoint::new(f, x, y, 20.0, 50.0))
            .collect(),
        score_level,
    }
}

fn station_spec(name: &str, actors: Vec<Actor>) -> ScenarioSpec {
    ScenarioSpec {
        name: name.to_string(),
        duration_frames: 120,
        image_width: STATION_WIDTH,
        image_height: STATION_HEIGHT,
        actors,
        seed: 7,
        jitter_px: 0.0,
    }
}

/// Named built-in scenes. All use [`DecodeConfig::station`] and [`station_zones`].
pub fn builtin_scenarios() -> Vec<ScenarioSpec> {
    vec![
        station_spec("empty_platform", vec![train_cycle()]),
        station_spec(
            "crossing_during_approach",
            vec![
                train_cycle(),
                // steps over the yellow line while the train pulls in
                walker(
                    0.85,
                    &[
                        (0, 80.0, 170.0),
                        (20, 80.0, 170.0),
                        (30, 80.0, 90.0),
                        (40, 80.0, 90.0),
                        (50, 80.0, 170.0),
                        (119, 80.0, 170.0),
                    ],
                ),
            ],
        ),
        station_spec(
            "crowd_safe",
            vec![
                train_cycle(),
                walker(0.8, &[(0, 40.0, 125.0), (119, 280.0, 125.0)]),
                walker(0.75, &[(0, 280.0, 165.0), (119, 40.0, 165.0)]),
                walker(
                    0.9,
                    &[(0, 150.0, 195.0), (60, 150.0, 195.0), (119, 200.0, 195.0)],
                ),
                walker(0.7, &[(5, 60.0, 225.0), (110, 120.0, 225.0)]),
            ],
        ),
    ]
}

pub fn builtin_scenario(name: &str) -> Option<ScenarioSpec> {
    builtin_scenarios().into_iter().find(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::footprint;
    use crate::yolox::{decode_all, iou};
    use proptest::prelude::*;

    fn spec_one(waypoints: Vec<Waypoint>) -> ScenarioSpec {
        ScenarioSpec {
            name: "t".into(),
            duration_frames: 12,
            image_width: 320,
            image_height: 256,
            actors: vec![Actor {
                class_id: 0,
                waypoints,
                score_level: 0.8,
            }],
            seed: 1,
            jitter_px: 0.0,
        }
    }

    #[test]
    fn interpolates_midpoint() {
        let spec = spec_one(vec![
            Waypoint::new(0, 10.0, 50.0, 20.0, 20.0),
            Waypoint::new(10, 110.0, 50.0, 20.0, 20.0),
        ]);
        let gt = generate_scenario(&spec).unwrap();
        let (cx, _) = gt[5].objects[0].bbox.center();
        assert!((cx - 60.0).abs() < 1e-12);
        assert!(gt[11].objects.is_empty());
    }

    #[test]
    fn absent_before_first_waypoint() {
        let spec = spec_one(vec![
            Waypoint::new(3, 50.0, 50.0, 20.0, 20.0),
            Waypoint::new(8, 60.0, 50.0, 20.0, 20.0),
        ]);
        let gt = generate_scenario(&spec).unwrap();
        assert!(gt[..3].iter().all(|f| f.objects.is_empty()));
        assert_eq!(gt[3].objects.len(), 1);
    }

    #[test]
    fn deterministic_with_jitter() {
        let mut spec = spec_one(vec![
            Waypoint::new(0, 50.0, 50.0, 20.0, 20.0),
            Waypoint::new(11, 200.0, 50.0, 20.0, 20.0),
        ]);
        spec.jitter_px = 3.0;
        let a = generate_scenario(&spec).unwrap();
        let b = generate_scenario(&spec).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        spec.seed = 2;
        assert_ne!(generate_scenario(&spec).unwrap(), a);
    }

    #[test]
    fn rejects_unsorted_waypoints() {
        let spec = spec_one(vec![
            Waypoint::new(5, 50.0, 50.0, 20.0, 20.0),
            Waypoint::new(2, 60.0, 50.0, 20.0, 20.0),
        ]);
        assert_eq!(
            generate_scenario(&spec),
            Err(ScenarioError::UnsortedWaypoints { actor: 0, index: 1 })
        );
    }

    fn obj(
        bbox: BoundingBox,
        class_id: u32,
        score_level: f64,
        actor_id: usize,
    ) -> GroundTruthObject {
        GroundTruthObject {
            class_id,
            bbox,
            actor_id,
            score_level,
        }
    }

    #[test]
    fn encode_decode_single_person() {
        let cfg = DecodeConfig::station();
        let b = BoundingBox::new(100.0, 100.0, 164.0, 164.0);
        let frame = GroundTruthFrame {
            frame_index: 0,
            objects: vec![obj(b, 0, 0.81, 0)],
        };
        let t = encode_objects_to_tensors(&frame, &cfg, 320, 256).unwrap();
        let d = decode_all(&t, &cfg).unwrap();
        assert_eq!(d.len(), 1);
        assert!(iou(&d[0].bbox, &b) >= 0.99);
        assert!((d[0].score - 0.81).abs() < 1e-5);
        assert_eq!(d[0].class_id, 0);
    }

    #[test]
    fn empty_frame_decodes_to_nothing() {
        let cfg = DecodeConfig::station();
        let frame = GroundTruthFrame {
            frame_index: 0,
            objects: vec![],
        };
        let t = encode_objects_to_tensors(&frame, &cfg, 320, 256).unwrap();
        assert!(decode_all(&t, &cfg).unwrap().is_empty());
    }

    #[test]
    fn same_cell_collides() {
        let cfg = DecodeConfig::station();
        let frame = GroundTruthFrame {
            frame_index: 4,
            objects: vec![
                obj(BoundingBox::new(10.0, 10.0, 30.0, 40.0), 0, 0.9, 0),
                obj(BoundingBox::new(11.0, 11.0, 31.0, 41.0), 0, 0.9, 1),
            ],
        };
        assert!(matches!(
            encode_objects_to_tensors(&frame, &cfg, 320, 256),
            Err(ScenarioError::Collision {
                frame: 4,
                stride: 8,
                ..
            })
        ));
    }

    #[test]
    fn level_choice() {
        let s = [8, 16, 32];
        assert_eq!(encode_level(&s, 32.0, 32.0), 0);
        assert_eq!(encode_level(&s, 64.0, 64.0), 1);
        assert_eq!(encode_level(&s, 280.0, 70.0), 2);
        assert_eq!(encode_level(&s, 20.0, 50.0), 0);
    }

    #[test]
    fn builtins_present_and_valid() {
        let names: Vec<_> = builtin_scenarios().into_iter().map(|s| s.name).collect();
        for n in ["empty_platform", "crossing_during_approach", "crowd_safe"] {
            assert!(names.iter().any(|x| x == n), "{n}");
        }
        for s in builtin_scenarios() {
            encode_scenario(&s, &DecodeConfig::station()).unwrap();
        }
    }

    #[test]
    fn crowd_safe_footprints_outside_danger() {
        let danger = station_zones()
            .into_iter()
            .find(|z| z.kind == ZoneKind::Danger)
            .unwrap();
        let gt = generate_scenario(&builtin_scenario("crowd_safe").unwrap()).unwrap();
        for f in &gt {
            for o in f.objects.iter().filter(|o| o.class_id == PERSON) {
                assert!(
                    !danger.contains(footprint(&o.bbox)),
                    "frame {} {:?}",
                    f.frame_index,
                    o
                );
            }
        }
    }

    fn arb_frame() -> impl Strategy<Value = GroundTruthFrame> {
        // objects on distinct 32px tiles so no two share a cell at any level
        prop::collection::btree_set((0u32..10, 0u32..8), 0..8).prop_flat_map(|tiles| {
            let n = tiles.len();
            let tiles: Vec<_> = tiles.into_iter().collect();
            (
                Just(tiles),
                prop::collection::vec(
                    (
                        0.05..0.95f64,
                        0.05..0.95f64,
                        6.0..60.0f64,
                        6.0..60.0f64,
                        0.35..=1.0f64,
                        0u32..2,
                    ),
                    n,
                ),
            )
                .prop_map(|(tiles, params)| {
                    let objects = tiles
                        .iter()
                        .zip(params)
                        .enumerate()
                        .map(|(i, (&(tx, ty), (fx, fy, w, h, s, c)))| {
                            let cx = (tx as f64 + fx) * 32.0;
                            let cy = (ty as f64 + fy) * 32.0;
                            let w = w.min(2.0 * cx).min(2.0 * (320.0 - cx));
                            let h = h.min(2.0 * cy).min(2.0 * (256.0 - cy));
                            obj(BoundingBox::from_center(cx, cy, w, h), c, s, i)
                        })
                        .collect();
                    GroundTruthFrame {
                        frame_index: 0,
                        objects,
                    }
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn round_trip_recovers_every_object(frame in arb_frame()) {
            let cfg = DecodeConfig::station();
            let t = encode_objects_to_tensors(&frame, &cfg, 320, 256).unwrap();
            let dets = decode_all(&t, &cfg).unwrap();
            prop_assert_eq!(dets.len(), frame.objects.len());
            for o in &frame.objects {
                let hit = dets.iter().filter(|d| d.class_id == o.class_id && iou(&d.bbox, &o.bbox) >= 0.99).count();
                prop_assert_eq!(hit, 1);
                let best = dets.iter().max_by(|a, b| iou(&a.bbox, &o.bbox).total_cmp(&iou(&b.bbox, &o.bbox))).unwrap();
                prop_assert!((best.score - o.score_level).abs() < 1e-5);
            }
        }
    }
}

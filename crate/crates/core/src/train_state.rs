//! Station train-state machine (OFF / IN / ON / OUT), driven each frame by
//! train detections inside the RISK zone.
//!
//! Transitions:
//!
//! ```text
//! OFF --present--> IN
//! IN  --confirm_frames consecutive frames moving < eps--> ON
//! IN  --absent--> OUT            (train passed without stopping)
//! ON  --moving >= eps, or absent--> OUT
//! OUT --confirm_frames consecutive absent frames--> OFF
//! ```
//!
//! Everything else is a self-loop. The confirmation counter resets on every
//! state change.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{footprint, Zone};
use crate::yolox::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum TrainState {
    /// No train at the platform.
    #[default]
    Off,
    /// Approaching.
    In,
    /// Arrived and stopped.
    On,
    /// Pulling out.
    Out,
}

impl TrainState {
    pub const ALL: [TrainState; 4] = [
        TrainState::Off,
        TrainState::In,
        TrainState::On,
        TrainState::Out,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainState::Off => "OFF",
            TrainState::In => "IN",
            TrainState::On => "ON",
            TrainState::Out => "OUT",
        }
    }

    /// Whether `self -> to` is one of the declared edges (self-loops included).
    pub fn can_transition_to(&self, to: TrainState) -> bool {
        use TrainState::*;
        *self == to
            || matches!(
                (self, to),
                (Off, In) | (In, On) | (In, Out) | (On, Out) | (Out, Off)
            )
    }
}

impl fmt::Display for TrainState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainObservation {
    pub present: bool,
    pub displacement_px: f64,
    pub occupancy: f64,
}

impl TrainObservation {
    pub const ABSENT: TrainObservation = TrainObservation {
        present: false,
        displacement_px: 0.0,
        occupancy: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsmConfig {
    pub stationary_eps_px: f64,
    pub confirm_frames: u32,
}

impl Default for FsmConfig {
    fn default() -> Self {
        Self {
            stationary_eps_px: 2.0,
            confirm_frames: 5,
        }
    }
}

impl FsmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.stationary_eps_px > 0.0) {
            return Err(format!(
                "stationary_eps_px {} must be positive",
                self.stationary_eps_px
            ));
        }
        if self.confirm_frames == 0 {
            return Err("confirm_frames must be at least 1".into());
        }
        Ok(())
    }
}

/// Carries the previous frame's train centroid between observations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObservationContext {
    last_centroid: Option<(f64, f64)>,
}

/// Summarizes this frame's train detections against the RISK zone.
///
/// A train box counts when its footprint lies in the zone or it overlaps the
/// zone with positive area. Displacement follows the centroid of the largest
/// counted box.
pub fn observe_train(
    trains: &[Detection],
    risk_zone: &Zone,
    context: &mut ObservationContext,
) -> TrainObservation {
    let zone_area = risk_zone.area();
    let mut covered = 0.0;
    let mut largest: Option<&Detection> = None;
    for d in trains {
        let overlap = risk_zone.overlap_area(&d.bbox);
        if overlap <= 0.0 && !risk_zone.contains(footprint(&d.bbox)) {
            continue;
        }
        covered += overlap;
        if largest.is_none_or(|l| d.bbox.area() > l.bbox.area()) {
            largest = Some(d);
        }
    }
    let Some(largest) = largest else {
        context.last_centroid = None;
        return TrainObservation::ABSENT;
    };
    let c = largest.bbox.center();
    let displacement_px = match context.last_centroid {
        Some(p) => ((c.0 - p.0).powi(2) + (c.1 - p.1).powi(2)).sqrt(),
        None => 0.0,
    };
    context.last_centroid = Some(c);
    let occupancy = if zone_area > 0.0 {
        (covered / zone_area).clamp(0.0, 1.0)
    } else {
        0.0
    };
    TrainObservation {
        present: true,
        displacement_px,
        occupancy,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FsmCounters {
    /// Consecutive frames satisfying the current state's confirmation condition.
    pub confirm: u32,
}

/// One step of the transition table.
pub fn step_fsm(
    state: TrainState,
    obs: &TrainObservation,
    config: &FsmConfig,
    counters: FsmCounters,
) -> (TrainState, FsmCounters) {
    use TrainState::*;
    let stationary = obs.present && obs.displacement_px < config.stationary_eps_px;
    let next = match state {
        Off if obs.present => In,
        Off => Off,
        In if !obs.present => Out,
        In if stationary => {
            let n = counters.confirm + 1;
            if n >= config.confirm_frames {
                On
            } else {
                return (In, FsmCounters { confirm: n });
            }
        }
        In => return (In, FsmCounters { confirm: 0 }),
        On if !obs.present || obs.displacement_px >= config.stationary_eps_px => Out,
        On => On,
        Out if !obs.present => {
            let n = counters.confirm + 1;
            if n >= config.confirm_frames {
                Off
            } else {
                return (Out, FsmCounters { confirm: n });
            }
        }
        Out => return (Out, FsmCounters { confirm: 0 }),
    };
    if next == state {
        (state, counters)
    } else {
        (next, FsmCounters::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Transition {
    pub frame: u32,
    pub from: TrainState,
    pub to: TrainState,
}

impl Transition {
    /// `{"frame": n, "from": "OFF", "to": "IN"}`
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("transition serializes")
    }
}

/// Owns the state, counters and observation context for one platform.
#[derive(Debug, Clone, Default)]
pub struct TrainStateMachine {
    config: FsmConfig,
    state: TrainState,
    counters: FsmCounters,
    context: ObservationContext,
}

impl TrainStateMachine {
    pub fn new(config: FsmConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn counters(&self) -> FsmCounters {
        self.counters
    }

    pub fn observe(&mut self, trains: &[Detection], risk_zone: &Zone) -> TrainObservation {
        observe_train(trains, risk_zone, &mut self.context)
    }

    pub fn step(&mut self, frame: u32, obs: &TrainObservation) -> Option<Transition> {
        let (next, counters) = step_fsm(self.state, obs, &self.config, self.counters);
        self.counters = counters;
        let from = std::mem::replace(&mut self.state, next);
        (from != next).then_some(Transition {
            frame,
            from,
            to: next,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ZoneKind;
    use crate::yolox::BoundingBox;
    use proptest::prelude::*;
    use TrainState::*;

    fn moving(d: f64) -> TrainObservation {
        TrainObservation {
            present: true,
            displacement_px: d,
            occupancy: 0.5,
        }
    }

    fn replay(start: TrainState, trace: &[TrainObservation], cfg: &FsmConfig) -> Vec<TrainState> {
        let mut s = start;
        let mut c = FsmCounters::default();
        trace
            .iter()
            .map(|o| {
                (s, c) = step_fsm(s, o, cfg, c);
                s
            })
            .collect()
    }

    fn train(x1: f64, y1: f64, x2: f64, y2: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(x1, y1, x2, y2),
            score: 0.9,
            class_id: 1,
        }
    }

    #[test]
    fn observe_examples() {
        let zone = Zone::rect("risk", ZoneKind::Risk, 0.0, 0.0, 100.0, 40.0);
        let mut ctx = ObservationContext::default();
        assert_eq!(
            observe_train(&[], &zone, &mut ctx),
            TrainObservation::ABSENT
        );

        let full = observe_train(&[train(-10.0, -10.0, 110.0, 50.0)], &zone, &mut ctx);
        assert!(full.present);
        assert_eq!(full.occupancy, 1.0);
        assert_eq!(full.displacement_px, 0.0);

        // first appearance of a half-covering train, then it moves 10 px right
        let mut ctx = ObservationContext::default();
        let first = observe_train(&[train(0.0, 0.0, 50.0, 40.0)], &zone, &mut ctx);
        assert_eq!(
            (first.present, first.displacement_px, first.occupancy),
            (true, 0.0, 0.5)
        );
        let second = observe_train(&[train(10.0, 0.0, 60.0, 40.0)], &zone, &mut ctx);
        assert_eq!(
            (second.present, second.displacement_px, second.occupancy),
            (true, 10.0, 0.5)
        );

        let away = observe_train(&[train(200.0, 200.0, 260.0, 240.0)], &zone, &mut ctx);
        assert_eq!(away, TrainObservation::ABSENT);
    }

    #[test]
    fn off_to_in_on_presence() {
        let cfg = FsmConfig::default();
        for d in [0.0, 3.0, 100.0] {
            assert_eq!(
                step_fsm(Off, &moving(d), &cfg, FsmCounters::default()).0,
                In
            );
        }
    }

    #[test]
    fn in_to_on_after_confirm_frames() {
        let cfg = FsmConfig::default();
        let states = replay(In, &[moving(0.5); 5], &cfg);
        assert_eq!(states, vec![In, In, In, In, On]);
        // a moving frame in between restarts the count
        let trace = [
            moving(0.5),
            moving(0.5),
            moving(5.0),
            moving(0.5),
            moving(0.5),
            moving(0.5),
            moving(0.5),
            moving(0.5),
        ];
        assert_eq!(replay(In, &trace, &cfg).last(), Some(&On));
        assert_eq!(replay(In, &trace[..7], &cfg).last(), Some(&In));
    }

    #[test]
    fn out_to_off_after_confirm_frames() {
        let cfg = FsmConfig::default();
        let states = replay(Out, &[TrainObservation::ABSENT; 5], &cfg);
        assert_eq!(states, vec![Out, Out, Out, Out, Off]);
    }

    #[test]
    fn express_pass_goes_in_to_out() {
        let cfg = FsmConfig::default();
        let states = replay(
            Off,
            &[moving(0.0), moving(8.0), TrainObservation::ABSENT],
            &cfg,
        );
        assert_eq!(states, vec![In, In, Out]);
    }

    #[test]
    fn on_leaves_on_motion_or_absence() {
        let cfg = FsmConfig::default();
        assert_eq!(
            step_fsm(On, &moving(2.0), &cfg, FsmCounters::default()).0,
            Out
        );
        assert_eq!(
            step_fsm(On, &TrainObservation::ABSENT, &cfg, FsmCounters::default()).0,
            Out
        );
        assert_eq!(
            step_fsm(On, &moving(1.9), &cfg, FsmCounters::default()).0,
            On
        );
    }

    #[test]
    fn canonical_cycle() {
        let cfg = FsmConfig::default();
        let mut trace = vec![TrainObservation::ABSENT; 3];
        trace.extend([moving(0.0)]);
        trace.extend([moving(6.0); 10]);
        trace.extend([moving(0.0); 8]);
        trace.extend([moving(6.0); 10]);
        trace.extend([TrainObservation::ABSENT; 8]);
        let mut visited = vec![Off];
        for s in replay(Off, &trace, &cfg) {
            if *visited.last().unwrap() != s {
                visited.push(s);
            }
        }
        assert_eq!(visited, vec![Off, In, On, Out, Off]);
    }

    #[test]
    fn machine_reports_transitions() {
        let zone = Zone::rect("risk", ZoneKind::Risk, 0.0, 0.0, 100.0, 40.0);
        let mut m = TrainStateMachine::new(FsmConfig::default());
        let obs = m.observe(&[train(0.0, 0.0, 50.0, 40.0)], &zone);
        let t = m.step(7, &obs).unwrap();
        assert_eq!(t.to_jsonl(), r#"{"frame":7,"from":"OFF","to":"IN"}"#);
        assert_eq!(m.state(), In);
        let obs = m.observe(&[train(0.0, 0.0, 50.0, 40.0)], &zone);
        assert!(m.step(8, &obs).is_none());
        assert_eq!(m.counters().confirm, 1);
    }

    fn arb_obs() -> impl Strategy<Value = TrainObservation> {
        prop_oneof![
            Just(TrainObservation::ABSENT),
            (0.0..5.0f64, 0.0..=1.0f64).prop_map(|(d, o)| TrainObservation {
                present: true,
                displacement_px: d,
                occupancy: o
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn only_declared_transitions(
            start in prop::sample::select(TrainState::ALL.to_vec()),
            trace in prop::collection::vec(arb_obs(), 0..40),
            confirm in 1u32..6,
        ) {
            let cfg = FsmConfig { stationary_eps_px: 2.0, confirm_frames: confirm };
            let states = replay(start, &trace, &cfg);
            let mut prev = start;
            for s in &states {
                prop_assert!(prev.can_transition_to(*s), "{:?} -> {:?}", prev, s);
                prev = *s;
            }
            prop_assert_eq!(replay(start, &trace, &cfg), states);
        }
    }

    proptest! {
        #[test]
        fn absent_trace_stays_off(n in 0usize..200) {
            let states = replay(Off, &vec![TrainObservation::ABSENT; n], &FsmConfig::default());
            prop_assert!(states.iter().all(|s| *s == Off));
        }
    }
}

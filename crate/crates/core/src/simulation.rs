//! Deterministic scenario compiler: scripted cars, persons and fires become
//! a warped-ROI detection stream plus the ground-truth event schedule.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{Detection, FrameDetections, ObjectClass};
use crate::events::{EventKind, TrafficDirection};
use crate::geometry::{BBox, Point};

/// Identifier recorded in scenario files for the stream generator.
pub const RNG_ALGORITHM: &str = "ChaCha8";

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid scenario: {0}")]
pub struct InvalidScenario(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Std-dev in px of the independent Gaussian offset on each box edge.
    pub jitter_sigma: f64,
    pub miss_prob: f64,
    /// Expected spurious Car detections per frame.
    pub false_positive_rate: f64,
    pub score_range: [f64; 2],
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.0,
            miss_prob: 0.0,
            false_positive_rate: 0.0,
            score_range: [0.8, 0.99],
        }
    }
}

impl NoiseModel {
    fn validate(&self) -> Result<(), InvalidScenario> {
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(InvalidScenario(format!("jitter_sigma must be >= 0, got {}", self.jitter_sigma)));
        }
        if !(0.0..=1.0).contains(&self.miss_prob) {
            return Err(InvalidScenario(format!("miss_prob must be in [0, 1], got {}", self.miss_prob)));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(InvalidScenario(format!(
                "false_positive_rate must be >= 0, got {}",
                self.false_positive_rate
            )));
        }
        let [lo, hi] = self.score_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(InvalidScenario(format!("score_range must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorScript {
    pub class: ObjectClass,
    pub enter_t: f64,
    pub exit_t: f64,
    #[serde(default)]
    pub lane: usize,
    /// px/s along y; the sign is the direction of travel.
    #[serde(default)]
    pub speed: f64,
    /// `[start, end]` seconds during which the actor does not move.
    #[serde(default)]
    pub stop_window: Option<[f64; 2]>,
    /// `[w, h]` px.
    pub box_size: [f64; 2],
    /// Fixed box center; overrides lane and speed.
    #[serde(default)]
    pub static_at: Option<Point>,
    /// Declares a Car that drives against the scenario's traffic direction.
    #[serde(default)]
    pub wrong_way: bool,
}

impl ActorScript {
    /// Box center at time `t` (assumes the actor is live).
    fn center(&self, t: f64, lanes: &[f64], dir: TrafficDirection, roi_h: f64) -> (f64, f64) {
        if let Some(p) = self.static_at {
            return (p.x, p.y);
        }
        let h = self.box_size[1];
        // Enter fully visible at the upstream edge for the direction of travel.
        let y0 = if self.speed > 0.0 || (self.speed == 0.0 && dir == TrafficDirection::IncreasingY) {
            0.5 * h
        } else {
            roi_h - 0.5 * h
        };
        let mut moving = t - self.enter_t;
        if let Some([s, e]) = self.stop_window {
            moving -= (t.min(e) - s).max(0.0);
        }
        (lanes[self.lane], y0 + self.speed * moving.max(0.0))
    }

    fn bbox_at(&self, t: f64, lanes: &[f64], dir: TrafficDirection, roi_h: f64) -> BBox {
        let (cx, cy) = self.center(t, lanes, dir, roi_h);
        let [w, h] = self.box_size;
        BBox::from_corners(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    fn is_live(&self, t: f64) -> bool {
        t >= self.enter_t - 1e-9 && t <= self.exit_t + 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub duration: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Warped ROI `[width, height]` in px.
    pub roi_dims: [f64; 2],
    pub lanes: Vec<f64>,
    #[serde(default = "default_direction")]
    pub traffic_direction: TrafficDirection,
    pub actors: Vec<ActorScript>,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rng")]
    pub rng: String,
}

fn default_fps() -> f64 {
    30.0
}

fn default_direction() -> TrafficDirection {
    TrafficDirection::IncreasingY
}

fn default_rng() -> String {
    RNG_ALGORITHM.to_string()
}

impl Scenario {
    pub fn validate(&self) -> Result<(), InvalidScenario> {
        let err = |m: String| Err(InvalidScenario(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return err(format!("duration must be > 0, got {}", self.duration));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return err(format!("fps must be > 0, got {}", self.fps));
        }
        let [rw, rh] = self.roi_dims;
        if !(rw > 0.0 && rh > 0.0) {
            return err(format!("roi_dims must be positive, got [{rw}, {rh}]"));
        }
        if self.rng != RNG_ALGORITHM {
            return err(format!("unsupported rng `{}`, expected `{RNG_ALGORITHM}`", self.rng));
        }
        self.noise.validate()?;
        let dir = self.traffic_direction.sign();
        for (i, a) in self.actors.iter().enumerate() {
            let id = i + 1;
            if !(a.enter_t < a.exit_t) {
                return err(format!("actor {id}: enter_t must be before exit_t"));
            }
            if a.enter_t < 0.0 || a.exit_t > self.duration {
                return err(format!("actor {id}: times must lie within [0, {}]", self.duration));
            }
            if !(a.box_size[0] > 0.0 && a.box_size[1] > 0.0) {
                return err(format!("actor {id}: box_size must be positive"));
            }
            if !a.speed.is_finite() {
                return err(format!("actor {id}: speed must be finite"));
            }
            if let Some([s, e]) = a.stop_window {
                if !(a.enter_t <= s && s <= e && e <= a.exit_t) {
                    return err(format!("actor {id}: stop_window must lie within [enter_t, exit_t]"));
                }
            }
            if a.static_at.is_none() && a.lane >= self.lanes.len() {
                return err(format!("actor {id}: lane {} does not exist", a.lane));
            }
            if a.wrong_way && a.class != ObjectClass::Car {
                return err(format!("actor {id}: only cars can drive the wrong way"));
            }
            if a.class == ObjectClass::Car && a.static_at.is_none() && a.speed != 0.0 {
                let with_flow = a.speed * dir > 0.0;
                if a.wrong_way && with_flow {
                    return err(format!("actor {id}: wrong_way car moves with the traffic direction"));
                }
                if !a.wrong_way && !with_flow {
                    return err(format!(
                        "actor {id}: car moves against the traffic direction but is not marked wrong_way"
                    ));
                }
            }
            // Visible for its whole scripted life: it enters in view, so it
            // is enough to check the last instant.
            let b = a.bbox_at(a.exit_t, &self.lanes, self.traffic_direction, rh);
            let visible = b.x_max > 0.0 && b.x_min < rw && b.y_max > 0.0 && b.y_min < rh;
            if !visible {
                return err(format!("actor {id}: leaves the ROI before exit_t"));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> u64 {
        (self.duration * self.fps).round() as u64
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthEvent> {
        let mut truth = Vec::new();
        for (i, a) in self.actors.iter().enumerate() {
            let actor = i as u64 + 1;
            match a.class {
                ObjectClass::Car => {
                    if let Some([s, _]) = a.stop_window {
                        truth.push(GroundTruthEvent { kind: EventKind::Stop, t: s, actor });
                    }
                    if a.wrong_way {
                        truth.push(GroundTruthEvent {
                            kind: EventKind::WrongWay,
                            t: a.enter_t,
                            actor,
                        });
                    }
                }
                ObjectClass::Fire => truth.push(GroundTruthEvent {
                    kind: EventKind::Fire,
                    t: a.enter_t,
                    actor,
                }),
                ObjectClass::Person => truth.push(GroundTruthEvent {
                    kind: EventKind::Person,
                    t: a.enter_t,
                    actor,
                }),
                ObjectClass::NoFire => {}
            }
        }
        truth.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.kind.cmp(&b.kind)).then(a.actor.cmp(&b.actor)));
        truth
    }
}

/// One scripted incident, serialized as `{"kind": ..., "t": ..., "actor": ...}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthEvent {
    pub kind: EventKind,
    pub t: f64,
    /// 1-based index into the scenario's actors.
    pub actor: u64,
}

/// Perturbs a detection: edge jitter, miss, sampled score.
pub fn apply_noise<R: Rng + ?Sized>(det: &Detection, model: &NoiseModel, rng: &mut R) -> Option<Detection> {
    if rng.random::<f64>() < model.miss_prob {
        return None;
    }
    let mut c = det.bbox.as_array();
    if model.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, model.jitter_sigma).expect("sigma validated");
        for v in &mut c {
            *v += normal.sample(rng);
        }
    }
    let score = sample_score(model, rng);
    Some(Detection {
        class: det.class,
        score,
        bbox: BBox::from_corners(c[0], c[1], c[2], c[3]),
    })
}

fn sample_score<R: Rng + ?Sized>(model: &NoiseModel, rng: &mut R) -> f64 {
    let [lo, hi] = model.score_range;
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Compiles the scenario into a full-rate detection stream (every frame,
/// before sampling) and its ground truth.
pub fn generate_stream(sc: &Scenario) -> Result<(Vec<FrameDetections>, Vec<GroundTruthEvent>), InvalidScenario> {
    sc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let [rw, rh] = sc.roi_dims;
    let spurious = if sc.noise.false_positive_rate > 0.0 {
        Some(Poisson::new(sc.noise.false_positive_rate).expect("rate validated"))
    } else {
        None
    };

    let mut frames = Vec::with_capacity(sc.frame_count() as usize);
    for f in 0..sc.frame_count() {
        let t = f as f64 / sc.fps;
        let mut detections = Vec::new();
        for a in sc.actors.iter().filter(|a| a.is_live(t)) {
            let exact = Detection::new(a.class, 1.0, a.bbox_at(t, &sc.lanes, sc.traffic_direction, rh));
            let Some(noisy) = apply_noise(&exact, &sc.noise, &mut rng) else {
                continue;
            };
            if let Some(b) = noisy.bbox.clip_to(rw, rh).filter(|b| b.area() > 0.0) {
                detections.push(Detection { bbox: b, ..noisy });
            }
        }
        if let Some(dist) = &spurious {
            let n = dist.sample(&mut rng) as u64;
            for _ in 0..n {
                let w = rng.random_range(30.0..70.0);
                let h = rng.random_range(40.0..100.0);
                let x = rng.random_range(0.0..(rw - w).max(1.0));
                let y = rng.random_range(0.0..(rh - h).max(1.0));
                let score = sample_score(&sc.noise, &mut rng);
                let b = BBox::from_corners(x, y, x + w, y + h);
                if let Some(b) = b.clip_to(rw, rh).filter(|b| b.area() > 0.0) {
                    detections.push(Detection::new(ObjectClass::Car, score, b));
                }
            }
        }
        frames.push(FrameDetections { frame: f, t, detections });
    }
    Ok((frames, sc.ground_truth()))
}

const ROI: [f64; 2] = [320.0, 960.0];
const LANES: [f64; 2] = [100.0, 220.0];
const CAR: [f64; 2] = [60.0, 80.0];

fn car(lane: usize, enter_t: f64, exit_t: f64, speed: f64) -> ActorScript {
    ActorScript {
        class: ObjectClass::Car,
        enter_t,
        exit_t,
        lane,
        speed,
        stop_window: None,
        box_size: CAR,
        static_at: None,
        wrong_way: false,
    }
}

fn fixed(class: ObjectClass, enter_t: f64, exit_t: f64, at: (f64, f64), size: [f64; 2]) -> ActorScript {
    ActorScript {
        class,
        enter_t,
        exit_t,
        lane: 0,
        speed: 0.0,
        stop_window: None,
        box_size: size,
        static_at: Some(at.into()),
        wrong_way: false,
    }
}

/// With-flow cars entering `lane` every `headway` seconds from `start`.
fn traffic(lane: usize, start: f64, headway: f64, speed: f64, duration: f64) -> Vec<ActorScript> {
    // Ends while the trailing edge is still inside the ROI.
    let visible_for = (ROI[1] - 0.5 * CAR[1]) / speed;
    let mut cars = Vec::new();
    let mut t = start;
    while t + 1.0 < duration {
        cars.push(car(lane, t, (t + visible_for).min(duration), speed));
        t += headway;
    }
    cars
}

fn base(name: &str, duration: f64, actors: Vec<ActorScript>, noise: NoiseModel) -> Scenario {
    Scenario {
        name: name.to_string(),
        duration,
        fps: 30.0,
        roi_dims: ROI,
        lanes: LANES.to_vec(),
        traffic_direction: TrafficDirection::IncreasingY,
        actors,
        noise,
        seed: 42,
        rng: default_rng(),
    }
}

fn incident_noise() -> NoiseModel {
    NoiseModel {
        jitter_sigma: 0.5,
        ..NoiseModel::default()
    }
}

/// The four single-incident scenarios (stop, wwd, fire, person) plus an
/// incident-free `nominal` run.
pub fn builtin_scenarios() -> BTreeMap<&'static str, Scenario> {
    let mut out = BTreeMap::new();

    let mut stopper = car(0, 0.0, 126.0, 10.0);
    stopper.stop_window = Some([5.0, 126.0]);
    let mut actors = vec![stopper];
    actors.extend(traffic(1, 1.0, 6.0, 100.0, 126.0));
    out.insert("stop", base("stop", 126.0, actors, incident_noise()));

    let mut wrong = car(0, 4.0, 14.0, -90.0);
    wrong.wrong_way = true;
    let mut actors = vec![wrong];
    actors.extend(traffic(1, 0.5, 5.0, 100.0, 29.0));
    out.insert("wwd", base("wwd", 29.0, actors, incident_noise()));

    let mut actors = vec![fixed(ObjectClass::Fire, 29.0, 64.0, (160.0, 500.0), [50.0, 50.0])];
    actors.push(fixed(ObjectClass::NoFire, 0.0, 64.0, (20.0, 120.0), [16.0, 16.0]));
    actors.push(fixed(ObjectClass::NoFire, 0.0, 64.0, (300.0, 640.0), [16.0, 16.0]));
    actors.extend(traffic(0, 0.0, 7.0, 110.0, 64.0));
    actors.extend(traffic(1, 2.0, 6.0, 95.0, 64.0));
    out.insert("fire", base("fire", 64.0, actors, incident_noise()));

    let mut actors = vec![fixed(ObjectClass::Person, 50.0, 72.0, (295.0, 450.0), [20.0, 50.0])];
    actors.extend(traffic(0, 0.0, 7.0, 110.0, 72.0));
    actors.extend(traffic(1, 2.0, 6.0, 95.0, 72.0));
    out.insert("person", base("person", 72.0, actors, incident_noise()));

    let mut actors = traffic(0, 0.0, 4.5, 110.0, 120.0);
    actors.extend(traffic(1, 1.5, 4.0, 90.0, 120.0));
    let noise = NoiseModel {
        jitter_sigma: 1.0,
        miss_prob: 0.05,
        false_positive_rate: 0.02,
        ..NoiseModel::default()
    };
    out.insert("nominal", base("nominal", 120.0, actors, noise));

    out
}

pub fn builtin_scenario(name: &str) -> Option<Scenario> {
    builtin_scenarios().remove(name)
}

pub fn write_ground_truth<W: std::io::Write>(mut out: W, truth: &[GroundTruthEvent]) -> std::io::Result<()> {
    for ev in truth {
        writeln!(out, "{}", serde_json::to_string(ev).expect("truth serializes"))?;
    }
    out.flush()
}

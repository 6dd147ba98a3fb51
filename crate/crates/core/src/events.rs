//! Periodic accident rules over Car track histories (Stop, wrong-way
//! driving) and per-frame presence alarms (Fire, Person).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{FrameDetections, ObjectClass};
use crate::geometry::{iol, iou, BBox};
use crate::tracking::{Track, TrackId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Stop,
    #[serde(rename = "WWD")]
    WrongWay,
    Fire,
    Person,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Stop => "Stop",
            EventKind::WrongWay => "WWD",
            EventKind::Fire => "Fire",
            EventKind::Person => "Person",
        }
    }

    fn is_cycle_kind(&self) -> bool {
        matches!(self, EventKind::Stop | EventKind::WrongWay)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kind-specific numbers backing an event.
///
/// * Stop: `iou`, `prev_t`, `prev_bbox`, `cur_bbox`
/// * WWD: `iol`, `dv` (center y change over the cycle), `prev_t`, `prev_bbox`, `cur_bbox`
/// * Fire / Person: `score`, `bbox` of the strongest triggering detection
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Evidence {
    WrongWay(WrongWayEvidence),
    Stop(StopEvidence),
    Presence(PresenceEvidence),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopEvidence {
    pub iou: f64,
    pub prev_t: f64,
    pub prev_bbox: BBox,
    pub cur_bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrongWayEvidence {
    pub iol: f64,
    pub dv: f64,
    pub prev_t: f64,
    pub prev_bbox: BBox,
    pub cur_bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresenceEvidence {
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub kind: EventKind,
    pub t: f64,
    pub track_id: Option<TrackId>,
    pub evidence: Evidence,
}

impl Event {
    fn sort_key(&self) -> (f64, EventKind, Option<TrackId>) {
        (self.t, self.kind, self.track_id)
    }
}

pub fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| {
        let (ta, ka, ia) = a.sort_key();
        let (tb, kb, ib) = b.sort_key();
        ta.total_cmp(&tb).then(ka.cmp(&kb)).then(ia.cmp(&ib))
    });
}

/// Vertical direction of normal traffic in the warped image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrafficDirection {
    #[serde(rename = "Increasing_Y")]
    IncreasingY,
    #[serde(rename = "Decreasing_Y")]
    DecreasingY,
}

impl TrafficDirection {
    pub fn sign(&self) -> f64 {
        match self {
            TrafficDirection::IncreasingY => 1.0,
            TrafficDirection::DecreasingY => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid event config: {0}")]
pub struct CadaConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CadaConfig {
    /// Seconds between rule evaluations, aligned to stream start.
    pub cycle_period: f64,
    pub stop_iou: f64,
    pub wwd_iol: f64,
    pub traffic_direction: TrafficDirection,
    pub min_score: f64,
    /// Consecutive sampled frames a Fire/Person detection must persist.
    pub presence_persistence: u32,
    /// Minimum |dv| in pixels before a direction is called.
    pub direction_epsilon: f64,
}

impl Default for CadaConfig {
    fn default() -> Self {
        Self {
            cycle_period: 2.4,
            stop_iou: 0.9,
            wwd_iol: 0.75,
            traffic_direction: TrafficDirection::IncreasingY,
            min_score: 0.5,
            presence_persistence: 1,
            direction_epsilon: 1.0,
        }
    }
}

impl CadaConfig {
    pub fn validate(&self) -> Result<(), CadaConfigError> {
        if !(self.cycle_period > 0.0 && self.cycle_period.is_finite()) {
            return Err(CadaConfigError(format!(
                "cycle_period must be > 0, got {}",
                self.cycle_period
            )));
        }
        for (name, v) in [
            ("stop_iou", self.stop_iou),
            ("wwd_iol", self.wwd_iol),
            ("min_score", self.min_score),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CadaConfigError(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.presence_persistence < 1 {
            return Err(CadaConfigError("presence_persistence must be >= 1".into()));
        }
        if !(self.direction_epsilon >= 0.0) {
            return Err(CadaConfigError(format!(
                "direction_epsilon must be >= 0, got {}",
                self.direction_epsilon
            )));
        }
        Ok(())
    }
}

/// Compares each Car track's box at `now` with its box one cycle earlier.
/// Samples are accepted within `tolerance` seconds of the nominal times.
/// At most one event per track: Stop is checked before WWD.
pub fn evaluate_cada_cycle(tracks: &[Track], cfg: &CadaConfig, now: f64, tolerance: f64) -> Vec<Event> {
    let mut events = Vec::new();
    for track in tracks.iter().filter(|t| t.class == ObjectClass::Car) {
        let Some(cur) = track.sample_near(now, tolerance) else {
            continue;
        };
        let Some(prev) = track.sample_near(now - cfg.cycle_period, tolerance) else {
            continue;
        };
        if prev.t >= cur.t {
            continue;
        }
        let overlap = iou(&prev.bbox, &cur.bbox);
        if overlap >= cfg.stop_iou {
            events.push(Event {
                kind: EventKind::Stop,
                t: cur.t,
                track_id: Some(track.id),
                evidence: Evidence::Stop(StopEvidence {
                    iou: overlap,
                    prev_t: prev.t,
                    prev_bbox: prev.bbox,
                    cur_bbox: cur.bbox,
                }),
            });
            continue;
        }
        let line = iol(&prev.bbox, &cur.bbox);
        let dv = cur.bbox.center().1 - prev.bbox.center().1;
        let against_flow = dv * cfg.traffic_direction.sign() < 0.0 && dv.abs() > cfg.direction_epsilon;
        if line < cfg.wwd_iol && against_flow {
            events.push(Event {
                kind: EventKind::WrongWay,
                t: cur.t,
                track_id: Some(track.id),
                evidence: Evidence::WrongWay(WrongWayEvidence {
                    iol: line,
                    dv,
                    prev_t: prev.t,
                    prev_bbox: prev.bbox,
                    cur_bbox: cur.bbox,
                }),
            });
        }
    }
    sort_events(&mut events);
    events
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct EventKey {
    pub kind: EventKind,
    pub track_id: Option<TrackId>,
}

/// Which family of conditions an update reports on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegistryScope {
    /// One rule cycle (Stop, WWD).
    Cycle,
    /// One sampled frame (Fire, Person).
    Frame,
}

/// Alarm latch: a condition key fires once, then re-arms after it has
/// been absent for one cycle (Stop/WWD) or `presence_persistence` frames
/// (Fire/Person). Also carries the presence streak counters.
#[derive(Debug, Clone, Default)]
pub struct EventRegistry {
    latched: BTreeMap<EventKey, u32>,
    fire_streak: u32,
    person_streak: u32,
}

impl EventRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_latched(&self, key: &EventKey) -> bool {
        self.latched.contains_key(key)
    }

    /// Registers the conditions observed in one update of `scope` and
    /// returns the events that should be emitted.
    pub fn update(&mut self, scope: RegistryScope, mut new_events: Vec<Event>, cfg: &CadaConfig) -> Vec<Event> {
        sort_events(&mut new_events);
        let in_scope = |k: EventKind| match scope {
            RegistryScope::Cycle => k.is_cycle_kind(),
            RegistryScope::Frame => !k.is_cycle_kind(),
        };
        let rearm_after = match scope {
            RegistryScope::Cycle => 1,
            RegistryScope::Frame => cfg.presence_persistence.max(1),
        };

        let mut seen = Vec::new();
        let mut emit = Vec::new();
        for ev in new_events {
            let key = EventKey {
                kind: ev.kind,
                track_id: ev.track_id,
            };
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            match self.latched.get_mut(&key) {
                Some(absent) => *absent = 0,
                None => {
                    self.latched.insert(key, 0);
                    emit.push(ev);
                }
            }
        }
        self.latched.retain(|key, absent| {
            if !in_scope(key.kind) || seen.contains(key) {
                return true;
            }
            *absent += 1;
            *absent < rearm_after
        });
        emit
    }
}

/// Fire and Person conditions for one sampled frame. `NoFire` never
/// triggers anything.
pub fn detect_presence(frame: &FrameDetections, cfg: &CadaConfig, registry: &mut EventRegistry) -> Vec<Event> {
    let mut events = Vec::new();
    for (class, kind) in [
        (ObjectClass::Fire, EventKind::Fire),
        (ObjectClass::Person, EventKind::Person),
    ] {
        let strongest = frame
            .detections
            .iter()
            .filter(|d| d.class == class && d.score >= cfg.min_score)
            .max_by(|a, b| a.score.total_cmp(&b.score));
        let streak = match kind {
            EventKind::Fire => &mut registry.fire_streak,
            _ => &mut registry.person_streak,
        };
        match strongest {
            Some(det) => {
                *streak += 1;
                if *streak >= cfg.presence_persistence {
                    events.push(Event {
                        kind,
                        t: frame.t,
                        track_id: None,
                        evidence: Evidence::Presence(PresenceEvidence {
                            score: det.score,
                            bbox: det.bbox,
                        }),
                    });
                }
            }
            None => *streak = 0,
        }
    }
    events
}

/// Drives presence checks every sampled frame and the Stop/WWD rules at
/// every cycle boundary `k * cycle_period`.
#[derive(Debug, Clone)]
pub struct CadaEngine {
    config: CadaConfig,
    tolerance: f64,
    next_cycle: u64,
    registry: EventRegistry,
}

impl CadaEngine {
    /// `sample_period` is the spacing of sampled frames in seconds; history
    /// samples within half of it count as being at a cycle boundary.
    pub fn new(config: CadaConfig, sample_period: f64) -> Result<Self, CadaConfigError> {
        config.validate()?;
        if !(sample_period > 0.0 && sample_period.is_finite()) {
            return Err(CadaConfigError(format!(
                "sample period must be > 0, got {sample_period}"
            )));
        }
        Ok(Self {
            config,
            tolerance: 0.5 * sample_period,
            next_cycle: 0,
            registry: EventRegistry::new(),
        })
    }

    pub fn config(&self) -> &CadaConfig {
        &self.config
    }

    /// Call after the tracker has consumed `frame`.
    pub fn on_frame(&mut self, frame: &FrameDetections, tracks: &[Track]) -> Vec<Event> {
        let presence = detect_presence(frame, &self.config, &mut self.registry);
        let mut out = self
            .registry
            .update(RegistryScope::Frame, presence, &self.config);

        while self.next_cycle as f64 * self.config.cycle_period <= frame.t + self.tolerance {
            let now = self.next_cycle as f64 * self.config.cycle_period;
            let found = evaluate_cada_cycle(tracks, &self.config, now, self.tolerance);
            out.extend(self.registry.update(RegistryScope::Cycle, found, &self.config));
            self.next_cycle += 1;
        }
        sort_events(&mut out);
        out
    }
}

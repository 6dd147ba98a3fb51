//! Detector output shared by ingestion, tracking, events and simulation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Closed set of detector classes. `NoFire` marks fire look-alikes
/// (tunnel lights, tail lights) and never produces an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Person,
    Fire,
    NoFire,
}

impl ObjectClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Person => "Person",
            ObjectClass::Fire => "Fire",
            ObjectClass::NoFire => "NoFire",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub class: ObjectClass,
    pub score: f64,
    pub bbox: BBox,
}

impl Detection {
    pub fn new(class: ObjectClass, score: f64, bbox: BBox) -> Self {
        Self { class, score, bbox }
    }
}

/// All detections observed at one (sampled) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame: u64,
    /// Seconds on the stream clock, `frame / fps`.
    pub t: f64,
    pub detections: Vec<Detection>,
}

impl FrameDetections {
    pub fn new(frame: u64, fps: f64, detections: Vec<Detection>) -> Self {
        Self {
            frame,
            t: frame as f64 / fps,
            detections,
        }
    }
}

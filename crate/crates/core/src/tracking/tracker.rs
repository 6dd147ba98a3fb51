use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::assignment::match_by_iou;
use super::kalman::{bbox_to_state, kalman_predict, kalman_update, KalmanBoxState, KalmanNoise};
use super::TrackingError;
use crate::detection::{FrameDetections, ObjectClass};
use crate::geometry::BBox;

pub type TrackId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackSample {
    pub t: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: TrackId,
    pub class: ObjectClass,
    pub state: KalmanBoxState,
    /// Observed boxes at every matched step, oldest first.
    pub history: VecDeque<TrackSample>,
    /// Consecutive matched steps.
    pub hits: u32,
    /// Consecutive unmatched steps.
    pub coast: u32,
}

impl Track {
    pub fn last_sample(&self) -> Option<&TrackSample> {
        self.history.back()
    }

    /// The history sample closest to `t`, if one lies within `tolerance`.
    pub fn sample_near(&self, t: f64, tolerance: f64) -> Option<&TrackSample> {
        self.history
            .iter()
            .filter(|s| (s.t - t).abs() <= tolerance)
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub iou_gate: f64,
    /// Unmatched steps a track survives; 0 deletes on the first miss.
    pub max_coast: u32,
    pub tracked_classes: BTreeSet<ObjectClass>,
    /// Seconds of history kept per track.
    pub history_retention: f64,
    pub kalman: KalmanNoise,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iou_gate: 0.3,
            max_coast: 0,
            tracked_classes: BTreeSet::from([ObjectClass::Car]),
            history_retention: 5.0,
            kalman: KalmanNoise::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackingError> {
        if !(0.0..=1.0).contains(&self.iou_gate) {
            return Err(TrackingError::InvalidConfig(format!(
                "iou_gate must be in [0, 1], got {}",
                self.iou_gate
            )));
        }
        if !(self.history_retention >= 0.0) {
            return Err(TrackingError::InvalidConfig(format!(
                "history_retention must be >= 0, got {}",
                self.history_retention
            )));
        }
        let k = &self.kalman;
        let all_ok = k
            .initial_covariance
            .iter()
            .chain(&k.process_noise)
            .chain(&k.measurement_noise)
            .all(|v| v.is_finite() && *v >= 0.0);
        if !all_ok {
            return Err(TrackingError::InvalidConfig(
                "kalman noise entries must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Single-stream multi-object tracker. Identities are unique across all
/// classes for the lifetime of the tracker.
#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    tracks: Vec<Track>,
    next_id: TrackId,
    last_t: Option<f64>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self, TrackingError> {
        config.validate()?;
        Ok(Self {
            config,
            tracks: Vec::new(),
            next_id: 1,
            last_t: None,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Live tracks ordered by id.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Number of identities handed out so far.
    pub fn ids_issued(&self) -> u64 {
        self.next_id - 1
    }

    /// Processes one sampled frame and returns `(detection index, track id)`
    /// for every tracked detection, ordered by detection index. Detections
    /// of untracked classes, or with zero width or height, get no id.
    pub fn step(&mut self, frame: &FrameDetections) -> Result<Vec<(usize, TrackId)>, TrackingError> {
        if let Some(previous) = self.last_t {
            if !(frame.t > previous) {
                return Err(TrackingError::NonMonotonicTime {
                    previous,
                    t: frame.t,
                });
            }
        }
        self.last_t = Some(frame.t);

        let mut assigned = Vec::new();
        let mut born = Vec::new();
        let classes: Vec<ObjectClass> = self.config.tracked_classes.iter().copied().collect();
        for class in classes {
            self.step_class(class, frame, &mut assigned, &mut born);
        }

        let max_coast = self.config.max_coast;
        self.tracks.retain(|t| t.coast <= max_coast);
        self.tracks.extend(born);
        self.tracks.sort_by_key(|t| t.id);

        assigned.sort_unstable();
        Ok(assigned)
    }

    fn step_class(
        &mut self,
        class: ObjectClass,
        frame: &FrameDetections,
        assigned: &mut Vec<(usize, TrackId)>,
        born: &mut Vec<Track>,
    ) {
        let noise = &self.config.kalman;
        let candidates: Vec<usize> = frame
            .detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.class == class && bbox_to_state(&d.bbox).is_ok())
            .map(|(i, _)| i)
            .collect();

        let mut predicted = Vec::new();
        for (slot, track) in self.tracks.iter_mut().enumerate() {
            if track.class != class {
                continue;
            }
            // Keep the area from collapsing through zero.
            if track.state.mean[2] + track.state.mean[6] <= 0.0 {
                track.state.mean[6] = 0.0;
            }
            track.state = kalman_predict(&track.state, 1, noise);
            match track.state.bbox() {
                Ok(b) => predicted.push((slot, b)),
                Err(_) => {
                    track.coast += 1;
                    track.hits = 0;
                }
            }
        }

        let boxes: Vec<BBox> = candidates.iter().map(|&i| frame.detections[i].bbox).collect();
        let result = match_by_iou(&predicted, &boxes, self.config.iou_gate);

        let retention = self.config.history_retention;
        for &(slot, local) in &result.matches {
            let det_index = candidates[local];
            let bbox = frame.detections[det_index].bbox;
            let track = &mut self.tracks[slot];
            let z = bbox_to_state(&bbox).expect("candidates have positive extent");
            match kalman_update(&track.state, &z, noise) {
                Ok(state) => track.state = state,
                Err(e) => {
                    log::warn!("track {}: {e}; reinitializing at detection", track.id);
                    track.state = KalmanBoxState::from_observation(&z, noise);
                }
            }
            track.hits += 1;
            track.coast = 0;
            track.history.push_back(TrackSample { t: frame.t, bbox });
            while track
                .history
                .front()
                .is_some_and(|s| s.t < frame.t - retention - 1e-9)
            {
                track.history.pop_front();
            }
            assigned.push((det_index, track.id));
        }
        for &slot in &result.unmatched_tracks {
            let track = &mut self.tracks[slot];
            track.coast += 1;
            track.hits = 0;
        }
        for &local in &result.unmatched_detections {
            let det_index = candidates[local];
            let bbox = frame.detections[det_index].bbox;
            let z = bbox_to_state(&bbox).expect("candidates have positive extent");
            let id = self.next_id;
            self.next_id += 1;
            born.push(Track {
                id,
                class,
                state: KalmanBoxState::from_observation(&z, noise),
                history: VecDeque::from([TrackSample { t: frame.t, bbox }]),
                hits: 1,
                coast: 0,
            });
            assigned.push((det_index, id));
        }
    }
}

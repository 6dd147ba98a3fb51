//! End-to-end stream processing: sampling, ROI mapping, confidence
//! filtering, tracking, and the incident engine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{FrameDetections, ObjectClass};
use crate::events::{CadaConfig, CadaConfigError, CadaEngine, Event};
use crate::geometry::BBox;
use crate::ingestion::{apply_roi, sample_frames, IngestError, RoiMapping, StreamConfig};
use crate::tracking::{TrackId, Tracker, TrackerConfig, TrackingError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
}

impl From<CadaConfigError> for PipelineError {
    fn from(e: CadaConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

/// One tracked detection, as written to the optional tracks log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub frame: u64,
    pub t: f64,
    pub track_id: TrackId,
    pub class: ObjectClass,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub tracks: Vec<TrackRecord>,
    pub events: Vec<Event>,
}

/// Consumes already-sampled frames one at a time.
#[derive(Debug)]
pub struct Pipeline {
    mapping: Option<RoiMapping>,
    min_score: f64,
    tracker: Tracker,
    engine: CadaEngine,
}

impl Pipeline {
    pub fn new(stream: &StreamConfig, mut tracker: TrackerConfig, cada: CadaConfig) -> Result<Self, PipelineError> {
        stream.validate().map_err(|e| PipelineError::Config(format!("stream: {e}")))?;
        cada.validate().map_err(|e| PipelineError::Config(format!("cada: {e}")))?;
        tracker
            .validate()
            .map_err(|e| PipelineError::Config(format!("tracker: {e}")))?;
        let period = stream.sample_period();
        // The rules compare a track with itself one cycle earlier, so its
        // history must reach back at least that far.
        let needed = cada.cycle_period + 2.0 * period;
        if tracker.history_retention < needed {
            log::info!(
                "raising tracker.history_retention from {} to {needed} s to cover one cycle",
                tracker.history_retention
            );
            tracker.history_retention = needed;
        }
        let mapping = stream.roi_mapping()?;
        Ok(Self {
            mapping,
            min_score: cada.min_score,
            tracker: Tracker::new(tracker)?,
            engine: CadaEngine::new(cada, period)?,
        })
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    /// Maps to the ROI, discards `NoFire` and sub-threshold detections,
    /// updates the tracker and evaluates the incident rules.
    pub fn process(&mut self, frame: &FrameDetections) -> Result<FrameOutput, PipelineError> {
        let mut frame = match &self.mapping {
            Some(m) => apply_roi(frame, m),
            None => frame.clone(),
        };
        frame
            .detections
            .retain(|d| d.class != ObjectClass::NoFire && d.score >= self.min_score);

        let assigned = self.tracker.step(&frame)?;
        let tracks = assigned
            .iter()
            .map(|&(i, track_id)| {
                let d = &frame.detections[i];
                TrackRecord {
                    frame: frame.frame,
                    t: frame.t,
                    track_id,
                    class: d.class,
                    bbox: d.bbox,
                }
            })
            .collect();
        let events = self.engine.on_frame(&frame, self.tracker.tracks());
        Ok(FrameOutput { tracks, events })
    }
}

/// Samples a full-rate stream and runs it to completion, returning every
/// emitted event in order. Stops at the first stream error.
pub fn run_stream<I>(
    stream_cfg: &StreamConfig,
    tracker: TrackerConfig,
    cada: CadaConfig,
    frames: I,
) -> Result<Vec<Event>, PipelineError>
where
    I: IntoIterator<Item = Result<FrameDetections, IngestError>>,
{
    let mut pipeline = Pipeline::new(stream_cfg, tracker, cada)?;
    let mut events = Vec::new();
    for frame in sample_frames(frames, stream_cfg.frame_interval)? {
        events.extend(pipeline.process(&frame?)?.events);
    }
    Ok(events)
}

//! Detection-to-track association: Kalman box prediction, Hungarian
//! assignment gated on IoU, and per-class identity management.

mod assignment;
mod kalman;
mod tracker;

pub use assignment::{hungarian_assign, match_by_iou, MatchResult};
pub use kalman::{
    bbox_to_state, kalman_predict, kalman_update, state_to_bbox, transition, KalmanBoxState,
    KalmanNoise, Observation, StateCovariance, StateVector,
};
pub use tracker::{Track, TrackId, TrackSample, Tracker, TrackerConfig};

use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackingError {
    #[error("box {0:?} has zero width or height")]
    DegenerateBox(BBox),
    #[error("state has non-positive shape (area {area}, aspect {aspect})")]
    NonPositiveShape { area: f64, aspect: f64 },
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("frame time {t} is not after previous step at {previous}")]
    NonMonotonicTime { previous: f64, t: f64 },
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
}

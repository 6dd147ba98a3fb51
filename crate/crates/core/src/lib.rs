//! Tracking and incident detection for tunnel CCTV detection streams.

pub mod detection;
pub mod evaluation;
pub mod events;
pub mod geometry;
pub mod ingestion;
pub mod tracking;
pub mod pipeline;
pub mod simulation;

//! Detection-stream input: the JSON Lines wire format, frame-interval
//! sampling and mapping raw-frame boxes into the warped region of interest.
//!
//! One object per line:
//!
//! ```text
//! {"frame": 12, "detections": [{"class": "Car", "score": 0.93, "bbox": [10, 20, 70, 100]}]}
//! ```
//!
//! Timestamps are never stored; they are derived as `frame / fps`.

use std::io::{self, BufRead, Write};
use std::sync::mpsc::{self, Receiver};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{Detection, FrameDetections};
use crate::geometry::{homography_from_quad, warp_bbox, GeometryError, Homography, RoiQuad};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: frame {frame} does not follow frame {previous}")]
    NonMonotonicFrame { line: usize, previous: u64, frame: u64 },
    #[error("frame_interval must be >= 1, got {0}")]
    InvalidInterval(u64),
    #[error("invalid stream config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("read error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordinateSpace {
    Raw,
    Warped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiConfig {
    pub quad: RoiQuad,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub fps: f64,
    /// Keep every `frame_interval`-th frame.
    pub frame_interval: u64,
    /// Applied to every box when `coordinate_space` is `Raw`.
    pub roi: Option<RoiConfig>,
    pub coordinate_space: CoordinateSpace,
    /// Frames the reader thread may parse ahead of processing.
    pub queue_capacity: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            fps: 30.0,
            frame_interval: 6,
            roi: None,
            coordinate_space: CoordinateSpace::Warped,
            queue_capacity: 64,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(IngestError::InvalidConfig(format!("fps must be > 0, got {}", self.fps)));
        }
        if self.frame_interval < 1 {
            return Err(IngestError::InvalidInterval(self.frame_interval));
        }
        if self.queue_capacity < 1 {
            return Err(IngestError::InvalidConfig("queue_capacity must be >= 1".into()));
        }
        if self.roi.is_some() && self.coordinate_space == CoordinateSpace::Warped {
            return Err(IngestError::InvalidConfig(
                "roi is set but coordinate_space is Warped".into(),
            ));
        }
        if let Some(roi) = &self.roi {
            RoiMapping::new(roi)?;
        }
        Ok(())
    }

    /// Seconds between consecutive sampled frames.
    pub fn sample_period(&self) -> f64 {
        self.frame_interval as f64 / self.fps
    }

    pub fn roi_mapping(&self) -> Result<Option<RoiMapping>, IngestError> {
        match (&self.roi, self.coordinate_space) {
            (Some(roi), CoordinateSpace::Raw) => Ok(Some(RoiMapping::new(roi)?)),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireFrame {
    frame: u64,
    detections: Vec<Detection>,
}

fn check_detection(d: &Detection) -> Result<(), String> {
    if !(0.0..=1.0).contains(&d.score) {
        return Err(format!("score {} outside [0, 1]", d.score));
    }
    Ok(())
}

/// Lazily parses a detection stream. Blank lines are skipped; the first
/// error ends the stream.
pub struct DetectionStreamReader<R> {
    lines: io::Lines<R>,
    fps: f64,
    line_no: usize,
    last_frame: Option<u64>,
    failed: bool,
}

pub fn parse_detection_stream<R: BufRead>(source: R, fps: f64) -> DetectionStreamReader<R> {
    DetectionStreamReader {
        lines: source.lines(),
        fps,
        line_no: 0,
        last_frame: None,
        failed: false,
    }
}

impl<R: BufRead> DetectionStreamReader<R> {
    fn parse_line(&mut self, text: &str) -> Result<FrameDetections, IngestError> {
        let line = self.line_no;
        let wire: WireFrame = serde_json::from_str(text).map_err(|e| IngestError::Parse {
            line,
            reason: e.to_string(),
        })?;
        for (i, d) in wire.detections.iter().enumerate() {
            check_detection(d).map_err(|reason| IngestError::Parse {
                line,
                reason: format!("detection {i}: {reason}"),
            })?;
        }
        if let Some(previous) = self.last_frame {
            if wire.frame <= previous {
                return Err(IngestError::NonMonotonicFrame {
                    line,
                    previous,
                    frame: wire.frame,
                });
            }
        }
        self.last_frame = Some(wire.frame);
        Ok(FrameDetections::new(wire.frame, self.fps, wire.detections))
    }
}

impl<R: BufRead> Iterator for DetectionStreamReader<R> {
    type Item = Result<FrameDetections, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(IngestError::Io(e)));
                }
            };
            self.line_no += 1;
            if text.trim().is_empty() {
                continue;
            }
            let item = self.parse_line(&text);
            self.failed = item.is_err();
            return Some(item);
        }
    }
}

/// One JSON line (without the trailing newline) for `frame`.
pub fn frame_to_json(frame: &FrameDetections) -> String {
    #[derive(Serialize)]
    struct WireRef<'a> {
        frame: u64,
        detections: &'a [Detection],
    }
    serde_json::to_string(&WireRef {
        frame: frame.frame,
        detections: &frame.detections,
    })
    .expect("detections always serialize")
}

pub fn write_detection_stream<'a, W, I>(mut out: W, frames: I) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a FrameDetections>,
{
    for f in frames {
        writeln!(out, "{}", frame_to_json(f))?;
    }
    out.flush()
}

/// Anything carrying a frame index, so sampling works on plain frames and
/// on fallible parser output alike. Errors always pass through.
pub trait FrameIndexed {
    fn frame_index(&self) -> Option<u64>;
}

impl FrameIndexed for FrameDetections {
    fn frame_index(&self) -> Option<u64> {
        Some(self.frame)
    }
}

impl<E> FrameIndexed for Result<FrameDetections, E> {
    fn frame_index(&self) -> Option<u64> {
        self.as_ref().ok().map(|f| f.frame)
    }
}

pub struct SampleFrames<I> {
    inner: I,
    interval: u64,
}

impl<I> Iterator for SampleFrames<I>
where
    I: Iterator,
    I::Item: FrameIndexed,
{
    type Item = I::Item;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let item = self.inner.next()?;
            match item.frame_index() {
                Some(f) if f % self.interval != 0 => continue,
                _ => return Some(item),
            }
        }
    }
}

/// Keeps frames whose index is a multiple of `interval`, in order.
pub fn sample_frames<I>(stream: I, interval: u64) -> Result<SampleFrames<I::IntoIter>, IngestError>
where
    I: IntoIterator,
    I::Item: FrameIndexed,
{
    if interval < 1 {
        return Err(IngestError::InvalidInterval(interval));
    }
    Ok(SampleFrames {
        inner: stream.into_iter(),
        interval,
    })
}

/// Raw-frame to warped-ROI box transform.
#[derive(Debug, Clone)]
pub struct RoiMapping {
    homography: Homography,
    width: f64,
    height: f64,
}

impl RoiMapping {
    pub fn new(roi: &RoiConfig) -> Result<Self, GeometryError> {
        Ok(Self {
            homography: homography_from_quad(&roi.quad, roi.width, roi.height)?,
            width: roi.width,
            height: roi.height,
        })
    }

    pub fn homography(&self) -> &Homography {
        &self.homography
    }

    pub fn dims(&self) -> (f64, f64) {
        (self.width, self.height)
    }
}

/// Warps every box into the ROI, clips boxes straddling its edge and drops
/// boxes lying wholly outside. Boxes with a corner on the map's line at
/// infinity cannot lie inside the ROI and are dropped as well.
pub fn apply_roi(frame: &FrameDetections, mapping: &RoiMapping) -> FrameDetections {
    let detections = frame
        .detections
        .iter()
        .filter_map(|d| {
            let warped = match warp_bbox(&mapping.homography, &d.bbox) {
                Ok(b) => b,
                Err(e) => {
                    log::debug!("frame {}: dropping {} box: {e}", frame.frame, d.class);
                    return None;
                }
            };
            let clipped = warped.clip_to(mapping.width, mapping.height)?;
            Some(Detection { bbox: clipped, ..*d })
        })
        .collect();
    FrameDetections {
        frame: frame.frame,
        t: frame.t,
        detections,
    }
}

/// Parses `source` on a background thread, handing frames over through a
/// bounded queue of `capacity` entries.
pub fn spawn_reader<R>(source: R, fps: f64, capacity: usize) -> Receiver<Result<FrameDetections, IngestError>>
where
    R: BufRead + Send + 'static,
{
    let (tx, rx) = mpsc::sync_channel(capacity.max(1));
    thread::spawn(move || {
        for item in parse_detection_stream(source, fps) {
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    rx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::ObjectClass;
    use crate::geometry::{BBox, Point};
    use proptest::prelude::*;

    fn parse_all(text: &str) -> Vec<Result<FrameDetections, IngestError>> {
        parse_detection_stream(text.as_bytes(), 30.0).collect()
    }

    #[test]
    fn parses_one_line() {
        let text = r#"{"frame": 6, "detections": [{"class": "Car", "score": 0.9, "bbox": [0, 0, 10, 20]}, {"class": "NoFire", "score": 0.4, "bbox": [1, 1, 2, 2]}]}"#;
        let out = parse_all(text);
        assert_eq!(out.len(), 1);
        let f = out[0].as_ref().unwrap();
        assert_eq!(f.frame, 6);
        assert!((f.t - 0.2).abs() < 1e-12);
        assert_eq!(f.detections.len(), 2);
        assert_eq!(f.detections[1].class, ObjectClass::NoFire);
    }

    #[test]
    fn empty_input_is_empty_stream() {
        assert!(parse_all("").is_empty());
        assert!(parse_all("\n\n").is_empty());
    }

    #[test]
    fn inverted_box_names_line() {
        let text = "{\"frame\": 0, \"detections\": []}\n{\"frame\": 1, \"detections\": [{\"class\": \"Car\", \"score\": 0.9, \"bbox\": [10, 0, 5, 5]}]}\n";
        let out = parse_all(text);
        assert_eq!(out.len(), 2);
        match &out[1] {
            Err(IngestError::Parse { line, .. }) => assert_eq!(*line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn strict_schema() {
        for bad in [
            r#"{"frame": 0, "detections": [], "extra": 1}"#,
            r#"{"frame": 0, "detections": [{"class": "Truck", "score": 0.9, "bbox": [0, 0, 1, 1]}]}"#,
            r#"{"frame": 0, "detections": [{"class": "Car", "score": 1.5, "bbox": [0, 0, 1, 1]}]}"#,
            r#"{"frame": 0, "detections": [{"class": "Car", "score": 0.5, "bbox": [0, 0, 1]}]}"#,
            r#"{"frame": 0, "detections": [{"class": "Car", "score": 0.5, "bbox": [0, 0, 1, 1], "id": 3}]}"#,
            r#"{"frame": -1, "detections": []}"#,
            r#"{"detections": []}"#,
            "not json",
        ] {
            let out = parse_all(bad);
            assert!(
                matches!(out.as_slice(), [Err(IngestError::Parse { line: 1, .. })]),
                "{bad}"
            );
        }
    }

    #[test]
    fn frames_must_increase() {
        let text = "{\"frame\": 4, \"detections\": []}\n\n{\"frame\": 4, \"detections\": []}\n{\"frame\": 9, \"detections\": []}\n";
        let out = parse_all(text);
        assert_eq!(out.len(), 2, "stream stops at first error");
        assert!(matches!(
            out[1],
            Err(IngestError::NonMonotonicFrame { line: 3, previous: 4, frame: 4 })
        ));
    }

    fn frames(n: u64) -> Vec<FrameDetections> {
        (0..n).map(|i| FrameDetections::new(i, 30.0, vec![])).collect()
    }

    #[test]
    fn sampling_examples() {
        let all = frames(30);
        let same: Vec<_> = sample_frames(all.clone(), 1).unwrap().collect();
        assert_eq!(same, all);
        let kept: Vec<u64> = sample_frames(all, 6).unwrap().map(|f| f.frame).collect();
        assert_eq!(kept, vec![0, 6, 12, 18, 24]);
        assert!(matches!(
            sample_frames(frames(3), 0),
            Err(IngestError::InvalidInterval(0))
        ));
    }

    #[test]
    fn sampling_passes_errors_through() {
        let text = "{\"frame\": 1, \"detections\": []}\n{\"frame\": 0, \"detections\": []}\n";
        let out: Vec<_> = sample_frames(parse_detection_stream(text.as_bytes(), 30.0), 6)
            .unwrap()
            .collect();
        assert_eq!(out.len(), 1);
        assert!(out[0].is_err());
    }

    fn det(b: [f64; 4]) -> Detection {
        Detection::new(ObjectClass::Car, 0.9, BBox::try_from(b).unwrap())
    }

    #[test]
    fn full_frame_roi_is_identity() {
        let roi = RoiConfig {
            quad: RoiQuad::rect(640.0, 480.0).unwrap(),
            width: 640.0,
            height: 480.0,
        };
        let m = RoiMapping::new(&roi).unwrap();
        let f = FrameDetections::new(0, 30.0, vec![det([10.0, 20.0, 50.0, 80.0])]);
        let out = apply_roi(&f, &m);
        let b = out.detections[0].bbox;
        for (a, e) in b.as_array().iter().zip([10.0, 20.0, 50.0, 80.0]) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn roi_drops_outside_and_clips_straddling() {
        // ROI is the square (100,100)-(200,200) mapped onto 100x100.
        let quad = RoiQuad::new([
            Point::new(100.0, 100.0),
            Point::new(200.0, 100.0),
            Point::new(200.0, 200.0),
            Point::new(100.0, 200.0),
        ])
        .unwrap();
        let m = RoiMapping::new(&RoiConfig {
            quad,
            width: 100.0,
            height: 100.0,
        })
        .unwrap();
        let f = FrameDetections::new(
            3,
            30.0,
            vec![
                det([0.0, 0.0, 50.0, 50.0]),
                det([180.0, 150.0, 240.0, 170.0]),
                det([120.0, 120.0, 130.0, 140.0]),
            ],
        );
        let out = apply_roi(&f, &m);
        assert_eq!(out.detections.len(), 2);
        // x 80..140 clipped to 80..100
        let b = out.detections[0].bbox.as_array();
        let expect = [80.0, 50.0, 100.0, 70.0];
        for (a, e) in b.iter().zip(expect) {
            assert!((a - e).abs() < 1e-9, "{b:?}");
        }
        assert!(out.detections[1].bbox.x_min > 19.999 && out.detections[1].bbox.x_min < 20.001);
    }

    #[test]
    fn perspective_roi_keeps_boxes_inside_bounds() {
        let quad = RoiQuad::new([
            Point::new(250.0, 50.0),
            Point::new(390.0, 50.0),
            Point::new(620.0, 470.0),
            Point::new(20.0, 470.0),
        ])
        .unwrap();
        let m = RoiMapping::new(&RoiConfig {
            quad,
            width: 320.0,
            height: 960.0,
        })
        .unwrap();
        let mut dets = Vec::new();
        for i in 0..12 {
            for j in 0..10 {
                let x = i as f64 * 55.0;
                let y = j as f64 * 50.0;
                dets.push(det([x, y, x + 40.0, y + 30.0]));
            }
        }
        let out = apply_roi(&FrameDetections::new(0, 30.0, dets), &m);
        assert!(!out.detections.is_empty());
        for d in &out.detections {
            let b = d.bbox;
            assert!(0.0 <= b.x_min && b.x_min <= b.x_max && b.x_max <= 320.0);
            assert!(0.0 <= b.y_min && b.y_min <= b.y_max && b.y_max <= 960.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(StreamConfig::default().validate().is_ok());
        let bad = StreamConfig {
            frame_interval: 0,
            ..StreamConfig::default()
        };
        assert!(matches!(bad.validate(), Err(IngestError::InvalidInterval(0))));
        let bad = StreamConfig {
            fps: 0.0,
            ..StreamConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!((StreamConfig::default().sample_period() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn background_reader_delivers_in_order() {
        let mut text = String::new();
        for i in 0..200 {
            text.push_str(&format!("{{\"frame\": {i}, \"detections\": []}}\n"));
        }
        let rx = spawn_reader(io::Cursor::new(text.into_bytes()), 30.0, 4);
        let got: Vec<u64> = rx.iter().map(|r| r.unwrap().frame).collect();
        assert_eq!(got, (0..200).collect::<Vec<_>>());
    }

    fn arb_frames() -> impl Strategy<Value = Vec<FrameDetections>> {
        let det = (
            prop::sample::select(vec![
                ObjectClass::Car,
                ObjectClass::Person,
                ObjectClass::Fire,
                ObjectClass::NoFire,
            ]),
            0.0..=1.0f64,
            -1e3..1e3f64,
            -1e3..1e3f64,
            0.0..500.0f64,
            0.0..500.0f64,
        )
            .prop_map(|(c, s, x, y, w, h)| {
                Detection::new(c, s, BBox::new(x, y, x + w, y + h).unwrap())
            });
        prop::collection::vec((1u64..50, prop::collection::vec(det, 0..5)), 0..20).prop_map(
            |items| {
                let mut frame = 0;
                items
                    .into_iter()
                    .map(|(gap, dets)| {
                        frame += gap;
                        FrameDetections::new(frame, 30.0, dets)
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(frames in arb_frames()) {
            let mut buf = Vec::new();
            write_detection_stream(&mut buf, &frames).unwrap();
            let back: Vec<FrameDetections> = parse_detection_stream(buf.as_slice(), 30.0)
                .collect::<Result<_, _>>()
                .unwrap();
            prop_assert_eq!(back, frames);
        }

        #[test]
        fn sampled_length_is_ceiling(n in 0u64..200, c in 1u64..10) {
            let kept = sample_frames(frames(n), c).unwrap().count() as u64;
            prop_assert_eq!(kept, n.div_ceil(c));
        }
    }
}

//! Detection-quality (average precision) and incident-latency scoring.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::events::{Event, EventKind};
use crate::geometry::{iou, BBox};
use crate::simulation::GroundTruthEvent;
use crate::tracking::TrackId;

/// Default IoU for a detection to count as a true positive.
pub const DEFAULT_AP_IOU: f64 = 0.5;
/// Default latency window and pass threshold in seconds.
pub const DEFAULT_MATCH_WINDOW: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub score: f64,
    pub bbox: BBox,
}

impl ScoredBox {
    pub fn new(score: f64, bbox: BBox) -> Self {
        Self { score, bbox }
    }
}

/// Interpolation used for the area under the precision–recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ApVariant {
    /// Precision made non-increasing from the right, integrated at every
    /// recall step.
    #[default]
    AllPoint,
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApOutcome {
    pub ap: f64,
    /// No truth and no detections: the metric is undefined and reported as 1.
    pub degenerate: bool,
}

/// All-point AP at `iou_thresh`. `detections[i]` and `truth[i]` belong to
/// image `i`; missing trailing images count as empty.
pub fn average_precision(detections: &[Vec<ScoredBox>], truth: &[Vec<BBox>], iou_thresh: f64) -> f64 {
    average_precision_with(detections, truth, iou_thresh, ApVariant::AllPoint).ap
}

pub fn average_precision_with(
    detections: &[Vec<ScoredBox>],
    truth: &[Vec<BBox>],
    iou_thresh: f64,
    variant: ApVariant,
) -> ApOutcome {
    assert!(
        iou_thresh > 0.0 && iou_thresh <= 1.0,
        "iou_thresh must be in (0, 1], got {iou_thresh}"
    );
    let n_truth: usize = truth.iter().map(Vec::len).sum();
    let n_det: usize = detections.iter().map(Vec::len).sum();
    if n_truth == 0 {
        if n_det == 0 {
            log::warn!("average precision undefined with no truth and no detections; reporting 1.0");
        }
        return ApOutcome {
            ap: if n_det == 0 { 1.0 } else { 0.0 },
            degenerate: n_det == 0,
        };
    }

    let is_tp = label_detections(detections, truth, iou_thresh);
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (rank, &hit) in is_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_truth as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }

    let ap = match variant {
        ApVariant::AllPoint => {
            let mut area = 0.0;
            let mut prev_recall = 0.0;
            for (p, r) in precision.iter().zip(&recall) {
                area += (r - prev_recall) * p;
                prev_recall = *r;
            }
            area
        }
        ApVariant::ElevenPoint => {
            let mut sum = 0.0;
            for k in 0..=10 {
                let level = k as f64 / 10.0;
                // Precision is already non-increasing, so the first rank
                // reaching the level carries the maximum.
                if let Some(i) = recall.iter().position(|&r| r >= level - 1e-12) {
                    sum += precision[i];
                }
            }
            sum / 11.0
        }
    };
    ApOutcome { ap, degenerate: false }
}

/// Ranks all detections by descending score (ties in image/index order) and
/// greedily marks each as TP if an unmatched truth box in its image has
/// IoU ≥ `iou_thresh`, taking the highest such IoU.
fn label_detections(detections: &[Vec<ScoredBox>], truth: &[Vec<BBox>], iou_thresh: f64) -> Vec<bool> {
    let mut ranked: Vec<(usize, &ScoredBox)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, dets)| dets.iter().map(move |d| (img, d)))
        .collect();
    for (_, d) in &ranked {
        assert!(d.score.is_finite(), "detection scores must be finite");
    }
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut used: Vec<Vec<bool>> = (0..detections.len().max(truth.len()))
        .map(|i| vec![false; truth.get(i).map_or(0, Vec::len)])
        .collect();
    ranked
        .iter()
        .map(|(img, d)| {
            let Some(boxes) = truth.get(*img) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in boxes.iter().enumerate() {
                if used[*img][j] {
                    continue;
                }
                let o = iou(&d.bbox, t);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[*img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchStatus {
    Matched,
    Missed,
}

/// The fate of one ground-truth event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthOutcome {
    pub kind: EventKind,
    pub actor: u64,
    pub onset_t: f64,
    pub status: MatchStatus,
    pub detected_t: Option<f64>,
    pub latency: Option<f64>,
    pub track_id: Option<TrackId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub truth_events: usize,
    pub matched: usize,
    pub missed: usize,
    pub false_positives: usize,
    pub max_latency: Option<f64>,
    pub mean_latency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub match_window: f64,
    pub events: Vec<TruthOutcome>,
    pub false_positives: Vec<Event>,
    pub summary: LatencySummary,
}

/// One-to-one, same-kind matching: truth events in onset order each claim
/// the earliest unclaimed emitted event with `t` in
/// `[onset, onset + match_window]`.
pub fn score_latency(emitted: &[Event], truth: &[GroundTruthEvent], match_window: f64) -> LatencyReport {
    assert!(match_window > 0.0, "match_window must be > 0, got {match_window}");
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&truth[a], &truth[b]);
        x.t.total_cmp(&y.t).then(x.kind.cmp(&y.kind)).then(x.actor.cmp(&y.actor))
    });
    let mut by_time: Vec<usize> = (0..emitted.len()).collect();
    by_time.sort_by(|&a, &b| emitted[a].t.total_cmp(&emitted[b].t));

    let mut claimed = vec![false; emitted.len()];
    let mut events = Vec::with_capacity(truth.len());
    for &ti in &order {
        let gt = &truth[ti];
        let hit = by_time.iter().copied().find(|&ei| {
            let e = &emitted[ei];
            !claimed[ei] && e.kind == gt.kind && e.t >= gt.t && e.t <= gt.t + match_window
        });
        let outcome = match hit {
            Some(ei) => {
                claimed[ei] = true;
                let e = &emitted[ei];
                TruthOutcome {
                    kind: gt.kind,
                    actor: gt.actor,
                    onset_t: gt.t,
                    status: MatchStatus::Matched,
                    detected_t: Some(e.t),
                    latency: Some(e.t - gt.t),
                    track_id: e.track_id,
                }
            }
            None => TruthOutcome {
                kind: gt.kind,
                actor: gt.actor,
                onset_t: gt.t,
                status: MatchStatus::Missed,
                detected_t: None,
                latency: None,
                track_id: None,
            },
        };
        events.push(outcome);
    }
    let false_positives: Vec<Event> = by_time
        .iter()
        .filter(|&&ei| !claimed[ei])
        .map(|&ei| emitted[ei].clone())
        .collect();

    let latencies: Vec<f64> = events.iter().filter_map(|o| o.latency).collect();
    let summary = LatencySummary {
        truth_events: events.len(),
        matched: latencies.len(),
        missed: events.len() - latencies.len(),
        false_positives: false_positives.len(),
        max_latency: latencies.iter().copied().reduce(f64::max),
        mean_latency: (!latencies.is_empty()).then(|| latencies.iter().sum::<f64>() / latencies.len() as f64),
    };
    LatencyReport {
        match_window,
        events,
        false_positives,
        summary,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunVerdict {
    pub pass: bool,
    pub pass_threshold: f64,
    /// Whether false positives fail the run.
    pub strict: bool,
    #[serde(flatten)]
    pub report: LatencyReport,
}

/// Pass iff every truth event matched within `pass_threshold` and, when
/// `strict`, nothing was emitted without a matching truth.
pub fn summarize_run(report: &LatencyReport, pass_threshold: f64, strict: bool) -> (bool, String) {
    let all_on_time = report
        .events
        .iter()
        .all(|o| o.latency.is_some_and(|l| l <= pass_threshold));
    let pass = all_on_time && (!strict || report.false_positives.is_empty());
    (pass, render_table(report, pass_threshold, pass))
}

pub fn verdict(report: LatencyReport, pass_threshold: f64, strict: bool) -> (RunVerdict, String) {
    let (pass, table) = summarize_run(&report, pass_threshold, strict);
    (
        RunVerdict {
            pass,
            pass_threshold,
            strict,
            report,
        },
        table,
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn render_table(report: &LatencyReport, pass_threshold: f64, pass: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<7} {:>5} {:>9} {:>9} {:>9}  status",
        "kind", "actor", "onset_s", "detect_s", "latency"
    );
    for o in &report.events {
        let status = match o.status {
            MatchStatus::Matched if o.latency.is_some_and(|l| l > pass_threshold) => "Late",
            MatchStatus::Matched => "Matched",
            MatchStatus::Missed => "Missed",
        };
        let _ = writeln!(
            out,
            "{:<7} {:>5} {:>9.2} {:>9} {:>9}  {}",
            o.kind.as_str(),
            o.actor,
            o.onset_t,
            fmt_opt(o.detected_t),
            fmt_opt(o.latency),
            status
        );
    }
    for e in &report.false_positives {
        let track = e.track_id.map_or_else(|| "-".to_string(), |id| id.to_string());
        let _ = writeln!(
            out,
            "{:<7} {:>5} {:>9} {:>9.2} {:>9}  FalsePositive (track {track})",
            e.kind.as_str(),
            "-",
            "-",
            e.t,
            "-"
        );
    }
    let s = &report.summary;
    let _ = writeln!(
        out,
        "truth {} | matched {} | missed {} | false positives {} | max latency {} s | window {} s",
        s.truth_events,
        s.matched,
        s.missed,
        s.false_positives,
        fmt_opt(s.max_latency),
        report.match_window
    );
    let _ = writeln!(out, "{}", if pass { "PASS" } else { "FAIL" });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Evidence, PresenceEvidence};
    use proptest::prelude::*;

    fn bx(x: f64, y: f64) -> BBox {
        BBox::new(x, y, x + 10.0, y + 10.0).unwrap()
    }

    fn ev(kind: EventKind, t: f64) -> Event {
        Event {
            kind,
            t,
            track_id: None,
            evidence: Evidence::Presence(PresenceEvidence {
                score: 1.0,
                bbox: bx(0.0, 0.0),
            }),
        }
    }

    fn gt(kind: EventKind, t: f64, actor: u64) -> GroundTruthEvent {
        GroundTruthEvent { kind, t, actor }
    }

    /// Recomputes every prefix of the ranking from scratch and integrates
    /// `max{precision(k) : recall(k) >= r}` over the distinct recall levels.
    fn brute_force_ap(detections: &[Vec<ScoredBox>], truth: &[Vec<BBox>], thr: f64) -> f64 {
        let n_truth: usize = truth.iter().map(Vec::len).sum();
        let mut ranked: Vec<(usize, ScoredBox)> = detections
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().map(move |d| (i, *d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut points = Vec::new();
        for k in 1..=ranked.len() {
            let mut taken: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.len()]).collect();
            let mut tp = 0;
            for (img, d) in &ranked[..k] {
                let cand = truth[*img]
                    .iter()
                    .enumerate()
                    .filter(|(j, t)| !taken[*img][*j] && iou(&d.bbox, t) >= thr)
                    .fold(None::<(usize, f64)>, |acc, (j, t)| {
                        let o = iou(&d.bbox, t);
                        match acc {
                            Some((_, b)) if b >= o => acc,
                            _ => Some((j, o)),
                        }
                    });
                if let Some((j, _)) = cand {
                    taken[*img][j] = true;
                    tp += 1;
                }
            }
            points.push((tp as f64 / n_truth as f64, tp as f64 / k as f64));
        }
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut area = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let p = points
                .iter()
                .filter(|q| q.0 >= r)
                .map(|q| q.1)
                .fold(0.0, f64::max);
            area += (r - prev) * p;
            prev = r;
        }
        area
    }

    #[test]
    fn worked_example_five_sixths() {
        let truth = vec![vec![bx(0.0, 0.0), bx(100.0, 0.0)]];
        let dets = vec![vec![
            ScoredBox::new(0.9, bx(0.0, 0.0)),
            ScoredBox::new(0.8, bx(50.0, 50.0)),
            ScoredBox::new(0.7, bx(100.0, 0.0)),
        ]];
        assert!((average_precision(&dets, &truth, 0.5) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn trivial_ap_cases() {
        let truth = vec![vec![bx(0.0, 0.0)], vec![bx(5.0, 5.0)]];
        let perfect = vec![
            vec![ScoredBox::new(0.9, bx(0.0, 0.0))],
            vec![ScoredBox::new(0.4, bx(5.0, 5.0))],
        ];
        assert_eq!(average_precision(&perfect, &truth, 0.5), 1.0);
        assert_eq!(average_precision(&[], &truth, 0.5), 0.0);
        let spurious = vec![vec![ScoredBox::new(0.5, bx(0.0, 0.0))]];
        assert_eq!(average_precision(&spurious, &[], 0.5), 0.0);
        let empty = average_precision_with(&[], &[], 0.5, ApVariant::AllPoint);
        assert_eq!(empty, ApOutcome { ap: 1.0, degenerate: true });
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let truth = vec![vec![bx(0.0, 0.0)]];
        let dets = vec![vec![ScoredBox::new(0.9, bx(0.0, 0.0)), ScoredBox::new(0.8, bx(1.0, 0.0))]];
        let labels = label_detections(&dets, &truth, 0.5);
        assert_eq!(labels, vec![true, false]);
        assert_eq!(average_precision(&dets, &truth, 0.5), 1.0);
    }

    #[test]
    fn eleven_point_example() {
        let truth = vec![vec![bx(0.0, 0.0), bx(100.0, 0.0)]];
        let dets = vec![vec![
            ScoredBox::new(0.9, bx(0.0, 0.0)),
            ScoredBox::new(0.8, bx(50.0, 50.0)),
            ScoredBox::new(0.7, bx(100.0, 0.0)),
        ]];
        // Levels 0..=0.5 see precision 1, levels 0.6..=1 see 2/3.
        let want = (6.0 * 1.0 + 5.0 * (2.0 / 3.0)) / 11.0;
        let got = average_precision_with(&dets, &truth, 0.5, ApVariant::ElevenPoint).ap;
        assert!((got - want).abs() < 1e-15);
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<ScoredBox>>, Vec<Vec<BBox>>)> {
        let cell = || (0u8..6, 0u8..3);
        let dets = prop::collection::vec((0usize..3, cell(), 0u8..8), 0..=20);
        let truth = prop::collection::vec((0usize..3, cell()), 0..=10);
        (dets, truth).prop_map(|(d, t)| {
            let on_grid = |(gx, gy): (u8, u8)| bx(gx as f64 * 8.0, gy as f64 * 8.0);
            let mut dv = vec![Vec::new(); 3];
            for (img, c, s) in d {
                dv[img].push(ScoredBox::new(s as f64 / 8.0, on_grid(c)));
            }
            let mut tv = vec![Vec::new(); 3];
            for (img, c) in t {
                tv[img].push(on_grid(c));
            }
            (dv, tv)
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((dets, truth) in instance()) {
            let n_truth: usize = truth.iter().map(Vec::len).sum();
            prop_assume!(n_truth > 0);
            let got = average_precision(&dets, &truth, 0.5);
            let want = brute_force_ap(&dets, &truth, 0.5);
            prop_assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
            prop_assert!((0.0..=1.0).contains(&got));
        }

        #[test]
        fn invariant_under_monotone_score_map((dets, truth) in instance()) {
            let mapped: Vec<Vec<ScoredBox>> = dets
                .iter()
                .map(|ds| ds.iter().map(|d| ScoredBox::new((3.0 * d.score).exp() - 7.0, d.bbox)).collect())
                .collect();
            prop_assert_eq!(average_precision(&dets, &truth, 0.5), average_precision(&mapped, &truth, 0.5));
        }

        #[test]
        fn false_positive_never_helps((dets, truth) in instance(), s in 0u8..8) {
            let mut more = dets.clone();
            more[0].push(ScoredBox::new(s as f64 / 8.0 + 1e-3, bx(500.0, 500.0)));
            prop_assert!(average_precision(&more, &truth, 0.5) <= average_precision(&dets, &truth, 0.5) + 1e-12);
        }

        #[test]
        fn top_ranked_true_positive_never_hurts((dets, truth) in instance()) {
            let Some(img) = truth.iter().position(|t| !t.is_empty()) else { return Ok(()); };
            let mut extra_truth = truth.clone();
            let unique = bx(900.0, 900.0);
            extra_truth[img].push(unique);
            let mut more = dets.clone();
            more[img].push(ScoredBox::new(10.0, unique));
            prop_assert!(
                average_precision(&more, &extra_truth, 0.5) + 1e-12 >= average_precision(&dets, &extra_truth, 0.5)
            );
        }
    }

    #[test]
    fn occurrence_detection_pairs() {
        let truth = vec![
            gt(EventKind::Stop, 5.0, 1),
            gt(EventKind::WrongWay, 4.0, 2),
            gt(EventKind::Fire, 29.0, 3),
            gt(EventKind::Person, 50.0, 4),
        ];
        let emitted = vec![
            ev(EventKind::Stop, 7.0),
            ev(EventKind::WrongWay, 12.0),
            ev(EventKind::Fire, 29.0),
            ev(EventKind::Person, 50.0),
        ];
        let r = score_latency(&emitted, &truth, 10.0);
        let lat: Vec<(EventKind, f64)> = r.events.iter().map(|o| (o.kind, o.latency.unwrap())).collect();
        assert_eq!(
            lat,
            vec![
                (EventKind::WrongWay, 8.0),
                (EventKind::Stop, 2.0),
                (EventKind::Fire, 0.0),
                (EventKind::Person, 0.0)
            ]
        );
        assert!(r.false_positives.is_empty());
        assert_eq!(r.summary.max_latency, Some(8.0));
        assert!(summarize_run(&r, 10.0, true).0);
    }

    #[test]
    fn unmatched_emission_is_false_positive() {
        let r = score_latency(&[ev(EventKind::Fire, 3.0)], &[], 10.0);
        assert_eq!(r.summary.false_positives, 1);
        assert!(!summarize_run(&r, 10.0, true).0);
        assert!(summarize_run(&r, 10.0, false).0);
    }

    #[test]
    fn matching_is_kind_and_window_bound() {
        let truth = [gt(EventKind::Stop, 5.0, 1)];
        let early = score_latency(&[ev(EventKind::Stop, 4.9)], &truth, 10.0);
        assert_eq!(early.events[0].status, MatchStatus::Missed);
        let late = score_latency(&[ev(EventKind::Stop, 15.5)], &truth, 10.0);
        assert_eq!(late.events[0].status, MatchStatus::Missed);
        let wrong_kind = score_latency(&[ev(EventKind::Fire, 6.0)], &truth, 10.0);
        assert_eq!(wrong_kind.events[0].status, MatchStatus::Missed);
        assert_eq!(wrong_kind.summary.false_positives, 1);
        let (pass, table) = summarize_run(&wrong_kind, 10.0, true);
        assert!(!pass);
        assert!(table.contains("Missed"));
    }

    #[test]
    fn matching_is_one_to_one_and_earliest() {
        let truth = [gt(EventKind::Stop, 1.0, 1), gt(EventKind::Stop, 2.0, 2)];
        let emitted = [ev(EventKind::Stop, 3.0), ev(EventKind::Stop, 2.5), ev(EventKind::Stop, 9.0)];
        let r = score_latency(&emitted, &truth, 10.0);
        assert_eq!(r.events[0].detected_t, Some(2.5));
        assert_eq!(r.events[1].detected_t, Some(3.0));
        assert_eq!(r.false_positives.len(), 1);
        assert_eq!(r.false_positives[0].t, 9.0);
    }

    #[test]
    fn pass_threshold_and_misses() {
        let truth = [gt(EventKind::Stop, 0.0, 1)];
        let r = score_latency(&[ev(EventKind::Stop, 11.0)], &truth, 20.0);
        let (pass, table) = summarize_run(&r, 10.0, true);
        assert!(!pass);
        assert!(table.contains("Late"));
        assert!(summarize_run(&r, 11.0, true).0);
        let missed = score_latency(&[], &truth, 10.0);
        assert!(!summarize_run(&missed, 10.0, true).0);
        let nothing = score_latency(&[], &[], 10.0);
        assert!(summarize_run(&nothing, 10.0, true).0);
    }

    #[test]
    fn verdict_json_layout() {
        let r = score_latency(&[ev(EventKind::Fire, 1.0)], &[gt(EventKind::Fire, 1.0, 1)], 10.0);
        let (v, _) = verdict(r, 10.0, true);
        let json = serde_json::to_value(&v).unwrap();
        for key in ["pass", "events", "false_positives", "summary", "match_window"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["events"][0]["latency"], 0.0);
        let back: RunVerdict = serde_json::from_value(json).unwrap();
        assert_eq!(back, v);
    }
}

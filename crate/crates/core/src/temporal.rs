//! Multi-frame evidence: per-stream IoU region tracking and windowed
//! confidence averaging.
//!
//! A region's evidence is the average of its last `window` per-frame
//! confidences, where frames without an associated detection (including
//! frames before the region appeared) count as zero. A detection seen in a
//! single frame therefore never contributes more than `conf / window`.

use std::collections::VecDeque;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::detect::FrameDetections;
use crate::geometry::{iou, BBox, ClassId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    /// Frames averaged into a region's evidence.
    pub window: usize,
    /// Minimum IoU for a detection to continue a region.
    pub assoc_iou: f64,
    /// Consecutive missed frames tolerated before a region is retired.
    pub miss_limit: u32,
    /// 1.0 gives a plain moving average; below 1.0 older frames are
    /// down-weighted geometrically.
    pub decay: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            window: 10,
            assoc_iou: 0.3,
            miss_limit: 5,
            decay: 1.0,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window == 0 {
            return Err("window must be at least 1".into());
        }
        if !(self.assoc_iou > 0.0 && self.assoc_iou < 1.0) {
            return Err(format!("assoc_iou {} outside (0, 1)", self.assoc_iou));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(format!("decay {} outside (0, 1]", self.decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedRegion {
    pub region_id: u64,
    pub class: ClassId,
    /// Last associated box.
    pub bbox: BBox,
    pub evidence: f64,
    pub frames_seen: u64,
    /// Consecutive frames without an associated detection.
    pub frames_missed: u32,
    pub born_at: f64,
    /// Most recent confidence last; at most `window` entries.
    history: VecDeque<f64>,
}

impl TrackedRegion {
    fn new(region_id: u64, class: ClassId, bbox: BBox, born_at: f64) -> Self {
        Self {
            region_id,
            class,
            bbox,
            evidence: 0.0,
            frames_seen: 0,
            frames_missed: 0,
            born_at,
            history: VecDeque::new(),
        }
    }

    /// Per-frame confidences inside the window, oldest first.
    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().copied()
    }
}

/// Pushes this frame's confidence (`None` = no detection) into the region's
/// window and recomputes its evidence.
pub fn smooth(region: &mut TrackedRegion, new_conf: Option<f64>, cfg: &TemporalConfig) -> f64 {
    region.history.push_back(new_conf.unwrap_or(0.0));
    while region.history.len() > cfg.window {
        region.history.pop_front();
    }
    region.evidence = windowed_evidence(&region.history, cfg);
    region.evidence
}

/// Average over a full window of `cfg.window` slots, the newest samples in
/// `history` and zeros for the rest.
pub fn windowed_evidence(history: &VecDeque<f64>, cfg: &TemporalConfig) -> f64 {
    let window = cfg.window;
    if history.is_empty() {
        return 0.0;
    }
    if cfg.decay < 1.0 {
        // weight d^age, age 0 = newest; empty slots are the oldest
        let mut num = 0.0;
        let mut den = 0.0;
        let mut w = 1.0;
        for age in 0..window {
            if let Some(c) = history.iter().rev().nth(age) {
                num += w * c;
            }
            den += w;
            w *= cfg.decay;
        }
        return num / den;
    }
    // Shift by the window minimum so a constant window averages back to
    // exactly that constant.
    let base = if history.len() < window {
        0.0
    } else {
        history.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let spread: f64 = history.iter().map(|c| c - base).sum();
    base + spread / window as f64
}

/// Lifecycle notices produced while associating a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RegionEvent {
    Spawned {
        region_id: u64,
        class: ClassId,
        t: f64,
    },
    Retired {
        region_id: u64,
        class: ClassId,
        t: f64,
        frames_seen: u64,
    },
}

/// Tracks regions of one stream. Frames must be fed in order.
#[derive(Debug, Clone)]
pub struct RegionTracker {
    cfg: TemporalConfig,
    regions: Vec<TrackedRegion>,
    next_id: u64,
}

impl RegionTracker {
    pub fn new(cfg: TemporalConfig) -> Self {
        Self {
            cfg,
            regions: Vec::new(),
            next_id: 0,
        }
    }

    pub fn config(&self) -> &TemporalConfig {
        &self.cfg
    }

    /// Live regions in creation order.
    pub fn regions(&self) -> &[TrackedRegion] {
        &self.regions
    }

    /// Highest evidence among live regions of `class`.
    pub fn max_evidence(&self, class: ClassId) -> f64 {
        self.regions
            .iter()
            .filter(|r| r.class == class)
            .map(|r| r.evidence)
            .fold(0.0, f64::max)
    }

    /// Associates a frame's detections with the live regions, updates every
    /// region's evidence and retires regions past the miss limit.
    pub fn update(&mut self, frame: &FrameDetections) -> Vec<RegionEvent> {
        let t = frame.timestamp_s;
        let dets = &frame.detections;

        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (ri, r) in self.regions.iter().enumerate() {
            for (di, d) in dets.iter().enumerate() {
                if d.class != r.class {
                    continue;
                }
                let v = iou(&r.bbox, &d.bbox);
                if v >= self.cfg.assoc_iou {
                    candidates.push((v, ri, di));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut region_hit: Vec<Option<usize>> = vec![None; self.regions.len()];
        let mut det_used = vec![false; dets.len()];
        for (_, ri, di) in candidates {
            if region_hit[ri].is_none() && !det_used[di] {
                region_hit[ri] = Some(di);
                det_used[di] = true;
            }
        }

        let mut events = Vec::new();
        for (r, hit) in self.regions.iter_mut().zip(&region_hit) {
            match hit {
                Some(di) => {
                    let d = &dets[*di];
                    r.bbox = d.bbox;
                    r.frames_seen += 1;
                    r.frames_missed = 0;
                    smooth(r, Some(d.confidence), &self.cfg);
                }
                None => {
                    r.frames_missed += 1;
                    smooth(r, None, &self.cfg);
                }
            }
        }
        let miss_limit = self.cfg.miss_limit;
        self.regions.retain(|r| {
            if r.frames_missed > miss_limit {
                events.push(RegionEvent::Retired {
                    region_id: r.region_id,
                    class: r.class,
                    t,
                    frames_seen: r.frames_seen,
                });
                false
            } else {
                true
            }
        });

        for (d, used) in dets.iter().zip(det_used) {
            if used {
                continue;
            }
            let mut r = TrackedRegion::new(self.next_id, d.class, d.bbox, t);
            self.next_id += 1;
            r.frames_seen = 1;
            smooth(&mut r, Some(d.confidence), &self.cfg);
            events.push(RegionEvent::Spawned {
                region_id: r.region_id,
                class: r.class,
                t,
            });
            self.regions.push(r);
        }
        events
    }
}

/// Functional form of [`RegionTracker::update`].
pub fn associate(
    regions: Vec<TrackedRegion>,
    next_id: u64,
    frame: &FrameDetections,
    cfg: &TemporalConfig,
) -> (Vec<TrackedRegion>, u64, Vec<RegionEvent>) {
    let mut tracker = RegionTracker {
        cfg: *cfg,
        regions,
        next_id,
    };
    let events = tracker.update(frame);
    (tracker.regions, tracker.next_id, events)
}

/// One line of the region trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTraceRecord {
    pub stream: String,
    pub frame: u64,
    pub region_id: u64,
    pub class: ClassId,
    pub evidence: f64,
}

pub fn write_region_trace<W: Write>(
    out: &mut W,
    stream: &str,
    frame: u64,
    regions: &[TrackedRegion],
) -> io::Result<()> {
    for r in regions {
        let rec = RegionTraceRecord {
            stream: stream.to_string(),
            frame,
            region_id: r.region_id,
            class: r.class,
            evidence: r.evidence,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Detection;
    use proptest::prelude::*;

    fn frame(i: u64, dets: Vec<Detection>) -> FrameDetections {
        FrameDetections {
            stream_id: "s".into(),
            frame_index: i,
            timestamp_s: i as f64,
            detections: dets,
        }
    }

    fn det(cx: f64, class: ClassId, conf: f64) -> Detection {
        Detection::new(BBox::new(cx, 0.5, 0.2, 0.2).unwrap(), class, conf).unwrap()
    }

    fn region() -> TrackedRegion {
        TrackedRegion::new(
            0,
            ClassId::Fire,
            BBox::new(0.5, 0.5, 0.1, 0.1).unwrap(),
            0.0,
        )
    }

    #[test]
    fn new_region_from_detection() {
        let mut tr = RegionTracker::new(TemporalConfig::default());
        let ev = tr.update(&frame(0, vec![det(0.5, ClassId::Fire, 0.8)]));
        assert_eq!(tr.regions().len(), 1);
        assert!(matches!(ev[0], RegionEvent::Spawned { region_id: 0, .. }));
    }

    #[test]
    fn stationary_box_is_one_region() {
        let mut tr = RegionTracker::new(TemporalConfig::default());
        for i in 0..3 {
            tr.update(&frame(i, vec![det(0.5, ClassId::Fire, 0.8)]));
        }
        assert_eq!(tr.regions().len(), 1);
        assert_eq!(tr.regions()[0].frames_seen, 3);
    }

    #[test]
    fn classes_never_merge() {
        let mut tr = RegionTracker::new(TemporalConfig::default());
        tr.update(&frame(0, vec![det(0.5, ClassId::Fire, 0.8)]));
        tr.update(&frame(1, vec![det(0.5, ClassId::Smoke, 0.8)]));
        let classes: Vec<_> = tr.regions().iter().map(|r| r.class).collect();
        assert_eq!(classes, vec![ClassId::Fire, ClassId::Smoke]);
        assert_eq!(tr.regions()[0].frames_missed, 1);
    }

    #[test]
    fn regions_retire_after_miss_limit() {
        let cfg = TemporalConfig {
            miss_limit: 2,
            ..Default::default()
        };
        let mut tr = RegionTracker::new(cfg);
        tr.update(&frame(0, vec![det(0.5, ClassId::Fire, 0.8)]));
        assert!(tr.update(&frame(1, vec![])).is_empty());
        assert!(tr.update(&frame(2, vec![])).is_empty());
        let ev = tr.update(&frame(3, vec![]));
        assert_eq!(
            ev,
            vec![RegionEvent::Retired {
                region_id: 0,
                class: ClassId::Fire,
                t: 3.0,
                frames_seen: 1
            }]
        );
        assert!(tr.regions().is_empty());
    }

    #[test]
    fn spike_then_absence() {
        let cfg = TemporalConfig::default();
        let mut r = region();
        assert_eq!(r.evidence, 0.0);
        assert_eq!(smooth(&mut r, Some(0.9), &cfg), 0.9 / 10.0);
        assert!((0.9f64 / 10.0 - 0.09).abs() < 1e-15);
        assert_eq!(smooth(&mut r, None, &cfg), 0.9 / 10.0);
    }

    #[test]
    fn constant_confidence_converges() {
        let cfg = TemporalConfig {
            window: 7,
            ..Default::default()
        };
        let mut r = region();
        for _ in 0..12 {
            smooth(&mut r, Some(0.3), &cfg);
        }
        assert_eq!(r.evidence, 0.3);
        assert_eq!(r.history().count(), 7);
    }

    #[test]
    fn decayed_average_weights_recent_frames() {
        let cfg = TemporalConfig {
            window: 3,
            decay: 0.5,
            ..Default::default()
        };
        let mut r = region();
        smooth(&mut r, Some(1.0), &cfg);
        // weights 1, 0.5, 0.25 over slots newest..oldest
        assert!((r.evidence - 1.0 / 1.75).abs() < 1e-15);
        smooth(&mut r, None, &cfg);
        assert!((r.evidence - 0.5 / 1.75).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TemporalConfig::default().validate().is_ok());
        assert!(TemporalConfig {
            window: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TemporalConfig {
            decay: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TemporalConfig {
            assoc_iou: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn trace_lines() {
        let mut tr = RegionTracker::new(TemporalConfig::default());
        tr.update(&frame(0, vec![det(0.5, ClassId::Fire, 0.5)]));
        let mut out = Vec::new();
        write_region_trace(&mut out, "s", 0, tr.regions()).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"stream\":\"s\",\"frame\":0,\"region_id\":0,\"class\":\"fire\",\"evidence\":0.05}\n"
        );
    }

    proptest! {
        #[test]
        fn evidence_within_window_bounds(confs in prop::collection::vec(prop::option::of(0.0..=1.0f64), 1..40), window in 1usize..15) {
            let cfg = TemporalConfig { window, ..Default::default() };
            let mut r = region();
            let mut all = Vec::new();
            for c in confs {
                smooth(&mut r, c, &cfg);
                all.push(c.unwrap_or(0.0));
                let mut slots: Vec<f64> = all.iter().rev().take(window).copied().collect();
                slots.resize(window, 0.0);
                let lo = slots.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = slots.iter().copied().fold(0.0, f64::max);
                prop_assert!(r.evidence >= lo - 1e-12 && r.evidence <= hi + 1e-12);
            }
        }

        #[test]
        fn present_k_of_window(k in 0usize..=20, window in 1usize..=20, c in 0.0..=1.0f64) {
            prop_assume!(k <= window);
            let cfg = TemporalConfig { window, ..Default::default() };
            let mut r = region();
            for i in 0..window {
                smooth(&mut r, (i < k).then_some(c), &cfg);
            }
            prop_assert!((r.evidence - k as f64 * c / window as f64).abs() < 1e-12);
        }

        #[test]
        fn replay_is_deterministic(xs in prop::collection::vec((0.1..0.9f64, 0.0..=1.0f64, prop::bool::ANY), 0..30)) {
            let frames: Vec<_> = xs.iter().enumerate().map(|(i, &(cx, c, smoke))| {
                let class = if smoke { ClassId::Smoke } else { ClassId::Fire };
                frame(i as u64, vec![det(cx, class, c)])
            }).collect();
            let run = || {
                let mut tr = RegionTracker::new(TemporalConfig::default());
                frames.iter().map(|f| {
                    tr.update(f);
                    tr.regions().iter().map(|r| (r.region_id, r.evidence.to_bits())).collect::<Vec<_>>()
                }).collect::<Vec<_>>()
            };
            prop_assert_eq!(run(), run());
        }
    }
}

//! Alarm state machine over region evidence, and the replay harness that
//! measures how much earlier the camera raises an alarm than reference
//! (ceiling) detectors.
//!
//! ```text
//!   IDLE --qualifying--> SUSPECT --hold_frames qualifying--> ALARM (latched)
//!     ^                     |
//!     +---non-qualifying----+
//! ```
//!
//! A frame qualifies when the strongest region of an enabled class has
//! evidence at or above the threshold. The detection time of an alarm is the
//! moment SUSPECT was entered, not the moment the hold completed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{postprocess, DetectionReader, DetectorConfig, FrameDetections, StreamError};
use crate::geometry::ClassId;
use crate::temporal::{RegionTracker, TemporalConfig, TrackedRegion};

#[derive(Debug, Error)]
pub enum AlarmError {
    #[error("time went backwards in stream {stream:?}: {got} after {previous}")]
    TimeRegression {
        stream: String,
        previous: f64,
        got: f64,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Scenario { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlarmConfig {
    pub evidence_threshold: f64,
    /// Consecutive qualifying frames needed to escalate SUSPECT to ALARM.
    pub hold_frames: u32,
    pub fire_enabled: bool,
    pub smoke_enabled: bool,
}

impl Default for AlarmConfig {
    fn default() -> Self {
        Self {
            evidence_threshold: 0.5,
            hold_frames: 3,
            fire_enabled: true,
            smoke_enabled: true,
        }
    }
}

impl AlarmConfig {
    pub fn validate(&self) -> Result<(), AlarmError> {
        if !(self.evidence_threshold > 0.0 && self.evidence_threshold < 1.0) {
            return Err(AlarmError::Config(format!(
                "evidence threshold {} outside (0, 1)",
                self.evidence_threshold
            )));
        }
        if self.hold_frames == 0 {
            return Err(AlarmError::Config("hold_frames must be at least 1".into()));
        }
        Ok(())
    }

    pub fn enabled(&self, class: ClassId) -> bool {
        match class {
            ClassId::Fire => self.fire_enabled,
            ClassId::Smoke => self.smoke_enabled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AlarmLevel {
    Idle,
    Suspect,
    Alarm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlarmState {
    pub level: AlarmLevel,
    /// When the current level was entered.
    pub since: f64,
    pub triggering_class: Option<ClassId>,
    qualifying_frames: u32,
    last_t: Option<f64>,
}

impl Default for AlarmState {
    fn default() -> Self {
        Self::idle(0.0)
    }
}

impl AlarmState {
    pub fn idle(since: f64) -> Self {
        Self {
            level: AlarmLevel::Idle,
            since,
            triggering_class: None,
            qualifying_frames: 0,
            last_t: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// IDLE -> SUSPECT
    Suspect,
    /// SUSPECT -> IDLE
    Clear,
    /// SUSPECT -> ALARM
    Alarm,
    /// ALARM -> IDLE, on explicit reset only
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmEvent {
    pub t: f64,
    pub stream: String,
    pub transition: Transition,
    pub class: Option<ClassId>,
    pub evidence: f64,
    /// For [`Transition::Alarm`]: when the evidence first qualified.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detection_time: Option<f64>,
}

/// Strongest evidence among enabled classes; fire wins ties.
fn strongest(regions: &[TrackedRegion], cfg: &AlarmConfig) -> Option<(ClassId, f64)> {
    let mut best: Option<(ClassId, f64)> = None;
    for r in regions.iter().filter(|r| cfg.enabled(r.class)) {
        let better = match best {
            None => true,
            Some((c, e)) => r.evidence > e || (r.evidence == e && r.class < c),
        };
        if better {
            best = Some((r.class, r.evidence));
        }
    }
    best
}

/// Advances the state machine by one frame.
pub fn step(
    state: &AlarmState,
    regions: &[TrackedRegion],
    t: f64,
    stream: &str,
    cfg: &AlarmConfig,
) -> Result<(AlarmState, Vec<AlarmEvent>), AlarmError> {
    if let Some(previous) = state.last_t {
        if t < previous {
            return Err(AlarmError::TimeRegression {
                stream: stream.to_string(),
                previous,
                got: t,
            });
        }
    }
    let mut next = *state;
    next.last_t = Some(t);
    let mut events = Vec::new();
    let top = strongest(regions, cfg);
    let evidence = top.map_or(0.0, |(_, e)| e);
    let qualifying = top.filter(|&(_, e)| e >= cfg.evidence_threshold);
    let event = |transition, class, detection_time| AlarmEvent {
        t,
        stream: stream.to_string(),
        transition,
        class,
        evidence,
        detection_time,
    };

    match (state.level, qualifying) {
        (AlarmLevel::Alarm, _) => {}
        (AlarmLevel::Idle, None) => {}
        (AlarmLevel::Idle, Some((class, _))) => {
            next.level = AlarmLevel::Suspect;
            next.since = t;
            next.triggering_class = Some(class);
            next.qualifying_frames = 1;
            events.push(event(Transition::Suspect, Some(class), None));
        }
        (AlarmLevel::Suspect, None) => {
            next = AlarmState {
                last_t: Some(t),
                ..AlarmState::idle(t)
            };
            events.push(event(Transition::Clear, state.triggering_class, None));
        }
        (AlarmLevel::Suspect, Some(_)) => {
            next.qualifying_frames += 1;
        }
    }
    if next.level == AlarmLevel::Suspect && next.qualifying_frames >= cfg.hold_frames {
        let detected_at = next.since;
        next.level = AlarmLevel::Alarm;
        next.since = t;
        events.push(event(
            Transition::Alarm,
            next.triggering_class,
            Some(detected_at),
        ));
    }
    Ok((next, events))
}

/// Leaves a latched ALARM. No effect in other states.
pub fn reset(state: &AlarmState, t: f64, stream: &str) -> (AlarmState, Option<AlarmEvent>) {
    if state.level != AlarmLevel::Alarm {
        return (*state, None);
    }
    let event = AlarmEvent {
        t,
        stream: stream.to_string(),
        transition: Transition::Reset,
        class: state.triggering_class,
        evidence: 0.0,
        detection_time: None,
    };
    (
        AlarmState {
            last_t: Some(t.max(state.last_t.unwrap_or(t))),
            ..AlarmState::idle(t)
        },
        Some(event),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceAlarm {
    pub label: String,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    pub label: String,
    /// Reference time minus camera detection time; `None` when the camera
    /// never alarmed. Negative when the camera was slower.
    pub gain_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmTimeline {
    pub camera_alarm_s: Option<f64>,
    pub reference_alarms: Vec<ReferenceAlarm>,
    pub gains: Vec<Gain>,
}

/// Compares the camera's first alarm with each reference detector.
pub fn benchmark_latency(
    camera_events: &[AlarmEvent],
    reference: &[ReferenceAlarm],
) -> AlarmTimeline {
    let camera_alarm_s = camera_events
        .iter()
        .filter(|e| e.transition == Transition::Alarm)
        .filter_map(|e| e.detection_time)
        .min_by(f64::total_cmp);
    let gains = reference
        .iter()
        .map(|r| Gain {
            label: r.label.clone(),
            gain_s: camera_alarm_s.map(|c| r.time_s - c),
        })
        .collect();
    AlarmTimeline {
        camera_alarm_s,
        reference_alarms: reference.to_vec(),
        gains,
    }
}

const NOT_DETECTED: &str = "not detected";

pub fn render_timeline(tl: &AlarmTimeline) -> String {
    let mut s = String::new();
    match tl.camera_alarm_s {
        Some(c) => {
            let _ = writeln!(s, "camera detection: {c:.3} s");
        }
        None => {
            let _ = writeln!(s, "camera detection: {NOT_DETECTED}");
        }
    }
    for (r, g) in tl.reference_alarms.iter().zip(&tl.gains) {
        let gain = g
            .gain_s
            .map(|v| format!("{v:.3} s"))
            .unwrap_or_else(|| NOT_DETECTED.to_string());
        let _ = writeln!(s, "{}: {:.3} s, gain: {}", r.label, r.time_s, gain);
    }
    s
}

/// Per-frame record of a replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLogRecord {
    pub stream: String,
    pub frame: u64,
    pub t: f64,
    /// False for frames absent from the input and filled in as empty.
    pub observed: bool,
    pub detections: usize,
    pub regions: usize,
    pub fire_evidence: f64,
    pub smoke_evidence: f64,
    pub level: AlarmLevel,
}

/// Tracker and alarm state of one stream.
#[derive(Debug, Clone)]
pub struct StreamPipeline {
    stream: String,
    tracker: RegionTracker,
    state: AlarmState,
    alarm_cfg: AlarmConfig,
    last_frame: Option<(u64, f64)>,
}

impl StreamPipeline {
    pub fn new(stream: impl Into<String>, temporal: TemporalConfig, alarm: AlarmConfig) -> Self {
        Self {
            stream: stream.into(),
            tracker: RegionTracker::new(temporal),
            state: AlarmState::default(),
            alarm_cfg: alarm,
            last_frame: None,
        }
    }

    pub fn state(&self) -> &AlarmState {
        &self.state
    }

    pub fn tracker(&self) -> &RegionTracker {
        &self.tracker
    }

    fn advance(
        &mut self,
        frame: &FrameDetections,
        observed: bool,
        log: &mut Vec<FrameLogRecord>,
    ) -> Result<Vec<AlarmEvent>, AlarmError> {
        self.tracker.update(frame);
        let (next, events) = step(
            &self.state,
            self.tracker.regions(),
            frame.timestamp_s,
            &self.stream,
            &self.alarm_cfg,
        )?;
        self.state = next;
        log.push(FrameLogRecord {
            stream: self.stream.clone(),
            frame: frame.frame_index,
            t: frame.timestamp_s,
            observed,
            detections: frame.detections.len(),
            regions: self.tracker.regions().len(),
            fire_evidence: self.tracker.max_evidence(ClassId::Fire),
            smoke_evidence: self.tracker.max_evidence(ClassId::Smoke),
            level: self.state.level,
        });
        Ok(events)
    }

    /// Feeds one postprocessed frame. Skipped frame indices since the last
    /// call are replayed first as empty frames, with timestamps interpolated
    /// between the neighbouring frames.
    pub fn push(
        &mut self,
        frame: &FrameDetections,
        log: &mut Vec<FrameLogRecord>,
    ) -> Result<Vec<AlarmEvent>, AlarmError> {
        let mut events = Vec::new();
        if let Some((prev_i, prev_t)) = self.last_frame {
            if frame.timestamp_s < prev_t {
                return Err(AlarmError::TimeRegression {
                    stream: self.stream.clone(),
                    previous: prev_t,
                    got: frame.timestamp_s,
                });
            }
            let gap = frame.frame_index.saturating_sub(prev_i);
            for k in 1..gap {
                let t = prev_t + (frame.timestamp_s - prev_t) * k as f64 / gap as f64;
                let filler = FrameDetections::empty(self.stream.clone(), prev_i + k, t);
                events.extend(self.advance(&filler, false, log)?);
            }
        }
        self.last_frame = Some((frame.frame_index, frame.timestamp_s));
        events.extend(self.advance(frame, true, log)?);
        Ok(events)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutput {
    pub timeline: AlarmTimeline,
    pub events: Vec<AlarmEvent>,
    pub frames: Vec<FrameLogRecord>,
}

/// Runs detect (filter + NMS), temporal and alarm stages over a detection
/// stream, one pipeline per stream id.
pub fn replay<R: BufRead>(
    input: R,
    detector: &DetectorConfig,
    temporal: &TemporalConfig,
    alarm: &AlarmConfig,
    reference: &[ReferenceAlarm],
) -> Result<ReplayOutput, AlarmError> {
    detector.validate().map_err(AlarmError::Config)?;
    temporal.validate().map_err(AlarmError::Config)?;
    alarm.validate()?;
    let mut pipelines: BTreeMap<String, StreamPipeline> = BTreeMap::new();
    let mut events = Vec::new();
    let mut frames = Vec::new();
    for raw in DetectionReader::new(input) {
        let frame = postprocess(&raw?, detector);
        let pipeline = pipelines
            .entry(frame.stream_id.clone())
            .or_insert_with(|| StreamPipeline::new(frame.stream_id.clone(), *temporal, *alarm));
        events.extend(pipeline.push(&frame, &mut frames)?);
    }
    Ok(ReplayOutput {
        timeline: benchmark_latency(&events, reference),
        events,
        frames,
    })
}

pub fn write_event_log<W: Write>(out: &mut W, events: &[AlarmEvent]) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_frame_log<W: Write>(out: &mut W, frames: &[FrameLogRecord]) -> io::Result<()> {
    for f in frames {
        serde_json::to_writer(&mut *out, f)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// A replay scenario: a detection stream, reference alarm times and
/// optional config overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Detection stream, relative to the scenario file.
    pub source: PathBuf,
    #[serde(default)]
    pub reference: Vec<ReferenceAlarm>,
    #[serde(default)]
    pub detector: Option<DetectorConfig>,
    #[serde(default)]
    pub temporal: Option<TemporalConfig>,
    #[serde(default)]
    pub alarm: Option<AlarmConfig>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<(Scenario, PathBuf), AlarmError> {
        let text = std::fs::read_to_string(path).map_err(|source| AlarmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let scenario: Scenario = toml::from_str(&text).map_err(|e| AlarmError::Scenario {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let source = base.join(&scenario.source);
        Ok((scenario, source))
    }
}

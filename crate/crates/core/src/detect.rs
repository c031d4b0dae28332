//! The detector boundary.
//!
//! Detections enter the pipeline either from the line-delimited interchange
//! format (replayed files, or a live backend writing the same records to a
//! byte stream) or from an in-process [`Detector`]. In the latter case the
//! frame's pixels are held by a [`RetentionGuard`] and wiped as soon as the
//! detector returns; only [`FrameDetections`] travel further.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroize;

use crate::geometry::{nms, BBox, ClassId, Detection, DEFAULT_NMS_IOU};

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.25;
pub const DEFAULT_INPUT_RESOLUTION: (u32, u32) = (576, 576);

/// Detections of one frame. Carries no pixel data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub stream_id: String,
    pub frame_index: u64,
    pub timestamp_s: f64,
    pub detections: Vec<Detection>,
}

impl FrameDetections {
    pub fn empty(stream_id: impl Into<String>, frame_index: u64, timestamp_s: f64) -> Self {
        Self {
            stream_id: stream_id.into(),
            frame_index,
            timestamp_s,
            detections: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub confidence_threshold: f64,
    pub nms_iou: f64,
    pub input_resolution: (u32, u32),
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            input_resolution: DEFAULT_INPUT_RESOLUTION,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(format!(
                "confidence threshold {} outside [0, 1]",
                self.confidence_threshold
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(format!("NMS IoU {} outside (0, 1)", self.nms_iou));
        }
        if self.input_resolution.0 == 0 || self.input_resolution.1 == 0 {
            return Err("input resolution must be positive".to_string());
        }
        Ok(())
    }
}

/// Drops detections below the confidence threshold, then applies
/// class-aware NMS.
pub fn postprocess(raw: &FrameDetections, cfg: &DetectorConfig) -> FrameDetections {
    let kept: Vec<Detection> = raw
        .detections
        .iter()
        .filter(|d| d.confidence >= cfg.confidence_threshold)
        .copied()
        .collect();
    FrameDetections {
        detections: nms(&kept, cfg.nms_iou),
        ..raw.clone()
    }
}

// ---------------------------------------------------------------------------
// Interchange format

/// One line of the interchange format. Field order is part of the format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    stream: String,
    frame: u64,
    t: f64,
    class: Option<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conf: Option<f64>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
}

#[derive(Debug, Error)]
pub enum StreamErrorKind {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("frame index {got} does not follow {previous} in stream {stream:?}")]
    FrameOrder {
        stream: String,
        previous: u64,
        got: u64,
    },
    #[error("timestamp {got} precedes {previous} in stream {stream:?}")]
    TimeOrder {
        stream: String,
        previous: f64,
        got: f64,
    },
    #[error("records of one frame disagree on timestamp ({0} vs {1})")]
    FrameTime(f64, f64),
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("invalid box: {0}")]
    Box(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
#[error("line {line}{}: {kind}", frame.map(|f| format!(" (frame {f})")).unwrap_or_default())]
pub struct StreamError {
    pub line: usize,
    pub frame: Option<u64>,
    pub kind: StreamErrorKind,
}

/// Reads the interchange format and yields one [`FrameDetections`] per
/// frame, in file order.
///
/// Consecutive records with the same stream and frame index form one frame.
/// A record with `"class": null` yields a frame without detections.
pub struct DetectionReader<R> {
    input: R,
    line: usize,
    buf: String,
    pending: Option<FrameDetections>,
    last: HashMap<String, (u64, f64)>,
    failed: bool,
}

impl<R: BufRead> DetectionReader<R> {
    pub fn new(input: R) -> Self {
        Self {
            input,
            line: 0,
            buf: String::new(),
            pending: None,
            last: HashMap::new(),
            failed: false,
        }
    }

    fn err(&self, frame: Option<u64>, kind: StreamErrorKind) -> StreamError {
        StreamError {
            line: self.line,
            frame,
            kind,
        }
    }

    fn next_record(&mut self) -> Result<Option<Record>, StreamError> {
        loop {
            self.buf.clear();
            let n = self
                .input
                .read_line(&mut self.buf)
                .map_err(|e| self.err(None, e.into()))?;
            if n == 0 {
                return Ok(None);
            }
            self.line += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            return serde_json::from_str(text)
                .map(Some)
                .map_err(|e| self.err(None, StreamErrorKind::Schema(e.to_string())));
        }
    }

    fn detection(&self, r: &Record) -> Result<Option<Detection>, StreamError> {
        let at = Some(r.frame);
        let Some(class) = r.class else {
            if r.bbox.is_some() || r.conf.is_some() {
                return Err(self.err(
                    at,
                    StreamErrorKind::Schema(
                        "record without class carries a box or confidence".into(),
                    ),
                ));
            }
            return Ok(None);
        };
        let conf = r
            .conf
            .ok_or_else(|| self.err(at, StreamErrorKind::Schema("missing field `conf`".into())))?;
        if !(0.0..=1.0).contains(&conf) {
            return Err(self.err(at, StreamErrorKind::Confidence(conf)));
        }
        let v = r
            .bbox
            .ok_or_else(|| self.err(at, StreamErrorKind::Schema("missing field `box`".into())))?;
        let bbox =
            BBox::try_from(v).map_err(|e| self.err(at, StreamErrorKind::Box(e.to_string())))?;
        Ok(Some(Detection {
            bbox,
            class,
            confidence: conf,
        }))
    }

    fn check_order(&mut self, r: &Record) -> Result<(), StreamError> {
        let at = Some(r.frame);
        if !(r.t >= 0.0 && r.t.is_finite()) {
            return Err(self.err(
                at,
                StreamErrorKind::Schema(format!("invalid timestamp {}", r.t)),
            ));
        }
        if let Some(&(prev_frame, prev_t)) = self.last.get(&r.stream) {
            if r.frame <= prev_frame {
                return Err(self.err(
                    at,
                    StreamErrorKind::FrameOrder {
                        stream: r.stream.clone(),
                        previous: prev_frame,
                        got: r.frame,
                    },
                ));
            }
            if r.t < prev_t {
                return Err(self.err(
                    at,
                    StreamErrorKind::TimeOrder {
                        stream: r.stream.clone(),
                        previous: prev_t,
                        got: r.t,
                    },
                ));
            }
        }
        self.last.insert(r.stream.clone(), (r.frame, r.t));
        Ok(())
    }

    fn step(&mut self) -> Result<Option<FrameDetections>, StreamError> {
        loop {
            let Some(record) = self.next_record()? else {
                return Ok(self.pending.take());
            };
            let det = self.detection(&record)?;
            if let Some(p) = self.pending.as_mut() {
                if p.stream_id == record.stream && p.frame_index == record.frame {
                    if p.timestamp_s != record.t {
                        let kind = StreamErrorKind::FrameTime(p.timestamp_s, record.t);
                        return Err(self.err(Some(record.frame), kind));
                    }
                    p.detections.extend(det);
                    continue;
                }
            }
            self.check_order(&record)?;
            let mut frame = FrameDetections::empty(record.stream, record.frame, record.t);
            frame.detections.extend(det);
            if let Some(done) = self.pending.replace(frame) {
                return Ok(Some(done));
            }
        }
    }
}

impl<R: BufRead> Iterator for DetectionReader<R> {
    type Item = Result<FrameDetections, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.step() {
            Ok(Some(f)) => Some(Ok(f)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Loads a whole interchange stream, stopping at the first error.
pub fn load_detection_stream<R: BufRead>(input: R) -> Result<Vec<FrameDetections>, StreamError> {
    DetectionReader::new(input).collect()
}

/// Writes one frame in the interchange format. Frames without detections
/// are written as a single `"class": null` record.
pub fn write_frame<W: Write>(out: &mut W, frame: &FrameDetections) -> io::Result<()> {
    let mut emit = |r: &Record| -> io::Result<()> {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")
    };
    if frame.detections.is_empty() {
        return emit(&Record {
            stream: frame.stream_id.clone(),
            frame: frame.frame_index,
            t: frame.timestamp_s,
            class: None,
            conf: None,
            bbox: None,
        });
    }
    for d in &frame.detections {
        emit(&Record {
            stream: frame.stream_id.clone(),
            frame: frame.frame_index,
            t: frame.timestamp_s,
            class: Some(d.class),
            conf: Some(d.confidence),
            bbox: Some(d.bbox.into()),
        })?;
    }
    Ok(())
}

pub fn write_detection_stream<W: Write>(out: &mut W, frames: &[FrameDetections]) -> io::Result<()> {
    for f in frames {
        write_frame(out, f)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Frame retention

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetentionError {
    #[error("stream {stream:?} already retains {in_flight} frame(s); window is {window}")]
    WindowExceeded {
        stream: String,
        in_flight: usize,
        window: usize,
    },
    #[error("frame pixels were disposed")]
    Disposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetentionConfig {
    /// Maximum frames a stream may hold at once.
    pub window: usize,
    /// Refuse admissions beyond the window instead of only recording them.
    pub strict: bool,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            window: 1,
            strict: true,
        }
    }
}

#[derive(Debug, Default)]
struct RetentionState {
    in_flight: BTreeMap<String, usize>,
    high_water: usize,
    admitted: u64,
    disposed: u64,
}

/// Audits how many frame payloads are alive at any moment.
#[derive(Debug, Clone)]
pub struct RetentionGuard {
    cfg: RetentionConfig,
    state: Arc<Mutex<RetentionState>>,
}

/// Receipt for a wiped frame payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisposalAck {
    pub stream_id: String,
    pub bytes_zeroed: usize,
    pub in_flight_after: usize,
}

impl RetentionGuard {
    pub fn new(cfg: RetentionConfig) -> Self {
        Self {
            cfg,
            state: Arc::default(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, RetentionState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn admit(&self, stream_id: &str, pixels: Vec<u8>) -> Result<RetainedFrame, RetentionError> {
        let mut st = self.lock();
        let in_flight = st.in_flight.get(stream_id).copied().unwrap_or(0);
        if self.cfg.strict && in_flight >= self.cfg.window {
            let mut pixels = pixels;
            pixels.zeroize();
            return Err(RetentionError::WindowExceeded {
                stream: stream_id.to_string(),
                in_flight,
                window: self.cfg.window,
            });
        }
        st.in_flight.insert(stream_id.to_string(), in_flight + 1);
        st.high_water = st.high_water.max(in_flight + 1);
        st.admitted += 1;
        Ok(RetainedFrame {
            stream_id: stream_id.to_string(),
            pixels: Some(pixels),
            guard: self.clone(),
        })
    }

    /// Most frames any single stream has held at once.
    pub fn high_water_mark(&self) -> usize {
        self.lock().high_water
    }

    pub fn in_flight(&self, stream_id: &str) -> usize {
        self.lock().in_flight.get(stream_id).copied().unwrap_or(0)
    }

    pub fn admitted(&self) -> u64 {
        self.lock().admitted
    }

    pub fn disposed(&self) -> u64 {
        self.lock().disposed
    }

    fn release(&self, stream_id: &str) -> usize {
        let mut st = self.lock();
        st.disposed += 1;
        let n = st.in_flight.entry(stream_id.to_string()).or_insert(1);
        *n -= 1;
        *n
    }
}

/// Pixel payload of an admitted frame. The buffer is zeroed and freed by
/// [`RetainedFrame::dispose`], or on drop at the latest.
#[derive(Debug)]
pub struct RetainedFrame {
    stream_id: String,
    pixels: Option<Vec<u8>>,
    guard: RetentionGuard,
}

impl RetainedFrame {
    pub fn pixels(&self) -> Result<&[u8], RetentionError> {
        self.pixels.as_deref().ok_or(RetentionError::Disposed)
    }

    pub fn is_disposed(&self) -> bool {
        self.pixels.is_none()
    }

    pub fn dispose(&mut self) -> Result<DisposalAck, RetentionError> {
        let mut pixels = self.pixels.take().ok_or(RetentionError::Disposed)?;
        let bytes_zeroed = pixels.len();
        pixels.zeroize();
        drop(pixels);
        let in_flight_after = self.guard.release(&self.stream_id);
        Ok(DisposalAck {
            stream_id: self.stream_id.clone(),
            bytes_zeroed,
            in_flight_after,
        })
    }
}

impl Drop for RetainedFrame {
    fn drop(&mut self) {
        if self.pixels.is_some() {
            let _ = self.dispose();
        }
    }
}

/// A raw frame handed to the detection stage.
#[derive(Debug)]
pub struct FrameInput {
    pub stream_id: String,
    pub frame_index: u64,
    pub timestamp_s: f64,
    pub pixels: Vec<u8>,
}

/// Frame identity passed to a detector alongside the pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMeta {
    pub stream_id: String,
    pub frame_index: u64,
    pub timestamp_s: f64,
}

/// An in-process detection backend.
pub trait Detector {
    fn detect(&mut self, meta: &FrameMeta, pixels: &[u8]) -> Vec<Detection>;
}

impl<F> Detector for F
where
    F: FnMut(&FrameMeta, &[u8]) -> Vec<Detection>,
{
    fn detect(&mut self, meta: &FrameMeta, pixels: &[u8]) -> Vec<Detection> {
        self(meta, pixels)
    }
}

/// Replays precomputed detections keyed by `(stream, frame)`, ignoring the
/// pixels. Frames with no entry produce no detections.
#[derive(Debug, Clone, Default)]
pub struct ScriptedDetector {
    script: HashMap<(String, u64), Vec<Detection>>,
}

impl ScriptedDetector {
    pub fn new(frames: &[FrameDetections]) -> Self {
        let script = frames
            .iter()
            .map(|f| ((f.stream_id.clone(), f.frame_index), f.detections.clone()))
            .collect();
        Self { script }
    }
}

impl Detector for ScriptedDetector {
    fn detect(&mut self, meta: &FrameMeta, _pixels: &[u8]) -> Vec<Detection> {
        self.script
            .get(&(meta.stream_id.clone(), meta.frame_index))
            .cloned()
            .unwrap_or_default()
    }
}

/// Runs a detector under the retention contract: admit the frame, detect,
/// wipe the pixels, then filter and suppress.
pub struct DetectionStage<D> {
    detector: D,
    cfg: DetectorConfig,
    guard: RetentionGuard,
}

impl<D: Detector> DetectionStage<D> {
    pub fn new(detector: D, cfg: DetectorConfig, guard: RetentionGuard) -> Self {
        Self {
            detector,
            cfg,
            guard,
        }
    }

    pub fn guard(&self) -> &RetentionGuard {
        &self.guard
    }

    pub fn process(
        &mut self,
        input: FrameInput,
    ) -> Result<(FrameDetections, DisposalAck), RetentionError> {
        let meta = FrameMeta {
            stream_id: input.stream_id,
            frame_index: input.frame_index,
            timestamp_s: input.timestamp_s,
        };
        let mut frame = self.guard.admit(&meta.stream_id, input.pixels)?;
        let detections = self.detector.detect(&meta, frame.pixels()?);
        let ack = frame.dispose()?;
        let raw = FrameDetections {
            stream_id: meta.stream_id,
            frame_index: meta.frame_index,
            timestamp_s: meta.timestamp_s,
            detections,
        };
        Ok((postprocess(&raw, &self.cfg), ack))
    }
}

//! Per-frame processing and the sensor, perception and LED nodes.
//!
//! Topics:
//!
//! | topic              | payload                                                    |
//! |--------------------|------------------------------------------------------------|
//! | `/camera/frame`    | encoded [`FrameBundle`]; an empty payload ends the stream  |
//! | `/led/status`      | one byte, `0x00` (off) or `0x01` (on), every frame         |
//! | `/telemetry`       | one JSON [`ProcessReport`] per frame                       |
//! | `/graph/ready/<r>` | empty, retained; role `r` has subscribed                   |
//! | `/graph/shutdown`  | empty; every role exits                                    |
//!
//! A frame bundle stands in for the raw `/camera/rgb/image_raw` and
//! `/camera/depth/image_raw` streams plus detector output.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::bus::{BusError, Envelope, RecvError, Subscription, TopicQos, Transport};
use crate::geometry::{assign_lane, detect_lanes, BoundingBox, GeometryError, GrayImage, LaneAssignment, LaneParams, LaneSet};
use crate::ranging::{
    estimate_distance, lane_is_monitored, track_target, DepthImage, RangingError, SpeedOutcome, SpeedTracker,
    TargetCandidate, TrackerParams,
};
use crate::safety::{should_warn, SafetyError, SsdParams, WarningConfig, WarningDecision, WarningMode};
use crate::sim::{GroundTruth, RecordingWriter, Scenario, SimError};

pub const FRAME_TOPIC: &str = "/camera/frame";
pub const LED_TOPIC: &str = "/led/status";
pub const TELEMETRY_TOPIC: &str = "/telemetry";
pub const SHUTDOWN_TOPIC: &str = "/graph/shutdown";
pub const READY_TOPIC_PREFIX: &str = "/graph/ready/";
pub const RGB_TOPIC: &str = "/camera/rgb/image_raw";
pub const DEPTH_TOPIC: &str = "/camera/depth/image_raw";

const FRAME_MAGIC: &[u8; 4] = b"TMF1";
const POLL_INTERVAL: Duration = Duration::from_millis(20);

pub fn ready_topic(role: &str) -> String {
    format!("{READY_TOPIC_PREFIX}{role}")
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame truncated in {0}")]
    Truncated(&'static str),
    #[error("not a frame payload (bad magic)")]
    BadMagic,
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("frame header: {0}")]
    Header(String),
    #[error("lane mask: {0}")]
    Mask(GeometryError),
    #[error("depth image: {0}")]
    Depth(RangingError),
    #[error("mask is {mask:?} but depth is {depth:?}")]
    DimensionMismatch { mask: (usize, usize), depth: (usize, usize) },
    #[error("detection {index} box {bbox:?} is outside the image")]
    DetectionOutOfBounds { index: usize, bbox: BoundingBox },
    #[error("detection {index} confidence {confidence} is outside 0..=1")]
    BadConfidence { index: usize, confidence: f64 },
    #[error("depth unit must be positive, got {0}")]
    BadDepthUnit(f64),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid pipeline field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("telemetry record: {0}")]
    Telemetry(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub label: String,
    pub confidence: f64,
}

/// One synchronized sensor frame with detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub seq: u64,
    pub timestamp_ns: u64,
    /// Resolution of the encoded depth image.
    pub depth_unit_m: f64,
    pub lane_mask: GrayImage,
    pub depth: DepthImage,
    pub detections: Vec<Detection>,
}

impl FrameBundle {
    pub fn validate(&self) -> Result<(), FrameError> {
        if !(self.depth_unit_m.is_finite() && self.depth_unit_m > 0.0) {
            return Err(FrameError::BadDepthUnit(self.depth_unit_m));
        }
        let mask = (self.lane_mask.width(), self.lane_mask.height());
        let depth = (self.depth.width(), self.depth.height());
        if mask != depth {
            return Err(FrameError::DimensionMismatch { mask, depth });
        }
        for (index, d) in self.detections.iter().enumerate() {
            if !d.bbox.fits_within(depth.0, depth.1) {
                return Err(FrameError::DetectionOutOfBounds { index, bbox: d.bbox });
            }
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(FrameError::BadConfidence {
                    index,
                    confidence: d.confidence,
                });
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct FrameHeader {
    seq: u64,
    timestamp_ns: u64,
    depth_unit_m: f64,
    detections: Vec<Detection>,
}

/// Serializes a frame as `"TMF1"`, then three `u32` BE length-prefixed
/// sections: JSON header, lane mask PGM, depth PGM.
pub fn encode_frame(f: &FrameBundle) -> Result<Vec<u8>, FrameError> {
    f.validate()?;
    let header = serde_json::to_vec(&FrameHeader {
        seq: f.seq,
        timestamp_ns: f.timestamp_ns,
        depth_unit_m: f.depth_unit_m,
        detections: f.detections.clone(),
    })
    .map_err(|e| FrameError::Header(e.to_string()))?;
    let mask = f.lane_mask.to_pgm();
    let depth = f.depth.to_pgm(f.depth_unit_m).map_err(FrameError::Depth)?;
    let mut out = Vec::with_capacity(16 + header.len() + mask.len() + depth.len());
    out.extend_from_slice(FRAME_MAGIC);
    for section in [&header, &mask, &depth] {
        out.extend_from_slice(&(section.len() as u32).to_be_bytes());
        out.extend_from_slice(section);
    }
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<FrameBundle, FrameError> {
    let rest = bytes.strip_prefix(FRAME_MAGIC).ok_or(if bytes.len() < 4 {
        FrameError::Truncated("magic")
    } else {
        FrameError::BadMagic
    })?;
    let (header, rest) = section(rest, "header")?;
    let (mask, rest) = section(rest, "mask")?;
    let (depth, rest) = section(rest, "depth")?;
    if !rest.is_empty() {
        return Err(FrameError::Trailing(rest.len()));
    }
    let h: FrameHeader = serde_json::from_slice(header).map_err(|e| FrameError::Header(e.to_string()))?;
    if !(h.depth_unit_m.is_finite() && h.depth_unit_m > 0.0) {
        return Err(FrameError::BadDepthUnit(h.depth_unit_m));
    }
    let f = FrameBundle {
        seq: h.seq,
        timestamp_ns: h.timestamp_ns,
        depth_unit_m: h.depth_unit_m,
        lane_mask: GrayImage::from_pgm(mask).map_err(FrameError::Mask)?,
        depth: DepthImage::from_pgm(depth, h.depth_unit_m).map_err(FrameError::Depth)?,
        detections: h.detections,
    };
    f.validate()?;
    Ok(f)
}

fn section<'a>(b: &'a [u8], what: &'static str) -> Result<(&'a [u8], &'a [u8]), FrameError> {
    if b.len() < 4 {
        return Err(FrameError::Truncated(what));
    }
    let n = u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize;
    let b = &b[4..];
    if b.len() < n {
        return Err(FrameError::Truncated(what));
    }
    Ok(b.split_at(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mode: WarningMode,
    /// The follower's own lane; vehicles elsewhere are not ranged.
    pub monitored_lane: LaneAssignment,
    pub sim_threshold_m: f64,
    pub ssd: SsdParams,
    pub lanes: LaneParams,
    pub tracker: TrackerParams,
    /// Consecutive warning frames required before the LED turns on.
    pub debounce_frames: u32,
    /// Record wall-clock processing time in reports (makes telemetry
    /// nondeterministic).
    pub measure_latency: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let w = WarningConfig::default();
        Self {
            mode: WarningMode::SimProximity,
            monitored_lane: LaneAssignment::Left,
            sim_threshold_m: w.sim_threshold_m,
            ssd: w.ssd,
            lanes: LaneParams::default(),
            tracker: TrackerParams::default(),
            debounce_frames: 1,
            measure_latency: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |field, reason: &str| {
            Err(PipelineError::InvalidConfig {
                field,
                reason: reason.to_owned(),
            })
        };
        if !matches!(self.monitored_lane, LaneAssignment::Left | LaneAssignment::Right) {
            return bad("monitored_lane", "must be left or right");
        }
        if !(self.sim_threshold_m.is_finite() && self.sim_threshold_m > 0.0) {
            return bad("sim_threshold_m", "must be finite and positive");
        }
        self.ssd.validate()?;
        if self.lanes.median_kernel.is_multiple_of(2) {
            return bad("lanes.median_kernel", "must be odd");
        }
        if self.lanes.min_area == 0 {
            return bad("lanes.min_area", "must be at least 1");
        }
        if self.tracker.baseline_frames == 0 {
            return bad("tracker.baseline_frames", "must be at least 1");
        }
        if !(self.tracker.max_plausible_speed_mps.is_finite() && self.tracker.max_plausible_speed_mps > 0.0) {
            return bad("tracker.max_plausible_speed_mps", "must be finite and positive");
        }
        if self.debounce_frames == 0 {
            return bad("debounce_frames", "must be at least 1");
        }
        Ok(())
    }

    pub fn warning(&self) -> WarningConfig {
        WarningConfig {
            sim_threshold_m: self.sim_threshold_m,
            ssd: self.ssd,
        }
    }
}

#[derive(Debug, Clone)]
struct LaneCache {
    mask: GrayImage,
    params: LaneParams,
    lanes: Option<LaneSet>,
}

/// State carried between frames by the perception loop.
#[derive(Debug, Clone, Default)]
pub struct PipelineState {
    pub tracker: SpeedTracker,
    pub warn_streak: u32,
    lane_cache: Option<LaneCache>,
}

impl PipelineState {
    pub fn new() -> Self {
        Self::default()
    }

    // A static camera sees the same mask frame after frame.
    fn lanes_for(&mut self, mask: &GrayImage, params: &LaneParams) -> Result<Option<LaneSet>, GeometryError> {
        if let Some(c) = &self.lane_cache {
            if c.params == *params && c.mask == *mask {
                return Ok(c.lanes);
            }
        }
        let lanes = detect_lanes(mask, params)?;
        self.lane_cache = Some(LaneCache {
            mask: mask.clone(),
            params: *params,
            lanes,
        });
        Ok(lanes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessReport {
    pub seq: u64,
    pub timestamp_ns: u64,
    pub lanes_found: bool,
    /// Lane of each detection, in detection order.
    pub lanes: Vec<LaneAssignment>,
    pub range_samples: usize,
    /// Index of the tracked detection.
    pub target: Option<usize>,
    pub distance_m: Option<f64>,
    pub speed_mps: Option<f64>,
    /// Why the speed chain restarted on this frame.
    pub speed_reset: Option<String>,
    /// Present iff the warning rule was evaluated this frame.
    pub decision: Option<WarningDecision>,
    /// Published LED state after debouncing.
    pub warn: bool,
    pub processing_latency_ns: u64,
}

pub const TELEMETRY_CSV_HEADER: &str = "seq,timestamp_ns,lanes_found,lanes,range_samples,target,distance_m,speed_mps,evaluated,raw_warn,threshold_m,warn,processing_latency_ns";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl ProcessReport {
    pub fn csv_row(&self) -> String {
        let lanes: Vec<&str> = self.lanes.iter().map(|l| l.as_str()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seq,
            self.timestamp_ns,
            self.lanes_found,
            lanes.join(";"),
            self.range_samples,
            opt(self.target),
            opt(self.distance_m),
            opt(self.speed_mps),
            self.decision.is_some(),
            self.decision.as_ref().is_some_and(|d| d.warn),
            opt(self.decision.as_ref().map(|d| d.threshold_m)),
            self.warn,
            self.processing_latency_ns
        )
    }
}

pub fn telemetry_csv(reports: &[ProcessReport]) -> String {
    let mut s = String::from(TELEMETRY_CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Runs one frame through lanes → assignment → target → range → speed →
/// warning. Pure in `(frame, state, config)`.
pub fn process_frame(
    frame: &FrameBundle,
    mut state: PipelineState,
    config: &PipelineConfig,
) -> Result<(ProcessReport, PipelineState), PipelineError> {
    let lanes = state.lanes_for(&frame.lane_mask, &config.lanes)?;
    let candidates: Vec<TargetCandidate> = frame
        .detections
        .iter()
        .map(|d| {
            let lane = lanes.as_ref().map_or(LaneAssignment::Unknown, |l| assign_lane(&d.bbox, l));
            let range = lane_is_monitored(lane, config.monitored_lane)
                .then(|| estimate_distance(&frame.depth, &d.bbox, frame.timestamp_ns).ok())
                .flatten();
            TargetCandidate { lane, range }
        })
        .collect();
    let target = track_target(&candidates, config.monitored_lane);
    let sample = target.and_then(|i| candidates[i].range);

    let (mut speed, mut speed_reset) = (None, None);
    if let Some(s) = sample {
        match state.tracker.observe(s, &config.tracker) {
            SpeedOutcome::Estimate(e) => speed = Some(e.speed_mps),
            SpeedOutcome::Warmup => {}
            SpeedOutcome::Reset(e) => speed_reset = Some(e.to_string()),
        }
    }

    let decision = match (sample, config.mode) {
        (Some(s), WarningMode::SimProximity) => Some(should_warn(
            s.distance_m,
            speed.unwrap_or(0.0),
            config.mode,
            &config.warning(),
        )?),
        (Some(s), mode) => speed
            .map(|v| should_warn(s.distance_m, v, mode, &config.warning()))
            .transpose()?,
        (None, _) => None,
    };
    if decision.as_ref().is_some_and(|d| d.warn) {
        state.warn_streak = state.warn_streak.saturating_add(1);
    } else {
        state.warn_streak = 0;
    }

    let report = ProcessReport {
        seq: frame.seq,
        timestamp_ns: frame.timestamp_ns,
        lanes_found: lanes.is_some(),
        lanes: candidates.iter().map(|c| c.lane).collect(),
        range_samples: candidates.iter().filter(|c| c.range.is_some()).count(),
        target,
        distance_m: sample.map(|s| s.distance_m),
        speed_mps: speed,
        speed_reset,
        warn: state.warn_streak >= config.debounce_frames,
        decision,
        processing_latency_ns: 0,
    };
    Ok((report, state))
}

pub fn encode_led(on: bool) -> [u8; 1] {
    [on as u8]
}

pub fn decode_led(payload: &[u8]) -> Option<bool> {
    match payload {
        [0] => Some(false),
        [1] => Some(true),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedState {
    pub on: bool,
    /// Seq of the status message that set the current state.
    pub since_seq: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedTransition {
    pub seq: u64,
    pub timestamp_ns: u64,
    pub on: bool,
}

impl LedState {
    /// Folds one `/led/status` envelope into the state. Malformed payloads are
    /// ignored and reported as `Err`.
    pub fn apply(&mut self, env: &Envelope) -> Result<Option<LedTransition>, usize> {
        let on = decode_led(&env.payload).ok_or(env.payload.len())?;
        if self.since_seq.is_some() && self.on == on {
            return Ok(None);
        }
        let changed = self.on != on;
        self.on = on;
        self.since_seq = Some(env.seq);
        Ok(changed.then_some(LedTransition {
            seq: env.seq,
            timestamp_ns: env.timestamp_ns,
            on,
        }))
    }
}

/// Consumer of `/led/status`.
#[derive(Debug)]
pub struct LedNode {
    status: Subscription,
    shutdown: Subscription,
    state: LedState,
    transitions: Vec<LedTransition>,
    history: Vec<(u64, bool)>,
}

impl LedNode {
    pub fn new(transport: &dyn Transport, qos: TopicQos) -> Result<Self, PipelineError> {
        let status = transport.subscribe(LED_TOPIC, qos)?;
        let shutdown = transport.subscribe(SHUTDOWN_TOPIC, TopicQos::Lossless)?;
        transport.publish(&ready_topic("led"), &[], 0)?;
        Ok(Self {
            status,
            shutdown,
            state: LedState::default(),
            transitions: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn state(&self) -> LedState {
        self.state
    }

    pub fn transitions(&self) -> &[LedTransition] {
        &self.transitions
    }

    /// Every consumed status as `(seq, on)`.
    pub fn history(&self) -> &[(u64, bool)] {
        &self.history
    }

    pub fn consume(&mut self, env: &Envelope) {
        match self.state.apply(env) {
            Ok(t) => {
                self.history.push((env.seq, self.state.on));
                if let Some(t) = t {
                    info!(seq = t.seq, timestamp_ns = t.timestamp_ns, on = t.on, "LED transition");
                    self.transitions.push(t);
                }
            }
            Err(len) => warn!(seq = env.seq, len, "ignoring malformed LED status"),
        }
    }

    /// Consumes everything already delivered.
    pub fn poll(&mut self) {
        while let Ok(env) = self.status.try_recv() {
            self.consume(&env);
        }
    }

    /// Consumes until a shutdown signal or until the bus goes away.
    pub fn run(&mut self) -> Result<(), PipelineError> {
        loop {
            match self.status.recv_timeout(POLL_INTERVAL) {
                Ok(env) => self.consume(&env),
                Err(RecvError::Timeout) => {}
                Err(_) => return Err(BusError::Disconnected.into()),
            }
            if self.shutdown.try_recv().is_ok() {
                self.poll();
                return Ok(());
            }
        }
    }
}

/// What a perception step did.
#[derive(Debug, Clone, PartialEq)]
pub enum PerceptionStep {
    Report(Box<ProcessReport>),
    EndOfStream,
}

/// Consumes frames, publishes one LED status and one telemetry record per
/// frame before taking the next frame.
pub struct PerceptionNode<T: Transport> {
    transport: T,
    frames: Subscription,
    shutdown: Subscription,
    config: PipelineConfig,
    state: PipelineState,
    reports: Vec<ProcessReport>,
}

impl<T: Transport> PerceptionNode<T> {
    pub fn new(transport: T, config: PipelineConfig, frame_qos: TopicQos) -> Result<Self, PipelineError> {
        config.validate()?;
        let frames = transport.subscribe(FRAME_TOPIC, frame_qos)?;
        let shutdown = transport.subscribe(SHUTDOWN_TOPIC, TopicQos::Lossless)?;
        transport.publish(&ready_topic("perception"), &[], 0)?;
        Ok(Self {
            transport,
            frames,
            shutdown,
            config,
            state: PipelineState::new(),
            reports: Vec::new(),
        })
    }

    pub fn reports(&self) -> &[ProcessReport] {
        &self.reports
    }

    pub fn into_reports(self) -> Vec<ProcessReport> {
        self.reports
    }

    pub fn handle(&mut self, env: &Envelope) -> Result<PerceptionStep, PipelineError> {
        if env.payload.is_empty() {
            debug!("frame stream ended");
            self.transport.publish(SHUTDOWN_TOPIC, &[], env.timestamp_ns)?;
            return Ok(PerceptionStep::EndOfStream);
        }
        let frame = decode_frame(&env.payload)?;
        let started = Instant::now();
        let (mut report, state) = process_frame(&frame, std::mem::take(&mut self.state), &self.config)?;
        self.state = state;
        if self.config.measure_latency {
            report.processing_latency_ns = started.elapsed().as_nanos() as u64;
        }
        let telemetry = serde_json::to_vec(&report).map_err(|e| PipelineError::Telemetry(e.to_string()))?;
        self.transport.publish(LED_TOPIC, &encode_led(report.warn), frame.timestamp_ns)?;
        self.transport.publish(TELEMETRY_TOPIC, &telemetry, frame.timestamp_ns)?;
        self.reports.push(report.clone());
        Ok(PerceptionStep::Report(Box::new(report)))
    }

    /// Processes every frame already delivered. Returns true once the stream
    /// has ended.
    pub fn poll(&mut self) -> Result<bool, PipelineError> {
        while let Ok(env) = self.frames.try_recv() {
            if self.handle(&env)? == PerceptionStep::EndOfStream {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Processes frames as they arrive until the stream ends or a shutdown
    /// signal comes in.
    pub fn run(&mut self) -> Result<(), PipelineError> {
        loop {
            match self.frames.recv_timeout(POLL_INTERVAL) {
                Ok(env) => {
                    if self.handle(&env)? == PerceptionStep::EndOfStream {
                        return Ok(());
                    }
                    continue;
                }
                Err(RecvError::Timeout) => {}
                Err(_) => return Err(BusError::Disconnected.into()),
            }
            if self.shutdown.try_recv().is_ok() {
                return Ok(());
            }
        }
    }
}

pub fn decode_telemetry(payload: &[u8]) -> Result<ProcessReport, PipelineError> {
    serde_json::from_slice(payload).map_err(|e| PipelineError::Telemetry(e.to_string()))
}

/// Publishes scenario frames on `/camera/frame`.
pub struct SensorNode<T: Transport> {
    transport: T,
    scenario: Scenario,
    recorder: Option<RecordingWriter>,
    truths: Vec<GroundTruth>,
    acks: Option<(Subscription, usize)>,
    acked: Option<u64>,
}

impl<T: Transport> SensorNode<T> {
    pub fn new(transport: T, scenario: Scenario, recorder: Option<RecordingWriter>) -> Self {
        Self {
            transport,
            scenario,
            recorder,
            truths: Vec::new(),
            acks: None,
            acked: None,
        }
    }

    /// Keeps at most `window` frames ahead of the telemetry stream so a slow
    /// consumer does not pile frames up in the broker.
    pub fn with_flow_control(mut self, window: usize) -> Result<Self, PipelineError> {
        let sub = self.transport.subscribe(TELEMETRY_TOPIC, TopicQos::Lossless)?;
        self.acks = Some((sub, window.max(1)));
        Ok(self)
    }

    pub fn truths(&self) -> &[GroundTruth] {
        &self.truths
    }

    /// Blocks until every role in `roles` has announced itself.
    pub fn wait_for(&self, roles: &[&str], timeout: Duration) -> Result<(), PipelineError> {
        for role in roles {
            let sub = self.transport.subscribe(&ready_topic(role), TopicQos::KeepLast(1))?;
            sub.recv_timeout(timeout)
                .map_err(|_| PipelineError::Timeout(format!("role {role}")))?;
        }
        Ok(())
    }

    fn wait_for_window(&mut self, seq: u64) -> Result<(), PipelineError> {
        let Some((sub, window)) = &self.acks else {
            return Ok(());
        };
        while seq >= *window as u64 && self.acked.is_none_or(|a| a + (*window as u64) < seq) {
            let env = sub.recv().map_err(|_| BusError::Disconnected)?;
            let report = decode_telemetry(&env.payload)?;
            self.acked = Some(report.seq);
        }
        Ok(())
    }

    /// Publishes the next frame; `None` once the scenario is over.
    pub fn step(&mut self) -> Result<Option<GroundTruth>, PipelineError> {
        let Some((frame, truth)) = self.scenario.next_frame() else {
            return Ok(None);
        };
        self.wait_for_window(frame.seq)?;
        if let Some(r) = &mut self.recorder {
            r.write_frame(&frame, Some(&truth))?;
        }
        let payload = encode_frame(&frame)?;
        self.transport.publish(FRAME_TOPIC, &payload, frame.timestamp_ns)?;
        self.truths.push(truth.clone());
        Ok(Some(truth))
    }

    /// Ends the frame stream and closes the recording.
    pub fn finish(&mut self) -> Result<(), PipelineError> {
        let end_ns = self.truths.last().map_or(0, |t| t.timestamp_ns);
        self.transport.publish(FRAME_TOPIC, &[], end_ns)?;
        if let Some(r) = self.recorder.take() {
            r.finish()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), PipelineError> {
        while self.step()?.is_some() {}
        self.finish()
    }
}

/// Output of a whole graph run.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphRun {
    pub reports: Vec<ProcessReport>,
    pub truths: Vec<GroundTruth>,
    pub led_history: Vec<(u64, bool)>,
    pub led_transitions: Vec<LedTransition>,
}

/// Runs sensor, perception and LED over an in-process bus on one thread.
/// Each frame is fully processed and its LED status consumed before the
/// next frame is published. Reports are read back from `/telemetry`.
pub fn run_in_process(
    scenario: Scenario,
    config: &PipelineConfig,
    recorder: Option<RecordingWriter>,
) -> Result<GraphRun, PipelineError> {
    let bus = crate::bus::InProcBus::new();
    let telemetry = bus.client().subscribe(TELEMETRY_TOPIC, TopicQos::Lossless)?;
    let mut perception = PerceptionNode::new(bus.client(), *config, TopicQos::Lossless)?;
    let mut led = LedNode::new(&bus.client(), TopicQos::Lossless)?;
    let mut sensor = SensorNode::new(bus.client(), scenario, recorder);
    let mut reports = Vec::new();
    let drain = |reports: &mut Vec<ProcessReport>| -> Result<(), PipelineError> {
        while let Ok(env) = telemetry.try_recv() {
            reports.push(decode_telemetry(&env.payload)?);
        }
        Ok(())
    };
    while sensor.step()?.is_some() {
        perception.poll()?;
        led.poll();
        drain(&mut reports)?;
    }
    sensor.finish()?;
    perception.poll()?;
    led.poll();
    drain(&mut reports)?;
    Ok(GraphRun {
        reports,
        truths: sensor.truths,
        led_history: led.history,
        led_transitions: led.transitions,
    })
}

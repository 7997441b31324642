//! Depth-image ranging and closing-speed estimation.
//!
//! The distance to a detection is the mean of the valid depth pixels inside
//! the central third of its box (a third of the width and a third of the
//! height), which keeps road and background pixels at the box edges out of
//! the average. Speed is the finite difference of two range samples over the
//! scenario-clock time between them; negative means approaching.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, LaneAssignment};
use crate::pgm;

pub const DEFAULT_MAX_PLAUSIBLE_SPEED_MPS: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RangingError {
    #[error("no valid depth pixels inside the central region")]
    NoRange,
    #[error("timestamps must increase (previous {prev_ns} ns, current {curr_ns} ns)")]
    Clock { prev_ns: u64, curr_ns: u64 },
    #[error("implausible speed {speed_mps:.3} m/s exceeds {limit_mps} m/s; target switch assumed")]
    Outlier { speed_mps: f64, limit_mps: f64 },
    #[error("bounding box {0:?} is not inside the depth image")]
    BoxOutside(BoundingBox),
    #[error("depth image dimensions must be positive and match the pixel count")]
    Dimensions,
    #[error("depth {depth_m} m cannot be stored in 16-bit units of {unit_m} m")]
    DepthOutOfRange { depth_m: f64, unit_m: f64 },
    #[error(transparent)]
    Pgm(#[from] pgm::PgmError),
}

/// Per-pixel range map in meters. Non-positive or non-finite values are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    depths: Vec<f64>,
}

pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depths: Vec<f64>) -> Result<Self, RangingError> {
        if width == 0 || height == 0 || depths.len() != width * height {
            return Err(RangingError::Dimensions);
        }
        Ok(Self {
            width,
            height,
            depths,
        })
    }

    /// An all-invalid image.
    pub fn empty(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            depths: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.depths[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.depths[y * self.width + x] = d;
    }

    /// Encodes as a 16-bit PGM counting `unit_m` steps (0 = invalid).
    pub fn to_pgm(&self, unit_m: f64) -> Result<Vec<u8>, RangingError> {
        let mut raw = Vec::with_capacity(self.depths.len());
        for &d in &self.depths {
            if !is_valid_depth(d) {
                raw.push(0);
                continue;
            }
            let steps = (d / unit_m).round();
            if !(1.0..=65535.0).contains(&steps) {
                return Err(RangingError::DepthOutOfRange { depth_m: d, unit_m });
            }
            raw.push(steps as u16);
        }
        Ok(pgm::encode_u16(self.width, self.height, &raw))
    }

    pub fn from_pgm(bytes: &[u8], unit_m: f64) -> Result<Self, RangingError> {
        let r = pgm::decode_u16(bytes)?;
        let depths = r.data.iter().map(|&v| steps_to_m(v, unit_m)).collect();
        Self::new(r.width, r.height, depths)
    }
}

/// Depth represented by `steps` units. When the unit is the reciprocal of a
/// whole number (mm, cm) dividing makes whole-step values land on the nearest
/// `f64`, e.g. 2980 mm gives exactly `2.98`.
pub fn steps_to_m(steps: u16, unit_m: f64) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    let per_m = (1.0 / unit_m).round();
    if per_m >= 1.0 && (per_m * unit_m - 1.0).abs() < 1e-12 {
        steps as f64 / per_m
    } else {
        steps as f64 * unit_m
    }
}

/// Rounds a depth to a whole number of `unit_m` steps, exactly as
/// [`DepthImage::to_pgm`] followed by [`DepthImage::from_pgm`] would.
pub fn quantize_depth(d: f64, unit_m: f64) -> f64 {
    if !is_valid_depth(d) {
        return 0.0;
    }
    let steps = (d / unit_m).round();
    if !(1.0..=65535.0).contains(&steps) {
        return 0.0;
    }
    steps_to_m(steps as u16, unit_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSample {
    pub distance_m: f64,
    pub timestamp_ns: u64,
    pub valid_pixel_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedEstimate {
    /// Negative while the target approaches.
    pub speed_mps: f64,
    pub baseline_ns: u64,
}

/// Centered sub-box with a third of the width and a third of the height,
/// each rounded to the nearest pixel and at least one pixel.
pub fn central_region(bbox: &BoundingBox) -> BoundingBox {
    let third = |len: u32| ((len + 1) / 3).max(1);
    let (w, h) = (bbox.width(), bbox.height());
    let (cw, ch) = (third(w), third(h));
    let x0 = bbox.x_min + (w - cw) / 2;
    let y0 = bbox.y_min + (h - ch) / 2;
    BoundingBox {
        x_min: x0,
        y_min: y0,
        x_max: x0 + cw,
        y_max: y0 + ch,
    }
}

/// Mean valid depth inside the central region of `bbox`.
pub fn estimate_distance(
    depth: &DepthImage,
    bbox: &BoundingBox,
    timestamp_ns: u64,
) -> Result<RangeSample, RangingError> {
    if !bbox.fits_within(depth.width, depth.height) {
        return Err(RangingError::BoxOutside(*bbox));
    }
    let region = central_region(bbox);
    let mut values = Vec::with_capacity((region.width() * region.height()) as usize);
    for y in region.y_min..region.y_max {
        let row = y as usize * depth.width;
        for x in region.x_min..region.x_max {
            let d = depth.depths[row + x as usize];
            if is_valid_depth(d) {
                values.push(d);
            }
        }
    }
    if values.is_empty() {
        return Err(RangingError::NoRange);
    }
    // Summing in sorted order makes the mean independent of pixel layout.
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    Ok(RangeSample {
        distance_m: compensated_sum(&values) / n as f64,
        timestamp_ns,
        valid_pixel_count: n,
    })
}

fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Finite-difference speed between two samples.
pub fn estimate_speed(
    prev: &RangeSample,
    curr: &RangeSample,
    max_plausible_mps: f64,
) -> Result<SpeedEstimate, RangingError> {
    if curr.timestamp_ns <= prev.timestamp_ns {
        return Err(RangingError::Clock {
            prev_ns: prev.timestamp_ns,
            curr_ns: curr.timestamp_ns,
        });
    }
    let baseline_ns = curr.timestamp_ns - prev.timestamp_ns;
    let speed_mps = (curr.distance_m - prev.distance_m) / (baseline_ns as f64 * 1e-9);
    if speed_mps.abs() > max_plausible_mps {
        return Err(RangingError::Outlier {
            speed_mps,
            limit_mps: max_plausible_mps,
        });
    }
    Ok(SpeedEstimate {
        speed_mps,
        baseline_ns,
    })
}

/// Tracker tunables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerParams {
    /// Speed is differenced against the sample this many accepted samples back.
    pub baseline_frames: usize,
    pub max_plausible_speed_mps: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            baseline_frames: 1,
            max_plausible_speed_mps: DEFAULT_MAX_PLAUSIBLE_SPEED_MPS,
        }
    }
}

/// Result of feeding one range sample to the tracker.
#[derive(Debug, Clone, PartialEq)]
pub enum SpeedOutcome {
    /// Not enough history yet.
    Warmup,
    Estimate(SpeedEstimate),
    /// The chain was restarted at this sample.
    Reset(RangingError),
}

/// Speed chain over accepted range samples of the tracked target.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpeedTracker {
    history: VecDeque<RangeSample>,
}

impl SpeedTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last(&self) -> Option<&RangeSample> {
        self.history.back()
    }

    pub fn observe(&mut self, sample: RangeSample, params: &TrackerParams) -> SpeedOutcome {
        let gap = params.baseline_frames.max(1);
        let outcome = if self.history.len() >= gap {
            let reference = self.history[self.history.len() - gap];
            match estimate_speed(&reference, &sample, params.max_plausible_speed_mps) {
                Ok(est) => SpeedOutcome::Estimate(est),
                Err(e) => {
                    self.history.clear();
                    SpeedOutcome::Reset(e)
                }
            }
        } else {
            SpeedOutcome::Warmup
        };
        self.history.push_back(sample);
        while self.history.len() > gap {
            self.history.pop_front();
        }
        outcome
    }
}

/// One detection considered for tracking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetCandidate {
    pub lane: LaneAssignment,
    pub range: Option<RangeSample>,
}

/// Whether a detection in `lane` is of interest to a follower watching
/// `monitored`. Unknown lanes count, so a failed lane fit still warns.
pub fn lane_is_monitored(lane: LaneAssignment, monitored: LaneAssignment) -> bool {
    lane == monitored || lane == LaneAssignment::Unknown
}

/// Index of the nearest ranged candidate in the monitored lane (or of unknown
/// lane). Ties keep the earlier detection.
pub fn track_target(candidates: &[TargetCandidate], monitored: LaneAssignment) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| lane_is_monitored(c.lane, monitored))
        .filter_map(|(i, c)| c.range.map(|r| (i, r.distance_m)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

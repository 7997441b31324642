//! Deterministic synthetic road scenes and the on-disk recording format.
//!
//! The camera sits at the origin looking down +Z with +X to the right and +Y
//! down; the road is the plane `Y = camera_height_m`. A pinhole projection
//! `u = cx + f·X/Z`, `v = cy + f·Y/Z` maps the three lane lines to straight
//! image lines and the target's rear face to an axis-aligned box. The target
//! is a flat rectangle centered on its lane, moving at a constant relative
//! speed. Per-pixel depth noise is `N(0, σ0 + k·Z)`.
//!
//! A recording is a directory holding `manifest.json` plus one mask PGM and
//! one depth PGM per frame.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, GeometryError, GrayImage, LaneAssignment};
use crate::pipeline::{Detection, FrameBundle};
use crate::ranging::{quantize_depth, DepthImage, RangingError};

pub const MANIFEST_FILE: &str = "manifest.json";
const RECORDING_FORMAT: &str = "tmaguard-recording";
const RECORDING_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("point at z = {z} m is not in front of the camera")]
    BehindCamera { z: f64 },
    #[error("recording {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("recording manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("recording frame {file}: {reason}")]
    Frame { file: String, reason: String },
    #[error(transparent)]
    Ranging(#[from] RangingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small-scale lab track with toy vehicles.
    #[default]
    Lab,
    /// Highway work zone.
    Field,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lab" => Ok(Preset::Lab),
            "field" => Ok(Preset::Field),
            other => Err(format!("unknown preset {other:?} (expected lab or field)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub preset: Preset,
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub camera_height_m: f64,
    pub lane_width_m: f64,
    /// Camera offset from the center of the follower's lane, positive right.
    pub camera_lateral_offset_m: f64,
    /// Explicit lane line positions relative to the camera, left to right.
    /// Derived from the lane width and camera offset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane_offsets_m: Option<[f64; 3]>,
    pub follower_lane: LaneAssignment,
    pub target_lane: LaneAssignment,
    pub vehicle_width_m: f64,
    pub vehicle_height_m: f64,
    pub initial_distance_m: f64,
    /// Rate of change of the target's range; negative when approaching.
    pub relative_speed_mps: f64,
    pub frame_rate_hz: f64,
    pub duration_s: f64,
    pub noise_sigma0_m: f64,
    pub noise_k: f64,
    pub seed: u64,
    /// The scenario ends once the target is this close.
    pub z_near_m: f64,
    /// Lane lines are drawn out to this range.
    pub z_far_m: f64,
    pub depth_unit_m: f64,
    pub line_width_px: u32,
}

impl ScenarioConfig {
    pub fn lab() -> Self {
        Self {
            preset: Preset::Lab,
            width: 640,
            height: 480,
            focal_px: 200.0,
            cx: 320.0,
            cy: 240.0,
            camera_height_m: 0.30,
            lane_width_m: 0.35,
            camera_lateral_offset_m: 0.0,
            lane_offsets_m: None,
            follower_lane: LaneAssignment::Left,
            target_lane: LaneAssignment::Left,
            vehicle_width_m: 0.20,
            vehicle_height_m: 0.10,
            initial_distance_m: 3.0,
            relative_speed_mps: -0.2,
            frame_rate_hz: 10.0,
            duration_s: 20.0,
            noise_sigma0_m: 0.005,
            noise_k: 0.005,
            seed: 0,
            z_near_m: 0.25,
            z_far_m: 5.0,
            depth_unit_m: 0.001,
            line_width_px: 2,
        }
    }

    pub fn field() -> Self {
        Self {
            preset: Preset::Field,
            width: 1280,
            height: 720,
            focal_px: 1000.0,
            cx: 640.0,
            cy: 360.0,
            camera_height_m: 3.0,
            lane_width_m: 3.6,
            camera_lateral_offset_m: 0.0,
            lane_offsets_m: None,
            follower_lane: LaneAssignment::Left,
            target_lane: LaneAssignment::Left,
            vehicle_width_m: 1.8,
            vehicle_height_m: 1.5,
            initial_distance_m: 250.0,
            relative_speed_mps: -26.8224,
            frame_rate_hz: 10.0,
            duration_s: 10.0,
            noise_sigma0_m: 0.05,
            noise_k: 0.002,
            seed: 0,
            z_near_m: 10.0,
            z_far_m: 150.0,
            depth_unit_m: 0.01,
            line_width_px: 2,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Lab => Self::lab(),
            Preset::Field => Self::field(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        fn bad(field: &'static str, reason: impl Into<String>) -> Result<(), SimError> {
            Err(SimError::InvalidConfig {
                field,
                reason: reason.into(),
            })
        }
        let positive = [
            ("focal_px", self.focal_px),
            ("camera_height_m", self.camera_height_m),
            ("lane_width_m", self.lane_width_m),
            ("vehicle_width_m", self.vehicle_width_m),
            ("vehicle_height_m", self.vehicle_height_m),
            ("initial_distance_m", self.initial_distance_m),
            ("frame_rate_hz", self.frame_rate_hz),
            ("duration_s", self.duration_s),
            ("z_near_m", self.z_near_m),
            ("z_far_m", self.z_far_m),
            ("depth_unit_m", self.depth_unit_m),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(field, format!("must be finite and positive, got {v}"));
            }
        }
        for (field, v) in [("noise_sigma0_m", self.noise_sigma0_m), ("noise_k", self.noise_k)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, format!("must be finite and non-negative, got {v}"));
            }
        }
        if !self.relative_speed_mps.is_finite() {
            return bad("relative_speed_mps", "must be finite");
        }
        if self.width < 8 || self.height < 8 || self.width > 1 << 16 || self.height > 1 << 16 {
            return bad("width", format!("image {}x{} out of range", self.width, self.height));
        }
        if !(self.cx.is_finite() && self.cx > 0.0 && self.cx < self.width as f64) {
            return bad("cx", "principal point must lie inside the image");
        }
        if !(self.cy.is_finite() && self.cy > 0.0 && self.cy < self.height as f64) {
            return bad("cy", "principal point must lie inside the image");
        }
        if !self.camera_lateral_offset_m.is_finite()
            || self.camera_lateral_offset_m.abs() >= self.lane_width_m / 2.0
        {
            return bad("camera_lateral_offset_m", "camera must stay inside its lane");
        }
        for (field, lane) in [("follower_lane", self.follower_lane), ("target_lane", self.target_lane)] {
            if !matches!(lane, LaneAssignment::Left | LaneAssignment::Right) {
                return bad(field, "must be left or right");
            }
        }
        if self.vehicle_height_m >= self.camera_height_m {
            return bad("vehicle_height_m", "vehicle must be lower than the camera");
        }
        if self.z_far_m <= self.z_near_m {
            return bad("z_far_m", "must exceed z_near_m");
        }
        if self.initial_distance_m <= self.z_near_m {
            return bad("initial_distance_m", "must exceed z_near_m");
        }
        if self.initial_distance_m / self.depth_unit_m > 65535.0 {
            return bad("depth_unit_m", "initial distance does not fit in a 16-bit depth image");
        }
        if let Some(o) = self.lane_offsets_m {
            if !(o.iter().all(|x| x.is_finite()) && o[0] < o[1] && o[1] < o[2]) {
                return bad("lane_offsets_m", "must be three finite, strictly increasing values");
            }
        }
        if self.line_width_px == 0 {
            return bad("line_width_px", "must be at least 1");
        }
        Ok(())
    }

    /// Lateral positions of the three lane lines relative to the camera,
    /// left to right.
    pub fn lane_lines_m(&self) -> [f64; 3] {
        if let Some(o) = self.lane_offsets_m {
            return o;
        }
        let w = self.lane_width_m;
        let base = match self.follower_lane {
            LaneAssignment::Right => [-1.5 * w, -0.5 * w, 0.5 * w],
            _ => [-0.5 * w, 0.5 * w, 1.5 * w],
        };
        base.map(|x| x - self.camera_lateral_offset_m)
    }

    pub fn lane_center_m(&self, lane: LaneAssignment) -> f64 {
        let l = self.lane_lines_m();
        match lane {
            LaneAssignment::Right => (l[1] + l[2]) / 2.0,
            _ => (l[0] + l[1]) / 2.0,
        }
    }

    /// Pixel position of camera-frame point `(x, y, z)`, `y` pointing down.
    pub fn project(&self, x: f64, y: f64, z: f64) -> Result<(f64, f64), SimError> {
        if z.is_nan() || z <= 0.0 {
            return Err(SimError::BehindCamera { z });
        }
        Ok((self.cx + self.focal_px * x / z, self.cy + self.focal_px * y / z))
    }

    pub fn frame_count(&self) -> u64 {
        (self.duration_s * self.frame_rate_hz + 1e-9).floor() as u64
    }

    /// Timestamp of frame `k`: `k·10⁹/frame_rate` ns.
    pub fn timestamp_ns(&self, k: u64) -> u64 {
        if self.frame_rate_hz.fract() == 0.0 {
            (k as u128 * 1_000_000_000 / self.frame_rate_hz as u128) as u64
        } else {
            (k as f64 * 1e9 / self.frame_rate_hz).round() as u64
        }
    }

    pub fn distance_at(&self, k: u64) -> f64 {
        self.initial_distance_m + self.relative_speed_mps * (k as f64 / self.frame_rate_hz)
    }

    /// Image box of the target's rear face at range `z`, or `None` unless it
    /// lies entirely inside the frame.
    pub fn project_vehicle(&self, z: f64) -> Option<BoundingBox> {
        let x = self.lane_center_m(self.target_lane);
        let half = self.vehicle_width_m / 2.0;
        let u0 = self.cx + self.focal_px * (x - half) / z;
        let u1 = self.cx + self.focal_px * (x + half) / z;
        let v0 = self.cy + self.focal_px * (self.camera_height_m - self.vehicle_height_m) / z;
        let v1 = self.cy + self.focal_px * self.camera_height_m / z;
        if u0 < 0.0 || v0 < 0.0 || u1 > self.width as f64 || v1 > self.height as f64 {
            return None;
        }
        BoundingBox::new(u0.floor() as u32, v0.floor() as u32, u1.ceil() as u32, v1.ceil() as u32).ok()
    }

    /// Binary mask of the three lane lines.
    pub fn render_lane_mask(&self) -> GrayImage {
        let mut mask = GrayImage::zeros(self.width, self.height);
        let v_far = self.cy + self.focal_px * self.camera_height_m / self.z_far_m;
        let lw = self.line_width_px as f64;
        let step = 0.25;
        for x in self.lane_lines_m() {
            let slope = x / self.camera_height_m;
            let mut v = v_far;
            while v < self.height as f64 + lw {
                let u = self.cx + slope * (v - self.cy);
                stamp(&mut mask, u, v, lw);
                v += step;
            }
        }
        mask
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::lab()
    }
}

fn stamp(mask: &mut GrayImage, u: f64, v: f64, size: f64) {
    let x0 = (u - size / 2.0).round() as i64;
    let y0 = (v - size / 2.0).round() as i64;
    let n = size as i64;
    for y in y0..y0 + n {
        for x in x0..x0 + n {
            if x >= 0 && y >= 0 && (x as usize) < mask.width() && (y as usize) < mask.height() {
                mask.set(x as usize, y as usize, 255);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seq: u64,
    pub timestamp_ns: u64,
    pub distance_m: f64,
    pub speed_mps: f64,
    pub lane: LaneAssignment,
    pub bbox: Option<BoundingBox>,
    /// The target is not entirely inside the frame and was not drawn.
    pub occluded: bool,
}

/// Frame generator for one scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    config: ScenarioConfig,
    rng: ChaCha8Rng,
    mask: GrayImage,
    next: u64,
    total: u64,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            mask: config.render_lane_mask(),
            total: config.frame_count(),
            next: 0,
            config,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    /// Renders the next frame. Returns `None` once the duration is used up or
    /// the target has reached `z_near_m`.
    pub fn next_frame(&mut self) -> Option<(FrameBundle, GroundTruth)> {
        let c = &self.config;
        let k = self.next;
        if k >= self.total {
            return None;
        }
        let z = c.distance_at(k);
        if z <= c.z_near_m {
            return None;
        }
        self.next += 1;
        let timestamp_ns = c.timestamp_ns(k);
        let bbox = c.project_vehicle(z);
        let mut depth = DepthImage::empty(c.width, c.height);
        let mut detections = Vec::new();
        if let Some(b) = bbox {
            let sigma = c.noise_sigma0_m + c.noise_k * z;
            let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma is finite"));
            for y in b.y_min..b.y_max {
                for x in b.x_min..b.x_max {
                    let e = noise.as_ref().map_or(0.0, |n| n.sample(&mut self.rng));
                    depth.set(x as usize, y as usize, quantize_depth(z + e, c.depth_unit_m));
                }
            }
            detections.push(Detection {
                bbox: b,
                label: "vehicle".to_owned(),
                confidence: 1.0,
            });
        }
        let frame = FrameBundle {
            seq: k,
            timestamp_ns,
            depth_unit_m: c.depth_unit_m,
            lane_mask: self.mask.clone(),
            depth,
            detections,
        };
        let truth = GroundTruth {
            seq: k,
            timestamp_ns,
            distance_m: z,
            speed_mps: c.relative_speed_mps,
            lane: c.target_lane,
            bbox,
            occluded: bbox.is_none(),
        };
        Some((frame, truth))
    }
}

impl Iterator for Scenario {
    type Item = (FrameBundle, GroundTruth);

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedFrame {
    pub seq: u64,
    pub timestamp_ns: u64,
    pub mask: String,
    pub depth: String,
    pub detections: Vec<Detection>,
    pub truth: Option<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingManifest {
    pub format: String,
    pub version: u32,
    pub depth_unit_m: f64,
    pub scenario: Option<ScenarioConfig>,
    pub frames: Vec<RecordedFrame>,
}

/// Writes frames into a recording directory. The manifest is written by
/// [`RecordingWriter::finish`]; a directory without one is not a recording.
#[derive(Debug)]
pub struct RecordingWriter {
    dir: PathBuf,
    manifest: RecordingManifest,
}

impl RecordingWriter {
    /// Creates (or reuses) `dir` and checks that it is writable.
    pub fn create(dir: &Path, scenario: Option<&ScenarioConfig>, depth_unit_m: f64) -> Result<Self, SimError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let probe = dir.join(".write-probe");
        fs::write(&probe, b"").map_err(io_err(&probe))?;
        fs::remove_file(&probe).map_err(io_err(&probe))?;
        let stale = dir.join(MANIFEST_FILE);
        if stale.exists() {
            fs::remove_file(&stale).map_err(io_err(&stale))?;
        }
        Ok(Self {
            dir: dir.to_owned(),
            manifest: RecordingManifest {
                format: RECORDING_FORMAT.to_owned(),
                version: RECORDING_VERSION,
                depth_unit_m,
                scenario: scenario.cloned(),
                frames: Vec::new(),
            },
        })
    }

    pub fn write_frame(&mut self, frame: &FrameBundle, truth: Option<&GroundTruth>) -> Result<(), SimError> {
        let mask = format!("{:06}_mask.pgm", frame.seq);
        let depth = format!("{:06}_depth.pgm", frame.seq);
        let depth_bytes = frame.depth.to_pgm(self.manifest.depth_unit_m)?;
        write_file(&self.dir.join(&mask), &frame.lane_mask.to_pgm())?;
        write_file(&self.dir.join(&depth), &depth_bytes)?;
        self.manifest.frames.push(RecordedFrame {
            seq: frame.seq,
            timestamp_ns: frame.timestamp_ns,
            mask,
            depth,
            detections: frame.detections.clone(),
            truth: truth.cloned(),
        });
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf, SimError> {
        let path = self.dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(|source| SimError::Manifest {
            path: path.clone(),
            source,
        })?;
        write_file(&path, &json)?;
        Ok(self.dir)
    }
}

/// Writes through a temporary file so readers never see a partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SimError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// A recording opened for replay.
#[derive(Debug, Clone)]
pub struct Recording {
    dir: PathBuf,
    pub manifest: RecordingManifest,
}

impl Recording {
    pub fn open(dir: &Path) -> Result<Self, SimError> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let manifest: RecordingManifest =
            serde_json::from_slice(&bytes).map_err(|source| SimError::Manifest {
                path: path.clone(),
                source,
            })?;
        if manifest.format != RECORDING_FORMAT || manifest.version != RECORDING_VERSION {
            return Err(SimError::Frame {
                file: MANIFEST_FILE.to_owned(),
                reason: format!("unsupported format {} v{}", manifest.format, manifest.version),
            });
        }
        if !(manifest.depth_unit_m.is_finite() && manifest.depth_unit_m > 0.0) {
            return Err(SimError::Frame {
                file: MANIFEST_FILE.to_owned(),
                reason: "depth_unit_m must be positive".to_owned(),
            });
        }
        Ok(Self {
            dir: dir.to_owned(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    /// Loads frame `i` in manifest order.
    pub fn load(&self, i: usize) -> Result<(FrameBundle, Option<GroundTruth>), SimError> {
        let rec = &self.manifest.frames[i];
        let frame_err = |file: &str, reason: String| SimError::Frame {
            file: file.to_owned(),
            reason,
        };
        let read = |name: &str| {
            let p = self.dir.join(name);
            fs::read(&p).map_err(|e| frame_err(name, e.to_string()))
        };
        let lane_mask = GrayImage::from_pgm(&read(&rec.mask)?).map_err(|e| frame_err(&rec.mask, e.to_string()))?;
        let depth = DepthImage::from_pgm(&read(&rec.depth)?, self.manifest.depth_unit_m)
            .map_err(|e| frame_err(&rec.depth, e.to_string()))?;
        if (lane_mask.width(), lane_mask.height()) != (depth.width(), depth.height()) {
            return Err(frame_err(
                &rec.depth,
                format!(
                    "depth is {}x{} but mask is {}x{}",
                    depth.width(),
                    depth.height(),
                    lane_mask.width(),
                    lane_mask.height()
                ),
            ));
        }
        for d in &rec.detections {
            if !d.bbox.fits_within(depth.width(), depth.height()) {
                return Err(frame_err(&rec.depth, format!("detection {:?} outside the image", d.bbox)));
            }
        }
        Ok((
            FrameBundle {
                seq: rec.seq,
                timestamp_ns: rec.timestamp_ns,
                depth_unit_m: self.manifest.depth_unit_m,
                lane_mask,
                depth,
                detections: rec.detections.clone(),
            },
            rec.truth.clone(),
        ))
    }
}

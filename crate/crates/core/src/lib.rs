//! Proactive warning pipeline for truck mounted attenuators (TMA).
//!
//! A rear-facing camera on the follower truck watches approaching traffic.
//! Each frame the perception node decides which lane an approaching vehicle
//! occupies, ranges it from the depth image, estimates its closing speed and
//! compares the range against a stopping sight distance. The resulting
//! warn/no-warn flag is published on `/led/status` for the LED node.
//!
//! Module map:
//! - [`bus`]: topic-based publish/subscribe with an in-process hub and a TCP broker
//! - [`geometry`]: lane-mask denoising, connected components, lane fitting and assignment
//! - [`ranging`]: depth-image ranging and finite-difference speed estimation
//! - [`safety`]: stopping sight distance and the warning rule
//! - [`pipeline`]: the perception, sensor and LED nodes
//! - [`sim`]: deterministic synthetic road scenes and the recording format
//! - [`report`]: run, replay and sweep harnesses with CSV/JSON reports
//! - [`config`]: TOML configuration loading

pub mod bus;
pub mod config;
pub mod geometry;
pub mod pgm;
pub mod pipeline;
pub mod ranging;
pub mod report;
pub mod safety;
pub mod sim;

pub use config::Config;
pub use geometry::{BoundingBox, GrayImage, LaneAssignment, LaneLine, LaneSet};
pub use pipeline::{FrameBundle, PipelineConfig, ProcessReport};
pub use ranging::{DepthImage, RangeSample, SpeedEstimate};
pub use safety::{SsdParams, WarningDecision, WarningMode};
pub use sim::{GroundTruth, ScenarioConfig};

//! C ABI for the tmaguard pipeline.
//!
//! Every function returns a [`TmagStatus`]; on failure the message is kept
//! per thread and can be read with [`tmag_last_error`]. Handles are opaque
//! and must be released with their `_free` function. Byte buffers handed out
//! by the library are released with [`tmag_bytes_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tmaguard::bus::{encode_envelope, Envelope};
use tmaguard::config::Config;
use tmaguard::pipeline::{decode_frame, encode_frame, process_frame, PipelineConfig, PipelineState};
use tmaguard::safety::{self, SsdParams, WarningConfig, WarningMode};
use tmaguard::sim::Scenario;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmagStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Decode = 4,
    Pipeline = 5,
    EndOfStream = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmagMode {
    Sim = 0,
    FieldContinuous = 1,
    FieldTable = 2,
}

fn warning_mode(code: i32) -> Result<WarningMode, (TmagStatus, String)> {
    match code {
        c if c == TmagMode::Sim as i32 => Ok(WarningMode::SimProximity),
        c if c == TmagMode::FieldContinuous as i32 => Ok(WarningMode::FieldContinuous),
        c if c == TmagMode::FieldTable as i32 => Ok(WarningMode::FieldTable),
        c => Err((TmagStatus::InvalidArgument, format!("unknown warning mode {c}"))),
    }
}

/// Library-owned bytes. Release with `tmag_bytes_free`.
#[repr(C)]
#[derive(Debug)]
pub struct TmagBytes {
    pub data: *mut u8,
    pub len: usize,
}

impl TmagBytes {
    fn empty() -> Self {
        Self {
            data: ptr::null_mut(),
            len: 0,
        }
    }

    fn from_vec(v: Vec<u8>) -> Self {
        let b = Box::into_raw(v.into_boxed_slice());
        Self {
            data: b as *mut u8,
            len: b.len(),
        }
    }
}

/// Warning decision for one distance/speed pair.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TmagDecision {
    pub warn: bool,
    pub threshold_m: f64,
    pub closing_speed_mps: f64,
}

/// Outcome of one processed frame. Optional values come with a `has_` flag.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TmagFrameResult {
    pub seq: u64,
    pub timestamp_ns: u64,
    pub lanes_found: bool,
    pub range_samples: usize,
    pub has_distance: bool,
    pub distance_m: f64,
    pub has_speed: bool,
    pub speed_mps: f64,
    pub evaluated: bool,
    pub threshold_m: f64,
    /// LED state after debouncing.
    pub warn: bool,
}

/// Stateful perception pipeline.
pub struct TmagPipeline {
    config: PipelineConfig,
    state: PipelineState,
    last_json: Vec<u8>,
}

/// Seeded scenario generator producing encoded frames.
pub struct TmagScenario {
    inner: Scenario,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn guard(f: impl FnOnce() -> Result<(), (TmagStatus, String)>) -> TmagStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TmagStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TmagStatus::Panic
        }
    }
}

fn err<E: std::fmt::Display>(status: TmagStatus) -> impl Fn(E) -> (TmagStatus, String) {
    move |e| (status, e.to_string())
}

fn null(name: &str) -> (TmagStatus, String) {
    (TmagStatus::NullArgument, format!("{name} is null"))
}

unsafe fn load_config(toml: *const c_char) -> Result<Config, (TmagStatus, String)> {
    if toml.is_null() {
        return Ok(Config::default());
    }
    let text = CStr::from_ptr(toml)
        .to_str()
        .map_err(|_| (TmagStatus::InvalidArgument, "config is not UTF-8".to_owned()))?;
    Config::from_toml_str(text).map_err(err(TmagStatus::Config))
}

unsafe fn slice<'a>(data: *const u8, len: usize, name: &str) -> Result<&'a [u8], (TmagStatus, String)> {
    if len == 0 {
        Ok(&[])
    } else if data.is_null() {
        Err(null(name))
    } else {
        Ok(std::slice::from_raw_parts(data, len))
    }
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string (truncated to `cap`) and returns the full length
/// without the terminator. An empty string means the last call succeeded.
#[no_mangle]
pub unsafe extern "C" fn tmag_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Formula stopping sight distance in feet, with the default reaction time
/// and deceleration.
#[no_mangle]
pub unsafe extern "C" fn tmag_compute_ssd_ft(speed_mph: f64, out_ft: *mut f64) -> TmagStatus {
    guard(|| {
        if out_ft.is_null() {
            return Err(null("out_ft"));
        }
        *out_ft = safety::compute_ssd_ft(speed_mph, &SsdParams::default()).map_err(err(TmagStatus::InvalidArgument))?;
        Ok(())
    })
}

/// Design-table stopping sight distance in feet.
#[no_mangle]
pub unsafe extern "C" fn tmag_design_ssd_ft(speed_mph: f64, out_ft: *mut f64) -> TmagStatus {
    guard(|| {
        if out_ft.is_null() {
            return Err(null("out_ft"));
        }
        *out_ft = safety::design_ssd_ft(speed_mph).map_err(err(TmagStatus::InvalidArgument))?;
        Ok(())
    })
}

/// Evaluates the warning rule with default parameters. `speed_mps` is the
/// signed relative speed; negative means closing. `mode` is a `TmagMode`.
#[no_mangle]
pub unsafe extern "C" fn tmag_should_warn(
    distance_m: f64,
    speed_mps: f64,
    mode: i32,
    out: *mut TmagDecision,
) -> TmagStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = safety::should_warn(distance_m, speed_mps, warning_mode(mode)?, &WarningConfig::default())
            .map_err(err(TmagStatus::InvalidArgument))?;
        *out = TmagDecision {
            warn: d.warn,
            threshold_m: d.threshold_m,
            closing_speed_mps: d.closing_speed_mps,
        };
        Ok(())
    })
}

/// Creates a pipeline from a TOML configuration (NULL for defaults).
#[no_mangle]
pub unsafe extern "C" fn tmag_pipeline_new(config_toml: *const c_char, out: *mut *mut TmagPipeline) -> TmagStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = load_config(config_toml)?;
        *out = Box::into_raw(Box::new(TmagPipeline {
            config: cfg.pipeline,
            state: PipelineState::new(),
            last_json: Vec::new(),
        }));
        Ok(())
    })
}

/// Runs one encoded frame through the pipeline. On error the pipeline state
/// is left as it was before the call.
#[no_mangle]
pub unsafe extern "C" fn tmag_pipeline_process(
    pipeline: *mut TmagPipeline,
    frame: *const u8,
    len: usize,
    out: *mut TmagFrameResult,
) -> TmagStatus {
    guard(|| {
        let p = pipeline.as_mut().ok_or_else(|| null("pipeline"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = slice(frame, len, "frame")?;
        let bundle = decode_frame(bytes).map_err(err(TmagStatus::Decode))?;
        let (report, state) =
            process_frame(&bundle, p.state.clone(), &p.config).map_err(err(TmagStatus::Pipeline))?;
        p.state = state;
        p.last_json = serde_json::to_vec(&report).map_err(err(TmagStatus::Pipeline))?;
        *out = TmagFrameResult {
            seq: report.seq,
            timestamp_ns: report.timestamp_ns,
            lanes_found: report.lanes_found,
            range_samples: report.range_samples,
            has_distance: report.distance_m.is_some(),
            distance_m: report.distance_m.unwrap_or(0.0),
            has_speed: report.speed_mps.is_some(),
            speed_mps: report.speed_mps.unwrap_or(0.0),
            evaluated: report.decision.is_some(),
            threshold_m: report.decision.as_ref().map_or(0.0, |d| d.threshold_m),
            warn: report.warn,
        };
        Ok(())
    })
}

/// Full report of the last processed frame as JSON.
#[no_mangle]
pub unsafe extern "C" fn tmag_pipeline_last_report_json(pipeline: *const TmagPipeline, out: *mut TmagBytes) -> TmagStatus {
    guard(|| {
        let p = pipeline.as_ref().ok_or_else(|| null("pipeline"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if p.last_json.is_empty() {
            return Err((TmagStatus::InvalidArgument, "no frame processed yet".to_owned()));
        }
        *out = TmagBytes::from_vec(p.last_json.clone());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tmag_pipeline_free(pipeline: *mut TmagPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Creates a scenario generator from a TOML configuration (NULL for the
/// lab defaults).
#[no_mangle]
pub unsafe extern "C" fn tmag_scenario_new(config_toml: *const c_char, out: *mut *mut TmagScenario) -> TmagStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = load_config(config_toml)?;
        let inner = Scenario::new(cfg.scenario).map_err(err(TmagStatus::Config))?;
        *out = Box::into_raw(Box::new(TmagScenario { inner }));
        Ok(())
    })
}

/// Writes the next encoded frame to `out`, or returns
/// `TMAG_STATUS_END_OF_STREAM` once the scenario is over.
#[no_mangle]
pub unsafe extern "C" fn tmag_scenario_next_frame(scenario: *mut TmagScenario, out: *mut TmagBytes) -> TmagStatus {
    guard(|| {
        let s = scenario.as_mut().ok_or_else(|| null("scenario"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = TmagBytes::empty();
        let (frame, _) = s
            .inner
            .next_frame()
            .ok_or((TmagStatus::EndOfStream, "end of scenario".to_owned()))?;
        *out = TmagBytes::from_vec(encode_frame(&frame).map_err(err(TmagStatus::Pipeline))?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tmag_scenario_free(scenario: *mut TmagScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Encodes a bus envelope in the broker wire format.
#[no_mangle]
pub unsafe extern "C" fn tmag_envelope_encode(
    topic: *const c_char,
    seq: u64,
    timestamp_ns: u64,
    payload: *const u8,
    len: usize,
    out: *mut TmagBytes,
) -> TmagStatus {
    guard(|| {
        if topic.is_null() {
            return Err(null("topic"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let topic = CStr::from_ptr(topic)
            .to_str()
            .map_err(|_| (TmagStatus::InvalidArgument, "topic is not UTF-8".to_owned()))?;
        let payload = slice(payload, len, "payload")?;
        let env = Envelope::new(topic, seq, timestamp_ns, payload.to_vec());
        *out = TmagBytes::from_vec(encode_envelope(&env).map_err(err(TmagStatus::InvalidArgument))?);
        Ok(())
    })
}

/// Releases bytes returned by the library and resets `bytes` to empty.
#[no_mangle]
pub unsafe extern "C" fn tmag_bytes_free(bytes: *mut TmagBytes) {
    let Some(b) = bytes.as_mut() else { return };
    if !b.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    }
    *b = TmagBytes::empty();
}

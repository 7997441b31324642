//! Run, replay and sweep harnesses and their CSV/JSON reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, SweepConfig};
use crate::geometry::LaneAssignment;
use crate::pipeline::{process_frame, run_in_process, PipelineConfig, PipelineError, PipelineState, ProcessReport};
use crate::safety::{
    compute_ssd_ft, design_ssd_ft, ft_to_m, should_warn, table_ssd_ft, SafetyError, SsdParams, DESIGN_SSD_TABLE,
};
use crate::sim::{write_file, GroundTruth, Recording, RecordingWriter, Scenario, ScenarioConfig, SimError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("{0} reports but {1} ground-truth frames")]
    Misaligned(usize, usize),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub const RUN_CSV_HEADER: &str =
    "seq,t_s,truth_lane,lane,distance_est_m,distance_truth_m,speed_est_mps,speed_truth_mps,warn,truth_warn";
pub const SWEEP_CSV_HEADER: &str = "set_speed_mps,runs,seed,pooled_mean_mps,mse,run_means_mps";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seq: u64,
    pub t_s: f64,
    pub truth_lane: Option<LaneAssignment>,
    /// Lane of the tracked detection, else of the first detection.
    pub lane: Option<LaneAssignment>,
    pub distance_est_m: Option<f64>,
    pub distance_truth_m: Option<f64>,
    pub speed_est_mps: Option<f64>,
    pub speed_truth_mps: Option<f64>,
    pub warn: bool,
    /// Whether the warning rule fires on the ground truth.
    pub truth_warn: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames: usize,
    pub speed_estimates: usize,
    pub mean_speed_mps: Option<f64>,
    /// Mean of `(estimate - truth)²` over frames with both.
    pub speed_mse: Option<f64>,
    pub warn_frames: usize,
    pub first_warn_seq: Option<u64>,
    pub truth_crossing_seq: Option<u64>,
}

impl RunSummary {
    pub fn from_rows(rows: &[RunRow]) -> Self {
        let estimates: Vec<f64> = rows.iter().filter_map(|r| r.speed_est_mps).collect();
        let errors: Vec<f64> = rows
            .iter()
            .filter_map(|r| Some((r.speed_est_mps? - r.speed_truth_mps?).powi(2)))
            .collect();
        Self {
            frames: rows.len(),
            speed_estimates: estimates.len(),
            mean_speed_mps: mean(&estimates),
            speed_mse: mean(&errors),
            warn_frames: rows.iter().filter(|r| r.warn).count(),
            first_warn_seq: rows.iter().find(|r| r.warn).map(|r| r.seq),
            truth_crossing_seq: rows.iter().find(|r| r.truth_warn == Some(true)).map(|r| r.seq),
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub rows: Vec<RunRow>,
    pub summary: RunSummary,
}

fn cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl RunReport {
    /// Pairs reports with ground truth (when available) frame by frame.
    pub fn build(
        reports: &[ProcessReport],
        truths: Option<&[GroundTruth]>,
        config: &PipelineConfig,
    ) -> Result<Self, ReportError> {
        if let Some(t) = truths {
            if t.len() != reports.len() {
                return Err(ReportError::Misaligned(reports.len(), t.len()));
            }
        }
        let mut rows = Vec::with_capacity(reports.len());
        for (i, r) in reports.iter().enumerate() {
            let truth = truths.map(|t| &t[i]);
            let truth_warn = truth
                .map(|t| -> Result<bool, SafetyError> {
                    if t.lane != config.monitored_lane {
                        return Ok(false);
                    }
                    Ok(should_warn(t.distance_m, t.speed_mps, config.mode, &config.warning())?.warn)
                })
                .transpose()?;
            rows.push(RunRow {
                seq: r.seq,
                t_s: r.timestamp_ns as f64 / 1e9,
                truth_lane: truth.map(|t| t.lane),
                lane: r.target.or((!r.lanes.is_empty()).then_some(0)).map(|i| r.lanes[i]),
                distance_est_m: r.distance_m,
                distance_truth_m: truth.map(|t| t.distance_m),
                speed_est_mps: r.speed_mps,
                speed_truth_mps: truth.map(|t| t.speed_mps),
                warn: r.warn,
                truth_warn,
            });
        }
        let summary = RunSummary::from_rows(&rows);
        Ok(Self {
            mode: config.mode.to_string(),
            rows,
            summary,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUN_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.seq,
                r.t_s,
                cell(r.truth_lane),
                cell(r.lane),
                cell(r.distance_est_m),
                cell(r.distance_truth_m),
                cell(r.speed_est_mps),
                cell(r.speed_truth_mps),
                r.warn,
                cell(r.truth_warn)
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Reports plus the raw per-frame telemetry of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub telemetry: Vec<ProcessReport>,
}

impl RunOutput {
    pub fn files(&self) -> Vec<(&'static str, Vec<u8>)> {
        vec![
            ("report.json", self.report.to_json().into_bytes()),
            ("report.csv", self.report.to_csv().into_bytes()),
            ("telemetry.csv", crate::pipeline::telemetry_csv(&self.telemetry).into_bytes()),
        ]
    }
}

/// Runs the full sensor → perception → LED graph on an in-process bus.
pub fn run_live(config: &Config, record: Option<&Path>) -> Result<RunOutput, ReportError> {
    config.validate()?;
    let recorder = record
        .map(|dir| RecordingWriter::create(dir, Some(&config.scenario), config.scenario.depth_unit_m))
        .transpose()?;
    let run = run_in_process(Scenario::new(config.scenario.clone())?, &config.pipeline, recorder)?;
    let report = RunReport::build(&run.reports, Some(&run.truths), &config.pipeline)?;
    Ok(RunOutput {
        report,
        telemetry: run.reports,
    })
}

/// Feeds scenario frames straight into `process_frame`, skipping the bus.
pub fn run_direct(scenario: &ScenarioConfig, pipeline: &PipelineConfig) -> Result<RunOutput, ReportError> {
    pipeline.validate()?;
    let mut state = PipelineState::new();
    let (mut reports, mut truths) = (Vec::new(), Vec::new());
    for (frame, truth) in Scenario::new(scenario.clone())? {
        let (r, s) = process_frame(&frame, state, pipeline)?;
        state = s;
        reports.push(r);
        truths.push(truth);
    }
    let report = RunReport::build(&reports, Some(&truths), pipeline)?;
    Ok(RunOutput {
        report,
        telemetry: reports,
    })
}

/// Re-runs a recording through `process_frame`.
pub fn replay(dir: &Path, pipeline: &PipelineConfig) -> Result<RunOutput, ReportError> {
    pipeline.validate()?;
    let rec = Recording::open(dir)?;
    let mut state = PipelineState::new();
    let mut reports = Vec::with_capacity(rec.len());
    let mut truths = Vec::with_capacity(rec.len());
    for i in 0..rec.len() {
        let (frame, truth) = rec.load(i)?;
        let (r, s) = process_frame(&frame, state, pipeline)?;
        state = s;
        reports.push(r);
        truths.extend(truth);
    }
    let truths = (truths.len() == reports.len() && !truths.is_empty()).then_some(truths.as_slice());
    let report = RunReport::build(&reports, truths, pipeline)?;
    Ok(RunOutput {
        report,
        telemetry: reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub set_speed_mps: f64,
    pub runs: u32,
    /// Seed of the first run; run `i` uses `seed + i`.
    pub seed: u64,
    pub run_means_mps: Vec<Option<f64>>,
    pub pooled_mean_mps: Option<f64>,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let means: Vec<String> = r.run_means_mps.iter().map(|m| cell(*m)).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.set_speed_mps,
                r.runs,
                r.seed,
                cell(r.pooled_mean_mps),
                cell(r.mse),
                means.join(";")
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn files(&self) -> Vec<(&'static str, Vec<u8>)> {
        vec![
            ("sweep.json", self.to_json().into_bytes()),
            ("sweep.csv", self.to_csv().into_bytes()),
        ]
    }
}

/// Runs `runs` scenarios per set speed, pooling estimates over frames.
pub fn sweep(
    scenario: &ScenarioConfig,
    pipeline: &PipelineConfig,
    sweep: &SweepConfig,
) -> Result<SweepReport, ReportError> {
    sweep.validate()?;
    let mut rows = Vec::new();
    for &speed in &sweep.speeds_mps {
        let mut run_means = Vec::new();
        let (mut estimates, mut errors) = (Vec::new(), Vec::new());
        for i in 0..sweep.runs {
            let mut sc = scenario.clone();
            sc.relative_speed_mps = speed;
            sc.seed = scenario.seed.wrapping_add(i as u64);
            let out = run_direct(&sc, pipeline)?;
            run_means.push(out.report.summary.mean_speed_mps);
            for r in &out.report.rows {
                if let Some(e) = r.speed_est_mps {
                    estimates.push(e);
                    errors.push((e - speed).powi(2));
                }
            }
        }
        rows.push(SweepRow {
            set_speed_mps: speed,
            runs: sweep.runs,
            seed: scenario.seed,
            run_means_mps: run_means,
            pooled_mean_mps: mean(&estimates),
            mse: mean(&errors),
        });
    }
    Ok(SweepReport { rows })
}

/// Writes all `files` into `dir`. Nothing is written unless the directory
/// can be created, and each file appears atomically.
pub fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Write {
        path: dir.to_owned(),
        source,
    })?;
    for (name, bytes) in files {
        write_file(&dir.join(name), bytes)?;
    }
    Ok(())
}

/// Continuous and table SSD at one speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SsdLine {
    pub speed_mph: f64,
    pub continuous_ft: f64,
    pub continuous_m: f64,
    pub table_ft: f64,
    pub table_m: f64,
}

pub fn ssd_line(speed_mph: f64, params: &SsdParams) -> Result<SsdLine, SafetyError> {
    let continuous_ft = compute_ssd_ft(speed_mph, params)?;
    let table_ft = if speed_mph == 0.0 {
        0.0
    } else {
        table_ssd_ft(speed_mph, params)?
    };
    Ok(SsdLine {
        speed_mph,
        continuous_ft,
        continuous_m: ft_to_m(continuous_ft),
        table_ft,
        table_m: ft_to_m(table_ft),
    })
}

/// Text for the `ssd` command: the value at `speed_mph` and/or every table
/// row, as aligned columns or CSV.
pub fn ssd_text(speed_mph: Option<f64>, table: bool, csv: bool, params: &SsdParams) -> Result<String, SafetyError> {
    let mut out = String::new();
    if let Some(v) = speed_mph {
        let l = ssd_line(v, params)?;
        if csv {
            out.push_str("speed_mph,continuous_ft,continuous_m,table_ft,table_m\n");
            out.push_str(&format!(
                "{},{:.2},{:.2},{},{:.2}\n",
                l.speed_mph, l.continuous_ft, l.continuous_m, l.table_ft, l.table_m
            ));
        } else {
            out.push_str(&format!(
                "speed {} mph: continuous {:.2} ft ({:.2} m), table {} ft ({:.2} m)\n",
                l.speed_mph, l.continuous_ft, l.continuous_m, l.table_ft, l.table_m
            ));
        }
    }
    if table {
        if csv {
            out.push_str("design_speed_mph,design_ssd_ft,computed_ssd_ft\n");
        } else {
            out.push_str(&format!("{:>10}  {:>10}  {:>12}\n", "speed_mph", "design_ft", "computed_ft"));
        }
        for (v, _) in DESIGN_SSD_TABLE {
            let design = design_ssd_ft(v as f64)?;
            let computed = compute_ssd_ft(v as f64, params)?;
            if csv {
                out.push_str(&format!("{v},{design},{computed:.2}\n"));
            } else {
                out.push_str(&format!("{v:>10}  {design:>10}  {computed:>12.2}\n"));
            }
        }
    }
    Ok(out)
}

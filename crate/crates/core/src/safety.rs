//! Stopping sight distance and the warn/no-warn rule.
//!
//! `SSD = 1.47·V·t + 1.075·V²/a` with `V` in mph, `t` the brake reaction time
//! in seconds and `a` the deceleration rate in ft/s²; the result is in feet.
//! The level-roadway design table is kept alongside for the table mode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 1 mph in m/s (exact by definition).
const MPH_IN_MPS: f64 = 0.44704;
/// 1 ft in m (exact by definition).
const FT_IN_M: f64 = 0.3048;

pub const DEFAULT_SIM_THRESHOLD_M: f64 = 0.3;

/// Design speed (mph) and designed stopping sight distance (ft) on level
/// roadways.
pub const DESIGN_SSD_TABLE: [(u32, u32); 14] = [
    (15, 80),
    (20, 115),
    (25, 155),
    (30, 200),
    (35, 250),
    (40, 305),
    (45, 360),
    (50, 425),
    (55, 495),
    (60, 570),
    (65, 645),
    (70, 730),
    (75, 820),
    (80, 910),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("speed must be finite and non-negative, got {0}")]
    InvalidSpeed(f64),
    #[error("{0} mph is above the 80 mph design table")]
    OutOfTable(f64),
    #[error("distance must be finite and positive, got {0}")]
    InvalidDistance(f64),
    #[error("unknown warning mode {0:?} (expected sim, field_continuous or field_table)")]
    UnknownMode(String),
    #[error("invalid SSD parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsdParams {
    pub t_reaction_s: f64,
    pub a_decel_ftps2: f64,
    /// Measured speeds this far above a design speed still use that row.
    pub table_speed_tolerance_mph: f64,
}

impl Default for SsdParams {
    fn default() -> Self {
        Self {
            t_reaction_s: 2.5,
            a_decel_ftps2: 11.2,
            table_speed_tolerance_mph: 0.5,
        }
    }
}

impl SsdParams {
    pub fn validate(&self) -> Result<(), SafetyError> {
        if !(self.t_reaction_s.is_finite() && self.t_reaction_s > 0.0) {
            return Err(SafetyError::InvalidParams("t_reaction_s must be positive"));
        }
        if !(self.a_decel_ftps2.is_finite() && self.a_decel_ftps2 > 0.0) {
            return Err(SafetyError::InvalidParams("a_decel_ftps2 must be positive"));
        }
        if !(self.table_speed_tolerance_mph.is_finite() && self.table_speed_tolerance_mph >= 0.0) {
            return Err(SafetyError::InvalidParams("table_speed_tolerance_mph must be non-negative"));
        }
        Ok(())
    }
}

pub fn mps_to_mph(v: f64) -> f64 {
    v / MPH_IN_MPS
}

pub fn mph_to_mps(v: f64) -> f64 {
    v * MPH_IN_MPS
}

pub fn m_to_ft(d: f64) -> f64 {
    d / FT_IN_M
}

pub fn ft_to_m(d: f64) -> f64 {
    d * FT_IN_M
}

/// Stopping sight distance in feet for `speed_mph`.
pub fn compute_ssd_ft(speed_mph: f64, p: &SsdParams) -> Result<f64, SafetyError> {
    if !speed_mph.is_finite() || speed_mph < 0.0 {
        return Err(SafetyError::InvalidSpeed(speed_mph));
    }
    p.validate()?;
    Ok(1.47 * speed_mph * p.t_reaction_s + 1.075 * speed_mph * speed_mph / p.a_decel_ftps2)
}

/// Designed SSD of the smallest table speed at or above `speed_mph`.
pub fn design_ssd_ft(speed_mph: f64) -> Result<f64, SafetyError> {
    if !speed_mph.is_finite() || speed_mph <= 0.0 {
        return Err(SafetyError::InvalidSpeed(speed_mph));
    }
    DESIGN_SSD_TABLE
        .iter()
        .find(|(v, _)| *v as f64 >= speed_mph)
        .map(|&(_, ssd)| ssd as f64)
        .ok_or(SafetyError::OutOfTable(speed_mph))
}

/// Table-mode SSD.
///
/// The row is looked up at `speed_mph - table_speed_tolerance_mph`, so a
/// measured speed a hair above a design speed keeps that row; the formula
/// value is a floor so the result never drops below the continuous SSD.
/// Above the table the formula is rounded up to 5 ft.
pub fn table_ssd_ft(speed_mph: f64, p: &SsdParams) -> Result<f64, SafetyError> {
    let ft = compute_ssd_ft(speed_mph, p)?;
    let lookup = (speed_mph - p.table_speed_tolerance_mph).max(f64::MIN_POSITIVE);
    match design_ssd_ft(lookup) {
        Ok(row) => Ok(row.max(ft)),
        Err(SafetyError::OutOfTable(_)) => Ok((ft / 5.0).ceil() * 5.0),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum WarningMode {
    /// Warn when the target is closer than a fixed proximity threshold.
    #[default]
    #[serde(rename = "sim", alias = "sim_proximity")]
    SimProximity,
    /// Warn when the target is inside the formula SSD at its closing speed.
    #[serde(rename = "field_continuous")]
    FieldContinuous,
    /// Same, using the design table.
    #[serde(rename = "field_table")]
    FieldTable,
}

impl WarningMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            WarningMode::SimProximity => "sim",
            WarningMode::FieldContinuous => "field_continuous",
            WarningMode::FieldTable => "field_table",
        }
    }

    pub fn is_field(&self) -> bool {
        !matches!(self, WarningMode::SimProximity)
    }
}

impl fmt::Display for WarningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WarningMode {
    type Err = SafetyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" | "sim_proximity" => Ok(WarningMode::SimProximity),
            "field_continuous" => Ok(WarningMode::FieldContinuous),
            "field_table" => Ok(WarningMode::FieldTable),
            other => Err(SafetyError::UnknownMode(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarningConfig {
    pub sim_threshold_m: f64,
    pub ssd: SsdParams,
}

impl Default for WarningConfig {
    fn default() -> Self {
        Self {
            sim_threshold_m: DEFAULT_SIM_THRESHOLD_M,
            ssd: SsdParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningDecision {
    pub warn: bool,
    pub mode: WarningMode,
    pub threshold_m: f64,
    pub distance_m: f64,
    pub closing_speed_mps: f64,
    pub reason: String,
}

/// Evaluates the warning rule for one range/speed pair.
///
/// In the field modes only a positive closing speed can warn; a receding or
/// stationary target has a zero threshold.
pub fn should_warn(
    distance_m: f64,
    speed_mps: f64,
    mode: WarningMode,
    config: &WarningConfig,
) -> Result<WarningDecision, SafetyError> {
    if !distance_m.is_finite() || distance_m <= 0.0 {
        return Err(SafetyError::InvalidDistance(distance_m));
    }
    if !speed_mps.is_finite() {
        return Err(SafetyError::InvalidSpeed(speed_mps));
    }
    let closing = (-speed_mps).max(0.0);
    let (threshold_m, reason) = match mode {
        WarningMode::SimProximity => (config.sim_threshold_m, "proximity threshold".to_owned()),
        WarningMode::FieldContinuous | WarningMode::FieldTable if closing == 0.0 => {
            (0.0, "target not closing".to_owned())
        }
        WarningMode::FieldContinuous => {
            let mph = mps_to_mph(closing);
            let ft = compute_ssd_ft(mph, &config.ssd)?;
            (ft_to_m(ft), format!("SSD {ft:.2} ft at {mph:.2} mph"))
        }
        WarningMode::FieldTable => {
            let mph = mps_to_mph(closing);
            let ft = table_ssd_ft(mph, &config.ssd)?;
            (ft_to_m(ft), format!("design SSD {ft:.0} ft at {mph:.2} mph"))
        }
    };
    let warn = distance_m < threshold_m;
    let relation = if warn { "<" } else { ">=" };
    Ok(WarningDecision {
        warn,
        mode,
        threshold_m,
        distance_m,
        closing_speed_mps: closing,
        reason: format!("{distance_m:.3} m {relation} {threshold_m:.3} m ({reason})"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> SsdParams {
        SsdParams::default()
    }

    #[test]
    fn ssd_spot_values() {
        assert_eq!(compute_ssd_ft(0.0, &p()).unwrap(), 0.0);
        // 1.47·60·2.5 + 1.075·3600/11.2 = 220.5 + 345.5357
        assert!((compute_ssd_ft(60.0, &p()).unwrap() - 566.04).abs() <= 0.01);
        // 1.47·15·2.5 + 1.075·225/11.2 = 55.125 + 21.5960
        assert!((compute_ssd_ft(15.0, &p()).unwrap() - 76.72).abs() <= 0.01);
    }

    #[test]
    fn ssd_rejects_bad_speed() {
        assert!(compute_ssd_ft(-1.0, &p()).is_err());
        assert!(compute_ssd_ft(f64::NAN, &p()).is_err());
        assert!(compute_ssd_ft(f64::INFINITY, &p()).is_err());
        let bad = SsdParams {
            t_reaction_s: 0.0,
            ..p()
        };
        assert!(compute_ssd_ft(10.0, &bad).is_err());
    }

    #[test]
    fn table_lookup() {
        assert_eq!(design_ssd_ft(15.0).unwrap(), 80.0);
        assert_eq!(design_ssd_ft(45.0).unwrap(), 360.0);
        assert_eq!(design_ssd_ft(52.0).unwrap(), 495.0);
        assert_eq!(design_ssd_ft(3.0).unwrap(), 80.0);
        assert_eq!(design_ssd_ft(80.0).unwrap(), 910.0);
        assert_eq!(design_ssd_ft(80.5), Err(SafetyError::OutOfTable(80.5)));
        assert!(design_ssd_ft(0.0).is_err());
    }

    #[test]
    fn table_mode_tolerates_small_overestimates() {
        assert_eq!(table_ssd_ft(60.0, &p()).unwrap(), 570.0);
        assert_eq!(table_ssd_ft(60.2, &p()).unwrap(), 570.0);
        let f = compute_ssd_ft(60.45, &p()).unwrap();
        assert_eq!(table_ssd_ft(60.45, &p()).unwrap(), f.max(570.0));
        assert_eq!(table_ssd_ft(60.6, &p()).unwrap(), 645.0);
        assert_eq!(table_ssd_ft(0.2, &p()).unwrap(), 80.0);
        assert_eq!(table_ssd_ft(80.3, &p()).unwrap(), 910.0_f64.max(compute_ssd_ft(80.3, &p()).unwrap()));
        assert_eq!(table_ssd_ft(85.0, &p()).unwrap(), 1010.0);
        let exact = SsdParams {
            table_speed_tolerance_mph: 0.0,
            ..p()
        };
        assert_eq!(table_ssd_ft(60.01, &exact).unwrap(), 645.0);
    }

    #[test]
    fn table_rows_are_formula_rounded_up_to_five_feet() {
        for (v, ssd) in DESIGN_SSD_TABLE {
            let ft = compute_ssd_ft(v as f64, &p()).unwrap();
            assert_eq!((ft / 5.0).ceil() * 5.0, ssd as f64, "row {v} mph");
        }
    }

    #[test]
    fn table_is_strictly_increasing() {
        for w in DESIGN_SSD_TABLE.windows(2) {
            assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
        }
    }

    #[test]
    fn conversions() {
        assert_eq!(mps_to_mph(0.0), 0.0);
        assert_eq!(m_to_ft(0.0), 0.0);
        assert_eq!(ft_to_m(0.0), 0.0);
        assert!((mps_to_mph(26.8224) - 60.0).abs() <= 1e-9);
        assert!((m_to_ft(ft_to_m(910.0)) - 910.0).abs() <= 1e-9);
        assert!((mps_to_mph(1.0) - 2.2369362920544).abs() < 1e-12);
        assert!((m_to_ft(1.0) - 3.2808398950131).abs() < 1e-12);
    }

    #[test]
    fn sim_mode_uses_proximity_threshold() {
        let d = should_warn(0.25, 0.0, WarningMode::SimProximity, &WarningConfig::default()).unwrap();
        assert!(d.warn);
        assert_eq!(d.threshold_m, 0.3);
        let d = should_warn(0.3, -5.0, WarningMode::SimProximity, &WarningConfig::default()).unwrap();
        assert!(!d.warn);
    }

    #[test]
    fn field_continuous_threshold_at_sixty_mph() {
        let cfg = WarningConfig::default();
        let v = -mph_to_mps(60.0);
        let far = should_warn(180.0, v, WarningMode::FieldContinuous, &cfg).unwrap();
        assert!(!far.warn);
        assert!((far.threshold_m - 172.53).abs() < 0.01);
        assert!(should_warn(170.0, v, WarningMode::FieldContinuous, &cfg).unwrap().warn);
        let table = should_warn(173.0, v, WarningMode::FieldTable, &cfg).unwrap();
        assert!(table.warn);
        assert!((table.threshold_m - 173.736).abs() < 1e-9);
    }

    #[test]
    fn receding_target_never_warns_in_field_modes() {
        for mode in [WarningMode::FieldContinuous, WarningMode::FieldTable] {
            let d = should_warn(0.01, 0.2, mode, &WarningConfig::default()).unwrap();
            assert!(!d.warn);
            assert_eq!(d.closing_speed_mps, 0.0);
        }
    }

    #[test]
    fn bad_inputs_and_modes() {
        let cfg = WarningConfig::default();
        assert!(should_warn(0.0, 0.0, WarningMode::SimProximity, &cfg).is_err());
        assert!(should_warn(1.0, f64::NAN, WarningMode::SimProximity, &cfg).is_err());
        assert_eq!(
            "bogus".parse::<WarningMode>(),
            Err(SafetyError::UnknownMode("bogus".into()))
        );
        assert_eq!("field_table".parse::<WarningMode>().unwrap(), WarningMode::FieldTable);
    }

    proptest! {
        #[test]
        fn ssd_strictly_increasing(a in 0.0f64..150.0, b in 0.0f64..150.0) {
            prop_assume!(a < b);
            prop_assert!(compute_ssd_ft(a, &p()).unwrap() < compute_ssd_ft(b, &p()).unwrap());
        }

        #[test]
        fn table_is_conservative(v in 0.01f64..80.0) {
            prop_assert!(design_ssd_ft(v).unwrap() >= compute_ssd_ft(v, &p()).unwrap());
        }

        #[test]
        fn table_mode_is_monotone_in_speed(a in 0.01f64..150.0, b in 0.01f64..150.0) {
            prop_assume!(a < b);
            prop_assert!(table_ssd_ft(a, &p()).unwrap() <= table_ssd_ft(b, &p()).unwrap());
        }

        #[test]
        fn table_mode_flags_whatever_continuous_flags(d in 0.1f64..400.0, v in -60.0f64..5.0) {
            let cfg = WarningConfig::default();
            let c = should_warn(d, v, WarningMode::FieldContinuous, &cfg).unwrap();
            let t = should_warn(d, v, WarningMode::FieldTable, &cfg).unwrap();
            prop_assert!(!c.warn || t.warn);
        }

        #[test]
        fn warning_is_monotone(
            d in 0.1f64..400.0, d2 in 0.1f64..400.0,
            v in -60.0f64..5.0, v2 in -60.0f64..5.0,
            mode in prop_oneof![Just(WarningMode::SimProximity), Just(WarningMode::FieldContinuous), Just(WarningMode::FieldTable)],
        ) {
            let cfg = WarningConfig::default();
            let w = |d, v| should_warn(d, v, mode, &cfg).unwrap().warn;
            // Closer at the same speed.
            if w(d, v) && d2 < d { prop_assert!(w(d2, v)); }
            // Faster closing (more negative speed) at the same distance.
            if w(d, v) && v2 < v { prop_assert!(w(d, v2)); }
        }

        #[test]
        fn decision_is_pure_and_consistent(d in 0.01f64..400.0, v in -60.0f64..60.0) {
            let cfg = WarningConfig::default();
            for mode in [WarningMode::SimProximity, WarningMode::FieldContinuous, WarningMode::FieldTable] {
                let a = should_warn(d, v, mode, &cfg).unwrap();
                prop_assert_eq!(&a, &should_warn(d, v, mode, &cfg).unwrap());
                prop_assert_eq!(a.warn, a.distance_m < a.threshold_m);
            }
        }
    }
}

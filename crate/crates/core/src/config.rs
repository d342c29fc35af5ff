//! Scenario configuration: one flat JSON document, every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::DetectionParams;
use crate::geometry::Vec3;
use crate::kinematics::{DeltaParams, DEFAULT_THETA_MAX, DEFAULT_THETA_MIN};
use crate::tracking::TrackerConfig;
use crate::xray::{NoiseMode, ScannerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("cannot read configuration: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse configuration: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Oracle,
    Standin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Deterministic,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocitySource {
    /// Speed estimated from the belt encoder.
    Encoder,
    /// The true belt speed.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_items: usize,
    pub battery_fraction: f64,
    pub conveyor_speed_mm_s: f64,
    pub spawn_headway_s: f64,
    /// Travel coordinate of the first item's leading edge.
    pub first_item_mm: f64,
    pub seed: u64,
    pub detector: DetectorMode,
    pub noise: NoiseKind,

    pub line_rate_hz: f64,
    pub pixel_pitch_mm: f64,
    pub width_px: usize,
    pub i0_low: f64,
    pub i0_high: f64,
    pub frame_height_lines: usize,
    pub bin_factor: usize,

    pub base_radius_mm: f64,
    pub eef_radius_mm: f64,
    pub arm_length_mm: f64,
    pub forearm_length_mm: f64,
    pub reduction_ratio: f64,
    pub theta_min_rad: f64,
    pub theta_max_rad: f64,
    pub robot_center_x_mm: f64,
    pub robot_center_y_mm: f64,
    pub reach_mm: f64,
    pub belt_z_mm: f64,
    pub home: Vec3,
    pub bin: Vec3,
    pub grasp_tol_mm: f64,
    pub grasp_z_tol_mm: f64,

    /// Duration of the approach and the place legs.
    pub t_total_s: f64,
    pub homing_s: f64,
    pub settle_s: f64,
    pub h_mm: f64,
    pub alpha: f64,
    pub min_lead_s: f64,
    pub dedup_mm: f64,

    pub encoder_ticks_per_mm: f64,
    pub encoder_rate_hz: f64,
    pub speed_window_s: f64,
    pub velocity_source: VelocitySource,

    #[serde(flatten)]
    pub detection: DetectionParams,
    pub iou_threshold: f64,

    pub dt_s: f64,
    /// Items are gone once past `robot_center_x_mm` plus this distance.
    pub belt_exit_margin_mm: f64,
    pub output_dir: PathBuf,
    pub emit_frames: bool,
    pub emit_traj: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let delta = DeltaParams::thl();
        let scanner = ScannerConfig::default();
        let tracker = TrackerConfig::default();
        Self {
            n_items: 120,
            battery_fraction: 0.7,
            conveyor_speed_mm_s: 350.0,
            spawn_headway_s: 3.0,
            first_item_mm: 100.0,
            seed: 0,
            detector: DetectorMode::Oracle,
            noise: NoiseKind::Deterministic,
            line_rate_hz: scanner.line_rate_hz,
            pixel_pitch_mm: scanner.pixel_pitch_mm,
            width_px: scanner.width_px,
            i0_low: scanner.i0_low,
            i0_high: scanner.i0_high,
            frame_height_lines: scanner.frame_height_lines,
            bin_factor: scanner.bin_factor,
            base_radius_mm: delta.base_radius,
            eef_radius_mm: delta.eef_radius,
            arm_length_mm: delta.arm_length,
            forearm_length_mm: delta.forearm_length,
            reduction_ratio: delta.reduction_ratio,
            theta_min_rad: DEFAULT_THETA_MIN,
            theta_max_rad: DEFAULT_THETA_MAX,
            robot_center_x_mm: tracker.robot_center_x_mm,
            robot_center_y_mm: tracker.robot_center_y_mm,
            reach_mm: tracker.reach_mm,
            belt_z_mm: tracker.belt_z_mm,
            home: Vec3::new(0.0, 0.0, -800.0),
            bin: tracker.place,
            grasp_tol_mm: 10.0,
            grasp_z_tol_mm: 5.0,
            t_total_s: 1.0,
            homing_s: 0.5,
            settle_s: 0.05,
            h_mm: 100.0,
            alpha: 0.77,
            min_lead_s: tracker.min_lead_s,
            dedup_mm: tracker.dedup_mm,
            encoder_ticks_per_mm: 10.0,
            encoder_rate_hz: 100.0,
            speed_window_s: 1.0,
            velocity_source: VelocitySource::Encoder,
            detection: DetectionParams::default(),
            iou_threshold: 0.5,
            dt_s: 0.001,
            belt_exit_margin_mm: 1000.0,
            output_dir: PathBuf::from("out"),
            emit_frames: false,
            emit_traj: false,
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn scanner(&self) -> ScannerConfig {
        ScannerConfig {
            line_rate_hz: self.line_rate_hz,
            pixel_pitch_mm: self.pixel_pitch_mm,
            width_px: self.width_px,
            i0_low: self.i0_low,
            i0_high: self.i0_high,
            noise: match self.noise {
                NoiseKind::Deterministic => NoiseMode::Deterministic,
                NoiseKind::Poisson => NoiseMode::Poisson { seed: self.seed },
            },
            frame_height_lines: self.frame_height_lines,
            bin_factor: self.bin_factor,
        }
    }

    pub fn delta(&self) -> DeltaParams {
        DeltaParams {
            base_radius: self.base_radius_mm,
            eef_radius: self.eef_radius_mm,
            arm_length: self.arm_length_mm,
            forearm_length: self.forearm_length_mm,
            reduction_ratio: self.reduction_ratio,
            ..DeltaParams::thl()
        }
        .with_limits(self.theta_min_rad, self.theta_max_rad)
    }

    /// Robot occupancy after the pick instant: place leg, homing and settle.
    pub fn cycle_time_s(&self) -> f64 {
        self.t_total_s + self.homing_s + self.settle_s
    }

    pub fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            robot_center_x_mm: self.robot_center_x_mm,
            robot_center_y_mm: self.robot_center_y_mm,
            reach_mm: self.reach_mm,
            min_lead_s: self.min_lead_s,
            traj_lead_s: self.t_total_s,
            cycle_time_s: self.cycle_time_s(),
            dedup_mm: self.dedup_mm,
            belt_z_mm: self.belt_z_mm,
            place: self.bin,
            ..TrackerConfig::default()
        }
    }

    /// Number of battery-carrying items, `round(n · fraction)`.
    pub fn battery_items(&self) -> usize {
        (self.n_items as f64 * self.battery_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::ConfigInvalid(m));
        if !(0.0..=1.0).contains(&self.battery_fraction) {
            return bad(format!("battery_fraction {} outside [0, 1]", self.battery_fraction));
        }
        for (name, v) in [
            ("conveyor_speed_mm_s", self.conveyor_speed_mm_s),
            ("spawn_headway_s", self.spawn_headway_s),
            ("t_total_s", self.t_total_s),
            ("homing_s", self.homing_s),
            ("h_mm", self.h_mm),
            ("dt_s", self.dt_s),
            ("reach_mm", self.reach_mm),
            ("encoder_ticks_per_mm", self.encoder_ticks_per_mm),
            ("encoder_rate_hz", self.encoder_rate_hz),
            ("speed_window_s", self.speed_window_s),
            ("grasp_tol_mm", self.grasp_tol_mm),
            ("grasp_z_tol_mm", self.grasp_z_tol_mm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("settle_s", self.settle_s), ("min_lead_s", self.min_lead_s), ("first_item_mm", self.first_item_mm)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return bad("iou_threshold must be in (0, 1)".into());
        }
        self.scanner()
            .validate()
            .or_else(|e| bad(e.to_string()))?;
        let row_mm = self.conveyor_speed_mm_s / self.line_rate_hz;
        if (row_mm - self.pixel_pitch_mm).abs() > 1e-9 * self.pixel_pitch_mm {
            return bad(format!(
                "belt moves {row_mm} mm per line but pixels are {} mm wide; pixels must be square",
                self.pixel_pitch_mm
            ));
        }
        self.delta().validate().or_else(|e| bad(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ScenarioConfig::default();
        c.validate().unwrap();
        assert_eq!(c.battery_items(), 84);
        assert_eq!(c.cycle_time_s(), 1.55);
        assert_eq!(c.scanner(), ScannerConfig::default());
    }

    #[test]
    fn flat_json_with_overrides() {
        let c: ScenarioConfig =
            serde_json::from_str(r#"{"n_items": 5, "background_threshold": 240, "detector": "standin"}"#).unwrap();
        assert_eq!(c.n_items, 5);
        assert_eq!(c.detection.background_threshold, 240);
        assert_eq!(c.detector, DetectorMode::Standin);
        assert_eq!(c.conveyor_speed_mm_s, 350.0);
        let back: ScenarioConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values() {
        let c = ScenarioConfig { battery_fraction: 1.5, ..Default::default() };
        assert!(matches!(c.validate(), Err(ConfigError::ConfigInvalid(_))));
        let c = ScenarioConfig { conveyor_speed_mm_s: 300.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ScenarioConfig { alpha: -0.1, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ScenarioConfig { bin_factor: 3, ..Default::default() };
        assert!(c.validate().is_err());
    }
}

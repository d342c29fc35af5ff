//! Conveyor tracking: image boxes to belt coordinates, encoder speed
//! estimation, position prediction and pick scheduling.
//!
//! Belt frame: `x` along motion with the origin on the detector line, `y`
//! across the belt from its edge. The robot frame is the belt frame shifted
//! by the robot centre, with `z` measured from the robot base.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{BoundingBox, DetectionRecord};
use crate::geometry::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum TrackingError {
    #[error("speed window must be positive and covered by encoder history")]
    NoMotionWindow,
    #[error("item {item} cannot be picked: {reason}")]
    Infeasible { item: u64, reason: String },
}

/// Box centre and size in millimetres: `(x0, y0, w, h)` with `x0` the travel
/// coordinate of the centre and `w` measured across the belt.
pub fn image_to_world(b: &BoundingBox, frame_origin_mm: f64, mm_per_px: f64) -> (f64, f64, f64, f64) {
    (
        frame_origin_mm + b.y_center * mm_per_px,
        b.x_center * mm_per_px,
        b.width * mm_per_px,
        b.height * mm_per_px,
    )
}

/// `(x0 + v·t_p, y0)`
pub fn predict_position(x0: f64, y0: f64, v: f64, t_p: f64) -> (f64, f64) {
    (x0 + v * t_p, y0)
}

pub fn speed_from_ticks(delta_ticks: u64, ticks_per_mm: f64, window_s: f64) -> Result<f64, TrackingError> {
    if !(window_s > 0.0) {
        return Err(TrackingError::NoMotionWindow);
    }
    Ok(delta_ticks as f64 / (ticks_per_mm * window_s))
}

/// Rotary encoder on the belt drive, read at a fixed rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub ticks_per_mm: f64,
    pub sample_rate_hz: f64,
    pub tick_count: u64,
    pub last_sample_time: f64,
    history: VecDeque<(f64, u64)>,
    history_len: usize,
    next_sample: u64,
}

impl Default for EncoderModel {
    fn default() -> Self {
        Self::new(10.0, 100.0, 2.0)
    }
}

impl EncoderModel {
    /// Keeps enough samples to cover `history_s` seconds.
    pub fn new(ticks_per_mm: f64, sample_rate_hz: f64, history_s: f64) -> Self {
        Self {
            ticks_per_mm,
            sample_rate_hz,
            tick_count: 0,
            last_sample_time: 0.0,
            history: VecDeque::new(),
            history_len: (history_s * sample_rate_hz).ceil() as usize + 1,
            next_sample: 0,
        }
    }

    /// Records one reading of total belt travel.
    pub fn sample(&mut self, t: f64, travel_mm: f64) {
        let ticks = (travel_mm * self.ticks_per_mm + 1e-9).floor().max(0.0) as u64;
        self.tick_count = self.tick_count.max(ticks);
        self.last_sample_time = t;
        self.history.push_back((t, self.tick_count));
        if self.history.len() > self.history_len {
            self.history.pop_front();
        }
    }

    /// Takes every scheduled reading up to time `t`.
    pub fn advance_to(&mut self, t: f64, travel_at: impl Fn(f64) -> f64) {
        loop {
            let ts = self.next_sample as f64 / self.sample_rate_hz;
            if ts > t + 1e-12 {
                break;
            }
            self.sample(ts, travel_at(ts));
            self.next_sample += 1;
        }
    }

    /// Quantization bound on [`speed_from_encoder`] for a window.
    pub fn speed_error_bound(&self, window_s: f64) -> f64 {
        1.0 / (self.ticks_per_mm * window_s)
    }
}

/// Mean speed over the most recent `window_s` of encoder history.
pub fn speed_from_encoder(enc: &EncoderModel, window_s: f64) -> Result<f64, TrackingError> {
    if !(window_s > 0.0) {
        return Err(TrackingError::NoMotionWindow);
    }
    let &(t1, n1) = enc.history.back().ok_or(TrackingError::NoMotionWindow)?;
    let &(t0, n0) = enc
        .history
        .iter()
        .find(|(t, _)| *t >= t1 - window_s - 1e-9)
        .expect("history is non-empty");
    speed_from_ticks(n1 - n0, enc.ticks_per_mm, t1 - t0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldItem {
    pub id: u64,
    /// Belt-frame centre at `t0`.
    pub x0: f64,
    pub y0: f64,
    /// Across the belt.
    pub width: f64,
    /// Along travel.
    pub height: f64,
    pub v: f64,
    pub t0: f64,
    pub has_battery: bool,
}

impl WorldItem {
    pub fn position_at(&self, t: f64) -> (f64, f64) {
        predict_position(self.x0, self.y0, self.v, t - self.t0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PickCommand {
    pub item_id: u64,
    /// Robot frame, on the belt plane.
    pub pick: Vec3,
    pub t_pick: f64,
    pub place: Vec3,
    pub w_mm: f64,
    pub h_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub robot_center_x_mm: f64,
    pub robot_center_y_mm: f64,
    pub reach_mm: f64,
    pub min_lead_s: f64,
    /// Time the robot needs to reach a pick point from home.
    pub traj_lead_s: f64,
    /// Robot occupancy after the pick instant.
    pub cycle_time_s: f64,
    pub dedup_mm: f64,
    pub belt_z_mm: f64,
    pub place: Vec3,
    /// Boxes within this many pixels of the frame's leading or trailing row
    /// are treated as cut by the frame border.
    pub edge_margin_px: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            robot_center_x_mm: 2000.0,
            robot_center_y_mm: 400.0,
            reach_mm: 380.0,
            min_lead_s: 0.2,
            traj_lead_s: 1.0,
            cycle_time_s: 1.55,
            dedup_mm: 5.0,
            belt_z_mm: -900.0,
            place: Vec3::new(0.0, -400.0, -900.0),
            edge_margin_px: 1.0,
        }
    }
}

impl TrackerConfig {
    pub fn to_robot_frame(&self, x: f64, y: f64) -> Vec3 {
        Vec3::new(x - self.robot_center_x_mm, y - self.robot_center_y_mm, self.belt_z_mm)
    }
}

/// Aims for the instant the item centre crosses the robot centre line, or
/// the earliest admissible time after it.
pub fn schedule_pick(
    item: &WorldItem,
    cfg: &TrackerConfig,
    robot_busy_until: f64,
    now: f64,
) -> Result<PickCommand, TrackingError> {
    let infeasible = |reason: String| TrackingError::Infeasible { item: item.id, reason };
    if !item.has_battery {
        return Err(infeasible("item has no battery".into()));
    }
    let dy = item.y0 - cfg.robot_center_y_mm;
    if dy.abs() > cfg.reach_mm {
        return Err(infeasible(format!("lateral offset {dy:.1} mm exceeds reach")));
    }
    let half_chord = (cfg.reach_mm * cfg.reach_mm - dy * dy).sqrt();
    let t_cross = item.t0 + (cfg.robot_center_x_mm - item.x0) / item.v;
    let t_exit = t_cross + half_chord / item.v;
    let t_free = (now + cfg.min_lead_s).max(robot_busy_until + cfg.traj_lead_s);
    let t_pick = t_free.max(t_cross);
    if t_pick > t_exit {
        return Err(infeasible(format!(
            "robot free at {t_free:.3} s, item leaves reach at {t_exit:.3} s"
        )));
    }
    let (x, y) = item.position_at(t_pick);
    Ok(PickCommand {
        item_id: item.id,
        pick: cfg.to_robot_frame(x, y),
        t_pick,
        place: cfg.place,
        w_mm: item.width,
        h_mm: item.height,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleStatus {
    Scheduled,
    Infeasible,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleLogRow {
    pub item_id: u64,
    pub x0: f64,
    pub y0: f64,
    pub v: f64,
    pub t_pick: Option<f64>,
    pub status: ScheduleStatus,
}

/// Outcome of feeding one detection record to the tracker.
#[derive(Debug, Clone, PartialEq)]
pub enum TrackEvent {
    Scheduled(WorldItem, PickCommand),
    Infeasible(WorldItem, String),
}

/// Time and total belt travel at which a frame's last line was read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameStamp {
    pub t0: f64,
    pub travel_mm: f64,
}

/// Single-owner tracking state fed by frame-ordered detection records.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    items: Vec<WorldItem>,
    busy_until: f64,
    reservations: Vec<(u64, f64, f64)>,
    log: Vec<ScheduleLogRow>,
    next_id: u64,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            items: Vec::new(),
            busy_until: f64::NEG_INFINITY,
            reservations: Vec::new(),
            log: Vec::new(),
            next_id: 1,
        }
    }

    pub fn items(&self) -> &[WorldItem] {
        &self.items
    }

    pub fn log(&self) -> &[ScheduleLogRow] {
        &self.log
    }

    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }

    /// Robot-reported occupancy; only ever extends the local estimate.
    pub fn observe_busy_until(&mut self, t: f64) {
        self.busy_until = self.busy_until.max(t);
    }

    /// Frees the reservation of a rejected command.
    pub fn on_reject(&mut self, item_id: u64) {
        if let Some(pos) = self.reservations.iter().position(|r| r.0 == item_id) {
            let (_, prev, _) = self.reservations.remove(pos);
            if pos == self.reservations.len() {
                self.busy_until = prev;
            }
        }
        if let Some(row) = self.log.iter_mut().rev().find(|r| r.item_id == item_id) {
            row.status = ScheduleStatus::Rejected;
        }
    }

    fn is_cut_by_border(&self, b: &BoundingBox, rec: &DetectionRecord) -> bool {
        let m = self.cfg.edge_margin_px;
        b.top() <= m || b.bottom() >= rec.frame_height_px as f64 - m
    }

    fn is_duplicate(&self, x0: f64, y0: f64, t0: f64) -> bool {
        self.items.iter().any(|it| {
            let (x, y) = it.position_at(t0);
            (x - x0).hypot(y - y0) < self.cfg.dedup_mm
        })
    }

    /// Registers battery-carrying devices of one frame and schedules picks
    /// for new ones.
    pub fn ingest(&mut self, rec: &DetectionRecord, stamp: FrameStamp, v: f64, now: f64) -> Vec<TrackEvent> {
        let mut events = Vec::new();
        for report in rec.reports.iter().filter(|r| r.has_battery) {
            if self.is_cut_by_border(&report.device, rec) {
                continue;
            }
            let (u, y0, w, h) = image_to_world(&report.device, rec.origin_mm, rec.mm_per_px);
            let x0 = stamp.travel_mm - u;
            if self.is_duplicate(x0, y0, stamp.t0) {
                continue;
            }
            let item = WorldItem {
                id: self.next_id,
                x0,
                y0,
                width: w,
                height: h,
                v,
                t0: stamp.t0,
                has_battery: true,
            };
            self.next_id += 1;
            self.items.push(item);
            match schedule_pick(&item, &self.cfg, self.busy_until, now) {
                Ok(cmd) => {
                    let prev = self.busy_until;
                    self.busy_until = cmd.t_pick + self.cfg.cycle_time_s;
                    self.reservations.push((item.id, prev, self.busy_until));
                    self.log.push(ScheduleLogRow {
                        item_id: item.id,
                        x0,
                        y0,
                        v,
                        t_pick: Some(cmd.t_pick),
                        status: ScheduleStatus::Scheduled,
                    });
                    events.push(TrackEvent::Scheduled(item, cmd));
                }
                Err(TrackingError::Infeasible { reason, .. }) => {
                    self.log.push(ScheduleLogRow {
                        item_id: item.id,
                        x0,
                        y0,
                        v,
                        t_pick: None,
                        status: ScheduleStatus::Infeasible,
                    });
                    events.push(TrackEvent::Infeasible(item, reason));
                }
                Err(e) => unreachable!("{e}"),
            }
        }
        events
    }

    /// `item_id,x0,y0,v,t_pick,status`
    pub fn write_log_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["item_id", "x0", "y0", "v", "t_pick", "status"])?;
        for r in &self.log {
            let status = match r.status {
                ScheduleStatus::Scheduled => "scheduled",
                ScheduleStatus::Infeasible => "infeasible",
                ScheduleStatus::Rejected => "rejected",
            };
            w.write_record([
                r.item_id.to_string(),
                r.x0.to_string(),
                r.y0.to_string(),
                r.v.to_string(),
                r.t_pick.map(|t| t.to_string()).unwrap_or_default(),
                status.to_string(),
            ])?;
        }
        w.flush()
    }
}

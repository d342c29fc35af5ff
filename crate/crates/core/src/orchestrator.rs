//! Fixed-step simulation of the sorting line: belt, scanner, detector,
//! tracker, robot and the message link between the vision and robot sides.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, DetectorMode, ScenarioConfig, VelocitySource};
use crate::detection::{DetectionError, DetectionProvider, OracleDetector, StandInDetector};
use crate::geometry::Vec3;
use crate::kinematics::{forward_kinematics, DeltaParams};
use crate::protocol::{read_message, write_message, ByteQueue, ProtocolError, RobotFsmState, WireMessage};
use crate::scene::{BatteryClass, BatteryInstance, DeviceInstance, Rect, Scene};
use crate::tracking::{speed_from_encoder, EncoderModel, FrameStamp, TrackEvent, Tracker, TrackerConfig};
use crate::trajectory::{build_pi_path, plan_pick_place, JointTrajectory, TrajectoryError};
use crate::xray::{export_frame, DualEnergyFrame, FrameCadence, FrameWindow, ImagingError, LineBuffer, Scanner};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("robot setup: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("protocol violation: {0}")]
    UnexpectedMessage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Footprint, thickness and material of each battery fixture.
pub fn battery_fixture(class: BatteryClass) -> (f64, f64, f64, &'static str) {
    match class {
        BatteryClass::Cylindrical => (18.0, 65.0, 18.0, "lithium_cell"),
        BatteryClass::Pouch => (40.0, 60.0, 5.0, "lithium_cell"),
        BatteryClass::Button => (12.0, 12.0, 3.0, "steel"),
        BatteryClass::Other => (15.0, 30.0, 6.0, "lithium_cell"),
    }
}

/// Seeded item stream: one device every `spawn_headway_s`, exactly
/// `round(n · battery_fraction)` of them carrying one battery.
pub fn generate_scene(cfg: &ScenarioConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_items;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut carries = vec![false; n];
    for &i in &order[..cfg.battery_items().min(n)] {
        carries[i] = true;
    }
    let pitch = cfg.spawn_headway_s * cfg.conveyor_speed_mm_s;
    let devices = (0..n)
        .map(|i| {
            let length = rng.random_range(100.0..160.0);
            let width = rng.random_range(80.0..160.0);
            let yc = cfg.robot_center_y_mm + rng.random_range(-200.0..200.0);
            let x0 = cfg.first_item_mm + i as f64 * pitch;
            let rect = Rect::new(x0, x0 + length, yc - 0.5 * width, yc + 0.5 * width);
            let (thickness, material) = if rng.random_bool(0.5) { (8.0, "plastic") } else { (3.0, "pcb") };
            let mut batteries = Vec::new();
            if carries[i] {
                let class = BatteryClass::ALL[rng.random_range(0..4)];
                let (a, b, t, m) = battery_fixture(class);
                let (mut along, mut across) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
                if along + 10.0 > length || across + 10.0 > width {
                    std::mem::swap(&mut along, &mut across);
                }
                let bx = rect.x_start + 5.0 + rng.random_range(0.0..=(length - along - 10.0));
                let by = rect.y_start + 5.0 + rng.random_range(0.0..=(width - across - 10.0));
                batteries.push(BatteryInstance {
                    id: (n + i + 1) as u64,
                    class,
                    rect: Rect::new(bx, bx + along, by, by + across),
                    thickness_mm: t,
                    material: m.to_owned(),
                });
            }
            DeviceInstance {
                id: (i + 1) as u64,
                rect,
                thickness_mm: thickness,
                material: material.to_owned(),
                batteries,
            }
        })
        .collect();
    Scene::new(cfg.conveyor_speed_mm_s, devices)
}

/// Suction contact: horizontally within `tol` and vertically within `z_tol`.
pub fn grasp_check(eef: Vec3, item: Vec3, tol: f64, z_tol: f64) -> bool {
    (eef.x - item.x).hypot(eef.y - item.y) <= tol && (eef.z - item.z).abs() <= z_tol
}

/// An accepted pick with its planned legs.
#[derive(Debug, Clone)]
pub struct RobotPlan {
    pub track_id: u64,
    pub pick: Vec3,
    pub t_pick: f64,
    pub start: f64,
    pub approach: JointTrajectory,
    pub place: JointTrajectory,
}

#[derive(Debug, Clone)]
struct Leg {
    traj: JointTrajectory,
    start: f64,
}

impl Leg {
    fn end(&self) -> f64 {
        self.start + self.traj.duration()
    }
}

/// Robot side: admission of pick requests and the motion state machine.
#[derive(Debug, Clone)]
pub struct RobotController {
    params: DeltaParams,
    frame: TrackerConfig,
    home: Vec3,
    bin: Vec3,
    t_total: f64,
    homing_s: f64,
    settle_s: f64,
    h: f64,
    alpha: f64,
    dt: f64,
    homing: JointTrajectory,
    busy_until: f64,
    queue: VecDeque<RobotPlan>,
    state: RobotFsmState,
    leg: Option<Leg>,
    current: Option<RobotPlan>,
    eef: Vec3,
}

impl RobotController {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, OrchestratorError> {
        let params = cfg.delta();
        let homing = plan_pick_place(
            &params,
            &build_pi_path(cfg.bin, cfg.home, cfg.h_mm, cfg.alpha)?,
            cfg.homing_s,
            cfg.dt_s,
        )?;
        Ok(Self {
            params,
            frame: cfg.tracker(),
            home: cfg.home,
            bin: cfg.bin,
            t_total: cfg.t_total_s,
            homing_s: cfg.homing_s,
            settle_s: cfg.settle_s,
            h: cfg.h_mm,
            alpha: cfg.alpha,
            dt: cfg.dt_s,
            homing,
            busy_until: 0.0,
            queue: VecDeque::new(),
            state: RobotFsmState::Idle,
            leg: None,
            current: None,
            eef: cfg.home,
        })
    }

    pub fn state(&self) -> RobotFsmState {
        self.state
    }

    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }

    pub fn eef(&self) -> Vec3 {
        self.eef
    }

    pub fn homing_leg(&self) -> &JointTrajectory {
        &self.homing
    }

    pub fn is_quiet(&self) -> bool {
        self.state == RobotFsmState::Idle && self.queue.is_empty()
    }

    /// Plans both legs of a request without admitting it.
    pub fn plan(&self, req: &WireMessage) -> Result<RobotPlan, String> {
        let WireMessage::PickRequest { item_id, x0_mm, y0_mm, v_mm_s, t0_stamp_s, t_pick_s, .. } = *req else {
            return Err(format!("expected pick_request, got {}", req.kind()));
        };
        let x = x0_mm + v_mm_s * (t_pick_s - t0_stamp_s);
        let pick = self.frame.to_robot_frame(x, y0_mm);
        let leg = |from: Vec3, to: Vec3| {
            build_pi_path(from, to, self.h, self.alpha)
                .and_then(|p| plan_pick_place(&self.params, &p, self.t_total, self.dt))
                .map_err(|e| e.to_string())
        };
        Ok(RobotPlan {
            track_id: item_id,
            pick,
            t_pick: t_pick_s,
            start: t_pick_s - self.t_total,
            approach: leg(self.home, pick)?,
            place: leg(pick, self.bin)?,
        })
    }

    fn cycle_end(&self, t_pick: f64) -> f64 {
        t_pick + self.t_total + self.homing_s + self.settle_s
    }

    /// Answers one request with `Ack` or `Reject`, then `Status`.
    pub fn admit(&mut self, req: &WireMessage, now: f64) -> (Vec<WireMessage>, Option<RobotPlan>) {
        let WireMessage::PickRequest { item_id, t_pick_s, .. } = *req else {
            return (vec![], None);
        };
        let start = t_pick_s - self.t_total;
        let verdict = if start < now - 1e-9 {
            Err(format!("approach would start at {start:.3} s, before {now:.3} s"))
        } else if start < self.busy_until - 1e-9 {
            Err(format!("robot busy until {:.3} s", self.busy_until))
        } else {
            self.plan(req)
        };
        let (first, plan) = match verdict {
            Ok(plan) => {
                self.busy_until = self.cycle_end(t_pick_s);
                self.queue.push_back(plan.clone());
                (WireMessage::Ack { item_id }, Some(plan))
            }
            Err(reason) => (WireMessage::Reject { item_id, reason }, None),
        };
        let status = WireMessage::Status {
            robot_state: self.state,
            busy_until_s: self.busy_until,
        };
        (vec![first, status], plan)
    }

    /// Queues a plan already accepted by a remote controller.
    pub fn force_admit(&mut self, plan: RobotPlan) {
        self.busy_until = self.busy_until.max(self.cycle_end(plan.t_pick));
        self.queue.push_back(plan);
    }

    fn pose(&self, leg: &Leg, t: f64) -> Vec3 {
        let s = leg.traj.sample_at(t - leg.start);
        forward_kinematics(&self.params, &s.joints).unwrap_or(s.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    SortedToBin,
    WrongPick,
    Missed,
    PassThrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Place {
    OnBelt,
    Held,
    Done,
}

/// Per-item bookkeeping and timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: u64,
    pub has_battery: bool,
    pub outcome: Option<Outcome>,
    pub miss_reason: Option<String>,
    pub track_id: Option<u64>,
    pub t_detected: Option<f64>,
    pub t_pick_planned: Option<f64>,
    pub t_grasp: Option<f64>,
    pub t_done: Option<f64>,
    pub prediction_error_mm: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub count: usize,
    pub mean: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub spawned: usize,
    pub battery_items: usize,
    pub sorted_to_bin: usize,
    pub missed: usize,
    pub wrong_picks: usize,
    pub pass_through: usize,
    pub missed_reasons: BTreeMap<String, usize>,
    pub pick_requests: usize,
    pub acks: usize,
    pub rejects: usize,
    pub lines_scanned: u64,
    pub frames_emitted: u64,
    pub sim_time_s: f64,
    /// Distance between the forward kinematics of commanded joints and the
    /// Cartesian reference, per executed leg.
    pub trajectory_tracking_error_mm: Stat,
    /// Predicted pick point against the item's true position at `t_pick`.
    pub prediction_error_mm: Stat,
    /// Horizontal end-effector to item distance at each successful grasp.
    pub grasp_offset_mm: Stat,
    pub items: Vec<ItemRecord>,
}

impl ScenarioReport {
    /// `spawned = sorted + missed + wrong picks + pass-through`
    pub fn is_conserved(&self) -> bool {
        self.spawned == self.sorted_to_bin + self.missed + self.wrong_picks + self.pass_through
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub event_type: String,
    pub item_id: Option<u64>,
    pub detail: String,
}

/// `t,event_type,item_id,detail`
pub fn write_events_csv<W: Write>(out: W, events: &[Event]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "event_type", "item_id", "detail"])?;
    for e in events {
        w.write_record([
            format!("{:.6}", e.t),
            e.event_type.clone(),
            e.item_id.map(|i| i.to_string()).unwrap_or_default(),
            e.detail.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// How pick requests reach the robot controller.
pub enum RobotLink {
    /// Both endpoints in this process, joined by byte queues.
    Local { to_robot: ByteQueue, to_vision: ByteQueue },
    /// Controller in another process; replies are awaited synchronously.
    Remote { reader: BufReader<TcpStream>, writer: TcpStream },
}

impl RobotLink {
    pub fn local() -> Self {
        RobotLink::Local {
            to_robot: ByteQueue::default(),
            to_vision: ByteQueue::default(),
        }
    }

    pub fn connect(addr: &str) -> Result<Self, OrchestratorError> {
        let writer = TcpStream::connect(addr)?;
        writer.set_nodelay(true)?;
        Ok(RobotLink::Remote {
            reader: BufReader::new(writer.try_clone()?),
            writer,
        })
    }
}

/// Runs a robot controller endpoint over one connection until it closes.
/// Returns the number of requests handled.
pub fn serve_robot<R: BufRead, W: Write>(
    cfg: &ScenarioConfig,
    mut input: R,
    mut output: W,
) -> Result<usize, OrchestratorError> {
    let mut ctrl = RobotController::new(cfg)?;
    let mut handled = 0;
    loop {
        let msg = match read_message(&mut input) {
            Ok(m) => m,
            Err(ProtocolError::Closed) => return Ok(handled),
            Err(e) => return Err(e.into()),
        };
        let now = match msg {
            WireMessage::PickRequest { t0_stamp_s, .. } => t0_stamp_s,
            other => return Err(OrchestratorError::UnexpectedMessage(other.kind().into())),
        };
        let (replies, _) = ctrl.admit(&msg, now);
        for r in &replies {
            write_message(&mut output, r)?;
        }
        handled += 1;
    }
}

struct ItemState {
    /// Travel coordinate of the device centre.
    u_center: f64,
    u_end: f64,
    y_center: f64,
    place: Place,
    rec: ItemRecord,
}

/// The whole line at one instant.
pub struct Simulation {
    cfg: ScenarioConfig,
    scene: Scene,
    items: Vec<ItemState>,
    step: u64,
    t: f64,
    next_line: u64,
    scanner: Option<(Scanner, LineBuffer)>,
    cadence: FrameCadence,
    detector: Box<dyn DetectionProvider>,
    encoder: EncoderModel,
    tracker: Tracker,
    robot: RobotController,
    link: RobotLink,
    held: Option<usize>,
    track_to_item: BTreeMap<u64, usize>,
    events: Vec<Event>,
    leg_errors: Vec<f64>,
    grasp_offsets: Vec<f64>,
    counts: BTreeMap<&'static str, usize>,
    frames_emitted: u64,
    t_limit: f64,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, OrchestratorError> {
        Self::with_link(cfg, RobotLink::local())
    }

    pub fn with_link(cfg: &ScenarioConfig, link: RobotLink) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        let scene = generate_scene(cfg);
        Self::with_scene(cfg, scene, link)
    }

    /// Simulates a given scene instead of a generated one.
    pub fn with_scene(cfg: &ScenarioConfig, scene: Scene, link: RobotLink) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        let scanner_cfg = cfg.scanner();
        let detector: Box<dyn DetectionProvider> = match cfg.detector {
            DetectorMode::Oracle => Box::new(OracleDetector::new(scene.clone(), &scanner_cfg)),
            DetectorMode::Standin => Box::new(StandInDetector::new(cfg.detection)),
        };
        let scanner = if detector.needs_pixels() || cfg.emit_frames {
            let s = Scanner::new(&scene, &scanner_cfg)?;
            let buf = LineBuffer::new(&scanner_cfg, &s.white_reference())?;
            Some((s, buf))
        } else {
            scene.validate().map_err(ImagingError::from)?;
            None
        };
        let v = scene.conveyor_speed_mm_s;
        let items: Vec<ItemState> = scene
            .devices
            .iter()
            .map(|d| {
                let (u, y) = d.rect.center();
                ItemState {
                    u_center: u,
                    u_end: d.rect.x_end,
                    y_center: y,
                    place: Place::OnBelt,
                    rec: ItemRecord {
                        item_id: d.id,
                        has_battery: d.has_battery(),
                        outcome: None,
                        miss_reason: None,
                        track_id: None,
                        t_detected: None,
                        t_pick_planned: None,
                        t_grasp: None,
                        t_done: None,
                        prediction_error_mm: None,
                    },
                }
            })
            .collect();
        let exit_x = cfg.robot_center_x_mm + cfg.belt_exit_margin_mm;
        let last_exit = items.iter().map(|it| (exit_x + it.u_end) / v).fold(0.0, f64::max);
        let mut robot = RobotController::new(cfg)?;
        robot.busy_until = 0.0;
        let sim = Self {
            cadence: FrameCadence::new(cfg.frame_height_lines, cfg.pixel_pitch_mm),
            encoder: EncoderModel::new(cfg.encoder_ticks_per_mm, cfg.encoder_rate_hz, cfg.speed_window_s + 1.0),
            tracker: Tracker::new(cfg.tracker()),
            robot,
            link,
            held: None,
            track_to_item: BTreeMap::new(),
            events: Vec::new(),
            leg_errors: Vec::new(),
            grasp_offsets: Vec::new(),
            counts: BTreeMap::new(),
            frames_emitted: 0,
            t_limit: last_exit + 2.0 * cfg.cycle_time_s() + 10.0,
            cfg: cfg.clone(),
            scene,
            items,
            step: 0,
            t: 0.0,
            next_line: 0,
            scanner,
            detector,
        };
        if sim.cfg.emit_frames {
            std::fs::create_dir_all(sim.frames_dir())?;
        }
        if sim.cfg.emit_traj {
            std::fs::create_dir_all(sim.traj_dir())?;
            let mut f = std::fs::File::create(sim.traj_dir().join("homing.csv"))?;
            sim.robot.homing.write_csv(&mut f)?;
        }
        Ok(sim)
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn robot(&self) -> &RobotController {
        &self.robot
    }

    pub fn lines_scanned(&self) -> u64 {
        self.next_line
    }

    fn frames_dir(&self) -> PathBuf {
        self.cfg.output_dir.join("frames")
    }

    fn traj_dir(&self) -> PathBuf {
        self.cfg.output_dir.join("traj")
    }

    fn log(&mut self, event_type: &str, item: Option<usize>, detail: String) {
        let item_id = item.map(|i| self.items[i].rec.item_id);
        self.events.push(Event {
            t: self.t,
            event_type: event_type.to_owned(),
            item_id,
            detail,
        });
    }

    fn bump(&mut self, key: &'static str) {
        *self.counts.entry(key).or_default() += 1;
    }

    fn count(&self, key: &str) -> usize {
        self.counts.get(key).copied().unwrap_or(0)
    }

    fn true_belt_position(&self, i: usize, t: f64) -> (f64, f64) {
        let it = &self.items[i];
        (self.scene.conveyor_speed_mm_s * t - it.u_center, it.y_center)
    }

    fn speed_estimate(&self) -> f64 {
        match self.cfg.velocity_source {
            VelocitySource::Exact => self.scene.conveyor_speed_mm_s,
            VelocitySource::Encoder => speed_from_encoder(&self.encoder, self.cfg.speed_window_s)
                .unwrap_or(self.scene.conveyor_speed_mm_s),
        }
    }

    /// Runs until every item is resolved and the robot is idle.
    pub fn is_finished(&self) -> bool {
        self.t >= self.t_limit
            || (self.items.iter().all(|it| it.place == Place::Done) && self.robot.is_quiet())
    }

    /// Advances one time step. Returns the events it produced.
    pub fn step(&mut self) -> Result<&[Event], OrchestratorError> {
        let first_event = self.events.len();
        let dt = self.cfg.dt_s;
        let t_next = (self.step + 1) as f64 * dt;
        let end = t_next * self.cfg.line_rate_hz;
        let line_end = if (end - end.round()).abs() < 1e-6 { end.round() } else { end.ceil() } as u64;
        let mut windows = Vec::new();
        while self.next_line < line_end {
            let k = self.next_line;
            self.next_line += 1;
            match &mut self.scanner {
                Some((scanner, buffer)) => {
                    if let Some(frame) = buffer.push_line(&scanner.scan_index(k)) {
                        windows.push((frame.window, Some(frame)));
                    }
                }
                None => {
                    if let Some(w) = self.cadence.on_line() {
                        windows.push((w, None));
                    }
                }
            }
        }
        self.step += 1;
        self.t = t_next;
        let v = self.scene.conveyor_speed_mm_s;
        self.encoder.advance_to(self.t, |ts| v * ts);
        for (window, frame) in windows {
            self.handle_frame(&window, frame.as_ref())?;
        }
        self.pump_link()?;
        self.update_robot()?;
        self.update_belt();
        Ok(&self.events[first_event..])
    }

    fn handle_frame(&mut self, window: &FrameWindow, frame: Option<&DualEnergyFrame>) -> Result<(), OrchestratorError> {
        self.frames_emitted += 1;
        if let (true, Some(f)) = (self.cfg.emit_frames, frame) {
            export_frame(&self.frames_dir(), f)?;
        }
        let record = self.detector.detect(window, frame)?;
        self.log(
            "frame",
            None,
            format!(
                "index={} devices={} batteries={}",
                window.frame_index,
                record.devices.len(),
                record.batteries.len()
            ),
        );
        let k = window.last_line();
        let stamp = FrameStamp {
            t0: k as f64 / self.cfg.line_rate_hz,
            travel_mm: k as f64 * self.cfg.pixel_pitch_mm,
        };
        let v_est = self.speed_estimate();
        for ev in self.tracker.ingest(&record, stamp, v_est, self.t) {
            match ev {
                TrackEvent::Scheduled(item, cmd) => {
                    let idx = self.associate(item.id, item.x0, item.y0, item.t0);
                    if let Some(i) = idx {
                        let (tx, ty) = self.true_belt_position(i, cmd.t_pick);
                        let (px, py) = item.position_at(cmd.t_pick);
                        let rec = &mut self.items[i].rec;
                        rec.t_pick_planned = Some(cmd.t_pick);
                        rec.prediction_error_mm = Some((tx - px).hypot(ty - py));
                    }
                    self.log("scheduled", idx, format!("track={} t_pick={:.6}", item.id, cmd.t_pick));
                    let req = WireMessage::PickRequest {
                        item_id: item.id,
                        x0_mm: item.x0,
                        y0_mm: item.y0,
                        w_mm: item.width,
                        h_mm: item.height,
                        v_mm_s: item.v,
                        t0_stamp_s: item.t0,
                        t_pick_s: cmd.t_pick,
                    };
                    self.send_request(req, idx)?;
                }
                TrackEvent::Infeasible(item, reason) => {
                    let idx = self.associate(item.id, item.x0, item.y0, item.t0);
                    if let Some(i) = idx {
                        self.items[i].rec.miss_reason.get_or_insert_with(|| "infeasible".into());
                    }
                    self.log("infeasible", idx, format!("track={} {reason}", item.id));
                }
            }
        }
        Ok(())
    }

    /// Links a tracked item to the simulated device under it. Bookkeeping
    /// only; the pipeline never sees the result.
    fn associate(&mut self, track_id: u64, x0: f64, y0: f64, t0: f64) -> Option<usize> {
        let best = (0..self.items.len())
            .filter(|&i| self.items[i].place == Place::OnBelt)
            .map(|i| {
                let (x, y) = self.true_belt_position(i, t0);
                (i, (x - x0).hypot(y - y0))
            })
            .filter(|(_, d)| *d < 20.0)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)?;
        self.track_to_item.insert(track_id, best);
        let rec = &mut self.items[best].rec;
        rec.track_id.get_or_insert(track_id);
        rec.t_detected.get_or_insert(self.t);
        Some(best)
    }

    fn send_request(&mut self, req: WireMessage, idx: Option<usize>) -> Result<(), OrchestratorError> {
        self.bump("pick_requests");
        let WireMessage::PickRequest { item_id, .. } = req else { unreachable!() };
        self.log("pick_request", idx, format!("track={item_id}"));
        match &mut self.link {
            RobotLink::Local { to_robot, .. } => to_robot.send(&req),
            RobotLink::Remote { reader, writer } => {
                write_message(writer, &req)?;
                let mut replies = Vec::new();
                loop {
                    let msg = read_message(reader)?;
                    let done = matches!(msg, WireMessage::Status { .. });
                    replies.push(msg);
                    if done {
                        break;
                    }
                }
                for msg in replies {
                    if let WireMessage::Ack { .. } = msg {
                        let plan = self
                            .robot
                            .plan(&req)
                            .map_err(|e| OrchestratorError::UnexpectedMessage(format!("remote ack unplannable: {e}")))?;
                        self.accepted(&plan)?;
                        self.robot.force_admit(plan);
                    }
                    self.on_reply(msg)?;
                }
            }
        }
        Ok(())
    }

    fn accepted(&mut self, plan: &RobotPlan) -> Result<(), OrchestratorError> {
        self.leg_errors.push(plan.approach.max_tracking_error(&self.robot.params));
        self.leg_errors.push(plan.place.max_tracking_error(&self.robot.params));
        if self.cfg.emit_traj {
            let dir = self.traj_dir();
            let id = plan.track_id;
            plan.approach
                .write_csv(std::fs::File::create(dir.join(format!("track_{id:04}_approach.csv")))?)?;
            plan.place
                .write_csv(std::fs::File::create(dir.join(format!("track_{id:04}_place.csv")))?)?;
        }
        Ok(())
    }

    fn pump_link(&mut self) -> Result<(), OrchestratorError> {
        let RobotLink::Local { to_robot, to_vision } = &mut self.link else {
            return Ok(());
        };
        let mut plans = Vec::new();
        while let Some(msg) = to_robot.recv() {
            let msg = msg?;
            let now = match msg {
                WireMessage::PickRequest { t0_stamp_s, .. } => t0_stamp_s,
                ref other => return Err(OrchestratorError::UnexpectedMessage(other.kind().into())),
            };
            let (replies, plan) = self.robot.admit(&msg, now);
            plans.extend(plan);
            for r in &replies {
                to_vision.send(r);
            }
        }
        let mut replies = Vec::new();
        while let Some(msg) = to_vision.recv() {
            replies.push(msg?);
        }
        for plan in &plans {
            self.accepted(plan)?;
        }
        for msg in replies {
            self.on_reply(msg)?;
        }
        Ok(())
    }

    fn on_reply(&mut self, msg: WireMessage) -> Result<(), OrchestratorError> {
        match msg {
            WireMessage::Ack { item_id } => {
                self.bump("acks");
                let idx = self.track_to_item.get(&item_id).copied();
                self.log("ack", idx, format!("track={item_id}"));
            }
            WireMessage::Reject { item_id, reason } => {
                self.bump("rejects");
                self.tracker.on_reject(item_id);
                let idx = self.track_to_item.get(&item_id).copied();
                if let Some(i) = idx {
                    self.items[i].rec.miss_reason.get_or_insert_with(|| "rejected".into());
                }
                self.log("reject", idx, format!("track={item_id} {reason}"));
            }
            WireMessage::Status { robot_state, busy_until_s } => {
                self.tracker.observe_busy_until(busy_until_s);
                self.log("status", None, format!("state={} busy_until={busy_until_s:.6}", robot_state.name()));
            }
            other => return Err(OrchestratorError::UnexpectedMessage(other.kind().into())),
        }
        Ok(())
    }

    fn transition(&mut self, to: RobotFsmState, item: Option<usize>) {
        let from = self.robot.state;
        debug_assert!(from.can_transition(to), "{from:?} -> {to:?}");
        self.robot.state = to;
        self.log("transition", item, format!("{}->{}", from.name(), to.name()));
    }

    fn current_item(&self) -> Option<usize> {
        let plan = self.robot.current.as_ref()?;
        self.track_to_item.get(&plan.track_id).copied()
    }

    fn update_robot(&mut self) -> Result<(), OrchestratorError> {
        let t = self.t;
        match self.robot.state {
            RobotFsmState::Idle => {
                if self.robot.queue.front().is_some_and(|p| t >= p.start - 1e-9) {
                    let plan = self.robot.queue.pop_front().expect("checked");
                    self.robot.leg = Some(Leg { traj: plan.approach.clone(), start: plan.start });
                    self.robot.current = Some(plan);
                    let item = self.current_item();
                    self.transition(RobotFsmState::MovingToPick, item);
                }
            }
            RobotFsmState::MovingToPick => {
                let leg = self.robot.leg.as_ref().expect("moving robot has a leg");
                self.robot.eef = self.robot.pose(leg, t);
                let t_pick = self.robot.current.as_ref().expect("active plan").t_pick;
                if t >= t_pick - 1e-9 {
                    let item = self.current_item();
                    self.transition(RobotFsmState::Grasping, item);
                    self.try_grasp(item)?;
                }
            }
            RobotFsmState::Grasping => {
                let plan = self.robot.current.as_ref().expect("active plan");
                self.robot.leg = Some(Leg { traj: plan.place.clone(), start: t });
                let item = self.held;
                self.transition(RobotFsmState::MovingToPlace, item);
            }
            RobotFsmState::MovingToPlace => {
                let leg = self.robot.leg.as_ref().expect("moving robot has a leg");
                self.robot.eef = self.robot.pose(leg, t);
                let done = t >= leg.end() - 1e-9;
                if done {
                    let item = self.held;
                    self.transition(RobotFsmState::Releasing, item);
                    self.release();
                }
            }
            RobotFsmState::Releasing => {
                self.robot.leg = Some(Leg { traj: self.robot.homing.clone(), start: t });
                self.leg_errors.push(self.robot.homing.max_tracking_error(&self.robot.params));
                self.transition(RobotFsmState::Homing, None);
            }
            RobotFsmState::Homing => {
                match &self.robot.leg {
                    Some(leg) => {
                        self.robot.eef = self.robot.pose(leg, t);
                        if t >= leg.end() - 1e-9 {
                            self.robot.eef = self.robot.home;
                            self.robot.leg = None;
                            self.robot.current = None;
                            self.transition(RobotFsmState::Idle, None);
                        }
                    }
                    None => {
                        self.robot.eef = self.robot.home;
                        self.robot.current = None;
                        self.transition(RobotFsmState::Idle, None);
                    }
                }
            }
        }
        Ok(())
    }

    fn robot_frame_position(&self, i: usize) -> Vec3 {
        let (x, y) = self.true_belt_position(i, self.t);
        self.tracker.cfg.to_robot_frame(x, y)
    }

    fn try_grasp(&mut self, target: Option<usize>) -> Result<(), OrchestratorError> {
        let eef = self.robot.eef;
        let nearest = (0..self.items.len())
            .filter(|&i| self.items[i].place == Place::OnBelt)
            .map(|i| (i, self.robot_frame_position(i)))
            .min_by(|a, b| {
                let da = (a.1.x - eef.x).hypot(a.1.y - eef.y);
                let db = (b.1.x - eef.x).hypot(b.1.y - eef.y);
                da.total_cmp(&db)
            });
        let ok = nearest.filter(|(_, p)| grasp_check(eef, *p, self.cfg.grasp_tol_mm, self.cfg.grasp_z_tol_mm));
        match ok {
            Some((i, p)) => {
                let offset = (p.x - eef.x).hypot(p.y - eef.y);
                self.grasp_offsets.push(offset);
                self.items[i].place = Place::Held;
                self.items[i].rec.t_grasp = Some(self.t);
                self.held = Some(i);
                self.log("grasp_check", Some(i), format!("ok offset={offset:.6}"));
            }
            None => {
                let detail = match nearest {
                    Some((_, p)) => format!(
                        "fail offset={:.3} dz={:.3}",
                        (p.x - eef.x).hypot(p.y - eef.y),
                        eef.z - p.z
                    ),
                    None => "fail no item".to_owned(),
                };
                if let Some(i) = target {
                    self.items[i].rec.miss_reason.get_or_insert_with(|| "grasp_failed".into());
                }
                self.log("grasp_check", target, detail);
                let back = build_pi_path(eef, self.robot.home, self.robot.h, self.robot.alpha)
                    .and_then(|p| plan_pick_place(&self.robot.params, &p, self.robot.homing_s, self.robot.dt));
                self.robot.leg = back.ok().map(|traj| Leg { traj, start: self.t });
                self.transition(RobotFsmState::Homing, target);
            }
        }
        Ok(())
    }

    fn release(&mut self) {
        let Some(i) = self.held.take() else { return };
        let it = &mut self.items[i];
        it.place = Place::Done;
        it.rec.t_done = Some(self.t);
        let outcome = if it.rec.has_battery { Outcome::SortedToBin } else { Outcome::WrongPick };
        it.rec.outcome = Some(outcome);
        let kind = if outcome == Outcome::SortedToBin { "sorted" } else { "wrong_pick" };
        self.log(kind, Some(i), "bin".into());
    }

    fn update_belt(&mut self) {
        let exit_x = self.cfg.robot_center_x_mm + self.cfg.belt_exit_margin_mm;
        let v = self.scene.conveyor_speed_mm_s;
        for i in 0..self.items.len() {
            let it = &self.items[i];
            if it.place != Place::OnBelt || v * self.t - it.u_end < exit_x {
                continue;
            }
            let (outcome, detail) = if it.rec.has_battery {
                let reason = it.rec.miss_reason.clone().unwrap_or_else(|| {
                    if it.rec.track_id.is_some() { "not_picked" } else { "undetected" }.to_owned()
                });
                (Outcome::Missed, reason)
            } else {
                (Outcome::PassThrough, "exit".to_owned())
            };
            let it = &mut self.items[i];
            it.place = Place::Done;
            it.rec.t_done = Some(self.t);
            it.rec.outcome = Some(outcome);
            if outcome == Outcome::Missed {
                it.rec.miss_reason = Some(detail.clone());
            }
            let kind = if outcome == Outcome::Missed { "missed" } else { "pass_through" };
            self.log(kind, Some(i), detail);
        }
    }

    pub fn run(&mut self) -> Result<ScenarioReport, OrchestratorError> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> ScenarioReport {
        let outcome = |o: Outcome| self.items.iter().filter(|it| it.rec.outcome == Some(o)).count();
        let mut missed_reasons = BTreeMap::new();
        for it in &self.items {
            if it.rec.outcome == Some(Outcome::Missed) {
                let r = it.rec.miss_reason.clone().unwrap_or_default();
                *missed_reasons.entry(r).or_default() += 1;
            }
        }
        ScenarioReport {
            spawned: self.items.len(),
            battery_items: self.items.iter().filter(|it| it.rec.has_battery).count(),
            sorted_to_bin: outcome(Outcome::SortedToBin),
            missed: outcome(Outcome::Missed),
            wrong_picks: outcome(Outcome::WrongPick),
            pass_through: outcome(Outcome::PassThrough),
            missed_reasons,
            pick_requests: self.count("pick_requests"),
            acks: self.count("acks"),
            rejects: self.count("rejects"),
            lines_scanned: self.next_line,
            frames_emitted: self.frames_emitted,
            sim_time_s: self.t,
            trajectory_tracking_error_mm: Stat::of(self.leg_errors.iter().copied()),
            prediction_error_mm: Stat::of(self.items.iter().filter_map(|it| it.rec.prediction_error_mm)),
            grasp_offset_mm: Stat::of(self.grasp_offsets.iter().copied()),
            items: self.items.iter().map(|it| it.rec.clone()).collect(),
        }
    }

    /// Writes `report.json`, `events.csv` and `schedule.csv` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<(), OrchestratorError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.report().to_json())?;
        write_events_csv(std::fs::File::create(dir.join("events.csv"))?, &self.events)?;
        self.tracker.write_log_csv(std::fs::File::create(dir.join("schedule.csv"))?)?;
        Ok(())
    }
}

/// Generates the configured scene and simulates it to completion.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<(ScenarioReport, Vec<Event>), OrchestratorError> {
    let mut sim = Simulation::new(cfg)?;
    let report = sim.run()?;
    Ok((report, sim.events))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> ScenarioConfig {
        ScenarioConfig {
            n_items: n,
            ..Default::default()
        }
    }

    #[test]
    fn grasp_check_examples() {
        let eef = Vec3::new(0.0, 0.0, -900.0);
        assert!(grasp_check(eef, Vec3::new(3.0, 4.0, -900.0), 10.0, 5.0));
        assert!(!grasp_check(eef, Vec3::new(10.1, 0.0, -900.0), 10.0, 5.0));
        assert!(!grasp_check(Vec3::new(0.0, 0.0, -880.0), Vec3::new(0.0, 0.0, -900.0), 10.0, 5.0));
    }

    #[test]
    fn scene_generation_is_seeded() {
        let cfg = small(20);
        let a = generate_scene(&cfg);
        assert_eq!(a, generate_scene(&cfg));
        assert_eq!(a.devices.iter().filter(|d| d.has_battery()).count(), 14);
        a.validate().unwrap();
        let b = generate_scene(&ScenarioConfig { seed: 9, ..cfg });
        assert_ne!(a, b);
    }

    #[test]
    fn empty_world_step() {
        let mut sim = Simulation::new(&small(0)).unwrap();
        assert!(sim.step().unwrap().is_empty());
        assert_eq!(sim.time(), 0.001);
        assert!(sim.robot().is_quiet());
        for _ in 1..1000 {
            sim.step().unwrap();
        }
        assert_eq!(sim.lines_scanned(), 3500);
    }

    #[test]
    fn small_run_sorts_everything() {
        let (report, events) = run_scenario(&small(6)).unwrap();
        assert_eq!(report.battery_items, 4);
        assert_eq!(report.sorted_to_bin, 4, "{report:#?}");
        assert_eq!((report.missed, report.wrong_picks, report.pass_through), (0, 0, 2));
        assert!(report.is_conserved());
        assert_eq!(report.pick_requests, report.acks + report.rejects);
        assert!(report.trajectory_tracking_error_mm.max < 1e-6);
        assert!(report.prediction_error_mm.max < 1.0);
        for e in events.iter().filter(|e| e.event_type == "grasp_check") {
            assert!(e.detail.starts_with("ok"));
        }
    }

    #[test]
    fn no_batteries_no_requests() {
        let cfg = ScenarioConfig { battery_fraction: 0.0, ..small(4) };
        let (report, _) = run_scenario(&cfg).unwrap();
        assert_eq!(report.pick_requests, 0);
        assert_eq!(report.pass_through, 4);
    }

    #[test]
    fn dense_stream_logs_infeasible() {
        let cfg = ScenarioConfig {
            spawn_headway_s: 0.14,
            battery_fraction: 1.0,
            ..small(12)
        };
        let pitch = cfg.spawn_headway_s * cfg.conveyor_speed_mm_s;
        let devices = (0..12)
            .map(|i| {
                let x = 100.0 + i as f64 * pitch;
                DeviceInstance {
                    id: i + 1,
                    rect: Rect::new(x, x + 40.0, 370.0, 430.0),
                    thickness_mm: 3.0,
                    material: "pcb".into(),
                    batteries: vec![BatteryInstance {
                        id: 100 + i,
                        class: BatteryClass::Button,
                        rect: Rect::new(x + 14.0, x + 26.0, 394.0, 406.0),
                        thickness_mm: 3.0,
                        material: "steel".into(),
                    }],
                }
            })
            .collect();
        let scene = Scene::new(cfg.conveyor_speed_mm_s, devices);
        let mut sim = Simulation::with_scene(&cfg, scene, RobotLink::local()).unwrap();
        let report = sim.run().unwrap();
        assert!(report.missed > 0);
        assert!(report.sorted_to_bin > 0);
        assert!(report.is_conserved());
        let infeasible = sim.events().iter().filter(|e| e.event_type == "infeasible").count();
        assert_eq!(report.missed, infeasible, "{:?}", report.missed_reasons);
        assert_eq!(report.missed_reasons.get("infeasible"), Some(&infeasible));
    }

    #[test]
    fn served_controller_answers_over_streams() {
        let cfg = ScenarioConfig::default();
        let req = WireMessage::PickRequest {
            item_id: 1,
            x0_mm: 1500.0,
            y0_mm: 420.0,
            w_mm: 80.0,
            h_mm: 100.0,
            v_mm_s: 350.0,
            t0_stamp_s: 3.0,
            t_pick_s: 3.0 + 500.0 / 350.0,
        };
        let mut input = Vec::new();
        input.extend(crate::protocol::encode_message(&req));
        input.extend(crate::protocol::encode_message(&req));
        let mut out = Vec::new();
        assert_eq!(serve_robot(&cfg, &input[..], &mut out).unwrap(), 2);
        let mut lines = out.split(|&b| b == b'\n').filter(|l| !l.is_empty());
        let msgs: Vec<_> = lines.by_ref().map(|l| crate::protocol::decode_message(l).unwrap()).collect();
        assert_eq!(msgs[0], WireMessage::Ack { item_id: 1 });
        assert!(matches!(msgs[1], WireMessage::Status { .. }));
        assert!(matches!(msgs[2], WireMessage::Reject { item_id: 1, .. }));
    }
}

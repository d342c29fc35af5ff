use std::fs;
use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};

use weee_core::config::{DetectorMode, ScenarioConfig};
use weee_core::detection::{evaluate, read_records, DetectionRecord, OracleDetector, StandInDetector};
use weee_core::kinematics::{forward_kinematics, inverse_kinematics, JointAngles};
use weee_core::orchestrator::{serve_robot, RobotLink, Simulation};
use weee_core::scene::Scene;
use weee_core::trajectory::{build_pi_path, plan_pick_place};
use weee_core::xray::{export_frame, frame_file_name, read_pgm, DualEnergyFrame, FrameWindow, LineBuffer, Scanner};
use weee_core::Vec3;

#[derive(Parser)]
#[command(name = "weee", version, about = "X-ray guided battery sorting line simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full scenario and write the report, event log and schedule.
    Simulate(SimulateArgs),
    /// Delta robot kinematics.
    Kin {
        #[command(subcommand)]
        op: KinOp,
    },
    /// Pick-and-place trajectory as CSV on stdout.
    Traj(TrajArgs),
    /// Scan a scene into dual-energy frames.
    Scan(ScanArgs),
    /// Run a detector over exported frames.
    Detect(DetectArgs),
    /// Battery detection metrics from prediction and ground-truth records.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON scenario configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "WEEE_SEED")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ScenarioConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::load(p).map_err(Failure::input)?,
            None => ScenarioConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    battery_fraction: Option<f64>,
    /// oracle or standin
    #[arg(long, value_parser = parse_detector)]
    detector: Option<DetectorMode>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    emit_frames: bool,
    #[arg(long)]
    emit_traj: bool,
    /// Act as the robot controller: accept one connection on this port.
    #[arg(long, conflicts_with = "connect")]
    serve: Option<u16>,
    /// Send pick requests to a robot controller at host:port.
    #[arg(long)]
    connect: Option<String>,
}

#[derive(Subcommand)]
enum KinOp {
    /// Joint angles in rad to end-effector position in mm.
    Fk {
        #[arg(allow_negative_numbers = true, num_args = 3, required = true)]
        theta: Vec<f64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// End-effector position in mm to joint angles in rad.
    Ik {
        #[arg(allow_negative_numbers = true, num_args = 3, required = true)]
        xyz: Vec<f64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct TrajArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Pick position x,y,z in robot coordinates.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pick: Vec3,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    place: Vec3,
    #[arg(long, default_value_t = 1.0)]
    t_total: f64,
    #[arg(long, default_value_t = 100.0)]
    h: f64,
    #[arg(long, default_value_t = 0.77)]
    alpha: f64,
    #[arg(long, default_value_t = 0.001)]
    dt: f64,
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Scene JSON.
    #[arg(long)]
    scene: PathBuf,
    /// Directory for the PGM/PPM frames.
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory of `frame_NNNNNN_te.pgm` / `_he.pgm` pairs.
    #[arg(long)]
    frames: PathBuf,
    /// Emit ground truth from this scene instead of running the stand-in detector.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Output JSON file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Neighbour gap in pixels for merging ground truth.
    #[arg(long, default_value_t = 10.0)]
    gap: f64,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Also write the table to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_detector(s: &str) -> Result<DetectorMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("unknown detector `{s}`"))
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("`{s}`: {e}"))?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("`{s}`: expected x,y,z")),
    }
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn input(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, err: e.into() }
    }

    fn domain(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, err: e.into() }
    }

    fn io(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, err: e.into() }
    }
}

type Outcome = Result<(), Failure>;

fn emit(text: &str) -> Outcome {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(Failure::io)
}

fn validated(cfg: ScenarioConfig) -> Result<ScenarioConfig, Failure> {
    cfg.validate().map_err(Failure::input)?;
    Ok(cfg)
}

fn simulate(a: SimulateArgs) -> Outcome {
    let mut cfg = a.config.load()?;
    if let Some(n) = a.n_items {
        cfg.n_items = n;
    }
    if let Some(f) = a.battery_fraction {
        cfg.battery_fraction = f;
    }
    if let Some(d) = a.detector {
        cfg.detector = d;
    }
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    cfg.emit_frames |= a.emit_frames;
    cfg.emit_traj |= a.emit_traj;
    let cfg = validated(cfg)?;

    if let Some(port) = a.serve {
        let listener = TcpListener::bind(("127.0.0.1", port)).map_err(Failure::io)?;
        eprintln!("robot controller listening on {}", listener.local_addr().map_err(Failure::io)?);
        let (stream, peer) = listener.accept().map_err(Failure::io)?;
        let reader = BufReader::new(stream.try_clone().map_err(Failure::io)?);
        let handled = serve_robot(&cfg, reader, stream).map_err(Failure::domain)?;
        eprintln!("{peer} closed after {handled} requests");
        return Ok(());
    }

    let link = match &a.connect {
        Some(addr) => RobotLink::connect(addr).map_err(Failure::io)?,
        None => RobotLink::local(),
    };
    let mut sim = Simulation::with_link(&cfg, link).map_err(Failure::domain)?;
    let report = sim.run().map_err(Failure::domain)?;
    sim.write_artifacts(&cfg.output_dir).map_err(Failure::io)?;
    emit(&format!("{}\n", report.to_json()))
}

fn kin(op: KinOp) -> Outcome {
    match op {
        KinOp::Fk { theta, config } => {
            let params = validated(config.load()?)?.delta();
            let q = JointAngles::new(theta[0], theta[1], theta[2]);
            let p = forward_kinematics(&params, &q).map_err(Failure::domain)?;
            emit(&format!("{:.6} {:.6} {:.6}\n", p.x, p.y, p.z))?;
        }
        KinOp::Ik { xyz, config } => {
            let params = validated(config.load()?)?.delta();
            let q = inverse_kinematics(&params, &Vec3::new(xyz[0], xyz[1], xyz[2])).map_err(Failure::domain)?;
            if !q.within_limits(&params) {
                return Err(Failure::domain(anyhow!("joint angles {:?} outside the limits", q.theta)));
            }
            let [a, b, c] = q.theta.map(|t| if t == 0.0 { 0.0 } else { t });
            emit(&format!("{a:.6} {b:.6} {c:.6}\n"))?;
        }
    }
    Ok(())
}

fn traj(a: TrajArgs) -> Outcome {
    let params = validated(a.config.load()?)?.delta();
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(Failure::input(anyhow!("alpha {} outside [0, 1]", a.alpha)));
    }
    if !(a.t_total > 0.0 && a.dt > 0.0 && a.h >= 0.0) {
        return Err(Failure::input(anyhow!("t_total and dt must be positive, h non-negative")));
    }
    let path = build_pi_path(a.pick, a.place, a.h, a.alpha).map_err(Failure::input)?;
    let traj = plan_pick_place(&params, &path, a.t_total, a.dt).map_err(Failure::domain)?;
    traj.write_csv(std::io::stdout().lock()).map_err(Failure::io)
}

fn scan(a: ScanArgs) -> Outcome {
    let cfg = validated(a.config.load()?)?;
    let scene = Scene::load(&a.scene).map_err(Failure::input)?;
    let scanner_cfg = cfg.scanner();
    let scanner = Scanner::new(&scene, &scanner_cfg).map_err(Failure::input)?;
    let mut buffer = LineBuffer::new(&scanner_cfg, &scanner.white_reference()).map_err(Failure::input)?;
    fs::create_dir_all(&a.output_dir).map_err(Failure::io)?;
    // scan until the last object has cleared a full frame
    let last = scene.devices.iter().map(|d| d.rect.x_end).fold(0.0, f64::max);
    let frame_mm = scanner_cfg.frame_height_lines as f64 * scanner_cfg.pixel_pitch_mm;
    let lines = ((last + frame_mm) / scanner_cfg.pixel_pitch_mm).ceil() as u64;
    let mut written = 0;
    for k in 0..lines {
        if let Some(frame) = buffer.push_line(&scanner.scan_index(k)) {
            export_frame(&a.output_dir, &frame).map_err(Failure::io)?;
            written += 1;
        }
    }
    eprintln!("{lines} lines, {written} frames in {}", a.output_dir.display());
    Ok(())
}

/// Rebuilds frames from the te/he pairs in `dir`, in index order.
fn load_frames(dir: &Path, cfg: &ScenarioConfig) -> anyhow::Result<Vec<DualEnergyFrame>> {
    let sc = cfg.scanner();
    let mut indices: Vec<u64> = fs::read_dir(dir)
        .map_err(|e| anyhow!("cannot list {}: {e}", dir.display()))?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix("frame_")?.strip_suffix("_he.pgm")?.parse().ok()
        })
        .collect();
    indices.sort_unstable();
    let half = sc.frame_height_lines as u64 / 2;
    indices
        .into_iter()
        .map(|i| {
            let te = read_pgm(&dir.join(frame_file_name(i, "te")))?;
            let he = read_pgm(&dir.join(frame_file_name(i, "he")))?;
            let first_line = i * half;
            Ok(DualEnergyFrame {
                window: FrameWindow {
                    frame_index: i,
                    first_line,
                    height_lines: sc.frame_height_lines,
                    origin_mm: first_line as f64 * sc.pixel_pitch_mm,
                    line_pitch_mm: sc.pixel_pitch_mm,
                },
                mm_per_px: sc.frame_mm_per_px(),
                te,
                he,
            })
        })
        .collect()
}

fn detect(a: DetectArgs) -> Outcome {
    let cfg = validated(a.config.load()?)?;
    let frames = load_frames(&a.frames, &cfg).map_err(Failure::input)?;
    if frames.is_empty() {
        return Err(Failure::input(anyhow!("no frames in {}", a.frames.display())));
    }
    let records: Vec<DetectionRecord> = match &a.oracle {
        Some(scene) => {
            let scene = Scene::load(scene).map_err(Failure::input)?;
            let oracle = OracleDetector::new(scene, &cfg.scanner());
            frames.iter().map(|f| oracle.record(&f.window)).collect()
        }
        None => {
            let det = StandInDetector::new(cfg.detection.clone());
            frames.iter().map(|f| det.detect_frame(f)).collect()
        }
    };
    let json = serde_json::to_string_pretty(&records).map_err(Failure::io)?;
    match &a.out {
        Some(p) => fs::write(p, json + "\n").map_err(Failure::io),
        None => emit(&(json + "\n")),
    }
}

fn metrics(a: MetricsArgs) -> Outcome {
    if !(a.iou > 0.0 && a.iou < 1.0) || !(a.gap >= 0.0) {
        return Err(Failure::input(anyhow!("iou must be in (0, 1) and gap non-negative")));
    }
    let pred = read_records(&a.pred).map_err(Failure::input)?;
    let gt = read_records(&a.gt).map_err(Failure::input)?;
    let mut pairs = Vec::new();
    for g in &gt {
        let p = pred
            .iter()
            .find(|p| p.frame_index == g.frame_index)
            .map(|p| p.batteries.clone())
            .unwrap_or_default();
        pairs.push((p, g.batteries.clone()));
    }
    // predictions on frames without ground truth count as false positives
    for p in pred.iter().filter(|p| !gt.iter().any(|g| g.frame_index == p.frame_index)) {
        pairs.push((p.batteries.clone(), Vec::new()));
    }
    let report = evaluate(&pairs, a.gap, a.iou);
    let table = report.to_csv();
    if let Some(path) = &a.csv {
        fs::write(path, &table).map_err(Failure::io)?;
    }
    emit(&table)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Kin { op } => kin(op),
        Command::Traj(a) => traj(a),
        Command::Scan(a) => scan(a),
        Command::Detect(a) => detect(a),
        Command::Metrics(a) => metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.err);
            ExitCode::from(f.code)
        }
    }
}

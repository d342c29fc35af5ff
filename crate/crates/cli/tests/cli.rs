use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread::sleep;
use std::time::Duration;

fn weee(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weee"))
        .args(args)
        .env_remove("WEEE_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn kin_fk_and_ik() {
    let o = weee(&["kin", "fk", "0", "0", "0"]);
    assert!(o.status.success());
    let z: Vec<f64> = stdout(&o).split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(&z[..2], &[0.0, 0.0]);
    assert!((z[2] + 738.691).abs() < 1e-3);

    let o = weee(&["kin", "ik", "0", "0", "-738.690734"]);
    assert!(o.status.success());
    for v in stdout(&o).split_whitespace() {
        assert!(v.parse::<f64>().unwrap().abs() < 1e-6, "{v}");
    }
    assert_eq!(weee(&["kin", "ik", "0", "0", "-2000"]).status.code(), Some(3));
}

#[test]
fn traj_boundaries_and_errors() {
    let o = weee(&["traj", "--pick=-200,0,-900", "--place=200,0,-900"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 1001);
    for r in [&rows[0], &rows[1000]] {
        assert_eq!(&r[4..7], &[0.0, 0.0, 0.0]);
    }

    let o = weee(&["traj", "--pick=0,0,-900", "--place=0,0,-900"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let bodies: Vec<&str> = text.lines().skip(1).map(|l| l.split_once(',').unwrap().1).collect();
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));

    let bad = weee(&["traj", "--pick=0,0,-900", "--place=0,0,-900", "--alpha", "1.5"]);
    assert_eq!(bad.status.code(), Some(2));
    let far = weee(&["traj", "--pick=0,0,-2000", "--place=0,0,-900"]);
    assert_eq!(far.status.code(), Some(3));
}

#[test]
fn simulate_is_deterministic_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = weee(&["simulate", "--seed", "1", "--n-items", "6", "--output-dir", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["report.json", "events.csv", "schedule.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let r = report(&a);
    assert_eq!(r["spawned"], 6);
    assert_eq!(r["sorted_to_bin"], r["battery_items"]);

    assert_eq!(weee(&["simulate", "--battery-fraction", "1.5"]).status.code(), Some(2));
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"conveyor_speed_mm_s": -1}"#).unwrap();
    assert_eq!(weee(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn simulate_reads_config_and_seed_env() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"n_items": 3, "battery_fraction": 1.0}"#).unwrap();
    let run = |dir: &Path, seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_weee"))
            .args(["simulate", "--config", cfg.to_str().unwrap(), "--output-dir", dir.to_str().unwrap()])
            .env("WEEE_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.success());
        fs::read_to_string(dir.join("report.json")).unwrap()
    };
    let first = run(&tmp.path().join("x"), "4");
    assert_eq!(first, run(&tmp.path().join("y"), "4"));
    let r = report(&tmp.path().join("x"));
    assert_eq!(r["battery_items"], 3);
    assert_eq!(r["sorted_to_bin"], 3);
}

#[test]
fn scan_detect_metrics_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene.json");
    fs::write(
        &scene,
        r#"{
  "conveyor_speed_mm_s": 350.0,
  "devices": [
    {"id": 1, "rect": {"x_start": 40.0, "x_end": 160.0, "y_start": 300.0, "y_end": 420.0},
     "thickness_mm": 8.0, "material": "plastic",
     "batteries": [{"id": 2, "class": "pouch",
                    "rect": {"x_start": 60.0, "x_end": 120.0, "y_start": 320.0, "y_end": 360.0},
                    "thickness_mm": 5.0, "material": "lithium_cell"}]}
  ]
}"#,
    )
    .unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"bin_factor": 5}"#).unwrap();
    let frames = tmp.path().join("frames");
    let s = |p: &Path| p.to_str().unwrap().to_owned();

    let o = weee(&["scan", "--config", &s(&cfg), "--scene", &s(&scene), "--output-dir", &s(&frames)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(frames.join("frame_000000_he.pgm").exists());
    assert!(frames.join("frame_000000.ppm").exists());

    let pred = tmp.path().join("pred.json");
    let gt = tmp.path().join("gt.json");
    let o = weee(&["detect", "--config", &s(&cfg), "--frames", &s(&frames), "--out", &s(&pred)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = weee(&[
        "detect", "--config", &s(&cfg), "--frames", &s(&frames), "--oracle", &s(&scene), "--out", &s(&gt),
    ]);
    assert!(o.status.success());

    let same = weee(&["metrics", "--pred", &s(&gt), "--gt", &s(&gt)]);
    assert!(same.status.success());
    let text = stdout(&same);
    assert!(text.starts_with("class,recall,precision,modified_recall,ap50"));
    let all = text.lines().find(|l| l.starts_with("all,")).unwrap();
    assert!(all.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 1.0), "{all}");

    let o = weee(&["metrics", "--pred", &s(&pred), "--gt", &s(&gt)]);
    assert!(o.status.success());
    let all = stdout(&o).lines().find(|l| l.starts_with("all,")).unwrap().to_owned();
    let recall: f64 = all.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(recall, 1.0, "{all}");

    let empty = tmp.path().join("empty.json");
    fs::write(&empty, "[]").unwrap();
    let o = weee(&["metrics", "--pred", &s(&empty), "--gt", &s(&gt)]);
    let all = stdout(&o).lines().find(|l| l.starts_with("all,")).unwrap().to_owned();
    assert_eq!(all.split(',').nth(1).unwrap().parse::<f64>().unwrap(), 0.0);

    let junk = tmp.path().join("junk.json");
    fs::write(&junk, "{not json").unwrap();
    assert_eq!(weee(&["metrics", "--pred", &s(&junk), "--gt", &s(&gt)]).status.code(), Some(2));
}

#[test]
fn networked_robot_matches_local_run() {
    let tmp = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let common = ["--seed", "2", "--n-items", "5"];
    let mut server = Command::new(env!("CARGO_BIN_EXE_weee"))
        .args(["simulate", "--serve", &port.to_string()])
        .args(common)
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let remote = tmp.path().join("remote");
    let mut out = None;
    for _ in 0..100 {
        let o = weee(
            &[&["simulate", "--connect", &format!("127.0.0.1:{port}"), "--output-dir", remote.to_str().unwrap()][..], &common[..]]
                .concat(),
        );
        if o.status.success() {
            out = Some(o);
            break;
        }
        sleep(Duration::from_millis(50));
    }
    assert!(out.is_some(), "client never connected");
    assert!(server.wait().unwrap().success());

    let local = tmp.path().join("local");
    assert!(weee(&[&["simulate", "--output-dir", local.to_str().unwrap()][..], &common[..]].concat())
        .status
        .success());
    assert_eq!(report(&remote), report(&local));
}

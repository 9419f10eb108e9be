//! End-to-end checks of the `bnspike` binary on the shipped configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bnspike"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for fmt in ["csv", "json"] {
        let a = tmp.path().join(format!("a_{fmt}"));
        let b = tmp.path().join(format!("b_{fmt}"));
        for dir in [&a, &b] {
            let o = run(&[
                "simulate",
                "--config",
                s(&config("spike.toml")),
                "--out",
                s(dir),
                "--format",
                fmt,
            ]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
        for f in [format!("trajectory.{fmt}"), "summary.json".to_string()] {
            let x = std::fs::read(a.join(&f)).unwrap();
            let y = std::fs::read(b.join(&f)).unwrap();
            assert!(!x.is_empty());
            assert_eq!(x, y, "{f} differs between identical runs");
        }
    }
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("delayed_onset.toml");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run(&["simulate", "--config", s(&cfg), "--out", s(&a)])
        .status
        .success());
    assert!(run(&[
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(&b),
        "--seed",
        "655"
    ])
    .status
    .success());
    assert_ne!(
        std::fs::read(a.join("trajectory.csv")).unwrap(),
        std::fs::read(b.join("trajectory.csv")).unwrap()
    );
}

#[test]
fn honest_replay_passes_and_tampered_replay_fails_shape_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run(&[
        "verify",
        "--config",
        s(&config("delayed_onset.toml")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    let traj = out.join("trajectory.csv");
    let o = run(&["verify", "--trajectory", s(&traj)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o)
        .lines()
        .any(|l| l.starts_with("shape_bounds") && l.contains("PASS")));

    // Push the ratio at t2 = 7 past 1; the neighbouring edge labels stay
    // consistent, only the square-root envelope is broken.
    let text = std::fs::read_to_string(&traj).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "ratio").unwrap();
    let tampered: Vec<String> = text
        .lines()
        .map(|line| {
            let mut f: Vec<String> = line.split(',').map(String::from).collect();
            if f[0] == "7" {
                assert_eq!(f[header.len() - 1], "falling");
                f[col] = "1.05".into();
            }
            f.join(",")
        })
        .collect();
    let bad = tmp.path().join("tampered.csv");
    std::fs::write(&bad, tampered.join("\n") + "\n").unwrap();
    let o = run(&["verify", "--trajectory", s(&bad)]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    let table = stdout(&o);
    assert!(
        table
            .lines()
            .any(|l| l.starts_with("shape_bounds") && l.contains("FAIL")),
        "{table}"
    );
    assert!(table
        .lines()
        .any(|l| l.starts_with("edge_labels_consistent") && l.contains("PASS")));
}

#[test]
fn unsatisfiable_campaign_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "verify",
        "--config",
        s(&config("logistic_campaign.toml")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let board: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("scoreboard.json")).unwrap())
            .unwrap();
    let status = board["clauses"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["id"] == "campaign_status")
        .unwrap();
    assert!(
        status["detail"].as_str().unwrap().contains("unsatisfiable"),
        "{status}"
    );
}

#[test]
fn one_cell_sweep_matches_simulate() {
    let tmp = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(config("delayed_onset.toml")).unwrap();
    let cfg = tmp.path().join("one.toml");
    std::fs::write(
        &cfg,
        format!("{base}\n[grid]\neta = [9.0]\neta_alpha = [0.3]\nseeds = [42]\n"),
    )
    .unwrap();
    let sweep_dir = tmp.path().join("sweep");
    let o = run(&["sweep", "--config", s(&cfg), "--out", s(&sweep_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let single = base
        .replace("eta = 8.513384430987589", "eta = 9.0")
        .replace("eta_alpha = 0.3537138680637536", "eta_alpha = 0.3");
    assert_ne!(single, base);
    let single_cfg = tmp.path().join("single.toml");
    std::fs::write(&single_cfg, single).unwrap();
    let sim_dir = tmp.path().join("sim");
    let o = run(&[
        "simulate",
        "--config",
        s(&single_cfg),
        "--seed",
        "42",
        "--out",
        s(&sim_dir),
    ]);
    assert!(o.status.success());

    let cell = sweep_dir.join("cells").join("cell_00000");
    for f in ["trajectory.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(cell.join(f)).unwrap(),
            std::fs::read(sim_dir.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn sweep_summary_does_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let dir = tmp.path().join(threads);
        let o = bin()
            .args([
                "sweep",
                "--config",
                s(&config("sweep.toml")),
                "--out",
                s(&dir),
            ])
            .env("BNSPIKE_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(std::fs::read(dir.join("sweep_summary.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let summary: serde_json::Value = serde_json::from_slice(&outputs[0]).unwrap();
    assert_eq!(summary["cell_count"], 12);
}

#[test]
fn invalid_thread_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .args([
            "sweep",
            "--config",
            s(&config("sweep.toml")),
            "--out",
            s(tmp.path()),
        ])
        .env("BNSPIKE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("BNSPIKE_THREADS"));
}

#[test]
fn bad_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(config("delayed_onset.toml")).unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(
        &cfg,
        base.replace("eta_alpha = 0.3537138680637536", "eta_alpha = \"fast\""),
    )
    .unwrap();
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gd.eta_alpha"), "{err}");
}

#[test]
fn plot_shades_the_rising_segment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "simulate",
        "--config",
        s(&config("spike.toml")),
        "--out",
        s(tmp.path()),
    ]);
    assert!(o.status.success());
    let o = run(&[
        "plot",
        "--trajectory",
        s(&tmp.path().join("trajectory.csv")),
        "--log-risk",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(tmp.path().join("plot.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("class=\"rising\""));
    assert!(
        svg.contains("data-t-start=\"26\""),
        "rising span should start at t1 = 26"
    );
    assert!(tmp.path().join("plot_data.csv").exists());
}

#[test]
fn gen_data_and_constants_run() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "gen-data",
        "--config",
        s(&config("spike.toml")),
        "--out",
        s(tmp.path()),
    ]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(tmp.path().join("dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11, "header plus ten samples");
    let o = run(&[
        "constants",
        "--config",
        s(&config("logistic_campaign.toml")),
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["lambda_max"].as_f64().unwrap() > 1.0);
}

use std::path::Path;
use std::process::{Command, Output};

fn shelf_search(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shelf-search"))
        .args(args)
        .env_remove("SHELF_SEARCH_HEURISTIC")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path, obstacles: &str, seed: u64) -> String {
    let path = dir.join(format!("scenario_{seed}.json"));
    let out = shelf_search(&["generate", "--obstacles", obstacles, "--seed", &seed.to_string(), "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    path.to_str().unwrap().to_string()
}

fn summary_line(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap();
    let last = text.lines().last().unwrap();
    serde_json::from_str::<serde_json::Value>(last).unwrap()["summary"].clone()
}

#[test]
fn run_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = generate(dir.path(), "2-3", 5);
    let mut hashes = Vec::new();
    for (i, extra) in [[].as_slice(), ["--serial"].as_slice(), [].as_slice()].iter().enumerate() {
        let trace = dir.path().join(format!("t{i}.jsonl"));
        let mut args = vec![
            "run", "--scenario", &scenario, "--method", "hybrid", "--m", "2", "--h", "2", "--seed", "7",
            "--heuristic", "scripted", "--trace", trace.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let out = shelf_search(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).contains("hash "));
        hashes.push(summary_line(&trace)["hash"].as_str().unwrap().to_string());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(hashes[0], hashes[2]);
}

#[test]
fn trace_records_have_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = generate(dir.path(), "0-0", 2);
    let trace = dir.path().join("t.jsonl");
    let out = shelf_search(&["run", "--scenario", &scenario, "--method", "greedy", "--seed", "1", "--trace", trace.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&trace).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines[0].get("header").is_some());
    for step in &lines[1..lines.len() - 1] {
        for key in ["t", "action", "reward", "terminal", "visible_ids", "gripper_pose"] {
            assert!(step.get(key).is_some(), "missing {key}");
        }
    }
    assert!(lines.last().unwrap().get("summary").is_some());
}

#[test]
fn print_config_shows_defaults_and_environment_override() {
    let out = shelf_search(&["run", "--print-config"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let config: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(config["method"], "hybrid(4,4)");
    assert_eq!(config["heuristic"], "scripted");
    assert_eq!(config["settings"]["env"]["step_limit"], 50);
    assert_eq!(config["settings"]["time_limit"], 120.0);

    let out = Command::new(env!("CARGO_BIN_EXE_shelf-search"))
        .args(["run", "--print-config", "--heuristic", "scripted"])
        .env("SHELF_SEARCH_HEURISTIC", "remote:127.0.0.1:7447")
        .output()
        .unwrap();
    let config: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(config["heuristic"], "remote:127.0.0.1:7447");

    let out = shelf_search(&["evaluate", "--print-config"]);
    let suite: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(suite["clutter_bins"], serde_json::json!([[0, 2], [3, 5], [6, 8], [9, 10]]));
    assert_eq!(suite["episodes"], 10);
}

#[test]
fn bad_heuristic_and_unreachable_service_fail() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = generate(dir.path(), "0-1", 3);
    let out = Command::new(env!("CARGO_BIN_EXE_shelf-search"))
        .args(["run", "--scenario", &scenario])
        .env("SHELF_SEARCH_HEURISTIC", "oracle")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown heuristic"));

    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let spec = format!("remote:{addr}");
    let out = shelf_search(&["run", "--scenario", &scenario, "--heuristic", &spec]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unavailable"), "{}", stderr(&out));
}

#[test]
fn evaluate_writes_reports_that_regenerate_from_traces() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("suite.json");
    std::fs::write(
        &config,
        r#"{
  "master_seed": 3,
  "episodes": 2,
  "methods": ["greedy", "stochastic"],
  "clutter_bins": [[0, 1], [2, 3]],
  "step_limit": 20,
  "plots": true
}
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("report");
    let out = shelf_search(&["evaluate", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["metrics.csv", "timing.csv", "report.json", "suite.json", "plots/success_rate_noise0.png"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let traces: Vec<_> = std::fs::read_dir(out_dir.join("traces")).unwrap().collect();
    assert_eq!(traces.len(), 8);
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);

    let again = dir.path().join("again");
    let out = shelf_search(&[
        "evaluate",
        "--from-traces",
        out_dir.join("traces").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["metrics.csv", "timing.csv", "report.json"] {
        assert_eq!(std::fs::read(out_dir.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap(), "{name}");
    }

    let rerun = dir.path().join("rerun");
    let out = shelf_search(&["evaluate", "--config", config.to_str().unwrap(), "--out", rerun.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(metrics.as_bytes(), std::fs::read(rerun.join("metrics.csv")).unwrap());
}

#[test]
fn config_errors_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("suite.json");
    std::fs::write(&config, "{\n  \"master_seed\": 3,\n  \"episodes\": \"many\"\n}\n").unwrap();
    let out = shelf_search(&["evaluate", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn render_writes_a_scaled_png() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = generate(dir.path(), "3-5", 4);
    let trace = dir.path().join("t.jsonl");
    let out = shelf_search(&["run", "--scenario", &scenario, "--method", "greedy", "--trace", trace.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let png = dir.path().join("step.png");
    let out = shelf_search(&["render", "--trace", trace.to_str().unwrap(), "--step", "1", "--png", png.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let bytes = std::fs::read(&png).unwrap();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    let width = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let height = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    assert_eq!((width, height), (512, 512));
    let out = shelf_search(&["render", "--trace", trace.to_str().unwrap(), "--step", "999", "--png", png.to_str().unwrap()]);
    assert!(!out.status.success());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .output()
        .expect("bench runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const FIG3: &str = r#"{"stages":[{"name":"select","duration":1,"lanes":1},{"name":"expand","duration":1,"lanes":1},{"name":"playout","duration":1,"lanes":1},{"name":"backup","duration":1,"lanes":1}],"items":4}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn sim_prints_makespan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fig3.json", FIG3);
    let gantt = dir.path().join("gantt.csv");
    let out = bench(&["sim", "--config", &cfg, "--gantt", gantt.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).lines().any(|l| l == "makespan=7"));
    let csv = fs::read_to_string(gantt).unwrap();
    assert!(csv.starts_with("item,stage,lane,start,end\n"));
    assert_eq!(csv.lines().count(), 1 + 16);
}

#[test]
fn sim_playout_lanes_json() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"stages":[{"name":"select","duration":1},{"name":"expand","duration":1},
        {"name":"playout","duration":2,"lanes":2},{"name":"backup","duration":1}],"items":4}"#;
    let cfg = write_config(dir.path(), "fig5.json", text);
    let out = bench(&["sim", "--config", &cfg, "--format", "json"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["makespan"], 8);
    assert_eq!(v["steady_period"], 1);
}

#[test]
fn sim_bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"stages":[],"items":4}"#);
    assert_eq!(bench(&["sim", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(
        bench(&["sim", "--config", "/nonexistent.json"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn run_rows_are_reproducible() {
    let args = [
        "run",
        "--game",
        "tictactoe",
        "--engine",
        "sequential",
        "--budget",
        "1000",
        "--seeds",
        "10",
    ];
    let column = |o: &Output, name: &str| -> Vec<String> {
        let text = stdout(o);
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let idx = header.iter().position(|h| *h == name).unwrap();
        lines
            .map(|l| l.split(',').nth(idx).unwrap().to_owned())
            .collect()
    };
    let a = bench(&args);
    let b = bench(&args);
    assert!(a.status.success());
    assert_eq!(column(&a, "best_action").len(), 10);
    assert_eq!(column(&a, "best_action"), column(&b, "best_action"));
    assert!(column(&a, "root_n").iter().all(|n| n == "1000"));
    assert_eq!(
        stdout(&a).lines().next().unwrap(),
        "game,engine,k,in_flight,m,seed,wall_ns,best_action,root_n,seq_wall_ns,speedup"
    );
}

#[test]
fn report_digest_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut digests = Vec::new();
    for i in 0..2 {
        let out_dir = dir.path().join(format!("r{i}"));
        let out = bench(&[
            "run",
            "--engine",
            "pipeline",
            "--lanes",
            "2",
            "--in-flight",
            "1",
            "--budget",
            "300",
            "--seed-list",
            "3,5",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["deterministic"]["runs"][0]["seed"], 3);
        assert!(report["deterministic"]["runs"][0]["best_action"].is_number());
        digests.push((
            report["digest"].as_str().unwrap().to_owned(),
            serde_json::to_string(&report["deterministic"]).unwrap(),
        ));
        assert!(out_dir.join("results.csv").exists());
        assert!(out_dir.join("runs.json").exists());
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn pipeline_events_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(&[
        "run",
        "--game",
        "synthetic",
        "--engine",
        "pipeline",
        "--lanes",
        "2",
        "--budget",
        "50",
        "--seeds",
        "1",
        "--events",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let events = fs::read_to_string(dir.path().join("events-k2-seed0.csv")).unwrap();
    assert!(events.starts_with("token,stage,lane,start_ns,end_ns\n"));
    let runs: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("runs.json")).unwrap()).unwrap();
    assert_eq!(runs[0]["audit"]["backed"], 50);
    assert!(runs[0]["stats"]["lanes"].as_array().unwrap().len() == 2);
    assert!(runs[0]["result"]["root_children"].is_array());
}

#[test]
fn config_file_drives_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "spec.json",
        r#"{"game":{"synthetic":{"branching":3,"depth":5}},"budget_m":40,"engine":"sequential","repetitions":2,"seeds":[7,8]}"#,
    );
    let out = bench(&["run", "--config", &cfg]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("synthetic,sequential,1,1,40,7,"));

    let bad = write_config(
        dir.path(),
        "bad.json",
        r#"{"game":"tictactoe","budget_m":40,"engine":"sequential","repetitions":2,"seeds":[7]}"#,
    );
    assert_eq!(bench(&["run", "--config", &bad]).status.code(), Some(1));
}

#[test]
fn sweep_covers_every_lane_count() {
    let out = bench(&[
        "sweep",
        "--game",
        "synthetic",
        "--lanes",
        "1,2,4",
        "--budget",
        "100",
        "--seeds",
        "2",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1 + 2 * 4);
    for k in ["1", "2", "4"] {
        assert!(text
            .lines()
            .any(|l| l.starts_with(&format!("synthetic,pipeline,{k},"))));
    }
}

#[test]
fn match_and_overhead_json() {
    let out = bench(&[
        "match",
        "--budget",
        "30",
        "--games",
        "4",
        "--opponent",
        "random",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let r = &v["report"];
    assert_eq!(r["games"], 4);
    assert_eq!(
        r["wins"].as_u64().unwrap() + r["draws"].as_u64().unwrap() + r["losses"].as_u64().unwrap(),
        4
    );

    let out = bench(&[
        "overhead",
        "--engine",
        "pipeline",
        "--lanes",
        "2",
        "--in-flight",
        "1",
        "--budget",
        "100",
        "--seeds",
        "3",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["report"]["duplicate_fraction_max"], 0.0);
    assert_eq!(v["report"]["root_policy_distance_max"], 0.0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(bench(&[]).status.code(), Some(1));
    assert_eq!(
        bench(&["run", "--staleness", "sometimes"]).status.code(),
        Some(1)
    );
    assert_eq!(bench(&["run", "--budget", "0"]).status.code(), Some(1));
    assert_eq!(
        bench(&["match", "--games", "3", "--budget", "5"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(bench(&["run", "--events"]).status.code(), Some(1));
    assert_eq!(bench(&["--help"]).status.code(), Some(0));
    let ok = bench(&[
        "run",
        "--engine",
        "pipeline",
        "--staleness",
        "visit-mark",
        "--budget",
        "20",
    ]);
    assert!(ok.status.success());
}

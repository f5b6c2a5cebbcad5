mod common;

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const QUICK: &str = r#"
name = "quick"
seed = 5
peers = 12
horizon_ms = 60000

[workload]
clients = 4
mean_interval_ms = 10000
"#;

fn p4qs(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_p4qs"));
    c.args(args).env_remove("P4QS_CONFIG");
    c
}

fn run(mut cmd: Command) -> Output {
    cmd.output().expect("binary runs")
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_writes_json_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "quick.toml", QUICK);
    let out = dir.path().join("r.json");
    let o = run(p4qs(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]));
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&out);
    assert_eq!(v[0]["scenario"], "quick");
    assert_eq!(v[0]["seed"], 5);
    assert_eq!(v[0]["min_anonymity_set"], 4);
}

#[test]
fn short_flags_and_seed_override() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "quick.toml", QUICK);
    let out = dir.path().join("r.txt");
    let o = run(p4qs(&["run", "-c", &cfg, "-s", "9", "-f", "csv", "-o", out.to_str().unwrap()]));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let seeds: Vec<String> = rows.records().map(|r| r.unwrap()[2].to_string()).collect();
    assert_eq!(seeds, ["9"]);
}

#[test]
fn seed_range_is_inclusive_and_format_follows_extension() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "quick.toml", QUICK);
    let out = dir.path().join("r.csv");
    let o = run(p4qs(&["run", "-c", &cfg, "--seeds", "2..4", "-o", out.to_str().unwrap()]));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("scenario,protocol,seed,"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn config_comes_from_environment_when_not_given() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "quick.toml", QUICK);
    let out = dir.path().join("r.json");
    let mut cmd = p4qs(&["run", "-o", out.to_str().unwrap()]);
    cmd.env("P4QS_CONFIG", &cfg);
    let o = run(cmd);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&out)[0]["scenario"], "quick");
}

#[test]
fn invalid_value_exits_1_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "bad.toml", &format!("{QUICK}\n[tickets]\nbatch_size = 0\n"));
    let out = dir.path().join("r.json");
    let o = run(p4qs(&["run", "-c", &cfg, "-o", out.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tickets.batch_size"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_key_exits_1_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "bad.toml", "peers = 10\nwait_ms = 3\n");
    let o = run(p4qs(&["run", "-c", &cfg]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("wait_ms"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_exits_1() {
    let o = run(p4qs(&["run", "-c", "/nonexistent/p4qs.toml"]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_seed_range_exits_1() {
    let o = run(p4qs(&["run", "--seeds", "5..2"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--seeds"));
}

#[test]
fn unknown_preset_exits_1() {
    let o = run(p4qs(&["run", "-p", "XYZ"]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fault_breach_exits_2_without_a_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "quick.toml", QUICK);
    let out = dir.path().join("r.json");
    let o = run(p4qs(&["run", "-c", &cfg, "--seeds", "1..3", "--fault", "undersized-batch", "-o", out.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("invariant breach"));
    assert!(!out.exists());
}

#[test]
fn trace_is_written_as_json_lines() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "quick.toml", QUICK);
    let trace = dir.path().join("trace.jsonl");
    let o = run(p4qs(&["run", "-c", &cfg, "--trace", trace.to_str().unwrap()]));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut events = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["t"].is_u64() && v["seq"].is_u64() && v["ev"].is_string());
        events += 1;
    }
    assert!(events > 100);
    // The report went to stdout.
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["scenario"], "quick");
}

#[test]
fn probability_prints_exact_edge_values() {
    let o = run(p4qs(&["probability", "-T", "10", "-E", "0", "-N", "50", "-R", "3"]));
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "analytic 1.0");
    let o = run(p4qs(&["probability", "-T", "10", "-E", "10", "-N", "50", "-R", "1", "--mc", "1000"]));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(text.contains("analytic 0.0\n") && text.contains("monte_carlo 0.0 "), "{text}");
}

#[test]
fn probability_rejects_oversized_exchange() {
    let o = run(p4qs(&["probability", "-T", "5", "-E", "6", "-N", "50", "-R", "3"]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fixtures_command_reproduces_goldens() {
    let dir = TempDir::new().unwrap();
    let o = run(p4qs(&["fixtures", "-o", dir.path().to_str().unwrap()]));
    assert!(o.status.success(), "{}", stderr(&o));
    let golden = common::golden_dir();
    for name in ["pois.csv", "wire/query.bin", "wire/ticket_exchange.bin"] {
        assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), std::fs::read(golden.join(name)).unwrap(), "{name}");
    }
}

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
    "seed": 3,
    "scene": {
        "agents": [{"id": 0, "x": 0, "y": 0, "yaw": 0}, {"id": 1, "x": 10, "y": 3.5, "yaw": 0}],
        "vehicles": {"count": 3, "x_extent": [-15, 15]},
        "clutter_density": 0.05,
        "range": {"min": [-20, -10, -3], "max": [20, 10, 1]}
    },
    "top_k": 64,
    "locality_sample": 64
}"#;

fn cli(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointfuse")).args(args).current_dir(dir).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    let out = stdout(&cli(&["--config", "small.json", "--format", "both", "--out-dir", "o", "run"], dir.path()));
    assert!(out.contains("top_k=64"), "{out}");
    let json = dir.path().join("o/run.json");
    assert!(json.exists() && dir.path().join("o/run.csv").exists());

    let summary = stdout(&cli(&["report", json.to_str().unwrap()], dir.path()));
    assert!(summary.contains("top_k=64"));

    // flags override the file
    let out = stdout(&cli(&["--config", "small.json", "--top-k", "all", "--seed", "4", "--out-dir", "o2", "run"], dir.path()));
    assert!(out.contains("top_k=all"), "{out}");
}

#[test]
fn sweep_k_writes_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    stdout(&cli(&["--config", "small.json", "--out-dir", "o", "sweep-k", "--ks", "8,16,32"], dir.path()));
    let csv = std::fs::read_to_string(dir.path().join("o/sweep_k.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn init_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    stdout(&cli(&["--config", "small.json", "init-weights", "w.json"], dir.path()));
    assert!(dir.path().join("w.bin").exists());
    let with_file = SMALL.replacen("\"seed\": 3,", "\"seed\": 3, \"weights\": \"w.json\",", 1);
    std::fs::write(dir.path().join("with.json"), with_file).unwrap();
    stdout(&cli(&["--config", "with.json", "--format", "json", "--out-dir", "a", "run"], dir.path()));
    stdout(&cli(&["--config", "small.json", "--format", "json", "--out-dir", "b", "run"], dir.path()));
    let a = std::fs::read(dir.path().join("a/run.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/run.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"top_k": 0}"#).unwrap();
    let o = cli(&["--config", "bad.json", "run"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("top_k"));
    let o = cli(&["--config", "missing.json", "run"], dir.path());
    assert!(!o.status.success());
    let o = cli(&["sweep-noise", "--levels", "x:1"], dir.path());
    assert!(!o.status.success());
}

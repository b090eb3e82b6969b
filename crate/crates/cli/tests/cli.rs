use std::path::Path;
use std::process::{Command, Output};

const MINIMAL: &str = r#"{
  "draft": {"kind": "categorical-iid", "vocab_size": 2, "probs": [0.5, 0.5]},
  "target": {"kind": "categorical-iid", "vocab_size": 2, "probs": [0.8, 0.2]},
  "gamma": 1,
  "tau": 0.0,
  "cluster": {"n_nodes": 4, "t0_ms": 1.0, "t1_ms": 5.0},
  "max_new": 8,
  "seeds": [1],
  "horizon": 3
}
"#;

fn dsd(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsd"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn smoke_run_writes_two_csvs_only_under_out() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "min.json", MINIMAL);
    let o = dsd(dir.path(), &["run", "--config", "min.json", "--out", "res"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        entries(&dir.path().join("res")),
        ["summary.csv", "traces.csv"]
    );
    assert_eq!(entries(dir.path()), ["min.json", "res"]);
    let summary = std::fs::read_to_string(dir.path().join("res/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "min.json", MINIMAL);
    for (out, workers) in [("a", "1"), ("b", "3")] {
        let o = dsd(
            dir.path(),
            &[
                "run",
                "--config",
                "min.json",
                "--out",
                out,
                "--seed",
                "9",
                "--workers",
                workers,
            ],
        );
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["summary.csv", "traces.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn out_of_range_tau_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "bad.json",
        &MINIMAL.replace("\"tau\": 0.0", "\"tau\": 1.5"),
    );
    let o = dsd(dir.path(), &["run", "--config", "bad.json", "--out", "res"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("tau") && err.contains("line 5"), "{err}");
    assert!(!dir.path().join("res").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "bad.json",
        &MINIMAL.replace("\"gamma\": 1", "\"gama\": 1"),
    );
    let o = dsd(dir.path(), &["run", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gama"));
}

#[test]
fn sweep_emits_rows_per_seed_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace(
        "\"seeds\": [1],",
        "\"seeds\": [1, 2, 3],\n  \"sweep\": {\"parameter\": \"tau\", \"values\": [0.0, 0.2, 0.4, 0.8]},",
    );
    write_config(dir.path(), "s.json", &text);
    let o = dsd(dir.path(), &["sweep", "--config", "s.json", "--out", "res"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let summary = std::fs::read_to_string(dir.path().join("res/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 16);
    assert_eq!(rows.iter().filter(|r| r.contains("/mean,")).count(), 4);

    let o = dsd(
        dir.path(),
        &[
            "sweep", "--config", "s.json", "--out", "res2", "--seed", "4",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let summary = std::fs::read_to_string(dir.path().join("res2/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 9);
}

#[test]
fn sweep_without_section_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "min.json", MINIMAL);
    let o = dsd(
        dir.path(),
        &["sweep", "--config", "min.json", "--out", "res"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_lossless_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "strict.json", MINIMAL);
    let o = dsd(dir.path(), &["verify-lossless", "--config", "strict.json"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );

    let relaxed = MINIMAL.replace("\"tau\": 0.0", "\"tau\": 0.5").replace(
        "\"seeds\": [1],",
        "\"seeds\": [1],\n  \"criteria\": {\"lambda1\": \"inf\", \"lambda2\": 1.0, \"lambda3\": 0.0},",
    );
    write_config(dir.path(), "relaxed.json", &relaxed);
    let o = dsd(dir.path(), &["verify-lossless", "--config", "relaxed.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max_tv="));

    let same = MINIMAL
        .replace("\"probs\": [0.5, 0.5]", "\"probs\": [0.8, 0.2]")
        .replace("\"tau\": 0.0", "\"tau\": 1.0");
    write_config(dir.path(), "same.json", &same);
    let o = dsd(dir.path(), &["verify-lossless", "--config", "same.json"]);
    assert_eq!(o.status.code(), Some(0));

    let o = dsd(dir.path(), &["verify-lossless"]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "default gamma exceeds the enumeration guard"
    );
    assert_eq!(
        entries(dir.path()),
        ["relaxed.json", "same.json", "strict.json"]
    );
}

#[test]
fn calibrate_writes_choice_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsd(dir.path(), &["calibrate", "--out", "cal"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        entries(&dir.path().join("cal")),
        ["calibration.csv", "calibration_grid.csv"]
    );
    let grid = std::fs::read_to_string(dir.path().join("cal/calibration_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 65);
    assert_eq!(grid.lines().filter(|l| l.ends_with(",1")).count(), 1);
}

#[test]
fn analytic_rows_and_range_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsd(
        dir.path(),
        &[
            "analytic",
            "--n-nodes",
            "4",
            "--t0",
            "1",
            "--t1",
            "5",
            "--k",
            "1,4",
            "--out",
            "an",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("an/analytic.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[1], "4,1,5,1,0.111111,16,16,0,0.666667,true");
    assert!(rows[2].starts_with("4,1,5,4,0.444444,64,19,0.703125,"));

    for bad in [
        ["--k", "0.5"],
        ["--t1", "9:2"],
        ["--n-nodes", "2.5"],
        ["--k", "x"],
    ] {
        let o = dsd(dir.path(), &["analytic", bad[0], bad[1], "--out", "bad"]);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
    }
    assert!(!dir.path().join("bad").exists());
}

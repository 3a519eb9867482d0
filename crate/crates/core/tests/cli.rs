use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flaudit::federation::RoundReport;
use flaudit::harness::deserialize_params;

fn flaudit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flaudit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

const TWO_ROUNDS: &str = r#"{
  "seed": 11,
  "clients": [
    {"deficits": {"0": 0.4}},
    {"deficits": {"1": 0.5}},
    {"attack": {"kind": "SV"}}
  ],
  "rounds": 2,
  "output": {"prefix": "out/exp"}
}"#;

#[test]
fn run_writes_reports_model_and_detector() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", TWO_ROUNDS);
    let out = flaudit(&["run", "--config", "c.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = fs::read_to_string(dir.path().join("out/exp_summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,client_id,attack,h,P,accepted,acc_before,acc_after");
    assert_eq!(lines.len(), 2 * 3 + 1);
    for line in &lines[1..] {
        let accepted = line.split(',').nth(5).unwrap();
        assert!(accepted == "true" || accepted == "false", "{line}");
    }

    let json = fs::read_to_string(dir.path().join("out/exp_rounds.json")).unwrap();
    let reports: Vec<RoundReport> = serde_json::from_str(&json).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(serde_json::to_string_pretty(&reports).unwrap() + "\n", json);
    for r in &reports {
        assert_eq!(r.accepted_ids, vec![0, 1]);
    }

    let model = fs::read(dir.path().join("out/exp_global.flpd")).unwrap();
    assert!(deserialize_params(&model).is_ok());
    assert!(dir.path().join("out/exp_detector.json").exists());
}

#[test]
fn identical_configs_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        write_config(dir.path(), "c.json", TWO_ROUNDS);
        assert!(flaudit(&["run", "--config", "c.json"], dir.path()).status.success());
    }
    for file in ["out/exp_summary.csv", "out/exp_rounds.json", "out/exp_global.flpd", "out/exp_detector.json"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn audit_replays_a_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", TWO_ROUNDS);
    assert!(flaudit(&["run", "--config", "c.json"], dir.path()).status.success());
    // The attacker's own training data with its configured attack.
    let out = flaudit(&["attack-preview", "--config", "c.json", "--client", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = "out/exp_client2_data.csv";
    let params = "out/exp_client2_params.flpd";

    let out = flaudit(
        &["audit", "--model", params, "--public", data, "--detector", "out/exp_detector.json"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let verdict: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(verdict["accepted"], false);
    assert_eq!(verdict["h"], 100.0);

    let out = flaudit(
        &["audit", "--model", "out/exp_global.flpd", "--public", data, "--detector", "out/exp_detector.json"],
        dir.path(),
    );
    assert!(out.status.success());
    let verdict: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(verdict["accepted"], true);
}

#[test]
fn attack_preview_emits_the_poisoned_dataset() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "c.json",
        r#"{"seed": 2, "clients": [{}, {}, {"attack": {"kind": "RL"}}], "output": {"prefix": "p"}}"#,
    );
    let out = flaudit(&["attack-preview", "--config", "c.json", "--client", "2", "--out", "x/rl"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("attack RL"), "{text}");
    let poisoned = flaudit::data::load_csv(dir.path().join("x/rl_data.csv")).unwrap();
    // 300 pool samples per class split across 3 clients, 5 classes.
    assert_eq!(poisoned.len(), 500);
    assert!(dir.path().join("x/rl_params.flpd").exists());

    let out = flaudit(&["attack-preview", "--config", "c.json", "--client", "3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_writes_one_row_per_client_count() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", r#"{"seed": 4, "output": {"prefix": "b"}}"#);
    let out = flaudit(&["bench", "--config", "c.json", "--clients", "1,2,4", "--repeats", "1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("b_scaling.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "clients,audit_seconds");
    assert_eq!(rows.len(), 4);
    for row in &rows[1..] {
        let secs: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(secs > 0.0);
    }
    let out = flaudit(&["bench", "--config", "c.json", "--clients", "4,2"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "typo.json", r#"{"seed": 1, "aggregatr": "fedavg"}"#);
    let out = flaudit(&["run", "--config", "typo.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("aggregatr"));

    write_config(dir.path(), "nu.json", r#"{"seed": 1, "detector": {"nu": 1.5}}"#);
    let out = flaudit(&["run", "--config", "nu.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("detector.nu"));

    assert_eq!(flaudit(&["run", "--config", "missing.json"], dir.path()).status.code(), Some(1));
    assert_eq!(flaudit(&["no-such-command"], dir.path()).status.code(), Some(1));

    // A directory where the output file should go cannot be written.
    fs::create_dir_all(dir.path().join("blocked_summary.csv")).unwrap();
    write_config(
        dir.path(),
        "blocked.json",
        r#"{"seed": 1, "output": {"prefix": "blocked"}}"#,
    );
    assert_eq!(flaudit(&["run", "--config", "blocked.json"], dir.path()).status.code(), Some(2));
}

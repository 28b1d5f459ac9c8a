use std::path::Path;
use std::process::{Command, Output};

fn chanquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanquant")).args(args).output().unwrap()
}

const SMALL: &str = "d_model = 16\nd_ff = 40\nn_layers = 2\nseq_len = 12\nn_calib = 4\nn_eval = 2\n\
                     grid_points = 4\nepochs = 3\ngroup_size = 1\noutlier_channels = [3]\n";

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

#[test]
fn staged_commands_match_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let staged = tmp.path().join("staged");
    let whole = tmp.path().join("whole");
    for cmd in ["gen-model", "gen-calib", "stats", "reassemble", "quantize", "correct"] {
        let out = chanquant(&[cmd, "--config", &cfg, "--out-dir", staged.to_str().unwrap()]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = chanquant(&["run", "--config", &cfg, "--out-dir", whole.to_str().unwrap()]);
    assert!(out.status.code().is_some_and(|c| c <= 1), "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "model.json",
        "model.bin",
        "calib.bin",
        "eval.bin",
        "channel_minmax.csv",
        "plans.json",
        "q_reassembled.bin",
        "q_corrected.bin",
        "adapters.bin",
        "loss_trace.csv",
    ] {
        let a = std::fs::read(staged.join(name)).unwrap();
        let b = std::fs::read(whole.join(name)).unwrap();
        assert!(a == b, "{name} differs between staged and full runs");
    }

    let out = chanquant(&["eval", "--config", &cfg, "--out-dir", staged.to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(whole.join("report.json")).unwrap()).unwrap();
    for (key, stage) in [("naive", "naive"), ("reassembled", "reassembly"), ("corrected", "corrected")] {
        assert_eq!(v["output_mse"][key], report["stage_mse"][stage], "{key}");
    }
    assert_eq!(out.status.success(), v["ordered"].as_bool().unwrap());
}

#[test]
fn exit_code_follows_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let dir = tmp.path().join("out");
    let out = chanquant(&["run", "--config", &cfg, "--out-dir", dir.to_str().unwrap(), "--mode", "fixed_ratio"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["mode"], "fixed_ratio");
    let passed = report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true);
    assert_eq!(out.status.code(), Some(if passed { 0 } else { 1 }));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let dir = tmp.path().join("out");
    let report = tmp.path().join("elsewhere.json");
    let out = chanquant(&[
        "run",
        "--config",
        &cfg,
        "--out-dir",
        dir.to_str().unwrap(),
        "--seed",
        "4",
        "--bits-w",
        "8",
        "--bits-a",
        "8",
        "--mode",
        "off",
        "--rank",
        "2",
        "--epochs",
        "1",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.code().is_some_and(|c| c <= 1));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let c = &v["config"];
    assert_eq!((c["seed"].as_u64(), c["w_bits"].as_u64(), c["rank"].as_u64()), (Some(4), Some(8), Some(2)));
    assert_eq!(c["d_model"], 16);
    assert!(!dir.join("report.json").exists());
}

#[test]
fn invalid_settings_fail_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = chanquant(&["run", "--bits-w", "1", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("w_bits"));
    assert!(!dir.exists());

    let out = chanquant(&["run", "--mode", "sometimes"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = chanquant(&["quantize", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("quantize") && err.contains("model.json"), "{err}");
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hourglass_core::{Mode, RunConfig};

fn hourglass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hourglass"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hourglass(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn flops_table_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flops");
    let stdout = ok(&["flops", "--preset", "full-scale", "--d", "1,2,4", "--out", out.to_str().unwrap()]);
    for label in ["asr", "avsr_d1", "avsr_d2", "avsr_d4"] {
        assert!(stdout.contains(label), "{stdout}");
    }
    assert_eq!(fs::read_to_string(out.join("flops.txt")).unwrap(), stdout);
    let jsonl = fs::read_to_string(out.join("flops.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 4);
    for line in jsonl.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn flops_of_a_single_layer() {
    let stdout = ok(&[
        "flops",
        "--layer",
        r#"{"kind":"linear","d_in":4,"d_out":3}"#,
        "--shape",
        "10",
    ]);
    assert_eq!(stdout.trim(), "240");
    let bad = hourglass(&["flops", "--layer", r#"{"kind":"lstm"}"#, "--shape", "1"]);
    assert!(!bad.status.success());
}

#[test]
fn grad_check_passes_on_tiny() {
    let stdout = ok(&["grad-check", "--preset", "tiny", "--mode", "avsr_full"]);
    assert!(stdout.contains("max relative error"), "{stdout}");
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let out = hourglass(&["grad-check", "--mode", "avsr_turbo"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("avsr_full"));
}

#[test]
fn generate_train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::smoke(Mode::AvsrFull, 4);
    let config = write_config(dir.path(), &cfg);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["generate-data", "--config", &config, "--out", data.to_str().unwrap()]);
    for split in ["train", "valid", "test"] {
        assert!(data.join(split).join("corpus.json").exists(), "{split}");
    }
    ok(&[
        "train",
        "--config",
        &config,
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["mode"], "avsr_full");
    assert_eq!(
        fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(),
        cfg.train.steps
    );

    let report = dir.path().join("eval.json");
    let stdout = ok(&[
        "evaluate",
        "--checkpoint",
        run.join("best.ckpt").to_str().unwrap(),
        "--data",
        data.join("test").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(stdout.contains("TER"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report["references"].as_array().unwrap().len(), cfg.splits.test);
    assert!(report["within_window_attention_mass"].is_number());
}

#[test]
fn audio_only_checkpoint_initializes_audio_visual_training() {
    let dir = tempfile::tempdir().unwrap();
    let asr_dir = dir.path().join("asr");
    fs::create_dir_all(&asr_dir).unwrap();
    let asr_config = write_config(&asr_dir, &RunConfig::smoke(Mode::Asr, 5));
    let asr_run = asr_dir.join("run");
    ok(&["train", "--config", &asr_config, "--out", asr_run.to_str().unwrap()]);

    let config = write_config(dir.path(), &RunConfig::smoke(Mode::AvsrFull, 5));
    let stdout = ok(&[
        "train",
        "--config",
        &config,
        "--out",
        dir.path().join("avsr").to_str().unwrap(),
        "--init-from",
        asr_run.join("final.ckpt").to_str().unwrap(),
    ]);
    assert!(stdout.contains("initialized"), "{stdout}");
}

#[test]
fn bad_config_reports_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "mode = \"avsr_full\"\n").unwrap();
    let out = hourglass(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            RunConfig::from_toml(&fs::read_to_string(&path).unwrap())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 2);
}

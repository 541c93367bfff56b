use std::path::Path;
use std::process::{Command, Output};

use fovb_core::checkpoint::save_checkpoint;
use fovb_core::config::RunConfig;
use fovb_core::model::FovbModel;
use fovb_core::optim::AdamWState;

fn fovb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fovb")).args(args).output().expect("run fovb")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"seed": 3,
  "model": {"blocks": 3, "dim": 8, "heads": 2, "patch": 4, "r": 2, "glfa_blocks": [1, 2],
            "vbfe_block": 2, "input_size": 12, "encoder_depth": 1, "backbone_seed": 11},
  "train": {"steps": 6, "batch": 4, "mc_samples": 2}}"#;

#[test]
fn synth_is_deterministic_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    let out = fovb(&["synth", "--out", s(&a), "--n", "100", "--seed", "7"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "REAL=25\nRVFA=25\nFVRA=25\nFVFA=25\n");
    assert!(fovb(&["synth", "--out", s(&b), "--n", "100", "--seed", "7"]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn synth_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.bin");
    assert_eq!(fovb(&["synth", "--out", s(&out), "--n", "0"]).status.code(), Some(2));
    let nowhere = dir.path().join("missing/dir/x.bin");
    assert_eq!(fovb(&["synth", "--out", s(&nowhere), "--n", "4"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"stepz": 3}}"#).unwrap();
    let out = fovb(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn train_writes_artifacts_and_resume_continues_the_counter() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    assert!(fovb(&["synth", "--out", s(&data), "--n", "24", "--seed", "1"]).status.success());
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let out = fovb(&["train", "--config", s(&cfg), "--data", s(&data), "--eval-data", s(&data), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(run.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,loss,ce,neg_elbo,orth"));
    assert_eq!(trace.lines().count(), 7);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n"], 24);

    std::fs::write(&cfg, TINY.replace(r#""steps": 6"#, r#""steps": 9"#)).unwrap();
    let more = dir.path().join("more");
    let out = fovb(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--eval-data", s(&data), "--out", s(&more),
        "--resume", s(&run.join("checkpoint.fovb")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(more.join("loss_trace.csv")).unwrap();
    let steps: Vec<&str> = trace.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["7", "8", "9"]);
}

#[test]
fn diverging_run_exits_3_naming_the_term() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    assert!(fovb(&["synth", "--out", s(&data), "--n", "24", "--seed", "1"]).status.success());
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, TINY.replace(r#""steps": 6"#, r#""steps": 50, "lr": 1e200"#)).unwrap();
    let out = fovb(&["train", "--config", s(&cfg), "--data", s(&data), "--eval-data", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(["ce", "neg_elbo", "orth", "loss", "gradient"].iter().any(|t| err.contains(t)), "{err}");
}

#[test]
fn untrained_model_scores_at_chance_and_eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    assert!(fovb(&["synth", "--out", s(&data), "--n", "200", "--seed", "4"]).status.success());
    let cfg = RunConfig::default();
    let model = FovbModel::new(&cfg.model, cfg.seed, cfg.train.mc_samples).unwrap();
    let ckpt = dir.path().join("init.fovb");
    save_checkpoint(&ckpt, &cfg, &model, &AdamWState::new(&model.store)).unwrap();

    let first = fovb(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]);
    let second = fovb(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
    let json: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    let auc = json["auc"].as_f64().unwrap();
    assert!((0.35..=0.65).contains(&auc), "auc {auc}");
}

#[test]
fn eval_rejects_corrupt_and_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    assert!(fovb(&["synth", "--out", s(&data), "--n", "8", "--seed", "4"]).status.success());
    let garbage = dir.path().join("g.fovb");
    std::fs::write(&garbage, b"FOVB not really a checkpoint").unwrap();
    assert_eq!(fovb(&["eval", "--ckpt", s(&garbage), "--data", s(&data)]).status.code(), Some(4));
    let missing = dir.path().join("none.fovb");
    assert_eq!(fovb(&["eval", "--ckpt", s(&missing), "--data", s(&data)]).status.code(), Some(4));
}

#[test]
fn dump_latents_has_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    assert!(fovb(&["synth", "--out", s(&data), "--n", "12", "--seed", "2"]).status.success());
    let cfg: RunConfig = RunConfig::from_json(TINY).unwrap();
    let model = FovbModel::new(&cfg.model, cfg.seed, cfg.train.mc_samples).unwrap();
    let ckpt = dir.path().join("m.fovb");
    save_checkpoint(&ckpt, &cfg, &model, &AdamWState::new(&model.store)).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert!(fovb(&["dump-latents", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&a)]).status.success());
    assert!(fovb(&["dump-latents", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&b)]).status.success());
    let csv = std::fs::read_to_string(&a).unwrap();
    assert_eq!(csv, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 13);
    assert!(lines.iter().all(|l| l.split(',').count() == 1 + 6 * cfg.model.dim));
}

#[test]
fn gradcheck_and_divcheck_report() {
    let out = fovb(&["gradcheck", "--scope", "vbfe"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let out = fovb(&["divcheck", "--samples", "20000", "--search-c1", "--trials", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(fovb(&["gradcheck", "--scope", "nope"]).status.code(), Some(2));
}

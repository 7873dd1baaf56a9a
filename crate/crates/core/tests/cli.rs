use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anglereloc::cli::{estimates_from_jsonl, EstimateRecord, MetricsReport};
use anglereloc::ransac::EstimateStatus;
use anglereloc::regressor::{Checkpoint, SceneModel, TrainConfig};
use anglereloc::scenegen::load_dataset;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_anglereloc"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    let text = r#"{"scene": {"point_count": 150, "n_images": 8},
            "train": {"iterations": 60, "lr": 0.003, "log_every": 20, "points_per_iter": 32},
            "gradcheck": {"configs": 20}}"#;
    std::fs::write(&path, text).unwrap();
    path
}

fn gen_scene(dir: &Path, name: &str, config: &Path) -> PathBuf {
    let out = dir.join(name);
    let o = run(&[
        "gen-scene",
        "--config",
        p(config),
        "--out",
        p(&out),
        "--seed",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn gen_scene_is_reproducible_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = gen_scene(dir.path(), "a", &cfg);
    let b = gen_scene(dir.path(), "b", &cfg);
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.json")).unwrap());
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.frames.len(), 8);
    assert_eq!(ds.config.seed, 5);
    assert!(a.join("run_config.json").exists());
}

#[test]
fn unwritable_output_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, "x").unwrap();
    let o = run(&["gen-scene", "--out", p(&file.join("sub"))]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
}

#[test]
fn unknown_flag_and_bad_config_are_exit_2() {
    assert_eq!(code(&run(&["train", "--bogus"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"lr": -1}}"#).unwrap();
    assert_eq!(
        code(&run(&[
            "gen-scene",
            "--config",
            p(&cfg),
            "--out",
            p(&dir.path().join("x"))
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "train",
            "--data",
            p(&dir.path().join("missing")),
            "--out",
            p(&dir.path().join("y"))
        ])),
        2
    );
}

#[test]
fn zero_iterations_logs_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = gen_scene(dir.path(), "data", &cfg);
    let out = dir.path().join("t0");
    let o = run(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--iters",
        "0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn training_rerun_from_saved_config_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = gen_scene(dir.path(), "data", &cfg);
    let first = dir.path().join("first");
    let o = run(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&first),
        "--mode",
        "angle-multi",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let second = dir.path().join("second");
    let saved = first.join("run_config.json");
    let o = run(&[
        "train",
        "--config",
        p(&saved),
        "--data",
        p(&data),
        "--out",
        p(&second),
    ]);
    assert_eq!(code(&o), 0);
    for f in ["train_log.csv", "checkpoint.json", "summary.json"] {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
    let log = std::fs::read_to_string(first.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with("iter,loss,behind_frac,nonfinite_events,median_err\n"));
}

#[test]
fn exploding_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = gen_scene(dir.path(), "data", &cfg);
    let hot = dir.path().join("hot.json");
    std::fs::write(
        &hot,
        r#"{"train": {"iterations": 50, "lr": 1e308, "mode": "reproj", "log_every": 10}}"#,
    )
    .unwrap();
    let out = dir.path().join("hot");
    let o = run(&[
        "train",
        "--config",
        p(&hot),
        "--data",
        p(&data),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["diverged"], true);
}

#[test]
fn photometric_mode_without_images_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("norender.json");
    std::fs::write(&cfg, r#"{"scene": {"point_count": 150, "n_images": 8, "render": false}, "train": {"iterations": 5}}"#).unwrap();
    let data = gen_scene(dir.path(), "data", &cfg);
    let o = run(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("t")),
        "--mode",
        "angle-photo",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn oracle_checkpoint_localizes_and_evaluates_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = gen_scene(dir.path(), "data", &cfg);
    let ck = dir.path().join("oracle.json");
    Checkpoint::new(TrainConfig::default(), 16, SceneModel::Oracle)
        .save(&ck)
        .unwrap();
    let loc = dir.path().join("loc");
    let o = run(&[
        "localize",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--out",
        p(&loc),
        "--split",
        "all",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let recs: Vec<EstimateRecord> = estimates_from_jsonl(
        &std::fs::read_to_string(loc.join("estimates.jsonl")).unwrap(),
        "estimates",
    )
    .unwrap();
    assert_eq!(recs.len(), 8);
    assert!(recs.iter().all(|r| r.status == EstimateStatus::Ok));

    let ev = dir.path().join("ev");
    let o = run(&[
        "evaluate",
        "--estimates",
        p(&loc.join("estimates.jsonl")),
        "--data",
        p(&data),
        "--out",
        p(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert!(m.median_rot_deg < 1e-6 && m.median_trans < 1e-6);
    let csv = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn trained_model_localizes_held_out_views() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = gen_scene(dir.path(), "data", &cfg);
    let tr = dir.path().join("tr");
    assert_eq!(
        code(&run(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&tr)
        ])),
        0
    );
    let loc = dir.path().join("loc");
    let o = run(&[
        "localize",
        "--checkpoint",
        p(&tr.join("checkpoint.json")),
        "--data",
        p(&data),
        "--out",
        p(&loc),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(loc.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["images"], 2);
    assert!(s["accuracy"].is_number());
}

#[test]
fn incompatible_checkpoint_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = gen_scene(dir.path(), "data", &cfg);
    let ck = dir.path().join("wrong.json");
    Checkpoint::new(TrainConfig::default(), 8, SceneModel::Oracle)
        .save(&ck)
        .unwrap();
    let o = run(&[
        "localize",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("l")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluate_rejects_unknown_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = gen_scene(dir.path(), "data", &cfg);
    let est = dir.path().join("est.jsonl");
    let rec = EstimateRecord::new(999, &Default::default(), 10, EstimateStatus::Ok);
    std::fs::write(&est, serde_json::to_string(&rec).unwrap() + "\n").unwrap();
    let o = run(&[
        "evaluate",
        "--estimates",
        p(&est),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = run(&["gradcheck", "--configs", "20", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.matches("PASS").count(), 4);
    let csv = std::fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert!(csv.lines().count() >= 81);

    let o = run(&[
        "gradcheck",
        "--configs",
        "20",
        "--out",
        p(&out),
        "--corrupt",
        "angle",
    ]);
    assert_eq!(code(&o), 1);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table
        .lines()
        .any(|l| l.starts_with("angle") && l.ends_with("FAIL")));
}

#[test]
fn ablation_smoke_run_fills_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ab.json");
    std::fs::write(
        &cfg,
        r#"{"scene": {"point_count": 150, "n_images": 8, "width": 40, "height": 30,
                      "intrinsics": {"f": 36.5625, "cx": 20.0, "cy": 15.0}},
            "train": {"iterations": 20, "lr": 0.003, "log_every": 10, "points_per_iter": 32}}"#,
    )
    .unwrap();
    let out = dir.path().join("ab");
    let o = bin()
        .args([
            "ablate",
            "--config",
            p(&cfg),
            "--out",
            p(&out),
            "--seeds",
            "1",
        ])
        .env("ANGLERELOC_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    let width = lines[0].split(',').count();
    for l in &lines[1..] {
        let fields: Vec<&str> = l.split(',').collect();
        assert_eq!(fields.len(), width, "{l}");
        assert!(fields[..width - 1].iter().all(|f| !f.is_empty()), "{l}");
        assert_eq!(fields[width - 1], "", "{l}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["modes"].as_array().unwrap().len(), 5);
}

#[test]
fn bad_thread_count_is_exit_2() {
    let o = bin()
        .args(["gradcheck", "--configs", "1"])
        .env("ANGLERELOC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

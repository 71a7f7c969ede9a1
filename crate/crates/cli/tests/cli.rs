use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctbert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctbert"))
        .args(args)
        .env("CTBERT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const TINY: &str = "\
synth.train=4
synth.val=2
synth.test=1
synth.min_slices=6
synth.max_slices=10
synth.image_size=128
preprocess.segmenter=morph
preprocess.stack_size=16
backbone.scale=toy
backbone.input_size=16
backbone.input_frames=8
backbone.spatial_strides=1,2,2,1
stage2.segments=4
stage2.hidden=16,8
train.max_epochs=2
stage1.learning_rate=0.001
stage2.learning_rate=0.001
";

fn setup(dir: &Path) -> String {
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, format!("{TINY}data_root={}\n", dir.join("data").display())).unwrap();
    cfg.display().to_string()
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(code(&ctbert(&["frobnicate"])), 1);
    assert_eq!(code(&ctbert(&["train"])), 1);
    assert_eq!(code(&ctbert(&["--set", "no.such.key=1", "synth"])), 1);
    assert_eq!(code(&ctbert(&["--set", "seed=abc", "synth"])), 1);
    assert_eq!(code(&ctbert(&["train", "--stage", "3"])), 1);
    assert_eq!(code(&ctbert(&["--help"])), 0);
}

#[test]
fn missing_dataset_root_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = ctbert(&[
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        &format!("data_root={}", missing.display()),
        "preprocess",
    ]);
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run_dir = |name: &str| dir.path().join(name).display().to_string();
    assert_eq!(code(&ctbert(&["--config", &cfg, "synth"])), 0);

    for name in ["a", "b"] {
        let out = run_dir(name);
        let base = ["--config", cfg.as_str(), "--out", out.as_str(), "--seed", "11"];
        let step = |extra: &[&str]| {
            let args: Vec<&str> = base.iter().copied().chain(extra.iter().copied()).collect();
            let o = ctbert(&args);
            assert_eq!(code(&o), 0, "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
            o
        };
        step(&["preprocess", "--filter-ratio", "0.3"]);
        let train = step(&["train", "--stage", "1"]);
        assert!(String::from_utf8_lossy(&train.stdout).contains("seed"));
        step(&["extract"]);
        step(&["train", "--stage", "2"]);
        step(&["predict"]);
        let eval = step(&["evaluate"]);
        assert!(String::from_utf8_lossy(&eval.stdout).contains("fused"));
    }

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let meta = fs::read_to_string(a.join("preprocess/run_config.txt")).unwrap();
    assert!(meta.contains("preprocess.filter_ratio=0.3\n"));
    assert!(fs::read_to_string(a.join("stage1/run_config.txt")).unwrap().contains("seed=11\n"));
    for file in [
        "preprocess/volumes.csv",
        "preprocess/kept_indices.csv",
        "stage1/model.ckpt",
        "stage1/run.jsonl",
        "stage2_k4/model.ckpt",
        "results_k4/predictions.csv",
        "results_k4/metrics.json",
    ] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
    let csv = fs::read_to_string(a.join("results_k4/predictions.csv")).unwrap();
    assert!(csv.starts_with("volume_id,p_stage1,p_stage2,p_fused,label_pred,severity_pred\n"));
    assert_eq!(csv.lines().count(), 3);

    // Re-running preprocess leaves byte-identical outputs.
    let out = run_dir("a");
    let again = ctbert(&["--config", &cfg, "--out", &out, "--seed", "11", "preprocess", "--filter-ratio", "0.3"]);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read(a.join("preprocess/volumes.csv")).unwrap(), fs::read(b.join("preprocess/volumes.csv")).unwrap());
}

#[test]
fn missing_checkpoint_and_divergence_fail_at_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("run").display().to_string();
    assert_eq!(code(&ctbert(&["--config", &cfg, "synth"])), 0);
    assert_eq!(code(&ctbert(&["--config", &cfg, "--out", &out, "preprocess"])), 0);
    assert_eq!(code(&ctbert(&["--config", &cfg, "--out", &out, "predict"])), 2);

    let diverge = ctbert(&["--config", &cfg, "--out", &out, "--set", "stage1.learning_rate=1e30", "train", "--stage", "1"]);
    assert_eq!(code(&diverge), 2, "{}", String::from_utf8_lossy(&diverge.stderr));
    let record = fs::read_to_string(dir.path().join("run/stage1/run.jsonl")).unwrap();
    assert!(record.contains("\"aborted\":\"epoch"));
    assert!(!dir.path().join("run/stage1/model.ckpt").exists());
}

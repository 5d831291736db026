use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_demonet");

fn tiny_config(root: &Path) -> String {
    format!(
        r#"
[io]
manifest = "{root}/data/manifest.csv"
cache_dir = "{root}/cache"
out_dir = "{root}/out"

[dsp]
passband = [20.0, 1980.0]
frame_len_ms = 100.0
shift_ms = 500.0
segment_s = 10.0
segment_hop_s = 5.0

[features]
kind = "mel"
n_mels = 16

[demon]
interval_hz = 70.0
mod_f_max_hz = 64.0
n_mod_bins = 128
max_subbands = 28

[model]
n_experts = 3
widths = [4, 4, 8, 8]
vae_hidden = 4
vae_latent = 4

[train]
epochs = 2
vae_epochs = 2
warmup = 1
batch = 8
seeds = [5]
pairs_per_recording = 1

[synth]
duration_s = 25.0

[[synth.classes]]
name = "slow"
recordings = 6
mod_hz = 4.0
harmonics = [1.0, 0.5]
depth = 0.5
carrier = {{ kind = "broadband", lo_hz = 100.0, hi_hz = 700.0 }}

[[synth.classes]]
name = "fast"
recordings = 6
mod_hz = 11.0
harmonics = [1.0]
depth = 0.5
carrier = {{ kind = "broadband", lo_hz = 800.0, hi_hz = 1800.0 }}
"#,
        root = root.display()
    )
}

fn demonet(args: &[&str], cfg: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(cfg)
        .env_remove("DEMONET_CACHE_DIR")
        .env("DEMONET_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bad_invocations_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");

    let o = Command::new(BIN).arg("train").output().unwrap();
    assert_eq!(code(&o), 2, "missing --config");

    let o = demonet(&["synth"], &cfg);
    assert_eq!(code(&o), 2, "config file does not exist");

    fs::write(&cfg, "[model]\nn_experts = 3\nbogus = 1\n").unwrap();
    let o = demonet(&["synth"], &cfg);
    assert_eq!(code(&o), 2, "unknown key");

    fs::write(&cfg, tiny_config(dir.path())).unwrap();
    let o = demonet(&["eval"], &cfg);
    assert_eq!(code(&o), 2, "eval without a checkpoint");
    let o = demonet(&["eval", "--checkpoint", "/nonexistent"], &cfg);
    assert_eq!(code(&o), 2, "eval with a missing checkpoint");
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent"));

    let o = Command::new(BIN)
        .args(["synth", "--config"])
        .arg(&cfg)
        .env("DEMONET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "bad thread count");

    let o = demonet(&["extract"], &cfg);
    assert_eq!(code(&o), 2, "no manifest yet");
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, tiny_config(root)).unwrap();

    let o = demonet(&["synth"], &cfg);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(root.join("data/manifest.csv")).unwrap();
    assert!(manifest.starts_with("path,label,track_id,split"));
    assert_eq!(manifest.lines().count(), 13);

    let first = demonet(&["extract"], &cfg);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("cache read 0"));
    let shapes_before = fs::read_to_string(root.join("out/extract-shapes.csv")).unwrap();
    assert!(shapes_before.lines().any(|l| l.ends_with(",mel,20,16")));
    assert!(shapes_before.lines().any(|l| l.ends_with(",demon,28,128")));

    let again = demonet(&["extract"], &cfg);
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("written 0"), "second pass must hit the cache: {}", stdout(&again));
    assert_eq!(fs::read_to_string(root.join("out/extract-shapes.csv")).unwrap(), shapes_before);

    let o = demonet(&["train"], &cfg);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = root.join("out/demonet-seed5");
    assert!(ckpt.join("manifest.json").is_file());
    let sweep = fs::read_to_string(root.join("out/seed-sweep.csv")).unwrap();
    assert!(sweep.lines().last().unwrap().starts_with("summary,"));
    let log = fs::read_to_string(root.join("out/train-seed5.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }

    let ck = ckpt.to_str().unwrap();
    let o = demonet(&["eval", "--checkpoint", ck], &cfg);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let conf = fs::read_to_string(root.join("out/confusion.csv")).unwrap();
    let total: usize = conf
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|c| c.parse::<usize>().unwrap()).collect::<Vec<_>>())
        .sum();
    // One test recording per class, four windows each.
    assert_eq!(total, 8);

    let o = demonet(&["report", "--kind", "routing", "--checkpoint", ck], &cfg);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let routing = fs::read_to_string(root.join("out/report-routing.csv")).unwrap();
    assert_eq!(routing.lines().next().unwrap(), "class,expert0,expert1,expert2");
    for line in routing.lines().skip(1) {
        let s: f64 = line.split(',').skip(1).map(|c| c.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-3, "{line}");
    }

    let o = demonet(&["report", "--kind", "cosine", "--checkpoint", ck], &cfg);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cos = fs::read_to_string(root.join("out/report-cosine.csv")).unwrap();
    assert!(cos.starts_with("track_id,label,split,pairs,raw,reconstructed"));

    // A corrupted recording is reported and fails the run.
    let bad = manifest.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let bad_path = if Path::new(&bad).is_absolute() { bad.clone().into() } else { root.join("data").join(&bad) };
    fs::write(&bad_path, b"RIFF not really a wav").unwrap();
    let o = demonet(&["extract", "--feature", "stft"], &cfg);
    assert_eq!(code(&o), 1);
    let errors = fs::read_to_string(root.join("out/extract-errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 2, "{errors}");
    assert!(errors.contains(bad_path.file_name().unwrap().to_str().unwrap()));
}

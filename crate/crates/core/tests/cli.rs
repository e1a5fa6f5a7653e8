use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use avdtec::config::ExperimentConfig;
use avdtec::dataset::{Manifest, Split};
use avdtec::pseudo_label::read_labels;
use avdtec::train::EvalReport;

fn avdtec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avdtec"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env_remove("AVDTEC_SEED")
        .env_remove("AVDTEC_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path, edit: impl FnOnce(&mut ExperimentConfig)) -> String {
    let mut c = ExperimentConfig::demo();
    c.sim.scenes = 3;
    c.sim.frames_per_scene = 6;
    c.train.epochs = 1;
    edit(&mut c);
    let path = dir.join("config.toml");
    fs::write(&path, c.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

fn number_after(text: &str, key: &str) -> usize {
    let rest = &text[text.find(key).unwrap_or_else(|| panic!("{key} missing in {text}")) + key.len()..];
    rest.trim_start().split(|c: char| !c.is_ascii_digit()).next().unwrap().parse().unwrap()
}

#[test]
fn simulate_is_reproducible_and_summarised() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), |_| {});
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = ok(&avdtec(&a, &["--config", &cfg, "--seed", "7", "simulate"]));
    ok(&avdtec(&b, &["--config", &cfg, "--seed", "7", "simulate"]));
    let ma = fs::read(a.join("dataset/manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("dataset/manifest.json")).unwrap());
    for f in ["000/0003.audio.bin", "002/0005.image.bin", "001/0000.cloud.bin"] {
        let rel = format!("dataset/scenes/{f}");
        assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap(), "{rel}");
    }
    let m = Manifest::read(&a.join("dataset")).unwrap();
    assert_eq!(number_after(&first, "scenes:"), m.scenes.len());
    assert_eq!(number_after(&first, "frames:"), m.frame_count());
    let (train, _) = m.count(Split::Train);
    assert_eq!(number_after(&first, "scenes: 3 ("), train);

    let c = tmp.path().join("c");
    ok(&avdtec(&c, &["--config", &cfg, "--seed", "8", "simulate"]));
    assert_ne!(ma, fs::read(c.join("dataset/manifest.json")).unwrap());
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let out = avdtec(tmp.path(), &["--config", missing.to_str().unwrap(), "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}

#[test]
fn invalid_values_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nlr = -1.0\n").unwrap();
    assert_eq!(avdtec(tmp.path(), &["--config", bad.to_str().unwrap(), "--show-config"]).status.code(), Some(2));
    fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(avdtec(tmp.path(), &["--config", bad.to_str().unwrap(), "--show-config"]).status.code(), Some(2));
    let huge = u64::MAX.to_string();
    assert_eq!(avdtec(tmp.path(), &["--seed", &huge, "--show-config"]).status.code(), Some(2));
    assert_eq!(avdtec(tmp.path(), &[]).status.code(), Some(2));
}

#[test]
fn show_config_prints_the_documented_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&avdtec(tmp.path(), &["--show-config"]));
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());
    for line in [
        "gamma1 = 2.0",
        "gamma2 = 0.5",
        "lr = 0.0001",
        "batch = 16",
        "epochs = 20",
        "brightness_min = 0.02",
        "dark_brightness = 0.05",
        "d_model = 96",
        "d_state = 16",
        "audio_depth = 2",
        "heads = 6",
        "eps = 0.7",
        "min_pts = 4",
        "m_min = 3",
        "sample_rate = 48000",
        "n_mels = 64",
        "frames = 64",
        "image_size = 64",
        "patch = 16",
        "rule = \"zoh\"",
        "aam_outer_residual = true",
    ] {
        assert!(text.lines().any(|l| l.trim() == line), "missing `{line}` in\n{text}");
    }
}

#[test]
fn paper_scale_and_env_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&avdtec(tmp.path(), &["--paper-scale", "--show-config"]));
    let c = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!((c.train.batch, c.train.epochs, c.train.lr), (64, 200, 1e-4));
    assert_eq!((c.model.ssm.d_model, c.model.fusion.heads, c.model.fusion.d_k), (192, 6, 192));
    assert_eq!(c, ExperimentConfig::paper_scale());

    let out = Command::new(env!("CARGO_BIN_EXE_avdtec"))
        .arg("--show-config")
        .env("AVDTEC_SEED", "41")
        .output()
        .unwrap();
    let c = ExperimentConfig::from_toml(&ok(&out)).unwrap();
    assert_eq!((c.seed, c.train.seed), (41, 41));

    let cfg = tiny_config(tmp.path(), |c| c.sim.scenes = 2);
    let target = tmp.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_avdtec"))
        .args(["--config", &cfg, "simulate"])
        .env("AVDTEC_OUT_DIR", &target)
        .output()
        .unwrap();
    ok(&out);
    assert!(target.join("dataset/manifest.json").exists());
}

#[test]
fn labels_round_trip_through_the_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), |_| {});
    ok(&avdtec(tmp.path(), &["--config", &cfg, "simulate"]));
    let out = ok(&avdtec(tmp.path(), &["--config", &cfg, "label"]));
    let labels = read_labels(&tmp.path().join("dataset/labels.csv")).unwrap();
    assert_eq!(number_after(&out, "labels:"), labels.len());
    assert!(!labels.is_empty());
    let within = number_after(&out, "within 1 m of truth:");
    assert!(within * 100 >= labels.len() * 95, "{out}");
    let custom = tmp.path().join("mine.csv");
    ok(&avdtec(tmp.path(), &["--config", &cfg, "label", "--labels", custom.to_str().unwrap()]));
    assert_eq!(read_labels(&custom).unwrap(), labels);
}

#[test]
fn clutter_only_scenes_yield_no_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), |c| {
        c.sim.lidar_density = 0.0;
        c.sim.wall_probability = 1.0;
    });
    ok(&avdtec(tmp.path(), &["--config", &cfg, "simulate"]));
    let out = ok(&avdtec(tmp.path(), &["--config", &cfg, "label"]));
    assert_eq!(number_after(&out, "labels:"), 0, "{out}");
    assert!(read_labels(&tmp.path().join("dataset/labels.csv")).unwrap().is_empty());
}

#[test]
fn train_eval_and_plot_produce_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), |c| c.train.checkpoint_every = 1);
    let dir = tmp.path();
    ok(&avdtec(dir, &["--config", &cfg, "simulate"]));
    ok(&avdtec(dir, &["--config", &cfg, "label"]));
    let first = ok(&avdtec(dir, &["--config", &cfg, "train", "--variant", "full"]));
    assert!(dir.join("checkpoints/full.ckpt").exists());
    assert!(dir.join("checkpoints/full-epoch001.ckpt").exists());
    assert!(first.contains("final loss"));
    let again = ok(&avdtec(dir, &["--config", &cfg, "train", "--variant", "full"]));
    assert_eq!(first, again);

    let ckpt = dir.join("checkpoints/full.ckpt");
    let out = ok(&avdtec(dir, &["--config", &cfg, "eval", "--checkpoint", ckpt.to_str().unwrap()]));
    assert_eq!(out.lines().count(), 2, "{out}");
    for tag in ["light", "dark"] {
        let r: EvalReport = serde_json::from_str(&fs::read_to_string(dir.join(format!("eval-{tag}.json"))).unwrap()).unwrap();
        assert_eq!(r.tag, tag);
        assert!(r.samples > 0 && r.ape.is_finite());
        assert!(dir.join(format!("predictions-{tag}.csv")).exists());
    }
    let dataset = dir.join("dataset");
    let out = ok(&avdtec(dir, &["plot", "--dataset", dataset.to_str().unwrap()]));
    let figures: Vec<_> = fs::read_dir(dir.join("figures")).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(figures.len() >= 4, "{out}");
    for f in &figures {
        assert!(fs::metadata(f).unwrap().len() > 0, "{}", f.display());
    }
    for name in ["loss-full.svg", "confusion-light.svg", "confusion-dark.svg", "label-errors.svg"] {
        assert!(dir.join("figures").join(name).exists(), "{name}");
    }

    let bad = avdtec(dir, &["--config", &cfg, "eval", "--checkpoint", ckpt.to_str().unwrap(), "--brightness", "0"]);
    assert_eq!(bad.status.code(), Some(2));
    let gone = avdtec(dir, &["--config", &cfg, "eval", "--checkpoint", "missing.ckpt"]);
    assert_eq!(gone.status.code(), Some(1));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latent_origin::prelude::*;

const TRAIN_TOML: &str = r#"
seed = 4

[dataset]
source = "synthetic"
count = 24
seed = 1
image_shape = [3, 8, 8]

[model]
kind = "continuous"
latent_channels = 2
hidden = [4, 4]

[training]
epochs = 1
batch_size = 8
"#;

const EVAL_TOML: &str = r#"
seed = 5

[dataset]
source = "synthetic"
count = 48
seed = 2
image_shape = [3, 8, 8]
split = { train = 0.5, calibration = 0.25, evaluation = 0.25 }

[model]
kind = "continuous"
hidden = [4, 4]

[training]
epochs = 1
batch_size = 8

[calibration]
n = 8

[inversion]
steps = 5

[evaluation]
belonging = 5
other = 7
random_baseline = false
stopping = false
efficiency_samples = 0

[[robustness]]
kind = "brightness"
parameter = 1.25

[[robustness]]
kind = "gaussian_noise"
parameter = 0.02
"#;

fn bin(cache: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latent-origin"));
    c.env("LATENT_ORIGIN_CACHE_DIR", cache).env("RUST_LOG", "error");
    c
}

fn run(cache: &Path, args: &[&str]) -> Output {
    bin(cache).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, out: &str) -> (PathBuf, String) {
    let cfg = write(dir, "train.toml", TRAIN_TOML);
    let out = dir.join(out);
    let o = run(&dir.join("cache"), &["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (out.join("checkpoint.json"), stdout(&o))
}

#[test]
fn train_is_deterministic_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (ck_a, line_a) = train(dir.path(), "a");
    let (_, line_b) = train(dir.path(), "b");
    assert_eq!(line_a, line_b);
    assert!(line_a.starts_with("model=") && line_a.contains(" hash="));

    let ck = Checkpoint::load(&ck_a).unwrap();
    assert_eq!(ck.model.image_shape, [3, 8, 8]);
    assert_eq!(ck.training.unwrap().seed, 4);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 4);
}

#[test]
fn usage_and_configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let missing = run(&cache, &["train", "--config", "/no/such/run.toml"]);
    assert_eq!(missing.status.code(), Some(1));

    let bad = write(dir.path(), "bad.toml", &TRAIN_TOML.replace("epochs = 1", "epochs = \"one\""));
    let o = run(&cache, &["train", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));

    assert_eq!(run(&cache, &["attribute"]).status.code(), Some(1));
    assert_eq!(run(&cache, &["--help"]).status.code(), Some(0));
}

#[test]
fn calibrate_then_attribute() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let (ck, _) = train(dir.path(), "t");

    let cal = dir.path().join("cal");
    let o = run(
        &cache,
        &["calibrate", "--model", s(&ck), "--n", "5", "--steps", "4", "--out", s(&cal)],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let profile = CalibrationProfile::load(cal.join("profile.json")).unwrap();
    assert_eq!((profile.n, profile.alpha), (5, 0.05));
    assert!(profile.threshold >= profile.mu);
    assert!(stdout(&o).contains(&format!("n=5 mu={:e}", profile.mu)));

    let imgs = dir.path().join("imgs");
    std::fs::create_dir(&imgs).unwrap();
    for (i, x) in synthetic_images([3, 8, 8], 3, 11).unwrap().iter().enumerate() {
        x.save_png(imgs.join(format!("{i}.png"))).unwrap();
    }
    std::fs::write(imgs.join("notes.txt"), "ignored").unwrap();

    let att = dir.path().join("att");
    let prof = cal.join("profile.json");
    let o = run(
        &cache,
        &["attribute", "--profile", s(&prof), "--model", s(&ck), "--out", s(&att), s(&imgs)],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        let parts: Vec<&str> = l.split(' ').collect();
        assert!(matches!(parts[0], "belonging" | "non_belonging"), "{l}");
        assert!(parts[1].starts_with("cost=") && parts[2].starts_with("threshold="), "{l}");
    }
    let csv = std::fs::read_to_string(att.join("verdicts.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("path,label,cost,threshold,steps"));
    assert_eq!(csv.lines().count(), 4);

    std::fs::write(imgs.join("3.png"), b"not a png").unwrap();
    let o = run(
        &cache,
        &["attribute", "--profile", s(&prof), "--model", s(&ck), "--out", s(&att), s(&imgs)],
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stdout(&o).lines().count(), 3);
    let csv = std::fs::read_to_string(att.join("verdicts.csv")).unwrap();
    assert!(csv.lines().any(|l| l.ends_with("3.png,error,,,")));
}

#[test]
fn evaluate_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let cfg = write(dir.path(), "eval.toml", EVAL_TOML);
    let out = dir.path().join("ev");
    let o = run(&cache, &["evaluate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("accuracy="));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let sep = &report["separation"];
    assert!(report["random_baseline"].is_null() && report["stopping"].is_null());
    assert_eq!(report["robustness"].as_array().unwrap().len(), 2);

    let csv = std::fs::read_to_string(out.join("verdicts.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    let correct = rows
        .iter()
        .filter(|r| (r[0] == "belonging") == (r[2] == "belonging"))
        .count();
    let acc = sep["accuracy"].as_f64().unwrap();
    assert!((acc - correct as f64 / 12.0).abs() < 1e-12);

    let rob = std::fs::read_to_string(out.join("robustness.csv")).unwrap();
    assert_eq!(rob.lines().next(), Some("augmentation,parameter,acc,ssim,psnr,l1,l2"));
    assert_eq!(rob.lines().count(), 3);

    // second run hits the model cache and reproduces the report
    let again = dir.path().join("ev2");
    let o = run(&cache, &["evaluate", "--config", s(&cfg), "--out", s(&again)]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read_to_string(again.join("verdicts.csv")).unwrap(),
        csv
    );
}

#[test]
fn robustness_subcommand_uses_the_config_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "eval.toml", EVAL_TOML);
    let out = dir.path().join("rb");
    let o = run(
        &dir.path().join("cache"),
        &["robustness", "--config", s(&cfg), "--out", s(&out)],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("unperturbed accuracy="));
    assert!(text.contains("brightness 1.25 accuracy="));
    let rob = std::fs::read_to_string(out.join("robustness.csv")).unwrap();
    assert_eq!(rob.lines().count(), 3);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn anople(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anople"))
        .args(args)
        .env_remove("ANOPLE_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn anople")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn synth(root: &Path) {
    let out = anople(&[
        "synth",
        "--out",
        path(root),
        "--train-normals",
        "4",
        "--test-images",
        "6",
        "--image-size",
        "96",
        "--seed",
        "3",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn test_images(root: &Path) -> Vec<PathBuf> {
    let mut all = Vec::new();
    for d in std::fs::read_dir(root.join("fabric/test")).unwrap() {
        for f in std::fs::read_dir(d.unwrap().path()).unwrap() {
            all.push(f.unwrap().path());
        }
    }
    all.sort();
    all
}

fn manifest(run: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn synth_train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    assert_eq!(test_images(&data).len(), 6);

    let train = tmp.path().join("train");
    let out = anople(&[
        "train",
        "--data",
        path(&data),
        "--epochs",
        "1",
        "--seed",
        "7",
        "--run",
        path(&train),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(train.join("checkpoints/model-0.safetensors").is_file());
    assert!(train.join("metrics.jsonl").is_file());
    let m = manifest(&train);
    assert_eq!(m["seeds"], serde_json::json!([7]));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["categories"], serde_json::json!(["fabric"]));

    let eval = tmp.path().join("eval");
    let out = anople(&["eval", "--from", path(&train), "--run", path(&eval)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("seed 7: image AUROC"), "{stdout}");
    let scores = std::fs::read_to_string(eval.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 6);
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("results.json")).unwrap()).unwrap();
    let auroc = results["runs"][0]["image_auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert_eq!(manifest(&eval)["config_hash"], m["config_hash"]);

    let pred = tmp.path().join("pred");
    let images = test_images(&data);
    let mut args = vec![
        "predict",
        "--from",
        path(&train),
        "--category",
        "fabric",
        "--run",
        path(&pred),
    ];
    args.extend(images[..2].iter().map(|p| path(p)));
    let out = anople(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 2);
    for line in stdout.lines() {
        let score: f64 = line.rsplit('\t').next().unwrap().parse().unwrap();
        assert!((0.0..=0.5).contains(&score), "{line}");
    }
    let heat: Vec<_> = std::fs::read_dir(pred.join("heatmaps")).unwrap().collect();
    assert_eq!(heat.len(), 2);
    let img = image::open(heat[0].as_ref().unwrap().path()).unwrap();
    assert_eq!(img.color(), image::ColorType::L16);
    assert_eq!(manifest(&pred)["command"], "predict");
}

#[test]
fn missing_data_root_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = anople(&["train", "--output-dir", path(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ANOPLE_DATA_ROOT"));
}

#[test]
fn unreadable_dataset_is_an_ingestion_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(tmp.path().join("fabric/train/good")).unwrap();
    let out = anople(&[
        "train",
        "--data",
        path(tmp.path()),
        "--output-dir",
        path(&tmp.path().join("runs")),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "k = \"three\"\n").unwrap();
    let out = anople(&["train", "--config", path(&cfg), "--data", path(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn invalid_override_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = anople(&["train", "--data", path(tmp.path()), "--k", "0"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_rejects_from_with_seeds() {
    let out = anople(&["eval", "--from", "x", "--seeds", "1"]);
    assert_eq!(code(&out), 2);
}

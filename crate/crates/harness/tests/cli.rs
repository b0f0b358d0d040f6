mod common;

use std::fs;
use std::path::Path;

use common::{code, ok, s, tiny_data, tree};
use salguide::metrics::parse_csv;
use salguide::run::{load_model, FINAL_CHECKPOINT};
use salguide_core::domains::TARGET_DOMAINS;
use salguide_core::store::read_dataset;
use salguide_core::ModelState;

#[test]
fn gen_data_writes_every_domain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["gen-data", "--out", s(&data), "--n-per-class", "3", "--val-per-class", "2", "--test-per-class", "1"]);
    let domains: Vec<_> = fs::read_dir(&data).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(domains.len(), 7);
    let (train, m) = read_dataset(&data.join("source/train")).unwrap();
    assert_eq!((train.len(), m.class_counts.clone()), (30, vec![3; 10]));
    assert_eq!(read_dataset(&data.join("source/val")).unwrap().0.len(), 20);
    for d in TARGET_DOMAINS {
        let (ds, m) = read_dataset(&data.join(d).join("test")).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(m.domain, d);
        let manifest_rows = fs::read_to_string(data.join(d).join("test/manifest.csv")).unwrap().lines().count() - 1;
        assert_eq!(manifest_rows, fs::read_dir(data.join(d).join("test/images")).unwrap().count());
    }
}

#[test]
fn gen_data_is_deterministic_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let args = |p: &Path| {
        vec![
            "gen-data".to_string(), "--out".into(), s(p).into(), "--seed".into(), "5".into(), "--n-per-class".into(),
            "2".into(), "--val-per-class".into(), "1".into(), "--test-per-class".into(), "1".into(),
        ]
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let run = |p: &Path| ok(&args(p).iter().map(String::as_str).collect::<Vec<_>>());
    run(&a);
    run(&b);
    assert_eq!(tree(&a), tree(&b));
    let again: Vec<String> = args(&a);
    assert_eq!(code(&again.iter().map(String::as_str).collect::<Vec<_>>()), 2);
    let mut forced = again.clone();
    forced.push("--force".into());
    ok(&forced.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn gen_data_bias_dial() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&[
        "gen-data", "--out", s(&data), "--bias", "0.5", "--n-per-class", "500", "--val-per-class", "1",
        "--test-per-class", "1", "--side", "16",
    ]);
    let (ds, _) = read_dataset(&data.join("source/train")).unwrap();
    assert_eq!(ds.len(), 5000);
    let matched = ds.examples.iter().filter(|e| e.texture == Some(e.label)).count();
    let f = matched as f64 / 5000.0;
    assert!((f - 0.5).abs() <= 0.02, "{f}");
}

#[test]
fn zero_epochs_is_rejected_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let runs = dir.path().join("runs");
    let args = ["train", "--mode", "noxai", "--data", s(&data), "--out", s(&runs), "--epochs", "0"];
    assert_eq!(code(&args), 2);
    assert!(!runs.exists() || fs::read_dir(&runs).unwrap().next().is_none());
}

#[test]
fn xai_matches_noxai_before_the_first_xai_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let runs = dir.path().join("runs");
    let train = |mode: &str| {
        ok(&[
            "train", "--mode", mode, "--data", s(&data), "--out", s(&runs), "--epochs", "4", "--freq", "3",
            "--lr", "0.01", "--batch-size", "8", "--eval-targets-last", "0",
        ]);
        let text = fs::read_to_string(runs.join(format!("{mode}_s0_b4_f3/metrics.csv"))).unwrap();
        parse_csv(&text, Path::new("metrics.csv")).unwrap()
    };
    let plain = train("noxai");
    let xai = train("xai");
    assert_eq!(plain.len(), 4);
    for (a, b) in plain.iter().zip(&xai) {
        let same = (a.accuracy, a.pointing_hits, a.mean_loss) == (b.accuracy, b.pointing_hits, b.mean_loss);
        assert_eq!(same, a.epoch < 3, "epoch {}", a.epoch);
    }
}

fn tiny_checkpoint(root: &Path, epochs: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = tiny_data(root);
    let runs = root.join("runs");
    ok(&[
        "train", "--mode", "noxai", "--data", s(&data), "--out", s(&runs), "--epochs", epochs, "--lr", "0.03",
        "--batch-size", "4", "--run-id", "fit", "--eval-targets-last", "0",
    ]);
    (data, runs.join("fit").join(FINAL_CHECKPOINT))
}

#[test]
fn eval_overfit_run_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = tiny_checkpoint(dir.path(), "20");
    let train_split = data.join("source/train");
    let a = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&train_split), s(&data.join("sketch/test"))]);
    let b = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&train_split), s(&data.join("sketch/test"))]);
    assert_eq!(a, b);
    let rows = parse_csv(&a, Path::new("stdout")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].accuracy >= 0.95, "train accuracy {}", rows[0].accuracy);
    assert!(rows.iter().all(|r| r.pointing_hits <= r.pointing_total));
}

#[test]
fn eval_missing_mask_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = tiny_checkpoint(dir.path(), "1");
    let split = data.join("graphics/test");
    fs::remove_file(split.join("masks/000000.pgm")).unwrap();
    assert_eq!(code(&["eval", "--checkpoint", s(&ckpt), "--data", s(&split)]), 3);
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data.join("sketch/test")), "--no-pointing"]);
}

#[test]
fn random_init_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d10");
    ok(&["gen-data", "--out", s(&data), "--n-per-class", "2", "--val-per-class", "50", "--test-per-class", "1"]);
    let runs = dir.path().join("runs");
    ok(&[
        "train", "--mode", "noxai", "--data", s(&data), "--out", s(&runs), "--epochs", "1", "--run-id", "r",
        "--eval-targets-last", "0",
    ]);
    let ckpt = runs.join("r").join(FINAL_CHECKPOINT);
    let (trained, _) = load_model(&ckpt).unwrap();
    ModelState::init(trained.config().clone()).unwrap().save_checkpoint(&ckpt).unwrap();
    let out = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data.join("source/val"))]);
    let rows = parse_csv(&out, Path::new("stdout")).unwrap();
    assert_eq!(rows[0].pointing_total, 500);
    assert!((rows[0].accuracy - 0.1).abs() <= 0.05, "{}", rows[0].accuracy);
}

#[test]
fn domain_evidence_separates_white_from_noise() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["gen-data", "--out", s(&data), "--n-per-class", "1", "--val-per-class", "1", "--test-per-class", "10"]);
    let out = dir.path().join("ev");
    let a = data.join("graphics/test");
    let b = data.join("infograph/test");
    let domains = format!("{},{}", s(&a), s(&b));
    ok(&["domain-evidence", "--domains", &domains, "--out", s(&out), "--epochs", "10"]);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains(&format!("label0={}", s(&a))));
    assert!(manifest.contains(&format!("label1={}", s(&b))));
    let acc: f64 = manifest
        .lines()
        .find_map(|l| l.strip_prefix("test_accuracy="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc >= 0.95, "{acc}");
    let ids = fs::read_to_string(out.join("ids.csv")).unwrap();
    for line in ids.lines().skip(1).filter(|l| l.ends_with(",test")) {
        let id = line.split(',').next().unwrap();
        for class in 0..2 {
            assert!(out.join(format!("{id}_class{class}.pgm")).exists());
        }
    }
    assert_eq!(code(&["domain-evidence", "--domains", s(&a), "--out", s(&out)]), 2);
}

#[test]
fn ablation_tables_have_the_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let runs = dir.path().join("runs");
    for (axis, cols) in [("where", 4), ("when", 3)] {
        let table = ok(&[
            "ablate", "--axis", axis, "--data", s(&data), "--out", s(&runs), "--epochs", "2", "--freq", "1",
            "--batch-size", "8", "--reuse",
        ]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 7);
        for line in &lines[1..] {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), cols + 1);
            assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
        }
    }
}

#[test]
fn report_and_saliency_dump() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = tiny_checkpoint(dir.path(), "2");
    let runs = ckpt.parent().unwrap().parent().unwrap();
    let out = dir.path().join("report");
    ok(&["report", "--runs", s(runs), "--out", s(&out)]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().all(|l| !l.contains("NaN")));
    assert!(summary.contains("fewer_than_4_epochs"));
    assert!(fs::read_to_string(out.join("hits.svg")).unwrap().starts_with("<svg"));
    let dump = dir.path().join("maps");
    ok(&["saliency-dump", "--checkpoint", s(&ckpt), "--data", s(&data.join("source/val")), "--out", s(&dump), "--limit", "3"]);
    assert_eq!(fs::read_dir(&dump).unwrap().count(), 3);
}

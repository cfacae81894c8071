//! Render, validate, train, infer, evaluate and merge through the library
//! entry points and the binary.

mod common;

use std::path::Path;
use std::process::Command;

use clearflow_cli::dataset::{render_dataset, validate_dataset, DatasetManifest, Split};
use clearflow_cli::error::CliError;
use clearflow_cli::eval::{run_eval, EvalJobConfig};
use clearflow_cli::files::{load_config, read_json, write_json, RunManifest};
use clearflow_cli::infer::{load_prediction, run_infer, run_infer_frames, PredictionManifest, PREDICTIONS_FILE};
use clearflow_cli::merge::run_merge;
use clearflow_cli::train::run_train;
use clearflow_core::inference::InferenceConfig;
use clearflow_core::trainer::{Target, TrainConfig};
use common::{render_config, tiny_train_config};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clearflow"))
}

/// Every file under `root` except run manifests, which carry a timestamp.
fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.file_name().unwrap().to_string_lossy().starts_with("run_") {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn five_scenes_render_validate_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = render_config(3, 2, 0);
    let (manifest, summary) = render_dataset(&cfg, 7, dir.path()).unwrap();
    assert_eq!(manifest.sequences.len(), 5);
    assert_eq!(summary.rendered.len(), 5);
    assert!(summary.failed.is_empty());
    assert_eq!(manifest.split(Split::Train).count(), 3);
    assert!(manifest.sequences.iter().all(|s| s.frames == 21 && s.frames % 4 == 1));
    assert!(validate_dataset(dir.path(), &manifest).is_empty());
    let before = tree_bytes(dir.path());

    let (again, summary) = render_dataset(&cfg, 7, dir.path()).unwrap();
    assert!(summary.rendered.is_empty(), "{:?}", summary.rendered);
    assert_eq!(summary.skipped.len(), 5);
    assert_eq!(again, manifest);
    assert_eq!(tree_bytes(dir.path()), before);

    // an independent run from the same seed reproduces every file
    let other = tempfile::tempdir().unwrap();
    render_dataset(&cfg, 7, other.path()).unwrap();
    assert_eq!(tree_bytes(other.path()), before);
}

#[test]
fn corrupt_frame_flags_only_its_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = render_dataset(&render_config(2, 2, 0), 3, dir.path()).unwrap();
    let victim = manifest.get("test_0001").unwrap();
    std::fs::write(dir.path().join(&victim.depth[7]), b"Pf\n64 64\n-1.0\nshort").unwrap();
    let report = validate_dataset(dir.path(), &manifest);
    assert_eq!(report.keys().collect::<Vec<_>>(), vec!["test_0001"]);

    let out = bin().args(["validate", "--data"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("test_0001:")), "{stdout}");
}

#[test]
fn interrupted_sequence_is_quarantined_and_rerendered() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = render_config(1, 1, 0);
    render_dataset(&cfg, 5, dir.path()).unwrap();
    let seqs = dir.path().join("sequences");
    std::fs::rename(seqs.join("train_0000"), seqs.join("train_0000.partial")).unwrap();
    std::fs::remove_file(seqs.join("train_0000.partial").join("sequence.json")).unwrap();
    let (manifest, summary) = render_dataset(&cfg, 5, dir.path()).unwrap();
    assert_eq!(summary.quarantined, vec!["train_0000"]);
    assert_eq!(summary.rendered, vec!["train_0000"]);
    assert!(validate_dataset(dir.path(), &manifest).is_empty());
    assert!(dir.path().join("quarantine").exists());
}

#[test]
fn train_infer_eval_merge_end_to_end() {
    let data = tempfile::tempdir().unwrap();
    render_dataset(&render_config(2, 2, 2), 11, data.path()).unwrap();
    let data_before = tree_bytes(data.path());
    let work = tempfile::tempdir().unwrap();
    let train_dir = work.path().join("train");

    let summary = run_train(data.path(), &train_dir, tiny_train_config(12, Target::Depth), |_| {}).unwrap();
    assert_eq!(summary.rows.len(), 12);
    let ckpt = train_dir.join("checkpoints").join("latest.ckpt");
    let run: RunManifest = read_json(&train_dir.join("run_train.json")).unwrap();
    assert_eq!(run.command, "train");
    assert!(!run.git_describe.is_empty());
    assert_eq!(run.config["steps"], 12);

    // resuming a finished run takes no further steps
    let again = run_train(data.path(), &train_dir, tiny_train_config(12, Target::Depth), |_| {}).unwrap();
    assert_eq!((again.resumed_from, again.rows.len()), (Some(12), 0));

    let ckpt_before = std::fs::read(&ckpt).unwrap();
    let pred_dir = work.path().join("pred");
    let preds = run_infer(
        &ckpt,
        data.path(),
        Split::Test,
        &pred_dir,
        InferenceConfig::default(),
        None,
    )
    .unwrap();
    assert_eq!(preds.target, Target::Depth);
    assert_eq!(preds.sequences.len(), 2);
    assert!(pred_dir.join("test_0000").join("pred_000.png").exists());

    let err = run_infer(
        &ckpt,
        data.path(),
        Split::Test,
        &work.path().join("bad"),
        InferenceConfig::default(),
        Some(Target::Normal),
    )
    .unwrap_err();
    assert!(err.to_string().contains("target/checkpoint mismatch"), "{err}");
    assert_eq!(err.exit_code(), 1);
    let out = bin()
        .args(["infer", "--target", "normal", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(data.path())
        .arg("--out")
        .arg(work.path().join("bad_bin"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target/checkpoint mismatch"));

    // a bare frame directory predicts the same clip identically
    let frames = work.path().join("test_0000");
    std::fs::create_dir_all(&frames).unwrap();
    let manifest = DatasetManifest::load(data.path()).unwrap();
    for (k, f) in manifest.get("test_0000").unwrap().rgb.iter().enumerate() {
        std::fs::copy(data.path().join(f), frames.join(format!("{k:03}.png"))).unwrap();
    }
    let single = work.path().join("pred_frames");
    let pm = run_infer_frames(&ckpt, &frames, &single, InferenceConfig::default(), None).unwrap();
    assert_eq!(pm.sequences[0].id, "test_0000");
    let a = load_prediction(&pred_dir, &preds.sequences[0]).unwrap();
    let b = load_prediction(&single, &pm.sequences[0]).unwrap();
    assert_eq!(a.data(), b.data());

    let eval_dir = work.path().join("eval");
    let report = run_eval(&pred_dir, data.path(), &eval_dir, &EvalJobConfig::default()).unwrap();
    assert_eq!(report.sequences.len(), 2);
    assert!(report
        .sequences
        .iter()
        .all(|s| s.model.is_some() && s.baseline.is_some()));
    assert_eq!(
        report.columns,
        ["delta_1.05", "delta_1.10", "delta_1.25", "REL", "RMSE_cm"]
    );
    assert_eq!(report.ranks.len(), 2);
    for f in ["metrics.csv", "report.json", "run_eval.json"] {
        assert!(eval_dir.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("method,sequence,delta_1.05,delta_1.10,delta_1.25,REL,RMSE_cm,rank"));
    assert!(eval_dir.join("profiles").join("test_0000_pred.png").exists());

    // a prediction set missing one id is rejected with the id named
    let partial = work.path().join("partial");
    std::fs::create_dir_all(&partial).unwrap();
    let mut pm: PredictionManifest = read_json(&pred_dir.join(PREDICTIONS_FILE)).unwrap();
    pm.sequences.retain(|s| s.id != "test_0001");
    write_json(&partial.join(PREDICTIONS_FILE), &pm).unwrap();
    let err = run_eval(
        &partial,
        data.path(),
        &work.path().join("eval2"),
        &EvalJobConfig::default(),
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("missing") && msg.contains("test_0001"), "{msg}");
    assert_eq!(err.exit_code(), 2);

    // merging refuses to overwrite its input, then matches the adapter model
    assert!(matches!(run_merge(&ckpt, &ckpt), Err(CliError::Usage(_))));
    let merged = work.path().join("merged").join("model.ckpt");
    std::fs::create_dir_all(merged.parent().unwrap()).unwrap();
    assert!(run_merge(&ckpt, &merged).unwrap() > 0);
    assert!(run_merge(&merged, &work.path().join("merged").join("twice.ckpt")).is_err());
    let merged_preds = work.path().join("pred_merged");
    run_infer(
        &merged,
        data.path(),
        Split::Test,
        &merged_preds,
        InferenceConfig::default(),
        None,
    )
    .unwrap();
    for e in &preds.sequences {
        let a = load_prediction(&pred_dir, e).unwrap();
        let b = load_prediction(&merged_preds, e).unwrap();
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(d < 1e-4, "{}: {d}", e.id);
    }

    assert_eq!(std::fs::read(&ckpt).unwrap(), ckpt_before);
    assert_eq!(tree_bytes(data.path()), data_before);
}

#[test]
fn config_errors_name_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.json");
    std::fs::write(&path, r#"{"steps": 10, "learning_rate": 0.1}"#).unwrap();
    let err = load_config::<TrainConfig>(Some(&path)).unwrap_err();
    assert!(err.to_string().contains("learning_rate"), "{err}");
    assert_eq!(err.exit_code(), 1);

    let data = tempfile::tempdir().unwrap();
    render_dataset(&render_config(1, 0, 0), 2, data.path()).unwrap();
    let mut cfg = tiny_train_config(1, Target::Depth);
    cfg.sampler.n_support = vec![6];
    let err = run_train(data.path(), &dir.path().join("t"), cfg, |_| {}).unwrap_err();
    assert!(err.to_string().contains("sampler.n_support"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn binary_exit_codes() {
    let out = bin().arg("--no-such-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["validate", "--data"])
        .arg(dir.path().join("missing"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("render.json");
    std::fs::write(&bad, r#"{"train_scenes": "many"}"#).unwrap();
    let out = bin()
        .args(["render", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn render_through_the_binary_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("render.json");
    write_json(&cfg, &render_config(1, 1, 1)).unwrap();
    let out = bin()
        .args(["--jobs", "1", "render", "--seed", "4", "--config"])
        .arg(&cfg)
        .env("CLEARFLOW_CACHE_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("render");
    let manifest = DatasetManifest::load(&root).unwrap();
    assert_eq!(manifest.sequences.len(), 3);
    let run: RunManifest = read_json(&root.join("run_render.json")).unwrap();
    assert_eq!((run.command.as_str(), run.seed), ("render", 4));
}

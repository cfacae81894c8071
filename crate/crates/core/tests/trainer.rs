//! Frame-count sampling, co-training audit, frozen base weights,
//! determinism and resume behaviour of the flow-matching trainer.

use std::collections::BTreeMap;

use clearflow_core::autograd::Graph;
use clearflow_core::backbone::BackboneConfig;
use clearflow_core::checkpoint::Checkpoint;
use clearflow_core::lora::Trainables;
use clearflow_core::testkit::toy_sequence;
use clearflow_core::trainer::{
    assemble_batch, loss, read_log, sample_frame_count, step_rng, train, ModelState, Source, Target, TrainConfig,
    TrainData, TrainOutput,
};

fn config(steps: u64, target: Target) -> TrainConfig {
    let mut c = TrainConfig {
        steps,
        batch_size: 2,
        seed: 3,
        target,
        checkpoint_every: 0,
        model: BackboneConfig {
            n_blocks: 2,
            model_dim: 32,
            n_heads: 4,
            mlp_ratio: 2,
            time_freqs: 8,
            lora_rank: 4,
            lora_alpha: 4.0,
            ..BackboneConfig::default()
        },
        ..TrainConfig::default()
    };
    c.fit_model_to(21, 16, 16);
    c
}

fn data() -> TrainData {
    TrainData {
        video: (0..3).map(|i| toy_sequence(&format!("v{i}"), 21, 16, 16, i)).collect(),
        image: (0..4)
            .map(|i| toy_sequence(&format!("i{i}"), 1, 16, 16, 100 + i))
            .collect(),
    }
}

#[test]
fn frame_counts_are_uniform_over_the_support() {
    let support: Vec<usize> = (0..=5).collect();
    let draws = 60_000;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for step in 0..draws {
        *counts
            .entry(sample_frame_count(&support, &mut step_rng(17, step)))
            .or_default() += 1;
    }
    assert_eq!(counts.keys().copied().collect::<Vec<_>>(), vec![1, 5, 9, 13, 17, 21]);
    for (f, n) in counts {
        let p = n as f64 / draws as f64;
        assert!((p - 1.0 / 6.0).abs() <= 0.01, "F = {f}: {p}");
    }
}

#[test]
fn image_samples_only_appear_in_single_frame_batches() {
    let cfg = config(1, Target::Depth);
    let data = data();
    let (mut image, mut video_single) = (0, 0);
    for step in 0..3000 {
        let batch = assemble_batch(&cfg, &data, &mut step_rng(cfg.seed, step)).unwrap();
        for s in &batch.sources {
            match (s, batch.frames) {
                (Source::Image, 1) => image += 1,
                (Source::Image, f) => panic!("image sample in an F = {f} batch"),
                (Source::Video, 1) => video_single += 1,
                _ => {}
            }
        }
        assert!(matches!(batch.frames, 1 | 5 | 9 | 13 | 17 | 21));
    }
    assert!(image > 0 && video_single > 0, "{image} {video_single}");
}

#[test]
fn training_log_passes_the_co_training_audit() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().into() };
    let cfg = config(60, Target::Depth);
    let mut state = ModelState::new(&cfg).unwrap();
    train(&mut state, &cfg, &data(), Some(&out), |_| {}).unwrap();
    let rows = read_log(&out.log_path()).unwrap();
    assert_eq!(rows.len(), 60);
    assert!(rows.iter().all(|r| r.image_samples == 0 || r.frames == 1));
    assert!(rows.iter().all(|r| r.video_samples + r.image_samples == cfg.batch_size));
    assert_eq!(
        rows.iter().map(|r| r.step).collect::<Vec<_>>(),
        (1..=60).collect::<Vec<_>>()
    );
}

#[test]
fn image_only_data_trains_single_frames() {
    let cfg = config(10, Target::Normal);
    let data = TrainData {
        video: Vec::new(),
        image: data().image,
    };
    let mut state = ModelState::new(&cfg).unwrap();
    let rows = train(&mut state, &cfg, &data, None, |_| {}).unwrap();
    assert!(rows.iter().all(|r| r.frames == 1 && r.image_samples == cfg.batch_size));
}

#[test]
fn base_weights_stay_byte_identical() {
    let cfg = config(500, Target::Depth);
    let mut state = ModelState::new(&cfg).unwrap();
    let before = state.backbone.to_sections();
    let rows = train(&mut state, &cfg, &data(), None, |_| {}).unwrap();
    assert_eq!(rows.len(), 500);
    let after = state.backbone.to_sections();
    let (b0, b1) = (&before["base"], &after["base"]);
    assert_eq!(b0.keys().collect::<Vec<_>>(), b1.keys().collect::<Vec<_>>());
    for (name, t) in b0 {
        assert!(t.bit_eq(&b1[name]), "{name} changed");
    }
    assert!(before["adapter"].iter().any(|(n, t)| !t.bit_eq(&after["adapter"][n])));
    assert!(before["heads"].iter().any(|(n, t)| !t.bit_eq(&after["heads"][n])));
}

#[test]
fn untrained_loss_is_mean_squared_target_velocity() {
    let cfg = config(1, Target::Depth);
    let state = ModelState::new(&cfg).unwrap();
    let batch = assemble_batch(&cfg, &data(), &mut step_rng(cfg.seed, 0)).unwrap();
    let mut g = Graph::new();
    let mut rec = Trainables::new();
    let l = loss(&mut g, &batch, &state.backbone, &mut rec).unwrap();
    let got = g.value(l).item().unwrap() as f64;
    // zero head and zero skip: the model predicts u = 0
    let (x1, x0) = (batch.x1_d.data(), batch.x0.data());
    let want = x1.iter().zip(x0).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / x1.len() as f64;
    assert!((got - want).abs() < 1e-5 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn runs_are_deterministic_and_resume_exactly() {
    let data = data();
    let run = |steps: u64, dir: &std::path::Path, state: Option<ModelState>| {
        let cfg = config(steps, Target::Depth);
        let out = TrainOutput { dir: dir.into() };
        let mut state = state.unwrap_or_else(|| ModelState::new(&cfg).unwrap());
        train(&mut state, &cfg, &data, Some(&out), |_| {}).unwrap();
        state
    };
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    run(40, a.path(), None);
    run(40, b.path(), None);
    let half = run(20, c.path(), None);
    let reloaded = ModelState::load(&TrainOutput { dir: c.path().into() }.latest_path()).unwrap();
    assert_eq!(reloaded.step(), half.step());
    run(40, c.path(), Some(reloaded));

    let bytes = |d: &std::path::Path| std::fs::read(TrainOutput { dir: d.into() }.latest_path()).unwrap();
    let log = |d: &std::path::Path| std::fs::read_to_string(TrainOutput { dir: d.into() }.log_path()).unwrap();
    assert_eq!(log(a.path()), log(b.path()));
    assert_eq!(bytes(a.path()), bytes(b.path()));
    assert_eq!(log(a.path()), log(c.path()));
    assert_eq!(bytes(a.path()), bytes(c.path()));
    let ck = Checkpoint::load(&TrainOutput { dir: a.path().into() }.latest_path()).unwrap();
    assert_eq!(ck.step, 40);
}

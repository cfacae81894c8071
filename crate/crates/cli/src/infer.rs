use std::path::Path;

use serde::{Deserialize, Serialize};

use clearflow_core::imageio::{self, Image};
use clearflow_core::inference::{infer_video, InferenceConfig};
use clearflow_core::trainer::{ModelState, Target};
use clearflow_core::Video;

use crate::dataset::{DatasetManifest, SequenceEntry, Split};
use crate::error::{CliError, Result};
use crate::files::{read_json, write_json, RunManifest};

pub const PREDICTIONS_FILE: &str = "predictions.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEntry {
    pub id: String,
    pub frames: usize,
    /// Per-frame PFM files relative to the prediction directory.
    pub files: Vec<String>,
    pub renorm_displacement: Option<f64>,
}

/// Depth predictions are normalized disparity in `[-1, 1]` (one channel),
/// normal predictions unit camera-space vectors (three channels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionManifest {
    pub target: Target,
    pub checkpoint: String,
    pub inference: InferenceConfig,
    pub sequences: Vec<PredictionEntry>,
}

impl PredictionManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(PREDICTIONS_FILE))
    }
}

pub fn load_rgb(root: &Path, s: &SequenceEntry) -> Result<Video> {
    let mut frames = Vec::with_capacity(s.rgb.len());
    for f in &s.rgb {
        let img = imageio::read_png(&root.join(f))?;
        frames.push(Video::new(1, img.height, img.width, img.channels, img.data)?);
    }
    Ok(Video::concat_frames(&frames)?)
}

pub fn load_prediction(dir: &Path, e: &PredictionEntry) -> Result<Video> {
    let mut frames = Vec::with_capacity(e.files.len());
    for f in &e.files {
        let img = imageio::read_pfm(&dir.join(f))?;
        frames.push(Video::new(1, img.height, img.width, img.channels, img.data)?);
    }
    Ok(Video::concat_frames(&frames)?)
}

/// Loads a checkpoint and refuses a requested target the model was not
/// trained for.
pub fn load_model(checkpoint: &Path, target: Option<Target>) -> Result<ModelState> {
    let state = ModelState::load(checkpoint)?;
    if let Some(t) = target {
        if t != state.meta.target {
            return Err(clearflow_core::Error::Config {
                key: "target".into(),
                msg: format!(
                    "target/checkpoint mismatch: requested `{t}` but {} predicts `{}`",
                    checkpoint.display(),
                    state.meta.target
                ),
            }
            .into());
        }
    }
    Ok(state)
}

/// 8-bit preview: colorized disparity, or normals mapped from [-1, 1] to RGB.
fn preview(img: &Image) -> Result<Image> {
    if img.channels == 1 {
        return Ok(imageio::colorize(&img.data, img.width, img.height, |_| true)?);
    }
    let data = img.data.iter().map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0).collect();
    Ok(Image::new(img.width, img.height, img.channels, data)?)
}

/// Predicts one clip and writes its frames under `out/{id}/`.
fn predict_clip(
    state: &ModelState,
    config: &InferenceConfig,
    id: &str,
    rgb: &Video,
    out: &Path,
) -> Result<PredictionEntry> {
    let result = infer_video(
        rgb,
        config,
        &state.backbone,
        state.meta.rgb_packing,
        state.meta.target_packing,
    )
    .map_err(|e| match e {
        clearflow_core::Error::NonFinite(m) => clearflow_core::Error::NonFinite(format!("{id}: {m}")),
        e => e,
    })?;
    let p = &result.prediction;
    let mut files = Vec::with_capacity(p.frames());
    for k in 0..p.frames() {
        let name = format!("{id}/pred_{k:03}.pfm");
        let img = Image::new(p.width(), p.height(), p.channels(), p.frame(k).to_vec())?;
        imageio::write_pfm(&out.join(&name), &img)?;
        imageio::write_png(&out.join(format!("{id}/pred_{k:03}.png")), &preview(&img)?)?;
        files.push(name);
    }
    log::info!(
        "predicted {id} ({} frames, {} windows)",
        p.frames(),
        result.plan.windows.len()
    );
    Ok(PredictionEntry {
        id: id.to_owned(),
        frames: p.frames(),
        files,
        renorm_displacement: result.renorm_displacement,
    })
}

fn finish(
    checkpoint: &Path,
    state: &ModelState,
    config: InferenceConfig,
    entries: Vec<PredictionEntry>,
    out: &Path,
) -> Result<PredictionManifest> {
    let pm = PredictionManifest {
        target: state.meta.target,
        checkpoint: checkpoint.display().to_string(),
        inference: config.clone(),
        sequences: entries,
    };
    write_json(&out.join(PREDICTIONS_FILE), &pm)?;
    RunManifest::new("infer", config.seed, &config)?.write(out)?;
    Ok(pm)
}

fn prepare(
    checkpoint: &Path,
    mut config: InferenceConfig,
    target: Option<Target>,
) -> Result<(ModelState, InferenceConfig)> {
    let state = load_model(checkpoint, target)?;
    config.target = state.meta.target;
    config.validate()?;
    Ok((state, config))
}

/// Predicts every sequence of `split` and writes per-frame PFMs, PNG
/// previews and `predictions.json` into `out`.
pub fn run_infer(
    checkpoint: &Path,
    data_root: &Path,
    split: Split,
    out: &Path,
    config: InferenceConfig,
    target: Option<Target>,
) -> Result<PredictionManifest> {
    let (state, config) = prepare(checkpoint, config, target)?;
    let manifest = DatasetManifest::load(data_root)?;
    let mut entries = Vec::new();
    for s in manifest.split(split) {
        entries.push(predict_clip(&state, &config, &s.id, &load_rgb(data_root, s)?, out)?);
    }
    if entries.is_empty() {
        return Err(CliError::Data(format!(
            "split {split:?} of {} is empty",
            data_root.display()
        )));
    }
    finish(checkpoint, &state, config, entries, out)
}

/// Predicts a single clip given as a directory of RGB PNG frames, taken in
/// file-name order. The clip id is the directory name.
pub fn run_infer_frames(
    checkpoint: &Path,
    frames_dir: &Path,
    out: &Path,
    config: InferenceConfig,
    target: Option<Target>,
) -> Result<PredictionManifest> {
    let (state, config) = prepare(checkpoint, config, target)?;
    let mut paths: Vec<_> = std::fs::read_dir(frames_dir)
        .map_err(|e| CliError::io(frames_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("no PNG frames in {}", frames_dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = imageio::read_png(p)?;
        if img.channels != 3 {
            return Err(CliError::Data(format!("{}: expected an RGB frame", p.display())));
        }
        frames.push(Video::new(1, img.height, img.width, 3, img.data)?);
    }
    let rgb = Video::concat_frames(&frames)?;
    let id = frames_dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "clip".into());
    let entry = predict_clip(&state, &config, &id, &rgb, out)?;
    finish(checkpoint, &state, config, vec![entry], out)
}

use std::path::Path;

use clearflow_core::trainer::{self, LogRow, ModelState, TrainConfig, TrainData, TrainOutput};

use crate::dataset::{load_training_data, DatasetManifest};
use crate::error::{CliError, Result};
use crate::files::RunManifest;

#[derive(Debug)]
pub struct TrainSummary {
    pub state: ModelState,
    pub rows: Vec<LogRow>,
    pub resumed_from: Option<u64>,
}

/// Adapts model extents to the data and checks the frame-count support
/// against the longest video.
pub fn prepare_config(mut config: TrainConfig, data: &TrainData) -> Result<TrainConfig> {
    let first = data
        .video
        .first()
        .or(data.image.first())
        .ok_or_else(|| CliError::Data("no training sequences".into()))?;
    let (h, w) = (first.rgb.height(), first.rgb.width());
    let longest = data.video.iter().map(|s| s.frames()).max().unwrap_or(1);
    let max_n = config.sampler.n_support.iter().copied().max().unwrap_or(0);
    if !data.video.is_empty() && 4 * max_n + 1 > longest {
        return Err(clearflow_core::Error::Config {
            key: "sampler.n_support".into(),
            msg: format!(
                "N = {max_n} draws F = {} frames but the longest training video has {longest}",
                4 * max_n + 1
            ),
        }
        .into());
    }
    config.fit_model_to(4 * max_n + 1, h, w);
    config.validate()?;
    Ok(config)
}

/// Trains on the dataset's train split, resuming from `out/checkpoints/latest.ckpt`.
pub fn run_train(
    data_root: &Path,
    out: &Path,
    config: TrainConfig,
    on_step: impl FnMut(&LogRow),
) -> Result<TrainSummary> {
    let manifest = DatasetManifest::load(data_root)?;
    let data = load_training_data(data_root, &manifest)?;
    let config = prepare_config(config, &data)?;
    let output = TrainOutput { dir: out.to_owned() };
    let latest = output.latest_path();
    let (mut state, resumed_from) = if latest.exists() {
        let state = ModelState::load(&latest)?;
        if state.meta.target != config.target || state.meta.model != config.model || state.meta.seed != config.seed {
            return Err(CliError::Usage(format!(
                "{} was trained with a different target, model or seed; use a fresh --out",
                latest.display()
            )));
        }
        let step = state.step();
        log::info!("resuming from step {step}");
        (state, Some(step))
    } else {
        (ModelState::new(&config)?, None)
    };
    RunManifest::new("train", config.seed, &config)?.write(out)?;
    let rows = trainer::train(&mut state, &config, &data, Some(&output), on_step)?;
    Ok(TrainSummary {
        state,
        rows,
        resumed_from,
    })
}

use std::path::Path;

use clearflow_core::trainer::ModelState;

use crate::error::{CliError, Result};
use crate::files::RunManifest;

/// Folds every LoRA adapter into its base weight and writes a checkpoint
/// without adapters or optimizer moments. Returns the merged projection count.
pub fn run_merge(input: &Path, output: &Path) -> Result<usize> {
    let same = match (input.canonicalize(), output.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => input == output,
    };
    if same {
        return Err(CliError::Usage(format!(
            "refusing to overwrite the input checkpoint {}",
            input.display()
        )));
    }
    let mut state = ModelState::load(input)?;
    if state.meta.merged {
        return Err(CliError::Usage(format!("{} is already merged", input.display())));
    }
    let n = state.backbone.merge_adapters()?;
    state.meta.merged = true;
    state.optimizer.moments.clear();
    state.save(output)?;
    if let Some(dir) = output.parent() {
        RunManifest::new("merge-lora", state.meta.seed, &state.meta)?.write(dir)?;
    }
    log::info!("merged {n} adapters into {}", output.display());
    Ok(n)
}

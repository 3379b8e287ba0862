//! Optimization, learning-rate schedule, early stopping, the training loop
//! and checkpoint persistence.

mod checkpoint;
mod early_stop;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamEntry, FORMAT_VERSION};
pub use early_stop::{EarlyStopState, StopDecision};
pub use optim::{clip_gradients, lr_at, AdamWConfig, OptimizerState};
pub use train::{dev_f1, train, EpochRecord, TrainConfig, TrainOutcome};

use std::io::Write;
use std::path::Path;

use crate::error::{io_err, json_err, Result};

/// One JSON object per epoch.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).map_err(json_err(path))?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(json_err(path)))
        .collect()
}

//! Evaluation of saved checkpoints.

use std::path::Path;

use super::train::{evaluate, SplitMetrics};
use crate::blocks::load_checkpoint;
use crate::error::Result;
use crate::synthdata::{SynthConfig, Split};

/// Loads `path` and scores the validation split with `clips` clips per video.
pub fn evaluate_checkpoint(path: &Path, data: &SynthConfig, clips: usize) -> Result<SplitMetrics> {
    let mut net = load_checkpoint(path)?;
    evaluate(&mut net, data, Split::Val, clips)
}

/// Eval CSV: the metrics header plus one `val` row tagged with the clip count
/// in the epoch column.
pub fn eval_csv(clips: usize, m: &SplitMetrics) -> String {
    format!(
        "{}\n{clips},val,{},{},{},0\n",
        super::train::METRICS_HEADER,
        m.loss,
        m.top1,
        m.top5
    )
}

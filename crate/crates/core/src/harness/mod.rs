//! Training, evaluation, ablation, benchmarking and visualisation drivers.

pub mod ablation;
pub mod bench;
pub mod config;
pub mod eval;
pub mod selftest;
pub mod train;
pub mod viz;

pub use ablation::{run_ablation, run_ratio_sweep, sweep_csv, AblationRow, AblationTable, SummaryRow, SweepRow};
pub use bench::{benchmark, BenchConfig, BenchEntry, BenchReport};
pub use config::{BnSchedule, RunConfig, TrainConfig, Variant};
pub use eval::{eval_csv, evaluate_checkpoint};
pub use viz::{export_heatmaps, heatmaps, mask_fractions, motion_masks, HeatmapSet, MaskFractions};
pub use selftest::{run_selftest, Check};
pub use train::{
    evaluate, predict, rank_of, score_video, train, train_step, train_with, EpochMetrics, RunMetrics, Sgd,
    SplitMetrics, TrainOutcome, CHECKPOINT_FILE, METRICS_FILE,
};

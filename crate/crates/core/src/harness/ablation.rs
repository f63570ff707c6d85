//! Variant ablations and reduction-ratio sweeps.

use std::fmt::Write as _;

use serde::Serialize;

use super::config::{RunConfig, Variant};
use super::train::{train_with, EpochMetrics};
use crate::blocks::estimate_macs;
use crate::error::Result;

pub const ABLATION_HEADER: &str = "variant,seed,top1,top5,top1_std,top5_std";
pub const SWEEP_HEADER: &str = "r1,r2,top1,top5,macs";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub top1: f64,
    pub top5: f64,
    pub top1_std: f64,
    pub top5_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<SummaryRow>,
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let mut order: Vec<Variant> = Vec::new();
        for r in &rows {
            if !order.contains(&r.variant) {
                order.push(r.variant);
            }
        }
        let summary = order
            .into_iter()
            .map(|variant| {
                let t1: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.top1).collect();
                let t5: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.top5).collect();
                let (top1, top1_std) = mean_std(&t1);
                let (top5, top5_std) = mean_std(&t5);
                SummaryRow {
                    variant,
                    top1,
                    top5,
                    top1_std,
                    top5_std,
                }
            })
            .collect();
        Self { rows, summary }
    }

    pub fn mean_top1(&self, variant: Variant) -> Option<f64> {
        self.summary.iter().find(|s| s.variant == variant).map(|s| s.top1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},,", r.variant, r.seed, r.top1, r.top5).unwrap();
        }
        for m in &self.summary {
            writeln!(s, "{},mean,{},{},{},{}", m.variant, m.top1, m.top5, m.top1_std, m.top5_std).unwrap();
        }
        s
    }
}

/// Trains every variant on every seed. `progress` sees each finished epoch.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(Variant, u64, &EpochMetrics),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &variant in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.train.variant = variant;
            cfg.train.seed = seed;
            let out = train_with(&cfg, None, |e| progress(variant, seed, e))?;
            rows.push(AblationRow {
                variant,
                seed,
                top1: out.metrics.final_top1,
                top5: out.metrics.final_top5,
            });
        }
    }
    Ok(AblationTable::from_rows(rows))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub r1: usize,
    pub r2: usize,
    pub top1: f64,
    pub top5: f64,
    pub macs: u64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.r1, r.r2, r.top1, r.top5, r.macs).unwrap();
    }
    s
}

/// Trains with `r1 = r2 = r` for each ratio, averaging accuracy over seeds.
pub fn run_ratio_sweep(
    base: &RunConfig,
    ratios: &[usize],
    seeds: &[u64],
    mut progress: impl FnMut(usize, u64, &EpochMetrics),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &r in ratios {
        let mut cfg = base.clone();
        cfg.network.r1 = r;
        cfg.network.r2 = r;
        let macs = estimate_macs(&cfg.network_config())?.total();
        let (mut t1, mut t5) = (Vec::new(), Vec::new());
        for &seed in seeds {
            cfg.train.seed = seed;
            let out = train_with(&cfg, None, |e| progress(r, seed, e))?;
            t1.push(out.metrics.final_top1);
            t5.push(out.metrics.final_top5);
        }
        rows.push(SweepRow {
            r1: r,
            r2: r,
            top1: mean_std(&t1).0,
            top5: mean_std(&t5).0,
            macs,
        });
    }
    Ok(rows)
}

//! Closed-form multiply-accumulate counts for one clip (`N = 1`).
//!
//! Only products inside linear maps, convolutions, gating and similarity are
//! counted. Pooling, normalisation and activations are not.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{bottleneck_width, NetworkConfig};
use crate::error::Result;
use crate::tim::DEFAULT_KERNEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpType {
    Conv3x3,
    Pointwise,
    CmeDescriptor,
    CmeDiscrepancy,
    CmeFusion,
    CmeGate,
    TemporalConv,
    Cosine,
    SpatialWeighting,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacEntry {
    /// `"stem"`, `"head"` or `"block.{stage}.{block}"`.
    pub scope: String,
    /// Layer within the scope, e.g. `"conv2"` or `"cme.w1"`.
    pub layer: String,
    pub op: OpType,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacReport {
    pub entries: Vec<MacEntry>,
}

impl MacReport {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    /// Totals per scope, in network order.
    pub fn per_block(&self) -> Vec<(String, u64)> {
        let mut out: Vec<(String, u64)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some((s, m)) if *s == e.scope => *m += e.macs,
                _ => out.push((e.scope.clone(), e.macs)),
            }
        }
        out
    }

    pub fn per_op(&self) -> BTreeMap<OpType, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.op).or_insert(0) += e.macs;
        }
        out
    }

    /// Total over the layers whose name starts with `prefix`.
    pub fn layer_total(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.layer.starts_with(prefix))
            .map(|e| e.macs)
            .sum()
    }
}

pub fn pointwise_macs(t: usize, h: usize, w: usize, cin: usize, cout: usize) -> u64 {
    (t * h * w * cin * cout) as u64
}

pub fn conv3x3_macs(t: usize, ho: usize, wo: usize, cin: usize, cout: usize) -> u64 {
    9 * (t * ho * wo * cin * cout) as u64
}

pub fn estimate_macs(cfg: &NetworkConfig) -> Result<MacReport> {
    cfg.validate()?;
    let t = cfg.frames;
    let mut entries = Vec::new();
    let mut push = |scope: &str, layer: &str, op: OpType, macs: u64| {
        entries.push(MacEntry {
            scope: scope.to_string(),
            layer: layer.to_string(),
            op,
            macs,
        })
    };
    let mut hw = cfg.image_size;
    push(
        "stem",
        "conv",
        OpType::Conv3x3,
        conv3x3_macs(t, hw, hw, cfg.in_channels, cfg.stem_width()),
    );
    for (s, geo) in cfg.block_geometry().into_iter().enumerate() {
        for (b, (stride, cin, cout)) in geo.into_iter().enumerate() {
            let scope = format!("block.{s}.{b}");
            let p = hw * hw;
            if cfg.cme.applies(b) {
                let (c1, c2) = (cin / cfg.r1, cin / cfg.r2);
                push(&scope, "cme.w1", OpType::CmeDescriptor, (t * cin * c1) as u64);
                push(&scope, "cme.w2", OpType::CmeDescriptor, (t * cin * c2) as u64);
                push(&scope, "cme.discrepancy", OpType::CmeDiscrepancy, (t * t * c2) as u64);
                push(&scope, "cme.fusion", OpType::CmeFusion, (t * t * c1) as u64);
                push(&scope, "cme.w3", OpType::CmeGate, (t * c1 * cin) as u64);
                push(&scope, "cme.scale", OpType::CmeGate, (t * cin * p) as u64);
            }
            if cfg.tim {
                push(&scope, "tim", OpType::TemporalConv, (t * cin * p * DEFAULT_KERNEL) as u64);
            }
            let mid = bottleneck_width(cout);
            let ho = (hw - 1) / stride + 1;
            push(&scope, "conv1", OpType::Pointwise, pointwise_macs(t, hw, hw, cin, mid));
            push(&scope, "conv2", OpType::Conv3x3, conv3x3_macs(t, ho, ho, mid, mid));
            push(&scope, "conv3", OpType::Pointwise, pointwise_macs(t, ho, ho, mid, cout));
            if stride != 1 || cin != cout {
                push(&scope, "proj", OpType::Pointwise, pointwise_macs(t, ho, ho, cin, cout));
            }
            hw = ho;
            if cfg.sme.applies(b) && t > 1 {
                let p = hw * hw;
                // dot product and both squared norms per adjacent pair
                push(&scope, "sme.cosine", OpType::Cosine, (3 * (t - 1) * p * cout) as u64);
                push(&scope, "sme.weight", OpType::SpatialWeighting, (t * p * cout) as u64);
                push(&scope, "sme.wc", OpType::Pointwise, pointwise_macs(t, hw, hw, cout, cout));
            }
        }
    }
    let last = cfg.stages.last().unwrap().1;
    push("head", "linear", OpType::Linear, (last * cfg.classes) as u64);
    Ok(MacReport { entries })
}

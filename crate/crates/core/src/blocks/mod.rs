//! Bottleneck blocks with channel enhancement, temporal interaction and
//! spatial enhancement, assembled into stages and a small clip classifier.
//!
//! A block computes
//!
//! ```text
//! h = bottleneck(tim(cme(x)))
//! y = relu(residual(x) + h)
//! y = sme(y)            // first block of a stage only
//! ```
//!
//! where `residual` is the identity or a strided 1x1 projection with batch
//! norm when the width or resolution changes. The stem is a 3x3 conv, batch
//! norm and ReLU; the head averages over time and space and applies a linear
//! classifier.

mod checkpoint;
mod macs;
pub mod naive;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use macs::{conv3x3_macs, estimate_macs, pointwise_macs, MacEntry, MacReport, OpType};

use serde::{Deserialize, Serialize};

use crate::cme::{self, validate_ratios, CmeParams, CmeVars};
use crate::error::{Error, Result};
use crate::sme::{self, SmeParams, SmeVars};
use crate::tensor::{rng, BatchNormState, BnMode, BnVars, Tape, Tensor, Var};
use crate::tim::{self, TimInit, TimParams};

/// Where a module is inserted within each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    None,
    First,
    All,
}

impl Placement {
    pub fn applies(self, block: usize) -> bool {
        match self {
            Placement::None => false,
            Placement::First => block == 0,
            Placement::All => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// `(block_count, channel_width)` per stage.
    pub stages: Vec<(usize, usize)>,
    pub in_channels: usize,
    pub classes: usize,
    pub r1: usize,
    pub r2: usize,
    /// Frames per clip. The forward pass accepts any `T`; this one is used
    /// for cost estimates.
    pub frames: usize,
    /// Square input resolution, used for cost estimates.
    pub image_size: usize,
    pub cme: Placement,
    pub sme: Placement,
    pub tim: bool,
    pub tim_init: TimInit,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stages: vec![(2, 16), (2, 32)],
            in_channels: 1,
            classes: 8,
            r1: 8,
            r2: 8,
            frames: 8,
            image_size: 32,
            cme: Placement::All,
            sme: Placement::First,
            tim: true,
            tim_init: TimInit::Identity,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("network needs at least one stage".into()));
        }
        for (s, &(blocks, width)) in self.stages.iter().enumerate() {
            if blocks == 0 {
                return Err(Error::Config(format!("stage {s} has no blocks")));
            }
            if width < 2 {
                return Err(Error::Config(format!("stage {s} width {width} is below 2")));
            }
            validate_ratios(width, self.r1, self.r2)
                .map_err(|e| Error::Config(format!("stage {s}: {e}")))?;
        }
        if self.in_channels == 0 || self.classes == 0 || self.frames == 0 {
            return Err(Error::Config(
                "input channels, classes and frames must be positive".into(),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "input resolution {} is below 8",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.0).sum()
    }

    pub fn stem_width(&self) -> usize {
        self.stages[0].1
    }

    /// A copy with channel enhancement, temporal interaction and spatial
    /// enhancement removed.
    pub fn plain(&self) -> Self {
        Self {
            cme: Placement::None,
            sme: Placement::None,
            tim: false,
            ..self.clone()
        }
    }

    /// `(stride, in_width, out_width)` for every block, stage-major.
    pub fn block_geometry(&self) -> Vec<Vec<(usize, usize, usize)>> {
        let mut cin = self.stem_width();
        self.stages
            .iter()
            .enumerate()
            .map(|(s, &(blocks, width))| {
                (0..blocks)
                    .map(|b| {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let g = (stride, cin, width);
                        cin = width;
                        g
                    })
                    .collect()
            })
            .collect()
    }
}

/// Bottleneck width for a block that outputs `width` channels.
pub fn bottleneck_width(width: usize) -> usize {
    (width / 2).max(1)
}

/// A convolution without bias followed by batch norm. The kernel is a 1x1
/// conv (`[Cout, Cin]`) or a 3x3 conv (`[Cout, Cin, 3, 3]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub w: Tensor,
    pub bn: BatchNormState,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBnVars {
    pub w: Var,
    pub bn: BnVars,
}

impl ConvBn {
    pub fn new(cout: usize, cin: usize, kernel: usize, seed: u64, name: &str) -> Self {
        let mut r = rng::stream(seed, &format!("{name}.w"));
        let w = if kernel == 1 {
            rng::kaiming_normal(&mut r, &[cout, cin], cin)
        } else {
            rng::kaiming_normal(&mut r, &[cout, cin, 3, 3], cin * 9)
        };
        Self {
            w,
            bn: BatchNormState::new(cout),
        }
    }

    pub fn is_3x3(&self) -> bool {
        self.w.rank() == 4
    }

    pub fn bind(&self, tape: &mut Tape) -> ConvBnVars {
        ConvBnVars {
            w: tape.leaf(self.w.clone()),
            bn: self.bn.bind(tape),
        }
    }

    fn forward(&mut self, tape: &mut Tape, x: Var, v: ConvBnVars, stride: usize) -> Result<Var> {
        let y = if self.is_3x3() {
            tape.conv2d_3x3(x, v.w, stride)?
        } else {
            let xs = if stride > 1 {
                tape.subsample_spatial(x, stride)?
            } else {
                x
            };
            tape.pointwise_linear(xs, v.w, None)?
        };
        self.bn.forward(tape, y, v.bn)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub cme: Option<CmeParams>,
    pub tim: Option<TimParams>,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub conv3: ConvBn,
    pub sme: Option<SmeParams>,
    pub proj: Option<ConvBn>,
    /// Stride of the 3x3 conv and of the projection.
    pub stride: usize,
}

impl BlockParams {
    pub fn new(
        cfg: &NetworkConfig,
        stage: usize,
        block: usize,
        (stride, cin, cout): (usize, usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let mid = bottleneck_width(cout);
        let pre = format!("block.{stage}.{block}");
        let cme = if cfg.cme.applies(block) {
            Some(CmeParams::new(cin, cfg.r1, cfg.r2, seed, &format!("cme.{stage}.{block}"))?)
        } else {
            None
        };
        let sme = cfg
            .sme
            .applies(block)
            .then(|| SmeParams::new(cout, seed, &sme_prefix(stage, block)));
        let proj = (stride != 1 || cin != cout)
            .then(|| ConvBn::new(cout, cin, 1, seed, &format!("{pre}.proj")));
        Ok(Self {
            cme,
            tim: cfg.tim.then(|| TimParams::with_init(cin, cfg.tim_init)),
            conv1: ConvBn::new(mid, cin, 1, seed, &format!("{pre}.conv1")),
            conv2: ConvBn::new(mid, mid, 3, seed, &format!("{pre}.conv2")),
            conv3: ConvBn::new(cout, mid, 1, seed, &format!("{pre}.conv3")),
            sme,
            proj,
            stride,
        })
    }

    /// Binds the block on its own, outside a network.
    pub fn bind(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            cme: self.cme.as_ref().map(|c| c.bind(tape)),
            tim: self.tim.as_ref().map(|t| t.bind(tape)),
            conv1: self.conv1.bind(tape),
            conv2: self.conv2.bind(tape),
            conv3: self.conv3.bind(tape),
            sme: self.sme.as_ref().map(|s| s.bind(tape)),
            proj: self.proj.as_ref().map(|p| p.bind(tape)),
        }
    }

    pub fn is_block_b(&self) -> bool {
        self.sme.is_some()
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.w.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.conv3.w.shape()[0]
    }

    fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormState> {
        [&mut self.conv1, &mut self.conv2, &mut self.conv3]
            .into_iter()
            .map(|c| &mut c.bn)
            .chain(self.proj.as_mut().map(|p| &mut p.bn))
            .chain(self.sme.as_mut().map(|s| &mut s.bn))
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.norms_mut().for_each(|bn| bn.mode = mode);
    }
}

fn sme_prefix(stage: usize, block: usize) -> String {
    if block == 0 {
        format!("sme.{stage}")
    } else {
        format!("sme.{stage}.{block}")
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub cme: Option<CmeVars>,
    pub tim: Option<Var>,
    pub conv1: ConvBnVars,
    pub conv2: ConvBnVars,
    pub conv3: ConvBnVars,
    pub sme: Option<SmeVars>,
    pub proj: Option<ConvBnVars>,
}

/// Handles recorded while running one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub input: Var,
    pub gates: Option<Var>,
    pub similarity: Option<Var>,
    pub output: Var,
}

/// Shared body of both block types.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    p: &mut BlockParams,
    v: &BlockVars,
) -> Result<BlockTrace> {
    let [_, _, c, _, _] = tape.value(x).clip_dims()?;
    if c != p.in_channels() {
        return Err(Error::dim("block_forward", tape.shape(x), p.conv1.w.shape()));
    }
    let mut h = x;
    let mut gates = None;
    if let Some(cv) = &v.cme {
        let (u, a) = cme::cme_forward_with_gates(tape, h, cv)?;
        h = u;
        gates = Some(a);
    }
    if let Some(k) = v.tim {
        h = tim::tim_forward(tape, h, k)?;
    }
    let h1 = p.conv1.forward(tape, h, v.conv1, 1)?;
    let h1 = tape.relu(h1);
    let h2 = p.conv2.forward(tape, h1, v.conv2, p.stride)?;
    let h2 = tape.relu(h2);
    let h3 = p.conv3.forward(tape, h2, v.conv3, 1)?;
    let res = match (&mut p.proj, v.proj) {
        (Some(proj), Some(pv)) => proj.forward(tape, x, pv, p.stride)?,
        _ => x,
    };
    let sum = tape.add(res, h3)?;
    let mut y = tape.relu(sum);
    let mut similarity = None;
    if let (Some(sp), Some(sv)) = (&mut p.sme, v.sme) {
        let (out, s) = sme::sme_forward_with_map(tape, y, sp, sv)?;
        y = out;
        similarity = s;
    }
    Ok(BlockTrace {
        input: x,
        gates,
        similarity,
        output: y,
    })
}

/// Block without spatial enhancement.
pub fn block_a_forward(tape: &mut Tape, x: Var, p: &mut BlockParams, v: &BlockVars) -> Result<Var> {
    if p.is_block_b() {
        return Err(Error::Contract("block A must not carry SME parameters".into()));
    }
    block_forward(tape, x, p, v).map(|t| t.output)
}

/// Block A followed by spatial enhancement of its output.
pub fn block_b_forward(tape: &mut Tape, x: Var, p: &mut BlockParams, v: &BlockVars) -> Result<Var> {
    if !p.is_block_b() {
        return Err(Error::Contract("block B needs SME parameters".into()));
    }
    block_forward(tape, x, p, v).map(|t| t.output)
}

/// Parameters of the whole classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub stem: ConvBn,
    pub stages: Vec<Vec<BlockParams>>,
    /// `[classes, C_last]`, zero at initialisation.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Every parameter of a [`Network`] bound to a tape.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub stem: ConvBnVars,
    pub stages: Vec<Vec<BlockVars>>,
    pub head_w: Var,
    pub head_b: Var,
    /// The same handles keyed by parameter name, in [`Network::params`] order.
    pub named: Vec<(String, Var)>,
}

/// Logits plus per-block handles.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    pub blocks: Vec<Vec<BlockTrace>>,
}

impl ForwardTrace {
    /// The first block that carries spatial enhancement.
    pub fn first_block_b(&self, net: &Network) -> Option<BlockTrace> {
        net.stages
            .iter()
            .zip(&self.blocks)
            .flat_map(|(ps, ts)| ps.iter().zip(ts))
            .find(|(p, _)| p.is_block_b())
            .map(|(_, t)| *t)
    }
}

/// Builds the network: stem, stages whose first block is B when spatial
/// enhancement is placed first, and a zero-initialised linear head.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let stem = ConvBn::new(cfg.stem_width(), cfg.in_channels, 3, seed, "stem.conv");
    let stages = cfg
        .block_geometry()
        .into_iter()
        .enumerate()
        .map(|(s, geo)| {
            geo.into_iter()
                .enumerate()
                .map(|(b, g)| BlockParams::new(cfg, s, b, g, seed))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let last = cfg.stages.last().unwrap().1;
    Ok(Network {
        config: cfg.clone(),
        stem,
        stages,
        head_w: Tensor::zeros(&[cfg.classes, last]),
        head_b: Tensor::zeros(&[cfg.classes]),
    })
}

fn conv_names(pre: &str, bn: &str) -> [String; 3] {
    [format!("{pre}.w"), format!("{bn}.gamma"), format!("{bn}.beta")]
}

/// Names of a block's conv/norm pairs, `(conv prefix, norm prefix)`.
fn block_conv_prefixes(s: usize, b: usize) -> [(String, String); 4] {
    let pre = format!("block.{s}.{b}");
    [
        (format!("{pre}.conv1"), format!("{pre}.bn1")),
        (format!("{pre}.conv2"), format!("{pre}.bn2")),
        (format!("{pre}.conv3"), format!("{pre}.bn3")),
        (format!("{pre}.proj"), format!("{pre}.proj_bn")),
    ]
}

impl Network {
    pub fn set_mode(&mut self, mode: BnMode) {
        self.norms_mut().into_iter().for_each(|(_, bn)| bn.mode = mode);
    }

    /// Every batch-norm state with its name prefix.
    pub fn norms(&self) -> Vec<(String, &BatchNormState)> {
        let mut out = vec![("stem.bn".to_string(), &self.stem.bn)];
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, p) in stage.iter().enumerate() {
                let names = block_conv_prefixes(s, b);
                out.push((names[0].1.clone(), &p.conv1.bn));
                out.push((names[1].1.clone(), &p.conv2.bn));
                out.push((names[2].1.clone(), &p.conv3.bn));
                if let Some(pr) = &p.proj {
                    out.push((names[3].1.clone(), &pr.bn));
                }
                if let Some(sp) = &p.sme {
                    out.push((sme_prefix(s, b), &sp.bn));
                }
            }
        }
        out
    }

    pub fn norms_mut(&mut self) -> Vec<(String, &mut BatchNormState)> {
        let mut out = vec![("stem.bn".to_string(), &mut self.stem.bn)];
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, p) in stage.iter_mut().enumerate() {
                let names = block_conv_prefixes(s, b);
                out.push((names[0].1.clone(), &mut p.conv1.bn));
                out.push((names[1].1.clone(), &mut p.conv2.bn));
                out.push((names[2].1.clone(), &mut p.conv3.bn));
                if let Some(pr) = &mut p.proj {
                    out.push((names[3].1.clone(), &mut pr.bn));
                }
                if let Some(sp) = &mut p.sme {
                    out.push((sme_prefix(s, b), &mut sp.bn));
                }
            }
        }
        out
    }

    /// Trainable tensors by name, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        fn conv<'a>(out: &mut Vec<(String, &'a Tensor)>, c: &'a ConvBn, pre: &str, bn: &str) {
            let [w, g, b] = conv_names(pre, bn);
            out.push((w, &c.w));
            out.push((g, &c.bn.gamma));
            out.push((b, &c.bn.beta));
        }
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        conv(&mut out, &self.stem, "stem.conv", "stem.bn");
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, p) in stage.iter().enumerate() {
                if let Some(c) = &p.cme {
                    for (n, t) in c.tensors() {
                        out.push((format!("cme.{s}.{b}.{n}"), t));
                    }
                }
                if let Some(t) = &p.tim {
                    out.push((format!("tim.{s}.{b}.wt"), &t.wt));
                }
                let names = block_conv_prefixes(s, b);
                conv(&mut out, &p.conv1, &names[0].0, &names[0].1);
                conv(&mut out, &p.conv2, &names[1].0, &names[1].1);
                conv(&mut out, &p.conv3, &names[2].0, &names[2].1);
                if let Some(pr) = &p.proj {
                    conv(&mut out, pr, &names[3].0, &names[3].1);
                }
                if let Some(sp) = &p.sme {
                    let pre = sme_prefix(s, b);
                    out.push((format!("{pre}.wc"), &sp.wc));
                    out.push((format!("{pre}.gamma"), &sp.bn.gamma));
                    out.push((format!("{pre}.beta"), &sp.bn.beta));
                }
            }
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Same order and names as [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn conv<'a>(out: &mut Vec<(String, &'a mut Tensor)>, c: &'a mut ConvBn, pre: &str, bn: &str) {
            let [w, g, b] = conv_names(pre, bn);
            out.push((w, &mut c.w));
            out.push((g, &mut c.bn.gamma));
            out.push((b, &mut c.bn.beta));
        }
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        conv(&mut out, &mut self.stem, "stem.conv", "stem.bn");
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, p) in stage.iter_mut().enumerate() {
                if let Some(c) = &mut p.cme {
                    for (n, t) in c.tensors_mut() {
                        out.push((format!("cme.{s}.{b}.{n}"), t));
                    }
                }
                if let Some(t) = &mut p.tim {
                    out.push((format!("tim.{s}.{b}.wt"), &mut t.wt));
                }
                let names = block_conv_prefixes(s, b);
                conv(&mut out, &mut p.conv1, &names[0].0, &names[0].1);
                conv(&mut out, &mut p.conv2, &names[1].0, &names[1].1);
                conv(&mut out, &mut p.conv3, &names[2].0, &names[2].1);
                if let Some(pr) = &mut p.proj {
                    conv(&mut out, pr, &names[3].0, &names[3].1);
                }
                if let Some(sp) = &mut p.sme {
                    let pre = sme_prefix(s, b);
                    out.push((format!("{pre}.wc"), &mut sp.wc));
                    out.push((format!("{pre}.gamma"), &mut sp.bn.gamma));
                    out.push((format!("{pre}.beta"), &mut sp.bn.beta));
                }
            }
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cme_count(&self) -> usize {
        self.stages.iter().flatten().filter(|p| p.cme.is_some()).count()
    }

    pub fn sme_count(&self) -> usize {
        self.stages.iter().flatten().filter(|p| p.sme.is_some()).count()
    }

    pub fn bind(&self, tape: &mut Tape) -> NetVars {
        let mut named = Vec::new();
        let mut leaf = |name: String, t: &Tensor, named: &mut Vec<(String, Var)>| {
            let v = tape.leaf(t.clone());
            named.push((name, v));
            v
        };
        fn conv(
            leaf: &mut impl FnMut(String, &Tensor, &mut Vec<(String, Var)>) -> Var,
            named: &mut Vec<(String, Var)>,
            c: &ConvBn,
            pre: &str,
            bn: &str,
        ) -> ConvBnVars {
            let [w, g, b] = conv_names(pre, bn);
            ConvBnVars {
                w: leaf(w, &c.w, named),
                bn: BnVars {
                    gamma: leaf(g, &c.bn.gamma, named),
                    beta: leaf(b, &c.bn.beta, named),
                },
            }
        }
        let stem = conv(&mut leaf, &mut named, &self.stem, "stem.conv", "stem.bn");
        let mut stages = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for (b, p) in stage.iter().enumerate() {
                let cme = p.cme.as_ref().map(|c| {
                    let mut l = |n: &str, t: &Tensor| leaf(format!("cme.{s}.{b}.{n}"), t, &mut named);
                    CmeVars {
                        w1: l("w1", &c.w1),
                        b1: l("b1", &c.b1),
                        w2: l("w2", &c.w2),
                        b2: l("b2", &c.b2),
                        w3: l("w3", &c.w3),
                        b3: l("b3", &c.b3),
                    }
                });
                let tim = p
                    .tim
                    .as_ref()
                    .map(|t| leaf(format!("tim.{s}.{b}.wt"), &t.wt, &mut named));
                let names = block_conv_prefixes(s, b);
                let conv1 = conv(&mut leaf, &mut named, &p.conv1, &names[0].0, &names[0].1);
                let conv2 = conv(&mut leaf, &mut named, &p.conv2, &names[1].0, &names[1].1);
                let conv3 = conv(&mut leaf, &mut named, &p.conv3, &names[2].0, &names[2].1);
                let proj = p
                    .proj
                    .as_ref()
                    .map(|pr| conv(&mut leaf, &mut named, pr, &names[3].0, &names[3].1));
                let sme = p.sme.as_ref().map(|sp| {
                    let pre = sme_prefix(s, b);
                    SmeVars {
                        wc: leaf(format!("{pre}.wc"), &sp.wc, &mut named),
                        bn: BnVars {
                            gamma: leaf(format!("{pre}.gamma"), &sp.bn.gamma, &mut named),
                            beta: leaf(format!("{pre}.beta"), &sp.bn.beta, &mut named),
                        },
                    }
                });
                blocks.push(BlockVars {
                    cme,
                    tim,
                    conv1,
                    conv2,
                    conv3,
                    sme,
                    proj,
                });
            }
            stages.push(blocks);
        }
        let head_w = leaf("head.w".into(), &self.head_w, &mut named);
        let head_b = leaf("head.b".into(), &self.head_b, &mut named);
        NetVars {
            stem,
            stages,
            head_w,
            head_b,
            named,
        }
    }

    /// Untaped logits `[N, classes]`.
    pub fn logits(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.bind(&mut tape);
        let y = network_forward(&mut tape, xv, self, &vars)?;
        Ok(tape.value(y).clone())
    }
}

/// Stem, stages and head, keeping every block's handles.
pub fn network_forward_traced(
    tape: &mut Tape,
    x: Var,
    net: &mut Network,
    vars: &NetVars,
) -> Result<ForwardTrace> {
    let [_, _, c, h, w] = tape.value(x).clip_dims()?;
    if c != net.config.in_channels {
        return Err(Error::dim("network_forward", tape.shape(x), &[net.config.in_channels]));
    }
    if h < 8 || w < 8 {
        return Err(Error::Contract(format!(
            "network input must be at least 8x8, got {h}x{w}"
        )));
    }
    let y = net.stem.forward(tape, x, vars.stem, 1)?;
    let mut y = tape.relu(y);
    let mut traces = Vec::with_capacity(net.stages.len());
    for (stage, svars) in net.stages.iter_mut().zip(&vars.stages) {
        let mut st = Vec::with_capacity(stage.len());
        for (p, v) in stage.iter_mut().zip(svars) {
            let t = block_forward(tape, y, p, v)?;
            y = t.output;
            st.push(t);
        }
        traces.push(st);
    }
    let pooled = tape.global_avg_pool_spatial(y)?;
    let pooled = tape.mean_time(pooled)?;
    let logits = tape.linear(pooled, vars.head_w, Some(vars.head_b))?;
    Ok(ForwardTrace {
        logits,
        blocks: traces,
    })
}

/// Logits `[N, classes]`.
pub fn network_forward(tape: &mut Tape, x: Var, net: &mut Network, vars: &NetVars) -> Result<Var> {
    network_forward_traced(tape, x, net, vars).map(|t| t.logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_handles_follow_parameter_order() {
        let net = build_network(&NetworkConfig::default(), 3).unwrap();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let params = net.params();
        assert_eq!(vars.named.len(), params.len());
        for ((a, v), (b, t)) in vars.named.iter().zip(&params) {
            assert_eq!(a, b);
            assert_eq!(tape.value(*v), *t);
        }
        let want: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let mut net = net.clone();
        let names: Vec<String> = net.params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, want);
    }

    #[test]
    fn initialisation_is_keyed_by_name() {
        let full = build_network(&NetworkConfig::default(), 9).unwrap();
        let plain = build_network(&NetworkConfig::default().plain(), 9).unwrap();
        let plain_params = plain.params();
        for (name, t) in plain_params {
            let (_, u) = full.params().into_iter().find(|(n, _)| *n == name).unwrap();
            assert_eq!(t, u, "{name}");
        }
    }
}

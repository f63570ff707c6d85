//! SGD training with momentum and multi-clip evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{BnSchedule, RunConfig};
use crate::blocks::{self, build_network, network_forward, Network, NetVars};
use crate::error::{Error, Result};
use crate::synthdata::{self, SynthConfig, Split};
use crate::tensor::{rng, BnMode, Gradients, Tape, Tensor};

pub const METRICS_HEADER: &str = "epoch,split,loss,top1,top5,seconds";
pub const CHECKPOINT_FILE: &str = "checkpoint.cmrk";
pub const METRICS_FILE: &str = "metrics.csv";

/// Loss and accuracy over one pass of a split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// Validation accuracy after the last epoch.
    pub final_top1: f64,
    pub final_top5: f64,
}

impl RunMetrics {
    /// CSV with one `train` and one `val` row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for e in &self.epochs {
            for (name, m) in [("train", e.train), ("val", e.val)] {
                writeln!(s, "{},{name},{},{},{},{:.3}", e.epoch, m.loss, m.top1, m.top5, e.seconds).unwrap();
            }
        }
        s
    }
}

/// Rank of `label` when classes are ordered by descending score, ties going
/// to the lower class index.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let y = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > y || (v == y && j < label))
        .count()
}

#[derive(Default, Clone, Copy)]
struct Tally {
    loss: f64,
    top1: usize,
    top5: usize,
    count: usize,
}

impl Tally {
    fn add(&mut self, scores: &[f64], label: usize, loss: f64) {
        let r = rank_of(scores, label);
        self.top1 += usize::from(r < 1);
        self.top5 += usize::from(r < 5);
        self.loss += loss;
        self.count += 1;
    }

    fn finish(self) -> SplitMetrics {
        let n = self.count.max(1) as f64;
        SplitMetrics {
            loss: self.loss / n,
            top1: self.top1 as f64 / n,
            top5: self.top5 as f64 / n,
            count: self.count,
        }
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Class probabilities `[N, classes]` for a batch of clips, in inference mode.
pub fn predict(net: &mut Network, clips: &Tensor) -> Result<Vec<Vec<f64>>> {
    net.set_mode(BnMode::Inference);
    let logits = net.logits(clips)?;
    let k = logits.shape()[1];
    Ok(logits.data().chunks(k).map(softmax).collect())
}

/// Mean of per-clip probability vectors.
pub fn average_scores(scores: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; scores[0].len()];
    for s in scores {
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    let n = scores.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Averaged class scores of one video from `clips` separate clips.
pub fn score_video(net: &mut Network, clips: &[Tensor]) -> Result<Vec<f64>> {
    let batch = Tensor::concat0(clips)?;
    Ok(average_scores(&predict(net, &batch)?))
}

/// Accuracy on `split` with `clips` evenly offset clips per video, scores
/// averaged before ranking.
pub fn evaluate(net: &mut Network, data: &SynthConfig, split: Split, clips: usize) -> Result<SplitMetrics> {
    if net.config.classes != data.classes {
        return Err(Error::Config(format!(
            "network predicts {} classes but the data has {}",
            net.config.classes, data.classes
        )));
    }
    if clips == 0 {
        return Err(Error::Config("need at least one clip per video".into()));
    }
    let pool = synthdata::data_pool();
    let per_batch = (32 / clips).max(1);
    let n = data.len(split);
    let mut tally = Tally::default();
    for start in (0..n).step_by(per_batch) {
        let videos: Vec<usize> = (start..(start + per_batch).min(n)).map(|i| data.index(split, i)).collect();
        let generated: Vec<(Vec<Tensor>, usize)> = pool.install(|| {
            use rayon::prelude::*;
            videos
                .par_iter()
                .map(|&v| synthdata::generate_clips(data, v, clips))
                .collect::<Result<Vec<_>>>()
        })?;
        let flat: Vec<Tensor> = generated.iter().flat_map(|(c, _)| c.iter().cloned()).collect();
        let probs = predict(net, &Tensor::concat0(&flat)?)?;
        for (i, (_, label)) in generated.iter().enumerate() {
            let avg = average_scores(&probs[i * clips..(i + 1) * clips]);
            tally.add(&avg, *label, -avg[*label].max(f64::MIN_POSITIVE).ln());
        }
    }
    Ok(tally.finish())
}

/// Heavy-ball SGD, `v = mu v + g + wd p`, `p -= lr v`.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: net.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, vars: &NetVars, grads: &Gradients, lr: f64) {
        for ((( _, p), (_, v)), vel) in net.params_mut().into_iter().zip(&vars.named).zip(&mut self.velocity) {
            let Some(g) = grads.get(*v) else { continue };
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// One optimisation step on a batch; returns the mean loss and the logits.
pub fn train_step(
    net: &mut Network,
    opt: &mut Sgd,
    clips: &Tensor,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.constant(clips.clone());
    let vars = net.bind(&mut tape);
    let logits = network_forward(&mut tape, x, net, &vars)?;
    let loss = match tape.cross_entropy_loss(logits, labels) {
        Ok(l) => Some(l),
        Err(Error::Numeric(_)) => None,
        Err(e) => return Err(e),
    };
    let value = match loss {
        Some(l) => tape.value(l).item()?,
        None => f64::NAN,
    };
    let Some(loss) = loss.filter(|_| value.is_finite()) else {
        let culprit = tape
            .first_non_finite()
            .map(|(v, k)| format!("node {} ({k:?})", v.index()))
            .unwrap_or_else(|| "none recorded".into());
        return Err(Error::Numeric(format!(
            "training loss is {value}; first non-finite tensor: {culprit}"
        )));
    };
    let grads = tape.backward(loss)?;
    opt.step(net, &vars, &grads, lr);
    Ok((value, tape.value(logits).clone()))
}

/// Result of [`train`]: metrics plus the trained network.
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub network: Network,
}

/// Trains from scratch. With `out` set, writes the metrics CSV, the
/// checkpoint and the resolved config there.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, out, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &RunConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let data = &cfg.data;
    let mut net = build_network(&cfg.network_config(), tc.seed)?;
    let mut opt = Sgd::new(&net, tc.momentum, tc.weight_decay);
    let pool = synthdata::data_pool();
    let mut order: Vec<usize> = (0..data.train_size).collect();
    let mut epochs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let started = Instant::now();
        let lr = tc.lr_at(epoch);
        let mode = match tc.bn {
            BnSchedule::FreezeAfter(e) if epoch >= e => BnMode::Inference,
            _ => BnMode::Training,
        };
        order.shuffle(&mut rng::stream_at(tc.seed, "train.shuffle", &[epoch as u64]));
        let mut tally = Tally::default();
        for chunk in order.chunks(tc.batch_size) {
            let indices: Vec<usize> = chunk.iter().map(|&i| data.index(Split::Train, i)).collect();
            let (clips, labels) = synthdata::make_batch(data, &indices, Some((tc.seed, epoch)), &pool)?;
            net.set_mode(mode);
            let (loss, logits) = train_step(&mut net, &mut opt, &clips, &labels, lr)?;
            let k = logits.shape()[1];
            for (row, &l) in logits.data().chunks(k).zip(&labels) {
                tally.add(row, l, loss);
            }
        }
        let train = tally.finish();
        let val = if data.val_size > 0 {
            evaluate(&mut net, data, Split::Val, tc.eval_clips)?
        } else {
            SplitMetrics {
                loss: f64::NAN,
                top1: 0.0,
                top5: 0.0,
                count: 0,
            }
        };
        let em = EpochMetrics {
            epoch,
            lr,
            train,
            val,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&em);
        epochs.push(em);
    }
    let last = epochs.last().map(|e| e.val);
    let metrics = RunMetrics {
        final_top1: last.map_or(0.0, |v| v.top1),
        final_top5: last.map_or(0.0, |v| v.top5),
        epochs,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), metrics.to_csv())?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        blocks::save_checkpoint(&dir.join(CHECKPOINT_FILE), &net)?;
    }
    Ok(TrainOutcome {
        metrics,
        network: net,
    })
}

//! Moving-square videos for direction classification.
//!
//! Each video shows one bright square translating at constant velocity in
//! one of `classes` directions spaced evenly around the circle, over a black
//! background with a few static squares (dimmer by default) and additive
//! Gaussian noise clipped to `[0, 1]`. Class `k` moves at angle `k * 360 / classes` degrees,
//! counter-clockwise from "right", with image rows growing downwards.
//!
//! Videos are pure functions of `(seed, index)`. Training indices are
//! `[0, train_size)` and validation indices follow directly after them.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{io, rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Frames per video.
    pub clip_len: usize,
    /// Frames sampled per clip.
    pub frames: usize,
    pub classes: usize,
    pub square_size: usize,
    /// Speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub distractors_max: usize,
    /// Distractor brightness range; the moving square is always 1.
    pub distractor_min: f64,
    pub distractor_max: f64,
    pub noise_std: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            clip_len: 32,
            frames: 8,
            classes: 8,
            square_size: 6,
            speed_min: 0.5,
            speed_max: 0.8,
            distractors_max: 3,
            distractor_min: 0.3,
            distractor_max: 0.7,
            noise_std: 0.05,
            train_size: 512,
            val_size: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames > self.clip_len {
            return Err(Error::Config(format!(
                "need 1 <= frames <= clip_len, got {} and {}",
                self.frames, self.clip_len
            )));
        }
        if self.classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if self.square_size == 0 || self.square_size >= self.image_size {
            return Err(Error::Config(format!(
                "square size {} does not fit a {} image",
                self.square_size, self.image_size
            )));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return Err(Error::Config(format!(
                "bad speed range [{}, {}]",
                self.speed_min, self.speed_max
            )));
        }
        if !(0.0 <= self.distractor_min && self.distractor_min <= self.distractor_max && self.distractor_max <= 1.0) {
            return Err(Error::Config(format!(
                "bad distractor brightness range [{}, {}]",
                self.distractor_min, self.distractor_max
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
        }
    }

    /// Global video index of the `i`-th item of `split`.
    pub fn index(&self, split: Split, i: usize) -> usize {
        match split {
            Split::Train => i,
            Split::Val => self.train_size + i,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        const EIGHT: [&str; 8] = [
            "right", "up-right", "up", "up-left", "left", "down-left", "down", "down-right",
        ];
        if self.classes == 8 {
            EIGHT.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.classes)
                .map(|k| format!("{:.1}deg", 360.0 * k as f64 / self.classes as f64))
                .collect()
        }
    }

    /// Unit direction `(dx, dy)` of class `label` in image coordinates.
    pub fn direction(&self, label: usize) -> (f64, f64) {
        let a = std::f64::consts::TAU * label as f64 / self.classes as f64;
        (a.cos(), -a.sin())
    }
}

/// A full-length video `[L, 1, H, W]` with its generating parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Tensor,
    pub label: usize,
    /// Top-left corner `(x, y)` of the moving square in every frame.
    pub positions: Vec<(f64, f64)>,
    /// Top-left corners of the static squares.
    pub distractors: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    /// `[1, T, 1, H, W]`, values in `[0, 1]`.
    pub clip: Tensor,
    pub label: usize,
}

/// Folds `v` into `[0, max]` as if bouncing off both ends.
fn reflect(v: f64, max: f64) -> f64 {
    if max <= 0.0 {
        return 0.0;
    }
    let r = v.rem_euclid(2.0 * max);
    if r > max {
        2.0 * max - r
    } else {
        r
    }
}

/// Covered fraction of `[i, i+1)` by `[lo, lo + len)`.
fn overlap(i: usize, lo: f64, len: f64) -> f64 {
    let (a, b) = (i as f64, i as f64 + 1.0);
    (b.min(lo + len) - a.max(lo)).max(0.0)
}

/// Adds an axis-aligned square with anti-aliased edges, keeping the brighter
/// value where it overlaps what is already drawn.
fn draw_square(frame: &mut [f64], size: usize, (x, y): (f64, f64), side: f64, value: f64) {
    let x0 = x.floor().max(0.0) as usize;
    let y0 = y.floor().max(0.0) as usize;
    let x1 = ((x + side).ceil() as usize).min(size);
    let y1 = ((y + side).ceil() as usize).min(size);
    for r in y0..y1 {
        let cy = overlap(r, y, side);
        for c in x0..x1 {
            let v = value * cy * overlap(c, x, side);
            let p = &mut frame[r * size + c];
            *p = p.max(v);
        }
    }
}

/// Start coordinate for one axis: if the whole path fits, it is placed so
/// that no bounce happens; otherwise the start is uniform and the motion
/// reflects at the borders.
fn start_coord(r: &mut impl Rng, room: f64, travel: f64) -> f64 {
    if travel.abs() <= room {
        let lo = (-travel).max(0.0);
        let hi = room - travel.max(0.0);
        if hi > lo {
            r.gen_range(lo..=hi)
        } else {
            lo
        }
    } else {
        r.gen_range(0.0..=room)
    }
}

pub fn generate_video(cfg: &SynthConfig, index: usize) -> Video {
    let mut r = rng::stream_at(cfg.seed, "synth.video", &[index as u64]);
    let size = cfg.image_size;
    let side = cfg.square_size as f64;
    let room = (size - cfg.square_size) as f64;
    let label = index % cfg.classes;
    let (dx, dy) = cfg.direction(label);
    let speed = if cfg.speed_max > cfg.speed_min {
        r.gen_range(cfg.speed_min..=cfg.speed_max)
    } else {
        cfg.speed_min
    };
    let (vx, vy) = (speed * dx, speed * dy);
    let steps = (cfg.clip_len - 1) as f64;
    let sx = start_coord(&mut r, room, vx * steps);
    let sy = start_coord(&mut r, room, vy * steps);
    let positions: Vec<(f64, f64)> = (0..cfg.clip_len)
        .map(|f| {
            let f = f as f64;
            (reflect(sx + vx * f, room), reflect(sy + vy * f, room))
        })
        .collect();

    let count = r.gen_range(0..=cfg.distractors_max);
    let distractors: Vec<((f64, f64), f64)> = (0..count)
        .map(|_| {
            let p = (r.gen_range(0.0..=room), r.gen_range(0.0..=room));
            let v = if cfg.distractor_max > cfg.distractor_min {
                r.gen_range(cfg.distractor_min..cfg.distractor_max)
            } else {
                cfg.distractor_min
            };
            (p, v)
        })
        .collect();

    let plane = size * size;
    let mut data = vec![0.0; cfg.clip_len * plane];
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    for (f, frame) in data.chunks_mut(plane).enumerate() {
        for &(p, v) in &distractors {
            draw_square(frame, size, p, side, v);
        }
        draw_square(frame, size, positions[f], side, 1.0);
        if cfg.noise_std > 0.0 {
            for v in frame.iter_mut() {
                *v = (*v + noise.sample(&mut r)).clamp(0.0, 1.0);
            }
        }
    }
    Video {
        frames: Tensor::new(&[cfg.clip_len, 1, size, size], data).unwrap(),
        label,
        positions,
        distractors: distractors.into_iter().map(|(p, _)| p).collect(),
    }
}

/// Midpoints of `t` equal segments of `0..l`.
pub fn uniform_sample_frames(l: usize, t: usize) -> Result<Vec<usize>> {
    offset_sample_frames(l, t, 0, 1)
}

/// The `clip`-th of `n` evenly offset samplings. `clip = 0, n = 1` is the
/// midpoint sampling.
pub fn offset_sample_frames(l: usize, t: usize, clip: usize, n: usize) -> Result<Vec<usize>> {
    check_sampling(l, t)?;
    if n == 0 || clip >= n {
        return Err(Error::Contract(format!("clip {clip} of {n} requested")));
    }
    let seg = l as f64 / t as f64;
    Ok((0..t)
        .map(|k| {
            let (lo, hi) = segment_bounds(l, t, k);
            ((seg * k as f64 + seg * (clip as f64 + 0.5) / n as f64).floor() as usize).clamp(lo, hi)
        })
        .collect())
}

/// One index drawn uniformly from the integers of each segment.
pub fn jittered_sample_frames(l: usize, t: usize, r: &mut impl Rng) -> Result<Vec<usize>> {
    check_sampling(l, t)?;
    Ok((0..t).map(|k| {
        let (lo, hi) = segment_bounds(l, t, k);
        r.gen_range(lo..=hi)
    })
    .collect())
}

/// Smallest and largest integer index inside segment `k`.
pub fn segment_bounds(l: usize, t: usize, k: usize) -> (usize, usize) {
    let seg = l as f64 / t as f64;
    let lo = (seg * k as f64).ceil() as usize;
    let hi = ((seg * (k + 1) as f64).ceil() as usize).min(l) - 1;
    (lo, hi)
}

fn check_sampling(l: usize, t: usize) -> Result<()> {
    if t == 0 || t > l {
        return Err(Error::Contract(format!("cannot sample {t} frames from {l}")));
    }
    Ok(())
}

/// Gathers the given frames of a video into a `[1, T, 1, H, W]` clip.
pub fn clip_from_indices(video: &Video, indices: &[usize]) -> Tensor {
    let s = video.frames.shape();
    let plane = s[2] * s[3];
    let mut data = Vec::with_capacity(indices.len() * plane);
    for &i in indices {
        data.extend_from_slice(&video.frames.data()[i * plane..(i + 1) * plane]);
    }
    Tensor::new(&[1, indices.len(), 1, s[2], s[3]], data).unwrap()
}

/// Deterministic clip of video `index` using midpoint sampling.
pub fn generate_clip(cfg: &SynthConfig, index: usize) -> Result<LabeledClip> {
    let video = generate_video(cfg, index);
    let idx = uniform_sample_frames(cfg.clip_len, cfg.frames)?;
    Ok(LabeledClip {
        clip: clip_from_indices(&video, &idx),
        label: video.label,
    })
}

/// `n` evenly offset clips of the same video.
pub fn generate_clips(cfg: &SynthConfig, index: usize, n: usize) -> Result<(Vec<Tensor>, usize)> {
    let video = generate_video(cfg, index);
    let clips = (0..n)
        .map(|i| offset_sample_frames(cfg.clip_len, cfg.frames, i, n).map(|idx| clip_from_indices(&video, &idx)))
        .collect::<Result<Vec<_>>>()?;
    Ok((clips, video.label))
}

/// Training clip of video `index` with frame jitter keyed by `(seed, epoch)`.
pub fn generate_jittered_clip(
    cfg: &SynthConfig,
    index: usize,
    seed: u64,
    epoch: usize,
) -> Result<LabeledClip> {
    let video = generate_video(cfg, index);
    let mut r = rng::stream_at(seed, "synth.jitter", &[epoch as u64, index as u64]);
    let idx = jittered_sample_frames(cfg.clip_len, cfg.frames, &mut r)?;
    Ok(LabeledClip {
        clip: clip_from_indices(&video, &idx),
        label: video.label,
    })
}

/// Thread pool for clip generation, capped by `CMR_THREADS` when set.
pub fn data_pool() -> rayon::ThreadPool {
    let threads = std::env::var("CMR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

/// Stacks clips of global indices `indices` into one batch. With
/// `jitter = Some((seed, epoch))` frames are jittered within their segments,
/// otherwise midpoints are used.
pub fn make_batch(
    cfg: &SynthConfig,
    indices: &[usize],
    jitter: Option<(u64, usize)>,
    pool: &rayon::ThreadPool,
) -> Result<(Tensor, Vec<usize>)> {
    let clips: Vec<LabeledClip> = pool.install(|| {
        indices
            .par_iter()
            .map(|&i| match jitter {
                Some((s, e)) => generate_jittered_clip(cfg, i, s, e),
                None => generate_clip(cfg, i),
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let labels = clips.iter().map(|c| c.label).collect();
    let tensors: Vec<Tensor> = clips.into_iter().map(|c| c.clip).collect();
    Ok((Tensor::concat0(&tensors)?, labels))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: SynthConfig,
    split: Split,
    count: usize,
    clip_shape: Vec<usize>,
    class_names: Vec<String>,
}

/// Writes the midpoint clips of `split` as `{split}_clips.cmrt`
/// (`[count, T, 1, H, W]`), the labels as `{split}_labels.cmrt` and a JSON
/// manifest `{split}_manifest.json`.
pub fn dump_split(cfg: &SynthConfig, split: Split, dir: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let n = cfg.len(split);
    if n == 0 {
        return Err(Error::Config(format!("{split:?} split is empty")));
    }
    let indices: Vec<usize> = (0..n).map(|i| cfg.index(split, i)).collect();
    let (clips, labels) = make_batch(cfg, &indices, None, &data_pool())?;
    let name = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    io::save(&dir.join(format!("{name}_clips.cmrt")), &clips)?;
    let lt = Tensor::new(&[n], labels.iter().map(|&l| l as f64).collect())?;
    io::save(&dir.join(format!("{name}_labels.cmrt")), &lt)?;
    let manifest = Manifest {
        config: cfg.clone(),
        split,
        count: n,
        clip_shape: clips.shape()[1..].to_vec(),
        class_names: cfg.class_names(),
    };
    fs::write(
        dir.join(format!("{name}_manifest.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Reads back what [`dump_split`] wrote: clips `[count, T, 1, H, W]` and labels.
pub fn load_split(dir: &Path, split: Split) -> Result<(SynthConfig, Tensor, Vec<usize>)> {
    let name = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}_manifest.json")))?)?;
    let clips = io::load(&dir.join(format!("{name}_clips.cmrt")))?;
    let labels = io::load(&dir.join(format!("{name}_labels.cmrt")))?;
    if clips.shape()[0] != manifest.count || labels.len() != manifest.count {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: "clip and label counts disagree with the manifest".into(),
        });
    }
    let labels = labels.data().iter().map(|&l| l as usize).collect();
    Ok((manifest.config, clips, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_folds_into_range() {
        assert_eq!(reflect(3.0, 10.0), 3.0);
        assert_eq!(reflect(12.0, 10.0), 8.0);
        assert_eq!(reflect(-2.0, 10.0), 2.0);
        assert_eq!(reflect(21.0, 10.0), 1.0);
    }

    #[test]
    fn square_coverage_sums_to_area() {
        let mut f = vec![0.0; 100];
        draw_square(&mut f, 10, (1.3, 2.6), 4.0, 1.0);
        assert!((f.iter().sum::<f64>() - 16.0).abs() < 1e-12);
    }
}

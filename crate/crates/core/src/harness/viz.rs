//! Channel-group and weighting-map heatmaps of the first block with spatial
//! enhancement.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::blocks::{load_checkpoint, network_forward_traced, Network};
use crate::error::{Error, Result};
use crate::synthdata::Video;
use crate::tensor::{BnMode, Tape, Tensor};

pub const GROUP_SIZE: usize = 10;
pub const FLAT_RANGE: f64 = 1e-12;
pub const MASK_DILATION: f64 = 2.0;

/// Per-frame maps `[H, W]` for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSet {
    /// Mean of the channels with the largest gates.
    pub top: Vec<Tensor>,
    /// Mean of the channels with the smallest gates.
    pub bottom: Vec<Tensor>,
    /// `1 - s` for every frame.
    pub sme: Vec<Tensor>,
    pub group: usize,
    pub warnings: Vec<String>,
}

/// Min-max scaling to `0..=255`; a range under [`FLAT_RANGE`] gives zeros.
pub fn normalize_u8(map: &[f64]) -> Vec<u8> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo >= FLAT_RANGE) {
        return vec![0; map.len()];
    }
    map.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Binary grayscale PGM.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = match map.shape() {
        &[h, w] => [h, w],
        s => return Err(Error::Contract(format!("heatmap must be [H, W], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(normalize_u8(map.data()));
    Ok(out)
}

/// Parses a PGM written by [`encode_pgm`], returning `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |r: &str| Error::Format {
        path: "<pgm>".into(),
        reason: r.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixels"))?;
    if pixels.len() != w * h {
        return Err(bad("pixel count does not match the header"));
    }
    Ok((w, h, pixels.to_vec()))
}

fn frame_map(spatial: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::new(&[h, w], spatial.to_vec()).unwrap()
}

/// Runs `clip` (`[1, T, C, H, W]`) through `net` in inference mode and builds
/// the maps from the first block that carries spatial enhancement. Gates come
/// from that block's own channel enhancement.
pub fn heatmaps(net: &mut Network, clip: &Tensor) -> Result<HeatmapSet> {
    let [n, t, _, _, _] = clip.clip_dims()?;
    if n != 1 {
        return Err(Error::Contract(format!("heatmaps take one clip, got a batch of {n}")));
    }
    net.set_mode(BnMode::Inference);
    let mut tape = Tape::new();
    let x = tape.constant(clip.clone());
    let vars = net.bind(&mut tape);
    let trace = network_forward_traced(&mut tape, x, net, &vars)?;
    let block = trace
        .first_block_b(net)
        .ok_or_else(|| Error::Config("network has no block with spatial enhancement".into()))?;
    let gates = block
        .gates
        .ok_or_else(|| Error::Config("the first spatially enhanced block has no channel gates".into()))?;
    let input = tape.value(block.input);
    let gates = tape.value(gates);
    let [_, _, c, h, w] = input.clip_dims()?;
    let mut warnings = Vec::new();
    let group = if c < GROUP_SIZE {
        let g = (c / 2).max(1);
        warnings.push(format!("only {c} channels; groups shrink to {g}"));
        g
    } else {
        GROUP_SIZE
    };
    let plane = h * w;
    let mut top = Vec::with_capacity(t);
    let mut bottom = Vec::with_capacity(t);
    for ti in 0..t {
        let a = &gates.data()[ti * c..(ti + 1) * c];
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
        let frame = &input.data()[ti * c * plane..(ti + 1) * c * plane];
        let mean_of = |chans: &[usize]| {
            let mut m = vec![0.0; plane];
            for &ch in chans {
                for (o, v) in m.iter_mut().zip(&frame[ch * plane..(ch + 1) * plane]) {
                    *o += v;
                }
            }
            m.iter_mut().for_each(|v| *v /= chans.len() as f64);
            frame_map(&m, h, w)
        };
        top.push(mean_of(&order[..group]));
        bottom.push(mean_of(&order[c - group..]));
    }
    let out_shape = tape.value(block.output).shape().to_vec();
    let (oh, ow) = (out_shape[3], out_shape[4]);
    let sme = match block.similarity {
        Some(s) => tape
            .value(s)
            .data()
            .chunks(oh * ow)
            .map(|f| frame_map(&f.iter().map(|s| 1.0 - s).collect::<Vec<_>>(), oh, ow))
            .collect(),
        None => (0..t).map(|_| Tensor::zeros(&[oh, ow])).collect(),
    };
    Ok(HeatmapSet {
        top,
        bottom,
        sme,
        group,
        warnings,
    })
}

/// Writes `{frame:02}_{top10|bot10|sme}.pgm` for every frame.
pub fn write_heatmaps(set: &HeatmapSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, ((top, bot), sme)) in set.top.iter().zip(&set.bottom).zip(&set.sme).enumerate() {
        for (tag, map) in [("top10", top), ("bot10", bot), ("sme", sme)] {
            let mut f = fs::File::create(dir.join(format!("{t:02}_{tag}.pgm")))?;
            f.write_all(&encode_pgm(map)?)?;
        }
    }
    if !set.warnings.is_empty() {
        fs::write(dir.join("warnings.txt"), set.warnings.join("\n") + "\n")?;
    }
    Ok(())
}

/// Loads a checkpoint, computes the maps for `clip` and writes them.
pub fn export_heatmaps(checkpoint: &Path, clip: &Tensor, out_dir: &Path) -> Result<HeatmapSet> {
    let mut net = load_checkpoint(checkpoint)?;
    let set = heatmaps(&mut net, clip)?;
    write_heatmaps(&set, out_dir)?;
    Ok(set)
}

/// Per sampled frame, the moving square at that frame and the next one
/// (the last frame pairs with its predecessor), dilated by
/// [`MASK_DILATION`] pixels. Masks are `size x size`, row-major.
pub fn motion_masks(video: &Video, indices: &[usize], side: f64, size: usize) -> Vec<Vec<bool>> {
    let t = indices.len();
    (0..t)
        .map(|ti| {
            let pair = if t == 1 {
                [indices[0], indices[0]]
            } else if ti + 1 < t {
                [indices[ti], indices[ti + 1]]
            } else {
                [indices[t - 2], indices[t - 1]]
            };
            let mut m = vec![false; size * size];
            for f in pair {
                let (x, y) = video.positions[f];
                let (x0, x1) = (x - MASK_DILATION, x + side + MASK_DILATION);
                let (y0, y1) = (y - MASK_DILATION, y + side + MASK_DILATION);
                for r in 0..size {
                    for c in 0..size {
                        let (rf, cf) = (r as f64, c as f64);
                        if rf + 1.0 > y0 && rf < y1 && cf + 1.0 > x0 && cf < x1 {
                            m[r * size + c] = true;
                        }
                    }
                }
            }
            m
        })
        .collect()
}

/// Fraction of the total (raw, unnormalised) mass across frames that falls
/// inside the masks.
pub fn mass_fraction(maps: &[Tensor], masks: &[Vec<bool>]) -> Result<f64> {
    let (mut inside, mut total) = (0.0, 0.0);
    for (m, mask) in maps.iter().zip(masks) {
        if m.len() != mask.len() {
            return Err(Error::dim("mass_fraction", m.shape(), &[mask.len()]));
        }
        for (&v, &k) in m.data().iter().zip(mask) {
            let v = v.abs();
            total += v;
            if k {
                inside += v;
            }
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MaskFractions {
    pub sme: f64,
    pub top: f64,
    pub bottom: f64,
}

pub fn mask_fractions(set: &HeatmapSet, masks: &[Vec<bool>]) -> Result<MaskFractions> {
    Ok(MaskFractions {
        sme: mass_fraction(&set.sme, masks)?,
        top: mass_fraction(&set.top, masks)?,
        bottom: mass_fraction(&set.bottom, masks)?,
    })
}

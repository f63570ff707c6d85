use cmr::synthdata::{
    clip_from_indices, data_pool, dump_split, generate_clip, generate_clips, generate_jittered_clip, generate_video,
    jittered_sample_frames, load_split, make_batch, offset_sample_frames, segment_bounds, uniform_sample_frames, Split,
    SynthConfig,
};
use cmr::tensor::rng;
use cmr::Error;

fn clean() -> SynthConfig {
    SynthConfig {
        noise_std: 0.0,
        distractors_max: 0,
        ..SynthConfig::default()
    }
}

fn frame(video: &cmr::synthdata::Video, f: usize) -> &[f64] {
    let s = video.frames.shape();
    let plane = s[2] * s[3];
    &video.frames.data()[f * plane..(f + 1) * plane]
}

#[test]
fn clips_have_the_expected_shape_and_range() {
    let cfg = SynthConfig::default();
    for i in 0..20 {
        let c = generate_clip(&cfg, i).unwrap();
        assert_eq!(c.clip.shape(), &[1, 8, 1, 32, 32]);
        assert!(c.label < cfg.classes);
        assert!(c.clip.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn frame_differences_live_on_the_square_edges() {
    let cfg = clean();
    let side = cfg.square_size as f64;
    let size = cfg.image_size;
    for idx in 0..16 {
        let v = generate_video(&cfg, idx);
        let mut energy = 0.0;
        for f in 0..cfg.clip_len - 1 {
            let (a, b) = (frame(&v, f), frame(&v, f + 1));
            let (p, q) = (v.positions[f], v.positions[f + 1]);
            for r in 0..size {
                for c in 0..size {
                    let d = (a[r * size + c] - b[r * size + c]).abs();
                    energy += d;
                    let (x, y) = (c as f64, r as f64);
                    let inside = |(px, py): (f64, f64)| {
                        x >= px.ceil() && x + 1.0 <= (px + side).floor() && y >= py.ceil() && y + 1.0 <= (py + side).floor()
                    };
                    let touches = |(px, py): (f64, f64)| {
                        x + 1.0 > px && x < px + side && y + 1.0 > py && y < py + side
                    };
                    if (inside(p) && inside(q)) || (!touches(p) && !touches(q)) {
                        assert!(d < 1e-12, "video {idx} frame {f} pixel ({r},{c}): {d}");
                    }
                }
            }
        }
        assert!(energy > 0.0);
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = SynthConfig::default();
    for i in [0, 7, 300, 700] {
        let a = generate_clip(&cfg, i).unwrap();
        let b = generate_clip(&cfg, i).unwrap();
        assert_eq!(a.clip.data(), b.clip.data());
        assert_eq!(a.label, b.label);
    }
    let other = SynthConfig {
        seed: 1,
        ..SynthConfig::default()
    };
    assert_ne!(generate_clip(&cfg, 3).unwrap().clip, generate_clip(&other, 3).unwrap().clip);
}

fn centroid(data: &[f64], size: usize) -> (f64, f64) {
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, &v) in data.iter().enumerate() {
        m += v;
        sx += v * (i % size) as f64;
        sy += v * (i / size) as f64;
    }
    (sx / m, sy / m)
}

#[test]
fn mean_displacement_follows_the_class_direction() {
    let cfg = clean();
    let size = cfg.image_size;
    let plane = size * size;
    for k in 0..cfg.classes {
        let (mut dx, mut dy) = (0.0, 0.0);
        for j in 0..100 {
            let c = generate_clip(&cfg, k + cfg.classes * j).unwrap().clip;
            let d = c.data();
            let a = centroid(&d[..plane], size);
            let b = centroid(&d[(cfg.frames - 1) * plane..], size);
            dx += b.0 - a.0;
            dy += b.1 - a.1;
        }
        let (ex, ey) = cfg.direction(k);
        let cos = (dx * ex + dy * ey) / (dx.hypot(dy) * ex.hypot(ey));
        let angle = cos.clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 15.0, "class {k}: {angle} degrees off");
    }
}

#[test]
fn midpoint_sampling() {
    assert_eq!(uniform_sample_frames(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
    assert_eq!(uniform_sample_frames(32, 8).unwrap(), vec![2, 6, 10, 14, 18, 22, 26, 30]);
    assert_eq!(uniform_sample_frames(32, 1).unwrap(), vec![16]);
    assert_eq!(offset_sample_frames(32, 8, 0, 1).unwrap(), uniform_sample_frames(32, 8).unwrap());
    assert!(matches!(uniform_sample_frames(8, 9), Err(Error::Contract(_))));
    assert!(matches!(uniform_sample_frames(8, 0), Err(Error::Contract(_))));
    assert!(offset_sample_frames(32, 8, 2, 2).is_err());
}

#[test]
fn offset_clips_stay_inside_their_segments() {
    for (l, t, n) in [(32, 8, 2), (32, 8, 4), (30, 7, 3)] {
        for clip in 0..n {
            let idx = offset_sample_frames(l, t, clip, n).unwrap();
            for (k, &i) in idx.iter().enumerate() {
                let (lo, hi) = segment_bounds(l, t, k);
                assert!(lo <= i && i <= hi, "{l} {t} clip {clip}: {i} not in [{lo}, {hi}]");
            }
        }
    }
}

#[test]
fn jittered_indices_stay_inside_their_segments() {
    for (l, t) in [(32, 8), (32, 16), (30, 7), (8, 8)] {
        let seg = l as f64 / t as f64;
        for seed in 0..1000 {
            let idx = jittered_sample_frames(l, t, &mut rng::stream(seed, "jitter")).unwrap();
            assert_eq!(idx.len(), t);
            for (k, &i) in idx.iter().enumerate() {
                let i = i as f64;
                assert!(i >= seg * k as f64 && i < seg * (k + 1) as f64, "{l} {t} seed {seed}: {idx:?}");
            }
        }
    }
    assert!(jittered_sample_frames(4, 5, &mut rng::stream(0, "j")).is_err());
}

#[test]
fn jitter_depends_only_on_seed_epoch_and_index() {
    let cfg = SynthConfig::default();
    let a = generate_jittered_clip(&cfg, 5, 1, 2).unwrap();
    let b = generate_jittered_clip(&cfg, 5, 1, 2).unwrap();
    assert_eq!(a, b);
    let epochs: Vec<_> = (0..6).map(|e| generate_jittered_clip(&cfg, 5, 1, e).unwrap().clip).collect();
    assert!(epochs.iter().any(|c| *c != epochs[0]));
}

#[test]
fn labels_are_balanced_over_an_epoch() {
    for (classes, n) in [(8, 512), (8, 100), (5, 77)] {
        let cfg = SynthConfig {
            classes,
            train_size: n,
            ..SynthConfig::default()
        };
        let mut counts = vec![0usize; classes];
        for i in 0..n {
            counts[generate_video(&cfg, cfg.index(Split::Train, i)).label] += 1;
        }
        let expect = n as f64 / classes as f64;
        assert!(counts.iter().all(|&c| (c as f64 - expect).abs() <= 1.0), "{counts:?}");
    }
}

#[test]
fn distractors_are_static_without_noise() {
    let cfg = SynthConfig {
        noise_std: 0.0,
        distractors_max: 3,
        ..SynthConfig::default()
    };
    let size = cfg.image_size;
    let side = cfg.square_size as f64;
    let mut checked = 0;
    for idx in 0..40 {
        let v = generate_video(&cfg, idx);
        for &(dx, dy) in &v.distractors {
            for r in dy.floor() as usize..((dy + side).ceil() as usize).min(size) {
                for c in dx.floor() as usize..((dx + side).ceil() as usize).min(size) {
                    let (x, y) = (c as f64, r as f64);
                    let crossed = v
                        .positions
                        .iter()
                        .any(|&(px, py)| x + 1.0 > px && x < px + side && y + 1.0 > py && y < py + side);
                    if crossed {
                        continue;
                    }
                    let series: Vec<f64> = (0..cfg.clip_len).map(|f| frame(&v, f)[r * size + c]).collect();
                    assert!(series.iter().all(|&s| s == series[0]));
                    assert!(series[0] > 0.0);
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn splits_are_disjoint() {
    let cfg = SynthConfig {
        train_size: 40,
        val_size: 20,
        ..SynthConfig::default()
    };
    let train: Vec<usize> = (0..40).map(|i| cfg.index(Split::Train, i)).collect();
    let val: Vec<usize> = (0..20).map(|i| cfg.index(Split::Val, i)).collect();
    assert!(val.iter().all(|i| !train.contains(i)));
    let first_val = generate_clip(&cfg, val[0]).unwrap().clip;
    assert!(train.iter().all(|&i| generate_clip(&cfg, i).unwrap().clip != first_val));
}

#[test]
fn batches_match_single_clips_at_any_pool_size() {
    let cfg = SynthConfig::default();
    let indices = [4, 1, 9, 2];
    let (batch, labels) = make_batch(&cfg, &indices, None, &data_pool()).unwrap();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (again, _) = make_batch(&cfg, &indices, None, &one).unwrap();
    assert_eq!(batch, again);
    for (row, &i) in indices.iter().enumerate() {
        let c = generate_clip(&cfg, i).unwrap();
        assert_eq!(batch.select0(row).unwrap().data(), c.clip.data());
        assert_eq!(labels[row], c.label);
    }
}

#[test]
fn multi_clip_sampling_shares_the_video() {
    let cfg = SynthConfig::default();
    let (clips, label) = generate_clips(&cfg, 11, 3).unwrap();
    assert_eq!(clips.len(), 3);
    assert_eq!(label, generate_clip(&cfg, 11).unwrap().label);
    let v = generate_video(&cfg, 11);
    assert_eq!(clips[1], clip_from_indices(&v, &offset_sample_frames(32, 8, 1, 3).unwrap()));
}

#[test]
fn dumped_split_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        train_size: 12,
        val_size: 6,
        seed: 4,
        ..SynthConfig::default()
    };
    dump_split(&cfg, Split::Val, dir.path()).unwrap();
    let (back, clips, labels) = load_split(dir.path(), Split::Val).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(clips.shape(), &[6, 8, 1, 32, 32]);
    for i in 0..6 {
        let c = generate_clip(&cfg, cfg.index(Split::Val, i)).unwrap();
        assert_eq!(clips.select0(i).unwrap().data(), c.clip.data());
        assert_eq!(labels[i], c.label);
    }
    let manifest = std::fs::read_to_string(dir.path().join("val_manifest.json")).unwrap();
    assert!(manifest.contains("down-right"));
    assert!(load_split(dir.path(), Split::Train).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        SynthConfig {
            frames: 40,
            ..SynthConfig::default()
        },
        SynthConfig {
            square_size: 32,
            ..SynthConfig::default()
        },
        SynthConfig {
            speed_min: 2.0,
            speed_max: 1.0,
            ..SynthConfig::default()
        },
        SynthConfig {
            classes: 0,
            ..SynthConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

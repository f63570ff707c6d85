use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmr::blocks::{estimate_macs, load_checkpoint};
use cmr::harness::{
    ablation, bench, eval, selftest, train, viz, BenchConfig, RunConfig, Variant, CHECKPOINT_FILE,
};
use cmr::synthdata::{self, Split};
use cmr::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "cmr", version, about = "Motion-enhanced 2D-CNN video classifier on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// baseline, +CME, +SME or +CME&SME.
    #[arg(long)]
    variant: Option<Variant>,
    /// Frames per clip.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch and write metrics.csv, config.json and a checkpoint.
    Train(Common),
    /// Score the validation split with a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Clips averaged per video.
        #[arg(long, default_value_t = 1)]
        clips: usize,
        /// Defaults to the checkpoint inside --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every variant over several seeds, or sweep the reduction ratio.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Reduction ratios to sweep instead of the variant matrix.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<usize>>,
    },
    /// Time modules and the whole network.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = bench::MIN_REPETITIONS)]
        reps: usize,
    },
    /// Write heatmaps for one validation clip.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Position within the validation split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Invariant, gradient, oracle and wiring checks.
    Selftest,
}

/// Config from `--config`, else the one saved in `--out`, else defaults,
/// with flag overrides applied.
fn resolve(c: &Common, use_saved: bool) -> cmr::Result<RunConfig> {
    let saved = c.out.join("config.json");
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None if use_saved && saved.exists() => RunConfig::load(&saved)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(v) = c.variant {
        cfg.train.variant = v;
    }
    if let Some(t) = c.frames {
        cfg.set_frames(t);
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> cmr::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> cmr::Result<bool> {
    match cli.command {
        Command::Train(c) => {
            let cfg = resolve(&c, false)?;
            let out = train::train_with(&cfg, Some(&c.out), |e| {
                eprintln!(
                    "epoch {:>3}  lr {:.0e}  train loss {:.4} top1 {:.3}  val loss {:.4} top1 {:.3}  {:.1}s",
                    e.epoch, e.lr, e.train.loss, e.train.top1, e.val.loss, e.val.top1, e.seconds
                )
            })?;
            print!("{}", out.metrics.to_csv());
        }
        Command::Eval {
            common,
            clips,
            checkpoint,
        } => {
            let cfg = resolve(&common, true)?;
            let ckpt = checkpoint.unwrap_or_else(|| common.out.join(CHECKPOINT_FILE));
            let m = eval::evaluate_checkpoint(&ckpt, &cfg.data, clips)?;
            let csv = eval::eval_csv(clips, &m);
            write(&common.out.join(format!("eval_clips{clips}.csv")), &csv)?;
            print!("{csv}");
        }
        Command::Ablate {
            common,
            seeds,
            ratios,
        } => {
            let cfg = resolve(&common, false)?;
            if let Some(r) = ratios {
                let rows = ablation::run_ratio_sweep(&cfg, &r, &seeds, |r, s, e| {
                    eprintln!("r={r} seed {s} epoch {} val top1 {:.3}", e.epoch, e.val.top1)
                })?;
                let csv = ablation::sweep_csv(&rows);
                write(&common.out.join("sweep.csv"), &csv)?;
                print!("{csv}");
            } else {
                let variants = match common.variant {
                    Some(v) => vec![v],
                    None => Variant::ABLATION.to_vec(),
                };
                let table = ablation::run_ablation(&cfg, &variants, &seeds, |v, s, e| {
                    eprintln!("{v} seed {s} epoch {} val top1 {:.3}", e.epoch, e.val.top1)
                })?;
                let csv = table.to_csv();
                write(&common.out.join("ablation.csv"), &csv)?;
                print!("{csv}");
            }
        }
        Command::Bench { common, reps } => {
            let cfg = resolve(&common, false)?;
            let mut bc = BenchConfig {
                network: cfg.network_config(),
                repetitions: reps,
                seed: cfg.train.seed,
                ..BenchConfig::default()
            };
            if let Some(t) = common.frames {
                bc.frames = vec![t];
            }
            let report = bench::benchmark(&bc)?;
            write(&common.out.join("bench.csv"), &report.to_csv())?;
            write(&common.out.join("bench.json"), &serde_json::to_string_pretty(&report)?)?;
            let macs = estimate_macs(&bc.network)?;
            eprintln!("network MACs per clip at T={}: {}", bc.network.frames, macs.total());
            print!("{}", report.to_csv());
        }
        Command::Viz {
            common,
            checkpoint,
            index,
        } => {
            let cfg = resolve(&common, true)?;
            let ckpt = checkpoint.unwrap_or_else(|| common.out.join(CHECKPOINT_FILE));
            let mut net = load_checkpoint(&ckpt)?;
            let data = &cfg.data;
            if index >= data.val_size {
                return Err(Error::Config(format!(
                    "index {index} is outside the validation split of {}",
                    data.val_size
                )));
            }
            let video = synthdata::generate_video(data, data.index(Split::Val, index));
            let frames = synthdata::uniform_sample_frames(data.clip_len, data.frames)?;
            let clip = synthdata::clip_from_indices(&video, &frames);
            let set = viz::heatmaps(&mut net, &clip)?;
            let dir = common.out.join("heatmaps");
            viz::write_heatmaps(&set, &dir)?;
            for w in &set.warnings {
                eprintln!("warning: {w}");
            }
            let masks = viz::motion_masks(&video, &frames, data.square_size as f64, data.image_size);
            let f = viz::mask_fractions(&set, &masks)?;
            println!("label {}  frames {}  written to {}", video.label, frames.len(), dir.display());
            println!("mass inside motion mask: sme {:.3}  top {:.3}  bottom {:.3}", f.sme, f.top, f.bottom);
        }
        Command::Selftest => {
            let checks = selftest::run_selftest();
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ (Error::Config(_) | Error::Json(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

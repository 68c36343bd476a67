mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dyngs::frames::{FrameSet, Image};
use dyngs::gradsuite::run_suite;
use dyngs::io::{
    checkpoint_precision, load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_loss_csv, write_metrics_csv,
    write_png, write_raw_image, write_table_csv,
};
use dyngs::render::{Camera, RenderedImage};
use dyngs::synth::generate;
use dyngs::trainer::{ablate, evaluate, inference_render, motion_heatmap, train_until, Sampling, TrainConfig, TrainState};
use dyngs::Scalar;

use config::FileConfig;

/// Deformable Gaussian reconstruction on synthetic dynamic scenes.
#[derive(Debug, Parser)]
#[command(name = "dyngs", version)]
struct Cli {
    /// Overrides the seed of the scene, training run or ablation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point width for training and ablation.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// TOML file with optional [scene], [train] and [ablation] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    Single,
    #[value(name = "64")]
    Double,
}

impl Precision {
    fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::Single),
            64 => Ok(Precision::Double),
            other => bail!("unsupported checkpoint precision {other}"),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        cameras: Option<usize>,
        /// Square image side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train on a dataset and write a checkpoint plus a loss CSV.
    Train(TrainArgs),
    /// Render the plain branch at a timestamp.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Normalized timestamp in [0, 1].
        #[arg(long)]
        time: f64,
        #[command(flatten)]
        view: ViewArgs,
        #[command(flatten)]
        output: ImageOut,
    },
    /// Per-frame PSNR and SSIM against a dataset, written as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
    },
    /// Finite-difference check of every differentiable module.
    Gradcheck {
        /// Print every individual check.
        #[arg(long)]
        verbose: bool,
    },
    /// Render per-Gaussian displacement magnitude as a heatmap.
    MotionVis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        time: f64,
        #[command(flatten)]
        view: ViewArgs,
        #[command(flatten)]
        output: ImageOut,
    },
    /// Train every configuration of the [ablation] grid and tabulate
    /// held-out metrics.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss history path; defaults to the checkpoint path with a .csv
    /// extension.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Continue from a checkpoint with its own configuration.
    #[arg(long, conflicts_with_all = ["iterations", "batch", "sampling", "baseline", "unshared"])]
    resume: Option<PathBuf>,
    /// Length of the run; also sets the learning-rate schedule.
    #[arg(long)]
    iterations: Option<usize>,
    /// Stop early at this step, e.g. to checkpoint mid-run.
    #[arg(long)]
    stop_at: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    sampling: Option<Sampling>,
    /// Single-stream training without the encoder.
    #[arg(long)]
    baseline: bool,
    /// Separate deformation fields for the two branches.
    #[arg(long)]
    unshared: bool,
}

#[derive(Debug, Args)]
struct ViewArgs {
    /// Dataset whose cameras are used.
    #[arg(long, required_unless_present = "camera_file")]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    camera: usize,
    /// Camera as JSON instead of a dataset camera.
    #[arg(long, conflicts_with = "data")]
    camera_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ImageOut {
    /// 8-bit PNG output.
    #[arg(long)]
    out: PathBuf,
    /// Optional exact float output.
    #[arg(long)]
    raw: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    All,
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Calls `$f::<f32>` or `$f::<f64>`.
macro_rules! dispatch {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::Single => $f::<f32>($($arg),*),
            Precision::Double => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let precision = cli.precision.unwrap_or(Precision::Double);
    match cli.command {
        Command::Gen { out, frames, cameras, size } => {
            let mut spec = file.scene;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            spec.frames = frames.unwrap_or(spec.frames);
            spec.cameras = cameras.unwrap_or(spec.cameras);
            if let Some(s) = size {
                spec.width = s;
                spec.height = s;
            }
            let set = generate(&spec)?;
            save_dataset(&set, &out)?;
            println!("wrote {} frames x {} cameras to {}", set.frames(), set.cameras.len(), out.display());
            Ok(())
        }
        Command::Train(args) => {
            let precision = match (&args.resume, cli.precision) {
                (Some(ckpt), requested) => {
                    let stored = Precision::from_bits(checkpoint_precision(ckpt)?)?;
                    if requested.is_some_and(|r| r != stored) {
                        bail!("--precision does not match the checkpoint being resumed");
                    }
                    stored
                }
                (None, _) => precision,
            };
            let mut cfg = file.train;
            if args.baseline {
                cfg.encoder_enabled = false;
            }
            if args.unshared {
                cfg.shared_weights = false;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.iterations = args.iterations.unwrap_or(cfg.iterations);
            cfg.batch = args.batch.unwrap_or(cfg.batch);
            cfg.sampling = args.sampling.unwrap_or(cfg.sampling);
            dispatch!(precision, train_cmd(&args, cfg))
        }
        Command::Render { checkpoint, time, view, output } => {
            let p = Precision::from_bits(checkpoint_precision(&checkpoint)?)?;
            dispatch!(p, image_cmd(&checkpoint, time, &view, &output, false))
        }
        Command::MotionVis { checkpoint, time, view, output } => {
            let p = Precision::from_bits(checkpoint_precision(&checkpoint)?)?;
            dispatch!(p, image_cmd(&checkpoint, time, &view, &output, true))
        }
        Command::Eval { checkpoint, data, out, split } => {
            let p = Precision::from_bits(checkpoint_precision(&checkpoint)?)?;
            dispatch!(p, eval_cmd(&checkpoint, &data, &out, split))
        }
        Command::Gradcheck { verbose } => gradcheck_cmd(cli.seed.unwrap_or(0), verbose),
        Command::Ablate { data, out, iterations } => {
            let mut base = file.train;
            base.iterations = iterations.unwrap_or(base.iterations);
            let mut grid = file.ablation;
            if let Some(s) = cli.seed {
                grid.seeds = vec![s];
            }
            let set = load_dataset(&data)?;
            let rows = dispatch!(precision, ablate(&set, &base, &grid))?;
            for r in &rows {
                println!(
                    "encoder={} batch={} layers={} sampling={:?} shared={} seed={}: PSNR {:.3} dB, SSIM {:.4}",
                    r.encoder, r.batch, r.layers, r.sampling, r.shared_weights, r.seed, r.psnr, r.ssim
                );
            }
            write_table_csv(&rows, &out)?;
            Ok(())
        }
    }
}

fn train_cmd<T: Scalar>(args: &TrainArgs, cfg: TrainConfig) -> Result<()> {
    let set = load_dataset(&args.data)?;
    let mut state: TrainState<T> = match &args.resume {
        Some(ckpt) => load_checkpoint(ckpt)?,
        None => TrainState::new(&set, cfg)?,
    };
    let until = args.stop_at.unwrap_or(state.config.iterations);
    if until < state.step {
        bail!("checkpoint is already at step {}, past --stop-at {until}", state.step);
    }
    train_until(&mut state, &set, until)?;
    save_checkpoint(&state, &args.out)?;
    let csv = args.loss_csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    write_loss_csv(&state.history, &csv)?;
    if let Some(last) = state.history.last() {
        println!("step {}: L_c {:.6}, L_t {:.6}", state.step, last.l_c, last.l_t);
    }
    println!("checkpoint {}, loss history {}", args.out.display(), csv.display());
    Ok(())
}

fn camera(view: &ViewArgs) -> Result<Camera> {
    if let Some(path) = &view.camera_file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading camera {}", path.display()))?;
        let cam: Camera = serde_json::from_str(&text).with_context(|| format!("parsing camera {}", path.display()))?;
        cam.validate()?;
        return Ok(cam);
    }
    let data = view.data.as_ref().expect("clap requires --data without --camera-file");
    let set: FrameSet = load_dataset(data)?;
    set.cameras
        .get(view.camera)
        .cloned()
        .with_context(|| format!("camera {} out of range, dataset has {}", view.camera, set.cameras.len()))
}

fn write_image<T: Scalar>(img: &RenderedImage<T>, out: &ImageOut) -> Result<()> {
    let img = Image::from_rendered(img);
    write_png(&img, &out.out)?;
    if let Some(raw) = &out.raw {
        write_raw_image(&img, raw)?;
    }
    Ok(())
}

fn image_cmd<T: Scalar>(checkpoint: &Path, time: f64, view: &ViewArgs, out: &ImageOut, motion: bool) -> Result<()> {
    let state: TrainState<T> = load_checkpoint(checkpoint)?;
    let cam = camera(view)?;
    let img = if motion {
        motion_heatmap(&state, time, &cam)?
    } else {
        inference_render(&state, time, &cam)?
    };
    write_image(&img, out)?;
    println!("wrote {}", out.out.display());
    Ok(())
}

fn eval_cmd<T: Scalar>(checkpoint: &Path, data: &Path, out: &Path, split: Split) -> Result<()> {
    let state: TrainState<T> = load_checkpoint(checkpoint)?;
    let set = load_dataset(data)?;
    let frames = match split {
        Split::All => (0..set.frames()).collect(),
        Split::Train => state.config.train_frames(set.frames()),
        Split::Test => state.config.test_frames(set.frames()),
    };
    let report = evaluate(&state, &set, &frames)?;
    write_metrics_csv(&report, out)?;
    println!("{} frames: mean PSNR {:.3} dB, mean SSIM {:.4}", frames.len(), report.mean_psnr(), report.mean_ssim());
    Ok(())
}

fn gradcheck_cmd(seed: u64, verbose: bool) -> Result<()> {
    let report = run_suite(seed)?;
    if verbose {
        for c in &report.checks {
            println!("  {} / {}: {:.3e}", c.module, c.check, c.max_rel_err);
        }
    }
    for (module, err, tol) in report.by_module() {
        let verdict = if err <= tol { "ok" } else { "FAIL" };
        println!("{module:<18} max rel err {err:.3e} (tol {tol:.0e}) {verdict}");
    }
    println!("{} checks in {:.1} s", report.checks.len(), report.elapsed.as_secs_f64());
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dynsplat::config::{FrameRange, RunConfig};
use dynsplat::dataset::{generate_synthetic_sequence, SceneSpec};
use dynsplat::pipeline::{render_views, run_eval, run_slam, EvalRequest};
use dynsplat::{Error, Result};

#[derive(Parser)]
#[command(name = "dynsplat", version, about = "RGB-D Gaussian-splat SLAM with dynamic-object filtering")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track and map a sequence, writing a run directory.
    Run(RunArgs),
    /// Compute ATE and masked image metrics.
    Eval(EvalArgs),
    /// Generate a synthetic sequence in the TUM layout.
    Synth(SynthArgs),
    /// Render a saved map at the poses of a trajectory file.
    Render(RenderArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory of segmentation masks, white = static.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    est_depth: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// TOML file mirroring the run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frame index range `A..B`.
    #[arg(long)]
    frames: Option<FrameRange>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_robust_mask: bool,
    #[arg(long)]
    no_loop_aware: bool,
    /// Write per-keyframe robust masks (255 = outlier) for every backend round.
    #[arg(long)]
    debug_masks: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    downsample: Option<usize>,
    /// ATE over all frames instead of keyframes.
    #[arg(long)]
    ate_all_frames: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Re-evaluate a run directory with its own configuration.
    #[arg(long, conflicts_with = "estimated")]
    run: Option<PathBuf>,
    /// Estimated trajectory, TUM format.
    #[arg(long, required_unless_present = "run")]
    estimated: Option<PathBuf>,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Rendered images named like the dataset's RGB files.
    #[arg(long)]
    renders: Option<PathBuf>,
    /// Dataset providing reference images (and ground truth when not given).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    downsample: usize,
    /// Timestamp association tolerance, seconds.
    #[arg(long, default_value_t = 0.02)]
    tolerance: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    OutAndBack,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description in TOML.
    #[arg(long, conflicts_with = "preset")]
    scene: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the number of frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Leave every distractor out of the segmentation masks.
    #[arg(long)]
    unmasked: bool,
    /// Print the scene TOML and exit.
    #[arg(long)]
    print_scene: bool,
    #[arg(long, required_unless_present = "print_scene")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    map: PathBuf,
    /// Poses to render, TUM format.
    #[arg(long)]
    poses: PathBuf,
    /// Intrinsics file (`camera.toml`).
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

fn run(args: RunArgs, verbosity: u8) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.dataset = args.dataset.or(cfg.dataset);
    cfg.masks = args.masks.or(cfg.masks);
    cfg.est_depth = args.est_depth.or(cfg.est_depth);
    cfg.output = args.output.or(cfg.output);
    cfg.frames = args.frames.or(cfg.frames);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.threads = args.threads.unwrap_or(cfg.threads);
    cfg.downsample = args.downsample.unwrap_or(cfg.downsample);
    cfg.verbosity = cfg.verbosity.max(verbosity);
    cfg.no_robust_mask |= args.no_robust_mask;
    cfg.no_loop_aware |= args.no_loop_aware;
    cfg.debug_masks |= args.debug_masks;
    cfg.ate_all_frames |= args.ate_all_frames;
    if cfg.dataset.is_none() {
        return Err(Error::Config("--dataset is required".into()));
    }
    let (out, metrics) = run_slam(&cfg)?;
    let diverged = out.diverged_frames();
    if !diverged.is_empty() {
        log::warn!("tracking diverged on {} frames: {diverged:?}", diverged.len());
    }
    match metrics.and_then(|m| m.trajectory) {
        Some(t) => println!(
            "{} frames, {} keyframes, ATE RMSE {:.3} cm (STD {:.3} cm)",
            out.trajectory.len(),
            out.keyframe_trajectory.len(),
            t.ate_rmse_cm,
            t.ate_std_cm
        ),
        None => println!("{} frames, {} keyframes", out.trajectory.len(), out.keyframe_trajectory.len()),
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let req = match args.run {
        Some(dir) => EvalRequest::for_run_dir(&dir)?,
        None => EvalRequest {
            ground_truth: args.ground_truth,
            renders: args.renders,
            dataset: args.dataset,
            masks: args.masks,
            downsample: args.downsample,
            tolerance: args.tolerance,
            ..EvalRequest::new(args.estimated.expect("clap enforces --estimated"))
        },
    };
    let json = run_eval(&req)?.to_json();
    match args.output {
        Some(p) => std::fs::write(&p, json).map_err(|e| Error::Io { path: p, source: e }),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = match (&args.scene, args.preset) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            SceneSpec::from_toml(&text)?
        }
        (None, Preset::Desk) => SceneSpec::desk(),
        (None, Preset::OutAndBack) => SceneSpec::out_and_back(),
    };
    if let Some(n) = args.frames {
        spec.frames = n;
    }
    if args.unmasked {
        spec.distractors.iter_mut().for_each(|d| d.masked = false);
    }
    if args.print_scene {
        print!("{}", spec.to_toml());
        return Ok(());
    }
    let out = args.output.expect("clap enforces --output");
    let seq = generate_synthetic_sequence(&spec, args.seed)?;
    seq.write_to_dir(&out)?;
    println!("{} frames, path length {:.3} m -> {}", seq.frames.len(), seq.path_length(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run(a) => run(a, cli.verbose),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Render(a) => render_views(&a.map, &a.poses, &a.camera, &a.output).map(|n| println!("rendered {n} views")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}

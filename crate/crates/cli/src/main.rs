//! `nerfaug`: synthetic sets, radiance field training, augmentation and the
//! probe comparison, one subcommand per stage. All artifacts of a run live
//! in one workspace directory.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nerfaug::augment::{AppearanceStrategy, BackgroundPolicy, StrategyKind};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "nerfaug", version, about = "NeRF-based augmentation of posed image sets")]
struct Cli {
    /// TOML run configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Workspace directory; created if absent, its parent must exist.
    #[arg(long, short = 'w', global = true)]
    workspace: Option<PathBuf>,

    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the source and the two shifted-lighting target sets.
    SynthGen(SynthArgs),
    /// Train the radiance field on the source set.
    NerfTrain(TrainArgs),
    /// Render one image from the trained field.
    NerfRender(RenderArgs),
    /// Generate the augmented set and the merged training set.
    Augment(AugmentArgs),
    /// Compare probes trained with and without the augmented set.
    ProbeAb(ProbeArgs),
    /// Consolidated tables and image grids for the workspace.
    Report,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n_source: Option<usize>,
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long)]
    dist_min: Option<f64>,
    #[arg(long)]
    dist_max: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    rays_per_batch: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Continue from the workspace's saved training state.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Use the pose of this source-set record.
    #[arg(long, conflicts_with = "pose")]
    pub pose_index: Option<usize>,
    /// Explicit pose `w,x,y,z,tx,ty,tz` (target to camera).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub pose: Option<Vec<f64>>,
    /// Appearance embeddings `i,j`.
    #[arg(long, value_delimiter = ',')]
    pub embeddings: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub alpha: f64,
    /// Render through texture-randomized color weights with this seed.
    #[arg(long)]
    pub texture_seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    n_nerf: Option<usize>,
    /// random-pick, interpolation or extrapolation.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    alpha_min: Option<f64>,
    #[arg(long)]
    alpha_max: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// Only render the appearance-only image per pose.
    #[arg(long)]
    no_texture: bool,
    /// constant, procedural or half-procedural.
    #[arg(long)]
    background: Option<String>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(ws) = &cli.workspace {
        cfg.workspace = Some(ws.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::SynthGen(a) => {
            set(&mut cfg.synth.n_source, a.n_source);
            set(&mut cfg.synth.n_target, a.n_target);
            set(&mut cfg.synth.distance_range[0], a.dist_min);
            set(&mut cfg.synth.distance_range[1], a.dist_max);
        }
        Command::NerfTrain(a) => {
            set(&mut cfg.train.iterations, a.iterations);
            set(&mut cfg.train.val_fraction, a.val_fraction);
            set(&mut cfg.train.rays_per_batch, a.rays_per_batch);
            set(&mut cfg.train.eval_every, a.eval_every);
        }
        Command::Augment(a) => {
            let aug = &mut cfg.augment;
            set(&mut aug.n_nerf, a.n_nerf);
            if let Some(s) = &a.strategy {
                let kind = StrategyKind::parse(s)
                    .ok_or_else(|| CliError::Config(format!("unknown strategy `{s}`")))?;
                aug.strategy = match kind {
                    StrategyKind::RandomPick => AppearanceStrategy::random_pick(),
                    StrategyKind::Interpolation => {
                        AppearanceStrategy::interpolation()
                    }
                    StrategyKind::Extrapolation => {
                        let [lo, hi] = if aug.strategy.variant == kind {
                            aug.strategy.alpha_range
                        } else {
                            [-4.0, 4.0]
                        };
                        AppearanceStrategy::extrapolation(lo, hi)
                    }
                };
            }
            set(&mut aug.strategy.alpha_range[0], a.alpha_min);
            set(&mut aug.strategy.alpha_range[1], a.alpha_max);
            set(&mut aug.texture_noise_std, a.noise_std);
            if a.no_texture {
                aug.two_images_per_pose = false;
            }
            if let Some(b) = &a.background {
                aug.background = BackgroundPolicy::parse(b)
                    .ok_or_else(|| CliError::Config(format!("unknown background policy `{b}`")))?;
            }
        }
        Command::ProbeAb(a) => {
            set(&mut cfg.probe.seeds, a.seeds);
            set(&mut cfg.probe.train.steps, a.steps);
            set(&mut cfg.probe.train.batch_size, a.batch_size);
        }
        Command::NerfRender(_) | Command::Report => {}
    }
    cfg.apply_seeds();
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("NERFAUG_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("NERFAUG_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let cfg = build_config(&cli)?;
    let ws = commands::Workspace::open(&cfg)?;
    match &cli.command {
        Command::SynthGen(_) => commands::synth_gen(&cfg, &ws),
        Command::NerfTrain(a) => commands::nerf_train(&cfg, &ws, a.resume),
        Command::NerfRender(a) => commands::nerf_render(&cfg, &ws, a),
        Command::Augment(_) => commands::augment(&cfg, &ws),
        Command::ProbeAb(_) => commands::probe_ab(&cfg, &ws),
        Command::Report => commands::report(&cfg, &ws),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nerfaug: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

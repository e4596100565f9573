//! Command-line interface: run the full system, evaluate trajectories,
//! render from a checkpoint, export synthetic scenes, and score depth
//! providers.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use mgs_core::config::RunConfig;
use mgs_core::dataset::{load_trajectory, write_trajectory};
use mgs_core::depth_prior::{
    depth_quality_metrics, DepthPriorProvider, GroundTruthNoisy, GroundTruthScaled, WindowFrame,
};
use mgs_core::error::Error;
use mgs_core::eval::{ate_rmse, AlignMode};
use mgs_core::gaussian_map::GaussianMap;
use mgs_core::pipeline::{depth_to_turbo, export_synthetic_scene, run_pipeline};
use mgs_core::rasterizer::{render, RasterSettings};
use mgs_core::synthetic::generate_synthetic_scene;

#[derive(Parser)]
#[command(
    name = "mgs",
    about = "Monocular Gaussian-splatting SLAM at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (flat key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides applied after the file, e.g. -s frames=300.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {kv:?}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.apply_env_overrides()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full tracking and mapping pipeline.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// TUM dataset root; omitted runs the synthetic preset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Absolute trajectory error between two TUM-format trajectory files.
    Eval {
        estimated: PathBuf,
        reference: PathBuf,
        /// Rigid alignment instead of similarity.
        #[arg(long)]
        se3: bool,
        /// No alignment at all.
        #[arg(long)]
        raw: bool,
    },
    /// Render color and depth images from a map checkpoint along a trajectory.
    Render {
        checkpoint: PathBuf,
        trajectory: PathBuf,
        #[arg(long, default_value = "renders")]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Render every n-th pose.
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
    /// Generate a synthetic scene and export it as a TUM-format dataset.
    Synth {
        #[arg(long, default_value = "room-orbit")]
        preset: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value = "synth-out")]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a depth-prior provider against the synthetic oracle.
    DepthMetrics {
        #[arg(long, default_value = "room-orbit")]
        preset: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Provider: "noisy" or "scaled".
        #[arg(long, default_value = "noisy")]
        provider: String,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::MissingFile(_) => 2,
        _ => 1,
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            dataset,
            output,
        } => {
            let mut cfg = config.build()?;
            if let Some(d) = dataset {
                if !d.exists() {
                    return Err(Error::MissingFile(d));
                }
                cfg.dataset = Some(d);
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            let summary = run_pipeline(&cfg)?;
            print!("{}", summary.render_text());
            println!("outputs: {}", summary.output_dir.display());
            Ok(())
        }
        Command::Eval {
            estimated,
            reference,
            se3,
            raw,
        } => {
            let est = load_trajectory(&estimated)?;
            let reference = load_trajectory(&reference)?;
            let mode = if raw {
                AlignMode::None
            } else if se3 {
                AlignMode::Se3
            } else {
                AlignMode::Sim3
            };
            let ate = ate_rmse(&est, &reference, mode)?;
            println!("ate_rmse_cm={ate:.6}");
            Ok(())
        }
        Command::Render {
            checkpoint,
            trajectory,
            output,
            config,
            stride,
        } => {
            let cfg = config.build()?;
            let map = GaussianMap::load_checkpoint(&checkpoint)?;
            let traj = load_trajectory(&trajectory)?;
            std::fs::create_dir_all(&output).map_err(|e| Error::io(&output, e))?;
            let k = cfg.intrinsics()?;
            let settings = RasterSettings {
                threads: 2,
                ..Default::default()
            };
            let range = 2.0 * map.extent().max(1.0);
            for (i, pose_wc) in traj.poses.iter().enumerate().step_by(stride.max(1)) {
                let out = render(&map, &pose_wc.inverse(), &k, Vector3::zeros(), &settings);
                out.color
                    .save_png(&output.join(format!("{i:05}_color.png")))?;
                depth_to_turbo(&out.depth, k.width, k.height, range)
                    .save_png(&output.join(format!("{i:05}_depth.png")))?;
            }
            println!(
                "rendered {} poses to {}",
                traj.len().div_ceil(stride.max(1)),
                output.display()
            );
            Ok(())
        }
        Command::Synth {
            preset,
            seed,
            frames,
            output,
            config,
        } => {
            let cfg = config.build()?;
            let scene = generate_synthetic_scene(&preset, seed, cfg.intrinsics()?, frames)?;
            std::fs::create_dir_all(&output).map_err(|e| Error::io(&output, e))?;
            export_synthetic_scene(&scene, &output)?;
            write_trajectory(&output.join("groundtruth.txt"), &scene.gt_trajectory())?;
            println!(
                "wrote {} frames of {preset:?} (seed {seed}) to {}",
                frames,
                output.display()
            );
            Ok(())
        }
        Command::DepthMetrics {
            preset,
            seed,
            provider,
            sigma,
            scale,
            config,
        } => {
            let cfg = config.build()?;
            let k = cfg.intrinsics()?;
            let scene = generate_synthetic_scene(&preset, seed, k, 8)?;
            let window: Vec<WindowFrame> = (0..8)
                .map(|i| WindowFrame {
                    frame_id: i,
                    pose: scene.trajectory[i],
                })
                .collect();
            let provider: Box<dyn DepthPriorProvider> = match provider.as_str() {
                "noisy" => Box::new(GroundTruthNoisy::new(sigma, (scale, scale), seed)),
                "scaled" => Box::new(GroundTruthScaled { scale }),
                other => {
                    return Err(Error::Config(format!(
                        "unknown provider {other:?}; use noisy or scaled"
                    )))
                }
            };
            let pred = provider.provide(&window, &scene)?;
            let gts: Vec<_> = (0..8).map(|i| scene.frame(i).1).collect();
            let poses: Vec<_> = (0..8).map(|i| scene.trajectory[i]).collect();
            let report = depth_quality_metrics(&pred, &gts, &poses, &k)?;
            for (s, level) in report.levels.iter().enumerate() {
                println!(
                    "level {s}: si={:.6} mv={:.6} normal={:.6}",
                    level.l_si, level.l_mv, level.l_normal
                );
            }
            println!("combined={:.6}", report.combined);
            Ok(())
        }
    }
}

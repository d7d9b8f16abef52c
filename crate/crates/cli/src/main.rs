//! Command-line entry points: `run` (track+map a dataset), `mesh` (extract
//! from a checkpoint), `eval` (trajectory ATE), `synth` (generate a dataset).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use voxslam_core::config::SystemConfig;
use voxslam_core::error::{Error, Result};
use voxslam_core::evaluator::ate_rmse;
use voxslam_core::frame_io::load_trajectory_file;
use voxslam_core::geom::add3;
use voxslam_core::mesher::{extract_mesh, save_ply};
use voxslam_core::pipeline;
use voxslam_core::pose::Pose;
use voxslam_core::scene::load_checkpoint;
use voxslam_core::synth::{
    arc_trajectory, default_intrinsics, generate_sequence, look_at, AnalyticScene,
};

#[derive(Parser)]
#[command(
    name = "voxslam",
    version,
    about = "Dense RGB-D SLAM with a sparse voxel TSDF field and tri-plane appearance"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track and map an RGB-D dataset, writing artifacts to the output directory
    Run {
        /// Config file: flat `section.key = value` lines, `#` comments;
        /// missing keys take the built-in defaults
        #[arg(long)]
        config: PathBuf,
        /// Override system.seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override system.output
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Extract a triangle mesh from a saved checkpoint
    Mesh {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output PLY path (default: mesh.ply beside the checkpoint)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Grid spacing in meters (default: half the checkpoint's voxel size)
        #[arg(long)]
        resolution: Option<f64>,
    },
    /// Absolute trajectory error between two trajectory files
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Render a synthetic RGB-D dataset from a named analytic scene
    Synth {
        /// Scene name: room | sphere | plane
        #[arg(long)]
        scene: String,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        /// Gaussian depth noise sigma in meters
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Dataset(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            output,
        } => {
            let mut cfg = SystemConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            pipeline::run(&cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(cfg.output.join("metrics.txt"))?
            );
            println!("artifacts in {}", cfg.output.display());
            Ok(())
        }
        Command::Mesh {
            checkpoint,
            out,
            resolution,
        } => {
            let (store, scene) = load_checkpoint::<f64>(&checkpoint)?;
            let res = resolution.unwrap_or(scene.volume.voxel_size * 0.5);
            if !(res > 0.0) {
                return Err(Error::Config("--resolution must be positive".into()));
            }
            let mesh = extract_mesh(&store, &scene, res);
            let path = out.unwrap_or_else(|| checkpoint.with_file_name("mesh.ply"));
            save_ply(&mesh, &path)?;
            println!(
                "wrote {} ({} vertices, {} triangles)",
                path.display(),
                mesh.vertices.len(),
                mesh.triangles.len()
            );
            Ok(())
        }
        Command::Eval { est, gt } => {
            let e = load_trajectory_file::<f64>(&est)?;
            let g = load_trajectory_file::<f64>(&gt)?;
            println!("ate_rmse_cm = {:.4}", ate_rmse(&e, &g)?);
            Ok(())
        }
        Command::Synth {
            scene,
            frames,
            out,
            noise,
            seed,
        } => {
            let analytic = AnalyticScene::named(&scene).ok_or_else(|| {
                Error::Config(format!("unknown scene `{scene}` (room | sphere | plane)"))
            })?;
            if frames == 0 {
                return Err(Error::Config("--frames must be >= 1".into()));
            }
            let traj = synth_trajectory(&scene, frames);
            generate_sequence(&analytic, &traj, &default_intrinsics(), noise, seed, &out)?;
            println!("wrote {} frames to {}", frames, out.display());
            Ok(())
        }
    }
}

/// Gentle orbit (~1.1° per frame) facing each scene's subject.
fn synth_trajectory(scene: &str, frames: usize) -> Vec<Pose<f64>> {
    const STEP: f64 = 0.02;
    match scene {
        // wall at z = 2: swing on a vertical-axis arc 1.5 m in front of it
        "plane" => (0..frames)
            .map(|i| {
                let th = STEP * i as f64;
                let eye = [1.5 * th.sin(), 0.1 * th.sin(), 2.0 - 1.5 * th.cos()];
                look_at(eye, [0.0, 0.0, 2.0], [0.0, 1.0, 0.0])
            })
            .collect(),
        // orbit the subject: the room's center sphere or the lone sphere
        _ => {
            let (center, radius) = match scene {
                "sphere" => ([0.0, 0.0, 1.5], 1.0),
                _ => ([0.0, 0.0, 0.0], 0.5),
            };
            let mut traj = arc_trajectory(frames, radius, 0.1, STEP * frames as f64);
            for p in &mut traj {
                p.t = add3(p.t, center);
            }
            traj
        }
    }
}

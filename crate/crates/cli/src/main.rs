//! `nvs`: train, evaluate, render and serve the view-synthesis model.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "nvs", version, about = "Continuous novel-view synthesis from a single image")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` training/model config; defaults apply to missing keys
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// model checkpoint (its `.cfg` sidecar must sit next to it)
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// seed for scenes, initialization and sampling (default 0, or the config's `seed` when training)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on procedural orbit pairs
    Train {
        #[command(flatten)]
        common: Common,
        /// directory for checkpoints and metrics.csv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// override the configured epoch count
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the held-out validation pairs
    Eval {
        #[command(flatten)]
        common: Common,
        /// write `metric,value` CSV here instead of stdout
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// L1/SSIM over a fine azimuth sweep around a source view
    Sweep {
        #[command(flatten)]
        common: Common,
        /// largest azimuth offset in degrees
        #[arg(long, default_value_t = 40.0)]
        range: f64,
        /// offset increment in degrees
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        /// number of validation scenes averaged per angle
        #[arg(long, default_value_t = 1)]
        scenes: u64,
        /// source elevation in degrees
        #[arg(long, default_value_t = 10.0)]
        elevation: f64,
        /// CSV output `angle,l1,ssim`
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Synthesize one frame per line of a pose file
    Render {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceArgs,
        /// relative poses, 12 numbers per line; each places the target camera in the source camera frame
        #[arg(long, value_name = "FILE")]
        poses: PathBuf,
        /// output directory for numbered PNGs and PFM depths
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Synthesize consecutive orbit views and overlay them in one image
    Orbit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value_t = 80)]
        views: usize,
        /// azimuth increment between views in degrees
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        /// composite PNG (per-pixel mean of all views)
        #[arg(long, value_name = "FILE")]
        overlay: PathBuf,
        /// also write every view here
        #[arg(long, value_name = "DIR")]
        frames: Option<PathBuf>,
    },
    /// Run the HTTP/WebSocket frame service
    Serve {
        #[command(flatten)]
        common: Common,
        /// listen address; overrides the NVS_BIND environment variable
        #[arg(long, value_name = "ADDR")]
        bind: Option<String>,
    },
    /// Finite-difference checks of every differentiable operation
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Decode depth along a linear path between two encoded scenes
    Interpolate {
        #[command(flatten)]
        common: Common,
        /// scene seed of the second endpoint (the first is --seed)
        #[arg(long)]
        seed_b: u64,
        /// number of samples including both endpoints
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Export orbit-protocol views with depth, poses and intrinsics
    GenData {
        #[command(flatten)]
        common: Common,
        /// number of scenes, ids `seed..seed + scenes`
        #[arg(long, default_value_t = 1)]
        scenes: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

/// Where the source view comes from when rendering.
#[derive(Args, Debug, Clone)]
pub struct SourceArgs {
    /// procedural scene family
    #[arg(long, value_parser = ["objects", "corridor"], default_value = "objects")]
    pub scene: String,
    /// source azimuth in degrees (objects scenes)
    #[arg(long, default_value_t = 0.0)]
    pub azimuth: f64,
    /// source elevation in degrees (objects scenes)
    #[arg(long, default_value_t = 10.0)]
    pub elevation: f64,
    /// oracle render size; learned mode uses the model size
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// source PNG instead of a procedural scene (learned mode only)
    #[arg(long, value_name = "FILE")]
    pub image: Option<PathBuf>,
    /// intrinsics file for --image (`fx fy cx cy width height`)
    #[arg(long, value_name = "FILE")]
    pub intrinsics: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    match cli.command {
        Command::Train { common, out, epochs } => commands::train(&common, &out, epochs),
        Command::Eval { common, out } => commands::eval(&common, out.as_deref()),
        Command::Sweep {
            common,
            range,
            step,
            scenes,
            elevation,
            out,
        } => commands::sweep(&common, range, step, scenes, elevation, &out),
        Command::Render {
            common,
            source,
            poses,
            out,
        } => commands::render(&common, &source, &poses, &out),
        Command::Orbit {
            common,
            source,
            views,
            step,
            overlay,
            frames,
        } => commands::orbit(&common, &source, views, step, &overlay, frames.as_deref()),
        Command::Serve { common, bind } => commands::serve(&common, bind.as_deref()),
        Command::Gradcheck { common } => commands::gradcheck(&common),
        Command::Interpolate {
            common,
            seed_b,
            steps,
            out,
        } => commands::interpolate(&common, seed_b, steps, &out),
        Command::GenData { common, scenes, out } => commands::gen_data(&common, scenes, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind, e.msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use radarfield::decoder::{emit_deterministic, emit_probabilistic, render_scan};
use radarfield::experiment::{loss_curve_csv, Benchmark};
use radarfield::io::depth_csv;
use radarfield::matching::SetMetrics;
use radarfield::synth::{benchmark_scene, trivial_scene};
use radarfield::{
    run_experiment, Decoder, DecoderWeights, Error, ExperimentConfig, GospaParams, PointCloud,
    RadarConfig, RenderParams, Result, Scene, SensorPose, Vec3,
};

#[derive(Parser)]
#[command(name = "radarfield", version, about = "Radar point-cloud rendering, decoding and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    /// Ground plane, two boxes and one moving actor.
    Benchmark,
    /// A single sphere in front of the sensor.
    Trivial,
}

#[derive(clap::Args)]
struct PoseArgs {
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    x: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    y: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    z: f64,
    /// Heading in radians.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
    /// Scene time in seconds.
    #[arg(long, default_value_t = 0.0)]
    time: f64,
}

impl PoseArgs {
    fn pose(&self) -> Result<SensorPose> {
        SensorPose::from_yaw(Vec3::new(self.x, self.y, self.z), self.yaw, self.time)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a built-in scene as JSON.
    GenScene {
        #[arg(long, value_enum, default_value = "benchmark")]
        kind: SceneKind,
        #[arg(long, default_value_t = 32)]
        feature_dim: usize,
        #[arg(long, default_value_t = 7)]
        feature_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one scan and write per-ray depths as CSV.
    RenderDepth {
        #[arg(long)]
        scene: PathBuf,
        /// Radar configuration JSON; the desk grid if omitted.
        #[arg(long)]
        radar: Option<PathBuf>,
        #[command(flatten)]
        pose: PoseArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the configured sequence and train a decoder on its even frames.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Directory for `decoder.nrdr`, `decoder.json` and `loss_curve.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one scan, decode it and write the emitted point cloud.
    Sample {
        /// Weights stem (`<stem>.nrdr` with `<stem>.json`).
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        radar: Option<PathBuf>,
        #[command(flatten)]
        pose: PoseArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output cloud; `.csv` or JSON-lines otherwise.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print Chamfer, EMD and GOSPA between two point clouds as JSON.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Range gate applied to both clouds.
        #[arg(long)]
        gate: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
    },
    /// Run a full seeded experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_radar(path: Option<&Path>) -> Result<RadarConfig> {
    let Some(path) = path else {
        return Ok(RadarConfig::desk());
    };
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg: RadarConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenScene {
            kind,
            feature_dim,
            feature_seed,
            out,
        } => {
            let scene = match kind {
                SceneKind::Benchmark => benchmark_scene(feature_dim, feature_seed)?,
                SceneKind::Trivial => trivial_scene(feature_dim, feature_seed)?,
            };
            write_text(&out, &(scene.to_json()? + "\n"))
        }
        Command::RenderDepth {
            scene,
            radar,
            pose,
            seed,
            out,
        } => {
            let scene = Scene::load(&scene)?;
            let radar = load_radar(radar.as_deref())?;
            let renders = render_scan(&scene, &pose.pose()?, &radar, &RenderParams::default(), seed)?;
            write_text(&out, &depth_csv(&renders))
        }
        Command::Fit { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let scene = Scene::load(&cfg.scene)?;
            if scene.feature_dim != cfg.decoder.feature_dim {
                return Err(Error::Config(format!(
                    "scene features have {} channels, decoder expects {}",
                    scene.feature_dim, cfg.decoder.feature_dim
                )));
            }
            let bench = Benchmark::simulate(
                scene,
                cfg.radar.clone(),
                cfg.render,
                cfg.trajectory.clone(),
                cfg.truth.clone(),
                cfg.seed,
            )?;
            let fit = bench.fit(&cfg.decoder, &cfg.train)?;
            std::fs::create_dir_all(&out).map_err(|source| Error::Io {
                path: out.clone(),
                source,
            })?;
            fit.weights.save(&out.join("decoder"))?;
            write_text(&out.join("loss_curve.csv"), &loss_curve_csv(&fit.loss_curve, &cfg.train))
        }
        Command::Sample {
            weights,
            scene,
            radar,
            pose,
            seed,
            out,
        } => {
            let weights = DecoderWeights::load(&weights)?;
            let scene = Scene::load(&scene)?;
            let radar = load_radar(radar.as_deref())?;
            let renders = render_scan(&scene, &pose.pose()?, &radar, &RenderParams::default(), seed)?;
            let probabilistic = weights.config.probabilistic;
            let params = Decoder::new(weights).decode_renders(&renders)?;
            let cloud = if probabilistic {
                emit_probabilistic(&params, radar.density_family, seed)?
            } else {
                emit_deterministic(&params, radar.confidence_threshold)?
            };
            cloud.save(&out)
        }
        Command::Eval {
            pred,
            truth,
            gate,
            c,
            alpha,
            p,
        } => {
            let cap = gate.unwrap_or(f64::INFINITY);
            let pred = PointCloud::load(&pred)?.gated(cap);
            let truth = PointCloud::load(&truth)?.gated(cap);
            let metrics = SetMetrics::compute(&pred, &truth, &GospaParams { c, alpha, p })?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(())
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

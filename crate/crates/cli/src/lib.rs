//! Command-line front end. Every command goes through the HTTP service,
//! either a remote one given by `--server` or one started in-process.

use std::collections::BTreeSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use iguide_client::Client;
use iguide_core::api::{DatasetLocation, EvalRequest, OverlayRequest, RunRequest, SynthRequest};
use iguide_core::fusion::PropagationMode;
use iguide_core::io;
use iguide_core::pipeline::{DatasetPaths, RunConfig, IMU_FILE, IMU_INITIAL_FILE};

#[derive(Parser, Debug)]
#[command(
    name = "iguide",
    version,
    about = "Inertial-guided uncertainty for feature correspondences"
)]
pub struct Cli {
    /// Service URL. An in-process service is started when absent.
    #[arg(long, global = true)]
    pub server: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate mean and covariance of every tracked correspondence.
    Estimate(Box<EstimateArgs>),
    /// Render a synthetic scenario and write it as a dataset.
    Synth(SynthArgs),
    /// Compare results with ground truth.
    Eval(EvalArgs),
    /// Draw covariance ellipses over an image as SVG.
    Overlay(OverlayArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Propagation {
    SingleSample,
    WithVisual,
}

impl From<Propagation> for PropagationMode {
    fn from(p: Propagation) -> Self {
        match p {
            Propagation::SingleSample => PropagationMode::SingleSample,
            Propagation::WithVisual => PropagationMode::WithVisual,
        }
    }
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Directory with the standard file names (intrinsics.json, frames.csv, ...).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<PathBuf>,
    #[arg(long)]
    pub tracks: Option<PathBuf>,
    /// TUM trajectory: timestamp tx ty tz qx qy qz qw.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// IMU readings, used when no trajectory is given.
    #[arg(long)]
    pub imu: Option<PathBuf>,
    #[arg(long)]
    pub imu_initial: Option<PathBuf>,
    /// JSON run configuration; flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub r_max: Option<f64>,
    #[arg(long)]
    pub d_max: Option<f64>,
    #[arg(long)]
    pub l0: Option<f64>,
    /// Grid subdivisions per axis.
    #[arg(long)]
    pub grid_n: Option<usize>,
    #[arg(long)]
    pub depth_sigma_ratio: Option<f64>,
    #[arg(long)]
    pub num_guidance: Option<usize>,
    #[arg(long)]
    pub epipolar_candidate: Option<bool>,
    #[arg(long)]
    pub patch_half: Option<usize>,
    #[arg(long)]
    pub lambda_lo: Option<f64>,
    #[arg(long)]
    pub lambda_hi: Option<f64>,
    /// Fixed combination weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub target_det: Option<f64>,
    #[arg(long)]
    pub default_variance: Option<f64>,
    #[arg(long, value_enum)]
    pub propagation: Option<Propagation>,
    /// Seconds.
    #[arg(long)]
    pub timestamp_tolerance: Option<f64>,
    /// World gravity as `x,y,z`, m/s^2.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub gravity: Option<[f64; 3]>,
    #[arg(long)]
    pub no_normalize: bool,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Defaults to the output extension, else CSV.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
    /// World gravity as `x,y,z`, m/s^2.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub gravity: Option<[f64; 3]>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// CSV or JSON results.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Tracks file whose points are scored as the visual baseline.
    #[arg(long)]
    pub visual: Option<PathBuf>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OverlayArgs {
    /// PGM image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
    /// Rows of this frame only; needed when the results span several frames.
    #[arg(long)]
    pub frame: Option<u64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

fn parse_vec3(text: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [x, y, z] = parts.as_slice() else {
        return Err(format!("expected x,y,z, got '{text}'"));
    };
    let num = |v: &str| v.parse::<f64>().map_err(|e| format!("'{v}': {e}"));
    Ok([num(x)?, num(y)?, num(z)?])
}

/// Connects to `--server` or starts a service on a free local port.
pub async fn connect(server: Option<&str>) -> anyhow::Result<Client> {
    if let Some(url) = server {
        return Ok(Client::new(url));
    }
    let addr: SocketAddr = "127.0.0.1:0".parse()?;
    let (local, _handle) = iguide_service::spawn(addr)
        .await
        .context("starting in-process service")?;
    Ok(Client::new(format!("http://{local}")))
}

pub async fn execute(cli: Cli) -> anyhow::Result<()> {
    let client = connect(cli.server.as_deref()).await?;
    match cli.command {
        Command::Estimate(args) => cmd_estimate(&client, &args).await,
        Command::Synth(args) => cmd_synth(&client, &args).await,
        Command::Eval(args) => cmd_eval(&client, &args).await,
        Command::Overlay(args) => cmd_overlay(&client, &args).await,
    }
}

fn absolute(path: &Path) -> anyhow::Result<PathBuf> {
    std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))
}

fn dataset_paths(args: &EstimateArgs) -> anyhow::Result<DatasetPaths> {
    let mut paths = match &args.dataset {
        Some(dir) if !dir.is_dir() => bail!("dataset directory {} not found", dir.display()),
        Some(dir) => DatasetPaths::in_dir(dir),
        None => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone()
                    .with_context(|| format!("--{flag} is required without --dataset"))
            };
            DatasetPaths {
                intrinsics: need(&args.intrinsics, "intrinsics")?,
                frames: need(&args.frames, "frames")?,
                tracks: need(&args.tracks, "tracks")?,
                trajectory: None,
                imu: None,
                imu_initial: None,
            }
        }
    };
    if let Some(p) = &args.intrinsics {
        paths.intrinsics = p.clone();
    }
    if let Some(p) = &args.frames {
        paths.frames = p.clone();
    }
    if let Some(p) = &args.tracks {
        paths.tracks = p.clone();
    }
    if args.imu.is_some() || args.imu_initial.is_some() {
        paths.trajectory = None;
        let in_dir = |name: &str| args.dataset.as_ref().map(|d| d.join(name));
        paths.imu = args.imu.clone().or_else(|| in_dir(IMU_FILE));
        paths.imu_initial = args.imu_initial.clone().or_else(|| in_dir(IMU_INITIAL_FILE));
    }
    if let Some(p) = &args.trajectory {
        paths.trajectory = Some(p.clone());
    }
    if paths.trajectory.is_none() && (paths.imu.is_none() || paths.imu_initial.is_none()) {
        bail!("motion input missing: give --trajectory, or --imu with --imu-initial");
    }
    Ok(DatasetPaths {
        intrinsics: absolute(&paths.intrinsics)?,
        frames: absolute(&paths.frames)?,
        tracks: absolute(&paths.tracks)?,
        trajectory: paths.trajectory.as_deref().map(absolute).transpose()?,
        imu: paths.imu.as_deref().map(absolute).transpose()?,
        imu_initial: paths.imu_initial.as_deref().map(absolute).transpose()?,
    })
}

/// Defaults, then the `--config` file, then individual flags.
pub fn run_config(args: &EstimateArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| anyhow::anyhow!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))?
        }
        None => RunConfig::default(),
    };
    let g = &mut cfg.estimator.guidance;
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(g.alpha, args.alpha);
    set!(g.r_max, args.r_max);
    set!(g.d_max, args.d_max);
    set!(g.l0, args.l0);
    set!(g.n, args.grid_n);
    set!(g.depth_sigma_ratio, args.depth_sigma_ratio);
    set!(g.num_guidance, args.num_guidance);
    set!(g.epipolar_candidate, args.epipolar_candidate);
    let e = &mut cfg.estimator.energy;
    set!(e.patch_half, args.patch_half);
    set!(e.lambda_lo, args.lambda_lo);
    set!(e.lambda_hi, args.lambda_hi);
    if args.lambda.is_some() {
        e.lambda_override = args.lambda;
    }
    let f = &mut cfg.estimator.fusion;
    set!(f.target_det, args.target_det);
    set!(f.default_variance, args.default_variance);
    set!(cfg.propagation, args.propagation.map(PropagationMode::from));
    set!(cfg.timestamp_tolerance, args.timestamp_tolerance);
    set!(cfg.gravity, args.gravity);
    if args.no_normalize {
        cfg.normalize = false;
    }
    cfg.seed = args.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn output_format(out: Option<&Path>, format: Option<Format>) -> Format {
    format.unwrap_or_else(|| match out.and_then(|p| p.extension()).and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("json") => Format::Json,
        _ => Format::Csv,
    })
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => io::write_bytes(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

pub async fn cmd_estimate(client: &Client, args: &EstimateArgs) -> anyhow::Result<()> {
    let config = run_config(args)?;
    let paths = dataset_paths(args)?;
    let output = client
        .run(&RunRequest {
            dataset: DatasetLocation::Files(paths),
            config,
        })
        .await?;
    let text = match output_format(args.out.as_deref(), args.format) {
        Format::Csv => io::format_results_csv(&output.rows),
        Format::Json => io::format_results_json(&output.rows),
    };
    emit(args.out.as_deref(), &text)?;
    for f in output.frames.iter().filter(|f| f.skipped) {
        eprintln!("warning: frame {} covariances too small to normalize", f.frame);
    }
    Ok(())
}

pub async fn cmd_synth(client: &Client, args: &SynthArgs) -> anyhow::Result<()> {
    let gravity = args.gravity.unwrap_or(RunConfig::default().gravity);
    let summary = client
        .synth(&SynthRequest {
            scenario: args.scenario.clone(),
            seed: args.seed,
            out_dir: absolute(&args.out)?,
            gravity,
        })
        .await?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

pub async fn cmd_eval(client: &Client, args: &EvalArgs) -> anyhow::Result<()> {
    let results = io::read_results(&args.results)?;
    let truth = io::parse_truth(&io::read_text(&args.truth)?, &args.truth.display().to_string())?;
    let visual = match &args.visual {
        Some(p) => Some(io::parse_tracks(&io::read_text(p)?, &p.display().to_string())?),
        None => None,
    };
    let metrics = client.eval(&EvalRequest { results, truth, visual }).await?;
    let text = serde_json::to_string_pretty(&metrics)? + "\n";
    emit(args.out.as_deref(), &text)
}

pub async fn cmd_overlay(client: &Client, args: &OverlayArgs) -> anyhow::Result<()> {
    let image = io::read_pgm(&args.image)?;
    let mut rows = io::read_results(&args.results)?;
    match args.frame {
        Some(frame) => rows.retain(|r| r.frame == frame),
        None => {
            let frames: BTreeSet<u64> = rows.iter().map(|r| r.frame).collect();
            if frames.len() > 1 {
                bail!("results span frames {frames:?}; choose one with --frame");
            }
        }
    }
    let svg = client.overlay(&OverlayRequest { image, rows }).await?;
    io::write_bytes(&args.out, svg.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> EstimateArgs {
        let mut argv = vec!["iguide", "estimate"];
        argv.extend_from_slice(args);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Estimate(a) => *a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_config_file() {
        let dir = std::env::temp_dir().join(format!("iguide-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.json");
        fs::write(
            &path,
            r#"{"estimator": {"guidance": {"alpha": 1.0, "num_guidance": 5}}, "normalize": true, "seed": 3}"#,
        )
        .unwrap();
        let args = parse(&[
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "9",
            "--alpha",
            "0.95",
            "--no-normalize",
            "--propagation",
            "with-visual",
            "--gravity",
            "0,-9.8,0",
        ]);
        let cfg = run_config(&args).unwrap();
        assert_eq!(cfg.estimator.guidance.alpha, 0.95);
        assert_eq!(cfg.estimator.guidance.num_guidance, 5);
        assert_eq!(cfg.estimator.guidance.r_max, 3.0);
        assert!(!cfg.normalize);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.propagation, PropagationMode::WithVisual);
        assert_eq!(cfg.gravity, [0.0, -9.8, 0.0]);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn invalid_flags_fail_validation() {
        assert!(run_config(&parse(&["--seed", "1", "--r-max", "1.0"])).is_err());
        assert!(run_config(&parse(&["--seed", "1", "--grid-n", "0"])).is_err());
        assert!(run_config(&parse(&["--seed", "1"])).is_ok());
    }

    #[test]
    fn format_follows_extension() {
        assert_eq!(output_format(Some(Path::new("a.JSON")), None), Format::Json);
        assert_eq!(output_format(Some(Path::new("a.csv")), None), Format::Csv);
        assert_eq!(output_format(None, None), Format::Csv);
        assert_eq!(
            output_format(Some(Path::new("a.csv")), Some(Format::Json)),
            Format::Json
        );
    }
}

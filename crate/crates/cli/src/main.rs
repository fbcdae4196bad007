use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gsslam::config::{synthetic_preset, ConfigError, RunConfig};
use gsslam::dataset::{generate_synthetic, parse_calib, parse_trajectory, pristine_corpus, write_sequence, DatasetError};
use gsslam::eval::ate_rmse;
use gsslam::gaussian_map::GaussianMap;
use gsslam::gradcheck::{run_audit, AuditConfig};
use gsslam::image::Image;
use gsslam::niqe::{NiqeModel, SYNTHETIC_PATCH};
use gsslam::pipeline::{run_slam, PipelineError};
use gsslam::raster::{render, RenderSettings};

#[derive(Parser, Debug)]
#[command(name = "gsslam", version, about = "Gaussian-splatting visual-inertial SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Track and map a sequence, then write trajectory, map and metrics.
    Run(RunArgs),
    /// Generate a synthetic sequence as a dataset directory.
    Synth(SynthArgs),
    /// ATE between an estimated and a ground-truth trajectory file.
    Eval(EvalArgs),
    /// Render a map checkpoint at every pose of a trajectory file.
    Render(RenderArgs),
    /// Fit a NIQE model to a directory of pristine images.
    NiqeFit(NiqeFitArgs),
    /// Finite-difference audit of the rasterizer gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// TUM-style dataset directory.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Synthetic preset: square, circle or straight.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    /// rgb, rgb+imu, rgbd or rgbd+imu.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    track_iters: Option<usize>,
    #[arg(long)]
    map_iters: Option<usize>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = "square")]
    preset: String,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Estimated trajectory (TUM format).
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth trajectory (TUM format).
    #[arg(long)]
    gt: PathBuf,
    /// Similarity alignment, for monocular runs.
    #[arg(long)]
    scale: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    map: PathBuf,
    /// Trajectory file with the camera poses.
    #[arg(long)]
    poses: PathBuf,
    /// `fx fy cx cy width height` calibration file.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write 16-bit depth PNGs (millimetres).
    #[arg(long)]
    depth: bool,
}

#[derive(Args, Debug)]
struct NiqeFitArgs {
    /// Directory of PNG images.
    #[arg(long, required_unless_present = "synthetic")]
    corpus: Option<PathBuf>,
    /// Use the built-in synthetic corpus instead.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = SYNTHETIC_PATCH)]
    patch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    max_gaussians: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::new(e.exit_code() as u8, e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(2, format!("config: {e}"))
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::new(3, format!("dataset: {e}"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render_poses(a),
        Command::NiqeFit(a) => niqe_fit(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn build_config(a: &RunArgs) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: Option<String>| match v {
        Some(v) => cfg.set(k, &v),
        None => Ok(()),
    };
    set("dataset", a.dataset.as_ref().map(|p| p.display().to_string()))?;
    set("synthetic", a.synthetic.clone())?;
    set("frames", a.frames.map(|v| v.to_string()))?;
    set("mode", a.mode.clone())?;
    set("out", a.out.as_ref().map(|p| p.display().to_string()))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    set("track_iters", a.track_iters.map(|v| v.to_string()))?;
    set("map_iters", a.map_iters.map(|v| v.to_string()))?;
    set("lambda_c", a.lambda_c.map(|v| v.to_string()))?;
    set("lambda_s", a.lambda_s.map(|v| v.to_string()))?;
    set("lambda_d", a.lambda_d.map(|v| v.to_string()))?;
    set("workers", a.workers.map(|v| v.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(a: RunArgs) -> Result<(), Failure> {
    let cfg = build_config(&a)?;
    let out = run_slam(&cfg)?;
    println!("{}", out.report.table());
    if let Some(dir) = &cfg.out_dir {
        println!("outputs written to {}", dir.display());
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut spec = synthetic_preset(&a.preset)?;
    if let Some(n) = a.frames {
        spec.frames = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| Failure::new(2, format!("config: {e}")))?;
    let (seq, map) = generate_synthetic(&spec);
    write_sequence(&a.out, &seq)?;
    let path = a.out.join("map_gt.bin");
    let file = fs::File::create(&path).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))?;
    map.write_checkpoint(std::io::BufWriter::new(file))
        .map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))?;
    println!("{} frames, {} Gaussians -> {}", seq.frames.len(), map.len(), a.out.display());
    Ok(())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(3, format!("{}: {e}", path.display())))
}

fn load_trajectory(path: &Path) -> Result<Vec<gsslam::dataset::TimedPose>, Failure> {
    let name = path.display().to_string();
    Ok(parse_trajectory(&read_text(path)?, &name)?)
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let est = load_trajectory(&a.est)?;
    let gt = load_trajectory(&a.gt)?;
    let r = ate_rmse(&est, &gt, a.scale).map_err(|e| Failure::new(3, e))?;
    if a.json {
        let v = serde_json::json!({
            "ate_rmse_cm": r.rmse_cm,
            "pairs": r.errors_cm.len(),
            "scale": r.alignment.scale,
            "with_scale": a.scale,
        });
        println!("{v}");
    } else {
        println!("ATE RMSE {:.4} cm over {} poses (scale {:.6})", r.rmse_cm, r.errors_cm.len(), r.alignment.scale);
    }
    Ok(())
}

fn render_poses(a: RenderArgs) -> Result<(), Failure> {
    let bytes = fs::read(&a.map).map_err(|e| Failure::new(3, format!("{}: {e}", a.map.display())))?;
    let map = gsslam::gaussian_map::parse_checkpoint(&bytes).map_err(|e| Failure::new(3, format!("{}: {e}", a.map.display())))?;
    let poses = load_trajectory(&a.poses)?;
    let (k, _) = parse_calib(&read_text(&a.calib)?)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::new(1, format!("{}: {e}", a.out.display())))?;
    render_all(&map, &poses, &k, &a)?;
    println!("rendered {} views of {} Gaussians -> {}", poses.len(), map.len(), a.out.display());
    Ok(())
}

fn render_all(
    map: &GaussianMap,
    poses: &[gsslam::dataset::TimedPose],
    k: &gsslam::geometry::Intrinsics,
    a: &RenderArgs,
) -> Result<(), Failure> {
    let settings = RenderSettings::default();
    for (i, tp) in poses.iter().enumerate() {
        let r = render(map, &tp.pose, k, &settings);
        let path = a.out.join(format!("{i:05}.png"));
        r.color.save_rgb8(&path).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))?;
        if a.depth {
            let path = a.out.join(format!("{i:05}_depth.png"));
            r.depth
                .save_depth16(&path, gsslam::dataset::DEPTH_PNG_SCALE)
                .map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

fn niqe_fit(a: NiqeFitArgs) -> Result<(), Failure> {
    let corpus = match (&a.corpus, a.synthetic) {
        (_, true) => pristine_corpus(),
        (Some(dir), false) => load_pngs(dir)?,
        (None, false) => return Err(Failure::new(2, "either --corpus or --synthetic is required")),
    };
    let model = NiqeModel::fit(&corpus, a.patch).map_err(|e| Failure::new(1, e))?;
    let file = fs::File::create(&a.out).map_err(|e| Failure::new(1, format!("{}: {e}", a.out.display())))?;
    model
        .write(std::io::BufWriter::new(file))
        .map_err(|e| Failure::new(1, format!("{}: {e}", a.out.display())))?;
    println!("fitted on {} images (patch {}) -> {}", corpus.len(), a.patch, a.out.display());
    Ok(())
}

fn load_pngs(dir: &Path) -> Result<Vec<Image>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::new(3, format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Image::load_rgb(p).map_err(|e| Failure::new(3, format!("{}: {e}", p.display()))))
        .collect()
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let cfg = AuditConfig {
        scenes: a.scenes,
        max_gaussians: a.max_gaussians,
        width: a.size,
        height: a.size,
        seed: a.seed,
    };
    let report = run_audit(&cfg);
    println!(
        "{} scenes, {} Gaussians, {} gradient entries checked, worst relative error {:.2e}",
        report.scenes, report.gaussians, report.checked, report.worst_relative
    );
    for m in report.mismatches.iter().take(20) {
        println!("  scene {} {}: analytic {:.6e} numeric {:.6e}", m.scene, m.parameter, m.analytic, m.numeric);
    }
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::new(1, format!("FAIL: {} mismatches", report.mismatches.len())))
    }
}

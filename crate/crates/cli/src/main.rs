use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gyroburst::burst::CLEAN_FILE;
use gyroburst::config::apply_config_file;
use gyroburst::pipeline::median;
use gyroburst::simulator::{homography_error, psnr, simulate_preset};
use gyroburst::{read_burst, run_pipeline, write_burst, Error, Homography, Image, MotionPreset, PipelineConfig};
use serde::Serialize;

const EXIT_INPUT: u8 = 2;
const EXIT_NO_VALID_FRAMES: u8 = 3;

#[derive(Parser)]
#[command(name = "gyroburst", version, about = "Gyro-aided burst alignment and merging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align and merge a burst directory.
    Align {
        /// Burst directory (frame_NNNN.png, gyro.csv, timing.json).
        burst: PathBuf,
        /// Merged 16-bit PNG.
        #[arg(short, long, default_value = "merged.png")]
        output: PathBuf,
        /// JSON report with per-frame diagnostics.
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Render a synthetic burst with ground truth.
    Simulate {
        #[command(flatten)]
        sim: SimulateFlags,
        /// Scene, trajectory jitter, gyro and image noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output burst directory.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Score a merged image against a burst's ground truth.
    Evaluate {
        /// Burst directory containing truth.json and clean.png.
        burst: PathBuf,
        /// Merged image to score.
        merged: PathBuf,
        /// Alignment report; adds per-frame homography errors.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Metrics JSON; printed to stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Simulate, align and evaluate in one run; `--seed` drives both the
    /// simulation and RANSAC.
    Demo {
        #[command(flatten)]
        sim: SimulateFlags,
        /// Working directory for the burst, merged image, report and metrics.
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
}

#[derive(Args)]
struct SimulateFlags {
    /// static, offset, in-plane-rotation, x-rotation or late-excursion.
    #[arg(long, default_value = "offset")]
    preset: MotionPreset,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Per-pixel Gaussian noise std on [0, 1] intensities.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
}

/// Every flag left unset keeps the library default.
#[derive(Args)]
struct PipelineFlags {
    /// key = value file applied after the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fx,fy,cx,cy in pixels; ground truth is used when absent.
    #[arg(long)]
    intrinsics: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    process_noise_sigma: Option<f64>,
    #[arg(long)]
    measurement_noise_sigma: Option<f64>,
    #[arg(long)]
    ukf_iterations: Option<usize>,
    #[arg(long)]
    ukf_tolerance: Option<f64>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    steady_error_threshold: Option<f64>,
    #[arg(long)]
    shrinkage: Option<f64>,
    /// Frame noise std; truth or an estimate is used when absent.
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    max_corners: Option<usize>,
    #[arg(long)]
    min_distance: Option<f64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    search_radius: Option<usize>,
    #[arg(long)]
    zncc_threshold: Option<f64>,
    #[arg(long)]
    point_noise_sigma: Option<f64>,
    #[arg(long)]
    ransac_threshold: Option<f64>,
    #[arg(long)]
    ransac_iterations: Option<usize>,
    #[arg(long)]
    rk4_step_ns: Option<i64>,
    #[arg(long, allow_hyphen_values = true)]
    clock_offset_ns: Option<i64>,
    #[arg(long)]
    fallback_levels: Option<usize>,
    #[arg(long)]
    fallback_search: Option<usize>,
    /// RANSAC seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl PipelineFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(ToString::to_string)
        }
        [
            ("intrinsics", self.intrinsics.clone()),
            ("alpha", s(&self.alpha)),
            ("beta", s(&self.beta)),
            ("process_noise_sigma", s(&self.process_noise_sigma)),
            ("measurement_noise_sigma", s(&self.measurement_noise_sigma)),
            ("ukf_iterations", s(&self.ukf_iterations)),
            ("ukf_tolerance", s(&self.ukf_tolerance)),
            ("tile", s(&self.tile)),
            ("overlap", s(&self.overlap)),
            ("max_frames", s(&self.max_frames)),
            ("steady_error_threshold", s(&self.steady_error_threshold)),
            ("shrinkage", s(&self.shrinkage)),
            ("noise_sigma", s(&self.noise_sigma)),
            ("max_corners", s(&self.max_corners)),
            ("min_distance", s(&self.min_distance)),
            ("patch", s(&self.patch)),
            ("search_radius", s(&self.search_radius)),
            ("zncc_threshold", s(&self.zncc_threshold)),
            ("point_noise_sigma", s(&self.point_noise_sigma)),
            ("ransac_threshold", s(&self.ransac_threshold)),
            ("ransac_iterations", s(&self.ransac_iterations)),
            ("rk4_step_ns", s(&self.rk4_step_ns)),
            ("clock_offset_ns", s(&self.clock_offset_ns)),
            ("fallback_levels", s(&self.fallback_levels)),
            ("fallback_search", s(&self.fallback_search)),
            ("seed", s(&self.seed)),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    fn resolve(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = PipelineConfig::default();
        for (k, v) in self.pairs() {
            cfg.set(k, &v)?;
        }
        if let Some(path) = &self.config {
            apply_config_file(&mut cfg, path)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Core(Error),
    NoValidFrames(usize),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn align(burst_dir: &Path, output: &Path, report_path: &Path, cfg: &PipelineConfig) -> Result<(), Failure> {
    let burst = read_burst(burst_dir)?;
    let out = run_pipeline(&burst, cfg)?;
    out.merged.save(output)?;
    write_text(report_path, &(out.report.to_json() + "\n"))?;
    let r = &out.report;
    println!(
        "merged {} of {} frames (noise sigma {:.4}) -> {}",
        r.merged_count,
        r.frame_count,
        r.noise_sigma,
        output.display()
    );
    if let Some(m) = &r.metrics {
        if let (Some(a), Some(b)) = (m.merged_psnr, m.reference_psnr) {
            println!("PSNR {a:.2} dB, single frame {b:.2} dB, gain {:.2} dB", a - b);
        }
    }
    if r.frame_count > 1 && r.valid_alternatives() == 0 {
        return Err(Failure::NoValidFrames(r.frame_count - 1));
    }
    Ok(())
}

fn simulate(sim: &SimulateFlags, seed: u64, output: &Path) -> Result<(), Failure> {
    if sim.frames == 0 {
        return Err(Error::InvalidArgument("--frames must be at least 1".into()).into());
    }
    let burst = simulate_preset(sim.preset, sim.frames, sim.noise, seed)?;
    write_burst(output, &burst)?;
    println!(
        "wrote {} {} frames (noise {}, seed {}) to {}",
        sim.frames,
        sim.preset,
        sim.noise,
        seed,
        output.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    merged_psnr: f64,
    reference_psnr: f64,
    psnr_gain: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    homography_errors: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    median_homography_error: Option<f64>,
}

#[derive(serde::Deserialize)]
struct ReportFrames {
    frames: Vec<ReportFrame>,
}

#[derive(serde::Deserialize)]
struct ReportFrame {
    frame_id: usize,
    final_h: Homography,
}

fn evaluate(burst_dir: &Path, merged: &Path, report: Option<&Path>) -> Result<Evaluation, Failure> {
    let burst = read_burst(burst_dir)?;
    let truth = burst
        .truth
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no truth.json", burst_dir.display())))?;
    let clean = burst
        .clean_reference
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no {CLEAN_FILE}", burst_dir.display())))?;
    let merged = Image::load(merged)?;
    let merged_psnr = psnr(&merged, clean)?;
    let reference_psnr = psnr(&burst.frames[0], clean)?;

    let homography_errors = match report {
        None => None,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
            let parsed: ReportFrames = serde_json::from_str(&text).map_err(|e| {
                Failure::Core(Error::InputFormat {
                    path: path.to_path_buf(),
                    line: e.line(),
                    message: e.to_string(),
                })
            })?;
            let mut errors = Vec::new();
            for f in parsed.frames {
                let t = truth.homographies.get(f.frame_id).ok_or_else(|| Error::InputFormat {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!("frame {} is not in the burst", f.frame_id),
                })?;
                errors.push(homography_error(&f.final_h, t, burst.frames[0].dims()).unwrap_or(f64::INFINITY));
            }
            Some(errors)
        }
    };
    Ok(Evaluation {
        merged_psnr,
        reference_psnr,
        psnr_gain: merged_psnr - reference_psnr,
        median_homography_error: homography_errors.as_deref().and_then(median),
        homography_errors,
    })
}

fn emit(eval: &Evaluation, output: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(eval).expect("metrics serialize") + "\n";
    match output {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Align {
            burst,
            output,
            report,
            pipeline,
        } => align(&burst, &output, &report, &pipeline.resolve()?),
        Command::Simulate { sim, seed, output } => simulate(&sim, seed, &output),
        Command::Evaluate {
            burst,
            merged,
            report,
            output,
        } => emit(&evaluate(&burst, &merged, report.as_deref())?, output.as_deref()),
        Command::Demo { sim, output, pipeline } => {
            let cfg = pipeline.resolve()?;
            let burst_dir = output.join("burst");
            let merged = output.join("merged.png");
            let report = output.join("report.json");
            simulate(&sim, cfg.seed, &burst_dir)?;
            let aligned = align(&burst_dir, &merged, &report, &cfg);
            if let Err(Failure::NoValidFrames(_)) | Ok(()) = &aligned {
                let eval = evaluate(&burst_dir, &merged, Some(&report))?;
                emit(&eval, Some(&output.join("metrics.json")))?;
                println!("metrics -> {}", output.join("metrics.json").display());
            }
            aligned
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::FAILURE
            }
        }
        Err(Failure::NoValidFrames(n)) => {
            eprintln!("error: none of the {n} alternative frames passed selection");
            ExitCode::from(EXIT_NO_VALID_FRAMES)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line front end: simulate scenarios, run the pipeline, evaluate
//! tracks, and drive the configuration-sweep experiment.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use datmo::error::Error;
use datmo::eval;
use datmo::pipeline::{self, PipelineConfig};
use datmo::sim::{self, ScenarioSpec};

#[derive(Parser)]
#[command(name = "datmo", version, about = "Optical-flow DATMO for LiDAR point clouds")]
struct Cli {
    /// Print the full default configuration as TOML and exit.
    #[arg(long)]
    dump_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario dataset (frames + ego.csv + gt.jsonl).
    Simulate(SimulateArgs),
    /// Run the detection/tracking pipeline over a dataset directory.
    Run(RunArgs),
    /// Evaluate emitted tracks against ground truth.
    Eval(EvalArgs),
    /// Simulate, run and evaluate a configuration sweep in one pass.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario spec file (TOML, or JSON with a .json extension).
    #[arg(long)]
    spec: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario duration, seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input dataset: synthetic directory or KITTI sequence directory.
    #[arg(long)]
    input: PathBuf,
    /// Output track JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-frame stage timings to `<out>.timing.csv`.
    #[arg(long)]
    timing: bool,
    /// Also write the CSV mirror of the tracks to `<out>.csv`.
    #[arg(long)]
    csv: bool,
    /// Ego motion CSV (t,v,omega) for KITTI sequences.
    #[arg(long)]
    ego: Option<PathBuf>,
    /// Derive ground truth from KITTI labels and write it here.
    #[arg(long)]
    emit_gt: Option<PathBuf>,
    /// Frame rate assumed for KITTI sequences, Hz.
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    /// Dump per-frame grids/fields/clusters into this directory.
    #[arg(long)]
    debug_dump: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Pipeline configuration (for the evaluation parameters).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Track JSONL produced by `datmo run`.
    #[arg(long)]
    tracks: PathBuf,
    /// Ground-truth JSONL (simulator format).
    #[arg(long)]
    gt: PathBuf,
    /// metrics.json output path; errors.csv is written alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Pipeline configuration with an optional [sweep] section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep every k-th sweep configuration.
    #[arg(long)]
    decimate: Option<usize>,
    /// Output directory for metrics.json, errors.csv, sensitivity.csv,
    /// timing.csv.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap routes help/version prints through the error path too.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };

    if cli.dump_config {
        print!("{}", PipelineConfig::default().to_toml());
        return ExitCode::SUCCESS;
    }

    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (simulate, run, eval, sweep)");
        return ExitCode::from(1);
    };

    let result = match command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Contract(_) => ExitCode::from(1),
                Error::Data(_) | Error::Io { .. } | Error::Numerical(_) => ExitCode::from(2),
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig, Error> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_scenario(path: &Path) -> Result<ScenarioSpec, Error> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if path.extension().is_some_and(|x| x == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("scenario parse: {e}")))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("scenario parse: {e}")))
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let mut spec = load_scenario(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(duration) = args.duration {
        spec.duration = duration;
    }
    let frames = sim::write_dataset(&args.out, &spec)?;
    println!("wrote {frames} frames to {}", args.out.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let cfg = load_config(&args.config)?;
    let kind = pipeline::detect_input(&args.input)?;

    let mut pl = pipeline::Pipeline::new(cfg.clone())?;
    if let Some(dir) = &args.debug_dump {
        pl.set_debug_dir(dir.clone());
    }

    let result = match kind {
        pipeline::InputKind::Synthetic => {
            let source = pipeline::synthetic_source(&args.input)?;
            pipeline::run_frames_with(&mut pl, source)?
        }
        pipeline::InputKind::Kitti => {
            let seq = datmo::kitti::open_sequence(&args.input)?;
            if let Some(gt_path) = &args.emit_gt {
                let frames = datmo::kitti::derive_gt_frames(
                    &seq.labels,
                    &seq.calib,
                    args.rate,
                    seq.velodyne_files.len(),
                );
                write_gt_jsonl(gt_path, &frames)?;
            }
            let source =
                pipeline::kitti_source(&args.input, &seq, args.rate, args.ego.as_deref())?;
            pipeline::run_frames_with(&mut pl, source)?
        }
    };

    pipeline::write_tracks_jsonl(&args.out, &result.tracks)?;
    if args.csv {
        pipeline::write_tracks_csv(&args.out.with_extension("csv"), &result.tracks)?;
    }
    if args.timing {
        let timing_path = append_ext(&args.out, "timing.csv");
        eval::write_timing_csv(&timing_path, &result.timings)?;
    }
    let summary = result.timing_summary();
    println!(
        "{} frames ({} skipped), {} track emissions; avg frame {:.1} ms (flow {:.1} ms)",
        result.frames,
        result.skipped,
        result.tracks.len(),
        summary.total_ms,
        summary.flow_ms
    );
    Ok(())
}

fn append_ext(path: &Path, ext: &str) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".");
    os.push(ext);
    PathBuf::from(os)
}

fn write_gt_jsonl(path: &Path, frames: &[sim::GroundTruthFrame]) -> Result<(), Error> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for frame in frames {
        let line = serde_json::to_string(frame)
            .map_err(|e| Error::Data(format!("gt serialization: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn print_band(label: &str, m: &eval::BandMetrics) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!(
        "{label:8} {:>9.1} {:>7.1} {:>9} {:>11} {:>9.1}",
        m.precision * 100.0,
        m.recall * 100.0,
        fmt(m.sigma_v),
        fmt(m.sigma_theta),
        m.time_ms
    );
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let cfg = load_config(&args.config)?;
    let tracks = pipeline::read_tracks_jsonl(&args.tracks)?;
    let gt = pipeline::read_gt_jsonl(&args.gt)?;
    let mut params = cfg.eval;
    // Ground truth outside the processing crop is not detectable.
    let c = cfg.grid.crop;
    params.crop = Some([c.x_min, c.x_max, c.y_min, c.y_max]);

    let (records, unmatched) = eval::velocity_errors(&tracks, &gt, &params, None)?;
    let metrics = eval::metrics(&tracks, &gt, &params, &eval::TimingSummary::default())?;
    eval::write_metrics_json(&args.out, &metrics)?;
    let errors_path = args
        .out
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("errors.csv");
    eval::write_errors_csv(&errors_path, &records)?;

    println!("band     precision%  recall%  sigma_v  sigma_theta  time_ms");
    print_band("<=1 m/s", &metrics.low_dv);
    print_band(">1 m/s", &metrics.high_dv);
    if unmatched > 0 {
        println!("({unmatched} track emissions had no ground-truth match)");
    }
    println!("wrote {} and {}", args.out.display(), errors_path.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.config)?;
    if let Some(k) = args.decimate {
        cfg.sweep.decimate = k;
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;

    let scenarios = cfg.sweep.build_scenarios()?;
    println!("sweep: {} scenarios", scenarios.len());
    let mut records = Vec::new();
    let mut tally = eval::DetectionTally::default();
    let mut timings = Vec::new();
    for (k, spec) in scenarios.iter().enumerate() {
        let (result, gt, crop) =
            pipeline::run_simulated(&cfg, spec, cfg.sweep.auto_roi, cfg.sweep.roi_margin)?;
        let mut eval_params = cfg.eval.clone();
        eval_params.crop = Some([crop.x_min, crop.x_max, crop.y_min, crop.y_max]);
        let (recs, _) = eval::velocity_errors(&result.tracks, &gt, &eval_params, None)?;
        tally.merge(&eval::detection_scores(&result.tracks, &gt, &eval_params)?);
        let summary = result.timing_summary();
        println!(
            "  [{:>3}/{}] speed {:>4.1} offset {:>6.1} -> {} records, avg {:.0} ms/frame",
            k + 1,
            scenarios.len(),
            spec.tv.speed,
            spec.tv.lateral_offset,
            recs.len(),
            summary.total_ms,
        );
        records.extend(recs);
        timings.extend(result.timings);
    }

    let grid = eval::sensitivity_sweep(&records, 5.0, 5.0);
    eval::write_sensitivity_csv(&args.out.join("sensitivity.csv"), &grid)?;
    eval::write_errors_csv(&args.out.join("errors.csv"), &records)?;
    eval::write_timing_csv(&args.out.join("timing.csv"), &timings)?;
    let timing_summary = eval::timing_profile(&timings);
    // The sweep aggregates detection over all scenarios; the same tally
    // serves both bands of the metrics file.
    let summary = eval::error_distribution_summary(&records);
    let metrics = eval::Metrics {
        low_dv: eval::BandMetrics {
            precision: tally.precision(),
            recall: tally.recall(),
            sigma_v: summary.low_dv.sigma_v,
            sigma_theta: summary.low_dv.sigma_theta_deg,
            time_ms: timing_summary.total_ms,
        },
        high_dv: eval::BandMetrics {
            precision: tally.precision(),
            recall: tally.recall(),
            sigma_v: summary.high_dv.sigma_v,
            sigma_theta: summary.high_dv.sigma_theta_deg,
            time_ms: timing_summary.total_ms,
        },
    };
    eval::write_metrics_json(&args.out.join("metrics.json"), &metrics)?;
    println!(
        "sweep complete: {} error records, precision {:.3}, recall {:.3}",
        records.len(),
        tally.precision(),
        tally.recall()
    );
    println!("outputs in {}", args.out.display());
    Ok(())
}

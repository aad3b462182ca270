//! `embedtrack` command line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use embedtrack::clustering::{cluster_frame, ClusterConfig};
use embedtrack::oracle::{generate_sequence, BandwidthRecipe, SynthConfig};
use embedtrack::pipeline::{self, ctc, PipelineConfig, SynthExport, WORKERS_ENV};
use embedtrack::{par, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "embedtrack", version, about = "Cell segmentation and tracking from offset/bandwidth predictions")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

// Parsed once per process, so variant sizes do not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ideal prediction tensors.
    Synth(SynthArgs),
    /// Cluster one frame of a tensor file into a mask.
    Cluster(ClusterArgs),
    /// Link existing per-frame masks into tracks.
    Track(TrackArgs),
    /// Full run: inference replay, clustering, linking, evaluation.
    Pipeline(PipelineArgs),
    /// Score a result directory against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Dataset root to write.
    #[arg(long)]
    out: PathBuf,
    /// Where pair tensors go; defaults to `<out>/<sequence>_PRED`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "01")]
    sequence: String,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 12)]
    cells: usize,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 5.0)]
    radius_min: f64,
    #[arg(long, default_value_t = 9.0)]
    radius_max: f64,
    /// Maximum displacement per axis and frame, in pixels.
    #[arg(long, default_value_t = 2.0)]
    step: f64,
    #[arg(long, default_value_t = 0.02)]
    division_probability: f64,
    #[arg(long, default_value_t = 25)]
    max_cells: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Uniform noise amplitude added to segmentation offsets.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Fixed raw bandwidth inside cells instead of the cover-cell rule.
    #[arg(long)]
    constant_bandwidth: Option<f64>,
    #[arg(long, default_value_t = embedtrack::DEFAULT_BANDWIDTH_SCALE, allow_hyphen_values = true)]
    bandwidth_scale: f64,
}

#[derive(Args, Debug, Clone, Default)]
struct ClusterFlags {
    #[arg(long)]
    seediness_threshold: Option<f64>,
    #[arg(long)]
    kernel_accept_threshold: Option<f64>,
    #[arg(long)]
    min_neighbor_votes: Option<usize>,
    #[arg(long)]
    min_mask_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    bandwidth_scale: Option<f64>,
}

impl ClusterFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("seediness_threshold", self.seediness_threshold.map(|v| v.to_string()));
        push("kernel_accept_threshold", self.kernel_accept_threshold.map(|v| v.to_string()));
        push("min_neighbor_votes", self.min_neighbor_votes.map(|v| v.to_string()));
        push("min_mask_size", self.min_mask_size.map(|v| v.to_string()));
        push("bandwidth_scale", self.bandwidth_scale.map(|v| v.to_string()));
        out
    }

    fn config(&self) -> Result<ClusterConfig> {
        let mut cfg = PipelineConfig::default();
        for (k, v) in self.pairs() {
            cfg.set(k, &v)?;
        }
        cfg.cluster.validate()?;
        Ok(cfg.cluster)
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Slot {
    /// Frame t of the pair.
    T,
    /// Frame t-1 of the pair.
    Tm1,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    /// Pair tensor file.
    #[arg(long)]
    tensors: PathBuf,
    #[arg(long, value_enum, default_value = "t")]
    slot: Slot,
    /// Output 16-bit mask TIFF.
    #[arg(long)]
    output: PathBuf,
    /// Also write a colour-mapped PNG.
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[command(flatten)]
    cluster: ClusterFlags,
}

#[derive(Args, Debug)]
struct TrackArgs {
    /// Directory of `maskTTT.tif` files.
    #[arg(long)]
    masks: PathBuf,
    /// Directory of `pairTTT.etk` files.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// `key = value` configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    percentile_low: Option<f64>,
    #[arg(long)]
    percentile_high: Option<f64>,
    /// Comma-separated ops: identity, flip_h, flip_v, rot90, rot180, rot270 (or `all`).
    #[arg(long)]
    tta: Option<String>,
    #[command(flatten)]
    cluster: ClusterFlags,
    #[arg(long)]
    w_ns: Option<f64>,
    #[arg(long)]
    w_fn: Option<f64>,
    #[arg(long)]
    w_fp: Option<f64>,
    #[arg(long)]
    w_ed: Option<f64>,
    #[arg(long)]
    w_ea: Option<f64>,
    #[arg(long)]
    w_ec: Option<f64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    sequence: Option<String>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    training_masks: Option<PathBuf>,
    /// Write colour-mapped label overlays next to the masks.
    #[arg(long)]
    overlays: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Dataset root holding `<sequence>_GT`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "01")]
    sequence: String,
    /// Directory with `maskTTT.tif` and `res_track.txt`.
    #[arg(long)]
    results: PathBuf,
    /// Also write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn pipeline_config(args: &PipelineArgs, workers: Option<usize>) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    let s = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
    let n = |v: Option<f64>| v.map(|x| x.to_string());
    let mut flags: Vec<(&str, Option<String>)> = vec![
        ("crop_size", args.crop_size.map(|v| v.to_string())),
        ("overlap", args.overlap.map(|v| v.to_string())),
        ("percentile_low", n(args.percentile_low)),
        ("percentile_high", n(args.percentile_high)),
        ("tta", args.tta.clone()),
        ("w_ns", n(args.w_ns)),
        ("w_fn", n(args.w_fn)),
        ("w_fp", n(args.w_fp)),
        ("w_ed", n(args.w_ed)),
        ("w_ea", n(args.w_ea)),
        ("w_ec", n(args.w_ec)),
        ("dataset", s(&args.dataset)),
        ("sequence", args.sequence.clone()),
        ("predictions", s(&args.predictions)),
        ("output", s(&args.output)),
        ("training_masks", s(&args.training_masks)),
        ("workers", workers.map(|v| v.to_string())),
    ];
    if args.overlays {
        flags.push(("overlays", Some("true".into())));
    }
    flags.extend(args.cluster.pairs().into_iter().map(|(k, v)| (k, Some(v))));
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(args: &SynthArgs, workers: Option<usize>) -> Result<()> {
    let cfg = SynthConfig {
        height: args.height,
        width: args.width,
        n_cells: args.cells,
        frames: args.frames,
        radius: (args.radius_min, args.radius_max),
        step: args.step,
        division_probability: args.division_probability,
        max_cells: args.max_cells,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let seq = generate_sequence(&cfg)?;
    let recipe = match args.constant_bandwidth {
        Some(v) => BandwidthRecipe::Constant(v),
        None => BandwidthRecipe::default(),
    };
    let opts = SynthExport {
        sequence: args.sequence.clone(),
        recipe,
        w_s: args.bandwidth_scale,
        noise: args.noise,
        ..SynthExport::default()
    };
    let predictions = args
        .predictions
        .clone()
        .unwrap_or_else(|| args.out.join(format!("{}_PRED", args.sequence)));
    par::with_workers(workers, || pipeline::export_synth(&seq, &args.out, &predictions, &opts))?;
    println!(
        "frames={} tracks={} divisions={} predictions={}",
        seq.labels.len(),
        seq.graph.tracks.len(),
        seq.divisions(),
        predictions.display()
    );
    Ok(())
}

fn cluster(args: &ClusterArgs) -> Result<()> {
    let cfg = args.cluster.config()?;
    let pred = pipeline::read_tensors(&args.tensors)?;
    let seg = match args.slot {
        Slot::T => &pred.seg_t,
        Slot::Tm1 => &pred.seg_tm1,
    };
    let out = cluster_frame(&seg.offsets, &seg.bandwidth, &seg.seediness, &cfg)?;
    ctc::write_mask(&args.output, &out.labels)?;
    if let Some(p) = &args.overlay {
        ctc::write_overlay(p, &out.labels)?;
    }
    println!("instances={} rejected={}", out.centers.len(), out.rejected);
    Ok(())
}

fn track(args: &TrackArgs, workers: Option<usize>) -> Result<()> {
    let lineage = par::with_workers(workers, || pipeline::track_masks(&args.masks, &args.predictions))?;
    pipeline::write_outputs(&args.output, &lineage, None, false)?;
    println!("frames={} tracks={}", lineage.masks.len(), lineage.graph.tracks.len());
    Ok(())
}

fn run_pipeline(args: &PipelineArgs, workers: Option<usize>) -> Result<()> {
    let cfg = pipeline_config(args, workers)?;
    let outcome = pipeline::run_pipeline(&cfg)?;
    let (kv, _) = pipeline::report_text(
        outcome.lineage.masks.len(),
        outcome.lineage.graph.tracks.len(),
        outcome.report.as_ref(),
    );
    print!("{kv}");
    Ok(())
}

fn evaluate(args: &EvaluateArgs, workers: Option<usize>) -> Result<()> {
    let (report, pred) = par::with_workers(workers, || -> Result<_> {
        let data = ctc::read_ctc_dataset(&args.dataset, &args.sequence)?;
        let gt = data.gt.ok_or_else(|| {
            Error::NoInput(format!(
                "no ground truth under {}",
                ctc::gt_dir(&args.dataset, &args.sequence).display()
            ))
        })?;
        let pred = ctc::read_ctc_result(&args.results)?;
        Ok((pipeline::evaluate_against(&gt, &pred, &Default::default())?, pred))
    })?;
    let (kv, json) = pipeline::report_text(pred.masks.len(), pred.graph.tracks.len(), Some(&report));
    print!("{kv}");
    if let Some(p) = &args.json {
        std::fs::write(p, json).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.workers == Some(0) {
        return Err(Error::Usage("--workers must be at least 1".into()));
    }
    match &cli.command {
        Command::Synth(a) => synth(a, cli.workers),
        Command::Cluster(a) => par::with_workers(cli.workers, || cluster(a)),
        Command::Track(a) => track(a, cli.workers),
        Command::Pipeline(a) => run_pipeline(a, cli.workers),
        Command::Evaluate(a) => evaluate(a, cli.workers),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(2)
        }
    }
}

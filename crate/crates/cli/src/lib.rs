//! Command implementations behind the `lift` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lift_core::analysis::{count_macs_network, im2col_buffer_cells, GMAC_BUDGET};
use lift_core::config::{EngineConfig, CONFIG_SCHEMA};
use lift_core::network::{
    calibrate_model, detect_form, generate, input_qparams, load_weights, model_from_file, model_to_file,
    quant_to_file, Detector, LoadedWeights, WeightForm,
};
use lift_core::pcd_io::{format_detections, read_cloud};
use lift_core::pillarizer::pillarize;
use lift_core::weights::WeightFile;

/// Exit status when a MAC report exceeds the compute budget.
pub const EXIT_OVER_BUDGET: i32 = 1;
/// Exit status for invalid input, I/O failures and format errors.
pub const EXIT_ERROR: i32 = 2;

/// Probe inputs per layer when measuring fusion error.
const FUSE_PROBES: usize = 16;
const FUSE_PROBE_SEED: u64 = 0x5eed;

#[derive(Debug, Parser)]
#[command(name = "lift", version, about = "Sparse INT8 pillar detector for LiDAR point clouds")]
pub struct Cli {
    /// Worker threads (default: LIFT_THREADS, else all cores). Results do not
    /// depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect objects in one point cloud.
    Infer(InferArgs),
    /// Merge training-form branches into single 3x3 kernels.
    Fuse(FuseArgs),
    /// Write seeded synthetic weights.
    GenWeights(GenArgs),
    /// Count multiply-accumulates for one cloud.
    Macs(MacsArgs),
    /// Im2Col line-buffer size in cells.
    Ocm(OcmArgs),
    /// Quantize float weights using activation ranges from a set of clouds.
    Calibrate(CalibrateArgs),
    /// Print the default configuration (or its JSON schema).
    DefaultConfig(DefaultConfigArgs),
}

#[derive(Debug, Args)]
pub struct CloudArgs {
    /// Fields per record in binary clouds (x, y, z, intensity[, ring]).
    #[arg(long, default_value_t = 5)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub cloud: PathBuf,
    /// Engine configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Require real-valued weights.
    #[arg(long, conflicts_with = "int8")]
    pub float: bool,
    /// Require INT8 weights.
    #[arg(long)]
    pub int8: bool,
    #[command(flatten)]
    pub cloud_args: CloudArgs,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub weights_train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormArg {
    Train,
    Fused,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub form: FormArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MacsArgs {
    /// A point cloud, or a directory of clouds to average over.
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Emit the report as JSON.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub cloud_args: CloudArgs,
}

#[derive(Debug, Args)]
pub struct OcmArgs {
    /// Grid dimensions, X,Y or X,Y,Z.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<u64>,
    /// Window size per axis, KX,KY or KX,KY,KZ.
    #[arg(long, value_delimiter = ',', required = true)]
    pub context: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Directory of calibration clouds (.bin, .txt, .csv, .xyz), used in
    /// file-name order.
    #[arg(long)]
    pub clouds: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cloud_args: CloudArgs,
}

#[derive(Debug, Args)]
pub struct DefaultConfigArgs {
    /// Print the JSON schema instead.
    #[arg(long)]
    pub schema: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    match path {
        Some(p) => Ok(EngineConfig::load(p)?),
        None => Ok(EngineConfig::default()),
    }
}

fn read_weights(path: &Path) -> Result<WeightFile> {
    WeightFile::read(path).with_context(|| format!("reading weights {}", path.display()))
}

fn infer(args: &InferArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_deref())?;
    let file = read_weights(&args.weights)?;
    let weights = load_weights(&file, &cfg.network, cfg.in_features())?;
    match (&weights, args.float, args.int8) {
        (LoadedWeights::Int8(_), true, _) => bail!("--float given but {} holds INT8 weights", args.weights.display()),
        (LoadedWeights::Float(_), _, true) => bail!("--int8 given but {} holds real-valued weights", args.weights.display()),
        _ => {}
    }
    let detector = Detector::new(&cfg, weights)?;
    let start = Instant::now();
    let cloud = read_cloud(&args.cloud, args.cloud_args.stride)?;
    let result = detector.detect(&cloud)?;
    std::fs::write(&args.out, format_detections(&result.boxes))
        .with_context(|| format!("writing {}", args.out.display()))?;
    let r = &result.report;
    eprintln!(
        "points {} (kept {}, dropped {}), pillars {}",
        cloud.len(),
        r.points_kept,
        cloud.dropped,
        r.pillars
    );
    for (s, n) in r.stage_active.iter().enumerate() {
        eprintln!("stage {} active sites: {n}", s + 1);
    }
    eprintln!(
        "{} detections, {} path, total latency {:.2} ms",
        result.boxes.len(),
        if detector.is_int8() { "int8" } else { "float" },
        start.elapsed().as_secs_f64() * 1e3
    );
    Ok(0)
}

fn fuse(args: &FuseArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_deref())?;
    let file = read_weights(&args.weights_train)?;
    let form = detect_form(&file)?;
    if form != WeightForm::Train {
        bail!(
            "no branch tensors found in {}: it holds {} weights",
            args.weights_train.display(),
            form.name()
        );
    }
    let model = model_from_file(&file, &cfg.network, cfg.in_features())?;
    let deviation = model.fusion_deviation(FUSE_PROBES, FUSE_PROBE_SEED)?;
    let fused = model.fused()?;
    model_to_file(&fused)?.write(&args.out)?;
    println!("max relative deviation: {deviation:.3e}");
    Ok(0)
}

fn gen_weights(args: &GenArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_deref())?;
    let form = match args.form {
        FormArg::Train => WeightForm::Train,
        FormArg::Fused => WeightForm::Fused,
    };
    let model = generate(&cfg.network, cfg.in_features(), args.seed, form)?;
    model_to_file(&model)?.write(&args.out)?;
    Ok(0)
}

fn macs(args: &MacsArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_deref())?;
    if args.cloud.is_dir() {
        return macs_dir(args, &cfg);
    }
    let cloud = read_cloud(&args.cloud, args.cloud_args.stride)?;
    let report = count_macs_network(&cloud, &cfg)?;
    if args.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(if report.pass { 0 } else { EXIT_OVER_BUDGET })
}

/// Per-cloud totals and their mean; the budget applies to the mean.
fn macs_dir(args: &MacsArgs, cfg: &EngineConfig) -> Result<i32> {
    let mut rows = Vec::new();
    for path in cloud_files(&args.cloud)? {
        let cloud = read_cloud(&path, args.cloud_args.stride)?;
        let report = count_macs_network(&cloud, cfg)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push((name, report.total_macs, report.total_gmac));
    }
    let mean = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
    let pass = mean <= GMAC_BUDGET;
    if args.json {
        let clouds: Vec<_> = rows
            .iter()
            .map(|(name, macs, gmac)| serde_json::json!({ "file": name, "total_macs": macs, "total_gmac": gmac }))
            .collect();
        let doc = serde_json::json!({ "clouds": clouds, "mean_gmac": mean, "budget_gmac": GMAC_BUDGET, "pass": pass });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        for (name, macs, gmac) in &rows {
            println!("{name:<32} {macs:>16} MAC {gmac:>10.4} GMAC");
        }
        println!(
            "mean {mean:.4} GMAC over {} clouds (budget {GMAC_BUDGET} GMAC): {}",
            rows.len(),
            if pass { "PASS" } else { "OVER BUDGET" }
        );
    }
    Ok(if pass { 0 } else { EXIT_OVER_BUDGET })
}

fn ocm(args: &OcmArgs) -> Result<i32> {
    println!("{}", im2col_buffer_cells(&args.dims, &args.context)?);
    Ok(0)
}

const CLOUD_EXTENSIONS: [&str; 4] = ["bin", "txt", "csv", "xyz"];

fn cloud_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| CLOUD_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("no point clouds in {}", dir.display());
    }
    Ok(files)
}

fn calibrate(args: &CalibrateArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_deref())?;
    let file = read_weights(&args.weights)?;
    if detect_form(&file)? == WeightForm::Int8 {
        bail!("{} is already quantized", args.weights.display());
    }
    let model = model_from_file(&file, &cfg.network, cfg.in_features())?;
    let mut frames = Vec::new();
    for path in cloud_files(&args.clouds)? {
        let cloud = read_cloud(&path, args.cloud_args.stride)?;
        frames.push(pillarize(&cloud, &cfg.grid, &cfg.features)?);
    }
    let qm = calibrate_model(&model, &frames, input_qparams(&cfg.grid, &cfg.features)?, cfg.calibration)?;
    quant_to_file(&qm)?.write(&args.out)?;
    eprintln!("calibrated on {} clouds", frames.len());
    Ok(0)
}

fn default_config(args: &DefaultConfigArgs) -> Result<i32> {
    let text = if args.schema {
        CONFIG_SCHEMA.trim_end().to_string()
    } else {
        EngineConfig::default().to_json()
    };
    match &args.out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(0)
}

fn dispatch(command: &Command) -> Result<i32> {
    match command {
        Command::Infer(a) => infer(a),
        Command::Fuse(a) => fuse(a),
        Command::GenWeights(a) => gen_weights(a),
        Command::Macs(a) => macs(a),
        Command::Ocm(a) => ocm(a),
        Command::Calibrate(a) => calibrate(a),
        Command::DefaultConfig(a) => default_config(a),
    }
}

fn thread_count(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("LIFT_THREADS") {
        Ok(v) => v.trim().parse().with_context(|| format!("LIFT_THREADS={v} is not a thread count")),
        Err(_) => Ok(0),
    }
}

/// Runs a parsed command and returns the process exit status. Errors are
/// reported on standard error.
pub fn run(cli: Cli) -> i32 {
    let result = thread_count(cli.threads).and_then(|threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        pool.install(|| dispatch(&cli.command))
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

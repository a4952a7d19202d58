//! `kacd`: simulate changes, fit and apply anomalous change detectors,
//! evaluate them and tune their hyperparameters.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kacd_core::detectors::{fit, DetectorConfig, DetectorKind, Distribution, Lambda, Mode};
use kacd_core::eval::{apply_threshold, roc_curve, threshold_at_quantile, threshold_at_tpr};
use kacd_core::io::{self, PgmMap, TuningInfo};
use kacd_core::kernels::{HeuristicMethod, KernelKind, KernelSpec};
use kacd_core::raster::{sample_from_pool, ImageCube, PixelMatrix};
use kacd_core::simulate::simulate_change;
use kacd_core::tune::{default_grid, evaluate_grid, sam_sigma_grid, split_indices, training_sigma};
use kacd_core::Error;

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "kacd",
    version,
    about = "Anomalous change detection for co-registered image pairs"
)]
struct Cli {
    /// Seed for every random draw of the subcommand.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Worker threads (default: all cores). ACD_THREADS, when set, takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Add pervasive noise and scramble anomalous pixels to make a second image.
    Simulate(SimulateArgs),
    /// Fit a detector on sampled training pixels and write a model directory.
    Fit(FitArgs),
    /// Score every pixel of an image pair with a saved model.
    Score(ScoreArgs),
    /// Write the ROC curve of a score raster against labels and print the AUC.
    Roc(RocArgs),
    /// Render a score raster as a PGM image, thresholded or min-max scaled.
    Map(MapArgs),
    /// Grid-search hyperparameters by validation AUC.
    Tune(TuneArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// First image (raster with JSON sidecar).
    #[arg(long)]
    input: PathBuf,
    /// Noise standard deviation in units of each band's standard deviation.
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Fraction of pixels to scramble.
    #[arg(long, default_value_t = 0.01)]
    scramble_frac: f64,
    /// Output path of the second image.
    #[arg(long)]
    out: PathBuf,
    /// Output path of the label raster (1 = anomalous).
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DistArg {
    Gaussian,
    Ec,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Linear,
    Kernel,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KernelArg {
    Linear,
    Rbf,
    Sam,
}

impl From<KernelArg> for KernelKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Linear => KernelKind::Linear,
            KernelArg::Rbf => KernelKind::Rbf,
            KernelArg::Sam => KernelKind::Sam,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeuristicArg {
    Mean,
    Median,
}

impl From<HeuristicArg> for HeuristicMethod {
    fn from(h: HeuristicArg) -> Self {
        match h {
            HeuristicArg::Mean => HeuristicMethod::Mean,
            HeuristicArg::Median => HeuristicMethod::Median,
        }
    }
}

/// `auto` or a positive number.
#[derive(Clone, Copy, Debug, PartialEq)]
enum AutoOr {
    Auto,
    Value(f64),
}

fn parse_auto_or(s: &str) -> Result<AutoOr, String> {
    if s == "auto" {
        return Ok(AutoOr::Auto);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| format!("expected 'auto' or a number, got '{s}'"))?;
    if v > 0.0 && v.is_finite() {
        Ok(AutoOr::Value(v))
    } else {
        Err(format!("expected a positive finite value, got {v}"))
    }
}

fn parse_detector(s: &str) -> Result<DetectorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
struct PairArgs {
    /// First-acquisition image.
    #[arg(long)]
    x: PathBuf,
    /// Second-acquisition image.
    #[arg(long)]
    y: PathBuf,
}

#[derive(Args, Debug)]
struct DetectorArgs {
    /// rx, xy (chronochrome x|y), yx (chronochrome y|x) or hacd.
    #[arg(long, value_parser = parse_detector, default_value = "hacd")]
    detector: DetectorKind,
    #[arg(long, value_enum, default_value = "gaussian")]
    dist: DistArg,
    #[arg(long, value_enum, default_value = "linear")]
    mode: ModeArg,
    /// Kernel of the kernel mode.
    #[arg(long, value_enum, default_value = "rbf")]
    kernel: KernelArg,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Degrees of freedom of the EC model (required with --dist ec).
    #[arg(long)]
    nu: Option<f64>,
    /// Kernel bandwidth; `auto` uses the pairwise-distance heuristic.
    #[arg(long, value_parser = parse_auto_or, default_value = "auto")]
    sigma: AutoOr,
    /// Statistic of the bandwidth heuristic.
    #[arg(long, value_enum, default_value = "mean")]
    sigma_heuristic: HeuristicArg,
    /// Kernel regularizer; `auto` is 1e-5/n.
    #[arg(long, value_parser = parse_auto_or, default_value = "auto")]
    lambda: AutoOr,
    /// Number of training pixels (capped at the available pool).
    #[arg(long, default_value_t = 1000)]
    train_samples: usize,
    /// Labels; when given, training pixels come only from unchanged pixels.
    #[arg(long)]
    train_labels: Option<PathBuf>,
    /// Output model directory.
    #[arg(long)]
    model_out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    pair: PairArgs,
    /// Output score raster (one band).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RocArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Output CSV with columns fpr,tpr,threshold.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("rule").required(true).args(["threshold", "tpr_rate", "quantile", "scaled"])))]
struct MapArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Flag pixels scoring at or above this value.
    #[arg(long)]
    threshold: Option<f64>,
    /// Pick the threshold reaching this detection rate on --labels.
    #[arg(long, requires = "labels")]
    tpr_rate: Option<f64>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Flag roughly this fraction of the highest-scoring pixels.
    #[arg(long)]
    quantile: Option<f64>,
    /// Write min-max scaled scores instead of a binary map.
    #[arg(long)]
    scaled: bool,
    /// Output PGM path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Statistic of the bandwidth heuristic anchoring the σ grid.
    #[arg(long, value_enum, default_value = "mean")]
    sigma_heuristic: HeuristicArg,
    /// Number of percentile bandwidths tried for the SAM kernel.
    #[arg(long, default_value_t = 60)]
    sam_grid_points: usize,
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
    #[arg(long, default_value_t = 4000)]
    n_val: usize,
    /// Output CSV with columns nu,sigma,lambda,val_auc.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Output directory for the model refit with the best parameters.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                Error::Io(_)
                | Error::Json(_)
                | Error::Format { .. }
                | Error::CorruptModel(_)
                | Error::UnsupportedVersion(_) => EXIT_IO,
                Error::SingularCovariance => EXIT_NUMERICAL,
                Error::ZeroDispersion
                | Error::DegenerateLabels
                | Error::TooFewSamples { .. }
                | Error::CannotDerange(_) => EXIT_DEGENERATE,
                _ => EXIT_USAGE,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    let threads =
        match std::env::var("ACD_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                usage(format!("ACD_THREADS must be a positive integer, got '{v}'"))
            })?),
            Err(_) => flag,
        };
    if threads == Some(0) {
        return Err(usage("thread count must be at least 1"));
    }
    Ok(threads)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot start thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a, cli.seed),
        Command::Fit(a) => cmd_fit(a, cli.seed),
        Command::Score(a) => cmd_score(a),
        Command::Roc(a) => cmd_roc(a),
        Command::Map(a) => cmd_map(a),
        Command::Tune(a) => cmd_tune(a, cli.seed),
    }
}

fn cmd_simulate(a: SimulateArgs, seed: u64) -> CliResult<()> {
    if !(a.noise_std >= 0.0 && a.noise_std.is_finite()) {
        return Err(usage("--noise-std must be nonnegative"));
    }
    if !(a.scramble_frac > 0.0 && a.scramble_frac <= 1.0) {
        return Err(usage("--scramble-frac must lie in (0, 1]"));
    }
    let cube = io::read_raster(&a.input)?;
    let sim = simulate_change(&cube, a.noise_std, a.scramble_frac, seed).map_err(|e| match e {
        Error::CannotDerange(k) => usage(format!(
            "--scramble-frac selects {k} pixels; at least 2 are needed"
        )),
        e => e.into(),
    })?;
    io::write_raster(&a.out, &sim.second_image)?;
    io::write_labels(&a.labels, cube.height(), cube.width(), &sim.labels)?;
    println!(
        "scrambled {} of {} pixels",
        sim.anomaly_count(),
        cube.pixel_count()
    );
    Ok(())
}

/// Build a configuration from the flags; kernel bandwidth is a placeholder
/// until resolved against training data.
fn base_config(d: &DetectorArgs, nu: Option<f64>, lambda: AutoOr) -> CliResult<DetectorConfig> {
    let distribution = match d.dist {
        DistArg::Gaussian => Distribution::Gaussian,
        DistArg::Ec => Distribution::Ec {
            nu: nu.unwrap_or(1.0),
        },
    };
    let mode = match d.mode {
        ModeArg::Linear => Mode::Linear,
        ModeArg::Kernel => Mode::Kernel {
            kernel: KernelSpec::new(d.kernel.into(), 1.0)?,
            lambda: match lambda {
                AutoOr::Auto => Lambda::Auto,
                AutoOr::Value(v) => Lambda::Value(v),
            },
        },
    };
    let cfg = DetectorConfig::new(d.detector, distribution, mode);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn read_pair(p: &PairArgs) -> CliResult<(ImageCube, PixelMatrix, PixelMatrix)> {
    let x = io::read_raster(&p.x)?;
    let y = io::read_raster(&p.y)?;
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::UnalignedPair {
            left: x.pixel_count(),
            right: y.pixel_count(),
        }
        .into());
    }
    let (xm, ym) = (x.flatten(), y.flatten());
    Ok((x, xm, ym))
}

fn read_labels_for(path: &Path, pixels: usize) -> CliResult<Vec<bool>> {
    let labels = io::read_labels(path)?;
    if labels.len() != pixels {
        return Err(Error::DimensionMismatch {
            expected: pixels,
            got: labels.len(),
        }
        .into());
    }
    Ok(labels)
}

fn cmd_fit(a: FitArgs, seed: u64) -> CliResult<()> {
    if matches!(a.detector.dist, DistArg::Ec) {
        match a.nu {
            None => return Err(usage("--dist ec requires --nu")),
            Some(nu) if !(nu > 0.0 && nu.is_finite()) => {
                return Err(usage("--nu must be positive"))
            }
            _ => {}
        }
    }
    if a.train_samples < 2 {
        return Err(usage("--train-samples must be at least 2"));
    }
    let mut cfg = base_config(&a.detector, a.nu, a.lambda)?;

    let (cube, x, y) = read_pair(&a.pair)?;
    let pool: Vec<usize> = match &a.train_labels {
        Some(path) => {
            let labels = read_labels_for(path, cube.pixel_count())?;
            (0..labels.len()).filter(|&i| !labels[i]).collect()
        }
        None => (0..cube.pixel_count()).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_from_pool(&mut rng, &pool, a.train_samples.min(pool.len()))?;
    idx.sort_unstable();
    let (xt, yt) = (x.select_rows(&idx), y.select_rows(&idx));

    if let Mode::Kernel { kernel, .. } = cfg.mode {
        if kernel.kind != KernelKind::Linear {
            let sigma = match a.sigma {
                AutoOr::Value(v) => v,
                AutoOr::Auto => training_sigma(&xt, &yt, kernel.kind, a.sigma_heuristic.into())?,
            };
            cfg = cfg.with_sigma(sigma);
        }
    }
    let det = fit(&xt, &yt, &cfg)?;
    io::save_model(&det, &a.model_out)?;
    println!("fitted {} on {} pixels", cfg.label(), xt.n());
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> CliResult<()> {
    let det = io::load_model(&a.model)?;
    let (cube, x, y) = read_pair(&a.pair)?;
    let scores = det.score_pixels(&x, &y)?;
    io::write_scores(&a.out, cube.height(), cube.width(), &scores)?;
    Ok(())
}

fn cmd_roc(a: RocArgs) -> CliResult<()> {
    let (_, scores) = io::read_scores(&a.scores)?;
    let labels = read_labels_for(&a.labels, scores.len())?;
    let roc = roc_curve(&scores, &labels)?;
    io::write_roc_csv(&a.out, &roc)?;
    println!("auc {}", roc.auc);
    Ok(())
}

fn cmd_map(a: MapArgs) -> CliResult<()> {
    if let Some(r) = a.tpr_rate {
        if !(r > 0.0 && r <= 1.0) {
            return Err(usage("--tpr-rate must lie in (0, 1]"));
        }
    }
    if let Some(q) = a.quantile {
        if !(q > 0.0 && q < 1.0) {
            return Err(usage("--quantile must lie in (0, 1)"));
        }
    }
    if a.threshold.is_some_and(|t| t.is_nan()) {
        return Err(usage("--threshold must be a number"));
    }
    let (header, scores) = io::read_scores(&a.scores)?;
    let (h, w) = (header.height, header.width);
    if a.scaled {
        io::write_pgm(&a.out, h, w, PgmMap::Scaled(&scores))?;
        return Ok(());
    }
    let t = if let Some(t) = a.threshold {
        t
    } else if let Some(rate) = a.tpr_rate {
        let path = a.labels.as_deref().expect("clap enforces --labels");
        let labels = read_labels_for(path, scores.len())?;
        threshold_at_tpr(&scores, &labels, rate)?
    } else {
        threshold_at_quantile(&scores, a.quantile.expect("clap enforces one rule"))?
    };
    let map = apply_threshold(&scores, t);
    io::write_pgm(&a.out, h, w, PgmMap::Binary(&map))?;
    println!(
        "threshold {t}: {} of {} pixels flagged",
        map.iter().filter(|&&m| m).count(),
        map.len()
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

fn cmd_tune(a: TuneArgs, seed: u64) -> CliResult<()> {
    if a.n_train < 2 || a.n_val < 2 {
        return Err(usage("--n-train and --n-val must be at least 2"));
    }
    if a.sam_grid_points == 0 {
        return Err(usage("--sam-grid-points must be positive"));
    }
    let cfg = base_config(&a.detector, None, AutoOr::Auto)?;
    let (cube, x, y) = read_pair(&a.pair)?;
    let labels = read_labels_for(&a.labels, cube.pixel_count())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = split_indices(&mut rng, &labels, a.n_train, a.n_val)?;
    let (xt, yt) = (x.select_rows(&split.train), y.select_rows(&split.train));
    let (xv, yv) = (x.select_rows(&split.val), y.select_rows(&split.val));
    let val_labels: Vec<bool> = split.val.iter().map(|&i| labels[i]).collect();

    let grid = match cfg.mode {
        Mode::Linear => default_grid(&cfg, 1.0)?,
        Mode::Kernel { kernel, .. } => match kernel.kind {
            KernelKind::Linear => {
                let mut g = default_grid(&cfg, 1.0)?;
                g.sigma_multipliers.clear();
                g
            }
            KernelKind::Rbf => {
                let h = training_sigma(&xt, &yt, kernel.kind, a.sigma_heuristic.into())?;
                default_grid(&cfg, h)?
            }
            KernelKind::Sam => {
                let h = training_sigma(&xt, &yt, kernel.kind, a.sigma_heuristic.into())?;
                default_grid(&cfg, h)?.with_sigmas(sam_sigma_grid(&xt, &yt, a.sam_grid_points)?)
            }
        },
    };
    let result = evaluate_grid(&xt, &yt, &xv, &yv, &val_labels, &cfg, &grid)?;
    if let Some(path) = &a.trace_out {
        io::write_trace_csv(path, &result)?;
    }
    let best = result.best_params;
    println!(
        "best nu {} sigma {} lambda {} val_auc {}",
        fmt_opt(best.nu),
        fmt_opt(best.sigma),
        fmt_opt(best.lambda),
        result.best_val_auc
    );
    if let Some(dir) = &a.model_out {
        let det = fit(&xt, &yt, &best.apply(&cfg))?;
        io::save_model_with(&det, dir, Some(TuningInfo::from(&result)), None)?;
    }
    Ok(())
}

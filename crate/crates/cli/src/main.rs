mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, Utc};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use deeplight::dataset::{Dataset, DatasetWriter, Split};
use deeplight::grid::{FeatureId, GridSpec};
use deeplight::ingestion::fetch::{fetch_products, FetchConfig, HttpTransport, Source};
use deeplight::ingestion::points::{grid_point_products, GriddingOptions};
use deeplight::metrics::Pooling;
use deeplight::network::{DeepLight, ModelConfig};
use deeplight::synthetic::{generate_dataset, StormParams, TRAIN_FRAC, VAL_FRAC};
use deeplight::training::{ablate, checkpoint_stats, evaluate, train, Forecaster, TrainConfig, Variant};
use deeplight::window::{normalize_window, FrameCache};

/// Environment variable naming the raw-data cache directory.
const CACHE_ENV: &str = "DEEPLIGHT_CACHE";

#[derive(Parser, Debug)]
#[command(name = "deeplight", version, about = "Hourly lightning occurrence nowcasting")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download raw products, or grid decoded point products into a dataset.
    Ingest(IngestArgs),
    /// Write a synthetic storm dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train(TrainArgs),
    /// Score a checkpoint or the persistence baseline on one split.
    Eval(EvalArgs),
    /// Forecast h probability frames from one anchor time.
    Predict(PredictArgs),
    /// Render truth and forecast side by side, one PNG per lead time.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum IngestSource {
    Goes,
    Nexrad,
    /// Decoded hourly CSV point products (see the README).
    Points,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long, value_enum)]
    source: IngestSource,
    /// First hour, e.g. 2023-04-01T00 or RFC 3339.
    #[arg(long, value_parser = parse_time)]
    start: DateTime<Utc>,
    /// End of the half-open range.
    #[arg(long, value_parser = parse_time)]
    end: DateTime<Utc>,
    /// Radar station identifier.
    #[arg(long, default_value = "TDAL")]
    station: String,
    /// Fetch report directory (goes, nexrad) or dataset directory (points).
    #[arg(long)]
    out: PathBuf,
    /// Raw-data cache; defaults to `<out>/raw`.
    #[arg(long, env = CACHE_ENV)]
    cache: Option<PathBuf>,
    /// Directory of decoded point products; defaults to the cache directory.
    #[arg(long)]
    points: Option<PathBuf>,
    /// `dallas` (159×159) or a side length N for an N×N grid over the same box.
    #[arg(long, default_value = "dallas", value_parser = parse_grid)]
    grid: GridSpec,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Side length of the square grid.
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, default_value_t = 400)]
    hours: usize,
    #[arg(long, default_value_t = StormParams::default().seed)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_storms: Option<usize>,
    #[arg(long)]
    blob_sigma: Option<f64>,
    #[arg(long)]
    lifetime: Option<usize>,
    #[arg(long)]
    cloud_lead: Option<usize>,
    #[arg(long)]
    base_rate: Option<f64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    data: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stride: Option<usize>,
    /// Input history length s.
    #[arg(long)]
    history: Option<usize>,
    /// Forecast horizon h.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    c_branch: Option<usize>,
    #[arg(long)]
    c_stem: Option<usize>,
    #[arg(long)]
    c_hidden: Option<usize>,
    /// Ablation arm: full, no_hazy, no_multibranch, minus_D, minus_R, minus_L.
    #[arg(long, value_parser = Variant::from_str)]
    variant: Option<Variant>,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    Persistence,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("forecaster").required(true).args(["ckpt", "baseline"])))]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// counts or max_collapse.
    #[arg(long, default_value = "counts", value_parser = Pooling::from_str)]
    pooling: Pooling,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// History length for the baseline.
    #[arg(long, default_value_t = 6)]
    history: usize,
    /// Horizon for the baseline.
    #[arg(long, default_value_t = 6)]
    horizon: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Time of the first forecast hour; may be one hour past the record.
    #[arg(long, value_parser = parse_time)]
    anchor: DateTime<Utc>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Output directory of `predict`.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset holding the observed occurrence.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn parse_time(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    let s = s.trim_end_matches('Z');
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    if let Some((day, hour)) = s.split_once('T') {
        if let (Ok(d), Ok(h)) = (NaiveDate::parse_from_str(day, "%Y-%m-%d"), hour.parse::<u32>()) {
            if let Some(t) = d.and_hms_opt(h, 0, 0) {
                return Ok(t.and_utc());
            }
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc());
    }
    Err(format!("cannot parse '{s}' as a UTC time (try 2023-04-01T00)"))
}

fn parse_grid(s: &str) -> std::result::Result<GridSpec, String> {
    if s == "dallas" {
        return Ok(GridSpec::dallas());
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(GridSpec::dallas_square(n)),
        _ => Err(format!("expected 'dallas' or a positive side length, got '{s}'")),
    }
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(deeplight::Error::WouldOverwrite(path.to_path_buf()));
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize, force: bool) -> Result<()> {
    guard(path, force)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn ingest(args: IngestArgs) -> Result<()> {
    if args.end <= args.start {
        bail!("--end must be after --start");
    }
    let cache = args.cache.clone().unwrap_or_else(|| args.out.join("raw"));
    let source = match args.source {
        IngestSource::Goes => Source::Goes,
        IngestSource::Nexrad => Source::Nexrad,
        IngestSource::Points => {
            let points = args.points.unwrap_or(cache);
            let opts = GriddingOptions {
                grid: args.grid,
                start: args.start,
                hours: (args.end - args.start).num_hours() as usize,
                train_frac: TRAIN_FRAC,
                val_frac: VAL_FRAC,
                force: args.force,
            };
            let (manifest, summary) = grid_point_products(&points, &args.out, &opts)?;
            println!(
                "gridded {} hours onto {}x{} ({} gap frames, {} flashes outside the grid)",
                manifest.hours.len(),
                manifest.grid.rows,
                manifest.grid.cols,
                summary.gaps,
                summary.flashes.outside_footprint
            );
            return Ok(());
        }
    };
    let report_path = args.out.join("fetch_report.json");
    guard(&report_path, args.force)?;
    let mut config = FetchConfig::new(&cache);
    config.station = args.station;
    let report = fetch_products(&HttpTransport::default(), &config, source, args.start, args.end)?;
    write_json(&report_path, &report, true)?;
    println!(
        "{} files downloaded, {} reused, {} gaps; cache {}",
        report.downloaded,
        report.reused,
        report.gaps.len(),
        cache.display()
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut params = StormParams {
        seed: args.seed,
        ..StormParams::default()
    };
    if let Some(v) = args.n_storms {
        params.n_storms = v;
    }
    if let Some(v) = args.blob_sigma {
        params.blob_sigma = v;
    }
    if let Some(v) = args.lifetime {
        params.lifetime = v;
    }
    if let Some(v) = args.cloud_lead {
        params.cloud_lead = v;
    }
    if let Some(v) = args.base_rate {
        params.base_rate = v;
    }
    let manifest = generate_dataset(&args.out, &GridSpec::dallas_square(args.grid), args.hours, &params, args.force)?;
    println!(
        "wrote {} hours on a {}x{} grid to {}",
        manifest.hours.len(),
        manifest.grid.rows,
        manifest.grid.cols,
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_json_file(path)?,
        None => TrainConfig::new(PathBuf::new(), PathBuf::new(), ModelConfig::new(0, 0)),
    };
    if let Some(v) = args.data {
        cfg.data = v;
    }
    if let Some(v) = args.out {
        cfg.out = v;
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = args.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(
        epochs => epochs,
        lr => learning_rate,
        batch_size => batch_size,
        seed => seed,
        stride => stride,
        history => model.s,
        horizon => model.h,
        c_branch => model.c_branch,
        c_stem => model.c_stem,
        c_hidden => model.c_hidden,
        threshold => threshold,
    );
    if let Some(variant) = args.variant {
        cfg = ablate(&cfg, variant)?;
    }
    let outcome = train(&cfg, args.force)?;
    println!(
        "best epoch {} (val strict 1h ETS {:.4}); checkpoints in {}; log {}",
        outcome.best_epoch,
        outcome.best_val_ets,
        cfg.out.display(),
        outcome.log_path.display()
    );
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    if let Some(out) = &args.out {
        guard(out, args.force)?;
    }
    let forecaster = match (&args.ckpt, args.baseline) {
        (Some(path), _) => Forecaster::Checkpoint(path),
        (None, Some(Baseline::Persistence)) => Forecaster::Persistence {
            s: args.history,
            h: args.horizon,
        },
        (None, None) => unreachable!("clap requires one forecaster"),
    };
    let report = evaluate(forecaster, &args.data, args.split.into(), args.threshold, args.pooling, args.stride)?;
    print!("{}", report.table.to_tsv());
    if let Some(out) = &args.out {
        write_json(out, &report, true)?;
    }
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let (model, sidecar) = DeepLight::load(&args.ckpt)?;
    let dataset = Dataset::open(&args.data)?;
    let manifest = dataset.manifest();
    let grid = manifest.grid;
    if (grid.rows, grid.cols) != (model.config.rows, model.config.cols) {
        bail!(
            "checkpoint grid {}x{} does not match dataset grid {}x{}",
            model.config.rows,
            model.config.cols,
            grid.rows,
            grid.cols
        );
    }
    let n = manifest.hours.len();
    let anchor = match manifest.hour_index(args.anchor) {
        Some(i) => i,
        None if n > 0 && args.anchor == manifest.hours[n - 1] + Duration::hours(1) => n,
        None => bail!("anchor {} is not an hour of the dataset nor the hour after it", args.anchor),
    };
    let stats = checkpoint_stats(&sidecar.metadata).unwrap_or_else(|| manifest.normalization.clone());
    let cache = FrameCache::load(&dataset)?;
    let window = normalize_window(&cache.forecast_window(anchor, model.config.s, model.config.h)?, &stats);
    let probs = model.predict(&[&window])?;
    let h = model.config.h;
    let times = (0..h).map(|k| window.anchor_time + Duration::hours(k as i64)).collect();
    let mut writer = DatasetWriter::create(&args.out, grid, &[FeatureId::Probability], times, vec![Split::Test; h], args.force)?;
    for (k, frame) in probs.data().chunks(grid.cells()).enumerate() {
        writer.write(FeatureId::Probability, k, frame)?;
    }
    writer.finish()?;
    println!("wrote {h} probability frames from {} to {}", window.anchor_time, args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Plot(a) => plot::plot(&a.pred, &a.truth, &a.out, a.force).map(|files| {
            println!("wrote {} images to {}", files.len(), a.out.display());
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn times_parse_in_several_forms() {
        let t = Utc.with_ymd_and_hms(2023, 4, 1, 15, 0, 0).unwrap();
        for s in ["2023-04-01T15", "2023-04-01T15:00", "2023-04-01T15:00:00Z", "2023-04-01 15:00", "2023-04-01T17:00:00+02:00"] {
            assert_eq!(parse_time(s).unwrap(), t, "{s}");
        }
        assert_eq!(parse_time("2023-04-01").unwrap(), t - Duration::hours(15));
        assert!(parse_time("2023-04-01T25").is_err());
        assert!(parse_time("yesterday").is_err());
    }

    #[test]
    fn grids_parse_by_name_or_size() {
        assert_eq!(parse_grid("dallas").unwrap(), GridSpec::dallas());
        let g = parse_grid("32").unwrap();
        assert_eq!((g.rows, g.cols), (32, 32));
        assert!(parse_grid("0").is_err());
        assert!(parse_grid("big").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}

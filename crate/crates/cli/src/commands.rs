//! Subcommand implementations. Each resolves all of its settings and checks
//! its inputs before touching the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use chrono::NaiveDate;
use clap::Args;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use deepsd::asd::{self, AsdConfig, AsdLocationModel};
use deepsd::bcsd::{self, BcsdParams};
use deepsd::grid::{self, encode_grd, read_raster, read_series, write_raster, write_series, GeoGrid, SeriesManifest};
use deepsd::metrics::{self, REPORT_HEADER};
use deepsd::nn::{save_checkpoint, Architecture, DEFAULT_LEARNING_RATES};
use deepsd::stack::{self, StackFile};
use deepsd::synth::{self, SynthConfig};
use deepsd::train::{self, LevelConfig};

use crate::settings::{must_exist, usage, Failure, Outcome, Settings};
use crate::Common;

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Shared state of one invocation.
struct Run {
    command: &'static str,
    settings: Settings,
    seed: u64,
    threads: usize,
    out: PathBuf,
}

impl Run {
    fn start(command: &'static str, common: &Common) -> Outcome<Self> {
        let settings = Settings::load(common.config.as_deref())?;
        let seed = settings.value("seed", common.seed, 0u64)?;
        let threads = settings.value("threads", common.threads, 1usize)?;
        if threads == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        let out = match common.out.clone() {
            Some(p) => p,
            None => settings.take_unrecorded("out").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")),
        };
        Ok(Self { command, settings, seed, threads, out })
    }

    /// Rejects stray config keys, creates the output directory and writes
    /// the provenance record. Call once every setting has been resolved.
    fn begin(&self) -> Outcome<()> {
        let resolved = self.settings.finish()?;
        // A second global pool cannot be installed; the first one wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(self.threads).build_global();
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let record = serde_json::json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "threads": self.threads,
            "settings": resolved,
        });
        let text = serde_json::to_string_pretty(&record).expect("provenance serializes") + "\n";
        self.write(PROVENANCE_FILE, text.as_bytes())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Outcome<()> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn load_series(key: &str, dir: &Path) -> Outcome<(SeriesManifest, Vec<GeoGrid>)> {
    read_series(dir).with_context(|| format!("--{key} {}", dir.display())).map_err(Failure::from)
}

fn read_text(key: &str, path: &Path) -> Outcome<String> {
    fs::read_to_string(path).with_context(|| format!("--{key} {}", path.display())).map_err(Failure::from)
}

fn parse_date(key: &str, text: &str) -> Outcome<NaiveDate> {
    NaiveDate::parse_from_str(text, "%Y-%m-%d").map_err(|e| usage(format!("--{key} {text:?}: {e}")))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    rain_fraction: Option<f64>,
    #[arg(long)]
    coupling: Option<f64>,
    #[arg(long)]
    storm_length: Option<f64>,
    #[arg(long)]
    skew: Option<f64>,
    #[arg(long)]
    intensity_shape: Option<f64>,
    #[arg(long)]
    intensity_scale: Option<f64>,
    #[arg(long)]
    terrain_slope: Option<f64>,
    /// First date of the series, YYYY-MM-DD.
    #[arg(long)]
    start_date: Option<String>,
    #[arg(long)]
    lat0: Option<f64>,
    #[arg(long)]
    lon0: Option<f64>,
    /// Cell size in degrees.
    #[arg(long)]
    cell: Option<f64>,
}

pub fn synth(a: SynthArgs) -> Outcome<()> {
    let run = Run::start("synth", &a.common)?;
    let s = &run.settings;
    let d = SynthConfig::default();
    let start = s.value("start-date", a.start_date, d.start_date.format("%Y-%m-%d").to_string())?;
    let cfg = SynthConfig {
        rows: s.value("rows", a.rows, d.rows)?,
        cols: s.value("cols", a.cols, d.cols)?,
        days: s.value("days", a.days, d.days)?,
        seed: run.seed,
        rain_fraction: s.value("rain-fraction", a.rain_fraction, d.rain_fraction)?,
        coupling: s.value("coupling", a.coupling, d.coupling)?,
        storm_length: s.value("storm-length", a.storm_length, d.storm_length)?,
        skew: s.value("skew", a.skew, d.skew)?,
        intensity_shape: s.value("intensity-shape", a.intensity_shape, d.intensity_shape)?,
        intensity_scale: s.value("intensity-scale", a.intensity_scale, d.intensity_scale)?,
        terrain_slope: s.value("terrain-slope", a.terrain_slope, d.terrain_slope)?,
        start_date: parse_date("start-date", &start)?,
        lat0: s.value("lat0", a.lat0, d.lat0)?,
        lon0: s.value("lon0", a.lon0, d.lon0)?,
        cell: s.value("cell", a.cell, d.cell)?,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    run.begin()?;

    let elevation = synth::gen_elevation(&cfg)?;
    let days = (0..cfg.days)
        .into_par_iter()
        .map(|day| synth::gen_precip_day(&elevation, &cfg, day))
        .collect::<Result<Vec<_>, _>>()?;
    write_raster(&elevation, run.path("elevation.grd"))?;
    let manifest = SeriesManifest::new(cfg.days, "precipitation", "mm/day", cfg.start_date);
    write_series(&run.path("precip"), &days, &manifest)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct CoarsenArgs {
    #[command(flatten)]
    common: Common,
    /// A series directory or a single .grd raster.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    factor: Option<usize>,
}

pub fn coarsen(a: CoarsenArgs) -> Outcome<()> {
    let run = Run::start("coarsen", &a.common)?;
    let input = run.settings.required_path("input", a.input)?;
    let factor = run.settings.value("factor", a.factor, 8usize)?;
    if factor < 2 {
        return Err(usage("--factor must be at least 2"));
    }
    must_exist("input", &input)?;
    let name = input.file_name().ok_or_else(|| usage("--input has no file name"))?.to_owned();
    run.begin()?;

    if input.is_dir() {
        let (manifest, days) = load_series("input", &input)?;
        let coarse = days.par_iter().map(|g| grid::coarsen(g, factor)).collect::<Result<Vec<_>, _>>()?;
        write_series(&run.out.join(&name), &coarse, &manifest)?;
    } else {
        let g = read_raster(&input).with_context(|| format!("--input {}", input.display()))?;
        write_raster(&grid::coarsen(&g, factor)?, run.out.join(&name))?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// High-resolution precipitation series.
    #[arg(long)]
    precip: Option<PathBuf>,
    /// High-resolution elevation raster on the precipitation grid.
    #[arg(long)]
    elevation: Option<PathBuf>,
    /// Train on the first N days only.
    #[arg(long)]
    days: Option<usize>,
    /// Number of stacked levels to train, coarse to fine.
    #[arg(long)]
    levels: Option<usize>,
    /// How much coarser than --precip the finest level's output is.
    #[arg(long)]
    output_factor: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr1: Option<f64>,
    #[arg(long)]
    lr2: Option<f64>,
    #[arg(long)]
    lr3: Option<f64>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long)]
    f1: Option<usize>,
    #[arg(long)]
    f2: Option<usize>,
    #[arg(long)]
    f3: Option<usize>,
}

pub fn train(a: TrainArgs) -> Outcome<()> {
    let run = Run::start("train", &a.common)?;
    let s = &run.settings;
    let precip = s.required_path("precip", a.precip)?;
    let elevation = s.required_path("elevation", a.elevation)?;
    let days = s.optional("days", a.days)?;
    let levels = s.value("levels", a.levels, 1usize)?;
    let output_factor = s.value("output-factor", a.output_factor, 1usize)?;
    let d = LevelConfig::default();
    let da = Architecture::default();
    let cfg = LevelConfig {
        scale: s.value("scale", a.scale, d.scale)?,
        patch: s.value("patch", a.patch, d.patch)?,
        stride: s.value("stride", a.stride, d.stride)?,
        batch: s.value("batch", a.batch, d.batch)?,
        iterations: s.value("iterations", a.iterations, d.iterations)?,
        seed: run.seed,
        learning_rates: [
            s.value("lr1", a.lr1, DEFAULT_LEARNING_RATES[0])?,
            s.value("lr2", a.lr2, DEFAULT_LEARNING_RATES[1])?,
            s.value("lr3", a.lr3, DEFAULT_LEARNING_RATES[2])?,
        ],
        arch: Architecture {
            n1: s.value("n1", a.n1, da.n1)?,
            n2: s.value("n2", a.n2, da.n2)?,
            f1: s.value("f1", a.f1, da.f1)?,
            f2: s.value("f2", a.f2, da.f2)?,
            f3: s.value("f3", a.f3, da.f3)?,
            ..da
        },
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if levels == 0 || output_factor == 0 || days == Some(0) {
        return Err(usage("--levels, --output-factor and --days must be at least 1"));
    }
    must_exist("precip", &precip)?;
    must_exist("elevation", &elevation)?;
    run.begin()?;

    let (_, mut series) = load_series("precip", &precip)?;
    if let Some(n) = days {
        if n > series.len() {
            return Err(Failure::Data(anyhow!("--days {n} exceeds the {} days in --precip", series.len())));
        }
        series.truncate(n);
    }
    let hr_elevation = read_raster(&elevation).with_context(|| format!("--elevation {}", elevation.display()))?;

    let mut stack = StackFile { elevation: PathBuf::from("elevation.grd"), levels: Vec::new() };
    for k in 0..levels {
        let factor = output_factor * cfg.scale.pow((levels - 1 - k) as u32);
        let level_cfg = LevelConfig { seed: run.seed.wrapping_add(k as u64), ..cfg.clone() };
        let set = train::make_training_pairs(&series, &hr_elevation, factor, &level_cfg)?;
        let every = (level_cfg.iterations / 10).max(1);
        let outcome = train::train_level_with(&set, &level_cfg, |i, loss| {
            if i % every == 0 {
                eprintln!("level {}: iteration {i}/{} loss {loss:.6e}", k + 1, level_cfg.iterations);
            }
        })?;
        let ckpt = format!("level{}.src", k + 1);
        save_checkpoint(&outcome.params, run.path(&ckpt))?;
        run.write(&format!("level{}_loss.csv", k + 1), train::loss_csv(&outcome.losses).as_bytes())?;
        stack.levels.push((cfg.scale, PathBuf::from(ckpt)));
    }
    let finest = if output_factor > 1 { grid::coarsen(&hr_elevation, output_factor)? } else { hr_elevation };
    write_raster(&finest, run.path("elevation.grd"))?;
    run.write("level.cfg", cfg.to_key_values().to_text().as_bytes())?;
    run.write("stack.txt", stack::render_stack_file(&stack).as_bytes())?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    common: Common,
    /// Stack description file.
    #[arg(long)]
    stack: Option<PathBuf>,
    /// Low-resolution precipitation series.
    #[arg(long)]
    input: Option<PathBuf>,
}

pub fn infer(a: InferArgs) -> Outcome<()> {
    let run = Run::start("infer", &a.common)?;
    let stack_path = run.settings.required_path("stack", a.stack)?;
    let input = run.settings.required_path("input", a.input)?;
    must_exist("stack", &stack_path)?;
    must_exist("input", &input)?;
    run.begin()?;

    let chain = stack::load_stack(&stack_path).with_context(|| format!("--stack {}", stack_path.display()))?;
    let (manifest, days) = load_series("input", &input)?;
    let out = days.par_iter().map(|g| stack::infer(&chain, g)).collect::<Result<Vec<_>, _>>()?;
    write_series(&run.path("precip"), &out, &manifest)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct BcsdArgs {
    #[command(flatten)]
    common: Common,
    /// High-resolution observed series to fit scaling factors on.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Previously fitted model directory.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Low-resolution series to downscale.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    factor: Option<usize>,
    /// Smallest interpolated climatology used as a denominator, mm/day.
    #[arg(long)]
    floor: Option<f64>,
    /// Largest allowed scaling factor.
    #[arg(long)]
    cap: Option<f64>,
}

pub fn bcsd(a: BcsdArgs) -> Outcome<()> {
    let run = Run::start("bcsd", &a.common)?;
    let s = &run.settings;
    let train_dir = s.path("train", a.train)?;
    let model_dir = s.path("model", a.model)?;
    let input = s.path("input", a.input)?;
    let d = BcsdParams::default();
    let params = BcsdParams {
        factor: s.value("factor", a.factor, d.factor)?,
        floor: s.value("floor", a.floor, d.floor)?,
        cap: s.value("cap", a.cap, d.cap)?,
    };
    params.validate().map_err(|e| usage(e.to_string()))?;
    match (&train_dir, &model_dir) {
        (Some(_), Some(_)) => return Err(usage("--train and --model are mutually exclusive")),
        (None, None) => return Err(usage("one of --train or --model is required")),
        _ => {}
    }
    if model_dir.is_some() && input.is_none() {
        return Err(usage("--model without --input has nothing to do"));
    }
    for (key, p) in [("train", &train_dir), ("model", &model_dir), ("input", &input)] {
        if let Some(p) = p {
            must_exist(key, p)?;
        }
    }
    run.begin()?;

    let model = if let Some(dir) = &train_dir {
        let (manifest, obs) = load_series("train", dir)?;
        let model = bcsd::fit_bcsd(&obs, &manifest.dates()?, params)?;
        bcsd::save_bcsd(&model, &run.path("model"))?;
        model
    } else {
        let dir = model_dir.as_ref().expect("checked above");
        bcsd::load_bcsd(dir).with_context(|| format!("--model {}", dir.display()))?
    };
    if let Some(input) = &input {
        let (manifest, lr) = load_series("input", input)?;
        let out = bcsd::downscale_bcsd(&model, &lr, &manifest.dates()?)?;
        write_series(&run.path("precip"), &out, &manifest)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct AsdArgs {
    #[command(flatten)]
    common: Common,
    /// High-resolution observed training series.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Matching low-resolution training series; defaults to area-averaging --train.
    #[arg(long)]
    train_lr: Option<PathBuf>,
    /// Fine cells per coarse cell.
    #[arg(long)]
    factor: Option<usize>,
    /// Low-resolution series to predict.
    #[arg(long)]
    input: Option<PathBuf>,
    /// File of `row col` lines on the fine grid.
    #[arg(long)]
    locations: Option<PathBuf>,
    /// Comma-separated penalty grid searched by cross-validation.
    #[arg(long)]
    lambdas: Option<String>,
    /// Daily amount (mm) above which a day counts as rainy.
    #[arg(long)]
    rain_threshold: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
}

pub fn asd(a: AsdArgs) -> Outcome<()> {
    let run = Run::start("asd", &a.common)?;
    let s = &run.settings;
    let train_dir = s.required_path("train", a.train)?;
    let train_lr = s.path("train-lr", a.train_lr)?;
    let factor = s.value("factor", a.factor, 8usize)?;
    let input = s.path("input", a.input)?;
    let locations = s.required_path("locations", a.locations)?;
    let lambdas: Vec<f64> = s.list("lambdas", a.lambdas, &asd::DEFAULT_LAMBDAS)?;
    let cfg = AsdConfig {
        rain_threshold: s.value("rain-threshold", a.rain_threshold, asd::DEFAULT_RAIN_THRESHOLD)?,
        folds: s.value("folds", a.folds, AsdConfig::default().folds)?,
        seed: run.seed,
    };
    if factor < 2 || cfg.folds < 2 {
        return Err(usage("--factor and --folds must be at least 2"));
    }
    if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(usage("--lambdas must be finite and non-negative"));
    }
    must_exist("train", &train_dir)?;
    must_exist("locations", &locations)?;
    for (key, p) in [("train-lr", &train_lr), ("input", &input)] {
        if let Some(p) = p {
            must_exist(key, p)?;
        }
    }
    let locs = asd::parse_locations(&read_text("locations", &locations)?)?;
    run.begin()?;

    let (_, hr) = load_series("train", &train_dir)?;
    let lr = match &train_lr {
        Some(dir) => load_series("train-lr", dir)?.1,
        None => hr.par_iter().map(|g| grid::coarsen(g, factor)).collect::<Result<Vec<_>, _>>()?,
    };
    if let (Some(h), Some(l)) = (hr.first(), lr.first()) {
        if h.rows() != l.rows() * factor || h.cols() != l.cols() * factor {
            return Err(Failure::Data(anyhow!(
                "fine grid {:?} is not --factor {factor} times coarse grid {:?}",
                h.dims(),
                l.dims()
            )));
        }
    }
    let models: Vec<AsdLocationModel> = locs
        .par_iter()
        .map(|&(row, col)| asd::fit_asd(row, col, &lr, &hr, &lambdas, &cfg))
        .collect::<Result<_, _>>()?;
    let model_dir = run.path("models");
    fs::create_dir_all(&model_dir).with_context(|| format!("creating {}", model_dir.display()))?;
    for m in &models {
        let path = model_dir.join(format!("loc_{}_{}.asd", m.row, m.col));
        fs::write(&path, asd::encode_model(m)).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(input) = &input {
        let (_, days) = load_series("input", input)?;
        let mut csv = String::from("day,location,row,col,value\n");
        for (d, day) in days.iter().enumerate() {
            for (l, m) in models.iter().enumerate() {
                let _ = writeln!(csv, "{d},{l},{},{},{}", m.row, m.col, m.predict(day));
            }
        }
        run.write("predictions.csv", csv.as_bytes())?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Observed series.
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Predicted series on the same grid and days.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// File of `row col` lines; every cell when omitted.
    #[arg(long)]
    locations: Option<PathBuf>,
    /// Comma-separated percentiles for the extreme sweep.
    #[arg(long)]
    thresholds: Option<String>,
    /// Locations with fewer selected days are dropped from a threshold.
    #[arg(long)]
    min_events: Option<usize>,
}

pub fn evaluate(a: EvaluateArgs) -> Outcome<()> {
    let run = Run::start("evaluate", &a.common)?;
    let s = &run.settings;
    let obs_dir = s.required_path("obs", a.obs)?;
    let pred_dir = s.required_path("pred", a.pred)?;
    let loc_file = s.path("locations", a.locations)?;
    let thresholds: Vec<f64> = s.list("thresholds", a.thresholds, &metrics::EXTREME_THRESHOLDS)?;
    let min_events = s.value("min-events", a.min_events, metrics::DEFAULT_MIN_EVENTS)?;
    if thresholds.iter().any(|p| !(0.0..=100.0).contains(p)) {
        return Err(usage("--thresholds must lie in [0, 100]"));
    }
    must_exist("obs", &obs_dir)?;
    must_exist("pred", &pred_dir)?;
    let locs = match &loc_file {
        Some(p) => {
            must_exist("locations", p)?;
            Some(asd::parse_locations(&read_text("locations", p)?)?)
        }
        None => None,
    };
    run.begin()?;

    let (manifest, obs) = load_series("obs", &obs_dir)?;
    let (_, pred) = load_series("pred", &pred_dir)?;
    if obs.len() != pred.len() {
        return Err(Failure::Data(anyhow!("--obs has {} days, --pred has {}", obs.len(), pred.len())));
    }
    let first = obs.first().ok_or_else(|| Failure::Data(anyhow!("--obs is empty")))?;
    let locs = locs.unwrap_or_else(|| metrics::all_locations(first.rows(), first.cols()));
    let o = metrics::location_series(&obs, &locs)?;
    let p = metrics::location_series(&pred, &locs)?;

    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    csv.push_str(&metrics::report_row("all", "", Some(&metrics::overall_report(&o, &p)?)));
    for (season, report) in metrics::seasonal_report(&o, &p, &manifest.dates()?)? {
        csv.push_str(&metrics::report_row("season", season.label(), report.as_ref()));
    }
    match metrics::extreme_sweep(&o, &p, &thresholds, min_events) {
        Ok(sweep) => {
            for (t, report) in sweep {
                csv.push_str(&metrics::report_row("extreme", &format!("{t}"), report.as_ref()));
            }
        }
        Err(metrics::MetricsError::NoEvents) => {
            for t in &thresholds {
                csv.push_str(&metrics::report_row("extreme", &format!("{t}"), None));
            }
        }
        Err(e) => return Err(e.into()),
    }
    run.write("report.csv", csv.as_bytes())?;
    write_raster(&metrics::rmse_raster(&obs, &pred)?, run.path("rmse.grd"))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    common: Common,
    /// Stack description file.
    #[arg(long)]
    stack: Option<PathBuf>,
    /// Low-resolution series to downscale.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Fitted BCSD model directory to time alongside the stack.
    #[arg(long)]
    bcsd: Option<PathBuf>,
}

/// Benchmark timings, excluded from the byte-determinism contract.
pub const TIMING_FILE: &str = "timing.csv";

fn digest(days: &[GeoGrid]) -> String {
    let mut h = Sha256::new();
    for g in days {
        h.update(encode_grd(g));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn benchmark(a: BenchmarkArgs) -> Outcome<()> {
    let run = Run::start("benchmark", &a.common)?;
    let stack_path = run.settings.required_path("stack", a.stack)?;
    let input = run.settings.required_path("input", a.input)?;
    let bcsd_dir = run.settings.path("bcsd", a.bcsd)?;
    must_exist("stack", &stack_path)?;
    must_exist("input", &input)?;
    if let Some(p) = &bcsd_dir {
        must_exist("bcsd", p)?;
    }
    run.begin()?;

    let chain = stack::load_stack(&stack_path).with_context(|| format!("--stack {}", stack_path.display()))?;
    let (manifest, days) = load_series("input", &input)?;
    let (out, timing) = stack::infer_series_timed(&chain, &days)?;

    let mut csv = String::from("stage,nanoseconds,seconds\n");
    let row = |csv: &mut String, stage: &str, ns: u128| {
        let _ = writeln!(csv, "{stage},{ns},{:.9}", ns as f64 * 1e-9);
    };
    for (k, ns) in timing.per_level_ns.iter().enumerate() {
        row(&mut csv, &format!("level{}", k + 1), *ns);
    }
    row(&mut csv, "total", timing.total_ns);
    let mut digests = format!("deepsd {}\n", digest(&out));
    if let Some(dir) = &bcsd_dir {
        let model = bcsd::load_bcsd(dir).with_context(|| format!("--bcsd {}", dir.display()))?;
        let dates = manifest.dates()?;
        let start = std::time::Instant::now();
        let out = bcsd::downscale_bcsd(&model, &days, &dates)?;
        row(&mut csv, "bcsd", start.elapsed().as_nanos());
        let _ = writeln!(digests, "bcsd {}", digest(&out));
    }
    run.write(TIMING_FILE, csv.as_bytes())?;
    run.write("digest.txt", digests.as_bytes())?;
    eprint!("{csv}");
    Ok(())
}

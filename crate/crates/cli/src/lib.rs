//! Command-line experiment runner: dataset generation, training, and CA, CV
//! and image-metric reports.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use coadapt::coadapt::{ca_score, cv_score, effective_drop_ratio, CaSettings};
use coadapt::io::{load_cloud, load_dataset, save_cloud, save_dataset, save_pfm, save_pfm_gray, save_ppm, Dataset, IoError};
use coadapt::metrics::{depth_metrics, psnr, ssim};
use coadapt::regularize::{render_with_strategy, NoiseTarget, Strategy};
use coadapt::render::{visibility_mask, PreparedView, RenderOptions};
use coadapt::scene::{make_rig, make_scene, render_dataset, split_views, CameraRig, Palette, RigKind, SceneKind, SceneSpec, SplitProtocol};
use coadapt::train::{ca_seed, TrainConfig, TrainRecord};
use coadapt::GaussianCloud;

pub mod pipeline;
pub mod report;

use report::{num, Table};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Io(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "coadapt", version, about = "Co-adaptation experiments on synthetic Gaussian splat scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a ground-truth scene, a camera rig and rendered views.
    Gen(GenArgs),
    /// Train a cloud on a dataset's training views.
    Train(TrainArgs),
    /// Co-adaptation score per view.
    Ca(CaArgs),
    /// Contributor color variance per view.
    Cv(CvArgs),
    /// PSNR, SSIM and optional depth errors per view.
    Metrics(MetricsArgs),
    /// Render one dataset view from a checkpoint.
    Render(RenderArgs),
    /// One training run per grid point, aggregated into one table.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = SceneKind::RandomBlobField)]
    kind: SceneKind,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 2.0)]
    extent: f64,
    #[arg(long, default_value_t = Palette::Continuous)]
    palette: Palette,
    #[arg(long, default_value_t = RigKind::Arc)]
    rig: RigKind,
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(1..))]
    views: u64,
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u64).range(1..))]
    width: u64,
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u64).range(1..))]
    height: u64,
    #[arg(long, default_value_t = 32.0)]
    fov: f64,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    /// Pose jitter in degrees.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    dataset: PathBuf,
    /// Flat JSON object keyed by config field names; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// View labeling shared by the per-view reports.
#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long, default_value_t = 3)]
    n_train: usize,
    #[arg(long, default_value_t = SplitProtocol::EveryKth)]
    split: SplitProtocol,
}

#[derive(Args, Debug)]
struct CaArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// Dropout probability used during training; CA drops 1 - (1 - p) / 2.
    #[arg(long, default_value_t = 0.0)]
    train_p: f64,
    /// Number of masked renders per view.
    #[arg(long = "K", default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    k: u64,
    /// Alpha threshold for the common visible region, or `none` for every pixel.
    #[arg(long, default_value = "0.8", value_parser = parse_threshold)]
    threshold: Threshold,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-view variance maps as grayscale PFM.
    #[arg(long)]
    maps: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
struct Threshold(Option<f64>);

fn parse_threshold(s: &str) -> Result<Threshold, String> {
    if s == "none" {
        return Ok(Threshold(None));
    }
    match s.parse::<f64>() {
        Ok(t) if (0.0..=1.0).contains(&t) => Ok(Threshold(Some(t))),
        _ => Err(format!("expected a number in [0, 1] or 'none', got '{s}'")),
    }
}

#[derive(Args, Debug)]
struct CvArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// Opacity multiplier applied before rendering.
    #[arg(long, default_value_t = 1.0)]
    opacity_scale: f64,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    maps: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StrategyArgs {
    /// A: one random mask, B: mean of masked renders, C: scaled opacity.
    #[arg(long, default_value = "C", value_parser = parse_strategy)]
    strategy: Strategy,
    /// Dropout probability the checkpoint was trained with.
    #[arg(long, default_value_t = 0.0)]
    train_p: f64,
    #[arg(long, default_value_t = Strategy::DEFAULT_AVERAGE_COUNT)]
    average_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    let mut chars = s.chars();
    match (chars.next().and_then(Strategy::from_letter), chars.next()) {
        (Some(st), None) => Ok(st),
        _ => Err(format!("expected A, B or C, got '{s}'")),
    }
}

impl StrategyArgs {
    fn check(&self) -> Result<(), CliError> {
        if !(0.0..1.0).contains(&self.train_p) {
            return Err(CliError::Usage(format!("--train-p must lie in [0, 1), got {}", self.train_p)));
        }
        if self.average_count < 1 {
            return Err(CliError::Usage("--average-count must be at least 1".into()));
        }
        Ok(())
    }

    fn render(&self, cloud: &GaussianCloud, cam: &coadapt::Camera) -> coadapt::render::RenderOutput {
        render_with_strategy(cloud, cam, self.train_p, self.strategy, self.average_count, self.seed)
    }
}

#[derive(Args, Debug)]
struct MetricsArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// Reference checkpoint for depth errors; defaults to the dataset's gt.cspl.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Skip depth errors.
    #[arg(long)]
    no_depth: bool,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Output image; `.ppm` writes 8-bit, anything else float PFM.
    #[arg(long)]
    out: PathBuf,
    /// Optional grayscale PFM of expected depth.
    #[arg(long)]
    depth: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SweepKind {
    Views,
    Dropout,
    Sigma,
    Strategy,
    ShDegree,
}

#[derive(Args, Debug)]
struct SweepArgs {
    dataset: PathBuf,
    #[arg(long, value_enum)]
    kind: SweepKind,
    /// Base config; each grid point overrides one field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated grid values; a default grid is used when omitted.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Parse `args` (program name first) and run the command. Reports without an
/// `--out` path go to `stdout`.
pub fn run<I, S>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            write!(stdout, "{e}").map_err(|e| CliError::Io(format!("stdout: {e}")))?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string().trim_end().to_string())),
    };
    // The program path varies between installs; the provenance line names the tool.
    let command_line = std::iter::once("coadapt").chain(args.iter().skip(1).map(String::as_str)).collect::<Vec<_>>().join(" ");
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a, &command_line),
        Command::Ca(a) => cmd_ca(&a, &command_line, stdout),
        Command::Cv(a) => cmd_cv(&a, &command_line, stdout),
        Command::Metrics(a) => cmd_metrics(&a, &command_line, stdout),
        Command::Render(a) => cmd_render(&a),
        Command::Sweep(a) => cmd_sweep(&a, &command_line),
    }
}

fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    if !(a.extent > 0.0 && a.radius > 0.0 && a.fov > 0.0 && a.fov < 180.0 && a.jitter >= 0.0) {
        return Err(CliError::Usage("need --extent > 0, --radius > 0, 0 < --fov < 180 and --jitter >= 0".into()));
    }
    let scene = SceneSpec { kind: a.kind, gaussian_count: a.count as usize, extent: a.extent, palette: a.palette, seed: a.seed };
    let rig = CameraRig {
        kind: a.rig,
        count: a.views as usize,
        radius: a.radius,
        width: a.width as usize,
        height: a.height as usize,
        fov_deg: a.fov,
        jitter_deg: a.jitter,
        jitter_seed: a.seed,
    };
    let gt = make_scene(&scene);
    let cams = make_rig(&rig);
    let imgs = render_dataset(&gt, &cams);
    save_dataset(&a.out, &gt, &cams, &imgs)?;
    Ok(())
}

/// Parse a flat JSON config. Unknown keys and nested values are rejected.
pub fn parse_config(text: &str) -> Result<TrainConfig, CliError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config is not valid JSON: {e}")))?;
    let map = value.as_object().ok_or_else(|| CliError::Usage("config must be a JSON object".into()))?;
    let valid = TrainConfig::keys();
    for (k, v) in map {
        if !valid.contains(k) {
            return Err(CliError::Usage(format!("unknown config key '{k}'; valid keys: {}", valid.join(", "))));
        }
        if v.is_object() || v.is_array() {
            return Err(CliError::Usage(format!("config key '{k}' must hold a scalar")));
        }
    }
    let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("bad config value: {e}")))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            parse_config(&text)
        }
    }
}

fn load(dir: &Path) -> Result<Dataset, CliError> {
    let ds = load_dataset(dir)?;
    if ds.cameras.is_empty() {
        return Err(CliError::Usage(format!("{}: dataset has no views", dir.display())));
    }
    Ok(ds)
}

pub const FINAL_FILE: &str = "final.cspl";
pub const INFERENCE_FILE: &str = "inference.cspl";
pub const TRAINLOG_FILE: &str = "trainlog.csv";
pub const CONFIG_ECHO_FILE: &str = "config.json";

fn cmd_train(a: &TrainArgs, command_line: &str) -> Result<(), CliError> {
    let cfg = read_config(a.config.as_deref())?;
    let ds = load(&a.dataset)?;
    let echo = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    report::write_file(&a.out.join(CONFIG_ECHO_FILE), echo.as_bytes())?;
    let outcome = pipeline::run(&ds, &cfg)?;
    save_cloud(&a.out.join(FINAL_FILE), &outcome.run.cloud)?;
    save_cloud(&a.out.join(INFERENCE_FILE), &outcome.run.inference_cloud())?;
    let mut log = Table::new(&TrainRecord::COLUMNS);
    for r in &outcome.run.log {
        log.push(vec![
            r.iteration.to_string(),
            num(Some(r.train_loss)),
            num(Some(r.train_psnr)),
            num(r.test_psnr),
            num(r.train_ca),
            num(r.test_ca),
            r.gaussian_count.to_string(),
        ]);
    }
    report::write_file(&a.out.join(TRAINLOG_FILE), &log.to_bytes(command_line, cfg.seed))
}

/// `train` or `test` label per dataset view.
fn view_labels(count: usize, s: &SplitArgs) -> Result<Vec<&'static str>, CliError> {
    if count < 2 {
        return Ok(vec!["train"; count]);
    }
    if s.n_train < 1 || s.n_train >= count {
        return Err(CliError::Usage(format!("--n-train must lie in [1, {count}), got {}", s.n_train)));
    }
    let (train, _) = split_views(count, s.n_train, s.split);
    Ok((0..count).map(|i| if train.contains(&i) { "train" } else { "test" }).collect())
}

pub const CA_COLUMNS: [&str; 7] = ["view_id", "split", "ca", "K", "drop_ratio", "visible_fraction", "seed"];

fn cmd_ca(a: &CaArgs, command_line: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&a.train_p) {
        return Err(CliError::Usage(format!("--train-p must lie in [0, 1), got {}", a.train_p)));
    }
    let cloud = load_cloud(&a.checkpoint)?;
    let ds = load(&a.dataset)?;
    let labels = view_labels(ds.cameras.len(), &a.split)?;
    let drop = effective_drop_ratio(a.train_p);
    let mut t = Table::new(&CA_COLUMNS);
    for (i, cam) in ds.cameras.iter().enumerate() {
        let seed = ca_seed(a.seed, i);
        let settings = CaSettings::new(drop, seed).with_samples(a.k as usize).with_threshold(a.threshold.0);
        let rep = ca_score(&cloud, cam, &settings).map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(dir) = &a.maps {
            save_pfm_gray(&dir.join(format!("ca_view_{i:03}.pfm")), &rep.variance_map)?;
        }
        t.push(vec![
            i.to_string(),
            labels[i].into(),
            num(rep.ca),
            a.k.to_string(),
            num(Some(rep.drop_ratio)),
            num(Some(rep.visible_fraction())),
            seed.to_string(),
        ]);
    }
    t.write(a.out.as_deref(), stdout, command_line, a.seed)
}

pub const CV_COLUMNS: [&str; 4] = ["view_id", "split", "cv", "coverage"];

fn cmd_cv(a: &CvArgs, command_line: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    if !(a.opacity_scale > 0.0 && a.opacity_scale.is_finite()) {
        return Err(CliError::Usage("--opacity-scale must be positive".into()));
    }
    let cloud = load_cloud(&a.checkpoint)?;
    let ds = load(&a.dataset)?;
    let labels = view_labels(ds.cameras.len(), &a.split)?;
    let mut t = Table::new(&CV_COLUMNS);
    for (i, cam) in ds.cameras.iter().enumerate() {
        let rep = cv_score(&cloud, cam, a.opacity_scale);
        if let Some(dir) = &a.maps {
            save_pfm_gray(&dir.join(format!("cv_view_{i:03}.pfm")), &rep.map)?;
        }
        let coverage = rep.coverage.count() as f64 / rep.coverage.len().max(1) as f64;
        t.push(vec![i.to_string(), labels[i].into(), num(rep.cv), num(Some(coverage))]);
    }
    t.write(a.out.as_deref(), stdout, command_line, 0)
}

pub const METRICS_COLUMNS: [&str; 8] = ["view_id", "split", "psnr", "ssim", "depth_absrel", "depth_rmse", "depth_mae", "depth_log10"];

/// Reference alpha above which a pixel's depth is compared.
pub const DEPTH_ALPHA_THRESHOLD: f64 = 0.5;

fn cmd_metrics(a: &MetricsArgs, command_line: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    a.strategy.check()?;
    let cloud = load_cloud(&a.checkpoint)?;
    let ds = load(&a.dataset)?;
    let labels = view_labels(ds.cameras.len(), &a.split)?;
    let reference = match (&a.reference, a.no_depth) {
        (_, true) => None,
        (Some(p), false) => Some(load_cloud(p)?),
        (None, false) => ds.gt.clone(),
    };
    let mut t = Table::new(&METRICS_COLUMNS);
    for (i, (cam, target)) in ds.cameras.iter().zip(&ds.images).enumerate() {
        let out = a.strategy.render(&cloud, cam);
        let depth = reference.as_ref().and_then(|r| {
            let ref_out = PreparedView::new(r, cam, &RenderOptions::default()).render(false);
            let valid = visibility_mask(&ref_out, DEPTH_ALPHA_THRESHOLD);
            depth_metrics(&out.depth, &ref_out.depth, &valid)
        });
        t.push(vec![
            i.to_string(),
            labels[i].into(),
            num(Some(psnr(&out.color, target))),
            num(Some(ssim(&out.color, target))),
            num(depth.map(|d| d.absrel)),
            num(depth.map(|d| d.rmse)),
            num(depth.map(|d| d.mae)),
            num(depth.map(|d| d.log10)),
        ]);
    }
    t.write(a.out.as_deref(), stdout, command_line, a.strategy.seed)
}

fn cmd_render(a: &RenderArgs) -> Result<(), CliError> {
    a.strategy.check()?;
    let cloud = load_cloud(&a.checkpoint)?;
    let ds = load(&a.dataset)?;
    let cam = ds
        .cameras
        .get(a.view)
        .ok_or_else(|| CliError::Usage(format!("--view {} out of range for {} views", a.view, ds.cameras.len())))?;
    let out = a.strategy.render(&cloud, cam);
    if a.out.extension().is_some_and(|e| e == "ppm") {
        save_ppm(&a.out, &out.color)?;
    } else {
        save_pfm(&a.out, &out.color)?;
    }
    if let Some(p) = &a.depth {
        save_pfm_gray(p, &out.depth)?;
    }
    Ok(())
}

pub const SWEEP_COLUMNS: [&str; 8] = ["kind", "value", "psnr", "ssim", "train_ca", "test_ca", "gs_count", "status"];

impl SweepKind {
    fn name(self) -> &'static str {
        match self {
            SweepKind::Views => "views",
            SweepKind::Dropout => "dropout",
            SweepKind::Sigma => "sigma",
            SweepKind::Strategy => "strategy",
            SweepKind::ShDegree => "sh-degree",
        }
    }

    fn default_grid(self) -> Vec<String> {
        let tenths = |n: usize| (0..=n).map(|i| format!("{}", i as f64 / 10.0)).collect();
        match self {
            SweepKind::Views => ["3", "6", "9"].map(String::from).to_vec(),
            SweepKind::Dropout => tenths(6),
            SweepKind::Sigma => tenths(10),
            SweepKind::Strategy => ["A", "B", "C"].map(String::from).to_vec(),
            SweepKind::ShDegree => ["0", "1", "2", "3"].map(String::from).to_vec(),
        }
    }

    /// Config for one grid point; strategy points share the base config.
    fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig, String> {
        let mut cfg = base.clone();
        let float = || value.parse::<f64>().map_err(|_| format!("'{value}' is not a number"));
        let int = || value.parse::<usize>().map_err(|_| format!("'{value}' is not a non-negative integer"));
        match self {
            SweepKind::Views => cfg.n_train = int()?,
            SweepKind::Dropout => cfg.dropout_p = float()?,
            SweepKind::Sigma => {
                cfg.noise_sigma = float()?;
                cfg.noise_target.get_or_insert(NoiseTarget::Opacity);
            }
            SweepKind::Strategy => {
                parse_strategy(value)?;
            }
            SweepKind::ShDegree => cfg.sh_degree = int()?,
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn cmd_sweep(a: &SweepArgs, command_line: &str) -> Result<(), CliError> {
    let base = read_config(a.config.as_deref())?;
    let grid: Vec<String> = match &a.grid {
        Some(g) => g.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => a.kind.default_grid(),
    };
    if grid.is_empty() {
        return Err(CliError::Usage("--grid must name at least one value".into()));
    }
    let cfgs = grid.iter().map(|v| a.kind.apply(&base, v).map_err(|e| CliError::Usage(format!("grid value {v}: {e}")))).collect::<Result<Vec<_>, _>>()?;
    let ds = load(&a.dataset)?;
    let mut t = Table::new(&SWEEP_COLUMNS);
    let mut failures = Vec::new();
    let mut push = |t: &mut Table, value: &str, row: Result<[String; 5], CliError>| match row {
        Ok(r) => {
            let mut cells = vec![a.kind.name().to_string(), value.to_string()];
            cells.extend(r);
            cells.push("ok".into());
            t.push(cells);
        }
        Err(e) => {
            let mut cells = vec![a.kind.name().to_string(), value.to_string()];
            cells.extend(std::iter::repeat_n("NA".to_string(), 5));
            cells.push(format!("failed: {e}"));
            t.push(cells);
            failures.push(format!("{value}: {e}"));
        }
    };
    let row = |o: &pipeline::Outcome, scores: (f64, f64)| {
        [num(Some(scores.0)), num(Some(scores.1)), num(o.train_ca), num(o.test_ca), o.run.cloud.len().to_string()]
    };
    if a.kind == SweepKind::Strategy {
        match pipeline::run(&ds, &base) {
            Ok(o) => {
                for v in &grid {
                    let s = parse_strategy(v).expect("validated above");
                    push(&mut t, v, Ok(row(&o, pipeline::strategy_scores(&o, s, base.seed))));
                }
            }
            Err(e) => {
                let msg = e.to_string();
                for v in &grid {
                    push(&mut t, v, Err(CliError::Failed(msg.clone())));
                }
            }
        }
    } else {
        for (v, cfg) in grid.iter().zip(&cfgs) {
            push(&mut t, v, pipeline::run(&ds, cfg).map(|o| row(&o, (o.test_psnr, o.test_ssim))));
        }
    }
    report::write_file(&a.out, &t.to_bytes(command_line, base.seed))?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} of {} grid points failed: {}", failures.len(), grid.len(), failures.join("; "))))
    }
}

//! `canfuse` command line.
//!
//! Every subcommand prints a JSON summary on stdout. Failures print
//! `{"error": <code>, "message": <text>}` on stderr and exit nonzero.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Debug;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::canlog::{
    parse_can_log, read_rows, sample_and_hold, select_signals, validate_rows, write_rows, CanFeatureRow,
    FeatureSignals, DEFAULT_POWER_TOL_KW, DEFAULT_TICK_MS,
};
use crate::experiment::{
    self, check_variant, compare, evaluate, load_dataset_file, predict_samples, save_dataset_file, train,
    write_json, write_raw_recording, ExperimentConfig, ExperimentError, SynthConfig, GROUPS_HEADER,
    RAW_GROUPS, RAW_LOG, RAW_MANIFEST,
};
use crate::fusionmodel::{FusedModel, ModelError, Variant, CHANNELS, INPUT_H, INPUT_W};
use crate::neuralnet::DEFAULT_LR;
use crate::sync::{split_groups, synchronize, SyncConfig, SyncError, SyncedSample};
use crate::videostream::{
    check_frame_rate, concatenate_segments, load_image, load_manifest, resize_bilinear, write_manifest,
    FrameRecord, Image, VideoError, DEFAULT_FPS, DEFAULT_SAVE_GAP_MS,
};

#[derive(Debug, Parser)]
#[command(name = "canfuse", version, about = "CAN bus and camera fusion for steering prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Densify a CAN signal log into feature rows.
    Decode(DecodeArgs),
    /// Place dashcam segments on one clock.
    Frames(FramesArgs),
    /// Align feature rows with frames and write a dataset.
    Sync(SyncArgs),
    /// Generate a synthetic dataset or raw recording.
    Synth(SynthArgs),
    /// Run decode, frames and sync over a raw recording directory.
    BuildDataset(BuildArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Evaluate a saved model.
    Eval(EvalArgs),
    /// Train both variants and report the RMSE change.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// CAN signal log.
    #[arg(long = "in", alias = "log", value_name = "LOG")]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TICK_MS)]
    tick_ms: f64,
    #[arg(long, default_value_t = DEFAULT_POWER_TOL_KW)]
    tol_kw: f64,
    /// Six comma-separated log names for voltage, current, power, steering
    /// speed, speed and steering angle.
    #[arg(long, value_delimiter = ',')]
    signals: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct FramesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FPS)]
    fps: f64,
    #[arg(long, default_value_t = 1.0)]
    fps_tol_ms: f64,
    #[arg(long, default_value_t = DEFAULT_SAVE_GAP_MS)]
    gap_ms: f64,
}

#[derive(Debug, Args)]
struct SyncParams {
    #[arg(long, default_value_t = crate::sync::DEFAULT_FACTOR)]
    factor: usize,
    #[arg(long, default_value_t = crate::sync::DEFAULT_TOL_MS)]
    tol_ms: f64,
    #[arg(long, default_value_t = crate::sync::DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = crate::sync::DEFAULT_MIN_RUN)]
    min_run: usize,
    #[arg(long, default_value_t = crate::sync::DEFAULT_DELTA_THRESH)]
    delta_thresh: f64,
    #[arg(long, default_value_t = crate::sync::DEFAULT_SEARCH_MS)]
    search_ms: f64,
}

impl SyncParams {
    fn config(&self) -> SyncConfig {
        SyncConfig {
            factor: self.factor,
            tol_ms: self.tol_ms,
            eps: self.eps,
            min_run: self.min_run,
            delta_thresh: self.delta_thresh,
            search_ms: self.search_ms,
        }
    }
}

#[derive(Debug, Args)]
struct SyncArgs {
    /// Feature rows from `decode`.
    #[arg(long)]
    rows: PathBuf,
    /// Unified manifest from `frames`.
    #[arg(long)]
    manifest: PathBuf,
    /// `segment_id,group_id` table.
    #[arg(long)]
    groups: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    params: SyncParams,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples (or frames) per group.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a raw recording (log, manifest, frames) to this directory.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FPS)]
    fps: f64,
    #[arg(long, default_value_t = DEFAULT_SAVE_GAP_MS)]
    gap_ms: f64,
    #[command(flatten)]
    params: SyncParams,
}

#[derive(Debug, Args)]
struct VariantFlags {
    /// Fused model with the CAN feature branch.
    #[arg(long, conflicts_with = "no_can")]
    with_can: bool,
    /// Vision-only model.
    #[arg(long)]
    no_can: bool,
}

impl VariantFlags {
    fn selected(&self) -> Option<Variant> {
        match (self.with_can, self.no_can) {
            (true, _) => Some(Variant::Fused),
            (_, true) => Some(Variant::VisionOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Args)]
struct TrainingParams {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = experiment::DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = experiment::DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    val_groups: Vec<u8>,
}

impl TrainingParams {
    fn config(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            val_groups: self.val_groups.iter().copied().collect(),
            dataset: Some(self.dataset.display().to_string()),
            ..ExperimentConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    params: TrainingParams,
    #[command(flatten)]
    variant: VariantFlags,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    variant: VariantFlags,
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    val_groups: Vec<u8>,
    /// Write `timestamp_ms,group_id,prediction,label` rows here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    params: TrainingParams,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Train the vision-only model in both columns.
    #[arg(long)]
    control: bool,
}

#[derive(Debug)]
enum CliError {
    Experiment(ExperimentError),
    ValidationFailed { offending: usize, max_residual: f64, tol_kw: f64 },
    Usage(String),
}

impl<E: Into<ExperimentError>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Experiment(e.into())
    }
}

/// Leading identifier of a `Debug` rendering, i.e. the enum variant name.
fn variant_name<T: Debug>(value: &T) -> String {
    format!("{value:?}").chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').collect()
}

fn sync_code(e: &SyncError) -> String {
    match e {
        SyncError::Group { source, .. } => sync_code(source),
        e => variant_name(e),
    }
}

impl CliError {
    fn code(&self) -> String {
        match self {
            CliError::Experiment(e) => match e {
                ExperimentError::Model(ModelError::Nn(n)) => variant_name(n),
                ExperimentError::Model(m) => variant_name(m),
                ExperimentError::Sync(s) => sync_code(s),
                ExperimentError::CanLog(c) => variant_name(c),
                ExperimentError::Video(v) => variant_name(v),
                ExperimentError::Stream(_) => "Io".into(),
                e => variant_name(e),
            },
            CliError::ValidationFailed { .. } => "ValidationFailed".into(),
            CliError::Usage(_) => "UsageError".into(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Experiment(e) => e.to_string(),
            CliError::ValidationFailed { offending, max_residual, tol_kw } => {
                format!("{offending} rows exceed the power tolerance {tol_kw} kW (max residual {max_residual})")
            }
            CliError::Usage(m) => m.clone(),
        }
    }
}

type CliResult = std::result::Result<Value, CliError>;

fn open(path: &Path) -> std::result::Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source }.into())
}

fn create(path: &Path) -> std::result::Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source }.into())
}

fn decode_log(log: &Path, tick_ms: f64, signals: &FeatureSignals) -> std::result::Result<Vec<CanFeatureRow>, CliError> {
    let updates = parse_can_log(open(log)?)?;
    let series = select_signals(&updates, &signals.wanted())?;
    let mut t_start = f64::NEG_INFINITY;
    let mut t_last = f64::NEG_INFINITY;
    for name in signals.names() {
        let s = &series[name];
        if let (Some(first), Some(last)) = (s.first(), s.last()) {
            t_start = t_start.max(first.0);
            t_last = t_last.max(last.0);
        }
    }
    if !t_start.is_finite() {
        return Err(crate::canlog::CanLogError::EmptyInput.into());
    }
    Ok(sample_and_hold(&series, signals, tick_ms, t_start, t_last + tick_ms)?)
}

fn check_power(rows: &[CanFeatureRow], tol_kw: f64) -> std::result::Result<f64, CliError> {
    let report = validate_rows(rows, tol_kw)?;
    if !report.pass {
        return Err(CliError::ValidationFailed {
            offending: report.offending.len(),
            max_residual: report.max_residual,
            tol_kw,
        });
    }
    Ok(report.max_residual)
}

fn cmd_decode(a: &DecodeArgs) -> CliResult {
    let signals = match &a.signals {
        Some(names) => FeatureSignals::from_names(names)
            .ok_or_else(|| CliError::Usage("--signals needs exactly six names".into()))?,
        None => FeatureSignals::default(),
    };
    let rows = decode_log(&a.log, a.tick_ms, &signals)?;
    let max_residual = check_power(&rows, a.tol_kw)?;
    let mut out = create(&a.out)?;
    write_rows(&rows, &mut out)?;
    out.flush()?;
    Ok(json!({ "rows": rows.len(), "max_power_residual_kw": max_residual }))
}

/// Unified frame records with paths resolved against the manifest's directory.
fn unify_frames(manifest: &Path, fps: f64, fps_tol_ms: f64, gap_ms: f64) -> std::result::Result<Vec<FrameRecord>, CliError> {
    let records = load_manifest(open(manifest)?)?;
    check_frame_rate(&records, fps, fps_tol_ms)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
    let mut unified = concatenate_segments(&records, gap_ms)?;
    for r in &mut unified {
        if r.path.is_relative() {
            r.path = base.join(&r.path);
        }
    }
    Ok(unified)
}

fn cmd_frames(a: &FramesArgs) -> CliResult {
    let unified = unify_frames(&a.manifest, a.fps, a.fps_tol_ms, a.gap_ms)?;
    let mut out = create(&a.out)?;
    write_manifest(&unified, &mut out)?;
    out.flush()?;
    let segments: BTreeSet<u32> = unified.iter().map(|r| r.segment_id).collect();
    Ok(json!({ "frames": unified.len(), "segments": segments.len() }))
}

fn read_groups(path: &Path) -> std::result::Result<BTreeMap<u32, u8>, CliError> {
    let mut lines = open(path)?.lines();
    let bad = |line: usize| CliError::Usage(format!("{}: malformed line {line}", path.display()));
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == GROUPS_HEADER => {}
        _ => return Err(CliError::Usage(format!("{}: expected header {GROUPS_HEADER}", path.display()))),
    }
    let mut map = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let (seg, group) = line.trim_end().split_once(',').ok_or_else(|| bad(i + 2))?;
        map.insert(seg.parse().map_err(|_| bad(i + 2))?, group.parse().map_err(|_| bad(i + 2))?);
    }
    Ok(map)
}

/// Loads a frame at model resolution with three channels.
fn model_frame(path: &Path) -> std::result::Result<Image, CliError> {
    let mut img = load_image(path)?;
    if img.channels == 1 {
        let pixels = img.pixels.iter().flat_map(|&p| [p; CHANNELS]).collect();
        img = Image::new(img.height, img.width, CHANNELS, pixels);
    }
    if img.channels != CHANNELS {
        return Err(VideoError::UnsupportedChannels { channels: img.channels }.into());
    }
    if (img.height, img.width) != (INPUT_H, INPUT_W) {
        img = resize_bilinear(&img, INPUT_H, INPUT_W)?;
    }
    Ok(img)
}

fn sync_to_dataset(
    rows: &[CanFeatureRow],
    records: Vec<FrameRecord>,
    groups: &BTreeMap<u32, u8>,
    params: &SyncParams,
    out: &Path,
    report: Option<&Path>,
) -> CliResult {
    let mut frames = Vec::with_capacity(records.len());
    for r in records {
        let img = model_frame(&r.path)?;
        frames.push((r, img));
    }
    let (samples, sync_report) = synchronize(rows, &frames, groups, &params.config())?;
    save_dataset_file(&samples, out)?;
    if let Some(path) = report {
        write_json(path, &sync_report)?;
    }
    Ok(serde_json::to_value(&sync_report).expect("serializable"))
}

fn cmd_sync(a: &SyncArgs) -> CliResult {
    let rows = read_rows(open(&a.rows)?)?;
    let records = load_manifest(open(&a.manifest)?)?;
    let base = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let records = records
        .into_iter()
        .map(|r| FrameRecord { path: if r.path.is_relative() { base.join(&r.path) } else { r.path.clone() }, ..r })
        .collect();
    let groups = read_groups(&a.groups)?;
    sync_to_dataset(&rows, records, &groups, &a.params, &a.out, a.report.as_deref())
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    if a.out.is_none() && a.raw.is_none() {
        return Err(CliError::Usage("synth needs --out and/or --raw".into()));
    }
    let mut cfg = SynthConfig::new(a.seed, a.n);
    cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
    cfg.beta = a.beta.unwrap_or(cfg.beta);
    cfg.noise_sd = a.noise.unwrap_or(cfg.noise_sd);
    let mut summary = json!({ "synth": cfg });
    if let Some(out) = &a.out {
        let samples = experiment::generate_synthetic(&cfg)?;
        save_dataset_file(&samples, out)?;
        summary["samples"] = json!(samples.len());
    }
    if let Some(dir) = &a.raw {
        let rec = write_raw_recording(dir, &cfg)?;
        summary["raw"] = serde_json::to_value(rec).expect("serializable");
    }
    Ok(summary)
}

fn cmd_build(a: &BuildArgs) -> CliResult {
    let rows = decode_log(&a.raw.join(RAW_LOG), DEFAULT_TICK_MS, &FeatureSignals::default())?;
    check_power(&rows, DEFAULT_POWER_TOL_KW)?;
    let records = unify_frames(&a.raw.join(RAW_MANIFEST), a.fps, 1.0, a.gap_ms)?;
    let groups = read_groups(&a.raw.join(RAW_GROUPS))?;
    sync_to_dataset(&rows, records, &groups, &a.params, &a.out, a.report.as_deref())
}

fn cmd_train(a: &TrainArgs) -> CliResult {
    let cfg = a.params.config();
    cfg.validate()?;
    let variant = a.variant.selected().unwrap_or(Variant::Fused);
    let samples = load_dataset_file(&a.params.dataset)?;
    let out = train(&cfg, &samples, variant)?;
    let mut buf = Vec::new();
    out.model.save(&mut buf, Some(&out.adam))?;
    experiment::write_atomic(&a.out, &buf)?;
    let summary = json!({
        "variant": variant,
        "best_epoch": out.best_epoch,
        "val_rmse": out.history[out.best_epoch - 1].val_rmse,
        "history": out.history,
        "config": cfg,
    });
    if let Some(path) = &a.report {
        write_json(path, &summary)?;
    }
    Ok(summary)
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let (model, _) = FusedModel::load(open(&a.model)?)?;
    if let Some(v) = a.variant.selected() {
        check_variant(&model, v)?;
    }
    let samples = load_dataset_file(&a.dataset)?;
    let val_groups: BTreeSet<u8> = a.val_groups.iter().copied().collect();
    let chosen: Vec<&SyncedSample> = match a.split {
        Split::All => samples.iter().collect(),
        split => {
            let (train_set, val_set) = split_groups(&samples, &val_groups)?;
            if matches!(split, Split::Train) {
                train_set
            } else {
                val_set
            }
        }
    };
    let rmse = evaluate(&model, &chosen)?;
    if let Some(path) = &a.predictions {
        let pred = predict_samples(&model, &chosen)?;
        let mut text = String::from("timestamp_ms,group_id,prediction,label\n");
        for (s, p) in chosen.iter().zip(pred) {
            text.push_str(&format!("{},{},{},{}\n", s.timestamp_ms, s.group_id, p, s.steering_angle));
        }
        experiment::write_atomic(path, text.as_bytes())?;
    }
    Ok(json!({ "variant": model.variant(), "samples": chosen.len(), "rmse": rmse }))
}

fn cmd_compare(a: &CompareArgs) -> CliResult {
    let mut cfg = a.params.config();
    if a.control {
        cfg.variants = [Variant::VisionOnly, Variant::VisionOnly];
    }
    cfg.validate()?;
    let samples = load_dataset_file(&a.params.dataset)?;
    let report = compare(&cfg, &samples)?;
    write_json(&a.out, &report)?;
    Ok(json!({
        "report": a.out.display().to_string(),
        "vision_only": { "rmse_train": report.vision_only.rmse_train, "rmse_val": report.vision_only.rmse_val },
        "fused": { "rmse_train": report.fused.rmse_train, "rmse_val": report.fused.rmse_val },
        "percent_decrease_val": report.percent_decrease_val,
    }))
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Decode(a) => cmd_decode(a),
        Command::Frames(a) => cmd_frames(a),
        Command::Sync(a) => cmd_sync(a),
        Command::Synth(a) => cmd_synth(a),
        Command::BuildDataset(a) => cmd_build(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

fn report_error(code: &str, message: &str) {
    eprintln!("{}", json!({ "error": code, "message": message }));
}

/// Runs the command line and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let kind = format!("{:?}", e.kind());
            report_error(if kind == "InvalidSubcommand" { "UnknownSubcommand" } else { "UsageError" }, &kind);
            let _ = e.print();
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            report_error(&e.code(), &e.message());
            1
        }
    }
}

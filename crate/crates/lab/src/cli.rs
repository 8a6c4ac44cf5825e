//! Command-line entry point. Every command writes a `run_manifest.json`
//! next to its outputs and prints a one-line JSON result on stdout; failures
//! print an error JSON on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{apply_override, load_config, load_config_from, read_json, resolve_seed};
use crate::dataset::TrajectoryDataset;
use crate::error::{payload_of, LabError};
use crate::evaluation::{
    attention_map, ensemble, evaluate, latent_dump, rollout, token_perturbation, truth_of, AttentionStage,
    EvalOptions,
};
use crate::generate::{generate_to, GenerateConfig};
use crate::manifest::{write_atomic_json, RunRecorder};
use crate::model::Model;
use crate::plot::{heatmap_png, line_plot_svg, plot_csv, Series};
use crate::training::{
    train_autoencoder, train_refiner, AeTrainConfig, RefinerTrainConfig, TrainReport, CHECKPOINT_DIR, CURVE_CSV,
    FULL_AE_EPOCHS, FULL_REFINER_EPOCHS,
};

pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "aroma-lab", version, about = "PDE surrogate lab: data, training, rollouts and analysis")]
pub struct Cli {
    /// Global seed; falls back to AROMA_LAB_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `key=value` (dotted keys reach nested fields). Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate synthetic trajectories and write a dataset directory.
    GenerateData(GenerateArgs),
    /// Train the encoder and decoder on single frames.
    TrainAutoencoder(TrainAeArgs),
    /// Train the latent stepper on top of a frozen autoencoder.
    TrainRefiner(TrainRefinerArgs),
    /// Roll out one test trajectory (optionally as an ensemble).
    Rollout(RolloutArgs),
    /// Score rollouts on the test split.
    Evaluate(EvaluateArgs),
    /// Attention maps, token perturbations and latent dumps.
    Analyze(AnalyzeArgs),
    /// Render a CSV of curves as an SVG line plot into a directory.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Equation {
    Burgers,
    Ns2d,
}

impl Equation {
    pub fn name(self) -> &'static str {
        match self {
            Equation::Burgers => "burgers",
            Equation::Ns2d => "ns2d",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub equation: Equation,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainAeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Default to the full epoch budget instead of the desk-scale one.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Args)]
pub struct TrainRefinerArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Autoencoder run directory or checkpoint directory.
    #[arg(long)]
    pub autoencoder: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Run directory or checkpoint directory holding refiner weights.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Position in the test split.
    #[arg(long)]
    pub item: Option<usize>,
    #[arg(long)]
    pub start: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Ensemble size; 1 is a single rollout.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisKind {
    Attention,
    Perturbation,
    Latents,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Option<AnalysisKind>,
    #[arg(long)]
    pub item: Option<usize>,
    #[arg(long)]
    pub start: Option<usize>,
    /// Tokens to perturb, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub tokens: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; the plot is named after the CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log_y: bool,
}

/// Options of `rollout`, also settable through `--config`/`--set`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub item: usize,
    pub start: usize,
    /// To the end of the trajectory when unset.
    pub steps: Option<usize>,
    pub samples: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            item: 0,
            start: 0,
            steps: None,
            samples: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub kind: AnalysisKind,
    pub item: usize,
    pub start: usize,
    /// Replacement frames for perturbations, frames dumped for latents.
    pub frames: usize,
    pub tokens: Vec<usize>,
    pub top_fraction: f64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            kind: AnalysisKind::Attention,
            item: 0,
            start: 0,
            frames: 20,
            tokens: vec![0, 4, 8, 12, 16, 20, 24, 28],
            top_fraction: 0.2,
        }
    }
}

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let payload = json!({ "error": "UsageError", "message": e.kind().to_string() });
            eprintln!("{payload}");
            return 2;
        }
    };
    let argv = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, argv) {
        Ok(result) => {
            println!("{result}");
            0
        }
        Err(err) => {
            eprintln!("{}", payload_of(&err));
            1
        }
    }
}

pub fn dispatch(cli: &Cli, argv: Vec<String>) -> anyhow::Result<Value> {
    let verbose = !cli.quiet;
    match &cli.command {
        Command::GenerateData(a) => generate_data(cli, a, argv),
        Command::TrainAutoencoder(a) => train_ae(cli, a, argv, verbose),
        Command::TrainRefiner(a) => train_stage2(cli, a, argv, verbose),
        Command::Rollout(a) => rollout_cmd(cli, a, argv),
        Command::Evaluate(a) => evaluate_cmd(cli, a, argv),
        Command::Analyze(a) => analyze_cmd(cli, a, argv),
        Command::Plot(a) => plot_cmd(a, argv),
    }
}

fn read_dataset(dir: &Path) -> anyhow::Result<TrajectoryDataset> {
    if !dir.is_dir() {
        return Err(LabError::dependency("dataset", dir).into());
    }
    Ok(TrajectoryDataset::read(dir)?)
}

/// Accepts either a run directory (with a `checkpoint/` child) or the
/// checkpoint directory itself.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join(CHECKPOINT_DIR);
    if nested.join("manifest.json").is_file() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Ok(Model::load(&checkpoint_dir(path))?)
}

fn generate_data(cli: &Cli, a: &GenerateArgs, argv: Vec<String>) -> anyhow::Result<Value> {
    let mut rec = RunRecorder::start("generate-data", argv);
    let mut flat = match &cli.config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    for s in &cli.sets {
        apply_override(&mut flat, s)?;
    }
    if cli.seed.is_some() || flat.get("seed").is_none() {
        flat["seed"] = json!(resolve_seed(cli.seed)?);
    }
    let cfg = GenerateConfig::from_flat(a.equation.name(), &flat)?;
    let ds = generate_to(&cfg, &a.out).with_context(|| format!("generating {}", a.out.display()))?;
    rec.config(cfg.to_flat())
        .seed("solver", cfg.solver.seed())
        .seed("grid", ds.manifest.grid_seed)
        .output("dataset", &a.out);
    rec.finish(&a.out)?;
    Ok(json!({
        "command": "generate-data",
        "out": a.out,
        "n_traj": ds.manifest.n_traj,
        "n_time": ds.manifest.n_time,
        "n_points": ds.manifest.n_points,
    }))
}

fn report_json(report: &TrainReport) -> Value {
    json!({
        "checkpoint": report.checkpoint,
        "curve_csv": report.curve_csv,
        "best_validation": report.best_validation,
        "best_epoch": report.best_epoch,
        "epochs_run": report.epochs_run,
        "seed": report.seed,
        "frozen_hash": report.frozen_hash,
    })
}

fn plot_curve(report: &TrainReport, out: &Path) -> anyhow::Result<PathBuf> {
    let svg = out.join("loss_curve.svg");
    let mut train = Series::new("train", Vec::new());
    let mut val = Series::new("validation", Vec::new());
    for r in &report.records {
        train.points.push((r.epoch as f64, r.train_loss));
        if let Some(v) = r.validation {
            val.points.push((r.epoch as f64, v));
        }
    }
    line_plot_svg(&svg, "training loss", "epoch", "loss", &[train, val], true)?;
    Ok(svg)
}

fn train_ae(cli: &Cli, a: &TrainAeArgs, argv: Vec<String>, verbose: bool) -> anyhow::Result<Value> {
    let ds = read_dataset(&a.data)?;
    let mut rec = RunRecorder::start("train-autoencoder", argv);
    let mut base = serde_json::to_value(AeTrainConfig::default())?;
    if a.paper_scale {
        base["epochs"] = json!(FULL_AE_EPOCHS);
    }
    let cfg: AeTrainConfig = load_config_from(base, cli.config.as_deref(), &cli.sets)?;
    let seed = resolve_seed(cli.seed.or(cfg.seed))?;
    let (model, report) = train_autoencoder(&ds, &cfg, seed, &a.out, verbose)?;
    let svg = plot_curve(&report, &a.out)?;
    let summary = json!({
        "command": "train-autoencoder",
        "report": report_json(&report),
        "parameters": {
            "encoder": model.parameter_count(crate::model::ENCODER_PREFIX),
            "decoder": model.parameter_count(crate::model::DECODER_PREFIX),
        },
    });
    write_atomic_json(&a.out.join(SUMMARY), &summary)?;
    rec.config(serde_json::to_value(&cfg)?)
        .seed("train", seed)
        .input("data", &a.data)
        .output("checkpoint", &report.checkpoint)
        .output("loss_curve", &a.out.join(CURVE_CSV))
        .output("loss_plot", &svg)
        .output("summary", &a.out.join(SUMMARY));
    rec.finish(&a.out)?;
    Ok(summary)
}

fn train_stage2(cli: &Cli, a: &TrainRefinerArgs, argv: Vec<String>, verbose: bool) -> anyhow::Result<Value> {
    let ds = read_dataset(&a.data)?;
    let stage1 = checkpoint_dir(&a.autoencoder);
    let mut rec = RunRecorder::start("train-refiner", argv);
    let mut base = serde_json::to_value(RefinerTrainConfig::default())?;
    if a.paper_scale {
        base["epochs"] = json!(FULL_REFINER_EPOCHS);
    }
    let cfg: RefinerTrainConfig = load_config_from(base, cli.config.as_deref(), &cli.sets)?;
    let seed = resolve_seed(cli.seed.or(cfg.seed))?;
    let (model, report) = train_refiner(&ds, &stage1, &cfg, seed, &a.out, verbose)?;
    let svg = plot_curve(&report, &a.out)?;
    let summary = json!({
        "command": "train-refiner",
        "report": report_json(&report),
        "parameters": { "refiner": model.parameter_count(crate::model::REFINER_PREFIX) },
    });
    write_atomic_json(&a.out.join(SUMMARY), &summary)?;
    rec.config(serde_json::to_value(&cfg)?)
        .seed("train", seed)
        .input("data", &a.data)
        .input("autoencoder", &stage1)
        .output("checkpoint", &report.checkpoint)
        .output("loss_curve", &a.out.join(CURVE_CSV))
        .output("loss_plot", &svg)
        .output("summary", &a.out.join(SUMMARY));
    rec.finish(&a.out)?;
    Ok(summary)
}

fn test_traj(ds: &TrajectoryDataset, item: usize) -> anyhow::Result<usize> {
    ds.manifest.splits.test.get(item).copied().ok_or_else(|| {
        LabError::Config(format!("test item {item} out of range ({} test trajectories)", ds.manifest.splits.test.len()))
            .into()
    })
}

/// Writes a `frames x points` field as a PNG, or for 2-d data the last frame
/// on its square grid when the points form one.
fn field_png(path: &Path, frames: &[Vec<f64>], spatial_dim: usize) -> anyhow::Result<()> {
    let width = frames[0].len();
    if spatial_dim == 2 {
        let side = (width as f64).sqrt().round() as usize;
        if side * side == width {
            heatmap_png(path, side, side, frames.last().expect("non-empty"))?;
            return Ok(());
        }
    }
    heatmap_png(path, frames.len(), width, &frames.concat())?;
    Ok(())
}

fn rollout_cmd(cli: &Cli, a: &RolloutArgs, argv: Vec<String>) -> anyhow::Result<Value> {
    let ds = read_dataset(&a.data)?;
    let model = load_model(&a.model)?;
    let mut cfg: RolloutConfig = load_config(cli.config.as_deref(), &cli.sets)?;
    cfg.item = a.item.unwrap_or(cfg.item);
    cfg.start = a.start.unwrap_or(cfg.start);
    cfg.steps = a.steps.or(cfg.steps);
    cfg.samples = a.samples.unwrap_or(cfg.samples);
    let seed = resolve_seed(cli.seed)?;
    let traj = test_traj(&ds, cfg.item)?;
    let n_time = ds.manifest.n_time;
    if cfg.start >= n_time {
        return Err(LabError::InvalidWindow {
            window: cfg.start + 1,
            n_time,
        }
        .into());
    }
    let steps = cfg.steps.unwrap_or(n_time - 1 - cfg.start);
    let u0 = ds.snapshot(traj, cfg.start)?;
    let query = ds.coords_f64(traj);
    std::fs::create_dir_all(&a.out).map_err(|e| LabError::io(&a.out, e))?;
    let mut rec = RunRecorder::start("rollout", argv);

    // frames beyond the data have no reference
    let known = steps.min(n_time - 1 - cfg.start);
    let truth = crate::dataset::Window {
        traj,
        start: cfg.start,
        len: known + 1,
    };
    let truth = truth_of(&ds, &truth);
    let frame_len = ds.frame_len();
    let truth_frames: Vec<Vec<f64>> = truth.chunks(frame_len).map(<[f64]>::to_vec).collect();

    let (pred, spread) = if cfg.samples > 1 {
        let ens = ensemble(&model, &u0, steps, cfg.samples, &query, seed)?;
        (ens.mean, Some(ens.spread))
    } else {
        let r = rollout(&model, &u0, steps, &query, seed)?;
        let mut f = r.fields;
        f.resize(steps + 1, vec![f64::NAN; frame_len]);
        (f, None)
    };
    let mut csv = String::from("step,relative_l2,correlation,spread\n");
    let mut rel = Vec::new();
    for t in 0..=steps {
        let (r, c) = match truth_frames.get(t) {
            Some(tr) => (
                aroma_core::metrics::relative_l2_single(&pred[t], tr),
                aroma_core::metrics::pearson(&pred[t], tr),
            ),
            None => (None, None),
        };
        let s = spread.as_ref().map(|s| s[t]);
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!("{t},{},{},{}\n", cell(r), cell(c), cell(s)));
        rel.push(r);
    }
    let csv_path = a.out.join("rollout.csv");
    std::fs::write(&csv_path, csv).map_err(|e| LabError::io(&csv_path, e))?;
    plot_csv(&csv_path, &a.out.join("rollout.svg"), false)?;
    let sd = ds.manifest.spatial_dim;
    field_png(&a.out.join("prediction.png"), &pred[..=known], sd)?;
    field_png(&a.out.join("truth.png"), &truth_frames, sd)?;
    let err: Vec<Vec<f64>> = pred[..=known]
        .iter()
        .zip(&truth_frames)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs()).collect())
        .collect();
    field_png(&a.out.join("abs_error.png"), &err, sd)?;
    let overall = aroma_core::metrics::relative_l2_single(&pred[1..=known].concat(), &truth_frames[1..].concat());
    let summary = json!({
        "command": "rollout",
        "trajectory": traj,
        "start": cfg.start,
        "steps": steps,
        "samples": cfg.samples,
        "relative_l2": overall,
        "final_spread": spread.as_ref().and_then(|s| s.last().copied()),
    });
    write_atomic_json(&a.out.join(SUMMARY), &summary)?;
    rec.config(serde_json::to_value(&cfg)?)
        .seed("rollout", seed)
        .input("model", &a.model)
        .input("data", &a.data)
        .output("rollout_csv", &csv_path)
        .output("summary", &a.out.join(SUMMARY));
    rec.finish(&a.out)?;
    Ok(summary)
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs, argv: Vec<String>) -> anyhow::Result<Value> {
    let ds = read_dataset(&a.data)?;
    let model = load_model(&a.model)?;
    let mut opts: EvalOptions = load_config(cli.config.as_deref(), &cli.sets)?;
    if cli.seed.is_some() || std::env::var(crate::config::SEED_ENV).is_ok() {
        opts.seed = resolve_seed(cli.seed)?;
    }
    let mut rec = RunRecorder::start("evaluate", argv);
    let eval = evaluate(&model, &ds, &opts)?;
    std::fs::create_dir_all(&a.out).map_err(|e| LabError::io(&a.out, e))?;
    let s = &eval.summary;

    let corr_path = a.out.join("correlation.csv");
    let mut csv = String::from("step,correlation\n");
    for (t, c) in s.correlation.iter().enumerate() {
        csv.push_str(&format!("{t},{}\n", c.map(|v| v.to_string()).unwrap_or_default()));
    }
    std::fs::write(&corr_path, csv).map_err(|e| LabError::io(&corr_path, e))?;
    let pts = s
        .correlation
        .iter()
        .enumerate()
        .filter_map(|(t, c)| c.map(|v| (t as f64, v)))
        .collect();
    let thr = (0..s.correlation.len()).map(|t| (t as f64, opts.correlation_threshold)).collect();
    line_plot_svg(
        &a.out.join("correlation.svg"),
        "correlation with reference",
        "step",
        "pearson",
        &[Series::new("model", pts), Series::new("threshold", thr)],
        false,
    )?;

    let items_path = a.out.join("per_item.csv");
    let mut w = csv::Writer::from_path(&items_path).map_err(|e| LabError::Format(e.to_string()))?;
    for item in &s.per_item {
        w.serialize(item).map_err(|e| LabError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| LabError::io(&items_path, e))?;

    if let Some((pred, truth)) = eval.predictions.first() {
        let fl = ds.frame_len();
        let p: Vec<Vec<f64>> = pred.chunks(fl).map(<[f64]>::to_vec).collect();
        let t: Vec<Vec<f64>> = truth.chunks(fl).map(<[f64]>::to_vec).collect();
        let e: Vec<Vec<f64>> = p.iter().zip(&t).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect()).collect();
        let sd = ds.manifest.spatial_dim;
        field_png(&a.out.join("item0_prediction.png"), &p, sd)?;
        field_png(&a.out.join("item0_truth.png"), &t, sd)?;
        field_png(&a.out.join("item0_abs_error.png"), &e, sd)?;
    }

    let mut summary = serde_json::to_value(s)?;
    summary["command"] = json!("evaluate");
    write_atomic_json(&a.out.join(SUMMARY), &summary)?;
    rec.config(serde_json::to_value(&opts)?)
        .seed("rollout", opts.seed)
        .input("model", &a.model)
        .input("data", &a.data)
        .output("summary", &a.out.join(SUMMARY))
        .output("correlation", &corr_path)
        .output("per_item", &items_path);
    rec.finish(&a.out)?;
    Ok(json!({
        "command": "evaluate",
        "summary": a.out.join(SUMMARY),
        "relative_l2": s.relative_l2,
        "reconstruction_relative_l2": s.reconstruction_relative_l2,
        "high_correlation_time": s.high_correlation_time,
    }))
}

fn analyze_cmd(cli: &Cli, a: &AnalyzeArgs, argv: Vec<String>) -> anyhow::Result<Value> {
    let ds = read_dataset(&a.data)?;
    let model = load_model(&a.model)?;
    let mut cfg: AnalyzeConfig = load_config(cli.config.as_deref(), &cli.sets)?;
    cfg.kind = a.kind.unwrap_or(cfg.kind);
    cfg.item = a.item.unwrap_or(cfg.item);
    cfg.start = a.start.unwrap_or(cfg.start);
    if let Some(t) = &a.tokens {
        cfg.tokens = t.clone();
    }
    let seed = resolve_seed(cli.seed)?;
    let traj = test_traj(&ds, cfg.item)?;
    std::fs::create_dir_all(&a.out).map_err(|e| LabError::io(&a.out, e))?;
    let mut rec = RunRecorder::start("analyze", argv);
    let summary = match cfg.kind {
        AnalysisKind::Attention => {
            let snap = ds.snapshot(traj, cfg.start)?;
            let init = model.initial()?;
            let mut stages = serde_json::Map::new();
            for stage in [AttentionStage::Geometry, AttentionStage::Observation, AttentionStage::Decoder] {
                if stage == AttentionStage::Geometry && !model.spec.autoencoder.encoder.encode_geo {
                    continue;
                }
                let trained = attention_map(&model, &snap, stage)?;
                let before = attention_map(&init, &snap, stage)?;
                let name = serde_json::to_value(stage)?.as_str().unwrap_or("stage").to_string();
                let mean: Vec<f64> = (0..trained.rows).flat_map(|r| trained.mean_row(r)).collect();
                heatmap_png(&a.out.join(format!("attention_{name}.png")), trained.rows, trained.cols, &mean)?;
                stages.insert(
                    name,
                    json!({
                        "rows": trained.rows,
                        "cols": trained.cols,
                        "mean_entropy": trained.mean_entropy(),
                        "mean_entropy_at_init": before.mean_entropy(),
                    }),
                );
            }
            json!({ "command": "analyze", "kind": "attention", "trajectory": traj, "stages": stages })
        }
        AnalysisKind::Perturbation => {
            let path = a.out.join("perturbation.csv");
            let mut csv = String::from("token,locality\n");
            let mut rows = Vec::new();
            for &tok in &cfg.tokens {
                let p = token_perturbation(&model, &ds, traj, cfg.start, cfg.frames, tok, cfg.top_fraction)?;
                csv.push_str(&format!("{tok},{}\n", p.locality));
                let c = model.spec.autoencoder.decoder.channels;
                let folded: Vec<Vec<f64>> =
                    p.delta.iter().map(|d| d.chunks(c).map(|x| x.iter().sum()).collect()).collect();
                field_png(&a.out.join(format!("perturbation_token{tok}.png")), &folded, ds.manifest.spatial_dim)?;
                rows.push(json!({ "token": tok, "locality": p.locality }));
            }
            std::fs::write(&path, csv).map_err(|e| LabError::io(&path, e))?;
            json!({ "command": "analyze", "kind": "perturbation", "trajectory": traj, "tokens": rows })
        }
        AnalysisKind::Latents => {
            let frames = cfg.frames.min(ds.manifest.n_time - cfg.start.min(ds.manifest.n_time));
            let dump = latent_dump(&model, &ds, traj, cfg.start, frames, seed)?;
            let path = a.out.join("latents.csv");
            let mut csv = String::from("frame,token,channel,mu,log_sigma,predicted\n");
            for (t, (mu, ls)) in dump.mu.iter().zip(&dump.log_sigma).enumerate() {
                for r in 0..mu.rows() {
                    for c in 0..mu.cols() {
                        let pred = dump.predicted.get(t).map(|p| p.get(r, c).to_string()).unwrap_or_default();
                        csv.push_str(&format!("{},{r},{c},{},{},{pred}\n", cfg.start + t, mu.get(r, c), ls.get(r, c)));
                    }
                }
            }
            std::fs::write(&path, csv).map_err(|e| LabError::io(&path, e))?;
            json!({
                "command": "analyze",
                "kind": "latents",
                "trajectory": traj,
                "frames": frames,
                "uninformative_channels": dump.uninformative_channels,
            })
        }
    };
    write_atomic_json(&a.out.join(SUMMARY), &summary)?;
    rec.config(serde_json::to_value(&cfg)?)
        .seed("analysis", seed)
        .input("model", &a.model)
        .input("data", &a.data)
        .output("summary", &a.out.join(SUMMARY));
    rec.finish(&a.out)?;
    Ok(summary)
}

fn plot_cmd(a: &PlotArgs, argv: Vec<String>) -> anyhow::Result<Value> {
    if !a.input.is_file() {
        return Err(LabError::dependency("csv", &a.input).into());
    }
    let mut rec = RunRecorder::start("plot", argv);
    std::fs::create_dir_all(&a.out).map_err(|e| LabError::io(&a.out, e))?;
    let stem = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into());
    let svg = a.out.join(format!("{stem}.svg"));
    plot_csv(&a.input, &svg, a.log_y)?;
    rec.config(json!({ "log_y": a.log_y })).input("csv", &a.input).output("plot", &svg);
    rec.finish(&a.out)?;
    Ok(json!({ "command": "plot", "out": svg }))
}

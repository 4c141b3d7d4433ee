//! Command implementations behind the `dtmi` binary.
//!
//! Every command returns a [`CommandResult`] listing the files it wrote. Errors carry
//! their exit code: 1 for usage, configuration and data problems, 2 for numerical
//! failures such as a non-finite training loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dtmi_core::data::{
    encode_prediction, generate_synthetic_dataset, generate_synthetic_range, prepare_pair, read_gray, read_rgb,
    save_gray, DatasetDir,
};
use dtmi_core::metrics::{evaluate_dataset, write_report};
use dtmi_core::training::{load_model, predict_maps, train, TrainOptions};
use dtmi_core::{load_config, validate_config, DtmiNet, EvalReport, RunConfig, Variant};

/// Batch size used for inference.
const PREDICT_BATCH: usize = 8;

#[derive(Debug, Parser)]
#[command(
    name = "dtmi",
    version,
    about = "RGB-D salient object detection: train, evaluate, ablate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Predict saliency for one RGB(-D) pair.
    Predict(PredictArgs),
    /// Predict a dataset and score it.
    Eval(EvalArgs),
    /// Train and evaluate a list of model variants under one budget.
    Ablate(AblateArgs),
    /// Write a deterministic synthetic RGB-D dataset.
    GenData(GenDataArgs),
    /// Score a directory of predictions against ground truth.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Run config JSON; relative dataset paths resolve against its directory.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Run name; defaults to the config file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Accept a resume checkpoint whose architecture differs from the config.
    #[arg(long)]
    pub allow_config_override: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// RGB image, any size; the prediction is resized back to it.
    #[arg(long)]
    pub rgb: PathBuf,
    /// Depth map; optional for RGB-only models.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Output saliency PNG; the edge map goes next to it as `<stem>.edge.png`.
    #[arg(long)]
    pub out: PathBuf,
    /// Time this many forward passes after one warm-up pass.
    #[arg(long)]
    pub benchmark: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset with `rgb/`, `depth/` and `gt/`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `predictions/`, `report.json` and the PR curve.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Base config shared by every variant.
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated variant names, or the interaction placement presets `cmi_a`, `cmi_b`, `cmi_c`.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Dataset root: either `train/` and `test/` subsets, or a single set used for both.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for one run per variant and `ablation.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes (training scenes when `--holdout` is given).
    #[arg(long)]
    pub count: usize,
    /// Scene generator seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Also write this many further scenes; the output is then split into `train/`
    /// and `test/`.
    #[arg(long)]
    pub holdout: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    /// Directory of predicted saliency PNGs.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks with the same file stems.
    #[arg(long)]
    pub gt: PathBuf,
    /// Report JSON; the PR curve is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Outcome of a command.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
}

impl CommandResult {
    fn ok(artifacts: Vec<PathBuf>) -> Self {
        Self {
            exit_code: 0,
            artifacts,
        }
    }
}

/// Exit code for an error: 2 for numerical failures, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<dtmi_core::Error>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
pub fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

/// Run a parsed command, reporting errors on stderr.
pub fn run(cli: Cli) -> CommandResult {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Metrics(a) => cmd_metrics(&a),
    };
    match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            CommandResult {
                exit_code: exit_code(&e),
                artifacts: Vec::new(),
            }
        }
    }
}

/// Load and validate a config; relative data paths are taken relative to the file.
pub fn read_config(path: &Path) -> anyhow::Result<RunConfig> {
    let mut cfg = validate_config(load_config(path)?).map_err(dtmi_core::Error::from)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for dir in [&mut cfg.train_dir, &mut cfg.val_dir, &mut cfg.test_dir]
        .into_iter()
        .flatten()
    {
        if dir.is_relative() {
            *dir = base.join(&*dir);
        }
    }
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<CommandResult> {
    let cfg = read_config(&args.config)?;
    let train_dir = cfg
        .train_dir
        .clone()
        .with_context(|| format!("{}: `train_dir` is not set", args.config.display()))?;
    let train_set = DatasetDir::open(&train_dir)?.load_all(cfg.input_size)?;
    let val_set = match &cfg.val_dir {
        Some(dir) => Some(DatasetDir::open(dir)?.load_all(cfg.input_size)?),
        None => None,
    };
    let name = match &args.name {
        Some(n) => n.clone(),
        None => args
            .config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into()),
    };
    let run_dir = args.runs_dir.join(name);
    let opts = TrainOptions {
        run_dir: Some(run_dir.clone()),
        resume: args.resume.clone(),
        allow_config_override: args.allow_config_override,
    };
    log::info!(
        "training {} on {} samples into {}",
        cfg.variant,
        train_set.len(),
        run_dir.display()
    );
    let (_, summary) = train(&cfg, &train_set, val_set.as_deref(), &opts)?;
    let config_copy = run_dir.join("config.json");
    cfg.save(&config_copy)?;
    println!(
        "run_dir={} epochs_run={} steps={} best_score={}",
        run_dir.display(),
        summary.epochs_run,
        summary.total_steps,
        summary.best_score.map_or("none".into(), |s| format!("{s:.6}"))
    );
    Ok(CommandResult::ok(vec![
        run_dir.join("train_log.jsonl"),
        run_dir.join("last.ckpt"),
        run_dir.join("best.ckpt"),
        config_copy,
    ]))
}

/// `dir/name.png` becomes `dir/name.edge.png`.
pub fn edge_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.edge.png"))
}

pub fn cmd_predict(args: &PredictArgs) -> anyhow::Result<CommandResult> {
    let (net, _) = load_model(&args.checkpoint)?;
    let variant = net.variant();
    let rgb = read_rgb(&args.rgb)?;
    let depth = match &args.depth {
        Some(p) => Some(read_gray(p)?),
        None if variant.uses_depth() => bail!("variant {variant} needs a depth map (--depth)"),
        None => None,
    };
    if let Some(d) = &depth {
        if (d.height, d.width) != (rgb.height, rgb.width) {
            bail!(
                "depth {} is {}x{} but rgb is {}x{}",
                args.depth.as_ref().expect("depth given").display(),
                d.height,
                d.width,
                rgb.height,
                rgb.width
            );
        }
    }
    let size = net.config().input_size;
    let id = args
        .rgb
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (x, d) = prepare_pair(&rgb, depth.as_ref(), size, &id);
    let maps = predict_maps(&net, &[(&x, &d)], 1)?;
    if let Some(n) = args.benchmark {
        if n == 0 {
            bail!("--benchmark needs at least one run");
        }
        let start = Instant::now();
        for _ in 0..n {
            predict_maps(&net, &[(&x, &d)], 1)?;
        }
        println!("mean_inference_s={:.6}", start.elapsed().as_secs_f64() / n as f64);
    }
    let (s, e) = maps.into_iter().next().expect("one prediction");
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut artifacts = vec![args.out.clone()];
    save_gray(&encode_prediction(&s.resize(rgb.height, rgb.width))?, &args.out)?;
    if let Some(e) = e {
        let path = edge_path(&args.out);
        save_gray(&encode_prediction(&e.resize(rgb.height, rgb.width))?, &path)?;
        artifacts.push(path);
    }
    Ok(CommandResult::ok(artifacts))
}

/// Predict every sample of `ds` at its original resolution into `out_dir` as
/// `<id>.png` (and `<id>.edge.png`).
pub fn predict_dataset(net: &DtmiNet, ds: &DatasetDir, out_dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let size = net.config().input_size;
    let mut written = Vec::new();
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(PREDICT_BATCH) {
        let triplets = chunk.iter().map(|&i| ds.load(i)).collect::<Result<Vec<_>, _>>()?;
        let prepared: Vec<_> = triplets
            .iter()
            .map(|t| prepare_pair(&t.rgb, Some(&t.depth), size, &t.id))
            .collect();
        let pairs: Vec<_> = prepared.iter().map(|(x, d)| (x, d)).collect();
        for (t, (s, e)) in triplets.iter().zip(predict_maps(net, &pairs, PREDICT_BATCH)?) {
            let path = out_dir.join(format!("{}.png", t.id));
            save_gray(&encode_prediction(&s.resize(t.gt.height, t.gt.width))?, &path)?;
            written.push(path);
            if let Some(e) = e {
                let path = out_dir.join(format!("{}.edge.png", t.id));
                save_gray(&encode_prediction(&e.resize(t.gt.height, t.gt.width))?, &path)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Predict `data` into `out/predictions/` and write `out/report.json` plus its PR curve.
fn evaluate_into(net: &DtmiNet, data: &Path, out: &Path) -> anyhow::Result<(EvalReport, Vec<PathBuf>)> {
    let ds = DatasetDir::open(data)?;
    let pred_dir = out.join("predictions");
    let mut artifacts = predict_dataset(net, &ds, &pred_dir)?;
    let mut report = evaluate_dataset(&pred_dir, &data.join("gt"))?;
    report.dataset = dataset_name(data);
    let (json, csv) = write_report(&report, &out.join("report.json"))?;
    artifacts.push(json);
    artifacts.push(csv);
    Ok((report, artifacts))
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<CommandResult> {
    let (net, _) = load_model(&args.checkpoint)?;
    let (report, artifacts) = evaluate_into(&net, &args.data, &args.out)?;
    println!(
        "dataset={} n_images={} mae={:.6} f_max={:.6} s_measure={:.6}",
        report.dataset, report.n_images, report.mae, report.f_max, report.s_measure
    );
    Ok(CommandResult::ok(artifacts))
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mae: f64,
    pub f_max: f64,
    pub s_measure: f64,
    pub params: usize,
}

/// Config for a named ablation entry: a model variant, or a CMI placement preset
/// (`cmi_a` = {5}, `cmi_b` = {3,4,5}, `cmi_c` = {2,3,4,5}) on the full model.
pub fn ablation_config(base: &RunConfig, name: &str) -> anyhow::Result<RunConfig> {
    let preset = match name {
        "cmi_a" => Some(vec![5]),
        "cmi_b" => Some(vec![3, 4, 5]),
        "cmi_c" => Some(vec![2, 3, 4, 5]),
        _ => None,
    };
    let mut cfg = base.clone();
    match preset {
        Some(stages) => {
            cfg.variant = Variant::Full;
            cfg.cmi_stages = stages.into_iter().collect();
        }
        None => {
            cfg.variant = name.parse::<Variant>().map_err(anyhow::Error::msg)?;
            if cfg.variant.is_single_modality() {
                cfg.cmi_stages.clear();
            }
        }
    }
    Ok(validate_config(cfg).map_err(dtmi_core::Error::from)?)
}

/// Names accepted by `ablate`.
pub fn ablation_names() -> Vec<&'static str> {
    let mut names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    names.extend(["cmi_a", "cmi_b", "cmi_c"]);
    names
}

pub fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<CommandResult> {
    let base = read_config(&args.config)?;
    if args.variants.is_empty() {
        bail!("--variants is empty");
    }
    let unknown: Vec<&str> = args
        .variants
        .iter()
        .map(String::as_str)
        .filter(|v| !ablation_names().contains(v))
        .collect();
    if !unknown.is_empty() {
        bail!(
            "unknown variant(s): {} (known: {})",
            unknown.join(", "),
            ablation_names().join(", ")
        );
    }
    let configs = args
        .variants
        .iter()
        .map(|v| Ok((v.clone(), ablation_config(&base, v)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let (train_dir, test_dir) = if args.data.join("train").is_dir() {
        let test = ["test", "val"]
            .map(|s| args.data.join(s))
            .into_iter()
            .find(|p| p.is_dir())
            .with_context(|| format!("{} has train/ but no test/ or val/", args.data.display()))?;
        (args.data.join("train"), test)
    } else {
        log::warn!(
            "{} has no train/ subset; training and evaluating on the same samples",
            args.data.display()
        );
        (args.data.clone(), args.data.clone())
    };
    let train_set = DatasetDir::open(&train_dir)?.load_all(base.input_size)?;

    let mut table = BTreeMap::new();
    let mut artifacts = Vec::new();
    for (name, cfg) in configs {
        let run_dir = args.out.join(&name);
        log::info!("ablation {name}: training into {}", run_dir.display());
        let opts = TrainOptions {
            run_dir: Some(run_dir.clone()),
            ..TrainOptions::default()
        };
        let (net, _) = train(&cfg, &train_set, None, &opts)?;
        let (report, written) = evaluate_into(&net, &test_dir, &run_dir)?;
        artifacts.extend(written);
        artifacts.push(run_dir.join("train_log.jsonl"));
        println!(
            "variant={name} params={} mae={:.6} f_max={:.6} s_measure={:.6}",
            net.num_parameters(),
            report.mae,
            report.f_max,
            report.s_measure
        );
        table.insert(
            name,
            AblationRow {
                mae: report.mae,
                f_max: report.f_max,
                s_measure: report.s_measure,
                params: net.num_parameters(),
            },
        );
    }
    let table_path = args.out.join("ablation.json");
    std::fs::write(&table_path, serde_json::to_string_pretty(&table)?)
        .with_context(|| format!("writing {}", table_path.display()))?;
    artifacts.push(table_path);
    Ok(CommandResult::ok(artifacts))
}

pub fn cmd_gen_data(args: &GenDataArgs) -> anyhow::Result<CommandResult> {
    if args.count == 0 {
        bail!("--count must be positive");
    }
    if args.size < 8 {
        bail!("--size must be at least 8");
    }
    let mut artifacts = Vec::new();
    match args.holdout {
        Some(held) => {
            generate_synthetic_range(args.seed, 0, args.count, args.size, &args.out.join("train"))?;
            generate_synthetic_range(args.seed, args.count, held, args.size, &args.out.join("test"))?;
            artifacts.push(args.out.join("train"));
            artifacts.push(args.out.join("test"));
        }
        None => {
            generate_synthetic_dataset(args.count, args.seed, args.size, &args.out)?;
            artifacts.push(args.out.clone());
        }
    }
    Ok(CommandResult::ok(artifacts))
}

pub fn cmd_metrics(args: &MetricsArgs) -> anyhow::Result<CommandResult> {
    let mut report = evaluate_dataset(&args.pred, &args.gt)?;
    report.dataset = dataset_name(&args.gt);
    let (json, csv) = write_report(&report, &args.out)?;
    println!(
        "n_images={} mae={:.6} f_max={:.6} s_measure={:.6}",
        report.n_images, report.mae, report.f_max, report.s_measure
    );
    Ok(CommandResult::ok(vec![json, csv]))
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use crossrisk::data::{align_relative_time, generate_city, load_dataset, save_dataset, CityDataset, SampleSet, Split};
use crossrisk::metrics::{normalize_times, tradeoff_score, write_reports_csv, write_reports_json, MetricReport, Period, TRADEOFF_WEIGHTS};
use crossrisk::model::Model;
use crossrisk::tensor::write_stt_file;
use crossrisk::train::{evaluate, measure_timings, predict_sample, robustness_sweep, train, TrainData};
use serde::{Deserialize, Serialize};

use crossrisk_cli::config::{RunConfig, RunManifest};
use crossrisk_cli::{heatmap, CliError};

type Result<T> = std::result::Result<T, CliError>;

/// Multi-city accident-risk forecasting on synthetic grids.
#[derive(Parser)]
#[command(name = "crossrisk", version = env!("CROSSRISK_VERSION"))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic city datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of cities.
        #[arg(long)]
        cities: Option<usize>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        weeks: Option<u64>,
    },
    /// Train a model and write its best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Epochs without validation improvement before stopping [default: 10].
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Test-split metrics for every city.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        period: Option<Period>,
    },
    /// Write predicted risk maps of one test window.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Index within the test split.
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Also write PGM heatmaps and CSV.
        #[arg(long)]
        heatmap: bool,
    },
    /// Test metrics with Gaussian noise on the inputs.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        period: Option<Period>,
        /// Comma-separated noise standard deviations.
        #[arg(long, value_delimiter = ',')]
        noise_levels: Option<Vec<f64>>,
    },
    /// Grayscale PGM heatmaps and exact CSV of one test window.
    ExportMap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Index within the test split.
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
    /// Trade-off scores of accuracy against forward and batch time.
    Tradeoff {
        #[command(flatten)]
        common: Common,
        /// CSV with columns name,rmse,t_forward,t_batch.
        #[arg(long)]
        rows: Option<PathBuf>,
        /// Min-max normalize the time columns to [1, 10] first.
        #[arg(long)]
        normalize: bool,
        /// Add a measured row for this checkpoint (requires --data).
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run config, or a run manifest to reproduce.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Components to disable: stg, sts, stm, lma.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Input window length in hours [default: 12].
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

const CITIES_FILE: &str = "cities.json";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    Ok(cfg)
}

fn apply_run_args(cfg: &mut RunConfig, run: &RunArgs) -> Result<()> {
    for name in &run.ablate {
        cfg.train.switches.ablate(name)?;
    }
    if let Some(w) = run.window {
        cfg.train.t_in = w;
    }
    Ok(())
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| CliError::path(out, e))
}

fn load_cities(dir: &Path) -> Result<Vec<CityDataset>> {
    let path = dir.join(CITIES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::path(&path, e))?;
    let names: Vec<String> = serde_json::from_str(&text).map_err(|e| CliError::path(&path, e))?;
    let datasets = names
        .iter()
        .map(|n| load_dataset(&dir.join(n)))
        .collect::<crossrisk::Result<Vec<_>>>()?;
    Ok(align_relative_time(datasets)?)
}

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    config: RunConfig,
}

/// Loads a checkpoint and the run config it was trained with, with
/// command-line ablations and window applied on top.
fn load_checkpoint(model: &ModelArgs, cfg: &mut RunConfig) -> Result<Model> {
    let (m, extra) = Model::load(&model.checkpoint)?;
    if let Ok(x) = serde_json::from_value::<CheckpointExtra>(extra) {
        cfg.train.t_in = x.config.train.t_in;
        cfg.train.switches = x.config.train.switches;
        cfg.model = x.config.model;
    }
    apply_run_args(cfg, &model.run)?;
    Ok(m)
}

fn run(command: Command) -> Result<()> {
    let started = Instant::now();
    let manifest = match command {
        Command::GenData { common, cities, weeks } => {
            let mut cfg = load_config(&common)?;
            if let Some(w) = weeks {
                cfg.data.weeks = w as usize;
            }
            let n = cities.unwrap_or(cfg.data.cities.len());
            if n == 0 || cfg.data.weeks == 0 {
                return Err(CliError::new("--cities and --weeks must be at least 1"));
            }
            create_out(&common.out)?;
            let mut manifest = RunManifest::new("gen-data", common.config.clone(), &cfg);
            let setups = cfg.data.take_cities(n)?;
            for (k, c) in setups.iter().enumerate() {
                let seed = cfg.data.seed.wrapping_add(k as u64);
                let ds = generate_city(&c.name, seed, c.w, c.h, c.nodes, cfg.data.weeks, &c.profile)?;
                let dir = common.out.join(&c.name);
                save_dataset(&ds, &dir)?;
                manifest.outputs.push(dir);
            }
            let names: Vec<&str> = setups.iter().map(|c| c.name.as_str()).collect();
            let path = common.out.join(CITIES_FILE);
            fs::write(&path, serde_json::to_string_pretty(&names).unwrap()).map_err(|e| CliError::path(&path, e))?;
            manifest.outputs.push(path);
            (manifest, common.out)
        }
        Command::Train { common, data, run, max_epochs, patience } => {
            let mut cfg = load_config(&common)?;
            apply_run_args(&mut cfg, &run)?;
            if let Some(m) = max_epochs {
                cfg.train.max_epochs = m;
            }
            if let Some(p) = patience {
                cfg.train.patience = p;
            }
            let datasets = load_cities(&data)?;
            let samples = SampleSet::joint(&datasets, cfg.train.t_in, 1)?;
            let pairs: Vec<(&str, &_)> = datasets.iter().map(|d| (d.name.as_str(), &d.supports)).collect();
            let mut model = Model::new(cfg.model.clone(), &pairs, cfg.train.seed)?;
            create_out(&common.out)?;
            let mut manifest = RunManifest::new("train", common.config.clone(), &cfg);
            manifest.inputs.push(data);
            let t = Instant::now();
            let history = train(&mut model, &TrainData { datasets: &datasets, samples: &samples }, &cfg.train, None)?;
            manifest.timings.insert("train".into(), t.elapsed().as_secs_f64());
            let ckpt = common.out.join("checkpoint");
            let extra = serde_json::to_value(CheckpointExtra { config: cfg.clone() }).unwrap();
            model.save(&ckpt, extra)?;
            let hist = common.out.join("history.csv");
            history.write_csv(&hist)?;
            manifest.outputs.extend([ckpt, hist]);
            eprintln!(
                "trained {} epochs, best validation loss {:?} at epoch {:?}",
                history.trained_epochs(),
                history.best_val,
                history.best_epoch
            );
            (manifest, common.out)
        }
        Command::Eval { common, model, period } => {
            let mut cfg = load_config(&common)?;
            let m = load_checkpoint(&model, &mut cfg)?;
            if let Some(p) = period {
                cfg.eval.period = p;
            }
            let datasets = load_cities(&model.data)?;
            let samples = SampleSet::joint(&datasets, cfg.train.t_in, 1)?;
            let data = TrainData { datasets: &datasets, samples: &samples };
            let t = Instant::now();
            let reports = evaluate(&m, &data, cfg.eval.period, cfg.train.switches, 0.0, cfg.eval.seed)?;
            let mut manifest = RunManifest::new("eval", common.config.clone(), &cfg);
            manifest.timings.insert("evaluate".into(), t.elapsed().as_secs_f64());
            manifest.inputs.extend([model.data.clone(), model.checkpoint.clone()]);
            create_out(&common.out)?;
            manifest.outputs.extend(write_reports(&reports, &common.out, "eval")?);
            (manifest, common.out)
        }
        Command::Robustness { common, model, period, noise_levels } => {
            let mut cfg = load_config(&common)?;
            let m = load_checkpoint(&model, &mut cfg)?;
            if let Some(p) = period {
                cfg.eval.period = p;
            }
            if let Some(levels) = noise_levels {
                cfg.eval.noise_levels = levels;
            }
            let datasets = load_cities(&model.data)?;
            let samples = SampleSet::joint(&datasets, cfg.train.t_in, 1)?;
            let data = TrainData { datasets: &datasets, samples: &samples };
            let t = Instant::now();
            let reports = robustness_sweep(
                &m,
                &data,
                &cfg.eval.noise_levels,
                cfg.eval.period,
                cfg.train.switches,
                cfg.eval.seed,
            )?;
            let mut manifest = RunManifest::new("robustness", common.config.clone(), &cfg);
            manifest.timings.insert("sweep".into(), t.elapsed().as_secs_f64());
            manifest.inputs.extend([model.data.clone(), model.checkpoint.clone()]);
            create_out(&common.out)?;
            manifest.outputs.extend(write_reports(&reports, &common.out, "robustness")?);
            (manifest, common.out)
        }
        Command::Predict { common, model, step, heatmap } => {
            let mut cfg = load_config(&common)?;
            let m = load_checkpoint(&model, &mut cfg)?;
            create_out(&common.out)?;
            let mut manifest = RunManifest::new("predict", common.config.clone(), &cfg);
            manifest.inputs.extend([model.data.clone(), model.checkpoint.clone()]);
            manifest.outputs = predict_step(&m, &model.data, &cfg, step, &common.out, true, heatmap)?;
            (manifest, common.out)
        }
        Command::ExportMap { common, model, step } => {
            let mut cfg = load_config(&common)?;
            let m = load_checkpoint(&model, &mut cfg)?;
            create_out(&common.out)?;
            let mut manifest = RunManifest::new("export-map", common.config.clone(), &cfg);
            manifest.inputs.extend([model.data.clone(), model.checkpoint.clone()]);
            manifest.outputs = predict_step(&m, &model.data, &cfg, step, &common.out, false, true)?;
            (manifest, common.out)
        }
        Command::Tradeoff { common, rows, normalize, checkpoint, data } => {
            let mut cfg = load_config(&common)?;
            let mut table = match &rows {
                Some(path) => read_rows(path)?,
                None => Vec::new(),
            };
            let mut manifest = RunManifest::new("tradeoff", common.config.clone(), &cfg);
            manifest.inputs.extend(rows.clone());
            let measured = checkpoint.is_some();
            if let (Some(ckpt), Some(data_dir)) = (checkpoint, data) {
                let args = ModelArgs { data: data_dir, checkpoint: ckpt, run: RunArgs { ablate: vec![], window: None } };
                let m = load_checkpoint(&args, &mut cfg)?;
                let datasets = load_cities(&args.data)?;
                let samples = SampleSet::joint(&datasets, cfg.train.t_in, 1)?;
                let data = TrainData { datasets: &datasets, samples: &samples };
                let reports = evaluate(&m, &data, Period::AllDay, cfg.train.switches, 0.0, cfg.eval.seed)?;
                let rmse = reports.iter().map(|r| r.rmse).sum::<f64>() / reports.len() as f64;
                let (t_forward, t_batch) = measure_timings(&m, &data, &cfg.train, 10)?;
                table.push(TradeoffRow { name: "crossrisk".into(), rmse, t_forward, t_batch, score: None });
                manifest.inputs.extend([args.data, args.checkpoint]);
            }
            if table.is_empty() {
                return Err(CliError::new("tradeoff needs --rows or --checkpoint"));
            }
            if normalize || measured {
                let f = normalize_times(&table.iter().map(|r| r.t_forward).collect::<Vec<_>>());
                let b = normalize_times(&table.iter().map(|r| r.t_batch).collect::<Vec<_>>());
                for (r, (f, b)) in table.iter_mut().zip(f.into_iter().zip(b)) {
                    r.t_forward = f;
                    r.t_batch = b;
                }
            }
            for r in &mut table {
                r.score = Some(tradeoff_score(r.rmse, r.t_forward, r.t_batch, TRADEOFF_WEIGHTS)?);
                println!("{}\t{:.3}", r.name, r.score.unwrap());
            }
            create_out(&common.out)?;
            let path = common.out.join("tradeoff.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::path(&path, e))?;
            for r in &table {
                w.serialize(r).map_err(|e| CliError::path(&path, e))?;
            }
            w.flush().map_err(|e| CliError::path(&path, e))?;
            manifest.outputs.push(path);
            (manifest, common.out)
        }
    };
    let (mut manifest, out) = manifest;
    manifest.timings.insert("total".into(), started.elapsed().as_secs_f64());
    manifest.write(&out)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TradeoffRow {
    name: String,
    rmse: f64,
    t_forward: f64,
    t_batch: f64,
    #[serde(default)]
    score: Option<f64>,
}

fn read_rows(path: &Path) -> Result<Vec<TradeoffRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::path(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::path(path, e))
}

fn write_reports(reports: &[MetricReport], out: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let csv = out.join(format!("{stem}.csv"));
    let json = out.join(format!("{stem}.json"));
    write_reports_csv(reports, &csv)?;
    write_reports_json(reports, &json)?;
    for r in reports {
        println!(
            "{}\t{}\tnoise {}\trmse {:.4}\trecall {}\tmap {}",
            r.city,
            r.period.name(),
            r.noise_level,
            r.rmse,
            r.recall_pct.map_or("-".into(), |v| format!("{v:.2}")),
            r.map.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(vec![csv, json])
}

/// Predicts test window `step` and writes the requested artifacts per city.
fn predict_step(
    model: &Model,
    data_dir: &Path,
    cfg: &RunConfig,
    step: usize,
    out: &Path,
    tensors: bool,
    images: bool,
) -> Result<Vec<PathBuf>> {
    let datasets = load_cities(data_dir)?;
    let samples = SampleSet::joint(&datasets, cfg.train.t_in, 1)?;
    let test = samples.indices(Split::Test);
    if step >= test.len() {
        return Err(CliError::new(format!(
            "step {step} is outside the test split of {} windows",
            test.len()
        )));
    }
    let data = TrainData { datasets: &datasets, samples: &samples };
    let sample = data.sample(test.start + step, 0.0, 0)?;
    let maps = predict_sample(model, &data, &sample, cfg.train.switches)?;
    let mut written = Vec::new();
    for (map, truth) in maps.iter().zip(&sample.truth) {
        let (w, h) = (map.w(), map.h());
        if tensors {
            let path = out.join(format!("{}_pred.stt", map.city));
            write_stt_file(&map.values, &path)?;
            written.push(path);
        }
        if images {
            let pred = heatmap::gray_levels(map.values.data(), &map.mask);
            let tru = heatmap::gray_levels(truth.data(), &map.mask);
            let files = [
                ("pred.pgm", heatmap::pgm_bytes(&pred, w, h)),
                ("truth.pgm", heatmap::pgm_bytes(&tru, w, h)),
                ("pair.pgm", heatmap::pair_bytes(&pred, &tru, w, h)),
            ];
            for (suffix, bytes) in files {
                let path = out.join(format!("{}_{suffix}", map.city));
                fs::write(&path, bytes).map_err(|e| CliError::path(&path, e))?;
                written.push(path);
            }
            let path = out.join(format!("{}.csv", map.city));
            heatmap::write_csv(&path, map.values.data(), truth.data(), &map.mask, h)?;
            written.push(path);
        }
    }
    Ok(written)
}

//! Command-line surface: synth / train / predict / phenology / report.
//!
//! All subcommands are deterministic given identical inputs and seeds, and
//! every train run logs its fully-resolved configuration to stderr.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{
    merge_report_rows, read_report_rows, run_experiment, summary_table, write_report_files,
    write_report_rows, EvalConfig, MethodSpec,
};
use crate::features::write_feature_matrix;
use crate::ingest::{parse_samples, remove_cloud, synthesize_dataset, write_samples};
use crate::model::{load_model, save_model};
use crate::phenology::{assign_stages, detect_windows, PhenologySeries};
use crate::stage::{Stage, ALL_STAGES};

#[derive(Parser, Debug)]
#[command(
    name = "paddy-stages",
    version,
    about = "Paddy growth stage classification and phenology detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled dataset from the phenology template
    Synth(SynthArgs),
    /// Train a classifier and write model and report files
    Train(TrainArgs),
    /// Predict stages for a sample file using a saved model
    Predict(PredictArgs),
    /// Detect flooding/heading/harvest in an EVI/LSWI series
    Phenology(PhenologyArgs),
    /// Merge report CSVs and print a per-method summary
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Samples per growth stage
    #[arg(long, value_name = "N")]
    pub per_class: usize,
    /// Per-band Gaussian noise standard deviation
    #[arg(long, default_value_t = 0.0, value_name = "SD")]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output sample CSV
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Labeled sample CSV
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Method token, e.g. lr, dnn+bn+dropout, cnn
    #[arg(long)]
    pub method: Option<String>,
    /// Flat `key = value` config file; command-line flags take precedence
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory for model.json, report.txt, report.csv, train.csv, test.csv
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Master seed; balancing, splitting, and training derive from it
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Dropout rate for methods with a dropout layer
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    /// Keep probability for lr+fastdropout
    #[arg(long)]
    pub keep_prob: Option<f64>,
    /// Also write the feature matrix of the cleaned input data
    #[arg(long, value_name = "FILE")]
    pub features_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Saved model container (model.json from train)
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Sample CSV; the stage column may be empty
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Output predictions CSV
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PhenologyArgs {
    /// Input series CSV with header date,evi,lswi
    #[arg(long, value_name = "FILE")]
    pub series: PathBuf,
    /// Odd smoothing window applied before detection
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    /// Output CSV with header date,stage
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report CSVs produced by train runs
    #[arg(required = true, value_name = "CSV")]
    pub inputs: Vec<PathBuf>,
    /// Merged CSV output
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Phenology(a) => cmd_phenology(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let data = synthesize_dataset(a.per_class, a.noise_sd, a.seed)?;
    write_samples(&a.out, &data)?;
    for (stage, count) in ALL_STAGES.iter().zip(data.class_counts()) {
        println!("{stage}: {count}");
    }
    println!("total: {} -> {}", data.len(), a.out.display());
    Ok(())
}

const CONFIG_KEYS: [&str; 9] = [
    "method",
    "seed",
    "train_fraction",
    "learning_rate",
    "momentum",
    "batch_size",
    "epochs",
    "dropout_rate",
    "keep_prob",
];

fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::usage(format!(
                "config {}:{}: expected 'key = value', found '{line}'",
                path.display(),
                idx + 1
            )));
        };
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::usage(format!(
                "config {}:{}: unknown key '{key}' (valid keys: {})",
                path.display(),
                idx + 1,
                CONFIG_KEYS.join(", ")
            )));
        }
        pairs.push((key.to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn config_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::usage(format!("invalid {key} value '{value}'")))
}

/// Defaults, then config file, then command-line flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<EvalConfig> {
    let mut method: Option<String> = None;
    let mut cfg = EvalConfig::new(MethodSpec::parse("lr").expect("placeholder method"));

    if let Some(path) = &a.config {
        for (key, value) in parse_config_file(path)? {
            match key.as_str() {
                "method" => method = Some(value),
                "seed" => cfg.seed = config_value(&key, &value)?,
                "train_fraction" => cfg.train_fraction = config_value(&key, &value)?,
                "learning_rate" => cfg.learning_rate = config_value(&key, &value)?,
                "momentum" => cfg.momentum = config_value(&key, &value)?,
                "batch_size" => cfg.batch_size = config_value(&key, &value)?,
                "epochs" => cfg.epochs = config_value(&key, &value)?,
                "dropout_rate" => cfg.dropout_rate = config_value(&key, &value)?,
                "keep_prob" => cfg.keep_prob = config_value(&key, &value)?,
                other => unreachable!("validated key {other}"),
            }
        }
    }

    if let Some(m) = &a.method {
        method = Some(m.clone());
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.train_fraction {
        cfg.train_fraction = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.dropout_rate {
        cfg.dropout_rate = v;
    }
    if let Some(v) = a.keep_prob {
        cfg.keep_prob = v;
    }

    let Some(token) = method else {
        return Err(Error::usage(
            "no method selected; pass --method or set method in the config file",
        ));
    };
    cfg.method = MethodSpec::parse(&token)?;
    Ok(cfg)
}

fn log_resolved_config(a: &TrainArgs, cfg: &EvalConfig) {
    eprintln!("resolved config:");
    eprintln!("  data = {}", a.data.display());
    eprintln!("  out_dir = {}", a.out_dir.display());
    eprintln!("  method = {}", cfg.method.token());
    eprintln!("  seed = {}", cfg.seed);
    eprintln!("  train_fraction = {}", cfg.train_fraction);
    eprintln!("  learning_rate = {}", cfg.learning_rate);
    eprintln!("  momentum = {}", cfg.momentum);
    eprintln!("  batch_size = {}", cfg.batch_size);
    eprintln!("  epochs = {}", cfg.epochs);
    if cfg.method.dropout {
        eprintln!("  dropout_rate = {}", cfg.dropout_rate);
    }
    if cfg.method.fastdropout {
        eprintln!("  keep_prob = {}", cfg.keep_prob);
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    log_resolved_config(a, &cfg);

    let raw = parse_samples(&a.data)?;
    let clean = remove_cloud(&raw);
    if clean.len() < raw.len() {
        eprintln!("dropped {} cloud-flagged samples", raw.len() - clean.len());
    }

    let out = run_experiment(&clean, &cfg)?;

    fs::create_dir_all(&a.out_dir).map_err(|source| Error::Io {
        path: a.out_dir.clone(),
        source,
    })?;
    save_model(&a.out_dir.join("model.json"), &out.container)?;
    write_report_files(&a.out_dir, &out.report, &cfg)?;
    write_samples(&a.out_dir.join("train.csv"), &out.train)?;
    write_samples(&a.out_dir.join("test.csv"), &out.test)?;
    if let Some(path) = &a.features_out {
        write_feature_matrix(path, &clean)?;
    }

    println!("method: {}", out.report.method);
    println!("accuracy: {}", out.report.accuracy);
    println!("train_accuracy: {}", out.report.train_accuracy);
    println!(
        "n_train: {}, n_test: {} -> {}",
        out.report.n_train,
        out.report.n_test,
        a.out_dir.display()
    );
    eprintln!("wall time: {:.3}s", out.report.wall_time.as_secs_f64());
    Ok(())
}

pub const PREDICT_HEADER: &str = "row_index,stage,p_gs1,p_gs2,p_gs3,p_gs4,p_gs5";

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let container = load_model(&a.model)?;
    let data = parse_samples(&a.data)?;
    let (stages, probs) = container.predict_samples(&data.samples)?;

    let mut text = String::from(PREDICT_HEADER);
    text.push('\n');
    for (i, stage) in stages.iter().enumerate() {
        text.push_str(&format!("{i},{stage}"));
        for v in probs.row(i) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    fs::write(&a.out, text).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    println!("wrote {} predictions -> {}", stages.len(), a.out.display());
    Ok(())
}

pub const SERIES_HEADER: &str = "date,evi,lswi";

pub fn parse_series(path: &Path) -> Result<PhenologySeries> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == SERIES_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header '{SERIES_HEADER}'"),
            })
        }
    }
    let mut dates = Vec::new();
    let mut evi = Vec::new();
    let mut lswi = Vec::new();
    for (idx, raw) in lines {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let date = NaiveDate::parse_from_str(fields[0], "%Y-%m-%d")
            .map_err(|e| parse_err(format!("bad date '{}': {e}", fields[0])))?;
        let e: f64 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad evi '{}'", fields[1])))?;
        let l: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("bad lswi '{}'", fields[2])))?;
        dates.push(date);
        evi.push(e);
        lswi.push(l);
    }
    PhenologySeries::new(dates, evi, lswi)
}

fn cmd_phenology(a: &PhenologyArgs) -> Result<()> {
    let series = parse_series(&a.series)?;
    let smooth = series.smoothed(a.window)?;

    let stages = match detect_windows(&smooth) {
        Some(w) => match assign_stages(series.len(), &w) {
            Ok(stages) => {
                println!("flooding: {}", series.dates[w.flooding]);
                println!("heading: {}", series.dates[w.heading]);
                println!("harvest: {}", series.dates[w.harvest]);
                stages
            }
            Err(_) => degenerate_stages(series.len()),
        },
        None => degenerate_stages(series.len()),
    };

    let mut text = String::from("date,stage\n");
    for (date, stage) in series.dates.iter().zip(&stages) {
        text.push_str(&format!("{date},{stage}\n"));
    }
    fs::write(&a.out, text).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    println!("wrote {} rows -> {}", stages.len(), a.out.display());
    Ok(())
}

fn degenerate_stages(len: usize) -> Vec<Stage> {
    eprintln!("warning: no crop cycle detected; labeling all dates GS5");
    vec![Stage::GS5; len]
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &a.inputs {
        rows.extend(read_report_rows(path)?);
    }
    let merged = merge_report_rows(rows);
    write_report_rows(&a.out, &merged)?;
    print!("{}", summary_table(&merged));
    println!("{} rows -> {}", merged.len(), a.out.display());
    Ok(())
}

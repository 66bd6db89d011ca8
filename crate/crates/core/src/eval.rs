//! Experiment protocol: method descriptors, network builders, confusion
//! matrices, and deterministic report files (one CSV summary row plus a text
//! report per experiment).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastdropout::fd_train;
use crate::features::{
    apply_standardizer, feature_matrix, featurize, fit_standardizer, FeatureVector, FEATURE_WIDTH,
};
use crate::ingest::{balance_classes, split_train_test, Dataset, SplitSpec};
use crate::lr::lr_train;
use crate::model::{ModelContainer, ModelKind};
use crate::nn::{self, BatchNorm, Conv1d, Dense, Dropout, Layer, Matrix, Network, TrainConfig};
use crate::stage::{Stage, ALL_STAGES, STAGE_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Lr,
    Dnn,
    Cnn,
}

/// One of the ten method tokens of the experiment protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSpec {
    pub family: Family,
    pub fastdropout: bool,
    pub batchnorm: bool,
    pub dropout: bool,
}

pub const METHOD_TOKENS: [&str; 10] = [
    "lr",
    "lr+fastdropout",
    "dnn",
    "dnn+dropout",
    "dnn+bn",
    "dnn+bn+dropout",
    "cnn",
    "cnn+dropout",
    "cnn+bn",
    "cnn+bn+dropout",
];

impl MethodSpec {
    pub fn parse(token: &str) -> Result<MethodSpec> {
        let spec = match token {
            "lr" => MethodSpec::plain(Family::Lr),
            "lr+fastdropout" => MethodSpec {
                fastdropout: true,
                ..MethodSpec::plain(Family::Lr)
            },
            "dnn" => MethodSpec::plain(Family::Dnn),
            "dnn+dropout" => MethodSpec {
                dropout: true,
                ..MethodSpec::plain(Family::Dnn)
            },
            "dnn+bn" => MethodSpec {
                batchnorm: true,
                ..MethodSpec::plain(Family::Dnn)
            },
            "dnn+bn+dropout" => MethodSpec {
                batchnorm: true,
                dropout: true,
                ..MethodSpec::plain(Family::Dnn)
            },
            "cnn" => MethodSpec::plain(Family::Cnn),
            "cnn+dropout" => MethodSpec {
                dropout: true,
                ..MethodSpec::plain(Family::Cnn)
            },
            "cnn+bn" => MethodSpec {
                batchnorm: true,
                ..MethodSpec::plain(Family::Cnn)
            },
            "cnn+bn+dropout" => MethodSpec {
                batchnorm: true,
                dropout: true,
                ..MethodSpec::plain(Family::Cnn)
            },
            other => {
                return Err(Error::usage(format!(
                    "unknown method '{other}'; valid methods: {}",
                    METHOD_TOKENS.join(", ")
                )))
            }
        };
        Ok(spec)
    }

    fn plain(family: Family) -> MethodSpec {
        MethodSpec {
            family,
            fastdropout: false,
            batchnorm: false,
            dropout: false,
        }
    }

    pub fn all() -> Vec<MethodSpec> {
        METHOD_TOKENS
            .iter()
            .map(|t| MethodSpec::parse(t).expect("canonical token"))
            .collect()
    }

    /// Canonical token, inverse of parse.
    pub fn token(&self) -> String {
        let mut t = match self.family {
            Family::Lr => "lr",
            Family::Dnn => "dnn",
            Family::Cnn => "cnn",
        }
        .to_string();
        if self.fastdropout {
            t.push_str("+fastdropout");
        }
        if self.batchnorm {
            t.push_str("+bn");
        }
        if self.dropout {
            t.push_str("+dropout");
        }
        t
    }
}

const DROPOUT_SEED_STRIDE: u64 = 0x9E3779B97F4A7C15;

fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..count).map(|_| rng.random_range(-bound..bound)).collect()
}

fn dense_layer(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, bias: bool) -> Result<Layer> {
    let w = Matrix::from_vec(fan_out, fan_in, uniform_init(rng, fan_in, fan_out * fan_in));
    let b = bias.then(|| vec![0.0; fan_out]);
    Ok(Layer::Dense(Dense::new(w, b)?))
}

/// dense(11->64) -> [bn] -> relu -> [dropout] -> dense(64->32) -> [bn] ->
/// relu -> [dropout] -> dense(32->5) -> softmax. Dense layers followed by
/// batch norm carry no bias.
pub fn build_dnn(seed: u64, batchnorm: bool, dropout: Option<f64>) -> Result<Network> {
    let widths = [FEATURE_WIDTH, 64, 32];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut dropouts = 0u64;
    for i in 0..widths.len() - 1 {
        layers.push(dense_layer(&mut rng, widths[i], widths[i + 1], !batchnorm)?);
        if batchnorm {
            layers.push(Layer::BatchNorm(BatchNorm::new(widths[i + 1])));
        }
        layers.push(Layer::Relu);
        if let Some(rate) = dropout {
            dropouts += 1;
            let mask_seed = seed ^ DROPOUT_SEED_STRIDE.wrapping_mul(dropouts);
            layers.push(Layer::Dropout(Dropout::new(rate, mask_seed)?));
        }
    }
    layers.push(dense_layer(&mut rng, *widths.last().unwrap(), STAGE_COUNT, true)?);
    layers.push(Layer::Softmax);
    Network::new(FEATURE_WIDTH, layers)
}

/// conv1d(1ch x11 -> 16ch x9, width 3) -> [bn] -> relu -> [dropout] ->
/// conv1d(16ch x9 -> 16ch x7, width 3) -> relu -> dense(112->5) -> softmax.
/// The first convolution carries no bias when batch norm follows it.
pub fn build_cnn(seed: u64, batchnorm: bool, dropout: Option<f64>) -> Result<Network> {
    let filters = 16;
    let width = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();

    let k1 = uniform_init(&mut rng, width, filters * width);
    let b1 = (!batchnorm).then(|| vec![0.0; filters]);
    layers.push(Layer::Conv1d(Conv1d::new(filters, 1, width, 1, k1, b1)?));
    let conv1_out = filters * (FEATURE_WIDTH - width + 1); // 16 x 9 = 144
    if batchnorm {
        layers.push(Layer::BatchNorm(BatchNorm::new(conv1_out)));
    }
    layers.push(Layer::Relu);
    if let Some(rate) = dropout {
        let mask_seed = seed ^ DROPOUT_SEED_STRIDE;
        layers.push(Layer::Dropout(Dropout::new(rate, mask_seed)?));
    }

    let k2 = uniform_init(&mut rng, filters * width, filters * filters * width);
    layers.push(Layer::Conv1d(Conv1d::new(
        filters,
        filters,
        width,
        1,
        k2,
        Some(vec![0.0; filters]),
    )?));
    layers.push(Layer::Relu);

    let conv2_out = filters * (FEATURE_WIDTH - width + 1 - width + 1); // 16 x 7 = 112
    layers.push(dense_layer(&mut rng, conv2_out, STAGE_COUNT, true)?);
    layers.push(Layer::Softmax);
    Network::new(FEATURE_WIDTH, layers)
}

pub fn build_network(m: &MethodSpec, seed: u64, dropout_rate: f64) -> Result<Network> {
    let dropout = m.dropout.then_some(dropout_rate);
    match m.family {
        Family::Dnn => build_dnn(seed, m.batchnorm, dropout),
        Family::Cnn => build_cnn(seed, m.batchnorm, dropout),
        Family::Lr => Err(Error::usage("lr methods do not use a network")),
    }
}

/// Human-readable layer chain, e.g. for the report's config snapshot.
pub fn describe_network(net: &Network) -> String {
    let mut parts = Vec::new();
    let mut width = net.in_width();
    for layer in net.layers() {
        let out = layer.out_width(width).unwrap_or(0);
        let part = match layer {
            Layer::Dense(d) => {
                let bias = if d.b.is_some() { "" } else { ", no bias" };
                format!("dense({}->{}{bias})", d.w.cols(), d.w.rows())
            }
            Layer::Conv1d(c) => {
                let bias = if c.bias.is_some() { "" } else { ", no bias" };
                format!(
                    "conv1d({}ch->{}ch, width {}, stride {}{bias})",
                    c.in_channels, c.filters, c.width, c.stride
                )
            }
            Layer::BatchNorm(b) => format!("batchnorm({})", b.gamma.len()),
            Layer::Relu => "relu".to_string(),
            Layer::Sigmoid => "sigmoid".to_string(),
            Layer::Dropout(d) => format!("dropout({})", d.rate),
            Layer::Softmax => "softmax".to_string(),
        };
        parts.push(part);
        width = out;
    }
    parts.join(" -> ")
}

/// Rows are actual stages, columns predicted stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; STAGE_COUNT]; STAGE_COUNT],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..STAGE_COUNT).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> [u64; STAGE_COUNT] {
        let mut sums = [0; STAGE_COUNT];
        for (s, row) in sums.iter_mut().zip(&self.counts) {
            *s = row.iter().sum();
        }
        sums
    }
}

pub fn confusion(actual: &[Stage], predicted: &[Stage]) -> Result<ConfusionMatrix> {
    if actual.len() != predicted.len() {
        return Err(Error::data(format!(
            "confusion: {} actual vs {} predicted labels",
            actual.len(),
            predicted.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::data("confusion: no samples"));
    }
    let mut counts = [[0u64; STAGE_COUNT]; STAGE_COUNT];
    for (a, p) in actual.iter().zip(predicted) {
        counts[a.index()][p.index()] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

pub fn accuracy(m: &ConfusionMatrix) -> Result<f64> {
    let total = m.total();
    if total == 0 {
        return Err(Error::data("accuracy of an empty confusion matrix"));
    }
    Ok(m.trace() as f64 / total as f64)
}

/// Full experiment configuration; `seed` drives balancing (seed), splitting
/// (seed+1), and training (seed+2).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub method: MethodSpec,
    pub seed: u64,
    pub train_fraction: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub keep_prob: f64,
}

impl EvalConfig {
    pub fn new(method: MethodSpec) -> EvalConfig {
        EvalConfig {
            method,
            seed: 0,
            train_fraction: 2.0 / 3.0,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 128,
            epochs: 100,
            dropout_rate: 0.5,
            keep_prob: 0.8,
        }
    }

    pub fn balance_seed(&self) -> u64 {
        self.seed
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.train_seed(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub n_train: usize,
    pub n_test: usize,
    /// Key-value snapshot, sorted by key.
    pub config: Vec<(String, String)>,
    /// Kept in memory for operators; never written into report files so
    /// reruns stay byte-identical.
    pub wall_time: Duration,
}

pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub container: ModelContainer,
    pub train: Dataset,
    pub test: Dataset,
}

fn tag(step: &str, e: Error) -> Error {
    match e {
        Error::Usage(m) => Error::Usage(format!("{step}: {m}")),
        Error::Data(m) => Error::Data(format!("{step}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{step}: {m}")),
        other => other,
    }
}

fn labels_of(d: &Dataset) -> Result<Vec<Stage>> {
    d.samples
        .iter()
        .map(|s| s.stage.ok_or_else(|| Error::data("unlabeled sample in labeled pipeline")))
        .collect()
}

/// balance -> split -> featurize -> standardize -> train -> predict ->
/// confusion -> report. Deterministic per (data, config).
pub fn run_experiment(data: &Dataset, cfg: &EvalConfig) -> Result<ExperimentOutput> {
    let start = Instant::now();
    let method = cfg.method.token();

    let balanced = balance_classes(data, cfg.balance_seed()).map_err(|e| tag("balance", e))?;
    let split = SplitSpec {
        train_fraction: cfg.train_fraction,
        seed: cfg.split_seed(),
    };
    let (train_d, test_d) = split_train_test(&balanced, &split).map_err(|e| tag("split", e))?;

    let train_feats: Vec<FeatureVector> = train_d.samples.iter().map(featurize).collect();
    let test_feats: Vec<FeatureVector> = test_d.samples.iter().map(featurize).collect();
    let scaler = fit_standardizer(&train_feats).map_err(|e| tag("standardize", e))?;
    let train_x = feature_matrix(
        &train_feats
            .iter()
            .map(|v| apply_standardizer(&scaler, v))
            .collect::<Vec<_>>(),
    );
    let test_x = feature_matrix(
        &test_feats
            .iter()
            .map(|v| apply_standardizer(&scaler, v))
            .collect::<Vec<_>>(),
    );
    let train_labels = labels_of(&train_d)?;
    let test_labels = labels_of(&test_d)?;

    let tc = cfg.train_config();
    let mut snapshot: Vec<(String, String)> = vec![
        ("method".into(), method.clone()),
        ("seed".into(), cfg.seed.to_string()),
        ("balance_seed".into(), cfg.balance_seed().to_string()),
        ("split_seed".into(), cfg.split_seed().to_string()),
        ("train_seed".into(), cfg.train_seed().to_string()),
        ("train_fraction".into(), cfg.train_fraction.to_string()),
        ("learning_rate".into(), cfg.learning_rate.to_string()),
        ("momentum".into(), cfg.momentum.to_string()),
        ("batch_size".into(), cfg.batch_size.to_string()),
        ("epochs".into(), cfg.epochs.to_string()),
        ("feature_width".into(), FEATURE_WIDTH.to_string()),
    ];

    let kind = match cfg.method.family {
        Family::Lr if cfg.method.fastdropout => {
            snapshot.push(("keep_prob".into(), cfg.keep_prob.to_string()));
            snapshot.push((
                "model".into(),
                "one-vs-rest fast-dropout logistic regression".into(),
            ));
            let (m, _) = fd_train(&train_x, &train_labels, cfg.keep_prob, &tc)
                .map_err(|e| tag("train", e))?;
            ModelKind::FastDropout(m)
        }
        Family::Lr => {
            snapshot.push(("model".into(), "one-vs-rest logistic regression".into()));
            let (m, _) = lr_train(&train_x, &train_labels, &tc).map_err(|e| tag("train", e))?;
            ModelKind::Logistic(m)
        }
        _ => {
            let mut net = build_network(&cfg.method, cfg.seed, cfg.dropout_rate)
                .map_err(|e| tag("build", e))?;
            if cfg.method.dropout {
                snapshot.push(("dropout_rate".into(), cfg.dropout_rate.to_string()));
            }
            snapshot.push(("architecture".into(), describe_network(&net)));
            nn::train(&mut net, &train_x, &train_labels, &tc).map_err(|e| tag("train", e))?;
            ModelKind::Network(net)
        }
    };

    let (train_pred, _) = kind.predict_batch(&train_x).map_err(|e| tag("predict", e))?;
    let (test_pred, _) = kind.predict_batch(&test_x).map_err(|e| tag("predict", e))?;
    let matches = train_pred
        .iter()
        .zip(&train_labels)
        .filter(|(a, b)| a == b)
        .count();
    let train_accuracy = matches as f64 / train_labels.len() as f64;
    let cm = confusion(&test_labels, &test_pred).map_err(|e| tag("confusion", e))?;
    let acc = accuracy(&cm).map_err(|e| tag("confusion", e))?;

    snapshot.sort();
    let report = ExperimentReport {
        method: method.clone(),
        seed: cfg.seed,
        accuracy: acc,
        train_accuracy,
        confusion: cm,
        n_train: train_d.len(),
        n_test: test_d.len(),
        config: snapshot,
        wall_time: start.elapsed(),
    };
    let container = ModelContainer::new(&method, cfg.seed, scaler, kind);
    Ok(ExperimentOutput {
        report,
        container,
        train: train_d,
        test: test_d,
    })
}

pub const REPORT_TEXT_VERSION: &str = "paddy-stages report v1";
pub const REPORT_CSV_HEADER: &str = "version,method,seed,accuracy,train_accuracy,n_train,n_test,\
learning_rate,momentum,batch_size,epochs,train_fraction,dropout_rate,keep_prob";
pub const REPORT_CSV_VERSION: &str = "1";

/// One summary row per experiment. The dropout_rate and keep_prob fields are
/// empty when the method does not use them.
pub fn report_csv_row(r: &ExperimentReport, cfg: &EvalConfig) -> String {
    let dropout_rate = if cfg.method.dropout {
        cfg.dropout_rate.to_string()
    } else {
        String::new()
    };
    let keep_prob = if cfg.method.fastdropout {
        cfg.keep_prob.to_string()
    } else {
        String::new()
    };
    format!(
        "{REPORT_CSV_VERSION},{},{},{},{},{},{},{},{},{},{},{},{dropout_rate},{keep_prob}",
        r.method,
        r.seed,
        r.accuracy,
        r.train_accuracy,
        r.n_train,
        r.n_test,
        cfg.learning_rate,
        cfg.momentum,
        cfg.batch_size,
        cfg.epochs,
        cfg.train_fraction,
    )
}

/// Full text report: header line, scalar results, sorted config snapshot,
/// and the 5x5 confusion grid.
pub fn report_text(r: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str(REPORT_TEXT_VERSION);
    out.push('\n');
    let _ = writeln!(out, "method: {}", r.method);
    let _ = writeln!(out, "seed: {}", r.seed);
    let _ = writeln!(out, "accuracy: {}", r.accuracy);
    let _ = writeln!(out, "train_accuracy: {}", r.train_accuracy);
    let _ = writeln!(out, "n_train: {}", r.n_train);
    let _ = writeln!(out, "n_test: {}", r.n_test);
    out.push_str("config:\n");
    for (k, v) in &r.config {
        let _ = writeln!(out, "  {k} = {v}");
    }
    out.push_str("confusion (rows actual, cols predicted):\n");
    let _ = write!(out, "     ");
    for s in ALL_STAGES {
        let _ = write!(out, " {:>7}", s.to_string());
    }
    out.push('\n');
    for (i, s) in ALL_STAGES.into_iter().enumerate() {
        let _ = write!(out, " {:>4}", s.to_string());
        for j in 0..STAGE_COUNT {
            let _ = write!(out, " {:>7}", r.confusion.counts[i][j]);
        }
        out.push('\n');
    }
    out
}

pub fn write_report_files(dir: &Path, r: &ExperimentReport, cfg: &EvalConfig) -> Result<()> {
    let txt = dir.join("report.txt");
    fs::write(&txt, report_text(r)).map_err(|source| Error::Io {
        path: txt.clone(),
        source,
    })?;
    let csv = dir.join("report.csv");
    let body = format!("{REPORT_CSV_HEADER}\n{}\n", report_csv_row(r, cfg));
    fs::write(&csv, body).map_err(|source| Error::Io {
        path: csv.clone(),
        source,
    })
}

/// Reads one report CSV, validating header and per-row version/field count.
pub fn read_report_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let n_fields = REPORT_CSV_HEADER.split(',').count();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected report header '{REPORT_CSV_HEADER}'"),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != n_fields {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected {n_fields} fields, found {}", fields.len()),
            });
        }
        if fields[0] != REPORT_CSV_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("unsupported report version '{}'", fields[0]),
            });
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn method_rank(token: &str) -> usize {
    METHOD_TOKENS
        .iter()
        .position(|t| *t == token)
        .unwrap_or(METHOD_TOKENS.len())
}

/// Merges rows from several report CSVs into canonical method order, then by
/// seed.
pub fn merge_report_rows(mut rows: Vec<Vec<String>>) -> Vec<Vec<String>> {
    rows.sort_by(|a, b| {
        (method_rank(&a[1]), &a[1], a[2].parse::<u64>().ok(), &a[2..])
            .cmp(&(method_rank(&b[1]), &b[1], b[2].parse::<u64>().ok(), &b[2..]))
    });
    rows
}

pub fn write_report_rows(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Table-3-shaped summary: per-method run count and mean/min/max accuracy,
/// methods in canonical order.
pub fn summary_table(rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>5} {:>10} {:>10} {:>10}", "method", "runs", "mean_acc", "min_acc", "max_acc");
    let sorted = merge_report_rows(rows.to_vec());
    let mut i = 0;
    while i < sorted.len() {
        let method = &sorted[i][1];
        let mut accs = Vec::new();
        let mut j = i;
        while j < sorted.len() && &sorted[j][1] == method {
            if let Ok(a) = sorted[j][3].parse::<f64>() {
                accs.push(a);
            }
            j += 1;
        }
        let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        let min = accs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            out,
            "{method:<16} {:>5} {mean:>10.4} {min:>10.4} {max:>10.4}",
            accs.len()
        );
        i = j;
    }
    out
}

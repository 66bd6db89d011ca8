//! Sample-file parsing, cloud filtering, class balancing, stratified
//! splitting, and the synthetic dataset generator.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::phenology;
use crate::stage::{Stage, ALL_STAGES, STAGE_COUNT};

pub const SAMPLE_HEADER: &str = "date,b1,b2,b3,b4,b5,b6,b7,cloud,stage";
pub const BAND_COUNT: usize = 7;

/// One pixel observation: 7 surface reflectances, a cloud flag, and an
/// optional growth-stage label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub date: NaiveDate,
    pub bands: [f64; BAND_COUNT],
    pub cloud: bool,
    pub stage: Option<Stage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-class sample counts, indexed by stage.
    pub fn class_counts(&self) -> [usize; STAGE_COUNT] {
        let mut counts = [0usize; STAGE_COUNT];
        for s in &self.samples {
            if let Some(st) = s.stage {
                counts[st.index()] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> SplitSpec {
        SplitSpec {
            train_fraction: 2.0 / 3.0,
            seed: 0,
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a sample file. Line numbers in errors are 1-based and count the
/// header.
pub fn parse_samples(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r') == SAMPLE_HEADER => {}
        Some((_, header)) => {
            return Err(parse_err(
                path,
                1,
                format!("expected header '{SAMPLE_HEADER}', found '{header}'"),
            ))
        }
        None => return Err(parse_err(path, 1, "empty file, expected header")),
    }

    let mut samples = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim_end_matches('\r');
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 10 comma-separated fields, found {}", fields.len()),
            ));
        }
        let date = NaiveDate::parse_from_str(fields[0], "%Y-%m-%d")
            .map_err(|e| parse_err(path, lineno, format!("invalid date '{}': {e}", fields[0])))?;
        let mut bands = [0.0; BAND_COUNT];
        for (b, field) in bands.iter_mut().zip(&fields[1..8]) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("invalid band value '{field}'")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, format!("non-finite band value '{field}'")));
            }
            *b = v;
        }
        let cloud = match fields[8] {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("invalid cloud flag '{other}', expected 0 or 1"),
                ))
            }
        };
        let stage = match fields[9] {
            "" => None,
            token => Some(
                Stage::parse(token)
                    .map_err(|_| parse_err(path, lineno, format!("unknown stage token '{token}'")))?,
            ),
        };
        samples.push(Sample {
            date,
            bands,
            cloud,
            stage,
        });
    }
    Ok(Dataset {
        samples,
        provenance: path.display().to_string(),
    })
}

pub fn write_samples(path: &Path, d: &Dataset) -> Result<()> {
    let mut out = String::with_capacity(64 * (d.len() + 1));
    out.push_str(SAMPLE_HEADER);
    out.push('\n');
    for s in &d.samples {
        write!(out, "{}", s.date.format("%Y-%m-%d")).expect("write to string");
        for b in &s.bands {
            write!(out, ",{b}").expect("write to string");
        }
        write!(out, ",{}", if s.cloud { 1 } else { 0 }).expect("write to string");
        match s.stage {
            Some(st) => {
                write!(out, ",{st}").expect("write to string");
            }
            None => out.push(','),
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Drops cloud-flagged samples, preserving order.
pub fn remove_cloud(d: &Dataset) -> Dataset {
    Dataset {
        samples: d.samples.iter().filter(|s| !s.cloud).cloned().collect(),
        provenance: d.provenance.clone(),
    }
}

fn labeled_groups(d: &Dataset) -> Result<[Vec<usize>; STAGE_COUNT]> {
    let mut groups: [Vec<usize>; STAGE_COUNT] = Default::default();
    for (i, s) in d.samples.iter().enumerate() {
        match s.stage {
            Some(st) => groups[st.index()].push(i),
            None => {
                return Err(Error::data(format!(
                    "sample {i} ({}) has no stage label",
                    s.date.format("%Y-%m-%d")
                )))
            }
        }
    }
    Ok(groups)
}

fn select(d: &Dataset, keep: &[bool], provenance: String) -> Dataset {
    Dataset {
        samples: d
            .samples
            .iter()
            .zip(keep)
            .filter(|(_, k)| **k)
            .map(|(s, _)| s.clone())
            .collect(),
        provenance,
    }
}

/// Downsamples every present class to the minimum present class count,
/// uniformly without replacement. Classes already at the minimum keep all
/// their samples. Output preserves input order.
pub fn balance_classes(d: &Dataset, seed: u64) -> Result<Dataset> {
    let groups = labeled_groups(d)?;
    let min = groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| g.len())
        .min()
        .unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; d.len()];
    for group in &groups {
        if group.len() == min {
            for &i in group {
                keep[i] = true;
            }
        } else if group.len() > min {
            for j in rand::seq::index::sample(&mut rng, group.len(), min) {
                keep[group[j]] = true;
            }
        }
    }
    Ok(select(d, &keep, d.provenance.clone()))
}

/// Stratified holdout split: each class contributes floor(train_fraction x
/// n_class) samples to train (with a tolerance so exact rationals like 2/3 of
/// 6 resolve to 4, not 3) and the remainder to test. Both partitions preserve
/// input order.
pub fn split_train_test(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::usage(format!(
            "train_fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let groups = labeled_groups(d)?;
    for (g, stage) in groups.iter().zip(ALL_STAGES) {
        if !g.is_empty() && g.len() < 2 {
            return Err(Error::data(format!(
                "class {stage} has {} sample(s), need at least 2 to stratify",
                g.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut in_train = vec![false; d.len()];
    for group in &groups {
        if group.is_empty() {
            continue;
        }
        let n_train = (spec.train_fraction * group.len() as f64 + 1e-9).floor() as usize;
        let n_train = n_train.min(group.len());
        for j in rand::seq::index::sample(&mut rng, group.len(), n_train) {
            in_train[group[j]] = true;
        }
    }
    let in_test: Vec<bool> = in_train.iter().map(|k| !k).collect();
    Ok((
        select(d, &in_train, d.provenance.clone()),
        select(d, &in_test, d.provenance.clone()),
    ))
}

/// Generates `n_per_class` labeled samples per stage from the canonical
/// phenology profile: pick a profile index inside the stage's detected
/// window, map its (EVI, LSWI) through the band model, and add clipped
/// Gaussian band noise. Labels are ground truth by construction.
pub fn synthesize_dataset(n_per_class: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n_per_class < 1 {
        return Err(Error::usage("n_per_class must be at least 1"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::usage(format!("noise_sd must be finite and >= 0, got {noise_sd}")));
    }
    let profile = phenology::canonical_profile();
    let windows = phenology::detect_windows(&profile)
        .ok_or_else(|| Error::data("canonical profile has no detectable windows"))?;
    let stages = phenology::assign_stages(profile.len(), &windows)?;
    let mut pools: [Vec<usize>; STAGE_COUNT] = Default::default();
    for (i, st) in stages.iter().enumerate() {
        pools[st.index()].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sd).map_err(|e| Error::usage(format!("noise_sd: {e}")))?;
    let mut samples = Vec::with_capacity(n_per_class * STAGE_COUNT);
    for (stage, pool) in ALL_STAGES.into_iter().zip(&pools) {
        for _ in 0..n_per_class {
            let idx = pool[rng.random_range(0..pool.len())];
            let mut bands = phenology::band_model(profile.evi[idx], profile.lswi[idx]);
            if noise_sd > 0.0 {
                for b in &mut bands {
                    *b = (*b + normal.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            samples.push(Sample {
                date: profile.dates[idx],
                bands,
                cloud: false,
                stage: Some(stage),
            });
        }
    }
    Ok(Dataset {
        samples,
        provenance: format!("synthetic(n_per_class={n_per_class}, noise_sd={noise_sd}, seed={seed})"),
    })
}

//! EVI/LSWI time-series smoothing and heuristic stage detection (flooding,
//! heading, harvest). Doubles as the ground-truth engine for the synthetic
//! data generator via the canonical profile and its band model.

use chrono::{Duration, NaiveDate};

use crate::error::{Error, Result};
use crate::stage::Stage;

/// Nominal revisit interval of the series, in days.
pub const CADENCE_DAYS: i64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PhenologySeries {
    pub dates: Vec<NaiveDate>,
    pub evi: Vec<f64>,
    pub lswi: Vec<f64>,
}

impl PhenologySeries {
    pub fn new(dates: Vec<NaiveDate>, evi: Vec<f64>, lswi: Vec<f64>) -> Result<PhenologySeries> {
        if evi.len() != dates.len() || lswi.len() != dates.len() {
            return Err(Error::data("series columns have unequal lengths"));
        }
        if dates.len() < 5 {
            return Err(Error::data(format!(
                "series too short: {} points, need at least 5",
                dates.len()
            )));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("series dates must be strictly increasing"));
        }
        if evi.iter().chain(&lswi).any(|v| !v.is_finite()) {
            return Err(Error::data("series contains non-finite values"));
        }
        Ok(PhenologySeries { dates, evi, lswi })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Both value columns smoothed with the same centered moving average.
    pub fn smoothed(&self, window: usize) -> Result<PhenologySeries> {
        Ok(PhenologySeries {
            dates: self.dates.clone(),
            evi: smooth_series(&self.evi, window)?,
            lswi: smooth_series(&self.lswi, window)?,
        })
    }
}

/// Detected stage boundaries, as indices into the series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageWindows {
    pub flooding: usize,
    pub heading: usize,
    pub harvest: usize,
}

/// Centered moving average with edge truncation: the window shrinks near the
/// boundaries, so output length equals input length.
pub fn smooth_series(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) {
        return Err(Error::usage(format!("smoothing window {window} must be odd")));
    }
    if window > values.len() {
        return Err(Error::usage(format!(
            "smoothing window {window} exceeds series length {}",
            values.len()
        )));
    }
    let h = window / 2;
    let n = values.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(h);
        let hi = (i + h + 1).min(n);
        let slice = &values[lo..hi];
        let mean = slice.iter().sum::<f64>() / (hi - lo) as f64;
        // The exact mean lies inside the window's range; clamping removes
        // the 1-ulp rounding overshoot so constant series stay fixed points.
        let min = slice.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.push(mean.clamp(min, max));
    }
    Ok(out)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Earliest index where lswi + 0.05 >= evi while evi is below the series
/// median (the guard against senescence false positives).
pub fn detect_flooding(s: &PhenologySeries) -> Option<usize> {
    let med = median(&s.evi);
    (0..s.len()).find(|&i| s.lswi[i] + 0.05 >= s.evi[i] && s.evi[i] < med)
}

/// Global EVI maximum at or after the flooding index (whole series when no
/// flooding was found); earliest index on ties.
pub fn detect_heading(s: &PhenologySeries) -> Option<usize> {
    if s.is_empty() {
        return None;
    }
    let start = detect_flooding(s).unwrap_or(0);
    let mut best = start;
    for i in start..s.len() {
        if s.evi[i] > s.evi[best] {
            best = i;
        }
    }
    Some(best)
}

/// First post-heading index where the discrete second difference of EVI has
/// turned positive after having been non-positive, and EVI has dropped below
/// halfway between the pre-flooding baseline and the peak. Falls back to the
/// post-heading minimum when no such index exists.
pub fn detect_harvest(s: &PhenologySeries) -> Option<usize> {
    let heading = detect_heading(s)?;
    let flooding = detect_flooding(s);
    let baseline = match flooding {
        Some(f) if f > 0 => s.evi[..f].iter().sum::<f64>() / f as f64,
        _ => s.evi.iter().cloned().fold(f64::INFINITY, f64::min),
    };
    let threshold = baseline + 0.5 * (s.evi[heading] - baseline);

    let mut latched = false;
    for i in heading + 1..s.len().saturating_sub(1) {
        let d2 = s.evi[i + 1] - 2.0 * s.evi[i] + s.evi[i - 1];
        if d2 <= 0.0 {
            latched = true;
        } else if latched && s.evi[i] <= threshold {
            return Some(i);
        }
    }
    if heading + 1 >= s.len() {
        return None;
    }
    let mut best = heading + 1;
    for i in heading + 1..s.len() {
        if s.evi[i] < s.evi[best] {
            best = i;
        }
    }
    Some(best)
}

pub fn detect_windows(s: &PhenologySeries) -> Option<StageWindows> {
    let flooding = detect_flooding(s)?;
    let heading = detect_heading(s)?;
    let harvest = detect_harvest(s)?;
    Some(StageWindows {
        flooding,
        heading,
        harvest,
    })
}

/// Partitions indices into stages: [flooding, midpoint) GS1, [midpoint,
/// heading) GS2, [heading, harvest) GS3, harvest plus one cadence step GS4,
/// everything else (pre-flood and the post-harvest tail) GS5.
pub fn assign_stages(len: usize, w: &StageWindows) -> Result<Vec<Stage>> {
    if !(w.flooding < w.heading && w.heading < w.harvest && w.harvest < len) {
        return Err(Error::data(format!(
            "stage windows out of order: flooding {} heading {} harvest {} (series length {len})",
            w.flooding, w.heading, w.harvest
        )));
    }
    let mid = w.flooding + (w.heading - w.flooding) / 2;
    let mut stages = vec![Stage::GS5; len];
    for (i, st) in stages.iter_mut().enumerate() {
        *st = if i >= w.flooding && i < mid {
            Stage::GS1
        } else if i >= mid && i < w.heading {
            Stage::GS2
        } else if i >= w.heading && i < w.harvest {
            Stage::GS3
        } else if i >= w.harvest && i <= w.harvest + 1 {
            Stage::GS4
        } else {
            Stage::GS5
        };
    }
    Ok(stages)
}

const CANONICAL_EVI: [f64; 23] = [
    0.18, 0.17, 0.16, 0.10, 0.13, 0.18, 0.30, 0.42, 0.54, 0.63, 0.68, 0.62, 0.52, 0.40, 0.27,
    0.21, 0.15, 0.147, 0.145, 0.145, 0.145, 0.145, 0.145,
];

const CANONICAL_LSWI: [f64; 23] = [
    0.02, 0.01, 0.00, 0.33, 0.32, 0.31, 0.285, 0.275, 0.265, 0.25, 0.16, 0.13, 0.10, 0.08, 0.07,
    0.06, 0.00, -0.01, -0.02, -0.02, -0.02, -0.02, -0.02,
];

/// One noiseless paddy season at 16-day cadence. The values are fixture data
/// designed so that raw detection recovers `canonical_truth()` exactly and
/// window-3 smoothed detection stays within one step of it.
pub fn canonical_profile() -> PhenologySeries {
    let start = NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date");
    let dates = (0..CANONICAL_EVI.len() as i64)
        .map(|i| start + Duration::days(CADENCE_DAYS * i))
        .collect();
    PhenologySeries::new(dates, CANONICAL_EVI.to_vec(), CANONICAL_LSWI.to_vec())
        .expect("canonical profile is valid")
}

/// Construction-truth stage boundaries of the canonical profile.
pub fn canonical_truth() -> StageWindows {
    StageWindows {
        flooding: 3,
        heading: 10,
        harvest: 14,
    }
}

/// Maps an (EVI, LSWI) pair to a 7-band reflectance vector whose derived
/// indices reproduce the pair exactly: the blue band is fixed, red tracks a
/// greenness ramp, NIR inverts the EVI formula and SWIR inverts LSWI. The
/// remaining bands are smooth functions of the same quantities.
pub fn band_model(evi: f64, lswi: f64) -> [f64; 7] {
    let blue = 0.05;
    let g = ((evi - 0.10) / 0.58).clamp(0.0, 1.0);
    let red = 0.12 - 0.08 * g;
    let nir = (2.5 * red + evi * (6.0 * red - 7.5 * blue + 1.0)) / (2.5 - evi);
    let swir = nir * (1.0 - lswi) / (1.0 + lswi);
    [
        0.045,
        blue,
        0.5 * (blue + red) + 0.04 * g,
        red,
        nir,
        swir,
        0.8 * swir,
    ]
}

//! Vegetation indices and the 11-dimensional feature vector
//! [b1..b7, EVI, NDVI, ARVI, LSWI], plus train-set standardization.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, Sample};
use crate::nn::Matrix;

pub const FEATURE_WIDTH: usize = 11;

/// Band positions within the 7-band vector (LANDSAT-8 OLI assignment).
pub const BLUE: usize = 1;
pub const RED: usize = 3;
pub const NIR: usize = 4;
pub const SWIR: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EviCoefficients {
    pub g: f64,
    pub c_red: f64,
    pub c_blue: f64,
    pub l: f64,
}

impl Default for EviCoefficients {
    fn default() -> Self {
        EviCoefficients {
            g: 2.5,
            c_red: 6.0,
            c_blue: 7.5,
            l: 1.0,
        }
    }
}

/// Index value plus a flag marking degenerate inputs (zero/near-zero
/// denominators), which yield sentinel values instead of aborting batch runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexValue {
    pub value: f64,
    pub degenerate: bool,
}

fn normalized_difference(a: f64, b: f64) -> IndexValue {
    let den = a + b;
    if den == 0.0 {
        IndexValue {
            value: 0.0,
            degenerate: true,
        }
    } else {
        IndexValue {
            value: (a - b) / den,
            degenerate: false,
        }
    }
}

pub fn ndvi(nir: f64, red: f64) -> IndexValue {
    normalized_difference(nir, red)
}

pub fn lswi(nir: f64, swir: f64) -> IndexValue {
    normalized_difference(nir, swir)
}

/// Standard MODIS enhanced vegetation index
/// G·(NIR − Red) / (NIR + c_red·Red − c_blue·Blue + L).
pub fn evi(nir: f64, red: f64, blue: f64, c: &EviCoefficients) -> IndexValue {
    let den = nir + c.c_red * red - c.c_blue * blue + c.l;
    if den.abs() < 1e-9 {
        let raw = c.g * (nir - red) / den;
        let value = if raw.is_nan() { 0.0 } else { raw.clamp(-10.0, 10.0) };
        IndexValue {
            value,
            degenerate: true,
        }
    } else {
        IndexValue {
            value: c.g * (nir - red) / den,
            degenerate: false,
        }
    }
}

/// Atmospherically resistant vegetation index as published:
/// (NIR − (2·Red − Blue)) / (NIR + (2·Red + Blue)). Note the denominator's
/// +Blue, which differs from the more common ARVI variant; the published
/// form is implemented verbatim.
pub fn arvi(nir: f64, red: f64, blue: f64) -> IndexValue {
    let den = nir + (2.0 * red + blue);
    if den == 0.0 {
        IndexValue {
            value: 0.0,
            degenerate: true,
        }
    } else {
        IndexValue {
            value: (nir - (2.0 * red - blue)) / den,
            degenerate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; FEATURE_WIDTH],
    pub degenerate: bool,
}

/// Copies the 7 bands and appends EVI, NDVI, ARVI, LSWI computed with
/// Blue=b2, Red=b4, NIR=b5, SWIR=b6.
pub fn featurize(s: &Sample) -> FeatureVector {
    let b = &s.bands;
    let e = evi(b[NIR], b[RED], b[BLUE], &EviCoefficients::default());
    let n = ndvi(b[NIR], b[RED]);
    let a = arvi(b[NIR], b[RED], b[BLUE]);
    let l = lswi(b[NIR], b[SWIR]);
    let mut values = [0.0; FEATURE_WIDTH];
    values[..7].copy_from_slice(b);
    values[7] = e.value;
    values[8] = n.value;
    values[9] = a.value;
    values[10] = l.value;
    FeatureVector {
        values,
        degenerate: e.degenerate || n.degenerate || a.degenerate || l.degenerate,
    }
}

/// Per-feature means and population standard deviations fitted on the
/// training set only. Zero SDs are recorded as-is and replaced by 1 at
/// application time (constant-feature guard).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

pub fn fit_standardizer(train: &[FeatureVector]) -> Result<Standardizer> {
    if train.len() < 2 {
        return Err(Error::data(format!(
            "standardizer needs at least 2 vectors, got {}",
            train.len()
        )));
    }
    let n = train.len() as f64;
    let mut means = vec![0.0; FEATURE_WIDTH];
    for v in train {
        for (m, &x) in means.iter_mut().zip(&v.values) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut sds = vec![0.0; FEATURE_WIDTH];
    for v in train {
        for (s, (&x, &m)) in sds.iter_mut().zip(v.values.iter().zip(&means)) {
            let c = x - m;
            *s += c * c;
        }
    }
    for s in &mut sds {
        *s = (*s / n).sqrt();
    }
    Ok(Standardizer { means, sds })
}

pub fn apply_standardizer(z: &Standardizer, v: &FeatureVector) -> FeatureVector {
    let mut values = [0.0; FEATURE_WIDTH];
    for (i, out) in values.iter_mut().enumerate() {
        let sd = if z.sds[i] == 0.0 { 1.0 } else { z.sds[i] };
        *out = (v.values[i] - z.means[i]) / sd;
    }
    FeatureVector {
        values,
        degenerate: v.degenerate,
    }
}

/// Stacks feature vectors into an n×11 batch matrix.
pub fn feature_matrix(vs: &[FeatureVector]) -> Matrix {
    let rows: Vec<Vec<f64>> = vs.iter().map(|v| v.values.to_vec()).collect();
    if rows.is_empty() {
        Matrix::zeros(0, FEATURE_WIDTH)
    } else {
        Matrix::from_rows(&rows)
    }
}

pub const FEATURE_HEADER: &str = "b1,b2,b3,b4,b5,b6,b7,evi,ndvi,arvi,lswi,stage";

/// Exports the dataset's feature matrix as CSV (stage column empty for
/// unlabeled samples).
pub fn write_feature_matrix(path: &Path, d: &Dataset) -> Result<()> {
    let mut out = String::new();
    out.push_str(FEATURE_HEADER);
    out.push('\n');
    for s in &d.samples {
        let v = featurize(s);
        let fields: Vec<String> = v.values.iter().map(|x| x.to_string()).collect();
        let stage = s.stage.map(|st| st.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{}\n", fields.join(","), stage));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(out.as_bytes()).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

//! Fast dropout for one-vs-rest logistic regression: instead of sampling
//! Bernoulli masks, propagate the exact first two moments of the masked
//! pre-activation and take the expected sigmoid under its Gaussian
//! approximation. With keep_prob = 1 every operation collapses to plain
//! logistic regression, which the lr module implements independently.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lr::{bce_loss, sigmoid};
use crate::nn::matrix::Matrix;
use crate::nn::{argmax_stages, sgd_step, TrainConfig};
use crate::stage::{Stage, STAGE_COUNT};

/// Mean and variance of h = sum_i w_i nu_i x_i + b under independent
/// Bernoulli(keep_prob) indicators nu_i.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMoments {
    pub mu: f64,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastDropoutModel {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub keep_prob: f64,
}

impl FastDropoutModel {
    pub fn feature_width(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != STAGE_COUNT || self.bias.len() != STAGE_COUNT {
            return Err(Error::data("fast-dropout model must have 5 classes"));
        }
        let d = self.feature_width();
        if d == 0 || self.weights.iter().any(|w| w.len() != d) {
            return Err(Error::data("fast-dropout model has ragged weight vectors"));
        }
        check_keep_prob(self.keep_prob)
    }
}

fn check_keep_prob(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::usage(format!("keep_prob must be in (0, 1], got {p}")));
    }
    Ok(())
}

/// Exact moments: mu = b + p·Σ w_i x_i, var = p(1−p)·Σ w_i² x_i².
pub fn fd_moments(w: &[f64], b: f64, x: &[f64], keep_prob: f64) -> Result<GaussianMoments> {
    check_keep_prob(keep_prob)?;
    if w.len() != x.len() {
        return Err(Error::data(format!(
            "weight length {} does not match input length {}",
            w.len(),
            x.len()
        )));
    }
    let mut dot = 0.0;
    let mut sq = 0.0;
    for (wi, xi) in w.iter().zip(x) {
        dot += wi * xi;
        sq += wi * wi * xi * xi;
    }
    Ok(GaussianMoments {
        mu: b + keep_prob * dot,
        var: keep_prob * (1.0 - keep_prob) * sq,
    })
}

/// Probit-based closed form E[sigmoid(h)] for h ~ Normal(mu, var):
/// sigmoid(mu / sqrt(1 + pi·var/8)).
pub fn fd_expected_sigmoid(m: GaussianMoments) -> f64 {
    let s = 1.0 / (1.0 + PI * m.var / 8.0).sqrt();
    sigmoid(m.mu * s)
}

/// Expected binary cross-entropy and its analytic gradient, differentiating
/// through both moments.
pub fn fd_loss_and_gradient(
    w: &[f64],
    b: f64,
    x: &[f64],
    y: f64,
    keep_prob: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    let m = fd_moments(w, b, x, keep_prob)?;
    let s = 1.0 / (1.0 + PI * m.var / 8.0).sqrt();
    let q = sigmoid(m.mu * s);
    let loss = bce_loss(q, y);
    // d loss / d (mu·s) = q − y; s depends on var, mu does not.
    let e = q - y;
    let p = keep_prob;
    let dvar_scale = m.mu * (-PI / 16.0) * (s * s * s) * 2.0 * p * (1.0 - p);
    let mut gw = Vec::with_capacity(w.len());
    for (wi, xi) in w.iter().zip(x) {
        gw.push(e * (s * p * xi + dvar_scale * wi * xi * xi));
    }
    Ok((loss, gw, e * s))
}

/// Same minibatch protocol as lr::lr_train (zero init, one shuffle stream,
/// accumulate-then-scale, shared SGD step) so that keep_prob = 1 reproduces
/// it exactly.
pub fn fd_train(
    x: &Matrix,
    labels: &[Stage],
    keep_prob: f64,
    cfg: &TrainConfig,
) -> Result<(FastDropoutModel, Vec<f64>)> {
    cfg.validate()?;
    check_keep_prob(keep_prob)?;
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::data("training data is empty"));
    }
    if x.rows() != labels.len() {
        return Err(Error::data(format!(
            "feature rows ({}) and labels ({}) disagree",
            x.rows(),
            labels.len()
        )));
    }
    let n = x.rows();
    let d = x.cols();
    let mut w = vec![vec![0.0; d]; STAGE_COUNT];
    let mut b = vec![0.0; STAGE_COUNT];
    let mut vw = vec![vec![0.0; d]; STAGE_COUNT];
    let mut vb = [0.0; STAGE_COUNT];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let m = chunk.len() as f64;
            for c in 0..STAGE_COUNT {
                let mut gw = vec![0.0; d];
                let mut gb = 0.0;
                let mut chunk_loss = 0.0;
                for &i in chunk {
                    let y = if labels[i].index() == c { 1.0 } else { 0.0 };
                    let (loss, gwi, gbi) =
                        fd_loss_and_gradient(&w[c], b[c], x.row(i), y, keep_prob)?;
                    chunk_loss += loss;
                    for (g, gi) in gw.iter_mut().zip(&gwi) {
                        *g += gi;
                    }
                    gb += gbi;
                }
                if !chunk_loss.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {batch}, class {c}"
                    )));
                }
                loss_sum += chunk_loss;
                for g in &mut gw {
                    *g /= m;
                }
                gb /= m;
                sgd_step(&mut w[c], &gw, &mut vw[c], cfg.learning_rate, cfg.momentum);
                sgd_step(
                    std::slice::from_mut(&mut b[c]),
                    &[gb],
                    std::slice::from_mut(&mut vb[c]),
                    cfg.learning_rate,
                    cfg.momentum,
                );
            }
        }
        trace.push(loss_sum / n as f64);
    }
    Ok((
        FastDropoutModel {
            weights: w,
            bias: b,
            keep_prob,
        },
        trace,
    ))
}

/// Per-class expected-sigmoid scores at the trained keep_prob.
pub fn fd_scores(model: &FastDropoutModel, x: &Matrix) -> Result<Matrix> {
    model.check()?;
    if x.cols() != model.feature_width() {
        return Err(Error::data(format!(
            "feature width {} does not match model width {}",
            x.cols(),
            model.feature_width()
        )));
    }
    let mut scores = Matrix::zeros(x.rows(), STAGE_COUNT);
    for r in 0..x.rows() {
        for c in 0..STAGE_COUNT {
            let m = fd_moments(&model.weights[c], model.bias[c], x.row(r), model.keep_prob)?;
            scores.set(r, c, fd_expected_sigmoid(m));
        }
    }
    Ok(scores)
}

pub fn fd_predict_batch(model: &FastDropoutModel, x: &Matrix) -> Result<(Vec<Stage>, Matrix)> {
    let scores = fd_scores(model, x)?;
    let stages = argmax_stages(&scores)?;
    Ok((stages, scores))
}

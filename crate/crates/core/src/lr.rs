//! Plain one-vs-rest logistic regression over the 5 stages. Kept fully
//! independent of the fast-dropout trainer so the two can cross-check each
//! other; both follow the same minibatch protocol (zero init, one shuffle
//! stream, accumulate-then-scale gradients, shared SGD step).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::matrix::Matrix;
use crate::nn::{argmax_stages, sgd_step, TrainConfig};
use crate::stage::{Stage, STAGE_COUNT};

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy with log arguments clamped at 1e-12.
pub(crate) fn bce_loss(q: f64, y: f64) -> f64 {
    -(y * q.max(1e-12).ln() + (1.0 - y) * (1.0 - q).max(1e-12).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// One weight vector per stage, one-vs-rest.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LogisticModel {
    pub fn feature_width(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != STAGE_COUNT || self.bias.len() != STAGE_COUNT {
            return Err(Error::data("logistic model must have 5 classes"));
        }
        let d = self.feature_width();
        if d == 0 || self.weights.iter().any(|w| w.len() != d) {
            return Err(Error::data("logistic model has ragged weight vectors"));
        }
        Ok(())
    }
}

fn check_training_inputs(x: &Matrix, labels: &[Stage]) -> Result<()> {
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
    Ok(())
}

/// Trains by shuffled minibatch SGD with momentum on the one-vs-rest
/// log-loss. Returns the model and the per-epoch mean loss (summed over the
/// five binary problems).
pub fn lr_train(x: &Matrix, labels: &[Stage], cfg: &TrainConfig) -> Result<(LogisticModel, Vec<f64>)> {
    cfg.validate()?;
    check_training_inputs(x, labels)?;
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
                    let xi = x.row(i);
                    let y = if labels[i].index() == c { 1.0 } else { 0.0 };
                    let mut dot = 0.0;
                    for (wj, xj) in w[c].iter().zip(xi) {
                        dot += wj * xj;
                    }
                    let z = b[c] + dot;
                    let q = sigmoid(z);
                    chunk_loss += bce_loss(q, y);
                    let e = q - y;
                    for (g, xj) in gw.iter_mut().zip(xi) {
                        *g += e * xj;
                    }
                    gb += e;
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
    Ok((LogisticModel { weights: w, bias: b }, trace))
}

/// Per-class sigmoid scores (not normalized across classes).
pub fn lr_scores(model: &LogisticModel, x: &Matrix) -> Result<Matrix> {
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
        let xi = x.row(r);
        for c in 0..STAGE_COUNT {
            let mut dot = 0.0;
            for (wj, xj) in model.weights[c].iter().zip(xi) {
                dot += wj * xj;
            }
            scores.set(r, c, sigmoid(model.bias[c] + dot));
        }
    }
    Ok(scores)
}

/// Argmax over the one-vs-rest scores, ties to the lowest stage index.
pub fn lr_predict_batch(model: &LogisticModel, x: &Matrix) -> Result<(Vec<Stage>, Matrix)> {
    let scores = lr_scores(model, x)?;
    let stages = argmax_stages(&scores)?;
    Ok((stages, scores))
}

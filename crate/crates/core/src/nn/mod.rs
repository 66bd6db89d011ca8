//! From-scratch feedforward engine: dense and 1-D convolution layers, batch
//! normalization, inverted dropout, softmax cross-entropy, and minibatch SGD
//! with momentum. Everything is seeded and deterministic.

pub mod layer;
pub mod loss;
pub mod matrix;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stage::{Stage, STAGE_COUNT};

pub use layer::{BatchNorm, Cache, Conv1d, Dense, Dropout, Layer, ParamGrads};
pub use loss::{softmax_cross_entropy, softmax_rows};
pub use matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Infer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 128,
            epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::usage("learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage("momentum must be in [0,1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Per-epoch mean minibatch loss and full-train-set accuracy (measured in
/// inference mode).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

/// Ordered layer list with a declared input width. The terminal layer must be
/// the (single) softmax output of width 5.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    in_width: usize,
    layers: Vec<Layer>,
    #[serde(skip)]
    mode: Mode,
}

impl Network {
    pub fn new(in_width: usize, layers: Vec<Layer>) -> Result<Network> {
        let softmax_count = layers.iter().filter(|l| matches!(l, Layer::Softmax)).count();
        if softmax_count != 1 || !matches!(layers.last(), Some(Layer::Softmax)) {
            return Err(Error::data(
                "network must end in exactly one terminal softmax layer",
            ));
        }
        let mut width = in_width;
        for layer in &layers {
            width = layer.out_width(width)?;
        }
        if width != STAGE_COUNT {
            return Err(Error::data(format!(
                "network output width {width}, expected {STAGE_COUNT}"
            )));
        }
        Ok(Network {
            in_width,
            layers,
            mode: Mode::Infer,
        })
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Propagates the mode flag; entering train mode restarts every dropout
    /// layer's mask stream so trajectories are reproducible.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if mode == Mode::Train {
            for layer in &mut self.layers {
                if let Layer::Dropout(d) = layer {
                    d.reset_rng();
                }
            }
        }
    }

    /// Full inference pass, softmax included.
    pub fn forward_infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward_infer(&cur)?;
        }
        Ok(cur)
    }

    /// Training pass up to the logits (the terminal softmax is fused with the
    /// cross-entropy loss). Returns the logits and per-layer caches.
    fn forward_train_logits(&mut self, x: &Matrix) -> Result<(Matrix, Vec<Cache>)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        for layer in &mut self.layers[..last] {
            let (next, cache) = layer.forward_train(&cur)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    /// Class predictions (argmax with ties to the lowest index) and the full
    /// probability matrix.
    pub fn predict(&self, x: &Matrix) -> Result<(Vec<Stage>, Matrix)> {
        let probs = self.forward_infer(x)?;
        let stages = argmax_stages(&probs)?;
        Ok((stages, probs))
    }
}

pub(crate) fn argmax_stages(scores: &Matrix) -> Result<Vec<Stage>> {
    let mut out = Vec::with_capacity(scores.rows());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        out.push(Stage::from_index(best)?);
    }
    Ok(out)
}

///// SGD with momentum: v <- momentum·v - lr·g; p <- p + v.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], learning_rate: f64, momentum: f64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - learning_rate * g;
        *p += *v;
    }
}

/// Shuffled minibatch SGD over `epochs` passes. Minibatches of size 1 are
/// skipped (batch normalization needs n >= 2; the rule is applied uniformly).
/// Returns the network in inference mode plus the per-epoch trace.
pub fn train(net: &mut Network, x: &Matrix, labels: &[Stage], cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::data("training data is empty"));
    }
    if labels.len() != x.rows() {
        return Err(Error::data(format!(
            "{} labels for {} samples",
            labels.len(),
            x.rows()
        )));
    }
    if x.cols() != net.in_width() {
        return Err(Error::data(format!(
            "network expects width {}, data has {}",
            net.in_width(),
            x.cols()
        )));
    }

    let label_idx: Vec<usize> = labels.iter().map(|s| s.index()).collect();
    let mut trace = TrainTrace::default();
    if cfg.epochs == 0 {
        net.set_mode(Mode::Infer);
        return Ok(trace);
    }

    net.set_mode(Mode::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<Vec<f64>>> = net.layers.iter().map(Layer::init_velocity).collect();
    let mut order: Vec<usize> = (0..x.rows()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let bx = x.gather_rows(chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| label_idx[i]).collect();

            let (logits, caches) = net.forward_train_logits(&bx)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &by)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged (non-finite loss) at epoch {epoch}, batch {batch_no}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();

            let mut grad = dlogits;
            let last = net.layers.len() - 1;
            for (idx, layer) in net.layers[..last].iter_mut().enumerate().rev() {
                let (dx, pgrads) = layer.backward(&caches[idx], &grad);
                layer.apply_update(&pgrads, &mut velocity[idx], cfg.learning_rate, cfg.momentum);
                grad = dx;
            }
        }
        if seen == 0 {
            return Err(Error::data(
                "no trainable minibatch (all batches smaller than 2 samples)",
            ));
        }
        trace.epoch_loss.push(loss_sum / seen as f64);

        net.set_mode(Mode::Infer);
        let (pred, _) = net.predict(x)?;
        let correct = pred.iter().zip(labels).filter(|(p, a)| p == a).count();
        trace.epoch_accuracy.push(correct as f64 / labels.len() as f64);
        net.mode = Mode::Train; // resume without restarting dropout streams
    }

    net.set_mode(Mode::Infer);
    Ok(trace)
}

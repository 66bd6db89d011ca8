use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::matrix::Matrix;

/// Forward-pass state kept for the backward pass.
#[derive(Debug)]
pub enum Cache {
    Dense {
        x: Matrix,
    },
    Conv1d {
        x: Matrix,
    },
    BatchNorm {
        xhat: Matrix,
        centered: Matrix,
        inv_std: Vec<f64>,
    },
    /// 1.0 where the pre-activation was > 0.
    Relu {
        mask: Matrix,
    },
    Sigmoid {
        y: Matrix,
    },
    /// Entries are 0 or 1/(1-rate), ready to multiply into gradients.
    Dropout {
        mask: Matrix,
    },
    None,
}

/// Parameter gradients, one variant per parameterized layer kind.
#[derive(Debug)]
pub enum ParamGrads {
    Dense { dw: Matrix, db: Option<Vec<f64>> },
    Conv1d { dk: Vec<f64>, db: Option<Vec<f64>> },
    BatchNorm { dgamma: Vec<f64>, dbeta: Vec<f64> },
    None,
}

/// Fully connected layer computing x·Wᵀ + b. The bias is `None` (frozen at
/// zero) when the layer feeds a batch-norm layer, which subsumes it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub w: Matrix,
    pub b: Option<Vec<f64>>,
}

impl Dense {
    pub fn new(w: Matrix, b: Option<Vec<f64>>) -> Result<Dense> {
        if let Some(b) = &b {
            if b.len() != w.rows() {
                return Err(Error::data("dense bias length does not match output size"));
            }
        }
        Ok(Dense { w, b })
    }

    pub fn in_size(&self) -> usize {
        self.w.cols()
    }

    pub fn out_size(&self) -> usize {
        self.w.rows()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_size() {
            return Err(Error::data(format!(
                "dense layer expects {} inputs, got {}",
                self.in_size(),
                x.cols()
            )));
        }
        let mut y = Matrix::matmul_nt(x, &self.w);
        if let Some(b) = &self.b {
            y.add_row(b);
        }
        Ok(y)
    }

    fn backward(&self, cache: &Cache, grad: &Matrix) -> (Matrix, ParamGrads) {
        let Cache::Dense { x } = cache else {
            panic!("dense backward got a mismatched cache");
        };
        let dw = Matrix::matmul_tn(grad, x);
        let db = self.b.as_ref().map(|_| grad.col_sums());
        let dx = Matrix::matmul(grad, &self.w);
        (dx, ParamGrads::Dense { dw, db })
    }
}

/// Batch normalization: per-feature standardization by minibatch statistics
/// (biased variance), then learnable scale γ and shift β. Inference uses the
/// running statistics accumulated during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub initialized: bool,
}

impl BatchNorm {
    pub fn new(features: usize) -> BatchNorm {
        BatchNorm {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            eps: 1e-5,
            momentum: 0.9,
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            initialized: false,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    fn check_width(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.features() {
            return Err(Error::data(format!(
                "batch-norm layer expects {} features, got {}",
                self.features(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, Cache)> {
        self.check_width(x)?;
        let n = x.rows();
        if n < 2 {
            return Err(Error::data("batch-norm training requires batch size >= 2"));
        }
        let d = self.features();
        let nf = n as f64;

        let mut mean = x.col_sums();
        for m in &mut mean {
            *m /= nf;
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (j, &v) in x.row(r).iter().enumerate() {
                let c = v - mean[j];
                var[j] += c * c;
            }
        }
        for v in &mut var {
            *v /= nf;
        }

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut centered = Matrix::zeros(n, d);
        let mut xhat = Matrix::zeros(n, d);
        let mut y = Matrix::zeros(n, d);
        for r in 0..n {
            for j in 0..d {
                let c = x.get(r, j) - mean[j];
                let xh = c * inv_std[j];
                centered.set(r, j, c);
                xhat.set(r, j, xh);
                y.set(r, j, self.gamma[j] * xh + self.beta[j]);
            }
        }

        for j in 0..d {
            self.running_mean[j] = self.momentum * self.running_mean[j] + (1.0 - self.momentum) * mean[j];
            self.running_var[j] = self.momentum * self.running_var[j] + (1.0 - self.momentum) * var[j];
        }
        self.initialized = true;

        Ok((
            y,
            Cache::BatchNorm {
                xhat,
                centered,
                inv_std,
            },
        ))
    }

    pub fn forward_infer(&self, x: &Matrix) -> Result<Matrix> {
        self.check_width(x)?;
        if !self.initialized {
            return Err(Error::data(
                "batch-norm layer has no running statistics (never trained)",
            ));
        }
        let mut y = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            for j in 0..x.cols() {
                let xh = (x.get(r, j) - self.running_mean[j]) / (self.running_var[j] + self.eps).sqrt();
                y.set(r, j, self.gamma[j] * xh + self.beta[j]);
            }
        }
        Ok(y)
    }

    /// Exact gradient through the batch mean and variance.
    fn backward(&self, cache: &Cache, grad: &Matrix) -> (Matrix, ParamGrads) {
        let Cache::BatchNorm {
            xhat,
            centered,
            inv_std,
        } = cache
        else {
            panic!("batch-norm backward got a mismatched cache");
        };
        let n = grad.rows();
        let d = grad.cols();
        let nf = n as f64;

        let dbeta = grad.col_sums();
        let dgamma = Matrix::hadamard(grad, xhat).col_sums();

        // dxhat[i] = g[i]·γ
        // dvar    = Σ dxhat[i]·(x[i]-μ)·(-1/2)·inv_std³
        // dmean   = -inv_std·Σ dxhat[i] + dvar·(-2/n)·Σ (x[i]-μ)
        // dx[i]   = dxhat[i]·inv_std + dvar·2(x[i]-μ)/n + dmean/n
        let mut dx = Matrix::zeros(n, d);
        for (j, (&g, &inv)) in self.gamma.iter().zip(inv_std).enumerate().take(d) {
            let mut dvar = 0.0;
            let mut dxhat_sum = 0.0;
            let mut centered_sum = 0.0;
            for i in 0..n {
                let dxh = grad.get(i, j) * g;
                dvar += dxh * centered.get(i, j);
                dxhat_sum += dxh;
                centered_sum += centered.get(i, j);
            }
            dvar *= -0.5 * inv * inv * inv;
            let dmean = -inv * dxhat_sum + dvar * (-2.0 / nf) * centered_sum;
            for i in 0..n {
                let dxh = grad.get(i, j) * g;
                let v = dxh * inv + dvar * 2.0 * centered.get(i, j) / nf + dmean / nf;
                dx.set(i, j, v);
            }
        }
        (dx, ParamGrads::BatchNorm { dgamma, dbeta })
    }
}

/// Inverted dropout: units are kept with probability 1-rate and survivors are
/// scaled by 1/(1-rate), so inference is the identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dropout {
    pub rate: f64,
    pub rng_seed: u64,
    #[serde(skip)]
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(rate: f64, rng_seed: u64) -> Result<Dropout> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::data(format!("dropout rate {rate} outside [0,1)")));
        }
        Ok(Dropout {
            rate,
            rng_seed,
            rng: None,
        })
    }

    /// Restarts the mask stream; called when training begins.
    pub fn reset_rng(&mut self) {
        self.rng = Some(ChaCha8Rng::seed_from_u64(self.rng_seed));
    }

    fn forward_train(&mut self, x: &Matrix) -> (Matrix, Cache) {
        if self.rate == 0.0 {
            // No units dropped and no RNG consumed, so a rate-0 layer is
            // bit-identical to the layer being absent.
            let mask = x.map(|_| 1.0);
            return (x.clone(), Cache::Dropout { mask });
        }
        if self.rng.is_none() {
            self.reset_rng();
        }
        let rng = self.rng.as_mut().expect("dropout rng initialized above");
        let scale = 1.0 / (1.0 - self.rate);
        let mut mask = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let keep = rng.random::<f64>() >= self.rate;
                mask.set(r, c, if keep { scale } else { 0.0 });
            }
        }
        let y = Matrix::hadamard(x, &mask);
        (y, Cache::Dropout { mask })
    }
}

/// Valid (no padding) 1-D cross-correlation. Signals are flattened
/// channel-major into matrix rows: [ch0 t0..tL-1, ch1 t0..tL-1, ...].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv1d {
    pub filters: usize,
    pub in_channels: usize,
    pub width: usize,
    pub stride: usize,
    /// Flattened [filter][in_channel][tap].
    pub kernels: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Conv1d {
    pub fn new(
        filters: usize,
        in_channels: usize,
        width: usize,
        stride: usize,
        kernels: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Conv1d> {
        if stride < 1 {
            return Err(Error::data("conv1d stride must be >= 1"));
        }
        if kernels.len() != filters * in_channels * width {
            return Err(Error::data("conv1d kernel length mismatch"));
        }
        if let Some(b) = &bias {
            if b.len() != filters {
                return Err(Error::data("conv1d bias length must equal filter count"));
            }
        }
        Ok(Conv1d {
            filters,
            in_channels,
            width,
            stride,
            kernels,
            bias,
        })
    }

    fn in_length(&self, cols: usize) -> Result<usize> {
        if self.in_channels == 0 || !cols.is_multiple_of(self.in_channels) {
            return Err(Error::data(format!(
                "conv1d input width {cols} is not a multiple of {} channels",
                self.in_channels
            )));
        }
        let len = cols / self.in_channels;
        if len < self.width {
            return Err(Error::data(format!(
                "conv1d input length {len} shorter than kernel width {}",
                self.width
            )));
        }
        Ok(len)
    }

    pub fn out_positions(&self, in_length: usize) -> usize {
        (in_length - self.width) / self.stride + 1
    }

    fn kernel(&self, f: usize, c: usize) -> &[f64] {
        let base = (f * self.in_channels + c) * self.width;
        &self.kernels[base..base + self.width]
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let len = self.in_length(x.cols())?;
        let m = self.out_positions(len);
        let mut y = Matrix::zeros(x.rows(), self.filters * m);
        for r in 0..x.rows() {
            let row = x.row(r);
            for f in 0..self.filters {
                let b = self.bias.as_ref().map_or(0.0, |b| b[f]);
                for j in 0..m {
                    let start = j * self.stride;
                    let mut acc = b;
                    for c in 0..self.in_channels {
                        let sig = &row[c * len..(c + 1) * len];
                        let ker = self.kernel(f, c);
                        for (k, &kv) in ker.iter().enumerate() {
                            acc += kv * sig[start + k];
                        }
                    }
                    y.set(r, f * m + j, acc);
                }
            }
        }
        Ok(y)
    }

    fn backward(&self, cache: &Cache, grad: &Matrix) -> (Matrix, ParamGrads) {
        let Cache::Conv1d { x } = cache else {
            panic!("conv1d backward got a mismatched cache");
        };
        let len = x.cols() / self.in_channels;
        let m = self.out_positions(len);
        let mut dk = vec![0.0; self.kernels.len()];
        let mut db = self.bias.as_ref().map(|_| vec![0.0; self.filters]);
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let xrow = x.row(r);
            for f in 0..self.filters {
                for j in 0..m {
                    let g = grad.get(r, f * m + j);
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(db) = &mut db {
                        db[f] += g;
                    }
                    let start = j * self.stride;
                    for c in 0..self.in_channels {
                        let sig = &xrow[c * len..(c + 1) * len];
                        let kbase = (f * self.in_channels + c) * self.width;
                        for k in 0..self.width {
                            dk[kbase + k] += g * sig[start + k];
                            let t = c * len + start + k;
                            dx.set(r, t, dx.get(r, t) + g * self.kernels[kbase + k]);
                        }
                    }
                }
            }
        }
        (dx, ParamGrads::Conv1d { dk, db })
    }
}

/// One network layer. The layer list is heterogeneous and serialized in
/// composition order; `Softmax` is the terminal output marker (training fuses
/// it with the cross-entropy loss, prediction applies it explicitly).
/// Variant sizes differ by a few vector headers only, so boxing the large
/// ones would not pay for the indirection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Dense(Dense),
    Conv1d(Conv1d),
    BatchNorm(BatchNorm),
    Relu,
    Sigmoid,
    Dropout(Dropout),
    Softmax,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Layer {
    /// Output width for a given input width; errors on incompatibility.
    pub fn out_width(&self, in_width: usize) -> Result<usize> {
        match self {
            Layer::Dense(d) => {
                if in_width != d.in_size() {
                    return Err(Error::data(format!(
                        "dense layer expects width {}, got {in_width}",
                        d.in_size()
                    )));
                }
                Ok(d.out_size())
            }
            Layer::Conv1d(c) => {
                let len = c.in_length(in_width)?;
                Ok(c.filters * c.out_positions(len))
            }
            Layer::BatchNorm(bn) => {
                if in_width != bn.features() {
                    return Err(Error::data(format!(
                        "batch-norm layer expects width {}, got {in_width}",
                        bn.features()
                    )));
                }
                Ok(in_width)
            }
            Layer::Relu | Layer::Sigmoid | Layer::Dropout(_) | Layer::Softmax => Ok(in_width),
        }
    }

    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, Cache)> {
        match self {
            Layer::Dense(d) => {
                let y = d.forward(x)?;
                Ok((y, Cache::Dense { x: x.clone() }))
            }
            Layer::Conv1d(c) => {
                let y = c.forward(x)?;
                Ok((y, Cache::Conv1d { x: x.clone() }))
            }
            Layer::BatchNorm(bn) => bn.forward_train(x),
            Layer::Relu => {
                let y = x.map(|v| v.max(0.0));
                let mask = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                Ok((y, Cache::Relu { mask }))
            }
            Layer::Sigmoid => {
                let y = x.map(sigmoid);
                Ok((y.clone(), Cache::Sigmoid { y }))
            }
            Layer::Dropout(d) => Ok(d.forward_train(x)),
            Layer::Softmax => Ok((crate::nn::loss::softmax_rows(x), Cache::None)),
        }
    }

    pub fn forward_infer(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Dense(d) => d.forward(x),
            Layer::Conv1d(c) => c.forward(x),
            Layer::BatchNorm(bn) => bn.forward_infer(x),
            Layer::Relu => Ok(x.map(|v| v.max(0.0))),
            Layer::Sigmoid => Ok(x.map(sigmoid)),
            Layer::Dropout(_) => Ok(x.clone()),
            Layer::Softmax => Ok(crate::nn::loss::softmax_rows(x)),
        }
    }

    pub fn backward(&self, cache: &Cache, grad: &Matrix) -> (Matrix, ParamGrads) {
        match self {
            Layer::Dense(d) => d.backward(cache, grad),
            Layer::Conv1d(c) => c.backward(cache, grad),
            Layer::BatchNorm(bn) => bn.backward(cache, grad),
            Layer::Relu => {
                let Cache::Relu { mask } = cache else {
                    panic!("relu backward got a mismatched cache");
                };
                (Matrix::hadamard(grad, mask), ParamGrads::None)
            }
            Layer::Sigmoid => {
                let Cache::Sigmoid { y } = cache else {
                    panic!("sigmoid backward got a mismatched cache");
                };
                let dx = Matrix::hadamard(grad, &y.map(|v| v * (1.0 - v)));
                (dx, ParamGrads::None)
            }
            Layer::Dropout(_) => {
                let Cache::Dropout { mask } = cache else {
                    panic!("dropout backward got a mismatched cache");
                };
                (Matrix::hadamard(grad, mask), ParamGrads::None)
            }
            Layer::Softmax => unreachable!("softmax is fused with the loss during training"),
        }
    }

    /// Velocity buffers matching this layer's trainable tensors.
    pub fn init_velocity(&self) -> Vec<Vec<f64>> {
        match self {
            Layer::Dense(d) => {
                let mut v = vec![vec![0.0; d.w.data().len()]];
                if let Some(b) = &d.b {
                    v.push(vec![0.0; b.len()]);
                }
                v
            }
            Layer::Conv1d(c) => {
                let mut v = vec![vec![0.0; c.kernels.len()]];
                if let Some(b) = &c.bias {
                    v.push(vec![0.0; b.len()]);
                }
                v
            }
            Layer::BatchNorm(bn) => vec![vec![0.0; bn.features()], vec![0.0; bn.features()]],
            _ => Vec::new(),
        }
    }

    pub fn apply_update(
        &mut self,
        grads: &ParamGrads,
        velocity: &mut [Vec<f64>],
        learning_rate: f64,
        momentum: f64,
    ) {
        match (self, grads) {
            (Layer::Dense(d), ParamGrads::Dense { dw, db }) => {
                super::sgd_step(d.w.data_mut(), dw.data(), &mut velocity[0], learning_rate, momentum);
                if let (Some(b), Some(db)) = (&mut d.b, db) {
                    super::sgd_step(b, db, &mut velocity[1], learning_rate, momentum);
                }
            }
            (Layer::Conv1d(c), ParamGrads::Conv1d { dk, db }) => {
                super::sgd_step(&mut c.kernels, dk, &mut velocity[0], learning_rate, momentum);
                if let (Some(b), Some(db)) = (&mut c.bias, db) {
                    super::sgd_step(b, db, &mut velocity[1], learning_rate, momentum);
                }
            }
            (Layer::BatchNorm(bn), ParamGrads::BatchNorm { dgamma, dbeta }) => {
                super::sgd_step(&mut bn.gamma, dgamma, &mut velocity[0], learning_rate, momentum);
                super::sgd_step(&mut bn.beta, dbeta, &mut velocity[1], learning_rate, momentum);
            }
            (_, ParamGrads::None) => {}
            _ => panic!("gradient/layer kind mismatch"),
        }
    }
}

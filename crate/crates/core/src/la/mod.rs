//! Dense matrices, a matrix-level reverse-mode tape, small MLPs and Adam.

mod matrix;
mod tape;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use thiserror::Error;

pub use matrix::Matrix;
pub use tape::{gaussian_row_nll, log_sum_exp, squash_log_std, Gradients, Tape, Var, LOG_STD_MAX, LOG_STD_MIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LaError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique parameter identity. Clones of a parameter share it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable matrix and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    id: ParamId,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            id: ParamId::fresh(),
            value,
            grad,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Little-endian bytes of the value, for bitwise comparisons.
    pub fn value_bytes(&self) -> Vec<u8> {
        self.value.data().iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Parameter>) {
    for p in params {
        p.zero_grad();
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Parameter], max_norm: f64) -> f64 {
    let norm = params.iter().map(|p| p.grad.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

/// Plain gradient descent: `value -= lr · grad`.
pub fn sgd_step(params: &mut [&mut Parameter], lr: f64) {
    for p in params.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    }
}

/// Glorot-uniform matrix: entries in ±√(6/(fan_in+fan_out)).
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Affine layer `x·W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Dense {
    pub fn new(fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: Parameter::new(glorot(fan_in, fan_out, rng)),
            bias: bias.then(|| Parameter::new(Matrix::zeros(1, fan_out))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, LaError> {
        let w = tape.param(&self.weight);
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let bv = tape.param(b);
                tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Multilayer perceptron: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`.
    pub fn new(sizes: &[usize], bias: bool, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes.windows(2).map(|w| Dense::new(w[0], w[1], bias, rng)).collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, LaError> {
        if layers.is_empty() {
            return Err(LaError::Contract("an MLP needs at least one layer".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(LaError::Dimension(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, LaError> {
        let cols = tape.value(x).cols();
        if cols != self.in_dim() {
            return Err(LaError::Dimension(format!(
                "MLP expects {} inputs, got {cols}",
                self.in_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Tape-free batch forward.
    pub fn forward_matrix(&self, x: &Matrix) -> Result<Matrix, LaError> {
        let mut tape = Tape::with_trainable([]);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(Dense::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(Dense::params_mut).collect()
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
    t: u64,
}

/// Adam with per-parameter moments and bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: HashMap<ParamId, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    /// Number of `step` calls so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every listed parameter from its current `grad`.
    /// Gradients are left untouched.
    pub fn step(&mut self, params: &mut [&mut Parameter]) {
        self.steps += 1;
        for p in params.iter_mut() {
            let (rows, cols) = p.value.shape();
            let st = self.moments.entry(p.id()).or_insert_with(|| Moments {
                m: Matrix::zeros(rows, cols),
                v: Matrix::zeros(rows, cols),
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

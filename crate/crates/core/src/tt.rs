//! Discrete Tensor Trains and fitting of tabular (partner, state) → action
//! distributions.
//!
//! A train of `n` cores with shapes `r_{i-1} × I_i × r_i` evaluates an index
//! tuple `(x_1..x_n)` as the product of the selected `r_{i-1} × r_i` slices.
//! With `r_0 = 1` the result is a vector of length `r_n`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::la::{glorot, Adam, LaError, Matrix, Parameter, Tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TtError {
    #[error("index {index} out of range for dimension {dim} (mode {mode})")]
    Bounds { dim: usize, index: usize, mode: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    La(#[from] LaError),
}

/// A 3-way core of shape `r_prev × mode × r_next`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TtCore {
    r_prev: usize,
    mode: usize,
    r_next: usize,
    data: Vec<f64>,
}

impl TtCore {
    pub fn new(r_prev: usize, mode: usize, r_next: usize, data: Vec<f64>) -> Result<Self, TtError> {
        if r_prev == 0 || mode == 0 || r_next == 0 {
            return Err(TtError::Shape(format!(
                "core dims must be positive, got {r_prev}x{mode}x{r_next}"
            )));
        }
        if data.len() != r_prev * mode * r_next {
            return Err(TtError::Shape(format!(
                "core {r_prev}x{mode}x{r_next} needs {} entries, got {}",
                r_prev * mode * r_next,
                data.len()
            )));
        }
        Ok(Self {
            r_prev,
            mode,
            r_next,
            data,
        })
    }

    pub fn zeros(r_prev: usize, mode: usize, r_next: usize) -> Result<Self, TtError> {
        Self::new(r_prev, mode, r_next, vec![0.0; r_prev * mode * r_next])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.r_prev, self.mode, self.r_next)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, a: usize, x: usize, b: usize) -> f64 {
        self.data[(a * self.mode + x) * self.r_next + b]
    }

    #[inline]
    pub fn set(&mut self, a: usize, x: usize, b: usize, v: f64) {
        self.data[(a * self.mode + x) * self.r_next + b] = v;
    }

    /// The `r_prev × r_next` matrix selected by index `x`.
    pub fn slice(&self, x: usize) -> Matrix {
        let mut m = Matrix::zeros(self.r_prev, self.r_next);
        for a in 0..self.r_prev {
            for b in 0..self.r_next {
                m.set(a, b, self.get(a, x, b));
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorTrain {
    cores: Vec<TtCore>,
}

impl TensorTrain {
    pub fn new(cores: Vec<TtCore>) -> Result<Self, TtError> {
        let first = cores
            .first()
            .ok_or_else(|| TtError::Shape("a tensor train needs at least one core".into()))?;
        if first.r_prev != 1 {
            return Err(TtError::Shape(format!("leading rank must be 1, got {}", first.r_prev)));
        }
        for (i, w) in cores.windows(2).enumerate() {
            if w[0].r_next != w[1].r_prev {
                return Err(TtError::Shape(format!(
                    "core {i} ends with rank {} but core {} starts with rank {}",
                    w[0].r_next,
                    i + 1,
                    w[1].r_prev
                )));
            }
        }
        Ok(Self { cores })
    }

    /// Uniform(-1, 1) cores with the given modes and ranks `[1, r_1, .., r_n]`.
    pub fn random(modes: &[usize], ranks: &[usize], rng: &mut impl rand::Rng) -> Result<Self, TtError> {
        if ranks.len() != modes.len() + 1 {
            return Err(TtError::Shape(format!(
                "{} modes need {} ranks, got {}",
                modes.len(),
                modes.len() + 1,
                ranks.len()
            )));
        }
        let cores = modes
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let n = ranks[i] * m * ranks[i + 1];
                TtCore::new(
                    ranks[i],
                    m,
                    ranks[i + 1],
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(cores)
    }

    pub fn cores(&self) -> &[TtCore] {
        &self.cores
    }

    pub fn modes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.mode).collect()
    }

    /// `[r_0, .., r_n]`.
    pub fn ranks(&self) -> Vec<usize> {
        std::iter::once(1).chain(self.cores.iter().map(|c| c.r_next)).collect()
    }

    /// Output length `k = r_n`.
    pub fn output_dim(&self) -> usize {
        self.cores[self.cores.len() - 1].r_next
    }

    /// `A_1[:,x_1,:] × … × A_n[:,x_n,:]`, flattened.
    pub fn eval(&self, indices: &[usize]) -> Result<Vec<f64>, TtError> {
        if indices.len() != self.cores.len() {
            return Err(TtError::Shape(format!(
                "{} indices for a train of {} cores",
                indices.len(),
                self.cores.len()
            )));
        }
        let mut acc = vec![1.0];
        for (dim, (core, &x)) in self.cores.iter().zip(indices).enumerate() {
            if x >= core.mode {
                return Err(TtError::Bounds {
                    dim,
                    index: x,
                    mode: core.mode,
                });
            }
            let mut next = vec![0.0; core.r_next];
            for (a, &av) in acc.iter().enumerate() {
                let base = (a * core.mode + x) * core.r_next;
                for (n, &c) in next.iter_mut().zip(&core.data[base..base + core.r_next]) {
                    *n += av * c;
                }
            }
            acc = next;
        }
        Ok(acc)
    }

    /// Widens the inner rank of a two-core train with zeros. The represented
    /// function is unchanged.
    pub fn pad_rank(&self, rank: usize) -> Result<Self, TtError> {
        let [first, second] = self.cores.as_slice() else {
            return Err(TtError::Shape("rank padding supports two-core trains".into()));
        };
        let r = first.r_next;
        if rank < r {
            return Err(TtError::Shape(format!("cannot pad rank {r} down to {rank}")));
        }
        let mut p = TtCore::zeros(1, first.mode, rank)?;
        for x in 0..first.mode {
            for b in 0..r {
                p.set(0, x, b, first.get(0, x, b));
            }
        }
        let mut s = TtCore::zeros(rank, second.mode, second.r_next)?;
        for a in 0..r {
            for x in 0..second.mode {
                for b in 0..second.r_next {
                    s.set(a, x, b, second.get(a, x, b));
                }
            }
        }
        Self::new(vec![p, s])
    }
}

/// Per-(state, partner) action distributions, dims `[n_states, n_actions, n_partners]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTensor {
    n_states: usize,
    n_actions: usize,
    n_partners: usize,
    // [partner][state][action]
    probs: Vec<f64>,
}

impl PolicyTensor {
    /// Builds from a `(partner, state) -> distribution` callback.
    pub fn from_fn(
        n_states: usize,
        n_actions: usize,
        n_partners: usize,
        mut dist: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self, TtError> {
        let mut probs = Vec::with_capacity(n_states * n_actions * n_partners);
        for y in 0..n_partners {
            for s in 0..n_states {
                let d = dist(y, s);
                if d.len() != n_actions {
                    return Err(TtError::Shape(format!(
                        "distribution for partner {y} state {s} has {} entries, expected {n_actions}",
                        d.len()
                    )));
                }
                probs.extend(d);
            }
        }
        Self::from_vec(n_states, n_actions, n_partners, probs)
    }

    /// `probs` laid out `[partner][state][action]`.
    pub fn from_vec(n_states: usize, n_actions: usize, n_partners: usize, probs: Vec<f64>) -> Result<Self, TtError> {
        if n_states == 0 || n_actions == 0 || n_partners == 0 {
            return Err(TtError::Shape("policy tensor dims must be positive".into()));
        }
        if probs.len() != n_states * n_actions * n_partners {
            return Err(TtError::Shape(format!(
                "policy tensor [{n_states},{n_actions},{n_partners}] needs {} entries, got {}",
                n_states * n_actions * n_partners,
                probs.len()
            )));
        }
        let t = Self {
            n_states,
            n_actions,
            n_partners,
            probs,
        };
        t.validate()?;
        Ok(t)
    }

    /// Softmax of a two-core train `(partner, state) → logits`, scaled.
    pub fn from_tt_softmax(tt: &TensorTrain, scale: f64) -> Result<Self, TtError> {
        let modes = tt.modes();
        if modes.len() != 2 {
            return Err(TtError::Shape("expected a (partner, state) train".into()));
        }
        Self::from_fn(modes[1], tt.output_dim(), modes[0], |y, s| {
            let z: Vec<f64> = tt.eval(&[y, s]).expect("in range").iter().map(|v| v * scale).collect();
            softmax(&z)
        })
    }

    fn validate(&self) -> Result<(), TtError> {
        for (cell, d) in self.probs.chunks(self.n_actions).enumerate() {
            let total: f64 = d.iter().sum();
            if d.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(TtError::Validation(format!(
                    "cell (partner {}, state {}) is not a distribution (sum {total})",
                    cell / self.n_states,
                    cell % self.n_states
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.n_states, self.n_actions, self.n_partners]
    }

    pub fn get(&self, state: usize, action: usize, partner: usize) -> f64 {
        self.probs[(partner * self.n_states + state) * self.n_actions + action]
    }

    pub fn dist(&self, state: usize, partner: usize) -> &[f64] {
        let base = (partner * self.n_states + state) * self.n_actions;
        &self.probs[base..base + self.n_actions]
    }

    /// Mean entropy over (state, partner) cells: the lowest achievable
    /// cross-entropy.
    pub fn entropy_floor(&self) -> f64 {
        let total: f64 = self
            .probs
            .chunks(self.n_actions)
            .map(|d| -d.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum();
        total / (self.n_states * self.n_partners) as f64
    }

    fn target_matrix(&self) -> Matrix {
        Matrix::from_vec(self.n_partners * self.n_states, self.n_actions, self.probs.clone()).expect("sized buffer")
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = crate::la::log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Full-batch Adam schedule for [`tt_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub seed: u64,
    pub iters: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iters: 3000,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TtFit {
    pub tt: TensorTrain,
    /// Loss at the returned parameters.
    pub final_log_loss: f64,
    /// Lowest loss seen at any iterate, including the initial one.
    pub best_log_loss: f64,
}

/// Fits a (partner, state) two-core train of inner rank `rank` to `target`
/// by minimizing mean cross-entropy of `softmax(tt_eval)`.
pub fn tt_fit(target: &PolicyTensor, rank: usize, cfg: FitConfig) -> Result<TtFit, TtError> {
    if rank == 0 {
        return Err(TtError::Validation("rank must be at least 1".into()));
    }
    let [n_states, n_actions, n_partners] = target.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = glorot(n_partners, rank, &mut rng);
    let s = glorot(rank, n_states * n_actions, &mut rng);
    let init = TensorTrain::new(vec![
        TtCore::new(1, n_partners, rank, p.into_data())?,
        TtCore::new(rank, n_states, n_actions, s.into_data())?,
    ])?;
    tt_fit_from(target, init, cfg)
}

/// As [`tt_fit`], starting from a given train.
pub fn tt_fit_from(target: &PolicyTensor, init: TensorTrain, cfg: FitConfig) -> Result<TtFit, TtError> {
    let [n_states, n_actions, n_partners] = target.dims();
    let [pc, sc] = init.cores() else {
        return Err(TtError::Shape("fitting expects a two-core train".into()));
    };
    if pc.shape() != (1, n_partners, pc.r_next) || sc.shape() != (pc.r_next, n_states, n_actions) {
        return Err(TtError::Shape(format!(
            "train cores {:?}/{:?} do not match target dims [{n_states},{n_actions},{n_partners}]",
            pc.shape(),
            sc.shape()
        )));
    }
    let rank = pc.r_next;
    let mut partner = Parameter::new(Matrix::from_vec(n_partners, rank, pc.data.clone())?);
    let mut state = Parameter::new(Matrix::from_vec(rank, n_states * n_actions, sc.data.clone())?);
    let targets = target.target_matrix();
    let mut adam = Adam::new(cfg.lr);
    let mut best = f64::INFINITY;

    let loss_of = |partner: &Parameter, state: &Parameter| -> Result<(Tape, crate::la::Var), TtError> {
        let mut tape = Tape::new();
        let pv = tape.param(partner);
        let sv = tape.param(state);
        let z = tape.matmul(pv, sv)?;
        let z = tape.reshape(z, n_partners * n_states, n_actions)?;
        let loss = tape.cross_entropy(z, targets.clone())?;
        Ok((tape, loss))
    };

    for _ in 0..cfg.iters {
        let (tape, loss) = loss_of(&partner, &state)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(TtError::Validation("fit diverged to a non-finite loss".into()));
        }
        best = best.min(value);
        let grads = tape.backward(loss)?;
        partner.zero_grad();
        state.zero_grad();
        grads.accumulate([&mut partner, &mut state]);
        adam.step(&mut [&mut partner, &mut state]);
    }
    let (tape, loss) = loss_of(&partner, &state)?;
    let final_log_loss = tape.scalar(loss);
    best = best.min(final_log_loss);

    let tt = TensorTrain::new(vec![
        TtCore::new(1, n_partners, rank, partner.value.into_data())?,
        TtCore::new(rank, n_states, n_actions, state.value.into_data())?,
    ])?;
    Ok(TtFit {
        tt,
        final_log_loss,
        best_log_loss: best,
    })
}

/// One [`tt_fit`] per rank, each from a fresh init under `cfg.seed`, in
/// input order.
pub fn rank_sweep(target: &PolicyTensor, ranks: &[usize], cfg: FitConfig) -> Result<Vec<(usize, f64)>, TtError> {
    if ranks.is_empty() {
        return Err(TtError::Validation("rank list is empty".into()));
    }
    ranks
        .iter()
        .map(|&r| tt_fit(target, r, cfg).map(|f| (r, f.final_log_loss)))
        .collect()
}

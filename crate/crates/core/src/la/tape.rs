//! Matrix-valued reverse-mode autodiff.
//!
//! Every forward op appends a node to a [`Tape`]. `backward` walks the tape
//! in reverse and returns gradients keyed by [`ParamId`]. Nodes that do not
//! depend on any trainable parameter are skipped on the way back, so frozen
//! sub-networks cost only their forward pass.

use std::collections::{HashMap, HashSet};

use super::matrix::{matmul_nt_into, matmul_tn_into};
use super::{LaError, Matrix, ParamId, Parameter};

/// Bounds of Gaussian log standard deviations.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LOG_STD_MID: f64 = 0.5 * (LOG_STD_MIN + LOG_STD_MAX);
const LOG_STD_HALF: f64 = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);

/// Maps a raw network output into `(LOG_STD_MIN, LOG_STD_MAX)` with a
/// scaled tanh, keeping a nonzero gradient everywhere.
pub fn squash_log_std(raw: f64) -> f64 {
    LOG_STD_MID + LOG_STD_HALF * ((raw - LOG_STD_MID) / LOG_STD_HALF).tanh()
}

fn squash_log_std_grad(raw: f64) -> f64 {
    let t = ((raw - LOG_STD_MID) / LOG_STD_HALF).tanh();
    1.0 - t * t
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sum(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    BroadcastRows(Var),
    LowRank {
        phi: Var,
        g: Var,
        width: usize,
    },
    CrossEntropy {
        logits: Var,
        probs: Matrix,
        targets: Matrix,
    },
    GaussianNll {
        out: Var,
        actions: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds each gradient onto the matching parameter's `grad`.
    pub fn accumulate<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            if let Some(g) = self.by_param.get(&p.id()) {
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
    }
}

/// A single forward computation. Not `Sync`; build one per thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    trainable: Option<HashSet<ParamId>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which only the listed parameters receive gradients; every
    /// other parameter enters as a constant.
    pub fn with_trainable(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            nodes: Vec::new(),
            trainable: Some(ids.into_iter().collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        let trainable = self.trainable.as_ref().is_none_or(|set| set.contains(&p.id()));
        if trainable {
            self.push(p.value.clone(), Op::Param(p.id()), true)
        } else {
            self.push(p.value.clone(), Op::Constant, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, LaError> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, LaError> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// `x (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, LaError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(LaError::Dimension(format!(
                "row broadcast of {}x{} onto {}x{}",
                rv.rows(),
                rv.cols(),
                xv.rows(),
                xv.cols()
            )));
        }
        let mut value = xv.clone();
        let cols = value.cols();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(cols, rv.cols());
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::AddRow(x, row), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, LaError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(LaError::Dimension(format!(
                "elementwise product of {}x{} and {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(av.rows(), av.cols(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, LaError> {
        let value = self.value(a).clone().reshape(rows, cols)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, LaError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(LaError::Dimension(format!(
                "column concat of {}x{} and {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let mut data = Vec::with_capacity(av.rows() * (av.cols() + bv.cols()));
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let value = Matrix::from_vec(av.rows(), av.cols() + bv.cols(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    /// Repeats a 1×m row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var, LaError> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(LaError::Dimension(format!(
                "row broadcast needs a single row, got {}x{}",
                av.rows(),
                av.cols()
            )));
        }
        let mut data = Vec::with_capacity(n * av.cols());
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        let value = Matrix::from_vec(n, av.cols(), data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::BroadcastRows(a), ng))
    }

    /// Batched vector-matrix product of a strategy row against a flattened
    /// `r × width` core: `out[b, :] = phi[b] · reshape(g[b], r, width)`.
    ///
    /// `phi` is either 1×r (shared by the batch) or B×r.
    pub fn low_rank(&mut self, phi: Var, g: Var, width: usize) -> Result<Var, LaError> {
        let (pv, gv) = (self.value(phi), self.value(g));
        let r = pv.cols();
        let batch = gv.rows();
        if gv.cols() != r * width || (pv.rows() != 1 && pv.rows() != batch) {
            return Err(LaError::Dimension(format!(
                "low-rank product of {}x{} strategy with {}x{} core (width {width})",
                pv.rows(),
                pv.cols(),
                gv.rows(),
                gv.cols()
            )));
        }
        let mut value = Matrix::zeros(batch, width);
        for b in 0..batch {
            let prow = if pv.rows() == 1 { pv.row(0) } else { pv.row(b) };
            let grow = gv.row(b);
            let out = value.row_mut(b);
            for (k, &pk) in prow.iter().enumerate() {
                for (o, &gk) in out.iter_mut().zip(&grow[k * width..(k + 1) * width]) {
                    *o += pk * gk;
                }
            }
        }
        let ng = self.needs(phi) || self.needs(g);
        Ok(self.push(value, Op::LowRank { phi, g, width }, ng))
    }

    /// Mean over rows of `-Σ_a targets[b,a] · log softmax(logits[b])[a]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Matrix) -> Result<Var, LaError> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() || lv.rows() == 0 {
            return Err(LaError::Dimension(format!(
                "cross entropy of {}x{} logits against {}x{} targets",
                lv.rows(),
                lv.cols(),
                targets.rows(),
                targets.cols()
            )));
        }
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for b in 0..lv.rows() {
            let row = lv.row(b);
            let lse = log_sum_exp(row);
            for (a, (&z, &t)) in row.iter().zip(targets.row(b)).enumerate() {
                probs.set(b, a, (z - lse).exp());
                if t != 0.0 {
                    total -= t * (z - lse);
                }
            }
        }
        let value = Matrix::filled(1, 1, total / lv.rows() as f64);
        let ng = self.needs(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, probs, targets }, ng))
    }

    /// Cross entropy against hard class labels.
    pub fn cross_entropy_labels(&mut self, logits: Var, labels: &[usize]) -> Result<Var, LaError> {
        let (rows, cols) = self.value(logits).shape();
        if labels.len() != rows {
            return Err(LaError::Dimension(format!(
                "{} labels for {rows} logit rows",
                labels.len()
            )));
        }
        let mut targets = Matrix::zeros(rows, cols);
        for (b, &a) in labels.iter().enumerate() {
            if a >= cols {
                return Err(LaError::Index(format!("label {a} with {cols} classes")));
            }
            targets.set(b, a, 1.0);
        }
        self.cross_entropy(logits, targets)
    }

    /// Mean over rows of the diagonal-Gaussian negative log-density. `out`
    /// holds `[mean | raw log-std]` (B×2d); log-std goes through
    /// [`squash_log_std`].
    pub fn gaussian_nll(&mut self, out: Var, actions: Matrix) -> Result<Var, LaError> {
        let ov = self.value(out);
        let d = actions.cols();
        if ov.rows() != actions.rows() || ov.cols() != 2 * d || ov.rows() == 0 {
            return Err(LaError::Dimension(format!(
                "gaussian head {}x{} against {}x{} actions",
                ov.rows(),
                ov.cols(),
                actions.rows(),
                actions.cols()
            )));
        }
        let mut total = 0.0;
        for b in 0..ov.rows() {
            let row = ov.row(b);
            let log_std: Vec<f64> = row[d..].iter().map(|&r| squash_log_std(r)).collect();
            total += gaussian_row_nll(&row[..d], &log_std, actions.row(b));
        }
        let value = Matrix::filled(1, 1, total / ov.rows() as f64);
        let ng = self.needs(out);
        Ok(self.push(value, Op::GaussianNll { out, actions }, ng))
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, LaError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(LaError::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    if self.needs(*a) {
                        let mut ga = Matrix::zeros(n, k);
                        matmul_nt_into(g.data(), bv.data(), ga.data_mut(), n, m, k);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = Matrix::zeros(k, m);
                        matmul_tn_into(av.data(), g.data(), gb.data_mut(), n, k, m);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.needs(*row) {
                        let mut gr = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, hadamard(&g, bv));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, hadamard(&g, av));
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k)),
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_vec(y.rows(), y.cols(), data)?);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, g.reshape(r, c)?);
                }
                Op::ConcatCols(a, b) => {
                    let p = self.value(*a).cols();
                    let q = self.value(*b).cols();
                    let rows = g.rows();
                    if self.needs(*a) {
                        let mut ga = Vec::with_capacity(rows * p);
                        for r in 0..rows {
                            ga.extend_from_slice(&g.row(r)[..p]);
                        }
                        accumulate(&mut grads, *a, Matrix::from_vec(rows, p, ga)?);
                    }
                    if self.needs(*b) {
                        let mut gb = Vec::with_capacity(rows * q);
                        for r in 0..rows {
                            gb.extend_from_slice(&g.row(r)[p..]);
                        }
                        accumulate(&mut grads, *b, Matrix::from_vec(rows, q, gb)?);
                    }
                }
                Op::BroadcastRows(a) => {
                    let mut ga = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in ga.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LowRank { phi, g: core, width } => {
                    let (pv, gv) = (self.value(*phi), self.value(*core));
                    let width = *width;
                    let r = pv.cols();
                    let shared = pv.rows() == 1;
                    if self.needs(*phi) {
                        let mut gp = Matrix::zeros(pv.rows(), r);
                        for b in 0..gv.rows() {
                            let dout = g.row(b);
                            let grow = gv.row(b);
                            let target = if shared { 0 } else { b };
                            for k in 0..r {
                                let dot: f64 = grow[k * width..(k + 1) * width]
                                    .iter()
                                    .zip(dout)
                                    .map(|(x, y)| x * y)
                                    .sum();
                                let cur = gp.get(target, k);
                                gp.set(target, k, cur + dot);
                            }
                        }
                        accumulate(&mut grads, *phi, gp);
                    }
                    if self.needs(*core) {
                        let mut gg = Matrix::zeros(gv.rows(), gv.cols());
                        for b in 0..gv.rows() {
                            let prow = if shared { pv.row(0) } else { pv.row(b) };
                            let dout = g.row(b);
                            let out = gg.row_mut(b);
                            for (k, &pk) in prow.iter().enumerate() {
                                for (o, &d) in out[k * width..(k + 1) * width].iter_mut().zip(dout) {
                                    *o = pk * d;
                                }
                            }
                        }
                        accumulate(&mut grads, *core, gg);
                    }
                }
                Op::CrossEntropy { logits, probs, targets } => {
                    let scale = g.data()[0] / probs.rows() as f64;
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    for b in 0..probs.rows() {
                        let tsum: f64 = targets.row(b).iter().sum();
                        for ((o, p), t) in gl.row_mut(b).iter_mut().zip(probs.row(b)).zip(targets.row(b)) {
                            *o = scale * (p * tsum - t);
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::GaussianNll { out: o, actions } => {
                    let ov = self.value(*o);
                    let d = actions.cols();
                    let scale = g.data()[0] / ov.rows() as f64;
                    let mut go = Matrix::zeros(ov.rows(), ov.cols());
                    for b in 0..ov.rows() {
                        let row = ov.row(b);
                        let grow = go.row_mut(b);
                        for j in 0..d {
                            let raw = row[d + j];
                            let ls = squash_log_std(raw);
                            let inv_var = (-2.0 * ls).exp();
                            let diff = actions.get(b, j) - row[j];
                            grow[j] = -scale * diff * inv_var;
                            grow[d + j] = scale * (1.0 - diff * diff * inv_var) * squash_log_std_grad(raw);
                        }
                    }
                    accumulate(&mut grads, *o, go);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Negative log-density of a diagonal Gaussian at `action`.
pub fn gaussian_row_nll(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((&mu, &ls), &a)| {
            let z = (a - mu) * (-ls).exp();
            ls + HALF_LN_2PI + 0.5 * z * z
        })
        .sum()
}

//! Training over partner-indexed joint trajectories and test-time
//! adaptation of partner slots.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Action, ActionSpace, PartnerDataset, Role, Step};
use crate::la::{clip_grad_norm, sgd_step, zero_grads, Adam, LaError, Matrix, Parameter, Tape};
use crate::policy::{nll_loss, ActMode, ActionBatch, Method, Policy, PolicyDims, PolicyError};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("training diverged at epoch {epoch}, partner {partner_id}: loss {loss}")]
    Diverged { epoch: usize, partner_id: usize, loss: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    La(#[from] LaError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rank: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub clip: f64,
    /// Inner SGD step size of first-order MAML.
    pub maml_inner_lr: f64,
    /// Learning rate of the last epoch as a fraction of `lr`; epochs in
    /// between follow a cosine. 1 keeps the rate constant.
    pub final_lr_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Lrp,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            rank: 4,
            seed: 0,
            hidden: vec![64, 64],
            clip: 10.0,
            maml_inner_lr: 1e-2,
            final_lr_frac: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        if self.epochs < 2 {
            return self.lr;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        let frac = self.final_lr_frac + (1.0 - self.final_lr_frac) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * frac
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr.is_nan() || self.lr < 0.0 || self.rank == 0 {
            return Err(TrainError::Validation(format!(
                "need epochs ≥ 1, batch_size ≥ 1, lr ≥ 0, rank ≥ 1 (got {}, {}, {}, {})",
                self.epochs, self.batch_size, self.lr, self.rank
            )));
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(TrainError::Validation(format!(
                "final_lr_frac must lie in [0, 1] (got {})",
                self.final_lr_frac
            )));
        }
        Ok(())
    }
}

/// One row of the training log: mean minibatch loss of a partner over an
/// epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub partner_id: usize,
    pub nll: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub policy: Policy,
    /// Partner id held by each training slot.
    pub partner_ids: Vec<usize>,
    pub log: Vec<EpochRecord>,
}

impl Trained {
    pub fn slot_of(&self, partner_id: usize) -> Option<usize> {
        self.partner_ids.iter().position(|&p| p == partner_id)
    }

    /// Mean logged NLL per epoch, over partners.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.log.iter().map(|r| r.epoch).max().map_or(0, |e| e + 1);
        (0..epochs)
            .map(|e| {
                let rows: Vec<f64> = self.log.iter().filter(|r| r.epoch == e).map(|r| r.nll).collect();
                rows.iter().sum::<f64>() / rows.len() as f64
            })
            .collect()
    }
}

/// States and actions of both roles for a set of steps, ego rows first.
pub fn joint_batch(steps: &[&Step], space: ActionSpace) -> Result<(Matrix, ActionBatch), PolicyError> {
    let mut rows = Vec::with_capacity(2 * steps.len());
    let mut actions: Vec<&Action> = Vec::with_capacity(2 * steps.len());
    for role in [Role::Ego, Role::Partner] {
        for s in steps {
            rows.push(s.state(role));
            actions.push(s.action(role));
        }
    }
    Ok((Matrix::from_rows(&rows)?, ActionBatch::from_actions(space, actions)?))
}

/// Samples of one role.
pub fn role_batch(steps: &[&Step], role: Role, space: ActionSpace) -> Result<(Matrix, ActionBatch), PolicyError> {
    let rows: Vec<Vec<f64>> = steps.iter().map(|s| s.state(role)).collect();
    Ok((
        Matrix::from_rows(&rows)?,
        ActionBatch::from_actions(space, steps.iter().map(|s| s.action(role)))?,
    ))
}

fn check_dataset(dataset: &PartnerDataset) -> Result<(Vec<usize>, usize), TrainError> {
    dataset.validate().map_err(|e| TrainError::Validation(e.to_string()))?;
    let ids = dataset.partner_ids();
    if ids.is_empty() || dataset.num_steps() == 0 {
        return Err(TrainError::Validation("dataset has no partner steps".into()));
    }
    for &id in &ids {
        if dataset.steps_for(id).is_empty() {
            return Err(TrainError::Validation(format!("partner {id} has no steps")));
        }
    }
    Ok((ids, dataset.state_dim().expect("nonempty")))
}

/// Trains a policy of `cfg.method` on every partner of `dataset`, one slot
/// per partner in first-seen order.
pub fn train(dataset: &PartnerDataset, action_space: ActionSpace, cfg: &TrainConfig) -> Result<Trained, TrainError> {
    cfg.validate()?;
    let (partner_ids, state_dim) = check_dataset(dataset)?;
    let mut dims = PolicyDims::new(state_dim, action_space, partner_ids.len(), cfg.rank);
    dims.hidden = cfg.hidden.clone();
    let mut policy = Policy::build(cfg.method, dims, derive_seed(cfg.seed, "init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches"));
    let mut adam = Adam::new(cfg.lr);
    let steps: Vec<Vec<&Step>> = partner_ids.iter().map(|&id| dataset.steps_for(id)).collect();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.epoch_lr(epoch);
        let orders: Vec<Vec<&Step>> = steps
            .iter()
            .map(|s| {
                let mut order = s.clone();
                order.shuffle(&mut rng);
                order
            })
            .collect();
        let chunks: Vec<Vec<&[&Step]>> = orders.iter().map(|o| o.chunks(cfg.batch_size).collect()).collect();
        let rounds = chunks.iter().map(Vec::len).max().unwrap_or(0);
        let mut totals = vec![(0.0, 0usize); partner_ids.len()];
        // One minibatch per partner per round, partners in order.
        for round in 0..rounds {
            for (slot, &partner_id) in partner_ids.iter().enumerate() {
                let Some(chunk) = chunks[slot].get(round) else {
                    continue;
                };
                let loss = if cfg.method == Method::Maml {
                    fomaml_step(&mut policy, chunk, action_space, cfg, &mut adam)?
                } else {
                    supervised_step(&mut policy, slot, chunk, action_space, cfg, &mut adam)?
                };
                if !loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        partner_id,
                        loss,
                    });
                }
                totals[slot].0 += loss * chunk.len() as f64;
                totals[slot].1 += chunk.len();
            }
        }
        log.extend(
            partner_ids
                .iter()
                .zip(&totals)
                .map(|(&partner_id, &(total, n))| EpochRecord {
                    epoch,
                    partner_id,
                    nll: total / n as f64,
                }),
        );
    }
    Ok(Trained {
        policy,
        partner_ids,
        log,
    })
}

fn apply(params: &mut [&mut Parameter], cfg: &TrainConfig, adam: &mut Adam) {
    clip_grad_norm(params, cfg.clip);
    adam.step(params);
}

fn supervised_step(
    policy: &mut Policy,
    slot: usize,
    chunk: &[&Step],
    space: ActionSpace,
    cfg: &TrainConfig,
    adam: &mut Adam,
) -> Result<f64, TrainError> {
    let (x, actions) = joint_batch(chunk, space)?;
    let mut tape = Tape::new();
    let out = policy.forward(&mut tape, Some(slot), &x)?;
    let loss = nll_loss(&mut tape, out, &actions)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    let mut params = policy.batch_params_mut(Some(slot));
    zero_grads(params.iter_mut().map(|p| &mut **p));
    grads.accumulate(params.iter_mut().map(|p| &mut **p));
    apply(&mut params, cfg, adam);
    Ok(value)
}

/// First-order MAML on one partner batch: one inner SGD step on the first
/// half, meta-gradient from the second half at the adapted weights.
fn fomaml_step(
    policy: &mut Policy,
    chunk: &[&Step],
    space: ActionSpace,
    cfg: &TrainConfig,
    adam: &mut Adam,
) -> Result<f64, TrainError> {
    let split = chunk.len().div_ceil(2);
    let (support, query) = chunk.split_at(split);
    let query = if query.is_empty() { support } else { query };
    let mut adapted = policy.clone();
    sgd_step_meta(&mut adapted, support, space, cfg.maml_inner_lr, cfg.clip)?;
    let (x, actions) = joint_batch(query, space)?;
    let mut tape = Tape::new();
    let out = adapted.forward(&mut tape, None, &x)?;
    let loss = nll_loss(&mut tape, out, &actions)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Ok(value);
    }
    // The adapted copy shares parameter ids with the meta network, so its
    // gradients land on the meta weights.
    let grads = tape.backward(loss)?;
    let mut params = policy.batch_params_mut(None);
    zero_grads(params.iter_mut().map(|p| &mut **p));
    grads.accumulate(params.iter_mut().map(|p| &mut **p));
    apply(&mut params, cfg, adam);
    Ok(value)
}

fn sgd_step_meta(
    policy: &mut Policy,
    steps: &[&Step],
    space: ActionSpace,
    lr: f64,
    clip: f64,
) -> Result<(), TrainError> {
    let (x, actions) = joint_batch(steps, space)?;
    let mut tape = Tape::new();
    let out = policy.forward(&mut tape, None, &x)?;
    let loss = nll_loss(&mut tape, out, &actions)?;
    let grads = tape.backward(loss)?;
    let mut params = policy.net_mut().params_mut();
    zero_grads(params.iter_mut().map(|p| &mut **p));
    grads.accumulate(params.iter_mut().map(|p| &mut **p));
    clip_grad_norm(&mut params, clip);
    sgd_step(&mut params, lr);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lr: f64,
    pub steps_per_batch: usize,
    pub batch_size: usize,
    /// Sample counts at which the NLL trace is recorded.
    pub checkpoints: Vec<usize>,
    /// Also fine-tune the lrp strategy weights (a slot-local copy).
    pub adapt_g1: bool,
    pub clip: f64,
    /// SGD step size of the single maml inner step per batch.
    pub maml_inner_lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps_per_batch: 5,
            batch_size: 16,
            checkpoints: vec![0, 50, 100, 200, 500, 1000],
            adapt_g1: false,
            clip: 10.0,
            maml_inner_lr: 1e-2,
        }
    }
}

/// A policy with one fresh test slot being fitted to an unseen partner.
#[derive(Debug, Clone)]
pub struct AdaptSession {
    policy: Policy,
    slot: usize,
    cfg: AdaptConfig,
    adam: Adam,
    observed: Vec<(Vec<f64>, Action)>,
    pending: usize,
    updates: usize,
    trace: Vec<(usize, f64)>,
    warnings: Vec<String>,
}

impl AdaptSession {
    /// Clones `policy` (dropping its test slots) and opens a new test slot.
    pub fn new(policy: &Policy, cfg: AdaptConfig, seed: u64) -> Self {
        let mut policy = policy.clone();
        policy.clear_test_slots();
        let slot = policy.new_test_slot_with(seed, cfg.adapt_g1);
        let adam = Adam::new(cfg.lr);
        Self {
            policy,
            slot,
            cfg,
            adam,
            observed: Vec::new(),
            pending: 0,
            updates: 0,
            trace: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn samples(&self) -> usize {
        self.observed.len()
    }

    /// Number of gradient steps applied so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn trace(&self) -> &[(usize, f64)] {
        &self.trace
    }

    pub fn record(&mut self, nll: f64) {
        self.trace.push((self.observed.len(), nll));
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Adds one observed partner step (partner-role state); adapts once a
    /// full batch has arrived.
    pub fn observe(&mut self, s: Vec<f64>, a: Action) -> Result<(), TrainError> {
        self.policy
            .dims()
            .action_space
            .check(&a)
            .map_err(|e| TrainError::Validation(e.to_string()))?;
        if s.len() != self.policy.dims().state_dim {
            return Err(LaError::Dimension(format!(
                "observed state width {} but policy expects {}",
                s.len(),
                self.policy.dims().state_dim
            ))
            .into());
        }
        self.observed.push((s, a));
        self.pending += 1;
        if self.pending >= self.cfg.batch_size {
            self.flush()?;
        }
        Ok(())
    }

    /// Adapts on any steps received since the last update.
    pub fn flush(&mut self) -> Result<(), TrainError> {
        if self.pending == 0 {
            return Ok(());
        }
        self.pending = 0;
        let (x, actions) = self.buffer()?;
        if self.policy.method() == Method::Maml {
            self.sgd_slot(&x, &actions)?;
        } else {
            for _ in 0..self.cfg.steps_per_batch {
                self.adam_slot(&x, &actions)?;
            }
        }
        Ok(())
    }

    fn buffer(&self) -> Result<(Matrix, ActionBatch), PolicyError> {
        let rows: Vec<Vec<f64>> = self.observed.iter().map(|(s, _)| s.clone()).collect();
        Ok((
            Matrix::from_rows(&rows)?,
            ActionBatch::from_actions(self.policy.dims().action_space, self.observed.iter().map(|(_, a)| a))?,
        ))
    }

    fn slot_grads(&mut self, x: &Matrix, actions: &ActionBatch) -> Result<f64, TrainError> {
        let ids: Vec<_> = self.policy.slot(self.slot)?.params().iter().map(|p| p.id()).collect();
        let mut tape = Tape::with_trainable(ids);
        let out = self.policy.forward(&mut tape, Some(self.slot), x)?;
        let loss = nll_loss(&mut tape, out, actions)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            self.warnings
                .push(format!("non-finite adaptation loss {value}; step skipped"));
            return Ok(value);
        }
        let grads = tape.backward(loss)?;
        let slot = self.policy.slot_mut(self.slot)?;
        let mut params = slot.params_mut();
        zero_grads(params.iter_mut().map(|p| &mut **p));
        grads.accumulate(params.iter_mut().map(|p| &mut **p));
        clip_grad_norm(&mut params, self.cfg.clip);
        Ok(value)
    }

    fn adam_slot(&mut self, x: &Matrix, actions: &ActionBatch) -> Result<(), TrainError> {
        if self.slot_grads(x, actions)?.is_finite() {
            let slot = self.policy.slot_mut(self.slot)?;
            self.adam.step(&mut slot.params_mut());
            self.updates += 1;
        }
        Ok(())
    }

    fn sgd_slot(&mut self, x: &Matrix, actions: &ActionBatch) -> Result<(), TrainError> {
        if self.slot_grads(x, actions)?.is_finite() {
            let lr = self.cfg.maml_inner_lr;
            sgd_step(&mut self.policy.slot_mut(self.slot)?.params_mut(), lr);
            self.updates += 1;
        }
        Ok(())
    }

    /// Ego action for a state given in any role encoding.
    pub fn act_online(&self, s: &[f64], mode: ActMode, rng: &mut impl Rng) -> Result<Action, TrainError> {
        let mut ego = s.to_vec();
        if let Some(last) = ego.last_mut() {
            *last = Role::Ego.flag();
        }
        Ok(self.policy.act(self.slot, &ego, mode, rng)?)
    }
}

/// Feeds a stream of partner observations into `session`, flushing at the
/// end. An empty stream leaves the session untouched apart from a warning.
pub fn adapt(
    session: &mut AdaptSession,
    observed: impl IntoIterator<Item = (Vec<f64>, Action)>,
) -> Result<(), TrainError> {
    let before = session.samples();
    for (s, a) in observed {
        session.observe(s, a)?;
    }
    if session.samples() == before {
        session
            .warnings
            .push("empty observation stream; nothing adapted".into());
    }
    session.flush()
}

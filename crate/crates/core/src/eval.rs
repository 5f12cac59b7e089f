//! Offline likelihood evaluation, behavioral cloning, and reward rollouts.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{as2, Action, ActionSpace, Actor, Env, EnvState, Role, Step};
use crate::la::{clip_grad_norm, zero_grads, Adam, LaError, Matrix, Mlp, Tape};
use crate::policy::{choose, log_prob, nll_loss, ActMode, ActionBatch, Logits, PolicyError};
use crate::seed::{derive_seed, stream};
use crate::trainer::{AdaptSession, TrainError};
use crate::tt::softmax;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    La(#[from] LaError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Mean `-log π(a^e | s_ego)` over held-out steps.
pub fn offline_nll(policy: &crate::policy::Policy, slot: usize, heldout: &[&Step]) -> Result<f64, EvalError> {
    if heldout.is_empty() {
        return Err(EvalError::Validation("offline NLL needs held-out steps".into()));
    }
    let rows: Vec<Vec<f64>> = heldout.iter().map(|s| s.state(Role::Ego)).collect();
    let actions = ActionBatch::from_actions(policy.dims().action_space, heldout.iter().map(|s| &s.ae))?;
    Ok(policy.mean_nll(Some(slot), &Matrix::from_rows(&rows)?, &actions)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 3e-3,
            hidden: vec![64, 64],
        }
    }
}

/// An MLP fit to one partner's `(s_partner, a^p)` pairs.
#[derive(Debug, Clone)]
pub struct BcPolicy {
    pub net: Mlp,
    pub action_space: ActionSpace,
    pub train_nll: f64,
    pub mode: ActMode,
}

impl BcPolicy {
    /// Output at a partner-role state.
    pub fn logits(&self, s: &[f64]) -> Result<Logits, EvalError> {
        let out = self.net.forward_matrix(&Matrix::row_vector(s.to_vec()))?;
        let row = out.row(0);
        Ok(match self.action_space {
            ActionSpace::Discrete(_) => Logits::Discrete(row.to_vec()),
            ActionSpace::Continuous(d) => Logits::Gaussian {
                mean: row[..d].to_vec(),
                log_std: row[d..].iter().map(|&v| crate::la::squash_log_std(v)).collect(),
            },
        })
    }

    pub fn probs(&self, s: &[f64]) -> Result<Vec<f64>, EvalError> {
        match self.logits(s)? {
            Logits::Discrete(z) => Ok(softmax(&z)),
            Logits::Gaussian { .. } => Err(EvalError::Validation("continuous BC policy".into())),
        }
    }

    pub fn log_prob(&self, s: &[f64], a: &Action) -> Result<f64, EvalError> {
        Ok(log_prob(&self.logits(s)?, a))
    }
}

impl Actor for BcPolicy {
    fn act(&mut self, env: &Env, st: &EnvState, rng: &mut ChaCha8Rng) -> Action {
        let s = env.encode(st, Role::Partner);
        choose(&self.logits(&s).expect("state width fixed by env"), self.mode, rng)
    }
}

/// Behavioral cloning of the partner side of `steps`.
pub fn bc_fit(steps: &[&Step], action_space: ActionSpace, seed: u64, cfg: &BcConfig) -> Result<BcPolicy, EvalError> {
    if steps.is_empty() {
        return Err(EvalError::Validation(
            "behavioral cloning needs at least one step".into(),
        ));
    }
    let d = steps[0].s.len();
    let mut sizes = vec![d];
    sizes.extend(&cfg.hidden);
    sizes.push(action_space.head_width());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bc"));
    let mut net = Mlp::new(&sizes, true, &mut rng);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<&Step> = steps.to_vec();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, a) = crate::trainer::role_batch(chunk, Role::Partner, action_space)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let out = net.forward(&mut tape, xv)?;
            let loss = nll_loss(&mut tape, out, &a)?;
            let grads = tape.backward(loss)?;
            let mut params = net.params_mut();
            zero_grads(params.iter_mut().map(|p| &mut **p));
            grads.accumulate(params.iter_mut().map(|p| &mut **p));
            clip_grad_norm(&mut params, 10.0);
            adam.step(&mut params);
        }
    }
    let (x, a) = crate::trainer::role_batch(steps, Role::Partner, action_space)?;
    let mut tape = Tape::with_trainable([]);
    let xv = tape.constant(x);
    let out = net.forward(&mut tape, xv)?;
    let loss = nll_loss(&mut tape, out, &a)?;
    Ok(BcPolicy {
        net,
        action_space,
        train_nll: tape.scalar(loss),
        mode: ActMode::Sample,
    })
}

/// Mean per-episode return with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub mean: f64,
    pub stderr: f64,
    pub episodes: usize,
}

impl RewardSummary {
    pub fn from_returns(returns: &[f64]) -> Result<Self, EvalError> {
        let n = returns.len();
        if n == 0 {
            return Err(EvalError::Validation("no evaluation episodes".into()));
        }
        let mean = returns.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            mean,
            stderr,
            episodes: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub episodes: usize,
    /// Rounds per bandit episode (particle episodes use the env horizon).
    pub bandit_rounds: usize,
    pub mode: ActMode,
    /// Keep adapting the ego on partner actions during the rollout.
    pub online: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            bandit_rounds: 50,
            mode: ActMode::Mode,
            online: false,
        }
    }
}

/// Anything that can drive the ego side of a rollout.
pub trait EgoAgent {
    fn ego_action(&mut self, st: &EnvState, s_ego: &[f64], rng: &mut ChaCha8Rng) -> Result<Action, EvalError>;
    /// Called with the partner-role state and partner action after a step.
    fn observe_partner(&mut self, _s_partner: Vec<f64>, _a: Action) -> Result<(), EvalError> {
        Ok(())
    }
}

/// An adaptation session acting with a fixed mode; `online` feeds partner
/// actions back into the session.
pub struct SessionEgo<'a> {
    pub session: &'a mut AdaptSession,
    pub mode: ActMode,
    pub online: bool,
}

impl EgoAgent for SessionEgo<'_> {
    fn ego_action(&mut self, _st: &EnvState, s_ego: &[f64], rng: &mut ChaCha8Rng) -> Result<Action, EvalError> {
        Ok(self.session.act_online(s_ego, self.mode, rng)?)
    }

    fn observe_partner(&mut self, s_partner: Vec<f64>, a: Action) -> Result<(), EvalError> {
        if self.online {
            self.session.observe(s_partner, a)?;
        }
        Ok(())
    }
}

/// Any actor can act as the ego.
pub struct ActorEgo<'a, A: Actor> {
    pub actor: &'a mut A,
    pub env: &'a Env,
}

/// Rolls out `ego` with a frozen `partner` for `cfg.episodes` episodes.
pub fn static_eval(
    ego: &mut dyn EgoAgent,
    partner: &mut dyn Actor,
    env: &Env,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<RewardSummary, EvalError> {
    if cfg.episodes == 0 {
        return Err(EvalError::Validation(
            "static evaluation needs at least one episode".into(),
        ));
    }
    let mut returns = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        let mut rng = stream(seed, "static-eval", ep as u64);
        let mut total = 0.0;
        match env {
            Env::Bandit(b) => {
                for _ in 0..cfg.bandit_rounds {
                    let s = rng.random_range(0..b.n_states());
                    let st = EnvState::Bandit { s };
                    let a0 = ego.ego_action(&st, &b.encode(s, Role::Ego), &mut rng)?;
                    let a1 = partner.act(env, &st, &mut rng);
                    total += b
                        .reward(s, a0.discrete().expect("discrete"), a1.discrete().expect("discrete"))
                        .map_err(|e| EvalError::Validation(e.to_string()))?;
                    ego.observe_partner(b.encode(s, Role::Partner), a1)?;
                }
            }
            Env::Particle(p) => {
                let mut sim = p.clone();
                sim.reset_random(&mut rng);
                while !sim.done() {
                    let st = EnvState::Particle {
                        pos: sim.pos(),
                        target: sim.target(),
                    };
                    let a0 = ego.ego_action(&st, &sim.encode(Role::Ego), &mut rng)?;
                    let a1 = partner.act(env, &st, &mut rng);
                    let s_partner = sim.encode(Role::Partner);
                    total += sim.step(as2(&a0), as2(&a1));
                    ego.observe_partner(s_partner, a1)?;
                }
            }
        }
        returns.push(total);
    }
    RewardSummary::from_returns(&returns)
}

impl<A: Actor> EgoAgent for ActorEgo<'_, A> {
    fn ego_action(&mut self, st: &EnvState, _s_ego: &[f64], rng: &mut ChaCha8Rng) -> Result<Action, EvalError> {
        Ok(self.actor.act(self.env, st, rng))
    }
}

/// Adapts a fresh session on `stream` and records held-out expert NLL at
/// each configured sample count (including 0).
pub fn adapt_curve(
    session: &mut AdaptSession,
    stream: &[(Vec<f64>, Action)],
    heldout: &[&Step],
) -> Result<Vec<(usize, f64)>, EvalError> {
    let mut checkpoints = session.config().checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let mut curve = Vec::new();
    for &c in &checkpoints {
        if c > stream.len() {
            break;
        }
        while session.samples() < c {
            let (s, a) = &stream[session.samples()];
            session.observe(s.clone(), a.clone())?;
        }
        session.flush()?;
        let nll = offline_nll(session.policy(), session.slot(), heldout)?;
        session.record(nll);
        curve.push((c, nll));
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllRow {
    pub method: String,
    pub partner_id: usize,
    pub samples: usize,
    pub nll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Before,
    After,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub method: String,
    pub partner_id: usize,
    pub phase: Phase,
    pub reward: f64,
    pub stderr: f64,
}

/// NLL curves and before/after rewards for a set of methods and partners.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub seed: u64,
    pub nll: Vec<NllRow>,
    pub reward: Vec<RewardRow>,
}

impl EvalReport {
    pub fn write_nll_csv(&self, w: impl Write) -> Result<(), EvalError> {
        write_rows(w, &self.nll)
    }

    pub fn write_reward_csv(&self, w: impl Write) -> Result<(), EvalError> {
        write_rows(w, &self.reward)
    }

    /// Mean NLL over partners at a sample count.
    pub fn mean_nll(&self, method: &str, samples: usize) -> Option<f64> {
        mean(
            self.nll
                .iter()
                .filter(|r| r.method == method && r.samples == samples)
                .map(|r| r.nll),
        )
    }

    pub fn mean_reward(&self, method: &str, phase: Phase) -> Option<f64> {
        mean(
            self.reward
                .iter()
                .filter(|r| r.method == method && r.phase == phase)
                .map(|r| r.reward),
        )
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn write_rows<T: Serialize>(w: impl Write, rows: &[T]) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

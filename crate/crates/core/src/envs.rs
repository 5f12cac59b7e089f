//! Collaborative bandit and particle environments, partner populations,
//! experts, and joint-trajectory datasets.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::la::log_sum_exp;
use crate::seed::{derive_seed, stream};
use crate::tt::{softmax, PolicyTensor, TtError};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("index error: {0}")]
    Bounds(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse error on line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Tt(#[from] TtError),
}

/// Which agent a state encoding is for. The role flag is the last feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Ego,
    Partner,
}

impl Role {
    pub fn flag(self) -> f64 {
        match self {
            Role::Ego => 0.0,
            Role::Partner => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }

    pub fn continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(v) => Some(v),
            Action::Discrete(_) => None,
        }
    }
}

/// Bandit state features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StateEncoding {
    /// Seeded random binary code per state.
    Code {
        bits: usize,
    },
    OneHot,
}

impl Default for StateEncoding {
    fn default() -> Self {
        StateEncoding::Code { bits: 32 }
    }
}

/// Two players pick an action; they score iff both pick the same action and
/// that action scores in the current state.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditEnv {
    n_states: usize,
    n_actions: usize,
    score: Vec<bool>,
    encoding: StateEncoding,
    codes: Vec<Vec<f64>>,
}

/// Draws each score entry Bernoulli(p), redrawing a state's row until at
/// least one action scores.
pub fn bandit_make(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    p: f64,
    encoding: StateEncoding,
) -> Result<BanditEnv, EnvError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(EnvError::Validation(format!("score probability {p} not in (0, 1)")));
    }
    if n_states == 0 || n_actions == 0 {
        return Err(EnvError::Validation("bandit needs states and actions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bandit/score"));
    let mut score = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        loop {
            let row: Vec<bool> = (0..n_actions).map(|_| rng.random_bool(p)).collect();
            if row.iter().any(|&b| b) {
                score.extend(row);
                break;
            }
        }
    }
    let codes = match encoding {
        StateEncoding::Code { bits } => {
            if bits == 0 {
                return Err(EnvError::Validation("code width must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bandit/code"));
            let mut seen = std::collections::HashSet::new();
            let mut codes = Vec::with_capacity(n_states);
            while codes.len() < n_states {
                let code: Vec<bool> = (0..bits).map(|_| rng.random_bool(0.5)).collect();
                // Collisions only matter when there is room to avoid them.
                if seen.insert(code.clone()) || seen.len() as f64 >= 2f64.powi(bits.min(62) as i32) {
                    codes.push(code.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect());
                }
            }
            codes
        }
        StateEncoding::OneHot => Vec::new(),
    };
    Ok(BanditEnv {
        n_states,
        n_actions,
        score,
        encoding,
        codes,
    })
}

impl BanditEnv {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn encoding(&self) -> StateEncoding {
        self.encoding
    }

    pub fn scores(&self, s: usize, a: usize) -> bool {
        self.score[s * self.n_actions + a]
    }

    pub fn scoring_fraction(&self) -> f64 {
        self.score.iter().filter(|&&b| b).count() as f64 / self.score.len() as f64
    }

    pub fn reward(&self, s: usize, a0: usize, a1: usize) -> Result<f64, EnvError> {
        if s >= self.n_states || a0 >= self.n_actions || a1 >= self.n_actions {
            return Err(EnvError::Bounds(format!(
                "state {s} / actions ({a0}, {a1}) outside {}x{}",
                self.n_states, self.n_actions
            )));
        }
        Ok(if a0 == a1 && self.scores(s, a0) { 1.0 } else { 0.0 })
    }

    pub fn state_dim(&self) -> usize {
        match self.encoding {
            StateEncoding::Code { bits } => bits + 1,
            StateEncoding::OneHot => self.n_states + 1,
        }
    }

    pub fn encode(&self, s: usize, role: Role) -> Vec<f64> {
        let mut v = match self.encoding {
            StateEncoding::Code { .. } => self.codes[s].clone(),
            StateEncoding::OneHot => {
                let mut v = vec![0.0; self.n_states];
                v[s] = 1.0;
                v
            }
        };
        v.push(role.flag());
        v
    }
}

/// Clamps a velocity to Euclidean norm `max`.
pub fn clamp_norm(v: [f64; 2], max: f64) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n > max && n > 0.0 {
        [v[0] * max / n, v[1] * max / n]
    } else {
        v
    }
}

/// A particle moved by the sum of both players' velocities toward a target.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnv {
    pub horizon: usize,
    pub max_speed: f64,
    pos: [f64; 2],
    target: [f64; 2],
    t: usize,
}

impl ParticleEnv {
    pub fn new(horizon: usize, max_speed: f64) -> Self {
        Self {
            horizon,
            max_speed,
            pos: [0.0; 2],
            target: [0.0; 2],
            t: 0,
        }
    }

    pub fn reset(&mut self, start: [f64; 2], target: [f64; 2]) {
        self.pos = start;
        self.target = target;
        self.t = 0;
    }

    /// Uniform start and target in [-1, 1]².
    pub fn reset_random(&mut self, rng: &mut impl Rng) {
        let mut u = || rng.random_range(-1.0..=1.0);
        let start = [u(), u()];
        let target = [u(), u()];
        self.reset(start, target);
    }

    pub fn pos(&self) -> [f64; 2] {
        self.pos
    }

    pub fn target(&self) -> [f64; 2] {
        self.target
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t >= self.horizon
    }

    /// `target - pos`.
    pub fn offset(&self) -> [f64; 2] {
        [self.target[0] - self.pos[0], self.target[1] - self.pos[1]]
    }

    pub fn distance(&self) -> f64 {
        let d = self.offset();
        (d[0] * d[0] + d[1] * d[1]).sqrt()
    }

    /// Clamps both actions, moves by their sum, returns `-‖pos - target‖`.
    pub fn step(&mut self, a0: [f64; 2], a1: [f64; 2]) -> f64 {
        let a0 = clamp_norm(a0, self.max_speed);
        let a1 = clamp_norm(a1, self.max_speed);
        for i in 0..2 {
            self.pos[i] += a0[i] + a1[i];
        }
        self.t += 1;
        -self.distance()
    }

    pub const STATE_DIM: usize = 5;

    /// `(pos, target, role)`.
    pub fn encode(&self, role: Role) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.target[0], self.target[1], role.flag()]
    }

    /// Return of a straight-line approach at the combined top speed
    /// `2·max_speed`, which bounds every pair of players.
    pub fn optimal_return(&self, start: [f64; 2], target: [f64; 2]) -> f64 {
        let dist = ((target[0] - start[0]).powi(2) + (target[1] - start[1]).powi(2)).sqrt();
        let v = 2.0 * self.max_speed;
        -(1..=self.horizon).map(|t| (dist - v * t as f64).max(0.0)).sum::<f64>()
    }
}

/// Environment description, as stored in `env.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    Bandit {
        n_states: usize,
        n_actions: usize,
        p: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        encoding: StateEncoding,
    },
    Particle {
        horizon: usize,
        max_speed: f64,
    },
}

impl EnvSpec {
    pub fn bandit_default(seed: u64) -> Self {
        EnvSpec::Bandit {
            n_states: 1000,
            n_actions: 10,
            p: 0.3,
            seed,
            encoding: StateEncoding::default(),
        }
    }

    pub fn particle_default() -> Self {
        EnvSpec::Particle {
            horizon: 50,
            max_speed: 0.1,
        }
    }

    pub fn build(&self) -> Result<Env, EnvError> {
        Ok(match *self {
            EnvSpec::Bandit {
                n_states,
                n_actions,
                p,
                seed,
                encoding,
            } => Env::Bandit(bandit_make(seed, n_states, n_actions, p, encoding)?),
            EnvSpec::Particle { horizon, max_speed } => {
                if horizon == 0 || max_speed.is_nan() || max_speed <= 0.0 {
                    return Err(EnvError::Validation(
                        "particle env needs a positive horizon and speed".into(),
                    ));
                }
                Env::Particle(ParticleEnv::new(horizon, max_speed))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Bandit { .. } => "bandit",
            EnvSpec::Particle { .. } => "particle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Bandit(BanditEnv),
    Particle(ParticleEnv),
}

impl Env {
    pub fn state_dim(&self) -> usize {
        match self {
            Env::Bandit(b) => b.state_dim(),
            Env::Particle(_) => ParticleEnv::STATE_DIM,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            Env::Bandit(b) => ActionSpace::Discrete(b.n_actions()),
            Env::Particle(_) => ActionSpace::Continuous(2),
        }
    }
}

/// Discrete with `n` actions, or continuous with dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "size", rename_all = "lowercase")]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    /// Width of a policy's output row: `|A|` or `2·d`.
    pub fn head_width(self) -> usize {
        match self {
            ActionSpace::Discrete(n) => n,
            ActionSpace::Continuous(d) => 2 * d,
        }
    }

    pub fn check(self, a: &Action) -> Result<(), EnvError> {
        match (self, a) {
            (ActionSpace::Discrete(n), Action::Discrete(i)) if *i < n => Ok(()),
            (ActionSpace::Continuous(d), Action::Continuous(v)) if v.len() == d && v.iter().all(|x| x.is_finite()) => {
                Ok(())
            }
            _ => Err(EnvError::Validation(format!("action {a:?} invalid for {self:?}"))),
        }
    }
}

/// Raw (unencoded) environment state handed to actors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvState {
    Bandit { s: usize },
    Particle { pos: [f64; 2], target: [f64; 2] },
}

impl EnvState {
    pub fn offset(&self) -> [f64; 2] {
        match self {
            EnvState::Particle { pos, target } => [target[0] - pos[0], target[1] - pos[1]],
            EnvState::Bandit { .. } => [0.0, 0.0],
        }
    }
}

impl Env {
    pub fn encode(&self, st: &EnvState, role: Role) -> Vec<f64> {
        match (self, st) {
            (Env::Bandit(b), EnvState::Bandit { s }) => b.encode(*s, role),
            (Env::Particle(_), EnvState::Particle { pos, target }) => {
                vec![pos[0], pos[1], target[0], target[1], role.flag()]
            }
            _ => panic!("state {st:?} does not belong to this environment"),
        }
    }
}

/// Anything that picks an action in an environment state.
pub trait Actor {
    fn act(&mut self, env: &Env, st: &EnvState, rng: &mut ChaCha8Rng) -> Action;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    Planted,
    Parametric,
    Selfplay,
}

/// How to generate one partner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartnerSpec {
    pub partner_id: usize,
    pub mode: GenMode,
    pub seed: u64,
    /// Generating rank for planted populations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
}

/// A fixed partner (or expert) strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PartnerPolicy {
    /// Per-state action distributions, `n_states × n_actions` row-major.
    Tabular {
        n_states: usize,
        n_actions: usize,
        probs: Vec<f64>,
    },
    /// Velocity `clamp(K · (target - pos))` plus optional Gaussian noise,
    /// `K` row-major 2×2.
    Linear {
        k: [f64; 4],
        max_speed: f64,
        noise_std: f64,
    },
}

impl PartnerPolicy {
    /// Gain-and-rotation particle partner: `clamp(g · R(θ) · d)`.
    pub fn parametric(gain: f64, angle: f64, max_speed: f64) -> Self {
        let (s, c) = angle.sin_cos();
        PartnerPolicy::Linear {
            k: [gain * c, -gain * s, gain * s, gain * c],
            max_speed,
            noise_std: 0.0,
        }
    }

    pub fn dist(&self, s: usize) -> Option<&[f64]> {
        match self {
            PartnerPolicy::Tabular { n_actions, probs, .. } => Some(&probs[s * n_actions..(s + 1) * n_actions]),
            PartnerPolicy::Linear { .. } => None,
        }
    }

    fn linear_mean_raw(k: &[f64; 4], d: [f64; 2]) -> [f64; 2] {
        [k[0] * d[0] + k[1] * d[1], k[2] * d[0] + k[3] * d[1]]
    }

    /// Noise-free velocity for offset `d`.
    pub fn velocity(&self, d: [f64; 2]) -> Option<[f64; 2]> {
        match self {
            PartnerPolicy::Linear { k, max_speed, .. } => Some(clamp_norm(Self::linear_mean_raw(k, d), *max_speed)),
            PartnerPolicy::Tabular { .. } => None,
        }
    }

    /// Expected velocity: exact without noise, otherwise a 100-sample
    /// estimate from a fixed stream.
    pub fn expected_velocity(&self, d: [f64; 2]) -> Option<[f64; 2]> {
        match self {
            PartnerPolicy::Linear {
                k,
                max_speed,
                noise_std,
            } => {
                if *noise_std == 0.0 {
                    return self.velocity(d);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    d[0].to_bits() ^ d[1].to_bits().rotate_left(17),
                    "expected-velocity",
                ));
                let raw = Self::linear_mean_raw(k, d);
                let mut acc = [0.0; 2];
                for _ in 0..100 {
                    let e0: f64 = StandardNormal.sample(&mut rng);
                    let e1: f64 = StandardNormal.sample(&mut rng);
                    let a = clamp_norm([raw[0] + noise_std * e0, raw[1] + noise_std * e1], *max_speed);
                    acc[0] += a[0];
                    acc[1] += a[1];
                }
                Some([acc[0] / 100.0, acc[1] / 100.0])
            }
            PartnerPolicy::Tabular { .. } => None,
        }
    }

    pub fn sample(&self, st: &EnvState, rng: &mut impl Rng) -> Action {
        match (self, st) {
            (PartnerPolicy::Tabular { n_actions, probs, .. }, EnvState::Bandit { s }) => {
                Action::Discrete(sample_categorical(&probs[s * n_actions..(s + 1) * n_actions], rng))
            }
            (
                PartnerPolicy::Linear {
                    k,
                    max_speed,
                    noise_std,
                },
                EnvState::Particle { .. },
            ) => {
                let raw = Self::linear_mean_raw(k, st.offset());
                let a = if *noise_std > 0.0 {
                    let e0: f64 = StandardNormal.sample(rng);
                    let e1: f64 = StandardNormal.sample(rng);
                    [raw[0] + noise_std * e0, raw[1] + noise_std * e1]
                } else {
                    raw
                };
                Action::Continuous(clamp_norm(a, *max_speed).to_vec())
            }
            _ => panic!("partner policy does not match state {st:?}"),
        }
    }
}

impl Actor for PartnerPolicy {
    fn act(&mut self, _env: &Env, st: &EnvState, rng: &mut ChaCha8Rng) -> Action {
        self.sample(st, rng)
    }
}

pub fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum.
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

/// How an expert reacts to its partner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ExpertPolicy {
    /// Plays the partner's own distribution (bandit matching).
    Copy { partner: PartnerPolicy },
    /// Supplies the remainder of the optimal joint velocity.
    Compensating { partner: PartnerPolicy, max_speed: f64 },
}

impl ExpertPolicy {
    pub fn partner(&self) -> &PartnerPolicy {
        match self {
            ExpertPolicy::Copy { partner } | ExpertPolicy::Compensating { partner, .. } => partner,
        }
    }

    /// Expert velocity for offset `d`: `clamp(clamp(d, 2v) - E[partner])`.
    pub fn velocity(&self, d: [f64; 2]) -> Option<[f64; 2]> {
        match self {
            ExpertPolicy::Compensating { partner, max_speed } => {
                let total = clamp_norm(d, 2.0 * max_speed);
                let p = partner.expected_velocity(d)?;
                Some(clamp_norm([total[0] - p[0], total[1] - p[1]], *max_speed))
            }
            ExpertPolicy::Copy { .. } => None,
        }
    }

    pub fn sample(&self, st: &EnvState, rng: &mut impl Rng) -> Action {
        match self {
            ExpertPolicy::Copy { partner } => partner.sample(st, rng),
            ExpertPolicy::Compensating { .. } => {
                Action::Continuous(self.velocity(st.offset()).expect("linear partner").to_vec())
            }
        }
    }
}

impl Actor for ExpertPolicy {
    fn act(&mut self, _env: &Env, st: &EnvState, rng: &mut ChaCha8Rng) -> Action {
        self.sample(st, rng)
    }
}

pub fn gen_expert(partner: &PartnerPolicy, env: &Env) -> ExpertPolicy {
    match env {
        Env::Bandit(_) => ExpertPolicy::Copy {
            partner: partner.clone(),
        },
        Env::Particle(p) => ExpertPolicy::Compensating {
            partner: partner.clone(),
            max_speed: p.max_speed,
        },
    }
}

/// Logit penalty carried by the shared component on non-scoring actions.
const PLANTED_MASK_PENALTY: f64 = 16.0;
/// Scale of the partner-varying planted components.
const PLANTED_SPREAD: f64 = 8.0;
const PLANTED_NONSCORING_MAX: f64 = 0.01;

/// Per-partner parameters of a planted low-rank bandit population, before
/// whitening.
fn planted_partner_row(rank: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "planted/partner"));
    let mut row = vec![rng.random_range(0.5..1.5)];
    for _ in 1..rank {
        row.push(StandardNormal.sample(&mut rng));
    }
    row
}

/// Makes columns `1..` orthogonal to column 0 and rescales them so their
/// second-moment matrix is `PLANTED_SPREAD² · I`. With fewer rows than columns the rows are only
/// scaled.
fn whiten_planted(rows: &mut [Vec<f64>]) {
    let k = rows.first().map_or(0, |r| r.len().saturating_sub(1));
    let n = rows.len();
    if k == 0 {
        return;
    }
    if n <= k {
        for r in rows.iter_mut() {
            r[1..].iter_mut().for_each(|v| *v *= PLANTED_SPREAD);
        }
        return;
    }
    let cc: f64 = rows.iter().map(|r| r[0] * r[0]).sum();
    for j in 1..=k {
        let proj = rows.iter().map(|r| r[0] * r[j]).sum::<f64>() / cc;
        rows.iter_mut().for_each(|r| r[j] -= proj * r[0]);
    }
    let mut g = vec![0.0; k * k];
    for r in rows.iter() {
        for i in 0..k {
            for j in 0..k {
                g[i * k + j] += r[1 + i] * r[1 + j] / n as f64;
            }
        }
    }
    // Cholesky g = L Lᵀ; each row y becomes L⁻¹ y.
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut acc = g[i * k + j];
            for p in 0..j {
                acc -= l[i * k + p] * l[j * k + p];
            }
            l[i * k + j] = if i == j {
                acc.max(1e-300).sqrt()
            } else {
                acc / l[j * k + j]
            };
        }
    }
    for r in rows.iter_mut() {
        let y = &mut r[1..];
        for i in 0..k {
            let mut acc = y[i];
            for p in 0..i {
                acc -= l[i * k + p] * y[p];
            }
            y[i] = acc / l[i * k + i];
        }
        y.iter_mut().for_each(|v| *v *= PLANTED_SPREAD);
    }
}

/// Shared state core of a planted population, `rank × n_states × n_actions`.
/// Component 0 carries the task: random preferences among scoring actions
/// and a large penalty on the rest.
fn planted_state_core(env: &BanditEnv, rank: usize, population_seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(population_seed, "planted/state"));
    let (ns, na) = (env.n_states(), env.n_actions());
    let mut core = vec![0.0; rank * ns * na];
    for k in 0..rank {
        for s in 0..ns {
            for a in 0..na {
                let z: f64 = StandardNormal.sample(&mut rng);
                core[(k * ns + s) * na + a] = if k == 0 && !env.scores(s, a) {
                    -PLANTED_MASK_PENALTY
                } else {
                    z
                };
            }
        }
    }
    core
}

/// Softmax of the planted logits with the non-scoring mass capped at 1%.
fn planted_policy(env: &BanditEnv, core: &[f64], row: &[f64]) -> PartnerPolicy {
    let (ns, na) = (env.n_states(), env.n_actions());
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let logits: Vec<f64> = (0..na)
            .map(|a| {
                row.iter()
                    .enumerate()
                    .map(|(k, w)| w * core[(k * ns + s) * na + a])
                    .sum()
            })
            .collect();
        let (sc, nsc): (Vec<usize>, Vec<usize>) = (0..na).partition(|&a| env.scores(s, a));
        let group = |idx: &[usize]| -> (f64, Vec<f64>) {
            let z: Vec<f64> = idx.iter().map(|&a| logits[a]).collect();
            (log_sum_exp(&z), softmax(&z))
        };
        let (lse_sc, p_sc) = group(&sc);
        let mut p = vec![0.0; na];
        if nsc.is_empty() {
            for (&a, v) in sc.iter().zip(&p_sc) {
                p[a] = *v;
            }
        } else {
            let (lse_ns, p_ns) = group(&nsc);
            let ns_mass = (1.0 / (1.0 + (lse_sc - lse_ns).exp())).min(PLANTED_NONSCORING_MAX);
            for (&a, v) in sc.iter().zip(&p_sc) {
                p[a] = (1.0 - ns_mass) * v;
            }
            for (&a, v) in nsc.iter().zip(&p_ns) {
                p[a] = ns_mass * v;
            }
        }
        probs.extend(p);
    }
    PartnerPolicy::Tabular {
        n_states: ns,
        n_actions: na,
        probs,
    }
}

/// REINFORCE self-play for a pair of tabular bandit agents; returns both.
pub fn selfplay_bandit(env: &BanditEnv, seed: u64, iters: usize) -> (PartnerPolicy, PartnerPolicy) {
    let (ns, na) = (env.n_states(), env.n_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "selfplay/bandit"));
    let mut theta = [vec![0.0; ns * na], vec![0.0; ns * na]];
    for t in theta.iter_mut() {
        for v in t.iter_mut() {
            *v = 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    let lr = 0.5;
    let mut baseline = 0.0;
    for _ in 0..iters {
        let s = rng.random_range(0..ns);
        let p0 = softmax(&theta[0][s * na..(s + 1) * na]);
        let p1 = softmax(&theta[1][s * na..(s + 1) * na]);
        let a0 = sample_categorical(&p0, &mut rng);
        let a1 = sample_categorical(&p1, &mut rng);
        let r = env.reward(s, a0, a1).expect("in range");
        let adv = r - baseline;
        baseline += 0.01 * (r - baseline);
        for (agent, (p, a)) in [(p0, a0), (p1, a1)].into_iter().enumerate() {
            for b in 0..na {
                let ind = if b == a { 1.0 } else { 0.0 };
                theta[agent][s * na + b] += lr * adv * (ind - p[b]);
            }
        }
    }
    let table = |t: &[f64]| PartnerPolicy::Tabular {
        n_states: ns,
        n_actions: na,
        probs: (0..ns).flat_map(|s| softmax(&t[s * na..(s + 1) * na])).collect(),
    };
    (table(&theta[0]), table(&theta[1]))
}

/// Exploration noise of self-play particle agents.
pub const SELFPLAY_NOISE: f64 = 0.02;

/// REINFORCE self-play for two linear-Gaussian particle agents.
pub fn selfplay_particle(env: &ParticleEnv, seed: u64, episodes: usize) -> (PartnerPolicy, PartnerPolicy) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "selfplay/particle"));
    let mut ks = [[0.0f64; 4]; 2];
    for k in ks.iter_mut() {
        for v in k.iter_mut() {
            *v = 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    let sigma = SELFPLAY_NOISE;
    let lr = 1e-3;
    let mut sim = env.clone();
    let mut baseline = 0.0;
    for _ in 0..episodes {
        sim.reset_random(&mut rng);
        let mut grads = [[0.0f64; 4]; 2];
        let mut logs: Vec<([f64; 2], [[f64; 2]; 2])> = Vec::new();
        let mut rewards = Vec::new();
        while !sim.done() {
            let d = sim.offset();
            let mut eps = [[0.0; 2]; 2];
            let mut acts = [[0.0; 2]; 2];
            for i in 0..2 {
                let raw = PartnerPolicy::linear_mean_raw(&ks[i], d);
                for j in 0..2 {
                    eps[i][j] = StandardNormal.sample(&mut rng);
                    acts[i][j] = raw[j] + sigma * eps[i][j];
                }
            }
            rewards.push(sim.step(acts[0], acts[1]));
            logs.push((d, eps));
        }
        let ret: f64 = rewards.iter().sum();
        let adv = ret - baseline;
        baseline += 0.05 * (ret - baseline);
        for (d, eps) in &logs {
            for i in 0..2 {
                // ∂ log N(a; K d, σ²) / ∂K = (a - K d) dᵀ / σ² = ε dᵀ / σ
                grads[i][0] += eps[i][0] * d[0] / sigma;
                grads[i][1] += eps[i][0] * d[1] / sigma;
                grads[i][2] += eps[i][1] * d[0] / sigma;
                grads[i][3] += eps[i][1] * d[1] / sigma;
            }
        }
        for i in 0..2 {
            for j in 0..4 {
                ks[i][j] += lr * adv * grads[i][j] / logs.len() as f64;
            }
        }
    }
    let make = |k: [f64; 4]| PartnerPolicy::Linear {
        k,
        max_speed: env.max_speed,
        noise_std: sigma,
    };
    (make(ks[0]), make(ks[1]))
}

/// Generates one partner per spec. Planted specs share a state core drawn
/// from `population_seed`, and their partner-varying weights are whitened
/// across the population.
pub fn gen_partners(env: &Env, specs: &[PartnerSpec], population_seed: u64) -> Result<Vec<PartnerPolicy>, EnvError> {
    let planted: Vec<&PartnerSpec> = specs.iter().filter(|s| s.mode == GenMode::Planted).collect();
    let mut planted_rows = Vec::new();
    let mut planted_core = Vec::new();
    if let (Env::Bandit(b), Some(first)) = (env, planted.first()) {
        let rank = first.rank.unwrap_or(4);
        if rank == 0 {
            return Err(EnvError::Validation("planted rank must be positive".into()));
        }
        if let Some(bad) = planted.iter().find(|s| s.rank.unwrap_or(4) != rank) {
            return Err(EnvError::Validation(format!(
                "planted specs mix ranks {rank} and {}",
                bad.rank.unwrap_or(4)
            )));
        }
        planted_rows = planted.iter().map(|s| planted_partner_row(rank, s.seed)).collect();
        whiten_planted(&mut planted_rows);
        planted_core = planted_state_core(b, rank, population_seed);
    }
    let mut next_planted = planted_rows.into_iter();
    specs
        .iter()
        .map(|spec| match (env, spec.mode) {
            (Env::Bandit(b), GenMode::Planted) => {
                let row = next_planted.next().expect("one row per planted spec");
                Ok(planted_policy(b, &planted_core, &row))
            }
            (Env::Bandit(b), GenMode::Selfplay) => Ok(selfplay_bandit(b, spec.seed, 400 * b.n_states()).1),
            (Env::Particle(p), GenMode::Parametric) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "parametric"));
                let gain = spec
                    .gain
                    .unwrap_or_else(|| rng.random_range(PARAMETRIC_GAIN.0..=PARAMETRIC_GAIN.1));
                let angle = spec
                    .angle
                    .unwrap_or_else(|| rng.random_range(-PARAMETRIC_ANGLE..=PARAMETRIC_ANGLE));
                Ok(PartnerPolicy::parametric(gain, angle, p.max_speed))
            }
            (Env::Particle(p), GenMode::Selfplay) => Ok(selfplay_particle(p, spec.seed, 2000).1),
            (env, mode) => Err(EnvError::Unsupported(format!(
                "{mode:?} partners for the {} environment",
                match env {
                    Env::Bandit(_) => "bandit",
                    Env::Particle(_) => "particle",
                }
            ))),
        })
        .collect()
}

/// Range of parametric particle gains.
pub const PARAMETRIC_GAIN: (f64, f64) = (0.3, 3.0);
/// Parametric particle rotations are drawn from ±this many radians.
pub const PARAMETRIC_ANGLE: f64 = 0.25;

/// Stacks tabular partners into a `[n_states, n_actions, n_partners]` tensor.
pub fn tabulate(partners: &[PartnerPolicy]) -> Result<PolicyTensor, EnvError> {
    let Some(PartnerPolicy::Tabular {
        n_states, n_actions, ..
    }) = partners.first()
    else {
        return Err(EnvError::Unsupported(
            "only tabular partners form a policy tensor".into(),
        ));
    };
    let (ns, na) = (*n_states, *n_actions);
    for p in partners {
        match p {
            PartnerPolicy::Tabular {
                n_states, n_actions, ..
            } if *n_states == ns && *n_actions == na => {}
            _ => {
                return Err(EnvError::Unsupported(
                    "partners are not tabular over one state/action space".into(),
                ))
            }
        }
    }
    Ok(PolicyTensor::from_fn(ns, na, partners.len(), |y, s| {
        partners[y].dist(s).expect("tabular").to_vec()
    })?)
}

/// One recorded step. `s` is the ego-role encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub s: Vec<f64>,
    pub ae: Action,
    pub ap: Action,
}

impl Step {
    /// The state as seen by `role` (role flag replaced).
    pub fn state(&self, role: Role) -> Vec<f64> {
        let mut v = self.s.clone();
        if let Some(last) = v.last_mut() {
            *last = role.flag();
        }
        v
    }

    pub fn action(&self, role: Role) -> &Action {
        match role {
            Role::Ego => &self.ae,
            Role::Partner => &self.ap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrajectory {
    pub partner_id: usize,
    pub steps: Vec<Step>,
}

/// Joint trajectories from one or more partners.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartnerDataset {
    pub trajectories: Vec<JointTrajectory>,
}

impl PartnerDataset {
    /// Distinct partner ids in first-seen order.
    pub fn partner_ids(&self) -> Vec<usize> {
        let mut ids = Vec::new();
        for t in &self.trajectories {
            if !ids.contains(&t.partner_id) {
                ids.push(t.partner_id);
            }
        }
        ids
    }

    /// All steps for one partner, in file order.
    pub fn steps_for(&self, partner_id: usize) -> Vec<&Step> {
        self.trajectories
            .iter()
            .filter(|t| t.partner_id == partner_id)
            .flat_map(|t| t.steps.iter())
            .collect()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.trajectories
            .iter()
            .flat_map(|t| t.steps.first())
            .map(|s| s.s.len())
            .next()
    }

    /// Keeps only the given partner's trajectories.
    pub fn only(&self, partner_id: usize) -> PartnerDataset {
        PartnerDataset {
            trajectories: self
                .trajectories
                .iter()
                .filter(|t| t.partner_id == partner_id)
                .cloned()
                .collect(),
        }
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), EnvError> {
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t).map_err(|e| EnvError::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, EnvError> {
        let mut trajectories = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: JointTrajectory =
                serde_json::from_str(&line).map_err(|source| EnvError::Parse { line: i + 1, source })?;
            trajectories.push(t);
        }
        let ds = PartnerDataset { trajectories };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks the state dimension is constant.
    pub fn validate(&self) -> Result<(), EnvError> {
        if let Some(d) = self.state_dim() {
            for t in &self.trajectories {
                if let Some(bad) = t.steps.iter().find(|s| s.s.len() != d) {
                    return Err(EnvError::Validation(format!(
                        "partner {} has a {}-dim state, expected {d}",
                        t.partner_id,
                        bad.s.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An expert/partner pair with the id under which its data is recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub partner_id: usize,
    pub partner: PartnerPolicy,
    pub expert: ExpertPolicy,
}

/// Dataset rollout options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutNoise {
    /// Std of Gaussian noise added to the executed (not the recorded) ego
    /// velocity in particle rollouts, so recorded states cover small
    /// deviations around the expert's path.
    pub exec_noise: f64,
}

impl Default for RolloutNoise {
    fn default() -> Self {
        Self { exec_noise: 0.05 }
    }
}

/// Rolls out each pair for `steps_per_pair` steps. Bandit states are drawn
/// uniformly; particle episodes restart from a random start/target every
/// `horizon` steps and each episode is stored as its own trajectory.
pub fn gen_dataset(env: &Env, pairs: &[Pair], steps_per_pair: usize, seed: u64) -> PartnerDataset {
    gen_dataset_with(env, pairs, steps_per_pair, seed, RolloutNoise::default())
}

pub fn gen_dataset_with(
    env: &Env,
    pairs: &[Pair],
    steps_per_pair: usize,
    seed: u64,
    noise: RolloutNoise,
) -> PartnerDataset {
    let mut trajectories = Vec::new();
    for pair in pairs {
        let mut rng = stream(seed, "dataset", pair.partner_id as u64);
        match env {
            Env::Bandit(b) => {
                let steps = (0..steps_per_pair)
                    .map(|_| {
                        let s = rng.random_range(0..b.n_states());
                        let st = EnvState::Bandit { s };
                        let ap = pair.partner.sample(&st, &mut rng);
                        let ae = pair.expert.sample(&st, &mut rng);
                        Step {
                            s: b.encode(s, Role::Ego),
                            ae,
                            ap,
                        }
                    })
                    .collect();
                trajectories.push(JointTrajectory {
                    partner_id: pair.partner_id,
                    steps,
                });
            }
            Env::Particle(p) => {
                let mut sim = p.clone();
                let mut remaining = steps_per_pair;
                if remaining == 0 {
                    trajectories.push(JointTrajectory {
                        partner_id: pair.partner_id,
                        steps: Vec::new(),
                    });
                }
                while remaining > 0 {
                    sim.reset_random(&mut rng);
                    let mut steps = Vec::new();
                    while !sim.done() && remaining > 0 {
                        let st = EnvState::Particle {
                            pos: sim.pos(),
                            target: sim.target(),
                        };
                        let ap = pair.partner.sample(&st, &mut rng);
                        let ae = pair.expert.sample(&st, &mut rng);
                        let s = sim.encode(Role::Ego);
                        let mut exec = as2(&ae);
                        if noise.exec_noise > 0.0 {
                            for v in exec.iter_mut() {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                *v += noise.exec_noise * z;
                            }
                        }
                        sim.step(exec, as2(&ap));
                        steps.push(Step { s, ae, ap });
                        remaining -= 1;
                    }
                    trajectories.push(JointTrajectory {
                        partner_id: pair.partner_id,
                        steps,
                    });
                }
            }
        }
    }
    PartnerDataset { trajectories }
}

pub(crate) fn as2(a: &Action) -> [f64; 2] {
    let v = a.continuous().expect("continuous action");
    [v[0], v[1]]
}

/// Seeded shuffle helper shared by trainers.
pub fn shuffled<T: Clone>(items: &[T], rng: &mut impl Rng) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bandit(seed: u64, ns: usize, na: usize) -> BanditEnv {
        bandit_make(seed, ns, na, 0.3, StateEncoding::default()).unwrap()
    }

    #[test]
    fn scoring_fraction_near_p() {
        let env = bandit(1, 1000, 10);
        let f = env.scoring_fraction();
        assert!((0.28..=0.32).contains(&f), "{f}");
        for s in 0..1000 {
            assert!((0..10).any(|a| env.scores(s, a)));
        }
    }

    #[test]
    fn single_action_always_scores() {
        let env = bandit_make(3, 50, 1, 0.01, StateEncoding::OneHot).unwrap();
        assert!((0..50).all(|s| env.scores(s, 0)));
    }

    #[test]
    fn invalid_p_rejected() {
        for p in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(bandit_make(0, 10, 10, p, StateEncoding::OneHot).is_err());
        }
    }

    #[test]
    fn same_seed_same_env() {
        assert_eq!(bandit(9, 100, 10), bandit(9, 100, 10));
        assert_ne!(bandit(9, 100, 10), bandit(10, 100, 10));
    }

    #[test]
    fn reward_rules() {
        let env = bandit(2, 20, 10);
        for s in 0..20 {
            for a in 0..10 {
                for b in 0..10 {
                    let r = env.reward(s, a, b).unwrap();
                    assert_eq!(r, env.reward(s, b, a).unwrap());
                    let expect = if a == b && env.scores(s, a) { 1.0 } else { 0.0 };
                    assert_eq!(r, expect);
                }
            }
        }
        assert!(env.reward(20, 0, 0).is_err());
        assert!(env.reward(0, 10, 0).is_err());
    }

    #[test]
    fn role_flag_is_only_difference() {
        let env = bandit(4, 30, 10);
        let e = env.encode(7, Role::Ego);
        let p = env.encode(7, Role::Partner);
        assert_eq!(e.len(), 33);
        assert_eq!(e[..32], p[..32]);
        assert_eq!((e[32], p[32]), (0.0, 1.0));
    }

    #[test]
    fn particle_moves_by_sum_of_clamped_actions() {
        let mut env = ParticleEnv::new(50, 0.1);
        env.reset([0.0, 0.0], [1.0, 1.0]);
        let r = env.step([0.03, 0.04], [1.0, 0.0]);
        let pos = env.pos();
        assert!((pos[0] - 0.13).abs() < 1e-15 && (pos[1] - 0.04).abs() < 1e-15);
        assert!((r + ((0.87f64).powi(2) + 0.96f64.powi(2)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn parametric_half_gain_no_rotation() {
        let p = PartnerPolicy::parametric(0.5, 0.0, 0.1);
        let v = p.velocity([0.08, -0.06]).unwrap();
        assert_eq!(v, [0.04, -0.03]);
    }

    #[test]
    fn full_gain_partner_leaves_expert_idle() {
        let p = PartnerPolicy::parametric(1.0, 0.0, 0.1);
        let env = Env::Particle(ParticleEnv::new(50, 0.1));
        let e = gen_expert(&p, &env);
        let v = e.velocity([0.05, 0.03]).unwrap();
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
    }

    #[test]
    fn bandit_expert_copies_partner() {
        let env = Env::Bandit(bandit(5, 40, 10));
        let specs: Vec<_> = (0..2)
            .map(|i| PartnerSpec {
                partner_id: i,
                mode: GenMode::Planted,
                seed: i as u64,
                rank: Some(2),
                gain: None,
                angle: None,
            })
            .collect();
        let partners = gen_partners(&env, &specs, 11).unwrap();
        for p in &partners {
            let e = gen_expert(p, &env);
            for s in 0..40 {
                assert_eq!(e.partner().dist(s), p.dist(s));
            }
        }
    }

    #[test]
    fn planted_mass_on_scoring_actions() {
        let b = bandit(6, 200, 10);
        let env = Env::Bandit(b.clone());
        let specs: Vec<_> = (0..8)
            .map(|i| PartnerSpec {
                partner_id: i,
                mode: GenMode::Planted,
                seed: 100 + i as u64,
                rank: Some(4),
                gain: None,
                angle: None,
            })
            .collect();
        for p in gen_partners(&env, &specs, 1).unwrap() {
            for s in 0..200 {
                let d = p.dist(s).unwrap();
                let mass: f64 = (0..10).filter(|&a| b.scores(s, a)).map(|a| d[a]).sum();
                assert!(mass >= 0.99 - 1e-12, "state {s}: {mass}");
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mixed_mode_rejected() {
        let env = Env::Particle(ParticleEnv::new(50, 0.1));
        let spec = PartnerSpec {
            partner_id: 0,
            mode: GenMode::Planted,
            seed: 0,
            rank: Some(2),
            gain: None,
            angle: None,
        };
        assert!(matches!(gen_partners(&env, &[spec], 0), Err(EnvError::Unsupported(_))));
    }

    #[test]
    fn empty_rollout_is_valid() {
        let env = Env::Bandit(bandit(7, 10, 4));
        let p = PartnerPolicy::Tabular {
            n_states: 10,
            n_actions: 4,
            probs: vec![0.25; 40],
        };
        let pair = Pair {
            partner_id: 0,
            expert: gen_expert(&p, &env),
            partner: p,
        };
        let ds = gen_dataset(&env, &[pair], 0, 1);
        assert_eq!(ds.num_steps(), 0);
        assert_eq!(ds.partner_ids(), vec![0]);
        ds.validate().unwrap();
    }

    #[test]
    fn categorical_sampler_respects_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
    }

    #[test]
    fn whitened_rows_are_isotropic_and_orthogonal_to_task() {
        let mut rows: Vec<_> = (0..16).map(|i| planted_partner_row(4, i)).collect();
        whiten_planted(&mut rows);
        for i in 0..4 {
            for j in 0..4 {
                let m: f64 = rows.iter().map(|r| r[i] * r[j]).sum::<f64>() / 16.0;
                if i == 0 && j == 0 {
                    continue;
                }
                let expect = if i == j { PLANTED_SPREAD * PLANTED_SPREAD } else { 0.0 };
                assert!((m - expect).abs() < 1e-9, "({i},{j}) = {m}");
            }
        }
    }

    #[test]
    fn selfplay_bandit_pair_matches() {
        let b = bandit(8, 50, 10);
        let (p0, p1) = selfplay_bandit(&b, 3, 400 * 50);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10_000;
        let mut total = 0.0;
        for _ in 0..n {
            let st = EnvState::Bandit {
                s: rng.random_range(0..50),
            };
            let (a0, a1) = (p0.sample(&st, &mut rng), p1.sample(&st, &mut rng));
            let EnvState::Bandit { s } = st else { unreachable!() };
            total += b.reward(s, a0.discrete().unwrap(), a1.discrete().unwrap()).unwrap();
        }
        assert!(total / n as f64 >= 0.9, "{}", total / n as f64);
    }

    fn pair_return(partner: &PartnerPolicy, start: [f64; 2], target: [f64; 2]) -> (f64, f64) {
        let mut sim = ParticleEnv::new(50, 0.1);
        let expert = gen_expert(partner, &Env::Particle(sim.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        sim.reset(start, target);
        let mut ret = 0.0;
        while !sim.done() {
            let st = EnvState::Particle {
                pos: sim.pos(),
                target: sim.target(),
            };
            let ap = partner.sample(&st, &mut rng);
            let ae = expert.sample(&st, &mut rng);
            ret += sim.step(as2(&ae), as2(&ap));
        }
        (ret, sim.optimal_return(start, target))
    }

    #[test]
    fn reference_pairs_near_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let env = Env::Particle(ParticleEnv::new(50, 0.1));
        let specs: Vec<_> = (0..20)
            .map(|i| PartnerSpec {
                partner_id: i,
                mode: GenMode::Parametric,
                seed: i as u64,
                rank: None,
                gain: None,
                angle: None,
            })
            .collect();
        let (mut got, mut best) = (0.0, 0.0);
        for p in gen_partners(&env, &specs, 0).unwrap() {
            for _ in 0..20 {
                let mut u = || rng.random_range(-1.0..=1.0);
                let (r, o) = pair_return(&p, [u(), u()], [u(), u()]);
                assert!(r <= o + 1e-9);
                got += r;
                best += o;
            }
        }
        assert!(got >= 1.05 * best, "{got} vs optimum {best}");
    }

    #[test]
    fn optimal_return_closed_form() {
        let env = ParticleEnv::new(3, 0.1);
        // distance 0.5 closed at 0.2 per step: 0.3, 0.1, 0.0
        let o = env.optimal_return([0.0, 0.0], [0.3, 0.4]);
        assert!((o + 0.4).abs() < 1e-12, "{o}");
    }
}

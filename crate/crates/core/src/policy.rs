//! Conditional low-rank policy and the baseline policy families.
//!
//! Every policy splits its parameters into a shared part and per-partner
//! slots. Training slots are indexed by partner; test slots are appended by
//! [`Policy::new_test_slot`] and are the only parameters adaptation touches.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Action, ActionSpace};
use crate::la::{log_sum_exp, squash_log_std, Dense, LaError, Matrix, Mlp, ParamId, Parameter, Tape, Var};
use crate::seed::derive_seed;
use crate::tt::softmax;

/// Header line of a serialized policy.
pub const CHECKPOINT_MAGIC: &str = "CMAIL1";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("unknown partner slot {0}")]
    UnknownSlot(usize),
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    La(#[from] LaError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lrp,
    Mt,
    Lt,
    Mod,
    Maml,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Lrp, Method::Mt, Method::Lt, Method::Mod, Method::Maml];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lrp => "lrp",
            Method::Mt => "mt",
            Method::Lt => "lt",
            Method::Mod => "mod",
            Method::Maml => "maml",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            PolicyError::Validation(format!("unknown method {s:?}; expected one of lrp, mt, lt, mod, maml"))
        })
    }
}

/// Sizes shared by every policy family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    /// State width including the role flag.
    pub state_dim: usize,
    pub action_space: ActionSpace,
    /// Number of training partners `m`.
    pub n_partners: usize,
    /// Tensor-train rank `r` (also the `lt` embedding width).
    pub rank: usize,
    pub hidden: Vec<usize>,
}

impl PolicyDims {
    pub fn new(state_dim: usize, action_space: ActionSpace, n_partners: usize, rank: usize) -> Self {
        Self {
            state_dim,
            action_space,
            n_partners,
            rank,
            hidden: vec![64, 64],
        }
    }

    pub fn head_width(&self) -> usize {
        self.action_space.head_width()
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.state_dim == 0 || self.n_partners == 0 || self.rank == 0 || self.head_width() == 0 {
            return Err(PolicyError::Validation(format!(
                "policy dims must be positive: {self:?}"
            )));
        }
        if self.hidden.contains(&0) {
            return Err(PolicyError::Validation("hidden layer of width 0".into()));
        }
        Ok(())
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(&self.hidden);
        s.push(output);
        s
    }
}

/// Per-partner parameters.
#[derive(Debug, Clone)]
pub enum Slot {
    /// Partner ID vector `1×m` (lrp, mt) or learned embedding `1×e` (lt).
    Id(Parameter),
    /// lrp slot with its own copy of the strategy weights.
    IdWithStrategy { id: Parameter, strategy: Parameter },
    /// mod output head.
    Head(Dense),
    /// maml adapted network.
    Net(Mlp),
}

impl Slot {
    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            Slot::Id(p) => vec![p],
            Slot::IdWithStrategy { id, strategy } => vec![id, strategy],
            Slot::Head(d) => d.params(),
            Slot::Net(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Slot::Id(p) => vec![p],
            Slot::IdWithStrategy { id, strategy } => vec![id, strategy],
            Slot::Head(d) => d.params_mut(),
            Slot::Net(n) => n.params_mut(),
        }
    }

    /// ID or embedding vector, if the slot has one.
    pub fn id_vector(&self) -> Option<&Matrix> {
        match self {
            Slot::Id(p) | Slot::IdWithStrategy { id: p, .. } => Some(&p.value),
            _ => None,
        }
    }
}

/// Output of a policy at one state.
#[derive(Debug, Clone, PartialEq)]
pub enum Logits {
    Discrete(Vec<f64>),
    /// Mean and bounded log standard deviation.
    Gaussian {
        mean: Vec<f64>,
        log_std: Vec<f64>,
    },
}

/// Targets for a batched negative log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionBatch {
    Labels(Vec<usize>),
    Continuous(Matrix),
}

impl ActionBatch {
    pub fn from_actions<'a>(
        space: ActionSpace,
        actions: impl IntoIterator<Item = &'a Action>,
    ) -> Result<Self, PolicyError> {
        match space {
            ActionSpace::Discrete(n) => actions
                .into_iter()
                .map(|a| match a {
                    Action::Discrete(i) if *i < n => Ok(*i),
                    _ => Err(PolicyError::Validation(format!("action {a:?} outside Discrete({n})"))),
                })
                .collect::<Result<_, _>>()
                .map(ActionBatch::Labels),
            ActionSpace::Continuous(d) => {
                let rows = actions
                    .into_iter()
                    .map(|a| match a {
                        Action::Continuous(v) if v.len() == d => Ok(v.clone()),
                        _ => Err(PolicyError::Validation(format!("action {a:?} outside Continuous({d})"))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if rows.is_empty() {
                    return Ok(ActionBatch::Continuous(Matrix::zeros(0, d)));
                }
                Ok(ActionBatch::Continuous(Matrix::from_rows(&rows)?))
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ActionBatch::Labels(l) => l.len(),
            ActionBatch::Continuous(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean negative log-likelihood of `actions` under head outputs `out`.
pub fn nll_loss(tape: &mut Tape, out: Var, actions: &ActionBatch) -> Result<Var, LaError> {
    match actions {
        ActionBatch::Labels(l) => tape.cross_entropy_labels(out, l),
        ActionBatch::Continuous(m) => tape.gaussian_nll(out, m.clone()),
    }
}

/// How to turn a distribution into an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sample,
    /// Argmax for discrete actions, the mean for continuous ones.
    Mode,
}

#[derive(Debug, Clone)]
pub struct Policy {
    method: Method,
    dims: PolicyDims,
    /// lrp: state core; mod: trunk (tanh applied to its output); others: the
    /// whole network.
    net: Mlp,
    /// lrp strategy core, `m × r`, no bias.
    strategy: Option<Parameter>,
    slots: Vec<Slot>,
    n_train_slots: usize,
}

fn fresh_dense(d: &Dense) -> Dense {
    Dense {
        weight: Parameter::new(d.weight.value.clone()),
        bias: d.bias.as_ref().map(|b| Parameter::new(b.value.clone())),
    }
}

fn fresh_mlp(n: &Mlp) -> Mlp {
    Mlp::from_layers(n.layers().iter().map(fresh_dense).collect()).expect("chained layers")
}

fn one_hot(m: usize, i: usize) -> Matrix {
    let mut v = Matrix::zeros(1, m);
    v.set(0, i, 1.0);
    v
}

fn random_id(width: usize, m: usize, rng: &mut impl Rng) -> Matrix {
    let normal = Normal::new(0.0, (1.0 / m as f64).sqrt()).expect("positive std");
    Matrix::row_vector((0..width).map(|_| normal.sample(rng)).collect())
}

impl Policy {
    /// Conditional low-rank policy with one-hot training IDs.
    pub fn conditional(dims: PolicyDims, seed: u64) -> Result<Self, PolicyError> {
        Self::build(Method::Lrp, dims, seed)
    }

    /// Builds any policy family with fresh seeded weights.
    pub fn build(method: Method, dims: PolicyDims, seed: u64) -> Result<Self, PolicyError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, method.name()));
        let (m, r, h, ds) = (dims.n_partners, dims.rank, dims.head_width(), dims.state_dim);
        let mut strategy = None;
        let (net, slots) = match method {
            Method::Lrp => {
                strategy = Some(Parameter::new(crate::la::glorot(m, r, &mut rng)));
                let net = Mlp::new(&dims.sizes(ds, r * h), true, &mut rng);
                let slots = (0..m).map(|i| Slot::Id(Parameter::new(one_hot(m, i)))).collect();
                (net, slots)
            }
            Method::Mt => {
                let net = Mlp::new(&dims.sizes(m + ds, h), true, &mut rng);
                let slots = (0..m).map(|i| Slot::Id(Parameter::new(one_hot(m, i)))).collect();
                (net, slots)
            }
            Method::Lt => {
                let net = Mlp::new(&dims.sizes(r + ds, h), true, &mut rng);
                let slots = (0..m)
                    .map(|_| Slot::Id(Parameter::new(random_id(r, m, &mut rng))))
                    .collect();
                (net, slots)
            }
            Method::Mod => {
                let mut sizes = vec![ds];
                sizes.extend(&dims.hidden);
                let trunk_out = *sizes.last().expect("nonempty");
                if sizes.len() < 2 {
                    return Err(PolicyError::Validation("mod needs at least one hidden layer".into()));
                }
                let net = Mlp::new(&sizes, true, &mut rng);
                let slots = (0..m)
                    .map(|_| Slot::Head(Dense::new(trunk_out, h, true, &mut rng)))
                    .collect();
                (net, slots)
            }
            Method::Maml => (Mlp::new(&dims.sizes(ds, h), true, &mut rng), Vec::new()),
        };
        let n_train_slots = slots.len();
        Ok(Self {
            method,
            dims,
            net,
            strategy,
            slots,
            n_train_slots,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn strategy(&self) -> Option<&Parameter> {
        self.strategy.as_ref()
    }

    pub fn strategy_mut(&mut self) -> Option<&mut Parameter> {
        self.strategy.as_mut()
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn n_train_slots(&self) -> usize {
        self.n_train_slots
    }

    pub fn slot(&self, slot: usize) -> Result<&Slot, PolicyError> {
        self.slots.get(slot).ok_or(PolicyError::UnknownSlot(slot))
    }

    pub fn slot_mut(&mut self, slot: usize) -> Result<&mut Slot, PolicyError> {
        self.slots.get_mut(slot).ok_or(PolicyError::UnknownSlot(slot))
    }

    /// Shared (partner-independent) parameters.
    pub fn shared_params(&self) -> Vec<&Parameter> {
        let mut v = self.net.params();
        v.extend(self.strategy.as_ref());
        v
    }

    /// Parameters updated by training: shared weights plus the slots that
    /// are learned (`mt` keeps its one-hot IDs fixed).
    pub fn train_params_mut(&mut self) -> Vec<&mut Parameter> {
        let n_train = self.n_train_slots;
        let learn_slots = self.method != Method::Mt;
        let mut v = self.net.params_mut();
        v.extend(self.strategy.as_mut());
        if learn_slots {
            for s in self.slots[..n_train].iter_mut() {
                v.extend(s.params_mut());
            }
        }
        v
    }

    /// Training parameters touched by a batch of one partner slot.
    pub fn batch_params_mut(&mut self, slot: Option<usize>) -> Vec<&mut Parameter> {
        let learn_slot = self.method != Method::Mt;
        let mut v = self.net.params_mut();
        v.extend(self.strategy.as_mut());
        if let Some(s) = slot.filter(|&s| learn_slot && s < self.n_train_slots) {
            v.extend(self.slots[s].params_mut());
        }
        v
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.net.params_mut();
        v.extend(self.strategy.as_mut());
        for s in self.slots.iter_mut() {
            v.extend(s.params_mut());
        }
        v
    }

    /// Bytes of the state-side network (lrp state core, or the shared
    /// network of a baseline).
    pub fn state_core_bytes(&self) -> Vec<u8> {
        self.net.params().iter().flat_map(|p| p.value_bytes()).collect()
    }

    /// Bytes of every parameter outside the test slots.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        let mut out = self.state_core_bytes();
        if let Some(s) = &self.strategy {
            out.extend(s.value_bytes());
        }
        for s in &self.slots[..self.n_train_slots] {
            for p in s.params() {
                out.extend(p.value_bytes());
            }
        }
        out
    }

    /// Appends a fresh test slot and returns its index.
    pub fn new_test_slot(&mut self, seed: u64) -> usize {
        self.new_test_slot_with(seed, false)
    }

    /// As [`Policy::new_test_slot`]; with `adapt_g1` an lrp slot also owns a
    /// copy of the strategy weights so they can be fine-tuned.
    pub fn new_test_slot_with(&mut self, seed: u64, adapt_g1: bool) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "test-slot"));
        let m = self.dims.n_partners;
        let slot = match self.method {
            Method::Lrp => {
                let id = Parameter::new(random_id(m, m, &mut rng));
                if adapt_g1 {
                    let w = self.strategy.as_ref().expect("lrp strategy");
                    Slot::IdWithStrategy {
                        id,
                        strategy: Parameter::new(w.value.clone()),
                    }
                } else {
                    Slot::Id(id)
                }
            }
            Method::Mt => Slot::Id(Parameter::new(random_id(m, m, &mut rng))),
            Method::Lt => Slot::Id(Parameter::new(random_id(self.dims.rank, m, &mut rng))),
            Method::Mod => Slot::Head(self.mean_head()),
            Method::Maml => Slot::Net(fresh_mlp(&self.net)),
        };
        self.slots.push(slot);
        self.slots.len() - 1
    }

    /// Average of the training heads.
    fn mean_head(&self) -> Dense {
        let heads: Vec<&Dense> = self.slots[..self.n_train_slots]
            .iter()
            .filter_map(|s| match s {
                Slot::Head(d) => Some(d),
                _ => None,
            })
            .collect();
        let n = heads.len() as f64;
        let mut w = Matrix::zeros(heads[0].in_dim(), heads[0].out_dim());
        let mut b = Matrix::zeros(1, heads[0].out_dim());
        for d in &heads {
            w.add_assign(&d.weight.value).expect("same shape");
            if let Some(bias) = &d.bias {
                b.add_assign(&bias.value).expect("same shape");
            }
        }
        Dense {
            weight: Parameter::new(w.scale(1.0 / n)),
            bias: Some(Parameter::new(b.scale(1.0 / n))),
        }
    }

    /// Removes every test slot.
    pub fn clear_test_slots(&mut self) {
        self.slots.truncate(self.n_train_slots);
    }

    /// Strategy row `φ = y · W` of an lrp slot.
    pub fn phi(&self, slot: usize) -> Result<Matrix, PolicyError> {
        let mut tape = Tape::with_trainable([]);
        let v = self.phi_var(&mut tape, slot)?;
        Ok(tape.value(v).clone())
    }

    fn phi_var(&self, tape: &mut Tape, slot: usize) -> Result<Var, PolicyError> {
        let no_core = || PolicyError::Validation(format!("{} has no strategy core", self.method));
        let (id, w) = match self.slot(slot)? {
            Slot::Id(id) => (id, self.strategy.as_ref().ok_or_else(no_core)?),
            Slot::IdWithStrategy { id, strategy } => (id, strategy),
            _ => return Err(no_core()),
        };
        let y = tape.param(id);
        let wv = tape.param(w);
        Ok(tape.matmul(y, wv)?)
    }

    /// Batched head outputs (`B × head_width`) for `slot` on a tape.
    /// For maml, `slot = None` runs the meta network.
    pub fn forward(&self, tape: &mut Tape, slot: Option<usize>, states: &Matrix) -> Result<Var, PolicyError> {
        if states.cols() != self.dims.state_dim {
            return Err(LaError::Dimension(format!(
                "state width {} but policy expects {}",
                states.cols(),
                self.dims.state_dim
            ))
            .into());
        }
        let batch = states.rows();
        let x = tape.constant(states.clone());
        let h = self.dims.head_width();
        let Some(slot) = slot else {
            if self.method == Method::Maml {
                return Ok(self.net.forward(tape, x)?);
            }
            return Err(PolicyError::Validation(format!("{} needs a partner slot", self.method)));
        };
        match (self.method, self.slot(slot)?) {
            (Method::Lrp, _) => {
                let phi = self.phi_var(tape, slot)?;
                let g = self.net.forward(tape, x)?;
                Ok(tape.low_rank(phi, g, h)?)
            }
            (Method::Mt | Method::Lt, Slot::Id(id)) => {
                let idv = tape.param(id);
                let ids = tape.broadcast_rows(idv, batch)?;
                let input = tape.concat_cols(ids, x)?;
                Ok(self.net.forward(tape, input)?)
            }
            (Method::Mod, Slot::Head(head)) => {
                let t = self.net.forward(tape, x)?;
                let t = tape.tanh(t);
                Ok(head.forward(tape, t)?)
            }
            (Method::Maml, Slot::Net(net)) => Ok(net.forward(tape, x)?),
            (m, s) => Err(PolicyError::Validation(format!("{m} cannot use slot {s:?}"))),
        }
    }

    /// Head outputs without recording gradients.
    pub fn outputs(&self, slot: Option<usize>, states: &Matrix) -> Result<Matrix, PolicyError> {
        let mut tape = Tape::with_trainable([]);
        let v = self.forward(&mut tape, slot, states)?;
        Ok(tape.value(v).clone())
    }

    /// Logits (discrete) or mean / bounded log-std (continuous) at one state.
    pub fn policy_logits(&self, slot: usize, s: &[f64]) -> Result<Logits, PolicyError> {
        let out = self.outputs(Some(slot), &Matrix::row_vector(s.to_vec()))?;
        Ok(self.split(out.row(0)))
    }

    fn split(&self, row: &[f64]) -> Logits {
        match self.dims.action_space {
            ActionSpace::Discrete(_) => Logits::Discrete(row.to_vec()),
            ActionSpace::Continuous(d) => Logits::Gaussian {
                mean: row[..d].to_vec(),
                log_std: row[d..].iter().map(|&v| squash_log_std(v)).collect(),
            },
        }
    }

    /// Action distribution of a discrete policy.
    pub fn action_probs(&self, slot: usize, s: &[f64]) -> Result<Vec<f64>, PolicyError> {
        match self.policy_logits(slot, s)? {
            Logits::Discrete(z) => Ok(softmax(&z)),
            Logits::Gaussian { .. } => Err(PolicyError::Validation(
                "continuous policies have no action probabilities".into(),
            )),
        }
    }

    pub fn act_log_prob(&self, slot: usize, s: &[f64], a: &Action) -> Result<f64, PolicyError> {
        self.dims
            .action_space
            .check(a)
            .map_err(|e| PolicyError::Validation(e.to_string()))?;
        Ok(log_prob(&self.policy_logits(slot, s)?, a))
    }

    /// Mean `-log π(a|s)` over a batch.
    pub fn mean_nll(&self, slot: Option<usize>, states: &Matrix, actions: &ActionBatch) -> Result<f64, PolicyError> {
        let mut tape = Tape::with_trainable([]);
        let out = self.forward(&mut tape, slot, states)?;
        let loss = nll_loss(&mut tape, out, actions)?;
        Ok(tape.scalar(loss))
    }

    pub fn act(&self, slot: usize, s: &[f64], mode: ActMode, rng: &mut impl Rng) -> Result<Action, PolicyError> {
        Ok(choose(&self.policy_logits(slot, s)?, mode, rng))
    }

    pub fn save(&self, mut w: impl Write) -> Result<(), PolicyError> {
        let doc = CheckpointDoc {
            method: self.method,
            dims: self.dims.clone(),
            n_train_slots: self.n_train_slots,
            net: layers_doc(&self.net),
            strategy: self.strategy.as_ref().map(|p| p.value.clone()),
            slots: self.slots.iter().map(SlotDoc::from_slot).collect(),
        };
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        serde_json::to_writer(&mut w, &doc).map_err(|e| PolicyError::Format(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }

    pub fn load(mut r: impl BufRead) -> Result<Self, PolicyError> {
        let mut magic = String::new();
        r.read_line(&mut magic)?;
        if magic.trim_end() != CHECKPOINT_MAGIC {
            return Err(PolicyError::Format(format!(
                "expected header {CHECKPOINT_MAGIC}, found {:?}",
                magic.trim_end()
            )));
        }
        let doc: CheckpointDoc = serde_json::from_reader(r).map_err(|e| PolicyError::Format(e.to_string()))?;
        doc.into_policy()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to memory");
        buf
    }
}

/// `log π(a)` under an already-evaluated distribution.
pub fn log_prob(logits: &Logits, a: &Action) -> f64 {
    match (logits, a) {
        (Logits::Discrete(z), Action::Discrete(i)) => z[*i] - log_sum_exp(z),
        (Logits::Gaussian { mean, log_std }, Action::Continuous(v)) => -crate::la::gaussian_row_nll(mean, log_std, v),
        _ => panic!("action {a:?} does not match the policy output"),
    }
}

pub fn choose(logits: &Logits, mode: ActMode, rng: &mut impl Rng) -> Action {
    match (logits, mode) {
        (Logits::Discrete(z), ActMode::Mode) => {
            let mut best = 0;
            for (i, &v) in z.iter().enumerate() {
                if v > z[best] {
                    best = i;
                }
            }
            Action::Discrete(best)
        }
        (Logits::Discrete(z), ActMode::Sample) => Action::Discrete(crate::envs::sample_categorical(&softmax(z), rng)),
        (Logits::Gaussian { mean, .. }, ActMode::Mode) => Action::Continuous(mean.clone()),
        (Logits::Gaussian { mean, log_std }, ActMode::Sample) => Action::Continuous(
            mean.iter()
                .zip(log_std)
                .map(|(m, ls)| {
                    let z: f64 = rand_distr::StandardNormal.sample(rng);
                    m + ls.exp() * z
                })
                .collect(),
        ),
    }
}

/// Builds a baseline policy by name.
pub fn make_baseline(kind: &str, dims: PolicyDims, seed: u64) -> Result<Policy, PolicyError> {
    let method: Method = kind.parse()?;
    if method == Method::Lrp {
        return Err(PolicyError::Validation("lrp is not a baseline".into()));
    }
    Policy::build(method, dims, seed)
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    weight: Matrix,
    bias: Option<Matrix>,
}

fn layers_doc(net: &Mlp) -> Vec<LayerDoc> {
    net.layers()
        .iter()
        .map(|d| LayerDoc {
            weight: d.weight.value.clone(),
            bias: d.bias.as_ref().map(|b| b.value.clone()),
        })
        .collect()
}

fn dense_from(doc: LayerDoc) -> Dense {
    Dense {
        weight: Parameter::new(doc.weight),
        bias: doc.bias.map(Parameter::new),
    }
}

fn mlp_from(docs: Vec<LayerDoc>) -> Result<Mlp, PolicyError> {
    if docs.is_empty() {
        return Err(PolicyError::Format("network without layers".into()));
    }
    Ok(Mlp::from_layers(docs.into_iter().map(dense_from).collect())?)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum SlotDoc {
    Id { id: Matrix },
    IdWithStrategy { id: Matrix, strategy: Matrix },
    Head { layer: LayerDoc },
    Net { layers: Vec<LayerDoc> },
}

impl SlotDoc {
    fn from_slot(s: &Slot) -> Self {
        match s {
            Slot::Id(p) => SlotDoc::Id { id: p.value.clone() },
            Slot::IdWithStrategy { id, strategy } => SlotDoc::IdWithStrategy {
                id: id.value.clone(),
                strategy: strategy.value.clone(),
            },
            Slot::Head(d) => SlotDoc::Head {
                layer: LayerDoc {
                    weight: d.weight.value.clone(),
                    bias: d.bias.as_ref().map(|b| b.value.clone()),
                },
            },
            Slot::Net(n) => SlotDoc::Net { layers: layers_doc(n) },
        }
    }

    fn into_slot(self) -> Result<Slot, PolicyError> {
        Ok(match self {
            SlotDoc::Id { id } => Slot::Id(Parameter::new(id)),
            SlotDoc::IdWithStrategy { id, strategy } => Slot::IdWithStrategy {
                id: Parameter::new(id),
                strategy: Parameter::new(strategy),
            },
            SlotDoc::Head { layer } => Slot::Head(dense_from(layer)),
            SlotDoc::Net { layers } => Slot::Net(mlp_from(layers)?),
        })
    }
}

/// On-disk layout following the header line.
#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    method: Method,
    dims: PolicyDims,
    n_train_slots: usize,
    net: Vec<LayerDoc>,
    strategy: Option<Matrix>,
    slots: Vec<SlotDoc>,
}

impl CheckpointDoc {
    fn into_policy(self) -> Result<Policy, PolicyError> {
        self.dims.validate()?;
        if self.n_train_slots > self.slots.len() {
            return Err(PolicyError::Format("more training slots than slots".into()));
        }
        let policy = Policy {
            method: self.method,
            dims: self.dims,
            net: mlp_from(self.net)?,
            strategy: self.strategy.map(Parameter::new),
            slots: self
                .slots
                .into_iter()
                .map(SlotDoc::into_slot)
                .collect::<Result<_, _>>()?,
            n_train_slots: self.n_train_slots,
        };
        // A forward pass on every slot validates all shapes at once.
        let probe = Matrix::zeros(1, policy.dims.state_dim);
        if policy.method == Method::Maml {
            policy.outputs(None, &probe)?;
        }
        for s in 0..policy.slots.len() {
            let out = policy.outputs(Some(s), &probe)?;
            if out.cols() != policy.dims.head_width() {
                return Err(PolicyError::Format(format!(
                    "slot {s} produces {} outputs, expected {}",
                    out.cols(),
                    policy.dims.head_width()
                )));
            }
        }
        Ok(policy)
    }
}

/// Parameter ids of a slot, for building restricted tapes.
pub fn slot_param_ids(policy: &Policy, slot: usize) -> Result<Vec<ParamId>, PolicyError> {
    Ok(policy.slot(slot)?.params().iter().map(|p| p.id()).collect())
}

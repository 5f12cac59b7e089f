#![allow(dead_code)]

use cmail::envs::{
    gen_dataset, gen_expert, gen_partners, Action, ActionSpace, Env, EnvSpec, GenMode, Pair, PartnerDataset,
    PartnerSpec, StateEncoding,
};
use cmail::la::{Matrix, Mlp, Tape};
use cmail::policy::{nll_loss, ActionBatch, Method, Policy, PolicyDims};
use cmail::tt::TensorTrain;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps coordinates whose true
/// gradient is ~0 from dividing round-off by round-off.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Worst relative error between autodiff and central differences over every
/// coordinate of every parameter `policy` owns.
pub fn policy_grad_check(policy: &mut Policy, slot: Option<usize>, x: &Matrix, actions: &ActionBatch) -> f64 {
    let mut tape = Tape::new();
    let out = policy.forward(&mut tape, slot, x).unwrap();
    let loss = nll_loss(&mut tape, out, actions).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = policy
        .all_params_mut()
        .iter()
        .map(|p| match grads.get(p.id()) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.value.data().len()],
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        for (i, &ai) in a.iter().enumerate() {
            let orig = policy.all_params_mut()[k].value.data()[i];
            policy.all_params_mut()[k].value.data_mut()[i] = orig + FD_STEP;
            let up = policy.mean_nll(slot, x, actions).unwrap();
            policy.all_params_mut()[k].value.data_mut()[i] = orig - FD_STEP;
            let down = policy.mean_nll(slot, x, actions).unwrap();
            policy.all_params_mut()[k].value.data_mut()[i] = orig;
            worst = worst.max(rel_err(ai, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Label NLL of a bare MLP, computed without the tape.
fn mlp_nll(net: &Mlp, x: &Matrix, labels: &[usize]) -> f64 {
    let out = net.forward_matrix(x).unwrap();
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = out.row(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub fn mlp_grad_check(net: &mut Mlp, x: &Matrix, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = net.forward(&mut tape, xv).unwrap();
    let loss = tape.cross_entropy_labels(out, labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| grads.get(p.id()).unwrap().data().to_vec())
        .collect();
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        for (i, &ai) in a.iter().enumerate() {
            let orig = net.params()[k].value.data()[i];
            net.params_mut()[k].value.data_mut()[i] = orig + FD_STEP;
            let up = mlp_nll(net, x, labels);
            net.params_mut()[k].value.data_mut()[i] = orig - FD_STEP;
            let down = mlp_nll(net, x, labels);
            net.params_mut()[k].value.data_mut()[i] = orig;
            worst = worst.max(rel_err(ai, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// A random small MLP problem: net with ≤ 2 hidden layers and dims ≤ 8.
pub fn random_mlp_case(rng: &mut ChaCha8Rng) -> (Mlp, Matrix, Vec<usize>) {
    let n_hidden = rng.random_range(0..=2);
    let mut sizes = vec![rng.random_range(1..=8)];
    for _ in 0..n_hidden {
        sizes.push(rng.random_range(1..=8));
    }
    let out = rng.random_range(2..=8);
    sizes.push(out);
    let net = Mlp::new(&sizes, true, rng);
    let batch = rng.random_range(1..=6);
    let x = random_matrix(batch, sizes[0], rng);
    let labels = (0..batch).map(|_| rng.random_range(0..out)).collect();
    (net, x, labels)
}

/// A random small policy of `method` with a random test slot, states and
/// actions.
pub fn random_policy_case(
    method: Method,
    continuous: bool,
    rng: &mut ChaCha8Rng,
) -> (Policy, Option<usize>, Matrix, ActionBatch) {
    let state_dim = rng.random_range(1..=6);
    let space = if continuous {
        ActionSpace::Continuous(rng.random_range(1..=2))
    } else {
        ActionSpace::Discrete(rng.random_range(2..=5))
    };
    let mut dims = PolicyDims::new(state_dim, space, rng.random_range(1..=3), rng.random_range(1..=3));
    // mod's heads sit on a trunk, so it needs a hidden layer
    let min_hidden = usize::from(method == Method::Mod);
    dims.hidden = (0..rng.random_range(min_hidden..=2))
        .map(|_| rng.random_range(1..=6))
        .collect();
    let mut policy = Policy::build(method, dims, rng.random()).unwrap();
    let slot = policy.new_test_slot(rng.random());
    let batch = rng.random_range(1..=5);
    let x = random_matrix(batch, state_dim, rng);
    let actions: Vec<Action> = (0..batch)
        .map(|_| match space {
            ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..n)),
            ActionSpace::Continuous(d) => Action::Continuous((0..d).map(|_| rng.random_range(-0.5..0.5)).collect()),
        })
        .collect();
    let actions = ActionBatch::from_actions(space, &actions).unwrap();
    (policy, Some(slot), x, actions)
}

/// Brute-force contraction: sums the product of core entries over every
/// path of inner indices.
pub fn dense_eval(tt: &TensorTrain, idx: &[usize]) -> Vec<f64> {
    let cores = tt.cores();
    let k = cores.last().unwrap().shape().2;
    let mut out = vec![0.0; k];
    fn walk(cores: &[cmail::tt::TtCore], idx: &[usize], i: usize, a: usize, acc: f64, out: &mut [f64]) {
        let core = &cores[i];
        let (_, _, r_next) = core.shape();
        for b in 0..r_next {
            let v = acc * core.get(a, idx[i], b);
            if i + 1 == cores.len() {
                out[b] += v;
            } else {
                walk(cores, idx, i + 1, b, v, out);
            }
        }
    }
    walk(cores, idx, 0, 0, 1.0, &mut out);
    out
}

/// Planted bandit population: env, `n_train` training pairs and `n_test`
/// test pairs with training data of `steps` per pair.
pub struct BanditSetup {
    pub env: Env,
    pub pairs: Vec<Pair>,
    pub n_train: usize,
}

pub fn planted_bandit(n_states: usize, n_train: usize, n_test: usize, rank: usize, seed: u64) -> BanditSetup {
    let env = EnvSpec::Bandit {
        n_states,
        n_actions: 10,
        p: 0.3,
        seed,
        encoding: StateEncoding::default(),
    }
    .build()
    .unwrap();
    let specs: Vec<PartnerSpec> = (0..n_train + n_test)
        .map(|i| PartnerSpec {
            partner_id: i,
            mode: GenMode::Planted,
            seed: seed * 1000 + i as u64,
            rank: Some(rank),
            gain: None,
            angle: None,
        })
        .collect();
    let partners = gen_partners(&env, &specs, seed).unwrap();
    let pairs = partners
        .into_iter()
        .enumerate()
        .map(|(i, partner)| Pair {
            partner_id: i,
            expert: gen_expert(&partner, &env),
            partner,
        })
        .collect();
    BanditSetup { env, pairs, n_train }
}

impl BanditSetup {
    pub fn train_data(&self, steps: usize, seed: u64) -> PartnerDataset {
        gen_dataset(&self.env, &self.pairs[..self.n_train], steps, seed)
    }

    pub fn test_data(&self, steps: usize, seed: u64) -> PartnerDataset {
        gen_dataset(&self.env, &self.pairs[self.n_train..], steps, seed)
    }
}

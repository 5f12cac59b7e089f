//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cmail::cli::{
    cmd_adapt_eval, cmd_gen, cmd_rank_sweep, cmd_train, ExperimentConfig, PartnerFile, CHECKPOINT, PARTNERS_FILE,
    TEST_DATA, TRAIN_LOG,
};
use cmail::envs::{
    bandit_make, Action, ActionSpace, Actor, Env, EnvState, ExpertPolicy, PartnerDataset, Role, StateEncoding,
};
use cmail::eval::{static_eval, ActorEgo, EgoAgent, EvalError, EvalReport, Phase, RolloutConfig};
use cmail::policy::{log_prob, Logits, Method, Policy, PolicyDims};
use cmail::trainer::{adapt, AdaptSession};
use cmail::tt::{softmax, TensorTrain};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use common::{dense_eval, mlp_grad_check, policy_grad_check, random_mlp_case, random_policy_case};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

/// Prints the verdict line; a run over its time limit fails.
fn report(label: &str, out: &Outcome, elapsed: Duration, limit: Option<u64>) -> bool {
    let in_time = limit.is_none_or(|l| elapsed < Duration::from_secs(l));
    let budget = limit.map_or(String::new(), |l| format!(" / limit {l}s"));
    println!(
        "{} {label}: {} [{:.1}s{budget}]",
        if out.pass && in_time { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    );
    out.pass && in_time
}

/// One finished pipeline run kept on disk for later criteria.
struct Run {
    _dir: TempDir,
    cfg: ExperimentConfig,
    report: EvalReport,
}

fn pipeline(mut cfg: ExperimentConfig, seed: u64, methods: &[Method]) -> Run {
    let dir = tempfile::tempdir().unwrap();
    cfg.seed = seed;
    cfg.out = dir.path().to_path_buf();
    cfg.methods = methods.to_vec();
    cmd_gen(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    let report = cmd_adapt_eval(&cfg).unwrap();
    Run { _dir: dir, cfg, report }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let modes: Vec<usize> = (0..n).map(|_| rng.random_range(1..=5)).collect();
        let mut ranks = vec![1];
        ranks.extend((0..n).map(|_| rng.random_range(1..=3)));
        let tt = TensorTrain::random(&modes, &ranks, &mut rng).unwrap();
        let idx: Vec<usize> = modes.iter().map(|&m| rng.random_range(0..m)).collect();
        for (g, w) in tt.eval(&idx).unwrap().iter().zip(dense_eval(&tt, &idx)) {
            worst = worst.max((g - w).abs());
        }
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("100 random trains, max |eval - dense| = {worst:.2e} (tol 1e-10)"),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let err = if case % 2 == 0 {
            let (mut net, x, labels) = random_mlp_case(&mut rng);
            mlp_grad_check(&mut net, &x, &labels)
        } else {
            let method = Method::ALL[(case / 2) % Method::ALL.len()];
            let (mut p, slot, x, a) = random_policy_case(method, case % 4 == 1, &mut rng);
            policy_grad_check(&mut p, slot, &x, &a)
        };
        worst = worst.max(err);
    }
    Outcome {
        pass: worst <= 1e-4,
        detail: format!("20 MLP/policy losses, worst relative error {worst:.2e} (tol 1e-4)"),
    }
}

fn criterion_3() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::bandit();
        cfg.seed = seed;
        cfg.out = dir.path().to_path_buf();
        cfg.partners.n_test = 0;
        cmd_gen(&cfg).unwrap();
        let rows = cmd_rank_sweep(&cfg).unwrap();
        let loss: BTreeMap<usize, f64> = rows.iter().map(|r| (r.rank, r.log_loss)).collect();
        let ratio = loss[&4] / loss[&3];
        let spread = (4..=7).map(|k| (loss[&k] / loss[&4] - 1.0).abs()).fold(0.0, f64::max);
        pass &= ratio <= 0.7 && spread <= 0.10;
        let curve: Vec<String> = (1..=7).map(|k| format!("{:.3}", loss[&k])).collect();
        parts.push(format!(
            "seed {seed}: [{}] r4/r3 {ratio:.3}, plateau {:.1}%",
            curve.join(" "),
            100.0 * spread
        ));
    }
    Outcome {
        pass,
        detail: format!("rank sweep 1..7; {}", parts.join("; ")),
    }
}

fn criterion_4(runs: &[Run]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for run in runs {
        let r = &run.report;
        let at = |m: &str, s| r.mean_nll(m, s).unwrap();
        let (l0, l500) = (at("lrp", 0), at("lrp", 500));
        let (mt, lt) = (at("mt", 500), at("lt", 500));
        pass &= l500 <= 0.8 * l0 && l500 <= mt && l500 <= lt;
        parts.push(format!(
            "seed {}: lrp {l0:.3}->{l500:.3}, mt {mt:.3}, lt {lt:.3}",
            run.cfg.seed
        ));
    }
    Outcome {
        pass,
        detail: format!("NLL at 500 samples; {}", parts.join("; ")),
    }
}

/// Ego wrapper that records the start of every episode.
struct Recording<'a, A: Actor> {
    inner: ActorEgo<'a, A>,
    starts: Vec<([f64; 2], [f64; 2])>,
    horizon: usize,
    t: usize,
}

impl<A: Actor> EgoAgent for Recording<'_, A> {
    fn ego_action(&mut self, st: &EnvState, s_ego: &[f64], rng: &mut ChaCha8Rng) -> Result<Action, EvalError> {
        if self.t.is_multiple_of(self.horizon) {
            if let EnvState::Particle { pos, target } = st {
                self.starts.push((*pos, *target));
            }
        }
        self.t += 1;
        self.inner.ego_action(st, s_ego, rng)
    }
}

fn reference_gap(run: &Run) -> f64 {
    let dir = run.cfg.env_dir();
    let env: Env = run.cfg.resolved_env().build().unwrap();
    let Env::Particle(p) = &env else { unreachable!() };
    let file: PartnerFile =
        serde_json::from_reader(BufReader::new(File::open(dir.join(PARTNERS_FILE)).unwrap())).unwrap();
    let (mut got, mut best) = (0.0, 0.0);
    for (i, pair) in file.train.iter().chain(&file.test).enumerate() {
        let mut expert: ExpertPolicy = pair.expert.clone();
        let mut partner = pair.partner.clone();
        let mut ego = Recording {
            inner: ActorEgo {
                actor: &mut expert,
                env: &env,
            },
            starts: Vec::new(),
            horizon: p.horizon,
            t: 0,
        };
        let cfg = RolloutConfig::default();
        let r = static_eval(&mut ego, &mut partner, &env, &cfg, i as u64).unwrap();
        got += r.mean;
        best += ego.starts.iter().map(|(s, t)| p.optimal_return(*s, *t)).sum::<f64>() / cfg.episodes as f64;
    }
    got / best - 1.0
}

fn criterion_5(runs: &[Run]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for run in runs {
        let gap = reference_gap(run);
        let r = &run.report;
        let lb = r.mean_reward("lrp", Phase::Before).unwrap();
        let la = r.mean_reward("lrp", Phase::After).unwrap();
        let ma = r.mean_reward("maml", Phase::After).unwrap();
        pass &= gap <= 0.05 && la >= lb && la >= ma;
        parts.push(format!(
            "seed {}: reference {:.1}% off optimum, lrp {lb:.2}->{la:.2}, maml after {ma:.2}",
            run.cfg.seed,
            100.0 * gap
        ));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

/// Re-adapts every trained method to every test partner and compares the
/// frozen parameter bytes.
fn criterion_6(runs: &[&Run]) -> Outcome {
    let (mut checked, mut broken) = (0, Vec::new());
    for run in runs {
        let cfg = &run.cfg;
        let test =
            PartnerDataset::read_jsonl(BufReader::new(File::open(cfg.env_dir().join(TEST_DATA)).unwrap())).unwrap();
        let stream_len = cfg.stream_len();
        for &m in &cfg.methods {
            let ckpt = fs::read(cfg.method_dir(m).join(CHECKPOINT)).unwrap();
            let policy = Policy::load(ckpt.as_slice()).unwrap();
            let core = policy.state_core_bytes();
            let frozen = policy.frozen_bytes();
            for pid in test.partner_ids() {
                let steps = test.steps_for(pid);
                let obs = steps[..stream_len]
                    .iter()
                    .map(|s| (s.state(Role::Partner), s.ap.clone()));
                let mut session = AdaptSession::new(&policy, cfg.adapt.clone(), cfg.seeds().adapt(m, pid));
                adapt(&mut session, obs).unwrap();
                checked += 1;
                let after = session.policy();
                if after.state_core_bytes() != core || after.frozen_bytes() != frozen || session.updates() == 0 {
                    broken.push(format!("{} seed {} {m} partner {pid}", cfg.env.name(), cfg.seed));
                }
            }
            // the stored checkpoint is untouched by the pipeline's own sessions
            if fs::read(cfg.method_dir(m).join(CHECKPOINT)).unwrap() != ckpt {
                broken.push(format!("{} seed {} {m} checkpoint", cfg.env.name(), cfg.seed));
            }
        }
    }
    Outcome {
        pass: broken.is_empty() && checked > 0,
        detail: if broken.is_empty() {
            format!("{checked} adaptation runs, state core and frozen parameters bitwise identical")
        } else {
            format!("{checked} runs, changed: {}", broken.join(", "))
        },
    }
}

fn criterion_7() -> Outcome {
    let env = bandit_make(0, 1000, 10, 0.3, StateEncoding::default()).unwrap();
    let frac = env.scoring_fraction();
    let mut bad = 0;
    for s in 0..env.n_states() {
        for a0 in 0..10 {
            for a1 in 0..10 {
                let r = env.reward(s, a0, a1).unwrap();
                let want = if a0 == a1 && env.scores(s, a0) { 1.0 } else { 0.0 };
                if r != env.reward(s, a1, a0).unwrap() || r != want {
                    bad += 1;
                }
            }
        }
    }
    Outcome {
        pass: (0.25..=0.35).contains(&frac) && bad == 0,
        detail: format!("scoring fraction {frac:.4} (in [0.25, 0.35]); {bad} reward violations over 1000x10x10"),
    }
}

fn criterion_8(trained: &[PathBuf], env: &Env) -> Outcome {
    let mut policies: Vec<Policy> = trained
        .iter()
        .map(|p| Policy::load(fs::read(p).unwrap().as_slice()).unwrap())
        .collect();
    for &m in &Method::ALL {
        policies.push(Policy::build(m, PolicyDims::new(env.state_dim(), ActionSpace::Discrete(10), 16, 4), 8).unwrap());
    }
    for (i, p) in policies.iter_mut().enumerate() {
        p.new_test_slot(i as u64);
    }
    let Env::Bandit(b) = env else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut sum_err, mut shift_err): (f64, f64) = (0.0, 0.0);
    for probe in 0..1000 {
        let p = &policies[probe % policies.len()];
        let slot = rng.random_range(0..p.n_slots());
        let role = if rng.random() { Role::Ego } else { Role::Partner };
        let s = b.encode(rng.random_range(0..b.n_states()), role);
        let probs = p.action_probs(slot, &s).unwrap();
        sum_err = sum_err.max((probs.iter().sum::<f64>() - 1.0).abs());
        let Logits::Discrete(z) = p.policy_logits(slot, &s).unwrap() else {
            unreachable!()
        };
        let c = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, (x, y)) in softmax(&z).iter().zip(softmax(&shifted)).enumerate() {
            shift_err = shift_err.max((x - y).abs());
            let la = log_prob(&Logits::Discrete(z.clone()), &Action::Discrete(a));
            let lb = log_prob(&Logits::Discrete(shifted.clone()), &Action::Discrete(a));
            shift_err = shift_err.max((la.exp() - lb.exp()).abs());
        }
    }
    Outcome {
        pass: sum_err <= 1e-9 && shift_err <= 1e-12,
        detail: format!(
            "{} policies, 1000 probes: max |sum - 1| {sum_err:.1e} (tol 1e-9), max shift change {shift_err:.1e} (tol 1e-12)",
            policies.len()
        ),
    }
}

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x == "csv") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let run_once = |env_cfg: ExperimentConfig| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = env_cfg;
        cfg.seed = 11;
        cfg.out = dir.path().to_path_buf();
        cfg.methods = Method::ALL.to_vec();
        cfg.partners.n_train = 4;
        cfg.partners.n_test = 2;
        cfg.partners.train_steps = 300;
        cfg.partners.test_steps = 260;
        cfg.train.epochs = 3;
        cfg.adapt.checkpoints = vec![0, 50, 100, 200];
        cfg.eval.reward_samples = 200;
        cfg.eval.rollout.episodes = 4;
        cfg.fit.iters = 200;
        cmd_gen(&cfg).unwrap();
        if matches!(cfg.env, cmail::envs::EnvSpec::Bandit { .. }) {
            cmd_rank_sweep(&cfg).unwrap();
        }
        cmd_train(&cfg).unwrap();
        cmd_adapt_eval(&cfg).unwrap();
        let files = csv_files(dir.path());
        (dir, files)
    };
    let mut pass = true;
    let mut n = 0;
    for base in [ExperimentConfig::bandit(), ExperimentConfig::particle()] {
        let (_a, first) = run_once(base.clone());
        let (_b, second) = run_once(base);
        n += first.len();
        pass &= !first.is_empty() && first == second;
    }
    Outcome {
        pass,
        detail: format!("bandit + particle pipelines run twice, {n} CSV files compared byte for byte"),
    }
}

/// Mean training NLL per epoch never rises more than 5% of |best| above the best so far.
fn training_monotone(runs: &[&Run]) -> Outcome {
    let mut worst: f64 = 0.0;
    for run in runs {
        for &m in &run.cfg.methods {
            let mut rdr = csv::Reader::from_path(run.cfg.method_dir(m).join(TRAIN_LOG)).unwrap();
            let mut by_epoch: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for rec in rdr.records() {
                let rec = rec.unwrap();
                by_epoch
                    .entry(rec[0].parse().unwrap())
                    .or_default()
                    .push(rec[2].parse().unwrap());
            }
            let means: Vec<f64> = by_epoch
                .values()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .collect();
            let mut best = means[0];
            for &v in &means[1..] {
                // Gaussian NLLs go negative, so scale the rise by |best|
                worst = worst.max((v - best) / best.abs());
                best = best.min(v);
            }
        }
    }
    Outcome {
        pass: worst <= 0.05,
        detail: format!("largest epoch-to-best rise {:.2}% (tol 5%)", 100.0 * worst.max(0.0)),
    }
}

/// NLL after 1000 samples is at most 2% above the 0-sample NLL.
fn adaptation_never_hurts(runs: &[&Run]) -> Outcome {
    let mut worst: f64 = f64::NEG_INFINITY;
    for run in runs {
        let last = run.cfg.stream_len();
        for &m in &run.cfg.methods {
            let r0 = run.report.mean_nll(m.name(), 0).unwrap();
            let r1 = run.report.mean_nll(m.name(), last).unwrap();
            worst = worst.max((r1 - r0) / r0.abs());
        }
    }
    Outcome {
        pass: worst <= 0.02,
        detail: format!("largest (NLL(1000) - NLL(0)) / |NLL(0)| = {worst:+.3} (tol +0.02)"),
    }
}

fn main() -> ExitCode {
    let mut all = true;
    let timed = |f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed())
    };

    let (o, dt) = timed(&mut criterion_1);
    all &= report("criterion 1 (TT correctness)", &o, dt, Some(1));
    let (o, dt) = timed(&mut criterion_2);
    all &= report("criterion 2 (gradient correctness)", &o, dt, Some(30));
    let (o, dt) = timed(&mut criterion_3);
    all &= report("criterion 3 (rank-sweep knee)", &o, dt, Some(300));

    let t = Instant::now();
    let bandit: Vec<Run> = SEEDS
        .iter()
        .map(|&s| pipeline(ExperimentConfig::bandit(), s, &[Method::Lrp, Method::Mt, Method::Lt]))
        .collect();
    let o = criterion_4(&bandit);
    let dt = t.elapsed();
    all &= report("criterion 4 (bandit adaptation)", &o, dt, Some(900));

    let t = Instant::now();
    let particle: Vec<Run> = SEEDS
        .iter()
        .map(|&s| pipeline(ExperimentConfig::particle(), s, &[Method::Lrp, Method::Maml]))
        .collect();
    let o = criterion_5(&particle);
    let dt = t.elapsed();
    all &= report("criterion 5 (particle reward ordering)", &o, dt, Some(900));

    let every: Vec<&Run> = bandit.iter().chain(&particle).collect();
    let (o, dt) = timed(&mut || criterion_6(&every));
    all &= report("criterion 6 (adaptation isolation)", &o, dt, None);
    let (o, dt) = timed(&mut criterion_7);
    all &= report("criterion 7 (bandit statistics)", &o, dt, None);

    let ckpts: Vec<PathBuf> = bandit[0]
        .cfg
        .methods
        .iter()
        .map(|&m| bandit[0].cfg.method_dir(m).join(CHECKPOINT))
        .collect();
    let env = bandit[0].cfg.resolved_env().build().unwrap();
    let (o, dt) = timed(&mut || criterion_8(&ckpts, &env));
    all &= report("criterion 8 (normalisation)", &o, dt, None);
    let (o, dt) = timed(&mut criterion_9);
    all &= report("criterion 9 (reproducibility)", &o, dt, None);

    let (o, dt) = timed(&mut || training_monotone(&every));
    all &= report("invariant (training loss monotone)", &o, dt, None);
    let (o, dt) = timed(&mut || adaptation_never_hurts(&every));
    all &= report("invariant (adaptation never hurts)", &o, dt, None);

    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}

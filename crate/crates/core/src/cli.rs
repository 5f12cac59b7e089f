//! Experiment driver behind the `cmail` binary.
//!
//! Every stage reads an [`ExperimentConfig`] and works under
//! `out/{env}/`. Stage seeds come from the master seed through
//! [`derive_seed`] with the labels listed on [`StageSeeds`].

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envs::{
    gen_dataset_with, gen_expert, gen_partners, tabulate, Env, EnvError, EnvSpec, GenMode, Pair, PartnerDataset,
    PartnerSpec, Role, RolloutNoise, StateEncoding, Step,
};
use crate::eval::{
    adapt_curve, bc_fit, static_eval, write_rows, BcConfig, EvalError, EvalReport, NllRow, Phase, RewardRow,
    RewardSummary, RolloutConfig, SessionEgo,
};
use crate::policy::{Method, Policy, PolicyError};
use crate::seed::derive_seed;
use crate::trainer::{train, AdaptConfig, AdaptSession, TrainConfig, TrainError};
use crate::tt::{rank_sweep, FitConfig, TtError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{0} not found; run `{1}` first")]
    Missing(PathBuf, &'static str),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("state core changed while adapting {method} to partner {partner_id}")]
    Isolation { method: Method, partner_id: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tt(#[from] TtError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How partners and their datasets are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartnerGenConfig {
    /// Defaults to planted for the bandit and parametric for the particle env.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<GenMode>,
    pub n_train: usize,
    pub n_test: usize,
    /// Generating rank of planted populations.
    pub rank: usize,
    pub train_steps: usize,
    pub test_steps: usize,
    pub noise: RolloutNoise,
}

impl Default for PartnerGenConfig {
    fn default() -> Self {
        Self {
            mode: None,
            n_train: 16,
            n_test: 4,
            rank: 4,
            train_steps: 2000,
            test_steps: 1500,
            noise: RolloutNoise::default(),
        }
    }
}

/// Who the ego is paired with during reward evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPartner {
    /// The generating partner policy.
    True,
    /// A behavioural clone fit to the partner's test data.
    Bc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Partner samples seen before the "after" reward evaluation.
    pub reward_samples: usize,
    pub partner: EvalPartner,
    pub rollout: RolloutConfig,
    pub bc: BcConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            reward_samples: 200,
            partner: EvalPartner::True,
            rollout: RolloutConfig::default(),
            bc: BcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// The bandit `seed` field is mixed with the master seed.
    pub env: EnvSpec,
    pub partners: PartnerGenConfig,
    pub methods: Vec<Method>,
    /// `method` and `seed` are set per method from the master seed.
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub ranks: Vec<usize>,
    pub fit: FitConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::bandit()
    }
}

impl ExperimentConfig {
    /// 200-state planted bandit.
    pub fn bandit() -> Self {
        Self {
            env: EnvSpec::Bandit {
                n_states: 200,
                n_actions: 10,
                p: 0.3,
                seed: 0,
                encoding: StateEncoding::default(),
            },
            partners: PartnerGenConfig::default(),
            methods: Method::ALL.to_vec(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
            ranks: (1..=7).collect(),
            fit: FitConfig::default(),
            out: PathBuf::from("out"),
            seed: 0,
        }
    }

    /// Particle env with parametric partners.
    pub fn particle() -> Self {
        Self {
            env: EnvSpec::particle_default(),
            ..Self::bandit()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.methods.is_empty() {
            return Err(CliError::Validation("method list is empty".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(CliError::Validation("method list has duplicates".into()));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(CliError::Validation(
                "ranks must be a nonempty list of positive integers".into(),
            ));
        }
        let p = &self.partners;
        if p.n_train == 0 || p.train_steps == 0 {
            return Err(CliError::Validation(
                "need at least one training partner and step".into(),
            ));
        }
        let stream = self.stream_len();
        if p.n_test > 0 && p.test_steps <= stream {
            return Err(CliError::Validation(format!(
                "test_steps ({}) must exceed the largest adaptation checkpoint ({stream}) to leave held-out steps",
                p.test_steps
            )));
        }
        if self.eval.reward_samples > stream {
            return Err(CliError::Validation(format!(
                "reward_samples ({}) exceeds the adaptation stream ({stream})",
                self.eval.reward_samples
            )));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Partner samples fed to each adaptation session.
    pub fn stream_len(&self) -> usize {
        self.adapt.checkpoints.iter().copied().max().unwrap_or(0)
    }

    pub fn gen_mode(&self) -> GenMode {
        self.partners.mode.unwrap_or(match self.env {
            EnvSpec::Bandit { .. } => GenMode::Planted,
            EnvSpec::Particle { .. } => GenMode::Parametric,
        })
    }

    /// The env spec with its seed resolved against the master seed.
    pub fn resolved_env(&self) -> EnvSpec {
        let mut env = self.env.clone();
        if let EnvSpec::Bandit { seed, .. } = &mut env {
            *seed = derive_seed(self.seed, &format!("env/{seed}"));
        }
        env
    }

    pub fn env_dir(&self) -> PathBuf {
        self.out.join(self.env.name())
    }

    pub fn method_dir(&self, method: Method) -> PathBuf {
        self.env_dir().join(method.name())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds(self.seed)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-stage seeds, each `derive_seed(master, label)`:
///
/// | stage | label |
/// |---|---|
/// | bandit layout | `env/{spec seed}` |
/// | planted state core | `population` |
/// | partner `i` | `partner/{i}` |
/// | train / test data | `train-data`, `test-data` |
/// | training | `train/{method}` |
/// | test slot init | `adapt/{method}/{partner}` |
/// | reward episodes | `eval/{partner}` |
/// | BC partners | `bc/{partner}` |
/// | rank sweep init | `rank-sweep` |
#[derive(Debug, Clone, Copy)]
pub struct StageSeeds(pub u64);

impl StageSeeds {
    pub fn population(self) -> u64 {
        derive_seed(self.0, "population")
    }
    pub fn partner(self, i: usize) -> u64 {
        derive_seed(self.0, &format!("partner/{i}"))
    }
    pub fn train_data(self) -> u64 {
        derive_seed(self.0, "train-data")
    }
    pub fn test_data(self) -> u64 {
        derive_seed(self.0, "test-data")
    }
    pub fn train(self, m: Method) -> u64 {
        derive_seed(self.0, &format!("train/{m}"))
    }
    pub fn adapt(self, m: Method, partner_id: usize) -> u64 {
        derive_seed(self.0, &format!("adapt/{m}/{partner_id}"))
    }
    pub fn eval(self, partner_id: usize) -> u64 {
        derive_seed(self.0, &format!("eval/{partner_id}"))
    }
    pub fn bc(self, partner_id: usize) -> u64 {
        derive_seed(self.0, &format!("bc/{partner_id}"))
    }
    pub fn rank_sweep(self) -> u64 {
        derive_seed(self.0, "rank-sweep")
    }
}

/// Written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub files: Vec<String>,
}

/// Partners written by `gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartnerFile {
    pub specs: Vec<PartnerSpec>,
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
}

pub const ENV_FILE: &str = "env.json";
pub const PARTNERS_FILE: &str = "partners.json";
pub const TRAIN_DATA: &str = "train.jsonl";
pub const TEST_DATA: &str = "test.jsonl";
pub const CHECKPOINT: &str = "policy.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const NLL_CSV: &str = "nll.csv";
pub const REWARD_CSV: &str = "reward.csv";
pub const RANK_CSV: &str = "rank_sweep.csv";
pub const MANIFEST: &str = "manifest.json";

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path, stage: &'static str) -> Result<BufReader<File>, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf(), stage));
    }
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<T, CliError> {
    serde_json::from_reader(open(path, stage)?).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = create(path)?;
    write_rows(&mut w, rows)?;
    w.flush().map_err(io_err(path))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<Vec<T>, CliError> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    csv::Reader::from_reader(open(path, stage)?)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(csv_err)
}

fn write_manifest(cfg: &ExperimentConfig, dir: &Path, stage: &str, files: &[&str]) -> Result<(), CliError> {
    let manifest = Manifest {
        stage: stage.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        files: files.iter().map(|f| f.to_string()).collect(),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

fn read_dataset(path: &Path) -> Result<PartnerDataset, CliError> {
    Ok(PartnerDataset::read_jsonl(open(path, "gen")?)?)
}

fn load_env(cfg: &ExperimentConfig) -> Result<Env, CliError> {
    let spec: EnvSpec = read_json(&cfg.env_dir().join(ENV_FILE), "gen")?;
    Ok(spec.build()?)
}

/// Generates the env, partner population and train/test datasets.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<PartnerFile, CliError> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let spec = cfg.resolved_env();
    let env = spec.build()?;
    let p = &cfg.partners;
    let mode = cfg.gen_mode();
    let specs: Vec<PartnerSpec> = (0..p.n_train + p.n_test)
        .map(|i| PartnerSpec {
            partner_id: i,
            mode,
            seed: seeds.partner(i),
            rank: (mode == GenMode::Planted).then_some(p.rank),
            gain: None,
            angle: None,
        })
        .collect();
    // Each split is whitened on its own so the training population alone
    // spans every planted direction evenly.
    let (train_specs, test_specs) = specs.split_at(p.n_train);
    let mut partners = gen_partners(&env, train_specs, seeds.population())?;
    partners.extend(gen_partners(&env, test_specs, seeds.population())?);
    let mut pairs: Vec<Pair> = partners
        .into_iter()
        .enumerate()
        .map(|(i, partner)| Pair {
            partner_id: i,
            expert: gen_expert(&partner, &env),
            partner,
        })
        .collect();
    let test = pairs.split_off(p.n_train);
    let train_ds = gen_dataset_with(&env, &pairs, p.train_steps, seeds.train_data(), p.noise);
    let test_ds = gen_dataset_with(&env, &test, p.test_steps, seeds.test_data(), p.noise);

    let dir = cfg.env_dir();
    write_json(&dir.join(ENV_FILE), &spec)?;
    let file = PartnerFile {
        specs,
        train: pairs,
        test,
    };
    write_json(&dir.join(PARTNERS_FILE), &file)?;
    for (name, ds) in [(TRAIN_DATA, &train_ds), (TEST_DATA, &test_ds)] {
        let path = dir.join(name);
        let mut w = create(&path)?;
        ds.write_jsonl(&mut w)?;
        w.flush().map_err(io_err(&path))?;
    }
    write_manifest(cfg, &dir, "gen", &[ENV_FILE, PARTNERS_FILE, TRAIN_DATA, TEST_DATA])?;
    Ok(file)
}

/// Trains every configured method on the training dataset.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<(Method, Policy)>, CliError> {
    cfg.validate()?;
    let env = load_env(cfg)?;
    let data = read_dataset(&cfg.env_dir().join(TRAIN_DATA))?;
    let mut out = Vec::new();
    for &method in &cfg.methods {
        let tc = TrainConfig {
            method,
            seed: cfg.seeds().train(method),
            ..cfg.train.clone()
        };
        let trained = train(&data, env.action_space(), &tc)?;
        let dir = cfg.method_dir(method);
        let path = dir.join(CHECKPOINT);
        let mut w = create(&path)?;
        trained.policy.save(&mut w)?;
        w.flush().map_err(io_err(&path))?;
        write_csv(&dir.join(TRAIN_LOG), &trained.log)?;
        write_manifest(cfg, &dir, "train", &[CHECKPOINT, TRAIN_LOG])?;
        out.push((method, trained.policy));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TraceRow {
    samples: usize,
    nll: f64,
}

/// Adapts a fresh slot per (method, test partner) and evaluates NLL curves
/// and before/after rewards. Fails if any adaptation touches the state core.
pub fn cmd_adapt_eval(cfg: &ExperimentConfig) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let env = load_env(cfg)?;
    let dir = cfg.env_dir();
    let pairs: PartnerFile = read_json(&dir.join(PARTNERS_FILE), "gen")?;
    let test_ds = read_dataset(&dir.join(TEST_DATA))?;
    let stream_len = cfg.stream_len();

    let mut eval_partners = Vec::new();
    for pair in &pairs.test {
        let steps = test_ds.steps_for(pair.partner_id);
        if steps.len() <= stream_len {
            return Err(CliError::Validation(format!(
                "partner {} has {} test steps, need more than {stream_len}",
                pair.partner_id,
                steps.len()
            )));
        }
        let actor: Box<dyn crate::envs::Actor> = match cfg.eval.partner {
            EvalPartner::True => Box::new(pair.partner.clone()),
            EvalPartner::Bc => Box::new(bc_fit(
                &steps,
                env.action_space(),
                seeds.bc(pair.partner_id),
                &cfg.eval.bc,
            )?),
        };
        eval_partners.push((pair.partner_id, steps, actor));
    }

    let mut report = EvalReport {
        env: cfg.env.name().into(),
        seed: cfg.seed,
        ..Default::default()
    };
    for &method in &cfg.methods {
        let mdir = cfg.method_dir(method);
        let policy = Policy::load(open(&mdir.join(CHECKPOINT), "train")?)?;
        let core = policy.state_core_bytes();
        let mut nll_rows = Vec::new();
        let mut reward_rows = Vec::new();
        let mut trace_files = Vec::new();
        for (partner_id, steps, actor) in eval_partners.iter_mut() {
            let partner_id = *partner_id;
            let stream: Vec<_> = steps[..stream_len]
                .iter()
                .map(|s| (s.state(Role::Partner), s.ap.clone()))
                .collect();
            let heldout: Vec<&Step> = steps[stream_len..].to_vec();
            let slot_seed = seeds.adapt(method, partner_id);
            let isolation = |s: &AdaptSession| {
                if s.policy().state_core_bytes() == core {
                    Ok(())
                } else {
                    Err(CliError::Isolation { method, partner_id })
                }
            };

            let mut session = AdaptSession::new(&policy, cfg.adapt.clone(), slot_seed);
            let curve = adapt_curve(&mut session, &stream, &heldout)?;
            isolation(&session)?;
            let trace: Vec<TraceRow> = curve.iter().map(|&(samples, nll)| TraceRow { samples, nll }).collect();
            let name = format!("trace_{partner_id}.csv");
            write_csv(&mdir.join(&name), &trace)?;
            trace_files.push(name);
            nll_rows.extend(curve.into_iter().map(|(samples, nll)| NllRow {
                method: method.name().into(),
                partner_id,
                samples,
                nll,
            }));

            let mut session = AdaptSession::new(&policy, cfg.adapt.clone(), slot_seed);
            let before = reward(&mut session.clone(), actor.as_mut(), &env, cfg, partner_id)?;
            for (s, a) in &stream[..cfg.eval.reward_samples] {
                session.observe(s.clone(), a.clone())?;
            }
            session.flush()?;
            isolation(&session)?;
            let after = reward(&mut session.clone(), actor.as_mut(), &env, cfg, partner_id)?;
            for (phase, r) in [(Phase::Before, before), (Phase::After, after)] {
                reward_rows.push(RewardRow {
                    method: method.name().into(),
                    partner_id,
                    phase,
                    reward: r.mean,
                    stderr: r.stderr,
                });
            }
        }
        write_csv(&mdir.join(NLL_CSV), &nll_rows)?;
        write_csv(&mdir.join(REWARD_CSV), &reward_rows)?;
        let mut files = vec![NLL_CSV, REWARD_CSV];
        files.extend(trace_files.iter().map(String::as_str));
        write_manifest(cfg, &mdir, "adapt-eval", &files)?;
        report.nll.extend(nll_rows);
        report.reward.extend(reward_rows);
    }
    Ok(report)
}

fn reward(
    session: &mut AdaptSession,
    partner: &mut dyn crate::envs::Actor,
    env: &Env,
    cfg: &ExperimentConfig,
    partner_id: usize,
) -> Result<RewardSummary, CliError> {
    let rc = &cfg.eval.rollout;
    let mut ego = SessionEgo {
        session,
        mode: rc.mode,
        online: rc.online,
    };
    Ok(static_eval(&mut ego, partner, env, rc, cfg.seeds().eval(partner_id))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub log_loss: f64,
}

/// Fits tensor trains of each configured rank to the training partners.
pub fn cmd_rank_sweep(cfg: &ExperimentConfig) -> Result<Vec<RankRow>, CliError> {
    cfg.validate()?;
    if !matches!(cfg.env, EnvSpec::Bandit { .. }) {
        return Err(CliError::Unsupported(format!(
            "rank sweep needs tabular partners; the {} env is continuous",
            cfg.env.name()
        )));
    }
    let dir = cfg.env_dir();
    let pairs: PartnerFile = read_json(&dir.join(PARTNERS_FILE), "gen")?;
    let partners: Vec<_> = pairs.train.iter().map(|p| p.partner.clone()).collect();
    let target = tabulate(&partners)?;
    let fit = FitConfig {
        seed: cfg.seeds().rank_sweep(),
        ..cfg.fit
    };
    let rows: Vec<RankRow> = rank_sweep(&target, &cfg.ranks, fit)?
        .into_iter()
        .map(|(rank, log_loss)| RankRow { rank, log_loss })
        .collect();
    write_csv(&dir.join(RANK_CSV), &rows)?;
    Ok(rows)
}

/// Per-method means over test partners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub samples: usize,
    pub nll: f64,
}

/// Merges the per-method CSVs into `out/{env}/` and returns the combined
/// report.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let mut report = EvalReport {
        env: cfg.env.name().into(),
        seed: cfg.seed,
        ..Default::default()
    };
    for &method in &cfg.methods {
        let mdir = cfg.method_dir(method);
        report
            .nll
            .extend(read_csv::<NllRow>(&mdir.join(NLL_CSV), "adapt-eval")?);
        report
            .reward
            .extend(read_csv::<RewardRow>(&mdir.join(REWARD_CSV), "adapt-eval")?);
    }
    let dir = cfg.env_dir();
    write_csv(&dir.join(NLL_CSV), &report.nll)?;
    write_csv(&dir.join(REWARD_CSV), &report.reward)?;
    Ok(report)
}

/// Mean NLL per (method, checkpoint), in method then checkpoint order.
pub fn summarize(report: &EvalReport, methods: &[Method], checkpoints: &[usize]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for m in methods {
        for &c in checkpoints {
            if let Some(nll) = report.mean_nll(m.name(), c) {
                rows.push(SummaryRow {
                    method: m.name().into(),
                    samples: c,
                    nll,
                });
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::bandit();
        cfg.env = EnvSpec::Bandit {
            n_states: 20,
            n_actions: 4,
            p: 0.3,
            seed: 0,
            encoding: StateEncoding::default(),
        };
        cfg.partners.n_train = 3;
        cfg.partners.n_test = 2;
        cfg.partners.rank = 2;
        cfg.partners.train_steps = 60;
        cfg.partners.test_steps = 80;
        cfg.methods = vec![Method::Lrp, Method::Mt];
        cfg.train.epochs = 2;
        cfg.adapt.checkpoints = vec![0, 16, 32];
        cfg.eval.reward_samples = 16;
        cfg.eval.rollout.episodes = 3;
        cfg.eval.rollout.bandit_rounds = 5;
        cfg.ranks = vec![1, 2];
        cfg.fit.iters = 20;
        cfg.out = out.to_path_buf();
        cfg
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = ExperimentConfig::particle();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 3, "methods": ["lrp"]}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.partners.n_train, 16);
        assert_eq!(partial.partners.n_test, 4);
    }

    #[test]
    fn unknown_method_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"methods": ["dqn"]}"#).is_err());
        let mut cfg = ExperimentConfig::bandit();
        cfg.methods = vec![];
        assert!(cfg.validate().is_err());
        cfg.methods = vec![Method::Mt, Method::Mt];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_rank_list_rejected() {
        let mut cfg = ExperimentConfig::bandit();
        cfg.ranks.clear();
        assert!(matches!(cfg.validate(), Err(CliError::Validation(_))));
    }

    #[test]
    fn seeds_differ_by_stage_and_master() {
        let a = StageSeeds(0);
        let b = StageSeeds(1);
        assert_ne!(a.train(Method::Lrp), a.train(Method::Mt));
        assert_ne!(a.train_data(), a.test_data());
        assert_ne!(a.partner(0), b.partner(0));
        assert_eq!(a.eval(2), StageSeeds(0).eval(2));
    }

    #[test]
    fn missing_inputs_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let err = cmd_train(&cfg).unwrap_err();
        assert!(matches!(err, CliError::Missing(_, "gen")), "{err}");
        cmd_gen(&cfg).unwrap();
        let err = cmd_adapt_eval(&cfg).unwrap_err();
        assert!(matches!(err, CliError::Missing(_, "train")), "{err}");
    }

    #[test]
    fn pipeline_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let file = cmd_gen(&cfg).unwrap();
        assert_eq!((file.train.len(), file.test.len()), (3, 2));
        let sweep = cmd_rank_sweep(&cfg).unwrap();
        assert_eq!(sweep.len(), cfg.ranks.len());
        cmd_train(&cfg).unwrap();
        let report = cmd_adapt_eval(&cfg).unwrap();
        // one curve per (method, test partner)
        let curves: std::collections::BTreeSet<_> =
            report.nll.iter().map(|r| (r.method.clone(), r.partner_id)).collect();
        assert_eq!(curves.len(), 2 * 2);
        assert_eq!(report.nll.len(), 2 * 2 * 3);
        assert_eq!(report.reward.len(), 2 * 2 * 2);
        let merged = cmd_report(&cfg).unwrap();
        assert_eq!(merged, report);
        let env_dir = cfg.env_dir();
        for f in [
            ENV_FILE,
            PARTNERS_FILE,
            TRAIN_DATA,
            TEST_DATA,
            MANIFEST,
            RANK_CSV,
            NLL_CSV,
            REWARD_CSV,
        ] {
            assert!(env_dir.join(f).exists(), "{f}");
        }
        let header = fs::read_to_string(env_dir.join(NLL_CSV)).unwrap();
        assert!(header.starts_with("method,partner_id,samples,nll\n"));
        let header = fs::read_to_string(env_dir.join(REWARD_CSV)).unwrap();
        assert!(header.starts_with("method,partner_id,phase,reward,stderr\n"));
        let log = fs::read_to_string(cfg.method_dir(Method::Lrp).join(TRAIN_LOG)).unwrap();
        assert!(log.starts_with("epoch,partner_id,nll\n"));
        let trace = fs::read_to_string(cfg.method_dir(Method::Mt).join("trace_3.csv")).unwrap();
        assert!(trace.starts_with("samples,nll\n"));
        let sweep = fs::read_to_string(env_dir.join(RANK_CSV)).unwrap();
        assert!(sweep.starts_with("rank,log_loss\n"));
    }

    #[test]
    fn training_only_study() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.partners.n_test = 0;
        cmd_gen(&cfg).unwrap();
        cmd_train(&cfg).unwrap();
        let report = cmd_adapt_eval(&cfg).unwrap();
        assert!(report.nll.is_empty() && report.reward.is_empty());
    }

    #[test]
    fn rank_sweep_rejects_particle() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::particle();
        cfg.out = dir.path().to_path_buf();
        assert!(matches!(cmd_rank_sweep(&cfg), Err(CliError::Unsupported(_))));
    }

    #[test]
    fn gen_is_byte_identical_on_rerun() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = tiny(a.path());
        let cb = ExperimentConfig {
            out: b.path().to_path_buf(),
            ..ca.clone()
        };
        cmd_gen(&ca).unwrap();
        cmd_gen(&cb).unwrap();
        for f in [ENV_FILE, PARTNERS_FILE, TRAIN_DATA, TEST_DATA] {
            assert_eq!(
                fs::read(ca.env_dir().join(f)).unwrap(),
                fs::read(cb.env_dir().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}

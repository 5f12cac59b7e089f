use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cmail::cli::{
    cmd_adapt_eval, cmd_gen, cmd_rank_sweep, cmd_report, cmd_train, summarize, CliError, ExperimentConfig,
};
use cmail::eval::Phase;
use cmail::policy::Method;

#[derive(Parser)]
#[command(
    name = "cmail",
    version,
    about = "Partner-conditioned imitation learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the environment, partners and train/test datasets.
    Gen(Common),
    /// Train every configured method.
    Train(Common),
    /// Adapt to each test partner and write NLL / reward CSVs.
    AdaptEval(Common),
    /// Fit tensor trains of increasing rank to the training partners.
    RankSweep(Common),
    /// Merge per-method CSVs and print a summary.
    Report(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Bandit,
    Particle,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults to the chosen preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, value_enum, default_value = "bandit")]
    preset: Preset,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated methods (lrp, mt, lt, mod, maml).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => match self.preset {
                Preset::Bandit => ExperimentConfig::bandit(),
                Preset::Particle => ExperimentConfig::particle(),
            },
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(methods) = &self.methods {
            cfg.methods = methods.clone();
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(n) = self.n_train {
            cfg.partners.n_train = n;
        }
        if let Some(n) = self.n_test {
            cfg.partners.n_test = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Gen(c) => {
            let cfg = c.config()?;
            let file = cmd_gen(&cfg)?;
            println!(
                "wrote {} train + {} test partners to {}",
                file.train.len(),
                file.test.len(),
                cfg.env_dir().display()
            );
        }
        Cmd::Train(c) => {
            let cfg = c.config()?;
            for (method, _) in cmd_train(&cfg)? {
                println!("trained {method} -> {}", cfg.method_dir(method).display());
            }
        }
        Cmd::AdaptEval(c) => {
            let cfg = c.config()?;
            let report = cmd_adapt_eval(&cfg)?;
            println!("{} NLL rows, {} reward rows", report.nll.len(), report.reward.len());
        }
        Cmd::RankSweep(c) => {
            let cfg = c.config()?;
            println!("rank,log_loss");
            for row in cmd_rank_sweep(&cfg)? {
                println!("{},{:.6}", row.rank, row.log_loss);
            }
        }
        Cmd::Report(c) => {
            let cfg = c.config()?;
            let report = cmd_report(&cfg)?;
            println!("method,samples,mean_nll");
            for row in summarize(&report, &cfg.methods, &cfg.adapt.checkpoints) {
                println!("{},{},{:.4}", row.method, row.samples, row.nll);
            }
            println!("method,before,after");
            for m in &cfg.methods {
                if let (Some(b), Some(a)) = (
                    report.mean_reward(m.name(), Phase::Before),
                    report.mean_reward(m.name(), Phase::After),
                ) {
                    println!("{m},{b:.4},{a:.4}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!(
                "ERROR: {}",
                msg.lines()
                    .next()
                    .unwrap_or("invalid arguments")
                    .trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

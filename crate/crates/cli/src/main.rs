//! Command-line runner: simulate click logs, train, compare mechanisms,
//! verify allocation properties and compute bidder equilibria.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use genauction::experiment::{self, ExperimentConfig};
use genauction::Error;

#[derive(Parser, Debug)]
#[command(name = "genauction", version, about = "Generative ad auction simulator")]
struct Cli {
    /// JSON experiment configuration. Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files, overriding the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Log clicks of the pretrained generator on the test queries.
    Simulate,
    /// Run the alternating training loop and save the policy and pCTR model.
    Train,
    /// Train, then compare pretrained, sample-and-select, trained and optimal
    /// mechanisms on held-out queries.
    Compare,
    /// Run the property suite; exits with 4 when a hard check fails.
    Verify {
        /// Point the continuity check at a step allocation, which must fail.
        #[arg(long)]
        negative_control: bool,
    },
    /// Best-response dynamics among the agents of a JSON file.
    Equilibrium {
        #[arg(long)]
        agents: PathBuf,
    },
}

/// Failures with their exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Training(String),
    Property(String),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Training(_) => 3,
            Failure::Property(_) => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => Failure::Config(e.to_string()),
            Error::Training { .. } => Failure::Training(e.to_string()),
            other => Failure::Other(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut value = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => serde_json::json!({}),
    };
    let Some(object) = value.as_object_mut() else {
        return Err(Failure::Config("configuration must be a JSON object".into()));
    };
    if let Some(seed) = cli.seed {
        object.insert("seed".into(), seed.into());
    }
    if !object.contains_key("seed") {
        return Err(Failure::Config("a seed is required, in the configuration or via --seed".into()));
    }
    let mut cfg = ExperimentConfig::from_json(&value.to_string())?;
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let out: &Path = &cfg.output_dir;
    match &cli.command {
        Command::Simulate => {
            let sim = experiment::simulate(&cfg)?;
            sim.write(out).context("writing simulation output")?;
            println!("{} contexts, {} click rows -> {}", sim.contexts.len(), sim.clicks.len(), out.display());
        }
        Command::Train => {
            let t = experiment::train(&cfg)?;
            t.write(out, &cfg).context("writing training output")?;
            for r in &t.training.history.records {
                println!(
                    "epoch {}  bce {:.4}  reward {:.2}  revenue {:.2}  gap {:.4}",
                    r.epoch, r.bce, r.oracle_reward_per_query, r.revenue_per_query, r.unbiasedness_gap
                );
            }
        }
        Command::Compare => {
            let o = experiment::run_experiment(&cfg)?;
            o.write(out).context("writing comparison output")?;
            println!("{:<12}{:>10}{:>10}{:>10}{:>8}", "mechanism", "revenue", "reward", "clicks", "ads");
            for r in &o.report.rows {
                println!(
                    "{:<12}{:>10.2}{:>10.2}{:>10.3}{:>8.2}",
                    r.mechanism, r.revenue_per_query, r.reward_per_query, r.clicks_per_query, r.mean_n_ads
                );
            }
            let kl = o.report.kl_to_optimum;
            println!("KL to optimum: pretrained {:.3}, trained {:.3}", kl.pretrained, kl.trained);
        }
        Command::Verify { negative_control } => {
            let v = experiment::verify_properties(&cfg, *negative_control)?;
            v.write(out).context("writing verification output")?;
            for c in &v.report.checks {
                let kind = if c.hard { "hard" } else { "soft" };
                let status = if c.pass { "PASS" } else { "FAIL" };
                println!("{status} [{kind}] {} ({} failures, worst {:e})", c.name, c.failures, c.worst);
            }
            println!("bid/click Spearman per epoch: {:?}", v.report.spearman_per_epoch);
            if !v.report.hard_pass() {
                return Err(Failure::Property("a hard property check failed".into()));
            }
        }
        Command::Equilibrium { agents } => {
            let agents = experiment::load_agents(agents)?;
            let e = experiment::run_equilibrium(&cfg, &agents)?;
            e.write(out).context("writing equilibrium output")?;
            let s = &e.summary;
            println!(
                "bids {:?}  epsilon {:.4}  converged {}  iterations {}",
                s.bids, s.epsilon, s.converged, s.iterations
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("configuration error: {m}"),
                Failure::Training(m) => eprintln!("training error: {m}"),
                Failure::Property(m) => eprintln!("property failure: {m}"),
                Failure::Other(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}

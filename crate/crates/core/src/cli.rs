//! Command-line front end for the `formseek` binary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::acceptance::{self, ablation_ratios, Options, ScenarioRuns};
use crate::config::{Mode, RunConfig, Setup};
use crate::error::Result;
use crate::output::write_bundle;
use crate::simkernel::{run, run_delta_oracle, run_no_formation, RunOutcome};

#[derive(Debug, Parser)]
#[command(name = "formseek", version, about = "Multi-agent source seeking with formation control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one configuration and write its output bundle.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured mode.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Run with and without formation control from the same start and
    /// compare post-burn-in gaps.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Drive agents with the true gradient plus a perturbation of fixed norm.
    DeltaOracle {
        #[command(flatten)]
        common: Common,
        /// Perturbation norm; defaults to the configured value.
        #[arg(long)]
        delta_bar: Option<f64>,
    },
    /// Check a configuration and list every problem found.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the acceptance criteria and print one verdict per line.
    Acceptance {
        /// Reference scenario; defaults to the built-in one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration; defaults to the built-in reference scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Output directory; takes precedence over the environment and the config.
    #[arg(long, env = "FORMSEEK_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    match s {
        "network" => Ok(Mode::Network),
        "no-formation" => Ok(Mode::NoFormation),
        "delta-oracle" => Ok(Mode::DeltaOracle),
        _ => Err(format!("unknown mode `{s}`; expected network, no-formation or delta-oracle")),
    }
}

fn load(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(rounds) = self.rounds {
            cfg.rounds = rounds;
        }
        if let Some(dir) = &self.out_dir {
            cfg.output.dir = dir.clone();
        }
        Ok(cfg)
    }
}

fn summarize(label: &str, outcome: &RunOutcome, dir: &Path) {
    let m = &outcome.metrics;
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
    println!("{label}: {} rounds, seed {}", m.rounds, m.seed);
    println!("  burn-in round        {}", m.burn_in.map_or("-".into(), |k| k.to_string()));
    println!("  potential threshold  {:.6}", m.potential_threshold);
    println!("  max potential after  {}", opt(m.max_potential_after_burn_in));
    println!("  mean gap after       {}", opt(m.mean_gap_after_burn_in));
    println!(
        "  audit                {} checked, {} agent and {} round violations",
        m.audit.checked, m.audit.agent_violations, m.audit.round_violations
    );
    println!("  bundle               {}", dir.display());
}

fn simulate(label: &str, setup: &Setup, outcome: RunOutcome, dir: &Path) -> Result<RunOutcome> {
    write_bundle(&outcome, setup, dir)?;
    summarize(label, &outcome, dir);
    Ok(outcome)
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Run { common, mode } => {
            let mut cfg = common.config()?;
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            let setup = cfg.build()?;
            let dir = setup.config.output.dir.clone();
            simulate(cfg.mode.name(), &setup, run(&setup)?, &dir)?;
            Ok(true)
        }
        Command::Ablate { common } => {
            let mut cfg = common.config()?;
            cfg.mode = Mode::Network;
            let setup = cfg.build()?;
            let dir = &setup.config.output.dir;
            let formation = simulate("network", &setup, run(&setup)?, &dir.join("network"))?;
            let ablation = simulate("no-formation", &setup, run_no_formation(&setup)?, &dir.join("no-formation"))?;
            let runs = ScenarioRuns { formation: vec![formation], ablation: vec![ablation] };
            match ablation_ratios(&runs)[0] {
                Some(r) => println!("gap ratio (no formation / formation) after burn-in: {r:.4}"),
                None => println!("gap ratio unavailable: the formation run never burned in"),
            }
            Ok(true)
        }
        Command::DeltaOracle { common, delta_bar } => {
            let mut cfg = common.config()?;
            cfg.mode = Mode::DeltaOracle;
            if let Some(d) = delta_bar {
                cfg.oracle.delta_bar = d;
            }
            let setup = cfg.build()?;
            let dir = setup.config.output.dir.clone();
            let outcome = run_delta_oracle(&setup, setup.config.oracle.delta_bar)?;
            simulate("delta-oracle", &setup, outcome, &dir)?;
            Ok(true)
        }
        Command::ValidateConfig { config } => {
            RunConfig::load(&config)?.build()?;
            println!("{}: ok", config.display());
            Ok(true)
        }
        Command::Acceptance { config, seeds } => {
            let options = Options { scenario: load(config.as_deref())?, seeds, ..Options::default() };
            let verdicts = acceptance::run_all(&options)?;
            for v in &verdicts {
                println!("{v}");
            }
            let passed = verdicts.iter().filter(|v| v.passed).count();
            println!("{passed}/{} criteria passed", verdicts.len());
            Ok(passed == verdicts.len())
        }
    }
}

/// Parses arguments, runs the command and maps the result to an exit code.
pub fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

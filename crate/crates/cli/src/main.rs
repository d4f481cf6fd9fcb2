use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dtnbgp::agent::{render_fib, serve_agent, AgentClient};
use dtnbgp::erds::{self, read_dump, ErdsConfig};
use dtnbgp::rib::render_dump;
use dtnbgp::scenario::{run_scenario, ScenarioFile};
use dtnbgp::EndpointId;
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "dtnbgp", version, about = "DTN endpoint reachability over BGP")]
struct Cli {
    /// Log filter, e.g. `info` or `dtnbgp=debug`.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    /// Print machine-readable dumps.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one node: the simulated BP agent and the ERDS.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Register an EID at a running node's agent.
    Announce {
        #[arg(long)]
        config: PathBuf,
        eid: String,
        /// CLA serving the EID; the first configured one by default.
        #[arg(long)]
        cla: Option<String>,
    },
    /// Deregister an EID at a running node's agent.
    Withdraw {
        #[arg(long)]
        config: PathBuf,
        eid: String,
    },
    /// Print a running node's RIB.
    Rib {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a running node's FIB.
    Fib {
        #[arg(long)]
        config: PathBuf,
    },
    /// Execute a scenario file; exits nonzero if any expectation fails.
    Scenario {
        file: PathBuf,
        /// Directory for per-node logs and the step journal.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let config = ErdsConfig::load(&config)?;
            runtime()?.block_on(async {
                let agent = serve_agent(config.bp.listen, config.clas_by_name())
                    .await
                    .with_context(|| format!("cannot start agent on {}", config.bp.listen))?;
                let handle = erds::run(&config).await?;
                tracing::info!(agent = %agent.local_addr(), bgp = ?handle.bgp_addr, "node running");
                tokio::signal::ctrl_c().await?;
                Ok(ExitCode::SUCCESS)
            })
        }
        Command::Announce { config, eid, cla } => {
            let config = ErdsConfig::load(&config)?;
            let eid = EndpointId::parse(&eid).with_context(|| format!("invalid EID {eid:?}"))?;
            let cla = match cla {
                Some(cla) => cla,
                None => match config.clas.first() {
                    Some(c) => c.name.clone(),
                    None => bail!("node has no CLA configured"),
                },
            };
            runtime()?.block_on(async {
                let mut client = AgentClient::connect(config.bp.listen).await?;
                client.register(eid.as_str(), &cla).await?;
                println!("registered {eid} on {cla}");
                Ok(ExitCode::SUCCESS)
            })
        }
        Command::Withdraw { config, eid } => {
            let config = ErdsConfig::load(&config)?;
            let eid = EndpointId::parse(&eid).with_context(|| format!("invalid EID {eid:?}"))?;
            runtime()?.block_on(async {
                let mut client = AgentClient::connect(config.bp.listen).await?;
                client.deregister(eid.as_str()).await?;
                println!("deregistered {eid}");
                Ok(ExitCode::SUCCESS)
            })
        }
        Command::Rib { config } => {
            let config = ErdsConfig::load(&config)?;
            let Some(path) = config.node.rib_dump_path else {
                bail!("node.rib_dump_path is not configured");
            };
            let rows =
                read_dump(&path).with_context(|| format!("cannot read {}", path.display()))?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", render_dump(&rows));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Fib { config } => {
            let config = ErdsConfig::load(&config)?;
            let entries = runtime()?.block_on(async {
                let mut client = AgentClient::connect(config.bp.listen).await?;
                anyhow::Ok(client.fib().await?)
            })?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&entries)?);
            } else {
                print!("{}", render_fib(&entries));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Scenario { file, log_dir } => {
            let scenario = ScenarioFile::load(&file)?;
            let report = run_scenario(&scenario, log_dir.as_deref())?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for step in &report.steps {
                    println!("{}", step.line());
                }
            }
            for step in report.failures() {
                eprintln!("FAIL {}: {}", step.label, step.detail);
            }
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use fleetroute_core::domain::{Domain, PreferenceMode};
use fleetroute_gateway::{commands, GatewayError, RouteRequest, Runtime, Service};

#[derive(Parser)]
#[command(name = "fleetroute", version, about = "Cost- and latency-aware routing across a model fleet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Profile the fleet and write the capability prior store.
    Discover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<u32>,
        /// Build priors from recorded trajectories instead of simulating.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Train the routing policy in simulation and write the checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Evaluate single models and the router; write the score/cost report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated evaluation seeds (default: config eval_seeds + --seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run episodes over the evaluation suites, writing traces.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        preference: Option<PreferenceMode>,
    },
    /// Route one task.
    Route {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        text: String,
        #[arg(long)]
        preference: Option<PreferenceMode>,
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        difficulty: Option<u8>,
        #[arg(long)]
        expected: Option<String>,
    },
    /// Serve the HTTP routing API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        listen: Option<String>,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, GatewayError> {
    match cli.command {
        Command::Discover {
            common,
            trials,
            trajectories,
        } => commands::discover(&Runtime::load(&common.config)?, common.seed, trials, trajectories.as_deref()),
        Command::Train { common, epochs } => commands::train(&Runtime::load(&common.config)?, common.seed, epochs),
        Command::Eval { common, seeds } => commands::eval(&Runtime::load(&common.config)?, common.seed, seeds),
        Command::Simulate {
            common,
            count,
            preference,
        } => commands::simulate(&Runtime::load(&common.config)?, common.seed, count, preference),
        Command::Route {
            common,
            text,
            preference,
            dry_run,
            domain,
            difficulty,
            expected,
        } => {
            let domain = domain
                .map(Domain::new)
                .transpose()
                .map_err(|e| GatewayError::BadRequest(e.to_string()))?;
            let req = RouteRequest {
                text,
                preference,
                dry_run,
                seed: None,
                domain,
                difficulty,
                expected,
            };
            commands::route(Runtime::load(&common.config)?, common.seed, req)
        }
        Command::Serve { common, listen } => {
            let rt = Runtime::load(&common.config)?;
            let listen = listen.unwrap_or_else(|| rt.loaded.config.listen.clone());
            let svc = Arc::new(Service::new(rt)?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(fleetroute_gateway::service::serve(svc, &listen))?;
            Ok(serde_json::json!({"command": "serve", "stopped": true}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(v) => {
            let text = serde_json::to_string_pretty(&v).expect("summary serializes");
            // a closed pipe (`| head`) is not an error worth reporting
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

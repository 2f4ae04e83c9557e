use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use pipeserve_cli::{cmd_plan, cmd_serve, cmd_simulate, cmd_sweep, CliError, SweepAxis};
use pipeserve_core::engine::live::LiveOptions;

#[derive(Debug, Parser)]
#[command(
    name = "pipeserve",
    about = "Pipeline-parallel LLM serving simulator and control plane",
    disable_version_flag = true
)]
struct Cli {
    /// Print name and version as JSON and exit.
    #[arg(long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one configuration and write report.json, events.csv, decisions.csv, transport.csv.
    Simulate {
        #[arg(long, env = "PIPESERVE_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "PIPESERVE_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "PIPESERVE_OUT")]
        out: Option<PathBuf>,
        /// Also replay the trace over loopback sockets and check token counts.
        #[arg(long)]
        live: bool,
        /// Wall seconds per simulated second in the socket run.
        #[arg(long, default_value_t = 1.0, requires = "live")]
        time_scale: f64,
    },
    /// Run a configuration once per value of one parameter.
    Sweep {
        #[arg(long, env = "PIPESERVE_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "PIPESERVE_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "PIPESERVE_OUT")]
        out: Option<PathBuf>,
        /// bandwidth, latency, rate, chunk_size or n_policy.
        #[arg(long, env = "PIPESERVE_SWEEP_AXIS")]
        sweep_axis: String,
        /// Comma-separated values, e.g. `100Mbps,1Gbps,10Gbps`.
        #[arg(long, env = "PIPESERVE_SWEEP_VALUES", value_delimiter = ',', num_args = 0..)]
        sweep_values: Vec<String>,
    },
    /// Print the layer partition for a model on a cluster.
    Plan {
        #[arg(long, env = "PIPESERVE_CLUSTER")]
        cluster: PathBuf,
        #[arg(long, env = "PIPESERVE_MODEL")]
        model: String,
        #[arg(long, env = "PIPESERVE_GPU_TYPE")]
        gpu_type: Option<String>,
        #[arg(long, env = "PIPESERVE_GPU_COUNT", default_value_t = 1)]
        gpu_count: u32,
    },
    /// Host the control API until interrupted.
    Serve {
        #[arg(long, env = "PIPESERVE_LISTEN", default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        #[arg(long, env = "PIPESERVE_CLUSTER")]
        cluster: Option<PathBuf>,
        /// Append-only journal, replayed on start.
        #[arg(long, env = "PIPESERVE_JOURNAL")]
        journal: Option<PathBuf>,
        /// Deterministic API keys, for testing.
        #[arg(long, env = "PIPESERVE_KEY_SEED")]
        key_seed: Option<u64>,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate {
            config,
            seed,
            out,
            live,
            time_scale,
        } => {
            let live = live.then(|| LiveOptions {
                time_scale,
                timeout: Duration::from_secs(3600),
            });
            let (dir, report) = cmd_simulate(&config, seed, out.as_deref(), live)?;
            print!("{report}");
            println!("outputs written to {}", dir.display());
        }
        Command::Sweep {
            config,
            seed,
            out,
            sweep_axis,
            sweep_values,
        } => {
            let axis: SweepAxis = sweep_axis.parse().map_err(CliError::Usage)?;
            let values: Vec<String> = sweep_values.into_iter().filter(|v| !v.trim().is_empty()).collect();
            let path = cmd_sweep(&config, seed, out.as_deref(), axis, &values)?;
            print!("{}", std::fs::read_to_string(&path).unwrap_or_default());
            println!("sweep written to {}", path.display());
        }
        Command::Plan {
            cluster,
            model,
            gpu_type,
            gpu_count,
        } => {
            let plan = cmd_plan(&cluster, &model, gpu_type.as_deref(), gpu_count)?;
            print!("{plan}");
            println!("layers: {:?}", plan.layer_counts());
        }
        Command::Serve {
            listen,
            cluster,
            journal,
            key_seed,
        } => {
            tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_env("PIPESERVE_LOG")
                        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
                )
                .with_writer(std::io::stderr)
                .init();
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            rt.block_on(cmd_serve(listen, cluster.as_deref(), journal.as_deref(), key_seed, async {
                let _ = tokio::signal::ctrl_c().await;
            }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if cli.version {
        println!(
            "{}",
            serde_json::json!({ "name": "pipeserve", "version": env!("CARGO_PKG_VERSION") })
        );
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (simulate, sweep, plan, serve); see --help");
        return ExitCode::from(2);
    };
    match dispatch(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

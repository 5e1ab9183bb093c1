use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use brrace_cli::export::Plot;
use brrace_cli::{FitArgs, Failure, ModelKind, RaceArgs, ScenarioArgs, TraceArgs};
use brrace_core::scenarios::Scenario;
use brrace_core::sim::StopReason;
use brrace_gateway::{Gateway, GatewayOptions};

/// Best-response MPPI racing: simulate, fit models, export traces, serve live sessions.
///
/// BRRACE_THREADS caps the sampling worker threads when the config does not
/// set `race.threads`.
#[derive(Parser)]
#[command(name = "brrace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotArg {
    Xy,
    Speed,
    Costs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Basis,
    Nn,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    S1,
    S2,
    S3,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Run one race offline. Exit 2 if the world faults.
    Race {
        /// TOML config; the built-in default when omitted.
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// JSON input script, or a recorded `.jsonl` trace to replay.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Output directory for trace.jsonl, outcome.json and config.toml.
        #[arg(long, default_value = "race-out")]
        out: PathBuf,
    },
    /// Fit a dynamics model to a CSV dataset and report residuals. Exit 2 if singular.
    Fit {
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "basis")]
        model: ModelArg,
        #[arg(long)]
        out: PathBuf,
        /// Network to evaluate with `--model nn`; random weights otherwise.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Hidden widths of a random network.
        #[arg(long, num_args = 2, value_names = ["H1", "H2"], default_values_t = [32, 32])]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export a trace as an xy SVG or a per-step CSV.
    Trace {
        trace: PathBuf,
        #[arg(long, value_enum)]
        plot: PlotArg,
        #[arg(long)]
        out: PathBuf,
        /// Config naming the track for `xy` (default: config.toml beside the trace).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the bundled acceptance scenarios. Exit 3 if one misses its criterion.
    Scenario {
        #[arg(value_enum)]
        which: ScenarioArg,
        /// Only the first N seeds of each scenario.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve live sessions over WebSocket until SIGINT or SIGTERM.
    Serve {
        /// Default session config; the built-in default when omitted.
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Directory for session replays.
        #[arg(long)]
        replay_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Race {
            config,
            seed,
            duration,
            script,
            out,
        } => {
            let outcome = brrace_cli::race(&RaceArgs {
                config,
                seed,
                duration,
                script,
                out: out.clone(),
            })?;
            println!(
                "{} steps, {:.3} s, stop: {:?}, collisions {}, off-track {}, passes {}",
                outcome.steps,
                outcome.duration,
                outcome.stop_reason,
                outcome.collisions,
                outcome.off_track,
                outcome.pass_events
            );
            println!("wrote {}", out.display());
            if outcome.stop_reason == StopReason::Fault {
                return Err(Failure::run(format!(
                    "world faulted: {}",
                    outcome.fault.unwrap_or_default()
                )));
            }
            Ok(())
        }
        Command::Fit {
            dataset,
            model,
            out,
            init,
            hidden,
            seed,
        } => {
            let summary = brrace_cli::fit(&FitArgs {
                dataset,
                model: match model {
                    ModelArg::Basis => ModelKind::Basis,
                    ModelArg::Nn => ModelKind::Nn,
                },
                out: out.clone(),
                init,
                hidden: [hidden[0], hidden[1]],
                seed,
            })?;
            print!("{summary}");
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Trace {
            trace,
            plot,
            out,
            config,
        } => {
            let plot = match plot {
                PlotArg::Xy => Plot::Xy,
                PlotArg::Speed => Plot::Speed,
                PlotArg::Costs => Plot::Costs,
            };
            let n = brrace_cli::trace(&TraceArgs {
                trace,
                plot,
                out: out.clone(),
                config,
            })?;
            println!("{n} rows -> {}", out.display());
            Ok(())
        }
        Command::Scenario { which, seeds, out } => {
            let scenarios = match which {
                ScenarioArg::S1 => vec![Scenario::S1],
                ScenarioArg::S2 => vec![Scenario::S2],
                ScenarioArg::S3 => vec![Scenario::S3],
                ScenarioArg::All => Scenario::ALL.to_vec(),
            };
            let results = brrace_cli::scenario(&ScenarioArgs { scenarios, seeds, out }, |s, o, ok| {
                println!("{s} {} {}", if ok { "ok  " } else { "FAIL" }, s.describe(o));
                let _ = std::io::stdout().flush();
            })?;
            let mut all = true;
            for r in &results {
                println!(
                    "{}: {}/{} runs passed (need {}) {}",
                    r.scenario,
                    r.passed,
                    r.outcomes.len(),
                    r.required,
                    if r.met() { "PASS" } else { "FAIL" }
                );
                all &= r.met();
            }
            if all {
                Ok(())
            } else {
                Err(Failure {
                    code: 3,
                    message: "scenario criterion not met".into(),
                })
            }
        }
        Command::Serve {
            config,
            port,
            host,
            replay_dir,
        } => serve(config, SocketAddr::new(host, port), replay_dir),
    }
}

fn serve(config: Option<PathBuf>, addr: SocketAddr, replay_dir: Option<PathBuf>) -> Result<(), Failure> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cfg = brrace_cli::load_config(config.as_deref())?;
    let mut options = GatewayOptions::new(cfg);
    options.replay_dir = replay_dir;
    let gateway = Gateway::new(options).map_err(Failure::input)?;

    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::input(format!("runtime: {e}")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::input(format!("cannot listen on {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| Failure::input(format!("cannot listen on {addr}: {e}")))?;
        println!("listening on {local}");
        let _ = std::io::stdout().flush();
        gateway
            .serve(listener, shutdown_signal())
            .await
            .map_err(|e| Failure::run(format!("server error: {e}")))
    })?;
    println!("shut down");
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

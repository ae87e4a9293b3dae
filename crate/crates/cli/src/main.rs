use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use itrain_cli::commands::agent::{AgentOptions, LlmOptions, PolicyKind};
use itrain_cli::commands::replay::ReplayOptions;
use itrain_cli::commands::schedule::ScheduleOptions;
use itrain_cli::commands::send::SendOptions;
use itrain_cli::commands::serve::ServeOptions;
use itrain_cli::commands::{agent, replay, schedule, send, serve};
use tracing_subscriber::EnvFilter;

/// Interactive training: serve a run and steer it while it trains.
#[derive(Parser)]
#[command(name = "itrain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Rule,
    Llm,
}

#[derive(Subcommand)]
enum Command {
    /// Train a run and serve the control API next to it.
    Serve {
        #[arg(long, env = "ITRAIN_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "ITRAIN_PORT", default_value_t = 8000)]
        port: u16,
        #[arg(long, env = "ITRAIN_HOST", default_value = "127.0.0.1")]
        host: String,
        /// Where config, logs, metrics and checkpoints go [default: runs/<unix-millis>].
        #[arg(long, env = "ITRAIN_RUN_DIR")]
        run_dir: Option<PathBuf>,
        /// JSON-lines schedule applied at exact step boundaries.
        #[arg(long, env = "ITRAIN_SCHEDULE")]
        schedule: Option<PathBuf>,
        /// Seconds to keep serving after training ends.
        #[arg(long, env = "ITRAIN_LINGER", default_value_t = 0.0)]
        linger: f64,
        /// Run the numeric core on one thread.
        #[arg(long, env = "ITRAIN_SEQUENTIAL")]
        sequential: bool,
        /// Milliseconds to sleep at every step boundary.
        #[arg(long, env = "ITRAIN_PACE", default_value_t = 0)]
        pace: u64,
    },
    /// Submit one command. Args are key=value; values parse as JSON when they can.
    Send {
        #[arg(env = "ITRAIN_URL")]
        url: String,
        kind: String,
        pairs: Vec<String>,
        /// Args as a JSON object; key=value pairs are merged on top.
        #[arg(long)]
        args: Option<String>,
        /// Wait for the final status on the event stream.
        #[arg(long)]
        wait: bool,
        /// Seconds to wait for a final status.
        #[arg(long, env = "ITRAIN_TIMEOUT", default_value_t = 60.0)]
        timeout: f64,
        #[arg(long)]
        json: bool,
    },
    /// Run the learning-rate agent against a server until training ends.
    Agent {
        #[arg(env = "ITRAIN_URL")]
        url: String,
        #[arg(long, env = "ITRAIN_POLICY", value_enum, default_value = "rule")]
        policy: PolicyArg,
        /// Decide every N metric steps.
        #[arg(long, env = "ITRAIN_CADENCE", default_value_t = 10)]
        cadence: u64,
        /// Prompt template for the llm policy.
        #[arg(long, env = "ITRAIN_TEMPLATE")]
        template: Option<PathBuf>,
        /// Chat-completions URL for the llm policy.
        #[arg(long, env = "ITRAIN_LLM_ENDPOINT")]
        llm_endpoint: Option<String>,
        #[arg(long, env = "ITRAIN_LLM_MODEL", default_value = "default")]
        llm_model: String,
        /// Environment variable that holds the API key.
        #[arg(long, env = "ITRAIN_LLM_KEY_ENV", default_value = "ITRAIN_LLM_API_KEY")]
        llm_key_env: String,
        #[arg(long, env = "ITRAIN_RETRIES", default_value_t = 5)]
        retries: u32,
    },
    /// Re-run a recorded run from its intervention log and compare metrics.
    Replay {
        run_dir: PathBuf,
        /// Config to replay under; must equal the recorded one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        #[arg(long, env = "ITRAIN_SEQUENTIAL")]
        sequential: bool,
    },
    /// Post a JSON-lines schedule to a running server as the run reaches each step.
    Schedule {
        #[arg(env = "ITRAIN_URL")]
        url: String,
        #[arg(long)]
        file: PathBuf,
    },
}

fn seconds(s: f64) -> Duration {
    Duration::try_from_secs_f64(s).unwrap_or_default()
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("ITRAIN_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();

    // Usage errors are validation errors (exit 1); clap would use 2, which
    // is reserved for connection failures.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Serve {
            config,
            port,
            host,
            run_dir,
            schedule,
            linger,
            sequential,
            pace,
        } => serve::run(ServeOptions {
            config,
            host,
            port,
            run_dir,
            schedule,
            linger: seconds(linger),
            sequential,
            pace: Duration::from_millis(pace),
        }),
        Command::Send {
            url,
            kind,
            pairs,
            args,
            wait,
            timeout,
            json,
        } => send::run(SendOptions {
            url,
            kind,
            pairs,
            args_json: args,
            wait,
            timeout: seconds(timeout),
            json,
        }),
        Command::Agent {
            url,
            policy,
            cadence,
            template,
            llm_endpoint,
            llm_model,
            llm_key_env,
            retries,
        } => agent::run(AgentOptions {
            url,
            policy: match policy {
                PolicyArg::Rule => PolicyKind::Rule,
                PolicyArg::Llm => PolicyKind::Llm,
            },
            cadence,
            template,
            llm: LlmOptions {
                endpoint: llm_endpoint,
                model: llm_model,
                key_env: llm_key_env,
            },
            retries,
            backoff: Duration::from_millis(250),
        }),
        Command::Replay {
            run_dir,
            config,
            json,
            sequential,
        } => replay::run(ReplayOptions {
            run_dir,
            config,
            json,
            sequential,
        }),
        Command::Schedule { url, file } => schedule::run(ScheduleOptions { url, file }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("itrain: {f}");
            ExitCode::from(f.exit as u8)
        }
    }
}


use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use docserve_cli::{
    check, check_summary, load_theories, load_trace, replay, serve, write_output, ServeConfig, SessionOptions,
};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

#[derive(Parser)]
#[command(name = "docserve", version, about = "Asynchronous document-processing engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve one engine session over TCP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:0")]
        address: String,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
        /// Forward anything written to raw stdout/stderr to the session.
        #[arg(long)]
        capture_raw: bool,
        /// Read commands on the worker pool as soon as they are defined.
        #[arg(long)]
        forked_read: bool,
    },
    /// Replay an edit trace and report the final state.
    Replay {
        trace: PathBuf,
        /// Theory files opened, fully visible, before the trace starts.
        theories: Vec<PathBuf>,
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long)]
        allow_failures: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Check theory files in one shot.
    Check {
        theories: Vec<PathBuf>,
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct SessionArgs {
    /// Engine address; without it an engine runs in this process.
    #[arg(long)]
    address: Option<String>,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
    #[arg(long, default_value_t = 300)]
    debounce_ms: u64,
    #[arg(long, default_value_t = 60)]
    prune_s: u64,
    #[arg(long)]
    virtual_clock: bool,
    /// Forked READ in an in-process engine.
    #[arg(long)]
    forked_read: bool,
}

fn default_workers() -> usize {
    docserve::eval::SchedulerConfig::default().workers
}

impl SessionArgs {
    fn options(&self) -> SessionOptions {
        SessionOptions {
            address: self.address.clone(),
            workers: self.workers,
            debounce: Duration::from_millis(self.debounce_ms),
            prune_interval: Duration::from_secs(self.prune_s),
            virtual_clock: self.virtual_clock,
            forked_read: self.forked_read,
        }
    }
}

fn init_logging() {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"));
    if let Some(path) = std::env::var_os("DOCSERVE_LOG") {
        match std::fs::OpenOptions::new().create(true).append(true).open(&path) {
            Ok(file) => {
                builder
                    .filter_level(log::LevelFilter::Info)
                    .target(env_logger::Target::Pipe(Box::new(file)));
            }
            Err(e) => eprintln!("cannot open log {}: {e}", PathBuf::from(path).display()),
        }
    }
    builder.init();
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Serve {
            address,
            workers,
            capture_raw,
            forked_read,
        } => {
            let config = ServeConfig {
                workers,
                capture_raw,
                forked_read,
            };
            serve(&address, config, |bound| {
                println!("listening on {bound}");
                let _ = std::io::stdout().flush();
            })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay {
            trace,
            theories,
            session,
            allow_failures,
            report,
            json,
        } => {
            let events = load_trace(&trace)?;
            let theories = load_theories(&theories)?;
            let r = replay(&session.options(), &events, &theories)?;
            write_output(report.as_deref(), &if json { r.to_json() } else { r.to_text() })?;
            let ok = r.converged && (allow_failures || r.failed() == 0);
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Check {
            theories,
            session,
            report,
            json,
        } => {
            let theories = load_theories(&theories)?;
            let r = check(&session.options(), &theories)?;
            print!("{}", check_summary(&r));
            if let Some(path) = report {
                write_output(Some(&path), &if json { r.to_json() } else { r.to_text() })?;
            }
            Ok(if r.converged && r.failed() == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("docserve: {e:#}");
            ExitCode::from(2)
        }
    }
}

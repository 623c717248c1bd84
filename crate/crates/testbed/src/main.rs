use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use nusa_core::als::Als;
use nusa_core::clock::SystemClock;
use nusa_core::protocol::Server;
use nusa_core::Error;
use nusa_testbed::config::Config;
use nusa_testbed::runner::{run_scenario, RunOptions};
use nusa_testbed::scan::{self, GroundTruth};
use nusa_testbed::scenario::Scenario;
use nusa_testbed::sweep::{SweepDaemon, TickHook};
use nusa_testbed::{HarnessError, HarnessResult};
use parking_lot::Mutex;

#[derive(Parser)]
#[command(name = "nusa", version, about = "Pseudonymized EHR deployment and scenario harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Boot the login server and its stores, and serve the wire protocol.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Replay a scenario against a fresh deployment.
    Run {
        scenario: PathBuf,
        /// Defaults to the seed in the scenario header.
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the JSON report; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Keep the deployment here instead of a temporary directory.
        #[arg(long)]
        state_dir: Option<PathBuf>,
        /// Run grouped steps of different actors concurrently.
        #[arg(long)]
        parallel_actors: bool,
    },
    /// Look for identity and PID side by side in a deployment's files.
    Scan {
        state_dir: PathBuf,
        /// Ground truth file; defaults to <state-dir>/harness/ground_truth.jsonl.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Sweep expired grants and sessions on a schedule.
    Sweep {
        #[arg(long)]
        interval: u64,
        #[arg(long)]
        config: PathBuf,
        /// Stop after this many ticks.
        #[arg(long)]
        ticks: Option<u64>,
    },
}

fn open_deployment(cfg: &Config) -> HarnessResult<Arc<Als>> {
    let als = Als::open(cfg.deployment_dir(), cfg.als_config(None), Arc::new(SystemClock))?;
    for p in &cfg.principals {
        match als.enroll(p.clone()) {
            Ok(()) | Err(Error::AlreadyExists(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Arc::new(als))
}

fn serve(config: &Path) -> HarnessResult<ExitCode> {
    let cfg = Config::load(config)?;
    let als = open_deployment(&cfg)?;
    let server = Server::start(als.clone(), cfg.listen.as_str())?;
    println!("listening on {}", server.local_addr());
    let _sweeper = match cfg.sweep_interval_secs {
        Some(secs) => {
            let log: Arc<Mutex<dyn Write + Send>> = Arc::new(Mutex::new(std::io::stderr()));
            Some(SweepDaemon::start(als, Duration::from_secs(secs), log, None)?)
        }
        None => None,
    };
    server.wait();
    Ok(ExitCode::SUCCESS)
}

fn run(path: &Path, options: RunOptions, report_path: Option<&Path>) -> HarnessResult<ExitCode> {
    let scenario = Scenario::load(path)?;
    let report = run_scenario(&scenario, options)?;
    for s in &report.steps {
        let mark = if s.passed { "PASS" } else { "FAIL" };
        let why = s.detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default();
        eprintln!(
            "{mark} line {} {} {}: expected {}, got {}{why}",
            s.line, s.actor, s.op, s.expected, s.got
        );
    }
    for v in &report.scan {
        eprintln!("VIOLATION {}:{} {:?} {}", v.file, v.line, v.kind, v.fiscal_code);
    }
    let verdict = if report.passed { "passed" } else { "failed" };
    eprintln!("scenario {} (seed {}): {verdict}", report.scenario, report.seed);
    match report_path {
        Some(p) => report.write(p)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn scan_cmd(state_dir: &Path, truth: Option<&Path>) -> HarnessResult<ExitCode> {
    let truth_path = truth
        .map(Path::to_path_buf)
        .unwrap_or_else(|| state_dir.join("harness/ground_truth.jsonl"));
    let truth = GroundTruth::load(&truth_path)?;
    let deployment = state_dir.join("deployment");
    let root = if deployment.is_dir() {
        deployment
    } else {
        state_dir.to_path_buf()
    };
    let violations = scan::scan(&root, &truth)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&violations).expect("violations serialize")
    );
    eprintln!("{} patients checked, {} violations", truth.len(), violations.len());
    Ok(if violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn sweep(interval: u64, config: &Path, ticks: Option<u64>) -> HarnessResult<ExitCode> {
    if interval == 0 {
        return Err(HarnessError::Invalid("sweep interval must be positive".into()));
    }
    let cfg = Config::load(config)?;
    let als = open_deployment(&cfg)?;
    let (tx, rx) = mpsc::channel();
    let hook: TickHook = Box::new(move |_| {
        let _ = tx.send(());
    });
    let log: Arc<Mutex<dyn Write + Send>> = Arc::new(Mutex::new(std::io::stdout()));
    let daemon = SweepDaemon::start(als, Duration::from_secs(interval), log, Some(hook))?;
    match ticks {
        Some(n) => {
            for _ in 0..n {
                if rx.recv().is_err() {
                    break;
                }
            }
            daemon.stop();
        }
        None => while rx.recv().is_ok() {},
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config } => serve(&config),
        Command::Run {
            scenario,
            seed,
            report,
            state_dir,
            parallel_actors,
        } => run(
            &scenario,
            RunOptions {
                state_dir,
                seed,
                parallel_actors,
            },
            report.as_deref(),
        ),
        Command::Scan { state_dir, truth } => scan_cmd(&state_dir, truth.as_deref()),
        Command::Sweep {
            interval,
            config,
            ticks,
        } => sweep(interval, &config, ticks),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("nusa: {e}");
            match e {
                HarnessError::Parse(_) | HarnessError::Invalid(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

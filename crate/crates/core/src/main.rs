use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tapauth::crypto::{gen_secret, SecretKey};
use tapauth::harness::serve::{serve, ServeSession};
use tapauth::harness::{
    data_dir, default_outputs, format_secrecy, run_scenario, run_suite, verify_transcript,
    write_metrics, write_transcript, HarnessError, RunOptions, ScenarioConfig,
};
use tapauth::messages::PrincipalId;
use tapauth::server::{FileStore, Server, ServerConfig};

/// Simulator and reference server for proximity-bound phone-to-desktop login.
#[derive(Parser)]
#[command(name = "tapauth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its transcript and metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Override the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Transcript path (default: $TAPAUTH_DATA_DIR/<name>-<seed>.jsonl).
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Metrics path (default: the transcript path with `.metrics.json`).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Record full payloads in transport events.
        #[arg(long)]
        capture_payloads: bool,
        /// Persist the server in this (empty) directory.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Run every scenario config in a directory.
    Suite {
        #[arg(long)]
        dir: PathBuf,
        /// Glob over scenario names.
        #[arg(long)]
        filter: Option<String>,
        /// Where transcripts go (default: $TAPAUTH_DATA_DIR).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Re-check secrecy and OK provenance on a saved transcript.
    Verify {
        #[arg(long)]
        transcript: PathBuf,
    },
    /// Serve line-delimited JSON requests on stdin/stdout.
    Serve {
        /// Hex-encoded 32-byte SK. Without it one is derived from --seed.
        #[arg(long)]
        sk: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// User store (default: $TAPAUTH_DATA_DIR/server).
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

enum Failure {
    Assertion,
    Error(HarnessError),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            scenario,
            seed,
            transcript,
            metrics,
            capture_payloads,
            store,
        } => {
            let mut cfg = ScenarioConfig::load(&scenario)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_scenario(
                &cfg,
                &RunOptions {
                    capture_payloads,
                    store_dir: store,
                },
            )?;
            let tpath = transcript.unwrap_or_else(|| default_outputs(&data_dir(), &report).0);
            let mpath = metrics.unwrap_or_else(|| tpath.with_extension("metrics.json"));
            write_transcript(&tpath, &report.transcript)?;
            write_metrics(&mpath, &report.metrics)?;
            println!("scenario    {}", report.name);
            println!("seed        {}", report.seed);
            println!(
                "outcome     {}",
                tapauth::harness::outcome_name(report.outcome)
            );
            println!("transcript  {}", tpath.display());
            println!("metrics     {}", mpath.display());
            println!("digest      {}", report.transcript_digest);
            if report.kind.is_attack() {
                println!(
                    "attack      {}",
                    serde_json::to_string(&report.attack_outcome()).expect("serializes")
                );
            }
            for a in &report.assertions {
                println!(
                    "{} {:<28} {}",
                    if a.passed { "PASS" } else { "FAIL" },
                    a.name,
                    a.detail
                );
            }
            match report.first_failure() {
                None => Ok(()),
                Some(a) => {
                    eprintln!("assertion failed: {} ({})", a.name, a.detail);
                    Err(Failure::Assertion)
                }
            }
        }
        Command::Suite {
            dir,
            filter,
            out_dir,
        } => {
            let (summary, reports) = run_suite(&dir, filter.as_deref(), &RunOptions::default())?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            let out = out_dir.unwrap_or_else(data_dir);
            for r in &reports {
                let (t, m) = default_outputs(&out, r);
                write_transcript(&t, &r.transcript)?;
                write_metrics(&m, &r.metrics)?;
            }
            print!("{}", summary.table());
            if summary.all_passed() {
                Ok(())
            } else {
                Err(Failure::Assertion)
            }
        }
        Command::Verify { transcript } => {
            let report = verify_transcript(&transcript)?;
            print!("{}", format_secrecy(&report));
            if report.all_safe() {
                Ok(())
            } else {
                Err(Failure::Assertion)
            }
        }
        Command::Serve { sk, seed, store } => {
            let sk = match sk {
                Some(h) => hex::decode(h.trim())
                    .ok()
                    .and_then(|b| SecretKey::from_slice(&b))
                    .ok_or_else(|| HarnessError::Config("--sk must be 64 hex digits".into()))?,
                None => {
                    use rand::SeedableRng;
                    gen_secret(&mut rand_chacha::ChaCha20Rng::seed_from_u64(seed))
                }
            };
            let dir = store.unwrap_or_else(|| data_dir().join("server"));
            let fs = FileStore::open(&dir).map_err(HarnessError::from)?;
            let docs = fs.load_all().map_err(HarnessError::from)?;
            let server = Server::restore(
                PrincipalId::new("server"),
                sk,
                ServerConfig::default(),
                docs,
            )
            .with_persistence(fs);
            let mut session = ServeSession::new(server, seed);
            let stdin = io::stdin();
            serve(&mut session, stdin.lock(), io::stdout().lock()).map_err(|source| {
                HarnessError::Io {
                    path: PathBuf::from("<stdio>"),
                    source,
                }
            })?;
            Ok(())
        }
    }
}

//! Scenario runner: configs in, transcripts, metrics and verdicts out.
//!
//! Everything the `tapauth` binary does goes through this module, so tests
//! can drive the same code paths without a subprocess.

mod config;
mod metrics;
mod scenario;
pub mod serve;
mod suite;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{
    strip_comments, AttackerSpec, BiometricParams, Controls, CrashSpec, DeviceSpec, Expectations,
    ResolvedExpectations, RunOutcome, ScenarioConfig, ScenarioKind, Timings, TopologySpec,
    VictimSpec, SECRET_NAMES,
};
pub use metrics::{RunMetrics, StepTiming};
pub use scenario::{
    login_completed, outcome_name, run_scenario, stage, victim_login, AssertionResult, Cast,
    RunOptions, RunReport, Staged,
};
pub use suite::{load_suite, run_suite, SuiteEntry, SuiteSummary};

use crate::adversary::{secrecy_report, SecrecyReport};
use crate::server::StoreError;
use crate::sim::transcript::{Transcript, TranscriptError};
use crate::sim::TopologyError;

/// Environment variable that overrides where runs write their outputs.
pub const DATA_DIR_ENV: &str = "TAPAUTH_DATA_DIR";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("malformed transcript: {0}")]
    Transcript(#[from] TranscriptError),
    #[error("duplicate scenario name {name:?} in {first} and {second}")]
    DuplicateName {
        name: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("invalid filter: {0}")]
    Filter(String),
}

impl HarnessError {
    /// Process exit status for this error. Assertion failures are not
    /// errors and exit with 1 elsewhere.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

/// `$TAPAUTH_DATA_DIR`, or `tapauth-data` under the working directory.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("tapauth-data"))
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.to_owned(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

/// Default output paths for a run: `<dir>/<name>-<seed>.jsonl` and
/// `<dir>/<name>-<seed>.metrics.json`.
pub fn default_outputs(dir: &Path, report: &RunReport) -> (PathBuf, PathBuf) {
    let stem = format!("{}-{}", report.name, report.seed);
    (
        dir.join(format!("{stem}.jsonl")),
        dir.join(format!("{stem}.metrics.json")),
    )
}

pub fn write_transcript(path: &Path, t: &Transcript) -> Result<(), HarnessError> {
    write_file(path, &t.to_jsonl())
}

pub fn write_metrics(path: &Path, m: &RunMetrics) -> Result<(), HarnessError> {
    write_file(path, &m.to_json())
}

/// Re-runs the secrecy and authenticity analysis on a transcript.
pub fn verify_transcript_text(text: &str) -> Result<SecrecyReport, HarnessError> {
    let t = Transcript::parse(text)?;
    Ok(secrecy_report(
        &t.observed_terms(),
        &t.declared_secrets(),
        &t.accepted_oks(),
    ))
}

pub fn verify_transcript(path: &Path) -> Result<SecrecyReport, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_owned(),
        source,
    })?;
    verify_transcript_text(&text)
}

/// One line per secret and per accepted OK.
pub fn format_secrecy(r: &SecrecyReport) -> String {
    let mut s = String::new();
    for v in &r.secrets {
        s.push_str(&format!(
            "{:<10} {}\n",
            v.name,
            if v.safe { "SAFE" } else { "UNSAFE" }
        ));
    }
    for a in &r.authenticity {
        let who = |p: &Option<crate::messages::PrincipalId>| {
            p.as_ref().map_or("?".to_string(), |p| p.to_string())
        };
        s.push_str(&format!(
            "OK {:<20} sealed_by={} old_aid_holder={} {}\n",
            a.em,
            who(&a.sealed_by),
            who(&a.old_aid_holder),
            if a.ok { "AUTHENTIC" } else { "FORGED" }
        ));
    }
    s.push_str(&format!("knowledge closure: {} terms\n", r.knowledge_size));
    s
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    run_scenario, HarnessError, RunOptions, RunOutcome, RunReport, ScenarioConfig, ScenarioKind,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub kind: ScenarioKind,
    pub outcome: RunOutcome,
    pub sim_duration_ms: u64,
    pub assertions_passed: usize,
    pub assertions_total: usize,
    pub first_failure: Option<String>,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.assertions_passed == self.assertions_total
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub entries: Vec<SuiteEntry>,
    pub warnings: Vec<String>,
}

impl SuiteSummary {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(SuiteEntry::passed)
    }

    pub fn table(&self) -> String {
        let w = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut s = format!(
            "{:<w$}  {:<18} {:>10}  {:<10} {}\n",
            "name", "outcome", "sim_ms", "assertions", "status"
        );
        for e in &self.entries {
            let status = match &e.first_failure {
                None => "PASS".to_string(),
                Some(f) => format!("FAIL ({f})"),
            };
            s.push_str(&format!(
                "{:<w$}  {:<18} {:>10}  {:<10} {}\n",
                e.name,
                super::outcome_name(e.outcome),
                e.sim_duration_ms,
                format!("{}/{}", e.assertions_passed, e.assertions_total),
                status
            ));
        }
        s
    }
}

/// Loads every `*.json` config in `dir` whose name matches `filter`.
/// Names must be unique across the whole directory, filtered or not.
pub fn load_suite(
    dir: &Path,
    filter: Option<&str>,
) -> Result<Vec<(PathBuf, ScenarioConfig)>, HarnessError> {
    let pattern = filter
        .map(glob::Pattern::new)
        .transpose()
        .map_err(|e| HarnessError::Filter(e.to_string()))?;
    let io = |source| HarnessError::Io {
        path: dir.to_owned(),
        source,
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut out = Vec::new();
    for p in paths {
        let c = ScenarioConfig::load(&p)?;
        if let Some(first) = seen.insert(c.name.clone(), p.clone()) {
            return Err(HarnessError::DuplicateName {
                name: c.name,
                first,
                second: p,
            });
        }
        if pattern.as_ref().is_none_or(|pat| pat.matches(&c.name)) {
            out.push((p, c));
        }
    }
    Ok(out)
}

pub fn run_suite(
    dir: &Path,
    filter: Option<&str>,
    opts: &RunOptions,
) -> Result<(SuiteSummary, Vec<RunReport>), HarnessError> {
    let configs = load_suite(dir, filter)?;
    let mut summary = SuiteSummary::default();
    if configs.is_empty() {
        summary.warnings.push(match filter {
            Some(f) => format!("no scenario in {} matches {f:?}", dir.display()),
            None => format!("no scenario configs in {}", dir.display()),
        });
    }
    let mut reports = Vec::new();
    for (_, c) in configs {
        let mut o = opts.clone();
        if let Some(d) = &opts.store_dir {
            o.store_dir = Some(d.join(&c.name));
        }
        let r = run_scenario(&c, &o)?;
        summary.entries.push(SuiteEntry {
            name: r.name.clone(),
            kind: r.kind,
            outcome: r.outcome,
            sim_duration_ms: r.sim_duration_ms,
            assertions_passed: r.assertions.iter().filter(|a| a.passed).count(),
            assertions_total: r.assertions.len(),
            first_failure: r
                .first_failure()
                .map(|a| format!("{}: {}", a.name, a.detail)),
        });
        reports.push(r);
    }
    Ok((summary, reports))
}

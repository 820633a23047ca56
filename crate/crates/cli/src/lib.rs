//! Library behind the `ialab` binary. Each command resolves its settings,
//! runs, writes into an [`output::OutputDir`] and returns a [`Report`] whose
//! checks decide the exit code.

pub mod analyze;
pub mod checks;
pub mod config;
pub mod output;
pub mod pipeline;
pub mod repro;

use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ialab::models::ModelError),
    #[error(transparent)]
    Task(#[from] ialab::tasks::TaskError),
    #[error("internal: {0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// One tolerance check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark} {}: {}", self.name, self.detail)
    }
}

/// What a command did: where it wrote, under which root seed, and which
/// checks it ran.
#[derive(Clone, Debug)]
pub struct Report {
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,
    pub checks: Vec<Check>,
    /// Extra `key=value` facts for the summary line.
    pub facts: Vec<(String, String)>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary_line(&self) -> String {
        let ok = self.checks.iter().filter(|c| c.passed).count();
        let mut s = format!(
            "{} seed={} checks={}/{} out={}",
            self.command,
            self.seed,
            ok,
            self.checks.len(),
            self.out.display()
        );
        for (k, v) in &self.facts {
            s += &format!(" {k}={v}");
        }
        s
    }
}

/// Where a command writes, and whether it may replace existing files.
#[derive(Clone, Debug)]
pub struct Target {
    pub out: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub overwrite: bool,
}

impl Target {
    /// `--out` if given, else `<IALAB_OUT or ialab-out>/<run name>`.
    pub fn dir(&self, run: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| output::default_root().join(run))
    }
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    /// Failing makes the process exit nonzero.
    Hard,
    /// Reported only.
    Trend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Module invariant the check instantiates, as `module::property`.
    pub invariant: String,
    pub kind: CheckKind,
    pub passed: bool,
    pub value: f64,
    pub threshold: String,
    pub detail: String,
}

/// A file written by a run, with its CSV column schema when tabular.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub description: String,
    pub columns: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub subcommand: String,
    pub checks: Vec<Check>,
    pub artifacts: Vec<Artifact>,
    /// `(stage, seconds)`.
    pub wall_times: Vec<(String, f64)>,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(subcommand: &str) -> Self {
        Self { subcommand: subcommand.into(), ..Default::default() }
    }

    pub fn hard(&mut self, name: &str, invariant: &str, passed: bool, value: f64, threshold: &str, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            invariant: invariant.into(),
            kind: CheckKind::Hard,
            passed,
            value,
            threshold: threshold.into(),
            detail,
        });
    }

    pub fn trend(&mut self, name: &str, invariant: &str, passed: bool, value: f64, threshold: &str, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            invariant: invariant.into(),
            kind: CheckKind::Trend,
            passed,
            value,
            threshold: threshold.into(),
            detail,
        });
    }

    pub fn hard_failures(&self) -> usize {
        self.checks.iter().filter(|c| c.kind == CheckKind::Hard && !c.passed).count()
    }

    pub fn merge(&mut self, other: RunReport) {
        self.checks.extend(other.checks);
        self.artifacts.extend(other.artifacts);
        self.wall_times.extend(other.wall_times);
        self.notes.extend(other.notes);
    }

    /// Writes `contents` under `out` and records the artifact.
    pub fn emit(&mut self, out: &Path, name: &str, contents: &str, description: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(out)?;
        let path = out.join(name);
        std::fs::write(&path, contents)?;
        let columns = name.ends_with(".csv").then(|| contents.lines().next().unwrap_or("").to_string());
        self.artifacts.push(Artifact { path: PathBuf::from(name), description: description.into(), columns });
        Ok(())
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<36} {:<6} {:<5} {:>14}  {:<16} invariant", "check", "kind", "pass", "value", "threshold");
        for c in &self.checks {
            let kind = match c.kind {
                CheckKind::Hard => "hard",
                CheckKind::Trend => "trend",
            };
            let _ = writeln!(
                s,
                "{:<36} {:<6} {:<5} {:>14.6e}  {:<16} {}",
                c.name,
                kind,
                if c.passed { "yes" } else { "NO" },
                c.value,
                c.threshold,
                c.invariant
            );
        }
        for (stage, t) in &self.wall_times {
            let _ = writeln!(s, "time {stage}: {t:.2} s");
        }
        s
    }

    /// `MANIFEST`: one block per artifact with its column schema.
    pub fn manifest(&self) -> String {
        let mut s = format!("dwe-lab {} run: {}\n\n", crate::cache::CODE_VERSION, self.subcommand);
        for a in &self.artifacts {
            let _ = writeln!(s, "{}", a.path.display());
            let _ = writeln!(s, "  {}", a.description);
            if let Some(c) = &a.columns {
                let _ = writeln!(s, "  columns: {c}");
            }
        }
        s
    }
}

//! Run directories: `config.json`, `metrics.csv`, extra CSV tables and `report.md`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// A small string table written both as CSV and as a markdown table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n|{}\n", self.header.join(" | "), "---|".repeat(self.header.len()));
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
        out
    }
}

/// Fixed-precision formatting used in every CSV.
pub fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'a str,
    config: &'a RunConfig,
}

/// Collects the outputs of one run and writes them into its directory.
pub struct RunOutput {
    dir: PathBuf,
    title: String,
    metrics: Table,
    extra: Vec<(String, Table)>,
    notes: Vec<String>,
}

impl RunOutput {
    pub fn new(dir: &Path, title: &str, metrics: Table) -> Self {
        Self { dir: dir.to_path_buf(), title: title.into(), metrics, extra: Vec::new(), notes: Vec::new() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Adds `<name>.csv` next to `metrics.csv`.
    pub fn table(&mut self, name: &str, table: Table) {
        self.extra.push((name.into(), table));
    }

    pub fn note(&mut self, line: String) {
        self.notes.push(line);
    }

    pub fn write(&self, config: &RunConfig) -> Result<(), CliError> {
        fs::create_dir_all(&self.dir)?;
        let prov = RunRecord { version: gptree::VERSION, config };
        let json = serde_json::to_string_pretty(&prov).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(self.dir.join("config.json"), json.clone() + "\n")?;
        fs::write(self.dir.join("metrics.csv"), self.metrics.to_csv())?;
        for (name, t) in &self.extra {
            fs::write(self.dir.join(format!("{name}.csv")), t.to_csv())?;
        }
        let mut md = format!("# {}\n\ngptree {}\n\n## metrics\n\n{}", self.title, gptree::VERSION, self.metrics.to_markdown());
        for (name, t) in &self.extra {
            let _ = write!(md, "\n## {name}\n\n{}", t.to_markdown());
        }
        if !self.notes.is_empty() {
            md.push_str("\n## notes\n\n");
            for n in &self.notes {
                let _ = writeln!(md, "- {n}");
            }
        }
        let _ = write!(md, "\n## configuration\n\n```json\n{json}\n```\n");
        fs::write(self.dir.join("report.md"), md)?;
        Ok(())
    }
}

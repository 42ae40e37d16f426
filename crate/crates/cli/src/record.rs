use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cbdrive_core::data::canonical_json;
use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::args::{Cli, Command, ReplayArgs};

/// Bad flag combinations found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub struct RunContext {
    pub argv: Vec<String>,
    pub cwd: PathBuf,
}

/// `run.json`: the command line, where it ran, and every resolved setting.
#[derive(Serialize, Deserialize)]
pub struct RunRecord {
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub resolved: serde_json::Value,
}

impl RunContext {
    /// Creates `out` and writes `out/run.json`.
    pub fn record(
        &self,
        out: &Path,
        subcommand: &str,
        seed: Option<u64>,
        resolved: impl Serialize,
    ) -> Result<()> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let rec = RunRecord {
            argv: self.argv.clone(),
            cwd: self.cwd.clone(),
            subcommand: subcommand.to_string(),
            seed,
            resolved: serde_json::to_value(resolved)?,
        };
        write_text(&out.join("run.json"), &canonical_json(&rec)?)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Rebuilds the recorded command, redirected to `--out` when given, and
/// moves into the recorded working directory so relative paths resolve.
pub fn replay(args: &ReplayArgs) -> Result<(Command, RunContext)> {
    let raw = std::fs::read(&args.run_json)
        .with_context(|| format!("reading {}", args.run_json.display()))?;
    let rec: RunRecord = serde_json::from_slice(&raw)
        .with_context(|| format!("parsing {}", args.run_json.display()))?;
    let mut argv = rec.argv;
    if let Some(out) = &args.out {
        let abs =
            std::path::absolute(out).with_context(|| format!("resolving {}", out.display()))?;
        argv.push("--out".into());
        argv.push(abs.to_string_lossy().into_owned());
    }
    std::env::set_current_dir(&rec.cwd)
        .with_context(|| format!("entering {}", rec.cwd.display()))?;
    let cli = Cli::try_parse_from(&argv)
        .map_err(|e| UsageError(format!("recorded command no longer parses: {e}")))?;
    Ok((cli.command, RunContext { argv, cwd: rec.cwd }))
}

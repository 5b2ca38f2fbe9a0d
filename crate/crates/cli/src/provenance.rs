//! Every artifact carries the tool version, the subcommand, the run
//! configuration as loaded and the command-line options it was produced
//! from. The output directory is not recorded, so identical runs in
//! different directories write identical files.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const TOOL: &str = "tttlab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Value,
    pub options: Value,
}

impl Provenance {
    pub fn new(command: &str, config: &impl Serialize, options: &impl Serialize) -> CliResult<Self> {
        Ok(Provenance {
            tool: TOOL,
            version: VERSION,
            command: command.to_string(),
            config: to_value(config)?,
            options: to_value(options)?,
        })
    }

    /// Comment lines for line-oriented text formats.
    pub fn comment_lines(&self) -> Vec<String> {
        vec![
            format!("{} {} {}", self.tool, self.version, self.command),
            format!("config {}", line(&self.config)),
            format!("options {}", line(&self.options)),
        ]
    }

    /// `# `-prefixed preamble placed before the CSV header.
    pub fn csv_preamble(&self) -> String {
        self.comment_lines().iter().map(|l| format!("# {l}\n")).collect()
    }

    /// XML comment for SVG output; `--` cannot appear inside one.
    pub fn xml_comment(&self) -> String {
        format!("<!-- {} -->", self.comment_lines().join(" | ").replace("--", "- -"))
    }

    pub fn envelope(&self, result: &impl Serialize) -> CliResult<Value> {
        Ok(serde_json::json!({
            "provenance": self,
            "result": to_value(result)?,
        }))
    }
}

fn to_value(v: &impl Serialize) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))
}

fn line(v: &Value) -> String {
    serde_json::to_string(v).expect("plain data")
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_csv(path: &Path, prov: &Provenance, body: &str) -> CliResult<()> {
    write_text(path, &(prov.csv_preamble() + body))
}

pub fn write_json(path: &Path, prov: &Provenance, result: &impl Serialize) -> CliResult<()> {
    let v = prov.envelope(result)?;
    let mut s = serde_json::to_string_pretty(&v).expect("serializable");
    s.push('\n');
    write_text(path, &s)
}

/// Reads a CSV written by [`write_csv`] without its comment preamble.
pub fn strip_preamble(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

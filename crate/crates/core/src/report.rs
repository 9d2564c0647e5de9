//! JSON artifacts: the cloak report and the per-command run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Pattern summary echoed in a cloak report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternInfo {
    pub kind: String,
    pub source: String,
    pub dimension: usize,
    pub points: usize,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloakReport {
    pub schema: u32,
    pub mode: String,
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
    pub seed: u64,
    pub encoder_seed: u64,
    pub view: Option<String>,
    pub pattern: Option<PatternInfo>,
    pub mask_pixels: usize,
    pub initial_loss: f64,
    pub loss_trace: Vec<f64>,
    pub best_index: usize,
    pub best_loss: f64,
    /// Pattern Chamfer distance of the best float iterate (targeted only).
    pub final_cd: Option<f64>,
    /// The same distance recomputed on the 8-bit image that was written.
    pub shipped_cd: Option<f64>,
    pub linf_delta: f64,
    pub linf_delta_8bit: u8,
    pub elapsed_ms: u64,
}

/// Provenance record written beside every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// Unix time in milliseconds at start; 0 in reproducible mode.
    pub started_unix_ms: u64,
    pub elapsed_ms: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, reproducible: bool) -> Self {
        let started_unix_ms = if reproducible {
            0
        } else {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0)
        };
        Self {
            schema: SCHEMA_VERSION,
            tool: "geocloak".into(),
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            started_unix_ms,
            elapsed_ms: 0,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> &mut Self {
        self.inputs.insert(role.into(), path.display().to_string());
        self
    }

    pub fn output(&mut self, role: &str, path: &Path) -> &mut Self {
        self.outputs.insert(role.into(), path.display().to_string());
        self
    }

    pub fn seed(&mut self, role: &str, seed: u64) -> &mut Self {
        self.seeds.insert(role.into(), seed);
        self
    }

    pub fn finish(&mut self, elapsed: Duration, reproducible: bool) {
        self.elapsed_ms = if reproducible { 0 } else { elapsed.as_millis() as u64 };
    }
}

/// `<output>.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| crate::Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

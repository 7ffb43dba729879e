//! Machine-readable run reports. A report embeds the effective config and
//! seed so a run can be replayed exactly, a flat `checks` array CI can gate
//! on, and free-form numeric observations. Serialization is deterministic:
//! fixed field order, no timestamps.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Observation {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub version: u32,
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub checks: Vec<Check>,
    pub observations: Vec<Observation>,
}

impl Report {
    pub fn new(command: &str, seed: u64, config: ExperimentConfig) -> Self {
        Self {
            version: REPORT_VERSION,
            command: command.to_string(),
            seed,
            config,
            checks: Vec::new(),
            observations: Vec::new(),
        }
    }

    /// Records a check that passes when `|value| <= tolerance`.
    pub fn check_abs(&mut self, name: impl Into<String>, value: f64, tolerance: f64) {
        self.checks.push(Check {
            name: name.into(),
            value,
            tolerance,
            pass: value.abs() <= tolerance,
        });
    }

    pub fn observe(&mut self, name: impl Into<String>, value: f64) {
        self.observations.push(Observation {
            name: name.into(),
            value,
        });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).context("serializing report")?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing report {}", path.display()))
    }
}

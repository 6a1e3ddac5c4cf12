//! Benchmark grid configuration (JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};
use wave_core::datagen::{Example, GenConfig, Setting};
use wave_core::runtime::RunConfig;

use crate::error::{BenchError, Result};

/// Dimension above which a cell needs `allow_large`.
pub const DEFAULT_MAX_P: usize = 500;

fn default_repetitions() -> usize {
    50
}

fn default_max_p() -> usize {
    DEFAULT_MAX_P
}

fn default_ls_reference_max_p() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Estimator settings shared by all cells; the loss is set per cell.
    #[serde(default)]
    pub run: RunConfig,
    /// The full least-squares reference is computed for cells with p up to this.
    #[serde(default = "default_ls_reference_max_p")]
    pub ls_reference_max_p: usize,
    #[serde(default = "default_max_p")]
    pub max_p: usize,
    #[serde(default)]
    pub allow_large: bool,
    pub cells: Vec<CellConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub example: Example,
    pub setting: Setting,
    pub k: usize,
    pub n_per_worker: usize,
    pub p: usize,
    #[serde(default)]
    pub repetitions: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl CellConfig {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!(
                "{:?}-{:?}-K{}-n{}-p{}",
                self.example, self.setting, self.k, self.n_per_worker, self.p
            )
        })
    }

    pub fn gen_config(&self, seed: u64) -> GenConfig {
        GenConfig {
            example: self.example,
            setting: self.setting,
            k: self.k,
            n_per_worker: self.n_per_worker,
            p: self.p,
            seed,
        }
    }
}

impl BenchConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: BenchConfig = serde_json::from_str(text).map_err(|e| BenchError::Config {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self, origin: &str) -> Result<()> {
        let fail = |message: String| BenchError::Config {
            path: origin.to_string(),
            message,
        };
        if self.cells.is_empty() {
            return Err(fail("field `cells`: at least one cell is required".into()));
        }
        if self.repetitions == 0 {
            return Err(fail("field `repetitions`: must be at least 1".into()));
        }
        self.run.validate().map_err(|e| fail(format!("field `run`: {e}")))?;
        for (i, cell) in self.cells.iter().enumerate() {
            if cell.repetitions == Some(0) {
                return Err(fail(format!("cells[{i}].repetitions: must be at least 1")));
            }
            if cell.p > self.max_p && !self.allow_large {
                return Err(fail(format!(
                    "cells[{i}].p: {} exceeds max_p {}; set allow_large to run it",
                    cell.p, self.max_p
                )));
            }
            cell.gen_config(0)
                .validate()
                .map_err(|e| fail(format!("cells[{i}]: {e}")))?;
        }
        Ok(())
    }

    pub fn repetitions_for(&self, cell: &CellConfig) -> usize {
        cell.repetitions.unwrap_or(self.repetitions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "repetitions": 2,
        "cells": [{"example": "Linear", "setting": "Homogeneous", "k": 2, "n_per_worker": 50, "p": 6}]
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = BenchConfig::from_json(MINIMAL, "inline").unwrap();
        assert_eq!(cfg.repetitions, 2);
        assert_eq!(cfg.run, RunConfig::default());
        assert_eq!(cfg.cells[0].label(), "Linear-Homogeneous-K2-n50-p6");
    }

    #[test]
    fn errors_name_the_field() {
        let bad = MINIMAL.replace("\"k\": 2", "\"k\": \"two\"");
        let msg = BenchConfig::from_json(&bad, "grid.json").unwrap_err().to_string();
        assert!(msg.contains("grid.json") && msg.contains("line"), "{msg}");

        let bad = MINIMAL.replace("\"p\": 6", "\"p\": 6, \"q\": 1");
        let msg = BenchConfig::from_json(&bad, "grid.json").unwrap_err().to_string();
        assert!(msg.contains("unknown field `q`"), "{msg}");

        let bad = MINIMAL.replace("Homogeneous", "Heterogeneous").replace("Linear", "HuberLinear");
        let msg = BenchConfig::from_json(&bad, "grid.json").unwrap_err().to_string();
        assert!(msg.contains("cells[0]"), "{msg}");

        let bad = MINIMAL.replace("\"p\": 6", "\"p\": 600");
        assert!(BenchConfig::from_json(&bad, "g").unwrap_err().to_string().contains("max_p"));
    }
}

//! Run configuration: one JSON document carrying every module's settings.
//!
//! The layout nests the existing per-module config structs instead of
//! flattening them, so a document reads in the same order the pipeline runs:
//! swing-up planning, then the catch-phase controller, then the Monte-Carlo
//! experiment (which owns the ground-truth noise model). Unknown keys are
//! rejected at every level so typos fail loudly instead of silently falling
//! back to defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::sim::ExperimentConfig;
use crate::swingup::{SolverOptions, SwingupProblem};

/// Version of the on-disk document this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON in {path}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported schema version {found} (this build reads version {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("config invariant violated: {0}")]
    Invalid(String),
}

/// Complete settings for one run of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Offline planning problem; carries the physical parameters.
    pub swingup: SwingupProblem,
    /// Knobs of the swing-up trajectory solver.
    pub solver: SolverOptions,
    /// Catch-phase output-feedback controller.
    pub controller: ControllerConfig,
    /// Monte-Carlo sweep settings; carries the ground-truth noise model.
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            swingup: SwingupProblem::default(),
            solver: SolverOptions::default(),
            controller: ControllerConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    /// Cross-module consistency checks on top of the per-module validators.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        if self.swingup.horizon == 0 {
            return Err(ConfigError::Invalid("swing-up horizon must be positive".into()));
        }
        if !(self.swingup.dt > 0.0) {
            return Err(ConfigError::Invalid("swing-up dt must be positive".into()));
        }
        let planner_bounds_ordered = (0..6)
            .all(|i| self.swingup.x_bounds.lo[i] < self.swingup.x_bounds.hi[i])
            && (0..2).all(|i| self.swingup.f_bounds.lo[i] < self.swingup.f_bounds.hi[i]);
        if !planner_bounds_ordered {
            return Err(ConfigError::Invalid(
                "swing-up state/force bounds must have lo < hi on every axis".into(),
            ));
        }
        self.controller
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.experiment
            .validate(&self.controller)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Pretty JSON with a trailing newline; the exact on-disk format.
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Read, parse and validate a config document.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_json_string()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_json_string();
        let parsed: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_top_level_and_nested() {
        let mut doc: serde_json::Value =
            serde_json::from_str(&RunConfig::default().to_json_string()).unwrap();
        doc["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(doc.clone()).is_err());

        let mut doc: serde_json::Value =
            serde_json::from_str(&RunConfig::default().to_json_string()).unwrap();
        doc["controller"]["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(doc).is_err());
    }

    #[test]
    fn load_rejects_wrong_schema_version_and_bad_invariants() {
        let dir = tempfile::tempdir().unwrap();

        let mut cfg = RunConfig::default();
        cfg.schema_version = 99;
        let path = dir.path().join("v99.json");
        cfg.save(&path).unwrap();
        match RunConfig::load(&path) {
            Err(ConfigError::SchemaVersion { found: 99, expected }) => {
                assert_eq!(expected, SCHEMA_VERSION)
            }
            other => panic!("expected schema-version error, got {other:?}"),
        }

        let mut cfg = RunConfig::default();
        cfg.experiment.task_steps = 30; // controller horizon stays 25
        let path = dir.path().join("mismatch.json");
        cfg.save(&path).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Invalid(_))));

        let path = dir.path().join("broken.json");
        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn shipped_default_config_matches_defaults_exactly() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
        let text = fs::read_to_string(&path).expect("configs/default.json exists");
        assert_eq!(text, RunConfig::default().to_json_string(), "regenerate configs/default.json");
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }
}

//! JSON run configuration with defaults for every key.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::distill::SltTrainConfig;
use crate::error::{Error, Result};
use crate::scout::ScoutConfig;
use crate::student::SltConfig;
use crate::teacher::{BackboneConfig, BaseTrainConfig, FreeFlowConfig, MixtureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub runs: usize,
    pub n: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 5,
            runs: 30,
            n: 100,
        }
    }
}

/// Artifact file names, resolved against the command's `--out` directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub base_checkpoint: String,
    pub base_metrics: String,
    pub flow_checkpoint: String,
    pub flow_metrics: String,
    pub student_checkpoint: String,
    pub student_metrics: String,
    pub scout_report: String,
    pub sample: String,
    pub bench_report: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            base_checkpoint: "base.dflb".into(),
            base_metrics: "base_metrics.csv".into(),
            flow_checkpoint: "flow_map.dflb".into(),
            flow_metrics: "freeflow_metrics.csv".into(),
            student_checkpoint: "slt.dflb".into(),
            student_metrics: "slt_metrics.csv".into(),
            scout_report: "scout_report.csv".into(),
            sample: "sample.txt".into(),
            bench_report: "bench.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mixture: MixtureSpec,
    pub teacher: BackboneConfig,
    pub student: SltConfig,
    pub base: BaseTrainConfig,
    pub freeflow: FreeFlowConfig,
    pub slt: SltTrainConfig,
    pub scout: ScoutConfig,
    pub bench: BenchConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mixture: MixtureSpec::default(),
            teacher: BackboneConfig::default(),
            student: SltConfig::default(),
            base: BaseTrainConfig::default(),
            freeflow: FreeFlowConfig::default(),
            slt: SltTrainConfig::default(),
            scout: ScoutConfig::default(),
            bench: BenchConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Fills keys absent from `user` with `defaults`, reporting each one.
///
/// Objects carrying different `kind` tags are variant switches and are
/// taken from `user` whole.
fn merge(user: &mut Value, defaults: &Value, path: &str, filled: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(d)) = (user, defaults) else {
        return;
    };
    if u.get("kind").is_some() && u.get("kind") != d.get("kind") {
        return;
    }
    for (key, dv) in d {
        let here = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match u.get_mut(key) {
            Some(uv) => merge(uv, dv, &here, filled),
            None => {
                filled.push(here);
                u.insert(key.clone(), dv.clone());
            }
        }
    }
}

impl RunConfig {
    /// Parses JSON text. Returns the config and the dotted keys that were
    /// filled from defaults.
    pub fn from_json_str(text: &str) -> Result<(Self, Vec<String>)> {
        let mut user: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !user.is_object() {
            return Err(Error::Config("run config must be a JSON object".into()));
        }
        let defaults = serde_json::to_value(RunConfig::default())?;
        let mut filled = Vec::new();
        merge(&mut user, &defaults, "", &mut filled);
        let config: RunConfig =
            serde_json::from_value(user).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok((config, filled))
    }

    /// Reads a config file, logging a notice per defaulted key.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Config(format!("config file `{}` not found", path.display()))
            }
            _ => Error::Io(e),
        })?;
        let (config, filled) = Self::from_json_str(&text)?;
        for key in &filled {
            info!("config key `{key}` not set, using default");
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let dist = self.mixture.build()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.slt.validate()?;
        if dist.dim() != self.teacher.data_dim || dist.dim() != self.student.data_dim {
            return Err(Error::Config(
                "mixture, teacher and student must share data_dim".into(),
            ));
        }
        if dist.components() != self.teacher.classes || self.student.classes != self.teacher.classes
        {
            return Err(Error::Config(
                "class count must equal the number of mixture components for teacher and student"
                    .into(),
            ));
        }
        if self.student.teacher_hidden != self.teacher.block.hidden
            || self.student.teacher_depth != self.teacher.depth
        {
            return Err(Error::Config(
                "student.teacher_hidden / teacher_depth must match the teacher".into(),
            ));
        }
        if self.scout.n == 0 || self.bench.n == 0 {
            return Err(Error::Config("candidate counts must be positive".into()));
        }
        if self.scout.y >= self.teacher.classes {
            return Err(Error::Config(format!(
                "scout.y = {} but there are {} classes",
                self.scout.y, self.teacher.classes
            )));
        }
        if self.bench.runs < 30 {
            return Err(Error::Config("bench.runs must be at least 30".into()));
        }
        Ok(())
    }
}
